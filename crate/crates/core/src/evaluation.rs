//! Offline evaluation: track-overlap F1 and familiarity of the top-1
//! recommendation, lesioned variants of the model, simple baselines, and
//! the true-pair distance analysis.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::ComputeMode;
use crate::data::{Corpus, Playlist, SideInfoVector, TrackId};
use crate::encoder::{Lesion, PlaylistEmbedding, QuickListsModel, TowerKind};
use crate::recommender::RecommendationIndex;
use crate::rng::{self, streams};
use crate::track2vec::TrackEmbeddingTable;
use crate::training::{distance, random_pairing};
use crate::{Error, Result};

/// Harmonic mean of precision and recall over track sets; 0 when the sets
/// are disjoint.
pub fn f1_overlap(pred: &Playlist, actual: &Playlist) -> f64 {
    let p = pred.track_set();
    let a = actual.track_set();
    let hits = p.intersection(&a).count() as f64;
    if hits == 0.0 {
        return 0.0;
    }
    let precision = hits / p.len() as f64;
    let recall = hits / a.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Percentage of distinct predicted tracks already in the current playlist.
pub fn familiarity(pred: &Playlist, current: &Playlist) -> f64 {
    let p = pred.track_set();
    let c = current.track_set();
    100.0 * p.intersection(&c).count() as f64 / p.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    RandomTracks,
    PopularTracks,
    RepeatCurrent,
    Word2vecAverage,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [
        BaselineKind::RandomTracks,
        BaselineKind::PopularTracks,
        BaselineKind::RepeatCurrent,
        BaselineKind::Word2vecAverage,
    ];

    pub fn label(self) -> &'static str {
        match self {
            BaselineKind::RandomTracks => "random tracks",
            BaselineKind::PopularTracks => "popular tracks",
            BaselineKind::RepeatCurrent => "current playlist as future",
            BaselineKind::Word2vecAverage => "word2vec average",
        }
    }
}

/// Corpus statistics the baselines draw on.
#[derive(Debug, Clone)]
pub struct BaselineContext<'a> {
    pub vocab_size: usize,
    /// Per-track play counts (typically from the training split).
    pub play_counts: Vec<u64>,
    /// Empirical future-playlist lengths to sample from.
    pub lengths: Vec<usize>,
    pub table: Option<&'a TrackEmbeddingTable>,
}

impl<'a> BaselineContext<'a> {
    /// Popularity from `train`, lengths from the futures of `test`.
    pub fn new(train: &Corpus, test: &Corpus, table: Option<&'a TrackEmbeddingTable>) -> Self {
        Self {
            vocab_size: train.vocab_size(),
            play_counts: train.play_counts(),
            lengths: test.future_lengths(),
            table,
        }
    }

    /// Track indices by descending play count, ties by index.
    pub fn popularity_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.vocab_size).collect();
        order.sort_by(|&a, &b| self.play_counts[b].cmp(&self.play_counts[a]).then(a.cmp(&b)));
        order
    }
}

fn to_playlist(ids: impl IntoIterator<Item = usize>) -> Result<Playlist> {
    Playlist::new(ids.into_iter().map(|i| TrackId(i as u32)).collect())
}

/// One predicted playlist per test user.
pub fn run_baseline(kind: BaselineKind, test: &Corpus, ctx: &BaselineContext<'_>, seed: u64) -> Result<Vec<Playlist>> {
    if test.is_empty() {
        return Err(Error::EmptyCorpus("no test users to evaluate".into()));
    }
    let usable: Vec<usize> = ctx.lengths.iter().copied().filter(|&l| l >= 1 && l <= ctx.vocab_size).collect();
    if kind != BaselineKind::RepeatCurrent && usable.is_empty() {
        return Err(Error::invalid("no playlist length fits the vocabulary"));
    }
    let mut rng = rng::stream(rng::mix(&[seed, kind as u64]), streams::BASELINE);
    let popular = (kind == BaselineKind::PopularTracks).then(|| ctx.popularity_order());
    let table = match (kind, ctx.table) {
        (BaselineKind::Word2vecAverage, None) => {
            return Err(Error::invalid("word2vec baseline needs a track embedding table"))
        }
        (_, t) => t,
    };
    let mut out = Vec::with_capacity(test.len());
    for ex in test.examples() {
        if kind == BaselineKind::RepeatCurrent {
            out.push(ex.current.clone());
            continue;
        }
        // Sampling only among lengths that fit is the same as resampling
        // until one does.
        let len = usable[rng.gen_range(0..usable.len())];
        let pred = match kind {
            BaselineKind::RandomTracks => to_playlist(sample(&mut rng, ctx.vocab_size, len).into_iter())?,
            BaselineKind::PopularTracks => to_playlist(popular.as_ref().expect("computed above")[..len].iter().copied())?,
            BaselineKind::Word2vecAverage => {
                let table = table.expect("checked above");
                to_playlist(nearest_to_mean(table, &ex.current, len)?)?
            }
            BaselineKind::RepeatCurrent => unreachable!(),
        };
        out.push(pred);
    }
    Ok(out)
}

/// The `len` tracks with highest cosine to the mean vector of `current`,
/// ties by index. Tracks of `current` are not excluded.
fn nearest_to_mean(table: &TrackEmbeddingTable, current: &Playlist, len: usize) -> Result<Vec<usize>> {
    let d = table.dim();
    let mut mean = vec![0.0; d];
    for &t in current.tracks() {
        if t.index() >= table.vocab_size() {
            return Err(Error::OutOfVocab { track: t.index(), vocab_size: table.vocab_size() });
        }
        for (m, v) in mean.iter_mut().zip(table.vector(t)) {
            *m += v;
        }
    }
    let mean_norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tensor = table.as_tensor();
    let mut scored: Vec<(usize, f64)> = (0..table.vocab_size())
        .map(|i| {
            let row = tensor.row(i);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let cos = if n == 0.0 || mean_norm == 0.0 {
                0.0
            } else {
                row.iter().zip(&mean).map(|(a, b)| a * b).sum::<f64>() / (n * mean_norm)
            };
            (i, cos)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().take(len).map(|(i, _)| i).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionKind {
    Full,
    NoSide,
    NoCurrent,
    ReversedCurrent,
}

impl LesionKind {
    pub const ALL: [LesionKind; 4] =
        [LesionKind::Full, LesionKind::NoSide, LesionKind::NoCurrent, LesionKind::ReversedCurrent];

    pub fn label(self) -> &'static str {
        match self {
            LesionKind::Full => "quick lists",
            LesionKind::NoSide => "no side info",
            LesionKind::NoCurrent => "no current playlist",
            LesionKind::ReversedCurrent => "reversed current playlist",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            LesionKind::Full => "full",
            LesionKind::NoSide => "no_side",
            LesionKind::NoCurrent => "no_current",
            LesionKind::ReversedCurrent => "reversed_current",
        }
    }
}

pub const RANDOM_PAIRING: &str = "random_pairing";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub key: String,
    pub label: String,
    pub mean_f1: f64,
    /// Percent.
    pub mean_familiarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceRow {
    pub key: String,
    pub mean_distance: f64,
    /// `(mean − full mean) / full mean × 100`.
    pub pct_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user: String,
    pub model: String,
    pub distance: Option<f64>,
    pub f1: Option<f64>,
    pub familiarity: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub users: usize,
    pub models: Vec<ModelRow>,
    pub distances: Vec<DistanceRow>,
    pub per_user: Vec<UserRecord>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

impl EvalReport {
    pub fn model(&self, key: &str) -> Option<&ModelRow> {
        self.models.iter().find(|r| r.key == key)
    }

    pub fn distance(&self, key: &str) -> Option<&DistanceRow> {
        self.distances.iter().find(|r| r.key == key)
    }

    fn push_predictions(&mut self, key: &str, label: &str, test: &Corpus, preds: &[Playlist], distances: Option<&[f64]>) {
        let mut f1s = Vec::with_capacity(preds.len());
        let mut fams = Vec::with_capacity(preds.len());
        for (i, (ex, pred)) in test.examples().iter().zip(preds).enumerate() {
            let f1 = f1_overlap(pred, &ex.future);
            let fam = familiarity(pred, &ex.current);
            f1s.push(f1);
            fams.push(fam);
            self.per_user.push(UserRecord {
                user: ex.user_id.clone(),
                model: key.to_string(),
                distance: distances.map(|d| d[i]),
                f1: Some(f1),
                familiarity: Some(fam),
            });
        }
        self.models.push(ModelRow {
            key: key.to_string(),
            label: label.to_string(),
            mean_f1: mean(&f1s),
            mean_familiarity: mean(&fams),
        });
    }

    /// Scores baseline predictions and appends them to the report.
    pub fn add_baselines(
        &mut self,
        test: &Corpus,
        ctx: &BaselineContext<'_>,
        kinds: &[BaselineKind],
        seed: u64,
    ) -> Result<()> {
        for &kind in kinds {
            let preds = run_baseline(kind, test, ctx, seed)?;
            let key = serde_json::to_value(kind)?.as_str().expect("unit variant").to_string();
            self.push_predictions(&key, kind.label(), test, &preds, None);
        }
        Ok(())
    }

    /// Fixed-width table: model rows (F1, familiarity) then the distance
    /// analysis.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<30} {:>8} {:>12}", "Model", "F1", "Familiarity");
        for r in &self.models {
            let _ = writeln!(out, "{:<30} {:>8.4} {:>11.1}%", r.label, r.mean_f1, r.mean_familiarity);
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<30} {:>14} {:>12}", "True-pair distance", "mean", "vs full");
        for r in &self.distances {
            let _ = writeln!(out, "{:<30} {:>14.4} {:>+11.1}%", r.key, r.mean_distance, r.pct_change);
        }
        let _ = writeln!(out, "\n{} test users", self.users);
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Per-user rows: `user,lesion,distance,f1,familiarity`.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("user,lesion,distance,f1,familiarity\n");
        for r in &self.per_user {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.user,
                r.model,
                opt(r.distance),
                opt(r.f1),
                opt(r.familiarity)
            );
        }
        out
    }

    /// Writes `report.txt`, `report.json` and `per_user.csv` into `dir`.
    pub fn write_all(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.txt"), self.to_table())?;
        fs::write(dir.join("report.json"), self.to_json()?)?;
        fs::write(dir.join("per_user.csv"), self.to_csv())?;
        Ok(())
    }
}

/// Current-tower query for a user under a lesion.
pub fn lesioned_query(
    model: &QuickListsModel,
    current: &Playlist,
    side: &SideInfoVector,
    lesion: LesionKind,
) -> Result<PlaylistEmbedding> {
    match lesion {
        LesionKind::Full => model.encode_lesioned(current, side, Lesion::NONE),
        LesionKind::NoSide => model.encode_lesioned(current, side, Lesion::NO_SIDE),
        LesionKind::NoCurrent => model.encode_lesioned(current, side, Lesion::NO_PLAYLIST),
        LesionKind::ReversedCurrent => model.encode_lesioned(&current.reversed(), side, Lesion::NONE),
    }
}

/// Scores the top-1 recommendation and the true-pair distance for every
/// test user under each lesion, plus a random-pairing control. Lesion
/// `Full` is always evaluated first so percent changes have a reference.
pub fn evaluate_model(
    model: &QuickListsModel,
    index: &RecommendationIndex,
    test: &Corpus,
    lesions: &[LesionKind],
    seed: u64,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::EmptyCorpus("no test users to evaluate".into()));
    }
    index.check_model(model)?;
    let metric = index.metric();
    let future_side = model.has_side_branch(TowerKind::Future);
    let futures: Vec<PlaylistEmbedding> = test
        .examples()
        .iter()
        .map(|ex| {
            let side = future_side.then_some(&ex.side);
            Ok(model.forward(TowerKind::Future, Some(ex.future.tracks()), side, ComputeMode::Infer)?.0)
        })
        .collect::<Result<_>>()?;

    let mut order: Vec<LesionKind> = vec![LesionKind::Full];
    order.extend(lesions.iter().copied().filter(|&l| l != LesionKind::Full));
    let mut seen = BTreeSet::new();
    order.retain(|l| seen.insert(l.key()));

    let mut report = EvalReport { users: test.len(), ..EvalReport::default() };
    let mut full_distances = Vec::new();
    let mut full_queries = Vec::new();
    for lesion in order {
        let mut preds = Vec::with_capacity(test.len());
        let mut dists = Vec::with_capacity(test.len());
        for (ex, fut) in test.examples().iter().zip(&futures) {
            let q = lesioned_query(model, &ex.current, &ex.side, lesion)?;
            let top = index.search(q.as_slice(), 1)?[0];
            preds.push(index.candidate(top.candidate).clone());
            dists.push(distance(q.as_slice(), fut.as_slice(), metric)?);
            if lesion == LesionKind::Full {
                full_queries.push(q);
            }
        }
        report.push_predictions(lesion.key(), lesion.label(), test, &preds, Some(&dists));
        report.distances.push(DistanceRow { key: lesion.key().to_string(), mean_distance: mean(&dists), pct_change: 0.0 });
        if lesion == LesionKind::Full {
            full_distances = dists;
        }
    }

    if test.len() >= 2 {
        let pairing = random_pairing(test.len(), seed, streams::EVAL_PAIRING);
        let mut dists = Vec::with_capacity(test.len());
        for (i, &j) in pairing.iter().enumerate() {
            let d = distance(full_queries[i].as_slice(), futures[j].as_slice(), metric)?;
            dists.push(d);
            report.per_user.push(UserRecord {
                user: test.examples()[i].user_id.clone(),
                model: RANDOM_PAIRING.to_string(),
                distance: Some(d),
                f1: None,
                familiarity: None,
            });
        }
        report.distances.push(DistanceRow { key: RANDOM_PAIRING.into(), mean_distance: mean(&dists), pct_change: 0.0 });
    }
    let full = mean(&full_distances);
    for row in &mut report.distances {
        row.pct_change = (row.mean_distance - full) / full * 100.0;
    }
    Ok(report)
}
