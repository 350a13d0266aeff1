//! Pairwise ranking objective and the training loop.
//!
//! For a user with current-state embedding `v_c`, true future playlist
//! `v_p` and an in-batch random future `v_n`, the score is
//! `x̂ = d(v_c, v_n) − d(v_c, v_p)`, positive when the true future is
//! closer. The loss is `softplus(−x̂) = −ln σ(x̂)` averaged over triplets,
//! plus an L2 penalty on both towers' final dense weights.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, l2_penalty, l2_penalty_grad, AdamConfig, ComputeMode, GradBuffer};
use crate::data::Corpus;
use crate::encoder::{PlaylistEmbedding, QuickListsModel, TowerCache, TowerKind};
use crate::rng::{self, streams};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Euclidean,
    /// `1 − cos(a, b)`; a zero vector has cosine 0 with everything.
    Cosine,
    /// `−a·b`. Not a metric and may be negative, but smaller still means
    /// closer.
    DotDistance,
}

fn check_widths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("embedding widths differ: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn distance(a: &[f64], b: &[f64], metric: Metric) -> Result<f64> {
    check_widths(a, b)?;
    Ok(match metric {
        Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        Metric::Cosine => {
            let (na, nb) = (norm(a), norm(b));
            if na == 0.0 || nb == 0.0 {
                1.0
            } else {
                1.0 - (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
            }
        }
        Metric::DotDistance => -dot(a, b),
    })
}

/// Gradients of `distance(a, b)` with respect to `a` and `b`. At
/// non-differentiable points (a = b for Euclidean, zero vectors for
/// Cosine) the zero subgradient is used.
pub fn distance_grad(a: &[f64], b: &[f64], metric: Metric) -> Result<(Vec<f64>, Vec<f64>)> {
    check_widths(a, b)?;
    Ok(match metric {
        Metric::Euclidean => {
            let d = distance(a, b, metric)?;
            if d == 0.0 {
                (vec![0.0; a.len()], vec![0.0; b.len()])
            } else {
                let ga: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y) / d).collect();
                let gb = ga.iter().map(|g| -g).collect();
                (ga, gb)
            }
        }
        Metric::Cosine => {
            let (na, nb) = (norm(a), norm(b));
            if na == 0.0 || nb == 0.0 {
                (vec![0.0; a.len()], vec![0.0; b.len()])
            } else {
                let c = dot(a, b) / (na * nb);
                let ga = a.iter().zip(b).map(|(x, y)| -(y / (na * nb) - c * x / (na * na))).collect();
                let gb = a.iter().zip(b).map(|(x, y)| -(x / (na * nb) - c * y / (nb * nb))).collect();
                (ga, gb)
            }
        }
        Metric::DotDistance => (b.iter().map(|v| -v).collect(), a.iter().map(|v| -v).collect()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletScore {
    pub x_hat: f64,
    pub d_pos: f64,
    pub d_neg: f64,
}

pub fn score_triplet(current: &[f64], positive: &[f64], negative: &[f64], metric: Metric) -> Result<TripletScore> {
    let d_pos = distance(current, positive, metric)?;
    let d_neg = distance(current, negative, metric)?;
    Ok(TripletScore { x_hat: d_neg - d_pos, d_pos, d_neg })
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `−ln σ(x̂)`.
pub fn triplet_loss(x_hat: f64) -> f64 {
    softplus(-x_hat)
}

/// Mean triplet loss plus `l2` (the already-scaled weight penalty).
pub fn bpr_loss(scores: &[TripletScore], l2: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("loss over an empty batch"));
    }
    Ok(scores.iter().map(|s| triplet_loss(s.x_hat)).sum::<f64>() / scores.len() as f64 + l2)
}

/// For each of `batch_size` examples, `n_neg` batch positions drawn
/// uniformly (with replacement) from the other examples.
pub fn sample_negatives(batch_size: usize, n_neg: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::invalid("in-batch negatives need a batch of at least 2"));
    }
    let mut rng = rng::stream(seed, streams::NEGATIVES);
    Ok((0..batch_size)
        .map(|i| {
            (0..n_neg)
                .map(|_| {
                    let j = rng.gen_range(0..batch_size - 1);
                    if j >= i {
                        j + 1
                    } else {
                        j
                    }
                })
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub batch_size: usize,
    pub negatives_per_positive: usize,
    pub seed: u64,
    pub metric: Metric,
    /// Save a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr0: 1e-3,
            lr_decay_factor: 0.25,
            lr_decay_every: 10,
            batch_size: 64,
            negatives_per_positive: 1,
            seed: 0,
            metric: Metric::Euclidean,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::invalid(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::invalid(format!("lr_decay_factor must be in (0, 1], got {}", self.lr_decay_factor)));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::invalid("lr_decay_every must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be at least 2"));
        }
        if self.negatives_per_positive == 0 {
            return Err(Error::invalid("negatives_per_positive must be at least 1"));
        }
        Ok(())
    }

    /// Learning rate for 0-based `epoch`: `lr0 · factor^⌊epoch / every⌋`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// Score distribution of one split under a fixed random pairing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub mean_loss: f64,
    pub mean_x_hat: f64,
    pub p25_x_hat: f64,
    pub p75_x_hat: f64,
    pub mean_d_pos: f64,
    pub mean_d_neg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0-based epoch index.
    pub epoch: usize,
    pub lr: f64,
    /// Mean minibatch objective during the epoch (dropout active).
    pub batch_loss: f64,
    pub train: SplitStats,
    /// `None` when the test split has fewer than two users.
    pub test: Option<SplitStats>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Statistics of the untrained model.
    pub initial_train: Option<SplitStats>,
    pub initial_test: Option<SplitStats>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn learning_rates(&self) -> Vec<f64> {
        self.epochs.iter().map(|r| r.lr).collect()
    }

    /// One row per (epoch, split); the untrained model appears as epoch
    /// `init` with an empty learning rate.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,mean_loss,mean_xhat,p25_xhat,p75_xhat,lr\n");
        let mut row = |epoch: &str, split: &str, s: &SplitStats, lr: &str| {
            let _ = writeln!(
                out,
                "{epoch},{split},{},{},{},{},{lr}",
                s.mean_loss, s.mean_x_hat, s.p25_x_hat, s.p75_x_hat
            );
        };
        for (split, stats) in [("train", &self.initial_train), ("test", &self.initial_test)] {
            if let Some(s) = stats {
                row("init", split, s, "");
            }
        }
        for r in &self.epochs {
            let (e, lr) = (r.epoch.to_string(), r.lr.to_string());
            row(&e, "train", &r.train, &lr);
            if let Some(t) = &r.test {
                row(&e, "test", t, &lr);
            }
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Linear-interpolation quantile of sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Inference-mode embeddings of every example: (current tower with side
/// info, future tower).
pub fn encode_split(model: &QuickListsModel, corpus: &Corpus) -> Result<(Vec<PlaylistEmbedding>, Vec<PlaylistEmbedding>)> {
    let mut cur = Vec::with_capacity(corpus.len());
    let mut fut = Vec::with_capacity(corpus.len());
    for ex in corpus.examples() {
        cur.push(model.encode(&ex.current, &ex.side, ComputeMode::Infer)?);
        let side = model.has_side_branch(TowerKind::Future).then_some(&ex.side);
        fut.push(model.forward(TowerKind::Future, Some(ex.future.tracks()), side, ComputeMode::Infer)?.0);
    }
    Ok((cur, fut))
}

/// A random partner `j ≠ i` for every `i < n`.
pub fn random_pairing(n: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut rng = rng::stream(seed, stream);
    (0..n)
        .map(|i| {
            let j = rng.gen_range(0..n - 1);
            if j >= i {
                j + 1
            } else {
                j
            }
        })
        .collect()
}

/// Scores every example against the future of its partner in `pairing`.
pub fn split_stats(
    model: &QuickListsModel,
    corpus: &Corpus,
    pairing: &[usize],
    metric: Metric,
) -> Result<Option<SplitStats>> {
    if corpus.len() < 2 {
        return Ok(None);
    }
    let (cur, fut) = encode_split(model, corpus)?;
    let mut scores = Vec::with_capacity(cur.len());
    for (i, &j) in pairing.iter().enumerate() {
        scores.push(score_triplet(cur[i].as_slice(), fut[i].as_slice(), fut[j].as_slice(), metric)?);
    }
    Ok(Some(summarize(&scores, l2_term(model))))
}

fn summarize(scores: &[TripletScore], l2: f64) -> SplitStats {
    let n = scores.len() as f64;
    let mut xs: Vec<f64> = scores.iter().map(|s| s.x_hat).collect();
    xs.sort_by(f64::total_cmp);
    SplitStats {
        mean_loss: scores.iter().map(|s| triplet_loss(s.x_hat)).sum::<f64>() / n + l2,
        mean_x_hat: xs.iter().sum::<f64>() / n,
        p25_x_hat: quantile(&xs, 0.25),
        p75_x_hat: quantile(&xs, 0.75),
        mean_d_pos: scores.iter().map(|s| s.d_pos).sum::<f64>() / n,
        mean_d_neg: scores.iter().map(|s| s.d_neg).sum::<f64>() / n,
    }
}

fn l2_term(model: &QuickListsModel) -> f64 {
    let ws: Vec<_> = model.l2_params().iter().map(|&id| model.params().get(id)).collect();
    l2_penalty(&ws, model.config().l2_lambda)
}

/// Objective value and parameter gradients for one minibatch.
pub fn batch_gradients(
    model: &QuickListsModel,
    corpus: &Corpus,
    batch: &[usize],
    negatives: &[Vec<usize>],
    metric: Metric,
    dropout_seed: u64,
) -> Result<(f64, GradBuffer)> {
    let examples = corpus.examples();
    let mut cur: Vec<(PlaylistEmbedding, TowerCache)> = Vec::with_capacity(batch.len());
    let mut fut: Vec<(PlaylistEmbedding, TowerCache)> = Vec::with_capacity(batch.len());
    let future_side = model.has_side_branch(TowerKind::Future);
    for (pos, &i) in batch.iter().enumerate() {
        let ex = &examples[i];
        let seed = |tower: u64| ComputeMode::Train { seed: rng::mix(&[dropout_seed, pos as u64, tower]) };
        cur.push(model.forward(TowerKind::Current, Some(ex.current.tracks()), Some(&ex.side), seed(0))?);
        let side = future_side.then_some(&ex.side);
        fut.push(model.forward(TowerKind::Future, Some(ex.future.tracks()), side, seed(1))?);
    }

    let d = model.config().d_out;
    let mut g_cur = vec![vec![0.0; d]; batch.len()];
    let mut g_fut = vec![vec![0.0; d]; batch.len()];
    let n_triplets: usize = negatives.iter().map(Vec::len).sum();
    let scale = 1.0 / n_triplets as f64;
    let mut data_loss = 0.0;
    for (i, negs) in negatives.iter().enumerate() {
        let c = cur[i].0.as_slice();
        let p = fut[i].0.as_slice();
        for &j in negs {
            let n = fut[j].0.as_slice();
            let s = score_triplet(c, p, n, metric)?;
            data_loss += triplet_loss(s.x_hat);
            // d loss / d x̂ = −σ(−x̂); x̂ = d(c, n) − d(c, p).
            let dx = -sigmoid(-s.x_hat) * scale;
            let (gc_n, gn) = distance_grad(c, n, metric)?;
            let (gc_p, gp) = distance_grad(c, p, metric)?;
            for k in 0..d {
                g_cur[i][k] += dx * (gc_n[k] - gc_p[k]);
                g_fut[j][k] += dx * gn[k];
                g_fut[i][k] -= dx * gp[k];
            }
        }
    }

    let mut grads = model.params().grad_buffer();
    for ((_, cache), g) in cur.iter().zip(&g_cur) {
        model.backward(cache, g, &mut grads);
    }
    for ((_, cache), g) in fut.iter().zip(&g_fut) {
        model.backward(cache, g, &mut grads);
    }
    let lambda = model.config().l2_lambda;
    for id in model.l2_params() {
        let w = model.params().get(id);
        let g = l2_penalty_grad(w, lambda);
        for (a, b) in grads.slot(id, w.len()).iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((data_loss * scale + l2_term(model), grads))
}

/// Splits a shuffled order into batches, folding a trailing singleton into
/// the previous batch so every batch has in-batch negatives.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().map_or(false, |b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().expect("at least one batch") = &order[start..];
    }
    out
}

pub fn train(model: &mut QuickListsModel, train: &Corpus, test: &Corpus, cfg: &TrainConfig) -> Result<TrainHistory> {
    train_with_callback(model, train, test, cfg, |_, _| Ok(()))
}

/// Like [`train`], calling `on_epoch` after each epoch's statistics are
/// recorded.
pub fn train_with_callback<F>(
    model: &mut QuickListsModel,
    train: &Corpus,
    test: &Corpus,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainHistory>
where
    F: FnMut(&EpochRecord, &QuickListsModel) -> Result<()>,
{
    cfg.validate()?;
    if train.len() < 2 {
        return Err(Error::EmptyCorpus(format!("training needs at least 2 users, got {}", train.len())));
    }
    for corpus in [train, test] {
        if corpus.vocab_size() != model.vocab_size() || corpus.side_width() != model.side_width() {
            return Err(Error::shape(format!(
                "corpus has vocab {} / side width {}, model expects {} / {}",
                corpus.vocab_size(),
                corpus.side_width(),
                model.vocab_size(),
                model.side_width()
            )));
        }
    }
    let adam = AdamConfig::default();
    let train_pairs = random_pairing(train.len(), rng::mix(&[cfg.seed, 0]), streams::TELEMETRY);
    let test_pairs =
        if test.len() >= 2 { random_pairing(test.len(), rng::mix(&[cfg.seed, 1]), streams::TELEMETRY) } else { vec![] };

    let mut history = TrainHistory {
        initial_train: split_stats(model, train, &train_pairs, cfg.metric)?,
        initial_test: split_stats(model, test, &test_pairs, cfg.metric)?,
        epochs: Vec::with_capacity(cfg.epochs),
    };
    if let Some(s) = &history.initial_train {
        info!("untrained: train x̂ mean {:.4}", s.mean_x_hat);
    }

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.sort_unstable();
        order.shuffle(&mut rng::stream(rng::mix(&[cfg.seed, epoch as u64]), streams::SHUFFLE));
        let mut loss_sum = 0.0;
        let all = batches(&order, cfg.batch_size);
        let n_batches = all.len();
        for (b, batch) in all.into_iter().enumerate() {
            let key = rng::mix(&[cfg.seed, epoch as u64, b as u64]);
            let negatives = sample_negatives(batch.len(), cfg.negatives_per_positive, key)?;
            let (loss, grads) = batch_gradients(model, train, batch, &negatives, cfg.metric, key)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {epoch}, batch {b}")));
            }
            let params = model.params_mut();
            params.zero_grad();
            params.accumulate(&grads, 1.0);
            adam_step(params, lr, &adam)
                .map_err(|e| Error::NonFinite(format!("epoch {epoch}, batch {b}: {e}")))?;
            loss_sum += loss;
            debug!("epoch {epoch} batch {b}: loss {loss:.5}");
        }
        model.params_mut().zero_grad();
        let record = EpochRecord {
            epoch,
            lr,
            batch_loss: loss_sum / n_batches as f64,
            train: split_stats(model, train, &train_pairs, cfg.metric)?.expect("train has 2+ users"),
            test: split_stats(model, test, &test_pairs, cfg.metric)?,
        };
        info!(
            "epoch {epoch}: lr {lr:.3e} loss {:.4} train x̂ {:.4}{}",
            record.batch_loss,
            record.train.mean_x_hat,
            record.test.as_ref().map(|t| format!(" test x̂ {:.4}", t.mean_x_hat)).unwrap_or_default()
        );
        on_epoch(&record, model)?;
        history.epochs.push(record);
    }
    Ok(history)
}
