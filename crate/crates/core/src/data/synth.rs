//! Seeded synthetic listening corpus with latent genres.
//!
//! Every track belongs to one latent genre. Each user prefers a small set
//! of genres and listens along a genre-level Markov chain: the next track
//! stays in the current genre with probability `coherence`, otherwise the
//! chain jumps to another preferred genre (or, for single-genre users, to
//! any other genre). Within a genre tracks follow a Zipf popularity law.
//! The genre block of the side-info vector mirrors the user's preferences,
//! each bit flipped with probability `side_noise`.

use std::collections::HashMap;

use log::info;
use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_vocab, sessionize, Corpus, PlayEvent, SideInfoVector, SideLayout, TrackId};
use crate::rng::{self, streams};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub users: usize,
    pub vocab_size: usize,
    pub genres: usize,
    /// Users prefer between 1 and this many genres.
    pub max_preferred_genres: usize,
    /// Probability that the next track stays in the current genre.
    pub coherence: f64,
    /// Per-bit flip probability of the side-info genre block.
    pub side_noise: f64,
    /// Zipf exponent of within-genre track popularity.
    pub popularity_skew: f64,
    /// Probability of an extra skipped or thumbed-down event before a play.
    pub skip_prob: f64,
    /// Probability that a user has no profile at all (all-zero side info).
    pub profile_missing_prob: f64,
    /// Valid plays per user are drawn uniformly from this range.
    pub min_history: usize,
    pub max_history: usize,
    pub min_plays: u64,
    pub side_layout: SideLayout,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 2000,
            vocab_size: 500,
            genres: 8,
            max_preferred_genres: 3,
            coherence: 0.8,
            side_noise: 0.1,
            popularity_skew: 1.0,
            skip_prob: 0.05,
            profile_missing_prob: 0.28,
            min_history: 26,
            max_history: 50,
            min_plays: super::DEFAULT_MIN_PLAYS,
            side_layout: SideLayout::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.users == 0 {
            return Err(Error::EmptyCorpus("empty corpus: users must be positive".into()));
        }
        if self.genres == 0 || self.vocab_size < self.genres {
            return Err(Error::invalid(format!(
                "need 1 <= genres <= vocab_size, got {} genres over {} tracks",
                self.genres, self.vocab_size
            )));
        }
        if self.side_layout.genres < self.genres {
            return Err(Error::invalid(format!(
                "side-info genre block ({}) is narrower than the genre count ({})",
                self.side_layout.genres, self.genres
            )));
        }
        for (name, p) in [
            ("coherence", self.coherence),
            ("side_noise", self.side_noise),
            ("skip_prob", self.skip_prob),
            ("profile_missing_prob", self.profile_missing_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if self.skip_prob >= 1.0 {
            return Err(Error::invalid("skip_prob must be below 1"));
        }
        if self.min_history <= super::MAX_FUTURE || self.max_history < self.min_history {
            return Err(Error::invalid(format!(
                "history range {}..={} must start above {}",
                self.min_history,
                self.max_history,
                super::MAX_FUTURE
            )));
        }
        if self.max_preferred_genres == 0 {
            return Err(Error::invalid("max_preferred_genres must be positive"));
        }
        Ok(())
    }

    /// Latent genre of raw track `t`; genres own contiguous id blocks.
    pub fn genre_of_raw(&self, t: u32) -> usize {
        t as usize * self.genres / self.vocab_size
    }
}

/// A generated corpus plus the latent structure behind it.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    /// Latent genre of each dense track.
    pub track_genre: Vec<usize>,
    /// True preferred genres of each example's user, aligned with
    /// `corpus.examples()`.
    pub user_genres: Vec<Vec<usize>>,
    pub config: SynthConfig,
}

impl SyntheticCorpus {
    /// Adjacent (within-genre, cross-genre) pairs over every user's
    /// concatenated current and future playlists.
    pub fn transition_counts(&self) -> (usize, usize) {
        let mut within = 0;
        let mut cross = 0;
        for ex in self.corpus.examples() {
            let seq: Vec<TrackId> = ex.current.tracks().iter().chain(ex.future.tracks()).copied().collect();
            for w in seq.windows(2) {
                if self.track_genre[w[0].index()] == self.track_genre[w[1].index()] {
                    within += 1;
                } else {
                    cross += 1;
                }
            }
        }
        (within, cross)
    }

    /// Most frequent genre of a playlist, smallest genre on ties.
    pub fn dominant_genre(&self, tracks: &[TrackId]) -> usize {
        let mut counts = vec![0usize; self.config.genres];
        for t in tracks {
            counts[self.track_genre[t.index()]] += 1;
        }
        let best = counts.iter().copied().max().unwrap_or(0);
        counts.iter().position(|&c| c == best).unwrap_or(0)
    }

    /// Distinct genres touched by a playlist.
    pub fn genres_in(&self, tracks: &[TrackId]) -> usize {
        let mut seen = vec![false; self.config.genres];
        for t in tracks {
            seen[self.track_genre[t.index()]] = true;
        }
        seen.into_iter().filter(|&s| s).count()
    }
}

struct GenreSampler {
    /// Cumulative Zipf weights per genre, with the raw ids they map to.
    tables: Vec<(Vec<f64>, Vec<u32>)>,
}

impl GenreSampler {
    fn new(cfg: &SynthConfig) -> Self {
        let mut members: Vec<Vec<u32>> = vec![Vec::new(); cfg.genres];
        for t in 0..cfg.vocab_size as u32 {
            members[cfg.genre_of_raw(t)].push(t);
        }
        let tables = members
            .into_iter()
            .map(|ids| {
                let mut acc = 0.0;
                let cum = (0..ids.len())
                    .map(|r| {
                        acc += 1.0 / ((r + 1) as f64).powf(cfg.popularity_skew);
                        acc
                    })
                    .collect();
                (cum, ids)
            })
            .collect();
        Self { tables }
    }

    fn draw(&self, genre: usize, rng: &mut ChaCha8Rng) -> u32 {
        let (cum, ids) = &self.tables[genre];
        let u = rng.gen::<f64>() * cum[cum.len() - 1];
        let i = cum.partition_point(|&c| c <= u).min(ids.len() - 1);
        ids[i]
    }
}

fn one_hot(bits: &mut [u8], offset: usize, width: usize, rng: &mut ChaCha8Rng) {
    if width > 0 {
        bits[offset + rng.gen_range(0..width)] = 1;
    }
}

pub fn generate_synthetic_corpus(cfg: &SynthConfig, seed: u64) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    info!("synthesizing corpus with {}", serde_json::to_string(cfg)?);
    let mut rng = rng::stream(seed, streams::SYNTH);
    let sampler = GenreSampler::new(cfg);
    let layout = cfg.side_layout;
    let width = layout.width();

    let mut raw_examples = Vec::with_capacity(cfg.users);
    let mut prefs_by_user: HashMap<String, Vec<usize>> = HashMap::new();
    for u in 0..cfg.users {
        let k = rng.gen_range(1..=cfg.max_preferred_genres.min(cfg.genres));
        let mut prefs = index::sample(&mut rng, cfg.genres, k).into_vec();
        prefs.sort_unstable();

        let mut bits = vec![0u8; width];
        let missing = rng.gen::<f64>() < cfg.profile_missing_prob;
        one_hot(&mut bits, 0, layout.gender, &mut rng);
        one_hot(&mut bits, layout.age_offset(), layout.age_bins, &mut rng);
        one_hot(&mut bits, layout.country_offset(), layout.countries, &mut rng);
        for g in 0..cfg.genres {
            let flip = rng.gen::<f64>() < cfg.side_noise;
            bits[layout.genre_bit(g)] = (prefs.binary_search(&g).is_ok() != flip) as u8;
        }
        if missing {
            bits.fill(0);
        }

        let n_valid = rng.gen_range(cfg.min_history..=cfg.max_history);
        let mut genre = prefs[rng.gen_range(0..prefs.len())];
        let mut events = Vec::with_capacity(n_valid + n_valid / 8);
        let mut clock = 0u64;
        for step in 0..n_valid {
            if step > 0 && rng.gen::<f64>() >= cfg.coherence {
                genre = next_genre(genre, &prefs, cfg.genres, &mut rng);
            }
            while rng.gen::<f64>() < cfg.skip_prob {
                let skipped = rng.gen::<bool>();
                events.push(PlayEvent {
                    track: TrackId(sampler.draw(genre, &mut rng)),
                    timestamp: clock,
                    skipped,
                    thumbed_down: !skipped,
                });
                clock += 1;
            }
            events.push(PlayEvent::play(TrackId(sampler.draw(genre, &mut rng)), clock));
            clock += 1;
        }

        let user_id = format!("user{u:06}");
        let side = SideInfoVector::new(bits)?;
        if let Some(ex) = sessionize(user_id.clone(), side, &events) {
            prefs_by_user.insert(user_id, prefs);
            raw_examples.push(ex);
        }
    }

    let corpus = build_vocab(&raw_examples, width, cfg.min_plays)?;
    let track_genre = corpus.vocab().raw_ids().iter().map(|&r| cfg.genre_of_raw(r)).collect();
    let user_genres = corpus.examples().iter().map(|ex| prefs_by_user[&ex.user_id].clone()).collect();
    Ok(SyntheticCorpus { corpus, track_genre, user_genres, config: cfg.clone() })
}

fn next_genre(current: usize, prefs: &[usize], genres: usize, rng: &mut ChaCha8Rng) -> usize {
    let others: Vec<usize> = prefs.iter().copied().filter(|&g| g != current).collect();
    if !others.is_empty() {
        return others[rng.gen_range(0..others.len())];
    }
    if genres == 1 {
        return current;
    }
    let g = rng.gen_range(0..genres - 1);
    if g >= current {
        g + 1
    } else {
        g
    }
}
