use log::warn;
use rand::seq::SliceRandom;

use super::{Corpus, Playlist, SessionExample, SideInfoVector, TrackId};
use crate::rng::{self, streams};
use crate::{Error, Result};

/// Longest future playlist.
pub const MAX_FUTURE: usize = 25;
/// Most recent plays kept per user.
pub const MAX_SESSION: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlayEvent {
    pub track: TrackId,
    pub timestamp: u64,
    pub skipped: bool,
    pub thumbed_down: bool,
}

impl PlayEvent {
    pub fn play(track: TrackId, timestamp: u64) -> Self {
        Self { track, timestamp, skipped: false, thumbed_down: false }
    }

    fn is_valid(&self) -> bool {
        !self.skipped && !self.thumbed_down
    }
}

/// Splits one user's history into a (current, future) session.
///
/// Skipped and thumbed-down plays are dropped, the last 50 remaining plays
/// are kept, the final 25 become the future playlist and the rest the
/// current one. Returns `None` when fewer than 26 valid plays remain.
pub fn sessionize(
    user_id: impl Into<String>,
    side: SideInfoVector,
    events: &[PlayEvent],
) -> Option<SessionExample> {
    debug_assert!(events.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
    let valid: Vec<TrackId> = events.iter().filter(|e| e.is_valid()).map(|e| e.track).collect();
    if valid.len() <= MAX_FUTURE {
        return None;
    }
    let kept = &valid[valid.len().saturating_sub(MAX_SESSION)..];
    let (current, future) = kept.split_at(kept.len() - MAX_FUTURE);
    Some(SessionExample {
        user_id: user_id.into(),
        current: Playlist::new(current.to_vec()).ok()?,
        future: Playlist::new(future.to_vec()).ok()?,
        side,
    })
}

/// User-level train/test partition. The train side receives
/// `round(ratio * users)` users.
pub fn split_train_test(corpus: &Corpus, ratio: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus("nothing to split".into()));
    }
    let n = corpus.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, streams::SPLIT));
    let n_train = ((ratio * n as f64).round() as usize).clamp(1, n);
    if n_train == n {
        warn!("train/test split of {n} users at ratio {ratio} leaves the test set empty");
    }
    let (train_idx, test_idx) = order.split_at(n_train);
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        corpus.with_examples(idx.into_iter().map(|i| corpus.examples()[i].clone()).collect())
    };
    Ok((pick(train_idx), pick(test_idx)))
}
