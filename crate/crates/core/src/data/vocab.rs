use std::collections::HashMap;

use log::debug;

use super::{Corpus, Playlist, SessionExample, TrackId, Vocab};
use crate::{Error, Result};

/// Tracks with this many plays or fewer are dropped.
pub const DEFAULT_MIN_PLAYS: u64 = 5;

/// Builds the dense vocabulary over raw-id examples and remaps them.
///
/// Tracks with `min_plays` plays or fewer are removed. Survivors are
/// numbered by descending play count, ties broken by raw id. Playlists are
/// filtered to surviving tracks; sessions left with an empty current or
/// future playlist are dropped.
pub fn build_vocab(
    examples: &[SessionExample],
    side_width: usize,
    min_plays: u64,
) -> Result<Corpus> {
    let mut counts: HashMap<u32, u64> = HashMap::new();
    for ex in examples {
        for t in ex.current.tracks().iter().chain(ex.future.tracks()) {
            *counts.entry(t.0).or_default() += 1;
        }
    }
    let mut survivors: Vec<(u32, u64)> = counts.into_iter().filter(|&(_, c)| c > min_plays).collect();
    if survivors.is_empty() {
        return Err(Error::EmptyCorpus(format!("every track has {min_plays} plays or fewer")));
    }
    survivors.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let dense: HashMap<u32, u32> =
        survivors.iter().enumerate().map(|(i, &(raw, _))| (raw, i as u32)).collect();
    let remap = |p: &Playlist| -> Option<Playlist> {
        Playlist::new(p.tracks().iter().filter_map(|t| dense.get(&t.0).map(|&d| TrackId(d))).collect())
            .ok()
    };
    let mut kept = Vec::with_capacity(examples.len());
    for ex in examples {
        let (Some(current), Some(future)) = (remap(&ex.current), remap(&ex.future)) else {
            debug!("dropping user {}: a playlist emptied after vocabulary filtering", ex.user_id);
            continue;
        };
        kept.push(SessionExample { user_id: ex.user_id.clone(), current, future, side: ex.side.clone() });
    }
    if kept.is_empty() {
        return Err(Error::EmptyCorpus("no session survived vocabulary filtering".into()));
    }
    let vocab = Vocab::new(survivors.into_iter().map(|(raw, _)| raw).collect());
    Corpus::new(kept, vocab, side_width)
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use proptest::prelude::*;

    use super::*;
    use crate::data::SideInfoVector;

    fn example(user: &str, current: &[u32], future: &[u32]) -> SessionExample {
        SessionExample::new(
            user,
            Playlist::from_indices(current.iter().copied()).unwrap(),
            Playlist::from_indices(future.iter().copied()).unwrap(),
            SideInfoVector::zeros(1),
        )
        .unwrap()
    }

    #[test]
    fn five_plays_excluded_six_included() {
        // track 7: 5 plays, track 8: 6 plays
        let exs = vec![example("a", &[7, 7, 7, 8, 8, 8], &[7, 7, 8, 8, 8])];
        let c = build_vocab(&exs, 1, 5).unwrap();
        assert_eq!(c.vocab().raw_ids(), &[8]);
        assert_eq!(c.examples()[0].current.len(), 3);
        assert_eq!(c.examples()[0].future.len(), 3);
    }

    #[test]
    fn zero_threshold_keeps_everything_in_count_order() {
        let exs = vec![example("a", &[3, 1, 2, 2], &[1, 2]), example("b", &[3], &[9])];
        let c = build_vocab(&exs, 1, 0).unwrap();
        // counts: 2 -> 3, 1 -> 2, 3 -> 2, 9 -> 1
        assert_eq!(c.vocab().raw_ids(), &[2, 1, 3, 9]);
        assert_eq!(c.len(), 2);
        assert_eq!(c.play_counts(), vec![3, 2, 2, 1]);
    }

    #[test]
    fn sessions_with_emptied_current_are_dropped() {
        let exs = vec![example("a", &[1; 6], &[1]), example("b", &[2], &[1])];
        let c = build_vocab(&exs, 1, 5).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.examples()[0].user_id, "a");
    }

    #[test]
    fn everything_filtered_is_an_error() {
        let exs = vec![example("a", &[1], &[2])];
        assert!(matches!(build_vocab(&exs, 1, 5), Err(Error::EmptyCorpus(_))));
    }

    proptest! {
        #[test]
        fn survivors_beat_threshold_and_indices_are_a_bijection(
            users in prop::collection::vec(
                (prop::collection::vec(0u32..30, 1..20), prop::collection::vec(0u32..30, 1..20)),
                1..20,
            ),
            min_plays in 0u64..4,
        ) {
            let exs: Vec<SessionExample> = users
                .iter()
                .enumerate()
                .map(|(i, (c, f))| example(&format!("u{i}"), c, f))
                .collect();
            let mut counts: HashMap<u32, u64> = HashMap::new();
            for (c, f) in &users {
                for &t in c.iter().chain(f) {
                    *counts.entry(t).or_default() += 1;
                }
            }
            match build_vocab(&exs, 1, min_plays) {
                Err(_) => prop_assert!(true),
                Ok(corpus) => {
                    let raw = corpus.vocab().raw_ids();
                    for &r in raw {
                        prop_assert!(counts[&r] > min_plays);
                    }
                    let expected = counts.values().filter(|&&c| c > min_plays).count();
                    prop_assert_eq!(raw.len(), expected);
                    let mut sorted = raw.to_vec();
                    sorted.sort_unstable();
                    sorted.dedup();
                    prop_assert_eq!(sorted.len(), raw.len());
                    for w in raw.windows(2) {
                        let (a, b) = (counts[&w[0]], counts[&w[1]]);
                        prop_assert!(a > b || (a == b && w[0] < w[1]));
                    }
                }
            }
        }
    }
}
