//! Playlists, users, side information, and corpora of (current, future)
//! listening sessions.

mod io;
mod session;
mod synth;
mod vocab;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use io::{load_corpus, read_corpus, save_corpus, write_corpus, CorpusHeader};
pub use session::{sessionize, split_train_test, PlayEvent, MAX_FUTURE, MAX_SESSION};
pub use synth::{generate_synthetic_corpus, SynthConfig, SyntheticCorpus};
pub use vocab::{build_vocab, DEFAULT_MIN_PLAYS};

/// Dense vocabulary index of a track (or a raw id before the vocabulary is
/// built).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrackId(pub u32);

impl TrackId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// An ordered, nonempty sequence of tracks. Order is never canonicalized.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<TrackId>", into = "Vec<TrackId>")]
pub struct Playlist {
    tracks: Vec<TrackId>,
}

impl Playlist {
    pub fn new(tracks: Vec<TrackId>) -> Result<Self> {
        if tracks.is_empty() {
            return Err(Error::invalid("a playlist needs at least one track"));
        }
        Ok(Self { tracks })
    }

    pub fn from_indices<I: IntoIterator<Item = u32>>(ids: I) -> Result<Self> {
        Self::new(ids.into_iter().map(TrackId).collect())
    }

    pub fn tracks(&self) -> &[TrackId] {
        &self.tracks
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn reversed(&self) -> Playlist {
        let mut tracks = self.tracks.clone();
        tracks.reverse();
        Playlist { tracks }
    }

    pub fn track_set(&self) -> BTreeSet<TrackId> {
        self.tracks.iter().copied().collect()
    }

    /// Checks every track against a vocabulary of `vocab_size` entries.
    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        match self.tracks.iter().find(|t| t.index() >= vocab_size) {
            Some(t) => Err(Error::OutOfVocab { track: t.index(), vocab_size }),
            None => Ok(()),
        }
    }
}

impl TryFrom<Vec<TrackId>> for Playlist {
    type Error = Error;

    fn try_from(tracks: Vec<TrackId>) -> Result<Self> {
        Playlist::new(tracks)
    }
}

impl From<Playlist> for Vec<TrackId> {
    fn from(p: Playlist) -> Self {
        p.tracks
    }
}

/// Widths of the semantic blocks of a side-information vector, laid out in
/// the order gender, age, country, genre.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SideLayout {
    pub gender: usize,
    pub age_bins: usize,
    pub countries: usize,
    pub genres: usize,
}

impl Default for SideLayout {
    fn default() -> Self {
        // 2 + 22 + 5 + 57 = 86 binary features.
        Self { gender: 2, age_bins: 22, countries: 5, genres: 57 }
    }
}

impl SideLayout {
    pub fn width(&self) -> usize {
        self.gender + self.age_bins + self.countries + self.genres
    }

    pub fn age_offset(&self) -> usize {
        self.gender
    }

    pub fn country_offset(&self) -> usize {
        self.gender + self.age_bins
    }

    pub fn genre_offset(&self) -> usize {
        self.gender + self.age_bins + self.countries
    }

    /// Bit index of genre `g` in the full vector.
    pub fn genre_bit(&self, g: usize) -> usize {
        self.genre_offset() + g
    }
}

/// Fixed-width binary user profile. The all-zero vector stands for an
/// absent profile.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct SideInfoVector {
    bits: Vec<u8>,
}

impl SideInfoVector {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::invalid(format!("side-info entries must be 0 or 1, found {b}")));
        }
        Ok(Self { bits })
    }

    pub fn zeros(width: usize) -> Self {
        Self { bits: vec![0; width] }
    }

    /// Vector of `width` with exactly the listed bits set.
    pub fn with_bits(width: usize, active: &[usize]) -> Result<Self> {
        let mut v = Self::zeros(width);
        for &i in active {
            v.set(i, true)?;
        }
        Ok(v)
    }

    pub fn width(&self) -> usize {
        self.bits.len()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits.get(i).copied().unwrap_or(0) == 1
    }

    pub fn set(&mut self, i: usize, on: bool) -> Result<()> {
        let width = self.bits.len();
        let slot = self
            .bits
            .get_mut(i)
            .ok_or_else(|| Error::invalid(format!("side-info bit {i} out of range (width {width})")))?;
        *slot = on as u8;
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    pub fn count_active(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as f64).collect()
    }
}

impl TryFrom<Vec<u8>> for SideInfoVector {
    type Error = Error;

    fn try_from(bits: Vec<u8>) -> Result<Self> {
        SideInfoVector::new(bits)
    }
}

impl From<SideInfoVector> for Vec<u8> {
    fn from(v: SideInfoVector) -> Self {
        v.bits
    }
}

/// One user's (current playlist, future playlist, side info) record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionExample {
    pub user_id: String,
    pub current: Playlist,
    pub future: Playlist,
    pub side: SideInfoVector,
}

impl SessionExample {
    pub fn new(
        user_id: impl Into<String>,
        current: Playlist,
        future: Playlist,
        side: SideInfoVector,
    ) -> Result<Self> {
        let ex = Self { user_id: user_id.into(), current, future, side };
        ex.validate()?;
        Ok(ex)
    }

    pub fn validate(&self) -> Result<()> {
        if self.future.len() > MAX_FUTURE {
            return Err(Error::invalid(format!(
                "future playlist of {} tracks exceeds {MAX_FUTURE}",
                self.future.len()
            )));
        }
        if self.current.len() + self.future.len() > MAX_SESSION {
            return Err(Error::invalid(format!(
                "session of {} tracks exceeds {MAX_SESSION}",
                self.current.len() + self.future.len()
            )));
        }
        Ok(())
    }
}

/// Dense track vocabulary. Index `i` is the track's dense id; `raw_ids[i]`
/// is the identifier it had before the vocabulary was built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    raw_ids: Vec<u32>,
}

impl Vocab {
    pub fn new(raw_ids: Vec<u32>) -> Self {
        Self { raw_ids }
    }

    pub fn identity(size: usize) -> Self {
        Self { raw_ids: (0..size as u32).collect() }
    }

    pub fn len(&self) -> usize {
        self.raw_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw_ids.is_empty()
    }

    pub fn raw_ids(&self) -> &[u32] {
        &self.raw_ids
    }

    pub fn raw_id(&self, t: TrackId) -> Option<u32> {
        self.raw_ids.get(t.index()).copied()
    }
}

/// A set of sessions over one vocabulary and one side-info width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    examples: Vec<SessionExample>,
    vocab: Vocab,
    side_width: usize,
}

impl Corpus {
    /// Validates every example against the vocabulary and side width.
    pub fn new(examples: Vec<SessionExample>, vocab: Vocab, side_width: usize) -> Result<Self> {
        for ex in &examples {
            ex.validate()?;
            ex.current.check_vocab(vocab.len())?;
            ex.future.check_vocab(vocab.len())?;
            if ex.side.width() != side_width {
                return Err(Error::shape(format!(
                    "user {} has side width {}, corpus expects {side_width}",
                    ex.user_id,
                    ex.side.width()
                )));
            }
        }
        Ok(Self { examples, vocab, side_width })
    }

    pub fn examples(&self) -> &[SessionExample] {
        &self.examples
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn side_width(&self) -> usize {
        self.side_width
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Plays per dense track over all current and future playlists.
    pub fn play_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.vocab.len()];
        for ex in &self.examples {
            for t in ex.current.tracks().iter().chain(ex.future.tracks()) {
                counts[t.index()] += 1;
            }
        }
        counts
    }

    /// Same vocabulary and width, different examples.
    pub fn with_examples(&self, examples: Vec<SessionExample>) -> Corpus {
        Corpus { examples, vocab: self.vocab.clone(), side_width: self.side_width }
    }

    /// Future playlist lengths, in example order.
    pub fn future_lengths(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.future.len()).collect()
    }

    /// Candidate pool of observed future playlists.
    pub fn future_playlists(&self) -> Vec<Playlist> {
        self.examples.iter().map(|e| e.future.clone()).collect()
    }
}
