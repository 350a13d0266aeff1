//! Exact nearest-neighbor recommendation over future-tower embeddings of
//! a candidate pool.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::autodiff::{self, ComputeMode, ParamStore, Tensor};
use crate::data::{Playlist, SideInfoVector, TrackId, Vocab};
use crate::encoder::{PlaylistEmbedding, QuickListsModel, TowerKind};
use crate::training::{distance, Metric};
use crate::{Error, Result};

pub const INDEX_MAGIC: &[u8; 4] = b"QLIX";
pub const INDEX_VERSION: u32 = 1;

/// Candidate playlists with their future-tower embeddings, stamped with
/// the checksum of the model that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct RecommendationIndex {
    candidates: Vec<Playlist>,
    embeddings: Tensor,
    metric: Metric,
    model_checksum: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Ranked {
    pub candidate: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recommendation {
    pub query: PlaylistEmbedding,
    /// Ascending distance, ties by ascending candidate index.
    pub results: Vec<Ranked>,
}

pub fn build_index(candidates: Vec<Playlist>, model: &QuickListsModel, metric: Metric) -> Result<RecommendationIndex> {
    if candidates.is_empty() {
        return Err(Error::invalid("candidate pool is empty"));
    }
    let d = model.config().d_out;
    let mut values = Vec::with_capacity(candidates.len() * d);
    for (i, c) in candidates.iter().enumerate() {
        let (e, _) = model
            .forward(TowerKind::Future, Some(c.tracks()), None, ComputeMode::Infer)
            .map_err(|e| Error::invalid(format!("candidate {i}: {e}")))?;
        values.extend_from_slice(e.as_slice());
    }
    Ok(RecommendationIndex {
        embeddings: Tensor::matrix(candidates.len(), d, values)?,
        candidates,
        metric,
        model_checksum: model.checksum(),
    })
}

impl RecommendationIndex {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn candidates(&self) -> &[Playlist] {
        &self.candidates
    }

    pub fn candidate(&self, i: usize) -> &Playlist {
        &self.candidates[i]
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn model_checksum(&self) -> &str {
        &self.model_checksum
    }

    /// Errors unless the index was built from exactly this model.
    pub fn check_model(&self, model: &QuickListsModel) -> Result<()> {
        let sum = model.checksum();
        if sum != self.model_checksum {
            return Err(Error::StaleIndex { index: self.model_checksum.clone(), model: sum });
        }
        Ok(())
    }

    /// The `k` nearest candidates to `query`. No staleness check.
    pub fn search(&self, query: &[f64], k: usize) -> Result<Vec<Ranked>> {
        if k == 0 || k > self.len() {
            return Err(Error::invalid(format!("k must be in 1..={}, got {k}", self.len())));
        }
        let mut all = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            all.push(Ranked { candidate: i, distance: distance(query, self.embeddings.row(i), self.metric)? });
        }
        let by_rank = |a: &Ranked, b: &Ranked| a.distance.total_cmp(&b.distance).then(a.candidate.cmp(&b.candidate));
        if k < all.len() {
            all.select_nth_unstable_by(k - 1, by_rank);
            all.truncate(k);
        }
        all.sort_unstable_by(by_rank);
        Ok(all)
    }

    pub fn write<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(INDEX_MAGIC)?;
        out.write_all(&INDEX_VERSION.to_le_bytes())?;
        let header = serde_json::to_vec(&(&self.model_checksum, self.metric))?;
        out.write_all(&(header.len() as u32).to_le_bytes())?;
        out.write_all(&header)?;
        out.write_all(&(self.candidates.len() as u64).to_le_bytes())?;
        for c in &self.candidates {
            out.write_all(&(c.len() as u32).to_le_bytes())?;
            for t in c.tracks() {
                out.write_all(&t.0.to_le_bytes())?;
            }
        }
        let mut store = ParamStore::new();
        store.add("embeddings", self.embeddings.clone())?;
        autodiff::write_store(&store, false, out)
    }

    pub fn read<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(Error::Version("not a recommendation index (bad magic)".into()));
        }
        let version = autodiff::read_u32(input)?;
        if version != INDEX_VERSION {
            return Err(Error::Version(format!("index version {version}, expected {INDEX_VERSION}")));
        }
        let mut header = vec![0u8; autodiff::read_u32(input)? as usize];
        input.read_exact(&mut header)?;
        let (model_checksum, metric): (String, Metric) = serde_json::from_slice(&header)?;
        let n = autodiff::read_u64(input)? as usize;
        let mut candidates = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let len = autodiff::read_u32(input)? as usize;
            let mut tracks = Vec::with_capacity(len);
            for _ in 0..len {
                tracks.push(TrackId(autodiff::read_u32(input)?));
            }
            candidates.push(Playlist::new(tracks)?);
        }
        let store = autodiff::read_store(input)?;
        let embeddings = store
            .by_name("embeddings")
            .cloned()
            .ok_or_else(|| Error::Version("index has no embedding matrix".into()))?;
        if embeddings.shape().len() != 2 || embeddings.rows() != n {
            return Err(Error::Version(format!("index embedding shape {:?} for {n} candidates", embeddings.shape())));
        }
        Ok(Self { candidates, embeddings, metric, model_checksum })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }
}

pub fn recommend(
    current: &Playlist,
    side: &SideInfoVector,
    index: &RecommendationIndex,
    model: &QuickListsModel,
    k: usize,
) -> Result<Recommendation> {
    index.check_model(model)?;
    let query = model.encode(current, side, ComputeMode::Infer)?;
    let results = index.search(query.as_slice(), k)?;
    Ok(Recommendation { query, results })
}

/// Recommendation for a user with no listening history.
pub fn recommend_cold(
    side: &SideInfoVector,
    index: &RecommendationIndex,
    model: &QuickListsModel,
    k: usize,
) -> Result<Recommendation> {
    index.check_model(model)?;
    let query = model.encode_cold(side)?;
    let results = index.search(query.as_slice(), k)?;
    Ok(Recommendation { query, results })
}

/// Copy of `side` with each `(bit, value)` override applied.
pub fn apply_overrides(side: &SideInfoVector, overrides: &[(usize, bool)]) -> Result<SideInfoVector> {
    let mut out = side.clone();
    for &(bit, on) in overrides {
        out.set(bit, on)?;
    }
    Ok(out)
}

/// Recommendations for the user as they are and with `overrides` applied
/// to their side information.
pub fn manipulate_side(
    current: &Playlist,
    side: &SideInfoVector,
    overrides: &[(usize, bool)],
    index: &RecommendationIndex,
    model: &QuickListsModel,
    k: usize,
) -> Result<(Recommendation, Recommendation)> {
    let changed = apply_overrides(side, overrides)?;
    Ok((recommend(current, side, index, model, k)?, recommend(current, &changed, index, model, k)?))
}

#[derive(Debug, Serialize)]
struct QueryJson<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    tracks: Option<Vec<u32>>,
    side_bits: Vec<usize>,
    embedding: &'a [f64],
}

#[derive(Debug, Serialize)]
struct ResultJson {
    rank: usize,
    candidate: usize,
    distance: f64,
    tracks: Vec<u32>,
}

#[derive(Debug, Serialize)]
struct RecommendationJson<'a> {
    query: QueryJson<'a>,
    results: Vec<ResultJson>,
}

impl Recommendation {
    /// JSON rendering; track ids are mapped to raw catalogue ids when a
    /// vocabulary is given. Ranks start at 1.
    pub fn to_json(
        &self,
        index: &RecommendationIndex,
        current: Option<&Playlist>,
        side: &SideInfoVector,
        vocab: Option<&Vocab>,
    ) -> serde_json::Value {
        let ids = |p: &Playlist| -> Vec<u32> {
            p.tracks().iter().map(|&t| vocab.and_then(|v| v.raw_id(t)).unwrap_or(t.0)).collect()
        };
        let json = RecommendationJson {
            query: QueryJson {
                tracks: current.map(ids),
                side_bits: (0..side.width()).filter(|&i| side.get(i)).collect(),
                embedding: self.query.as_slice(),
            },
            results: self
                .results
                .iter()
                .enumerate()
                .map(|(r, x)| ResultJson {
                    rank: r + 1,
                    candidate: x.candidate,
                    distance: x.distance,
                    tracks: ids(index.candidate(x.candidate)),
                })
                .collect(),
        };
        serde_json::to_value(json).expect("recommendation serializes")
    }
}
