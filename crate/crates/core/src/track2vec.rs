//! Skip-gram with negative sampling over sessions treated as sentences.
//!
//! Each user's current and future playlists are concatenated into one
//! sentence. For every (center, context) pair within `window` positions the
//! objective `ln σ(u·v) + Σ ln σ(−u·v_neg)` is ascended, with negatives
//! drawn from the unigram distribution raised to the 0.75 power. The input
//! side vectors `u` become the track embedding table.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use log::info;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{Corpus, TrackId};
use crate::rng::{self, streams};
use crate::{Error, Result};

pub const TABLE_MAGIC: &[u8; 4] = b"QLTV";
pub const TABLE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgnsConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    /// Starting learning rate, decayed linearly towards `lr * 1e-4`.
    pub lr: f64,
}

impl Default for SgnsConfig {
    fn default() -> Self {
        Self { dim: 32, window: 5, negatives: 5, epochs: 5, lr: 0.025 }
    }
}

/// One vector per vocabulary track.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackEmbeddingTable {
    vectors: Tensor,
}

impl TrackEmbeddingTable {
    pub fn new(vectors: Tensor) -> Result<Self> {
        if vectors.shape().len() != 2 {
            return Err(Error::shape(format!("embedding table must be a matrix, got {:?}", vectors.shape())));
        }
        if !vectors.is_finite() {
            return Err(Error::NonFinite("track embedding table".into()));
        }
        Ok(Self { vectors })
    }

    pub fn vocab_size(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vector(&self, t: TrackId) -> &[f64] {
        self.vectors.row(t.index())
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.vectors
    }

    pub fn write<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(TABLE_MAGIC)?;
        out.write_all(&TABLE_VERSION.to_le_bytes())?;
        out.write_all(&(self.vocab_size() as u64).to_le_bytes())?;
        out.write_all(&(self.dim() as u64).to_le_bytes())?;
        crate::autodiff::write_f64s(out, self.vectors.values())
    }

    pub fn read<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != TABLE_MAGIC {
            return Err(Error::Version("not a track embedding table (bad magic)".into()));
        }
        let version = crate::autodiff::read_u32(input)?;
        if version != TABLE_VERSION {
            return Err(Error::Version(format!("track table version {version}, expected {TABLE_VERSION}")));
        }
        let v = crate::autodiff::read_u64(input)? as usize;
        let d = crate::autodiff::read_u64(input)? as usize;
        let values = crate::autodiff::read_f64s(input, v * d)?;
        Self::new(Tensor::matrix(v, d, values)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(&mut std::io::BufReader::new(File::open(path)?))
    }

    /// One line per track: index followed by the components.
    pub fn write_text<W: Write>(&self, out: &mut W) -> Result<()> {
        for i in 0..self.vocab_size() {
            write!(out, "{i}")?;
            for v in self.vectors.row(i) {
                write!(out, " {v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// `a·b / (‖a‖‖b‖)`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("cosine of widths {} and {}", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine of a zero vector"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgnsEpoch {
    pub epoch: usize,
    /// Mean sampled objective (positive plus negative terms) seen while
    /// training.
    pub sampled_loss: f64,
    /// Mean `−ln σ(u·v)` over every positive pair, after the epoch.
    pub positive_loss: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

struct NegativeTable {
    cumulative: Vec<f64>,
}

impl NegativeTable {
    fn new(counts: &[u64]) -> Self {
        let mut acc = 0.0;
        let cumulative = counts
            .iter()
            .map(|&c| {
                acc += (c as f64).powf(0.75);
                acc
            })
            .collect();
        Self { cumulative }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> usize {
        let total = self.cumulative[self.cumulative.len() - 1];
        let u = rng.gen::<f64>() * total;
        self.cumulative.partition_point(|&c| c <= u).min(self.cumulative.len() - 1)
    }
}

struct Sgns {
    dim: usize,
    input: Vec<f64>,
    output: Vec<f64>,
}

impl Sgns {
    fn dot(&self, center: usize, context: usize) -> f64 {
        let d = self.dim;
        self.input[center * d..(center + 1) * d]
            .iter()
            .zip(&self.output[context * d..(context + 1) * d])
            .map(|(a, b)| a * b)
            .sum()
    }

    /// One ascent step on a (center, context) pair; returns its sampled loss.
    fn update(&mut self, center: usize, context: usize, negatives: &[usize], lr: f64, grad: &mut [f64]) -> f64 {
        let d = self.dim;
        grad.fill(0.0);
        let mut loss = 0.0;
        let targets = std::iter::once((context, 1.0)).chain(negatives.iter().map(|&n| (n, 0.0)));
        for (target, label) in targets {
            let score = self.dot(center, target);
            loss += if label > 0.0 { softplus(-score) } else { softplus(score) };
            let g = lr * (label - sigmoid(score));
            let (u, v) = (&self.input[center * d..(center + 1) * d], &mut self.output[target * d..(target + 1) * d]);
            for k in 0..d {
                grad[k] += g * v[k];
                v[k] += g * u[k];
            }
        }
        for (u, g) in self.input[center * d..(center + 1) * d].iter_mut().zip(grad.iter()) {
            *u += g;
        }
        loss
    }
}

fn sentences(corpus: &Corpus) -> Vec<Vec<usize>> {
    corpus
        .examples()
        .iter()
        .map(|ex| ex.current.tracks().iter().chain(ex.future.tracks()).map(|t| t.index()).collect())
        .collect()
}

fn positive_pairs(sentences: &[Vec<usize>], window: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
    sentences.iter().flat_map(move |s| {
        (0..s.len()).flat_map(move |i| {
            let lo = i.saturating_sub(window);
            let hi = (i + window).min(s.len() - 1);
            (lo..=hi).filter(move |&j| j != i).map(move |j| (s[i], s[j]))
        })
    })
}

pub fn train_sgns(corpus: &Corpus, cfg: &SgnsConfig, seed: u64) -> Result<TrackEmbeddingTable> {
    train_sgns_with_history(corpus, cfg, seed).map(|(t, _)| t)
}

/// [`train_sgns`] plus per-epoch losses.
pub fn train_sgns_with_history(
    corpus: &Corpus,
    cfg: &SgnsConfig,
    seed: u64,
) -> Result<(TrackEmbeddingTable, Vec<SgnsEpoch>)> {
    let v = corpus.vocab_size();
    if cfg.dim == 0 {
        return Err(Error::invalid("embedding dimension must be positive"));
    }
    if v < cfg.negatives + 1 {
        return Err(Error::invalid(format!(
            "vocabulary of {v} tracks cannot supply {} negatives",
            cfg.negatives
        )));
    }
    let d = cfg.dim;
    let mut init = rng::stream(seed, streams::SGNS_INIT);
    let half = 0.5 / d as f64;
    let mut model = Sgns {
        dim: d,
        input: (0..v * d).map(|_| init.gen_range(-half..half)).collect(),
        output: vec![0.0; v * d],
    };
    let table = NegativeTable::new(&corpus.play_counts());
    let sents = sentences(corpus);
    let tokens: usize = sents.iter().map(Vec::len).sum();
    let total = (tokens * cfg.epochs).max(1) as f64;
    let mut rng = rng::stream(seed, streams::SGNS_TRAIN);
    let mut grad = vec![0.0; d];
    let mut negs = Vec::with_capacity(cfg.negatives);
    let mut processed = 0usize;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut pairs) = (0.0, 0usize);
        for s in &sents {
            for i in 0..s.len() {
                let lr = cfg.lr * (1.0 - processed as f64 / total).max(1e-4);
                processed += 1;
                let lo = i.saturating_sub(cfg.window);
                let hi = (i + cfg.window).min(s.len() - 1);
                for j in (lo..=hi).filter(|&j| j != i) {
                    negs.clear();
                    for _ in 0..cfg.negatives {
                        let n = table.draw(&mut rng);
                        if n != s[j] {
                            negs.push(n);
                        }
                    }
                    loss_sum += model.update(s[i], s[j], &negs, lr, &mut grad);
                    pairs += 1;
                }
            }
        }
        let (mut pos_sum, mut pos_n) = (0.0, 0usize);
        for (c, o) in positive_pairs(&sents, cfg.window) {
            pos_sum += softplus(-model.dot(c, o));
            pos_n += 1;
        }
        let record = SgnsEpoch {
            epoch,
            sampled_loss: loss_sum / pairs.max(1) as f64,
            positive_loss: pos_sum / pos_n.max(1) as f64,
        };
        info!(
            "sgns epoch {epoch}: sampled loss {:.5}, positive-pair loss {:.5}",
            record.sampled_loss, record.positive_loss
        );
        history.push(record);
    }
    let table = TrackEmbeddingTable::new(Tensor::matrix(v, d, model.input)?)?;
    Ok((table, history))
}
