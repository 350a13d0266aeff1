//! The playlist tower: track embeddings → 1-D max pool → bidirectional
//! LSTM → conv bank {2, 5, 10} with ReLU and global max pool → dropout →
//! (side-info branch merge) → dense tanh.
//!
//! A [`QuickListsModel`] holds two towers with separate weights: the
//! current tower embeds a user's recent playlist plus profile, the future
//! tower embeds candidate future playlists. By default they share the
//! trainable track-embedding table.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{
    self, bilstm, bilstm_backward, conv1d_relu, conv1d_relu_backward, dense, dense_backward, dropout,
    dropout_backward, embedding_backward, embedding_lookup, init, maxpool1d_backward, maxpool1d_masked,
    Activation, BiLstmCache, ComputeMode, ConvCache, DenseCache, DropoutMask, GradBuffer, LstmWeights,
    ParamId, ParamStore, PoolCache, Tensor,
};
use crate::data::{Playlist, SideInfoVector, TrackId};
use crate::rng::{self, streams};
use crate::track2vec::TrackEmbeddingTable;
use crate::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"QLMD";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_track: usize,
    pub pre_pool_window: usize,
    pub pre_pool_stride: usize,
    pub lstm_hidden: usize,
    pub conv_filters: Vec<usize>,
    /// Output channels per filter size.
    pub conv_channels: usize,
    pub dropout_p: f64,
    pub side_hidden: usize,
    pub d_out: usize,
    /// L2 coefficient on the final dense weights.
    pub l2_lambda: f64,
    /// Playlists are truncated to their last `max_len` tracks.
    pub max_len: usize,
    /// Share one track-embedding table between the towers.
    pub tied_embeddings: bool,
    /// Give the future tower a side-info branch too.
    pub side_in_future: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_track: 32,
            pre_pool_window: 2,
            pre_pool_stride: 2,
            lstm_hidden: 16,
            conv_filters: vec![2, 5, 10],
            conv_channels: 32,
            dropout_p: 0.5,
            side_hidden: 32,
            d_out: 64,
            l2_lambda: 1e-4,
            max_len: 25,
            tied_embeddings: true,
            side_in_future: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_track", self.d_track),
            ("pre_pool_window", self.pre_pool_window),
            ("pre_pool_stride", self.pre_pool_stride),
            ("lstm_hidden", self.lstm_hidden),
            ("conv_channels", self.conv_channels),
            ("side_hidden", self.side_hidden),
            ("d_out", self.d_out),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("encoder {name} must be positive")));
        }
        if self.conv_filters.is_empty() || self.conv_filters.contains(&0) {
            return Err(Error::invalid("conv_filters must be nonempty positive sizes"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::invalid(format!("dropout_p must be in [0, 1), got {}", self.dropout_p)));
        }
        if self.l2_lambda < 0.0 {
            return Err(Error::invalid("l2_lambda must be non-negative"));
        }
        Ok(())
    }

    /// Sequence length after left padding: the smallest length ≥ `max_len`
    /// whose last pooling window ends on the last (most recent) position.
    pub fn padded_len(&self) -> usize {
        let (w, s) = (self.pre_pool_window, self.pre_pool_stride);
        let mut p = self.max_len.max(w);
        while (p - w) % s != 0 {
            p += 1;
        }
        p
    }

    fn bank_width(&self) -> usize {
        self.conv_filters.len() * self.conv_channels
    }
}

/// Final embedding of a playlist (and profile); components lie in (−1, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PlaylistEmbedding(pub Vec<f64>);

impl PlaylistEmbedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TowerKind {
    Current,
    Future,
}

impl TowerKind {
    pub fn name(self) -> &'static str {
        match self {
            TowerKind::Current => "current",
            TowerKind::Future => "future",
        }
    }
}

/// Inputs to zero out before encoding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lesion {
    pub playlist: bool,
    pub side: bool,
}

impl Lesion {
    pub const NONE: Lesion = Lesion { playlist: false, side: false };
    pub const NO_PLAYLIST: Lesion = Lesion { playlist: true, side: false };
    pub const NO_SIDE: Lesion = Lesion { playlist: false, side: true };
}

#[derive(Debug, Clone, Copy)]
struct LstmIds {
    w_x: ParamId,
    w_h: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct DenseIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Tower {
    embedding: ParamId,
    fwd: LstmIds,
    bwd: LstmIds,
    /// (kernel, bias) per filter size, in config order.
    conv: Vec<(ParamId, ParamId)>,
    side: Option<DenseIds>,
    out: DenseIds,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct TowerCache {
    tower: TowerKind,
    ids: Vec<usize>,
    pad: Vec<bool>,
    pool: PoolCache,
    lstm: BiLstmCache,
    lstm_rows: usize,
    /// Per filter: zero rows prepended before the convolution, conv cache,
    /// global pool cache.
    bank: Vec<(usize, ConvCache, PoolCache)>,
    drop: DropoutMask,
    side: Option<DenseCache>,
    out: DenseCache,
}

/// Both towers and their parameters.
#[derive(Debug, Clone)]
pub struct QuickListsModel {
    config: EncoderConfig,
    vocab_size: usize,
    side_width: usize,
    params: ParamStore,
    current: Tower,
    future: Tower,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    encoder: EncoderConfig,
    vocab_size: usize,
    side_width: usize,
}

impl QuickListsModel {
    /// Randomly initialized model.
    pub fn new(config: EncoderConfig, vocab_size: usize, side_width: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(Error::invalid("vocabulary is empty"));
        }
        let mut rng = rng::stream(seed, streams::PARAM_INIT);
        let mut params = ParamStore::new();
        let d = config.d_track;
        let emb_limit = 0.5 / d as f64;
        let shared = if config.tied_embeddings {
            Some(params.add("embedding", init::uniform(&[vocab_size, d], emb_limit, &mut rng))?)
        } else {
            None
        };
        let mut build = |kind: TowerKind, params: &mut ParamStore| -> Result<Tower> {
            let name = kind.name();
            let embedding = match shared {
                Some(id) => id,
                None => params.add(format!("{name}.embedding"), init::uniform(&[vocab_size, d], emb_limit, &mut rng))?,
            };
            let h = config.lstm_hidden;
            let rec = 1.0 / (h as f64).sqrt();
            let mut lstm = |dir: &str, params: &mut ParamStore| -> Result<LstmIds> {
                Ok(LstmIds {
                    w_x: params.add(format!("{name}.lstm.{dir}.w_x"), init::uniform(&[4 * h, d], rec, &mut rng))?,
                    w_h: params.add(format!("{name}.lstm.{dir}.w_h"), init::uniform(&[4 * h, h], rec, &mut rng))?,
                    b: params.add(format!("{name}.lstm.{dir}.b"), init::lstm_bias(h))?,
                })
            };
            let fwd = lstm("fwd", params)?;
            let bwd = lstm("bwd", params)?;
            let c = config.conv_channels;
            let mut conv = Vec::new();
            for &k in &config.conv_filters {
                let kernel = init::xavier(&[k, 2 * h, c], k * 2 * h, k * c, &mut rng);
                conv.push((
                    params.add(format!("{name}.conv{k}.kernel"), kernel)?,
                    params.add(format!("{name}.conv{k}.bias"), Tensor::zeros(&[c]))?,
                ));
            }
            let with_side = kind == TowerKind::Current || config.side_in_future;
            let side = if with_side {
                let (f, sh) = (side_width, config.side_hidden);
                Some(DenseIds {
                    w: params.add(format!("{name}.side.w"), init::xavier(&[f, sh], f, sh, &mut rng))?,
                    b: params.add(format!("{name}.side.b"), Tensor::zeros(&[sh]))?,
                })
            } else {
                None
            };
            let n_in = config.bank_width() + if with_side { config.side_hidden } else { 0 };
            let out = DenseIds {
                w: params.add(format!("{name}.out.w"), init::xavier(&[n_in, config.d_out], n_in, config.d_out, &mut rng))?,
                b: params.add(format!("{name}.out.b"), Tensor::zeros(&[config.d_out]))?,
            };
            Ok(Tower { embedding, fwd, bwd, conv, side, out })
        };
        let current = build(TowerKind::Current, &mut params)?;
        let future = build(TowerKind::Future, &mut params)?;
        Ok(Self { config, vocab_size, side_width, params, current, future })
    }

    /// Model whose embedding table(s) start from pretrained track vectors.
    pub fn with_pretrained(
        config: EncoderConfig,
        table: &TrackEmbeddingTable,
        side_width: usize,
        seed: u64,
    ) -> Result<Self> {
        if table.dim() != config.d_track {
            return Err(Error::shape(format!(
                "pretrained vectors have {} dims, encoder expects {}",
                table.dim(),
                config.d_track
            )));
        }
        let mut model = Self::new(config, table.vocab_size(), side_width, seed)?;
        for id in [model.current.embedding, model.future.embedding] {
            model.params.get_mut(id).values_mut().copy_from_slice(table.as_tensor().values());
        }
        Ok(model)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn side_width(&self) -> usize {
        self.side_width
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Identifies the exact parameter values (hex SHA-256).
    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Final dense weights of both towers (the L2-regularized set).
    pub fn l2_params(&self) -> [ParamId; 2] {
        [self.current.out.w, self.future.out.w]
    }

    fn tower(&self, kind: TowerKind) -> &Tower {
        match kind {
            TowerKind::Current => &self.current,
            TowerKind::Future => &self.future,
        }
    }

    /// Parameter ids owned by a tower (including a shared embedding).
    pub fn tower_params(&self, kind: TowerKind) -> Vec<ParamId> {
        let t = self.tower(kind);
        let mut ids = vec![t.embedding];
        for l in [t.fwd, t.bwd] {
            ids.extend([l.w_x, l.w_h, l.b]);
        }
        for &(k, b) in &t.conv {
            ids.extend([k, b]);
        }
        if let Some(s) = t.side {
            ids.extend([s.w, s.b]);
        }
        ids.extend([t.out.w, t.out.b]);
        ids
    }

    pub fn has_side_branch(&self, kind: TowerKind) -> bool {
        self.tower(kind).side.is_some()
    }

    /// Left-pads (or truncates to the last `max_len`) a playlist into
    /// vocabulary indices plus a padding mask.
    fn prepare(&self, tracks: Option<&[TrackId]>) -> Result<(Vec<usize>, Vec<bool>)> {
        let p = self.config.padded_len();
        let mut ids = vec![0usize; p];
        let mut pad = vec![true; p];
        if let Some(tracks) = tracks {
            let recent = &tracks[tracks.len().saturating_sub(self.config.max_len)..];
            for (slot, t) in (p - recent.len()..p).zip(recent) {
                if t.index() >= self.vocab_size {
                    return Err(Error::OutOfVocab { track: t.index(), vocab_size: self.vocab_size });
                }
                ids[slot] = t.index();
                pad[slot] = false;
            }
        }
        Ok((ids, pad))
    }

    /// Forward pass of one tower. `tracks = None` is the all-padding input
    /// and `side = None` the all-zero profile.
    pub fn forward(
        &self,
        kind: TowerKind,
        tracks: Option<&[TrackId]>,
        side: Option<&SideInfoVector>,
        mode: ComputeMode,
    ) -> Result<(PlaylistEmbedding, TowerCache)> {
        let (ids, pad) = self.prepare(tracks)?;
        self.forward_prepared(kind, ids, pad, side, mode)
    }

    fn forward_prepared(
        &self,
        kind: TowerKind,
        ids: Vec<usize>,
        pad: Vec<bool>,
        side: Option<&SideInfoVector>,
        mode: ComputeMode,
    ) -> Result<(PlaylistEmbedding, TowerCache)> {
        let cfg = &self.config;
        let t = self.tower(kind);
        let p = &self.params;

        let emb = embedding_lookup(p.get(t.embedding), &ids, &pad)?;
        let (pooled, pooled_pad, pool) =
            maxpool1d_masked(&emb, &pad, cfg.pre_pool_window, cfg.pre_pool_stride)?;
        let (hidden, lstm) = bilstm(&pooled, self.lstm(t.fwd), self.lstm(t.bwd), &pooled_pad)?;
        let lstm_rows = hidden.rows();

        let mut bank_out = Vec::with_capacity(cfg.bank_width());
        let mut bank = Vec::with_capacity(t.conv.len());
        for (&k, &(kernel, bias)) in cfg.conv_filters.iter().zip(&t.conv) {
            // k - 1 zero rows in front: every window touching a real row
            // exists no matter how much padding the sequence carries.
            let lead = k - 1;
            let mut vals = vec![0.0; lead * hidden.cols()];
            vals.extend_from_slice(hidden.values());
            let mut in_pad = vec![true; lead];
            in_pad.extend_from_slice(&pooled_pad);
            let input = Tensor::matrix(lead + lstm_rows, hidden.cols(), vals)?;
            let (conv, conv_cache) = conv1d_relu(&input, p.get(kernel), p.get(bias))?;
            // A window counts only if it sees at least one real position.
            let invalid: Vec<bool> = (0..conv.rows()).map(|r| in_pad[r..r + k].iter().all(|&m| m)).collect();
            let (gmax, _, gcache) = maxpool1d_masked(&conv, &invalid, conv.rows(), 1)?;
            bank_out.extend_from_slice(gmax.values());
            bank.push((lead, conv_cache, gcache));
        }
        let bank_t = Tensor::from_vec(bank_out);
        let drop_mode = match mode {
            ComputeMode::Train { seed } => ComputeMode::Train { seed: rng::mix(&[seed, kind as u64]) },
            ComputeMode::Infer => ComputeMode::Infer,
        };
        let (dropped, drop) = dropout(&bank_t, cfg.dropout_p, drop_mode)?;

        let mut merged = dropped.into_values();
        let side_cache = match t.side {
            Some(ids_side) => {
                let bits = match side {
                    Some(s) if s.width() != self.side_width => {
                        return Err(Error::shape(format!(
                            "side info has width {}, model expects {}",
                            s.width(),
                            self.side_width
                        )))
                    }
                    Some(s) => s.as_f64(),
                    None => vec![0.0; self.side_width],
                };
                let (sh, cache) =
                    dense(&Tensor::from_vec(bits), p.get(ids_side.w), p.get(ids_side.b), Activation::Relu)?;
                merged.extend_from_slice(sh.values());
                Some(cache)
            }
            None => None,
        };
        let (out, out_cache) = dense(&Tensor::from_vec(merged), p.get(t.out.w), p.get(t.out.b), Activation::Tanh)?;
        let cache = TowerCache {
            tower: kind,
            ids,
            pad,
            pool,
            lstm,
            lstm_rows,
            bank,
            drop,
            side: side_cache,
            out: out_cache,
        };
        Ok((PlaylistEmbedding(out.into_values()), cache))
    }

    fn lstm(&self, ids: LstmIds) -> LstmWeights<'_> {
        LstmWeights { w_x: self.params.get(ids.w_x), w_h: self.params.get(ids.w_h), b: self.params.get(ids.b) }
    }

    /// Adds d(objective)/d(params) into `grads`, given the gradient of the
    /// objective with respect to the tower's output embedding.
    pub fn backward(&self, cache: &TowerCache, grad_out: &[f64], grads: &mut GradBuffer) {
        let cfg = &self.config;
        let t = self.tower(cache.tower);
        let p = &self.params;
        let add = |grads: &mut GradBuffer, id: ParamId, g: &[f64]| {
            for (a, b) in grads.slot(id, p.get(id).len()).iter_mut().zip(g) {
                *a += b;
            }
        };

        let (g_merged, gw, gb) = dense_backward(&cache.out, p.get(t.out.w), &Tensor::from_vec(grad_out.to_vec()));
        add(grads, t.out.w, &gw);
        add(grads, t.out.b, &gb);
        let bank_w = cfg.bank_width();
        if let (Some(ids_side), Some(side_cache)) = (t.side, &cache.side) {
            let g_side = Tensor::from_vec(g_merged.values()[bank_w..].to_vec());
            let (_, gw, gb) = dense_backward(side_cache, p.get(ids_side.w), &g_side);
            add(grads, ids_side.w, &gw);
            add(grads, ids_side.b, &gb);
        }
        let g_bank = dropout_backward(&cache.drop, &Tensor::from_vec(g_merged.values()[..bank_w].to_vec()));

        let two_h = 2 * cfg.lstm_hidden;
        let mut g_hidden = Tensor::zeros(&[cache.lstm_rows, two_h]);
        for (f, (&(kernel, bias), (lead, conv_cache, gcache))) in t.conv.iter().zip(&cache.bank).enumerate() {
            let c = cfg.conv_channels;
            let g_max = Tensor::matrix(1, c, g_bank.values()[f * c..(f + 1) * c].to_vec())
                .expect("pooled gradient has one row");
            let g_conv = maxpool1d_backward(gcache, &g_max);
            let (g_in, gk, gb) = conv1d_relu_backward(conv_cache, p.get(kernel), &g_conv);
            add(grads, kernel, &gk);
            add(grads, bias, &gb);
            for (a, b) in g_hidden.values_mut().iter_mut().zip(&g_in.values()[lead * two_h..]) {
                *a += b;
            }
        }
        let (g_pooled, gf, gbk) = bilstm_backward(&cache.lstm, self.lstm(t.fwd), self.lstm(t.bwd), &g_hidden);
        for (ids, g) in [(t.fwd, gf), (t.bwd, gbk)] {
            add(grads, ids.w_x, &g.w_x);
            add(grads, ids.w_h, &g.w_h);
            add(grads, ids.b, &g.b);
        }
        let g_emb = maxpool1d_backward(&cache.pool, &g_pooled);
        let table = p.get(t.embedding);
        let slot = grads.slot(t.embedding, table.len());
        embedding_backward(slot, table.cols(), &cache.ids, &cache.pad, &g_emb);
    }

    /// Current-tower embedding of a user's playlist and profile.
    pub fn encode(&self, playlist: &Playlist, side: &SideInfoVector, mode: ComputeMode) -> Result<PlaylistEmbedding> {
        Ok(self.forward(TowerKind::Current, Some(playlist.tracks()), Some(side), mode)?.0)
    }

    /// Future-tower embedding of a candidate playlist (inference mode).
    pub fn encode_future(&self, playlist: &Playlist) -> Result<PlaylistEmbedding> {
        Ok(self.forward(TowerKind::Future, Some(playlist.tracks()), None, ComputeMode::Infer)?.0)
    }

    /// Current-tower embedding from side information alone: the playlist
    /// branch sees an all-padding sequence.
    pub fn encode_cold(&self, side: &SideInfoVector) -> Result<PlaylistEmbedding> {
        Ok(self.forward(TowerKind::Current, None, Some(side), ComputeMode::Infer)?.0)
    }

    /// Current-tower embedding with the masked inputs replaced by zeros.
    pub fn encode_lesioned(
        &self,
        playlist: &Playlist,
        side: &SideInfoVector,
        lesion: Lesion,
    ) -> Result<PlaylistEmbedding> {
        let tracks = (!lesion.playlist).then(|| playlist.tracks());
        let side = (!lesion.side).then_some(side);
        Ok(self.forward(TowerKind::Current, tracks, side, ComputeMode::Infer)?.0)
    }

    pub fn write<W: Write>(&self, with_adam: bool, out: &mut W) -> Result<()> {
        let header = serde_json::to_vec(&ModelHeader {
            encoder: self.config.clone(),
            vocab_size: self.vocab_size,
            side_width: self.side_width,
        })?;
        out.write_all(MODEL_MAGIC)?;
        out.write_all(&MODEL_VERSION.to_le_bytes())?;
        out.write_all(&(header.len() as u32).to_le_bytes())?;
        out.write_all(&header)?;
        autodiff::write_store(&self.params, with_adam, out)
    }

    pub fn read<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Version("not a model checkpoint (bad magic)".into()));
        }
        let version = autodiff::read_u32(input)?;
        if version != MODEL_VERSION {
            return Err(Error::Version(format!("model checkpoint version {version}, expected {MODEL_VERSION}")));
        }
        let len = autodiff::read_u32(input)? as usize;
        let mut header = vec![0u8; len];
        input.read_exact(&mut header)?;
        let header: ModelHeader = serde_json::from_slice(&header)
            .map_err(|e| Error::Version(format!("incompatible model header: {e}")))?;
        let stored = autodiff::read_store(input)?;
        let mut model = Self::new(header.encoder, header.vocab_size, header.side_width, 0)?;
        if stored.len() != model.params.len() {
            return Err(Error::Version(format!(
                "checkpoint has {} parameters, its config implies {}",
                stored.len(),
                model.params.len()
            )));
        }
        for (want, got) in model.params.params().iter().zip(stored.params()) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(Error::Version(format!(
                    "checkpoint parameter {} {:?} does not match config ({} {:?})",
                    got.name,
                    got.value.shape(),
                    want.name,
                    want.value.shape()
                )));
            }
        }
        model.params = stored;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>, with_adam: bool) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write(with_adam, &mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests;
