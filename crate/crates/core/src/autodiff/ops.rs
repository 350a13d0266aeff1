use rand::Rng;

use super::Tensor;
use crate::rng::{self, streams};
use crate::{Error, Result};

/// Whether stochastic layers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComputeMode {
    /// Dropout on, masks drawn from `seed`.
    Train { seed: u64 },
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Embedding lookup

/// Gathers table rows; padded positions produce zero rows.
pub fn embedding_lookup(table: &Tensor, ids: &[usize], pad_mask: &[bool]) -> Result<Tensor> {
    if ids.len() != pad_mask.len() {
        return Err(Error::shape(format!("{} ids but {} mask entries", ids.len(), pad_mask.len())));
    }
    let (v, d) = (table.rows(), table.cols());
    let mut out = Tensor::zeros(&[ids.len(), d]);
    for (pos, (&id, &pad)) in ids.iter().zip(pad_mask).enumerate() {
        if pad {
            continue;
        }
        if id >= v {
            return Err(Error::OutOfVocab { track: id, vocab_size: v });
        }
        out.row_mut(pos).copy_from_slice(table.row(id));
    }
    Ok(out)
}

/// Scatters `grad_out` rows into `table_grad` (row-major, `dim` columns).
pub fn embedding_backward(
    table_grad: &mut [f64],
    dim: usize,
    ids: &[usize],
    pad_mask: &[bool],
    grad_out: &Tensor,
) {
    for (pos, (&id, &pad)) in ids.iter().zip(pad_mask).enumerate() {
        if pad {
            continue;
        }
        for (acc, g) in table_grad[id * dim..(id + 1) * dim].iter_mut().zip(grad_out.row(pos)) {
            *acc += g;
        }
    }
}

// ---------------------------------------------------------------------------
// Max pooling along the sequence axis

#[derive(Debug, Clone)]
pub struct PoolCache {
    /// Input row feeding each output entry; `None` for fully padded windows.
    sources: Vec<Option<usize>>,
    in_rows: usize,
    cols: usize,
}

pub fn maxpool1d(x: &Tensor, window: usize, stride: usize) -> Result<(Tensor, PoolCache)> {
    let mask = vec![false; x.rows()];
    let (out, _, cache) = maxpool1d_masked(x, &mask, window, stride)?;
    Ok((out, cache))
}

/// Max pooling that ignores padded rows. A window made only of padding
/// yields zeros and is itself marked as padding in the returned mask.
pub fn maxpool1d_masked(
    x: &Tensor,
    pad_mask: &[bool],
    window: usize,
    stride: usize,
) -> Result<(Tensor, Vec<bool>, PoolCache)> {
    if window == 0 || stride == 0 {
        return Err(Error::invalid("pooling window and stride must be positive"));
    }
    let (l, d) = (x.rows(), x.cols());
    if pad_mask.len() != l {
        return Err(Error::shape(format!("{l} rows but {} mask entries", pad_mask.len())));
    }
    if l < window {
        return Err(Error::shape(format!("sequence of {l} is shorter than pooling window {window}")));
    }
    let out_rows = (l - window) / stride + 1;
    let mut out = Tensor::zeros(&[out_rows, d]);
    let mut out_mask = vec![true; out_rows];
    let mut sources = vec![None; out_rows * d];
    for o in 0..out_rows {
        let start = o * stride;
        for c in 0..d {
            let mut best: Option<(usize, f64)> = None;
            for r in start..start + window {
                if pad_mask[r] {
                    continue;
                }
                let v = x.values()[r * d + c];
                if best.map_or(true, |(_, b)| v > b) {
                    best = Some((r, v));
                }
            }
            if let Some((r, v)) = best {
                out.values_mut()[o * d + c] = v;
                sources[o * d + c] = Some(r);
                out_mask[o] = false;
            }
        }
    }
    Ok((out, out_mask, PoolCache { sources, in_rows: l, cols: d }))
}

pub fn maxpool1d_backward(cache: &PoolCache, grad_out: &Tensor) -> Tensor {
    let d = cache.cols;
    let mut gx = Tensor::zeros(&[cache.in_rows, d]);
    for (i, src) in cache.sources.iter().enumerate() {
        if let Some(r) = src {
            gx.values_mut()[r * d + i % d] += grad_out.values()[i];
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// LSTM

/// One direction of an LSTM. Gate rows are stacked as input, forget,
/// candidate, output: `w_x` is `4h x d_in`, `w_h` is `4h x h`, `b` is `4h`.
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights<'a> {
    pub w_x: &'a Tensor,
    pub w_h: &'a Tensor,
    pub b: &'a Tensor,
}

impl LstmWeights<'_> {
    pub fn hidden(&self) -> usize {
        self.b.len() / 4
    }

    fn check(&self, d_in: usize) -> Result<()> {
        let h = self.hidden();
        if self.b.len() != 4 * h || h == 0 {
            return Err(Error::shape(format!("LSTM bias length {} is not 4h", self.b.len())));
        }
        self.w_x.expect_shape(&[4 * h, d_in], "LSTM input weights")?;
        self.w_h.expect_shape(&[4 * h, h], "LSTM recurrent weights")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmGrads {
    pub w_x: Vec<f64>,
    pub w_h: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LstmStep {
    t: usize,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Activated gates, `[i | f | g | o]`.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LstmCache {
    steps: Vec<LstmStep>,
}

fn lstm_forward(x: &Tensor, w: LstmWeights<'_>, order: &[usize]) -> (Vec<Vec<f64>>, LstmCache) {
    let h = w.hidden();
    let d_in = x.cols();
    let mut h_prev = vec![0.0; h];
    let mut c_prev = vec![0.0; h];
    let mut outputs = Vec::with_capacity(order.len());
    let mut steps = Vec::with_capacity(order.len());
    for &t in order {
        let xt = x.row(t);
        let mut gates = w.b.values().to_vec();
        for (r, a) in gates.iter_mut().enumerate() {
            let wx = &w.w_x.values()[r * d_in..(r + 1) * d_in];
            let wh = &w.w_h.values()[r * h..(r + 1) * h];
            *a += wx.iter().zip(xt).map(|(p, q)| p * q).sum::<f64>()
                + wh.iter().zip(&h_prev).map(|(p, q)| p * q).sum::<f64>();
        }
        for (r, a) in gates.iter_mut().enumerate() {
            *a = if (2 * h..3 * h).contains(&r) { a.tanh() } else { sigmoid(*a) };
        }
        let (i, rest) = gates.split_at(h);
        let (f, rest) = rest.split_at(h);
        let (g, o) = rest.split_at(h);
        let c: Vec<f64> = (0..h).map(|j| f[j] * c_prev[j] + i[j] * g[j]).collect();
        let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
        let ht: Vec<f64> = (0..h).map(|j| o[j] * tanh_c[j]).collect();
        steps.push(LstmStep {
            t,
            h_prev: std::mem::replace(&mut h_prev, ht.clone()),
            c_prev: std::mem::replace(&mut c_prev, c),
            gates,
            tanh_c,
        });
        outputs.push(ht);
    }
    (outputs, LstmCache { steps })
}

/// Backpropagation through time. `dh_out[s]` is the gradient w.r.t. the
/// hidden output of step `s`; input gradients are added into `gx`.
fn lstm_backward(
    x: &Tensor,
    w: LstmWeights<'_>,
    cache: &LstmCache,
    dh_out: &[Vec<f64>],
    gx: &mut Tensor,
) -> LstmGrads {
    let h = w.hidden();
    let d_in = x.cols();
    let mut grads = LstmGrads {
        w_x: vec![0.0; 4 * h * d_in],
        w_h: vec![0.0; 4 * h * h],
        b: vec![0.0; 4 * h],
    };
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut da = vec![0.0; 4 * h];
    for (s, step) in cache.steps.iter().enumerate().rev() {
        let (i, rest) = step.gates.split_at(h);
        let (f, rest) = rest.split_at(h);
        let (g, o) = rest.split_at(h);
        for j in 0..h {
            let dh = dh_out[s][j] + dh_next[j];
            let d_o = dh * step.tanh_c[j];
            let dc = dh * o[j] * (1.0 - step.tanh_c[j] * step.tanh_c[j]) + dc_next[j];
            let di = dc * g[j];
            let dg = dc * i[j];
            let df = dc * step.c_prev[j];
            dc_next[j] = dc * f[j];
            da[j] = di * i[j] * (1.0 - i[j]);
            da[h + j] = df * f[j] * (1.0 - f[j]);
            da[2 * h + j] = dg * (1.0 - g[j] * g[j]);
            da[3 * h + j] = d_o * o[j] * (1.0 - o[j]);
        }
        let xt = x.row(step.t);
        dh_next.fill(0.0);
        let gxt = gx.row_mut(step.t);
        for (r, &a) in da.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            grads.b[r] += a;
            let wx = &w.w_x.values()[r * d_in..(r + 1) * d_in];
            for c in 0..d_in {
                grads.w_x[r * d_in + c] += a * xt[c];
                gxt[c] += a * wx[c];
            }
            let wh = &w.w_h.values()[r * h..(r + 1) * h];
            for c in 0..h {
                grads.w_h[r * h + c] += a * step.h_prev[c];
                dh_next[c] += a * wh[c];
            }
        }
    }
    grads
}

#[derive(Debug, Clone)]
pub struct BiLstmCache {
    x: Tensor,
    hidden: usize,
    forward_order: Vec<usize>,
    fwd: LstmCache,
    bwd: LstmCache,
}

/// Bidirectional LSTM over the non-padded rows of `x`. Output row `t` is
/// `[forward h_t | backward h_t]`; padded rows are zero and do not advance
/// either recurrence.
pub fn bilstm(
    x: &Tensor,
    fwd: LstmWeights<'_>,
    bwd: LstmWeights<'_>,
    pad_mask: &[bool],
) -> Result<(Tensor, BiLstmCache)> {
    let (l, d_in) = (x.rows(), x.cols());
    if pad_mask.len() != l {
        return Err(Error::shape(format!("{l} rows but {} mask entries", pad_mask.len())));
    }
    fwd.check(d_in)?;
    bwd.check(d_in)?;
    let h = fwd.hidden();
    if bwd.hidden() != h {
        return Err(Error::shape("forward and backward LSTM widths differ"));
    }
    let forward_order: Vec<usize> = (0..l).filter(|&t| !pad_mask[t]).collect();
    let backward_order: Vec<usize> = forward_order.iter().rev().copied().collect();
    let (hf, fcache) = lstm_forward(x, fwd, &forward_order);
    let (hb, bcache) = lstm_forward(x, bwd, &backward_order);
    let mut out = Tensor::zeros(&[l, 2 * h]);
    for (s, &t) in forward_order.iter().enumerate() {
        out.row_mut(t)[..h].copy_from_slice(&hf[s]);
    }
    for (s, &t) in backward_order.iter().enumerate() {
        out.row_mut(t)[h..].copy_from_slice(&hb[s]);
    }
    let cache = BiLstmCache { x: x.clone(), hidden: h, forward_order, fwd: fcache, bwd: bcache };
    Ok((out, cache))
}

pub fn bilstm_backward(
    cache: &BiLstmCache,
    fwd: LstmWeights<'_>,
    bwd: LstmWeights<'_>,
    grad_out: &Tensor,
) -> (Tensor, LstmGrads, LstmGrads) {
    let h = cache.hidden;
    let mut gx = Tensor::zeros(&[cache.x.rows(), cache.x.cols()]);
    let dh_f: Vec<Vec<f64>> =
        cache.forward_order.iter().map(|&t| grad_out.row(t)[..h].to_vec()).collect();
    let dh_b: Vec<Vec<f64>> =
        cache.forward_order.iter().rev().map(|&t| grad_out.row(t)[h..].to_vec()).collect();
    let gf = lstm_backward(&cache.x, fwd, &cache.fwd, &dh_f, &mut gx);
    let gb = lstm_backward(&cache.x, bwd, &cache.bwd, &dh_b, &mut gx);
    (gx, gf, gb)
}

// ---------------------------------------------------------------------------
// 1-D convolution + ReLU

#[derive(Debug, Clone)]
pub struct ConvCache {
    x: Tensor,
    out: Tensor,
    k: usize,
}

/// Valid cross-correlation along the sequence axis followed by ReLU.
/// `kernel` is `k x d_in x c_out`.
pub fn conv1d_relu(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<(Tensor, ConvCache)> {
    let [k, d_in, c_out] = kernel.shape() else {
        return Err(Error::shape(format!("conv kernel must be rank 3, got {:?}", kernel.shape())));
    };
    let (k, d_in, c_out) = (*k, *d_in, *c_out);
    if x.cols() != d_in {
        return Err(Error::shape(format!("conv expects {d_in} input channels, got {}", x.cols())));
    }
    bias.expect_shape(&[c_out], "conv bias")?;
    let l = x.rows();
    if l < k {
        return Err(Error::shape(format!("sequence of {l} is shorter than filter {k}")));
    }
    let rows = l - k + 1;
    let mut out = Tensor::zeros(&[rows, c_out]);
    let kv = kernel.values();
    for r in 0..rows {
        let acc = out.row_mut(r);
        acc.copy_from_slice(bias.values());
        for j in 0..k {
            let xr = x.row(r + j);
            for (c, &xv) in xr.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let w = &kv[(j * d_in + c) * c_out..(j * d_in + c + 1) * c_out];
                for (a, &wv) in acc.iter_mut().zip(w) {
                    *a += xv * wv;
                }
            }
        }
        for a in acc.iter_mut() {
            *a = a.max(0.0);
        }
    }
    Ok((out.clone(), ConvCache { x: x.clone(), out, k }))
}

/// Returns (input grad, kernel grad, bias grad).
pub fn conv1d_relu_backward(
    cache: &ConvCache,
    kernel: &Tensor,
    grad_out: &Tensor,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (k, d_in) = (cache.k, cache.x.cols());
    let c_out = cache.out.cols();
    let kv = kernel.values();
    let mut gx = Tensor::zeros(&[cache.x.rows(), d_in]);
    let mut gk = vec![0.0; kernel.len()];
    let mut gb = vec![0.0; c_out];
    let mut dz = vec![0.0; c_out];
    for r in 0..cache.out.rows() {
        let mut any = false;
        for o in 0..c_out {
            dz[o] = if cache.out.row(r)[o] > 0.0 { grad_out.row(r)[o] } else { 0.0 };
            any |= dz[o] != 0.0;
        }
        if !any {
            continue;
        }
        for o in 0..c_out {
            gb[o] += dz[o];
        }
        for j in 0..k {
            let t = r + j;
            for c in 0..d_in {
                let base = (j * d_in + c) * c_out;
                let xv = cache.x.row(t)[c];
                let mut acc = 0.0;
                for o in 0..c_out {
                    gk[base + o] += xv * dz[o];
                    acc += kv[base + o] * dz[o];
                }
                gx.row_mut(t)[c] += acc;
            }
        }
    }
    (gx, gk, gb)
}

// ---------------------------------------------------------------------------
// Dropout

/// Per-entry multipliers applied by [`dropout`].
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask(pub Vec<f64>);

/// Inverted dropout: in training, entries are zeroed with probability `p`
/// and survivors scaled by `1 / (1 - p)`; inference is the identity.
pub fn dropout(x: &Tensor, p: f64, mode: ComputeMode) -> Result<(Tensor, DropoutMask)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout probability must be in [0, 1), got {p}")));
    }
    let mask = match mode {
        ComputeMode::Infer => vec![1.0; x.len()],
        ComputeMode::Train { .. } if p == 0.0 => vec![1.0; x.len()],
        ComputeMode::Train { seed } => {
            let mut rng = rng::stream(seed, streams::DROPOUT);
            let keep = 1.0 / (1.0 - p);
            (0..x.len()).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect()
        }
    };
    Ok((apply_mask(x, &mask), DropoutMask(mask)))
}

fn apply_mask(x: &Tensor, mask: &[f64]) -> Tensor {
    let vals = x.values().iter().zip(mask).map(|(v, m)| v * m).collect();
    Tensor::new(x.shape().to_vec(), vals).expect("mask matches input")
}

pub fn dropout_backward(mask: &DropoutMask, grad_out: &Tensor) -> Tensor {
    apply_mask(grad_out, &mask.0)
}

// ---------------------------------------------------------------------------
// Fully connected

#[derive(Debug, Clone)]
pub struct DenseCache {
    x: Vec<f64>,
    y: Vec<f64>,
    activation: Activation,
}

/// `activation(Wᵀx + b)` with `W` of shape `n x m`.
pub fn dense(x: &Tensor, w: &Tensor, b: &Tensor, activation: Activation) -> Result<(Tensor, DenseCache)> {
    let n = x.len();
    let m = b.len();
    w.expect_shape(&[n, m], "dense weights")?;
    b.expect_shape(&[m], "dense bias")?;
    let mut z = b.values().to_vec();
    for (i, &xi) in x.values().iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (zj, wij) in z.iter_mut().zip(w.row(i)) {
            *zj += xi * wij;
        }
    }
    let y: Vec<f64> = z.into_iter().map(|v| activation.apply(v)).collect();
    let cache = DenseCache { x: x.values().to_vec(), y: y.clone(), activation };
    Ok((Tensor::from_vec(y), cache))
}

/// Returns (input grad, weight grad, bias grad).
pub fn dense_backward(cache: &DenseCache, w: &Tensor, grad_out: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
    let m = cache.y.len();
    let dz: Vec<f64> = cache
        .y
        .iter()
        .zip(grad_out.values())
        .map(|(&y, &g)| g * cache.activation.derivative_from_output(y))
        .collect();
    let mut gw = vec![0.0; cache.x.len() * m];
    let mut gx = vec![0.0; cache.x.len()];
    for (i, &xi) in cache.x.iter().enumerate() {
        let row = w.row(i);
        let mut acc = 0.0;
        for j in 0..m {
            gw[i * m + j] = xi * dz[j];
            acc += row[j] * dz[j];
        }
        gx[i] = acc;
    }
    (Tensor::from_vec(gx), gw, dz)
}

// ---------------------------------------------------------------------------
// L2 penalty

/// `lambda * Σ‖W‖²` over the given weights.
pub fn l2_penalty(weights: &[&Tensor], lambda: f64) -> f64 {
    lambda * weights.iter().flat_map(|w| w.values()).map(|v| v * v).sum::<f64>()
}

/// Gradient `2 * lambda * W` of [`l2_penalty`] for one weight tensor.
pub fn l2_penalty_grad(w: &Tensor, lambda: f64) -> Vec<f64> {
    w.values().iter().map(|v| 2.0 * lambda * v).collect()
}
