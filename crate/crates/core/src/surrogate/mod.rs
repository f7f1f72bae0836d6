//! Transformer-encoder regressor from per-bus features to accepted injections.
//!
//! Every bus is a token carrying `[p_net, p_load, pf, c_ls, lambda_corr]`.
//! Tokens are embedded linearly, pass through pre-norm encoder layers
//! (multi-head self-attention over all buses, then a GELU feed-forward
//! block, each wrapped in a residual) and a linear head maps every token to
//! one prediction. There is no positional encoding, so the map is
//! permutation-equivariant over buses.

mod io;
mod kernels;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{load, load_with_shape, save};
pub use train::{evaluate, train, EpochStats, History, Metrics, Sample, TrainConfig};

use kernels::{gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_grad_w, linear_grad_x, softmax_rows};

pub const N_FEATURES: usize = 5;
/// Column of `p_net` in a feature row.
pub const P_NET: usize = 0;
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SurrogateError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: usize },
    #[error("training diverged at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("model file checksum mismatch")]
    Checksum,
    #[error("unsupported model file version {0}")]
    Version(u32),
    #[error("corrupt model file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct Hyper {
    pub d_model: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub n_heads: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            d_ff: 128,
            n_heads: 4,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<(), SurrogateError> {
        if self.d_model == 0 || self.d_ff == 0 || self.n_heads == 0 {
            return Err(SurrogateError::Config("dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(SurrogateError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Z-score statistics of the inputs and the target.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Normalization {
    pub x_mean: [f64; N_FEATURES],
    pub x_std: [f64; N_FEATURES],
    pub y_mean: f64,
    pub y_std: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            x_mean: [0.0; N_FEATURES],
            x_std: [1.0; N_FEATURES],
            y_mean: 0.0,
            y_std: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Span {
    off: usize,
    len: usize,
}

impl Span {
    fn range(&self) -> std::ops::Range<usize> {
        self.off..self.off + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct LayerLayout {
    ln1_g: Span,
    ln1_b: Span,
    wq: Span,
    wk: Span,
    wv: Span,
    /// `wq`, `wk` and `wv` stacked, as one 3d×d matrix.
    wqkv: Span,
    wo: Span,
    bo: Span,
    ln2_g: Span,
    ln2_b: Span,
    w1: Span,
    b1: Span,
    w2: Span,
    b2: Span,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    embed_w: Span,
    embed_b: Span,
    layers: Vec<LayerLayout>,
    head_w: Span,
    head_b: Span,
    total: usize,
}

impl Layout {
    fn new(h: &Hyper) -> Self {
        let mut off = 0;
        let mut take = |len: usize| {
            let s = Span { off, len };
            off += len;
            s
        };
        let (d, ff) = (h.d_model, h.d_ff);
        let embed_w = take(d * N_FEATURES);
        let embed_b = take(d);
        let layers = (0..h.n_layers)
            .map(|_| {
                let ln1_g = take(d);
                let ln1_b = take(d);
                let wq = take(d * d);
                let wk = take(d * d);
                let wv = take(d * d);
                LayerLayout {
                    ln1_g,
                    ln1_b,
                    wq,
                    wk,
                    wv,
                    wqkv: Span { off: wq.off, len: 3 * d * d },
                    wo: take(d * d),
                    bo: take(d),
                    ln2_g: take(d),
                    ln2_b: take(d),
                    w1: take(ff * d),
                    b1: take(ff),
                    w2: take(d * ff),
                    b2: take(d),
                }
            })
            .collect();
        let head_w = take(d);
        let head_b = take(1);
        Self {
            embed_w,
            embed_b,
            layers,
            head_w,
            head_b,
            total: off,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    hyper: Hyper,
    layout: Layout,
    params: Vec<f64>,
    norm: Normalization,
    seed: u64,
}

/// Intermediate values of one layer, kept for the backward pass.
struct LayerCache {
    h_in: Vec<f64>,
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    a: Vec<f64>,
    /// Row-major `[q | k | v]`, 3d values per token.
    qkv: Vec<f64>,
    probs: Vec<f64>,
    o: Vec<f64>,
    xhat2: Vec<f64>,
    rstd2: Vec<f64>,
    c: Vec<f64>,
    z: Vec<f64>,
    u: Vec<f64>,
}

struct Cache {
    n_tokens: usize,
    rows: usize,
    x: Vec<f64>,
    layers: Vec<LayerCache>,
    h_out: Vec<f64>,
    y: Vec<f64>,
}

/// Per-layer internals of a forward pass, for inspection.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Attention weights, `[head][query][key]` flattened.
    pub attention: Vec<f64>,
    /// Pre-affine outputs of the two layer norms, token-major.
    pub ln1_hat: Vec<f64>,
    pub ln2_hat: Vec<f64>,
    /// Token dimension at the layer output.
    pub width: usize,
}

fn glorot(rng: &mut ChaCha8Rng, w: &mut [f64], fan_in: usize, fan_out: usize) {
    let lim = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for x in w {
        *x = rng.gen_range(-lim..lim);
    }
}

impl SurrogateModel {
    pub fn new(hyper: Hyper, seed: u64) -> Result<Self, SurrogateError> {
        hyper.validate()?;
        let layout = Layout::new(&hyper);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, ff) = (hyper.d_model, hyper.d_ff);
        glorot(&mut rng, &mut params[layout.embed_w.range()], N_FEATURES, d);
        for l in &layout.layers {
            params[l.ln1_g.range()].fill(1.0);
            params[l.ln2_g.range()].fill(1.0);
            for w in [l.wq, l.wk, l.wv, l.wo] {
                glorot(&mut rng, &mut params[w.range()], d, d);
            }
            glorot(&mut rng, &mut params[l.w1.range()], d, ff);
            glorot(&mut rng, &mut params[l.w2.range()], ff, d);
        }
        glorot(&mut rng, &mut params[layout.head_w.range()], d, 1);
        Ok(Self {
            hyper,
            layout,
            params,
            norm: Normalization::default(),
            seed,
        })
    }

    pub fn hyper(&self) -> &Hyper {
        &self.hyper
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    pub fn set_normalization(&mut self, norm: Normalization) -> Result<(), SurrogateError> {
        if norm.x_std.iter().chain([&norm.y_std]).any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(SurrogateError::Config("normalization stds must be positive".into()));
        }
        self.norm = norm;
        Ok(())
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Overwrites the output head.
    pub fn set_head(&mut self, w: &[f64], b: f64) -> Result<(), SurrogateError> {
        if w.len() != self.hyper.d_model {
            return Err(SurrogateError::Shape(format!("head expects {} weights, got {}", self.hyper.d_model, w.len())));
        }
        let (hw, hb) = (self.layout.head_w, self.layout.head_b);
        self.params[hw.range()].copy_from_slice(w);
        self.params[hb.off] = b;
        Ok(())
    }

    fn p(&self, s: Span) -> &[f64] {
        &self.params[s.range()]
    }

    fn flatten(&self, features: &[[f64; N_FEATURES]]) -> Result<Vec<f64>, SurrogateError> {
        if features.is_empty() {
            return Err(SurrogateError::Shape("no tokens".into()));
        }
        Ok(features.iter().flatten().copied().collect())
    }

    /// Batched forward over `rows = batch · n_tokens` raw feature rows.
    fn forward_cached(&self, raw: &[f64], n_tokens: usize) -> Result<Cache, SurrogateError> {
        let rows = raw.len() / N_FEATURES;
        if raw.len() % N_FEATURES != 0 || n_tokens == 0 || rows % n_tokens != 0 {
            return Err(SurrogateError::Shape(format!(
                "{} values do not form whole {}-token samples",
                raw.len(),
                n_tokens
            )));
        }
        let batch = rows / n_tokens;
        let Hyper { d_model: d, d_ff: ff, n_heads: nh, .. } = self.hyper;
        let dk = d / nh;
        let scale = 1.0 / (dk as f64).sqrt();
        let n = n_tokens;

        let mut x = raw.to_vec();
        for row in x.chunks_mut(N_FEATURES) {
            for j in 0..N_FEATURES {
                row[j] = (row[j] - self.norm.x_mean[j]) / self.norm.x_std[j];
            }
        }
        let mut h = linear(&x, rows, N_FEATURES, self.p(self.layout.embed_w), Some(self.p(self.layout.embed_b)), d);

        let mut layers = Vec::with_capacity(self.hyper.n_layers);
        for (li, l) in self.layout.layers.iter().enumerate() {
            let (xhat1, rstd1) = layer_norm(&h, d);
            let a = affine(&xhat1, self.p(l.ln1_g), self.p(l.ln1_b));
            let qkv = linear(&a, rows, d, self.p(l.wqkv), None, 3 * d);
            let d3 = 3 * d;
            let mut probs = vec![0.0; batch * nh * n * n];
            let mut o = vec![0.0; rows * d];
            for s in 0..batch {
                for hd in 0..nh {
                    let base = s * n * d3 + hd * dk;
                    let pr = &mut probs[(s * nh + hd) * n * n..][..n * n];
                    let (q, k, v) = (&qkv[base..], &qkv[base + d..], &qkv[base + 2 * d..]);
                    kernels::gemm(n, dk, n, scale, q, d3, 1, k, 1, d3, 0.0, pr, n, 1);
                    softmax_rows(pr, n);
                    let ob = s * n * d + hd * dk;
                    kernels::gemm(n, n, dk, 1.0, pr, n, 1, v, d3, 1, 0.0, &mut o[ob..], d, 1);
                }
            }
            let att = linear(&o, rows, d, self.p(l.wo), Some(self.p(l.bo)), d);
            let h1: Vec<f64> = h.iter().zip(&att).map(|(a, b)| a + b).collect();
            let (xhat2, rstd2) = layer_norm(&h1, d);
            let c = affine(&xhat2, self.p(l.ln2_g), self.p(l.ln2_b));
            let z = linear(&c, rows, d, self.p(l.w1), Some(self.p(l.b1)), ff);
            let u: Vec<f64> = z.iter().map(|z| gelu(*z)).collect();
            let f = linear(&u, rows, ff, self.p(l.w2), Some(self.p(l.b2)), d);
            let h_next: Vec<f64> = h1.iter().zip(&f).map(|(a, b)| a + b).collect();
            if h_next.iter().any(|v| !v.is_finite()) {
                return Err(SurrogateError::NonFinite { layer: li + 1 });
            }
            layers.push(LayerCache {
                h_in: std::mem::replace(&mut h, h_next),
                xhat1,
                rstd1,
                a,
                qkv,
                probs,
                o,
                xhat2,
                rstd2,
                c,
                z,
                u,
            });
        }
        let hw = self.p(self.layout.head_w);
        let hb = self.params[self.layout.head_b.off];
        let y: Vec<f64> = h
            .chunks(d)
            .map(|t| t.iter().zip(hw).map(|(a, b)| a * b).sum::<f64>() + hb)
            .collect();
        if y.iter().any(|v| !v.is_finite()) {
            return Err(SurrogateError::NonFinite { layer: self.hyper.n_layers + 1 });
        }
        Ok(Cache {
            n_tokens,
            rows,
            x,
            layers,
            h_out: h,
            y,
        })
    }

    /// Reverse pass from `dy` (gradient w.r.t. normalized outputs). Accumulates
    /// parameter gradients into `grad` when given and returns the gradient
    /// w.r.t. the normalized inputs when `want_dx`.
    fn backward(&self, cache: &Cache, dy: &[f64], mut grad: Option<&mut [f64]>, want_dx: bool) -> Option<Vec<f64>> {
        let Hyper { d_model: d, d_ff: ff, n_heads: nh, .. } = self.hyper;
        let dk = d / nh;
        let scale = 1.0 / (dk as f64).sqrt();
        let (rows, n) = (cache.rows, cache.n_tokens);
        let batch = rows / n;
        let lay = &self.layout;

        let hw = self.p(lay.head_w);
        if let Some(g) = grad.as_deref_mut() {
            for (t, &dyt) in dy.iter().enumerate() {
                let ht = &cache.h_out[t * d..(t + 1) * d];
                for (gw, hv) in g[lay.head_w.range()].iter_mut().zip(ht) {
                    *gw += dyt * hv;
                }
                g[lay.head_b.off] += dyt;
            }
        }
        let mut dh = vec![0.0; rows * d];
        for (t, &dyt) in dy.iter().enumerate() {
            for (o, w) in dh[t * d..(t + 1) * d].iter_mut().zip(hw) {
                *o = dyt * w;
            }
        }

        for (l, c) in lay.layers.iter().zip(&cache.layers).rev() {
            // feed-forward block
            let df = &dh;
            if let Some(g) = grad.as_deref_mut() {
                linear_grad_w(df, rows, d, &c.u, ff, &mut g[l.w2.range()]);
                col_sums(df, d, &mut g[l.b2.range()]);
            }
            let du = linear_grad_x(df, rows, d, self.p(l.w2), ff);
            let dz: Vec<f64> = du.iter().zip(&c.z).map(|(g, z)| g * gelu_grad(*z)).collect();
            if let Some(g) = grad.as_deref_mut() {
                linear_grad_w(&dz, rows, ff, &c.c, d, &mut g[l.w1.range()]);
                col_sums(&dz, ff, &mut g[l.b1.range()]);
            }
            let dc = linear_grad_x(&dz, rows, ff, self.p(l.w1), d);
            let mut dh1 = dh.clone();
            let (dg2, db2) = split_pair(grad.as_deref_mut(), l.ln2_g, l.ln2_b);
            layer_norm_backward(&dc, &c.xhat2, &c.rstd2, self.p(l.ln2_g), d, &mut dh1, dg2, db2);

            // attention block
            let datt = &dh1;
            if let Some(g) = grad.as_deref_mut() {
                linear_grad_w(datt, rows, d, &c.o, d, &mut g[l.wo.range()]);
                col_sums(datt, d, &mut g[l.bo.range()]);
            }
            let dout = linear_grad_x(datt, rows, d, self.p(l.wo), d);
            let d3 = 3 * d;
            let mut dqkv = vec![0.0; rows * d3];
            let mut dp = vec![0.0; n * n];
            for s in 0..batch {
                for hd in 0..nh {
                    let ob = s * n * d + hd * dk;
                    let base = s * n * d3 + hd * dk;
                    let (q, k, v) = (&c.qkv[base..], &c.qkv[base + d..], &c.qkv[base + 2 * d..]);
                    let pr = &c.probs[(s * nh + hd) * n * n..][..n * n];
                    kernels::gemm(n, dk, n, 1.0, &dout[ob..], d, 1, v, 1, d3, 0.0, &mut dp, n, 1);
                    kernels::gemm(n, n, dk, 1.0, pr, 1, n, &dout[ob..], d, 1, 0.0, &mut dqkv[base + 2 * d..], d3, 1);
                    for i in 0..n {
                        let row = &mut dp[i * n..(i + 1) * n];
                        let prow = &pr[i * n..(i + 1) * n];
                        let dot: f64 = row.iter().zip(prow).map(|(a, b)| a * b).sum();
                        for (r, p) in row.iter_mut().zip(prow) {
                            *r = p * (*r - dot);
                        }
                    }
                    kernels::gemm(n, n, dk, scale, &dp, n, 1, k, d3, 1, 0.0, &mut dqkv[base..], d3, 1);
                    kernels::gemm(n, n, dk, scale, &dp, 1, n, q, d3, 1, 0.0, &mut dqkv[base + d..], d3, 1);
                }
            }
            if let Some(g) = grad.as_deref_mut() {
                linear_grad_w(&dqkv, rows, d3, &c.a, d, &mut g[l.wqkv.range()]);
            }
            let da = linear_grad_x(&dqkv, rows, d3, self.p(l.wqkv), d);
            let mut dh_in = dh1;
            let (dg1, db1) = split_pair(grad.as_deref_mut(), l.ln1_g, l.ln1_b);
            layer_norm_backward(&da, &c.xhat1, &c.rstd1, self.p(l.ln1_g), d, &mut dh_in, dg1, db1);
            dh = dh_in;
        }

        if let Some(g) = grad.as_deref_mut() {
            linear_grad_w(&dh, rows, d, &cache.x, N_FEATURES, &mut g[lay.embed_w.range()]);
            col_sums(&dh, d, &mut g[lay.embed_b.range()]);
        }
        want_dx.then(|| linear_grad_x(&dh, rows, d, self.p(lay.embed_w), N_FEATURES))
    }

    /// Predicted accepted injection (kW) for every bus of one sample.
    pub fn forward(&self, features: &[[f64; N_FEATURES]]) -> Result<Vec<f64>, SurrogateError> {
        let raw = self.flatten(features)?;
        let cache = self.forward_cached(&raw, features.len())?;
        Ok(self.denormalize(&cache.y))
    }

    fn denormalize(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| v * self.norm.y_std + self.norm.y_mean).collect()
    }

    /// Predictions for many samples of equal token count.
    pub fn forward_batch(&self, samples: &[&[[f64; N_FEATURES]]]) -> Result<Vec<Vec<f64>>, SurrogateError> {
        let Some(first) = samples.first() else { return Ok(Vec::new()) };
        let n = first.len();
        if samples.iter().any(|s| s.len() != n) {
            return Err(SurrogateError::Shape("samples differ in token count".into()));
        }
        let raw: Vec<f64> = samples.iter().flat_map(|s| s.iter().flatten().copied()).collect();
        let cache = self.forward_cached(&raw, n)?;
        Ok(self.denormalize(&cache.y).chunks(n).map(|c| c.to_vec()).collect())
    }

    /// `∂ŷ_bus / ∂p_net_bus`.
    pub fn input_gradient(&self, features: &[[f64; N_FEATURES]], bus: usize) -> Result<f64, SurrogateError> {
        let (_, g) = self.predict_with_gradients(features, &[bus])?;
        Ok(g[0])
    }

    /// Predictions for all buses plus the own-injection derivative at each
    /// bus of `buses`, sharing one forward pass.
    pub fn predict_with_gradients(
        &self,
        features: &[[f64; N_FEATURES]],
        buses: &[usize],
    ) -> Result<(Vec<f64>, Vec<f64>), SurrogateError> {
        let n = features.len();
        if let Some(&b) = buses.iter().find(|&&b| b >= n) {
            return Err(SurrogateError::Shape(format!("bus position {b} out of range for {n} tokens")));
        }
        let raw = self.flatten(features)?;
        let cache = self.forward_cached(&raw, n)?;
        let chain = self.norm.y_std / self.norm.x_std[P_NET];
        let mut grads = Vec::with_capacity(buses.len());
        let mut dy = vec![0.0; n];
        for &b in buses {
            dy.fill(0.0);
            dy[b] = 1.0;
            let dx = self.backward(&cache, &dy, None, true).expect("dx requested");
            grads.push(dx[b * N_FEATURES + P_NET] * chain);
        }
        Ok((self.denormalize(&cache.y), grads))
    }

    /// Attention weights and layer-norm internals of one forward pass.
    pub fn trace(&self, features: &[[f64; N_FEATURES]]) -> Result<Vec<LayerTrace>, SurrogateError> {
        let raw = self.flatten(features)?;
        let cache = self.forward_cached(&raw, features.len())?;
        Ok(cache
            .layers
            .iter()
            .map(|c| LayerTrace {
                attention: c.probs.clone(),
                ln1_hat: c.xhat1.clone(),
                ln2_hat: c.xhat2.clone(),
                width: c.h_in.len() / features.len(),
            })
            .collect())
    }

    /// Mean squared error (normalized units) and its parameter gradient over
    /// a batch of flattened samples.
    fn loss_and_grad(&self, raw: &[f64], targets: &[f64], n: usize, grad: &mut [f64]) -> Result<f64, SurrogateError> {
        let cache = self.forward_cached(raw, n)?;
        let m = targets.len() as f64;
        let mut loss = 0.0;
        let dy: Vec<f64> = cache
            .y
            .iter()
            .zip(targets)
            .map(|(y, t)| {
                let e = y - t;
                loss += e * e;
                2.0 * e / m
            })
            .collect();
        self.backward(&cache, &dy, Some(grad), false);
        Ok(loss / m)
    }
}

fn affine(xhat: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let d = g.len();
    let mut out = xhat.to_vec();
    for row in out.chunks_mut(d) {
        for j in 0..d {
            row[j] = row[j] * g[j] + b[j];
        }
    }
    out
}

fn col_sums(m: &[f64], width: usize, out: &mut [f64]) {
    for row in m.chunks(width) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// Two disjoint gradient slices; the spans are adjacent in every layout.
fn split_pair(grad: Option<&mut [f64]>, a: Span, b: Span) -> (Option<&mut [f64]>, Option<&mut [f64]>) {
    match grad {
        None => (None, None),
        Some(g) => {
            debug_assert_eq!(a.off + a.len, b.off);
            let (ga, gb) = g[a.off..b.off + b.len].split_at_mut(a.len);
            (Some(ga), Some(gb))
        }
    }
}
