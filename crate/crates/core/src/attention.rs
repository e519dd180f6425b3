//! Attention kernels and their reverse-mode gradients.
//!
//! * [`base_attention`]: queries from `z`, keys and values from the spatial
//!   concatenation `z ∥ z_a`.
//! * [`appa_attention`]: the same kernel with low-rank deltas `B·A` added to
//!   each of the Q, K and V projections.
//! * [`temporal_attention`]: attention across frames at each spatial location,
//!   with logits divided by a per-location temperature.
//!
//! Tokens are rows; a projection is `tokens · W`. Heads split the channel axis
//! into contiguous blocks of `c / heads` columns.

use ndarray::{concatenate, s, Array2, Array5, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::ptm::TemperatureMap;
use crate::rng::SplitMix64;

pub type Matrix = Array2<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub heads: usize,
}

impl AttentionWeights {
    pub fn new(wq: Matrix, wk: Matrix, wv: Matrix, heads: usize) -> Result<Self> {
        let w = Self { wq, wk, wv, heads };
        w.validate()?;
        Ok(w)
    }

    pub fn identity(c: usize, heads: usize) -> Self {
        Self {
            wq: Matrix::eye(c),
            wk: Matrix::eye(c),
            wv: Matrix::eye(c),
            heads,
        }
    }

    /// Gaussian entries with standard deviation `std`.
    pub fn random(c: usize, heads: usize, std: f64, rng: &mut SplitMix64) -> Self {
        Self {
            wq: random_matrix(c, c, std, rng),
            wk: random_matrix(c, c, std, rng),
            wv: random_matrix(c, c, std, rng),
            heads,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let c = self.channels();
        Self {
            wq: Matrix::zeros((c, c)),
            wk: Matrix::zeros((c, c)),
            wv: Matrix::zeros((c, c)),
            heads: self.heads,
        }
    }

    pub fn channels(&self) -> usize {
        self.wq.nrows()
    }

    pub fn head_dim(&self) -> usize {
        self.channels() / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.wq.nrows();
        for (name, m) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv)] {
            if m.dim() != (c, c) {
                return Err(Error::shape(format!(
                    "{name} is {:?}, expected {c}x{c}",
                    m.dim()
                )));
            }
        }
        if self.heads == 0 || c % self.heads != 0 {
            return Err(Error::shape(format!(
                "{c} channels not divisible into {} heads",
                self.heads
            )));
        }
        Ok(())
    }
}

/// Low-rank deltas `ΔW = B·A` for the Q, K and V projections.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraDelta {
    pub b_q: Matrix,
    pub b_k: Matrix,
    pub b_v: Matrix,
    pub a_q: Matrix,
    pub a_k: Matrix,
    pub a_v: Matrix,
}

impl LoraDelta {
    /// `A ~ U(-1/sqrt(r), 1/sqrt(r))`, `B = 0`.
    pub fn init(c: usize, rank: usize, rng: &mut SplitMix64) -> Self {
        let bound = 1.0 / (rank as f64).sqrt();
        let mut a = || Matrix::from_shape_fn((rank, c), |_| rng.uniform_range(-bound, bound));
        let (a_q, a_k, a_v) = (a(), a(), a());
        Self {
            b_q: Matrix::zeros((c, rank)),
            b_k: Matrix::zeros((c, rank)),
            b_v: Matrix::zeros((c, rank)),
            a_q,
            a_k,
            a_v,
        }
    }

    pub fn zeros(c: usize, rank: usize) -> Self {
        Self {
            b_q: Matrix::zeros((c, rank)),
            b_k: Matrix::zeros((c, rank)),
            b_v: Matrix::zeros((c, rank)),
            a_q: Matrix::zeros((rank, c)),
            a_k: Matrix::zeros((rank, c)),
            a_v: Matrix::zeros((rank, c)),
        }
    }

    pub fn rank(&self) -> usize {
        self.a_q.nrows()
    }

    pub fn validate(&self, c: usize) -> Result<()> {
        let r = self.rank();
        if r == 0 || r > c {
            return Err(Error::shape(format!("LoRA rank {r} outside [1, {c}]")));
        }
        for (name, m) in [("b_q", &self.b_q), ("b_k", &self.b_k), ("b_v", &self.b_v)] {
            if m.dim() != (c, r) {
                return Err(Error::shape(format!(
                    "{name} is {:?}, expected {c}x{r}",
                    m.dim()
                )));
            }
        }
        for (name, m) in [("a_q", &self.a_q), ("a_k", &self.a_k), ("a_v", &self.a_v)] {
            if m.dim() != (r, c) {
                return Err(Error::shape(format!(
                    "{name} is {:?}, expected {r}x{c}",
                    m.dim()
                )));
            }
        }
        Ok(())
    }

    /// `W0 + B·A` for each projection.
    pub fn materialize(&self, w: &AttentionWeights) -> AttentionWeights {
        AttentionWeights {
            wq: &w.wq + &self.b_q.dot(&self.a_q),
            wk: &w.wk + &self.b_k.dot(&self.a_k),
            wv: &w.wv + &self.b_v.dot(&self.a_v),
            heads: w.heads,
        }
    }
}

pub(crate) fn random_matrix(rows: usize, cols: usize, std: f64, rng: &mut SplitMix64) -> Matrix {
    Matrix::from_shape_fn((rows, cols), |_| std * rng.normal())
}

/// Dense `b × c × f × h × w` latent tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    pub data: Array5<f64>,
}

impl LatentVideo {
    pub fn zeros(b: usize, c: usize, f: usize, h: usize, w: usize) -> Self {
        Self {
            data: Array5::zeros((b, c, f, h, w)),
        }
    }

    pub fn from_fn(dims: (usize, usize, usize, usize, usize), mut g: impl FnMut() -> f64) -> Self {
        Self {
            data: Array5::from_shape_simple_fn(dims, &mut g),
        }
    }

    /// `(b, c, f, h, w)`.
    pub fn dims(&self) -> (usize, usize, usize, usize, usize) {
        self.data.dim()
    }

    pub fn frames(&self) -> usize {
        self.data.dim().2
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mean squared value.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>() / self.data.len() as f64
    }

    /// Tokens as rows ordered by (batch, frame, row, column), channels as
    /// columns.
    pub fn to_tokens(&self) -> Matrix {
        let (b, c, f, h, w) = self.dims();
        let mut out = Matrix::zeros((b * f * h * w, c));
        for ((bi, ci, fi, y, x), v) in self.data.indexed_iter() {
            out[[((bi * f + fi) * h + y) * w + x, ci]] = *v;
        }
        out
    }

    pub fn from_tokens(tokens: &Matrix, b: usize, f: usize, h: usize, w: usize) -> Result<Self> {
        if tokens.nrows() != b * f * h * w {
            return Err(Error::shape(format!(
                "{} token rows cannot fill b={b} f={f} h={h} w={w}",
                tokens.nrows()
            )));
        }
        let c = tokens.ncols();
        let data = Array5::from_shape_fn((b, c, f, h, w), |(bi, ci, fi, y, x)| {
            tokens[[((bi * f + fi) * h + y) * w + x, ci]]
        });
        Ok(Self { data })
    }

    /// Frames `[start, end)` of every batch element.
    pub fn slice_frames(&self, start: usize, end: usize) -> Self {
        Self {
            data: self.data.slice(s![.., .., start..end, .., ..]).to_owned(),
        }
    }
}

/// Numerically stable softmax of one row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Shannon entropy (nats) of `softmax(logits / temperature)`.
pub fn softmax_entropy(logits: &[f64], temperature: f64) -> f64 {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    softmax(&scaled)
        .into_iter()
        .filter(|p| *p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

fn softmax_rows_inplace(m: &mut Matrix) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|l| (l - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|e| e / sum);
    }
}

/// Multi-head `softmax(Q Kᵀ · scale) V`. Returns the output and the per-head
/// probability matrices.
fn mha_forward(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    heads: usize,
    scale: f64,
) -> (Matrix, Vec<Matrix>) {
    let c = q.ncols();
    let d = c / heads;
    let mut out = Matrix::zeros((q.nrows(), c));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * d..(h + 1) * d];
        let mut p = q.slice(cols).dot(&k.slice(cols).t());
        p *= scale;
        softmax_rows_inplace(&mut p);
        out.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        probs.push(p);
    }
    (out, probs)
}

fn mha_backward(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    probs: &[Matrix],
    scale: f64,
    dout: ArrayView2<f64>,
) -> (Matrix, Matrix, Matrix) {
    let heads = probs.len();
    let c = q.ncols();
    let d = c / heads;
    let mut dq = Matrix::zeros(q.raw_dim());
    let mut dk = Matrix::zeros(k.raw_dim());
    let mut dv = Matrix::zeros(v.raw_dim());
    for (h, p) in probs.iter().enumerate() {
        let cols = s![.., h * d..(h + 1) * d];
        let d_o = dout.slice(cols);
        dv.slice_mut(cols).assign(&p.t().dot(&d_o));
        let dp = d_o.dot(&v.slice(cols).t());
        // dS = P ⊙ (dP − rowsum(dP ⊙ P))
        let mut ds = &dp * p;
        let row_dot = ds.sum_axis(Axis(1));
        ds = p * &(&dp - &row_dot.insert_axis(Axis(1)));
        ds *= scale;
        dq.slice_mut(cols).assign(&ds.dot(&k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&q.slice(cols)));
    }
    (dq, dk, dv)
}

/// `x · W0 + (x · B) · A`, keeping `x · B` for the backward pass.
fn project(x: &Matrix, w0: &Matrix, lora: Option<(&Matrix, &Matrix)>) -> (Matrix, Option<Matrix>) {
    let mut y = x.dot(w0);
    match lora {
        Some((b, a)) => {
            let xb = x.dot(b);
            y += &xb.dot(a);
            (y, Some(xb))
        }
        None => (y, None),
    }
}

/// Gradients of a projection: input, base matrix, and optional `(dB, dA)`.
fn project_backward(
    x: &Matrix,
    xb: Option<&Matrix>,
    w0: &Matrix,
    lora: Option<(&Matrix, &Matrix)>,
    dy: &Matrix,
) -> (Matrix, Matrix, Option<(Matrix, Matrix)>) {
    let mut dx = dy.dot(&w0.t());
    let dw0 = x.t().dot(dy);
    let dlora = match (lora, xb) {
        (Some((b, a)), Some(xb)) => {
            let dya = dy.dot(&a.t());
            dx += &dya.dot(&b.t());
            Some((x.t().dot(&dya), xb.t().dot(dy)))
        }
        _ => None,
    };
    (dx, dw0, dlora)
}

/// Intermediate values of a spatial attention call.
#[derive(Debug, Clone)]
pub struct SpatialCache {
    z: Matrix,
    kv_in: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    zb: [Option<Matrix>; 3],
    probs: Vec<Matrix>,
    scale: f64,
}

impl SpatialCache {
    /// Per-head attention probabilities (queries × keys).
    pub fn probs(&self) -> &[Matrix] {
        &self.probs
    }
}

#[derive(Debug, Clone)]
pub struct SpatialGrads {
    pub dz: Matrix,
    pub dz_a: Matrix,
    pub dw: AttentionWeights,
    pub dlora: Option<LoraDelta>,
}

fn check_tokens(z: &Matrix, z_a: &Matrix, w: &AttentionWeights) -> Result<()> {
    w.validate()?;
    let c = w.channels();
    if z.nrows() == 0 {
        return Err(Error::shape("query block has no tokens"));
    }
    if z.ncols() != c || z_a.ncols() != c {
        return Err(Error::shape(format!(
            "token channels {} / {} do not match projection size {c}",
            z.ncols(),
            z_a.ncols()
        )));
    }
    Ok(())
}

fn lora_pair(delta: Option<&LoraDelta>, which: usize) -> Option<(&Matrix, &Matrix)> {
    delta.map(|d| match which {
        0 => (&d.b_q, &d.a_q),
        1 => (&d.b_k, &d.a_k),
        _ => (&d.b_v, &d.a_v),
    })
}

/// Spatial attention forward pass with an optional LoRA delta.
pub fn spatial_forward(
    z: &Matrix,
    z_a: &Matrix,
    w: &AttentionWeights,
    delta: Option<&LoraDelta>,
) -> Result<(Matrix, SpatialCache)> {
    check_tokens(z, z_a, w)?;
    if let Some(d) = delta {
        d.validate(w.channels())?;
    }
    let kv_in = concatenate(Axis(0), &[z.view(), z_a.view()]).expect("channel counts match");
    let (q, zb_q) = project(z, &w.wq, lora_pair(delta, 0));
    let (k, zb_k) = project(&kv_in, &w.wk, lora_pair(delta, 1));
    let (v, zb_v) = project(&kv_in, &w.wv, lora_pair(delta, 2));
    let scale = 1.0 / (w.head_dim() as f64).sqrt();
    let (out, probs) = mha_forward(q.view(), k.view(), v.view(), w.heads, scale);
    Ok((
        out,
        SpatialCache {
            z: z.clone(),
            kv_in,
            q,
            k,
            v,
            zb: [zb_q, zb_k, zb_v],
            probs,
            scale,
        },
    ))
}

pub fn spatial_backward(
    cache: &SpatialCache,
    w: &AttentionWeights,
    delta: Option<&LoraDelta>,
    dout: &Matrix,
) -> SpatialGrads {
    let (dq, dk, dv) = mha_backward(
        cache.q.view(),
        cache.k.view(),
        cache.v.view(),
        &cache.probs,
        cache.scale,
        dout.view(),
    );
    let (dz_q, dwq, dl_q) = project_backward(
        &cache.z,
        cache.zb[0].as_ref(),
        &w.wq,
        lora_pair(delta, 0),
        &dq,
    );
    let (dkv_k, dwk, dl_k) = project_backward(
        &cache.kv_in,
        cache.zb[1].as_ref(),
        &w.wk,
        lora_pair(delta, 1),
        &dk,
    );
    let (dkv_v, dwv, dl_v) = project_backward(
        &cache.kv_in,
        cache.zb[2].as_ref(),
        &w.wv,
        lora_pair(delta, 2),
        &dv,
    );

    let n = cache.z.nrows();
    let dkv = dkv_k + dkv_v;
    let dz = dz_q + dkv.slice(s![..n, ..]);
    let dz_a = dkv.slice(s![n.., ..]).to_owned();
    let dlora = match (dl_q, dl_k, dl_v) {
        (Some((b_q, a_q)), Some((b_k, a_k)), Some((b_v, a_v))) => Some(LoraDelta {
            b_q,
            b_k,
            b_v,
            a_q,
            a_k,
            a_v,
        }),
        _ => None,
    };
    SpatialGrads {
        dz,
        dz_a,
        dw: AttentionWeights {
            wq: dwq,
            wk: dwk,
            wv: dwv,
            heads: w.heads,
        },
        dlora,
    }
}

/// `softmax(Q Kᵀ / sqrt(d)) V` with `Q = z Wq`, `K = (z ∥ z_a) Wk`,
/// `V = (z ∥ z_a) Wv`. `z_a` may have zero rows.
pub fn base_attention(z: &Matrix, z_a: &Matrix, weights: &AttentionWeights) -> Result<Matrix> {
    spatial_forward(z, z_a, weights, None).map(|r| r.0)
}

/// [`base_attention`] with projections `W0 + B·A`.
pub fn appa_attention(
    z: &Matrix,
    z_a: &Matrix,
    weights: &AttentionWeights,
    delta: &LoraDelta,
) -> Result<Matrix> {
    spatial_forward(z, z_a, weights, Some(delta)).map(|r| r.0)
}

/// Batch, frame and spatial extents of a token matrix whose rows are ordered
/// (batch, frame, location).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameLayout {
    pub batch: usize,
    pub frames: usize,
    pub locations: usize,
}

impl FrameLayout {
    pub fn rows(&self) -> usize {
        self.batch * self.frames * self.locations
    }

    pub fn row(&self, b: usize, f: usize, p: usize) -> usize {
        (b * self.frames + f) * self.locations + p
    }

    /// Row indices of the frame sequence at location `p` of batch `b`.
    pub fn sequence(&self, b: usize, p: usize) -> Vec<usize> {
        (0..self.frames).map(|f| self.row(b, f, p)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TemporalCache {
    layout: FrameLayout,
    x: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    scales: Vec<f64>,
    // Indexed by batch * locations + location, then head.
    probs: Vec<Vec<Matrix>>,
}

impl TemporalCache {
    pub fn layout(&self) -> FrameLayout {
        self.layout
    }

    /// Frame-by-frame probabilities of head `head` at location `p` of batch
    /// `b`.
    pub fn probs(&self, b: usize, p: usize, head: usize) -> &Matrix {
        &self.probs[b * self.layout.locations + p][head]
    }
}

#[derive(Debug, Clone)]
pub struct TemporalGrads {
    pub dx: Matrix,
    pub dw: AttentionWeights,
}

/// Temporal attention over token rows. `temps`, when given, holds one
/// temperature per location and divides that location's logits.
pub fn temporal_forward(
    x: &Matrix,
    layout: FrameLayout,
    w: &AttentionWeights,
    temps: Option<&[f64]>,
) -> Result<(Matrix, TemporalCache)> {
    w.validate()?;
    if x.nrows() != layout.rows() || x.ncols() != w.channels() {
        return Err(Error::shape(format!(
            "tokens {:?} do not match layout {layout:?} with {} channels",
            x.dim(),
            w.channels()
        )));
    }
    if let Some(t) = temps {
        if t.len() != layout.locations {
            return Err(Error::shape(format!(
                "temperature map has {} cells, expected {}",
                t.len(),
                layout.locations
            )));
        }
    }
    let base = 1.0 / (w.head_dim() as f64).sqrt();
    let scales: Vec<f64> = match temps {
        Some(t) => t.iter().map(|t| base / t).collect(),
        None => vec![base; layout.locations],
    };
    let q = x.dot(&w.wq);
    let k = x.dot(&w.wk);
    let v = x.dot(&w.wv);
    let mut out = Matrix::zeros(x.raw_dim());
    let mut probs = Vec::with_capacity(layout.batch * layout.locations);
    for b in 0..layout.batch {
        for (p, &scale) in scales.iter().enumerate() {
            let idx = layout.sequence(b, p);
            let (qs, ks, vs) = (
                q.select(Axis(0), &idx),
                k.select(Axis(0), &idx),
                v.select(Axis(0), &idx),
            );
            let (o, pr) = mha_forward(qs.view(), ks.view(), vs.view(), w.heads, scale);
            for (i, &r) in idx.iter().enumerate() {
                out.row_mut(r).assign(&o.row(i));
            }
            probs.push(pr);
        }
    }
    Ok((
        out,
        TemporalCache {
            layout,
            x: x.clone(),
            q,
            k,
            v,
            scales,
            probs,
        },
    ))
}

pub fn temporal_backward(
    cache: &TemporalCache,
    w: &AttentionWeights,
    dout: &Matrix,
) -> TemporalGrads {
    let layout = cache.layout;
    let mut dq = Matrix::zeros(cache.q.raw_dim());
    let mut dk = Matrix::zeros(cache.k.raw_dim());
    let mut dv = Matrix::zeros(cache.v.raw_dim());
    for b in 0..layout.batch {
        for p in 0..layout.locations {
            let idx = layout.sequence(b, p);
            let (gq, gk, gv) = mha_backward(
                cache.q.select(Axis(0), &idx).view(),
                cache.k.select(Axis(0), &idx).view(),
                cache.v.select(Axis(0), &idx).view(),
                &cache.probs[b * layout.locations + p],
                cache.scales[p],
                dout.select(Axis(0), &idx).view(),
            );
            for (i, &r) in idx.iter().enumerate() {
                dq.row_mut(r).assign(&gq.row(i));
                dk.row_mut(r).assign(&gk.row(i));
                dv.row_mut(r).assign(&gv.row(i));
            }
        }
    }
    let dx = dq.dot(&w.wq.t()) + dk.dot(&w.wk.t()) + dv.dot(&w.wv.t());
    let xt = cache.x.t();
    TemporalGrads {
        dx,
        dw: AttentionWeights {
            wq: xt.dot(&dq),
            wk: xt.dot(&dk),
            wv: xt.dot(&dv),
            heads: w.heads,
        },
    }
}

/// Attention across frames at every spatial location of a latent video.
/// `tmap` must already be at the latent's `h × w` resolution.
pub fn temporal_attention(
    z: &LatentVideo,
    weights: &AttentionWeights,
    tmap: Option<&TemperatureMap>,
) -> Result<LatentVideo> {
    let (b, c, f, h, w) = z.dims();
    if c != weights.channels() {
        return Err(Error::shape(format!(
            "latent has {c} channels, weights expect {}",
            weights.channels()
        )));
    }
    if let Some(t) = tmap {
        if (t.height, t.width) != (h, w) {
            return Err(Error::shape(format!(
                "temperature map is {}x{}, latent grid is {h}x{w}",
                t.height, t.width
            )));
        }
    }
    let layout = FrameLayout {
        batch: b,
        frames: f,
        locations: h * w,
    };
    let (out, _) = temporal_forward(
        &z.to_tokens(),
        layout,
        weights,
        tmap.map(|t| t.values.as_slice()),
    )?;
    LatentVideo::from_tokens(&out, b, f, h, w)
}

pub mod gradcheck {
    //! Central finite-difference checks against the analytic backward passes.

    use super::*;

    /// A scalar function of a flat parameter vector with an analytic gradient.
    pub trait Differentiable {
        fn params(&self) -> Vec<f64>;
        fn set_params(&mut self, params: &[f64]);
        fn loss(&self) -> f64;
        fn gradient(&self) -> Vec<f64>;
    }

    /// Max over coordinates of `|analytic − numeric| / max(1, |numeric|)`.
    pub fn grad_check<D: Differentiable + ?Sized>(target: &mut D, h: f64) -> Result<f64> {
        if !(1e-6..=1e-4).contains(&h) {
            return Err(Error::invalid(format!("step {h} outside [1e-6, 1e-4]")));
        }
        let analytic = target.gradient();
        if analytic.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("analytic gradient".into()));
        }
        let base = target.params();
        if base.len() != analytic.len() {
            return Err(Error::shape("gradient length differs from parameter count"));
        }
        let mut worst = 0.0f64;
        let mut probe = base.clone();
        for i in 0..base.len() {
            probe[i] = base[i] + h;
            target.set_params(&probe);
            let up = target.loss();
            probe[i] = base[i] - h;
            target.set_params(&probe);
            let down = target.loss();
            probe[i] = base[i];
            let numeric = (up - down) / (2.0 * h);
            if !numeric.is_finite() {
                return Err(Error::NonFinite(format!(
                    "finite difference at coordinate {i}"
                )));
            }
            worst = worst.max((analytic[i] - numeric).abs() / numeric.abs().max(1.0));
        }
        target.set_params(&base);
        Ok(worst)
    }

    pub fn flatten<'a>(parts: impl IntoIterator<Item = &'a Matrix>) -> Vec<f64> {
        parts.into_iter().flat_map(|m| m.iter().copied()).collect()
    }

    pub fn unflatten<'a>(parts: impl IntoIterator<Item = &'a mut Matrix>, mut flat: &[f64]) {
        for m in parts {
            let n = m.len();
            for (dst, src) in m.iter_mut().zip(&flat[..n]) {
                *dst = *src;
            }
            flat = &flat[n..];
        }
        debug_assert!(flat.is_empty());
    }

    fn contract(out: &Matrix, proj: &Matrix) -> f64 {
        (out * proj).sum()
    }

    /// `sum(proj ⊙ attention(z, z_a))` as a function of the inputs, the base
    /// projections and (optionally) the LoRA factors.
    #[derive(Debug, Clone)]
    pub struct SpatialProbe {
        pub z: Matrix,
        pub z_a: Matrix,
        pub weights: AttentionWeights,
        pub delta: Option<LoraDelta>,
        pub proj: Matrix,
    }

    impl SpatialProbe {
        pub fn random(
            n: usize,
            n_a: usize,
            c: usize,
            heads: usize,
            rank: Option<usize>,
            rng: &mut SplitMix64,
        ) -> Self {
            let weights = AttentionWeights::random(c, heads, 0.7, rng);
            let delta = rank.map(|r| {
                let mut d = LoraDelta::init(c, r, rng);
                d.b_q = random_matrix(c, r, 0.5, rng);
                d.b_k = random_matrix(c, r, 0.5, rng);
                d.b_v = random_matrix(c, r, 0.5, rng);
                d
            });
            Self {
                z: random_matrix(n, c, 1.0, rng),
                z_a: random_matrix(n_a, c, 1.0, rng),
                weights,
                delta,
                proj: random_matrix(n, c, 1.0, rng),
            }
        }

        fn parts(&self) -> Vec<&Matrix> {
            let mut v = vec![
                &self.z,
                &self.z_a,
                &self.weights.wq,
                &self.weights.wk,
                &self.weights.wv,
            ];
            if let Some(d) = &self.delta {
                v.extend([&d.b_q, &d.b_k, &d.b_v, &d.a_q, &d.a_k, &d.a_v]);
            }
            v
        }
    }

    impl Differentiable for SpatialProbe {
        fn params(&self) -> Vec<f64> {
            flatten(self.parts())
        }

        fn set_params(&mut self, params: &[f64]) {
            let mut v = vec![
                &mut self.z,
                &mut self.z_a,
                &mut self.weights.wq,
                &mut self.weights.wk,
                &mut self.weights.wv,
            ];
            if let Some(d) = &mut self.delta {
                v.extend([
                    &mut d.b_q, &mut d.b_k, &mut d.b_v, &mut d.a_q, &mut d.a_k, &mut d.a_v,
                ]);
            }
            unflatten(v, params);
        }

        fn loss(&self) -> f64 {
            let (out, _) = spatial_forward(&self.z, &self.z_a, &self.weights, self.delta.as_ref())
                .expect("probe shapes are consistent");
            contract(&out, &self.proj)
        }

        fn gradient(&self) -> Vec<f64> {
            let (_, cache) =
                spatial_forward(&self.z, &self.z_a, &self.weights, self.delta.as_ref())
                    .expect("probe shapes are consistent");
            let g = spatial_backward(&cache, &self.weights, self.delta.as_ref(), &self.proj);
            let mut parts = vec![g.dz, g.dz_a, g.dw.wq, g.dw.wk, g.dw.wv];
            if let Some(d) = g.dlora {
                parts.extend([d.b_q, d.b_k, d.b_v, d.a_q, d.a_k, d.a_v]);
            }
            flatten(parts.iter())
        }
    }

    /// `sum(proj ⊙ temporal_attention(x))` over inputs and projections, with
    /// a fixed temperature per location.
    #[derive(Debug, Clone)]
    pub struct TemporalProbe {
        pub x: Matrix,
        pub layout: FrameLayout,
        pub weights: AttentionWeights,
        pub temps: Option<Vec<f64>>,
        pub proj: Matrix,
    }

    impl TemporalProbe {
        pub fn random(
            layout: FrameLayout,
            c: usize,
            heads: usize,
            tempered: bool,
            rng: &mut SplitMix64,
        ) -> Self {
            let temps = tempered.then(|| {
                (0..layout.locations)
                    .map(|_| 1.0 + 3.0 * rng.uniform_range(0.0, 2.0))
                    .collect()
            });
            Self {
                x: random_matrix(layout.rows(), c, 1.0, rng),
                layout,
                weights: AttentionWeights::random(c, heads, 0.8, rng),
                temps,
                proj: random_matrix(layout.rows(), c, 1.0, rng),
            }
        }
    }

    impl Differentiable for TemporalProbe {
        fn params(&self) -> Vec<f64> {
            flatten([
                &self.x,
                &self.weights.wq,
                &self.weights.wk,
                &self.weights.wv,
            ])
        }

        fn set_params(&mut self, params: &[f64]) {
            unflatten(
                [
                    &mut self.x,
                    &mut self.weights.wq,
                    &mut self.weights.wk,
                    &mut self.weights.wv,
                ],
                params,
            );
        }

        fn loss(&self) -> f64 {
            let (out, _) =
                temporal_forward(&self.x, self.layout, &self.weights, self.temps.as_deref())
                    .expect("probe shapes are consistent");
            contract(&out, &self.proj)
        }

        fn gradient(&self) -> Vec<f64> {
            let (_, cache) =
                temporal_forward(&self.x, self.layout, &self.weights, self.temps.as_deref())
                    .expect("probe shapes are consistent");
            let g = temporal_backward(&cache, &self.weights, &self.proj);
            flatten([&g.dx, &g.dw.wq, &g.dw.wk, &g.dw.wv])
        }
    }
}
