//! Selective state-space forward pass and the surrounding block.
//!
//! A block maps a token sequence `U` (L×D_in) through a frozen embedding to
//! `X` (L×D), derives the input-conditioned `B`, `C`, `δ`, discretizes with a
//! zero-order hold, runs the per-token recurrence and finishes with the
//! trainable output projection `W_out`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matmul, Matrix};

/// Below this `|z|` the ZOH factor `(e^z - 1)/z` switches to its Taylor series.
pub const PHI_SERIES_THRESHOLD: f64 = 1e-8;
const PHI_PRIME_SERIES_THRESHOLD: f64 = 0.1;

/// Target value of `softplus(delta_bias)` at initialization.
pub const INIT_DELTA: f64 = 0.055;

/// Init gain of `W_out`. The scan output scales roughly with the cube of its
/// input, so without it activations shrink block by block.
pub const W_OUT_GAIN: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub d_raw: usize,
    pub d_model: usize,
    pub d_state: usize,
    pub d_delta: usize,
    pub d_out: usize,
    pub n_blocks: usize,
    #[serde(default)]
    pub gated: bool,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            d_raw: 32,
            d_model: 32,
            d_state: 8,
            d_delta: 32,
            d_out: 32,
            n_blocks: 2,
            gated: false,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_raw", self.d_raw),
            ("d_model", self.d_model),
            ("d_state", self.d_state),
            ("d_out", self.d_out),
            ("n_blocks", self.n_blocks),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if self.d_delta != 1 && self.d_delta != self.d_model {
            return Err(Error::config(format!(
                "d_delta must be 1 or d_model ({}), got {}",
                self.d_model, self.d_delta
            )));
        }
        Ok(())
    }

    /// Input width of block `k`.
    pub fn block_input(&self, k: usize) -> usize {
        if k == 0 {
            self.d_raw
        } else {
            self.d_out
        }
    }
}

/// The four trainable SSM tensors plus the δ bias.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    /// Continuous state matrix, D×N.
    pub a: Matrix,
    pub w_b: Matrix,
    pub w_c: Matrix,
    /// D×d_δ
    pub w_delta: Matrix,
    pub delta_bias: Vec<f64>,
}

impl SsmParams {
    pub fn d_model(&self) -> usize {
        self.a.rows()
    }

    pub fn d_state(&self) -> usize {
        self.a.cols()
    }

    pub fn d_delta(&self) -> usize {
        self.w_delta.cols()
    }

    fn validate(&self) -> Result<()> {
        let (d, n) = self.a.shape();
        if self.w_b.shape() != (d, n) || self.w_c.shape() != (d, n) {
            return Err(Error::shape(format!(
                "W_B {:?} / W_C {:?} must match A {:?}",
                self.w_b.shape(),
                self.w_c.shape(),
                (d, n)
            )));
        }
        let dd = self.w_delta.cols();
        if self.w_delta.rows() != d || (dd != 1 && dd != d) {
            return Err(Error::shape(format!(
                "W_delta is {:?}, expected {d}x1 or {d}x{d}",
                self.w_delta.shape()
            )));
        }
        if self.delta_bias.len() != dd {
            return Err(Error::shape(format!(
                "delta_bias has {} entries, expected {dd}",
                self.delta_bias.len()
            )));
        }
        Ok(())
    }
}

/// One block: frozen embedding, trainable SSM and output projection, and an
/// optional frozen SiLU gate.
#[derive(Debug, Clone, PartialEq)]
pub struct MambaBlockParams {
    pub embed: Matrix,
    pub ssm: SsmParams,
    pub w_out: Matrix,
    pub gate: Option<Matrix>,
}

impl MambaBlockParams {
    pub fn init(d_in: usize, dims: &ModelDims, rng: &mut ChaCha8Rng) -> Self {
        let d = dims.d_model;
        let n = dims.d_state;
        let proj_scale = 1.0 / (d as f64).sqrt();
        let uniform = |rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64| {
            Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
        };

        let embed = uniform(rng, d_in, d, (3.0 / d_in as f64).sqrt());
        let a = Matrix::from_fn(d, n, |_, j| -((j + 1) as f64));
        let w_b = uniform(rng, d, n, proj_scale);
        let w_c = uniform(rng, d, n, proj_scale);
        let w_delta = uniform(rng, d, dims.d_delta, proj_scale);
        let delta_bias = vec![inverse_softplus(INIT_DELTA); dims.d_delta];
        let w_out = uniform(rng, d, dims.d_out, W_OUT_GAIN * (3.0 / d as f64).sqrt());
        let gate = dims
            .gated
            .then(|| uniform(rng, d, d, (3.0 / d as f64).sqrt()));

        Self {
            embed,
            ssm: SsmParams {
                a,
                w_b,
                w_c,
                w_delta,
                delta_bias,
            },
            w_out,
            gate,
        }
    }

    pub fn d_in(&self) -> usize {
        self.embed.rows()
    }

    pub fn d_out(&self) -> usize {
        self.w_out.cols()
    }

    pub fn validate(&self) -> Result<()> {
        self.ssm.validate()?;
        let d = self.ssm.d_model();
        if self.embed.cols() != d {
            return Err(Error::shape(format!(
                "embed is {:?}, expected {} columns",
                self.embed.shape(),
                d
            )));
        }
        if self.w_out.rows() != d {
            return Err(Error::shape(format!(
                "W_out is {:?}, expected {} rows",
                self.w_out.shape(),
                d
            )));
        }
        if let Some(g) = &self.gate {
            if g.shape() != (d, d) {
                return Err(Error::shape(format!("gate is {:?}, expected {d}x{d}", g.shape())));
            }
        }
        Ok(())
    }
}

/// Sequential stack of blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub blocks: Vec<MambaBlockParams>,
}

impl Backbone {
    pub fn init(dims: &ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = (0..dims.n_blocks)
            .map(|k| MambaBlockParams::init(dims.block_input(k), dims, &mut rng))
            .collect();
        Ok(Self { blocks })
    }

    pub fn d_in(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.d_in())
    }

    pub fn d_out(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.d_out())
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::config("backbone has no blocks"));
        }
        for (k, b) in self.blocks.iter().enumerate() {
            b.validate()?;
            if k > 0 && b.d_in() != self.blocks[k - 1].d_out() {
                return Err(Error::shape(format!(
                    "block {k} takes {} inputs but block {} emits {}",
                    b.d_in(),
                    k - 1,
                    self.blocks[k - 1].d_out()
                )));
            }
        }
        Ok(())
    }

    /// Runs every sample through all blocks. When `capture` is set, the
    /// returned vector holds one [`FeatureCapture`] per block.
    pub fn forward(
        &self,
        inputs: &[Matrix],
        capture: bool,
    ) -> Result<(Vec<Matrix>, Option<Vec<FeatureCapture>>)> {
        let mut current: Vec<Matrix> = inputs.to_vec();
        let mut captures = capture.then(Vec::new);
        for block in &self.blocks {
            let (out, feats) = forward_block(&current, block, capture)?;
            if let (Some(c), Some(f)) = (captures.as_mut(), feats) {
                c.push(f);
            }
            current = out;
        }
        Ok((current, captures))
    }
}

/// M samples of L tokens with D_raw features each.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub x: Vec<Matrix>,
    pub labels: Vec<usize>,
}

impl SequenceBatch {
    pub fn new(x: Vec<Matrix>, labels: Vec<usize>) -> Result<Self> {
        if x.len() != labels.len() {
            return Err(Error::shape(format!(
                "{} samples but {} labels",
                x.len(),
                labels.len()
            )));
        }
        if let Some(first) = x.first() {
            if let Some(bad) = x.iter().find(|m| m.shape() != first.shape()) {
                return Err(Error::shape(format!(
                    "ragged batch: {:?} vs {:?}",
                    first.shape(),
                    bad.shape()
                )));
            }
        }
        Ok(Self { x, labels })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.x.first().map_or(0, Matrix::rows)
    }

    pub fn d_raw(&self) -> usize {
        self.x.first().map_or(0, Matrix::cols)
    }

    pub fn select(&self, idx: &[usize]) -> SequenceBatch {
        SequenceBatch {
            x: idx.iter().map(|&i| self.x[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Features stacked over samples and tokens, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCapture {
    /// Embedded tokens `X`.
    pub x_feats: Matrix,
    pub delta_feats: Matrix,
    /// `δ ⊙ X`
    pub deltax_feats: Matrix,
    /// Inputs of `W_out`.
    pub y_feats: Matrix,
}

impl FeatureCapture {
    pub fn rows(&self) -> usize {
        self.x_feats.rows()
    }
}

/// Rank-3 tensor indexed `[l, d, n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    dims: (usize, usize, usize),
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(l: usize, d: usize, n: usize) -> Self {
        Self {
            dims: (l, d, n),
            data: vec![0.0; l * d * n],
        }
    }

    pub fn filled(l: usize, d: usize, n: usize, v: f64) -> Self {
        Self {
            dims: (l, d, n),
            data: vec![v; l * d * n],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    #[inline]
    fn offset(&self, l: usize, d: usize, n: usize) -> usize {
        (l * self.dims.1 + d) * self.dims.2 + n
    }

    #[inline]
    pub fn get(&self, l: usize, d: usize, n: usize) -> f64 {
        self.data[self.offset(l, d, n)]
    }

    #[inline]
    pub fn set(&mut self, l: usize, d: usize, n: usize, v: f64) {
        let o = self.offset(l, d, n);
        self.data[o] = v;
    }

    /// The `[d, n]` slab at token `l`.
    #[inline]
    pub fn token(&self, l: usize) -> &[f64] {
        let w = self.dims.1 * self.dims.2;
        &self.data[l * w..(l + 1) * w]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// `ln(1 + e^x)`, floored at the smallest positive subnormal so the result
/// stays strictly positive for every finite input.
#[inline]
pub fn softplus(x: f64) -> f64 {
    (x.max(0.0) + (-x.abs()).exp().ln_1p()).max(f64::from_bits(1))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub(crate) fn silu_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// ZOH input factor `φ(z) = (e^z − 1)/z`, with `φ(0) = 1`.
#[inline]
pub fn zoh_phi(z: f64) -> f64 {
    if z.abs() < PHI_SERIES_THRESHOLD {
        1.0 + z / 2.0 + z * z / 6.0
    } else {
        z.exp_m1() / z
    }
}

/// `φ'(z)`. Uses the Taylor series `Σ k z^(k-1) / (k+1)!` near zero where the
/// closed form cancels catastrophically.
#[inline]
pub fn zoh_phi_prime(z: f64) -> f64 {
    if z.abs() < PHI_PRIME_SERIES_THRESHOLD {
        let mut acc = 0.0;
        let mut pow = 1.0; // z^(k-1)
        let mut fact = 2.0; // (k+1)!
        for k in 1..=12 {
            acc += k as f64 * pow / fact;
            pow *= z;
            fact *= (k + 2) as f64;
        }
        acc
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

/// Input-conditioned SSM parameters for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Bcd {
    pub b: Matrix,
    pub c: Matrix,
    pub delta: Matrix,
}

/// `B = X W_B`, `C = X W_C`, `δ = softplus(bias + X W_δ)`.
pub fn compute_bcd(x_emb: &Matrix, p: &SsmParams) -> Result<Bcd> {
    p.validate()?;
    let b = matmul(x_emb, &p.w_b)?;
    let c = matmul(x_emb, &p.w_c)?;
    let mut delta = matmul(x_emb, &p.w_delta)?;
    for l in 0..delta.rows() {
        for (v, bias) in delta.row_mut(l).iter_mut().zip(&p.delta_bias) {
            *v = softplus(*v + bias);
        }
    }
    Ok(Bcd { b, c, delta })
}

#[inline]
fn delta_at(delta: &Matrix, l: usize, d: usize) -> f64 {
    if delta.cols() == 1 {
        delta[(l, 0)]
    } else {
        delta[(l, d)]
    }
}

/// Zero-order hold: `Ā = exp(δA)`, `B̄ = φ(δA) δ B`, per token, channel and state.
pub fn discretize(delta: &Matrix, a: &Matrix, b: &Matrix) -> Result<(Tensor3, Tensor3)> {
    let (l_len, dd) = delta.shape();
    let (d, n) = a.shape();
    if dd != 1 && dd != d {
        return Err(Error::shape(format!(
            "delta has {dd} columns; expected 1 or {d}"
        )));
    }
    if b.shape() != (l_len, n) {
        return Err(Error::shape(format!(
            "B is {:?}, expected {:?}",
            b.shape(),
            (l_len, n)
        )));
    }
    if let Some(bad) = delta.as_slice().iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!("step size δ must be positive, got {bad}")));
    }

    let mut abar = Tensor3::zeros(l_len, d, n);
    let mut bbar = Tensor3::zeros(l_len, d, n);
    for l in 0..l_len {
        for di in 0..d {
            let dt = delta_at(delta, l, di);
            for ni in 0..n {
                let z = dt * a[(di, ni)];
                abar.set(l, di, ni, z.exp());
                bbar.set(l, di, ni, zoh_phi(z) * dt * b[(l, ni)]);
            }
        }
    }
    Ok((abar, bbar))
}

/// Runs `h_l = Ā_l ⊙ h_{l−1} + B̄_l x_l`, `y_{l,d} = Σ_n C_{l,n} h_{l,d,n}` from `h_0 = 0`.
pub fn selective_scan(x_emb: &Matrix, abar: &Tensor3, bbar: &Tensor3, c: &Matrix) -> Result<Matrix> {
    Ok(scan_with_states(x_emb, abar, bbar, c)?.0)
}

pub(crate) fn scan_with_states(
    x_emb: &Matrix,
    abar: &Tensor3,
    bbar: &Tensor3,
    c: &Matrix,
) -> Result<(Matrix, Tensor3)> {
    let (l_len, d) = x_emb.shape();
    let n = c.cols();
    if abar.dims() != (l_len, d, n) || bbar.dims() != (l_len, d, n) || c.rows() != l_len {
        return Err(Error::shape(format!(
            "scan operands: x {:?}, Ā {:?}, B̄ {:?}, C {:?}",
            x_emb.shape(),
            abar.dims(),
            bbar.dims(),
            c.shape()
        )));
    }
    let mut y = Matrix::zeros(l_len, d);
    let mut states = Tensor3::zeros(l_len, d, n);
    let mut h = vec![0.0; d * n];
    for l in 0..l_len {
        let ab = abar.token(l);
        let bb = bbar.token(l);
        let c_row = c.row(l);
        for di in 0..d {
            let xv = x_emb[(l, di)];
            let mut acc = 0.0;
            for ni in 0..n {
                let k = di * n + ni;
                h[k] = ab[k] * h[k] + bb[k] * xv;
                acc += c_row[ni] * h[k];
            }
            y[(l, di)] = acc;
        }
        let w = d * n;
        states.data[l * w..(l + 1) * w].copy_from_slice(&h);
    }
    Ok((y, states))
}

/// Convolution kernel of a time-invariant SSM:
/// `kernel[k, d] = Σ_n c_n Ā_{d,n}^k B̄_{d,n}` for `k < k_len`.
pub fn build_lti_kernel(abar0: &Tensor3, bbar0: &Tensor3, c0: &Matrix, k_len: usize) -> Result<Matrix> {
    let (one, d, n) = abar0.dims();
    if one != 1 || bbar0.dims() != (1, d, n) || c0.shape() != (1, n) {
        return Err(Error::shape(format!(
            "LTI kernel operands: Ā {:?}, B̄ {:?}, C {:?}",
            abar0.dims(),
            bbar0.dims(),
            c0.shape()
        )));
    }
    let mut kernel = Matrix::zeros(k_len, d);
    for di in 0..d {
        for ni in 0..n {
            let ratio = abar0.get(0, di, ni);
            let mut term = c0[(0, ni)] * bbar0.get(0, di, ni);
            for k in 0..k_len {
                kernel[(k, di)] += term;
                term *= ratio;
            }
        }
    }
    Ok(kernel)
}

/// Causal per-channel convolution `y_l = Σ_{k ≤ l} kernel_k ⊙ x_{l−k}`.
pub fn causal_conv(x: &Matrix, kernel: &Matrix) -> Result<Matrix> {
    if kernel.cols() != x.cols() || kernel.rows() < x.rows() {
        return Err(Error::shape(format!(
            "kernel {:?} cannot convolve input {:?}",
            kernel.shape(),
            x.shape()
        )));
    }
    let (l_len, d) = x.shape();
    Ok(Matrix::from_fn(l_len, d, |l, di| {
        (0..=l).map(|k| kernel[(k, di)] * x[(l - k, di)]).sum()
    }))
}

/// Every intermediate of one block on one sequence.
#[derive(Debug, Clone)]
pub(crate) struct BlockTrace {
    pub x: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    pub delta_pre: Matrix,
    pub delta: Matrix,
    pub abar: Tensor3,
    pub bbar: Tensor3,
    pub states: Tensor3,
    pub gate_pre: Option<Matrix>,
    pub scan: Matrix,
    /// Input of `W_out` (scan output, gated when a gate is present).
    pub mixed: Matrix,
    pub y: Matrix,
}

pub(crate) fn block_trace(u: &Matrix, block: &MambaBlockParams) -> Result<BlockTrace> {
    if u.cols() != block.d_in() {
        return Err(Error::shape(format!(
            "block expects {} input features, got {}",
            block.d_in(),
            u.cols()
        )));
    }
    let p = &block.ssm;
    let x = matmul(u, &block.embed)?;
    let b = matmul(&x, &p.w_b)?;
    let c = matmul(&x, &p.w_c)?;
    let mut delta_pre = matmul(&x, &p.w_delta)?;
    for l in 0..delta_pre.rows() {
        for (v, bias) in delta_pre.row_mut(l).iter_mut().zip(&p.delta_bias) {
            *v += bias;
        }
    }
    let delta = delta_pre.map(softplus);
    let (abar, bbar) = discretize(&delta, &p.a, &b)?;
    let (scan, states) = scan_with_states(&x, &abar, &bbar, &c)?;
    let (mixed, gate_pre) = match &block.gate {
        Some(wg) => {
            let pre = matmul(&x, wg)?;
            let mut m = scan.clone();
            for (v, g) in m.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                *v *= silu(*g);
            }
            (m, Some(pre))
        }
        None => (scan.clone(), None),
    };
    let y = matmul(&mixed, &block.w_out)?;
    Ok(BlockTrace {
        x,
        b,
        c,
        delta_pre,
        delta,
        abar,
        bbar,
        states,
        gate_pre,
        scan,
        mixed,
        y,
    })
}

fn deltax(x: &Matrix, delta: &Matrix) -> Matrix {
    Matrix::from_fn(x.rows(), x.cols(), |l, d| delta_at(delta, l, d) * x[(l, d)])
}

/// Forward of one block over a list of sequences.
pub fn forward_block(
    inputs: &[Matrix],
    block: &MambaBlockParams,
    capture: bool,
) -> Result<(Vec<Matrix>, Option<FeatureCapture>)> {
    block.validate()?;
    let mut outs = Vec::with_capacity(inputs.len());
    let mut xs = Vec::new();
    let mut deltas = Vec::new();
    let mut dxs = Vec::new();
    let mut ys = Vec::new();
    for u in inputs {
        let t = block_trace(u, block)?;
        if capture {
            dxs.push(deltax(&t.x, &t.delta));
            xs.push(t.x);
            deltas.push(t.delta);
            ys.push(t.mixed);
        }
        outs.push(t.y);
    }
    let feats = if capture {
        let d = block.ssm.d_model();
        let dd = block.ssm.d_delta();
        let stack = |parts: Vec<Matrix>, width: usize| -> Result<Matrix> {
            if parts.is_empty() {
                Ok(Matrix::zeros(0, width))
            } else {
                Matrix::vstack(&parts)
            }
        };
        Some(FeatureCapture {
            x_feats: stack(xs, d)?,
            delta_feats: stack(deltas, dd)?,
            deltax_feats: stack(dxs, d)?,
            y_feats: stack(ys, d)?,
        })
    } else {
        None
    };
    Ok((outs, feats))
}

/// Block forward on a raw batch: `embed → B,C,δ → ZOH → scan → W_out`.
pub fn mamba_block_forward(
    batch: &SequenceBatch,
    block: &MambaBlockParams,
    capture: bool,
) -> Result<(Vec<Matrix>, Option<FeatureCapture>)> {
    forward_block(&batch.x, block, capture)
}

/// Mean over tokens of each output sequence.
pub fn mean_pool(outputs: &[Matrix], width: usize) -> Matrix {
    let mut pooled = Matrix::zeros(outputs.len(), width);
    for (m, y) in outputs.iter().enumerate() {
        let inv = 1.0 / y.rows().max(1) as f64;
        for l in 0..y.rows() {
            for (p, v) in pooled.row_mut(m).iter_mut().zip(y.row(l)) {
                *p += v * inv;
            }
        }
    }
    pooled
}

/// Logits for the concatenation of `heads`, in task order.
pub fn logits_from_pooled(pooled: &Matrix, heads: &[Matrix]) -> Result<Matrix> {
    if heads.is_empty() {
        return Err(Error::config("at least one classifier head is required"));
    }
    let total: usize = heads.iter().map(Matrix::cols).sum();
    let mut logits = Matrix::zeros(pooled.rows(), total);
    let mut offset = 0;
    for h in heads {
        let part = matmul(pooled, h)?;
        for m in 0..pooled.rows() {
            logits.row_mut(m)[offset..offset + h.cols()].copy_from_slice(part.row(m));
        }
        offset += h.cols();
    }
    Ok(logits)
}

/// Mean-pooled backbone output multiplied by each head, concatenated.
pub fn model_forward(batch: &SequenceBatch, backbone: &Backbone, heads: &[Matrix]) -> Result<Matrix> {
    if heads.is_empty() {
        return Err(Error::config("at least one classifier head is required"));
    }
    let (outs, _) = backbone.forward(&batch.x, false)?;
    let pooled = mean_pool(&outs, backbone.d_out());
    logits_from_pooled(&pooled, heads)
}
