//! Cross-entropy loss, a hand-written reverse pass through the whole
//! backbone, and the central-difference oracle it is checked against.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{matmul_nt, matmul_tn, Matrix};
use crate::ssm::{
    block_trace, logits_from_pooled, mean_pool, model_forward, sigmoid, silu, silu_prime, zoh_phi,
    zoh_phi_prime, Backbone, BlockTrace, MambaBlockParams, ModelDims, SequenceBatch,
};

/// Trainable tensors of one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    A,
    WB,
    WC,
    WDelta,
    DeltaBias,
    WOut,
}

impl ParamKind {
    pub const ALL: [ParamKind; 6] = [
        ParamKind::A,
        ParamKind::WB,
        ParamKind::WC,
        ParamKind::WDelta,
        ParamKind::DeltaBias,
        ParamKind::WOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamKind::A => "A",
            ParamKind::WB => "W_B",
            ParamKind::WC => "W_C",
            ParamKind::WDelta => "W_delta",
            ParamKind::DeltaBias => "delta_bias",
            ParamKind::WOut => "W_out",
        }
    }
}

impl MambaBlockParams {
    pub fn param(&self, kind: ParamKind) -> &[f64] {
        match kind {
            ParamKind::A => self.ssm.a.as_slice(),
            ParamKind::WB => self.ssm.w_b.as_slice(),
            ParamKind::WC => self.ssm.w_c.as_slice(),
            ParamKind::WDelta => self.ssm.w_delta.as_slice(),
            ParamKind::DeltaBias => &self.ssm.delta_bias,
            ParamKind::WOut => self.w_out.as_slice(),
        }
    }

    pub fn param_mut(&mut self, kind: ParamKind) -> &mut [f64] {
        match kind {
            ParamKind::A => self.ssm.a.as_mut_slice(),
            ParamKind::WB => self.ssm.w_b.as_mut_slice(),
            ParamKind::WC => self.ssm.w_c.as_mut_slice(),
            ParamKind::WDelta => self.ssm.w_delta.as_mut_slice(),
            ParamKind::DeltaBias => &mut self.ssm.delta_bias,
            ParamKind::WOut => self.w_out.as_mut_slice(),
        }
    }
}

/// Gradient of one block, shaped like its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads {
    pub a: Matrix,
    pub w_b: Matrix,
    pub w_c: Matrix,
    pub w_delta: Matrix,
    pub delta_bias: Vec<f64>,
    pub w_out: Matrix,
}

impl BlockGrads {
    pub fn zeros_like(block: &MambaBlockParams) -> Self {
        let p = &block.ssm;
        Self {
            a: Matrix::zeros(p.a.rows(), p.a.cols()),
            w_b: Matrix::zeros(p.w_b.rows(), p.w_b.cols()),
            w_c: Matrix::zeros(p.w_c.rows(), p.w_c.cols()),
            w_delta: Matrix::zeros(p.w_delta.rows(), p.w_delta.cols()),
            delta_bias: vec![0.0; p.delta_bias.len()],
            w_out: Matrix::zeros(block.w_out.rows(), block.w_out.cols()),
        }
    }

    pub fn get(&self, kind: ParamKind) -> &[f64] {
        match kind {
            ParamKind::A => self.a.as_slice(),
            ParamKind::WB => self.w_b.as_slice(),
            ParamKind::WC => self.w_c.as_slice(),
            ParamKind::WDelta => self.w_delta.as_slice(),
            ParamKind::DeltaBias => &self.delta_bias,
            ParamKind::WOut => self.w_out.as_slice(),
        }
    }

    pub fn get_mut(&mut self, kind: ParamKind) -> &mut [f64] {
        match kind {
            ParamKind::A => self.a.as_mut_slice(),
            ParamKind::WB => self.w_b.as_mut_slice(),
            ParamKind::WC => self.w_c.as_mut_slice(),
            ParamKind::WDelta => self.w_delta.as_mut_slice(),
            ParamKind::DeltaBias => &mut self.delta_bias,
            ParamKind::WOut => self.w_out.as_mut_slice(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub blocks: Vec<BlockGrads>,
    pub heads: Vec<Matrix>,
}

impl Gradients {
    pub fn zeros_like(backbone: &Backbone, heads: &[Matrix]) -> Self {
        Self {
            blocks: backbone.blocks.iter().map(BlockGrads::zeros_like).collect(),
            heads: heads.iter().map(|h| Matrix::zeros(h.rows(), h.cols())).collect(),
        }
    }

    pub fn get(&self, sel: ParamSelector) -> &[f64] {
        match sel {
            ParamSelector::Block { block, kind } => self.blocks[block].get(kind),
            ParamSelector::Head(h) => self.heads[h].as_slice(),
        }
    }

    pub fn get_mut(&mut self, sel: ParamSelector) -> &mut [f64] {
        match sel {
            ParamSelector::Block { block, kind } => self.blocks[block].get_mut(kind),
            ParamSelector::Head(h) => self.heads[h].as_mut_slice(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks
            .iter()
            .all(|b| ParamKind::ALL.iter().all(|&k| b.get(k).iter().all(|v| v.is_finite())))
            && self.heads.iter().all(Matrix::is_finite)
    }
}

/// Addresses one trainable tensor of a backbone + heads pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSelector {
    Block { block: usize, kind: ParamKind },
    Head(usize),
}

impl ParamSelector {
    /// Every trainable tensor, blocks first.
    pub fn all(n_blocks: usize, n_heads: usize) -> Vec<ParamSelector> {
        let mut v: Vec<_> = (0..n_blocks)
            .flat_map(|block| ParamKind::ALL.into_iter().map(move |kind| ParamSelector::Block { block, kind }))
            .collect();
        v.extend((0..n_heads).map(ParamSelector::Head));
        v
    }

    pub fn label(&self) -> String {
        match self {
            ParamSelector::Block { block, kind } => format!("block{block}.{}", kind.name()),
            ParamSelector::Head(h) => format!("head{h}"),
        }
    }

    fn values_mut<'a>(&self, backbone: &'a mut Backbone, heads: &'a mut [Matrix]) -> &'a mut [f64] {
        match *self {
            ParamSelector::Block { block, kind } => backbone.blocks[block].param_mut(kind),
            ParamSelector::Head(h) => heads[h].as_mut_slice(),
        }
    }
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn check_labels(logits: &Matrix, labels: &[usize]) -> Result<()> {
    if logits.rows() != labels.len() {
        return Err(Error::shape(format!(
            "{} logit rows for {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    if logits.rows() == 0 {
        return Err(Error::Domain("cross-entropy of an empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(Error::Domain(format!(
            "label {bad} out of range for {} classes",
            logits.cols()
        )));
    }
    Ok(())
}

/// Mean cross-entropy with max-subtraction.
pub fn loss(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(m, &y)| -log_softmax_row(logits.row(m))[y])
        .sum();
    Ok(total / labels.len() as f64)
}

/// Loss and exact gradients for every trainable tensor. Labels index the
/// concatenation of `heads`.
pub fn backward(batch: &SequenceBatch, backbone: &Backbone, heads: &[Matrix]) -> Result<(f64, Gradients)> {
    backbone.validate()?;
    let n_blocks = backbone.blocks.len();
    let width = backbone.d_out();

    let mut traces: Vec<Vec<BlockTrace>> = Vec::with_capacity(batch.len());
    for u in &batch.x {
        let mut per_block = Vec::with_capacity(n_blocks);
        let mut input = u.clone();
        for block in &backbone.blocks {
            let t = block_trace(&input, block)?;
            input = t.y.clone();
            per_block.push(t);
        }
        traces.push(per_block);
    }
    let outputs: Vec<Matrix> = traces.iter().map(|t| t[n_blocks - 1].y.clone()).collect();
    let pooled = mean_pool(&outputs, width);
    let logits = logits_from_pooled(&pooled, heads)?;
    check_labels(&logits, &batch.labels)?;

    let m_count = batch.len() as f64;
    let mut dlogits = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (m, &y) in batch.labels.iter().enumerate() {
        let lsm = log_softmax_row(logits.row(m));
        total -= lsm[y];
        for (k, (d, lp)) in dlogits.row_mut(m).iter_mut().zip(&lsm).enumerate() {
            *d = (lp.exp() - if k == y { 1.0 } else { 0.0 }) / m_count;
        }
    }
    let loss_value = total / m_count;

    let mut grads = Gradients::zeros_like(backbone, heads);
    let mut dpooled = Matrix::zeros(pooled.rows(), width);
    let mut offset = 0;
    for (h, head) in heads.iter().enumerate() {
        let seg = Matrix::from_fn(dlogits.rows(), head.cols(), |m, k| dlogits[(m, offset + k)]);
        grads.heads[h] = matmul_tn(&pooled, &seg)?;
        let back = matmul_nt(&seg, head)?;
        dpooled.axpy(1.0, &back)?;
        offset += head.cols();
    }

    for (m, per_block) in traces.iter().enumerate() {
        let l_len = per_block[n_blocks - 1].y.rows();
        let inv = 1.0 / l_len.max(1) as f64;
        let mut dy = Matrix::from_fn(l_len, width, |_, j| dpooled[(m, j)] * inv);
        for k in (0..n_blocks).rev() {
            dy = block_backward(
                &per_block[k],
                &backbone.blocks[k],
                &dy,
                &mut grads.blocks[k],
                k > 0,
            )?;
        }
    }
    Ok((loss_value, grads))
}

/// Accumulates one sequence's contribution into `g` and returns the gradient
/// with respect to the block input (empty when `want_input` is false).
fn block_backward(
    t: &BlockTrace,
    block: &MambaBlockParams,
    dy: &Matrix,
    g: &mut BlockGrads,
    want_input: bool,
) -> Result<Matrix> {
    let p = &block.ssm;
    let (l_len, d) = t.x.shape();
    let n = p.d_state();
    let shared_delta = p.d_delta() == 1;

    g.w_out.axpy(1.0, &matmul_tn(&t.mixed, dy)?)?;
    let dmixed = matmul_nt(dy, &block.w_out)?;

    let mut dx = Matrix::zeros(l_len, d);
    let ds = match (&block.gate, &t.gate_pre) {
        (Some(wg), Some(pre)) => {
            let mut ds = dmixed.clone();
            let mut dpre = Matrix::zeros(l_len, d);
            for i in 0..l_len * d {
                let gp = pre.as_slice()[i];
                ds.as_mut_slice()[i] = dmixed.as_slice()[i] * silu(gp);
                dpre.as_mut_slice()[i] = dmixed.as_slice()[i] * t.scan.as_slice()[i] * silu_prime(gp);
            }
            dx.axpy(1.0, &matmul_nt(&dpre, wg)?)?;
            ds
        }
        _ => dmixed,
    };

    let mut dc = Matrix::zeros(l_len, n);
    let mut db = Matrix::zeros(l_len, n);
    let mut ddelta = Matrix::zeros(l_len, p.d_delta());
    let mut dh = vec![0.0; d * n];
    for l in (0..l_len).rev() {
        let h_now = t.states.token(l);
        let h_prev = if l > 0 { Some(t.states.token(l - 1)) } else { None };
        let ab = t.abar.token(l);
        let bb = t.bbar.token(l);
        for di in 0..d {
            let ds_ld = ds[(l, di)];
            let xv = t.x[(l, di)];
            let dcol = if shared_delta { 0 } else { di };
            let dt = t.delta[(l, dcol)];
            let mut dx_acc = 0.0;
            let mut ddt_acc = 0.0;
            for ni in 0..n {
                let k = di * n + ni;
                dc[(l, ni)] += ds_ld * h_now[k];
                dh[k] += ds_ld * t.c[(l, ni)];

                let dabar = h_prev.map_or(0.0, |hp| dh[k] * hp[k]);
                let dbbar = dh[k] * xv;
                dx_acc += dh[k] * bb[k];

                let a_dn = p.a[(di, ni)];
                let z = dt * a_dn;
                let phi = zoh_phi(z);
                let b_ln = t.b[(l, ni)];
                let dz = dabar * ab[k] + dbbar * zoh_phi_prime(z) * dt * b_ln;
                ddt_acc += dbbar * phi * b_ln + dz * a_dn;
                db[(l, ni)] += dbbar * phi * dt;
                g.a[(di, ni)] += dz * dt;

                dh[k] *= ab[k];
            }
            dx[(l, di)] += dx_acc;
            ddelta[(l, dcol)] += ddt_acc;
        }
    }

    let mut dpre = ddelta;
    for (v, pre) in dpre.as_mut_slice().iter_mut().zip(t.delta_pre.as_slice()) {
        *v *= sigmoid(*pre);
    }
    for l in 0..l_len {
        for (gb, v) in g.delta_bias.iter_mut().zip(dpre.row(l)) {
            *gb += v;
        }
    }
    g.w_delta.axpy(1.0, &matmul_tn(&t.x, &dpre)?)?;
    g.w_b.axpy(1.0, &matmul_tn(&t.x, &db)?)?;
    g.w_c.axpy(1.0, &matmul_tn(&t.x, &dc)?)?;

    if !want_input {
        return Ok(Matrix::zeros(0, 0));
    }
    dx.axpy(1.0, &matmul_nt(&dpre, &p.w_delta)?)?;
    dx.axpy(1.0, &matmul_nt(&db, &p.w_b)?)?;
    dx.axpy(1.0, &matmul_nt(&dc, &p.w_c)?)?;
    matmul_nt(&dx, &block.embed)
}

/// `(f(x + h) − f(x − h)) / 2h`
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Central-difference estimate of the loss gradient for one tensor.
pub fn finite_diff(
    batch: &SequenceBatch,
    backbone: &Backbone,
    heads: &[Matrix],
    selector: ParamSelector,
    step: f64,
) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {step}")));
    }
    let mut bb = backbone.clone();
    let mut hs = heads.to_vec();
    let len = selector.values_mut(&mut bb, &mut hs).len();
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        let orig = selector.values_mut(&mut bb, &mut hs)[i];
        let mut eval = |v: f64| -> Result<f64> {
            selector.values_mut(&mut bb, &mut hs)[i] = v;
            let logits = model_forward(batch, &bb, &hs)?;
            loss(&logits, &batch.labels)
        };
        let plus = eval(orig + step)?;
        let minus = eval(orig - step)?;
        selector.values_mut(&mut bb, &mut hs)[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

/// [`finite_diff`] for every trainable tensor.
pub fn finite_diff_all(
    batch: &SequenceBatch,
    backbone: &Backbone,
    heads: &[Matrix],
    step: f64,
) -> Result<Gradients> {
    let mut g = Gradients::zeros_like(backbone, heads);
    for sel in ParamSelector::all(backbone.blocks.len(), heads.len()) {
        let est = finite_diff(batch, backbone, heads, sel, step)?;
        g.get_mut(sel).copy_from_slice(&est);
    }
    Ok(g)
}

/// `max|a − b| / max(max|a|, max|b|, floor)`
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    const FLOOR: f64 = 1e-6;
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(FLOOR, |m, v| m.max(v.abs()));
    diff / scale
}

/// Problem size for one gradient-check configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckCase {
    pub seed: u64,
    pub dims: ModelDims,
    pub seq_len: usize,
    pub batch: usize,
    pub classes: usize,
}

/// Deliberate corruption of the analytic gradient, for exercising the checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradFault {
    #[default]
    None,
    /// Negate the analytic `W_C` gradient of block 0.
    SignFlip,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOutcome {
    pub seed: u64,
    pub max_rel_error: f64,
    pub worst: String,
}

/// Random model, batch and heads for a gradient check. `A` is jittered away
/// from its structured init and the δ bias is drawn so that step sizes are
/// O(1), which keeps every block's gradient well above roundoff.
pub fn grad_check_problem(case: &GradCheckCase) -> Result<(SequenceBatch, Backbone, Vec<Matrix>)> {
    let mut backbone = Backbone::init(&case.dims, case.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(case.seed ^ 0x9e37_79b9_7f4a_7c15);
    for block in &mut backbone.blocks {
        for v in block.ssm.a.as_mut_slice() {
            *v *= rng.gen_range(0.5..1.5);
        }
        for v in block.ssm.delta_bias.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    let x = (0..case.batch)
        .map(|_| Matrix::from_fn(case.seq_len, case.dims.d_raw, |_, _| rng.gen_range(-1.0..1.0)))
        .collect();
    let labels = (0..case.batch).map(|_| rng.gen_range(0..case.classes)).collect();
    let split = case.classes / 2;
    let widths: Vec<usize> = if split == 0 { vec![case.classes] } else { vec![split, case.classes - split] };
    let heads = widths
        .into_iter()
        .map(|w| Matrix::from_fn(case.dims.d_out, w, |_, _| rng.gen_range(-1.0..1.0)))
        .collect();
    Ok((SequenceBatch::new(x, labels)?, backbone, heads))
}

/// Compares [`backward`] against [`finite_diff`] on one random problem.
pub fn run_grad_check(case: &GradCheckCase, step: f64, fault: GradFault) -> Result<GradCheckOutcome> {
    let (batch, backbone, heads) = grad_check_problem(case)?;
    let (_, mut analytic) = backward(&batch, &backbone, &heads)?;
    if fault == GradFault::SignFlip {
        for v in analytic.blocks[0].w_c.as_mut_slice() {
            *v = -*v;
        }
    }
    let numeric = finite_diff_all(&batch, &backbone, &heads, step)?;
    let mut worst = (0.0, String::new());
    for sel in ParamSelector::all(backbone.blocks.len(), heads.len()) {
        let err = relative_error(analytic.get(sel), numeric.get(sel));
        if err > worst.0 || worst.1.is_empty() {
            worst = (err, sel.label());
        }
    }
    Ok(GradCheckOutcome {
        seed: case.seed,
        max_rel_error: worst.0,
        worst: worst.1,
    })
}
