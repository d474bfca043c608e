//! Null-space machinery: cumulative uncentered covariances of the features
//! each consistency condition constrains, approximate null-space selection,
//! relaxed projectors, and their application to gradients.
//!
//! For every block the conditions pair a feature matrix with a parameter:
//!
//! | feature       | covariance | projector | parameter        |
//! |---------------|------------|-----------|------------------|
//! | `X`           | `q1`       | `h1`      | `W_delta`, `W_C` |
//! | `δ`           | `q2`       | `h2`      | `A`              |
//! | `δ ⊙ X`       | `q3`       | `h3`      | `W_B`            |
//! | `W_out` input | `q_out`    | `h_out`   | `W_out`          |

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{BlockGrads, Gradients};
use crate::linalg::{gram, matmul, sym_eigh, Matrix};
use crate::ssm::FeatureCapture;

/// Eigenvalues at or below this fraction of `λ_max` count as exact zeros.
pub const EXACT_ZERO_REL: f64 = 1e-12;
/// Largest eigenvalue, relative to `λ_max`, that the capped corner rule
/// accepts inside the null space.
pub const CORNER_CAP_REL: f64 = 1e-3;

/// How the approximate null-space dimension is chosen from a spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankRule {
    /// Corner of the "L"-shaped spectrum (maximum discrete second difference).
    #[default]
    LShape,
    /// As `LShape`, but a corner that would put an eigenvalue above
    /// `CORNER_CAP_REL · λ_max` in the null space falls back to `Exact`.
    LShapeCapped,
    /// Only eigenvalues `≤ EXACT_ZERO_REL · λ_max`.
    Exact,
}

/// Which projectors are applied; an ablation switch per row of the
/// component study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectorFlags {
    pub h1_delta: bool,
    pub h1_c: bool,
    pub h2: bool,
    pub h3: bool,
    pub h_out: bool,
}

impl ProjectorFlags {
    pub const NAMES: [&'static str; 5] = ["h1_delta", "h1_c", "h2", "h3", "h_out"];

    pub fn all() -> Self {
        Self {
            h1_delta: true,
            h1_c: true,
            h2: true,
            h3: true,
            h_out: true,
        }
    }

    pub fn none() -> Self {
        Self {
            h1_delta: false,
            h1_c: false,
            h2: false,
            h3: false,
            h_out: false,
        }
    }

    pub fn any(&self) -> bool {
        self.h1_delta || self.h1_c || self.h2 || self.h3 || self.h_out
    }

    /// Parses a list of projector names such as `["h1_delta", "h_out"]`.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut f = Self::none();
        for n in names {
            match n.as_ref().trim() {
                "h1_delta" => f.h1_delta = true,
                "h1_c" => f.h1_c = true,
                "h2" => f.h2 = true,
                "h3" => f.h3 = true,
                "h_out" => f.h_out = true,
                "all" => f = Self::all(),
                "" | "none" => {}
                other => {
                    return Err(Error::config(format!(
                        "unknown projector `{other}`, expected one of {:?}",
                        Self::NAMES
                    )))
                }
            }
        }
        Ok(f)
    }

    pub fn names(&self) -> Vec<&'static str> {
        let on = [self.h1_delta, self.h1_c, self.h2, self.h3, self.h_out];
        Self::NAMES
            .iter()
            .zip(on)
            .filter_map(|(n, b)| b.then_some(*n))
            .collect()
    }

    pub fn as_array(&self) -> [bool; 5] {
        [self.h1_delta, self.h1_c, self.h2, self.h3, self.h_out]
    }

    pub fn from_array(a: [bool; 5]) -> Self {
        Self {
            h1_delta: a[0],
            h1_c: a[1],
            h2: a[2],
            h3: a[3],
            h_out: a[4],
        }
    }
}

impl Default for ProjectorFlags {
    fn default() -> Self {
        Self::all()
    }
}

/// Accumulated `JᵀJ` of one block's features over every task seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceBank {
    pub q1: Matrix,
    pub q2: Matrix,
    pub q3: Matrix,
    pub q_out: Matrix,
    /// Feature rows absorbed into `q1`, `q2`, `q3`, `q_out`.
    pub rows_seen: [u64; 4],
}

impl CovarianceBank {
    pub fn new(d_model: usize, d_delta: usize) -> Self {
        Self {
            q1: Matrix::zeros(d_model, d_model),
            q2: Matrix::zeros(d_delta, d_delta),
            q3: Matrix::zeros(d_model, d_model),
            q_out: Matrix::zeros(d_model, d_model),
            rows_seen: [0; 4],
        }
    }

    pub fn d_model(&self) -> usize {
        self.q1.rows()
    }

    pub fn d_delta(&self) -> usize {
        self.q2.rows()
    }

    /// `Q ← Q + JᵀJ` for each feature family. Never resets.
    pub fn accumulate(&mut self, features: &FeatureCapture) -> Result<()> {
        let d = self.d_model();
        let checks = [
            ("x_feats", &features.x_feats, d),
            ("delta_feats", &features.delta_feats, self.d_delta()),
            ("deltax_feats", &features.deltax_feats, d),
            ("y_feats", &features.y_feats, d),
        ];
        for (name, m, w) in checks {
            if m.cols() != w {
                return Err(Error::shape(format!(
                    "{name} has {} columns, bank expects {w}",
                    m.cols()
                )));
            }
        }
        let rows = features.x_feats.rows();
        if [&features.delta_feats, &features.deltax_feats, &features.y_feats]
            .iter()
            .any(|m| m.rows() != rows)
        {
            return Err(Error::shape("feature captures disagree on row count"));
        }

        self.q1.axpy(1.0, &gram(&features.x_feats))?;
        self.q2.axpy(1.0, &gram(&features.delta_feats))?;
        self.q3.axpy(1.0, &gram(&features.deltax_feats))?;
        self.q_out.axpy(1.0, &gram(&features.y_feats))?;
        for c in &mut self.rows_seen {
            *c += rows as u64;
        }
        Ok(())
    }
}

/// Free-function form of [`CovarianceBank::accumulate`].
pub fn accumulate(bank: &mut CovarianceBank, features: &FeatureCapture) -> Result<()> {
    bank.accumulate(features)
}

/// Null-space dimension under the default corner rule.
pub fn select_null_rank(eigvals: &[f64]) -> usize {
    select_null_rank_with(eigvals, RankRule::LShape)
}

/// Number of trailing eigenvalues treated as zero.
///
/// Spectra that already contain exact zeros (at most `EXACT_ZERO_REL · λ_max`),
/// that are identically zero, or that have fewer than three values use the
/// exact count. Otherwise the corner `j*` maximizing
/// `λ_{j−1} − 2λ_j + λ_{j+1}` over `j ∈ [2, J−1]` (1-based, smallest `j` on
/// ties) gives `R = J − j*`.
pub fn select_null_rank_with(eigvals: &[f64], rule: RankRule) -> usize {
    let len = eigvals.len();
    if len == 0 {
        return 0;
    }
    let lam: Vec<f64> = eigvals.iter().map(|v| v.max(0.0)).collect();
    let lmax = lam.iter().cloned().fold(0.0, f64::max);
    let tol = EXACT_ZERO_REL * lmax;
    let exact = lam.iter().filter(|&&v| v <= tol).count();
    if rule == RankRule::Exact || len < 3 || lmax <= 0.0 || exact > 0 {
        return exact;
    }

    let mut best_j = 2;
    let mut best = f64::NEG_INFINITY;
    for j in 2..len {
        // 1-based j ↦ 0-based indices j-2, j-1, j
        let curv = lam[j - 2] - 2.0 * lam[j - 1] + lam[j];
        if curv > best {
            best = curv;
            best_j = j;
        }
    }
    let r = len - best_j;
    if rule == RankRule::LShapeCapped && lam[len - r] > CORNER_CAP_REL * lmax {
        return exact;
    }
    r
}

/// A projector together with the spectrum it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorBuild {
    pub h_bar: Matrix,
    pub null_rank: usize,
    pub eigvals: Vec<f64>,
}

/// `ηU₀U₀ᵀ + (1−η)I` with `U₀` the approximate null basis of `q`.
pub fn build_projector(q: &Matrix, eta: f64) -> Result<Matrix> {
    Ok(build_projector_with(q, eta, RankRule::LShape)?.h_bar)
}

pub fn build_projector_with(q: &Matrix, eta: f64, rule: RankRule) -> Result<ProjectorBuild> {
    check_eta(eta)?;
    let eig = sym_eigh(q)?;
    let n = eig.values.len();
    let r = select_null_rank_with(&eig.values, rule);
    let u0 = Matrix::from_fn(n, r, |i, j| eig.vectors[(i, n - r + j)]);
    let mut h = matmul(&u0, &u0.transpose())?;
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (h[(i, j)] + h[(j, i)]);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    let h_bar = relax(&h, eta);
    Ok(ProjectorBuild {
        h_bar,
        null_rank: r,
        eigvals: eig.values,
    })
}

fn relax(h: &Matrix, eta: f64) -> Matrix {
    let mut out = h.scale(eta);
    for i in 0..out.rows() {
        out[(i, i)] += 1.0 - eta;
    }
    out
}

pub(crate) fn check_eta(eta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::config(format!("eta must lie in [0, 1], got {eta}")));
    }
    Ok(())
}

/// Relaxed projectors of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorSet {
    pub h1: Matrix,
    pub h2: Matrix,
    pub h3: Matrix,
    pub h_out: Matrix,
    pub eta: f64,
    pub flags: ProjectorFlags,
    /// Null-space dimensions selected for `h1`, `h2`, `h3`, `h_out`.
    pub null_ranks: [usize; 4],
}

impl ProjectorSet {
    /// Rebuilds every projector from scratch out of the accumulated bank.
    pub fn from_bank(bank: &CovarianceBank, eta: f64, flags: ProjectorFlags, rule: RankRule) -> Result<Self> {
        let p1 = build_projector_with(&bank.q1, eta, rule)?;
        let p2 = build_projector_with(&bank.q2, eta, rule)?;
        let p3 = build_projector_with(&bank.q3, eta, rule)?;
        let po = build_projector_with(&bank.q_out, eta, rule)?;
        Ok(Self {
            null_ranks: [p1.null_rank, p2.null_rank, p3.null_rank, po.null_rank],
            h1: p1.h_bar,
            h2: p2.h_bar,
            h3: p3.h_bar,
            h_out: po.h_bar,
            eta,
            flags,
        })
    }

    /// Left-multiplies each enabled projector into its gradient. `delta_bias`
    /// is never projected.
    pub fn project_block(&self, g: &BlockGrads) -> Result<BlockGrads> {
        let apply = |name: &str, on: bool, h: &Matrix, m: &Matrix| -> Result<Matrix> {
            if !on {
                return Ok(m.clone());
            }
            if h.cols() != m.rows() {
                return Err(Error::config(format!(
                    "projector {name} is {}x{} but its gradient has {} rows",
                    h.rows(),
                    h.cols(),
                    m.rows()
                )));
            }
            matmul(h, m)
        };
        let f = &self.flags;
        Ok(BlockGrads {
            w_delta: apply("H1 (W_delta)", f.h1_delta, &self.h1, &g.w_delta)?,
            w_c: apply("H1 (W_C)", f.h1_c, &self.h1, &g.w_c)?,
            a: apply("H2", f.h2, &self.h2, &g.a)?,
            w_b: apply("H3", f.h3, &self.h3, &g.w_b)?,
            w_out: apply("H_out", f.h_out, &self.h_out, &g.w_out)?,
            delta_bias: g.delta_bias.clone(),
        })
    }

    /// Fails if an enabled projector cannot multiply its gradient.
    pub fn check_conformable(&self, d_model: usize, d_delta: usize) -> Result<()> {
        if self.flags.h2 && d_delta != d_model {
            return Err(Error::config(format!(
                "projector H2 is {d_delta}x{d_delta} but the A gradient has {d_model} rows; \
                 disable h2 or use d_delta = d_model"
            )));
        }
        Ok(())
    }
}

/// Projects the backbone part of `grads` block by block; head gradients pass
/// through untouched.
pub fn project_gradients(projs: &[ProjectorSet], grads: &Gradients) -> Result<Gradients> {
    if projs.len() != grads.blocks.len() {
        return Err(Error::config(format!(
            "{} projector sets for {} blocks",
            projs.len(),
            grads.blocks.len()
        )));
    }
    let blocks = projs
        .iter()
        .zip(&grads.blocks)
        .map(|(p, g)| p.project_block(g))
        .collect::<Result<Vec<_>>>()?;
    Ok(Gradients {
        blocks,
        heads: grads.heads.clone(),
    })
}
