//! Sequential task training with null-space projected updates.
//!
//! Task 1 is trained with plain updates. After every task the full training
//! set is passed once through the backbone, its features are folded into the
//! per-block covariance banks, and the projectors are rebuilt; every later
//! task trains with those projectors applied. Each task gets its own linear
//! head. Evaluation is class-incremental: argmax over all heads seen so far.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::benchgen::TaskSplit;
use crate::error::{Error, Result};
use crate::grad::{backward, loss, BlockGrads, Gradients, ParamKind};
use crate::linalg::Matrix;
use crate::nullspace::{check_eta, CovarianceBank, ProjectorFlags, ProjectorSet, RankRule};
use crate::ssm::{model_forward, Backbone, ModelDims, SequenceBatch};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const SHUFFLE_STREAM: u64 = 0x5348_5546;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerMode {
    /// `θ ← θ − γ·H·G`
    #[default]
    Plain,
    /// Adam direction, projected, then applied.
    Adaptive,
}

/// Which backbone parameters receive updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Trainable {
    pub a: bool,
    pub w_b: bool,
    pub w_c: bool,
    pub w_delta: bool,
    pub delta_bias: bool,
    pub w_out: bool,
}

impl Default for Trainable {
    fn default() -> Self {
        Self {
            a: true,
            w_b: true,
            w_c: true,
            w_delta: true,
            delta_bias: true,
            w_out: true,
        }
    }
}

impl Trainable {
    pub fn get(&self, kind: ParamKind) -> bool {
        match kind {
            ParamKind::A => self.a,
            ParamKind::WB => self.w_b,
            ParamKind::WC => self.w_c,
            ParamKind::WDelta => self.w_delta,
            ParamKind::DeltaBias => self.delta_bias,
            ParamKind::WOut => self.w_out,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Backbone learning rate γ.
    pub lr: f64,
    /// Learning rate of the heads and of `delta_bias`.
    pub head_lr: f64,
    pub eta: f64,
    pub optimizer: OptimizerMode,
    pub flags: ProjectorFlags,
    pub rank_rule: RankRule,
    pub seed: u64,
    pub trainable: Trainable,
    pub freeze_bias_after_first_task: bool,
    /// Rescales the whole gradient (backbone and head) to at most this L2
    /// norm before projection. A scalar rescale keeps projected steps inside
    /// the null space.
    pub grad_clip: Option<f64>,
    /// Filled from the `[model]` section of a run config.
    #[serde(skip)]
    pub dims: ModelDims,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 1e-2,
            head_lr: 1e-1,
            eta: 1.0,
            optimizer: OptimizerMode::Plain,
            flags: ProjectorFlags::all(),
            rank_rule: RankRule::LShape,
            seed: 0,
            trainable: Trainable::default(),
            freeze_bias_after_first_task: false,
            grad_clip: Some(5.0),
            dims: ModelDims::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.head_lr > 0.0 && self.head_lr.is_finite()) {
            return Err(Error::config(format!("head_lr must be positive, got {}", self.head_lr)));
        }
        check_eta(self.eta)?;
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config(format!("grad_clip must be positive, got {c}")));
            }
        }
        if self.flags.h2 && self.dims.d_delta != self.dims.d_model {
            return Err(Error::config(format!(
                "projector H2 needs d_delta = d_model ({}), got d_delta = {}; disable h2",
                self.dims.d_model, self.dims.d_delta
            )));
        }
        Ok(())
    }

    /// `"cl"` when any projector is enabled, `"seq"` otherwise.
    pub fn mode_tag(&self) -> &'static str {
        if self.flags.any() {
            "cl"
        } else {
            "seq"
        }
    }
}

/// Lower-triangular matrix of test accuracies in percent; row `j` holds the
/// accuracies on tasks `0..=j` after training task `j`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::shape(format!(
                "row {} must have {} entries, got {}",
                self.rows.len(),
                self.rows.len() + 1,
                row.len()
            )));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=100.0).contains(*v)) {
            return Err(Error::Domain(format!("accuracy {v} outside [0, 100]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn n_tasks(&self) -> usize {
        self.rows.len()
    }

    /// `a[j][i]`, defined for `i ≤ j`.
    pub fn get(&self, j: usize, i: usize) -> Option<f64> {
        self.rows.get(j).and_then(|r| r.get(i)).copied()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn truncated(&self, n: usize) -> Self {
        Self {
            rows: self.rows[..n.min(self.rows.len())].to_vec(),
        }
    }

    /// One CSV row per task boundary; cells above the diagonal stay empty.
    pub fn to_csv(&self) -> String {
        let t = self.rows.len();
        let mut out = String::from("after_task");
        for i in 0..t {
            out.push_str(&format!(",task_{i}"));
        }
        out.push('\n');
        for (j, r) in self.rows.iter().enumerate() {
            out.push_str(&j.to_string());
            for i in 0..t {
                out.push(',');
                if let Some(v) = r.get(i) {
                    out.push_str(&v.to_string());
                }
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FinalMetrics {
    pub avg_accuracy: f64,
    /// Absent for a single task.
    pub avg_forgetting: Option<f64>,
}

/// Mean last-row accuracy, and the mean over old tasks of the drop from
/// their best earlier accuracy (negative drops are kept).
pub fn final_metrics(acc: &AccuracyMatrix) -> Result<FinalMetrics> {
    let t = acc.n_tasks();
    if t == 0 {
        return Err(Error::Domain("accuracy matrix is empty".into()));
    }
    let last = &acc.rows[t - 1];
    let avg_accuracy = last.iter().sum::<f64>() / t as f64;
    let avg_forgetting = (t >= 2).then(|| {
        let total: f64 = (0..t - 1)
            .map(|i| {
                let best = (i..t - 1)
                    .map(|j| acc.rows[j][i])
                    .fold(f64::NEG_INFINITY, f64::max);
                best - last[i]
            })
            .sum();
        total / (t - 1) as f64
    });
    Ok(FinalMetrics {
        avg_accuracy,
        avg_forgetting,
    })
}

/// Plain step: `θ ← θ − γ·H·G` on the backbone (or `θ − γG` without
/// projectors), `delta_bias` and the head with the head rate, unprojected.
pub fn update_step(
    backbone: &mut Backbone,
    head: &mut Matrix,
    grads: &Gradients,
    projs: Option<&[ProjectorSet]>,
    lr: f64,
    head_lr: f64,
) -> Result<()> {
    let projected;
    let g = match projs {
        Some(p) => {
            projected = crate::nullspace::project_gradients(p, grads)?;
            &projected
        }
        None => grads,
    };
    for (block, bg) in backbone.blocks.iter_mut().zip(&g.blocks) {
        for kind in ParamKind::ALL {
            let rate = if kind == ParamKind::DeltaBias { head_lr } else { lr };
            for (p, d) in block.param_mut(kind).iter_mut().zip(bg.get(kind)) {
                *p -= rate * d;
            }
        }
    }
    if let Some(hg) = g.heads.first() {
        head.axpy(-head_lr, hg)?;
    }
    Ok(())
}

struct Adam {
    t: i32,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    fn new(like: &Gradients) -> Self {
        let zero = |g: &Gradients| {
            let mut z = g.clone();
            for b in &mut z.blocks {
                for k in ParamKind::ALL {
                    b.get_mut(k).fill(0.0);
                }
            }
            for h in &mut z.heads {
                h.as_mut_slice().fill(0.0);
            }
            z
        };
        Self {
            t: 0,
            m: zero(like),
            v: zero(like),
        }
    }

    /// Bias-corrected `m̂ / (√v̂ + ε)` for every slot of `g`.
    fn direction(&mut self, g: &Gradients) -> Gradients {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        let step = |m: &mut [f64], v: &mut [f64], g: &[f64], out: &mut [f64]| {
            for i in 0..g.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                out[i] = (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
        };
        let mut dir = g.clone();
        for b in 0..g.blocks.len() {
            for k in ParamKind::ALL {
                step(
                    self.m.blocks[b].get_mut(k),
                    self.v.blocks[b].get_mut(k),
                    g.blocks[b].get(k),
                    dir.blocks[b].get_mut(k),
                );
            }
        }
        for h in 0..g.heads.len() {
            step(
                self.m.heads[h].as_mut_slice(),
                self.v.heads[h].as_mut_slice(),
                g.heads[h].as_slice(),
                dir.heads[h].as_mut_slice(),
            );
        }
        dir
    }
}

/// Zeroes gradients of parameters that are not trained in this task.
fn mask(g: &mut Gradients, trainable: &Trainable, bias_on: bool) {
    for b in &mut g.blocks {
        for k in ParamKind::ALL {
            let on = if k == ParamKind::DeltaBias { bias_on } else { trainable.get(k) };
            if !on {
                b.get_mut(k).fill(0.0);
            }
        }
    }
}

/// Global L2 norm of every gradient slot.
pub fn grad_norm(g: &Gradients) -> f64 {
    let blocks = g
        .blocks
        .iter()
        .flat_map(|b| ParamKind::ALL.iter().flat_map(move |&k| b.get(k)));
    let heads = g.heads.iter().flat_map(|h| h.as_slice());
    blocks.chain(heads).map(|v| v * v).sum::<f64>().sqrt()
}

fn clip_global_norm(g: &mut Gradients, max_norm: f64) {
    let n = grad_norm(g);
    if n <= max_norm {
        return;
    }
    let s = max_norm / n;
    for b in &mut g.blocks {
        for k in ParamKind::ALL {
            b.get_mut(k).iter_mut().for_each(|v| *v *= s);
        }
    }
    for h in &mut g.heads {
        h.as_mut_slice().iter_mut().for_each(|v| *v *= s);
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub task: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Summary written at each task boundary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskRecord {
    pub task: usize,
    pub accuracies: Vec<f64>,
    pub avg_accuracy: f64,
    pub avg_forgetting: Option<f64>,
    pub old_task_losses: Vec<f64>,
    /// Null-space dimensions `[h1, h2, h3, h_out]` per block after this task.
    pub null_ranks: Vec<[usize; 4]>,
}

/// Everything needed to resume evaluation: model, heads, banks, projectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub backbone: Backbone,
    pub heads: Vec<Matrix>,
    /// Sorted global class ids per task, matching head columns.
    pub classes: Vec<Vec<usize>>,
    pub banks: Vec<CovarianceBank>,
    pub projectors: Option<Vec<ProjectorSet>>,
}

impl TrainState {
    pub fn new(dims: &ModelDims, seed: u64) -> Result<Self> {
        Ok(Self {
            backbone: Backbone::init(dims, seed)?,
            heads: Vec::new(),
            classes: Vec::new(),
            banks: (0..dims.n_blocks)
                .map(|_| CovarianceBank::new(dims.d_model, dims.d_delta))
                .collect(),
            projectors: None,
        })
    }

    /// Global class id of each concatenated logit.
    pub fn class_order(&self) -> Vec<usize> {
        self.classes.iter().flatten().copied().collect()
    }
}

/// Hooks called while a run progresses.
pub trait RunObserver {
    fn on_epoch(&mut self, _rec: &EpochRecord) -> Result<()> {
        Ok(())
    }
    fn on_task_end(&mut self, _rec: &TaskRecord, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

impl RunObserver for () {}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub acc: AccuracyMatrix,
    pub metrics: FinalMetrics,
    /// Row `j`: training loss of tasks `0..=j` after task `j`.
    pub loss_history: Vec<Vec<f64>>,
    pub epochs: Vec<EpochRecord>,
    pub tasks: Vec<TaskRecord>,
    pub state: TrainState,
}

fn sorted_classes(batch: &SequenceBatch) -> Vec<usize> {
    batch.labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
}

fn local_labels(batch: &SequenceBatch, classes: &[usize]) -> Result<Vec<usize>> {
    batch
        .labels
        .iter()
        .map(|l| {
            classes
                .binary_search(l)
                .map_err(|_| Error::config(format!("test label {l} never appears in its task's training split")))
        })
        .collect()
}

fn check_tasks(cfg: &TrainConfig, tasks: &[TaskSplit]) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::config("at least one task is required"));
    }
    let mut owner: BTreeMap<usize, usize> = BTreeMap::new();
    for (t, task) in tasks.iter().enumerate() {
        for (name, b) in [("train", &task.train), ("test", &task.test)] {
            if b.is_empty() {
                return Err(Error::config(format!("task {t} has an empty {name} split")));
            }
            if b.d_raw() != cfg.dims.d_raw {
                return Err(Error::config(format!(
                    "task {t} {name} samples have {} features, model expects d_raw = {}",
                    b.d_raw(),
                    cfg.dims.d_raw
                )));
            }
        }
        for c in sorted_classes(&task.train) {
            if let Some(prev) = owner.insert(c, t) {
                return Err(Error::config(format!(
                    "class {c} appears in both task {prev} and task {t}; label spaces must be disjoint"
                )));
            }
        }
    }
    Ok(())
}

/// Class-incremental accuracy (percent) of each test batch.
pub fn evaluate(backbone: &Backbone, heads: &[Matrix], class_order: &[usize], tests: &[&SequenceBatch]) -> Result<Vec<f64>> {
    tests
        .iter()
        .map(|batch| {
            let logits = model_forward(batch, backbone, heads)?;
            if logits.cols() != class_order.len() {
                return Err(Error::shape(format!(
                    "{} logits but {} known classes",
                    logits.cols(),
                    class_order.len()
                )));
            }
            let correct = (0..batch.len())
                .filter(|&m| {
                    let row = logits.row(m);
                    let mut best = 0;
                    for (k, v) in row.iter().enumerate() {
                        if *v > row[best] {
                            best = k;
                        }
                    }
                    class_order[best] == batch.labels[m]
                })
                .count();
            Ok(100.0 * correct as f64 / batch.len().max(1) as f64)
        })
        .collect()
}

/// Mean cross-entropy of `batch` under a single task head and local labels.
pub fn task_loss(backbone: &Backbone, head: &Matrix, classes: &[usize], batch: &SequenceBatch) -> Result<f64> {
    let logits = model_forward(batch, backbone, std::slice::from_ref(head))?;
    loss(&logits, &local_labels(batch, classes)?)
}

/// Relative Frobenius distance between two lists of same-shape outputs.
pub fn output_drift(before: &[Matrix], after: &[Matrix]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (a, b) in before.iter().zip(after) {
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            num += (x - y) * (x - y);
            den += x * x;
        }
    }
    (num / den.max(f64::MIN_POSITIVE)).sqrt()
}

/// Trains on every task in order.
pub fn run_task_sequence(cfg: &TrainConfig, tasks: &[TaskSplit]) -> Result<RunOutput> {
    run_task_sequence_observed(cfg, tasks, &mut ())
}

pub fn run_task_sequence_observed(cfg: &TrainConfig, tasks: &[TaskSplit], obs: &mut dyn RunObserver) -> Result<RunOutput> {
    cfg.validate()?;
    check_tasks(cfg, tasks)?;

    let mut state = TrainState::new(&cfg.dims, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SHUFFLE_STREAM);

    let mut acc = AccuracyMatrix::new();
    let mut loss_history = Vec::new();
    let mut epochs = Vec::new();
    let mut records = Vec::new();

    for (t, task) in tasks.iter().enumerate() {
        let classes = sorted_classes(&task.train);
        let train = SequenceBatch {
            x: task.train.x.clone(),
            labels: local_labels(&task.train, &classes)?,
        };
        state.heads.push(Matrix::zeros(cfg.dims.d_out, classes.len()));
        state.classes.push(classes);

        let bias_on = cfg.trainable.delta_bias && !(cfg.freeze_bias_after_first_task && t > 0);
        let mut adam: Option<Adam> = None;
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                let batch = train.select(chunk);
                let head = std::slice::from_ref(state.heads.last().unwrap());
                let (l, mut g) = backward(&batch, &state.backbone, head)?;
                if !l.is_finite() || !g.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss or gradient in task {t}, epoch {epoch}"
                    )));
                }
                total += l * chunk.len() as f64;
                mask(&mut g, &cfg.trainable, bias_on);
                if let Some(c) = cfg.grad_clip {
                    clip_global_norm(&mut g, c);
                }
                let projs = if t > 0 { state.projectors.as_deref() } else { None };
                let head = state.heads.last_mut().unwrap();
                match cfg.optimizer {
                    OptimizerMode::Plain => {
                        update_step(&mut state.backbone, head, &g, projs, cfg.lr, cfg.head_lr)?
                    }
                    OptimizerMode::Adaptive => {
                        let dir = adam.get_or_insert_with(|| Adam::new(&g)).direction(&g);
                        let mut dir = match projs {
                            Some(p) => crate::nullspace::project_gradients(p, &dir)?,
                            None => dir,
                        };
                        // Adam's ε makes frozen slots nonzero only if g was, so
                        // re-mask to keep them exactly fixed.
                        mask(&mut dir, &cfg.trainable, bias_on);
                        update_step(&mut state.backbone, head, &dir, None, cfg.lr, cfg.head_lr)?;
                    }
                }
            }
            let rec = EpochRecord {
                task: t,
                epoch,
                loss: total / train.len() as f64,
                lr: cfg.lr,
            };
            obs.on_epoch(&rec)?;
            epochs.push(rec);
        }

        if cfg.flags.any() {
            let (_, caps) = state.backbone.forward(&task.train.x, true)?;
            for (bank, cap) in state.banks.iter_mut().zip(caps.unwrap_or_default()) {
                bank.accumulate(&cap)?;
            }
            state.projectors = Some(
                state
                    .banks
                    .iter()
                    .map(|b| ProjectorSet::from_bank(b, cfg.eta, cfg.flags, cfg.rank_rule))
                    .collect::<Result<_>>()?,
            );
        }

        let tests: Vec<&SequenceBatch> = tasks[..=t].iter().map(|s| &s.test).collect();
        let row = evaluate(&state.backbone, &state.heads, &state.class_order(), &tests)?;
        acc.push_row(row.clone())?;
        let old: Vec<f64> = (0..=t)
            .map(|i| task_loss(&state.backbone, &state.heads[i], &state.classes[i], &tasks[i].train))
            .collect::<Result<_>>()?;
        if old.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite task loss after task {t}")));
        }
        let m = final_metrics(&acc)?;
        let rec = TaskRecord {
            task: t,
            accuracies: row,
            avg_accuracy: m.avg_accuracy,
            avg_forgetting: m.avg_forgetting,
            old_task_losses: old.clone(),
            null_ranks: state
                .projectors
                .as_ref()
                .map(|ps| ps.iter().map(|p| p.null_ranks).collect())
                .unwrap_or_default(),
        };
        obs.on_task_end(&rec, &state)?;
        records.push(rec);
        loss_history.push(old);
    }

    Ok(RunOutput {
        metrics: final_metrics(&acc)?,
        acc,
        loss_history,
        epochs,
        tasks: records,
        state,
    })
}

/// Zero gradient of the right shapes; handy for callers of [`update_step`].
pub fn zero_grads(backbone: &Backbone, head: &Matrix) -> Gradients {
    Gradients {
        blocks: backbone.blocks.iter().map(BlockGrads::zeros_like).collect(),
        heads: vec![Matrix::zeros(head.rows(), head.cols())],
    }
}
