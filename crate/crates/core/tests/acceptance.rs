//! Acceptance criteria 1-10. Runs every criterion, prints one PASS/FAIL line
//! each and exits non-zero if any fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssmcl::benchgen::{BenchSpec, TaskSplit};
use ssmcl::cli::{cmd_train, ACCURACY_FILE, CHECKPOINT_FILE, METRICS_FILE};
use ssmcl::config::RunConfig;
use ssmcl::grad::{run_grad_check, GradFault, Gradients, DEFAULT_FD_STEP};
use ssmcl::linalg::{gram, matmul, Matrix};
use ssmcl::nullspace::{build_projector, CovarianceBank, ProjectorFlags, ProjectorSet, RankRule};
use ssmcl::ssm::{
    build_lti_kernel, causal_conv, discretize, selective_scan, Backbone, FeatureCapture, ModelDims,
    SequenceBatch,
};
use ssmcl::trainer::{
    final_metrics, output_drift, run_task_sequence, update_step, AccuracyMatrix, RunOutput, TrainConfig,
    Trainable,
};

#[derive(Clone)]
struct Verdict {
    passed: bool,
    detail: String,
}

impl Verdict {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// `rows×cols` matrix of rank `rank` (for generic random factors).
fn low_rank(rng: &mut ChaCha8Rng, rows: usize, cols: usize, rank: usize) -> Matrix {
    matmul(&rand_matrix(rng, rows, rank), &rand_matrix(rng, rank, cols)).unwrap()
}

fn rel(num: f64, den: f64) -> f64 {
    num / den.max(f64::MIN_POSITIVE)
}

fn max_asym(h: &Matrix) -> f64 {
    let n = h.rows();
    let mut m: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            m = m.max((h[(i, j)] - h[(j, i)]).abs());
        }
    }
    m
}

fn idempotence_error(h: &Matrix) -> f64 {
    matmul(h, h).unwrap().sub(h).unwrap().max_abs()
}

fn c1_gradient_oracle() -> Verdict {
    let cfg = RunConfig::default();
    let cases = match cfg.grad_check.cases() {
        Ok(c) => c,
        Err(e) => return Verdict::new(false, format!("bad grad-check config: {e}")),
    };
    let mut worst: f64 = 0.0;
    for case in &cases {
        match run_grad_check(case, DEFAULT_FD_STEP, GradFault::None) {
            Ok(o) => worst = worst.max(o.max_rel_error),
            Err(e) => return Verdict::new(false, format!("seed {}: {e}", case.seed)),
        }
    }
    let d = cases[0].dims;
    Verdict::new(
        cases.len() >= 5 && d.d_model <= 8 && d.d_state <= 4 && cases[0].seq_len <= 6 && worst <= 1e-4,
        format!("max relative error {worst:.2e} <= 1e-4 over {} seeds", cases.len()),
    )
}

fn c2_lti_equivalence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let (l, d, n) = (rng.gen_range(1..=12), rng.gen_range(1..=6), rng.gen_range(1..=4));
        let x = rand_matrix(&mut rng, l, d);
        let a = Matrix::from_fn(d, n, |_, _| -rng.gen_range(0.1..2.0));
        let delta_row: Vec<f64> = (0..d).map(|_| rng.gen_range(0.01..0.5)).collect();
        let b_row: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c_row: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let delta = Matrix::from_fn(l, d, |_, j| delta_row[j]);
        let b = Matrix::from_fn(l, n, |_, j| b_row[j]);
        let c = Matrix::from_fn(l, n, |_, j| c_row[j]);
        let (abar, bbar) = discretize(&delta, &a, &b).unwrap();
        let y_scan = selective_scan(&x, &abar, &bbar, &c).unwrap();

        let delta0 = Matrix::from_fn(1, d, |_, j| delta_row[j]);
        let b0 = Matrix::from_fn(1, n, |_, j| b_row[j]);
        let c0 = Matrix::from_fn(1, n, |_, j| c_row[j]);
        let (abar0, bbar0) = discretize(&delta0, &a, &b0).unwrap();
        let kernel = build_lti_kernel(&abar0, &bbar0, &c0, l).unwrap();
        let y_conv = causal_conv(&x, &kernel).unwrap();

        let err = rel(y_scan.sub(&y_conv).unwrap().frobenius_norm(), y_conv.frobenius_norm());
        worst = worst.max(err);
    }
    Verdict::new(worst <= 1e-10, format!("max relative error {worst:.2e} <= 1e-10 over 10 configs"))
}

fn c3_projector_algebra() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut asym, mut idem, mut leak): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut count = 0;
    for _ in 0..10 {
        let dim = rng.gen_range(3..=16);
        let rank = rng.gen_range(1..dim);
        let rows = rng.gen_range(rank..=3 * dim);
        let q = gram(&low_rank(&mut rng, rows, dim, rank));
        let h = build_projector(&q, 1.0).unwrap();
        asym = asym.max(max_asym(&h));
        idem = idem.max(idempotence_error(&h));
        leak = leak.max(rel(matmul(&q, &h).unwrap().frobenius_norm(), q.frobenius_norm()));
        count += 1;
    }
    // The four projectors of a bank built from captured features.
    for _ in 0..3 {
        let d = rng.gen_range(3..=10);
        let rows = 4 * d;
        let part = |rng: &mut ChaCha8Rng| {
            let rank = rng.gen_range(1..d);
            low_rank(rng, rows, d, rank)
        };
        let feats = FeatureCapture {
            x_feats: part(&mut rng),
            delta_feats: part(&mut rng),
            deltax_feats: part(&mut rng),
            y_feats: part(&mut rng),
        };
        let mut bank = CovarianceBank::new(d, d);
        bank.accumulate(&feats).unwrap();
        let set = ProjectorSet::from_bank(&bank, 1.0, ProjectorFlags::all(), RankRule::LShape).unwrap();
        for (q, h) in [(&bank.q1, &set.h1), (&bank.q2, &set.h2), (&bank.q3, &set.h3), (&bank.q_out, &set.h_out)] {
            asym = asym.max(max_asym(h));
            idem = idem.max(idempotence_error(h));
            leak = leak.max(rel(matmul(q, h).unwrap().frobenius_norm(), q.frobenius_norm()));
            count += 1;
        }
    }
    Verdict::new(
        asym <= 1e-10 && idem <= 1e-10 && leak <= 1e-9,
        format!(
            "{count} projectors: asymmetry {asym:.2e}, idempotence {idem:.2e} (<= 1e-10), ||QH||/||Q|| {leak:.2e} (<= 1e-9)"
        ),
    )
}

fn fill_random(rng: &mut ChaCha8Rng, g: &mut Gradients) {
    for b in &mut g.blocks {
        for m in [&mut b.a, &mut b.w_b, &mut b.w_c, &mut b.w_delta, &mut b.w_out] {
            m.as_mut_slice().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
        b.delta_bias.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }
    for h in &mut g.heads {
        h.as_mut_slice().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }
}

fn condition_ratio(feats: &Matrix, dw: &Matrix) -> f64 {
    rel(
        matmul(feats, dw).unwrap().frobenius_norm(),
        feats.frobenius_norm() * dw.frobenius_norm(),
    )
}

fn c4_condition_satisfaction() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = [0.0f64; 5];
    for seed in 0..5 {
        let d = 6 + seed as usize;
        let dims = ModelDims {
            d_raw: 5,
            d_model: d,
            d_state: 3,
            d_delta: d,
            d_out: 4,
            n_blocks: 1,
            gated: false,
        };
        let mut backbone = Backbone::init(&dims, seed).unwrap();
        let mut head = Matrix::zeros(dims.d_out, 3);
        let rows = 5 * d;
        let feats = FeatureCapture {
            x_feats: low_rank(&mut rng, rows, d, d / 2),
            delta_feats: low_rank(&mut rng, rows, d, d - 2),
            deltax_feats: low_rank(&mut rng, rows, d, d - 3),
            y_feats: low_rank(&mut rng, rows, d, d - 1),
        };
        let mut bank = CovarianceBank::new(d, d);
        bank.accumulate(&feats).unwrap();
        let projs = [ProjectorSet::from_bank(&bank, 1.0, ProjectorFlags::all(), RankRule::LShape).unwrap()];
        let before = backbone.blocks[0].clone();
        let mut g = Gradients::zeros_like(&backbone, std::slice::from_ref(&head));
        for _ in 0..5 {
            fill_random(&mut rng, &mut g);
            update_step(&mut backbone, &mut head, &g, Some(&projs), 0.1, 0.1).unwrap();
        }
        let after = &backbone.blocks[0];
        let dw = |a: &Matrix, b: &Matrix| a.sub(b).unwrap();
        let ratios = [
            condition_ratio(&feats.x_feats, &dw(&after.ssm.w_delta, &before.ssm.w_delta)),
            condition_ratio(&feats.x_feats, &dw(&after.ssm.w_c, &before.ssm.w_c)),
            condition_ratio(&feats.delta_feats, &dw(&after.ssm.a, &before.ssm.a)),
            condition_ratio(&feats.deltax_feats, &dw(&after.ssm.w_b, &before.ssm.w_b)),
            condition_ratio(&feats.y_feats, &dw(&after.w_out, &before.w_out)),
        ];
        for (w, r) in worst.iter_mut().zip(ratios) {
            *w = w.max(r);
        }
    }
    let max = worst.iter().copied().fold(0.0, f64::max);
    Verdict::new(
        max <= 1e-9,
        format!(
            "X*dW_delta {:.1e}, X*dW_C {:.1e}, delta*dA {:.1e}, (delta.X)*dW_B {:.1e}, Y*dW_out {:.1e} (<= 1e-9)",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    )
}

/// Default benchmark on `d_raw` features with every token mapped into a
/// 4-dimensional subspace that the embedding sends to zero in its first
/// three channels. Embedded features then have rank 4 < D and those
/// channels (and their SSM outputs) are identically zero.
fn rank_deficient_tasks(dims: &ModelDims, seed: u64) -> Vec<TaskSplit> {
    let spec = BenchSpec {
        tasks: 3,
        d_raw: dims.d_raw,
        ..BenchSpec::default()
    };
    let tasks = ssmcl::benchgen::generate(&spec).unwrap();
    let embed = &Backbone::init(dims, seed).unwrap().blocks[0].embed;

    let mut basis: Vec<Vec<f64>> = Vec::new();
    let orthogonalize = |v: &mut Vec<f64>, basis: &[Vec<f64>]| {
        for q in basis {
            let p: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= n);
    };
    for ch in 0..3 {
        let mut v = embed.column(ch);
        orthogonalize(&mut v, &basis);
        basis.push(v);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut sub = Vec::new();
    for _ in 0..4 {
        let mut v: Vec<f64> = (0..dims.d_raw).map(|_| rng.gen_range(-1.0..1.0)).collect();
        orthogonalize(&mut v, &basis);
        orthogonalize(&mut v, &sub);
        sub.push(v);
    }
    // x ↦ c·x·Sᵀ·S with S the 4×d_raw orthonormal subspace basis; c restores
    // the input scale lost by dropping d_raw − 4 directions.
    let s = Matrix::from_fn(4, dims.d_raw, |i, j| sub[i][j]);
    let proj = matmul(&s.transpose(), &s).unwrap().scale((dims.d_raw as f64 / 4.0).sqrt());
    let map = |b: &SequenceBatch| SequenceBatch {
        x: b.x.iter().map(|x| matmul(x, &proj).unwrap()).collect(),
        labels: b.labels.clone(),
    };
    tasks
        .iter()
        .map(|t| TaskSplit {
            train: map(&t.train),
            test: map(&t.test),
        })
        .collect()
}

fn spec_classes() -> usize {
    BenchSpec::default().classes_per_task
}

fn block_outputs(backbone: &Backbone, batch: &SequenceBatch) -> Vec<Matrix> {
    backbone.forward(&batch.x, false).unwrap().0
}

/// Criteria 5 and 7 share one run.
fn c5_c7_exact_consistency() -> (Verdict, Verdict) {
    let dims = ModelDims {
        d_raw: 16,
        d_model: 8,
        d_state: 4,
        d_delta: 8,
        d_out: 8,
        n_blocks: 1,
        gated: false,
    };
    let cfg = TrainConfig {
        trainable: Trainable {
            a: false,
            w_b: false,
            ..Trainable::default()
        },
        freeze_bias_after_first_task: true,
        dims,
        ..TrainConfig::default()
    };
    let tasks = rank_deficient_tasks(&dims, cfg.seed);
    let old = &tasks[0].train;

    let after_first = run_task_sequence(&cfg, &tasks[..1]).unwrap();
    let full: RunOutput = run_task_sequence(&cfg, &tasks).unwrap();
    let after_second = run_task_sequence(&cfg, &tasks[..2]).unwrap();
    let seq_cfg = TrainConfig {
        flags: ProjectorFlags::none(),
        ..cfg
    };
    let seq = run_task_sequence(&seq_cfg, &tasks[..2]).unwrap();

    let base = block_outputs(&after_first.state.backbone, old);
    let drift2 = output_drift(&base, &block_outputs(&after_second.state.backbone, old));
    let drift3 = output_drift(&base, &block_outputs(&full.state.backbone, old));
    let seq_drift = output_drift(&base, &block_outputs(&seq.state.backbone, old));
    let c5 = Verdict::new(
        drift2 <= 1e-8,
        format!(
            "task-1 output drift after task 2 {drift2:.2e} <= 1e-8 (after task 3 {drift3:.2e}; unprojected {seq_drift:.2e})"
        ),
    );

    let l0 = full.tasks[0].old_task_losses[0];
    let chance = (spec_classes() as f64).ln();
    let worst = full.tasks[1..]
        .iter()
        .map(|r| rel((r.old_task_losses[0] - l0).abs(), l0.abs()))
        .fold(0.0, f64::max);
    let seq_change = rel((seq.tasks[1].old_task_losses[0] - l0).abs(), l0.abs());
    let c7 = Verdict::new(
        worst <= 0.05,
        format!(
            "task-1 train loss {l0:.4} (chance {chance:.4}), max relative change {worst:.2e} <= 0.05 over {} boundaries (unprojected {seq_change:.2e})",
            full.tasks.len() - 1
        ),
    );
    (c5, c7)
}

fn fmt_forgetting(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |f| format!("{f:.3}"))
}

/// Criteria 6 and 8 on the default benchmark. The η = 1 member of the sweep
/// is the CL run of criterion 6.
fn c6_c8_benchmark() -> (Verdict, Duration, Verdict, Duration) {
    let cfg = RunConfig::default();
    let tasks = cfg.tasks().unwrap();
    let base = cfg.train_config(tasks[0].train.d_raw()).unwrap();

    let start = Instant::now();
    let seq = run_task_sequence(
        &TrainConfig {
            flags: ProjectorFlags::none(),
            ..base
        },
        &tasks,
    )
    .unwrap()
    .metrics;
    let seq_time = start.elapsed();

    let etas = cfg.sweep.etas.clone();
    let mut sweep = Vec::new();
    let mut cl_time = Duration::ZERO;
    let mut sweep_time = Duration::ZERO;
    for &eta in &etas {
        let t = Instant::now();
        let m = run_task_sequence(&TrainConfig { eta, ..base }, &tasks).unwrap().metrics;
        let dt = t.elapsed();
        if eta == 1.0 {
            cl_time = dt;
        }
        sweep_time += dt;
        sweep.push((eta, m));
    }

    let cl = sweep.iter().find(|(e, _)| *e == 1.0).map(|(_, m)| *m).unwrap();
    let (sf, cf) = (seq.avg_forgetting.unwrap(), cl.avg_forgetting.unwrap());
    let c6 = Verdict::new(
        cf <= 0.5 * sf && cl.avg_accuracy > seq.avg_accuracy,
        format!(
            "seq acc {:.2} fgt {sf:.3}; cl acc {:.2} fgt {cf:.3} (need fgt <= {:.3} and acc > {:.2})",
            seq.avg_accuracy,
            cl.avg_accuracy,
            0.5 * sf,
            seq.avg_accuracy
        ),
    );

    let f0 = sweep.iter().find(|(e, _)| *e == 0.0).and_then(|(_, m)| m.avg_forgetting).unwrap();
    let listing: Vec<String> = sweep
        .iter()
        .map(|(e, m)| format!("{e}:{:.2}/{}", m.avg_accuracy, fmt_forgetting(m.avg_forgetting)))
        .collect();
    let c8 = Verdict::new(
        cf <= f0,
        format!("fgt(eta=1) {cf:.3} <= fgt(eta=0) {f0:.3}; eta:acc/fgt {}", listing.join(" ")),
    );
    (c6, seq_time + cl_time, c8, sweep_time)
}

fn c9_metrics() -> Verdict {
    let cases: [(Vec<Vec<f64>>, f64, Option<f64>); 3] = [
        (vec![vec![100.0], vec![80.0, 90.0]], 85.0, Some(20.0)),
        (vec![vec![70.0], vec![70.0, 70.0], vec![70.0; 3]], 70.0, Some(0.0)),
        (vec![vec![60.0], vec![75.0, 90.0]], 82.5, Some(-15.0)),
    ];
    let mut ok = true;
    for (rows, acc, fgt) in cases {
        let m = final_metrics(&AccuracyMatrix::from_rows(rows).unwrap()).unwrap();
        ok &= m.avg_accuracy == acc && m.avg_forgetting == fgt;
    }
    Verdict::new(ok, "3 hand-computed matrices reproduced exactly (85/20, 70/0, 82.5/-15)")
}

fn c10_determinism() -> Verdict {
    let cfg = RunConfig::default();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        if let Err(e) = cmd_train(&cfg, d.path()) {
            return Verdict::new(false, format!("cmd_train failed: {e}"));
        }
    }
    let mut same = Vec::new();
    for name in [METRICS_FILE, ACCURACY_FILE, CHECKPOINT_FILE] {
        let a = std::fs::read(dirs[0].path().join(name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(name)).unwrap();
        same.push((name, !a.is_empty() && a == b));
    }
    let ok = same.iter().all(|(_, s)| *s);
    let listing: Vec<String> = same
        .iter()
        .map(|(n, s)| format!("{n} {}", if *s { "identical" } else { "DIFFERS" }))
        .collect();
    Verdict::new(ok, listing.join(", "))
}

fn report(n: usize, name: &str, v: Verdict, took: Duration, budget: Duration, failures: &mut usize) {
    let in_time = took <= budget;
    let passed = v.passed && in_time;
    if !passed {
        *failures += 1;
    }
    println!(
        "criterion {n:>2} {} {name}: {} [{:.1}s, budget {}s{}]",
        if passed { "PASS" } else { "FAIL" },
        v.detail,
        took.as_secs_f64(),
        budget.as_secs(),
        if in_time { "" } else { ", over budget" }
    );
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let out = f();
    (out, t.elapsed())
}

/// Criteria named on the command line (all when none are).
fn selected() -> Vec<usize> {
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    if picked.is_empty() {
        (1..=10).collect()
    } else {
        picked
    }
}

fn main() {
    let secs = Duration::from_secs;
    let want = selected();
    let on = |n: usize| want.contains(&n);
    let mut failures = 0;

    if on(1) {
        let (v, t) = timed(c1_gradient_oracle);
        report(1, "gradient oracle", v, t, secs(30), &mut failures);
    }
    if on(2) {
        let (v, t) = timed(c2_lti_equivalence);
        report(2, "LTI equivalence", v, t, secs(5), &mut failures);
    }
    if on(3) {
        let (v, t) = timed(c3_projector_algebra);
        report(3, "projector algebra", v, t, secs(5), &mut failures);
    }
    if on(4) {
        let (v, t) = timed(c4_condition_satisfaction);
        report(4, "condition satisfaction", v, t, secs(30), &mut failures);
    }
    let exact = (on(5) || on(7)).then(|| timed(c5_c7_exact_consistency));
    let bench = (on(6) || on(8)).then(c6_c8_benchmark);
    if let Some(((c5, _), t)) = &exact {
        if on(5) {
            report(5, "exact output consistency", c5.clone(), *t, secs(120), &mut failures);
        }
    }
    if let Some((c6, t6, _, _)) = &bench {
        if on(6) {
            report(6, "anti-forgetting direction", c6.clone(), *t6, secs(20 * 60), &mut failures);
        }
    }
    if let Some(((_, c7), t)) = &exact {
        if on(7) {
            report(7, "old-task loss stability", c7.clone(), *t, secs(120), &mut failures);
        }
    }
    if let Some((_, _, c8, t8)) = &bench {
        if on(8) {
            report(8, "eta sweep direction", c8.clone(), *t8, secs(30 * 60), &mut failures);
        }
    }
    if on(9) {
        let (v, t) = timed(c9_metrics);
        report(9, "metrics formulas", v, t, secs(1), &mut failures);
    }
    if on(10) {
        let (v, t) = timed(c10_determinism);
        report(10, "determinism", v, t, secs(10 * 60), &mut failures);
    }

    println!("{} of {} criteria passed", want.len() - failures, want.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
