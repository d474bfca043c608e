use ssmcl::benchgen::{generate, BenchSpec};
use ssmcl::nullspace::ProjectorFlags;
use ssmcl::trainer::{evaluate, output_drift, run_task_sequence, TrainConfig};

#[test]
fn projection_limits_old_task_drift() {
    // First two tasks of the default benchmark, default schedule, every
    // parameter trainable.
    let spec = BenchSpec {
        tasks: 2,
        ..BenchSpec::default()
    };
    let tasks = generate(&spec).unwrap();
    let cfg = TrainConfig::default();
    let seq_cfg = TrainConfig {
        flags: ProjectorFlags::none(),
        ..cfg
    };
    let first = run_task_sequence(&cfg, &tasks[..1]).unwrap().state.backbone;
    let old = &tasks[0].train.x;
    let base = first.forward(old, false).unwrap().0;
    let drift = |c: &TrainConfig| {
        let bb = run_task_sequence(c, &tasks).unwrap().state.backbone;
        output_drift(&base, &bb.forward(old, false).unwrap().0)
    };
    let (cl, seq) = (drift(&cfg), drift(&seq_cfg));
    assert!(seq > 0.0);
    assert!(cl <= 0.1 * seq, "projected drift {cl:.3e} vs unprojected {seq:.3e}");
}

#[test]
fn single_task_fits_training_data() {
    let spec = BenchSpec {
        tasks: 1,
        ..BenchSpec::default()
    };
    assert!(spec.noise_scale <= 0.1 * spec.template_scale);
    let tasks = generate(&spec).unwrap();
    let out = run_task_sequence(&TrainConfig::default(), &tasks).unwrap();
    let s = &out.state;
    let train_acc = evaluate(&s.backbone, &s.heads, &s.class_order(), &[&tasks[0].train]).unwrap()[0];
    assert!(train_acc >= 95.0, "train accuracy {train_acc}");
}
