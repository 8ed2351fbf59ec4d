use cgrow_core::data::DataConfig;
use cgrow_core::growth::GrowthOp;
use cgrow_core::trainer::{
    loss_continuity_check, lr_at, run_schedule, CheckpointKind, MemorySink, OptimizerConfig, Schedule, Stage,
    TrainOptions, CONTINUITY_TOL,
};
use cgrow_core::transformer::{FfnMode, ModelConfig};
use cgrow_core::Error;

fn small_model(ffn: FfnMode, pool_k: usize) -> ModelConfig {
    ModelConfig {
        layers: 1,
        d_model: 16,
        d_ff: 32,
        heads: 2,
        max_len: 32,
        vocab: 16,
        dropout: 0.1,
        ffn,
        pool_k,
        attn_scale: true,
    }
}

fn small_data() -> DataConfig {
    DataConfig {
        vocab: 16,
        corpus_size: 64,
        seq_len_full: 32,
        train_len: 32,
        masks_per_seq: 5,
        mask_token_id: 15,
        markov_order: 1,
        seed: 7,
    }
}

fn opt() -> OptimizerConfig {
    OptimizerConfig {
        peak_lr: 1e-2,
        ..OptimizerConfig::default()
    }
}

fn options() -> TrainOptions {
    TrainOptions {
        seed: 11,
        log_every: 5,
        heldout_size: 8,
    }
}

fn run(schedule: &Schedule, opt: &OptimizerConfig) -> (cgrow_core::trainer::RunSummary, MemorySink) {
    let mut sink = MemorySink::default();
    let summary = run_schedule(schedule, opt, &options(), &mut sink).unwrap();
    (summary, sink)
}

#[test]
fn unshare_boundary_keeps_loss() {
    let schedule = Schedule {
        model: small_model(FfnMode::Shared { k: 2 }, 1),
        data: small_data(),
        stages: vec![Stage::new(20, vec![], 4), Stage::new(5, vec![GrowthOp::UnshareFfn], 4)],
    };
    let (summary, _) = run(&schedule, &opt());
    let b = &summary.boundaries[0];
    assert!(b.expected_preserving);
    assert_eq!(b.pass, Some(true));
    assert!(b.diff <= CONTINUITY_TOL, "{}", b.diff);
}

#[test]
fn stack_boundary_is_report_only() {
    let schedule = Schedule {
        model: small_model(FfnMode::Full, 1),
        data: small_data(),
        stages: vec![
            Stage::new(10, vec![], 4),
            Stage::new(5, vec![GrowthOp::StackDepth { target_layers: 2 }], 4),
        ],
    };
    let (summary, sink) = run(&schedule, &opt());
    let b = &summary.boundaries[0];
    assert!(!b.expected_preserving);
    assert_eq!(b.pass, None);
    assert_eq!(summary.final_checkpoint.model.layers, 2);
    let kinds: Vec<CheckpointKind> = sink.checkpoints.iter().map(|(k, _)| *k).collect();
    assert_eq!(kinds, [CheckpointKind::PreGrowth, CheckpointKind::PostGrowth, CheckpointKind::Final]);
}

#[test]
fn empty_growth_boundary_is_exact() {
    let schedule = Schedule {
        model: small_model(FfnMode::Full, 1),
        data: small_data(),
        stages: vec![Stage::new(10, vec![], 4), Stage::new(5, vec![], 4)],
    };
    let (summary, sink) = run(&schedule, &opt());
    assert_eq!(summary.boundaries[0].diff, 0.0);
    let pre = &sink.checkpoints[0].1;
    let post = &sink.checkpoints[1].1;
    assert!(pre.params.bit_eq(&post.params));
}

#[test]
fn continuity_check_rejects_unrelated_checkpoints() {
    let schedule = Schedule {
        model: small_model(FfnMode::Full, 1),
        data: small_data(),
        stages: vec![Stage::new(4, vec![], 4), Stage::new(4, vec![], 4)],
    };
    let (summary, sink) = run(&schedule, &opt());
    let pre = &sink.checkpoints[0].1;
    let probe = cgrow_core::trainer::heldout_set(&pre.data, 2).unwrap();
    let err = loss_continuity_check(pre, &summary.final_checkpoint, &probe).unwrap_err();
    assert!(matches!(err, Error::Input(_)));
}

#[test]
fn same_seed_is_bit_identical() {
    let schedule = Schedule {
        model: small_model(FfnMode::Shared { k: 2 }, 2),
        data: small_data(),
        stages: vec![
            Stage::new(8, vec![], 4),
            Stage::new(8, vec![GrowthOp::UnshareFfn, GrowthOp::Unpool], 4),
        ],
    };
    let (a, sa) = run(&schedule, &opt());
    let (b, sb) = run(&schedule, &opt());
    assert!(a.final_checkpoint.params.bit_eq(&b.final_checkpoint.params));
    let bits = |rows: &[cgrow_core::trainer::LogRow]| rows.iter().map(|r| (r.step, r.loss.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&sa.rows), bits(&sb.rows));

    let mut other = options();
    other.seed += 1;
    let c = run_schedule(&schedule, &opt(), &other, &mut MemorySink::default()).unwrap();
    assert!(!a.final_checkpoint.params.bit_eq(&c.final_checkpoint.params));
}

#[test]
fn learning_rate_restarts_each_stage() {
    let o = OptimizerConfig {
        peak_lr: 1e-3,
        warmup: 2,
        ..OptimizerConfig::default()
    };
    let schedule = Schedule {
        model: small_model(FfnMode::Full, 1),
        data: small_data(),
        stages: vec![Stage::new(20, vec![], 2), Stage::new(20, vec![], 2)],
    };
    let mut sink = MemorySink::default();
    let train = TrainOptions {
        log_every: 1,
        ..options()
    };
    run_schedule(&schedule, &o, &train, &mut sink).unwrap();
    assert_eq!(sink.rows.len(), 40);
    for (i, row) in sink.rows.iter().enumerate() {
        let t = (i % 20) as u64 + 1;
        assert_eq!(row.lr, lr_at(t, 20, 2, 1e-3), "row {i}");
        assert_eq!(row.stage, i / 20);
    }
    assert_eq!(sink.rows[1].lr, 1e-3);
    assert_eq!(sink.rows[21].lr, 1e-3);
    assert_eq!(sink.rows[19].lr, 0.0);
}

#[test]
fn optimizer_state_follows_growth() {
    let o = OptimizerConfig {
        carry_moments: true,
        ..opt()
    };
    let schedule = Schedule {
        model: small_model(FfnMode::Shared { k: 2 }, 1),
        data: small_data(),
        stages: vec![
            Stage::new(4, vec![], 4),
            Stage::new(4, vec![GrowthOp::UnshareFfn], 4),
            Stage::new(4, vec![GrowthOp::StackDepth { target_layers: 2 }], 4),
        ],
    };
    let (summary, _) = run(&schedule, &o);
    assert_eq!(summary.final_checkpoint.model.ffn, FfnMode::Full);
    assert_eq!(summary.heldout_per_stage.len(), 3);
}

#[test]
fn loss_goes_down() {
    let schedule = Schedule {
        model: small_model(FfnMode::Full, 1),
        data: small_data(),
        stages: vec![Stage::new(150, vec![], 8)],
    };
    let (summary, _) = run(&schedule, &opt());
    assert!((summary.heldout_initial - 16f64.ln()).abs() < 0.2, "{}", summary.heldout_initial);
    assert!(
        summary.heldout_final() < summary.heldout_initial - 0.2,
        "{} -> {}",
        summary.heldout_initial,
        summary.heldout_final()
    );
}

#[test]
fn invalid_schedule_is_rejected_before_training() {
    let schedule = Schedule {
        model: small_model(FfnMode::Full, 1),
        data: small_data(),
        stages: vec![Stage::new(4, vec![GrowthOp::Unpool], 4)],
    };
    let err = run_schedule(&schedule, &opt(), &options(), &mut MemorySink::default()).unwrap_err();
    assert!(err.to_string().contains("schedule[0].ops"), "{err}");
}
