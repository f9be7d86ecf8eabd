//! Fine-tuning loop behavior on small problems.

use multistyle::checkpoint::bundled_base;
use multistyle::inversion::InversionConfig;
use multistyle::model::{BaseConfig, BaseModel};
use multistyle::synthetic::style_references;
use multistyle::trainer::{
    finetune, moving_average, prepare, read_metrics, snapshot_path, TrainConfig, TrainingState, METRICS_FILE,
};
use multistyle::{Exec, Image, ParamTree};

fn quick_inversion() -> InversionConfig {
    InversionConfig {
        steps: 20,
        mean_samples: 32,
        ..Default::default()
    }
}

fn micro_setup(n: usize, cfg: &TrainConfig) -> TrainingState<f32> {
    let base = BaseModel::<f32>::init(&BaseConfig::micro(), 4).unwrap();
    let refs = style_references(&base, n, 1).unwrap();
    prepare(&base, &refs, cfg).unwrap()
}

fn micro_cfg(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        inversion: quick_inversion(),
        ..Default::default()
    }
}

#[test]
fn frozen_bank_stays_bit_identical() {
    let mut s = micro_setup(3, &TrainConfig { stn_lr: 0.0, ..micro_cfg(15) });
    let before = s.bank.clone();
    let g0 = s.generator.flat_values();
    for _ in 0..15 {
        s.train_step().unwrap();
    }
    assert_eq!(s.bank, before);
    assert_ne!(s.generator.flat_values(), g0);
}

#[test]
fn frozen_generator_stays_bit_identical() {
    let mut s = micro_setup(2, &TrainConfig { generator_lr: 0.0, ..micro_cfg(10) });
    let g0 = s.generator.clone();
    for _ in 0..10 {
        s.train_step().unwrap();
    }
    assert_eq!(s.generator, g0);
    assert!(s.bank.stns().iter().all(|t| !t.is_identity()));
}

#[test]
fn step_zero_is_transparent() {
    let s = micro_setup(3, &micro_cfg(1));
    let model = s.model();
    for (k, r) in s.mixed_codes(0).unwrap().iter().enumerate() {
        let styled = model.synthesize(r, k).unwrap();
        let plain = s.base.generator.synthesize(r).unwrap();
        assert_eq!(styled.max_abs_diff(&plain), 0.0, "style {k}");
    }
}

#[test]
fn one_reference_is_single_style_training() {
    let s = micro_setup(1, &micro_cfg(1));
    assert_eq!(s.bank.len(), 1);
    assert_eq!(s.model().names(), ["hue"]);
}

#[test]
fn distinct_references_invert_to_distinct_codes() {
    let s = micro_setup(4, &micro_cfg(1));
    for a in 0..4 {
        for b in a + 1..4 {
            assert!(s.reference_codes[a].distance(&s.reference_codes[b]) > 0.0);
        }
    }
}

#[test]
fn replay_is_deterministic_across_execution_modes() {
    let run = |exec: Exec| {
        let cfg = TrainConfig { exec, ..micro_cfg(12) };
        let mut s = micro_setup(5, &cfg);
        for _ in 0..12 {
            s.train_step().unwrap();
        }
        s.fingerprint()
    };
    let a = run(Exec::Sequential);
    assert_eq!(a, run(Exec::Sequential));
    assert_eq!(a, run(Exec::Parallel));
}

#[test]
fn training_past_the_budget_is_an_error() {
    let mut s = micro_setup(1, &micro_cfg(1));
    s.train_step().unwrap();
    assert!(s.train_step().is_err());
}

#[test]
fn zero_iterations_leave_the_base_behavior() {
    let base = bundled_base().unwrap();
    let refs = style_references(&base, 2, 3).unwrap();
    let out = finetune(&base, &refs, &micro_cfg(0), None).unwrap();
    assert!(out.log.is_empty());
    let s = multistyle::inversion::sample_code(&base.mapping, &base.styler, 5).unwrap();
    let plain = base.generator.synthesize(&s).unwrap();
    for k in 0..2 {
        assert_eq!(out.model.synthesize(&s, k).unwrap().max_abs_diff(&plain), 0.0);
    }
}

#[test]
fn two_styles_reduce_the_loss_over_200_steps() {
    let base = bundled_base().unwrap();
    let refs = style_references(&base, 2, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        iterations: 200,
        snapshot_every: 100,
        ..Default::default()
    };
    let out = finetune(&base, &refs, &cfg, Some(dir.path())).unwrap();
    let avg = moving_average(&out.log, 10);
    assert!(avg[avg.len() - 1] < avg[9], "{} !< {}", avg[avg.len() - 1], avg[9]);

    let logged = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(logged.len(), 200);
    for (a, b) in logged.iter().zip(&out.log) {
        assert_eq!(a.step, b.step);
        assert!((a.terms.total - b.terms.total).abs() < 1e-5);
    }
    assert!(snapshot_path(dir.path(), 100).exists());
    let reloaded = multistyle::checkpoint::load_model(dir.path().join("model.msgan")).unwrap();
    let s = multistyle::inversion::sample_code(&base.mapping, &base.styler, 0).unwrap();
    let a: Image = reloaded.synthesize(&s, 1).unwrap();
    assert_eq!(a.max_abs_diff(&out.model.synthesize(&s, 1).unwrap()), 0.0);
}
