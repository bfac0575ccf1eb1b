use tsnode::metrics::evaluate;
use tsnode::systems::{make_dataset, SystemSpec};
use tsnode::tsnode::{train, TrainConfig, Trainer, Variant};
use tsnode::{Dataset, NetworkParams, TrainerState};

fn small_lk() -> Dataset {
    let spec = SystemSpec { n_steps: 300, horizon: 3.0, ..SystemSpec::lotka_volterra() };
    make_dataset(&spec, 5).unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        iterations: 120,
        warmup: 40,
        eval_every: 40,
        hidden: vec![16],
        label_batch: 16,
        pseudo_batch: 24,
        eta_t: 0.01,
        seed: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn training_beats_the_untrained_network() {
    let ds = small_lk();
    let cfg = small_config();
    let untrained = Trainer::new(Variant::Tsnode, cfg.clone(), &ds).unwrap();
    let before = evaluate(untrained.reported_model(), &ds, 0);
    let out = train(Variant::Tsnode, &cfg, &ds).unwrap();
    let after = out.history.last().unwrap();
    assert_eq!(out.history.len(), 3);
    assert_eq!(out.skipped, 0);
    assert!(after.local_error < before.local_error, "{} vs {}", after.local_error, before.local_error);
}

#[test]
fn interrupted_run_resumes_to_the_same_result() {
    let ds = small_lk();
    let cfg = small_config();
    let straight = train(Variant::Tsnode, &cfg, &ds).unwrap();

    let mut t = Trainer::new(Variant::Tsnode, cfg, &ds).unwrap();
    for _ in 0..57 {
        t.step().unwrap();
    }
    let saved = serde_json::to_string(&t.checkpoint()).unwrap();
    drop(t);
    let state: TrainerState = serde_json::from_str(&saved).unwrap();
    let resumed = Trainer::resume(state, &ds).unwrap().run().unwrap();

    assert_eq!(resumed.teacher, straight.teacher);
    assert_eq!(resumed.student, straight.student);
    assert_eq!(resumed.history, straight.history);
}

#[test]
fn saved_models_reload_exactly() {
    let ds = small_lk();
    let out = train(Variant::Baseline, &TrainConfig { iterations: 20, warmup: 5, eval_every: 10, ..small_config() }, &ds).unwrap();
    let back = NetworkParams::from_json(&out.teacher.to_json()).unwrap();
    assert_eq!(back, out.teacher);
    assert_eq!(evaluate(&back, &ds, 20), *out.history.last().unwrap());
}

#[test]
fn every_variant_trains() {
    let ds = small_lk();
    let cfg = TrainConfig { iterations: 50, ..small_config() };
    for v in Variant::ALL {
        let out = train(v, &cfg, &ds).unwrap();
        assert!(out.reported().flatten().iter().all(|p| p.is_finite()), "{v:?}");
        assert_eq!(out.student.is_some(), v.uses_student(), "{v:?}");
    }
}
