use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ttal_core::toyseg::{
    fine_tune, sample_batch, train, FeatureStats, RestartSchedule, Sample, Sampling, Target, ToyModel, TrainCase,
    TrainConfig, NUM_FEATURES,
};
use ttal_core::synth::{gen_phantom, DomainShift, PhantomSpec};

fn random_batch(rng: &mut ChaCha8Rng, n: usize) -> Vec<Sample> {
    (0..n)
        .map(|_| {
            let mut x = [1.0; NUM_FEATURES];
            for v in x.iter_mut().take(NUM_FEATURES - 1) {
                *v = rng.random_range(-2.0..2.0);
            }
            Sample { x, y: rng.random_range(0.0..=1.0) }
        })
        .collect()
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let h = 1e-5;
    for _ in 0..20 {
        let batch = random_batch(&mut rng, 32);
        let mut model = ToyModel::zeros(FeatureStats::identity());
        for w in model.weights.iter_mut() {
            *w = rng.random_range(-1.5..1.5);
        }
        let (_, grad) = model.loss_and_grad(&batch);
        for k in 0..NUM_FEATURES {
            let mut plus = model.clone();
            plus.weights[k] += h;
            let mut minus = model.clone();
            minus.weights[k] -= h;
            let fd = (plus.loss(&batch) - minus.loss(&batch)) / (2.0 * h);
            let rel = (fd - grad[k]).abs() / grad[k].abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-4, "component {k}: analytic {} vs numeric {fd}", grad[k]);
        }
    }
}

fn phantom_cases(n: usize, shift: DomainShift, seed0: u64) -> Vec<TrainCase> {
    let spec = PhantomSpec { shape: [20, 20, 20], shift, ..PhantomSpec::default() };
    (0..n)
        .map(|i| {
            let p = gen_phantom(&spec, seed0 + i as u64).unwrap();
            TrainCase { case_id: format!("c{i}"), volume: p.volume, target: Target::Hard(p.truth) }
        })
        .collect()
}

#[test]
fn small_step_fine_tune_never_increases_loss() {
    let cases = phantom_cases(3, DomainShift::None, 10);
    let cfg = TrainConfig { samples_per_class: 64, ..TrainConfig::default() };
    let base = train(&cases, &cfg, 1).unwrap();
    let tiny = TrainConfig {
        schedule: RestartSchedule { eta_max: 1e-3, eta_min: 1e-4, t0: 10, t_mult: 1, total_cycles: 1 },
        samples_per_class: 64,
        batch_size: usize::MAX,
        sampling: Sampling::Fixed,
        ..TrainConfig::default()
    };
    let tuned = fine_tune(&base, &cases, &tiny, 5).unwrap();
    assert_eq!(tuned.loss_history.len(), 10);
    for pair in tuned.loss_history.windows(2) {
        assert!(pair[1] <= pair[0], "{:?}", tuned.loss_history);
    }
    assert_eq!(tuned.stats, base.stats);
}

#[test]
fn hard_targets_give_binary_cross_entropy() {
    let cases = phantom_cases(1, DomainShift::None, 3);
    let model = train(&cases, &TrainConfig { samples_per_class: 32, ..TrainConfig::default() }, 0).unwrap();
    let batch = sample_batch(&model, &cases, 16, 9).unwrap();
    for s in &batch {
        assert!(s.y == 0.0 || s.y == 1.0);
        let z: f64 = model.weights.iter().zip(&s.x).map(|(w, v)| w * v).sum();
        let p = 1.0 / (1.0 + (-z).exp());
        let expected = if s.y == 1.0 { -p.ln() } else { -(1.0 - p).ln() };
        assert!((model.loss(std::slice::from_ref(s)) - expected).abs() < 1e-9);
    }
}

#[test]
fn predictions_stay_inside_open_unit_interval() {
    let cases = phantom_cases(2, DomainShift::None, 30);
    let model = train(&cases, &TrainConfig { samples_per_class: 32, ..TrainConfig::default() }, 4).unwrap();
    let p = model.predict(&cases[0].volume);
    assert_eq!(p.geometry(), cases[0].volume.geometry());
    assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}
