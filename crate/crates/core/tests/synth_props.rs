use ttal_core::synth::{
    boundary_band, corrupt_prediction, gen_phantom, LabelNoise, Oracle, OracleConfig, PhantomSpec, Variability,
};
use ttal_core::{dice, Mask};

fn spec(variability: Variability) -> PhantomSpec {
    PhantomSpec { shape: [32, 32, 32], variability, ..PhantomSpec::default() }
}

#[test]
fn high_variability_spreads_structure_size() {
    let s = spec(Variability::High);
    let fractions: Vec<f64> = (0..20)
        .map(|seed| {
            let p = gen_phantom(&s, seed).unwrap();
            p.truth.count() as f64 / p.truth.geometry().len() as f64
        })
        .collect();
    let max = fractions.iter().cloned().fold(f64::MIN, f64::max);
    let min = fractions.iter().cloned().fold(f64::MAX, f64::min);
    assert!(max >= 3.0 * min, "fractions {fractions:?}");
}

#[test]
fn jittered_annotation_respects_band_bound() {
    for seed in 0..8 {
        let p = gen_phantom(&spec(Variability::Low), seed).unwrap();
        let mut oracle = Oracle::new(OracleConfig { label_noise: LabelNoise::BoundaryJitter { voxels: 1 }, seed });
        oracle.insert("case", p.truth.clone());
        let noisy = oracle.annotate("case").unwrap();
        let band = boundary_band(&p.truth, 1);
        let t = p.truth.count() as f64;
        let inner = p.truth.data().iter().zip(&band).filter(|(&v, &b)| v == 1 && b).count() as f64;
        let outer = p.truth.data().iter().zip(&band).filter(|(&v, &b)| v == 0 && b).count() as f64;
        let bound = 2.0 * (t - inner) / (2.0 * t - inner + outer);
        let d = dice(&noisy, &p.truth).unwrap();
        assert!(d >= bound && d < 1.0, "dice {d} bound {bound}");
        // flips confined to the band
        for ((&a, &b), &in_band) in noisy.data().iter().zip(p.truth.data()).zip(&band) {
            assert!(in_band || a == b);
        }
    }
}

#[test]
fn border_matches_slice_scan() {
    for seed in 0..10 {
        let p = gen_phantom(&spec(Variability::High), seed).unwrap();
        let [nz, ny, nx] = p.truth.shape();
        let occupied: Vec<usize> = (0..nz)
            .filter(|&z| (0..ny * nx).any(|i| p.truth.data()[z * ny * nx + i] == 1))
            .collect();
        let expected = (*occupied.first().unwrap(), *occupied.last().unwrap());
        let mut oracle = Oracle::new(OracleConfig::default());
        oracle.insert("c", p.truth.clone());
        assert_eq!(oracle.border_slices("c").unwrap(), Some(expected));
        assert_eq!(p.border, Some(expected));
    }
}

#[test]
fn unknown_case_is_an_error() {
    assert!(Oracle::new(OracleConfig::default()).annotate("missing").is_err());
}

fn corrupted_dice(truth: &Mask, severity: f64, seed: u64) -> f64 {
    dice(&corrupt_prediction(truth, severity, seed).unwrap().to_mask(), truth).unwrap()
}

#[test]
fn full_severity_destroys_overlap() {
    for seed in 0..10 {
        let p = gen_phantom(&spec(Variability::Low), seed).unwrap();
        assert_eq!(corrupt_prediction(&p.truth, 0.0, seed).unwrap().to_mask(), p.truth);
        let d = corrupted_dice(&p.truth, 1.0, seed);
        assert!(d < 0.5, "seed {seed}: dice {d}");
    }
}

#[test]
fn severity_is_monotone_in_expectation() {
    let truths: Vec<Mask> = (0..20).map(|s| gen_phantom(&spec(Variability::Low), s).unwrap().truth).collect();
    let mut previous = f64::INFINITY;
    for step in 0..=5 {
        let severity = step as f64 / 5.0;
        let mean = truths.iter().enumerate().map(|(i, t)| corrupted_dice(t, severity, 100 + i as u64)).sum::<f64>()
            / truths.len() as f64;
        assert!(mean <= previous, "severity {severity}: {mean} > {previous}");
        previous = mean;
    }
}
