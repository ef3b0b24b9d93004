//! Fixtures shared by the benchmarks.

use ttal_core::synth::{gen_phantom, PhantomSpec};
use ttal_core::toyseg::{self, Target, ToyModel, TrainCase, TrainConfig};
use ttal_core::{Mask, Volume};

pub fn phantom(n: usize, seed: u64) -> (Volume, Mask) {
    let p = gen_phantom(&PhantomSpec { shape: [n, n, n], ..PhantomSpec::default() }, seed).expect("phantom");
    (p.volume, p.truth)
}

pub fn teacher(n: usize) -> ToyModel {
    let cases: Vec<TrainCase> = (0..3)
        .map(|i| {
            let (volume, truth) = phantom(n, 40 + i);
            TrainCase { case_id: format!("b{i}"), volume, target: Target::Hard(truth) }
        })
        .collect();
    toyseg::train(&cases, &TrainConfig::default(), 1).expect("training")
}
