//! Brute-force reference implementations, independent of the library's
//! distance-transform path.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ttal_core::{Geometry, Mask};

pub fn random_mask(rng: &mut ChaCha8Rng, max: usize) -> (Mask, Mask) {
    let shape = [rng.random_range(1..=max), rng.random_range(1..=max), rng.random_range(1..=max)];
    let spacing = [rng.random_range(0.4..3.5), rng.random_range(0.4..3.5), rng.random_range(0.4..3.5)];
    let g = Geometry::new(shape, spacing).unwrap();
    let pa = rng.random_range(0.1..0.7);
    let pb = rng.random_range(0.1..0.7);
    let a = Mask::new(g, (0..g.len()).map(|_| u8::from(rng.random_bool(pa))).collect()).unwrap();
    let b = Mask::new(g, (0..g.len()).map(|_| u8::from(rng.random_bool(pb))).collect()).unwrap();
    (a, b)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn on(m: &Mask, z: isize, y: isize, x: isize) -> bool {
    let [nz, ny, nx] = m.shape();
    z >= 0 && y >= 0 && x >= 0 && (z as usize) < nz && (y as usize) < ny && (x as usize) < nx
        && m.is_set(z as usize, y as usize, x as usize)
}

pub fn naive_surface_3d(m: &Mask) -> Vec<[usize; 3]> {
    let [nz, ny, nx] = m.shape();
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !m.is_set(z, y, x) {
                    continue;
                }
                let (zi, yi, xi) = (z as isize, y as isize, x as isize);
                let nbrs = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)];
                if nbrs.iter().any(|(dz, dy, dx)| !on(m, zi + dz, yi + dy, xi + dx)) {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

pub fn naive_surface_2d(m: &Mask, z: usize) -> Vec<[usize; 2]> {
    let [_, ny, nx] = m.shape();
    let mut out = Vec::new();
    for y in 0..ny {
        for x in 0..nx {
            if !m.is_set(z, y, x) {
                continue;
            }
            let (zi, yi, xi) = (z as isize, y as isize, x as isize);
            let nbrs = [(-1, 0), (1, 0), (0, -1), (0, 1)];
            if nbrs.iter().any(|(dy, dx)| !on(m, zi, yi + dy, xi + dx)) {
                out.push([y, x]);
            }
        }
    }
    out
}

pub fn brute_dice(a: &Mask, b: &Mask) -> f64 {
    let inter = a.data().iter().zip(b.data()).filter(|(x, y)| **x == 1 && **y == 1).count();
    let total = a.count() + b.count();
    if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 }
}

fn dist3(s: [f64; 3], p: [usize; 3], q: [usize; 3]) -> f64 {
    (0..3).map(|k| ((p[k] as f64 - q[k] as f64) * s[k]).powi(2)).sum::<f64>().sqrt()
}

fn min_dist3(s: [f64; 3], p: [usize; 3], set: &[[usize; 3]]) -> f64 {
    set.iter().map(|&q| dist3(s, p, q)).fold(f64::INFINITY, f64::min)
}

pub fn brute_hd95(a: &Mask, b: &Mask) -> Option<f64> {
    let sa = naive_surface_3d(a);
    let sb = naive_surface_3d(b);
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    let s = a.spacing_mm();
    let mut all: Vec<f64> = sa.iter().map(|&p| min_dist3(s, p, &sb)).collect();
    all.extend(sb.iter().map(|&p| min_dist3(s, p, &sa)));
    all.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let rank = ((0.95 * all.len() as f64) - 1e-9).ceil() as usize;
    Some(all[rank.max(1) - 1])
}

pub fn brute_assd2d(a: &Mask, b: &Mask) -> Option<f64> {
    let s = a.spacing_mm();
    let d2 = |p: [usize; 2], q: [usize; 2]| {
        (((p[0] as f64 - q[0] as f64) * s[1]).powi(2) + ((p[1] as f64 - q[1] as f64) * s[2]).powi(2)).sqrt()
    };
    let mut per_slice = Vec::new();
    for z in 0..a.shape()[0] {
        let sa = naive_surface_2d(a, z);
        let sb = naive_surface_2d(b, z);
        if sa.is_empty() || sb.is_empty() {
            continue;
        }
        let mut total = 0.0;
        for &p in &sa {
            total += sb.iter().map(|&q| d2(p, q)).fold(f64::INFINITY, f64::min);
        }
        for &p in &sb {
            total += sa.iter().map(|&q| d2(p, q)).fold(f64::INFINITY, f64::min);
        }
        per_slice.push(total / (sa.len() + sb.len()) as f64);
    }
    if per_slice.is_empty() {
        None
    } else {
        Some(per_slice.iter().sum::<f64>() / per_slice.len() as f64)
    }
}
