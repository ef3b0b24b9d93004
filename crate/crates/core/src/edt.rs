//! Exact squared Euclidean distance transform with anisotropic spacing
//! (separable lower-envelope-of-parabolas algorithm of Felzenszwalb and
//! Huttenlocher).

/// One-dimensional pass: `out[q] = min_p (step * (q - p))^2 + f[p]`.
/// Infinite entries of `f` are not sites.
struct Envelope {
    sites: Vec<usize>,
    bounds: Vec<f64>,
}

impl Envelope {
    fn new() -> Self {
        Self { sites: Vec::new(), bounds: Vec::new() }
    }

    fn transform(&mut self, f: &[f64], step: f64, out: &mut [f64]) {
        let n = f.len();
        let h2 = step * step;
        self.sites.clear();
        self.bounds.clear();
        for q in 0..n {
            if !f[q].is_finite() {
                continue;
            }
            let fq = f[q] + h2 * (q * q) as f64;
            loop {
                let Some(&p) = self.sites.last() else {
                    self.sites.push(q);
                    self.bounds.push(f64::NEG_INFINITY);
                    break;
                };
                let fp = f[p] + h2 * (p * p) as f64;
                let s = (fq - fp) / (2.0 * h2 * (q - p) as f64);
                if s <= *self.bounds.last().unwrap() {
                    self.sites.pop();
                    self.bounds.pop();
                    continue;
                }
                self.sites.push(q);
                self.bounds.push(s);
                break;
            }
        }
        if self.sites.is_empty() {
            out.fill(f64::INFINITY);
            return;
        }
        let mut k = 0;
        for (q, o) in out.iter_mut().enumerate() {
            while k + 1 < self.sites.len() && self.bounds[k + 1] < q as f64 {
                k += 1;
            }
            let p = self.sites[k];
            let d = step * (q as f64 - p as f64);
            *o = d * d + f[p];
        }
    }
}

/// Squared distance (in mm²) from every voxel of a `(nz, ny, nx)` grid to the
/// nearest site. Voxels are sites where `is_site` is true. Returns all-infinity
/// when there are no sites.
pub fn squared_edt_3d(shape: [usize; 3], spacing: [f64; 3], is_site: &[bool]) -> Vec<f64> {
    let [nz, ny, nx] = shape;
    let mut d: Vec<f64> = is_site.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let mut env = Envelope::new();
    let longest = nz.max(ny).max(nx);
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];

    // x lines are contiguous
    for row in d.chunks_mut(nx) {
        line[..nx].copy_from_slice(row);
        env.transform(&line[..nx], spacing[2], &mut out[..nx]);
        row.copy_from_slice(&out[..nx]);
    }
    for z in 0..nz {
        for x in 0..nx {
            for y in 0..ny {
                line[y] = d[(z * ny + y) * nx + x];
            }
            env.transform(&line[..ny], spacing[1], &mut out[..ny]);
            for y in 0..ny {
                d[(z * ny + y) * nx + x] = out[y];
            }
        }
    }
    for y in 0..ny {
        for x in 0..nx {
            for z in 0..nz {
                line[z] = d[(z * ny + y) * nx + x];
            }
            env.transform(&line[..nz], spacing[0], &mut out[..nz]);
            for z in 0..nz {
                d[(z * ny + y) * nx + x] = out[z];
            }
        }
    }
    d
}

/// Two-dimensional variant over a `(ny, nx)` slice with in-plane spacing.
pub fn squared_edt_2d(shape: [usize; 2], spacing: [f64; 2], is_site: &[bool]) -> Vec<f64> {
    squared_edt_3d([1, shape[0], shape[1]], [1.0, spacing[0], spacing[1]], is_site)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(shape: [usize; 3], spacing: [f64; 3], sites: &[bool]) -> Vec<f64> {
        let [nz, ny, nx] = shape;
        let pts: Vec<[usize; 3]> = (0..sites.len())
            .filter(|&i| sites[i])
            .map(|i| [i / (ny * nx), (i / nx) % ny, i % nx])
            .collect();
        let mut out = Vec::new();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let best = pts
                        .iter()
                        .map(|p| {
                            let dz = (z as f64 - p[0] as f64) * spacing[0];
                            let dy = (y as f64 - p[1] as f64) * spacing[1];
                            let dx = (x as f64 - p[2] as f64) * spacing[2];
                            dz * dz + dy * dy + dx * dx
                        })
                        .fold(f64::INFINITY, f64::min);
                    out.push(best);
                }
            }
        }
        out
    }

    #[test]
    fn matches_brute_force_on_random_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let shape = [rng.random_range(1..7), rng.random_range(1..7), rng.random_range(1..7)];
            let spacing = [rng.random_range(0.3..3.0), rng.random_range(0.3..3.0), rng.random_range(0.3..3.0)];
            let n = shape.iter().product();
            let sites: Vec<bool> = (0..n).map(|_| rng.random_bool(0.15)).collect();
            let fast = squared_edt_3d(shape, spacing, &sites);
            let slow = brute(shape, spacing, &sites);
            for (a, b) in fast.iter().zip(&slow) {
                if b.is_infinite() {
                    assert!(a.is_infinite());
                } else {
                    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
                }
            }
        }
    }
}
