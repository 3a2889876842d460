//! Rotation matrices acting on spherical-harmonic components.
//!
//! For each degree L the three angular-momentum generators are extracted once
//! from the action of the rotation vector fields (y dz - z dy, etc.) on the
//! degree-L solid harmonics, written in the monomial basis. A rotation is then
//! D(R) = exp(theta * (n . G)) from the axis-angle form of R, which makes
//! Y(R u) = D(R) Y(u) hold by construction.

use crate::error::{Error, Result};
use crate::geomops::RotationMatrix;
use crate::irreps::sh::{sh_eval, MAX_DEGREE};
use nalgebra::DMatrix;
use rand::SeedableRng;
use std::sync::{Mutex, OnceLock};

/// Validated rotation action on degree-`l` components, row-major (2l+1)^2.
#[derive(Debug, Clone, PartialEq)]
pub struct WignerD {
    l: usize,
    d: Vec<f64>,
}

impl WignerD {
    fn new(l: usize, d: Vec<f64>) -> Result<Self> {
        let n = 2 * l + 1;
        debug_assert_eq!(d.len(), n * n);
        let mut dev: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let mut dot = 0.0;
                for k in 0..n {
                    dot += d[i * n + k] * d[j * n + k];
                }
                let target = if i == j { 1.0 } else { 0.0 };
                dev = dev.max((dot - target).abs());
            }
        }
        if dev > 1e-9 {
            return Err(Error::Irreps(format!(
                "degree-{l} rotation block deviates from orthogonality by {dev:.3e}"
            )));
        }
        Ok(WignerD { l, d })
    }

    pub fn degree(&self) -> usize {
        self.l
    }

    pub fn dim(&self) -> usize {
        2 * self.l + 1
    }

    pub fn entry(&self, row: usize, col: usize) -> f64 {
        self.d[row * self.dim() + col]
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(v.len(), n, "component count must be 2l+1");
        let mut out = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += self.d[i * n + j] * v[j];
            }
            out[i] = acc;
        }
        out
    }

    pub fn compose(&self, other: &WignerD) -> WignerD {
        assert_eq!(self.l, other.l);
        let n = self.dim();
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += self.d[i * n + k] * other.d[k * n + j];
                }
                d[i * n + j] = acc;
            }
        }
        WignerD { l: self.l, d }
    }
}

/// Rotation action for degree `l`: Y^(l)(R u) = wigner_d(l, R) Y^(l)(u).
pub fn wigner_d(l: usize, r: &RotationMatrix) -> Result<WignerD> {
    if l > MAX_DEGREE {
        return Err(Error::Irreps(format!(
            "degree {l} exceeds supported maximum {MAX_DEGREE}"
        )));
    }
    if l == 0 {
        return WignerD::new(0, vec![1.0]);
    }
    let gens = generators(l)?;
    let (axis, angle) = r.to_axis_angle();
    let n = 2 * l + 1;
    let mut a = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = angle
                * (axis[0] * gens[0][(i, j)] + axis[1] * gens[1][(i, j)] + axis[2] * gens[2][(i, j)]);
        }
    }
    let e = expm(&a);
    WignerD::new(l, e.as_slice().to_vec().chunks(n).enumerate().fold(
        vec![0.0; n * n],
        |mut acc, (col, chunk)| {
            // nalgebra stores column-major; transpose into row-major.
            for (row, v) in chunk.iter().enumerate() {
                acc[row * n + col] = *v;
            }
            acc
        },
    ))
}

/// Matrix exponential by scaling-and-squaring with a Taylor core.
fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm = a.iter().map(|v| v.abs()).fold(0.0f64, f64::max) * n as f64;
    let squarings = if norm > 0.25 { (norm / 0.25).log2().ceil() as u32 } else { 0 };
    let scaled = a / 2f64.powi(squarings as i32);
    let mut term = DMatrix::<f64>::identity(n, n);
    let mut sum = DMatrix::<f64>::identity(n, n);
    for k in 1..=20 {
        term = (&term * &scaled) / k as f64;
        sum += &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

type Generators = [DMatrix<f64>; 3];

fn generator_cache() -> &'static Mutex<Vec<Option<Generators>>> {
    static CACHE: OnceLock<Mutex<Vec<Option<Generators>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new((0..=MAX_DEGREE).map(|_| None).collect()))
}

fn generators(l: usize) -> Result<Generators> {
    let mut cache = generator_cache().lock().expect("generator cache poisoned");
    if cache[l].is_none() {
        cache[l] = Some(build_generators(l)?);
    }
    Ok(cache[l].as_ref().expect("just built").clone())
}

/// Degree-l monomials x^a y^b z^c with a+b+c = l, in a fixed order.
fn monomials(l: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for a in (0..=l).rev() {
        for b in (0..=(l - a)).rev() {
            out.push((a, b, l - a - b));
        }
    }
    out
}

fn build_generators(l: usize) -> Result<Generators> {
    let monos = monomials(l);
    let nm = monos.len();
    let dim = 2 * l + 1;
    let samples = 4 * nm;

    // Deterministic, well-spread directions.
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(0x5048_4152_4d53);
    let dirs: Vec<[f64; 3]> = (0..samples)
        .map(|_| {
            loop {
                let v: [f64; 3] = [
                    rand::Rng::sample(&mut rng, rand_distr::StandardNormal),
                    rand::Rng::sample(&mut rng, rand_distr::StandardNormal),
                    rand::Rng::sample(&mut rng, rand_distr::StandardNormal),
                ];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if n > 1e-2 {
                    return [v[0] / n, v[1] / n, v[2] / n];
                }
            }
        })
        .collect();

    // Monomial values at the sample points.
    let vmat = DMatrix::<f64>::from_fn(samples, nm, |r, c| {
        let (a, b, cz) = monos[c];
        dirs[r][0].powi(a as i32) * dirs[r][1].powi(b as i32) * dirs[r][2].powi(cz as i32)
    });
    // Harmonic values at the same points, one column per m.
    let ymat = {
        let mut m = DMatrix::<f64>::zeros(samples, dim);
        for (r, dir) in dirs.iter().enumerate() {
            let y = sh_eval(l, *dir)?;
            for c in 0..dim {
                m[(r, c)] = y[c];
            }
        }
        m
    };

    let lsq = |a: &DMatrix<f64>, b: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        a.clone()
            .svd(true, true)
            .solve(b, 1e-12)
            .map_err(|e| Error::Irreps(format!("least-squares failure: {e}")))
    };

    // Monomial coefficients of each harmonic: vmat * coeff = ymat.
    let coeff = lsq(&vmat, &ymat)?; // nm x dim

    // Rotation vector fields acting on a monomial coefficient vector.
    let mono_index: std::collections::HashMap<(usize, usize, usize), usize> =
        monos.iter().copied().enumerate().map(|(i, m)| (m, i)).collect();
    let apply_field = |coeffs: &DMatrix<f64>, field: usize| -> DMatrix<f64> {
        let mut out = DMatrix::<f64>::zeros(nm, dim);
        for col in 0..dim {
            for (i, &(a, b, c)) in monos.iter().enumerate() {
                let v = coeffs[(i, col)];
                if v == 0.0 {
                    continue;
                }
                // G_x = y dz - z dy; G_y = z dx - x dz; G_z = x dy - y dx.
                let terms: [(i64, (i64, i64, i64)); 2] = match field {
                    0 => [
                        (c as i64, (a as i64, b as i64 + 1, c as i64 - 1)),
                        (-(b as i64), (a as i64, b as i64 - 1, c as i64 + 1)),
                    ],
                    1 => [
                        (a as i64, (a as i64 - 1, b as i64, c as i64 + 1)),
                        (-(c as i64), (a as i64 + 1, b as i64, c as i64 - 1)),
                    ],
                    _ => [
                        (b as i64, (a as i64 + 1, b as i64 - 1, c as i64)),
                        (-(a as i64), (a as i64 - 1, b as i64 + 1, c as i64)),
                    ],
                };
                for (factor, (na, nb, nc)) in terms {
                    if factor == 0 || na < 0 || nb < 0 || nc < 0 {
                        continue;
                    }
                    let idx = mono_index[&(na as usize, nb as usize, nc as usize)];
                    out[(idx, col)] += factor as f64 * v;
                }
            }
        }
        out
    };

    let mut gens = Vec::with_capacity(3);
    for field in 0..3 {
        let rotated = apply_field(&coeff, field);
        // Express each rotated harmonic in the harmonic basis.
        let a = lsq(&coeff, &rotated)?; // dim x dim, columns are expansions
        // d/dtheta Y_j(R u) = sum_m a[m, j] Y_m(R u), so the generator with
        // D = exp(theta G) is the transpose, projected onto antisymmetry.
        let mut g = DMatrix::<f64>::zeros(dim, dim);
        for i in 0..dim {
            for j in 0..dim {
                g[(i, j)] = 0.5 * (a[(j, i)] - a[(i, j)]);
            }
        }
        let sym_dev = (0..dim)
            .flat_map(|i| (0..dim).map(move |j| (i, j)))
            .map(|(i, j)| (a[(j, i)] + a[(i, j)]).abs())
            .fold(0.0f64, f64::max);
        if sym_dev > 1e-8 {
            return Err(Error::Irreps(format!(
                "degree-{l} generator failed antisymmetry check ({sym_dev:.3e})"
            )));
        }
        // Every entry is +-sqrt(k/8) for a small integer k (ladder
        // coefficients); snap away the fit noise when a value is clearly
        // of that form.
        for v in g.iter_mut() {
            let k = (8.0 * *v * *v).round();
            let snapped = v.signum() * (k / 8.0).sqrt();
            if (snapped - *v).abs() < 1e-6 {
                *v = snapped;
            }
        }
        gens.push(g);
    }
    Ok([gens.remove(0), gens.remove(0), gens.remove(0)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn random_unit(rng: &mut ChaCha20Rng) -> [f64; 3] {
        loop {
            let v: [f64; 3] = [
                rand::Rng::sample(rng, rand_distr::StandardNormal),
                rand::Rng::sample(rng, rand_distr::StandardNormal),
                rand::Rng::sample(rng, rand_distr::StandardNormal),
            ];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 1e-3 {
                return [v[0] / n, v[1] / n, v[2] / n];
            }
        }
    }

    #[test]
    fn identity_rotation_gives_identity_blocks() {
        for l in 0..=4 {
            let d = wigner_d(l, &RotationMatrix::identity()).unwrap();
            for i in 0..d.dim() {
                for j in 0..d.dim() {
                    let target = if i == j { 1.0 } else { 0.0 };
                    assert!((d.entry(i, j) - target).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn degree_one_block_is_the_rotation_in_yzx_order() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..20 {
            let r = RotationMatrix::random(&mut rng);
            let d = wigner_d(1, &r).unwrap();
            // Components order (y, z, x) against coordinate order (x, y, z).
            let perm = [1usize, 2, 0];
            for i in 0..3 {
                for j in 0..3 {
                    let expect = r.matrix()[perm[i]][perm[j]];
                    assert!(
                        (d.entry(i, j) - expect).abs() < 1e-10,
                        "entry ({i},{j}): {} vs {}",
                        d.entry(i, j),
                        expect
                    );
                }
            }
        }
    }

    #[test]
    fn rotation_action_matches_direct_evaluation() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        for _ in 0..200 {
            let r = RotationMatrix::random(&mut rng);
            let u = random_unit(&mut rng);
            let ru = r.apply(u);
            for l in 0..=4 {
                let d = wigner_d(l, &r).unwrap();
                let lhs = sh_eval(l, ru).unwrap();
                let rhs = d.apply(&sh_eval(l, u).unwrap());
                for (a, b) in lhs.iter().zip(&rhs) {
                    assert!((a - b).abs() < 1e-9, "l={l}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn composition_is_a_homomorphism() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..50 {
            let r1 = RotationMatrix::random(&mut rng);
            let r2 = RotationMatrix::random(&mut rng);
            let r12 = r1.compose(&r2);
            for l in [1usize, 2, 3] {
                let d12 = wigner_d(l, &r12).unwrap();
                let prod = wigner_d(l, &r1).unwrap().compose(&wigner_d(l, &r2).unwrap());
                for i in 0..d12.dim() {
                    for j in 0..d12.dim() {
                        assert!((d12.entry(i, j) - prod.entry(i, j)).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn z_generator_has_frozen_ladder_entries() {
        // Rotation about z mixes the +-m component pair at rate m.
        for l in [1usize, 2] {
            let g = &generators(l).unwrap()[2];
            let dim = 2 * l + 1;
            for i in 0..dim {
                for j in 0..dim {
                    let mi = i as i64 - l as i64;
                    let mj = j as i64 - l as i64;
                    let expect = if mi == -mj { mj as f64 } else { 0.0 };
                    assert_eq!(g[(i, j)], expect, "l={l} entry ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn oversized_degree_is_rejected() {
        assert!(wigner_d(MAX_DEGREE + 1, &RotationMatrix::identity()).is_err());
    }

    #[test]
    fn near_pi_rotations_stay_accurate() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        for _ in 0..20 {
            let axis = random_unit(&mut rng);
            let r = RotationMatrix::from_axis_angle(axis, std::f64::consts::PI - 1e-9).unwrap();
            let u = random_unit(&mut rng);
            let d = wigner_d(3, &r).unwrap();
            let lhs = sh_eval(3, r.apply(u)).unwrap();
            let rhs = d.apply(&sh_eval(3, u).unwrap());
            for (a, b) in lhs.iter().zip(&rhs) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }
}
