//! Coupling coefficients between degree pairs.
//!
//! The complex-basis coefficients come from the Racah closed form. The
//! real-basis tables used by the tensor product are obtained by conjugating
//! with the complex-to-real change of basis; the result is purely real or
//! purely imaginary depending on the parity of l1 + l2 + l3, and the live
//! part is kept as a sparse table.

use crate::error::{Error, Result};
use crate::irreps::sh::MAX_DEGREE;
use num_complex::Complex64;
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

const FACT_MAX: usize = 3 * MAX_DEGREE + 2;

fn factorial(n: i64) -> f64 {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    let t = TABLE.get_or_init(|| {
        let mut v = vec![1.0f64; FACT_MAX + 1];
        for i in 1..=FACT_MAX {
            v[i] = v[i - 1] * i as f64;
        }
        v
    });
    t[n as usize]
}

/// Coupling coefficient in the complex basis. Structural zeros (triangle or
/// projection violations) return 0; degrees beyond the supported range are
/// rejected.
pub fn clebsch_gordan(l1: usize, m1: i64, l2: usize, m2: i64, l3: usize, m3: i64) -> Result<f64> {
    if l1 > MAX_DEGREE || l2 > MAX_DEGREE || l3 > MAX_DEGREE {
        return Err(Error::Irreps(format!(
            "coupling degree out of range: ({l1}, {l2}, {l3})"
        )));
    }
    if m1.unsigned_abs() as usize > l1
        || m2.unsigned_abs() as usize > l2
        || m3.unsigned_abs() as usize > l3
    {
        return Ok(0.0);
    }
    if m1 + m2 != m3 || l3 + l1 < l2 || l3 + l2 < l1 || l1 + l2 < l3 {
        return Ok(0.0);
    }
    let (l1h, l2h, l3h) = (l1 as i64, l2 as i64, l3 as i64);
    let prefactor = ((2.0 * l3h as f64 + 1.0) * factorial(l1h + l2h - l3h)
        * factorial(l1h - l2h + l3h)
        * factorial(-l1h + l2h + l3h)
        / factorial(l1h + l2h + l3h + 1))
    .sqrt()
        * (factorial(l1h + m1)
            * factorial(l1h - m1)
            * factorial(l2h + m2)
            * factorial(l2h - m2)
            * factorial(l3h + m3)
            * factorial(l3h - m3))
        .sqrt();
    let k_lo = 0.max(l2h - l3h - m1).max(l1h - l3h + m2);
    let k_hi = (l1h + l2h - l3h).min(l1h - m1).min(l2h + m2);
    let mut sum = 0.0;
    for k in k_lo..=k_hi {
        let denom = factorial(k)
            * factorial(l1h + l2h - l3h - k)
            * factorial(l1h - m1 - k)
            * factorial(l2h + m2 - k)
            * factorial(l3h - l2h + m1 + k)
            * factorial(l3h - l1h - m2 + k);
        sum += if k % 2 == 0 { 1.0 } else { -1.0 } / denom;
    }
    Ok(prefactor * sum)
}

/// Change of basis from complex to real components for degree l. Row index is
/// the real component slot l + m, column index the complex slot l + M.
fn real_from_complex(l: usize) -> Vec<Vec<Complex64>> {
    let dim = 2 * l + 1;
    let mut u = vec![vec![Complex64::new(0.0, 0.0); dim]; dim];
    let s = std::f64::consts::FRAC_1_SQRT_2;
    u[l][l] = Complex64::new(1.0, 0.0);
    for m in 1..=l {
        let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
        u[l + m][l + m] = Complex64::new(sign * s, 0.0);
        u[l + m][l - m] = Complex64::new(s, 0.0);
        u[l - m][l + m] = Complex64::new(0.0, -sign * s);
        u[l - m][l - m] = Complex64::new(0.0, s);
    }
    u
}

/// Sparse real-basis coupling table for one degree triple.
#[derive(Debug)]
pub struct RealCg {
    l1: usize,
    l2: usize,
    l3: usize,
    /// (slot3, slot1, slot2, value) with slots counted from m = -l.
    entries: Vec<(usize, usize, usize, f64)>,
}

impl RealCg {
    pub fn degrees(&self) -> (usize, usize, usize) {
        (self.l1, self.l2, self.l3)
    }

    pub fn entries(&self) -> &[(usize, usize, usize, f64)] {
        &self.entries
    }

    /// Dense value lookup, zero where no entry is stored.
    pub fn value(&self, slot3: usize, slot1: usize, slot2: usize) -> f64 {
        self.entries
            .iter()
            .find(|(a, b, c, _)| (*a, *b, *c) == (slot3, slot1, slot2))
            .map(|(_, _, _, v)| *v)
            .unwrap_or(0.0)
    }

    /// Couple two component vectors into the output degree.
    pub fn couple(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        assert_eq!(a.len(), 2 * self.l1 + 1);
        assert_eq!(b.len(), 2 * self.l2 + 1);
        let mut out = vec![0.0; 2 * self.l3 + 1];
        for &(s3, s1, s2, v) in &self.entries {
            out[s3] += v * a[s1] * b[s2];
        }
        out
    }
}

fn real_cg_cache() -> &'static Mutex<HashMap<(usize, usize, usize), Arc<RealCg>>> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize, usize), Arc<RealCg>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Real-basis coupling table for (l1, l2) -> l3, cached per triple.
pub fn real_cg(l1: usize, l2: usize, l3: usize) -> Result<Arc<RealCg>> {
    if l1 > MAX_DEGREE || l2 > MAX_DEGREE || l3 > MAX_DEGREE {
        return Err(Error::Irreps(format!(
            "coupling degree out of range: ({l1}, {l2}, {l3})"
        )));
    }
    if l3 + l1 < l2 || l3 + l2 < l1 || l1 + l2 < l3 {
        return Err(Error::Irreps(format!(
            "degrees ({l1}, {l2}) cannot couple into {l3}"
        )));
    }
    {
        let cache = real_cg_cache().lock().expect("coupling cache poisoned");
        if let Some(t) = cache.get(&(l1, l2, l3)) {
            return Ok(Arc::clone(t));
        }
    }
    let table = Arc::new(build_real_cg(l1, l2, l3)?);
    let mut cache = real_cg_cache().lock().expect("coupling cache poisoned");
    Ok(Arc::clone(
        cache.entry((l1, l2, l3)).or_insert(table),
    ))
}

fn build_real_cg(l1: usize, l2: usize, l3: usize) -> Result<RealCg> {
    let u1 = real_from_complex(l1);
    let u2 = real_from_complex(l2);
    let u3 = real_from_complex(l3);
    let (d1, d2, d3) = (2 * l1 + 1, 2 * l2 + 1, 2 * l3 + 1);
    // Take the imaginary part when the degree sum is odd, else the real part.
    let odd = (l1 + l2 + l3) % 2 == 1;
    let mut entries = Vec::new();
    for s3 in 0..d3 {
        for s1 in 0..d1 {
            for s2 in 0..d2 {
                let mut acc = Complex64::new(0.0, 0.0);
                for cm1 in 0..d1 {
                    let f1 = u1[s1][cm1].conj();
                    if f1.norm_sqr() == 0.0 {
                        continue;
                    }
                    for cm2 in 0..d2 {
                        let f2 = u2[s2][cm2].conj();
                        if f2.norm_sqr() == 0.0 {
                            continue;
                        }
                        let m1 = cm1 as i64 - l1 as i64;
                        let m2 = cm2 as i64 - l2 as i64;
                        let m3 = m1 + m2;
                        if m3.unsigned_abs() as usize > l3 {
                            continue;
                        }
                        let cm3 = (m3 + l3 as i64) as usize;
                        let f3 = u3[s3][cm3];
                        if f3.norm_sqr() == 0.0 {
                            continue;
                        }
                        let c = clebsch_gordan(l1, m1, l2, m2, l3, m3)?;
                        acc += f3 * f1 * f2 * c;
                    }
                }
                let (live, dead) = if odd { (acc.im, acc.re) } else { (acc.re, acc.im) };
                if dead.abs() > 1e-10 {
                    return Err(Error::Irreps(format!(
                        "coupling ({l1},{l2})->{l3} left a residue of {dead:.3e} in the wrong parity component"
                    )));
                }
                if live.abs() > 1e-12 {
                    entries.push((s3, s1, s2, live));
                }
            }
        }
    }
    Ok(RealCg { l1, l2, l3, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geomops::RotationMatrix;
    use crate::irreps::wigner::wigner_d;
    use rand::Rng as _;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn complex_values_match_hand_table() {
        assert!(close(
            clebsch_gordan(1, 1, 1, -1, 0, 0).unwrap(),
            1.0 / 3f64.sqrt()
        ));
        assert!(close(
            clebsch_gordan(1, 0, 1, 0, 0, 0).unwrap(),
            -1.0 / 3f64.sqrt()
        ));
        assert!(close(
            clebsch_gordan(1, 0, 1, 0, 2, 0).unwrap(),
            (2.0f64 / 3.0).sqrt()
        ));
        assert!(close(
            clebsch_gordan(2, 0, 2, 0, 4, 0).unwrap(),
            (18.0f64 / 35.0).sqrt()
        ));
        assert!(close(
            clebsch_gordan(1, 1, 1, 0, 2, 1).unwrap(),
            1.0 / 2f64.sqrt()
        ));
        assert!(close(
            clebsch_gordan(1, 1, 1, -1, 1, 0).unwrap(),
            1.0 / 2f64.sqrt()
        ));
    }

    #[test]
    fn structural_zeros_and_range_errors() {
        assert_eq!(clebsch_gordan(1, 1, 1, 1, 0, 0).unwrap(), 0.0);
        assert_eq!(clebsch_gordan(1, 0, 1, 0, 3, 0).unwrap(), 0.0);
        assert_eq!(clebsch_gordan(2, 2, 1, 1, 1, 3).unwrap(), 0.0);
        assert!(clebsch_gordan(MAX_DEGREE + 1, 0, 0, 0, MAX_DEGREE + 1, 0).is_err());
        assert!(real_cg(0, 0, 1).is_err());
        assert!(real_cg(MAX_DEGREE + 1, 0, MAX_DEGREE + 1).is_err());
    }

    #[test]
    fn complex_columns_are_orthonormal() {
        for (l1, l2) in [(1usize, 1usize), (2, 1), (2, 2)] {
            let lo = l1.abs_diff(l2);
            let hi = l1 + l2;
            for l3 in lo..=hi {
                for l3b in lo..=hi {
                    for m3 in -(l3 as i64)..=(l3 as i64) {
                        for m3b in -(l3b as i64)..=(l3b as i64) {
                            let mut acc = 0.0;
                            for m1 in -(l1 as i64)..=(l1 as i64) {
                                for m2 in -(l2 as i64)..=(l2 as i64) {
                                    acc += clebsch_gordan(l1, m1, l2, m2, l3, m3).unwrap()
                                        * clebsch_gordan(l1, m1, l2, m2, l3b, m3b).unwrap();
                                }
                            }
                            let expect = if (l3, m3) == (l3b, m3b) { 1.0 } else { 0.0 };
                            assert!(
                                (acc - expect).abs() < 1e-12,
                                "l3={l3} m3={m3} l3'={l3b} m3'={m3b}: {acc}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn real_rows_are_orthonormal() {
        for (l1, l2, l3) in [
            (1usize, 1usize, 0usize),
            (1, 1, 1),
            (1, 1, 2),
            (2, 1, 1),
            (2, 1, 2),
            (2, 1, 3),
            (2, 2, 4),
            (3, 2, 1),
            (4, 3, 2),
        ] {
            let t = real_cg(l1, l2, l3).unwrap();
            let d3 = 2 * l3 + 1;
            let mut gram = vec![vec![0.0; d3]; d3];
            for &(s3, s1, s2, v) in t.entries() {
                for &(s3b, s1b, s2b, vb) in t.entries() {
                    if (s1, s2) == (s1b, s2b) {
                        gram[s3][s3b] += v * vb;
                    }
                }
            }
            for i in 0..d3 {
                for j in 0..d3 {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!(
                        (gram[i][j] - expect).abs() < 1e-11,
                        "({l1},{l2},{l3}) gram[{i}][{j}] = {}",
                        gram[i][j]
                    );
                }
            }
        }
    }

    #[test]
    fn vector_pair_to_scalar_is_negated_dot() {
        let t = real_cg(1, 1, 0).unwrap();
        let c = -1.0 / 3f64.sqrt();
        for s1 in 0..3 {
            for s2 in 0..3 {
                let expect = if s1 == s2 { c } else { 0.0 };
                assert!(close(t.value(0, s1, s2), expect), "({s1},{s2})");
            }
        }
    }

    #[test]
    fn vector_pair_to_vector_is_cross_shaped() {
        let t = real_cg(1, 1, 1).unwrap();
        // Antisymmetric in the two inputs, six entries of equal magnitude.
        assert_eq!(t.entries().len(), 6);
        let mag = 1.0 / 2f64.sqrt();
        for &(s3, s1, s2, v) in t.entries() {
            assert!(s1 != s2 && s3 != s1 && s3 != s2);
            assert!((v.abs() - mag).abs() < 1e-12);
            assert!(close(t.value(s3, s2, s1), -v));
        }
        // Coupling two copies of the same vector gives zero.
        let a = [0.3, -1.2, 0.7];
        for v in t.couple(&a, &a) {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn coupling_commutes_with_rotation() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for (l1, l2, l3) in [
            (1usize, 1usize, 0usize),
            (1, 1, 1),
            (1, 1, 2),
            (2, 1, 2),
            (2, 2, 3),
            (3, 2, 4),
            (3, 3, 2),
        ] {
            let t = real_cg(l1, l2, l3).unwrap();
            for _ in 0..20 {
                let r = RotationMatrix::random(&mut rng);
                let d1 = wigner_d(l1, &r).unwrap();
                let d2 = wigner_d(l2, &r).unwrap();
                let d3 = wigner_d(l3, &r).unwrap();
                let a: Vec<f64> = (0..2 * l1 + 1).map(|_| rng.random_range(-1.0..1.0)).collect();
                let b: Vec<f64> = (0..2 * l2 + 1).map(|_| rng.random_range(-1.0..1.0)).collect();
                let lhs = t.couple(&d1.apply(&a), &d2.apply(&b));
                let rhs = d3.apply(&t.couple(&a, &b));
                for (x, y) in lhs.iter().zip(&rhs) {
                    assert!((x - y).abs() < 1e-10, "({l1},{l2},{l3}): {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn cache_returns_shared_tables() {
        let a = real_cg(2, 1, 2).unwrap();
        let b = real_cg(2, 1, 2).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
    }
}
