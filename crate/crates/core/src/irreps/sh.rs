//! Real spherical harmonics on the unit sphere.
//!
//! Ordering within degree L is m = -L..L. Components are scaled so the
//! (2L+1)-vector Y^(L)(u) has unit Euclidean norm for every direction u;
//! with that convention Y^(1)(u) = (u_y, u_z, u_x).

use crate::error::{Error, Result};

/// Largest degree the representation machinery supports.
pub const MAX_DEGREE: usize = 8;

const UNIT_TOL: f64 = 1e-6;

/// Evaluate degrees 0..=l_max at once; result[l][m + l] is the m component.
pub fn sh_eval_all(l_max: usize, u: [f64; 3]) -> Result<Vec<Vec<f64>>> {
    if l_max > MAX_DEGREE {
        return Err(Error::Irreps(format!(
            "degree {l_max} exceeds supported maximum {MAX_DEGREE}"
        )));
    }
    let norm = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
    if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOL {
        return Err(Error::Irreps(format!(
            "spherical harmonics need a unit vector, got norm {norm}"
        )));
    }

    let ct = u[2]; // cos(theta)
    let st = (u[0] * u[0] + u[1] * u[1]).sqrt(); // sin(theta) >= 0
    let phi = u[1].atan2(u[0]);

    // Orthonormal associated Legendre values without the Condon-Shortley
    // phase, via the standard stable recurrences.
    let lm = l_max;
    let mut p = vec![vec![0.0f64; lm + 1]; lm + 1]; // p[l][m]
    p[0][0] = (1.0 / (4.0 * std::f64::consts::PI)).sqrt();
    for m in 1..=lm {
        p[m][m] = ((2 * m + 1) as f64 / (2 * m) as f64).sqrt() * st * p[m - 1][m - 1];
    }
    for m in 0..lm {
        p[m + 1][m] = ((2 * m + 3) as f64).sqrt() * ct * p[m][m];
    }
    for m in 0..=lm {
        for l in (m + 2)..=lm {
            let a = ((4 * l * l - 1) as f64 / ((l * l - m * m) as f64)).sqrt();
            let b = (((2 * l + 1) as f64 * ((l - 1) * (l - 1) - m * m) as f64)
                / ((2 * l - 3) as f64 * (l * l - m * m) as f64))
                .sqrt();
            p[l][m] = a * ct * p[l - 1][m] - b * p[l - 2][m];
        }
    }

    let mut cos_m = vec![0.0; lm + 1];
    let mut sin_m = vec![0.0; lm + 1];
    for m in 0..=lm {
        cos_m[m] = (m as f64 * phi).cos();
        sin_m[m] = (m as f64 * phi).sin();
    }

    let mut out = Vec::with_capacity(lm + 1);
    for l in 0..=lm {
        // Unit-norm scaling: orthonormal harmonics sum to (2l+1)/(4 pi).
        let scale = (4.0 * std::f64::consts::PI / (2 * l + 1) as f64).sqrt();
        let sqrt2 = std::f64::consts::SQRT_2;
        let mut comps = vec![0.0; 2 * l + 1];
        comps[l] = scale * p[l][0];
        for m in 1..=l {
            let base = scale * sqrt2 * p[l][m];
            comps[l + m] = base * cos_m[m];
            comps[l - m] = base * sin_m[m];
        }
        out.push(comps);
    }
    Ok(out)
}

/// Components of degree `l` only.
pub fn sh_eval(l: usize, u: [f64; 3]) -> Result<Vec<f64>> {
    Ok(sh_eval_all(l, u)?.pop().expect("degree l present"))
}
