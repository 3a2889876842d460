//! Pairing of noise clouds with conformers and the conditional flow built on
//! those pairs.
//!
//! Training draws a pool of noise clouds, matches them to conformers with an
//! exact assignment solve over pairwise aligned RMSD, and rotates each matched
//! conformer onto its noise cloud. The conditional path between a pair is the
//! straight line, and the regression target is its constant velocity.

use crate::error::{Error, Result};
use crate::geomops::{conformer_cost_matrix, kabsch_rotation, zero_com, PointCloud};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Number of noise clouds drawn per molecule when pairing against its
/// conformers; molecules with fewer conformers use all of them.
pub const OT_POOL_SIZE: usize = 20;

/// How noise clouds are paired with conformers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CouplingKind {
    /// Pair by position in the batch, centered only.
    Independent,
    /// Assignment minimizing total aligned RMSD, with each conformer rotated
    /// onto its noise cloud.
    Optimal,
}

/// One matched (noise, conformer) pair, both centered.
#[derive(Debug, Clone)]
pub struct CouplingPair {
    pub x0: PointCloud,
    pub x1: PointCloud,
    pub source_index: usize,
    pub target_index: usize,
}

fn hungarian(cost: &[Vec<f64>]) -> (f64, Vec<usize>) {
    let n = cost.len();
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    let value = assign.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    (value, assign)
}

fn validate_cost(cost: &[Vec<f64>]) -> Result<()> {
    if cost.is_empty() {
        return Err(Error::InvalidInput("cost matrix is empty".into()));
    }
    let n = cost.len();
    for row in cost {
        if row.len() != n {
            return Err(Error::InvalidInput(format!(
                "cost matrix is not square: {n} rows but a row of length {}",
                row.len()
            )));
        }
        for &c in row {
            if !c.is_finite() {
                return Err(Error::InvalidInput(
                    "cost matrix contains a non-finite entry".into(),
                ));
            }
        }
    }
    Ok(())
}

/// Minimum-cost assignment of rows to columns. Among all optimal assignments
/// the lexicographically smallest column vector is returned, so equal-cost
/// inputs resolve the same way everywhere.
pub fn solve_assignment(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    validate_cost(cost)?;
    let n = cost.len();
    let scale = cost
        .iter()
        .flatten()
        .fold(1.0f64, |m, &c| m.max(c.abs()));
    let tol = 1e-9 * scale * n as f64;

    let mut result = Vec::with_capacity(n);
    let mut free_cols: Vec<usize> = (0..n).collect();
    for i in 0..n {
        let rows: Vec<usize> = (i + 1..n).collect();
        let mut best_total = f64::INFINITY;
        let mut totals = Vec::with_capacity(free_cols.len());
        for (slot, &j) in free_cols.iter().enumerate() {
            let rest: Vec<usize> = free_cols
                .iter()
                .enumerate()
                .filter(|(s, _)| *s != slot)
                .map(|(_, &c)| c)
                .collect();
            let sub_value = if rows.is_empty() {
                0.0
            } else {
                let sub: Vec<Vec<f64>> = rows
                    .iter()
                    .map(|&r| rest.iter().map(|&c| cost[r][c]).collect())
                    .collect();
                hungarian(&sub).0
            };
            let total = cost[i][j] + sub_value;
            totals.push(total);
            if total < best_total {
                best_total = total;
            }
        }
        let pick = totals
            .iter()
            .position(|&t| t <= best_total + tol)
            .expect("a feasible column always exists");
        result.push(free_cols.remove(pick));
    }
    Ok(result)
}

fn validate_batch(noise: &[PointCloud], data: &[PointCloud]) -> Result<()> {
    if noise.is_empty() || noise.len() != data.len() {
        return Err(Error::InvalidInput(format!(
            "coupling needs equal nonzero batch sizes, got {} and {}",
            noise.len(),
            data.len()
        )));
    }
    let k = noise[0].len();
    for c in noise.iter().chain(data) {
        if c.len() != k {
            return Err(Error::InvalidInput(
                "all clouds in a coupling batch must have the same size".into(),
            ));
        }
    }
    Ok(())
}

/// Pair noise clouds with conformers. Both sides are centered; the optimal
/// kind additionally matches by aligned RMSD and rotates each conformer onto
/// its noise cloud.
pub fn sample_coupling(
    kind: CouplingKind,
    noise: &[PointCloud],
    data: &[PointCloud],
) -> Result<Vec<CouplingPair>> {
    validate_batch(noise, data)?;
    let noise_c: Vec<PointCloud> = noise.iter().map(zero_com).collect();
    let data_c: Vec<PointCloud> = data.iter().map(zero_com).collect();
    match kind {
        CouplingKind::Independent => Ok(noise_c
            .into_iter()
            .zip(data_c)
            .enumerate()
            .map(|(i, (x0, x1))| CouplingPair { x0, x1, source_index: i, target_index: i })
            .collect()),
        CouplingKind::Optimal => {
            let cost = conformer_cost_matrix(&noise_c, &data_c)?;
            let assign = solve_assignment(&cost)?;
            let mut pairs = Vec::with_capacity(noise_c.len());
            for (i, &j) in assign.iter().enumerate() {
                let x0 = noise_c[i].clone();
                let r = kabsch_rotation(&x0, &data_c[j])?;
                let x1 = r.rotate_rows(&data_c[j]);
                pairs.push(CouplingPair { x0, x1, source_index: i, target_index: j });
            }
            Ok(pairs)
        }
    }
}

/// Centered cloud of iid standard normal points.
pub fn sample_noise_cloud<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Result<PointCloud> {
    if k == 0 {
        return Err(Error::InvalidInput("noise cloud needs at least one point".into()));
    }
    let pts: Vec<[f64; 3]> = (0..k)
        .map(|_| {
            [
                rng.sample(rand_distr::StandardNormal),
                rng.sample(rand_distr::StandardNormal),
                rng.sample(rand_distr::StandardNormal),
            ]
        })
        .collect();
    Ok(zero_com(&PointCloud::new(pts)?))
}

/// Position on the straight path at time t, with optional isotropic jitter,
/// and the constant target velocity of the pair.
pub fn cond_path_sample<R: Rng + ?Sized>(
    pair: &CouplingPair,
    t: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<(PointCloud, Vec<[f64; 3]>)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidInput(format!("path time {t} outside [0, 1]")));
    }
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::InvalidInput(format!("invalid path noise scale {sigma}")));
    }
    let k = pair.x0.len();
    let mut xt = Vec::with_capacity(k);
    let mut ut = Vec::with_capacity(k);
    for (p0, p1) in pair.x0.points().iter().zip(pair.x1.points()) {
        let mut x = [0.0; 3];
        let mut u = [0.0; 3];
        for d in 0..3 {
            u[d] = p1[d] - p0[d];
            // The convex form is exact at both endpoints.
            x[d] = (1.0 - t) * p0[d] + t * p1[d];
            if sigma > 0.0 {
                let e: f64 = rng.sample(rand_distr::StandardNormal);
                x[d] += sigma * e;
            }
        }
        xt.push(x);
        ut.push(u);
    }
    Ok((PointCloud::new(xt)?, ut))
}

/// Mean squared error per coordinate between predicted and target velocities.
pub fn cfm_loss(pred: &[[f64; 3]], target: &[[f64; 3]]) -> Result<f64> {
    if pred.is_empty() || pred.len() != target.len() {
        return Err(Error::InvalidInput(format!(
            "velocity shapes differ: {} vs {}",
            pred.len(),
            target.len()
        )));
    }
    let mut acc = crate::geomops::KahanSum::default();
    for (p, t) in pred.iter().zip(target) {
        for d in 0..3 {
            let diff = p[d] - t[d];
            acc.add(diff * diff);
        }
    }
    Ok(acc.value() / (3.0 * pred.len() as f64))
}
