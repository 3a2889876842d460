//! Built-in verification suites covering the numerical core: harmonic
//! transforms, rigid alignment, tape gradients and the pairing solver. Each
//! check is deterministic and reports the measured error against its bound,
//! so a binary can vouch for its own numerics on the machine it runs on.

use crate::equinet::{init_params, loss_and_grad, GraphBatch, GraphItem, ModelConfig};
use crate::error::Result;
use crate::geomops::{aligned_rmsd, kabsch_rotation, zero_com, PointCloud, RotationMatrix};
use crate::irreps::{real_cg, sh_eval_all, wigner_d};
use crate::moldata::BondOrder;
use crate::otcfm::{sample_coupling, sample_noise_cloud, solve_assignment, CouplingKind};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Measured error and the bound it was held to.
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub checks: Vec<CheckResult>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn bound_check(name: &str, measured: f64, bound: f64) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        passed: measured.is_finite() && measured <= bound,
        detail: format!("max error {measured:.3e}, bound {bound:.1e}"),
    }
}

fn flag_check(name: &str, passed: bool, detail: String) -> CheckResult {
    CheckResult { name: name.to_string(), passed, detail }
}

fn random_unit(rng: &mut ChaCha20Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            rng.sample(rand_distr::StandardNormal),
            rng.sample(rand_distr::StandardNormal),
            rng.sample(rand_distr::StandardNormal),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-3 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn random_cloud(rng: &mut ChaCha20Rng, k: usize) -> PointCloud {
    PointCloud::new(
        (0..k)
            .map(|_| {
                [
                    rng.sample(rand_distr::StandardNormal),
                    rng.sample(rand_distr::StandardNormal),
                    rng.sample(rand_distr::StandardNormal),
                ]
            })
            .collect(),
    )
    .expect("nonzero size")
}

pub fn representation_suite() -> Result<SuiteResult> {
    let mut rng = ChaCha20Rng::seed_from_u64(0x5345_4c46_0001);
    let l_max = 4;
    let mut checks = Vec::new();

    let mut worst = 0.0f64;
    for _ in 0..200 {
        let u = random_unit(&mut rng);
        let sh = sh_eval_all(l_max, u)?;
        for block in sh.iter() {
            let norm: f64 = block.iter().map(|v| v * v).sum();
            worst = worst.max((norm - 1.0).abs());
        }
    }
    checks.push(bound_check("harmonic_block_norm_is_one", worst, 1e-10));

    let mut worst = 0.0f64;
    for _ in 0..50 {
        let r = RotationMatrix::random(&mut rng);
        let u = random_unit(&mut rng);
        let ru = r.apply(u);
        let before = sh_eval_all(l_max, u)?;
        let after = sh_eval_all(l_max, ru)?;
        for l in 0..=l_max {
            let d = wigner_d(l, &r)?;
            let acted = d.apply(&before[l]);
            for (a, b) in acted.iter().zip(&after[l]) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    checks.push(bound_check("rotation_acts_through_wigner_blocks", worst, 1e-9));

    let mut worst = 0.0f64;
    for _ in 0..20 {
        let r1 = RotationMatrix::random(&mut rng);
        let r2 = RotationMatrix::random(&mut rng);
        let r12 = r1.compose(&r2);
        for l in 1..=3usize {
            let d1 = wigner_d(l, &r1)?;
            let d2 = wigner_d(l, &r2)?;
            let d12 = wigner_d(l, &r12)?;
            let prod = d1.compose(&d2);
            let n = 2 * l + 1;
            for i in 0..n {
                for j in 0..n {
                    worst = worst.max((prod.entry(i, j) - d12.entry(i, j)).abs());
                }
            }
        }
    }
    checks.push(bound_check("wigner_blocks_compose", worst, 1e-9));

    let mut worst = 0.0f64;
    for &(l1, l2, l3) in &[(1, 1, 0), (1, 1, 1), (1, 1, 2), (2, 1, 1), (2, 2, 2), (3, 2, 1)] {
        let table = real_cg(l1, l2, l3)?;
        for _ in 0..10 {
            let r = RotationMatrix::random(&mut rng);
            let u = random_unit(&mut rng);
            let v = random_unit(&mut rng);
            let a = sh_eval_all(l1, u)?[l1].clone();
            let b = sh_eval_all(l2, v)?[l2].clone();
            let coupled = table.couple(&a, &b);
            let d3 = wigner_d(l3, &r)?;
            let rotated_coupled = d3.apply(&coupled);
            let ra = wigner_d(l1, &r)?.apply(&a);
            let rb = wigner_d(l2, &r)?.apply(&b);
            let coupled_rotated = table.couple(&ra, &rb);
            for (x, y) in rotated_coupled.iter().zip(&coupled_rotated) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    checks.push(bound_check("coupling_commutes_with_rotation", worst, 1e-9));

    let mut worst = 0.0f64;
    for &(l1, l2, l3) in &[(1, 1, 0), (1, 1, 2), (2, 2, 1), (3, 2, 2), (4, 3, 2)] {
        let table = real_cg(l1, l2, l3)?;
        let (d1, d2, d3) = (2 * l1 + 1, 2 * l2 + 1, 2 * l3 + 1);
        let mut rows = vec![vec![0.0; d1 * d2]; d3];
        for &(s3, s1, s2, v) in table.entries() {
            rows[s3][s1 * d2 + s2] = v;
        }
        for i in 0..d3 {
            for j in 0..d3 {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - expect).abs());
            }
        }
    }
    checks.push(bound_check("coupling_rows_orthonormal", worst, 1e-11));

    Ok(SuiteResult { name: "representations".into(), checks })
}

pub fn geometry_suite() -> Result<SuiteResult> {
    let mut rng = ChaCha20Rng::seed_from_u64(0x5345_4c46_0002);
    let mut checks = Vec::new();

    let mut worst = 0.0f64;
    for _ in 0..50 {
        let p = zero_com(&random_cloud(&mut rng, 6));
        let r = RotationMatrix::random(&mut rng);
        let q = r.rotate_rows(&p);
        worst = worst.max(aligned_rmsd(&p, &q)?);
    }
    checks.push(bound_check("alignment_recovers_pure_rotations", worst, 1e-10));

    let mut worst = 0.0f64;
    for _ in 0..50 {
        let p = random_cloud(&mut rng, 5);
        let q = random_cloud(&mut rng, 5);
        let base = aligned_rmsd(&p, &q)?;
        let r = RotationMatrix::random(&mut rng);
        let moved = PointCloud::new(
            r.rotate_rows(&q)
                .points()
                .iter()
                .map(|x| [x[0] + 2.0, x[1] - 1.0, x[2] + 0.5])
                .collect(),
        )
        .expect("same size");
        worst = worst.max((aligned_rmsd(&p, &moved)? - base).abs());
    }
    checks.push(bound_check("distance_ignores_rigid_motion", worst, 1e-9));

    let mut worst = 0.0f64;
    for i in 0..60 {
        let r = if i % 3 == 0 {
            // Include near-half-turn rotations, the hard region.
            let axis = random_unit(&mut rng);
            let angle = std::f64::consts::PI - 1e-7 * (i as f64 + 1.0);
            RotationMatrix::from_axis_angle(axis, angle)?
        } else {
            RotationMatrix::random(&mut rng)
        };
        let (axis, angle) = r.to_axis_angle();
        let back = RotationMatrix::from_axis_angle(axis, angle)?;
        for a in 0..3 {
            for b in 0..3 {
                worst = worst.max((r.matrix()[a][b] - back.matrix()[a][b]).abs());
            }
        }
    }
    checks.push(bound_check("axis_angle_round_trip", worst, 1e-12));

    let mut worst = 0.0f64;
    for _ in 0..30 {
        let p = random_cloud(&mut rng, 7);
        let c = zero_com(&p).centroid();
        worst = worst.max(c[0].abs().max(c[1].abs()).max(c[2].abs()));
    }
    checks.push(bound_check("centering_zeroes_the_centroid", worst, 1e-12));

    let mut worst = 0.0f64;
    for _ in 0..30 {
        let p = zero_com(&random_cloud(&mut rng, 6));
        let r = RotationMatrix::random(&mut rng);
        let q = r.rotate_rows(&zero_com(&random_cloud(&mut rng, 6)));
        let est = kabsch_rotation(&p, &q)?;
        let aligned = est.rotate_rows(&q);
        // The solved rotation must beat a sample of others.
        let best: f64 = p
            .points()
            .iter()
            .zip(aligned.points())
            .map(|(a, b)| (0..3).map(|d| (a[d] - b[d]).powi(2)).sum::<f64>())
            .sum();
        for _ in 0..10 {
            let other = RotationMatrix::random(&mut rng).rotate_rows(&q);
            let cost: f64 = p
                .points()
                .iter()
                .zip(other.points())
                .map(|(a, b)| (0..3).map(|d| (a[d] - b[d]).powi(2)).sum::<f64>())
                .sum();
            worst = worst.max(best - cost);
        }
    }
    checks.push(bound_check("solved_rotation_is_no_worse_than_random", worst.max(0.0), 1e-12));

    Ok(SuiteResult { name: "alignment".into(), checks })
}

pub fn gradient_suite() -> Result<SuiteResult> {
    let mut checks = Vec::new();
    let config = ModelConfig {
        l_max: 1,
        channels: 2,
        blocks: 1,
        atom_vocab: 9,
        bond_vocab: 4,
        hidden: 4,
        time_dim: 4,
    };
    let atoms = vec![6u8, 6, 8, 1];
    let bonds = vec![
        (0usize, 1usize, BondOrder::Single),
        (1, 2, BondOrder::Double),
        (0, 3, BondOrder::Single),
    ];
    let coords = zero_com(
        &PointCloud::new(vec![
            [0.0, 0.1, -0.2],
            [1.4, 0.0, 0.1],
            [2.1, 1.0, 0.3],
            [-0.8, 0.9, 0.4],
        ])
        .expect("nonzero size"),
    );
    let items = [GraphItem { atoms: &atoms, bonds: &bonds, coords: &coords, time: 0.45 }];
    let batch = GraphBatch::new(&items)?;
    let params = init_params(&config, 27, None)?;
    let targets: Vec<[f64; 3]> =
        (0..batch.node_count()).map(|i| [0.1 * i as f64, -0.15, 0.2 - 0.05 * i as f64]).collect();
    let (_, grads) = loss_and_grad(&params, &batch, &targets)?;

    let mut rng = ChaCha20Rng::seed_from_u64(0x5345_4c46_0003);
    let count = params.param_count();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..40 {
        let flat = rng.random_range(0..count);
        // Locate the tensor and offset for this flat position.
        let mut remaining = flat;
        let mut ti = 0;
        for (i, t) in params.tensors().iter().enumerate() {
            if remaining < t.data().len() {
                ti = i;
                break;
            }
            remaining -= t.data().len();
        }
        let eval = |delta: f64| -> Result<f64> {
            let mut p = params.clone();
            p.tensors_mut()[ti].data_mut()[remaining] += delta;
            Ok(loss_and_grad(&p, &batch, &targets)?.0)
        };
        let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
        let an = grads[ti].data()[remaining];
        worst = worst.max((fd - an).abs() / (1.0 + fd.abs()));
    }
    checks.push(bound_check("tape_gradients_match_finite_differences", worst, 2e-6));

    let bias = grads.last().expect("bias gradient present");
    let worst = bias.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    checks.push(bound_check("centered_head_kills_the_bias_gradient", worst, 1e-12));

    Ok(SuiteResult { name: "gradients".into(), checks })
}

pub fn assignment_suite() -> Result<SuiteResult> {
    let mut rng = ChaCha20Rng::seed_from_u64(0x5345_4c46_0004);
    let mut checks = Vec::new();

    // Sorted one-dimensional costs: matching in order is provably optimal.
    let mut mismatches = 0usize;
    let mut worst_gap = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(3..=12);
        let mut a: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 10.0).collect();
        let mut b: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 10.0).collect();
        a.sort_unstable_by(f64::total_cmp);
        b.sort_unstable_by(f64::total_cmp);
        let cost: Vec<Vec<f64>> =
            a.iter().map(|&x| b.iter().map(|&y| (x - y).abs()).collect()).collect();
        let assign = solve_assignment(&cost)?;
        let identity: f64 = (0..n).map(|i| cost[i][i]).sum();
        let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        worst_gap = worst_gap.max(total - identity);
        if assign.iter().enumerate().any(|(i, &j)| i != j) {
            mismatches += 1;
        }
    }
    checks.push(flag_check(
        "sorted_line_costs_match_in_order",
        mismatches == 0 && worst_gap <= 1e-9,
        format!("{mismatches} mismatched instances, worst total gap {worst_gap:.3e}"),
    ));

    // Clouds that are rotated copies under a known shuffle: the solver must
    // find the shuffle.
    let mut recovered = true;
    for _ in 0..50 {
        let p = rng.random_range(3..=8);
        let k = rng.random_range(4..=7);
        let noise: Vec<PointCloud> =
            (0..p).map(|_| sample_noise_cloud(k, &mut rng)).collect::<Result<_>>()?;
        let mut perm: Vec<usize> = (0..p).collect();
        for i in (1..p).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        let mut data = vec![PointCloud::new(vec![[0.0; 3]]).expect("stub"); p];
        for (i, &target) in perm.iter().enumerate() {
            let r = RotationMatrix::random(&mut rng);
            data[target] = r.rotate_rows(&noise[i]);
        }
        let cost = crate::geomops::conformer_cost_matrix(&noise, &data)?;
        let assign = solve_assignment(&cost)?;
        if assign != perm {
            recovered = false;
        }
    }
    checks.push(flag_check(
        "rotated_copies_recover_the_shuffle",
        recovered,
        if recovered { "50 of 50 shuffles recovered".into() } else { "a shuffle was missed".into() },
    ));

    let mut improves = true;
    let mut worst_center = 0.0f64;
    for _ in 0..20 {
        let p = 5;
        let k = 6;
        let noise: Vec<PointCloud> =
            (0..p).map(|_| sample_noise_cloud(k, &mut rng)).collect::<Result<_>>()?;
        let data: Vec<PointCloud> = (0..p).map(|_| random_cloud(&mut rng, k)).collect();
        let paired_opt = sample_coupling(CouplingKind::Optimal, &noise, &data)?;
        let paired_ind = sample_coupling(CouplingKind::Independent, &noise, &data)?;
        let total = |pairs: &[crate::otcfm::CouplingPair]| -> Result<f64> {
            let mut s = 0.0;
            for pr in pairs {
                s += aligned_rmsd(&pr.x0, &pr.x1)?;
            }
            Ok(s)
        };
        if total(&paired_opt)? > total(&paired_ind)? + 1e-9 {
            improves = false;
        }
        for pr in &paired_opt {
            for d in pr.x1.centroid() {
                worst_center = worst_center.max(d.abs());
            }
        }
    }
    checks.push(flag_check(
        "pairing_never_beats_independent_order",
        improves,
        "optimal total held at or below the index pairing".into(),
    ));
    checks.push(bound_check("paired_clouds_are_centered", worst_center, 1e-12));

    Ok(SuiteResult { name: "pairing".into(), checks })
}

pub fn run_all() -> Result<Vec<SuiteResult>> {
    Ok(vec![
        representation_suite()?,
        geometry_suite()?,
        gradient_suite()?,
        assignment_suite()?,
    ])
}

pub fn format_report(suites: &[SuiteResult]) -> String {
    let mut out = String::new();
    for s in suites {
        for c in &s.checks {
            let status = if c.passed { "pass" } else { "FAIL" };
            out.push_str(&format!("{status}  {}/{}: {}\n", s.name, c.name, c.detail));
        }
    }
    let total: usize = suites.iter().map(|s| s.checks.len()).sum();
    let passed: usize =
        suites.iter().map(|s| s.checks.iter().filter(|c| c.passed).count()).sum();
    out.push_str(&format!("{passed}/{total} checks passed\n"));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_builtin_check_passes() {
        let suites = run_all().unwrap();
        assert_eq!(suites.len(), 4);
        for s in &suites {
            for c in &s.checks {
                assert!(c.passed, "{}/{} failed: {}", s.name, c.name, c.detail);
            }
        }
    }

    #[test]
    fn report_runs_are_identical() {
        let a = run_all().unwrap();
        let b = run_all().unwrap();
        assert_eq!(a, b);
        let text = format_report(&a);
        assert!(text.contains("pass  representations/"));
        assert!(text.lines().last().unwrap().ends_with("checks passed"));
    }
}
