//! Ensemble quality metrics: for each reference conformer, how close the
//! nearest generated cloud comes. Coverage is the fraction of references with
//! a generated neighbor within a threshold, matching is the mean of those
//! nearest distances. Both read a generated-by-reference matrix of aligned
//! RMSD values, so they never depend on cloud orientation or position.

use crate::error::{Error, Result};
use crate::geomops::{aligned_rmsd, conformer_cost_matrix, PointCloud};
use serde::{Deserialize, Serialize};

fn check_delta(delta: f64) -> Result<()> {
    if delta.is_finite() && delta >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("threshold must be finite and >= 0, got {delta}")))
    }
}

/// Distance matrix with entry (i, j) = aligned RMSD between generated cloud i
/// and reference cloud j.
pub fn rmsd_matrix(generated: &[PointCloud], reference: &[PointCloud]) -> Result<Vec<Vec<f64>>> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::InvalidInput("both conformer sets must be non-empty".into()));
    }
    conformer_cost_matrix(generated, reference)
}

/// Coverage and matching from a distance matrix whose rows are generated
/// clouds and whose columns are references. A reference counts as covered
/// when its nearest row is within the threshold, inclusively.
pub fn cov_mat_from_rmsd_matrix(matrix: &[Vec<f64>], delta: f64) -> Result<(f64, f64)> {
    check_delta(delta)?;
    if matrix.is_empty() || matrix[0].is_empty() {
        return Err(Error::InvalidInput("distance matrix must be non-empty".into()));
    }
    let cols = matrix[0].len();
    for row in matrix {
        if row.len() != cols {
            return Err(Error::InvalidInput("distance matrix rows differ in length".into()));
        }
        for &v in row {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidInput(format!("bad distance entry {v}")));
            }
        }
    }
    let mut covered = 0usize;
    let mut total = 0.0;
    for j in 0..cols {
        let nearest = matrix.iter().map(|row| row[j]).fold(f64::INFINITY, f64::min);
        if nearest <= delta {
            covered += 1;
        }
        total += nearest;
    }
    Ok((covered as f64 / cols as f64, total / cols as f64))
}

/// Coverage and matching of a generated set against a reference set.
pub fn cov_mat_metrics(
    generated: &[PointCloud],
    reference: &[PointCloud],
    delta: f64,
) -> Result<(f64, f64)> {
    let matrix = rmsd_matrix(generated, reference)?;
    cov_mat_from_rmsd_matrix(&matrix, delta)
}

/// Smallest aligned RMSD from one cloud to any member of a set.
pub fn best_rmsd(cloud: &PointCloud, set: &[PointCloud]) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::InvalidInput("reference set must be non-empty".into()));
    }
    let mut best = f64::INFINITY;
    for c in set {
        best = best.min(aligned_rmsd(cloud, c)?);
    }
    Ok(best)
}

/// One molecule's generated and reference ensembles.
#[derive(Debug, Clone)]
pub struct EvalEntry {
    pub id: String,
    pub generated: Vec<PointCloud>,
    pub reference: Vec<PointCloud>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoleculeEval {
    pub id: String,
    pub coverage: f64,
    pub matching: f64,
    pub generated: usize,
    pub reference: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub delta: f64,
    pub per_molecule: Vec<MoleculeEval>,
    pub mean_coverage: f64,
    pub median_coverage: f64,
    pub mean_matching: f64,
    pub median_matching: f64,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Per-molecule metrics plus their mean and median across molecules.
pub fn ensemble_report(entries: &[EvalEntry], delta: f64) -> Result<EnsembleReport> {
    check_delta(delta)?;
    if entries.is_empty() {
        return Err(Error::InvalidInput("evaluation needs at least one molecule".into()));
    }
    let mut per_molecule = Vec::with_capacity(entries.len());
    for e in entries {
        let (coverage, matching) = cov_mat_metrics(&e.generated, &e.reference, delta)
            .map_err(|err| Error::InvalidInput(format!("molecule {}: {err}", e.id)))?;
        per_molecule.push(MoleculeEval {
            id: e.id.clone(),
            coverage,
            matching,
            generated: e.generated.len(),
            reference: e.reference.len(),
        });
    }
    let n = per_molecule.len() as f64;
    let mut covs: Vec<f64> = per_molecule.iter().map(|m| m.coverage).collect();
    let mut mats: Vec<f64> = per_molecule.iter().map(|m| m.matching).collect();
    Ok(EnsembleReport {
        delta,
        mean_coverage: covs.iter().sum::<f64>() / n,
        median_coverage: median(&mut covs),
        mean_matching: mats.iter().sum::<f64>() / n,
        median_matching: median(&mut mats),
        per_molecule,
    })
}

/// Four corners of an axis-aligned rectangle in the z = 0 plane, centered at
/// the origin. Between two such clouds the best alignment is the identity, so
/// the aligned RMSD is exactly the distance between their half-width and
/// half-height pairs.
pub fn rectangle_cloud(half_width: f64, half_height: f64) -> Result<PointCloud> {
    if !(half_width > 0.0 && half_height > 0.0) {
        return Err(Error::InvalidInput("rectangle sides must be positive".into()));
    }
    PointCloud::new(vec![
        [half_width, half_height, 0.0],
        [-half_width, half_height, 0.0],
        [-half_width, -half_height, 0.0],
        [half_width, -half_height, 0.0],
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geomops::RotationMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rect(w: f64, h: f64) -> PointCloud {
        rectangle_cloud(w, h).unwrap()
    }

    #[test]
    fn rectangle_distance_is_the_parameter_distance() {
        let a = rect(2.0, 1.0);
        let b = rect(2.25, 1.0);
        let d = aligned_rmsd(&a, &b).unwrap();
        assert!((d - 0.25).abs() < 1e-12, "expected 0.25, got {d}");
        let c = rect(3.0, 1.4);
        let d = aligned_rmsd(&b, &c).unwrap();
        assert!((d - 0.85).abs() < 1e-12, "expected 0.85, got {d}");
    }

    #[test]
    fn constructed_case_gives_half_coverage_and_exact_matching() {
        // References (w, h): nearest generated rectangles sit at parameter
        // distance 0.25 and 0.6, so with threshold 0.5 exactly one of the two
        // is covered and the mean nearest distance is 0.425.
        let reference = vec![rect(2.0, 1.0), rect(3.0, 1.4)];
        let generated = vec![
            rect(2.25, 1.0),
            rect(2.0, 1.35),
            rect(3.6, 1.4),
            rect(2.5, 0.5),
        ];
        let (cov, mat) = cov_mat_metrics(&generated, &reference, 0.5).unwrap();
        assert_eq!(cov, 0.5);
        assert!((mat - 0.425).abs() < 1e-12, "expected 0.425, got {mat}");
    }

    #[test]
    fn threshold_is_inclusive() {
        let matrix = vec![vec![0.5, 0.7]];
        let (cov, mat) = cov_mat_from_rmsd_matrix(&matrix, 0.5).unwrap();
        assert_eq!(cov, 0.5);
        assert!((mat - 0.6).abs() < 1e-15);
        let (cov, _) = cov_mat_from_rmsd_matrix(&matrix, 0.7).unwrap();
        assert_eq!(cov, 1.0);
        let (cov, _) = cov_mat_from_rmsd_matrix(&matrix, 0.49).unwrap();
        assert_eq!(cov, 0.0);
    }

    #[test]
    fn more_generated_clouds_never_hurt() {
        let reference = vec![rect(2.0, 1.0), rect(3.0, 1.4), rect(1.2, 0.8)];
        let small = vec![rect(2.4, 1.1), rect(2.8, 1.0)];
        let mut large = small.clone();
        large.push(rect(1.25, 0.85));
        large.push(rect(3.1, 1.35));
        for delta in [0.05, 0.2, 0.5, 1.0] {
            let (cov_s, mat_s) = cov_mat_metrics(&small, &reference, delta).unwrap();
            let (cov_l, mat_l) = cov_mat_metrics(&large, &reference, delta).unwrap();
            assert!(cov_l >= cov_s, "coverage dropped from {cov_s} to {cov_l}");
            assert!(mat_l <= mat_s + 1e-15, "matching rose from {mat_s} to {mat_l}");
        }
    }

    #[test]
    fn saturation_at_extreme_thresholds() {
        let reference = vec![rect(2.0, 1.0), rect(3.0, 1.4)];
        let generated = vec![rect(2.5, 1.2)];
        let (cov, _) = cov_mat_metrics(&generated, &reference, 1e6).unwrap();
        assert_eq!(cov, 1.0);
        let (cov, _) = cov_mat_metrics(&generated, &reference, 0.0).unwrap();
        assert_eq!(cov, 0.0);
        // A generated cloud identical to a reference is covered even at zero.
        let exact = vec![rect(2.0, 1.0)];
        let (cov, _) = cov_mat_metrics(&exact, &reference, 0.0).unwrap();
        assert_eq!(cov, 0.5);
    }

    #[test]
    fn metrics_ignore_rigid_motion_of_either_side() {
        let mut rng = ChaCha20Rng::seed_from_u64(40);
        let reference = vec![rect(2.0, 1.0), rect(3.0, 1.4)];
        let generated = vec![rect(2.25, 1.0), rect(3.3, 1.5)];
        let (cov0, mat0) = cov_mat_metrics(&generated, &reference, 0.5).unwrap();
        for _ in 0..10 {
            let moved: Vec<PointCloud> = generated
                .iter()
                .map(|c| {
                    let r = RotationMatrix::random(&mut rng);
                    let rc = r.rotate_rows(c);
                    PointCloud::new(
                        rc.points().iter().map(|p| [p[0] + 3.0, p[1] - 1.5, p[2] + 0.7]).collect(),
                    )
                    .unwrap()
                })
                .collect();
            let (cov, mat) = cov_mat_metrics(&moved, &reference, 0.5).unwrap();
            assert_eq!(cov, cov0);
            assert!((mat - mat0).abs() < 1e-9, "matching moved from {mat0} to {mat}");
        }
    }

    #[test]
    fn direction_matters() {
        // One generated cloud near both references, versus the transpose
        // view: every generated cloud must find a reference, not the other
        // way around.
        let reference = vec![rect(2.0, 1.0), rect(2.1, 1.0)];
        let generated = vec![rect(2.05, 1.0), rect(9.0, 4.0)];
        let (cov_forward, _) = cov_mat_metrics(&generated, &reference, 0.1).unwrap();
        assert_eq!(cov_forward, 1.0);
        let (cov_reverse, _) = cov_mat_metrics(&reference, &generated, 0.1).unwrap();
        assert_eq!(cov_reverse, 0.5);
    }

    #[test]
    fn best_rmsd_is_the_row_minimum() {
        let set = vec![rect(2.0, 1.0), rect(3.0, 1.4), rect(1.5, 0.9)];
        let probe = rect(2.9, 1.4);
        let d = best_rmsd(&probe, &set).unwrap();
        assert!((d - 0.1).abs() < 1e-12);
        assert!(best_rmsd(&probe, &[]).is_err());
    }

    #[test]
    fn report_aggregates_mean_and_median() {
        let entries = vec![
            EvalEntry {
                id: "a".into(),
                generated: vec![rect(2.25, 1.0)],
                reference: vec![rect(2.0, 1.0)],
            },
            EvalEntry {
                id: "b".into(),
                generated: vec![rect(3.6, 1.4)],
                reference: vec![rect(3.0, 1.4)],
            },
            EvalEntry {
                id: "c".into(),
                generated: vec![rect(1.2, 0.8)],
                reference: vec![rect(1.2, 0.9)],
            },
        ];
        let report = ensemble_report(&entries, 0.5).unwrap();
        assert_eq!(report.per_molecule.len(), 3);
        // Nearest distances: 0.25, 0.6, 0.1.
        assert!((report.mean_matching - (0.25 + 0.6 + 0.1) / 3.0).abs() < 1e-12);
        assert!((report.median_matching - 0.25).abs() < 1e-12);
        assert!((report.mean_coverage - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(report.median_coverage, 1.0);
        let json = serde_json::to_string(&report).unwrap();
        let back: EnsembleReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let a = vec![rect(2.0, 1.0)];
        assert!(cov_mat_metrics(&a, &[], 0.5).is_err());
        assert!(cov_mat_metrics(&[], &a, 0.5).is_err());
        assert!(cov_mat_metrics(&a, &a, -0.1).is_err());
        assert!(cov_mat_metrics(&a, &a, f64::NAN).is_err());
        // Mismatched point counts surface from the distance computation.
        let three = vec![PointCloud::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap()];
        assert!(cov_mat_metrics(&a, &three, 0.5).is_err());
        let ragged = vec![vec![0.1, 0.2], vec![0.3]];
        assert!(cov_mat_from_rmsd_matrix(&ragged, 0.5).is_err());
        let negative = vec![vec![-0.1]];
        assert!(cov_mat_from_rmsd_matrix(&negative, 0.5).is_err());
        assert!(ensemble_report(&[], 0.5).is_err());
    }
}
