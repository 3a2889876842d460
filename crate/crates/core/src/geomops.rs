//! Rigid-body geometry: centered point clouds, optimal rotations, RMSD.
//!
//! Conventions: a cloud is a K x 3 array of row points. `kabsch_rotation(p, q)`
//! returns the proper rotation R minimizing ||p - q R||_F, i.e. R acts on row
//! vectors from the right. Only det(R) = +1 rotations are considered, so a
//! mirror image of a chiral cloud keeps a positive aligned RMSD.

use crate::error::{Error, Result};
use nalgebra::Matrix3;
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pts: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(pts: Vec<[f64; 3]>) -> Result<Self> {
        if pts.is_empty() {
            return Err(Error::Geometry("point cloud must contain at least one point".into()));
        }
        for (i, p) in pts.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::Geometry(format!("non-finite coordinate at point {i}")));
            }
        }
        Ok(PointCloud { pts })
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.pts
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut acc = [KahanSum::default(), KahanSum::default(), KahanSum::default()];
        for p in &self.pts {
            for d in 0..3 {
                acc[d].add(p[d]);
            }
        }
        let k = self.pts.len() as f64;
        [acc[0].value() / k, acc[1].value() / k, acc[2].value() / k]
    }
}

/// Neumaier-compensated accumulator; keeps sums stable against ordering.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Translate a cloud so its centroid sits at the origin.
pub fn zero_com(cloud: &PointCloud) -> PointCloud {
    let c = cloud.centroid();
    let pts = cloud
        .pts
        .iter()
        .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect();
    PointCloud { pts }
}

/// A validated proper rotation (orthogonal, det +1).
#[derive(Debug, Clone, PartialEq)]
pub struct RotationMatrix {
    m: [[f64; 3]; 3],
}

const ORTHO_TOL: f64 = 1e-9;

impl RotationMatrix {
    pub fn new(m: [[f64; 3]; 3]) -> Result<Self> {
        let n = Matrix3::from_fn(|r, c| m[r][c]);
        let gram = n.transpose() * n;
        let mut dev: f64 = 0.0;
        for r in 0..3 {
            for c in 0..3 {
                let target = if r == c { 1.0 } else { 0.0 };
                dev = dev.max((gram[(r, c)] - target).abs());
            }
        }
        if dev > ORTHO_TOL {
            return Err(Error::Geometry(format!(
                "matrix is not orthogonal (max deviation {dev:.3e})"
            )));
        }
        let det = n.determinant();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::Geometry(format!("matrix determinant {det} is not +1")));
        }
        Ok(RotationMatrix { m })
    }

    pub fn identity() -> Self {
        RotationMatrix { m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] }
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.m
    }

    pub fn transpose(&self) -> RotationMatrix {
        let m = self.m;
        RotationMatrix {
            m: [
                [m[0][0], m[1][0], m[2][0]],
                [m[0][1], m[1][1], m[2][1]],
                [m[0][2], m[1][2], m[2][2]],
            ],
        }
    }

    /// Apply to a column vector: R v.
    pub fn apply(&self, v: [f64; 3]) -> [f64; 3] {
        let m = &self.m;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }

    /// Apply to every row of a cloud: rows become p_i R.
    pub fn rotate_rows(&self, cloud: &PointCloud) -> PointCloud {
        let m = &self.m;
        let pts = cloud
            .pts
            .iter()
            .map(|p| {
                [
                    p[0] * m[0][0] + p[1] * m[1][0] + p[2] * m[2][0],
                    p[0] * m[0][1] + p[1] * m[1][1] + p[2] * m[2][1],
                    p[0] * m[0][2] + p[1] * m[1][2] + p[2] * m[2][2],
                ]
            })
            .collect();
        PointCloud { pts }
    }

    pub fn compose(&self, other: &RotationMatrix) -> RotationMatrix {
        let a = &self.m;
        let b = &other.m;
        let mut m = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                m[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c] + a[r][2] * b[2][c];
            }
        }
        RotationMatrix { m }
    }

    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Result<Self> {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if n < 1e-12 || !n.is_finite() {
            return Err(Error::Geometry("rotation axis must be nonzero and finite".into()));
        }
        let (x, y, z) = (axis[0] / n, axis[1] / n, axis[2] / n);
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        Ok(RotationMatrix {
            m: [
                [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
                [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
                [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
            ],
        })
    }

    /// Recover (unit axis, angle in [0, pi]) with R = exp(angle [axis]_x).
    pub fn to_axis_angle(&self) -> ([f64; 3], f64) {
        let m = &self.m;
        let tr = m[0][0] + m[1][1] + m[2][2];
        let sk = [
            (m[2][1] - m[1][2]) / 2.0,
            (m[0][2] - m[2][0]) / 2.0,
            (m[1][0] - m[0][1]) / 2.0,
        ];
        let sin_t = (sk[0] * sk[0] + sk[1] * sk[1] + sk[2] * sk[2]).sqrt();
        let cos_t = (tr - 1.0) / 2.0;
        // atan2 of the (sin, cos) pair stays accurate at both ends of [0, pi],
        // where acos of the trace alone does not.
        let angle = sin_t.atan2(cos_t);
        if angle < 1e-12 {
            return ([0.0, 0.0, 1.0], 0.0);
        }
        if cos_t > -0.9 {
            // Normalizing the skew part by its own norm keeps the axis exactly
            // unit even when the angle is imprecise.
            return ([sk[0] / sin_t, sk[1] / sin_t, sk[2] / sin_t], angle);
        }
        // Near pi the skew part is tiny; recover the axis from the symmetric
        // part, where (R - cos I) / (1 - cos) = nn^T.
        let c = 1.0 - cos_t;
        let diag = [
            ((m[0][0] - cos_t) / c).max(0.0),
            ((m[1][1] - cos_t) / c).max(0.0),
            ((m[2][2] - cos_t) / c).max(0.0),
        ];
        let mut best = 0;
        for d in 1..3 {
            if diag[d] > diag[best] {
                best = d;
            }
        }
        let nb = diag[best].sqrt();
        let mut n = [0.0; 3];
        n[best] = nb;
        for j in 0..3 {
            if j != best {
                n[j] = (m[best][j] + m[j][best]) / (2.0 * c * nb);
            }
        }
        let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        for v in &mut n {
            *v /= norm;
        }
        // The symmetric part fixes the axis only up to sign.
        if sk[0] * n[0] + sk[1] * n[1] + sk[2] * n[2] < 0.0 {
            for v in &mut n {
                *v = -*v;
            }
        }
        (n, angle)
    }

    /// Haar-uniform random rotation from a normalized quaternion.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> RotationMatrix {
        loop {
            let q: [f64; 4] = [
                rng.sample(rand_distr::StandardNormal),
                rng.sample(rand_distr::StandardNormal),
                rng.sample(rand_distr::StandardNormal),
                rng.sample(rand_distr::StandardNormal),
            ];
            let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            if n < 1e-6 {
                continue;
            }
            let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
            return RotationMatrix {
                m: [
                    [
                        1.0 - 2.0 * (y * y + z * z),
                        2.0 * (x * y - w * z),
                        2.0 * (x * z + w * y),
                    ],
                    [
                        2.0 * (x * y + w * z),
                        1.0 - 2.0 * (x * x + z * z),
                        2.0 * (y * z - w * x),
                    ],
                    [
                        2.0 * (x * z - w * y),
                        2.0 * (y * z + w * x),
                        1.0 - 2.0 * (x * x + y * y),
                    ],
                ],
            };
        }
    }
}

fn check_same_size(p: &PointCloud, q: &PointCloud) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::Geometry(format!(
            "point count mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    Ok(())
}

/// Proper rotation R minimizing ||p - q R||_F. Inputs are used as given; center
/// them first if translation should not contribute.
pub fn kabsch_rotation(p: &PointCloud, q: &PointCloud) -> Result<RotationMatrix> {
    check_same_size(p, q)?;
    // Column-vector problem: S q_i ~ p_i with S = V diag(1,1,d) U^T from the
    // SVD of H = sum_i q_i p_i^T; the row-convention answer is R = S^T.
    let mut h: Matrix3<f64> = Matrix3::zeros();
    for (pi, qi) in p.pts.iter().zip(&q.pts) {
        for r in 0..3 {
            for c in 0..3 {
                h[(r, c)] += qi[r] * pi[c];
            }
        }
    }
    let svd = h.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::Geometry("SVD failed to produce U".into()))?;
    let vt = svd.v_t.ok_or_else(|| Error::Geometry("SVD failed to produce V^T".into()))?;
    let v = vt.transpose();
    let vu: Matrix3<f64> = v * u.transpose();
    let d = vu.determinant();
    let sign = if d < 0.0 { -1.0 } else { 1.0 };
    let mut v_adj = v;
    for r in 0..3 {
        v_adj[(r, 2)] *= sign;
    }
    let s: Matrix3<f64> = v_adj * u.transpose();
    let mut m = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            m[r][c] = s[(c, r)];
        }
    }
    RotationMatrix::new(m)
}

/// RMSD after centering both clouds and optimally rotating q onto p.
pub fn aligned_rmsd(p: &PointCloud, q: &PointCloud) -> Result<f64> {
    check_same_size(p, q)?;
    let pc = zero_com(p);
    let qc = zero_com(q);
    let r = kabsch_rotation(&pc, &qc)?;
    let qr = r.rotate_rows(&qc);
    let mut acc = KahanSum::default();
    for (pi, qi) in pc.pts.iter().zip(&qr.pts) {
        for d in 0..3 {
            let diff = pi[d] - qi[d];
            acc.add(diff * diff);
        }
    }
    Ok((acc.value() / p.len() as f64).sqrt())
}

/// Pairwise aligned RMSD between every noise cloud and every conformer.
/// Entry (i, j) is aligned_rmsd(noise[i], conformers[j]).
pub fn conformer_cost_matrix(
    noise: &[PointCloud],
    conformers: &[PointCloud],
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(noise.len());
    for n in noise {
        let mut row = Vec::with_capacity(conformers.len());
        for c in conformers {
            row.push(aligned_rmsd(n, c)?);
        }
        out.push(row);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(pts.to_vec()).unwrap()
    }

    fn random_cloud(rng: &mut ChaCha20Rng, k: usize) -> PointCloud {
        let pts = (0..k)
            .map(|_| {
                [
                    rng.sample(rand_distr::StandardNormal),
                    rng.sample(rand_distr::StandardNormal),
                    rng.sample(rand_distr::StandardNormal),
                ]
            })
            .collect();
        PointCloud::new(pts).unwrap()
    }

    #[test]
    fn rejects_empty_and_nonfinite() {
        assert!(PointCloud::new(vec![]).is_err());
        assert!(PointCloud::new(vec![[f64::NAN, 0.0, 0.0]]).is_err());
        assert!(PointCloud::new(vec![[f64::INFINITY, 0.0, 0.0]]).is_err());
    }

    #[test]
    fn zero_com_single_point_lands_at_origin() {
        let c = zero_com(&cloud(&[[3.5, -2.0, 7.25]]));
        assert_eq!(c.points()[0], [0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_com_is_idempotent() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..50 {
            let x = random_cloud(&mut rng, 6);
            let once = zero_com(&x);
            let twice = zero_com(&once);
            for (a, b) in once.points().iter().zip(twice.points()) {
                for d in 0..3 {
                    assert!((a[d] - b[d]).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn kabsch_on_identical_clouds_is_identity() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let x = zero_com(&random_cloud(&mut rng, 5));
        let r = kabsch_rotation(&x, &x).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((r.matrix()[i][j] - target).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kabsch_recovers_quarter_turn_about_z() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let p = zero_com(&random_cloud(&mut rng, 5));
        let rz = RotationMatrix::from_axis_angle([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2)
            .unwrap();
        // q R should reproduce p, so q = p R^T.
        let q = rz.transpose().rotate_rows(&p);
        let r = kabsch_rotation(&p, &q).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((r.matrix()[i][j] - rz.matrix()[i][j]).abs() < 1e-12);
            }
        }
        assert!(aligned_rmsd(&p, &q).unwrap() < 1e-12);
    }

    #[test]
    fn kabsch_handles_collinear_clouds() {
        let p = cloud(&[[-1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let q = cloud(&[[0.0, -1.0, 0.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let r = kabsch_rotation(&p, &q).unwrap();
        let m = Matrix3::from_fn(|a, b| r.matrix()[a][b]);
        assert!((m.determinant() - 1.0).abs() < 1e-9);
        assert!(aligned_rmsd(&p, &q).unwrap() < 1e-12);
    }

    #[test]
    fn size_mismatch_is_an_error() {
        let p = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let q = cloud(&[[0.0, 0.0, 0.0]]);
        assert!(kabsch_rotation(&p, &q).is_err());
        assert!(aligned_rmsd(&p, &q).is_err());
    }

    #[test]
    fn rotation_matrix_rejects_improper_and_skewed() {
        let mirror = [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(RotationMatrix::new(mirror).is_err());
        let skew = [[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(RotationMatrix::new(skew).is_err());
    }

    #[test]
    fn axis_angle_round_trip() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for _ in 0..200 {
            let r = RotationMatrix::random(&mut rng);
            let (axis, angle) = r.to_axis_angle();
            let back = RotationMatrix::from_axis_angle(axis, angle).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    assert!((r.matrix()[i][j] - back.matrix()[i][j]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn rigid_motions_have_zero_aligned_rmsd() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        for _ in 0..50 {
            let x = random_cloud(&mut rng, 7);
            let r = RotationMatrix::random(&mut rng);
            let shift: [f64; 3] = [
                rng.sample(rand_distr::StandardNormal),
                rng.sample(rand_distr::StandardNormal),
                rng.sample(rand_distr::StandardNormal),
            ];
            let moved = PointCloud::new(
                r.transpose()
                    .rotate_rows(&x)
                    .points()
                    .iter()
                    .map(|p| [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]])
                    .collect(),
            )
            .unwrap();
            assert!(aligned_rmsd(&x, &moved).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn chiral_mirror_keeps_positive_rmsd() {
        // Asymmetric 4-point cloud and its reflection through the xy plane.
        let p = cloud(&[
            [0.0, 0.0, 0.0],
            [1.5, 0.0, 0.0],
            [0.0, 1.1, 0.0],
            [0.3, 0.4, 1.2],
        ]);
        let mirrored = PointCloud::new(
            p.points().iter().map(|q| [q[0], q[1], -q[2]]).collect(),
        )
        .unwrap();
        assert!(aligned_rmsd(&p, &mirrored).unwrap() > 0.1);
    }

    /// Two-stage SO(3) search: coarse scan, then shrinking local grids.
    fn grid_search_rmsd(p: &PointCloud, q: &PointCloud, coarse: usize) -> f64 {
        let pc = zero_com(p);
        let qc = zero_com(q);
        let eval = |r: &RotationMatrix| -> f64 {
            let qr = r.rotate_rows(&qc);
            let mut acc = 0.0;
            for (a, b) in pc.points().iter().zip(qr.points()) {
                for d in 0..3 {
                    let diff = a[d] - b[d];
                    acc += diff * diff;
                }
            }
            (acc / pc.len() as f64).sqrt()
        };
        let mut best = (f64::INFINITY, RotationMatrix::identity());
        let tau = std::f64::consts::TAU;
        for ia in 0..coarse {
            let alpha = tau * ia as f64 / coarse as f64;
            for ib in 0..coarse / 2 {
                let beta = std::f64::consts::PI * (ib as f64 + 0.5) / (coarse / 2) as f64;
                for ic in 0..coarse {
                    let gamma = tau * ic as f64 / coarse as f64;
                    let r = euler_zyz(alpha, beta, gamma);
                    let v = eval(&r);
                    if v < best.0 {
                        best = (v, r);
                    }
                }
            }
        }
        let mut width = tau / coarse as f64;
        for _ in 0..6 {
            let center = best.1.clone();
            for ix in -2i32..=2 {
                for iy in -2i32..=2 {
                    for iz in -2i32..=2 {
                        let d = RotationMatrix::from_axis_angle(
                            [1.0, 0.0, 0.0],
                            width * ix as f64 / 2.0,
                        )
                        .unwrap()
                        .compose(
                            &RotationMatrix::from_axis_angle(
                                [0.0, 1.0, 0.0],
                                width * iy as f64 / 2.0,
                            )
                            .unwrap(),
                        )
                        .compose(
                            &RotationMatrix::from_axis_angle(
                                [0.0, 0.0, 1.0],
                                width * iz as f64 / 2.0,
                            )
                            .unwrap(),
                        );
                        let r = d.compose(&center);
                        let v = eval(&r);
                        if v < best.0 {
                            best = (v, r);
                        }
                    }
                }
            }
            width /= 2.0;
        }
        best.0
    }

    fn euler_zyz(alpha: f64, beta: f64, gamma: f64) -> RotationMatrix {
        RotationMatrix::from_axis_angle([0.0, 0.0, 1.0], alpha)
            .unwrap()
            .compose(&RotationMatrix::from_axis_angle([0.0, 1.0, 0.0], beta).unwrap())
            .compose(&RotationMatrix::from_axis_angle([0.0, 0.0, 1.0], gamma).unwrap())
    }

    #[test]
    fn kabsch_matches_rotation_grid_search() {
        let mut rng = ChaCha20Rng::seed_from_u64(33);
        for _ in 0..5 {
            let p = random_cloud(&mut rng, 5);
            let q = random_cloud(&mut rng, 5);
            let exact = aligned_rmsd(&p, &q).unwrap();
            let searched = grid_search_rmsd(&p, &q, 24);
            assert!(
                (exact - searched).abs() < 1e-3,
                "kabsch {exact} vs grid {searched}"
            );
            assert!(exact <= searched + 1e-9);
        }
    }

    #[test]
    fn triangle_pair_matches_hand_alignment() {
        // Isosceles triangles differing by an in-plane stretch; the optimal
        // rotation is the identity once both are centered, so the RMSD can be
        // recomputed directly from the residuals.
        let p = cloud(&[[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.9, 0.0]]);
        let q = cloud(&[[-1.2, 0.0, 0.0], [1.2, 0.0, 0.0], [0.0, 0.9, 0.0]]);
        let pc = zero_com(&p);
        let qc = zero_com(&q);
        let mut acc = 0.0;
        for (a, b) in pc.points().iter().zip(qc.points()) {
            for d in 0..3 {
                let diff = a[d] - b[d];
                acc += diff * diff;
            }
        }
        let by_hand = (acc / 3.0).sqrt();
        let got = aligned_rmsd(&p, &q).unwrap();
        assert!((got - by_hand).abs() < 1e-9, "got {got}, hand {by_hand}");
    }

    #[test]
    fn cost_matrix_matches_elementwise_recomputation() {
        let mut rng = ChaCha20Rng::seed_from_u64(55);
        let noise: Vec<PointCloud> = (0..3).map(|_| random_cloud(&mut rng, 4)).collect();
        let confs: Vec<PointCloud> = (0..4).map(|_| random_cloud(&mut rng, 4)).collect();
        let m = conformer_cost_matrix(&noise, &confs).unwrap();
        assert_eq!(m.len(), 3);
        for (i, row) in m.iter().enumerate() {
            assert_eq!(row.len(), 4);
            for (j, v) in row.iter().enumerate() {
                let direct = aligned_rmsd(&noise[i], &confs[j]).unwrap();
                assert_eq!(*v, direct);
                assert!(*v >= 0.0);
            }
        }
    }

    proptest! {
        #[test]
        fn zero_com_preserves_pairwise_distances(
            raw in proptest::collection::vec(
                (-50.0f64..50.0, -50.0f64..50.0, -50.0f64..50.0), 2..8)
        ) {
            let pts: Vec<[f64; 3]> = raw.iter().map(|&(x, y, z)| [x, y, z]).collect();
            let c = PointCloud::new(pts.clone()).unwrap();
            let centered = zero_com(&c);
            for i in 0..pts.len() {
                for j in (i + 1)..pts.len() {
                    let d0: f64 = (0..3).map(|d| (pts[i][d] - pts[j][d]).powi(2)).sum();
                    let a = centered.points()[i];
                    let b = centered.points()[j];
                    let d1: f64 = (0..3).map(|d| (a[d] - b[d]).powi(2)).sum();
                    prop_assert!((d0.sqrt() - d1.sqrt()).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn aligned_rmsd_is_symmetric(seed in 0u64..1000) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let p = random_cloud(&mut rng, 5);
            let q = random_cloud(&mut rng, 5);
            let ab = aligned_rmsd(&p, &q).unwrap();
            let ba = aligned_rmsd(&q, &p).unwrap();
            prop_assert!((ab - ba).abs() < 1e-9);
        }

        #[test]
        fn kabsch_output_is_always_a_proper_rotation(seed in 0u64..1000) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let k = 2 + (seed as usize % 6);
            let p = random_cloud(&mut rng, k);
            let q = random_cloud(&mut rng, k);
            // The constructor validates orthogonality and det = +1.
            let r = kabsch_rotation(&p, &q);
            prop_assert!(r.is_ok());
        }
    }
}
