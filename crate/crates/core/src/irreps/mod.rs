//! Rotation-equivariant feature machinery: real spherical harmonics, the
//! per-degree rotation blocks acting on them, and degree-coupling tensor
//! products.
//!
//! Features are grouped by degree l, with a uniform channel count per degree
//! and 2l+1 components per channel. The tensor product couples a feature
//! tensor with a filter tensor channel by channel.

pub mod cg;
pub mod sh;
pub mod wigner;

pub use cg::{clebsch_gordan, real_cg, RealCg};
pub use sh::{sh_eval, sh_eval_all, MAX_DEGREE};
pub use wigner::{wigner_d, WignerD};

use crate::error::{Error, Result};
use crate::geomops::RotationMatrix;
use std::sync::Arc;

/// Channel counts by degree; index l holds the number of channels carrying
/// degree-l components. Zero means the degree is absent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IrrepsLayout {
    counts: Vec<usize>,
}

impl IrrepsLayout {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() || counts.iter().all(|&c| c == 0) {
            return Err(Error::Irreps("layout has no channels".into()));
        }
        if counts.len() > MAX_DEGREE + 1 {
            return Err(Error::Irreps(format!(
                "layout extends past degree {MAX_DEGREE}"
            )));
        }
        Ok(IrrepsLayout { counts })
    }

    /// Same channel count for every degree up to l_max.
    pub fn uniform(l_max: usize, channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Irreps("layout has no channels".into()));
        }
        IrrepsLayout::new(vec![channels; l_max + 1])
    }

    /// One scalar block per degree up to l_max, as produced by evaluating
    /// spherical harmonics along an edge.
    pub fn single(l_max: usize) -> Result<Self> {
        IrrepsLayout::new(vec![1; l_max + 1])
    }

    pub fn max_degree(&self) -> usize {
        self.counts.len() - 1
    }

    pub fn channels(&self, l: usize) -> usize {
        self.counts.get(l).copied().unwrap_or(0)
    }

    pub fn degrees(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.counts.len()).filter(|&l| self.counts[l] > 0)
    }

    /// Total component count across degrees and channels.
    pub fn dim(&self) -> usize {
        self.counts
            .iter()
            .enumerate()
            .map(|(l, &c)| c * (2 * l + 1))
            .sum()
    }

    /// Offset of (degree, channel, component) in a flat vector laid out
    /// degree-major, then channel, then component m from -l.
    pub fn offset(&self, l: usize, channel: usize, comp: usize) -> usize {
        debug_assert!(channel < self.channels(l));
        debug_assert!(comp < 2 * l + 1);
        let mut off = 0;
        for d in 0..l {
            off += self.counts[d] * (2 * d + 1);
        }
        off + channel * (2 * l + 1) + comp
    }
}

/// One feature vector in a layout.
#[derive(Debug, Clone, PartialEq)]
pub struct IrrepsTensor {
    layout: IrrepsLayout,
    data: Vec<f64>,
}

impl IrrepsTensor {
    pub fn zeros(layout: IrrepsLayout) -> Self {
        let dim = layout.dim();
        IrrepsTensor { layout, data: vec![0.0; dim] }
    }

    pub fn from_data(layout: IrrepsLayout, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.dim() {
            return Err(Error::Irreps(format!(
                "data length {} does not match layout dimension {}",
                data.len(),
                layout.dim()
            )));
        }
        Ok(IrrepsTensor { layout, data })
    }

    pub fn layout(&self) -> &IrrepsLayout {
        &self.layout
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, l: usize, channel: usize, comp: usize) -> f64 {
        self.data[self.layout.offset(l, channel, comp)]
    }

    pub fn set(&mut self, l: usize, channel: usize, comp: usize, v: f64) {
        let off = self.layout.offset(l, channel, comp);
        self.data[off] = v;
    }

    /// Block of 2l+1 components for one (degree, channel).
    pub fn block(&self, l: usize, channel: usize) -> &[f64] {
        let off = self.layout.offset(l, channel, 0);
        &self.data[off..off + 2 * l + 1]
    }

    /// Apply the block-diagonal rotation action.
    pub fn rotate(&self, r: &RotationMatrix) -> Result<IrrepsTensor> {
        let mut out = self.clone();
        for l in self.layout.degrees() {
            if l == 0 {
                continue;
            }
            let d = wigner_d(l, r)?;
            for c in 0..self.layout.channels(l) {
                let rotated = d.apply(self.block(l, c));
                let off = self.layout.offset(l, c, 0);
                out.data[off..off + 2 * l + 1].copy_from_slice(&rotated);
            }
        }
        Ok(out)
    }
}

/// One coupling path of a tensor product: feature degree l1 times filter
/// degree l2 into output degree l3.
#[derive(Debug, Clone)]
pub struct TpPath {
    pub l1: usize,
    pub l2: usize,
    pub l3: usize,
    pub table: Arc<RealCg>,
    /// Start of this path's weights in the flat weight vector.
    pub weight_offset: usize,
}

/// Channel-matched tensor product between a feature layout and a filter
/// layout. Every degree pair that can couple into a requested output degree
/// contributes one path with a learnable weight per channel; each output
/// degree is scaled by the inverse square root of its path count.
#[derive(Debug, Clone)]
pub struct TensorProductPlan {
    feature: IrrepsLayout,
    filter: IrrepsLayout,
    output: IrrepsLayout,
    channels: usize,
    filter_shared: bool,
    paths: Vec<TpPath>,
    norm: Vec<f64>,
}

impl TensorProductPlan {
    pub fn new(feature: IrrepsLayout, filter: IrrepsLayout, output: IrrepsLayout) -> Result<Self> {
        let channels = feature
            .degrees()
            .map(|l| feature.channels(l))
            .max()
            .expect("layout validated non-empty");
        for l in feature.degrees() {
            if feature.channels(l) != channels {
                return Err(Error::Irreps(
                    "feature layout must carry the same channel count on every degree".into(),
                ));
            }
        }
        for l in output.degrees() {
            if output.channels(l) != channels {
                return Err(Error::Irreps(
                    "output layout must match the feature channel count".into(),
                ));
            }
        }
        let filter_channels = filter
            .degrees()
            .map(|l| filter.channels(l))
            .max()
            .expect("layout validated non-empty");
        for l in filter.degrees() {
            if filter.channels(l) != filter_channels {
                return Err(Error::Irreps(
                    "filter layout must carry the same channel count on every degree".into(),
                ));
            }
        }
        let filter_shared = filter_channels == 1;
        if !filter_shared && filter_channels != channels {
            return Err(Error::Irreps(format!(
                "filter channel count {filter_channels} must be 1 or match the feature count {channels}"
            )));
        }

        let mut paths = Vec::new();
        let mut weight_offset = 0;
        let mut fan_in = vec![0usize; output.max_degree() + 1];
        for l3 in output.degrees() {
            for l1 in feature.degrees() {
                for l2 in filter.degrees() {
                    if l1.abs_diff(l2) <= l3 && l3 <= l1 + l2 {
                        paths.push(TpPath {
                            l1,
                            l2,
                            l3,
                            table: real_cg(l1, l2, l3)?,
                            weight_offset,
                        });
                        weight_offset += channels;
                        fan_in[l3] += 1;
                    }
                }
            }
        }
        let mut norm = vec![0.0; output.max_degree() + 1];
        for l3 in output.degrees() {
            if fan_in[l3] == 0 {
                return Err(Error::Irreps(format!(
                    "output degree {l3} is unreachable from the given feature and filter degrees"
                )));
            }
            norm[l3] = 1.0 / (fan_in[l3] as f64).sqrt();
        }
        Ok(TensorProductPlan {
            feature,
            filter,
            output,
            channels,
            filter_shared,
            paths,
            norm,
        })
    }

    pub fn feature_layout(&self) -> &IrrepsLayout {
        &self.feature
    }

    pub fn filter_layout(&self) -> &IrrepsLayout {
        &self.filter
    }

    pub fn output_layout(&self) -> &IrrepsLayout {
        &self.output
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn filter_shared(&self) -> bool {
        self.filter_shared
    }

    pub fn paths(&self) -> &[TpPath] {
        &self.paths
    }

    pub fn output_norm(&self, l3: usize) -> f64 {
        self.norm[l3]
    }

    pub fn weight_count(&self) -> usize {
        self.paths.len() * self.channels
    }

    /// Apply the product to single feature and filter vectors.
    pub fn apply(
        &self,
        feature: &IrrepsTensor,
        filter: &IrrepsTensor,
        weights: &[f64],
    ) -> Result<IrrepsTensor> {
        if feature.layout() != &self.feature {
            return Err(Error::Irreps("feature layout mismatch".into()));
        }
        if filter.layout() != &self.filter {
            return Err(Error::Irreps("filter layout mismatch".into()));
        }
        if weights.len() != self.weight_count() {
            return Err(Error::Irreps(format!(
                "expected {} weights, got {}",
                self.weight_count(),
                weights.len()
            )));
        }
        let mut out = IrrepsTensor::zeros(self.output.clone());
        for path in &self.paths {
            let scale = self.norm[path.l3];
            for c in 0..self.channels {
                let w = weights[path.weight_offset + c] * scale;
                if w == 0.0 {
                    continue;
                }
                let fc = if self.filter_shared { 0 } else { c };
                let coupled = path.table.couple(feature.block(path.l1, c), filter.block(path.l2, fc));
                let off = self.output.offset(path.l3, c, 0);
                for (k, v) in coupled.iter().enumerate() {
                    out.data[off + k] += w * v;
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn random_tensor(layout: &IrrepsLayout, rng: &mut ChaCha20Rng) -> IrrepsTensor {
        let data = (0..layout.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        IrrepsTensor::from_data(layout.clone(), data).unwrap()
    }

    #[test]
    fn layout_dims_and_offsets() {
        let l = IrrepsLayout::new(vec![2, 3, 1]).unwrap();
        assert_eq!(l.dim(), 2 + 9 + 5);
        assert_eq!(l.offset(0, 1, 0), 1);
        assert_eq!(l.offset(1, 0, 0), 2);
        assert_eq!(l.offset(1, 2, 1), 2 + 6 + 1);
        assert_eq!(l.offset(2, 0, 4), 2 + 9 + 4);
        assert_eq!(l.max_degree(), 2);
        assert!(IrrepsLayout::new(vec![]).is_err());
        assert!(IrrepsLayout::new(vec![0, 0]).is_err());
        assert!(IrrepsLayout::new(vec![1; MAX_DEGREE + 2]).is_err());
    }

    #[test]
    fn plan_validates_shapes() {
        let f = IrrepsLayout::uniform(1, 4).unwrap();
        let g = IrrepsLayout::single(1).unwrap();
        assert!(TensorProductPlan::new(f.clone(), g.clone(), IrrepsLayout::uniform(2, 4).unwrap()).is_ok());
        // Ragged feature channels are rejected.
        let ragged = IrrepsLayout::new(vec![4, 2]).unwrap();
        assert!(TensorProductPlan::new(ragged, g.clone(), IrrepsLayout::uniform(1, 4).unwrap()).is_err());
        // Output channels must match.
        assert!(TensorProductPlan::new(f.clone(), g.clone(), IrrepsLayout::uniform(1, 3).unwrap()).is_err());
        // Filter with 2 channels against 4 feature channels is rejected.
        let g2 = IrrepsLayout::new(vec![2, 2]).unwrap();
        assert!(TensorProductPlan::new(f.clone(), g2, IrrepsLayout::uniform(1, 4).unwrap()).is_err());
        // Scalar-only inputs cannot reach an l=2 output.
        let s = IrrepsLayout::new(vec![4]).unwrap();
        let gs = IrrepsLayout::new(vec![1]).unwrap();
        let out = IrrepsLayout::new(vec![4, 0, 4]).unwrap();
        assert!(TensorProductPlan::new(s, gs, out).is_err());
    }

    #[test]
    fn weight_count_and_path_enumeration() {
        let f = IrrepsLayout::uniform(1, 3).unwrap();
        let g = IrrepsLayout::single(1).unwrap();
        let out = IrrepsLayout::uniform(1, 3).unwrap();
        let plan = TensorProductPlan::new(f, g, out).unwrap();
        // Into l3=0: (0,0), (1,1). Into l3=1: (0,1), (1,0), (1,1).
        assert_eq!(plan.paths().len(), 5);
        assert_eq!(plan.weight_count(), 15);
        assert!((plan.output_norm(0) - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!((plan.output_norm(1) - 1.0 / 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn product_is_bilinear() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let f = IrrepsLayout::uniform(2, 2).unwrap();
        let g = IrrepsLayout::single(2).unwrap();
        let out = IrrepsLayout::uniform(2, 2).unwrap();
        let plan = TensorProductPlan::new(f.clone(), g.clone(), out).unwrap();
        let w: Vec<f64> = (0..plan.weight_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = random_tensor(&f, &mut rng);
        let b = random_tensor(&f, &mut rng);
        let x = random_tensor(&g, &mut rng);
        let (alpha, beta) = (0.7, -1.3);
        let mixed = IrrepsTensor::from_data(
            f.clone(),
            a.data().iter().zip(b.data()).map(|(p, q)| alpha * p + beta * q).collect(),
        )
        .unwrap();
        let lhs = plan.apply(&mixed, &x, &w).unwrap();
        let ya = plan.apply(&a, &x, &w).unwrap();
        let yb = plan.apply(&b, &x, &w).unwrap();
        for i in 0..lhs.data().len() {
            let expect = alpha * ya.data()[i] + beta * yb.data()[i];
            assert!((lhs.data()[i] - expect).abs() < 1e-12);
        }
        // Linear in the weights too.
        let w2: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
        let doubled = plan.apply(&a, &x, &w2).unwrap();
        for i in 0..doubled.data().len() {
            assert!((doubled.data()[i] - 2.0 * ya.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn product_commutes_with_rotation() {
        let mut rng = ChaCha20Rng::seed_from_u64(22);
        let f = IrrepsLayout::uniform(2, 3).unwrap();
        let g = IrrepsLayout::single(2).unwrap();
        let out = IrrepsLayout::uniform(2, 3).unwrap();
        let plan = TensorProductPlan::new(f.clone(), g.clone(), out).unwrap();
        let w: Vec<f64> = (0..plan.weight_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        for _ in 0..10 {
            let r = RotationMatrix::random(&mut rng);
            let a = random_tensor(&f, &mut rng);
            let x = random_tensor(&g, &mut rng);
            let lhs = plan.apply(&a.rotate(&r).unwrap(), &x.rotate(&r).unwrap(), &w).unwrap();
            let rhs = plan.apply(&a, &x, &w).unwrap().rotate(&r).unwrap();
            for (p, q) in lhs.data().iter().zip(rhs.data()) {
                assert!((p - q).abs() < 1e-10, "{p} vs {q}");
            }
        }
    }

    #[test]
    fn scalar_output_of_two_vectors_tracks_dot() {
        // Feature and filter both pure l=1; output l=0 through the single
        // (1,1)->0 path.
        let f = IrrepsLayout::new(vec![0, 1]).unwrap();
        let g = IrrepsLayout::new(vec![0, 1]).unwrap();
        let out = IrrepsLayout::new(vec![1]).unwrap();
        let plan = TensorProductPlan::new(f.clone(), g.clone(), out).unwrap();
        assert_eq!(plan.weight_count(), 1);
        let a = IrrepsTensor::from_data(f.clone(), vec![0.2, -0.5, 1.1]).unwrap();
        let b = IrrepsTensor::from_data(g.clone(), vec![-0.7, 0.4, 0.9]).unwrap();
        let got = plan.apply(&a, &b, &[1.0]).unwrap().data()[0];
        let dot: f64 = a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum();
        assert!((got - -dot / 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn vector_output_of_two_vectors_tracks_cross() {
        let f = IrrepsLayout::new(vec![0, 1]).unwrap();
        let g = IrrepsLayout::new(vec![0, 1]).unwrap();
        let out = IrrepsLayout::new(vec![0, 1]).unwrap();
        let plan = TensorProductPlan::new(f.clone(), g.clone(), out).unwrap();
        // Components are (y, z, x); the coupled output must be proportional
        // to the cross product expressed in the same order.
        let av = [0.3f64, -1.0, 0.8];
        let bv = [-0.6f64, 0.2, 0.5];
        let a = IrrepsTensor::from_data(f.clone(), vec![av[1], av[2], av[0]]).unwrap();
        let b = IrrepsTensor::from_data(g.clone(), vec![bv[1], bv[2], bv[0]]).unwrap();
        let got = plan.apply(&a, &b, &[1.0]).unwrap();
        let cross = [
            av[1] * bv[2] - av[2] * bv[1],
            av[2] * bv[0] - av[0] * bv[2],
            av[0] * bv[1] - av[1] * bv[0],
        ];
        let expect_order = [cross[1], cross[2], cross[0]];
        // Fix the proportionality constant from the first component pair.
        let k = got.data()[0] / expect_order[0];
        assert!((k.abs() - 1.0 / 2f64.sqrt()).abs() < 1e-10);
        for (p, q) in got.data().iter().zip(&expect_order) {
            assert!((p - k * q).abs() < 1e-10);
        }
    }
}
