//! Reverse-mode tape for the network ops used here.
//!
//! Values are dense row-major f64 matrices. A tape records ops as they run;
//! backward walks the record in reverse and accumulates gradients for leaves
//! marked as parameters. Geometry inputs (coordinates, edge harmonics, times)
//! enter as constants, so only parameter gradients are ever materialized.

use crate::error::{Error, Result};
use crate::irreps::RealCg;
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Mat {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Mat> {
        if data.len() != rows * cols {
            return Err(Error::Model(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Mat {
        let mut m = Mat::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn add_at(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] += v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn scalar(&self) -> f64 {
        debug_assert_eq!((self.rows, self.cols), (1, 1));
        self.data[0]
    }
}

pub type NodeId = usize;

/// Mean of one column over a row range, summed in value order so the result
/// does not depend on how the rows are arranged.
fn segment_mean(m: &Mat, start: usize, end: usize, c: usize) -> f64 {
    let mut vals: Vec<f64> = (start..end).map(|r| m.get(r, c)).collect();
    vals.sort_unstable_by(f64::total_cmp);
    let mut acc = crate::geomops::KahanSum::default();
    for v in vals {
        acc.add(v);
    }
    acc.value() / (end - start) as f64
}

/// Tensor-product path metadata for the message op: which feature and
/// harmonic slots couple, through which table, weighted by which row of the
/// weight matrix.
#[derive(Debug, Clone)]
pub struct TpPathSpec {
    pub weight_row: usize,
    pub feat_slot: usize,
    pub sh_slot: usize,
    pub table: Arc<RealCg>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    RowBroadcastAdd(NodeId, NodeId),
    Silu(NodeId),
    ConcatCols(Vec<NodeId>),
    GatherRows(NodeId, Arc<Vec<usize>>),
    ScatterAddRows(NodeId, Arc<Vec<usize>>),
    EmbedRows(NodeId, Arc<Vec<usize>>),
    GateMul { gate: NodeId, feat: NodeId, comps: usize },
    ChannelMix { weight: NodeId, feat: NodeId, comps: usize },
    DegreeRmsNorm { feat: NodeId, eps: f64 },
    SegmentCenter { feat: NodeId, segments: Arc<Vec<(usize, usize)>> },
    TpOut {
        feats: Vec<NodeId>,
        shs: Vec<NodeId>,
        weights: NodeId,
        paths: Vec<TpPathSpec>,
        out_comps: usize,
        channels: usize,
        norm: f64,
    },
    SumSq { x: NodeId, target: Arc<Mat>, weight: f64 },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-cell compensated accumulator grid, so row order does not disturb sums.
struct CompensatedMat {
    sum: Mat,
    comp: Mat,
}

impl CompensatedMat {
    fn new(rows: usize, cols: usize) -> Self {
        CompensatedMat { sum: Mat::zeros(rows, cols), comp: Mat::zeros(rows, cols) }
    }

    fn add(&mut self, r: usize, c: usize, v: f64) {
        let i = r * self.sum.cols + c;
        let s = self.sum.data[i];
        let t = s + v;
        self.comp.data[i] += if s.abs() >= v.abs() { (s - t) + v } else { (v - t) + s };
        self.sum.data[i] = t;
    }

    fn finish(mut self) -> Mat {
        for (s, c) in self.sum.data.iter_mut().zip(&self.comp.data) {
            *s += c;
        }
        self.sum
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "add shape mismatch");
        let mut out = va.clone();
        for (o, x) in out.data.iter_mut().zip(&vb.data) {
            *o += x;
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let mut out = self.nodes[a].value.clone();
        for o in out.data.iter_mut() {
            *o *= k;
        }
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, k), ng)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.cols, vb.rows, "matmul inner dimension mismatch");
        let mut out = Mat::zeros(va.rows, vb.cols);
        for r in 0..va.rows {
            for k in 0..va.cols {
                let x = va.get(r, k);
                if x == 0.0 {
                    continue;
                }
                for c in 0..vb.cols {
                    out.add_at(r, c, x * vb.get(k, c));
                }
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// Add a single-row bias to every row.
    pub fn row_broadcast_add(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let (vx, vb) = (&self.nodes[x].value, &self.nodes[bias].value);
        assert_eq!(vb.rows, 1, "bias must be a single row");
        assert_eq!(vx.cols, vb.cols, "bias width mismatch");
        let mut out = vx.clone();
        for r in 0..out.rows {
            for c in 0..out.cols {
                out.add_at(r, c, vb.get(0, c));
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        self.push(out, Op::RowBroadcastAdd(x, bias), ng)
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let vx = &self.nodes[x].value;
        let mut out = vx.clone();
        for o in out.data.iter_mut() {
            let s = 1.0 / (1.0 + (-*o).exp());
            *o *= s;
        }
        let ng = self.needs(x);
        self.push(out, Op::Silu(x), ng)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0]].value.rows;
        let cols: usize = parts.iter().map(|&p| self.nodes[p].value.cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = &self.nodes[p].value;
            assert_eq!(v.rows, rows, "concat row mismatch");
            for r in 0..rows {
                for c in 0..v.cols {
                    out.set(r, off + c, v.get(r, c));
                }
            }
            off += v.cols;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Row i of the output is row index[i] of the input.
    pub fn gather_rows(&mut self, x: NodeId, index: Arc<Vec<usize>>) -> NodeId {
        let vx = &self.nodes[x].value;
        let mut out = Mat::zeros(index.len(), vx.cols);
        for (r, &src) in index.iter().enumerate() {
            assert!(src < vx.rows, "gather index out of range");
            for c in 0..vx.cols {
                out.set(r, c, vx.get(src, c));
            }
        }
        let ng = self.needs(x);
        self.push(out, Op::GatherRows(x, index), ng)
    }

    /// Accumulate row i of the input into row index[i] of an output with
    /// `out_rows` rows, with compensated per-cell summation.
    pub fn scatter_add_rows(&mut self, x: NodeId, index: Arc<Vec<usize>>, out_rows: usize) -> NodeId {
        let vx = &self.nodes[x].value;
        assert_eq!(vx.rows, index.len(), "one index per input row");
        let mut acc = CompensatedMat::new(out_rows, vx.cols);
        for (r, &dst) in index.iter().enumerate() {
            assert!(dst < out_rows, "scatter index out of range");
            for c in 0..vx.cols {
                acc.add(dst, c, vx.get(r, c));
            }
        }
        let ng = self.needs(x);
        self.push(acc.finish(), Op::ScatterAddRows(x, index), ng)
    }

    /// Row i of the output is row index[i] of the embedding table.
    pub fn embed_rows(&mut self, table: NodeId, index: Arc<Vec<usize>>) -> NodeId {
        let vt = &self.nodes[table].value;
        let mut out = Mat::zeros(index.len(), vt.cols);
        for (r, &src) in index.iter().enumerate() {
            assert!(src < vt.rows, "embedding index out of range");
            for c in 0..vt.cols {
                out.set(r, c, vt.get(src, c));
            }
        }
        let ng = self.needs(table);
        self.push(out, Op::EmbedRows(table, index), ng)
    }

    /// Multiply feature block (channel, m) by a per-channel gate. The gate has
    /// one row per feature row, or a single broadcast row.
    pub fn gate_mul(&mut self, gate: NodeId, feat: NodeId, comps: usize) -> NodeId {
        let (vg, vf) = (&self.nodes[gate].value, &self.nodes[feat].value);
        assert!(vg.rows == vf.rows || vg.rows == 1, "gate rows mismatch");
        assert_eq!(vf.cols, vg.cols * comps, "gate width times comps must match");
        let mut out = vf.clone();
        for r in 0..vf.rows {
            let gr = if vg.rows == 1 { 0 } else { r };
            for ch in 0..vg.cols {
                let g = vg.get(gr, ch);
                for k in 0..comps {
                    let c = ch * comps + k;
                    out.set(r, c, vf.get(r, c) * g);
                }
            }
        }
        let ng = self.needs(gate) || self.needs(feat);
        self.push(out, Op::GateMul { gate, feat, comps }, ng)
    }

    /// Mix channels with a [c_out, c_in] weight, independently per component.
    pub fn channel_mix(&mut self, weight: NodeId, feat: NodeId, comps: usize) -> NodeId {
        let (vw, vf) = (&self.nodes[weight].value, &self.nodes[feat].value);
        assert_eq!(vf.cols, vw.cols * comps, "channel mix width mismatch");
        let mut out = Mat::zeros(vf.rows, vw.rows * comps);
        for r in 0..vf.rows {
            for co in 0..vw.rows {
                for ci in 0..vw.cols {
                    let w = vw.get(co, ci);
                    if w == 0.0 {
                        continue;
                    }
                    for k in 0..comps {
                        out.add_at(r, co * comps + k, w * vf.get(r, ci * comps + k));
                    }
                }
            }
        }
        let ng = self.needs(weight) || self.needs(feat);
        self.push(out, Op::ChannelMix { weight, feat, comps }, ng)
    }

    /// Divide each row by the root mean square of its entries.
    pub fn degree_rms_norm(&mut self, feat: NodeId, eps: f64) -> NodeId {
        let vf = &self.nodes[feat].value;
        let mut out = vf.clone();
        for r in 0..vf.rows {
            let n = vf.cols as f64;
            let ms: f64 = vf.row(r).iter().map(|v| v * v).sum::<f64>() / n;
            let inv = 1.0 / (ms + eps).sqrt();
            for c in 0..vf.cols {
                out.set(r, c, vf.get(r, c) * inv);
            }
        }
        let ng = self.needs(feat);
        self.push(out, Op::DegreeRmsNorm { feat, eps }, ng)
    }

    /// Subtract the mean row of each segment from its rows. Segments are
    /// (start, end) ranges covering disjoint row spans.
    pub fn segment_center(&mut self, feat: NodeId, segments: Arc<Vec<(usize, usize)>>) -> NodeId {
        let vf = &self.nodes[feat].value;
        let mut out = vf.clone();
        for &(start, end) in segments.iter() {
            assert!(start < end && end <= vf.rows, "bad segment range");
            for c in 0..vf.cols {
                let mean = segment_mean(vf, start, end, c);
                for r in start..end {
                    out.add_at(r, c, -mean);
                }
            }
        }
        let ng = self.needs(feat);
        self.push(out, Op::SegmentCenter { feat, segments }, ng)
    }

    /// Coupled message block for one output degree: every path couples a
    /// feature degree with a harmonic degree through its table, scaled by a
    /// per-channel weight row, summed and normalized by `norm`.
    #[allow(clippy::too_many_arguments)]
    pub fn tp_out(
        &mut self,
        feats: &[NodeId],
        shs: &[NodeId],
        weights: NodeId,
        paths: Vec<TpPathSpec>,
        out_comps: usize,
        channels: usize,
        norm: f64,
    ) -> NodeId {
        assert!(!paths.is_empty(), "tensor product needs at least one path");
        let rows = self.nodes[feats[0]].value.rows;
        for &f in feats {
            assert_eq!(self.nodes[f].value.rows, rows);
        }
        for &s in shs {
            assert_eq!(self.nodes[s].value.rows, rows);
        }
        let mut out = Mat::zeros(rows, channels * out_comps);
        for path in &paths {
            let vf = &self.nodes[feats[path.feat_slot]].value;
            let vy = &self.nodes[shs[path.sh_slot]].value;
            let vw = &self.nodes[weights].value;
            let (l1, l2, _) = path.table.degrees();
            let d1 = 2 * l1 + 1;
            assert_eq!(vf.cols, channels * d1, "feature width mismatch on a path");
            assert_eq!(vy.cols, 2 * l2 + 1, "harmonic width mismatch on a path");
            for e in 0..rows {
                for &(s3, s1, s2, v) in path.table.entries() {
                    let y = vy.get(e, s2);
                    if y == 0.0 {
                        continue;
                    }
                    for c in 0..channels {
                        let w = vw.get(path.weight_row, c);
                        out.add_at(
                            e,
                            c * out_comps + s3,
                            norm * w * v * vf.get(e, c * d1 + s1) * y,
                        );
                    }
                }
            }
        }
        let ng = feats.iter().any(|&f| self.needs(f)) || self.needs(weights);
        self.push(
            out,
            Op::TpOut { feats: feats.to_vec(), shs: shs.to_vec(), weights, paths, out_comps, channels, norm },
            ng,
        )
    }

    /// Scalar loss weight * sum((x - target)^2).
    pub fn sum_sq(&mut self, x: NodeId, target: Arc<Mat>, weight: f64) -> NodeId {
        let vx = &self.nodes[x].value;
        assert_eq!((vx.rows, vx.cols), (target.rows, target.cols), "target shape mismatch");
        let mut acc = crate::geomops::KahanSum::default();
        for (a, b) in vx.data.iter().zip(&target.data) {
            let d = a - b;
            acc.add(d * d);
        }
        let out = Mat::from_vec(1, 1, vec![weight * acc.value()]).expect("1x1");
        let ng = self.needs(x);
        self.push(out, Op::SumSq { x, target, weight }, ng)
    }

    /// Gradients of a scalar node with respect to every parameter leaf.
    pub fn backward(&self, loss: NodeId) -> Grads {
        assert_eq!(
            (self.nodes[loss].value.rows, self.nodes[loss].value.cols),
            (1, 1),
            "backward starts from a scalar"
        );
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Mat::from_vec(1, 1, vec![1.0]).expect("1x1"));
        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Grads { grads }
    }

    fn grad_slot<'a>(&self, grads: &'a mut [Option<Mat>], id: NodeId) -> Option<&'a mut Mat> {
        if !self.nodes[id].needs_grad {
            return None;
        }
        let v = &self.nodes[id].value;
        Some(grads[id].get_or_insert_with(|| Mat::zeros(v.rows, v.cols)))
    }

    fn accumulate(&self, id: NodeId, g: &Mat, grads: &mut [Option<Mat>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &side in [a, b].iter() {
                    if let Some(ga) = self.grad_slot(grads, *side) {
                        for (o, x) in ga.data.iter_mut().zip(&g.data) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Scale(a, k) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (o, x) in ga.data.iter_mut().zip(&g.data) {
                        *o += k * x;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.nodes[*a].needs_grad {
                    let ga = self.grad_slot(grads, *a).expect("slot");
                    for r in 0..va.rows {
                        for k in 0..va.cols {
                            let mut acc = 0.0;
                            for c in 0..vb.cols {
                                acc += g.get(r, c) * vb.get(k, c);
                            }
                            ga.add_at(r, k, acc);
                        }
                    }
                }
                if self.nodes[*b].needs_grad {
                    let gb = self.grad_slot(grads, *b).expect("slot");
                    for k in 0..vb.rows {
                        for c in 0..vb.cols {
                            let mut acc = 0.0;
                            for r in 0..va.rows {
                                acc += va.get(r, k) * g.get(r, c);
                            }
                            gb.add_at(k, c, acc);
                        }
                    }
                }
            }
            Op::RowBroadcastAdd(x, bias) => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (o, v) in gx.data.iter_mut().zip(&g.data) {
                        *o += v;
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *bias) {
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            gb.add_at(0, c, g.get(r, c));
                        }
                    }
                }
            }
            Op::Silu(x) => {
                let vx = &self.nodes[*x].value;
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for i in 0..vx.data.len() {
                        let s = 1.0 / (1.0 + (-vx.data[i]).exp());
                        let d = s * (1.0 + vx.data[i] * (1.0 - s));
                        gx.data[i] += g.data[i] * d;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = self.nodes[p].value.cols;
                    if let Some(gp) = self.grad_slot(grads, p) {
                        for r in 0..g.rows {
                            for c in 0..cols {
                                gp.add_at(r, c, g.get(r, off + c));
                            }
                        }
                    }
                    off += cols;
                }
            }
            Op::GatherRows(x, index) => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (r, &src) in index.iter().enumerate() {
                        for c in 0..g.cols {
                            gx.add_at(src, c, g.get(r, c));
                        }
                    }
                }
            }
            Op::ScatterAddRows(x, index) => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (r, &dst) in index.iter().enumerate() {
                        for c in 0..g.cols {
                            gx.add_at(r, c, g.get(dst, c));
                        }
                    }
                }
            }
            Op::EmbedRows(table, index) => {
                if let Some(gt) = self.grad_slot(grads, *table) {
                    for (r, &src) in index.iter().enumerate() {
                        for c in 0..g.cols {
                            gt.add_at(src, c, g.get(r, c));
                        }
                    }
                }
            }
            Op::GateMul { gate, feat, comps } => {
                let (vg, vf) = (&self.nodes[*gate].value, &self.nodes[*feat].value);
                if self.nodes[*gate].needs_grad {
                    let gg = self.grad_slot(grads, *gate).expect("slot");
                    for r in 0..vf.rows {
                        let gr = if vg.rows == 1 { 0 } else { r };
                        for ch in 0..vg.cols {
                            let mut acc = 0.0;
                            for k in 0..*comps {
                                let c = ch * comps + k;
                                acc += g.get(r, c) * vf.get(r, c);
                            }
                            gg.add_at(gr, ch, acc);
                        }
                    }
                }
                if self.nodes[*feat].needs_grad {
                    let gf = self.grad_slot(grads, *feat).expect("slot");
                    for r in 0..vf.rows {
                        let gr = if vg.rows == 1 { 0 } else { r };
                        for ch in 0..vg.cols {
                            let gv = vg.get(gr, ch);
                            for k in 0..*comps {
                                let c = ch * comps + k;
                                gf.add_at(r, c, g.get(r, c) * gv);
                            }
                        }
                    }
                }
            }
            Op::ChannelMix { weight, feat, comps } => {
                let (vw, vf) = (&self.nodes[*weight].value, &self.nodes[*feat].value);
                if self.nodes[*weight].needs_grad {
                    let gw = self.grad_slot(grads, *weight).expect("slot");
                    for co in 0..vw.rows {
                        for ci in 0..vw.cols {
                            let mut acc = 0.0;
                            for r in 0..vf.rows {
                                for k in 0..*comps {
                                    acc += g.get(r, co * comps + k) * vf.get(r, ci * comps + k);
                                }
                            }
                            gw.add_at(co, ci, acc);
                        }
                    }
                }
                if self.nodes[*feat].needs_grad {
                    let gf = self.grad_slot(grads, *feat).expect("slot");
                    for r in 0..vf.rows {
                        for ci in 0..vw.cols {
                            for k in 0..*comps {
                                let mut acc = 0.0;
                                for co in 0..vw.rows {
                                    acc += vw.get(co, ci) * g.get(r, co * comps + k);
                                }
                                gf.add_at(r, ci * comps + k, acc);
                            }
                        }
                    }
                }
            }
            Op::DegreeRmsNorm { feat, eps } => {
                let vf = &self.nodes[*feat].value;
                if let Some(gf) = self.grad_slot(grads, *feat) {
                    let n = vf.cols as f64;
                    for r in 0..vf.rows {
                        let ms: f64 = vf.row(r).iter().map(|v| v * v).sum::<f64>() / n;
                        let rm = (ms + eps).sqrt();
                        let dot: f64 = (0..vf.cols).map(|c| g.get(r, c) * vf.get(r, c)).sum();
                        for c in 0..vf.cols {
                            let grad =
                                g.get(r, c) / rm - vf.get(r, c) * dot / (n * rm * rm * rm);
                            gf.add_at(r, c, grad);
                        }
                    }
                }
            }
            Op::SegmentCenter { feat, segments } => {
                if let Some(gf) = self.grad_slot(grads, *feat) {
                    for &(start, end) in segments.iter() {
                        for c in 0..g.cols {
                            let mean = segment_mean(g, start, end, c);
                            for r in start..end {
                                gf.add_at(r, c, g.get(r, c) - mean);
                            }
                        }
                    }
                }
            }
            Op::TpOut { feats, shs, weights, paths, out_comps, channels, norm } => {
                for path in paths {
                    let fid = feats[path.feat_slot];
                    let vy = &self.nodes[shs[path.sh_slot]].value;
                    let vf = &self.nodes[fid].value;
                    let vw = &self.nodes[*weights].value;
                    let (l1, _, _) = path.table.degrees();
                    let d1 = 2 * l1 + 1;
                    if self.nodes[*weights].needs_grad {
                        let gw = self.grad_slot(grads, *weights).expect("slot");
                        for e in 0..vf.rows {
                            for &(s3, s1, s2, v) in path.table.entries() {
                                let y = vy.get(e, s2);
                                if y == 0.0 {
                                    continue;
                                }
                                for c in 0..*channels {
                                    gw.add_at(
                                        path.weight_row,
                                        c,
                                        norm * v
                                            * g.get(e, c * out_comps + s3)
                                            * vf.get(e, c * d1 + s1)
                                            * y,
                                    );
                                }
                            }
                        }
                    }
                    if self.nodes[fid].needs_grad {
                        let gf = self.grad_slot(grads, fid).expect("slot");
                        for e in 0..vf.rows {
                            for &(s3, s1, s2, v) in path.table.entries() {
                                let y = vy.get(e, s2);
                                if y == 0.0 {
                                    continue;
                                }
                                for c in 0..*channels {
                                    gf.add_at(
                                        e,
                                        c * d1 + s1,
                                        norm * v
                                            * g.get(e, c * out_comps + s3)
                                            * vw.get(path.weight_row, c)
                                            * y,
                                    );
                                }
                            }
                        }
                    }
                }
            }
            Op::SumSq { x, target, weight } => {
                let vx = &self.nodes[*x].value;
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let go = g.scalar();
                    for i in 0..vx.data.len() {
                        gx.data[i] += go * 2.0 * weight * (vx.data[i] - target.data[i]);
                    }
                }
            }
        }
    }
}

/// Gradient buffers indexed by node id; only parameter leaves and the nodes
/// between them and the loss are populated.
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Mat> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Mat> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::irreps::real_cg;
    use rand::Rng as _;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn randmat(rows: usize, cols: usize, rng: &mut ChaCha20Rng) -> Mat {
        Mat::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Check tape gradients of every param against central differences of the
    /// graph builder.
    fn gradcheck(params: &[Mat], build: impl Fn(&mut Tape, &[NodeId]) -> NodeId) {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = build(&mut tape, &ids);
        let mut grads = tape.backward(loss);
        let h = 1e-5;
        for (pi, p) in params.iter().enumerate() {
            let g = grads.take(ids[pi]).expect("param grad");
            for i in 0..p.data().len() {
                let mut up = params.to_vec();
                up[pi].data_mut()[i] += h;
                let mut down = params.to_vec();
                down[pi].data_mut()[i] -= h;
                let eval = |ps: &[Mat]| -> f64 {
                    let mut t = Tape::new();
                    let ids: Vec<NodeId> = ps.iter().map(|p| t.param(p.clone())).collect();
                    let l = build(&mut t, &ids);
                    t.value(l).scalar()
                };
                let fd = (eval(&up) - eval(&down)) / (2.0 * h);
                let an = g.data()[i];
                assert!(
                    (fd - an).abs() < 1e-6 * (1.0 + fd.abs()),
                    "param {pi} entry {i}: fd {fd} vs tape {an}"
                );
            }
        }
    }

    #[test]
    fn dense_ops_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        let a = randmat(3, 4, &mut rng);
        let b = randmat(4, 2, &mut rng);
        let bias = randmat(1, 2, &mut rng);
        let target = Arc::new(randmat(3, 2, &mut rng));
        let t2 = Arc::clone(&target);
        gradcheck(&[a, b, bias], move |t, ids| {
            let mm = t.matmul(ids[0], ids[1]);
            let biased = t.row_broadcast_add(mm, ids[2]);
            let act = t.silu(biased);
            let scaled = t.scale(act, 1.7);
            let doubled = t.add(scaled, act);
            t.sum_sq(doubled, Arc::clone(&t2), 0.5)
        });
    }

    #[test]
    fn index_ops_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let table = randmat(5, 3, &mut rng);
        let x = randmat(4, 3, &mut rng);
        let target = Arc::new(randmat(3, 6, &mut rng));
        let t2 = Arc::clone(&target);
        let gather_idx = Arc::new(vec![2usize, 0, 3, 3]);
        let scatter_idx = Arc::new(vec![1usize, 0, 2, 1]);
        let embed_idx = Arc::new(vec![4usize, 1, 1]);
        gradcheck(&[table, x], move |t, ids| {
            let gathered = t.gather_rows(ids[1], Arc::clone(&gather_idx));
            let scattered = t.scatter_add_rows(gathered, Arc::clone(&scatter_idx), 3);
            let embedded = t.embed_rows(ids[0], Arc::clone(&embed_idx));
            let joined = t.concat_cols(&[scattered, embedded]);
            t.sum_sq(joined, Arc::clone(&t2), 1.0)
        });
    }

    #[test]
    fn gate_mix_norm_ops_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(43);
        let gate = randmat(3, 2, &mut rng);
        let feat = randmat(3, 6, &mut rng);
        let mix = randmat(2, 2, &mut rng);
        let scale_row = randmat(1, 2, &mut rng);
        let target = Arc::new(randmat(3, 6, &mut rng));
        let t2 = Arc::clone(&target);
        let segments = Arc::new(vec![(0usize, 2usize), (2, 3)]);
        gradcheck(&[gate, feat, mix, scale_row], move |t, ids| {
            let gated = t.gate_mul(ids[0], ids[1], 3);
            let mixed = t.channel_mix(ids[2], gated, 3);
            let normed = t.degree_rms_norm(mixed, 1e-6);
            let scaled = t.gate_mul(ids[3], normed, 3);
            let centered = t.segment_center(scaled, Arc::clone(&segments));
            t.sum_sq(centered, Arc::clone(&t2), 1.0)
        });
    }

    #[test]
    fn coupled_message_op_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(44);
        let channels = 2;
        // Edge features: degree 0 and degree 1 blocks for 3 edges.
        let f0 = randmat(3, channels, &mut rng);
        let f1 = randmat(3, channels * 3, &mut rng);
        let y0 = randmat(3, 1, &mut rng);
        let y1 = randmat(3, 3, &mut rng);
        let w = randmat(3, channels, &mut rng);
        let target = Arc::new(randmat(3, channels * 3, &mut rng));
        let t2 = Arc::clone(&target);
        // Paths into l3 = 1: (0,1), (1,0), (1,1).
        let paths = vec![
            TpPathSpec { weight_row: 0, feat_slot: 0, sh_slot: 1, table: real_cg(0, 1, 1).unwrap() },
            TpPathSpec { weight_row: 1, feat_slot: 1, sh_slot: 0, table: real_cg(1, 0, 1).unwrap() },
            TpPathSpec { weight_row: 2, feat_slot: 1, sh_slot: 1, table: real_cg(1, 1, 1).unwrap() },
        ];
        gradcheck(&[f0, f1, w], move |t, ids| {
            let y0c = t.constant(y0.clone());
            let y1c = t.constant(y1.clone());
            let out = t.tp_out(
                &[ids[0], ids[1]],
                &[y0c, y1c],
                ids[2],
                paths.clone(),
                3,
                channels,
                1.0 / 3f64.sqrt(),
            );
            t.sum_sq(out, Arc::clone(&t2), 1.0)
        });
    }

    #[test]
    fn broadcast_gate_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(45);
        let scale_row = randmat(1, 3, &mut rng);
        let feat = randmat(4, 9, &mut rng);
        let target = Arc::new(randmat(4, 9, &mut rng));
        let t2 = Arc::clone(&target);
        gradcheck(&[scale_row, feat], move |t, ids| {
            let scaled = t.gate_mul(ids[0], ids[1], 3);
            t.sum_sq(scaled, Arc::clone(&t2), 1.0)
        });
    }

    #[test]
    fn constants_collect_no_gradient() {
        let mut rng = ChaCha20Rng::seed_from_u64(46);
        let mut tape = Tape::new();
        let c = tape.constant(randmat(2, 2, &mut rng));
        let p = tape.param(randmat(2, 2, &mut rng));
        let s = tape.add(c, p);
        let loss = tape.sum_sq(s, Arc::new(Mat::zeros(2, 2)), 1.0);
        let mut grads = tape.backward(loss);
        assert!(grads.get(c).is_none());
        assert!(grads.take(p).is_some());
    }

    #[test]
    fn scatter_sum_is_stable_under_row_permutation() {
        let mut rng = ChaCha20Rng::seed_from_u64(47);
        let rows = 40;
        let x = randmat(rows, 3, &mut rng);
        let idx: Vec<usize> = (0..rows).map(|_| rng.random_range(0..5)).collect();
        let run = |perm: &[usize]| -> Mat {
            let mut tape = Tape::new();
            let xp = Mat::from_fn(rows, 3, |r, c| x.get(perm[r], c));
            let ip: Vec<usize> = perm.iter().map(|&r| idx[r]).collect();
            let xid = tape.constant(xp);
            let out = tape.scatter_add_rows(xid, Arc::new(ip), 5);
            tape.value(out).clone()
        };
        let identity: Vec<usize> = (0..rows).collect();
        let mut shuffled = identity.clone();
        for i in (1..rows).rev() {
            let j = rng.random_range(0..=i);
            shuffled.swap(i, j);
        }
        let a = run(&identity);
        let b = run(&shuffled);
        for (p, q) in a.data().iter().zip(b.data()) {
            assert_eq!(p, q, "scatter sum changed under row order");
        }
    }

    #[test]
    fn loss_value_matches_hand_computation() {
        let mut tape = Tape::new();
        let x = tape.param(Mat::from_vec(1, 3, vec![1.0, -2.0, 0.5]).unwrap());
        let target = Arc::new(Mat::from_vec(1, 3, vec![0.0, 1.0, 0.5]).unwrap());
        let loss = tape.sum_sq(x, target, 0.25);
        assert!((tape.value(loss).scalar() - 0.25 * (1.0 + 9.0)).abs() < 1e-15);
    }
}
