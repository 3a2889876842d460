//! The vector-field network: a message-passing model over bonded molecular
//! graphs whose per-degree features transform under the spherical-harmonic
//! rotation blocks, so predicted velocities rotate with the input cloud.
//!
//! Positions enter only through edge vectors. Each block couples source
//! features with edge harmonics through a channel-matched tensor product,
//! gates the coupled messages with scalars built from endpoint invariants,
//! bond kind and edge length, aggregates per destination, and adds the
//! normalized update to the feature stream. The head reads out the l = 1
//! block and removes the per-graph mean, so outputs keep the center of mass
//! fixed.

use crate::autodiff::{Grads, Mat, NodeId, Tape, TpPathSpec};
use crate::error::{Error, Result};
use crate::geomops::PointCloud;
use crate::irreps::{sh_eval_all, IrrepsLayout, TensorProductPlan, MAX_DEGREE};
use crate::moldata::{Bond, BondOrder};
use rand::Rng as _;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Gaussian length features per edge.
pub const RADIAL_BASIS: usize = 8;
/// Length at which the radial features taper off.
pub const RADIAL_CUTOFF: f64 = 5.0;
const NORM_EPS: f64 = 1e-6;
const MIN_EDGE_LEN: f64 = 1e-12;
const COM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Highest feature degree carried between blocks.
    pub l_max: usize,
    /// Channels per degree.
    pub channels: usize,
    /// Message-passing blocks.
    pub blocks: usize,
    /// Distinct atomic numbers the embedding covers.
    pub atom_vocab: usize,
    /// Distinct bond kinds the embedding covers.
    pub bond_vocab: usize,
    /// Hidden width of the gate network.
    pub hidden: usize,
    /// Sinusoidal time feature count, even.
    pub time_dim: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l_max == 0 || self.l_max > MAX_DEGREE {
            return Err(Error::Model(format!(
                "feature degree limit must be in 1..={MAX_DEGREE}, got {}",
                self.l_max
            )));
        }
        if self.channels == 0 || self.blocks == 0 || self.hidden == 0 {
            return Err(Error::Model("channels, blocks and hidden must be nonzero".into()));
        }
        if self.atom_vocab == 0 || self.atom_vocab > 119 {
            return Err(Error::Model(format!(
                "atom vocabulary must be in 1..=119, got {}",
                self.atom_vocab
            )));
        }
        if self.bond_vocab < BondOrder::COUNT {
            return Err(Error::Model(format!(
                "bond vocabulary must cover all {} bond kinds",
                BondOrder::COUNT
            )));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::Model(format!(
                "time feature count must be even and nonzero, got {}",
                self.time_dim
            )));
        }
        Ok(())
    }

    fn degrees(&self) -> usize {
        self.l_max + 1
    }
}

/// Tensor product shared by every block of a model.
pub fn tp_plan(config: &ModelConfig) -> Result<TensorProductPlan> {
    let feature = IrrepsLayout::uniform(config.l_max, config.channels)?;
    let filter = IrrepsLayout::single(config.l_max)?;
    let output = IrrepsLayout::uniform(config.l_max, config.channels)?;
    TensorProductPlan::new(feature, filter, output)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    /// One weight row per tensor-product path.
    pub tp_w: Mat,
    pub gate_w1: Mat,
    pub gate_b1: Mat,
    /// Per-degree gate heads.
    pub gate_w2: Vec<Mat>,
    pub gate_b2: Vec<Mat>,
    /// Per-degree channel mixes after aggregation.
    pub mix: Vec<Mat>,
    /// Per-degree feature scales after normalization.
    pub scale: Vec<Mat>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    pub atom_embed: Mat,
    pub bond_embed: Mat,
    pub time_w: Mat,
    pub blocks: Vec<BlockParams>,
    pub head_w: Mat,
    pub head_bias: Mat,
}

impl ModelParams {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// All parameter tensors in a fixed order.
    pub fn tensors(&self) -> Vec<&Mat> {
        let mut out = vec![&self.atom_embed, &self.bond_embed, &self.time_w];
        for b in &self.blocks {
            out.push(&b.tp_w);
            out.push(&b.gate_w1);
            out.push(&b.gate_b1);
            out.extend(b.gate_w2.iter());
            out.extend(b.gate_b2.iter());
            out.extend(b.mix.iter());
            out.extend(b.scale.iter());
        }
        out.push(&self.head_w);
        out.push(&self.head_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out: Vec<&mut Mat> = vec![&mut self.atom_embed, &mut self.bond_embed, &mut self.time_w];
        for b in &mut self.blocks {
            out.push(&mut b.tp_w);
            out.push(&mut b.gate_w1);
            out.push(&mut b.gate_b1);
            out.extend(b.gate_w2.iter_mut());
            out.extend(b.gate_b2.iter_mut());
            out.extend(b.mix.iter_mut());
            out.extend(b.scale.iter_mut());
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|m| m.data().len()).sum()
    }

    /// Zero-valued parameters with the shapes the config implies.
    pub fn zeroed(config: ModelConfig) -> Result<ModelParams> {
        config.validate()?;
        let plan = tp_plan(&config)?;
        let c = config.channels;
        let degrees = config.degrees();
        let gate_in = 3 * c + RADIAL_BASIS;
        let blocks = (0..config.blocks)
            .map(|_| BlockParams {
                tp_w: Mat::zeros(plan.paths().len(), c),
                gate_w1: Mat::zeros(gate_in, config.hidden),
                gate_b1: Mat::zeros(1, config.hidden),
                gate_w2: (0..degrees).map(|_| Mat::zeros(config.hidden, c)).collect(),
                gate_b2: (0..degrees).map(|_| Mat::zeros(1, c)).collect(),
                mix: (0..degrees).map(|_| Mat::zeros(c, c)).collect(),
                scale: (0..degrees).map(|_| Mat::zeros(1, c)).collect(),
            })
            .collect();
        Ok(ModelParams {
            atom_embed: Mat::zeros(config.atom_vocab, c),
            bond_embed: Mat::zeros(config.bond_vocab, c),
            time_w: Mat::zeros(config.time_dim, c),
            blocks,
            head_w: Mat::zeros(1, c),
            head_bias: Mat::zeros(1, 3),
            config,
        })
    }
}

/// Seeded random initialization. When a probe batch is given the head weight
/// is rescaled so the initial output has unit standard deviation on it.
pub fn init_params(
    config: &ModelConfig,
    seed: u64,
    probe: Option<&GraphBatch>,
) -> Result<ModelParams> {
    let mut params = ModelParams::zeroed(config.clone())?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut fill = |m: &mut Mat, std: f64| {
        for v in m.data_mut() {
            let e: f64 = rng.sample(rand_distr::StandardNormal);
            *v = std * e;
        }
    };
    let c = config.channels as f64;
    fill(&mut params.atom_embed, 1.0);
    fill(&mut params.bond_embed, 1.0);
    fill(&mut params.time_w, 1.0 / (config.time_dim as f64).sqrt());
    let gate_in = (3.0 * c + RADIAL_BASIS as f64).sqrt();
    for b in &mut params.blocks {
        fill(&mut b.tp_w, 1.0);
        fill(&mut b.gate_w1, 1.0 / gate_in);
        for w2 in &mut b.gate_w2 {
            fill(w2, 1.0 / (config.hidden as f64).sqrt());
        }
        for b2 in &mut b.gate_b2 {
            for v in b2.data_mut() {
                *v = 1.0;
            }
        }
        for mix in &mut b.mix {
            fill(mix, 1.0 / c.sqrt());
        }
        for s in &mut b.scale {
            for v in s.data_mut() {
                *v = 1.0;
            }
        }
    }
    fill(&mut params.head_w, 1.0 / c.sqrt());
    if let Some(batch) = probe {
        let out = forward(&params, batch)?;
        let n = (out.len() * 3) as f64;
        let mean: f64 = out.iter().flatten().sum::<f64>() / n;
        let var: f64 = out.iter().flatten().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if std > 1e-8 {
            for v in params.head_w.data_mut() {
                *v /= std;
            }
        }
    }
    Ok(params)
}

/// One molecule instance entering a batch.
pub struct GraphItem<'a> {
    pub atoms: &'a [u8],
    pub bonds: &'a [Bond],
    pub coords: &'a PointCloud,
    pub time: f64,
}

/// Several molecules concatenated for one network evaluation.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    atoms: Vec<u8>,
    coords: Vec<[f64; 3]>,
    times: Vec<f64>,
    graph_ranges: Vec<(usize, usize)>,
    node_graph: Vec<usize>,
    /// Directed (dst, src, kind), sorted by (dst, src).
    edges: Vec<(usize, usize, usize)>,
    edge_vec: Vec<[f64; 3]>,
}

impl GraphBatch {
    pub fn new(items: &[GraphItem]) -> Result<GraphBatch> {
        if items.is_empty() {
            return Err(Error::Model("a batch needs at least one graph".into()));
        }
        let mut atoms = Vec::new();
        let mut coords = Vec::new();
        let mut times = Vec::new();
        let mut graph_ranges = Vec::new();
        let mut node_graph = Vec::new();
        let mut edges = Vec::new();
        for (g, item) in items.iter().enumerate() {
            let n = item.atoms.len();
            if n == 0 {
                return Err(Error::Model(format!("graph {g} has no atoms")));
            }
            if item.coords.len() != n {
                return Err(Error::Model(format!(
                    "graph {g}: {n} atoms but {} positions",
                    item.coords.len()
                )));
            }
            if !item.time.is_finite() {
                return Err(Error::Model(format!("graph {g} has a non-finite time")));
            }
            let centroid = item.coords.centroid();
            for d in centroid {
                if d.abs() > COM_TOL {
                    return Err(Error::Model(format!(
                        "graph {g} is not centered: centroid component {d:.3e}"
                    )));
                }
            }
            let offset = atoms.len();
            atoms.extend_from_slice(item.atoms);
            coords.extend_from_slice(item.coords.points());
            times.push(item.time);
            graph_ranges.push((offset, offset + n));
            node_graph.extend(std::iter::repeat_n(g, n));
            for &(i, j, order) in item.bonds {
                if i >= n || j >= n || i == j {
                    return Err(Error::Model(format!(
                        "graph {g} has an invalid bond ({i}, {j})"
                    )));
                }
                let kind = order.index();
                edges.push((offset + i, offset + j, kind));
                edges.push((offset + j, offset + i, kind));
            }
        }
        edges.sort_unstable();
        let mut edge_vec = Vec::with_capacity(edges.len());
        for &(dst, src, _) in &edges {
            let r = [
                coords[src][0] - coords[dst][0],
                coords[src][1] - coords[dst][1],
                coords[src][2] - coords[dst][2],
            ];
            let len = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
            if len < MIN_EDGE_LEN {
                return Err(Error::Model(format!(
                    "edge between nodes {dst} and {src} has zero length"
                )));
            }
            edge_vec.push(r);
        }
        Ok(GraphBatch { atoms, coords, times, graph_ranges, node_graph, edges, edge_vec })
    }

    pub fn node_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn graph_count(&self) -> usize {
        self.graph_ranges.len()
    }

    pub fn graph_ranges(&self) -> &[(usize, usize)] {
        &self.graph_ranges
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.coords
    }
}

fn sinusoidal_time(t: f64, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let w = std::f64::consts::PI * (1u64 << k) as f64;
        out.push((w * t).sin());
        out.push((w * t).cos());
    }
    out
}

fn radial_features(len: f64) -> [f64; RADIAL_BASIS] {
    let spacing = RADIAL_CUTOFF / (RADIAL_BASIS - 1) as f64;
    std::array::from_fn(|k| {
        let center = spacing * k as f64;
        let z = (len - center) / spacing;
        (-0.5 * z * z).exp()
    })
}

struct Built {
    output: NodeId,
    leaves: Vec<NodeId>,
}

fn build(tape: &mut Tape, params: &ModelParams, batch: &GraphBatch, trainable: bool) -> Result<Built> {
    let config = &params.config;
    config.validate()?;
    let plan = tp_plan(config)?;
    let c = config.channels;
    let n = batch.node_count();

    for &a in &batch.atoms {
        if a as usize >= config.atom_vocab {
            return Err(Error::Model(format!(
                "atomic number {a} outside the embedding vocabulary"
            )));
        }
    }

    // Parameter leaves in tensors() order.
    let leaves: Vec<NodeId> = params
        .tensors()
        .iter()
        .map(|m| if trainable { tape.param((*m).clone()) } else { tape.constant((*m).clone()) })
        .collect();
    let mut leaf_iter = leaves.iter().copied();
    let mut next = || leaf_iter.next().expect("leaf order covers all tensors");
    let atom_embed = next();
    let bond_embed = next();
    let time_w = next();
    struct BlockIds {
        tp_w: NodeId,
        gate_w1: NodeId,
        gate_b1: NodeId,
        gate_w2: Vec<NodeId>,
        gate_b2: Vec<NodeId>,
        mix: Vec<NodeId>,
        scale: Vec<NodeId>,
    }
    let degrees = config.degrees();
    let block_ids: Vec<BlockIds> = (0..config.blocks)
        .map(|_| BlockIds {
            tp_w: next(),
            gate_w1: next(),
            gate_b1: next(),
            gate_w2: (0..degrees).map(|_| next()).collect(),
            gate_b2: (0..degrees).map(|_| next()).collect(),
            mix: (0..degrees).map(|_| next()).collect(),
            scale: (0..degrees).map(|_| next()).collect(),
        })
        .collect();
    let head_w = next();
    let head_bias = next();

    let atom_idx = Arc::new(batch.atoms.iter().map(|&a| a as usize).collect::<Vec<_>>());
    let dst_idx = Arc::new(batch.edges.iter().map(|e| e.0).collect::<Vec<_>>());
    let src_idx = Arc::new(batch.edges.iter().map(|e| e.1).collect::<Vec<_>>());
    let kind_idx = Arc::new(batch.edges.iter().map(|e| e.2).collect::<Vec<_>>());
    let segments = Arc::new(batch.graph_ranges.clone());

    // Per-edge constants: harmonics of the unit edge vector and length
    // features.
    let e_count = batch.edges.len();
    let mut sh_vals: Vec<Vec<Vec<f64>>> = Vec::with_capacity(e_count);
    let mut radial = Mat::zeros(e_count, RADIAL_BASIS);
    for (e, r) in batch.edge_vec.iter().enumerate() {
        let len = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
        let u = [r[0] / len, r[1] / len, r[2] / len];
        sh_vals.push(sh_eval_all(config.l_max, u)?);
        for (k, v) in radial_features(len).iter().enumerate() {
            radial.set(e, k, *v);
        }
    }
    let sh_ids: Vec<NodeId> = (0..degrees)
        .map(|l| {
            let m = Mat::from_fn(e_count, 2 * l + 1, |e, k| sh_vals[e][l][k]);
            tape.constant(m)
        })
        .collect();
    let radial_id = tape.constant(radial);

    // Initial features: degree 0 from atom kind, aggregated bond kinds and
    // time; higher degrees start at zero.
    let s0 = tape.embed_rows(atom_embed, Arc::clone(&atom_idx));
    let bond_feat = tape.embed_rows(bond_embed, Arc::clone(&kind_idx));
    let bond_agg = tape.scatter_add_rows(bond_feat, Arc::clone(&dst_idx), n);
    let time_mat = Mat::from_fn(n, config.time_dim, |node, k| {
        sinusoidal_time(batch.times[batch.node_graph[node]], config.time_dim)[k]
    });
    let time_const = tape.constant(time_mat);
    let time_proj = tape.matmul(time_const, time_w);
    let mut feats: Vec<NodeId> = Vec::with_capacity(degrees);
    {
        let a = tape.add(s0, bond_agg);
        feats.push(tape.add(a, time_proj));
    }
    for l in 1..degrees {
        feats.push(tape.constant(Mat::zeros(n, c * (2 * l + 1))));
    }

    for ids in &block_ids {
        // Edge-level inputs.
        let edge_feats: Vec<NodeId> = feats
            .iter()
            .map(|&f| tape.gather_rows(f, Arc::clone(&src_idx)))
            .collect();
        let s_dst = tape.gather_rows(feats[0], Arc::clone(&dst_idx));
        let s_src = edge_feats[0];
        let bond_feat = tape.embed_rows(bond_embed, Arc::clone(&kind_idx));
        let trunk_in = tape.concat_cols(&[s_dst, s_src, bond_feat, radial_id]);
        let h1 = tape.matmul(trunk_in, ids.gate_w1);
        let h1b = tape.row_broadcast_add(h1, ids.gate_b1);
        let trunk = tape.silu(h1b);

        for l3 in 0..degrees {
            let paths: Vec<TpPathSpec> = plan
                .paths()
                .iter()
                .enumerate()
                .filter(|(_, p)| p.l3 == l3)
                .map(|(row, p)| TpPathSpec {
                    weight_row: row,
                    feat_slot: p.l1,
                    sh_slot: p.l2,
                    table: Arc::clone(&p.table),
                })
                .collect();
            let msg = tape.tp_out(
                &edge_feats,
                &sh_ids,
                ids.tp_w,
                paths,
                2 * l3 + 1,
                c,
                plan.output_norm(l3),
            );
            let g1 = tape.matmul(trunk, ids.gate_w2[l3]);
            let gate = tape.row_broadcast_add(g1, ids.gate_b2[l3]);
            let gated = tape.gate_mul(gate, msg, 2 * l3 + 1);
            let agg = tape.scatter_add_rows(gated, Arc::clone(&dst_idx), n);
            let mixed = tape.channel_mix(ids.mix[l3], agg, 2 * l3 + 1);
            let normed = tape.degree_rms_norm(mixed, NORM_EPS);
            let scaled = tape.gate_mul(ids.scale[l3], normed, 2 * l3 + 1);
            feats[l3] = tape.add(feats[l3], scaled);
        }
    }

    let head = tape.channel_mix(head_w, feats[1], 3);
    let biased = tape.row_broadcast_add(head, head_bias);
    let output = tape.segment_center(biased, segments);
    Ok(Built { output, leaves })
}

/// Predicted velocity per node, in the batch's node order. Output columns are
/// the l = 1 component order (y, z, x) mapped back to (x, y, z).
pub fn forward(params: &ModelParams, batch: &GraphBatch) -> Result<Vec<[f64; 3]>> {
    let mut tape = Tape::new();
    let built = build(&mut tape, params, batch, false)?;
    let out = tape.value(built.output);
    Ok((0..out.rows())
        .map(|r| {
            let row = out.row(r);
            [row[2], row[0], row[1]]
        })
        .collect())
}

/// Loss and parameter gradients for one batch against target velocities.
/// The loss is the squared error averaged over every coordinate; gradients
/// come back in tensors() order.
pub fn loss_and_grad(
    params: &ModelParams,
    batch: &GraphBatch,
    targets: &[[f64; 3]],
) -> Result<(f64, Vec<Mat>)> {
    if targets.len() != batch.node_count() {
        return Err(Error::Model(format!(
            "batch has {} nodes but {} target rows",
            batch.node_count(),
            targets.len()
        )));
    }
    let mut tape = Tape::new();
    let built = build(&mut tape, params, batch, true)?;
    // Map targets into component order (y, z, x).
    let target = Mat::from_fn(targets.len(), 3, |r, c| match c {
        0 => targets[r][1],
        1 => targets[r][2],
        _ => targets[r][0],
    });
    let weight = 1.0 / (3.0 * targets.len() as f64);
    let loss = tape.sum_sq(built.output, Arc::new(target), weight);
    let value = tape.value(loss).scalar();
    let mut grads: Grads = tape.backward(loss);
    let out = built
        .leaves
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            grads.take(id).unwrap_or_else(|| {
                let t = params.tensors()[i];
                Mat::zeros(t.rows(), t.cols())
            })
        })
        .collect();
    Ok((value, out))
}
