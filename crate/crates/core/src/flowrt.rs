//! Training and sampling runtime: the optimizer, gradient clipping, the
//! fixed-step ODE solver, checkpoint serialization and the step loop.
//!
//! Every random draw in the loop is derived from (run seed, step, molecule),
//! never from a carried stream, so a run resumed from a checkpoint continues
//! bit for bit like the uninterrupted one.

use crate::autodiff::Mat;
use crate::equinet::{
    forward, init_params, loss_and_grad, GraphBatch, GraphItem, ModelConfig, ModelParams,
};
use crate::error::{Error, Result};
use crate::geomops::{KahanSum, PointCloud};
use crate::moldata::{DatasetIndex, Molecule};
use crate::otcfm::{
    cfm_loss, cond_path_sample, sample_coupling, sample_noise_cloud, CouplingKind, OT_POOL_SIZE,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

const CHECKPOINT_MAGIC: [u8; 4] = *b"CFLW";
const CHECKPOINT_VERSION: u32 = 1;
/// Identifies the feature-component conventions a checkpoint's weights
/// assume. Loading refuses anything else.
pub const IRREPS_CONVENTION: &str = "realsh-unitnorm-yzx/v1";

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
}

/// Content hash of a parsed dataset, independent of file formatting.
pub fn dataset_fingerprint(data: &DatasetIndex) -> u64 {
    let mut h = Fnv::new();
    h.update(&(data.molecules.len() as u64).to_le_bytes());
    for mol in &data.molecules {
        h.update(&(mol.id.len() as u64).to_le_bytes());
        h.update(mol.id.as_bytes());
        h.update(&(mol.atoms.len() as u64).to_le_bytes());
        h.update(&mol.atoms);
        h.update(&(mol.bonds.len() as u64).to_le_bytes());
        for &(i, j, order) in &mol.bonds {
            h.update(&(i as u64).to_le_bytes());
            h.update(&(j as u64).to_le_bytes());
            h.update(&[order.index() as u8]);
        }
        h.update(&(mol.conformers.len() as u64).to_le_bytes());
        for c in &mol.conformers {
            h.update(&(c.len() as u64).to_le_bytes());
            for p in c.points() {
                for d in p {
                    h.update(&d.to_le_bytes());
                }
            }
        }
    }
    h.0
}

/// A generator keyed by run seed, step and a caller salt. Equal keys give
/// equal streams on every platform.
pub fn derive_rng(seed: u64, step: u64, salt: u64) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&step.to_le_bytes());
    key[16..24].copy_from_slice(&salt.to_le_bytes());
    key[24..32].copy_from_slice(&0x636f_6e66_6c6f_7731u64.to_le_bytes());
    ChaCha20Rng::from_seed(key)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr: 3e-3, weight_decay: 0.0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput("optimizer settings out of range".into()))
        }
    }
}

/// Adam with decoupled weight decay, first and second moment per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    config: OptimConfig,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl AdamW {
    pub fn new(config: OptimConfig, params: &ModelParams) -> Result<AdamW> {
        config.validate()?;
        let zeros: Vec<Mat> =
            params.tensors().iter().map(|t| Mat::zeros(t.rows(), t.cols())).collect();
        Ok(AdamW { config, step: 0, m: zeros.clone(), v: zeros })
    }

    pub fn from_state(config: OptimConfig, step: u64, m: Vec<Mat>, v: Vec<Mat>) -> Result<AdamW> {
        config.validate()?;
        if m.len() != v.len() {
            return Err(Error::InvalidInput("moment lists differ in length".into()));
        }
        Ok(AdamW { config, step, m, v })
    }

    pub fn config(&self) -> &OptimConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Mat], &[Mat]) {
        (&self.m, &self.v)
    }

    pub fn apply(&mut self, params: &mut ModelParams, grads: &[Mat]) -> Result<()> {
        let mut tensors = params.tensors_mut();
        if grads.len() != tensors.len() || tensors.len() != self.m.len() {
            return Err(Error::InvalidInput(format!(
                "expected {} gradient tensors, got {}",
                self.m.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (ti, p) in tensors.iter_mut().enumerate() {
            let g = &grads[ti];
            if (g.rows(), g.cols()) != (p.rows(), p.cols()) {
                return Err(Error::InvalidInput(format!("gradient {ti} has the wrong shape")));
            }
            let m = self.m[ti].data_mut();
            let v = self.v[ti].data_mut();
            for (i, pv) in p.data_mut().iter_mut().enumerate() {
                let gv = g.data()[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gv;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gv * gv;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *pv -= c.lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * *pv);
            }
        }
        Ok(())
    }
}

/// Scale all gradients down to the given global norm when they exceed it.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Mat], max_norm: f64) -> f64 {
    let mut acc = KahanSum::default();
    for g in grads.iter() {
        for v in g.data() {
            acc.add(v * v);
        }
    }
    let norm = acc.value().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Integrate dx/dt = field(x, t) from t = 0 to 1 with classical fourth-order
/// Runge-Kutta over a fixed number of steps. All clouds advance together so
/// the field can batch them.
pub fn integrate_rk4<F>(start: &[PointCloud], steps: usize, mut field: F) -> Result<Vec<PointCloud>>
where
    F: FnMut(&[PointCloud], f64) -> Result<Vec<Vec<[f64; 3]>>>,
{
    if steps == 0 {
        return Err(Error::InvalidInput("integration needs at least one step".into()));
    }
    if start.is_empty() {
        return Err(Error::InvalidInput("integration needs at least one cloud".into()));
    }
    let check = |vels: &[Vec<[f64; 3]>], clouds: &[PointCloud]| -> Result<()> {
        if vels.len() != clouds.len() || vels.iter().zip(clouds).any(|(v, c)| v.len() != c.len()) {
            return Err(Error::InvalidInput("field output shape mismatch".into()));
        }
        Ok(())
    };
    let shifted = |base: &[PointCloud], k: &[Vec<[f64; 3]>], h: f64| -> Vec<PointCloud> {
        base.iter()
            .zip(k)
            .map(|(c, kv)| {
                PointCloud::new(
                    c.points()
                        .iter()
                        .zip(kv)
                        .map(|(p, v)| [p[0] + h * v[0], p[1] + h * v[1], p[2] + h * v[2]])
                        .collect(),
                )
                .expect("same size as input cloud")
            })
            .collect()
    };
    let mut xs: Vec<PointCloud> = start.to_vec();
    let h = 1.0 / steps as f64;
    for n in 0..steps {
        let t = n as f64 * h;
        let k1 = field(&xs, t)?;
        check(&k1, &xs)?;
        let k2 = field(&shifted(&xs, &k1, h / 2.0), t + h / 2.0)?;
        check(&k2, &xs)?;
        let k3 = field(&shifted(&xs, &k2, h / 2.0), t + h / 2.0)?;
        check(&k3, &xs)?;
        let t_end = if n + 1 == steps { 1.0 } else { t + h };
        let k4 = field(&shifted(&xs, &k3, h), t_end)?;
        check(&k4, &xs)?;
        for (ci, cloud) in xs.iter_mut().enumerate() {
            let pts: Vec<[f64; 3]> = cloud
                .points()
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    std::array::from_fn(|d| {
                        p[d] + h / 6.0
                            * (k1[ci][i][d]
                                + 2.0 * k2[ci][i][d]
                                + 2.0 * k3[ci][i][d]
                                + k4[ci][i][d])
                    })
                })
                .collect();
            *cloud = PointCloud::new(pts).expect("same size as input cloud");
        }
    }
    Ok(xs)
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    config: OptimConfig,
    step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    irreps_convention: String,
    model: ModelConfig,
    train_step: u64,
    rng_seed: u64,
    dataset_fingerprint: u64,
    param_elems: u64,
    optimizer: Option<OptimizerHeader>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: Option<AdamW>,
    pub train_step: u64,
    pub rng_seed: u64,
    pub dataset_fingerprint: u64,
}

fn push_tensors(out: &mut Vec<u8>, tensors: &[&Mat]) {
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Serialize a checkpoint to bytes. The layout is a fixed magic, a format
/// version, a JSON header and raw little-endian f64 tensor data, so equal
/// states serialize to equal bytes.
pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let param_elems = ckpt.params.param_count() as u64;
    let header = CheckpointHeader {
        irreps_convention: IRREPS_CONVENTION.to_string(),
        model: ckpt.params.config().clone(),
        train_step: ckpt.train_step,
        rng_seed: ckpt.rng_seed,
        dataset_fingerprint: ckpt.dataset_fingerprint,
        param_elems,
        optimizer: ckpt
            .optimizer
            .as_ref()
            .map(|o| OptimizerHeader { config: o.config, step: o.step }),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header serialization failed: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    push_tensors(&mut out, &ckpt.params.tensors());
    if let Some(o) = &ckpt.optimizer {
        push_tensors(&mut out, &o.m.iter().collect::<Vec<_>>());
        push_tensors(&mut out, &o.v.iter().collect::<Vec<_>>());
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = checkpoint_bytes(ckpt)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

struct F64Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl F64Reader<'_> {
    fn fill(&mut self, tensors: &mut [&mut Mat]) -> Result<()> {
        for t in tensors {
            for v in t.data_mut() {
                let end = self.pos + 8;
                if end > self.bytes.len() {
                    return Err(Error::Checkpoint("tensor data truncated".into()));
                }
                *v = f64::from_le_bytes(self.bytes[self.pos..end].try_into().expect("8 bytes"));
                self.pos = end;
            }
        }
        Ok(())
    }
}

pub fn load_checkpoint_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    if bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion { found: version, supported: CHECKPOINT_VERSION });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body_start = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("header length exceeds file size".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..body_start])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.irreps_convention != IRREPS_CONVENTION {
        return Err(Error::Checkpoint(format!(
            "weights use convention {:?}, this build expects {IRREPS_CONVENTION:?}",
            header.irreps_convention
        )));
    }
    let mut params = ModelParams::zeroed(header.model.clone())?;
    if params.param_count() as u64 != header.param_elems {
        return Err(Error::Checkpoint(format!(
            "header promises {} parameter values, model needs {}",
            header.param_elems,
            params.param_count()
        )));
    }
    let mut reader = F64Reader { bytes, pos: body_start };
    reader.fill(&mut params.tensors_mut())?;
    let optimizer = match header.optimizer {
        None => None,
        Some(oh) => {
            let mut m: Vec<Mat> =
                params.tensors().iter().map(|t| Mat::zeros(t.rows(), t.cols())).collect();
            let mut v = m.clone();
            reader.fill(&mut m.iter_mut().collect::<Vec<_>>())?;
            reader.fill(&mut v.iter_mut().collect::<Vec<_>>())?;
            Some(AdamW::from_state(oh.config, oh.step, m, v)?)
        }
    };
    if reader.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after tensor data",
            bytes.len() - reader.pos
        )));
    }
    Ok(Checkpoint {
        params,
        optimizer,
        train_step: header.train_step,
        rng_seed: header.rng_seed,
        dataset_fingerprint: header.dataset_fingerprint,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    load_checkpoint_bytes(&bytes)
}

fn default_clip_norm() -> f64 {
    10.0
}

fn default_pool() -> usize {
    OT_POOL_SIZE
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    pub coupling: CouplingKind,
    /// Noise width around the straight path.
    #[serde(default)]
    pub sigma: f64,
    pub steps: u64,
    /// Molecules per optimization step.
    pub batch: usize,
    pub seed: u64,
    #[serde(default = "default_clip_norm")]
    pub clip_norm: f64,
    /// Noise clouds matched against conformers per molecule draw.
    #[serde(default = "default_pool")]
    pub pool: usize,
    /// Steps between held-out loss evaluations, zero to disable.
    #[serde(default)]
    pub eval_every: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        if self.steps == 0 || self.batch == 0 || self.pool == 0 {
            return Err(Error::InvalidInput("steps, batch and pool must be nonzero".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidInput(format!("sigma must be finite and >= 0, got {}", self.sigma)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::InvalidInput("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogKind {
    Train,
    Val,
}

/// One JSONL line in the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub kind: LogKind,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_norm: Option<f64>,
}

const SALT_PICK: u64 = 0;
const SALT_VAL: u64 = 0x76616c5f70617373;
const SALT_SAMPLE: u64 = 0x73616d706c655f30;

/// The (noise, time, velocity target) draw for one molecule at one step.
struct TrainExample {
    coords: PointCloud,
    targets: Vec<[f64; 3]>,
    time: f64,
}

fn draw_example(
    mol: &Molecule,
    kind: CouplingKind,
    sigma: f64,
    pool: usize,
    rng: &mut ChaCha20Rng,
) -> Result<TrainExample> {
    let k = mol.num_atoms();
    let p = pool.min(mol.conformers.len());
    let chosen: Vec<usize> = if mol.conformers.len() > p {
        let mut idx = rand::seq::index::sample(rng, mol.conformers.len(), p).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..mol.conformers.len()).collect()
    };
    let data: Vec<PointCloud> = chosen.iter().map(|&i| mol.conformers[i].clone()).collect();
    let noise: Vec<PointCloud> =
        (0..p).map(|_| sample_noise_cloud(k, rng)).collect::<Result<_>>()?;
    let pairs = sample_coupling(kind, &noise, &data)?;
    let pick = rng.random_range(0..pairs.len());
    let t: f64 = rng.random();
    let (coords, targets) = cond_path_sample(&pairs[pick], t, sigma, rng)?;
    Ok(TrainExample { coords, targets, time: t })
}

fn batch_examples(
    data: &DatasetIndex,
    picked: &[usize],
    examples: &[TrainExample],
) -> Result<(GraphBatch, Vec<[f64; 3]>)> {
    let items: Vec<GraphItem> = picked
        .iter()
        .zip(examples)
        .map(|(&mi, ex)| {
            let mol = &data.molecules[mi];
            GraphItem { atoms: &mol.atoms, bonds: &mol.bonds, coords: &ex.coords, time: ex.time }
        })
        .collect();
    let batch = GraphBatch::new(&items)?;
    let targets: Vec<[f64; 3]> = examples.iter().flat_map(|ex| ex.targets.iter().copied()).collect();
    Ok((batch, targets))
}

fn pick_molecules(data: &DatasetIndex, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    let n = data.molecules.len();
    if batch >= n {
        return (0..n).collect();
    }
    let mut rng = derive_rng(seed, step, SALT_PICK);
    let mut idx = rand::seq::index::sample(&mut rng, n, batch).into_vec();
    idx.sort_unstable();
    idx
}

fn step_examples(
    data: &DatasetIndex,
    picked: &[usize],
    config: &TrainConfig,
    step: u64,
    seed_xor: u64,
) -> Result<Vec<TrainExample>> {
    picked
        .iter()
        .map(|&mi| {
            let mol = &data.molecules[mi];
            let mut rng =
                derive_rng(config.seed ^ seed_xor, step, fnv1a64(mol.id.as_bytes()));
            draw_example(mol, config.coupling, config.sigma, config.pool, &mut rng)
        })
        .collect()
}

/// Mean conditional-velocity regression loss over a whole dataset with draws
/// derived from the given step, without touching the parameters.
pub fn validation_loss(
    params: &ModelParams,
    data: &DatasetIndex,
    config: &TrainConfig,
    step: u64,
) -> Result<f64> {
    let picked: Vec<usize> = (0..data.molecules.len()).collect();
    let examples = step_examples(data, &picked, config, step, SALT_VAL)?;
    let (batch, targets) = batch_examples(data, &picked, &examples)?;
    let pred = forward(params, &batch)?;
    cfm_loss(&pred, &targets)
}

/// Run the optimization loop, starting fresh or from a checkpoint, writing
/// one JSONL record per step. Returns the final state.
pub fn train(
    config: &TrainConfig,
    data: &DatasetIndex,
    val: Option<&DatasetIndex>,
    start: Option<Checkpoint>,
    log: &mut dyn Write,
) -> Result<Checkpoint> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("training needs a non-empty dataset".into()));
    }
    let fingerprint = dataset_fingerprint(data);
    let (mut params, mut optimizer, start_step) = match start {
        Some(ckpt) => {
            if ckpt.params.config() != &config.model {
                return Err(Error::Checkpoint(
                    "checkpoint model shape differs from the run configuration".into(),
                ));
            }
            if ckpt.dataset_fingerprint != fingerprint {
                return Err(Error::Checkpoint(
                    "checkpoint was trained on a different dataset".into(),
                ));
            }
            if ckpt.rng_seed != config.seed {
                return Err(Error::Checkpoint(
                    "checkpoint seed differs from the run configuration".into(),
                ));
            }
            let optimizer = match ckpt.optimizer {
                Some(o) => o,
                None => AdamW::new(config.optim, &ckpt.params)?,
            };
            (ckpt.params, optimizer, ckpt.train_step)
        }
        None => {
            // Probe the first step's batch so the initial output spread is
            // around one.
            let picked = pick_molecules(data, config.batch, config.seed, 0);
            let examples = step_examples(data, &picked, config, 0, 0)?;
            let (probe, _) = batch_examples(data, &picked, &examples)?;
            let params = init_params(&config.model, config.seed, Some(&probe))?;
            let optimizer = AdamW::new(config.optim, &params)?;
            (params, optimizer, 0)
        }
    };

    for step in start_step..config.steps {
        let picked = pick_molecules(data, config.batch, config.seed, step);
        let examples = step_examples(data, &picked, config, step, 0)?;
        let (batch, targets) = batch_examples(data, &picked, &examples)?;
        let (loss, mut grads) = loss_and_grad(&params, &batch, &targets)?;
        let grad_norm = clip_gradients(&mut grads, config.clip_norm);
        optimizer.apply(&mut params, &grads)?;
        let record =
            LogRecord { step, kind: LogKind::Train, loss, grad_norm: Some(grad_norm) };
        writeln!(log, "{}", serde_json::to_string(&record).expect("log record is plain data"))
            .map_err(|e| Error::Checkpoint(format!("log write failed: {e}")))?;
        if config.eval_every > 0 && (step + 1) % config.eval_every == 0 {
            if let Some(vd) = val {
                let vl = validation_loss(&params, vd, config, step)?;
                let record = LogRecord { step, kind: LogKind::Val, loss: vl, grad_norm: None };
                writeln!(log, "{}", serde_json::to_string(&record).expect("log record is plain data"))
                    .map_err(|e| Error::Checkpoint(format!("log write failed: {e}")))?;
            }
        }
    }

    Ok(Checkpoint {
        params,
        optimizer: Some(optimizer),
        train_step: config.steps,
        rng_seed: config.seed,
        dataset_fingerprint: fingerprint,
    })
}

/// Draw noise clouds for one molecule and carry them along the learned field
/// from t = 0 to 1.
pub fn sample_conformers(
    params: &ModelParams,
    mol: &Molecule,
    count: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<PointCloud>> {
    if count == 0 {
        return Err(Error::InvalidInput("sampling needs a positive count".into()));
    }
    let mut rng = derive_rng(seed, 0, fnv1a64(mol.id.as_bytes()) ^ SALT_SAMPLE);
    let start: Vec<PointCloud> = (0..count)
        .map(|_| sample_noise_cloud(mol.num_atoms(), &mut rng))
        .collect::<Result<_>>()?;
    integrate_rk4(&start, steps, |clouds, t| {
        let items: Vec<GraphItem> = clouds
            .iter()
            .map(|c| GraphItem { atoms: &mol.atoms, bonds: &mol.bonds, coords: c, time: t })
            .collect();
        let batch = GraphBatch::new(&items)?;
        let vels = forward(params, &batch)?;
        Ok(batch
            .graph_ranges()
            .iter()
            .map(|&(s, e)| vels[s..e].to_vec())
            .collect())
    })
}
