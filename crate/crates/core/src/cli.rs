//! Command-line entry points: training, sampling, scoring, dataset
//! inspection and the built-in numerical checks.

use crate::error::{Error, Result};
use crate::evalmetrics::{ensemble_report, EvalEntry};
use crate::flowrt::{
    load_checkpoint, sample_conformers, save_checkpoint, train, TrainConfig,
};
use crate::moldata::{parse_dataset_file, DatasetIndex, Molecule};
use crate::otcfm::{sample_noise_cloud, solve_assignment, OT_POOL_SIZE};
use crate::selftest;
use clap::{Parser, Subcommand};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "conflow",
    version,
    about = "Conformer ensembles from a rotation-aware flow over molecular graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the vector field to a conformer dataset.
    Train {
        /// JSON run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Training dataset, one molecule per JSONL line.
        #[arg(long)]
        data: PathBuf,
        /// Held-out dataset for periodic loss reports.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Output directory for the checkpoint and log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate conformers for dataset molecules from a trained model.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Only this molecule id.
        #[arg(long)]
        id: Option<String>,
        /// Clouds per molecule; twice the reference count when omitted.
        #[arg(long)]
        per_molecule: Option<usize>,
        /// Integration steps from noise to sample.
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Receives one <id>/<index>.xyz file per cloud.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score generated ensembles against a reference dataset.
    Eval {
        /// Directory layout written by sample.
        #[arg(long)]
        pred: PathBuf,
        /// Reference dataset.
        #[arg(long)]
        truth: PathBuf,
        /// Coverage threshold on aligned RMSD.
        #[arg(long, default_value_t = 0.5)]
        delta: f64,
    },
    /// Run the built-in numerical checks and report each bound.
    Selftest,
    /// Show how noise clouds pair with one molecule's conformers.
    OtPlan {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Summarize a dataset.
    DatasetStats {
        #[arg(long)]
        data: PathBuf,
    },
}

pub fn run() -> i32 {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Print a line to stdout, treating a closed pipe as a normal end of output.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    let full = out.write_all(text.as_bytes()).and_then(|()| {
        if text.ends_with('\n') {
            Ok(())
        } else {
            out.write_all(b"\n")
        }
    });
    match full {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        Err(e) => Err(Error::io("stdout".to_string(), e)),
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train { config, data, val, resume, out } => {
            cmd_train(&config, &data, val.as_deref(), resume.as_deref(), &out)
        }
        Command::Sample { ckpt, data, id, per_molecule, steps, seed, out_dir } => {
            cmd_sample(&ckpt, &data, id.as_deref(), per_molecule, steps, seed, &out_dir)
        }
        Command::Eval { pred, truth, delta } => cmd_eval(&pred, &truth, delta),
        Command::Selftest => cmd_selftest(),
        Command::OtPlan { data, id, seed } => cmd_ot_plan(&data, &id, seed),
        Command::DatasetStats { data } => cmd_dataset_stats(&data),
    }
}

fn read_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let config: TrainConfig = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

fn cmd_train(
    config_path: &Path,
    data_path: &Path,
    val_path: Option<&Path>,
    resume_path: Option<&Path>,
    out_dir: &Path,
) -> Result<i32> {
    let config = read_config(config_path)?;
    let data = parse_dataset_file(data_path)?;
    let val = val_path.map(parse_dataset_file).transpose()?;
    let start = resume_path.map(load_checkpoint).transpose()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let log_path = out_dir.join("train_log.jsonl");
    let log_file =
        fs::File::create(&log_path).map_err(|e| Error::io(log_path.display().to_string(), e))?;
    let mut log = BufWriter::new(log_file);
    let ckpt = train(&config, &data, val.as_ref(), start, &mut log)?;
    log.flush().map_err(|e| Error::io(log_path.display().to_string(), e))?;
    let ckpt_path = out_dir.join("model.ckpt");
    save_checkpoint(&ckpt_path, &ckpt)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        checkpoint: &'a str,
        log: &'a str,
        steps: u64,
        parameters: usize,
    }
    let summary = Summary {
        checkpoint: &ckpt_path.display().to_string(),
        log: &log_path.display().to_string(),
        steps: ckpt.train_step,
        parameters: ckpt.params.param_count(),
    };
    emit(&serde_json::to_string(&summary).expect("plain data"))?;
    Ok(0)
}

fn select<'a>(data: &'a DatasetIndex, id: Option<&str>) -> Result<Vec<&'a Molecule>> {
    match id {
        None => Ok(data.molecules.iter().collect()),
        Some(want) => data
            .find(want)
            .map(|m| vec![m])
            .ok_or_else(|| Error::InvalidInput(format!("no molecule with id {want:?}"))),
    }
}

fn cmd_sample(
    ckpt_path: &Path,
    data_path: &Path,
    id: Option<&str>,
    per_molecule: Option<usize>,
    steps: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<i32> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let data = parse_dataset_file(data_path)?;
    for mol in select(&data, id)? {
        let count = per_molecule.unwrap_or(2 * mol.conformers.len());
        let clouds = sample_conformers(&ckpt.params, mol, count, steps, seed)?;
        let dir = out_dir.join(&mol.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let shaped = Molecule::new(
            mol.id.clone(),
            mol.atoms.clone(),
            mol.bonds.clone(),
            clouds,
        )?;
        for idx in 0..shaped.conformers.len() {
            let path = dir.join(format!("{idx}.xyz"));
            let file =
                fs::File::create(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
            let mut w = BufWriter::new(file);
            crate::moldata::export_xyz(&shaped, idx, &mut w)?;
            w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
        }
        #[derive(Serialize)]
        struct Line<'a> {
            id: &'a str,
            count: usize,
            dir: String,
        }
        let line = Line { id: &mol.id, count, dir: dir.display().to_string() };
        emit(&serde_json::to_string(&line).expect("plain data"))?;
    }
    Ok(0)
}

fn numbered_xyz(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir.display().to_string(), e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("xyz") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        let n: usize = stem.parse().map_err(|_| {
            Error::InvalidInput(format!("{} is not an <index>.xyz file", path.display()))
        })?;
        found.push((n, path));
    }
    if found.is_empty() {
        return Err(Error::InvalidInput(format!("no .xyz files under {}", dir.display())));
    }
    found.sort();
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

fn cmd_eval(pred_dir: &Path, truth_path: &Path, delta: f64) -> Result<i32> {
    let truth = parse_dataset_file(truth_path)?;
    let mut entries = Vec::new();
    for mol in &truth.molecules {
        let dir = pred_dir.join(&mol.id);
        if !dir.is_dir() {
            continue;
        }
        let mut generated = Vec::new();
        for path in numbered_xyz(&dir)? {
            let file =
                fs::File::open(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
            let (_, atoms, cloud) = crate::moldata::read_xyz(BufReader::new(file))?;
            if atoms != mol.atoms {
                return Err(Error::InvalidInput(format!(
                    "{} lists different atoms than molecule {:?}",
                    path.display(),
                    mol.id
                )));
            }
            generated.push(cloud);
        }
        entries.push(EvalEntry {
            id: mol.id.clone(),
            generated,
            reference: mol.conformers.clone(),
        });
    }
    if entries.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no generated ensembles under {} match the dataset",
            pred_dir.display()
        )));
    }
    let report = ensemble_report(&entries, delta)?;
    emit(&serde_json::to_string_pretty(&report).expect("plain data"))?;
    Ok(0)
}

fn cmd_selftest() -> Result<i32> {
    let suites = selftest::run_all()?;
    emit(&selftest::format_report(&suites))?;
    if suites.iter().all(|s| s.passed()) {
        Ok(0)
    } else {
        Ok(1)
    }
}

fn cmd_ot_plan(data_path: &Path, id: &str, seed: u64) -> Result<i32> {
    let data = parse_dataset_file(data_path)?;
    let mol = data
        .find(id)
        .ok_or_else(|| Error::InvalidInput(format!("no molecule with id {id:?}")))?;
    let pool = OT_POOL_SIZE.min(mol.conformers.len());
    let mut rng = crate::flowrt::derive_rng(seed, 0, crate::flowrt::fnv1a64(id.as_bytes()));
    let noise: Vec<_> = (0..pool)
        .map(|_| sample_noise_cloud(mol.num_atoms(), &mut rng))
        .collect::<Result<_>>()?;
    let conformers = &mol.conformers[..pool];
    let costs = crate::geomops::conformer_cost_matrix(&noise, conformers)?;
    let assignment = solve_assignment(&costs)?;
    let total: f64 = assignment.iter().enumerate().map(|(i, &j)| costs[i][j]).sum();
    #[derive(Serialize)]
    struct Plan<'a> {
        id: &'a str,
        pool: usize,
        assignment: Vec<usize>,
        total_cost: f64,
        costs: Vec<Vec<f64>>,
    }
    let plan = Plan { id, pool, assignment, total_cost: total, costs };
    emit(&serde_json::to_string_pretty(&plan).expect("plain data"))?;
    Ok(0)
}

fn cmd_dataset_stats(data_path: &Path) -> Result<i32> {
    let data = parse_dataset_file(data_path)?;
    let mut elements: BTreeMap<String, usize> = BTreeMap::new();
    let mut orders: BTreeMap<String, usize> = BTreeMap::new();
    let mut atom_counts = Vec::new();
    let mut conformer_counts = Vec::new();
    for mol in &data.molecules {
        atom_counts.push(mol.num_atoms());
        conformer_counts.push(mol.conformers.len());
        for &z in &mol.atoms {
            let sym = crate::moldata::element_symbol(z)?.to_string();
            *elements.entry(sym).or_default() += 1;
        }
        for &(_, _, order) in &mol.bonds {
            *orders.entry(format!("{order:?}").to_lowercase()).or_default() += 1;
        }
    }
    #[derive(Serialize)]
    struct Stats {
        molecules: usize,
        conformers: usize,
        atoms_min: usize,
        atoms_max: usize,
        atoms_mean: f64,
        conformers_min: usize,
        conformers_max: usize,
        elements: BTreeMap<String, usize>,
        bond_orders: BTreeMap<String, usize>,
    }
    let n = data.molecules.len();
    let stats = Stats {
        molecules: n,
        conformers: conformer_counts.iter().sum(),
        atoms_min: atom_counts.iter().copied().min().unwrap_or(0),
        atoms_max: atom_counts.iter().copied().max().unwrap_or(0),
        atoms_mean: if n == 0 {
            0.0
        } else {
            atom_counts.iter().sum::<usize>() as f64 / n as f64
        },
        conformers_min: conformer_counts.iter().copied().min().unwrap_or(0),
        conformers_max: conformer_counts.iter().copied().max().unwrap_or(0),
        elements,
        bond_orders: orders,
    };
    emit(&serde_json::to_string_pretty(&stats).expect("plain data"))?;
    Ok(0)
}
