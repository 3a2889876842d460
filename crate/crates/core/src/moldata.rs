//! Molecule ingestion and dataset bookkeeping.
//!
//! Datasets arrive as JSON lines, one molecule per line:
//!
//! ```text
//! {"id":"mol-1","atoms":[6,8],"bonds":[[0,1,"single"]],"conformers":[[[0.0,0.0,0.0],[1.2,0.0,0.0]]]}
//! ```
//!
//! `atoms` holds atomic numbers and every conformer lists one xyz triple per
//! atom. Bonds are undirected and stored with the smaller index first.

use crate::error::{Error, Result};
use crate::geomops::PointCloud;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    /// Stable small integer used for embedding lookups.
    pub fn index(self) -> usize {
        match self {
            BondOrder::Single => 0,
            BondOrder::Double => 1,
            BondOrder::Triple => 2,
            BondOrder::Aromatic => 3,
        }
    }

    pub const COUNT: usize = 4;
}

pub type Bond = (usize, usize, BondOrder);

#[derive(Debug, Clone, PartialEq)]
pub struct Molecule {
    pub id: String,
    pub atoms: Vec<u8>,
    pub bonds: Vec<Bond>,
    pub conformers: Vec<PointCloud>,
}

impl Molecule {
    pub fn new(
        id: String,
        atoms: Vec<u8>,
        bonds: Vec<Bond>,
        conformers: Vec<PointCloud>,
    ) -> Result<Self> {
        let fail = |message: String| Err(Error::Validation { id: id.clone(), message });
        if id.is_empty() {
            return Err(Error::Validation {
                id: "<empty>".into(),
                message: "molecule id must be non-empty".into(),
            });
        }
        if atoms.is_empty() {
            return fail("molecule has no atoms".into());
        }
        if conformers.is_empty() {
            return fail("molecule has no conformers".into());
        }
        let k = atoms.len();
        for (ci, c) in conformers.iter().enumerate() {
            if c.len() != k {
                return fail(format!(
                    "conformer {ci} has {} points but the molecule has {k} atoms",
                    c.len()
                ));
            }
        }
        let mut normalized = Vec::with_capacity(bonds.len());
        let mut seen = BTreeSet::new();
        for &(i, j, order) in &bonds {
            if i == j {
                return fail(format!("self bond on atom {i}"));
            }
            if i >= k || j >= k {
                return fail(format!("bond ({i}, {j}) references a missing atom"));
            }
            let key = (i.min(j), i.max(j));
            if !seen.insert(key) {
                return fail(format!("duplicate bond between atoms {} and {}", key.0, key.1));
            }
            normalized.push((key.0, key.1, order));
        }
        normalized.sort();
        Ok(Molecule { id, atoms, bonds: normalized, conformers })
    }

    pub fn num_atoms(&self) -> usize {
        self.atoms.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub format: String,
}

#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub molecules: Vec<Molecule>,
    pub split_tag: Option<String>,
    pub provenance: Provenance,
}

impl DatasetIndex {
    pub fn new(
        molecules: Vec<Molecule>,
        split_tag: Option<String>,
        provenance: Provenance,
    ) -> Result<Self> {
        let mut ids = BTreeSet::new();
        for m in &molecules {
            if !ids.insert(m.id.clone()) {
                return Err(Error::Validation {
                    id: m.id.clone(),
                    message: "duplicate molecule id in dataset".into(),
                });
            }
        }
        Ok(DatasetIndex { molecules, split_tag, provenance })
    }

    pub fn len(&self) -> usize {
        self.molecules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.molecules.is_empty()
    }

    pub fn find(&self, id: &str) -> Option<&Molecule> {
        self.molecules.iter().find(|m| m.id == id)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRecord {
    id: String,
    atoms: Vec<u8>,
    bonds: Vec<(usize, usize, BondOrder)>,
    conformers: Vec<Vec<[f64; 3]>>,
}

pub const DATASET_FORMAT: &str = "jsonl-v1";

/// Parse a JSONL stream where each line is one molecule with its conformers.
pub fn parse_dataset<R: BufRead>(reader: R, source: &str) -> Result<DatasetIndex> {
    let mut molecules = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        let conformers = rec
            .conformers
            .into_iter()
            .map(PointCloud::new)
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Validation { id: rec.id.clone(), message: e.to_string() })?;
        molecules.push(Molecule::new(rec.id, rec.atoms, rec.bonds, conformers)?);
    }
    DatasetIndex::new(
        molecules,
        None,
        Provenance { source: source.to_string(), format: DATASET_FORMAT.to_string() },
    )
}

pub fn parse_dataset_file(path: &std::path::Path) -> Result<DatasetIndex> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_dataset(std::io::BufReader::new(file), &path.display().to_string())
}

/// One observed conformation before grouping.
#[derive(Debug, Clone)]
pub struct RawRecord {
    pub id: String,
    pub atoms: Vec<u8>,
    pub bonds: Vec<Bond>,
    pub conformer: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CleanStats {
    pub groups: usize,
    pub records_kept: usize,
    pub records_dropped: usize,
    pub dropped_by_id: BTreeMap<String, usize>,
}

/// Merge per-conformation records that share an id. Within a group the
/// majority (atom list, bond set) wins; records disagreeing with it are
/// dropped and counted. Ties go to the signature seen first.
pub fn group_and_clean(records: Vec<RawRecord>) -> Result<(Vec<Molecule>, CleanStats)> {
    type Sig = (Vec<u8>, Vec<Bond>);
    let mut order: Vec<String> = Vec::new();
    let mut by_id: BTreeMap<String, Vec<RawRecord>> = BTreeMap::new();
    for r in records {
        if !by_id.contains_key(&r.id) {
            order.push(r.id.clone());
        }
        by_id.entry(r.id.clone()).or_default().push(r);
    }

    let mut stats = CleanStats::default();
    let mut out = Vec::new();
    for id in order {
        let group = by_id.remove(&id).expect("group exists");
        let mut sig_counts: Vec<(Sig, usize)> = Vec::new();
        let sig_of = |r: &RawRecord| -> Sig {
            let mut bonds: Vec<Bond> = r
                .bonds
                .iter()
                .map(|&(i, j, o)| (i.min(j), i.max(j), o))
                .collect();
            bonds.sort();
            (r.atoms.clone(), bonds)
        };
        for r in &group {
            let sig = sig_of(r);
            match sig_counts.iter_mut().find(|(s, _)| *s == sig) {
                Some((_, n)) => *n += 1,
                None => sig_counts.push((sig, 1)),
            }
        }
        let winner = sig_counts
            .iter()
            .max_by_key(|(_, n)| *n)
            .map(|(s, _)| s.clone())
            .expect("non-empty group");
        let mut conformers = Vec::new();
        for r in &group {
            if sig_of(r) == winner {
                conformers.push(PointCloud::new(r.conformer.clone()).map_err(|e| {
                    Error::Validation { id: id.clone(), message: e.to_string() }
                })?);
            } else {
                stats.records_dropped += 1;
                *stats.dropped_by_id.entry(id.clone()).or_insert(0) += 1;
            }
        }
        stats.records_kept += conformers.len();
        stats.groups += 1;
        out.push(Molecule::new(id, winner.0, winner.1, conformers)?);
    }
    Ok((out, stats))
}

/// Remove hydrogens, remapping bonds onto the surviving heavy atoms.
/// Heavy atoms keep their relative order.
pub fn strip_hydrogens(mol: &Molecule) -> Result<Molecule> {
    let keep: Vec<usize> = (0..mol.atoms.len()).filter(|&i| mol.atoms[i] != 1).collect();
    if keep.is_empty() {
        return Err(Error::Validation {
            id: mol.id.clone(),
            message: "molecule contains only hydrogens".into(),
        });
    }
    let mut remap = vec![usize::MAX; mol.atoms.len()];
    for (new, &old) in keep.iter().enumerate() {
        remap[old] = new;
    }
    let atoms = keep.iter().map(|&i| mol.atoms[i]).collect();
    let bonds = mol
        .bonds
        .iter()
        .filter(|&&(i, j, _)| mol.atoms[i] != 1 && mol.atoms[j] != 1)
        .map(|&(i, j, o)| (remap[i], remap[j], o))
        .collect();
    let conformers = mol
        .conformers
        .iter()
        .map(|c| PointCloud::new(keep.iter().map(|&i| c.points()[i]).collect()))
        .collect::<Result<Vec<_>>>()?;
    Molecule::new(mol.id.clone(), atoms, bonds, conformers)
}

/// Shuffle molecule ids with the seed and partition by the given fractions.
/// Sizes are floors of fraction * n, with the remainder handed out one
/// molecule at a time in declared split order.
pub fn split_dataset(
    index: &DatasetIndex,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(DatasetIndex, DatasetIndex, DatasetIndex)> {
    let fr = [fractions.0, fractions.1, fractions.2];
    if fr.iter().any(|f| *f <= 0.0 || !f.is_finite()) {
        return Err(Error::InvalidInput("split fractions must be positive".into()));
    }
    if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput("split fractions must sum to 1".into()));
    }
    let n = index.len();
    let mut sizes = [0usize; 3];
    for (s, f) in sizes.iter_mut().zip(&fr) {
        *s = (f * n as f64).floor() as usize;
    }
    let mut rem = n - sizes.iter().sum::<usize>();
    for s in sizes.iter_mut() {
        if rem == 0 {
            break;
        }
        *s += 1;
        rem -= 1;
    }
    if sizes.iter().any(|&s| s == 0) {
        return Err(Error::InvalidInput(format!(
            "dataset with {n} molecules cannot fill splits {sizes:?}"
        )));
    }

    let mut ids: Vec<&str> = index.molecules.iter().map(|m| m.id.as_str()).collect();
    ids.sort_unstable();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);

    let mut parts: Vec<Vec<Molecule>> = vec![Vec::new(), Vec::new(), Vec::new()];
    let mut cursor = 0usize;
    for (p, &size) in sizes.iter().enumerate() {
        for id in &ids[cursor..cursor + size] {
            parts[p].push(index.find(id).expect("id from this index").clone());
        }
        cursor += size;
    }
    let tags = ["train", "val", "test"];
    let mut out = Vec::new();
    for (part, tag) in parts.into_iter().zip(tags) {
        out.push(DatasetIndex::new(
            part,
            Some(tag.to_string()),
            index.provenance.clone(),
        )?);
    }
    let mut it = out.into_iter();
    Ok((it.next().unwrap(), it.next().unwrap(), it.next().unwrap()))
}

const SYMBOLS: [&str; 119] = [
    "?", "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S",
    "Cl", "Ar", "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge",
    "As", "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd",
    "In", "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd",
    "Tb", "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg",
    "Tl", "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa", "U", "Np", "Pu", "Am", "Cm",
    "Bk", "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds", "Rg",
    "Cn", "Nh", "Fl", "Mc", "Lv", "Ts", "Og",
];

pub fn element_symbol(z: u8) -> Result<&'static str> {
    SYMBOLS
        .get(z as usize)
        .filter(|_| z > 0)
        .copied()
        .ok_or_else(|| Error::InvalidInput(format!("atomic number {z} out of range")))
}

pub fn element_number(symbol: &str) -> Result<u8> {
    SYMBOLS
        .iter()
        .position(|s| *s == symbol)
        .filter(|&p| p > 0)
        .map(|p| p as u8)
        .ok_or_else(|| Error::InvalidInput(format!("unknown element symbol '{symbol}'")))
}

/// Write one conformer in XYZ format: count, id comment, then
/// `symbol x y z` with six decimal places.
pub fn export_xyz<W: Write>(mol: &Molecule, conformer: usize, w: &mut W) -> Result<()> {
    let cloud = mol.conformers.get(conformer).ok_or_else(|| Error::Validation {
        id: mol.id.clone(),
        message: format!("conformer index {conformer} out of range"),
    })?;
    if mol.id.contains(['/', '\\', '\n']) || mol.id == ".." {
        return Err(Error::Validation {
            id: mol.id.clone(),
            message: "molecule id is not usable as a file name".into(),
        });
    }
    let mut io_err = |e: std::io::Error| Error::io(format!("xyz export of {}", mol.id), e);
    writeln!(w, "{}", mol.num_atoms()).map_err(&mut io_err)?;
    writeln!(w, "{}", mol.id).map_err(&mut io_err)?;
    for (z, p) in mol.atoms.iter().zip(cloud.points()) {
        writeln!(w, "{} {:.6} {:.6} {:.6}", element_symbol(*z)?, p[0], p[1], p[2])
            .map_err(&mut io_err)?;
    }
    Ok(())
}

/// Read a single-frame XYZ file back into (id, atomic numbers, coordinates).
pub fn read_xyz<R: BufRead>(reader: R) -> Result<(String, Vec<u8>, PointCloud)> {
    let mut lines = reader.lines().enumerate();
    let mut next_line = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((n, Ok(l))) => Ok((n, l)),
            Some((n, Err(e))) => Err(Error::Parse { line: n + 1, message: e.to_string() }),
            None => Err(Error::Parse { line: 0, message: format!("missing {what}") }),
        }
    };
    let (n0, count_line) = next_line("atom count line")?;
    let count: usize = count_line.trim().parse().map_err(|_| Error::Parse {
        line: n0 + 1,
        message: format!("invalid atom count '{}'", count_line.trim()),
    })?;
    let (_, id) = next_line("comment line")?;
    let mut atoms = Vec::with_capacity(count);
    let mut pts = Vec::with_capacity(count);
    for _ in 0..count {
        let (n, line) = next_line("atom line")?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: n + 1,
                message: format!("expected 'symbol x y z', found '{line}'"),
            });
        }
        atoms.push(element_number(fields[0]).map_err(|e| Error::Parse {
            line: n + 1,
            message: e.to_string(),
        })?);
        let mut p = [0.0; 3];
        for d in 0..3 {
            p[d] = fields[d + 1].parse().map_err(|_| Error::Parse {
                line: n + 1,
                message: format!("invalid coordinate '{}'", fields[d + 1]),
            })?;
        }
        pts.push(p);
    }
    Ok((id.trim().to_string(), atoms, PointCloud::new(pts)?))
}
