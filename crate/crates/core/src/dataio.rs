//! Solvent property and reaction tables: loading, validation, normalization
//! statistics, and the validation/test split.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const N_PROPS: usize = 12;

/// Canonical property order; also the CSV column order after `name,type,smiles`.
pub const PROPERTY_NAMES: [&str; N_PROPS] =
    ["ET30", "alpha", "beta", "pi_star", "SA", "SB", "SP", "SdP", "N_density", "n_refractive", "f_n", "delta"];

pub const SPANGE_ID_COLUMNS: [&str; 3] = ["name", "type", "smiles"];

pub const CATECHOL_COLUMNS: [&str; 8] =
    ["solvent_a", "solvent_b", "frac_a", "temperature_C", "residence_time_min", "sm", "p2", "p3"];

/// Numeric placeholders some spreadsheets use for missing data.
const SENTINELS: [f64; 3] = [-99.0, -999.0, -9999.0];

pub type Props = [Option<f64>; N_PROPS];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolventRecord {
    pub name: String,
    pub solvent_type: String,
    pub smiles: Option<String>,
    pub props: Props,
}

impl SolventRecord {
    pub fn present_count(&self) -> usize {
        self.props.iter().filter(|p| p.is_some()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.present_count() == N_PROPS
    }
}

/// Solvent records with unique names, in file order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SolventTable {
    records: Vec<SolventRecord>,
    index: HashMap<String, usize>,
}

impl SolventTable {
    pub fn from_records(records: Vec<SolventRecord>) -> Result<Self> {
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.name.is_empty() {
                return Err(Error::Validation(format!("row {} has an empty solvent name", i + 1)));
            }
            if r.solvent_type.is_empty() {
                return Err(Error::Validation(format!("solvent `{}` has an empty type", r.name)));
            }
            if let Some(p) = r.props.iter().flatten().find(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("solvent `{}` has non-finite value {p}", r.name)));
            }
            if index.insert(r.name.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate solvent name `{}`", r.name)));
            }
        }
        Ok(Self { records, index })
    }

    pub fn records(&self) -> &[SolventRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&SolventRecord> {
        self.index.get(name).map(|&i| &self.records[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<&SolventRecord> {
        self.get(name).ok_or_else(|| Error::Resolution(vec![name.to_string()]))
    }

    /// Sorted distinct solvent types.
    pub fn types(&self) -> Vec<String> {
        let set: std::collections::BTreeSet<_> = self.records.iter().map(|r| r.solvent_type.clone()).collect();
        set.into_iter().collect()
    }
}

fn spange_header() -> Vec<&'static str> {
    SPANGE_ID_COLUMNS.iter().chain(PROPERTY_NAMES.iter()).copied().collect()
}

fn check_header(found: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    for (i, want) in expected.iter().enumerate() {
        match found.get(i) {
            Some(got) if got == *want => {}
            Some(got) => {
                return Err(Error::Format(format!("column {} is `{got}`, expected `{want}`", i + 1)));
            }
            None => return Err(Error::Format(format!("missing column `{want}`"))),
        }
    }
    if found.len() > expected.len() {
        return Err(Error::Format(format!("unexpected extra column `{}`", &found[expected.len()])));
    }
    Ok(())
}

fn parse_cell(cell: &str, row: usize, column: &str) -> Result<Option<f64>> {
    if cell.is_empty() {
        return Ok(None);
    }
    let err = |message: String| Error::Parse { row, column: column.to_string(), message };
    let v: f64 = cell.parse().map_err(|_| err(format!("`{cell}` is not a number")))?;
    if !v.is_finite() {
        return Err(err(format!("`{cell}` is not finite")));
    }
    if SENTINELS.contains(&v) {
        return Err(err(format!("`{cell}` looks like a missing-value sentinel; leave the cell empty")));
    }
    Ok(Some(v))
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).flexible(true).from_reader(r)
}

pub fn read_spange<R: Read>(input: R) -> Result<SolventTable> {
    let mut rdr = reader(input);
    let header = spange_header();
    check_header(rdr.headers()?, &header)?;
    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let line = i + 2;
        if row.len() != header.len() {
            return Err(Error::Format(format!("row {line} has {} cells, expected {}", row.len(), header.len())));
        }
        let mut props = [None; N_PROPS];
        for (p, slot) in props.iter_mut().enumerate() {
            *slot = parse_cell(&row[3 + p], line, PROPERTY_NAMES[p])?;
        }
        let smiles = (!row[2].is_empty()).then(|| row[2].to_string());
        records.push(SolventRecord { name: row[0].to_string(), solvent_type: row[1].to_string(), smiles, props });
    }
    SolventTable::from_records(records)
}

pub fn load_spange(path: &Path) -> Result<SolventTable> {
    let table = read_spange(File::open(path)?)?;
    log::info!("loaded {} solvents from {}", table.len(), path.display());
    Ok(table)
}

/// Canonical serialization: fixed header, shortest round-trip number format,
/// empty cells for missing values.
pub fn write_spange<W: Write>(table: &SolventTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(spange_header())?;
    for r in table.records() {
        let mut row = vec![r.name.clone(), r.solvent_type.clone(), r.smiles.clone().unwrap_or_default()];
        row.extend(r.props.iter().map(|p| p.map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-property z-normalization statistics from the training fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertySchema {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl PropertySchema {
    #[inline]
    pub fn normalize(&self, prop: usize, x: f64) -> f64 {
        (x - self.mean[prop]) / self.std[prop]
    }

    #[inline]
    pub fn denormalize(&self, prop: usize, z: f64) -> f64 {
        z * self.std[prop] + self.mean[prop]
    }
}

/// Mean and population standard deviation over the present values of the
/// given training solvents.
pub fn compute_schema(table: &SolventTable, train_ids: &[String]) -> Result<PropertySchema> {
    let rows: Vec<&SolventRecord> = train_ids.iter().map(|id| table.require(id)).collect::<Result<_>>()?;
    let mut mean = Vec::with_capacity(N_PROPS);
    let mut std = Vec::with_capacity(N_PROPS);
    for (p, name) in PROPERTY_NAMES.iter().enumerate() {
        let vals: Vec<f64> = rows.iter().filter_map(|r| r.props[p]).collect();
        if vals.len() < 2 {
            return Err(Error::Validation(format!(
                "property `{name}` has {} training values, need at least 2",
                vals.len()
            )));
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
        let s = var.sqrt();
        if s <= 1e-12 * m.abs().max(1.0) {
            return Err(Error::ZeroVariance(name.to_string()));
        }
        mean.push(m);
        std.push(s);
    }
    Ok(PropertySchema { names: PROPERTY_NAMES.iter().map(|s| s.to_string()).collect(), mean, std })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSplit {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub seed: u64,
}

impl DataSplit {
    /// Training plus validation solvents, in table order.
    pub fn train_and_val(&self, table: &SolventTable) -> Vec<String> {
        let keep: HashSet<&String> = self.train_ids.iter().chain(&self.val_ids).collect();
        table.records().iter().filter(|r| keep.contains(&r.name)).map(|r| r.name.clone()).collect()
    }
}

const SPLIT_STREAM: u64 = 0x0053_504c_4954; // "SPLIT"

/// Draw one complete solvent per listed validation type, then one per listed
/// test type from what remains; everything else trains.
pub fn split_solvents(
    table: &SolventTable,
    val_types: &[String],
    test_types: &[String],
    seed: u64,
) -> Result<DataSplit> {
    let mut rng = rng::derived(seed, &[SPLIT_STREAM]);
    let mut taken: HashSet<String> = HashSet::new();
    let mut draw = |ty: &String, taken: &mut HashSet<String>| -> Result<String> {
        let candidates: Vec<&SolventRecord> = table
            .records()
            .iter()
            .filter(|r| &r.solvent_type == ty && r.is_complete() && !taken.contains(&r.name))
            .collect();
        if candidates.is_empty() {
            return Err(Error::Split(ty.clone()));
        }
        let pick = candidates[rng.random_range(0..candidates.len())].name.clone();
        taken.insert(pick.clone());
        Ok(pick)
    };
    let val_ids = val_types.iter().map(|t| draw(t, &mut taken)).collect::<Result<Vec<_>>>()?;
    let test_ids = test_types.iter().map(|t| draw(t, &mut taken)).collect::<Result<Vec<_>>>()?;
    let train_ids = table.records().iter().filter(|r| !taken.contains(&r.name)).map(|r| r.name.clone()).collect();
    Ok(DataSplit { train_ids, val_ids, test_ids, seed })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReactionRecord {
    pub solvent_a: String,
    pub solvent_b: Option<String>,
    pub frac_a: f64,
    pub temperature: f64,
    pub residence_time: f64,
    pub sm: f64,
    pub p2: f64,
    pub p3: f64,
}

impl ReactionRecord {
    pub fn outcomes(&self) -> [f64; 3] {
        [self.sm, self.p2, self.p3]
    }

    pub fn is_single(&self) -> bool {
        self.solvent_b.is_none()
    }
}

/// Name → name map applied before resolving reaction solvents.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AliasMap(BTreeMap<String, String>);

impl AliasMap {
    pub fn resolve<'a>(&'a self, name: &'a str) -> &'a str {
        self.0.get(name).map(String::as_str).unwrap_or(name)
    }

    pub fn insert(&mut self, from: impl Into<String>, to: impl Into<String>) {
        self.0.insert(from.into(), to.into());
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn read_aliases<R: Read>(input: R) -> Result<AliasMap> {
    let mut rdr = reader(input);
    check_header(rdr.headers()?, &["from", "to"])?;
    let mut map = AliasMap::default();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        if row.len() != 2 || row[0].is_empty() || row[1].is_empty() {
            return Err(Error::Format(format!("alias row {} must have two non-empty cells", i + 2)));
        }
        map.insert(&row[0], &row[1]);
    }
    Ok(map)
}

pub fn load_aliases(path: &Path) -> Result<AliasMap> {
    read_aliases(File::open(path)?)
}

/// Parse reaction rows, canonicalize single-solvent rows, convert percent
/// outcomes to fractions, and resolve every solvent name against `solvents`.
///
/// Outcomes are treated as percentages when any outcome cell in the file
/// exceeds 1.
pub fn read_catechol<R: Read>(input: R, solvents: &SolventTable, aliases: &AliasMap) -> Result<Vec<ReactionRecord>> {
    let mut rdr = reader(input);
    check_header(rdr.headers()?, &CATECHOL_COLUMNS)?;
    let mut out = Vec::new();
    let mut unknown = std::collections::BTreeSet::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let line = i + 2;
        if row.len() != CATECHOL_COLUMNS.len() {
            return Err(Error::Format(format!("row {line} has {} cells, expected 8", row.len())));
        }
        let num = |c: usize| -> Result<f64> {
            parse_cell(&row[c], line, CATECHOL_COLUMNS[c])?.ok_or_else(|| Error::Parse {
                row: line,
                column: CATECHOL_COLUMNS[c].to_string(),
                message: "value required".into(),
            })
        };
        let a = row[0].to_string();
        if a.is_empty() {
            return Err(Error::Parse { row: line, column: "solvent_a".into(), message: "value required".into() });
        }
        let b = (!row[1].is_empty()).then(|| row[1].to_string());
        let frac_a = if b.is_none() && row[2].is_empty() { 1.0 } else { num(2)? };
        if !(0.0..=1.0).contains(&frac_a) {
            return Err(Error::Validation(format!("row {line}: frac_a = {frac_a} outside [0, 1]")));
        }
        if b.is_none() && frac_a != 1.0 {
            return Err(Error::Validation(format!("row {line}: single-solvent row with frac_a = {frac_a}")));
        }
        let mut resolve = |n: &str| -> String {
            let canon = aliases.resolve(n).to_string();
            if solvents.get(&canon).is_none() {
                unknown.insert(n.to_string());
            }
            canon
        };
        let solvent_a = resolve(&a);
        let solvent_b = b.as_deref().map(&mut resolve);
        out.push(ReactionRecord {
            solvent_a,
            solvent_b,
            frac_a,
            temperature: num(3)?,
            residence_time: num(4)?,
            sm: num(5)?,
            p2: num(6)?,
            p3: num(7)?,
        });
    }
    if !unknown.is_empty() {
        return Err(Error::Resolution(unknown.into_iter().collect()));
    }
    let percent = out.iter().any(|r| r.outcomes().iter().any(|&v| v > 1.0));
    for r in &mut out {
        if percent {
            r.sm /= 100.0;
            r.p2 /= 100.0;
            r.p3 /= 100.0;
        }
        if r.outcomes().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation(format!(
                "outcomes ({}, {}, {}) outside [0, 1] for {}",
                r.sm, r.p2, r.p3, r.solvent_a
            )));
        }
    }
    Ok(out)
}

pub fn load_catechol(path: &Path, solvents: &SolventTable, aliases: &AliasMap) -> Result<Vec<ReactionRecord>> {
    let recs = read_catechol(File::open(path)?, solvents, aliases)?;
    log::info!("loaded {} reaction records from {}", recs.len(), path.display());
    Ok(recs)
}

pub fn write_catechol<W: Write>(records: &[ReactionRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CATECHOL_COLUMNS)?;
    for r in records {
        w.write_record([
            r.solvent_a.clone(),
            r.solvent_b.clone().unwrap_or_default(),
            r.frac_a.to_string(),
            r.temperature.to_string(),
            r.residence_time.to_string(),
            r.sm.to_string(),
            r.p2.to_string(),
            r.p3.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Solvent types ranked by how many reaction records use them (mixture rows
/// count for both solvents); ties break by name.
pub fn rank_types_by_frequency(reactions: &[ReactionRecord], solvents: &SolventTable) -> Vec<String> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in reactions {
        for name in std::iter::once(&r.solvent_a).chain(r.solvent_b.as_ref()) {
            if let Some(s) = solvents.get(name) {
                *counts.entry(s.solvent_type.clone()).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.into_iter().map(|(t, _)| t).collect()
}

/// Types ranked by how many complete solvents they contain; ties by name.
pub fn rank_types_by_complete_count(solvents: &SolventTable) -> Vec<String> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in solvents.records().iter().filter(|r| r.is_complete()) {
        *counts.entry(r.solvent_type.clone()).or_default() += 1;
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.into_iter().map(|(t, _)| t).collect()
}

/// Default validation types (first nine) and test types (first five), ranked
/// by reaction frequency when reactions are given, else by complete-solvent
/// count.
pub fn default_type_lists(solvents: &SolventTable, reactions: Option<&[ReactionRecord]>) -> (Vec<String>, Vec<String>) {
    let ranked = match reactions {
        Some(rx) => rank_types_by_frequency(rx, solvents),
        None => rank_types_by_complete_count(solvents),
    };
    (ranked.iter().take(9).cloned().collect(), ranked.iter().take(5).cloned().collect())
}
