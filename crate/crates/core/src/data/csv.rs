//! Plain comma-separated files: observations, labels, split manifests and
//! an optional variable list. Quoted fields are rejected.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Episode, Splits};
use crate::error::{Error, Result};

pub const OBSERVATIONS_HEADER: &str = "patient_id,time,variable,value";
pub const LABELS_HEADER: &str = "patient_id,label";
pub const SPLITS_HEADER: &str = "patient_id,split";

pub const OBSERVATIONS_FILE: &str = "observations.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const SPLITS_FILE: &str = "splits.csv";
pub const VARIABLES_FILE: &str = "variables.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train = 0,
    Val = 1,
    Test = 2,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Data rows as `(line number, fields)` after checking the header.
fn rows<'a>(path: &Path, text: &'a str, header: &str, width: usize) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let mut lines = text.split('\n').enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == header => {}
        Some((_, h)) => return Err(parse_err(path, 1, format!("expected header `{header}`, found `{h}`"))),
        None => return Err(parse_err(path, 1, "missing header")),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let n = i + 1;
        if line.contains('"') {
            return Err(parse_err(path, n, "quoted fields are not supported"));
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(parse_err(path, n, format!("expected {width} fields, found {}", fields.len())));
        }
        out.push((n, fields));
    }
    Ok(out)
}

fn parse_f64(path: &Path, line: usize, field: &str, what: &str) -> Result<f64> {
    let x: f64 = field
        .trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("invalid {what} `{field}`")))?;
    if !x.is_finite() {
        return Err(parse_err(path, line, format!("non-finite {what} `{field}`")));
    }
    Ok(x)
}

/// Reads a variable list, one name per line.
pub fn read_variables(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

pub fn read_split_manifest(path: &Path) -> Result<HashMap<String, SplitName>> {
    let text = fs::read_to_string(path)?;
    let mut out = HashMap::new();
    for (n, f) in rows(path, &text, SPLITS_HEADER, 2)? {
        let split = match f[1].trim() {
            "train" => SplitName::Train,
            "val" => SplitName::Val,
            "test" => SplitName::Test,
            other => return Err(parse_err(path, n, format!("unknown split `{other}`"))),
        };
        out.insert(f[0].to_string(), split);
    }
    Ok(out)
}

/// Assembles a dataset from an observations file and a labels file.
///
/// Episodes follow the order of the labels file; labelled patients without
/// observations are left out. Without `variables`, the
/// variable list is the sorted set of names in the observations file. Without
/// `t_max`, the horizon is the largest timestamp (or 1 when there is none).
pub fn load_dataset(
    observations: &Path,
    labels: &Path,
    t_max: Option<f64>,
    variables: Option<Vec<String>>,
) -> Result<Dataset> {
    let obs_text = fs::read_to_string(observations)?;
    let obs_rows = rows(observations, &obs_text, OBSERVATIONS_HEADER, 4)?;
    let lab_text = fs::read_to_string(labels)?;
    let lab_rows = rows(labels, &lab_text, LABELS_HEADER, 2)?;

    let variables = match variables {
        Some(v) => v,
        None => {
            let mut names: Vec<String> = obs_rows.iter().map(|(_, f)| f[2].to_string()).collect();
            names.sort();
            names.dedup();
            names
        }
    };
    let var_index: HashMap<&str, usize> = variables.iter().enumerate().map(|(i, v)| (v.as_str(), i)).collect();

    let mut order: Vec<String> = Vec::new();
    let mut label_of: HashMap<String, usize> = HashMap::new();
    for (n, f) in &lab_rows {
        let label: usize = f[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(labels, *n, format!("invalid label `{}`", f[1])))?;
        if label_of.insert(f[0].to_string(), label).is_none() {
            order.push(f[0].to_string());
        }
    }

    let mut triples: HashMap<&str, Vec<(f64, usize, f64)>> = HashMap::new();
    let mut latest = 0.0f64;
    for (n, f) in &obs_rows {
        let time = parse_f64(observations, *n, f[1], "time")?;
        if time < 0.0 {
            return Err(parse_err(observations, *n, format!("negative time {time}")));
        }
        let var = *var_index
            .get(f[2])
            .ok_or_else(|| Error::Schema(format!("unknown variable `{}` at line {n}", f[2])))?;
        let value = parse_f64(observations, *n, f[3], "value")?;
        if !label_of.contains_key(f[0]) {
            return Err(Error::Completeness(format!("no label for patient `{}`", f[0])));
        }
        latest = latest.max(time);
        triples.entry(f[0]).or_default().push((time, var, value));
    }

    let t_max = t_max.unwrap_or(if latest > 0.0 { latest } else { 1.0 });
    let n_classes = label_of.values().copied().max().map_or(2, |m| (m + 1).max(2));
    let skipped = order.iter().filter(|id| !triples.contains_key(id.as_str())).count();
    if skipped > 0 {
        log::info!("{skipped} labelled patients have no observations and are left out");
    }
    let episodes = order
        .iter()
        .filter_map(|id| triples.get(id.as_str()).map(|t| (id, t)))
        .map(|(id, t)| Episode::from_triples(id.clone(), t, variables.len(), label_of[id], t_max))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(variables, episodes, t_max, n_classes)
}

/// Loads `observations.csv` and `labels.csv` from `dir`, using
/// `variables.txt` when present.
pub fn load_dir(dir: &Path, t_max: Option<f64>) -> Result<Dataset> {
    let vars_path = dir.join(VARIABLES_FILE);
    let variables = if vars_path.exists() { Some(read_variables(&vars_path)?) } else { None };
    load_dataset(&dir.join(OBSERVATIONS_FILE), &dir.join(LABELS_FILE), t_max, variables)
}

pub fn write_observations(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::from(OBSERVATIONS_HEADER);
    out.push('\n');
    for e in &dataset.episodes {
        for s in &e.steps {
            for v in s.observed() {
                let _ = writeln!(out, "{},{},{},{}", e.patient_id, s.time, dataset.variables[v], s.values[v]);
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_labels(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::from(LABELS_HEADER);
    out.push('\n');
    for e in &dataset.episodes {
        let _ = writeln!(out, "{},{}", e.patient_id, e.label);
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_splits(splits: &Splits, path: &Path) -> Result<()> {
    let mut out = String::from(SPLITS_HEADER);
    out.push('\n');
    for (ds, name) in [
        (&splits.train, SplitName::Train),
        (&splits.val, SplitName::Val),
        (&splits.test, SplitName::Test),
    ] {
        for e in &ds.episodes {
            let _ = writeln!(out, "{},{}", e.patient_id, name.as_str());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_variables(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = dataset.variables.join("\n");
    out.push('\n');
    fs::write(path, out)?;
    Ok(())
}

/// Writes the observations, labels and variable list of `dataset` into
/// `dir`, plus a split manifest when `splits` is given.
pub fn save_dir(dataset: &Dataset, splits: Option<&Splits>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_observations(dataset, &dir.join(OBSERVATIONS_FILE))?;
    write_labels(dataset, &dir.join(LABELS_FILE))?;
    write_variables(dataset, &dir.join(VARIABLES_FILE))?;
    if let Some(s) = splits {
        write_splits(s, &dir.join(SPLITS_FILE))?;
    }
    Ok(())
}
