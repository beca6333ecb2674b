//! Reading rank data and schemas, writing results documents.
//!
//! Rank data is long-format CSV with the header
//! `individual_id,variable_id,rank_level,alternative`; rank levels and
//! alternatives are 1-based. The schema is TOML:
//!
//! ```toml
//! [[variables]]
//! id = "drugs"
//! labels = ["education", "treatment", "punish dealers"]
//! ```
//!
//! Results are pretty-printed JSON with sorted keys and every float rounded to
//! 12 significant digits, so identical runs give identical bytes.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::driver::{FitDiagnostics, FitResult};
use crate::error::{Error, Result};
use crate::model::{ModelParams, RankDataset, MAX_ALTERNATIVES};
use crate::plackett_luce::Ranking;
use crate::report::{summarize_memberships, Report};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_alternatives: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<String>,
}

impl VariableSpec {
    pub fn size(&self) -> usize {
        self.n_alternatives.unwrap_or(self.labels.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub variables: Vec<VariableSpec>,
}

impl Schema {
    /// Variables named `V1, V2, ...` with the given choice-set sizes.
    pub fn anonymous(n_alternatives: &[usize]) -> Schema {
        let variables = n_alternatives
            .iter()
            .enumerate()
            .map(|(j, &v)| VariableSpec { id: format!("V{}", j + 1), n_alternatives: Some(v), labels: Vec::new() })
            .collect();
        Schema { variables }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variables.is_empty() {
            return Err(Error::Config("schema declares no variables".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for var in &self.variables {
            if !seen.insert(var.id.as_str()) {
                return Err(Error::Config(format!("variable {:?} declared twice", var.id)));
            }
            if let Some(n) = var.n_alternatives {
                if !var.labels.is_empty() && var.labels.len() != n {
                    return Err(Error::Config(format!(
                        "variable {:?}: n_alternatives = {n} but {} labels",
                        var.id,
                        var.labels.len()
                    )));
                }
            }
            let v = var.size();
            if v == 0 || v > MAX_ALTERNATIVES {
                return Err(Error::Config(format!(
                    "variable {:?} has {v} alternatives; need 1..={MAX_ALTERNATIVES}",
                    var.id
                )));
            }
        }
        Ok(())
    }

    pub fn n_alternatives(&self) -> Vec<usize> {
        self.variables.iter().map(VariableSpec::size).collect()
    }

    pub fn variable_ids(&self) -> Vec<String> {
        self.variables.iter().map(|v| v.id.clone()).collect()
    }
}

pub fn load_schema(path: &Path) -> Result<Schema> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let schema: Schema =
        toml::from_str(&text).map_err(|e| Error::Config(format!("schema {}: {e}", path.display())))?;
    schema.validate()?;
    Ok(schema)
}

pub fn save_schema(path: &Path, schema: &Schema) -> Result<()> {
    let text = toml::to_string(schema).map_err(|e| Error::Config(format!("schema serialization: {e}")))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A dataset read from disk together with its identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDataset {
    pub data: RankDataset,
    /// External id of each individual, in dataset order (sorted by id).
    pub individual_ids: Vec<String>,
    pub variable_ids: Vec<String>,
    /// Individuals dropped for missing at least one variable.
    pub dropped_ids: Vec<String>,
}

impl LoadedDataset {
    pub fn dropped(&self) -> usize {
        self.dropped_ids.len()
    }
}

const COLUMNS: [&str; 4] = ["individual_id", "variable_id", "rank_level", "alternative"];

struct Cell {
    alternative: usize,
    line: u64,
}

/// Reads and validates a long-format rank file. Individuals come out sorted
/// by id, so the row order of the file does not matter.
pub fn load_dataset(path: &Path, schema: &Schema) -> Result<LoadedDataset> {
    schema.validate()?;
    let parse_err = |line: u64, message: String| Error::Parse { path: path.to_path_buf(), line, message };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => parse_err(1, format!("{other:?}")),
        })?;
    let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let mut index = [0usize; 4];
    for (slot, name) in index.iter_mut().zip(COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(1, format!("missing column {name:?} in header")))?;
    }
    let var_index: HashMap<&str, usize> =
        schema.variables.iter().enumerate().map(|(j, v)| (v.id.as_str(), j)).collect();
    let sizes = schema.n_alternatives();
    // individual -> variable -> rank level -> cell
    let mut table: BTreeMap<String, BTreeMap<usize, BTreeMap<u64, Cell>>> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |c: usize| record.get(index[c]).unwrap_or("");
        let individual = field(0).to_string();
        if individual.is_empty() {
            return Err(parse_err(line, "empty individual_id".into()));
        }
        let variable = field(1);
        let j = *var_index
            .get(variable)
            .ok_or_else(|| parse_err(line, format!("variable {variable:?} is not declared in the schema")))?;
        let level: u64 = field(2)
            .parse()
            .ok()
            .filter(|&l| l >= 1)
            .ok_or_else(|| parse_err(line, format!("rank_level {:?} is not an integer >= 1", field(2))))?;
        let alternative: usize = field(3)
            .parse()
            .ok()
            .filter(|&a| a >= 1 && a <= sizes[j])
            .ok_or_else(|| {
                parse_err(line, format!("alternative {:?} is out of range 1..={} for {variable:?}", field(3), sizes[j]))
            })?;
        let levels = table.entry(individual.clone()).or_default().entry(j).or_default();
        if let Some(prev) = levels.get(&level) {
            return Err(parse_err(
                line,
                format!(
                    "tie: individual {individual:?} variable {variable:?} rank level {level} already given on line {}",
                    prev.line
                ),
            ));
        }
        if let Some((l, prev)) = levels.iter().find(|(_, c)| c.alternative + 1 == alternative) {
            return Err(parse_err(
                line,
                format!(
                    "individual {individual:?} variable {variable:?} ranks alternative {alternative} twice (level {l} on line {})",
                    prev.line
                ),
            ));
        }
        levels.insert(level, Cell { alternative: alternative - 1, line });
    }

    let n_variables = sizes.len();
    let mut individual_ids = Vec::new();
    let mut dropped_ids = Vec::new();
    let mut rows = Vec::new();
    for (individual, vars) in table {
        if vars.len() < n_variables {
            dropped_ids.push(individual);
            continue;
        }
        let mut rankings = Vec::with_capacity(n_variables);
        for (j, levels) in vars {
            if let Some((gap, cell)) = levels.iter().enumerate().find(|(n, (l, _))| **l != *n as u64 + 1) {
                return Err(parse_err(
                    cell.1.line,
                    format!(
                        "individual {individual:?} variable {:?}: rank levels must run 1..N without gaps, level {} is missing",
                        schema.variables[j].id,
                        gap + 1
                    ),
                ));
            }
            let items = levels.values().map(|c| c.alternative).collect();
            rankings.push(Ranking::new(items, sizes[j])?);
        }
        individual_ids.push(individual);
        rows.push(rankings);
    }
    if rows.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: no complete individuals ({} dropped for missing variables)",
            path.display(),
            dropped_ids.len()
        )));
    }
    let data = RankDataset::new(sizes, rows)?;
    Ok(LoadedDataset { data, individual_ids, variable_ids: schema.variable_ids(), dropped_ids })
}

/// Writes a dataset in the long format read by [`load_dataset`].
pub fn save_dataset(path: &Path, data: &RankDataset, individual_ids: &[String], variable_ids: &[String]) -> Result<()> {
    if individual_ids.len() != data.n_individuals() || variable_ids.len() != data.n_variables() {
        return Err(Error::Dataset("identifier lists do not match the dataset shape".into()));
    }
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    writer.write_record(COLUMNS).map_err(|e| csv_io(path, e))?;
    for (i, id) in individual_ids.iter().enumerate() {
        for (j, var) in variable_ids.iter().enumerate() {
            for (n, alt) in data.observation(i, j).to_one_based().into_iter().enumerate() {
                writer
                    .write_record([id.as_str(), var.as_str(), &(n + 1).to_string(), &alt.to_string()])
                    .map_err(|e| csv_io(path, e))?;
            }
        }
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Dataset(format!("{}: {other:?}", path.display())),
    }
}

/// SHA-256 over a canonical rendering of the dataset and its identifiers.
pub fn dataset_digest(loaded: &LoadedDataset) -> String {
    let mut hasher = Sha256::new();
    for (v, id) in loaded.data.n_alternatives().iter().zip(&loaded.variable_ids) {
        hasher.update(format!("variable\t{id}\t{v}\n"));
    }
    for (i, id) in loaded.individual_ids.iter().enumerate() {
        hasher.update(format!("individual\t{id}\n"));
        for j in 0..loaded.data.n_variables() {
            let items: Vec<String> =
                loaded.data.observation(i, j).to_one_based().iter().map(ToString::to_string).collect();
            hasher.update(format!("{}\n", items.join(",")));
        }
    }
    hex::encode(hasher.finalize())
}

/// Enough to rerun a command bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub software_version: String,
    pub seed: u64,
    pub config: Value,
    pub dataset_digest: String,
    pub converged: bool,
    /// Left out of results documents so they stay byte-identical across runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_seconds: Option<f64>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: &impl Serialize, dataset_digest: String) -> Result<Self> {
        Ok(RunManifest {
            command: command.to_string(),
            software_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config: serde_json::to_value(config)?,
            dataset_digest,
            converged: true,
            wall_clock_seconds: None,
        })
    }

    /// Path of the manifest written next to an output file.
    pub fn sidecar_path(output: &Path) -> PathBuf {
        let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".manifest.json");
        output.with_file_name(name)
    }
}

/// Rounds to 12 significant digits.
pub fn round_sig12(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.11e}").parse().unwrap_or(x)
}

fn round_value(value: &mut Value) {
    match value {
        Value::Number(n) if n.is_f64() => {
            if let Some(x) = n.as_f64() {
                *value = serde_json::Number::from_f64(round_sig12(x)).map_or(Value::Null, Value::Number);
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_value),
        Value::Object(map) => map.values_mut().for_each(round_value),
        _ => {}
    }
}

/// Serializes `doc` with sorted keys and floats rounded to 12 significant
/// digits. Non-finite floats become `null`.
pub fn to_document_string(doc: &impl Serialize) -> Result<String> {
    let mut value = serde_json::to_value(doc)?;
    round_value(&mut value);
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    Ok(text)
}

pub fn write_document(path: &Path, doc: &impl Serialize) -> Result<()> {
    fs::write(path, to_document_string(doc)?).map_err(|e| Error::io(path, e))
}

pub fn read_document<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub const RESULTS_FORMAT: &str = "rankmix-results/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub converged: bool,
    pub iters: usize,
    pub elbo: f64,
    pub elbo_trace: Vec<f64>,
    pub diagnostics: FitDiagnostics,
}

/// The results document written by `fit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsDocument {
    pub format: String,
    pub manifest: RunManifest,
    pub variables: Vec<String>,
    pub individual_ids: Vec<String>,
    pub params: ModelParams,
    pub fit: FitSummary,
    /// Variational Dirichlet parameters, one row per individual.
    pub phi: Vec<Vec<f64>>,
    /// Present when written; recomputed from `params` and `phi` on load.
    #[serde(default, skip_deserializing)]
    pub report: Option<Report>,
}

impl ResultsDocument {
    pub fn new(
        result: &FitResult,
        report: Report,
        manifest: RunManifest,
        variables: Vec<String>,
        individual_ids: Vec<String>,
    ) -> Self {
        let k = result.var.n_subgroups();
        let phi = result.var.phi().chunks(k).map(<[f64]>::to_vec).collect();
        ResultsDocument {
            format: RESULTS_FORMAT.to_string(),
            manifest: RunManifest { converged: result.converged, wall_clock_seconds: None, ..manifest },
            variables,
            individual_ids,
            params: result.params.clone(),
            fit: FitSummary {
                converged: result.converged,
                iters: result.iters,
                elbo: result.elbo(),
                elbo_trace: result.elbo_trace.clone(),
                diagnostics: result.diagnostics.clone(),
            },
            phi,
            report: Some(report),
        }
    }

    pub fn report(&self) -> Report {
        summarize_memberships(&self.params, &self.phi)
    }
}

pub fn save_results(path: &Path, doc: &ResultsDocument) -> Result<()> {
    write_document(path, doc)
}

pub fn load_results(path: &Path) -> Result<ResultsDocument> {
    let doc: ResultsDocument = read_document(path)?;
    if doc.format != RESULTS_FORMAT {
        return Err(Error::Config(format!("{}: unknown results format {:?}", path.display(), doc.format)));
    }
    doc.params.validate()?;
    Ok(doc)
}

/// Model parameters from either a bare parameter file or a results document.
pub fn load_params(path: &Path) -> Result<ModelParams> {
    let value: Value = read_document(path)?;
    let params_value = match value.get("params") {
        Some(inner) => inner.clone(),
        None => value,
    };
    let params: ModelParams = serde_json::from_value(params_value)?;
    params.validate()?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn schema() -> Schema {
        toml::from_str(
            r#"
            [[variables]]
            id = "a"
            labels = ["x", "y", "z"]

            [[variables]]
            id = "b"
            n_alternatives = 2
            "#,
        )
        .unwrap()
    }

    fn csv_file(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, "individual_id,variable_id,rank_level,alternative\n{body}").unwrap();
        f
    }

    #[test]
    fn rounding() {
        assert_eq!(round_sig12(0.1 + 0.2), 0.3);
        assert_eq!(round_sig12(1.0 / 3.0), 0.333333333333);
        assert_eq!(round_sig12(round_sig12(2.0f64.sqrt())), round_sig12(2.0f64.sqrt()));
        assert_eq!(round_sig12(-0.0), 0.0);
    }

    #[test]
    fn well_formed() {
        let f = csv_file("p1,a,1,2\np1,a,2,1\np1,b,1,2\np2,b,1,1\np2,a,1,3\n");
        let loaded = load_dataset(f.path(), &schema()).unwrap();
        assert_eq!(loaded.data.n_individuals(), 2);
        assert_eq!(loaded.individual_ids, vec!["p1", "p2"]);
        assert_eq!(loaded.data.observation(0, 0).to_one_based(), vec![2, 1]);
        assert_eq!(loaded.data.lengths(1), vec![1, 1]);
    }

    #[test]
    fn rejects_bad_rows_with_line_numbers() {
        let cases = [
            ("p1,a,1,2\np1,a,1,3\n", 3, "tie"),
            ("p1,a,1,2\np1,a,2,2\n", 3, "twice"),
            ("p1,a,1,4\n", 2, "out of range"),
            ("p1,c,1,1\n", 2, "not declared"),
            ("p1,a,0,1\n", 2, "rank_level"),
            ("p1,a,1,1\np1,a,3,2\np1,b,1,1\n", 3, "missing"),
        ];
        for (body, want_line, fragment) in cases {
            match load_dataset(csv_file(body).path(), &schema()) {
                Err(Error::Parse { line, message, .. }) => {
                    assert_eq!(line, want_line, "{message}");
                    assert!(message.contains(fragment), "{message}");
                }
                other => panic!("{body:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn empty_and_schema_errors() {
        assert!(matches!(load_dataset(csv_file("").path(), &schema()), Err(Error::Dataset(_))));
        let bad: Schema = toml::from_str("[[variables]]\nid = \"a\"\nn_alternatives = 3\nlabels = [\"x\"]\n").unwrap();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn manifest_sidecar_name() {
        assert_eq!(RunManifest::sidecar_path(Path::new("out/fit.json")), Path::new("out/fit.json.manifest.json"));
    }
}
