use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::predicate::{apply_filter, DomainFilter, Predicate};
use crate::data::preprocess::{BinaryColumn, FeatureSchema};
use crate::data::table::{load_csv_with, CsvOptions, RawTable};
use crate::error::{Error, Result};

/// Environment variable overriding the dataset root directory.
pub const DATA_DIR_ENV: &str = "FAIRDA_DATA_DIR";

const BUILTIN: &str = include_str!("experiments.toml");

/// Everything needed to build the source and target tables of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub id: u32,
    pub name: String,
    /// Files relative to the data root; rows are concatenated.
    pub files: Vec<String>,
    #[serde(default = "default_true")]
    pub header: bool,
    #[serde(default)]
    pub columns: Option<Vec<String>>,
    #[serde(default)]
    pub comment: Option<String>,
    #[serde(default = "default_missing")]
    pub missing: Vec<String>,
    pub label: BinaryColumn,
    pub sensitive: BinaryColumn,
    /// Selects the source rows.
    pub filter: Predicate,
    #[serde(default)]
    pub clean: Vec<Predicate>,
    #[serde(default)]
    pub continuous: Vec<String>,
    #[serde(default)]
    pub categorical: Vec<String>,
}

fn default_true() -> bool {
    true
}

fn default_missing() -> Vec<String> {
    vec![String::new()]
}

#[derive(Debug, Deserialize)]
struct RegistryFile {
    experiment: Vec<ExperimentSpec>,
}

impl ExperimentSpec {
    pub fn schema(&self) -> FeatureSchema {
        FeatureSchema {
            label: self.label.clone(),
            sensitive: self.sensitive.clone(),
            filter_column: self.filter.column.clone(),
            continuous: self.continuous.clone(),
            categorical: self.categorical.clone(),
        }
    }

    pub fn domain_filter(&self) -> DomainFilter {
        DomainFilter::new(self.filter.clone())
    }

    pub fn validate(&self) -> Result<()> {
        if self.files.is_empty() {
            return Err(Error::Config(format!("experiment {} lists no files", self.id)));
        }
        if !self.header && self.columns.is_none() {
            return Err(Error::Config(format!(
                "experiment {}: headerless files need `columns`",
                self.id
            )));
        }
        if let Some(c) = &self.comment {
            if c.len() != 1 {
                return Err(Error::Config(format!(
                    "experiment {}: comment must be a single byte",
                    self.id
                )));
            }
        }
        self.filter.validate()?;
        for p in &self.clean {
            p.validate()?;
        }
        self.schema().validate()
    }

    /// Every column the pipeline reads; rows missing any of them are dropped.
    pub fn used_columns(&self) -> Vec<&str> {
        let mut cols: Vec<&str> = vec![
            &self.label.column,
            &self.sensitive.column,
            &self.filter.column,
        ];
        cols.extend(self.clean.iter().map(|p| p.column.as_str()));
        cols.extend(self.continuous.iter().map(String::as_str));
        cols.extend(self.categorical.iter().map(String::as_str));
        cols.sort_unstable();
        cols.dedup();
        cols
    }

    fn csv_options(&self) -> CsvOptions {
        CsvOptions {
            header: self.header,
            columns: self.columns.clone(),
            comment: self.comment.as_ref().map(|c| c.as_bytes()[0]),
        }
    }

    /// Loads, cleans and partitions the raw rows.
    pub fn load_tables(&self, data_root: &Path) -> Result<DomainTables> {
        self.validate()?;
        let opts = self.csv_options();
        let mut table: Option<RawTable> = None;
        for f in &self.files {
            let t = load_csv_with(data_root.join(f), &opts)?;
            match &mut table {
                Some(acc) => acc.append(t)?,
                None => table = Some(t),
            }
        }
        let mut table = table.expect("validated non-empty");
        let raw_rows = table.len();
        let missing = table.drop_missing(&self.used_columns(), &self.missing)?;
        let cleaned = table.retain_matching(&self.clean)?;
        let (source, target) = apply_filter(&table, &self.domain_filter())?;
        Ok(DomainTables {
            source,
            target,
            raw_rows,
            dropped_missing: missing,
            dropped_clean: cleaned,
        })
    }
}

/// Raw source and target rows of one experiment.
#[derive(Debug, Clone)]
pub struct DomainTables {
    pub source: RawTable,
    pub target: RawTable,
    pub raw_rows: usize,
    pub dropped_missing: usize,
    pub dropped_clean: usize,
}

/// The four tabular experiments shipped with the crate.
pub fn builtin_experiments() -> Vec<ExperimentSpec> {
    parse_registry(BUILTIN).expect("built-in registry parses")
}

pub fn parse_registry(text: &str) -> Result<Vec<ExperimentSpec>> {
    let file: RegistryFile =
        toml::from_str(text).map_err(|e| Error::Config(format!("registry: {e}")))?;
    for e in &file.experiment {
        e.validate()?;
    }
    Ok(file.experiment)
}

pub fn load_registry_file(path: impl AsRef<Path>) -> Result<Vec<ExperimentSpec>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_registry(&text)
}

/// Looks up an experiment in `specs`. Ids outside the tabular set are
/// rejected even if present.
pub fn find_experiment(specs: &[ExperimentSpec], id: u32) -> Result<ExperimentSpec> {
    if !(1..=4).contains(&id) {
        return Err(Error::UnsupportedExperiment(id));
    }
    specs
        .iter()
        .find(|e| e.id == id)
        .cloned()
        .ok_or(Error::UnsupportedExperiment(id))
}

/// Built-in experiment configuration by id.
pub fn registry(id: u32) -> Result<ExperimentSpec> {
    find_experiment(&builtin_experiments(), id)
}

/// `$FAIRDA_DATA_DIR` if set, otherwise `./data`.
pub fn data_root() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}
