//! Tabular ingestion: CSV loading, domain filters, preprocessing and splits.

mod predicate;
mod preprocess;
mod registry;
mod split;
mod table;

pub use predicate::{apply_filter, CmpOp, DomainFilter, Operand, Predicate};
pub use preprocess::{fit_transform, BinaryColumn, FeatureSchema, Preprocessor};
pub use registry::{
    builtin_experiments, data_root, find_experiment, load_registry_file, parse_registry,
    registry, DomainTables, ExperimentSpec, DATA_DIR_ENV,
};
pub use split::{split_indices, SOURCE_RATIOS, TARGET_RATIOS};
pub use table::{load_csv, load_csv_with, CsvOptions, RawTable};

use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// Encoded features with binary labels and, for the source domain only,
/// binary sensitive attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<u8>,
    pub a: Option<Vec<u8>>,
    pub domain: Domain,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vec<u8>, a: Option<Vec<u8>>, domain: Domain) -> Result<Self> {
        if y.len() != x.rows() {
            return Err(Error::Contract(format!(
                "{} labels for {} rows",
                y.len(),
                x.rows()
            )));
        }
        if y.iter().any(|&v| v > 1) {
            return Err(Error::Contract("labels must be 0/1".into()));
        }
        if let Some(a) = &a {
            if a.len() != x.rows() || a.iter().any(|&v| v > 1) {
                return Err(Error::Contract(
                    "sensitive attributes must be 0/1, one per row".into(),
                ));
            }
        }
        if domain == Domain::Target && a.is_some() {
            return Err(Error::Contract(
                "target datasets never carry sensitive attributes".into(),
            ));
        }
        if !x.is_finite() {
            return Err(Error::Contract("features must be finite".into()));
        }
        Ok(Self { x, y, a, domain })
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn d(&self) -> usize {
        self.x.cols()
    }

    /// Source attributes; a contract error for the target domain.
    pub fn attributes(&self) -> Result<&[u8]> {
        self.a
            .as_deref()
            .ok_or_else(|| Error::Contract("dataset has no sensitive attributes".into()))
    }

    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            x: self.x.select_rows(idx)?,
            y: idx.iter().map(|&i| self.y[i]).collect(),
            a: self.a.as_ref().map(|a| idx.iter().map(|&i| a[i]).collect()),
            domain: self.domain,
        })
    }
}

/// True target attributes, kept apart from [`Dataset`] so that training code
/// cannot reach them. Only evaluation calls [`SealedAttributes::reveal`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedAttributes(Vec<u8>);

impl SealedAttributes {
    pub fn new(a: Vec<u8>) -> Self {
        Self(a)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn reveal(&self) -> &[u8] {
        &self.0
    }
}

/// One seed's worth of encoded splits.
#[derive(Debug, Clone)]
pub struct PreparedSplits {
    pub source_train: Dataset,
    pub source_eval: Dataset,
    pub target_train: Dataset,
    pub target_eval: Dataset,
    pub target_test: Dataset,
    pub sealed_train: SealedAttributes,
    pub sealed_eval: SealedAttributes,
    pub sealed_test: SealedAttributes,
    pub feature_names: Vec<String>,
}

/// Splits raw domain tables with `seed`, fits the preprocessor on the union of
/// both training splits and encodes every part.
pub fn prepare_splits(
    tables: &DomainTables,
    schema: &FeatureSchema,
    seed: u64,
) -> Result<PreparedSplits> {
    let src_parts = split_indices(tables.source.len(), &SOURCE_RATIOS, seed)?;
    let tgt_parts = split_indices(tables.target.len(), &TARGET_RATIOS, seed)?;
    let src_train = tables.source.select(&src_parts[0]);
    let src_eval = tables.source.select(&src_parts[1]);
    let tgt_train = tables.target.select(&tgt_parts[0]);
    let tgt_eval = tables.target.select(&tgt_parts[1]);
    let tgt_test = tables.target.select(&tgt_parts[2]);

    let pre = Preprocessor::fit(schema, &[&src_train, &tgt_train])?;
    let (target_train, sealed_train) = pre.target_dataset(schema, &tgt_train)?;
    let (target_eval, sealed_eval) = pre.target_dataset(schema, &tgt_eval)?;
    let (target_test, sealed_test) = pre.target_dataset(schema, &tgt_test)?;
    Ok(PreparedSplits {
        source_train: pre.source_dataset(schema, &src_train)?,
        source_eval: pre.source_dataset(schema, &src_eval)?,
        target_train,
        target_eval,
        target_test,
        sealed_train,
        sealed_eval,
        sealed_test,
        feature_names: pre.feature_names(),
    })
}
