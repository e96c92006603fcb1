use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::data::table::RawTable;
use crate::data::{Dataset, Domain, SealedAttributes};
use crate::error::{Error, Result};

/// A column binarized by membership in `positive`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryColumn {
    pub column: String,
    pub positive: Vec<String>,
}

impl BinaryColumn {
    pub fn binarize(&self, t: &RawTable) -> Result<Vec<u8>> {
        let values = t
            .column_values(&self.column)
            .map_err(|_| Error::Schema(format!("column {:?} not found", self.column)))?;
        Ok(values
            .map(|v| u8::from(self.positive.iter().any(|p| p == v)))
            .collect())
    }
}

/// Which columns feed the model and how each is encoded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub label: BinaryColumn,
    pub sensitive: BinaryColumn,
    /// Column used to split domains; never a feature.
    pub filter_column: String,
    pub continuous: Vec<String>,
    pub categorical: Vec<String>,
}

impl FeatureSchema {
    pub fn validate(&self) -> Result<()> {
        for c in self.continuous.iter().chain(&self.categorical) {
            if *c == self.sensitive.column {
                return Err(Error::Schema(format!(
                    "sensitive column {c:?} cannot be a feature"
                )));
            }
            if *c == self.filter_column {
                return Err(Error::Schema(format!("filter column {c:?} cannot be a feature")));
            }
            if *c == self.label.column {
                return Err(Error::Schema(format!("label column {c:?} cannot be a feature")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum ColumnEncoder {
    ZScore { column: String, mean: f64, std: f64 },
    OneHot { column: String, vocab: Vec<String> },
}

/// Z-scores continuous columns and one-hot encodes categorical ones.
/// Unseen categories encode as all zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    encoders: Vec<ColumnEncoder>,
}

impl Preprocessor {
    /// Fits statistics and vocabularies on the union of `tables`.
    pub fn fit(schema: &FeatureSchema, tables: &[&RawTable]) -> Result<Self> {
        schema.validate()?;
        let mut encoders = Vec::new();
        for c in &schema.continuous {
            let mut sum = 0.0;
            let mut n = 0usize;
            let mut values = Vec::new();
            for t in tables {
                for v in t.column_values(c)? {
                    let x: f64 = v.parse().map_err(|_| {
                        Error::Format(format!("column {c:?}: {v:?} is not numeric"))
                    })?;
                    sum += x;
                    n += 1;
                    values.push(x);
                }
            }
            if n == 0 {
                return Err(Error::Contract("cannot fit a preprocessor on zero rows".into()));
            }
            let mean = sum / n as f64;
            let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            let std = if var > 0.0 { var.sqrt() } else { 1.0 };
            encoders.push(ColumnEncoder::ZScore {
                column: c.clone(),
                mean,
                std,
            });
        }
        for c in &schema.categorical {
            let mut vocab = BTreeSet::new();
            for t in tables {
                vocab.extend(t.column_values(c)?.map(str::to_string));
            }
            encoders.push(ColumnEncoder::OneHot {
                column: c.clone(),
                vocab: vocab.into_iter().collect(),
            });
        }
        Ok(Self { encoders })
    }

    pub fn dim(&self) -> usize {
        self.encoders
            .iter()
            .map(|e| match e {
                ColumnEncoder::ZScore { .. } => 1,
                ColumnEncoder::OneHot { vocab, .. } => vocab.len(),
            })
            .sum()
    }

    pub fn feature_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.dim());
        for e in &self.encoders {
            match e {
                ColumnEncoder::ZScore { column, .. } => names.push(column.clone()),
                ColumnEncoder::OneHot { column, vocab } => {
                    names.extend(vocab.iter().map(|v| format!("{column}={v}")))
                }
            }
        }
        names
    }

    pub fn transform(&self, t: &RawTable) -> Result<Matrix> {
        if t.is_empty() {
            return Err(Error::Contract("cannot transform an empty table".into()));
        }
        let d = self.dim();
        let mut data = vec![0.0; t.len() * d];
        let mut offset = 0;
        for e in &self.encoders {
            match e {
                ColumnEncoder::ZScore { column, mean, std } => {
                    for (r, v) in t.column_values(column)?.enumerate() {
                        let x: f64 = v.parse().map_err(|_| {
                            Error::Format(format!("column {column:?}: {v:?} is not numeric"))
                        })?;
                        data[r * d + offset] = (x - mean) / std;
                    }
                    offset += 1;
                }
                ColumnEncoder::OneHot { column, vocab } => {
                    for (r, v) in t.column_values(column)?.enumerate() {
                        if let Ok(k) = vocab.binary_search_by(|w| w.as_str().cmp(v)) {
                            data[r * d + offset + k] = 1.0;
                        }
                    }
                    offset += vocab.len();
                }
            }
        }
        let m = Matrix::new(t.len(), d, data)?;
        if !m.is_finite() {
            return Err(Error::Format("non-finite feature value".into()));
        }
        Ok(m)
    }

    /// Source rows keep their attributes; target attributes go to a sealed
    /// sidecar that only evaluation code opens.
    pub fn source_dataset(&self, schema: &FeatureSchema, t: &RawTable) -> Result<Dataset> {
        let x = self.transform(t)?;
        let y = schema.label.binarize(t)?;
        let a = schema.sensitive.binarize(t)?;
        Dataset::new(x, y, Some(a), Domain::Source)
    }

    pub fn target_dataset(
        &self,
        schema: &FeatureSchema,
        t: &RawTable,
    ) -> Result<(Dataset, SealedAttributes)> {
        let x = self.transform(t)?;
        let y = schema.label.binarize(t)?;
        let a = schema.sensitive.binarize(t)?;
        Ok((
            Dataset::new(x, y, None, Domain::Target)?,
            SealedAttributes::new(a),
        ))
    }
}

/// Fits one preprocessor on both tables and encodes them into a shared
/// feature space.
pub fn fit_transform(
    schema: &FeatureSchema,
    source: &RawTable,
    target: &RawTable,
) -> Result<(Preprocessor, Dataset, (Dataset, SealedAttributes))> {
    schema.label.binarize(source)?;
    let p = Preprocessor::fit(schema, &[source, target])?;
    let s = p.source_dataset(schema, source)?;
    let t = p.target_dataset(schema, target)?;
    Ok((p, s, t))
}
