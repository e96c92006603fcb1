use std::path::Path;

use crate::data::predicate::Predicate;
use crate::error::{Error, Result};

/// Rectangular table of trimmed string cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawTable {
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
    dropped: usize,
}

/// How to read a delimited file.
#[derive(Debug, Clone)]
pub struct CsvOptions {
    /// First non-comment line holds the column names.
    pub header: bool,
    /// Column names for headerless files.
    pub columns: Option<Vec<String>>,
    /// Lines starting with this byte are skipped.
    pub comment: Option<u8>,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            header: true,
            columns: None,
            comment: None,
        }
    }
}

/// Reads a comma-separated file whose first line is a header.
pub fn load_csv(path: impl AsRef<Path>) -> Result<RawTable> {
    load_csv_with(path, &CsvOptions::default())
}

pub fn load_csv_with(path: impl AsRef<Path>, opts: &CsvOptions) -> Result<RawTable> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(opts.header)
        .comment(opts.comment)
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(file);

    let columns: Vec<String> = if opts.header {
        let h = reader.headers().map_err(|e| csv_error(path, e))?;
        h.iter().map(str::to_string).collect()
    } else {
        opts.columns.clone().ok_or_else(|| {
            Error::Config(format!("{}: headerless file needs column names", path.display()))
        })?
    };

    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        if rec.len() != columns.len() {
            return Err(Error::Format(format!(
                "{}: row {} has {} cells, expected {}",
                path.display(),
                rows.len() + 1,
                rec.len(),
                columns.len()
            )));
        }
        rows.push(rec.iter().map(str::to_string).collect());
    }
    RawTable::new(columns, rows)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Format(format!("{}: {e}", path.display()))
    }
}

impl RawTable {
    pub fn new(columns: Vec<String>, rows: Vec<Vec<String>>) -> Result<Self> {
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != columns.len()) {
            return Err(Error::Format(format!(
                "row {i} has {} cells, expected {}",
                r.len(),
                columns.len()
            )));
        }
        Ok(Self {
            columns,
            rows,
            dropped: 0,
        })
    }

    /// An empty table with the same columns.
    pub fn empty_like(&self) -> Self {
        Self {
            columns: self.columns.clone(),
            rows: Vec::new(),
            dropped: 0,
        }
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows removed by [`RawTable::drop_missing`] and [`RawTable::retain_matching`].
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    /// Index of the first column named `name`.
    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Config(format!("unknown column {name:?}")))
    }

    pub fn column_values(&self, name: &str) -> Result<impl Iterator<Item = &str>> {
        let i = self.column_index(name)?;
        Ok(self.rows.iter().map(move |r| r[i].as_str()))
    }

    /// Drops rows where any of `used` holds one of the `missing` tokens.
    /// Returns the number of rows removed.
    pub fn drop_missing(&mut self, used: &[&str], missing: &[String]) -> Result<usize> {
        let idx = used
            .iter()
            .map(|c| self.column_index(c))
            .collect::<Result<Vec<_>>>()?;
        let before = self.rows.len();
        self.rows
            .retain(|r| idx.iter().all(|&i| !missing.iter().any(|m| *m == r[i])));
        let removed = before - self.rows.len();
        self.dropped += removed;
        Ok(removed)
    }

    /// Keeps only rows satisfying every predicate.
    pub fn retain_matching(&mut self, preds: &[Predicate]) -> Result<usize> {
        let compiled = preds
            .iter()
            .map(|p| Ok((self.column_index(&p.column)?, p)))
            .collect::<Result<Vec<_>>>()?;
        let mut keep = Vec::with_capacity(self.rows.len());
        for r in &self.rows {
            let mut ok = true;
            for (i, p) in &compiled {
                if !p.matches(&r[*i])? {
                    ok = false;
                    break;
                }
            }
            keep.push(ok);
        }
        let before = self.rows.len();
        let mut it = keep.into_iter();
        self.rows.retain(|_| it.next().expect("one flag per row"));
        let removed = before - self.rows.len();
        self.dropped += removed;
        Ok(removed)
    }

    /// Rows at `idx`, in order.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            columns: self.columns.clone(),
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
            dropped: 0,
        }
    }

    /// Appends the rows of `other`, which must have identical columns.
    pub fn append(&mut self, other: RawTable) -> Result<()> {
        if other.columns != self.columns {
            return Err(Error::Format("cannot append tables with different columns".into()));
        }
        self.rows.extend(other.rows);
        self.dropped += other.dropped;
        Ok(())
    }

    pub(crate) fn push_row(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }
}
