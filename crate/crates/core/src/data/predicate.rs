use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::table::RawTable;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmpOp {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
    In,
    NotIn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Operand {
    Number(f64),
    Text(String),
    List(Vec<String>),
}

/// A single-column row test such as `age < 24` or `workclass != Private`.
///
/// Numeric operands compare the cell parsed as a number; text operands compare
/// the trimmed cell verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub column: String,
    pub op: CmpOp,
    pub value: Operand,
}

impl Predicate {
    pub fn new(column: impl Into<String>, op: CmpOp, value: Operand) -> Result<Self> {
        let p = Self {
            column: column.into(),
            op,
            value,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        use CmpOp::*;
        let ok = match (self.op, &self.value) {
            (Lt | Le | Gt | Ge, Operand::Number(_)) => true,
            (Eq | Ne, Operand::Number(_) | Operand::Text(_)) => true,
            (In | NotIn, Operand::List(_)) => true,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "operator {:?} cannot take operand {:?} (column {:?})",
                self.op, self.value, self.column
            )))
        }
    }

    pub fn matches(&self, cell: &str) -> Result<bool> {
        use CmpOp::*;
        Ok(match (&self.value, self.op) {
            (Operand::Number(v), op) => {
                let x: f64 = cell.parse().map_err(|_| {
                    Error::Format(format!(
                        "column {:?}: {cell:?} is not numeric",
                        self.column
                    ))
                })?;
                match op {
                    Lt => x < *v,
                    Le => x <= *v,
                    Gt => x > *v,
                    Ge => x >= *v,
                    Eq => x == *v,
                    Ne => x != *v,
                    In | NotIn => unreachable!("validated"),
                }
            }
            (Operand::Text(s), Eq) => cell == s,
            (Operand::Text(s), Ne) => cell != s,
            (Operand::List(l), In) => l.iter().any(|s| s == cell),
            (Operand::List(l), NotIn) => !l.iter().any(|s| s == cell),
            _ => {
                self.validate()?;
                unreachable!("validated")
            }
        })
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.op {
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            CmpOp::In => "in",
            CmpOp::NotIn => "not in",
        };
        match &self.value {
            Operand::Number(v) => write!(f, "{} {op} {v}", self.column),
            Operand::Text(s) => write!(f, "{} {op} {s}", self.column),
            Operand::List(l) => write!(f, "{} {op} {{{}}}", self.column, l.join(", ")),
        }
    }
}

/// Rows matching `source` form the source domain; all others the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DomainFilter {
    pub source: Predicate,
}

impl DomainFilter {
    pub fn new(source: Predicate) -> Self {
        Self { source }
    }
}

/// Partitions `t` into (source, target). Every row lands in exactly one side.
pub fn apply_filter(t: &RawTable, f: &DomainFilter) -> Result<(RawTable, RawTable)> {
    f.source.validate()?;
    let col = t.column_index(&f.source.column)?;
    let mut source = t.empty_like();
    let mut target = t.empty_like();
    for row in t.rows() {
        if f.source.matches(&row[col])? {
            source.push_row(row.clone());
        } else {
            target.push_row(row.clone());
        }
    }
    Ok((source, target))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn age_filter() -> DomainFilter {
        DomainFilter::new(Predicate::new("age", CmpOp::Lt, Operand::Number(24.0)).unwrap())
    }

    fn table(ages: &[i64]) -> RawTable {
        RawTable::new(
            vec!["age".into(), "x".into()],
            ages.iter()
                .enumerate()
                .map(|(i, a)| vec![a.to_string(), i.to_string()])
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn age_boundary() {
        let (s, t) = apply_filter(&table(&[23, 24]), &age_filter()).unwrap();
        assert_eq!(s.rows()[0][0], "23");
        assert_eq!(t.rows()[0][0], "24");
    }

    #[test]
    fn empty_table_gives_two_empty_tables() {
        let (s, t) = apply_filter(&table(&[]), &age_filter()).unwrap();
        assert!(s.is_empty() && t.is_empty());
    }

    #[test]
    fn unknown_filter_column() {
        let f = DomainFilter::new(
            Predicate::new("country", CmpOp::Eq, Operand::Text("US".into())).unwrap(),
        );
        assert!(matches!(apply_filter(&table(&[1]), &f), Err(Error::Config(_))));
    }

    #[test]
    fn text_and_set_predicates() {
        let ne = Predicate::new("w", CmpOp::Ne, Operand::Text("Private".into())).unwrap();
        assert!(ne.matches("State-gov").unwrap());
        assert!(!ne.matches("Private").unwrap());
        let is_in = Predicate::new(
            "race",
            CmpOp::In,
            Operand::List(vec!["African-American".into(), "Caucasian".into()]),
        )
        .unwrap();
        assert!(is_in.matches("Caucasian").unwrap());
        assert!(!is_in.matches("Other").unwrap());
        let numeric_ne = Predicate::new("r", CmpOp::Ne, Operand::Number(-1.0)).unwrap();
        assert!(!numeric_ne.matches("-1").unwrap());
        assert!(numeric_ne.matches("0").unwrap());
        assert!(matches!(numeric_ne.matches("abc"), Err(Error::Format(_))));
    }

    #[test]
    fn invalid_operator_operand_pairs() {
        assert!(Predicate::new("a", CmpOp::Lt, Operand::Text("x".into())).is_err());
        assert!(Predicate::new("a", CmpOp::In, Operand::Number(1.0)).is_err());
    }

    #[test]
    fn display_reads_naturally() {
        assert_eq!(age_filter().source.to_string(), "age < 24");
    }

    proptest! {
        #[test]
        fn filter_partitions_rows(ages in proptest::collection::vec(0i64..80, 0..60)) {
            let t = table(&ages);
            let (s, g) = apply_filter(&t, &age_filter()).unwrap();
            prop_assert_eq!(s.len() + g.len(), t.len());
            prop_assert!(s.rows().iter().all(|r| r[0].parse::<i64>().unwrap() < 24));
            prop_assert!(g.rows().iter().all(|r| r[0].parse::<i64>().unwrap() >= 24));
            let mut ids: Vec<String> = s.rows().iter().chain(g.rows()).map(|r| r[1].clone()).collect();
            ids.sort_by_key(|s| s.parse::<usize>().unwrap());
            let expect: Vec<String> = (0..t.len()).map(|i| i.to_string()).collect();
            prop_assert_eq!(ids, expect);
        }
    }
}
