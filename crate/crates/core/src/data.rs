//! Tabular input data with continuous and categorical columns.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnType {
    Continuous,
    Factor,
}

/// A categorical column; `codes[i]` indexes into `levels` (0-based).
#[derive(Clone, Debug, PartialEq)]
pub struct Factor {
    pub codes: Vec<usize>,
    pub levels: Vec<String>,
}

impl Factor {
    /// Builds a factor from integer level codes `0..n_levels`.
    pub fn from_codes(codes: Vec<usize>, n_levels: usize) -> Self {
        Self {
            codes,
            levels: (1..=n_levels).map(|l| l.to_string()).collect(),
        }
    }

    /// Builds a factor from raw labels; levels are sorted numerically when
    /// every label is a number, lexically otherwise.
    pub fn from_labels<S: AsRef<str>>(labels: &[S]) -> Self {
        let uniq: BTreeSet<&str> = labels.iter().map(|s| s.as_ref()).collect();
        let mut levels: Vec<String> = uniq.into_iter().map(str::to_string).collect();
        if levels.iter().all(|l| l.parse::<f64>().is_ok()) {
            levels.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
        }
        let index: BTreeMap<&str, usize> =
            levels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let codes = labels.iter().map(|s| index[s.as_ref()]).collect();
        Self { codes, levels }
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Column {
    Continuous(Vec<f64>),
    Factor(Factor),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Continuous(v) => v.len(),
            Column::Factor(f) => f.codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn column_type(&self) -> ColumnType {
        match self {
            Column::Continuous(_) => ColumnType::Continuous,
            Column::Factor(_) => ColumnType::Factor,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub response_name: String,
    pub response: Vec<f64>,
    pub columns: IndexMap<String, Column>,
}

impl Dataset {
    pub fn new(
        response_name: impl Into<String>,
        response: Vec<f64>,
        columns: IndexMap<String, Column>,
    ) -> Result<Self> {
        let n = response.len();
        for (name, c) in &columns {
            if c.len() != n {
                return Err(Error::Data(format!(
                    "column `{name}` has {} rows, response has {n}",
                    c.len()
                )));
            }
            if let Column::Factor(f) = c {
                if let Some(bad) = f.codes.iter().find(|&&k| k >= f.n_levels()) {
                    return Err(Error::Data(format!(
                        "factor `{name}` has code {bad} but only {} levels",
                        f.n_levels()
                    )));
                }
            }
        }
        Ok(Self {
            response_name: response_name.into(),
            response,
            columns,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.response.len()
    }

    pub fn column(&self, name: &str) -> Result<&Column> {
        self.columns
            .get(name)
            .ok_or_else(|| Error::Design(format!("missing column `{name}`")))
    }

    pub fn continuous(&self, name: &str) -> Result<&[f64]> {
        match self.column(name)? {
            Column::Continuous(v) => Ok(v),
            Column::Factor(_) => Err(Error::Design(format!(
                "factor `{name}` used where a continuous variable is required"
            ))),
        }
    }

    pub fn factor(&self, name: &str) -> Result<&Factor> {
        match self.column(name)? {
            Column::Factor(f) => Ok(f),
            Column::Continuous(_) => Err(Error::Design(format!(
                "`{name}` is continuous but used as a grouping factor"
            ))),
        }
    }

    /// Reads a CSV with a header row. Columns absent from `types` are
    /// continuous when every entry parses as a number, factors otherwise.
    pub fn from_csv(
        path: &Path,
        response: &str,
        types: &BTreeMap<String, ColumnType>,
    ) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::io(path, io),
                _ => unreachable!(),
            },
            _ => Error::Csv(e),
        })?;
        let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
        let mut raw: Vec<Vec<String>> = vec![Vec::new(); headers.len()];
        for rec in rdr.records() {
            let rec = rec?;
            for (j, field) in rec.iter().enumerate().take(headers.len()) {
                raw[j].push(field.trim().to_string());
            }
        }
        for name in types.keys() {
            if !headers.contains(name) {
                return Err(Error::Data(format!("typed column `{name}` not found in {}", path.display())));
            }
        }
        let resp_idx = headers
            .iter()
            .position(|h| h == response)
            .ok_or_else(|| Error::Data(format!("response column `{response}` not found")))?;
        let parse_num = |name: &str, vals: &[String]| -> Result<Vec<f64>> {
            vals.iter()
                .enumerate()
                .map(|(i, v)| {
                    v.parse::<f64>().map_err(|_| {
                        Error::Data(format!("column `{name}` row {}: `{v}` is not a number", i + 1))
                    })
                })
                .collect()
        };
        let y = parse_num(response, &raw[resp_idx])?;
        let mut columns = IndexMap::new();
        for (j, name) in headers.iter().enumerate() {
            if j == resp_idx {
                continue;
            }
            let vals = &raw[j];
            let ty = types.get(name).copied().unwrap_or_else(|| {
                if vals.iter().all(|v| v.parse::<f64>().is_ok()) {
                    ColumnType::Continuous
                } else {
                    ColumnType::Factor
                }
            });
            let col = match ty {
                ColumnType::Continuous => Column::Continuous(parse_num(name, vals)?),
                ColumnType::Factor => Column::Factor(Factor::from_labels(vals)),
            };
            columns.insert(name.clone(), col);
        }
        Dataset::new(response, y, columns)
    }
}
