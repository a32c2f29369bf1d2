//! Tabular micro-data with column roles.
//!
//! A [`Dataset`] is an immutable column store. Every column carries a
//! [`Role`]; covariates, treatment and outcome must be finite, so rows with
//! missing or non-numeric entries in those columns are dropped at
//! construction and counted. Downstream label vectors (bins, clusters,
//! matches) are index-aligned with the surviving row order, and
//! [`Dataset::row_ids`] maps each row back to its position in the input.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Covariate,
    Treatment,
    Outcome,
    Id,
    Ignored,
}

impl Role {
    /// Roles whose values must be finite for a row to be kept.
    pub fn is_analytic(self) -> bool {
        matches!(self, Role::Covariate | Role::Treatment | Role::Outcome)
    }

    fn name(self) -> &'static str {
        match self {
            Role::Covariate => "covariate",
            Role::Treatment => "treatment",
            Role::Outcome => "outcome",
            Role::Id => "id",
            Role::Ignored => "ignored",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Value kind, inferred from the data since CSV carries no types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Integer,
    Binary,
}

impl ColumnKind {
    pub fn infer(values: &[f64]) -> Self {
        let finite = values.iter().copied().filter(|v| v.is_finite());
        if finite.clone().all(|v| v == 0.0 || v == 1.0) {
            ColumnKind::Binary
        } else if finite.clone().all(|v| v.fract() == 0.0) {
            ColumnKind::Integer
        } else {
            ColumnKind::Numeric
        }
    }
}

/// Column name to role. Columns absent from the map are ignored.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RoleMap(pub BTreeMap<String, Role>);

impl RoleMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, column: impl Into<String>, role: Role) -> Self {
        self.0.insert(column.into(), role);
        self
    }

    pub fn get(&self, column: &str) -> Role {
        self.0.get(column).copied().unwrap_or(Role::Ignored)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub role: Role,
    pub kind: ColumnKind,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    columns: Vec<Column>,
    n: usize,
    dropped: usize,
    row_ids: Vec<usize>,
}

impl Dataset {
    /// Builds a dataset from named columns, dropping rows with non-finite
    /// values in covariate, treatment or outcome columns.
    pub fn new(columns: Vec<(String, Role, Vec<f64>)>) -> Result<Self> {
        let n_raw = columns.first().map_or(0, |c| c.2.len());
        let row_ids = (0..n_raw).collect();
        Self::build(columns, row_ids)
    }

    fn build(columns: Vec<(String, Role, Vec<f64>)>, row_ids: Vec<usize>) -> Result<Self> {
        let n_raw = row_ids.len();
        let mut seen_roles: BTreeMap<Role, &str> = BTreeMap::new();
        let mut names = std::collections::BTreeSet::new();
        for (name, role, values) in &columns {
            if !names.insert(name.as_str()) {
                return Err(Error::DuplicateColumn { column: name.clone() });
            }
            if values.len() != n_raw {
                return Err(Error::LengthMismatch {
                    what: "column",
                    expected: n_raw,
                    got: values.len(),
                });
            }
            if matches!(role, Role::Treatment | Role::Outcome) {
                if let Some(first) = seen_roles.insert(*role, name) {
                    return Err(Error::DuplicateRole {
                        role: role.name(),
                        first: first.to_string(),
                        second: name.clone(),
                    });
                }
            }
        }

        let keep: Vec<usize> = (0..n_raw)
            .filter(|&i| columns.iter().filter(|c| c.1.is_analytic()).all(|c| c.2[i].is_finite()))
            .collect();

        for (name, role, values) in &columns {
            if *role != Role::Treatment {
                continue;
            }
            if let Some(&i) = keep.iter().find(|&&i| values[i] != 0.0 && values[i] != 1.0) {
                return Err(Error::NonBinaryTreatment {
                    column: name.clone(),
                    row: row_ids[i],
                    value: values[i],
                });
            }
        }

        let columns = columns
            .into_iter()
            .map(|(name, role, values)| {
                let values: Vec<f64> = keep.iter().map(|&i| values[i]).collect();
                Column {
                    kind: ColumnKind::infer(&values),
                    name,
                    role,
                    values,
                }
            })
            .collect();
        Ok(Dataset {
            columns,
            n: keep.len(),
            dropped: n_raw - keep.len(),
            row_ids: keep.iter().map(|&i| row_ids[i]).collect(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Rows removed at construction because of missing or non-numeric values.
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    /// Position of each row in the original input.
    pub fn row_ids(&self) -> &[usize] {
        &self.row_ids
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, name: &str) -> Result<&Column> {
        self.columns
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    pub fn values(&self, name: &str) -> Result<&[f64]> {
        self.column(name).map(|c| c.values.as_slice())
    }

    pub fn role_map(&self) -> RoleMap {
        RoleMap(self.columns.iter().map(|c| (c.name.clone(), c.role)).collect())
    }

    fn single(&self, role: Role) -> Result<&Column> {
        self.columns
            .iter()
            .find(|c| c.role == role)
            .ok_or(Error::MissingRole(role.name()))
    }

    pub fn treatment(&self) -> Result<&Column> {
        self.single(Role::Treatment)
    }

    pub fn outcome(&self) -> Result<&Column> {
        self.single(Role::Outcome)
    }

    pub fn covariates(&self) -> impl Iterator<Item = &Column> {
        self.columns.iter().filter(|c| c.role == Role::Covariate)
    }

    pub fn covariate_names(&self) -> Vec<String> {
        self.covariates().map(|c| c.name.clone()).collect()
    }

    /// Keeps the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.n) {
            return Err(Error::InvalidArgument(format!(
                "row {bad} out of range for {} rows",
                self.n
            )));
        }
        let columns = self
            .columns
            .iter()
            .map(|c| {
                let values: Vec<f64> = rows.iter().map(|&r| c.values[r]).collect();
                Column {
                    kind: ColumnKind::infer(&values),
                    name: c.name.clone(),
                    role: c.role,
                    values,
                }
            })
            .collect();
        Ok(Dataset {
            columns,
            n: rows.len(),
            dropped: self.dropped,
            row_ids: rows.iter().map(|&r| self.row_ids[r]).collect(),
        })
    }

    /// Returns a copy with one more column (or a replaced one of the same name).
    pub fn with_column(&self, name: &str, role: Role, values: Vec<f64>) -> Result<Dataset> {
        if values.len() != self.n {
            return Err(Error::LengthMismatch {
                what: "column",
                expected: self.n,
                got: values.len(),
            });
        }
        let mut cols: Vec<(String, Role, Vec<f64>)> = self
            .columns
            .iter()
            .filter(|c| c.name != name)
            .map(|c| (c.name.clone(), c.role, c.values.clone()))
            .collect();
        cols.push((name.to_string(), role, values));
        let mut out = Self::build(cols, self.row_ids.clone())?;
        out.dropped += self.dropped;
        Ok(out)
    }

    /// Returns a copy with the roles of the named columns changed.
    pub fn with_roles(&self, roles: &RoleMap) -> Result<Dataset> {
        for name in roles.0.keys() {
            self.column(name)?;
        }
        let cols = self
            .columns
            .iter()
            .map(|c| {
                let role = roles.0.get(&c.name).copied().unwrap_or(c.role);
                (c.name.clone(), role, c.values.clone())
            })
            .collect();
        let mut out = Self::build(cols, self.row_ids.clone())?;
        out.dropped += self.dropped;
        Ok(out)
    }
}

/// Reads a comma-delimited CSV file with a header row.
pub fn load_csv(path: impl AsRef<Path>, roles: &RoleMap) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_csv(file, roles)
}

/// Parses CSV from any reader; see [`load_csv`].
pub fn read_csv<R: Read>(reader: R, roles: &RoleMap) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    for name in roles.0.keys() {
        if !header.contains(name) {
            return Err(Error::UnknownColumn(name.clone()));
        }
    }
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); header.len()];
    for record in rdr.records() {
        let record = record?;
        for (j, col) in values.iter_mut().enumerate() {
            let v = record.get(j).and_then(|s| s.parse::<f64>().ok()).unwrap_or(f64::NAN);
            col.push(v);
        }
    }
    let columns = header
        .into_iter()
        .zip(values)
        .map(|(name, v)| {
            let role = roles.get(&name);
            (name, role, v)
        })
        .collect();
    Dataset::new(columns)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub column: String,
    pub mean: f64,
    /// Sample (n - 1) standard deviation.
    pub sd: f64,
    /// Set for zero-variance columns, which are left unscaled.
    pub constant: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StandardizationParams {
    pub columns: Vec<ColumnScale>,
}

impl StandardizationParams {
    /// Computes per-column mean and sample standard deviation.
    pub fn fit(d: &Dataset, columns: &[&str]) -> Result<Self> {
        let columns = columns
            .iter()
            .map(|&name| {
                let v = d.values(name)?;
                let (mean, sd) = mean_sd(v);
                Ok(ColumnScale {
                    column: name.to_string(),
                    mean,
                    sd,
                    constant: !(sd > 0.0),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { columns })
    }

    pub fn apply(&self, d: &Dataset) -> Result<Dataset> {
        self.map(d, |v, s| (v - s.mean) / s.sd)
    }

    pub fn invert(&self, d: &Dataset) -> Result<Dataset> {
        self.map(d, |v, s| v * s.sd + s.mean)
    }

    fn map(&self, d: &Dataset, f: impl Fn(f64, &ColumnScale) -> f64) -> Result<Dataset> {
        let mut out = d.clone();
        for s in self.columns.iter().filter(|s| !s.constant) {
            let idx = out
                .columns
                .iter()
                .position(|c| c.name == s.column)
                .ok_or_else(|| Error::UnknownColumn(s.column.clone()))?;
            let col = &mut out.columns[idx];
            col.values.iter_mut().for_each(|v| *v = f(*v, s));
            col.kind = ColumnKind::infer(&col.values);
        }
        Ok(out)
    }
}

/// Centers and scales the named columns to mean 0 and sample standard
/// deviation 1. Constant columns are left as they are and flagged.
pub fn standardize(d: &Dataset, columns: &[&str]) -> Result<(Dataset, StandardizationParams)> {
    let params = StandardizationParams::fit(d, columns)?;
    Ok((params.apply(d)?, params))
}

/// Mean and sample standard deviation; the deviation is 0 for fewer than two values.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}
