//! Tabular datasets: schema, CSV ingestion and preprocessing.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    pub kind: ColumnKind,
    /// Category names by id; empty for numeric columns.
    pub categories: Vec<String>,
}

impl ColumnSchema {
    pub fn numeric(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Numeric,
            categories: Vec::new(),
        }
    }

    pub fn categorical(name: impl Into<String>, categories: Vec<String>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Categorical,
            categories,
        }
    }
}

/// Class labels of a table, indices into `classes`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Target {
    pub name: String,
    pub classes: Vec<String>,
    pub labels: Vec<usize>,
}

/// Row-major table of feature cells with an optional class target.
///
/// Numeric cells hold their value; categorical cells hold the category id as
/// an integer-valued float. Missing cells are `NaN`.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    columns: Vec<ColumnSchema>,
    n_rows: usize,
    cells: Vec<f64>,
    target: Option<Target>,
    standardized: bool,
}

impl Table {
    pub fn new(columns: Vec<ColumnSchema>, cells: Vec<f64>, target: Option<Target>) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::Data("table needs at least one feature column".into()));
        }
        if !cells.len().is_multiple_of(columns.len()) {
            return Err(Error::Data(format!(
                "{} cells do not fill rows of {} columns",
                cells.len(),
                columns.len()
            )));
        }
        let n_rows = cells.len() / columns.len();
        for (j, col) in columns.iter().enumerate() {
            if col.kind == ColumnKind::Categorical {
                for i in 0..n_rows {
                    let v = cells[i * columns.len() + j];
                    if !v.is_nan() && (v < 0.0 || v.fract() != 0.0 || v as usize > col.categories.len()) {
                        return Err(Error::Data(format!("column {} has invalid category id {v}", col.name)));
                    }
                }
            }
        }
        if let Some(t) = &target {
            if t.labels.len() != n_rows {
                return Err(Error::Data(format!("{} labels for {n_rows} rows", t.labels.len())));
            }
            if let Some(&bad) = t.labels.iter().find(|&&y| y >= t.classes.len()) {
                return Err(Error::Data(format!("label {bad} outside {} classes", t.classes.len())));
            }
        }
        Ok(Self {
            columns,
            n_rows,
            cells,
            target,
            standardized: false,
        })
    }

    /// All-numeric table from feature rows and labels `0..n_classes`.
    pub fn from_numeric(rows: &[Vec<f64>], labels: Option<(&[usize], usize)>) -> Result<Self> {
        let m = rows.first().map(Vec::len).unwrap_or(0);
        let columns = (0..m).map(|j| ColumnSchema::numeric(format!("x{j}"))).collect();
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::Data("ragged rows".into()));
        }
        let cells = rows.iter().flatten().copied().collect();
        let target = labels.map(|(labels, c)| Target {
            name: "y".into(),
            classes: (0..c).map(|k| k.to_string()).collect(),
            labels: labels.to_vec(),
        });
        Self::new(columns, cells, target)
    }

    pub fn columns(&self) -> &[ColumnSchema] {
        &self.columns
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn cells(&self) -> &[f64] {
        &self.cells
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let m = self.columns.len();
        &self.cells[i * m..(i + 1) * m]
    }

    pub fn cell(&self, i: usize, j: usize) -> f64 {
        self.cells[i * self.columns.len() + j]
    }

    pub fn target(&self) -> Option<&Target> {
        self.target.as_ref()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.target.as_ref().map(|t| t.labels.as_slice())
    }

    pub fn n_classes(&self) -> Option<usize> {
        self.target.as_ref().map(|t| t.classes.len())
    }

    pub fn is_standardized(&self) -> bool {
        self.standardized
    }

    pub fn without_target(&self) -> Table {
        Table {
            target: None,
            ..self.clone()
        }
    }

    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Table> {
        let mut target = self
            .target
            .clone()
            .ok_or_else(|| Error::Data("table has no target column".into()))?;
        target.labels = labels;
        let mut t = Table::new(self.columns.clone(), self.cells.clone(), Some(target))?;
        t.standardized = self.standardized;
        Ok(t)
    }

    /// Rows at `indices`, in that order.
    pub fn select_rows(&self, indices: &[usize]) -> Table {
        let m = self.columns.len();
        let mut cells = Vec::with_capacity(indices.len() * m);
        for &i in indices {
            cells.extend_from_slice(self.row(i));
        }
        let target = self.target.as_ref().map(|t| Target {
            name: t.name.clone(),
            classes: t.classes.clone(),
            labels: indices.iter().map(|&i| t.labels[i]).collect(),
        });
        Table {
            columns: self.columns.clone(),
            n_rows: indices.len(),
            cells,
            target,
            standardized: self.standardized,
        }
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Table {
        let idx: Vec<usize> = (start..end).collect();
        self.select_rows(&idx)
    }

    /// SHA-256 over schema, cell bits and labels.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.columns {
            h.update(c.name.as_bytes());
            h.update([c.kind as u8]);
            for cat in &c.categories {
                h.update(cat.as_bytes());
                h.update([0]);
            }
        }
        h.update((self.n_rows as u64).to_le_bytes());
        for v in &self.cells {
            h.update(v.to_bits().to_le_bytes());
        }
        if let Some(t) = &self.target {
            for y in &t.labels {
                h.update((*y as u64).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn check_same_schema(&self, other: &Table) -> Result<()> {
        if self.columns.len() != other.columns.len() {
            return Err(Error::Schema(format!(
                "{} feature columns vs {}",
                self.columns.len(),
                other.columns.len()
            )));
        }
        for (a, b) in self.columns.iter().zip(&other.columns) {
            if a.name != b.name || a.kind != b.kind {
                return Err(Error::Schema(format!("column {} ({:?}) vs {} ({:?})", a.name, a.kind, b.name, b.kind)));
            }
        }
        Ok(())
    }
}

/// Optional overrides for CSV type inference.
#[derive(Clone, Debug, Default)]
pub struct SchemaHints {
    /// Target column name; `None` means the last column.
    pub target: Option<String>,
    /// The file carries no target column.
    pub no_target: bool,
    /// Columns forced to categorical.
    pub categorical: Vec<String>,
    /// Columns forced to numeric.
    pub numeric: Vec<String>,
}

fn is_missing(s: &str) -> bool {
    let s = s.trim();
    s.is_empty() || s == "?" || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan")
}

fn sorted_levels<'a>(values: impl Iterator<Item = &'a str>) -> Vec<String> {
    let set: BTreeSet<&str> = values.collect();
    let mut levels: Vec<String> = set.into_iter().map(str::to_string).collect();
    if levels.iter().all(|l| l.parse::<f64>().is_ok()) {
        levels.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    }
    levels
}

/// Reads a headed CSV file. Columns whose non-missing cells all parse as
/// numbers are numeric unless hinted otherwise.
pub fn load_csv(path: &Path, hints: &SchemaHints) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut records: Vec<Vec<String>> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        records.push(rec.iter().map(str::to_string).collect());
    }
    if header.is_empty() || records.is_empty() {
        return Err(Error::Data(format!("{}: empty file", path.display())));
    }
    let target_idx = if hints.no_target {
        None
    } else {
        match &hints.target {
            Some(name) => Some(
                header
                    .iter()
                    .position(|h| h == name)
                    .ok_or_else(|| Error::Data(format!("target column {name} not found")))?,
            ),
            None => Some(header.len() - 1),
        }
    };
    let feature_idx: Vec<usize> = (0..header.len()).filter(|&j| Some(j) != target_idx).collect();
    if feature_idx.is_empty() {
        return Err(Error::Data("no feature columns".into()));
    }
    let mut columns = Vec::with_capacity(feature_idx.len());
    for &j in &feature_idx {
        let name = &header[j];
        let present = || records.iter().map(|r| r[j].trim()).filter(|s| !is_missing(s));
        let parses = present().all(|s| s.parse::<f64>().is_ok());
        let categorical = hints.categorical.contains(name) || (!parses && !hints.numeric.contains(name));
        if categorical {
            columns.push(ColumnSchema::categorical(name.clone(), sorted_levels(present())));
        } else if !parses {
            return Err(Error::Data(format!("column {name} hinted numeric but has non-numeric cells")));
        } else {
            columns.push(ColumnSchema::numeric(name.clone()));
        }
    }
    let mut cells = Vec::with_capacity(records.len() * columns.len());
    for rec in &records {
        for (col, &j) in columns.iter().zip(&feature_idx) {
            let s = rec[j].trim();
            let v = if is_missing(s) {
                f64::NAN
            } else if col.kind == ColumnKind::Categorical {
                col.categories.iter().position(|c| c == s).unwrap() as f64
            } else {
                s.parse::<f64>().unwrap()
            };
            cells.push(v);
        }
    }
    let target = match target_idx {
        None => None,
        Some(t) => {
            let raw: Vec<&str> = records.iter().map(|r| r[t].trim()).collect();
            if let Some(row) = raw.iter().position(|s| is_missing(s)) {
                return Err(Error::Data(format!("unparseable target in data row {}", row + 1)));
            }
            let classes = sorted_levels(raw.iter().copied());
            let labels = raw.iter().map(|s| classes.iter().position(|c| c == s).unwrap()).collect();
            Some(Target {
                name: header[t].clone(),
                classes,
                labels,
            })
        }
    };
    Table::new(columns, cells, target)
}

/// Writes the table as CSV with the target (if any) as the last column.
pub fn write_csv(table: &Table, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = table.columns.iter().map(|c| c.name.as_str()).collect();
    if let Some(t) = &table.target {
        header.push(&t.name);
    }
    w.write_record(&header)?;
    for i in 0..table.n_rows {
        let mut rec: Vec<String> = table
            .columns
            .iter()
            .enumerate()
            .map(|(j, c)| {
                let v = table.cell(i, j);
                if v.is_nan() {
                    String::new()
                } else if c.kind == ColumnKind::Categorical {
                    c.categories.get(v as usize).cloned().unwrap_or_default()
                } else {
                    format!("{v}")
                }
            })
            .collect();
        if let Some(t) = &table.target {
            rec.push(t.classes[t.labels[i]].clone());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ColumnStats {
    Numeric { mean: f64, std: f64 },
    Categorical { categories: Vec<String> },
}

/// Training-set statistics reused to transform later tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessStats {
    pub names: Vec<String>,
    pub columns: Vec<ColumnStats>,
    pub classes: Option<Vec<String>>,
}

/// Standard deviations below this are treated as constant columns.
const MIN_STD: f64 = 1e-12;

impl PreprocessStats {
    pub fn fit(table: &Table) -> Self {
        let columns = table
            .columns
            .iter()
            .enumerate()
            .map(|(j, c)| match c.kind {
                ColumnKind::Numeric => {
                    if table.standardized {
                        return ColumnStats::Numeric { mean: 0.0, std: 1.0 };
                    }
                    let vals: Vec<f64> = (0..table.n_rows).map(|i| table.cell(i, j)).filter(|v| !v.is_nan()).collect();
                    if vals.is_empty() {
                        return ColumnStats::Numeric { mean: 0.0, std: 0.0 };
                    }
                    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
                    ColumnStats::Numeric { mean, std: var.sqrt() }
                }
                ColumnKind::Categorical => ColumnStats::Categorical {
                    categories: c.categories.clone(),
                },
            })
            .collect();
        Self {
            names: table.columns.iter().map(|c| c.name.clone()).collect(),
            columns,
            classes: table.target.as_ref().map(|t| t.classes.clone()),
        }
    }
}

/// Z-scores numerics with training statistics (mean imputation for missing
/// cells, zero for constant columns) and maps categories into the training
/// vocabulary, sending unseen or missing values to the reserved id
/// `categories.len()`. With `stats = None` the statistics are fitted on
/// `table` itself. Numerics of an already standardized table pass through.
pub fn preprocess(table: &Table, stats: Option<&PreprocessStats>) -> Result<(Table, PreprocessStats)> {
    let stats = match stats {
        Some(s) => s.clone(),
        None => PreprocessStats::fit(table),
    };
    if stats.names.len() != table.columns.len() {
        return Err(Error::Schema(format!(
            "statistics cover {} columns, table has {}",
            stats.names.len(),
            table.columns.len()
        )));
    }
    let m = table.columns.len();
    let mut columns = Vec::with_capacity(m);
    for ((name, st), col) in stats.names.iter().zip(&stats.columns).zip(&table.columns) {
        let kind_ok = matches!(
            (st, col.kind),
            (ColumnStats::Numeric { .. }, ColumnKind::Numeric) | (ColumnStats::Categorical { .. }, ColumnKind::Categorical)
        );
        if name != &col.name || !kind_ok {
            return Err(Error::Schema(format!("column {} does not match fitted column {name}", col.name)));
        }
        columns.push(match st {
            ColumnStats::Numeric { .. } => ColumnSchema::numeric(name.clone()),
            ColumnStats::Categorical { categories } => ColumnSchema::categorical(name.clone(), categories.clone()),
        });
    }
    let mut cells = Vec::with_capacity(table.cells.len());
    for i in 0..table.n_rows {
        for j in 0..m {
            let v = table.cell(i, j);
            let out = match &stats.columns[j] {
                ColumnStats::Numeric { mean, std } => {
                    if v.is_nan() {
                        0.0
                    } else if table.standardized {
                        v
                    } else if *std < MIN_STD {
                        0.0
                    } else {
                        (v - mean) / std
                    }
                }
                ColumnStats::Categorical { categories } => {
                    let reserved = categories.len() as f64;
                    if v.is_nan() {
                        reserved
                    } else {
                        let name = table.columns[j].categories.get(v as usize);
                        match name.and_then(|n| categories.iter().position(|c| c == n)) {
                            Some(id) => id as f64,
                            None => reserved,
                        }
                    }
                }
            };
            cells.push(out);
        }
    }
    let target = match (&table.target, &stats.classes) {
        (Some(t), Some(classes)) => {
            let mut labels = Vec::with_capacity(t.labels.len());
            for &y in &t.labels {
                let name = &t.classes[y];
                let id = classes
                    .iter()
                    .position(|c| c == name)
                    .ok_or_else(|| Error::Data(format!("class {name} not present in training data")))?;
                labels.push(id);
            }
            Some(Target {
                name: t.name.clone(),
                classes: classes.clone(),
                labels,
            })
        }
        (Some(_), None) => return Err(Error::Schema("statistics were fitted without a target".into())),
        (None, _) => None,
    };
    let mut out = Table::new(columns, cells, target)?;
    out.standardized = true;
    Ok((out, stats))
}
