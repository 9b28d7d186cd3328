//! Column-typed tables: schema declaration, CSV ingestion, cleaning and holdout splits.
//!
//! A [`Table`] carries the feature columns in schema order plus exactly one
//! target column. Columns declared `ignored` in the schema are dropped at load
//! time. Categorical values are stored as integer codes into a per-column
//! dictionary built in first-appearance order.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::seed::{self, Stream};

#[derive(Debug, Error)]
pub enum TableError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("schema column '{0}' not found in header")]
    MissingColumn(String),
    #[error("column '{0}' appears more than once")]
    DuplicateColumn(String),
    #[error("file has no header or no data rows")]
    EmptyFile,
    #[error("target column '{column}' has a missing value at data row {row}")]
    TargetMissingValue { column: String, row: usize },
    #[error("column '{0}' has missing values and its policy is reject")]
    RejectedMissing(String),
    #[error("column '{0}' has no observed values")]
    AllMissing(String),
    #[error("split would leave one side empty")]
    DegenerateSplit,
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("invalid table: {0}")]
    InvalidTable(String),
}

pub type Result<T, E = TableError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnRole {
    Feature,
    Target,
    Ignored,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    #[default]
    Reject,
    #[serde(alias = "impute")]
    ImputeMeanOrMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    pub role: ColumnRole,
    #[serde(default, rename = "missing")]
    pub missing_policy: MissingPolicy,
}

impl ColumnSpec {
    pub fn feature(name: &str, kind: ColumnKind) -> Self {
        Self {
            name: name.to_owned(),
            kind,
            role: ColumnRole::Feature,
            missing_policy: MissingPolicy::Reject,
        }
    }

    pub fn target(name: &str, kind: ColumnKind) -> Self {
        Self {
            role: ColumnRole::Target,
            ..Self::feature(name, kind)
        }
    }

    pub fn imputed(mut self) -> Self {
        self.missing_policy = MissingPolicy::ImputeMeanOrMode;
        self
    }
}

/// Which learning task a target column implies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Regression,
}

/// An ordered, validated list of column declarations.
///
/// The schema file is TOML with one `[[column]]` table per column:
///
/// ```toml
/// [[column]]
/// name = "days_to_judgement"
/// kind = "numeric"          # numeric | categorical
/// role = "target"           # feature | target | ignored
///
/// [[column]]
/// name = "court_section"
/// kind = "categorical"
/// role = "feature"
/// missing = "impute"        # reject (default) | impute
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    #[serde(rename = "column")]
    columns: Vec<ColumnSpec>,
}

impl Schema {
    pub fn new(columns: Vec<ColumnSpec>) -> Result<Self> {
        let mut seen = HashSet::new();
        for c in &columns {
            if c.name.trim().is_empty() {
                return Err(TableError::InvalidSchema("empty column name".into()));
            }
            if !seen.insert(c.name.as_str()) {
                return Err(TableError::DuplicateColumn(c.name.clone()));
            }
        }
        let targets = columns.iter().filter(|c| c.role == ColumnRole::Target).count();
        if targets != 1 {
            return Err(TableError::InvalidSchema(format!(
                "exactly one target column required, found {targets}"
            )));
        }
        Ok(Self { columns })
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: Schema =
            toml::from_str(text).map_err(|e| TableError::InvalidSchema(e.to_string()))?;
        Self::new(raw.columns)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| TableError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("schema serializes")
    }

    pub fn columns(&self) -> &[ColumnSpec] {
        &self.columns
    }

    pub fn target(&self) -> &ColumnSpec {
        self.columns
            .iter()
            .find(|c| c.role == ColumnRole::Target)
            .expect("validated schema has a target")
    }

    pub fn features(&self) -> impl Iterator<Item = &ColumnSpec> {
        self.columns.iter().filter(|c| c.role == ColumnRole::Feature)
    }

    pub fn task(&self) -> TaskKind {
        match self.target().kind {
            ColumnKind::Categorical => TaskKind::Classification,
            ColumnKind::Numeric => TaskKind::Regression,
        }
    }

    /// Same schema without the ignored columns.
    fn retained(&self) -> Schema {
        Schema {
            columns: self
                .columns
                .iter()
                .filter(|c| c.role != ColumnRole::Ignored)
                .cloned()
                .collect(),
        }
    }

    /// Hex SHA-256 over the retained columns' names, kinds and roles.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for c in self.columns.iter().filter(|c| c.role != ColumnRole::Ignored) {
            h.update(format!("{}\u{1f}{:?}\u{1f}{:?}\n", c.name, c.kind, c.role).as_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub enum ColumnData<T> {
    Numeric(Vec<T>),
    Categorical { codes: Vec<u32>, dictionary: Vec<String> },
}

/// A named column with its missing-value mask. Masked cells hold a
/// placeholder (zero / code 0) that must not be read as data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Column<T> {
    pub name: String,
    pub data: ColumnData<T>,
    pub missing: Vec<bool>,
}

impl<T: Scalar> Column<T> {
    pub fn numeric(name: &str, values: Vec<T>) -> Self {
        let missing = vec![false; values.len()];
        Self {
            name: name.to_owned(),
            data: ColumnData::Numeric(values),
            missing,
        }
    }

    /// Builds codes in first-appearance order; `None` marks a missing cell.
    pub fn categorical<S: AsRef<str>>(name: &str, labels: &[Option<S>]) -> Self {
        let mut dictionary: Vec<String> = Vec::new();
        let mut index: HashMap<String, u32> = HashMap::new();
        let mut codes = Vec::with_capacity(labels.len());
        let mut missing = Vec::with_capacity(labels.len());
        for label in labels {
            match label {
                Some(l) => {
                    let code = *index.entry(l.as_ref().to_owned()).or_insert_with(|| {
                        dictionary.push(l.as_ref().to_owned());
                        (dictionary.len() - 1) as u32
                    });
                    codes.push(code);
                    missing.push(false);
                }
                None => {
                    codes.push(0);
                    missing.push(true);
                }
            }
        }
        Self {
            name: name.to_owned(),
            data: ColumnData::Categorical { codes, dictionary },
            missing,
        }
    }

    /// Numeric column with missing cells given as `None`.
    pub fn numeric_with_missing(name: &str, values: &[Option<T>]) -> Self {
        Self {
            name: name.to_owned(),
            data: ColumnData::Numeric(values.iter().map(|v| v.unwrap_or_else(T::zero)).collect()),
            missing: values.iter().map(Option::is_none).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.missing.len()
    }

    pub fn is_empty(&self) -> bool {
        self.missing.is_empty()
    }

    pub fn kind(&self) -> ColumnKind {
        match self.data {
            ColumnData::Numeric(_) => ColumnKind::Numeric,
            ColumnData::Categorical { .. } => ColumnKind::Categorical,
        }
    }

    pub fn has_missing(&self) -> bool {
        self.missing.iter().any(|&m| m)
    }

    pub fn as_numeric(&self) -> Option<&[T]> {
        match &self.data {
            ColumnData::Numeric(v) => Some(v),
            ColumnData::Categorical { .. } => None,
        }
    }

    pub fn as_codes(&self) -> Option<&[u32]> {
        match &self.data {
            ColumnData::Categorical { codes, .. } => Some(codes),
            ColumnData::Numeric(_) => None,
        }
    }

    pub fn dictionary(&self) -> Option<&[String]> {
        match &self.data {
            ColumnData::Categorical { dictionary, .. } => Some(dictionary),
            ColumnData::Numeric(_) => None,
        }
    }

    fn select(&self, rows: &[usize]) -> Self {
        let data = match &self.data {
            ColumnData::Numeric(v) => ColumnData::Numeric(rows.iter().map(|&r| v[r]).collect()),
            ColumnData::Categorical { codes, dictionary } => ColumnData::Categorical {
                codes: rows.iter().map(|&r| codes[r]).collect(),
                dictionary: dictionary.clone(),
            },
        };
        Self {
            name: self.name.clone(),
            data,
            missing: rows.iter().map(|&r| self.missing[r]).collect(),
        }
    }

    fn render(&self, row: usize) -> String {
        if self.missing[row] {
            return String::new();
        }
        match &self.data {
            ColumnData::Numeric(v) => v[row].to_string(),
            ColumnData::Categorical { codes, dictionary } => dictionary[codes[row] as usize].clone(),
        }
    }
}

/// A single cell handed to prediction routines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FeatureValue<T> {
    Numeric(T),
    Code(u32),
}

/// Read access to one row's feature values, addressed by feature index.
pub trait RowAccess<T> {
    fn numeric(&self, feature: usize) -> T;
    fn code(&self, feature: usize) -> u32;
}

impl<T: Scalar> RowAccess<T> for [FeatureValue<T>] {
    fn numeric(&self, feature: usize) -> T {
        match self[feature] {
            FeatureValue::Numeric(x) => x,
            FeatureValue::Code(c) => T::from_u32(c).unwrap_or_else(T::nan),
        }
    }

    fn code(&self, feature: usize) -> u32 {
        match self[feature] {
            FeatureValue::Code(c) => c,
            FeatureValue::Numeric(_) => u32::MAX,
        }
    }
}

/// Borrowed view of row `row` of a table.
#[derive(Debug, Clone, Copy)]
pub struct TableRow<'a, T> {
    table: &'a Table<T>,
    row: usize,
}

impl<T: Scalar> RowAccess<T> for TableRow<'_, T> {
    fn numeric(&self, feature: usize) -> T {
        self.table.numeric_value(feature, self.row)
    }

    fn code(&self, feature: usize) -> u32 {
        self.table.code_value(feature, self.row)
    }
}

/// Dictionaries a model was trained with, one entry per feature
/// (`None` for numeric features) plus the target's.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dictionaries {
    pub features: Vec<Option<Vec<String>>>,
    pub target: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Table<T> {
    schema: Schema,
    features: Vec<Column<T>>,
    target: Column<T>,
    n_rows: usize,
}

impl<T: Scalar> Table<T> {
    /// Assembles a table from columns named by `schema` (ignored columns may be
    /// omitted). Columns are matched by name.
    pub fn new(schema: Schema, columns: Vec<Column<T>>) -> Result<Self> {
        let retained = schema.retained();
        let mut by_name: HashMap<String, Column<T>> = HashMap::new();
        for c in columns {
            if by_name.contains_key(&c.name) {
                return Err(TableError::DuplicateColumn(c.name));
            }
            by_name.insert(c.name.clone(), c);
        }
        let n_rows = by_name.values().next().map(Column::len).unwrap_or(0);
        let mut features = Vec::new();
        let mut target = None;
        for spec in retained.columns() {
            let col = by_name
                .remove(&spec.name)
                .ok_or_else(|| TableError::MissingColumn(spec.name.clone()))?;
            if col.kind() != spec.kind {
                return Err(TableError::InvalidTable(format!(
                    "column '{}' declared {:?} but holds {:?} data",
                    spec.name,
                    spec.kind,
                    col.kind()
                )));
            }
            check_column(&col, n_rows)?;
            match spec.role {
                ColumnRole::Target => target = Some(col),
                _ => features.push(col),
            }
        }
        let target = target.expect("validated schema has a target");
        if let Some(row) = target.missing.iter().position(|&m| m) {
            return Err(TableError::TargetMissingValue {
                column: target.name.clone(),
                row,
            });
        }
        Ok(Self {
            schema: retained,
            features,
            target,
            n_rows,
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    pub fn features(&self) -> &[Column<T>] {
        &self.features
    }

    pub fn feature(&self, index: usize) -> &Column<T> {
        &self.features[index]
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.features.iter().map(|c| c.name.clone()).collect()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|c| c.name == name)
    }

    pub fn target(&self) -> &Column<T> {
        &self.target
    }

    pub fn task(&self) -> TaskKind {
        self.schema.task()
    }

    /// Number of classes for a categorical target, `None` for regression.
    pub fn n_classes(&self) -> Option<usize> {
        self.target.dictionary().map(<[String]>::len)
    }

    pub fn row(&self, row: usize) -> TableRow<'_, T> {
        TableRow { table: self, row }
    }

    /// Owned copy of a row's feature values.
    pub fn row_values(&self, row: usize) -> Vec<FeatureValue<T>> {
        self.features
            .iter()
            .map(|c| match &c.data {
                ColumnData::Numeric(v) => FeatureValue::Numeric(v[row]),
                ColumnData::Categorical { codes, .. } => FeatureValue::Code(codes[row]),
            })
            .collect()
    }

    #[inline]
    pub(crate) fn numeric_value(&self, feature: usize, row: usize) -> T {
        match &self.features[feature].data {
            ColumnData::Numeric(v) => v[row],
            ColumnData::Categorical { codes, .. } => T::from_u32(codes[row]).unwrap_or_else(T::nan),
        }
    }

    #[inline]
    pub(crate) fn code_value(&self, feature: usize, row: usize) -> u32 {
        match &self.features[feature].data {
            ColumnData::Categorical { codes, .. } => codes[row],
            ColumnData::Numeric(_) => u32::MAX,
        }
    }

    /// Regression target values, or class codes converted to reals.
    pub fn target_values(&self) -> Vec<T> {
        match &self.target.data {
            ColumnData::Numeric(v) => v.clone(),
            ColumnData::Categorical { codes, .. } => {
                codes.iter().map(|&c| T::from_u32(c).unwrap_or_else(T::nan)).collect()
            }
        }
    }

    pub fn has_missing(&self) -> bool {
        self.features.iter().any(Column::has_missing)
    }

    pub fn dictionaries(&self) -> Dictionaries {
        Dictionaries {
            features: self.features.iter().map(|c| c.dictionary().map(<[String]>::to_vec)).collect(),
            target: self.target.dictionary().map(<[String]>::to_vec),
        }
    }

    /// Table restricted to `rows`, in the given order (duplicates allowed).
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            schema: self.schema.clone(),
            features: self.features.iter().map(|c| c.select(rows)).collect(),
            target: self.target.select(rows),
            n_rows: rows.len(),
        }
    }

    /// Recodes categorical columns so that codes refer to `reference`
    /// dictionaries. Labels the reference has never seen get fresh codes past
    /// its end, which a trained tree never tests for.
    pub fn align_to(&self, reference: &Dictionaries) -> Result<Self> {
        if reference.features.len() != self.features.len() {
            return Err(TableError::InvalidTable(format!(
                "expected {} features, table has {}",
                reference.features.len(),
                self.features.len()
            )));
        }
        let features = self
            .features
            .iter()
            .zip(&reference.features)
            .map(|(c, r)| recode(c, r.as_deref()))
            .collect::<Result<_>>()?;
        let target = recode(&self.target, reference.target.as_deref())?;
        Ok(Self {
            schema: self.schema.clone(),
            features,
            target,
            n_rows: self.n_rows,
        })
    }

    /// Hex SHA-256 over the table contents, for cheap equality checks in reports.
    pub fn checksum(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("table serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub(crate) fn replace_feature(&mut self, index: usize, column: Column<T>) {
        self.features[index] = column;
    }
}

fn check_column<T: Scalar>(col: &Column<T>, n_rows: usize) -> Result<()> {
    let len = match &col.data {
        ColumnData::Numeric(v) => v.len(),
        ColumnData::Categorical { codes, dictionary } => {
            if let Some(i) = codes
                .iter()
                .zip(&col.missing)
                .position(|(&c, &m)| !m && c as usize >= dictionary.len())
            {
                return Err(TableError::InvalidTable(format!(
                    "column '{}' row {i}: code out of dictionary range",
                    col.name
                )));
            }
            codes.len()
        }
    };
    if len != n_rows || col.missing.len() != n_rows {
        return Err(TableError::InvalidTable(format!(
            "column '{}' has {len} values, expected {n_rows}",
            col.name
        )));
    }
    Ok(())
}

fn recode<T: Scalar>(col: &Column<T>, reference: Option<&[String]>) -> Result<Column<T>> {
    match (&col.data, reference) {
        (ColumnData::Numeric(_), None) => Ok(col.clone()),
        (ColumnData::Categorical { codes, dictionary }, Some(reference)) => {
            let mut merged: Vec<String> = reference.to_vec();
            let index: HashMap<&str, u32> =
                reference.iter().enumerate().map(|(i, s)| (s.as_str(), i as u32)).collect();
            let mut map = Vec::with_capacity(dictionary.len());
            for label in dictionary {
                let code = match index.get(label.as_str()) {
                    Some(&c) => c,
                    None => {
                        merged.push(label.clone());
                        (merged.len() - 1) as u32
                    }
                };
                map.push(code);
            }
            Ok(Column {
                name: col.name.clone(),
                data: ColumnData::Categorical {
                    codes: codes
                        .iter()
                        .zip(&col.missing)
                        .map(|(&c, &m)| if m { 0 } else { map[c as usize] })
                        .collect(),
                    dictionary: merged,
                },
                missing: col.missing.clone(),
            })
        }
        _ => Err(TableError::InvalidTable(format!(
            "column '{}' kind differs from the reference",
            col.name
        ))),
    }
}

/// Parses a numeric cell: decimal point only, surrounding whitespace allowed,
/// non-finite values treated as unparseable.
fn parse_numeric<T: Scalar>(cell: &str) -> Option<T> {
    let cell = cell.trim();
    if cell.is_empty() || cell.contains(',') {
        return None;
    }
    cell.parse::<T>().ok().filter(|v| v.is_finite())
}

/// Reads a CSV file against `schema`. Header names are matched regardless of
/// order; header columns the schema does not mention are skipped.
pub fn load_table<T: Scalar>(path: impl AsRef<Path>, schema: &Schema) -> Result<Table<T>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| TableError::Io {
        path: path.to_owned(),
        source,
    })?;
    read_table(file, schema)
}

pub fn read_table<T: Scalar, R: Read>(reader: R, schema: &Schema) -> Result<Table<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let csv_err = |e: csv::Error| TableError::Csv {
        line: e.position().map(|p| p.line()).unwrap_or(0),
        message: e.to_string(),
    };
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].trim().is_empty()) {
        return Err(TableError::EmptyFile);
    }
    let mut positions: HashMap<&str, usize> = HashMap::new();
    for (i, name) in header.iter().enumerate() {
        if positions.insert(name.trim(), i).is_some() {
            return Err(TableError::DuplicateColumn(name.trim().to_owned()));
        }
    }
    let retained = schema.retained();
    let mut slots = Vec::with_capacity(retained.columns().len());
    for spec in retained.columns() {
        let pos = *positions
            .get(spec.name.as_str())
            .ok_or_else(|| TableError::MissingColumn(spec.name.clone()))?;
        slots.push(pos);
    }

    let mut raw: Vec<Vec<Option<String>>> = vec![Vec::new(); slots.len()];
    let mut numeric: Vec<Vec<Option<T>>> = vec![Vec::new(); slots.len()];
    let mut n_rows = 0usize;
    for record in rdr.records() {
        let record = record.map_err(csv_err)?;
        for (k, (&pos, spec)) in slots.iter().zip(retained.columns()).enumerate() {
            let cell = record.get(pos).unwrap_or("");
            match spec.kind {
                ColumnKind::Numeric => numeric[k].push(parse_numeric(cell)),
                ColumnKind::Categorical => {
                    raw[k].push((!cell.is_empty()).then(|| cell.to_owned()));
                }
            }
            if spec.role == ColumnRole::Target {
                let absent = match spec.kind {
                    ColumnKind::Numeric => numeric[k][n_rows].is_none(),
                    ColumnKind::Categorical => raw[k][n_rows].is_none(),
                };
                if absent {
                    return Err(TableError::TargetMissingValue {
                        column: spec.name.clone(),
                        row: n_rows,
                    });
                }
            }
        }
        n_rows += 1;
    }
    if n_rows == 0 {
        return Err(TableError::EmptyFile);
    }
    let columns = retained
        .columns()
        .iter()
        .enumerate()
        .map(|(k, spec)| match spec.kind {
            ColumnKind::Numeric => Column::numeric_with_missing(&spec.name, &numeric[k]),
            ColumnKind::Categorical => Column::categorical(&spec.name, &raw[k]),
        })
        .collect();
    Table::new(retained, columns)
}

/// Writes the table as RFC 4180 CSV in schema column order; missing cells are empty.
pub fn write_table<T: Scalar, W: Write>(table: &Table<T>, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| TableError::Csv {
        line: 0,
        message: e.to_string(),
    };
    let order: Vec<&Column<T>> = table
        .schema
        .columns()
        .iter()
        .map(|spec| {
            if spec.role == ColumnRole::Target {
                &table.target
            } else {
                &table.features[table.feature_index(&spec.name).expect("schema column present")]
            }
        })
        .collect();
    wtr.write_record(order.iter().map(|c| c.name.as_str())).map_err(csv_err)?;
    for row in 0..table.n_rows {
        wtr.write_record(order.iter().map(|c| c.render(row))).map_err(csv_err)?;
    }
    wtr.flush().map_err(|source| TableError::Io {
        path: PathBuf::from("<writer>"),
        source,
    })
}

pub fn save_table<T: Scalar>(table: &Table<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|source| TableError::Io {
        path: path.to_owned(),
        source,
    })?;
    write_table(table, std::io::BufWriter::new(file))
}

/// Applies each feature column's missing-value policy.
///
/// Numeric cells are imputed with the mean of observed cells, categorical
/// cells with the modal code (lowest code on ties).
pub fn clean<T: Scalar>(table: &Table<T>) -> Result<Table<T>> {
    let mut out = table.clone();
    for (i, col) in table.features.iter().enumerate() {
        if !col.has_missing() {
            continue;
        }
        let observed = col.missing.iter().filter(|&&m| !m).count();
        if observed == 0 {
            return Err(TableError::AllMissing(col.name.clone()));
        }
        let policy = table
            .schema
            .columns()
            .iter()
            .find(|s| s.name == col.name)
            .map(|s| s.missing_policy)
            .unwrap_or_default();
        if policy == MissingPolicy::Reject {
            return Err(TableError::RejectedMissing(col.name.clone()));
        }
        let data = match &col.data {
            ColumnData::Numeric(v) => {
                let total: T = v
                    .iter()
                    .zip(&col.missing)
                    .filter(|(_, &m)| !m)
                    .map(|(&x, _)| x)
                    .sum();
                let fill = total / T::from_count(observed);
                ColumnData::Numeric(
                    v.iter()
                        .zip(&col.missing)
                        .map(|(&x, &m)| if m { fill } else { x })
                        .collect(),
                )
            }
            ColumnData::Categorical { codes, dictionary } => {
                let mut counts = vec![0usize; dictionary.len()];
                for (&c, &m) in codes.iter().zip(&col.missing) {
                    if !m {
                        counts[c as usize] += 1;
                    }
                }
                let mut mode = 0;
                for (c, &n) in counts.iter().enumerate() {
                    if n > counts[mode] {
                        mode = c;
                    }
                }
                ColumnData::Categorical {
                    codes: codes
                        .iter()
                        .zip(&col.missing)
                        .map(|(&c, &m)| if m { mode as u32 } else { c })
                        .collect(),
                    dictionary: dictionary.clone(),
                }
            }
        };
        out.replace_feature(
            i,
            Column {
                name: col.name.clone(),
                data,
                missing: vec![false; col.len()],
            },
        );
    }
    Ok(out)
}

/// Row indices of a seeded holdout split: `(first, second)`, each sorted.
pub fn holdout_indices(n_rows: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_rows < 2 || !(fraction > 0.0 && fraction < 1.0) {
        return Err(TableError::DegenerateSplit);
    }
    let first = ((fraction * n_rows as f64).round() as usize).clamp(1, n_rows - 1);
    let mut order: Vec<usize> = (0..n_rows).collect();
    order.shuffle(&mut seed::rng(seed, Stream::Holdout, &[]));
    let mut a = order[..first].to_vec();
    let mut b = order[first..].to_vec();
    a.sort_unstable();
    b.sort_unstable();
    Ok((a, b))
}

pub fn split_holdout<T: Scalar>(table: &Table<T>, fraction: f64, seed: u64) -> Result<(Table<T>, Table<T>)> {
    let (a, b) = holdout_indices(table.n_rows, fraction, seed)?;
    Ok((table.select_rows(&a), table.select_rows(&b)))
}
