//! CSV ingestion: column roles, dummy coding, standardization and the
//! train/test split.

use std::collections::HashSet;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use vcplm::Dataset;

use crate::error::{CliError, CliResult};

/// Raw CSV contents with the file line of every record.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub lines: Vec<u64>,
}

impl Table {
    pub fn column(&self, name: &str) -> CliResult<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Input(format!("no column named '{name}' (columns: {})", self.headers.join(", "))))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Numeric values of column `c`, with a line-numbered error on failure.
    fn numeric(&self, c: usize) -> CliResult<Vec<f64>> {
        self.rows
            .iter()
            .zip(&self.lines)
            .map(|(r, line)| {
                let v = &r[c];
                v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| {
                    CliError::Input(format!("line {line}: column '{}': cannot parse '{v}' as a number", self.headers[c]))
                })
            })
            .collect()
    }
}

pub fn parse_table(reader: impl Read) -> CliResult<Table> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| CliError::Input(format!("line 1: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    if headers.is_empty() || headers.iter().all(String::is_empty) {
        return Err(CliError::Input("line 1: empty header".into()));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = headers.iter().find(|h| !seen.insert(h.as_str())) {
        return Err(CliError::Input(format!("line 1: duplicate column '{dup}'")));
    }
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            CliError::Input(format!("line {line}: {e}"))
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        rows.push(rec.iter().map(str::to_string).collect());
        lines.push(line);
    }
    if rows.is_empty() {
        return Err(CliError::Input("no data rows".into()));
    }
    Ok(Table { headers, rows, lines })
}

pub fn read_table(path: &Path) -> CliResult<Table> {
    let f = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    parse_table(f)
}

/// Column names of the whitespace-separated plasma retinol file.
pub const PLASMA_COLUMNS: [&str; 14] = [
    "age",
    "sex",
    "smokstat",
    "quetelet",
    "vituse",
    "calories",
    "fat",
    "fiber",
    "alcohol",
    "cholesterol",
    "betadiet",
    "retdiet",
    "betaplasma",
    "retplasma",
];

fn plasma_label(column: &str, code: &str) -> Option<&'static str> {
    let code: f64 = code.parse().ok()?;
    match (column, code as i64) {
        ("sex", 1) => Some("male"),
        ("sex", 2) => Some("female"),
        ("smokstat", 1) => Some("never"),
        ("smokstat", 2) => Some("former"),
        ("smokstat", 3) => Some("current"),
        ("vituse", 1) => Some("fairly_often"),
        ("vituse", 2) => Some("not_often"),
        ("vituse", 3) => Some("no"),
        _ => None,
    }
}

/// Parses the raw plasma retinol file: whitespace-separated, no header,
/// one record of 14 numbers per line. Lines that do not start with a
/// number are skipped. The coded columns `sex`, `smokstat` and `vituse`
/// become text labels so they can be dummy coded by name.
pub fn parse_plasma(reader: impl Read) -> CliResult<Table> {
    let mut text = String::new();
    let mut reader = reader;
    reader.read_to_string(&mut text).map_err(|e| CliError::Input(format!("cannot read plasma file: {e}")))?;
    let headers: Vec<String> = PLASMA_COLUMNS.iter().map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.first().is_none_or(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        let line_no = k as u64 + 1;
        if fields.len() != PLASMA_COLUMNS.len() {
            return Err(CliError::Input(format!(
                "line {line_no}: expected {} fields, found {}",
                PLASMA_COLUMNS.len(),
                fields.len()
            )));
        }
        let mut row = Vec::with_capacity(fields.len());
        for (name, f) in PLASMA_COLUMNS.iter().zip(&fields) {
            row.push(match *name {
                "sex" | "smokstat" | "vituse" => plasma_label(name, f)
                    .ok_or_else(|| CliError::Input(format!("line {line_no}: column '{name}': unknown code '{f}'")))?
                    .to_string(),
                _ => f.to_string(),
            });
        }
        rows.push(row);
        lines.push(line_no);
    }
    if rows.is_empty() {
        return Err(CliError::Input("plasma file contains no records".into()));
    }
    Ok(Table { headers, rows, lines })
}

pub fn read_plasma(path: &Path) -> CliResult<Table> {
    let f = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    parse_plasma(f)
}

/// Which columns play which part in the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Roles {
    pub u: String,
    pub x: Vec<String>,
    /// `None` means every column not claimed elsewhere (`z=rest`).
    pub z: Option<Vec<String>>,
    pub y: String,
}

impl FromStr for Roles {
    type Err = CliError;

    /// Parses `u=col, x=a+b, z=rest, y=col`; `x` and `z` may be omitted.
    fn from_str(s: &str) -> CliResult<Self> {
        let (mut u, mut x, mut z, mut y) = (None, Vec::new(), Some(Vec::new()), None);
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, val) = part
                .split_once('=')
                .ok_or_else(|| CliError::Input(format!("role '{part}' is not of the form key=columns")))?;
            let cols: Vec<String> =
                val.split('+').map(|c| c.trim().to_string()).filter(|c| !c.is_empty()).collect();
            match key.trim() {
                "u" | "y" if cols.len() != 1 => {
                    return Err(CliError::Input(format!("role '{}' takes exactly one column", key.trim())))
                }
                "u" => u = Some(cols[0].clone()),
                "y" => y = Some(cols[0].clone()),
                "x" => x = cols,
                "z" if cols == ["rest"] => z = None,
                "z" => z = Some(cols),
                other => return Err(CliError::Input(format!("unknown role '{other}'; use u, x, z or y"))),
            }
        }
        let u = u.ok_or_else(|| CliError::Input("roles must name the index column (u=...)".into()))?;
        let y = y.ok_or_else(|| CliError::Input("roles must name the response column (y=...)".into()))?;
        Ok(Roles { u, x, z, y })
    }
}

/// Categorical column with an optional reference level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Categorical {
    pub column: String,
    pub reference: Option<String>,
}

impl FromStr for Categorical {
    type Err = CliError;

    /// `col` or `col:reference`.
    fn from_str(s: &str) -> CliResult<Self> {
        let s = s.trim();
        match s.split_once(':') {
            Some((c, r)) => Ok(Categorical { column: c.trim().into(), reference: Some(r.trim().into()) }),
            None if !s.is_empty() => Ok(Categorical { column: s.into(), reference: None }),
            None => Err(CliError::Input("empty categorical column name".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignOptions {
    pub roles: Roles,
    pub categorical: Vec<Categorical>,
    pub exclude: Vec<String>,
    pub standardize: bool,
    pub include_baseline: bool,
    /// Leading rows used for fitting; the rest form the test set.
    pub train_rows: Option<usize>,
}

/// Centering and scaling applied to one covariate column.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnScale {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub train: Dataset,
    pub test: Option<Dataset>,
    pub x_names: Vec<String>,
    pub z_names: Vec<String>,
    /// Train-set statistics; applied unchanged to the test rows.
    pub scales: Vec<ColumnScale>,
}

struct Column {
    name: String,
    values: Vec<f64>,
    scalable: bool,
}

fn dummies(table: &Table, c: usize, spec: &Categorical) -> CliResult<Vec<Column>> {
    let mut levels: Vec<&str> = Vec::new();
    for r in &table.rows {
        if !levels.contains(&r[c].as_str()) {
            levels.push(&r[c]);
        }
    }
    let reference = match &spec.reference {
        Some(r) => levels.iter().position(|l| l == r).ok_or_else(|| {
            CliError::Input(format!("column '{}' has no level '{r}' (levels: {})", spec.column, levels.join(", ")))
        })?,
        None => 0,
    };
    Ok(levels
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != reference)
        .map(|(_, lvl)| Column {
            name: format!("{}={lvl}", spec.column),
            values: table.rows.iter().map(|r| if r[c] == *lvl { 1.0 } else { 0.0 }).collect(),
            scalable: false,
        })
        .collect())
}

fn to_matrix(cols: &[Column], idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), cols.len(), |i, j| cols[j].values[idx[i]])
}

pub fn build_design(table: &Table, opts: &DesignOptions) -> CliResult<Design> {
    let roles = &opts.roles;
    let n = table.len();
    let u_col = table.column(&roles.u)?;
    let y_col = table.column(&roles.y)?;
    for c in &opts.exclude {
        table.column(c)?;
    }
    let cat_names: Vec<&str> = opts.categorical.iter().map(|c| c.column.as_str()).collect();
    for c in &cat_names {
        table.column(c)?;
    }

    let claimed: HashSet<&str> = [roles.u.as_str(), roles.y.as_str()]
        .into_iter()
        .chain(roles.x.iter().map(String::as_str))
        .chain(opts.exclude.iter().map(String::as_str))
        .collect();
    let z_cols: Vec<String> = match &roles.z {
        Some(z) => z.clone(),
        None => table.headers.iter().filter(|h| !claimed.contains(h.as_str())).cloned().collect(),
    };
    let mut used = HashSet::new();
    for c in [&roles.u, &roles.y].into_iter().chain(&roles.x).chain(&z_cols) {
        if !used.insert(c.as_str()) {
            return Err(CliError::Input(format!("column '{c}' is assigned to more than one role")));
        }
    }
    if let Some(c) = roles.x.iter().find(|c| cat_names.contains(&c.as_str())) {
        return Err(CliError::Input(format!("categorical column '{c}' can only be a linear covariate")));
    }
    if let Some(c) = cat_names.iter().find(|c| !z_cols.iter().any(|z| z == *c)) {
        return Err(CliError::Input(format!("categorical column '{c}' is not among the linear covariates")));
    }

    let u = table.numeric(u_col)?;
    let y = table.numeric(y_col)?;
    let mut x: Vec<Column> = Vec::new();
    for name in &roles.x {
        let c = table.column(name)?;
        x.push(Column { name: name.clone(), values: table.numeric(c)?, scalable: true });
    }
    let mut z: Vec<Column> = Vec::new();
    for name in &z_cols {
        let c = table.column(name)?;
        match opts.categorical.iter().find(|s| &s.column == name) {
            Some(spec) => z.extend(dummies(table, c, spec)?),
            None => z.push(Column { name: name.clone(), values: table.numeric(c)?, scalable: true }),
        }
    }

    let n_train = opts.train_rows.unwrap_or(n);
    if n_train == 0 || n_train > n {
        return Err(CliError::Input(format!("train rows must lie in [1, {n}], got {n_train}")));
    }
    let mut scales = Vec::new();
    if opts.standardize {
        for col in x.iter_mut().chain(z.iter_mut()).filter(|c| c.scalable) {
            let train = &col.values[..n_train];
            let m = train.len() as f64;
            let mean = train.iter().sum::<f64>() / m;
            let var = train.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0).max(1.0);
            let sd = var.sqrt();
            if !(sd > 0.0) || !sd.is_finite() {
                return Err(CliError::Input(format!(
                    "column '{}' is constant over the training rows and cannot be standardized",
                    col.name
                )));
            }
            for v in &mut col.values {
                *v = (*v - mean) / sd;
            }
            scales.push(ColumnScale { name: col.name.clone(), mean, sd });
        }
    }

    let make = |idx: &[usize]| -> CliResult<Dataset> {
        Ok(Dataset::new(
            idx.iter().map(|&i| u[i]).collect(),
            to_matrix(&x, idx),
            to_matrix(&z, idx),
            idx.iter().map(|&i| y[i]).collect(),
            opts.include_baseline,
        )?)
    };
    let train_idx: Vec<usize> = (0..n_train).collect();
    let test_idx: Vec<usize> = (n_train..n).collect();
    Ok(Design {
        train: make(&train_idx)?,
        test: if test_idx.is_empty() { None } else { Some(make(&test_idx)?) },
        x_names: x.iter().map(|c| c.name.clone()).collect(),
        z_names: z.iter().map(|c| c.name.clone()).collect(),
        scales,
    })
}
