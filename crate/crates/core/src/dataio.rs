//! CSV ingestion, z-score normalization, environment splitting and the
//! `env_id, y, x0 … x{d−1}` interchange format.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};

use crate::config::Config;
use crate::dataset::{common_dim, EnvDataset};
use crate::error::{Result, SalError};

/// Which columns of a CSV file are read, and how.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TableSchema {
    pub target: String,
    /// When set, the target is binary: 1 for this value, 0 for anything else.
    pub target_positive: Option<String>,
    pub environment: Option<String>,
    pub features: Vec<String>,
    /// Category lists for categorical features, in indicator-column order.
    pub categorical: BTreeMap<String, Vec<String>>,
}

impl TableSchema {
    pub fn validate(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(SalError::Config("schema has no features".into()));
        }
        if self.features.contains(&self.target) {
            return Err(SalError::Config(format!("target `{}` listed as a feature", self.target)));
        }
        if let Some(env) = &self.environment {
            if self.features.contains(env) {
                return Err(SalError::Config(format!("environment `{env}` listed as a feature")));
            }
        }
        for (col, cats) in &self.categorical {
            if !self.features.contains(col) {
                return Err(SalError::Config(format!("categorical `{col}` is not a feature")));
            }
            if cats.is_empty() {
                return Err(SalError::Config(format!("categorical `{col}` has no categories")));
            }
        }
        Ok(())
    }

    /// Reads `target`, `target_positive`, `environment`, `features` (comma
    /// list) and `categorical.<column>` (comma list of categories).
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let target = cfg
            .get_str("target")
            .ok_or_else(|| SalError::Config("schema: missing `target`".into()))?
            .to_string();
        let features = cfg
            .get_list::<String>("features")?
            .ok_or_else(|| SalError::Config("schema: missing `features`".into()))?;
        let mut categorical = BTreeMap::new();
        for key in cfg.keys() {
            if let Some(col) = key.strip_prefix("categorical.") {
                categorical.insert(col.to_string(), cfg.get_list::<String>(key)?.unwrap_or_default());
            }
        }
        cfg.check_known(&["target", "target_positive", "environment", "features"], &["categorical."])?;
        let schema = TableSchema {
            target,
            target_positive: cfg.get_str("target_positive").map(str::to_string),
            environment: cfg.get_str("environment").map(str::to_string),
            features,
            categorical,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_config(&Config::load(path)?)
    }
}

/// A parsed table: expanded feature matrix, target, and the untouched text
/// of every other column (available for environment splitting).
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub feature_names: Vec<String>,
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub other: BTreeMap<String, Vec<String>>,
}

impl Table {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Loads a comma-delimited UTF-8 file whose first row is the header.
pub fn load_csv(path: &Path, schema: &TableSchema) -> Result<Table> {
    schema.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| SalError::Csv(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let index_of = |name: &str| header.iter().position(|h| h == name);

    let mut wanted: Vec<&str> = vec![schema.target.as_str()];
    wanted.extend(schema.features.iter().map(String::as_str));
    wanted.extend(schema.environment.as_deref());
    let missing: Vec<&str> = wanted.iter().copied().filter(|c| index_of(c).is_none()).collect();
    if !missing.is_empty() {
        return Err(SalError::Csv(format!("missing columns: {}", missing.join(", "))));
    }
    let target_idx = index_of(&schema.target).unwrap_or_default();
    let feature_idx: Vec<usize> = schema
        .features
        .iter()
        .map(|f| index_of(f).unwrap_or_default())
        .collect();

    let mut feature_names = Vec::new();
    for f in &schema.features {
        match schema.categorical.get(f) {
            Some(cats) => feature_names.extend(cats.iter().map(|c| format!("{f}={c}"))),
            None => feature_names.push(f.clone()),
        }
    }

    let mut values: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut other: BTreeMap<String, Vec<String>> = header
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != target_idx && !feature_idx.contains(i))
        .map(|(_, h)| (h.clone(), Vec::new()))
        .collect();
    let mut empty_rows: Vec<usize> = Vec::new();

    for (r, record) in reader.records().enumerate() {
        // row numbers count the header as row 1
        let row_no = r + 2;
        let record = record.map_err(|e| SalError::Csv(format!("row {row_no}: {e}")))?;
        if record.len() != header.len() {
            return Err(SalError::Csv(format!(
                "row {row_no}: expected {} fields, found {}",
                header.len(),
                record.len()
            )));
        }
        let field = |i: usize| record.get(i).unwrap_or("").trim();
        if wanted
            .iter()
            .any(|c| field(index_of(c).unwrap_or_default()).is_empty())
        {
            empty_rows.push(row_no);
            continue;
        }

        let t = field(target_idx);
        ys.push(match &schema.target_positive {
            Some(pos) => f64::from(t == pos),
            None => parse_number(t, row_no, &schema.target)?,
        });
        for (f, &i) in schema.features.iter().zip(&feature_idx) {
            let v = field(i);
            match schema.categorical.get(f) {
                Some(cats) => {
                    let k = cats.iter().position(|c| c == v).ok_or_else(|| {
                        SalError::Csv(format!("row {row_no}, column {f}: unknown category `{v}`"))
                    })?;
                    values.extend((0..cats.len()).map(|j| f64::from(j == k)));
                }
                None => values.push(parse_number(v, row_no, f)?),
            }
        }
        for (name, col) in other.iter_mut() {
            col.push(field(index_of(name).unwrap_or_default()).to_string());
        }
    }
    if !empty_rows.is_empty() {
        let list: Vec<String> = empty_rows.iter().map(usize::to_string).collect();
        return Err(SalError::Csv(format!("missing values in rows {}", list.join(", "))));
    }
    let n = ys.len();
    let x = Array2::from_shape_vec((n, feature_names.len()), values)
        .map_err(|e| SalError::Csv(e.to_string()))?;
    Ok(Table {
        feature_names,
        x,
        y: Array1::from(ys),
        other,
    })
}

fn parse_number(v: &str, row_no: usize, column: &str) -> Result<f64> {
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(SalError::Csv(format!("row {row_no}, column {column}: not a number: `{v}`"))),
    }
}

/// Per-feature training mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats {
    pub mean: Array1<f64>,
    /// Constant columns store 1.
    pub std: Array1<f64>,
}

impl NormalizationStats {
    pub fn fit(x: &Array2<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mean = x.sum_axis(Axis(0)) / n;
        let std = x
            .axis_iter(Axis(1))
            .zip(mean.iter())
            .map(|(col, &m)| {
                let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
                let sd = var.sqrt();
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        NormalizationStats { mean, std }
    }

    pub fn apply(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(SalError::DimensionMismatch {
                expected: self.mean.len(),
                got: x.ncols(),
            });
        }
        Ok((x - &self.mean) / &self.std)
    }

    pub fn invert(&self, z: &Array2<f64>) -> Result<Array2<f64>> {
        if z.ncols() != self.mean.len() {
            return Err(SalError::DimensionMismatch {
                expected: self.mean.len(),
                got: z.ncols(),
            });
        }
        Ok(z * &self.std + &self.mean)
    }
}

/// Z-scores the features, fitting the statistics when none are supplied.
pub fn normalize(table: &Table, stats: Option<&NormalizationStats>) -> Result<(Table, NormalizationStats)> {
    let stats = match stats {
        Some(s) => s.clone(),
        None => NormalizationStats::fit(&table.x),
    };
    let x = stats.apply(&table.x)?;
    Ok((Table { x, ..table.clone() }, stats))
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnvSplit {
    /// Half-open numeric bins `[e₀, e₁), [e₁, e₂), …`.
    Bins(Vec<f64>),
    Categories(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitOutcome {
    pub envs: Vec<EnvDataset>,
    /// Rows outside every bin or category.
    pub leftover: usize,
    /// One message per empty bin or category that was dropped.
    pub warnings: Vec<String>,
}

pub fn split_environments(table: &Table, env_column: &str, split: &EnvSplit) -> Result<SplitOutcome> {
    let col = table
        .other
        .get(env_column)
        .ok_or_else(|| SalError::Csv(format!("missing environment column `{env_column}`")))?;
    let (labels, assign): (Vec<String>, Vec<Option<usize>>) = match split {
        EnvSplit::Bins(edges) => {
            if edges.len() < 2 || edges.windows(2).any(|p| !(p[0] < p[1])) {
                return Err(SalError::InvalidParam(
                    "bin edges must be at least two strictly increasing values".into(),
                ));
            }
            let labels = edges.windows(2).map(|p| format!("[{},{})", p[0], p[1])).collect();
            let assign = col
                .iter()
                .enumerate()
                .map(|(r, v)| {
                    let x: f64 = v.parse().map_err(|_| {
                        SalError::Csv(format!("data row {}, column {env_column}: not a number: `{v}`", r + 1))
                    })?;
                    Ok(edges.windows(2).position(|p| p[0] <= x && x < p[1]))
                })
                .collect::<Result<_>>()?;
            (labels, assign)
        }
        EnvSplit::Categories(cats) => {
            let assign = col.iter().map(|v| cats.iter().position(|c| c == v)).collect();
            (cats.clone(), assign)
        }
    };

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); labels.len()];
    let mut leftover = 0;
    for (row, a) in assign.iter().enumerate() {
        match a {
            Some(k) => members[*k].push(row),
            None => leftover += 1,
        }
    }
    let mut envs = Vec::new();
    let mut warnings = Vec::new();
    for (label, rows) in labels.iter().zip(&members) {
        if rows.is_empty() {
            warnings.push(format!("environment {env_column}={label} is empty and was dropped"));
            continue;
        }
        let x = table.x.select(Axis(0), rows);
        let y = table.y.select(Axis(0), rows);
        envs.push(EnvDataset::new(x, y, format!("{env_column}={label}"))?);
    }
    if envs.is_empty() {
        return Err(SalError::Empty(format!("every environment of `{env_column}` is empty")));
    }
    Ok(SplitOutcome {
        envs,
        leftover,
        warnings,
    })
}

/// Writes `contents` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| SalError::InvalidParam(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// Serializes environments as `env_id,y,x0,…,x{d−1}`.
pub fn env_csv_string(envs: &[EnvDataset]) -> Result<String> {
    let d = common_dim(envs)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["env_id".to_string(), "y".to_string()];
    header.extend((0..d).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for e in envs {
        for (x, y) in e.x.outer_iter().zip(e.y.iter()) {
            let mut rec = vec![e.env_id.clone(), format!("{y:?}")];
            rec.extend(x.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| SalError::Csv(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| SalError::Csv(e.to_string()))
}

pub fn write_env_csv(path: &Path, envs: &[EnvDataset]) -> Result<()> {
    write_atomic(path, env_csv_string(envs)?.as_bytes())
}

/// Reads the interchange format; environments keep first-appearance order.
pub fn read_env_csv(path: &Path) -> Result<Vec<EnvDataset>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| SalError::Csv(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.len() < 3 || header[0] != "env_id" || header[1] != "y" {
        return Err(SalError::Csv("expected header env_id,y,x0,…".into()));
    }
    let d = header.len() - 2;
    let mut order: Vec<String> = Vec::new();
    let mut rows: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (r, record) in reader.records().enumerate() {
        let row_no = r + 2;
        let record = record.map_err(|e| SalError::Csv(format!("row {row_no}: {e}")))?;
        let id = record.get(0).unwrap_or("").to_string();
        let entry = rows.entry(id.clone()).or_insert_with(|| {
            order.push(id);
            (Vec::new(), Vec::new())
        });
        entry.1.push(parse_number(record.get(1).unwrap_or(""), row_no, "y")?);
        for j in 0..d {
            entry
                .0
                .push(parse_number(record.get(j + 2).unwrap_or(""), row_no, &header[j + 2])?);
        }
    }
    if order.is_empty() {
        return Err(SalError::Empty(format!("{} has no rows", path.display())));
    }
    order
        .into_iter()
        .map(|id| {
            let (xs, ys) = rows.remove(&id).unwrap_or_default();
            let n = ys.len();
            let x = Array2::from_shape_vec((n, d), xs).map_err(|e| SalError::Csv(e.to_string()))?;
            EnvDataset::new(x, Array1::from(ys), id)
        })
        .collect()
}
