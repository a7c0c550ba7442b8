//! Reading and writing functional datasets as CSV.
//!
//! The canonical functional layout is wide: one row per subject, an id in
//! the first column and one column per grid point. A long layout with
//! columns `id`, `s`, `value` is also accepted. Covariates live in a
//! separate file keyed by the same ids.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use powerloss_core::{FunctionalDataset, Grid};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FunctionalFormat {
    #[default]
    Wide,
    Long,
}

/// Where grid positions come from in the wide layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridSpec {
    /// Numeric, increasing headers if present, otherwise evenly spaced.
    #[default]
    Auto,
    Headers,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub functional: PathBuf,
    pub covariates: PathBuf,
    pub format: FunctionalFormat,
    pub grid: GridSpec,
    /// Covariates with two levels, coded 0/1.
    pub binary: Vec<String>,
}

/// Affine map from the original grid to `[0, 1]`: `u = (s - offset) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridMapping {
    pub offset: f64,
    pub scale: f64,
}

impl GridMapping {
    pub fn to_original(&self, u: f64) -> f64 {
        self.offset + self.scale * u
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RejectedRow {
    pub line: u64,
    pub id: String,
    pub missing_values: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinaryMapping {
    pub column: String,
    pub zero: String,
    pub one: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub dataset: FunctionalDataset,
    pub original_points: Vec<f64>,
    pub mapping: GridMapping,
    pub rejected: Vec<RejectedRow>,
    pub binary: Vec<BinaryMapping>,
}

struct Row {
    line: u64,
    fields: Vec<String>,
}

fn read_rows(path: &Path) -> Result<(Row, Vec<Row>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        rows.push(Row {
            line,
            fields: rec.iter().map(str::to_string).collect(),
        });
    }
    if rows.is_empty() {
        return Err(Error::Csv {
            path: path.to_path_buf(),
            line: 1,
            message: "file is empty".into(),
        });
    }
    let header = rows.remove(0);
    Ok((header, rows))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        kind => Error::Csv {
            path: path.to_path_buf(),
            line,
            message: format!("{kind:?}"),
        },
    }
}

fn is_missing(v: &str) -> bool {
    v.is_empty() || matches!(v, "NA" | "NaN" | "nan" | "." | "null")
}

fn parse_number(path: &Path, line: u64, column: &str, v: &str) -> Result<f64> {
    v.parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| Error::NonNumeric {
            path: path.to_path_buf(),
            line,
            column: column.to_string(),
            value: v.to_string(),
        })
}

fn check_width(path: &Path, row: &Row, expected: usize) -> Result<()> {
    if row.fields.len() != expected {
        return Err(Error::RaggedRow {
            path: path.to_path_buf(),
            line: row.line,
            expected,
            found: row.fields.len(),
        });
    }
    Ok(())
}

struct Curves {
    ids: Vec<String>,
    lines: Vec<u64>,
    values: Vec<Vec<f64>>,
    points: Vec<f64>,
    rejected: Vec<RejectedRow>,
}

fn strictly_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] > w[0])
}

fn read_wide(path: &Path, grid: GridSpec) -> Result<Curves> {
    let (header, rows) = read_rows(path)?;
    let p = header.fields.len().saturating_sub(1);
    if p < 2 {
        return Err(Error::Csv {
            path: path.to_path_buf(),
            line: header.line,
            message: "need an id column and at least two value columns".into(),
        });
    }
    let parsed: Option<Vec<f64>> = header.fields[1..]
        .iter()
        .map(|h| h.parse::<f64>().ok().filter(|x| x.is_finite()))
        .collect();
    let uniform = || {
        (0..p)
            .map(|j| j as f64 / (p - 1) as f64)
            .collect::<Vec<_>>()
    };
    let points = match grid {
        GridSpec::Uniform => uniform(),
        GridSpec::Auto => match parsed {
            Some(v) if strictly_increasing(&v) => v,
            _ => uniform(),
        },
        GridSpec::Headers => {
            let mut v = Vec::with_capacity(p);
            for h in &header.fields[1..] {
                v.push(parse_number(path, header.line, h, h)?);
            }
            if !strictly_increasing(&v) {
                return Err(Error::Csv {
                    path: path.to_path_buf(),
                    line: header.line,
                    message: "grid headers must be strictly increasing".into(),
                });
            }
            v
        }
    };

    let mut seen: HashMap<String, u64> = HashMap::new();
    let mut out = Curves {
        ids: Vec::new(),
        lines: Vec::new(),
        values: Vec::new(),
        points,
        rejected: Vec::new(),
    };
    for row in rows {
        check_width(path, &row, p + 1)?;
        let id = row.fields[0].clone();
        if seen.insert(id.clone(), row.line).is_some() {
            return Err(Error::DuplicateId {
                path: path.to_path_buf(),
                line: row.line,
                id,
            });
        }
        let mut vals = Vec::with_capacity(p);
        let mut missing = 0;
        for (j, v) in row.fields[1..].iter().enumerate() {
            if is_missing(v) {
                missing += 1;
                vals.push(f64::NAN);
            } else {
                vals.push(parse_number(path, row.line, &header.fields[j + 1], v)?);
            }
        }
        if missing > 0 {
            out.rejected.push(RejectedRow {
                line: row.line,
                id,
                missing_values: missing,
            });
            continue;
        }
        out.ids.push(id);
        out.lines.push(row.line);
        out.values.push(vals);
    }
    Ok(out)
}

fn read_long(path: &Path) -> Result<Curves> {
    let (header, rows) = read_rows(path)?;
    let col = |name: &str| {
        header
            .fields
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Csv {
                path: path.to_path_buf(),
                line: header.line,
                message: format!("long format needs an `{name}` column"),
            })
    };
    let (ci, cs, cv) = (col("id")?, col("s")?, col("value")?);
    let width = header.fields.len();

    let mut order: Vec<String> = Vec::new();
    let mut first_line: HashMap<String, u64> = HashMap::new();
    let mut cells: HashMap<(String, u64), Option<f64>> = HashMap::new();
    let mut s_values: BTreeSet<u64> = BTreeSet::new();
    for row in rows {
        check_width(path, &row, width)?;
        let id = row.fields[ci].clone();
        let s = parse_number(path, row.line, "s", &row.fields[cs])?;
        let key = s.to_bits();
        let v = &row.fields[cv];
        let value = if is_missing(v) {
            None
        } else {
            Some(parse_number(path, row.line, "value", v)?)
        };
        if !first_line.contains_key(&id) {
            first_line.insert(id.clone(), row.line);
            order.push(id.clone());
        }
        if cells.insert((id.clone(), key), value).is_some() {
            return Err(Error::DuplicateId {
                path: path.to_path_buf(),
                line: row.line,
                id: format!("{id} at s = {s}"),
            });
        }
        s_values.insert(key);
    }
    let mut points: Vec<f64> = s_values.iter().map(|b| f64::from_bits(*b)).collect();
    points.sort_by(|a, b| a.total_cmp(b));

    let mut out = Curves {
        ids: Vec::new(),
        lines: Vec::new(),
        values: Vec::new(),
        points,
        rejected: Vec::new(),
    };
    for id in order {
        let line = first_line[&id];
        let vals: Vec<Option<f64>> = out
            .points
            .iter()
            .map(|s| cells.get(&(id.clone(), s.to_bits())).copied().flatten())
            .collect();
        let missing = vals.iter().filter(|v| v.is_none()).count();
        if missing > 0 {
            out.rejected.push(RejectedRow {
                line,
                id,
                missing_values: missing,
            });
            continue;
        }
        out.ids.push(id);
        out.lines.push(line);
        out.values
            .push(vals.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect());
    }
    Ok(out)
}

struct CovariateTable {
    names: Vec<String>,
    rows: HashMap<String, (u64, Vec<f64>)>,
    order: Vec<String>,
    binary: Vec<BinaryMapping>,
}

fn read_covariates(path: &Path, binary: &[String]) -> Result<CovariateTable> {
    let (header, rows) = read_rows(path)?;
    let names: Vec<String> = header.fields[1..].to_vec();
    if names.is_empty() {
        return Err(Error::Csv {
            path: path.to_path_buf(),
            line: header.line,
            message: "need an id column and at least one covariate".into(),
        });
    }
    let mut uniq = BTreeSet::new();
    for n in &names {
        if !uniq.insert(n.clone()) {
            return Err(Error::Csv {
                path: path.to_path_buf(),
                line: header.line,
                message: format!("covariate `{n}` appears twice"),
            });
        }
    }
    if let Some(b) = binary.iter().find(|b| !names.contains(b)) {
        return Err(Error::Config(format!(
            "binary covariate `{b}` is not a column of {}",
            path.display()
        )));
    }
    let is_binary: Vec<bool> = names.iter().map(|n| binary.contains(n)).collect();
    let width = names.len() + 1;
    for row in &rows {
        check_width(path, row, width)?;
    }

    // Levels of binary columns: 0/1 stay numeric, anything else is coded by
    // sorted label.
    let mut binary_maps = Vec::new();
    let mut level_maps: Vec<Option<HashMap<String, f64>>> = vec![None; names.len()];
    for (c, name) in names.iter().enumerate() {
        if !is_binary[c] {
            continue;
        }
        let mut levels = BTreeSet::new();
        for row in &rows {
            let v = row.fields[c + 1].clone();
            levels.insert(v.clone());
            if levels.len() > 2 {
                return Err(Error::BinaryLevels {
                    path: path.to_path_buf(),
                    line: row.line,
                    column: name.clone(),
                    value: v,
                });
            }
        }
        let levels: Vec<String> = levels.into_iter().collect();
        let numeric01 = levels
            .iter()
            .all(|l| matches!(l.parse::<f64>(), Ok(x) if x == 0.0 || x == 1.0));
        let (zero, one) = if numeric01 {
            ("0".to_string(), "1".to_string())
        } else {
            (
                levels[0].clone(),
                levels.get(1).cloned().unwrap_or_default(),
            )
        };
        let mut map = HashMap::new();
        if numeric01 {
            for l in &levels {
                map.insert(l.clone(), l.parse::<f64>().unwrap_or(0.0));
            }
        } else {
            map.insert(zero.clone(), 0.0);
            map.insert(one.clone(), 1.0);
        }
        level_maps[c] = Some(map);
        binary_maps.push(BinaryMapping {
            column: name.clone(),
            zero,
            one,
        });
    }

    let mut table = HashMap::new();
    let mut order = Vec::new();
    for row in rows {
        let id = row.fields[0].clone();
        if table.contains_key(&id) {
            return Err(Error::DuplicateId {
                path: path.to_path_buf(),
                line: row.line,
                id,
            });
        }
        let mut vals = Vec::with_capacity(names.len());
        for (c, v) in row.fields[1..].iter().enumerate() {
            let x = match &level_maps[c] {
                Some(map) => map[v],
                None => parse_number(path, row.line, &names[c], v)?,
            };
            vals.push(x);
        }
        order.push(id.clone());
        table.insert(id, (row.line, vals));
    }
    Ok(CovariateTable {
        names,
        rows: table,
        order,
        binary: binary_maps,
    })
}

/// Reads, validates and aligns the functional and covariate files.
pub fn ingest(manifest: &DatasetManifest) -> Result<Ingested> {
    let curves = match manifest.format {
        FunctionalFormat::Wide => read_wide(&manifest.functional, manifest.grid)?,
        FunctionalFormat::Long => read_long(&manifest.functional)?,
    };
    let covs = read_covariates(&manifest.covariates, &manifest.binary)?;

    for (id, line) in curves.ids.iter().zip(&curves.lines) {
        if !covs.rows.contains_key(id) {
            return Err(Error::IdMismatch {
                path: manifest.functional.clone(),
                line: *line,
                id: id.clone(),
                other: manifest.covariates.clone(),
            });
        }
    }
    let kept: BTreeSet<&String> = curves.ids.iter().collect();
    let dropped: BTreeSet<&String> = curves.rejected.iter().map(|r| &r.id).collect();
    for id in &covs.order {
        if !kept.contains(id) && !dropped.contains(id) {
            return Err(Error::IdMismatch {
                path: manifest.covariates.clone(),
                line: covs.rows[id].0,
                id: id.clone(),
                other: manifest.functional.clone(),
            });
        }
    }
    if curves.ids.len() < 2 {
        return Err(Error::Config(format!(
            "{} complete curves after rejecting rows with missing values; need at least 2",
            curves.ids.len()
        )));
    }

    let p = curves.points.len();
    let lo = curves.points[0];
    let hi = curves.points[p - 1];
    let mapping = GridMapping {
        offset: lo,
        scale: hi - lo,
    };
    let mut unit: Vec<f64> = curves.points.iter().map(|s| (s - lo) / (hi - lo)).collect();
    unit[0] = 0.0;
    unit[p - 1] = 1.0;
    let grid = Arc::new(Grid::new(unit)?);

    let n = curves.ids.len();
    let response = DMatrix::from_fn(n, p, |i, j| curves.values[i][j]);
    let q = covs.names.len();
    let covariates = DMatrix::from_fn(n, q, |i, c| covs.rows[&curves.ids[i]].1[c]);
    let dataset = FunctionalDataset::new(grid, response, covariates, covs.names, curves.ids)?;
    Ok(Ingested {
        dataset,
        original_points: curves.points,
        mapping,
        rejected: curves.rejected,
        binary: covs.binary,
    })
}

pub(crate) fn create_file(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(io_err(path))
}

/// Writes rows of already formatted cells as CSV.
pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut file = create_file(path)?;
    let mut w = csv::WriterBuilder::new().from_writer(&mut file);
    let fail = |e: csv::Error| csv_err(path, e);
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.write_record(r).map_err(fail)?;
    }
    w.flush().map_err(io_err(path))?;
    drop(w);
    file.flush().map_err(io_err(path))
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "NA".to_string()
    } else {
        format!("{x}")
    }
}

/// Writes `functional.csv` (wide, grid positions as headers) and
/// `covariates.csv` into `dir`.
pub fn write_dataset(dir: &Path, data: &FunctionalDataset) -> Result<(PathBuf, PathBuf)> {
    let fpath = dir.join("functional.csv");
    let cpath = dir.join("covariates.csv");
    let mut header = vec!["id".to_string()];
    header.extend(data.grid.points().iter().map(|s| fmt_f64(*s)));
    let rows: Vec<Vec<String>> = (0..data.n_subjects())
        .map(|i| {
            let mut r = vec![data.ids[i].clone()];
            r.extend(data.response.row(i).iter().map(|v| fmt_f64(*v)));
            r
        })
        .collect();
    write_csv(&fpath, &header, &rows)?;

    let mut header = vec!["id".to_string()];
    header.extend(data.covariate_names.iter().cloned());
    let rows: Vec<Vec<String>> = (0..data.n_subjects())
        .map(|i| {
            let mut r = vec![data.ids[i].clone()];
            r.extend(data.covariates.row(i).iter().map(|v| fmt_f64(*v)));
            r
        })
        .collect();
    write_csv(&cpath, &header, &rows)?;
    Ok((fpath, cpath))
}

/// Reads a numeric matrix with an id column, as written for scores.
pub fn read_id_matrix(path: &Path) -> Result<(Vec<String>, Vec<String>, DMatrix<f64>)> {
    let (header, rows) = read_rows(path)?;
    let names = header.fields[1..].to_vec();
    let mut ids = Vec::with_capacity(rows.len());
    let mut seen = BTreeSet::new();
    let mut values = Vec::with_capacity(rows.len() * names.len());
    for row in &rows {
        check_width(path, row, names.len() + 1)?;
        if !seen.insert(row.fields[0].clone()) {
            return Err(Error::DuplicateId {
                path: path.to_path_buf(),
                line: row.line,
                id: row.fields[0].clone(),
            });
        }
        ids.push(row.fields[0].clone());
        for (c, v) in row.fields[1..].iter().enumerate() {
            values.push(parse_number(path, row.line, &names[c], v)?);
        }
    }
    let m = DMatrix::from_row_slice(rows.len(), names.len(), &values);
    Ok((ids, names, m))
}

/// Reads a table whose first column is `s` and remaining columns are
/// functions on that grid.
pub fn read_functions(path: &Path) -> Result<(Vec<f64>, Vec<String>, DMatrix<f64>)> {
    let (header, rows) = read_rows(path)?;
    let names = header.fields[1..].to_vec();
    let mut s = Vec::with_capacity(rows.len());
    let mut values = Vec::with_capacity(rows.len() * names.len());
    for row in &rows {
        check_width(path, row, names.len() + 1)?;
        s.push(parse_number(
            path,
            row.line,
            &header.fields[0],
            &row.fields[0],
        )?);
        for (c, v) in row.fields[1..].iter().enumerate() {
            values.push(parse_number(path, row.line, &names[c], v)?);
        }
    }
    let matrix = DMatrix::from_row_slice(rows.len(), names.len(), &values);
    Ok((s, names, matrix))
}
