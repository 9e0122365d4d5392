//! CSV and tensor-file plumbing. Every float is written with 17 significant
//! digits so that outputs round-trip exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;

use orthokit::{DenseTensor, Matrix, Vector};

pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.16e}")
    }
}

/// A CSV file held as named string columns.
pub struct Table {
    pub source: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Table> {
        let source = path.display().to_string();
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .with_context(|| format!("cannot open {source}"))?;
        let headers: Vec<String> = reader
            .headers()
            .with_context(|| format!("cannot read header of {source}"))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut seen = BTreeSet::new();
        for h in &headers {
            if !seen.insert(h) {
                bail!("duplicate column '{h}' in {source}");
            }
        }
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.with_context(|| format!("{source}: malformed record {}", i + 1))?;
            rows.push(rec.iter().map(str::to_string).collect());
        }
        if rows.is_empty() {
            bail!("{source} has no data rows");
        }
        Ok(Table { source, headers, rows })
    }

    pub fn index(&self, name: &str) -> Result<usize> {
        self.headers.iter().position(|h| h == name).ok_or_else(|| {
            anyhow!(
                "column '{name}' not found in {} (available: {})",
                self.source,
                self.headers.join(", ")
            )
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    fn cells(&self, name: &str) -> Result<Vec<&str>> {
        let j = self.index(name)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let cell = r[j].as_str();
                if cell.is_empty() {
                    bail!("column '{name}' has an empty cell in data row {}", i + 1);
                }
                Ok(cell)
            })
            .collect()
    }

    pub fn numeric(&self, name: &str) -> Result<Vector> {
        let cells = self.cells(name)?;
        let mut out = Vector::zeros(cells.len());
        for (i, cell) in cells.iter().enumerate() {
            out[i] = cell.parse::<f64>().map_err(|_| {
                anyhow!("column '{name}' row {}: '{cell}' is not a number", i + 1)
            })?;
        }
        Ok(out)
    }

    pub fn numeric_matrix(&self, names: &[String]) -> Result<Matrix> {
        let mut m = Matrix::zeros(self.len(), names.len());
        for (j, name) in names.iter().enumerate() {
            m.set_column(j, &self.numeric(name)?);
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CategoricalEncoding {
    pub reference: String,
    pub levels: Vec<String>,
}

/// Protected design after encoding: numeric columns pass through, columns
/// with any non-numeric cell become indicators of every level except the
/// lexicographically first.
pub struct ProtectedDesign {
    pub x: Matrix,
    pub names: Vec<String>,
    pub categorical: BTreeMap<String, CategoricalEncoding>,
}

pub fn encode_protected(table: &Table, columns: &[String]) -> Result<ProtectedDesign> {
    if columns.is_empty() {
        bail!("no protected columns given");
    }
    let mut cols: Vec<Vector> = Vec::new();
    let mut names = Vec::new();
    let mut categorical = BTreeMap::new();
    for name in columns {
        let cells = table.cells(name)?;
        if cells.iter().all(|c| c.parse::<f64>().is_ok()) {
            cols.push(table.numeric(name)?);
            names.push(name.clone());
            continue;
        }
        let levels: Vec<String> = cells
            .iter()
            .map(|c| c.to_string())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if levels.len() < 2 {
            bail!("categorical column '{name}' has a single level '{}'", levels[0]);
        }
        for level in &levels[1..] {
            cols.push(Vector::from_iterator(
                cells.len(),
                cells.iter().map(|c| if c == level { 1.0 } else { 0.0 }),
            ));
            names.push(format!("{name}={level}"));
        }
        categorical.insert(
            name.clone(),
            CategoricalEncoding {
                reference: levels[0].clone(),
                levels,
            },
        );
    }
    let x = Matrix::from_columns(&cols);
    Ok(ProtectedDesign { x, names, categorical })
}

pub fn write_csv(path: &Path, headers: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    w.write_record(headers)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

/// Reads a tensor file: a `#dims n d1 ... dR` line, then `n` comma-separated
/// rows of the row-major mode-1 matricization.
pub fn read_tensor(path: &Path) -> Result<DenseTensor> {
    let source = path.display().to_string();
    let text = fs::read_to_string(path).with_context(|| format!("cannot open {source}"))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let head = lines.next().ok_or_else(|| anyhow!("{source} is empty"))?;
    let dims_text = head
        .trim()
        .strip_prefix("#dims")
        .ok_or_else(|| anyhow!("{source}: first line must start with '#dims'"))?;
    let dims: Vec<usize> = dims_text
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|_| anyhow!("{source}: bad dimension '{t}'")))
        .collect::<Result<_>>()?;
    if dims.len() < 2 {
        bail!("{source}: need at least two dimensions, found {}", dims.len());
    }
    let width: usize = dims[1..].iter().product();
    let mut data = Vec::with_capacity(dims[0] * width);
    let mut count = 0;
    for (i, line) in lines.enumerate() {
        let row: Vec<f64> = line
            .split(',')
            .map(|t| {
                let t = t.trim();
                t.parse::<f64>().map_err(|_| anyhow!("{source} row {}: '{t}' is not a number", i + 1))
            })
            .collect::<Result<_>>()?;
        if row.len() != width {
            bail!("{source} row {}: expected {width} values, found {}", i + 1, row.len());
        }
        data.extend(row);
        count += 1;
    }
    if count != dims[0] {
        bail!("{source}: header declares {} rows, found {count}", dims[0]);
    }
    Ok(DenseTensor::new(dims, data)?)
}

pub fn write_tensor(path: &Path, t: &DenseTensor) -> Result<()> {
    let mut out = String::from("#dims");
    for d in t.dims() {
        out.push_str(&format!(" {d}"));
    }
    out.push('\n');
    let m = t.matricize();
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("cannot write {}", path.display()))
}
