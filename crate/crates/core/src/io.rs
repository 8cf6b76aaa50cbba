//! File formats: grid and function CSV, Gram CSV, sample CSV and binary,
//! fit output, harness rows, and the run manifest.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_len, Error, Result};
use crate::experiments::Row;
use crate::grid::{Grid, GridFunction};
use crate::sampler::RegressionSample;
use crate::solver::LassoFit;

const MAGIC: &[u8; 5] = b"FLXS1";

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// `index,coord_0..coord_{dim-1},weight[,value]`.
pub fn write_grid_csv<W: Write>(out: W, grid: &Grid, values: Option<&GridFunction>) -> Result<()> {
    if let Some(v) = values {
        check_len(grid.len(), v.len())?;
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["index".to_string()];
    header.extend((0..grid.dim()).map(|k| format!("coord_{k}")));
    header.push("weight".into());
    if values.is_some() {
        header.push("value".into());
    }
    w.write_record(&header)?;
    for i in 0..grid.len() {
        let mut rec = vec![i.to_string()];
        rec.extend(grid.point(i).iter().map(|c| c.to_string()));
        rec.push(grid.weights()[i].to_string());
        if let Some(v) = values {
            rec.push(v.values()[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_grid_csv<R: Read>(input: R) -> Result<(Grid, Option<GridFunction>)> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    let dim = header.iter().filter(|h| h.starts_with("coord_")).count();
    let has_value = header.iter().any(|h| h == "value");
    if dim == 0 || header.get(0) != Some("index") || header.get(dim + 1) != Some("weight") {
        return Err(format_err("grid CSV header must be index,coord_*,weight[,value]"));
    }
    let (mut coords, mut weights, mut values) = (Vec::new(), Vec::new(), Vec::new());
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let num = |k: usize| -> Result<f64> {
            rec.get(k)
                .ok_or_else(|| format_err(format!("row {row}: missing column {k}")))?
                .trim()
                .parse::<f64>()
                .map_err(|e| format_err(format!("row {row}: {e}")))
        };
        if num(0)? as usize != row {
            return Err(format_err(format!("row {row}: index out of order")));
        }
        for k in 0..dim {
            coords.push(num(1 + k)?);
        }
        weights.push(num(1 + dim)?);
        if has_value {
            values.push(num(2 + dim)?);
        }
    }
    let grid = Grid::new(coords, weights, dim)?;
    let values = if has_value { Some(GridFunction::new(values)?) } else { None };
    Ok((grid, values))
}

/// Dense matrix, one row per grid point, no header.
pub fn write_matrix_csv<W: Write>(out: W, k: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for row in k.row_iter() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv<R: Read>(input: R) -> Result<DMatrix<f64>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        if *cols.get_or_insert(rec.len()) != rec.len() {
            return Err(format_err("ragged matrix CSV"));
        }
        for v in rec.iter() {
            data.push(v.trim().parse::<f64>().map_err(|e| format_err(e.to_string()))?);
        }
        rows += 1;
    }
    Ok(DMatrix::from_row_slice(rows, cols.unwrap_or(0), &data))
}

/// Long-format sample: `replicate,i,t_index,x` and `replicate,i,y`.
pub fn write_sample_csv<W: Write, V: Write>(x_out: W, y_out: V, sample: &RegressionSample, replicate: usize) -> Result<()> {
    let mut wx = csv::Writer::from_writer(x_out);
    wx.write_record(["replicate", "i", "t_index", "x"])?;
    for i in 0..sample.n() {
        for t in 0..sample.x.ncols() {
            wx.write_record([replicate.to_string(), i.to_string(), t.to_string(), sample.x[(i, t)].to_string()])?;
        }
    }
    wx.flush()?;
    let mut wy = csv::Writer::from_writer(y_out);
    wy.write_record(["replicate", "i", "y"])?;
    for i in 0..sample.n() {
        wy.write_record([replicate.to_string(), i.to_string(), sample.y[i].to_string()])?;
    }
    wy.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct XRecord {
    replicate: usize,
    i: usize,
    t_index: usize,
    x: f64,
}

#[derive(Deserialize)]
struct YRecord {
    replicate: usize,
    i: usize,
    y: f64,
}

/// Reads the rows of one replicate from the long-format CSV pair.
pub fn read_sample_csv<R: Read, S: Read>(x_in: R, y_in: S, replicate: usize) -> Result<RegressionSample> {
    let mut xs = Vec::new();
    for rec in csv::Reader::from_reader(x_in).deserialize::<XRecord>() {
        let rec = rec?;
        if rec.replicate == replicate {
            xs.push(rec);
        }
    }
    let mut ys = Vec::new();
    for rec in csv::Reader::from_reader(y_in).deserialize::<YRecord>() {
        let rec = rec?;
        if rec.replicate == replicate {
            ys.push(rec);
        }
    }
    let n = ys.len();
    if n == 0 {
        return Err(format_err(format!("no rows for replicate {replicate}")));
    }
    let big_n = xs.iter().map(|r| r.t_index + 1).max().unwrap_or(0);
    if xs.len() != n * big_n {
        return Err(format_err("design rows do not form a full n x N table"));
    }
    let mut x = DMatrix::from_element(n, big_n, f64::NAN);
    for r in xs {
        if r.i >= n {
            return Err(format_err(format!("design row {} without a response", r.i)));
        }
        x[(r.i, r.t_index)] = r.x;
    }
    let mut y = DVector::from_element(n, f64::NAN);
    for r in ys {
        if r.i >= n {
            return Err(format_err("response index out of range"));
        }
        y[r.i] = r.y;
    }
    RegressionSample::new(x, y)
}

/// `FLXS1`, then `n` and `N` as little-endian u64, row-major `X`, then `Y`.
pub fn write_sample_bin<W: Write>(mut out: W, sample: &RegressionSample) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&(sample.n() as u64).to_le_bytes())?;
    out.write_all(&(sample.x.ncols() as u64).to_le_bytes())?;
    for row in sample.x.row_iter() {
        for v in row.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    for v in sample.y.iter() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_sample_bin<R: Read>(mut input: R) -> Result<RegressionSample> {
    let mut magic = [0u8; 5];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(format_err("not an FLXS1 sample file"));
    }
    let mut word = [0u8; 8];
    let mut next_u64 = |input: &mut R| -> Result<u64> {
        input.read_exact(&mut word)?;
        Ok(u64::from_le_bytes(word))
    };
    let n = next_u64(&mut input)? as usize;
    let big_n = next_u64(&mut input)? as usize;
    let total = n
        .checked_mul(big_n)
        .and_then(|v| v.checked_add(n))
        .ok_or_else(|| format_err("sample dimensions overflow"))?;
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() != total * 8 {
        return Err(format_err(format!("expected {} payload bytes, found {}", total * 8, bytes.len())));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let x = DMatrix::from_row_slice(n, big_n, &vals[..n * big_n]);
    let y = DVector::from_column_slice(&vals[n * big_n..]);
    RegressionSample::new(x, y)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FitSummary {
    pub epsilon: f64,
    pub intercept: f64,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl FitSummary {
    pub fn of(fit: &LassoFit, epsilon: f64) -> Self {
        FitSummary {
            epsilon,
            intercept: fit.intercept,
            objective: fit.objective,
            kkt_residual: fit.kkt_residual,
            iterations: fit.iterations,
            converged: fit.converged,
        }
    }
}

/// `t_index,lambda_hat` rows.
pub fn write_fit_csv<W: Write>(out: W, fit: &LassoFit) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t_index", "lambda_hat"])?;
    for (i, v) in fit.slope.values().iter().enumerate() {
        w.write_record([i.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_fit_csv<R: Read>(input: R) -> Result<GridFunction> {
    let mut out = Vec::new();
    for (row, rec) in csv::Reader::from_reader(input).deserialize::<(usize, f64)>().enumerate() {
        let (i, v) = rec?;
        if i != row {
            return Err(format_err(format!("row {row}: t_index out of order")));
        }
        out.push(v);
    }
    GridFunction::new(out)
}

/// `scenario,n,epsilon,replicate,risk,l1,leakage,iters,converged`.
pub fn write_rows_csv<W: Write>(out: W, rows: &[Row]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    let mut f = BufReader::new(File::open(path)?);
    let mut buf = [0u8; 1 << 16];
    loop {
        let k = f.read(&mut buf)?;
        if k == 0 {
            break;
        }
        hasher.update(&buf[..k]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OutputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub started: DateTime<Utc>,
    pub finished: DateTime<Utc>,
    pub outputs: Vec<OutputDigest>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        let now = Utc::now();
        RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config,
            seed,
            started: now,
            finished: now,
            outputs: Vec::new(),
        }
    }

    pub fn record(&mut self, path: &Path) -> Result<()> {
        let sha256 = sha256_file(path)?;
        self.outputs.push(OutputDigest {
            path: path.to_path_buf(),
            sha256,
        });
        Ok(())
    }

    /// Digests that no longer match the files on disk.
    pub fn stale_outputs(&self) -> Result<Vec<PathBuf>> {
        let mut stale = Vec::new();
        for o in &self.outputs {
            if sha256_file(&o.path)? != o.sha256 {
                stale.push(o.path.clone());
            }
        }
        Ok(stale)
    }

    pub fn write(&mut self, path: &Path) -> Result<()> {
        self.finished = Utc::now();
        let mut w = create(path)?;
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

/// Manifest path next to an output: `<out>.manifest.json`, or
/// `<dir>/manifest.json` for a directory.
pub fn manifest_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        out.join("manifest.json")
    } else {
        let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".manifest.json");
        out.with_file_name(name)
    }
}

pub fn write_to_path(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush()?;
    Ok(())
}
