//! CSV and JSON persistence. All floats are written with Rust's shortest
//! round-trip formatting, so save/load is bit-exact and reruns are
//! byte-identical.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::basis::Basis;
use crate::error::{Error, Result};
use crate::history_match::DesignPoint;
use crate::kron::FieldVector;
use crate::obs::{ObsEntry, ObservationSet};

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn parse_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Single-writer file write: write to a sibling temp file, then rename.
pub fn write_atomic(path: &Path, content: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(path, e))?;
    }
    let tmp = path.with_extension("tmp~");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        f.write_all(content.as_bytes()).map_err(|e| io_err(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn parse_f64(path: &Path, s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| parse_err(path, format!("bad number `{}`", s.trim())))
}

fn parse_usize(path: &Path, s: &str) -> Result<usize> {
    s.trim()
        .parse::<usize>()
        .map_err(|_| parse_err(path, format!("bad integer `{}`", s.trim())))
}

/// Write a matrix as row-major CSV with a `rows,cols` dimension header.
pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut s = format!("{},{}\n", m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{}", m[(i, j)])).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    write_atomic(path, &s)
}

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let content = read_to_string(path)?;
    let mut lines = content.lines();
    let header = lines.next().ok_or_else(|| parse_err(path, "empty file"))?;
    let dims: Vec<&str> = header.split(',').collect();
    if dims.len() != 2 {
        return Err(parse_err(path, "dimension header must be `rows,cols`"));
    }
    let rows = parse_usize(path, dims[0])?;
    let cols = parse_usize(path, dims[1])?;
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        let line = lines
            .next()
            .ok_or_else(|| parse_err(path, format!("expected {} data rows", rows)))?;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols {
            return Err(parse_err(
                path,
                format!("row {} has {} fields, expected {}", i, fields.len(), cols),
            ));
        }
        for j in 0..cols {
            m[(i, j)] = parse_f64(path, fields[j])?;
        }
    }
    Ok(m)
}

/// Write a field as explicit `(location, time, value)` triples so the layout
/// is unambiguous.
pub fn write_field_csv(path: &Path, f: &FieldVector) -> Result<()> {
    let mut s = String::from("location,time,value\n");
    for loc in 0..f.n_locations() {
        for t in 0..f.n_times() {
            s.push_str(&format!("{},{},{}\n", loc, t, f.get(loc, t)));
        }
    }
    write_atomic(path, &s)
}

/// Read a complete field; every (location, time) cell must appear exactly
/// once, for locations `0..n_locations` and times `0..n_times` inferred from
/// the maxima.
pub fn read_field_csv(path: &Path) -> Result<FieldVector> {
    let content = read_to_string(path)?;
    let mut lines = content.lines();
    let header = lines.next().ok_or_else(|| parse_err(path, "empty file"))?;
    if header.trim() != "location,time,value" {
        return Err(parse_err(path, "expected header `location,time,value`"));
    }
    let mut triples = Vec::new();
    let (mut max_loc, mut max_t) = (0usize, 0usize);
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(parse_err(path, format!("bad triple `{}`", line)));
        }
        let loc = parse_usize(path, fields[0])?;
        let t = parse_usize(path, fields[1])?;
        let v = parse_f64(path, fields[2])?;
        max_loc = max_loc.max(loc);
        max_t = max_t.max(t);
        triples.push((loc, t, v));
    }
    if triples.is_empty() {
        return Err(parse_err(path, "no field entries"));
    }
    let (ls, lt) = (max_loc + 1, max_t + 1);
    if triples.len() != ls * lt {
        return Err(parse_err(
            path,
            format!("expected {} entries for a {}x{} field, got {}", ls * lt, ls, lt, triples.len()),
        ));
    }
    let mut values = DVector::from_element(ls * lt, f64::NAN);
    for (loc, t, v) in triples {
        let idx = loc * lt + t;
        if !values[idx].is_nan() {
            return Err(parse_err(path, format!("duplicate entry at ({}, {})", loc, t)));
        }
        values[idx] = v;
    }
    FieldVector::new(values, ls, lt)
}

/// Observations as `location_id,time_index,value,error_sd`.
pub fn write_obs_csv(path: &Path, obs: &ObservationSet) -> Result<()> {
    let mut s = String::from("location_id,time_index,value,error_sd\n");
    for e in obs.entries() {
        s.push_str(&format!("{},{},{},{}\n", e.location, e.time, e.value, e.error_sd));
    }
    write_atomic(path, &s)
}

pub fn read_obs_csv(path: &Path) -> Result<ObservationSet> {
    let content = read_to_string(path)?;
    let mut lines = content.lines();
    let header = lines.next().ok_or_else(|| parse_err(path, "empty file"))?;
    if header.trim() != "location_id,time_index,value,error_sd" {
        return Err(parse_err(
            path,
            "expected header `location_id,time_index,value,error_sd`",
        ));
    }
    let mut entries = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(parse_err(path, format!("bad observation `{}`", line)));
        }
        entries.push(ObsEntry {
            location: parse_usize(path, fields[0])?,
            time: parse_usize(path, fields[1])?,
            value: parse_f64(path, fields[2])?,
            error_sd: parse_f64(path, fields[3])?,
        });
    }
    ObservationSet::new(entries)
}

#[derive(Debug, Serialize, Deserialize)]
struct BasisSidecar {
    singular_values: Vec<f64>,
    rotation: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
    weight_ref: String,
    source_hash: u64,
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let nr = rows.len();
    let nc = rows.first().map(|r| r.len()).unwrap_or(0);
    DMatrix::from_fn(nr, nc, |i, j| rows[i][j])
}

/// Export a basis: CSV matrix of vectors plus a JSON sidecar carrying the
/// singular values, rotation, weight reference, and provenance hash.
pub fn write_basis(csv_path: &Path, json_path: &Path, basis: &Basis) -> Result<()> {
    write_matrix_csv(csv_path, &basis.vectors)?;
    let sidecar = BasisSidecar {
        singular_values: basis.singular_values.iter().copied().collect(),
        rotation: matrix_to_rows(&basis.rotation),
        u: matrix_to_rows(&basis.u),
        weight_ref: basis.weight_ref.clone(),
        source_hash: basis.source_hash,
    };
    write_json(json_path, &sidecar)
}

pub fn read_basis(csv_path: &Path, json_path: &Path) -> Result<Basis> {
    let vectors = read_matrix_csv(csv_path)?;
    let sidecar: BasisSidecar = read_json(json_path)?;
    if sidecar.rotation.len() != sidecar.singular_values.len() {
        return Err(parse_err(
            json_path,
            "rotation rows must match the number of singular values",
        ));
    }
    Ok(Basis {
        vectors,
        singular_values: DVector::from_vec(sidecar.singular_values),
        rotation: rows_to_matrix(&sidecar.rotation),
        u: rows_to_matrix(&sidecar.u),
        weight_ref: sidecar.weight_ref,
        source_hash: sidecar.source_hash,
    })
}

/// Design CSV: `index,x_0..,c_0..` with the x/c split in the header names.
pub fn write_design_csv(path: &Path, design: &[DesignPoint]) -> Result<()> {
    let (d_x, d_c) = design
        .first()
        .map(|p| (p.x.len(), p.c.len()))
        .unwrap_or((0, 0));
    let mut cols = vec!["index".to_string()];
    cols.extend((0..d_x).map(|j| format!("x_{}", j)));
    cols.extend((0..d_c).map(|j| format!("c_{}", j)));
    let mut s = cols.join(",");
    s.push('\n');
    for (i, p) in design.iter().enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(p.x.iter().map(|v| format!("{}", v)));
        row.extend(p.c.iter().map(|v| format!("{}", v)));
        s.push_str(&row.join(","));
        s.push('\n');
    }
    write_atomic(path, &s)
}

pub fn read_design_csv(path: &Path) -> Result<Vec<DesignPoint>> {
    let content = read_to_string(path)?;
    let mut lines = content.lines();
    let header = lines.next().ok_or_else(|| parse_err(path, "empty file"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"index") {
        return Err(parse_err(path, "expected `index` as first design column"));
    }
    let d_x = cols.iter().filter(|c| c.starts_with("x_")).count();
    let d_c = cols.iter().filter(|c| c.starts_with("c_")).count();
    let mut out = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 1 + d_x + d_c {
            return Err(parse_err(path, format!("bad design row `{}`", line)));
        }
        let x = fields[1..1 + d_x]
            .iter()
            .map(|v| parse_f64(path, v))
            .collect::<Result<Vec<_>>>()?;
        let c = fields[1 + d_x..]
            .iter()
            .map(|v| parse_f64(path, v))
            .collect::<Result<Vec<_>>>()?;
        out.push(DesignPoint { x, c });
    }
    Ok(out)
}

/// Serialize any serde value as pretty JSON.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value)?;
    write_atomic(path, &(s + "\n"))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = read_to_string(path)?;
    serde_json::from_str(&s).map_err(Error::Json)
}
