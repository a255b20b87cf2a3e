//! On-disk dataset container and CSV ingestion.
//!
//! Layout: a fixed 16-byte header — magic `STRP`, format version (u16 LE),
//! feature count (u16 LE), node count (u32 LE), total steps (u32 LE) —
//! followed by the raw values as little-endian f32 in [node, time, feature]
//! order. Calendar metadata lives in a human-readable `<path>.meta` sidecar
//! so the container stays trivially parseable from any language.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::SeriesTensor;
use crate::error::{data_err, Result};

const MAGIC: &[u8; 4] = b"STRP";
const VERSION: u16 = 1;

pub fn save_container(s: &SeriesTensor, path: &Path) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(s.feature_count as u16).to_le_bytes())?;
    w.write_all(&(s.node_count as u32).to_le_bytes())?;
    w.write_all(&(s.t_total as u32).to_le_bytes())?;
    for v in &s.values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;

    let meta = format!(
        "steps_per_day = {}\nstart_tod = {}\nstart_dow = {}\ninterval_seconds = {}\n",
        s.steps_per_day, s.start_tod, s.start_dow, s.interval_seconds
    );
    fs::write(sidecar_path(path), meta)?;
    Ok(())
}

pub fn load_container(path: &Path) -> Result<SeriesTensor> {
    let file = fs::File::open(path)
        .map_err(|e| data_err!("cannot open container {}: {e}", path.display()))?;
    let mut r = BufReader::new(file);
    let mut header = [0u8; 16];
    r.read_exact(&mut header)
        .map_err(|_| data_err!("corrupt container: truncated header"))?;
    if &header[0..4] != MAGIC {
        return Err(data_err!("corrupt container: bad magic"));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != VERSION {
        return Err(data_err!("unsupported container version {version}"));
    }
    let feature_count = u16::from_le_bytes([header[6], header[7]]) as usize;
    let node_count = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes")) as usize;
    let t_total = u32::from_le_bytes(header[12..16].try_into().expect("4 bytes")) as usize;
    let expected = node_count * t_total * feature_count;

    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    if raw.len() != expected * 4 {
        return Err(data_err!(
            "corrupt container: {} payload bytes, expected {}",
            raw.len(),
            expected * 4
        ));
    }
    let values: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();

    let meta = parse_sidecar(&sidecar_path(path))?;
    SeriesTensor::new(
        values,
        node_count,
        t_total,
        feature_count,
        meta.steps_per_day,
        meta.start_tod,
        meta.start_dow,
    )
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".meta");
    os.into()
}

struct Sidecar {
    steps_per_day: usize,
    start_tod: usize,
    start_dow: usize,
}

fn parse_sidecar(path: &Path) -> Result<Sidecar> {
    let text = fs::read_to_string(path)
        .map_err(|e| data_err!("missing sidecar {}: {e}", path.display()))?;
    let mut steps_per_day = None;
    let mut start_tod = None;
    let mut start_dow = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| data_err!("sidecar line '{line}' is not key = value"))?;
        let value: usize = value
            .trim()
            .parse()
            .map_err(|_| data_err!("sidecar value '{}' is not an integer", value.trim()))?;
        match key.trim() {
            "steps_per_day" => steps_per_day = Some(value),
            "start_tod" => start_tod = Some(value),
            "start_dow" => start_dow = Some(value),
            "interval_seconds" => {} // derived; accepted for readability
            other => return Err(data_err!("unknown sidecar key '{other}'")),
        }
    }
    Ok(Sidecar {
        steps_per_day: steps_per_day.ok_or_else(|| data_err!("sidecar missing steps_per_day"))?,
        start_tod: start_tod.ok_or_else(|| data_err!("sidecar missing start_tod"))?,
        start_dow: start_dow.ok_or_else(|| data_err!("sidecar missing start_dow"))?,
    })
}

/// Import a plain numeric CSV: rows are time steps, columns are nodes, one
/// feature per node.
pub fn import_csv(
    path: &Path,
    steps_per_day: usize,
    start_tod: usize,
    start_dow: usize,
) -> Result<SeriesTensor> {
    let text = fs::read_to_string(path)
        .map_err(|e| data_err!("cannot read csv {}: {e}", path.display()))?;
    let mut rows: Vec<Vec<f32>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: Vec<f32> = line
            .split(',')
            .map(|cell| {
                cell.trim()
                    .parse::<f32>()
                    .map_err(|_| data_err!("csv line {}: '{cell}' is not a number", lineno + 1))
            })
            .collect::<Result<_>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(data_err!(
                    "csv line {}: {} columns, expected {}",
                    lineno + 1,
                    row.len(),
                    first.len()
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(data_err!("csv {} has no rows", path.display()));
    }
    let t_total = rows.len();
    let node_count = rows[0].len();
    // Transpose time-major csv into node-major storage.
    let mut values = vec![0.0f32; node_count * t_total];
    for (t, row) in rows.iter().enumerate() {
        for (n, &v) in row.iter().enumerate() {
            values[n * t_total + t] = v;
        }
    }
    SeriesTensor::new(values, node_count, t_total, 1, steps_per_day, start_tod, start_dow)
}
