//! Binary container for named f32 tensors plus a JSON metadata blob.
//!
//! Layout: magic (4 bytes), version u16 LE, reserved u16, meta length u32 LE,
//! meta bytes (UTF-8 JSON), entry count u32 LE, then per entry: name length
//! u16 LE, name bytes, rank u8, extents (u32 LE each), little-endian f32
//! payload. Used for checkpoints and representation stores.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{data_err, Result};

pub const FORMAT_VERSION: u16 = 1;

pub struct NamedTensors {
    pub version: u16,
    pub meta_json: String,
    pub entries: Vec<(String, Vec<usize>, Vec<f32>)>,
}

pub fn write_named(
    path: &Path,
    magic: &[u8; 4],
    meta_json: &str,
    entries: &[(String, Vec<usize>, Vec<f32>)],
) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(magic)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&0u16.to_le_bytes())?;
    w.write_all(&(meta_json.len() as u32).to_le_bytes())?;
    w.write_all(meta_json.as_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, shape, data) in entries {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(data_err!("tensor '{name}' shape/data mismatch"));
        }
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[shape.len() as u8])?;
        for &e in shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_named(path: &Path, magic: &[u8; 4]) -> Result<NamedTensors> {
    let file = fs::File::open(path)
        .map_err(|e| data_err!("cannot open {}: {e}", path.display()))?;
    let mut r = BufReader::new(file);
    let corrupt = |what: &str| data_err!("corrupt file {}: {what}", path.display());

    let mut head = [0u8; 4];
    r.read_exact(&mut head).map_err(|_| corrupt("truncated magic"))?;
    if &head != magic {
        return Err(corrupt("bad magic"));
    }
    let version = read_u16(&mut r).map_err(|_| corrupt("truncated version"))?;
    if version != FORMAT_VERSION {
        return Err(data_err!(
            "unsupported format version {version} in {}",
            path.display()
        ));
    }
    let _reserved = read_u16(&mut r).map_err(|_| corrupt("truncated header"))?;
    let meta_len = read_u32(&mut r).map_err(|_| corrupt("truncated meta length"))? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta).map_err(|_| corrupt("truncated metadata"))?;
    let meta_json =
        String::from_utf8(meta).map_err(|_| corrupt("metadata is not valid utf-8"))?;

    let count = read_u32(&mut r).map_err(|_| corrupt("truncated entry count"))? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r).map_err(|_| corrupt("truncated name length"))? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|_| corrupt("truncated name"))?;
        let name = String::from_utf8(name).map_err(|_| corrupt("name is not valid utf-8"))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank).map_err(|_| corrupt("truncated rank"))?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut r).map_err(|_| corrupt("truncated shape"))? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw).map_err(|_| corrupt("truncated payload"))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        entries.push((name, shape, data));
    }
    let mut trailing = Vec::new();
    r.read_to_end(&mut trailing)?;
    if !trailing.is_empty() {
        return Err(corrupt("trailing bytes after last tensor"));
    }
    Ok(NamedTensors {
        version,
        meta_json,
        entries,
    })
}

fn read_u16(r: &mut impl Read) -> std::io::Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// FNV-1a over bytes; used to fingerprint configurations.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
