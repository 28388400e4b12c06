//! Binary embedding-table files.
//!
//! ```text
//! header   "EMBT" | version u32 | modality u8 | rows u64 | dim u32   (little endian)
//! payload  rows * dim f32, row-major
//! footer   rows * u32 labels
//! ```
//!
//! An optional `<name>.meta.json` sidecar carries `class_names` and whatever
//! manifest fields the producer recorded.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EmbeddingTable, Modality};
use crate::error::{Error, Result};
use crate::linalg::{norm, Matrix};

pub const MAGIC: &[u8; 4] = b"EMBT";
pub const FORMAT_VERSION: u32 = 1;

/// Rows read from disk may deviate from unit norm by this much.
const READ_NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Default, Serialize, Deserialize)]
struct Sidecar {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_names: Option<Vec<String>>,
    #[serde(flatten)]
    extra: serde_json::Map<String, serde_json::Value>,
}

/// `dir/name.embt` -> `dir/name.meta.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

pub fn write_table(table: &EmbeddingTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(21 + table.len() * (table.dim() * 4 + 4));
    encode(table, &mut buf).expect("writing to a Vec cannot fail");
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;

    if let Some(names) = table.class_names() {
        let meta_path = sidecar_path(path);
        // Keep producer fields (model id, template, ...) already on disk.
        let mut sidecar: Sidecar = match fs::read(&meta_path) {
            Ok(bytes) => serde_json::from_slice(&bytes)?,
            Err(_) => Sidecar::default(),
        };
        sidecar.class_names = Some(names.to_vec());
        let json = serde_json::to_vec_pretty(&sidecar)?;
        fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;
    }
    Ok(())
}

pub fn read_table(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut table = decode(&bytes)?;

    let meta_path = sidecar_path(path);
    if meta_path.exists() {
        let raw = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let sidecar: Sidecar = serde_json::from_slice(&raw)?;
        if let Some(names) = sidecar.class_names {
            table = table.with_class_names(names)?;
        }
    }
    Ok(table)
}

fn encode(table: &EmbeddingTable, out: &mut impl Write) -> io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&[table.modality().tag()])?;
    out.write_all(&(table.len() as u64).to_le_bytes())?;
    out.write_all(&(table.dim() as u32).to_le_bytes())?;
    for &v in table.vectors().data() {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    for &l in table.labels() {
        out.write_all(&(l as u32).to_le_bytes())?;
    }
    Ok(())
}

fn decode(bytes: &[u8]) -> Result<EmbeddingTable> {
    let mut cur = bytes;
    let mut magic = [0u8; 4];
    read_exact(&mut cur, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::HeaderMismatch(format!("bad magic {magic:?}")));
    }
    let version = u32::from_le_bytes(read_array(&mut cur)?);
    if version != FORMAT_VERSION {
        return Err(Error::HeaderMismatch(format!("unsupported version {version}")));
    }
    let [tag] = read_array::<1>(&mut cur)?;
    let modality =
        Modality::from_tag(tag).ok_or_else(|| Error::HeaderMismatch(format!("unknown modality tag {tag}")))?;
    let rows = u64::from_le_bytes(read_array(&mut cur)?) as usize;
    let dim = u32::from_le_bytes(read_array(&mut cur)?) as usize;
    if dim == 0 {
        return Err(Error::DimensionMismatch("zero embedding dimension".into()));
    }

    let count = rows
        .checked_mul(dim)
        .ok_or_else(|| Error::DimensionMismatch("row count overflows".into()))?;
    let payload_len = count
        .checked_mul(4)
        .and_then(|p| p.checked_add(rows * 4))
        .ok_or_else(|| Error::DimensionMismatch("row count overflows".into()))?;
    if cur.len() < payload_len {
        return Err(Error::UnexpectedEof);
    }
    if cur.len() > payload_len {
        return Err(Error::DimensionMismatch(format!(
            "{} trailing bytes after {rows}x{dim} table",
            cur.len() - payload_len
        )));
    }

    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        let v = f32::from_le_bytes(read_array(&mut cur)?);
        if !v.is_finite() {
            return Err(Error::NonFinite("embedding table payload"));
        }
        data.push(f64::from(v));
    }
    let mut labels = Vec::with_capacity(rows);
    for _ in 0..rows {
        labels.push(u32::from_le_bytes(read_array(&mut cur)?) as usize);
    }

    let vectors = Matrix::new(rows, dim, data)?;
    for r in 0..rows {
        let n = norm(vectors.row(r));
        if (n - 1.0).abs() > READ_NORM_TOLERANCE {
            return Err(Error::NonUnitRow { row: r, norm: n });
        }
    }
    EmbeddingTable::with_tolerance(vectors, labels, modality, READ_NORM_TOLERANCE)
}

fn read_exact(cur: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    cur.read_exact(buf).map_err(|_| Error::UnexpectedEof)
}

fn read_array<const N: usize>(cur: &mut &[u8]) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(cur, &mut buf)?;
    Ok(buf)
}
