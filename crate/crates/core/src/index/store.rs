//! `CSIX` index files: magic, version, dimension, count, encoder hash,
//! build time, pid table, little-endian `f32` vectors and a SHA-256 trailer.

use std::path::Path;

use super::{EmbeddingIndex, IndexError, IndexMetadata};
use crate::persist::{atomic_write, seal, unseal, Reader, Writer};

pub const INDEX_MAGIC: &[u8; 4] = b"CSIX";
pub const INDEX_VERSION: u32 = 1;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IndexError + '_ {
    move |source| IndexError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub(crate) fn encode_index(index: &EmbeddingIndex) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(INDEX_MAGIC);
    w.u32(INDEX_VERSION);
    w.u32(index.dim() as u32);
    w.u64(index.len() as u64);
    w.bytes(&index.metadata().encoder_hash);
    w.u64(index.metadata().built_at);
    for pid in index.pids() {
        w.blob(pid.as_bytes());
    }
    for v in index.raw_vectors() {
        w.bytes(&v.to_le_bytes());
    }
    seal(w.buf)
}

pub(crate) fn decode_index(bytes: &[u8]) -> Result<EmbeddingIndex, IndexError> {
    let fmt = IndexError::Format;
    if bytes.len() < 8 || &bytes[..4] != INDEX_MAGIC {
        return Err(fmt("bad magic, not an index file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4"));
    if version != INDEX_VERSION {
        return Err(IndexError::Version {
            found: version,
            expected: INDEX_VERSION,
        });
    }
    let body = unseal(bytes).map_err(fmt)?;
    let mut r = Reader::new(&body[8..]);
    let dim = r.u32("dim").map_err(fmt)? as usize;
    let count = r.len("count").map_err(fmt)?;
    let hash: [u8; 32] = r.take(32, "encoder hash").map_err(fmt)?.try_into().expect("32");
    let built_at = r.u64("timestamp").map_err(fmt)?;
    let mut pids = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        let raw = r.blob("pid").map_err(fmt)?;
        let pid = std::str::from_utf8(raw)
            .map_err(|_| fmt(format!("pid {i} is not UTF-8")))?
            .to_string();
        pids.push(pid);
    }
    let n = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| fmt("vector block size overflows".into()))?;
    let raw = r.take(n, "vectors").map_err(fmt)?;
    r.finish().map_err(fmt)?;
    let vectors = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4")))
        .collect();
    Ok(EmbeddingIndex::from_raw(
        dim,
        pids,
        vectors,
        IndexMetadata {
            encoder_hash: hash,
            built_at,
        },
    ))
}

pub fn save_index(index: &EmbeddingIndex, path: &Path) -> Result<(), IndexError> {
    atomic_write(path, &encode_index(index)).map_err(io_err(path))
}

pub fn load_index(path: &Path) -> Result<EmbeddingIndex, IndexError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_index(&bytes)
}
