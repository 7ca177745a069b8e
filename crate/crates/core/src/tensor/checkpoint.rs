//! Flat binary parameter container.
//!
//! ```text
//! magic      8 bytes  "DPTC0001"
//! repeated until EOF:
//!   name_len u64 LE
//!   name     name_len bytes, UTF-8
//!   rank     u64 LE
//!   dims     rank x u64 LE
//!   data     prod(dims) x f64 LE
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DPTC0001";

// Guards against absurd allocations from corrupt headers.
const MAX_NAME_LEN: u64 = 1 << 16;
const MAX_RANK: u64 = 16;

pub fn write_checkpoint<W: Write>(mut out: W, params: &[(String, Tensor)]) -> std::io::Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    for (name, t) in params {
        out.write_all(&(name.len() as u64).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u64).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data().iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()
}

fn read_u64<R: Read>(input: &mut R) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Parses a whole container into `(name, tensor)` pairs in file order.
pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Vec<(String, Tensor)>> {
    let corrupt = |msg: String| Error::Data(format!("corrupt checkpoint: {msg}"));
    let mut magic = [0u8; 8];
    input
        .read_exact(&mut magic)
        .map_err(|_| corrupt("missing magic".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(corrupt(format!("bad magic {magic:?}")));
    }
    let mut out = Vec::new();
    loop {
        let name_len = match read_u64(&mut input) {
            Ok(n) => n,
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(corrupt(e.to_string())),
        };
        if name_len > MAX_NAME_LEN {
            return Err(corrupt(format!("name length {name_len}")));
        }
        let mut name = vec![0u8; name_len as usize];
        input.read_exact(&mut name).map_err(|e| corrupt(e.to_string()))?;
        let name = String::from_utf8(name).map_err(|_| corrupt("name is not UTF-8".into()))?;
        let rank = read_u64(&mut input).map_err(|e| corrupt(e.to_string()))?;
        if rank == 0 || rank > MAX_RANK {
            return Err(corrupt(format!("rank {rank} for {name}")));
        }
        let dims = (0..rank)
            .map(|_| read_u64(&mut input).map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| corrupt(e.to_string()))?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| corrupt(format!("dims {dims:?} overflow")))?;
        let mut bytes = vec![0u8; count * 8];
        input.read_exact(&mut bytes).map_err(|e| corrupt(format!("{name}: {e}")))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push((name, Tensor::new(&dims, data)?));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, params: &[(String, Tensor)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(BufWriter::new(file), params).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = File::open(path).map_err(|e| match e.kind() {
        ErrorKind::NotFound => Error::MissingFile {
            context: "checkpoint not found".into(),
            path: path.to_path_buf(),
        },
        _ => Error::io(path, e),
    })?;
    read_checkpoint(BufReader::new(file))
}
