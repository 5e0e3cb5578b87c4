//! Binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TPCKPT1"            7-byte magic
//! u32                  format version (1)
//! u32                  entry count
//! per entry:
//!   u32 + bytes        UTF-8 name
//!   u32                rank
//!   u64 * rank         extents
//!   f64 * numel        values
//! ```

use std::io::{self, Read, Write};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"TPCKPT1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn write_checkpoint<W: Write>(mut out: W, entries: &[CheckpointEntry]) -> io::Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(entries.len() as u32).to_le_bytes())?;
    for e in entries {
        if e.shape.iter().product::<usize>() != e.values.len() {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, format!("entry `{}`: shape/value mismatch", e.name)));
        }
        out.write_all(&(e.name.len() as u32).to_le_bytes())?;
        out.write_all(e.name.as_bytes())?;
        out.write_all(&(e.shape.len() as u32).to_le_bytes())?;
        for &d in &e.shape {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in &e.values {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn bad(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut input: R) -> io::Result<Vec<CheckpointEntry>> {
    let mut magic = [0u8; 7];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("not a TPCKPT1 checkpoint"));
    }
    let version = read_u32(&mut input)?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut input)?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(&mut input)? as usize;
        let mut name = vec![0u8; len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
        let rank = read_u32(&mut input)? as usize;
        let shape = (0..rank).map(|_| read_u64(&mut input).map(|d| d as usize)).collect::<io::Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 8];
        input.read_exact(&mut raw)?;
        let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        entries.push(CheckpointEntry { name, shape, values });
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_magic() {
        let entries = vec![
            CheckpointEntry { name: "conv.w".into(), shape: vec![2, 1, 1, 1], values: vec![1.5, -0.25] },
            CheckpointEntry { name: "fc.b".into(), shape: vec![3], values: vec![f64::MIN_POSITIVE, 0.0, -7.0] },
        ];
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &entries).unwrap();
        assert_eq!(&buf[..7], b"TPCKPT1");
        assert_eq!(read_checkpoint(&buf[..]).unwrap(), entries);
    }

    #[test]
    fn rejects_foreign_files() {
        assert!(read_checkpoint(&b"PNG\x00\x00\x00\x00\x00\x00\x00\x00"[..]).is_err());
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[]).unwrap();
        buf[7] = 9;
        assert!(read_checkpoint(&buf[..]).is_err());
    }
}
