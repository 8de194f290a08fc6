//! CPF1 parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"CPF1"
//! repeat per tensor until EOF:
//!   u32          name byte length
//!   [u8]         name (UTF-8)
//!   u32          rank
//!   [u32; rank]  dims
//!   [f32; prod]  row-major values, little-endian
//! ```
//!
//! Write → read → write must be byte-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

const MAGIC: &[u8; 4] = b"CPF1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes: expected CPF1, found {0:?}")]
    BadMagic([u8; 4]),
    #[error("truncated checkpoint while reading {0}")]
    Truncated(&'static str),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("tensor {name}: dims {dims:?} do not match {len} values")]
    DimMismatch { name: String, dims: Vec<usize>, len: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Self {
        TensorRecord { name: name.into(), dims, data }
    }
}

pub fn save_checkpoint(path: &Path, records: &[TensorRecord]) -> Result<(), CheckpointError> {
    for r in records {
        let expect: usize = r.dims.iter().product();
        if expect != r.data.len() {
            return Err(CheckpointError::DimMismatch {
                name: r.name.clone(),
                dims: r.dims.clone(),
                len: r.data.len(),
            });
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    for r in records {
        w.write_all(&(r.name.len() as u32).to_le_bytes())?;
        w.write_all(r.name.as_bytes())?;
        w.write_all(&(r.dims.len() as u32).to_le_bytes())?;
        for &d in &r.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &r.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<TensorRecord>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let mut records = Vec::new();
    loop {
        let mut lenbuf = [0u8; 4];
        match r.read_exact(&mut lenbuf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(lenbuf) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|_| CheckpointError::Truncated("name"))?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::BadName)?;

        r.read_exact(&mut lenbuf).map_err(|_| CheckpointError::Truncated("rank"))?;
        let rank = u32::from_le_bytes(lenbuf) as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut lenbuf).map_err(|_| CheckpointError::Truncated("dims"))?;
            dims.push(u32::from_le_bytes(lenbuf) as usize);
        }
        let count: usize = dims.iter().product();
        let mut data = vec![0f32; count];
        let mut buf = [0u8; 4];
        for v in data.iter_mut() {
            r.read_exact(&mut buf).map_err(|_| CheckpointError::Truncated("values"))?;
            *v = f32::from_le_bytes(buf);
        }
        records.push(TensorRecord { name, dims, data });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record_strategy() -> impl Strategy<Value = TensorRecord> {
        (
            "[a-z][a-z0-9_.]{0,20}",
            prop::collection::vec(1usize..5, 1..3),
        )
            .prop_flat_map(|(name, dims)| {
                let count: usize = dims.iter().product();
                prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), count)
                    .prop_map(move |data| TensorRecord::new(name.clone(), dims.clone(), data))
            })
    }

    proptest! {
        #[test]
        fn write_read_write_is_byte_identical(records in prop::collection::vec(record_strategy(), 0..6)) {
            let dir = tempfile::tempdir().unwrap();
            let p1 = dir.path().join("a.cpf");
            let p2 = dir.path().join("b.cpf");
            save_checkpoint(&p1, &records).unwrap();
            let loaded = load_checkpoint(&p1).unwrap();
            save_checkpoint(&p2, &loaded).unwrap();
            let b1 = std::fs::read(&p1).unwrap();
            let b2 = std::fs::read(&p2).unwrap();
            prop_assert_eq!(b1, b2);
            prop_assert_eq!(loaded, records);
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.cpf");
        std::fs::write(&p, b"NOPE0000").unwrap();
        assert!(matches!(load_checkpoint(&p), Err(CheckpointError::BadMagic(_))));
    }
}
