//! Named-tensor container.
//!
//! Layout: the 8-byte magic `TCKPT001`, a little-endian `u64` header length,
//! a JSON header `{"meta": ..., "tensors": [{"name", "shape"}, ...]}`, then
//! every tensor's values as little-endian `f64` in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TCKPT001";

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

pub fn write_tensors<W: Write>(
    mut w: W,
    meta: &serde_json::Value,
    tensors: &[(&str, &Tensor)],
) -> std::io::Result<()> {
    let header = Header {
        meta: meta.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| Entry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, t) in tensors {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let io = |e: std::io::Error| Error::Format(format!("truncated checkpoint: {e}"));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(io)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json).map_err(io)?;
    let header: Header = serde_json::from_slice(&json)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let mut out = Vec::with_capacity(header.tensors.len());
    let mut buf = [0u8; 8];
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf).map_err(io)?;
            data.push(f64::from_le_bytes(buf));
        }
        out.push((entry.name, Tensor::new(entry.shape, data)?));
    }
    Ok((header.meta, out))
}

pub fn save_tensors(
    path: &Path,
    meta: &serde_json::Value,
    tensors: &[(&str, &Tensor)],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_tensors(BufWriter::new(file), meta, tensors).map_err(|e| Error::io(path, e))
}

pub fn load_tensors(path: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensors(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trips_bit_exactly(
            data in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO, 1..40),
        ) {
            let t = Tensor::row_vector(data).unwrap();
            let s = Tensor::scalar(-0.0);
            let meta = serde_json::json!({"dim": 4});
            let mut buf = Vec::new();
            write_tensors(&mut buf, &meta, &[("a", &t), ("b", &s)]).unwrap();
            let (m, back) = read_tensors(buf.as_slice()).unwrap();
            prop_assert_eq!(m, meta);
            prop_assert_eq!(back.len(), 2);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back[0].1), bits(&t));
            prop_assert_eq!(back[0].1.shape(), t.shape());
            prop_assert_eq!(bits(&back[1].1), bits(&s));
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_tensors(&b"NOTACKPTxxxxxxxx"[..]).is_err());
        assert!(read_tensors(&b"TCKPT001"[..]).is_err());
    }
}
