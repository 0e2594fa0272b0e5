//! Single-file binary checkpoints: a magic header, a JSON metadata blob,
//! and named tensors in little-endian layout.
//!
//! Head parameters live under the `heads.` key prefix, so stripping a
//! checkpoint for deployment is [`Checkpoint::strip_heads`] — a pure
//! prefix filter, no model surgery.

use crate::error::{LfmaError, Result};
use crate::nn::{Dtype, Scalar};
use ndarray::ArrayD;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"LFMACKPT";
const VERSION: u32 = 1;

/// In-memory checkpoint: free-form JSON metadata plus named tensors.
#[derive(Clone, Debug)]
pub struct Checkpoint<F: Scalar> {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, ArrayD<F>>,
}

impl<F: Scalar> Checkpoint<F> {
    pub fn new(meta: serde_json::Value, tensors: BTreeMap<String, ArrayD<F>>) -> Self {
        Checkpoint { meta, tensors }
    }

    /// Drop every tensor under the auxiliary-head namespace.
    pub fn strip_heads(&mut self) -> usize {
        let before = self.tensors.len();
        self.tensors.retain(|name, _| !name.starts_with("heads."));
        before - self.tensors.len()
    }

    /// String field accessor for common metadata keys.
    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .and_then(|v| v.as_str())
            .ok_or_else(|| LfmaError::Checkpoint(format!("metadata key '{key}' missing")))
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        self.meta
            .get(key)
            .and_then(|v| v.as_u64())
            .ok_or_else(|| LfmaError::Checkpoint(format!("metadata key '{key}' missing")))
    }
}

fn dtype_tag(d: Dtype) -> u8 {
    match d {
        Dtype::F32 => 1,
        Dtype::F64 => 2,
    }
}

/// Write a checkpoint atomically-enough: to a sibling temp file, then rename.
pub fn save_checkpoint<F: Scalar>(path: &Path, ckpt: &Checkpoint<F>) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    {
        let file = File::create(&tmp).map_err(|e| LfmaError::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        write_body(&mut w, ckpt).map_err(|e| LfmaError::io(&tmp, e))?;
        w.flush().map_err(|e| LfmaError::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| LfmaError::io(path, e))?;
    Ok(())
}

fn write_body<F: Scalar, W: Write>(w: &mut W, ckpt: &Checkpoint<F>) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[dtype_tag(F::DTYPE)])?;
    let meta = serde_json::to_vec(&ckpt.meta).expect("metadata serializes");
    w.write_all(&(meta.len() as u64).to_le_bytes())?;
    w.write_all(&meta)?;
    w.write_all(&(ckpt.tensors.len() as u64).to_le_bytes())?;
    for (name, tensor) in &ckpt.tensors {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u64).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(tensor.ndim() as u64).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let standard = tensor.as_standard_layout();
        let slice = standard.as_slice().expect("standard layout");
        match F::DTYPE {
            Dtype::F32 => {
                for &v in slice {
                    w.write_all(&v.to_f32().unwrap().to_le_bytes())?;
                }
            }
            Dtype::F64 => {
                for &v in slice {
                    w.write_all(&v.to_f64().unwrap().to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

/// Read a checkpoint. The stored element type must match `F`.
pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<Checkpoint<F>> {
    let file = File::open(path).map_err(|e| LfmaError::io(path, e))?;
    let mut r = BufReader::new(file);
    read_body(&mut r, path)
}

fn read_body<F: Scalar, R: Read>(r: &mut R, path: &Path) -> Result<Checkpoint<F>> {
    let io_err = |e: std::io::Error| LfmaError::io(path, e);
    let bad = |msg: String| LfmaError::Checkpoint(format!("{}: {msg}", path.display()));

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)".into()));
    }
    let version = read_u32(r).map_err(io_err)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag).map_err(io_err)?;
    if tag[0] != dtype_tag(F::DTYPE) {
        return Err(bad(format!(
            "element type mismatch: file has tag {}, expected {}",
            tag[0],
            dtype_tag(F::DTYPE)
        )));
    }

    let meta_len = read_u64(r).map_err(io_err)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes).map_err(io_err)?;
    let meta: serde_json::Value =
        serde_json::from_slice(&meta_bytes).map_err(|e| bad(format!("corrupt metadata: {e}")))?;

    let count = read_u64(r).map_err(io_err)? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u64(r).map_err(io_err)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(io_err)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| bad("tensor name is not valid UTF-8".into()))?;
        let ndim = read_u64(r).map_err(io_err)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        let mut len = 1usize;
        for _ in 0..ndim {
            let d = read_u64(r).map_err(io_err)? as usize;
            len = len.saturating_mul(d);
            shape.push(d);
        }
        let mut data = Vec::with_capacity(len);
        match F::DTYPE {
            Dtype::F32 => {
                let mut buf = [0u8; 4];
                for _ in 0..len {
                    r.read_exact(&mut buf).map_err(io_err)?;
                    data.push(F::from(f32::from_le_bytes(buf)).unwrap());
                }
            }
            Dtype::F64 => {
                let mut buf = [0u8; 8];
                for _ in 0..len {
                    r.read_exact(&mut buf).map_err(io_err)?;
                    data.push(F::from(f64::from_le_bytes(buf)).unwrap());
                }
            }
        }
        let tensor = ArrayD::from_shape_vec(shape.clone(), data)
            .map_err(|_| bad(format!("tensor '{name}' shape {shape:?} disagrees with data")))?;
        if tensors.insert(name.clone(), tensor).is_some() {
            return Err(bad(format!("duplicate tensor '{name}'")));
        }
    }
    Ok(Checkpoint { meta, tensors })
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;
    use serde_json::json;

    fn sample() -> Checkpoint<f32> {
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "backbone.stem.conv.weight".to_string(),
            ArrayD::from_shape_vec(vec![2, 1, 3, 3], (0..18).map(|v| v as f32).collect()).unwrap(),
        );
        tensors.insert(
            "heads.0.fc.bias".to_string(),
            ArrayD::from_shape_vec(vec![3], vec![0.5, -1.5, 2.0]).unwrap(),
        );
        tensors.insert(
            "heads.1.fc.bias".to_string(),
            ArrayD::from_shape_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap(),
        );
        Checkpoint::new(json!({"arch": "resnet8", "epoch": 7}), tensors)
    }

    #[test]
    fn roundtrip_preserves_everything_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = sample();
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(back.meta, ckpt.meta);
        assert_eq!(back.tensors.len(), 3);
        for (name, t) in &ckpt.tensors {
            assert_eq!(&back.tensors[name], t);
        }
        assert_eq!(back.meta_str("arch").unwrap(), "resnet8");
        assert_eq!(back.meta_u64("epoch").unwrap(), 7);
    }

    #[test]
    fn strip_heads_is_a_prefix_filter() {
        let mut ckpt = sample();
        let removed = ckpt.strip_heads();
        assert_eq!(removed, 2);
        assert_eq!(ckpt.tensors.len(), 1);
        assert!(ckpt.tensors.contains_key("backbone.stem.conv.weight"));
    }

    #[test]
    fn dtype_mismatch_and_corruption_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &sample()).unwrap();
        // f64 reader on an f32 file.
        let err = load_checkpoint::<f64>(&path).unwrap_err();
        assert!(err.to_string().contains("mismatch"), "{err}");
        // Truncated file.
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
        // Not a checkpoint at all.
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        let err = load_checkpoint::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
        // Missing file surfaces the path.
        let missing = dir.path().join("nope.ckpt");
        let err = load_checkpoint::<f32>(&missing).unwrap_err();
        assert!(err.to_string().contains("nope.ckpt"), "{err}");
    }
}
