//! Binary checkpoint format for named parameter tensors.
//!
//! Layout (all integers little-endian):
//! ```text
//! "XVMU"  magic (4 bytes)
//! u16     format version (currently 1)
//! u32     config text length, then that many UTF-8 bytes
//! u32     tensor count
//! per tensor:
//!   u32   name length, then that many UTF-8 bytes
//!   u32   rank, then rank × u32 extents
//!   numel × f32 values
//! ```
//! Values are stored as 32-bit floats; a load(save(x)) round-trip
//! reproduces every tensor exactly at that precision.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"XVMU";
const VERSION: u16 = 1;

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub config_text: String,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn save_checkpoint<'a>(
    path: &Path,
    config_text: &str,
    tensors: impl Iterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = config_text.as_bytes();
    bytes.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    bytes.extend_from_slice(cfg);
    let mut table = Vec::new();
    let mut count: u32 = 0;
    for (name, tensor) in tensors {
        count += 1;
        let name_bytes = name.as_bytes();
        table.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        table.extend_from_slice(name_bytes);
        table.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &extent in tensor.shape() {
            table.extend_from_slice(&(extent as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            table.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    bytes.extend_from_slice(&count.to_le_bytes());
    bytes.extend_from_slice(&table);
    fs::write(path, bytes)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Data(format!(
                "{}: checkpoint truncated while reading {what}",
                self.path
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Data(format!("{}: {what} is not valid UTF-8", self.path)))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0, path: path.display().to_string() };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Data(format!(
            "{}: not a checkpoint file (magic {:?})",
            path.display(),
            magic
        )));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported checkpoint version {version} (this build reads version {VERSION})",
            path.display()
        )));
    }
    let config_text = r.string("config block")?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let name = r.string(&format!("tensor {i} name"))?;
        let rank = r.u32(&format!("{name} rank"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(&format!("{name} extent"))? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4, &format!("{name} values"))?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        tensors.push((name, Tensor::from_parts(shape, data)));
    }
    if r.pos != bytes.len() {
        return Err(Error::Data(format!(
            "{}: {} trailing bytes after tensor table",
            path.display(),
            bytes.len() - r.pos
        )));
    }
    Ok(LoadedCheckpoint { config_text, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpfile(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("xvmunet-ckpt-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn roundtrip_is_exact_at_f32_precision() {
        let a = Tensor::from_parts(vec![2, 3], vec![1.5, -2.25, 0.0, 3.7, 1e-8, -64.125]);
        let b = Tensor::from_parts(vec![4], vec![0.1, 0.2, 0.3, 0.4]);
        let path = tmpfile("roundtrip.ckpt");
        save_checkpoint(&path, "resolution = 64\n", [("layer.w", &a), ("layer.b", &b)].into_iter())
            .unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config_text, "resolution = 64\n");
        assert_eq!(loaded.tensors.len(), 2);
        for ((name, back), (want_name, want)) in
            loaded.tensors.iter().zip([("layer.w", &a), ("layer.b", &b)])
        {
            assert_eq!(name, want_name);
            assert_eq!(back.shape(), want.shape());
            for (x, y) in back.data().iter().zip(want.data()) {
                assert_eq!(*x, *y as f32 as f64, "f32 round-trip must be exact");
            }
        }
    }

    #[test]
    fn save_is_byte_deterministic() {
        let t = Tensor::from_parts(vec![3], vec![1.0, 2.0, 3.0]);
        let p1 = tmpfile("det1.ckpt");
        let p2 = tmpfile("det2.ckpt");
        save_checkpoint(&p1, "k = v\n", [("t", &t)].into_iter()).unwrap();
        save_checkpoint(&p2, "k = v\n", [("t", &t)].into_iter()).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn version_mismatch_is_rejected_by_name() {
        let t = Tensor::from_parts(vec![1], vec![1.0]);
        let path = tmpfile("version.ckpt");
        save_checkpoint(&path, "", [("t", &t)].into_iter()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9; // bump the version field
        std::fs::write(&path, bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(err.to_string().contains("version 9"), "{err}");
    }

    #[test]
    fn bad_magic_and_truncation_are_rejected() {
        let path = tmpfile("magic.ckpt");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(load_checkpoint(&path).unwrap_err(), Error::Data(_)));

        let t = Tensor::from_parts(vec![2], vec![1.0, 2.0]);
        let path2 = tmpfile("trunc.ckpt");
        save_checkpoint(&path2, "", [("t", &t)].into_iter()).unwrap();
        let bytes = std::fs::read(&path2).unwrap();
        std::fs::write(&path2, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_checkpoint(&path2).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let t = Tensor::from_parts(vec![1], vec![5.0]);
        let path = tmpfile("trailing.ckpt");
        save_checkpoint(&path, "", [("t", &t)].into_iter()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, bytes).unwrap();
        assert!(load_checkpoint(&path).unwrap_err().to_string().contains("trailing"));
    }
}
