//! Flat key -> tensor checkpoint container.
//!
//! Binary layout, all integers and reals little-endian:
//!
//! ```text
//! [u8  version = 1]
//! [u32 entry_count]
//! entry*:
//!   [u32 name_len] [name bytes, utf-8]
//!   [u8  ndim] [u64 dim; ndim]
//!   [f64 data; prod(dims)]
//! ```
//!
//! Round-trips are bit-exact: values are stored as raw IEEE-754 bits.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{NumkitError, Result};
use crate::tape::Param;

pub const CHECKPOINT_VERSION: u8 = 1;

pub fn save(path: &Path, entries: &[(&str, &ArrayD<f64>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&[CHECKPOINT_VERSION])?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[tensor.ndim() as u8])?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in tensor.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, ArrayD<f64>)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut version = [0u8; 1];
    r.read_exact(&mut version)?;
    if version[0] != CHECKPOINT_VERSION {
        return Err(NumkitError::Format(format!(
            "unsupported checkpoint version {}",
            version[0]
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 1 << 20 {
            return Err(NumkitError::Format(format!("implausible name length {name_len}")));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| NumkitError::Format(format!("invalid utf-8 name: {e}")))?;
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim)?;
        let mut dims = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            dims.push(read_u64(&mut r)? as usize);
        }
        let n: usize = dims.iter().product();
        if n > 1 << 30 {
            return Err(NumkitError::Format(format!("implausible tensor size {n}")));
        }
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        let tensor = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| NumkitError::Format(format!("bad shape in checkpoint: {e}")))?;
        out.push((name, tensor));
    }
    Ok(out)
}

pub fn load_map(path: &Path) -> Result<HashMap<String, ArrayD<f64>>> {
    Ok(load(path)?.into_iter().collect())
}

/// Saves a parameter list under their own names.
pub fn save_params<'p>(path: &Path, params: impl IntoIterator<Item = &'p Param>) -> Result<()> {
    let collected: Vec<&Param> = params.into_iter().collect();
    let entries: Vec<(&str, &ArrayD<f64>)> =
        collected.iter().map(|p| (p.name(), &p.value)).collect();
    save(path, &entries)
}

/// Restores parameter values by name; every parameter must be present and
/// shape-compatible.
pub fn restore_params<'p>(
    map: &HashMap<String, ArrayD<f64>>,
    params: impl IntoIterator<Item = &'p mut Param>,
) -> Result<()> {
    for p in params {
        let стored = map;
        let value = стored
            .get(p.name())
            .ok_or_else(|| NumkitError::Format(format!("checkpoint missing '{}'", p.name())))?;
        if value.shape() != p.value.shape() {
            return Err(NumkitError::shape(
                format!("restore '{}'", p.name()),
                format!("{:?}", p.value.shape()),
                format!("{:?}", value.shape()),
            ));
        }
        p.value = value.clone();
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.nkpt");
        let a = arr2(&[[1.0, -2.5e-300], [f64::MIN_POSITIVE, 3.999999999999]]).into_dyn();
        let b = ndarray::arr1(&[0.1 + 0.2]).into_dyn();
        save(&path, &[("net.w", &a), ("net.b", &b)]).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].0, "net.w");
        assert_eq!(loaded[0].1, a);
        assert_eq!(loaded[1].1, b);
    }

    #[test]
    fn wrong_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.nkpt");
        std::fs::write(&path, [9u8, 0, 0, 0, 0]).unwrap();
        assert!(matches!(load(&path), Err(NumkitError::Format(_))));
    }

    #[test]
    fn truncated_file_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.nkpt");
        std::fs::write(&path, [1u8, 1, 0, 0, 0, 4, 0]).unwrap();
        assert!(load(&path).is_err());
    }
}
