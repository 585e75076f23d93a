//! Flat binary parameter checkpoints.
//!
//! Layout: the magic `DSSL1`, then one record per parameter in set
//! order: name length (u64 LE), name bytes (UTF-8), rank (u64 LE),
//! extents (u64 LE each), values (f64 LE each). Records run to EOF.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"DSSL1";

pub fn save_checkpoint(path: &Path, params: &ParamSet) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut out = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    out(CHECKPOINT_MAGIC)?;
    for (name, tensor) in params.iter() {
        out(&(name.len() as u64).to_le_bytes())?;
        out(name.as_bytes())?;
        out(&(tensor.shape().len() as u64).to_le_bytes())?;
        for &e in tensor.shape() {
            out(&(e as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            out(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a checkpoint as ordered (name, tensor) pairs.
pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {magic:?}",
            path.display()
        )));
    }
    let mut entries = Vec::new();
    loop {
        let mut len8 = [0u8; 8];
        match r.read_exact(&mut len8) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(Error::io(path, e)),
        }
        let name_len = u64::from_le_bytes(len8) as usize;
        if name_len > 4096 {
            return Err(Error::Checkpoint(format!(
                "{}: implausible name length {name_len}",
                path.display()
            )));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(|e| Error::io(path, e))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint(format!("{}: non-UTF-8 name", path.display())))?;
        r.read_exact(&mut len8).map_err(|e| Error::io(path, e))?;
        let rank = u64::from_le_bytes(len8) as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!(
                "{}: implausible rank {rank} for {name}",
                path.display()
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut len8).map_err(|e| Error::io(path, e))?;
            shape.push(u64::from_le_bytes(len8) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            r.read_exact(&mut len8).map_err(|e| Error::io(path, e))?;
            data.push(f64::from_le_bytes(len8));
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::Checkpoint(format!("{}: {name}: {e}", path.display())))?;
        entries.push((name, tensor));
    }
    Ok(entries)
}

/// Load a checkpoint into an existing parameter set; names, order, and
/// shapes must all match.
pub fn load_checkpoint_into(path: &Path, params: &mut ParamSet) -> Result<()> {
    let entries = load_checkpoint(path)?;
    if entries.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "{}: holds {} parameters, model expects {}",
            path.display(),
            entries.len(),
            params.len()
        )));
    }
    for (idx, (name, tensor)) in entries.iter().enumerate() {
        if params.name(idx) != name {
            return Err(Error::Checkpoint(format!(
                "{}: parameter {idx} is {name}, model expects {}",
                path.display(),
                params.name(idx)
            )));
        }
        if params.get(idx).shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "{}: {name} has shape {:?}, model expects {:?}",
                path.display(),
                tensor.shape(),
                params.get(idx).shape()
            )));
        }
        params.get_mut(idx).data_mut().copy_from_slice(tensor.data());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_values_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.dssl");
        let mut params = ParamSet::new();
        params
            .add("w", Tensor::new(vec![2, 3], vec![1.0, -2.5, 0.0, 4.0, 5.5, -0.125]).unwrap())
            .unwrap();
        params.add("b", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap()).unwrap();
        save_checkpoint(&path, &params).unwrap();

        let entries = load_checkpoint(&path).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].0, "w");
        assert_eq!(entries[0].1.shape(), &[2, 3]);
        assert_eq!(entries[0].1.data(), params.get(0).data());
        assert_eq!(entries[1].0, "b");

        let mut into = params.clone();
        into.get_mut(0).data_mut().fill(0.0);
        load_checkpoint_into(&path, &mut into).unwrap();
        assert_eq!(into.get(0).data(), params.get(0).data());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.dssl");
        std::fs::write(&path, b"NOPE!junk").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.dssl");
        let mut a = ParamSet::new();
        a.add("w", Tensor::zeros(vec![2, 2])).unwrap();
        save_checkpoint(&path, &a).unwrap();
        let mut b = ParamSet::new();
        b.add("w", Tensor::zeros(vec![3, 2])).unwrap();
        assert!(load_checkpoint_into(&path, &mut b).is_err());
    }
}
