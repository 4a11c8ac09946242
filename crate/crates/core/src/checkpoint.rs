//! Flat binary model checkpoints.
//!
//! Layout: magic `CBNLAB01`, then for each parameter in walk order: name
//! length (u64 LE), name bytes, rank (u64 LE), extents (u64 LE each), and the
//! row-major values as little-endian f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::MicroResNet;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CBNLAB01";

pub fn save_checkpoint(model: &MicroResNet, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    let mut err = None;
    model.for_each_param(&mut |name, t| {
        if err.is_some() {
            return;
        }
        let res = (|| -> Result<()> {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
            for &e in t.shape() {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        })();
        if let Err(e) = res {
            err = Some(e);
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    w.flush()?;
    Ok(())
}

/// Read every named parameter from a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| Error::Format("truncated checkpoint".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut out = Vec::new();
    loop {
        let mut len_buf = [0u8; 8];
        match r.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(_) => break, // clean end of file
        }
        let name_len = u64::from_le_bytes(len_buf) as usize;
        if name_len > 4096 {
            return Err(Error::Format(format!("implausible name length {}", name_len)));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|_| Error::Format("truncated checkpoint".into()))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("non-utf8 parameter name".into()))?;
        let mut rank_buf = [0u8; 8];
        r.read_exact(&mut rank_buf).map_err(|_| Error::Format("truncated checkpoint".into()))?;
        let rank = u64::from_le_bytes(rank_buf) as usize;
        if rank > 8 {
            return Err(Error::Format(format!("implausible rank {}", rank)));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut e = [0u8; 8];
            r.read_exact(&mut e).map_err(|_| Error::Format("truncated checkpoint".into()))?;
            shape.push(u64::from_le_bytes(e) as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = vec![0.0f64; count];
        for v in data.iter_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| Error::Format("truncated checkpoint".into()))?;
            *v = f64::from_le_bytes(b);
        }
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

/// Overwrite a model's parameters from checkpoint contents; names and shapes
/// must match the model's walk exactly.
pub fn apply_checkpoint(model: &mut MicroResNet, params: &[(String, Tensor)]) -> Result<()> {
    let mut idx = 0usize;
    let mut err = None;
    model.for_each_param_mut(&mut |name, t| {
        if err.is_some() {
            return;
        }
        let Some((saved_name, saved)) = params.get(idx) else {
            err = Some(Error::Format("checkpoint has fewer parameters than the model".into()));
            return;
        };
        if saved_name != &name {
            err = Some(Error::Format(format!(
                "parameter {} does not match checkpoint entry {}",
                name, saved_name
            )));
            return;
        }
        if saved.shape() != t.shape() {
            err = Some(Error::Format(format!(
                "shape mismatch for {}: model {:?}, checkpoint {:?}",
                name,
                t.shape(),
                saved.shape()
            )));
            return;
        }
        t.data_mut().copy_from_slice(saved.data());
        idx += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if idx != params.len() {
        return Err(Error::Format("checkpoint has more parameters than the model".into()));
    }
    Ok(())
}
