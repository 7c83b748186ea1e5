//! Flat little-endian binary persistence for parameter vectors.
//!
//! Layout: magic "ABPV", format version u32, activation u8, output kind u8,
//! squash interval (2 x f64, zero when identity), layer count u32, layer
//! sizes u32 each, parameter count u64, then the raw f64 parameters.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Activation, MlpSpec, NnError, OutputTransform, ParamVector};

const MAGIC: &[u8; 4] = b"ABPV";
const VERSION: u32 = 1;

pub fn save_params(path: &Path, spec: &MlpSpec, theta: &ParamVector) -> Result<(), NnError> {
    if theta.len() != spec.param_count() {
        return Err(NnError::DimensionMismatch { expected: spec.param_count(), got: theta.len() });
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let act: u8 = match spec.activation {
        Activation::Tanh => 0,
        Activation::Relu => 1,
    };
    w.write_all(&[act])?;
    let (kind, lo, hi) = match spec.output {
        OutputTransform::Identity => (0u8, 0.0, 0.0),
        OutputTransform::Squash { lo, hi } => (1u8, lo, hi),
    };
    w.write_all(&[kind])?;
    w.write_all(&lo.to_le_bytes())?;
    w.write_all(&hi.to_le_bytes())?;
    w.write_all(&(spec.layer_sizes.len() as u32).to_le_bytes())?;
    for &n in &spec.layer_sizes {
        w.write_all(&(n as u32).to_le_bytes())?;
    }
    w.write_all(&(theta.len() as u64).to_le_bytes())?;
    for x in &theta.0 {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<(MlpSpec, ParamVector), NnError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::ParamFile("bad magic, not a parameter file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(NnError::ParamFile(format!("unsupported version {version}")));
    }
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    let activation = match b[0] {
        0 => Activation::Tanh,
        1 => Activation::Relu,
        k => return Err(NnError::ParamFile(format!("unknown activation tag {k}"))),
    };
    r.read_exact(&mut b)?;
    let kind = b[0];
    let lo = read_f64(&mut r)?;
    let hi = read_f64(&mut r)?;
    let output = match kind {
        0 => OutputTransform::Identity,
        1 => OutputTransform::Squash { lo, hi },
        k => return Err(NnError::ParamFile(format!("unknown output tag {k}"))),
    };
    let n_layers = read_u32(&mut r)? as usize;
    let mut layer_sizes = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        layer_sizes.push(read_u32(&mut r)? as usize);
    }
    let spec = MlpSpec::new(layer_sizes, activation, output)
        .map_err(|e| NnError::ParamFile(format!("stored spec invalid: {e}")))?;
    let count = read_u64(&mut r)? as usize;
    if count != spec.param_count() {
        return Err(NnError::ParamFile(format!(
            "parameter count {count} does not match spec ({})",
            spec.param_count()
        )));
    }
    let mut theta = Vec::with_capacity(count);
    for _ in 0..count {
        theta.push(read_f64(&mut r)?);
    }
    Ok((spec, ParamVector(theta)))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NnError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, NnError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64, NnError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
