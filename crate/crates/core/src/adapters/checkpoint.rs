//! Flat little-endian checkpoint for a stack of adapted layers.
//!
//! ```text
//! magic         8 bytes  b"DISELCK\0"
//! version       u32      1
//! layer_count   u32
//! per layer:
//!   d_out       u32
//!   d_in        u32
//!   w0          f64 × d_out·d_in      row-major
//!   has_bias    u8                    0 or 1
//!   bias        f64 × d_out           only if has_bias
//!   kind        u8                    0 none, 1 LoRA, 2 DISeL
//!   rank        u32                   kind ≠ 0
//!   alpha       f64                   kind ≠ 0
//!   A           f64 × d_out·rank      kind ≠ 0
//!   B           f64 × rank·d_in       kind ≠ 0
//!   Wg          f64 × rank·d_in       kind = 2
//!   bg          f64 × rank            kind = 2
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{AdaptedLinear, Adapter, DiselAdapter, FrozenLinear, LoraAdapter};
use crate::error::{Error, Result};
use crate::numkit::{Matrix, Vector};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DISELCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const KIND_NONE: u8 = 0;
const KIND_LORA: u8 = 1;
const KIND_DISEL: u8 = 2;

// Guards against absurd allocations from corrupt headers.
const MAX_DIM: u32 = 1 << 16;

pub fn write_layers<W: Write>(mut w: W, layers: &[AdaptedLinear]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    w.write_u32::<LittleEndian>(layers.len() as u32)?;
    for layer in layers {
        w.write_u32::<LittleEndian>(layer.d_out() as u32)?;
        w.write_u32::<LittleEndian>(layer.d_in() as u32)?;
        write_f64s(&mut w, layer.base.w0().as_slice())?;
        match layer.base.bias() {
            Some(b) => {
                w.write_u8(1)?;
                write_f64s(&mut w, b)?;
            }
            None => w.write_u8(0)?,
        }
        match &layer.adapter {
            Adapter::None => w.write_u8(KIND_NONE)?,
            Adapter::Lora(l) => {
                w.write_u8(KIND_LORA)?;
                w.write_u32::<LittleEndian>(l.rank() as u32)?;
                w.write_f64::<LittleEndian>(l.alpha())?;
                write_f64s(&mut w, l.a().as_slice())?;
                write_f64s(&mut w, l.b().as_slice())?;
            }
            Adapter::Disel(d) => {
                w.write_u8(KIND_DISEL)?;
                w.write_u32::<LittleEndian>(d.rank() as u32)?;
                w.write_f64::<LittleEndian>(d.alpha())?;
                write_f64s(&mut w, d.a().as_slice())?;
                write_f64s(&mut w, d.b().as_slice())?;
                write_f64s(&mut w, d.wg().as_slice())?;
                write_f64s(&mut w, d.bg())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_layers<R: Read>(mut r: R) -> Result<Vec<AdaptedLinear>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let n = r.read_u32::<LittleEndian>()?;
    let mut layers = Vec::with_capacity(n.min(1024) as usize);
    for _ in 0..n {
        let d_out = read_dim(&mut r)?;
        let d_in = read_dim(&mut r)?;
        let w0 = read_matrix(&mut r, d_out, d_in)?;
        let bias = match r.read_u8()? {
            0 => None,
            1 => Some(Vector::from(read_f64s(&mut r, d_out)?)),
            other => return Err(Error::Format(format!("bad bias flag {other}"))),
        };
        let base = FrozenLinear::new(w0, bias)?;
        let adapter = match r.read_u8()? {
            KIND_NONE => Adapter::None,
            KIND_LORA => {
                let rank = read_dim(&mut r)?;
                let alpha = r.read_f64::<LittleEndian>()?;
                let a = read_matrix(&mut r, d_out, rank)?;
                let b = read_matrix(&mut r, rank, d_in)?;
                Adapter::Lora(LoraAdapter::new(a, b, alpha)?)
            }
            KIND_DISEL => {
                let rank = read_dim(&mut r)?;
                let alpha = r.read_f64::<LittleEndian>()?;
                let a = read_matrix(&mut r, d_out, rank)?;
                let b = read_matrix(&mut r, rank, d_in)?;
                let wg = read_matrix(&mut r, rank, d_in)?;
                let bg = Vector::from(read_f64s(&mut r, rank)?);
                Adapter::Disel(DiselAdapter::new(a, b, wg, bg, alpha)?)
            }
            other => return Err(Error::Format(format!("unknown adapter kind {other}"))),
        };
        layers.push(AdaptedLinear::new(base, adapter)?);
    }
    Ok(layers)
}

pub fn save_layers(path: &Path, layers: &[AdaptedLinear]) -> Result<()> {
    write_layers(BufWriter::new(File::create(path)?), layers)
}

pub fn load_layers(path: &Path) -> Result<Vec<AdaptedLinear>> {
    read_layers(BufReader::new(File::open(path)?))
}

fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    for &x in xs {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

fn read_dim<R: Read>(r: &mut R) -> Result<usize> {
    let d = r.read_u32::<LittleEndian>()?;
    if d > MAX_DIM {
        return Err(Error::Format(format!("dimension {d} exceeds {MAX_DIM}")));
    }
    Ok(d as usize)
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    (0..n)
        .map(|_| r.read_f64::<LittleEndian>().map_err(Error::from))
        .collect()
}

fn read_matrix<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<Matrix> {
    Matrix::new(rows, cols, read_f64s(r, rows * cols)?).map_err(|e| Error::Format(e.to_string()))
}
