//! Binary snapshot files.
//!
//! Layout (little endian): magic `DSPF`, version `u16`, dimension `u8`,
//! spinor flag `u8`, points per axis `u32`, box length `f64`, then the
//! complex values as `(re, im)` pairs with the first axis fastest. Spinors
//! store the upper component followed by the lower one.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};

use dispersim_core::{ComplexField, Grid, SpinorField, C64};

pub const MAGIC: &[u8; 4] = b"DSPF";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub enum Snapshot {
    Scalar(ComplexField),
    Spinor(SpinorField),
}

impl Snapshot {
    pub fn grid(&self) -> &Grid {
        match self {
            Snapshot::Scalar(f) => f.grid(),
            Snapshot::Spinor(s) => s.grid(),
        }
    }
}

pub fn encode(snap: &Snapshot) -> Vec<u8> {
    let grid = snap.grid();
    let parts: Vec<&ComplexField> = match snap {
        Snapshot::Scalar(f) => vec![f],
        Snapshot::Spinor(s) => vec![&s.upper, &s.lower],
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 16 * grid.len() * parts.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(grid.dim() as u8);
    out.push(u8::from(parts.len() == 2));
    out.extend_from_slice(&(grid.points() as u32).to_le_bytes());
    out.extend_from_slice(&grid.length().to_le_bytes());
    for f in parts {
        for z in f.values() {
            out.extend_from_slice(&z.re.to_le_bytes());
            out.extend_from_slice(&z.im.to_le_bytes());
        }
    }
    out
}

fn f64_at(bytes: &[u8], at: usize) -> f64 {
    f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap())
}

pub fn decode(bytes: &[u8]) -> Result<Snapshot> {
    ensure!(bytes.len() >= HEADER_LEN, "corrupt snapshot header: {} bytes", bytes.len());
    ensure!(&bytes[..4] == MAGIC, "corrupt snapshot header: bad magic");
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    ensure!(version == VERSION, "unsupported snapshot version {version} (expected {VERSION})");
    let dim = bytes[6] as usize;
    let spinor = match bytes[7] {
        0 => false,
        1 => true,
        other => bail!("corrupt snapshot header: spinor flag {other}"),
    };
    let points = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let length = f64_at(bytes, 12);
    let grid = Grid::new(dim, points, length).context("corrupt snapshot header")?;
    let parts = if spinor { 2 } else { 1 };
    let expected = HEADER_LEN + 16 * grid.len() * parts;
    ensure!(
        bytes.len() == expected,
        "snapshot size mismatch: header describes {expected} bytes, file has {}",
        bytes.len()
    );
    let mut fields = (0..parts).map(|p| {
        let start = HEADER_LEN + 16 * grid.len() * p;
        let values = (0..grid.len())
            .map(|i| C64::new(f64_at(bytes, start + 16 * i), f64_at(bytes, start + 16 * i + 8)))
            .collect();
        ComplexField::from_values(&grid, values)
    });
    let first = fields.next().unwrap()?;
    Ok(match fields.next() {
        Some(lower) => Snapshot::Spinor(SpinorField::new(first, lower?)?),
        None => Snapshot::Scalar(first),
    })
}

pub fn emit_snapshot(snap: &Snapshot, path: &Path) -> Result<()> {
    std::fs::write(path, encode(snap)).with_context(|| format!("writing snapshot {}", path.display()))
}

pub fn load_snapshot(path: &Path) -> Result<Snapshot> {
    let bytes = std::fs::read(path).with_context(|| format!("reading snapshot {}", path.display()))?;
    decode(&bytes).with_context(|| format!("loading snapshot {}", path.display()))
}
