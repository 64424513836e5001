//! Binary ReTM container with a JSON diagnostics sidecar.
//!
//! Layout, little-endian: magic `RETM`, `u32` version, `u32` bins, `u32`
//! Q_A, `u32` Q_B, `f64` rcond, `u32` target id, `u32` frame count, then
//! each bin's Q_A x Q_B matrix row-major as complex64 (two `f32`).

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use log::info;
use num_complex::Complex64;
use retm_core::numerics::ComplexMatrix;
use retm_core::retm::{BinDiagnostics, ReTMStack};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

const MAGIC: &[u8; 4] = b"RETM";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub target_id: usize,
    pub bins: usize,
    pub q_a: usize,
    pub q_b: usize,
    pub rcond: f64,
    pub frame_count: usize,
    pub fallback_bins: usize,
    pub diagnostics: Vec<BinDiagnostics>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn write_retm(path: &Path, stack: &ReTMStack) -> AppResult<()> {
    let (bins, qa, qb) = (stack.bins(), stack.q_a(), stack.q_b());
    let mut bytes = Vec::with_capacity(36 + bins * qa * qb * 8);
    bytes.extend_from_slice(MAGIC);
    for v in [VERSION, bins as u32, qa as u32, qb as u32] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes.extend_from_slice(&stack.rcond_used.to_le_bytes());
    bytes.extend_from_slice(&(stack.target_id as u32).to_le_bytes());
    bytes.extend_from_slice(&(stack.frame_count as u32).to_le_bytes());
    for m in &stack.matrices {
        for v in m.as_slice() {
            bytes.extend_from_slice(&(v.re as f32).to_le_bytes());
            bytes.extend_from_slice(&(v.im as f32).to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| AppError::io(path, e))?;

    let sidecar = Sidecar {
        target_id: stack.target_id,
        bins,
        q_a: qa,
        q_b: qb,
        rcond: stack.rcond_used,
        frame_count: stack.frame_count,
        fallback_bins: stack.fallback_bins(),
        diagnostics: stack.diagnostics.clone(),
    };
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&sidecar).map_err(|e| AppError::io(&side, e))?;
    fs::write(&side, json + "\n").map_err(|e| AppError::io(&side, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> AppResult<[u8; N]> {
        let end = self.pos + N;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| AppError::io(self.path, "truncated ReTM file"))?;
        self.pos = end;
        Ok(slice.try_into().expect("slice has length N"))
    }

    fn u32(&mut self) -> AppResult<usize> {
        Ok(u32::from_le_bytes(self.take()?) as usize)
    }

    fn f32(&mut self) -> AppResult<f64> {
        Ok(f32::from_le_bytes(self.take()?) as f64)
    }
}

/// Reads a container; diagnostics come from the sidecar when present.
pub fn read_retm(path: &Path) -> AppResult<ReTMStack> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| AppError::io(path, e))?;
    let mut c = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if &c.take::<4>()? != MAGIC {
        return Err(AppError::io(path, "not a ReTM container"));
    }
    let version = c.u32()?;
    if version != VERSION as usize {
        return Err(AppError::io(path, format!("unsupported version {version}")));
    }
    let (bins, qa, qb) = (c.u32()?, c.u32()?, c.u32()?);
    let rcond = f64::from_le_bytes(c.take()?);
    let target_id = c.u32()?;
    let frame_count = c.u32()?;
    let mut matrices = Vec::with_capacity(bins);
    for _ in 0..bins {
        let mut data = Vec::with_capacity(qa * qb);
        for _ in 0..qa * qb {
            let re = c.f32()?;
            data.push(Complex64::new(re, c.f32()?));
        }
        matrices.push(ComplexMatrix::from_row_major(qa, qb, data)?);
    }
    if c.pos != bytes.len() {
        return Err(AppError::io(path, "trailing bytes after ReTM data"));
    }
    let side = sidecar_path(path);
    let diagnostics = match fs::read_to_string(&side) {
        Ok(text) => {
            serde_json::from_str::<Sidecar>(&text)
                .map_err(|e| AppError::io(&side, e))?
                .diagnostics
        }
        Err(_) => Vec::new(),
    };
    Ok(ReTMStack {
        matrices,
        target_id,
        frame_count,
        rcond_used: rcond,
        diagnostics,
    })
}

/// Logs how many bins fall in each decade of condition number.
pub fn log_condition_histogram(stack: &ReTMStack) {
    let mut decades = std::collections::BTreeMap::<i32, usize>::new();
    let mut infinite = 0;
    for d in &stack.diagnostics {
        if d.condition_number.is_finite() {
            *decades.entry(d.condition_number.log10().floor() as i32).or_default() += 1;
        } else {
            infinite += 1;
        }
    }
    let mut line = String::new();
    for (decade, count) in &decades {
        line.push_str(&format!(" 1e{decade}:{count}"));
    }
    if infinite > 0 {
        line.push_str(&format!(" inf:{infinite}"));
    }
    info!(
        "target {} condition histogram (bins per decade):{line}; fallback bins: {}",
        stack.target_id,
        stack.fallback_bins()
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack() -> ReTMStack {
        let m = |k: f64| {
            ComplexMatrix::from_fn(2, 3, |r, c| Complex64::new(k + r as f64, 0.5 * c as f64 - k))
        };
        ReTMStack {
            matrices: vec![m(0.0), m(1.0)],
            target_id: 2,
            frame_count: 40,
            rcond_used: 1e-10,
            diagnostics: vec![
                BinDiagnostics {
                    condition_number: f64::INFINITY,
                    effective_condition: 3.0,
                    rank: 2,
                    fallback: false,
                },
                BinDiagnostics {
                    condition_number: 12.0,
                    effective_condition: 12.0,
                    rank: 2,
                    fallback: false,
                },
            ],
        }
    }

    #[test]
    fn round_trip_is_exact_for_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.retm");
        let s = stack();
        write_retm(&path, &s).unwrap();
        let back = read_retm(&path).unwrap();
        assert_eq!(back, s);
        let len = fs::metadata(&path).unwrap().len();
        assert_eq!(len, 36 + 2 * 6 * 8);
        let side: Sidecar =
            serde_json::from_str(&fs::read_to_string(sidecar_path(&path)).unwrap()).unwrap();
        assert_eq!(side.diagnostics[0].condition_number, f64::INFINITY);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.retm");
        write_retm(&path, &stack()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(50);
        fs::write(&path, &bytes).unwrap();
        assert!(read_retm(&path).is_err());
        fs::write(&path, b"NOPE").unwrap();
        assert!(read_retm(&path).is_err());
    }
}
