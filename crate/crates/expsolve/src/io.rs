//! Binary matrix blocks and model files.
//!
//! The on-disk block format is shared by co-occurrence matrices and
//! decoders: the magic `COOC1`, then `D`, `N`, `M` as 64-bit little-endian
//! integers, then `D·N` row-major 64-bit floats. `M` is the accumulated
//! sample count (0 for decoder blocks, where it is meaningless). Two-layer
//! models concatenate two blocks and carry a JSON sidecar with dimensions
//! and priming numbers.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cooc::CooccurrenceMatrix;
use crate::error::{Error, Result};
use crate::multilayer::TwoLayerModel;
use crate::solver::DecoderMatrix;

pub const BLOCK_MAGIC: &[u8; 5] = b"COOC1";

fn write_block<W: Write>(w: &mut W, values: &Array2<f64>, m: u64) -> std::io::Result<()> {
    w.write_all(BLOCK_MAGIC)?;
    let (d, n) = values.dim();
    w.write_all(&(d as u64).to_le_bytes())?;
    w.write_all(&(n as u64).to_le_bytes())?;
    w.write_all(&m.to_le_bytes())?;
    for &v in values.as_slice().expect("row-major") {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_block<R: Read>(r: &mut R, path: &str) -> Result<(Array2<f64>, u64)> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|e| Error::io(path, e))?;
    if &magic != BLOCK_MAGIC {
        return Err(Error::format(path, "bad magic, not a matrix block"));
    }
    let mut word = [0u8; 8];
    let mut next = |r: &mut R| -> Result<u64> {
        r.read_exact(&mut word).map_err(|e| Error::io(path, e))?;
        Ok(u64::from_le_bytes(word))
    };
    let d = next(r)? as usize;
    let n = next(r)? as usize;
    let m = next(r)?;
    let mut buf = vec![0u8; d * n * 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::format(path, "truncated matrix payload"))?;
    let values: Vec<f64> = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
        .collect();
    let array = Array2::from_shape_vec((d, n), values)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok((array, m))
}

/// Writes a co-occurrence matrix. Column sums and feature mass are not
/// stored: mass conservation makes them recoverable from the entries.
pub fn save_cooccurrence(path: &Path, cooc: &CooccurrenceMatrix) -> Result<()> {
    let display = path.display().to_string();
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(&display, e))?);
    write_block(&mut w, cooc.values(), cooc.num_samples() as u64)
        .map_err(|e| Error::io(&display, e))?;
    w.flush().map_err(|e| Error::io(&display, e))
}

pub fn load_cooccurrence(path: &Path) -> Result<CooccurrenceMatrix> {
    let display = path.display().to_string();
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(&display, e))?);
    let (values, m) = read_block(&mut r, &display)?;
    let mass = values.sum();
    Ok(CooccurrenceMatrix::from_values(values, m as usize, mass))
}

/// CSV dump of a co-occurrence matrix for inspection: one row per feature
/// dimension.
pub fn cooccurrence_to_csv<W: Write>(cooc: &CooccurrenceMatrix, w: &mut W) -> std::io::Result<()> {
    for row in cooc.values().rows() {
        let mut first = true;
        for &v in row {
            if !first {
                w.write_all(b",")?;
            }
            write!(w, "{v}")?;
            first = false;
        }
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct DecoderSidecar {
    d: usize,
    n: usize,
    priming: f64,
}

/// Decoder file: one matrix block plus a `.json` sidecar with the priming
/// number.
pub fn save_decoder(path: &Path, decoder: &DecoderMatrix) -> Result<()> {
    let display = path.display().to_string();
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(&display, e))?);
    write_block(&mut w, decoder.values(), 0).map_err(|e| Error::io(&display, e))?;
    w.flush().map_err(|e| Error::io(&display, e))?;
    let sidecar = DecoderSidecar {
        d: decoder.dims().0,
        n: decoder.dims().1,
        priming: decoder.priming(),
    };
    let json_path = path.with_extension("json");
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(&sidecar).expect("serializable"),
    )
    .map_err(|e| Error::io(json_path.display().to_string(), e))
}

pub fn load_decoder(path: &Path) -> Result<DecoderMatrix> {
    let display = path.display().to_string();
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(&display, e))?);
    let (values, _) = read_block(&mut r, &display)?;
    let json_path = path.with_extension("json");
    let priming = match std::fs::read_to_string(&json_path) {
        Ok(text) => {
            let sidecar: DecoderSidecar = serde_json::from_str(&text)
                .map_err(|e| Error::format(json_path.display().to_string(), e.to_string()))?;
            sidecar.priming
        }
        Err(_) => 1.0,
    };
    DecoderMatrix::new(values, priming)
}

#[derive(Debug, Serialize, Deserialize)]
struct TwoLayerSidecar {
    d: usize,
    n: usize,
    priming1: f64,
    priming2: f64,
}

/// Two concatenated blocks plus a JSON sidecar recording dims and primings.
pub fn save_two_layer(path: &Path, model: &TwoLayerModel) -> Result<()> {
    let display = path.display().to_string();
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(&display, e))?);
    write_block(&mut w, &model.u1, 0).map_err(|e| Error::io(&display, e))?;
    write_block(&mut w, &model.u2, 0).map_err(|e| Error::io(&display, e))?;
    w.flush().map_err(|e| Error::io(&display, e))?;
    let sidecar = TwoLayerSidecar {
        d: model.u1.nrows(),
        n: model.u1.ncols(),
        priming1: model.priming1,
        priming2: model.priming2,
    };
    let json_path = path.with_extension("json");
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(&sidecar).expect("serializable"),
    )
    .map_err(|e| Error::io(json_path.display().to_string(), e))
}

pub fn load_two_layer(path: &Path) -> Result<TwoLayerModel> {
    let display = path.display().to_string();
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(&display, e))?);
    let (u1, _) = read_block(&mut r, &display)?;
    let (u2, _) = read_block(&mut r, &display)?;
    let json_path = path.with_extension("json");
    let text = std::fs::read_to_string(&json_path)
        .map_err(|e| Error::io(json_path.display().to_string(), e))?;
    let sidecar: TwoLayerSidecar = serde_json::from_str(&text)
        .map_err(|e| Error::format(json_path.display().to_string(), e.to_string()))?;
    if u1.dim() != (sidecar.d, sidecar.n) || u2.dim() != (sidecar.n, sidecar.n) {
        return Err(Error::format(
            &display,
            "sidecar dimensions do not match the blocks",
        ));
    }
    Ok(TwoLayerModel {
        u1,
        u2,
        priming1: sidecar.priming1,
        priming2: sidecar.priming2,
    })
}
