//! Attention map export: CSV grids and 8-bit binary PGM images.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

/// How map values become grey levels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PgmScale {
    /// Per-map min-max stretch to 0..=255. A constant map is all zeros.
    MinMax,
    /// `round(v * factor)` clamped to 0..=255.
    Fixed(f64),
}

fn expect_map(map: &Tensor3) -> Result<()> {
    if map.channels() != 1 {
        return Err(Error::shape(
            "attention export",
            format!("{}x{}x1", map.height(), map.width()),
            map.shape(),
        ));
    }
    Ok(())
}

/// One line per grid row, values comma-separated.
pub fn attention_csv(map: &Tensor3) -> Result<String> {
    expect_map(map)?;
    let mut out = String::new();
    for row in map.data().chunks_exact(map.width()) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", cells.join(",")).unwrap();
    }
    Ok(out)
}

pub fn encode_pgm(map: &Tensor3, scale: PgmScale) -> Result<Vec<u8>> {
    expect_map(map)?;
    let data = map.data();
    let level: Box<dyn Fn(f64) -> f64> = match scale {
        PgmScale::MinMax => {
            let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let range = hi - lo;
            if range > 0.0 {
                Box::new(move |v| (v - lo) / range * 255.0)
            } else {
                Box::new(|_| 0.0)
            }
        }
        PgmScale::Fixed(f) => Box::new(move |v| v * f),
    };
    let mut out = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    out.extend(data.iter().map(|&v| level(v).round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

/// Parses a binary PGM with maxval 255; returns `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |offset: usize, message: &str| Error::Format {
        context: "pgm".into(),
        offset: offset as u64,
        message: message.into(),
    };
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad(pos, "truncated header"));
        }
        fields.push((start, std::str::from_utf8(&bytes[start..pos]).unwrap_or("")));
    }
    if fields[0].1 != "P5" {
        return Err(bad(0, "not a binary PGM (magic P5)"));
    }
    let num = |i: usize| -> Result<usize> {
        fields[i].1.parse().map_err(|_| bad(fields[i].0, "expected a number"))
    };
    let (w, h, maxval) = (num(1)?, num(2)?, num(3)?);
    if maxval != 255 {
        return Err(bad(fields[3].0, "only maxval 255 is supported"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let pixels = bytes.get(pos..).unwrap_or(&[]);
    if pixels.len() != w * h {
        return Err(bad(
            pos,
            &format!("expected {} pixel bytes, found {}", w * h, pixels.len()),
        ));
    }
    Ok((w, h, pixels.to_vec()))
}

pub fn write_attention_csv(path: &Path, map: &Tensor3) -> Result<()> {
    fs::write(path, attention_csv(map)?).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, map: &Tensor3, scale: PgmScale) -> Result<()> {
    fs::write(path, encode_pgm(map, scale)?).map_err(|e| Error::io(path, e))
}
