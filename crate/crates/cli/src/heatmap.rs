//! 8-bit grayscale heatmaps as binary PGM, with the value range in a
//! sidecar JSON file.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::write_json;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapInfo {
    pub config_hash: String,
    pub kind: String,
    pub variable: String,
    pub case: usize,
    pub width: usize,
    pub height: usize,
    /// Value mapped to 0.
    pub min: f64,
    /// Value mapped to 255.
    pub max: f64,
}

/// Linear scaling of `values` (row-major, `height × width`) onto 0..=255.
/// A constant map comes out all zeros.
pub fn to_gray(values: &[f64]) -> (Vec<u8>, f64, f64) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let px = values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - min) / span * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect();
    (px, min, max)
}

pub fn pgm_bytes(pixels: &[u8], width: usize, height: usize, comment: &str) -> Vec<u8> {
    let mut out = format!("P5\n# {comment}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Writes `<stem>.pgm` and `<stem>.json`.
pub fn write_map(dir: &Path, stem: &str, values: &[f64], info: &MapInfo) -> Result<()> {
    assert_eq!(values.len(), info.width * info.height);
    let (px, min, max) = to_gray(values);
    let info = MapInfo {
        min,
        max,
        ..info.clone()
    };
    let path = dir.join(format!("{stem}.pgm"));
    fs::write(
        &path,
        pgm_bytes(
            &px,
            info.width,
            info.height,
            &format!("config_hash={}", info.config_hash),
        ),
    )
    .with_context(|| format!("writing {}", path.display()))?;
    write_json(&dir.join(format!("{stem}.json")), &info)
}

/// Parses a binary PGM as written by [`pgm_bytes`]: `(width, height, pixels)`.
pub fn read_pgm(bytes: &[u8]) -> Option<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if bytes.get(pos) == Some(&b'#') {
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
            return None;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?.to_string());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return None;
    }
    let (w, h): (usize, usize) = (fields[1].parse().ok()?, fields[2].parse().ok()?);
    let data = bytes.get(pos + 1..)?;
    (data.len() == w * h).then(|| (w, h, data.to_vec()))
}
