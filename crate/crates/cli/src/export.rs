//! Per-frame patch magnitude grids as CSV and binary PGM.

use std::fmt::Write as _;

use crate::error::{CliError, CliResult};

/// Side length `P` of a square `P × P` patch grid.
pub fn grid_side(patches: usize) -> CliResult<usize> {
    let side = (patches as f64).sqrt().round() as usize;
    if side * side != patches {
        return Err(CliError::Usage(format!(
            "{patches} patches per frame do not form a square grid"
        )));
    }
    Ok(side)
}

/// Maps all magnitudes of a clip to 0..=255 with one min-max range. A
/// constant clip maps to 128 everywhere.
pub fn to_gray(magnitudes: &[f64]) -> Vec<u8> {
    let min = magnitudes.iter().copied().fold(f64::INFINITY, f64::min);
    let max = magnitudes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if range.is_nan() || range <= 1e-12 * max.abs().max(1.0) {
        return vec![128; magnitudes.len()];
    }
    magnitudes
        .iter()
        .map(|v| ((v - min) / range * 255.0).round() as u8)
        .collect()
}

/// `P × P` values as comma-separated rows.
pub fn grid_csv(values: &[f64], side: usize) -> String {
    let mut out = String::new();
    for row in values.chunks(side) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        writeln!(out, "{}", cells.join(",")).expect("writing to a String");
    }
    out
}

/// Binary greyscale image: header `P5 P P 255` then one byte per patch.
pub fn pgm_bytes(pixels: &[u8], side: usize) -> Vec<u8> {
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}
