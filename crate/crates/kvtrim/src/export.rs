//! CSV exports for spectra and magnitude maps.
//!
//! Floats are written as `{:.16e}` (17 significant digits), which round-trips
//! every f64 and does not depend on the platform.

use std::fmt::Write as _;

use kvtrim_core::analysis::EnergySpectrum;
use kvtrim_core::Matrix;

pub const ENERGY_HEADER: &str = "index,sigma,energy,cumulative";

fn push_float(out: &mut String, x: f64) {
    write!(out, "{x:.16e}").expect("writing to a String");
}

pub fn energy_csv(s: &EnergySpectrum) -> String {
    let mut out = String::from(ENERGY_HEADER);
    out.push('\n');
    for i in 0..s.len() {
        write!(out, "{i},").expect("writing to a String");
        push_float(&mut out, s.sigma[i]);
        out.push(',');
        push_float(&mut out, s.energy[i]);
        out.push(',');
        push_float(&mut out, s.cumulative[i]);
        out.push('\n');
    }
    out
}

/// One line per token, one column per channel, no header.
pub fn matrix_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for row in m.row_iter() {
        for (j, &x) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            push_float(&mut out, x);
        }
        out.push('\n');
    }
    out
}

fn parse_fields(line: &str) -> Result<Vec<f64>, String> {
    line.split(',').map(|f| f.trim().parse::<f64>().map_err(|e| format!("bad number {f:?}: {e}"))).collect()
}

/// Reads back [`energy_csv`] output.
pub fn parse_energy_csv(text: &str) -> Result<EnergySpectrum, String> {
    let mut lines = text.lines();
    if lines.next() != Some(ENERGY_HEADER) {
        return Err("missing energy header".into());
    }
    let (mut sigma, mut energy, mut cumulative) = (Vec::new(), Vec::new(), Vec::new());
    for (i, line) in lines.enumerate() {
        let f = parse_fields(line)?;
        if f.len() != 4 || f[0] != i as f64 {
            return Err(format!("malformed energy row {i}"));
        }
        sigma.push(f[1]);
        energy.push(f[2]);
        cumulative.push(f[3]);
    }
    Ok(EnergySpectrum { sigma, energy, cumulative })
}

/// Reads back [`matrix_csv`] output.
pub fn parse_matrix_csv(text: &str) -> Result<Matrix, String> {
    let rows: Vec<Vec<f64>> = text.lines().map(parse_fields).collect::<Result<_, _>>()?;
    Matrix::from_rows(&rows).map_err(|e| e.to_string())
}
