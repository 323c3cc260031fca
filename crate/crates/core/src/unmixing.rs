//! Beer–Lambert linear unmixing: absorbance per band is modelled as a
//! non-negative combination of oxy- and deoxyhemoglobin extinction plus a
//! free offset and a free linear slope over the band index.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::cube::{Hypercube, OxygenationMap};
use crate::error::{Error, Result};
use crate::optics::{parse_csv_row, ExtinctionTable};
use crate::spectral::CameraModel;

pub const COLUMN_NAMES: [&str; 4] = ["eps_hbo2", "eps_hb", "offset", "slope"];
/// Extinction columns are stored in units of 1e4 1/(cm·mol/L).
pub const EXTINCTION_SCALE: f64 = 1e-4;
pub const NNLS_TOLERANCE: f64 = 1e-10;

/// Design matrix of the unmixing model, `bands × 4`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EndmemberMatrix {
    pub bands: usize,
    pub columns: Vec<f64>,
    gram: [[f64; 4]; 4],
}

impl EndmemberMatrix {
    pub fn new(bands: usize, columns: Vec<f64>) -> Result<Self> {
        if bands < 4 || columns.len() != bands * 4 {
            return Err(Error::shape(format!("endmember matrix needs >= 4 bands of 4 columns, got {} values", columns.len())));
        }
        if columns.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("endmember matrix must be finite"));
        }
        let mut gram = [[0.0; 4]; 4];
        for row in columns.chunks_exact(4) {
            for i in 0..4 {
                for j in 0..4 {
                    gram[i][j] += row[i] * row[j];
                }
            }
        }
        if cholesky_solve(&gram, &[0, 1, 2, 3], &[1.0; 4]).is_none() {
            return Err(Error::config("endmember matrix is not of full column rank"));
        }
        Ok(Self { bands, columns, gram })
    }

    /// Extinction spectra projected onto the camera bands with the same
    /// weights as reflectance, plus offset and slope columns.
    pub fn from_camera(cam: &CameraModel, table: &ExtinctionTable) -> Result<Self> {
        let eps = cam
            .wavelengths
            .iter()
            .map(|&w| table.extinction(w))
            .collect::<Result<Vec<_>>>()?;
        let bands = cam.bands();
        let mut columns = Vec::with_capacity(bands * 4);
        for (b, w) in cam.band_weights().iter().enumerate() {
            let o: f64 = w.iter().zip(&eps).map(|(w, e)| w * e.0).sum();
            let d: f64 = w.iter().zip(&eps).map(|(w, e)| w * e.1).sum();
            let x = if bands > 1 { b as f64 / (bands - 1) as f64 } else { 0.0 };
            columns.extend([o * EXTINCTION_SCALE, d * EXTINCTION_SCALE, 1.0, x]);
        }
        Self::new(bands, columns)
    }

    pub fn row(&self, b: usize) -> &[f64] {
        &self.columns[b * 4..(b + 1) * 4]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut s = format!("band,{}\n", COLUMN_NAMES.join(","));
        for b in 0..self.bands {
            let r = self.row(b);
            let _ = writeln!(s, "{b},{:e},{:e},{:e},{:e}", r[0], r[1], r[2], r[3]);
        }
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().unwrap_or_default();
        if header.trim() != format!("band,{}", COLUMN_NAMES.join(",")) {
            return Err(Error::config(format!("{}: unexpected endmember header {header:?}", path.display())));
        }
        let mut columns = Vec::new();
        let mut bands = 0;
        for (i, line) in lines.enumerate() {
            let row = parse_csv_row(line, 5).map_err(|e| Error::config(format!("{} row {}: {e}", path.display(), i + 1)))?;
            if row[0] != i as f64 {
                return Err(Error::config(format!("{} row {}: bands must be listed in order", path.display(), i + 1)));
            }
            columns.extend_from_slice(&row[1..]);
            bands += 1;
        }
        Self::new(bands, columns)
    }
}

/// Solves `G[idx,idx] z = h[idx]` by Cholesky; `None` if not positive
/// definite.
fn cholesky_solve(g: &[[f64; 4]; 4], idx: &[usize], h: &[f64; 4]) -> Option<[f64; 4]> {
    let n = idx.len();
    let mut l = [[0.0; 4]; 4];
    for i in 0..n {
        for j in 0..=i {
            let mut s = g[idx[i]][idx[j]];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if !(s > 1e-14 * g[idx[i]][idx[i]].abs().max(1e-300)) {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut y = [0.0; 4];
    for i in 0..n {
        let mut s = h[idx[i]];
        for k in 0..i {
            s -= l[i][k] * y[k];
        }
        y[i] = s / l[i][i];
    }
    let mut z = [0.0; 4];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k][i] * z[k];
        }
        z[i] = s / l[i][i];
    }
    let mut out = [0.0; 4];
    for (k, &i) in idx.iter().enumerate() {
        out[i] = z[k];
    }
    Some(out)
}

/// Lawson–Hanson active-set least squares in normal-equation form, with
/// columns 0 and 1 constrained to be non-negative and columns 2 and 3 free.
fn nnls(g: &[[f64; 4]; 4], h: &[f64; 4]) -> Result<[f64; 4]> {
    const CONSTRAINED: [bool; 4] = [true, true, false, false];
    let mut passive = [false, false, true, true];
    let indices = |p: &[bool; 4]| -> Vec<usize> { (0..4).filter(|&i| p[i]).collect() };
    let singular = || Error::Numeric("singular unmixing subproblem".into());
    let mut x = cholesky_solve(g, &indices(&passive), h).ok_or_else(singular)?;
    for _ in 0..3 * 4 {
        let w: Vec<f64> = (0..4).map(|i| h[i] - (0..4).map(|j| g[i][j] * x[j]).sum::<f64>()).collect();
        let Some(j) = (0..4)
            .filter(|&i| CONSTRAINED[i] && !passive[i] && w[i] > NNLS_TOLERANCE)
            .max_by(|&a, &b| w[a].total_cmp(&w[b]))
        else {
            return Ok(x);
        };
        passive[j] = true;
        loop {
            let z = cholesky_solve(g, &indices(&passive), h).ok_or_else(singular)?;
            let infeasible: Vec<usize> = (0..4).filter(|&i| CONSTRAINED[i] && passive[i] && z[i] <= 0.0).collect();
            if infeasible.is_empty() {
                x = z;
                break;
            }
            let alpha = infeasible.iter().map(|&i| x[i] / (x[i] - z[i])).fold(f64::INFINITY, f64::min);
            for i in 0..4 {
                if passive[i] {
                    x[i] += alpha * (z[i] - x[i]);
                }
            }
            for i in 0..4 {
                if CONSTRAINED[i] && passive[i] && x[i] <= NNLS_TOLERANCE {
                    passive[i] = false;
                    x[i] = 0.0;
                }
            }
        }
    }
    Ok(x)
}

/// Result of unmixing one spectrum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Unmixed {
    pub so2: f64,
    /// `[c_HbO2, c_Hb, offset, slope]`.
    pub coefficients: [f64; 4],
    /// Set when both hemoglobin concentrations vanish; `so2` is then 0.5.
    pub degenerate: bool,
}

fn apply_correction(spectrum: &[f64], correction: Option<&[f64]>, out: &mut [f64]) {
    match correction {
        Some(c) => {
            let n = spectrum.len();
            for (r, o) in out.iter_mut().enumerate() {
                *o = c[r * n..(r + 1) * n].iter().zip(spectrum).map(|(a, b)| a * b).sum();
            }
        }
        None => out.copy_from_slice(spectrum),
    }
}

fn check_correction(bands: usize, correction: Option<&[f64]>) -> Result<()> {
    match correction {
        Some(c) if c.len() != bands * bands => Err(Error::shape(format!("correction matrix must be {bands}x{bands}"))),
        _ => Ok(()),
    }
}

/// Oxygen saturation of one band spectrum. `correction` is a row-major
/// `bands × bands` matrix applied before taking absorbance.
pub fn unmix_so2(spectrum: &[f64], em: &EndmemberMatrix, correction: Option<&[f64]>) -> Result<Unmixed> {
    if spectrum.len() != em.bands {
        return Err(Error::shape(format!("spectrum has {} bands, endmembers {}", spectrum.len(), em.bands)));
    }
    check_correction(em.bands, correction)?;
    let mut corrected = vec![0.0; em.bands];
    apply_correction(spectrum, correction, &mut corrected);
    unmix_corrected(&corrected, em)
}

fn unmix_corrected(r: &[f64], em: &EndmemberMatrix) -> Result<Unmixed> {
    let mut h = [0.0; 4];
    for (b, &v) in r.iter().enumerate() {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::Domain(format!("band {b} reflectance {v} has no absorbance")));
        }
        let a = -v.ln();
        let row = em.row(b);
        for i in 0..4 {
            h[i] += row[i] * a;
        }
    }
    let c = nnls(&em.gram, &h)?;
    let total = c[0] + c[1];
    if total <= 1e-12 {
        return Ok(Unmixed { so2: 0.5, coefficients: c, degenerate: true });
    }
    Ok(Unmixed { so2: (c[0] / total).clamp(0.0, 1.0), coefficients: c, degenerate: false })
}

/// Per-pixel unmixing of a cube. Pixels that cannot be unmixed are set to
/// 0.5 and flagged rather than failing the whole map.
pub fn unmix_map(cube: &Hypercube, em: &EndmemberMatrix, correction: Option<&[f64]>) -> Result<OxygenationMap> {
    let bands = cube.bands;
    if bands != em.bands {
        return Err(Error::shape(format!("cube has {bands} bands, endmembers {}", em.bands)));
    }
    check_correction(bands, correction)?;
    let mut map = OxygenationMap::new(cube.height, cube.width, vec![0.5; cube.pixels()])?;
    map.values
        .par_chunks_mut(cube.width)
        .zip(map.degenerate.par_chunks_mut(cube.width))
        .zip(cube.data.par_chunks(cube.width * bands))
        .for_each(|((values, flags), row)| {
            let mut raw = vec![0.0; bands];
            let mut corrected = vec![0.0; bands];
            for ((v, f), px) in values.iter_mut().zip(flags.iter_mut()).zip(row.chunks_exact(bands)) {
                raw.iter_mut().zip(px).for_each(|(d, &s)| *d = s as f64);
                apply_correction(&raw, correction, &mut corrected);
                match unmix_corrected(&corrected, em) {
                    Ok(u) => {
                        *v = u.so2 as f32;
                        *f = u.degenerate;
                    }
                    Err(_) => *f = true,
                }
            }
        });
    Ok(map)
}
