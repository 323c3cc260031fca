//! Camera-domain samples: penetration-weighted oxygenation labels, band
//! adaptation through a snapshot camera model, noise injection and
//! area-under-curve normalization.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optics::{parse_csv_row, TissueSample};
use crate::scalar::Scalar;
use crate::transport::{default_wavelengths, SimulatedSpectrum};

/// Domain of origin of a spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    Simulated,
    Real,
}

impl Domain {
    pub fn label(self) -> u8 {
        match self {
            Domain::Simulated => 0,
            Domain::Real => 1,
        }
    }

    pub fn from_label(label: u8) -> Option<Self> {
        match label {
            0 => Some(Domain::Simulated),
            1 => Some(Domain::Real),
            _ => None,
        }
    }
}

/// Reflectance per camera band.
#[derive(Debug, Clone, PartialEq)]
pub struct BandSpectrum<T> {
    pub values: Vec<T>,
    /// Set once the trapezoidal area over the band axis has been scaled to 1.
    pub normalized: bool,
}

impl<T: Scalar> BandSpectrum<T> {
    pub fn new(values: Vec<T>) -> Self {
        Self { values, normalized: false }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> BandSpectrum<U> {
        BandSpectrum { values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(), normalized: self.normalized }
    }
}

/// Trapezoidal area under `values` with unit spacing between bands.
pub fn band_area<T: Scalar>(values: &[T]) -> T {
    match values.len() {
        0 => T::zero(),
        1 => values[0],
        n => {
            let inner: T = values.iter().copied().sum();
            inner - (values[0] + values[n - 1]) * T::lit(0.5)
        }
    }
}

/// Scales `spectrum` so its trapezoidal area over the band index equals 1.
pub fn auc_normalize<T: Scalar>(spectrum: &BandSpectrum<T>) -> Result<BandSpectrum<T>> {
    if spectrum.normalized {
        return Ok(spectrum.clone());
    }
    let values = normalize_values(&spectrum.values)?;
    Ok(BandSpectrum { values, normalized: true })
}

pub(crate) fn normalize_values<T: Scalar>(values: &[T]) -> Result<Vec<T>> {
    let area = band_area(values);
    if !(area > T::zero()) || !area.is_finite() {
        return Err(Error::Numeric(format!("cannot normalize spectrum with area {area}")));
    }
    Ok(values.iter().map(|&v| v / area).collect())
}

/// A camera-domain spectrum with its label and domain of origin. Real
/// spectra carry no oxygenation label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample<T> {
    pub spectrum: BandSpectrum<T>,
    pub oxygenation: Option<T>,
    pub domain: Domain,
}

/// Penetration-weighted oxygenation of a layered tissue.
///
/// For every wavelength the probed interval `[0, p(λ)]` is split over the
/// layers; the per-wavelength saturation is the thickness-weighted mean of
/// the layer saturations inside it, and the label is the mean over all
/// wavelengths.
pub fn label_oxygenation(tissue: &TissueSample, penetration: &[f64]) -> Result<f64> {
    if penetration.is_empty() {
        return Err(Error::Domain("empty penetration depth array".into()));
    }
    if let Some(p) = penetration.iter().find(|&&p| !(p > 0.0) || !p.is_finite()) {
        return Err(Error::Domain(format!("penetration depth {p} must be positive")));
    }
    if tissue.layers.iter().any(|l| !(l.thickness > 0.0)) {
        return Err(Error::Domain("layer thickness must be positive".into()));
    }
    let reference = tissue.layers[0].oxygenation;
    let mut sum = 0.0;
    for &p in penetration {
        let mut top = 0.0;
        let mut weighted = 0.0;
        let mut covered = 0.0;
        for layer in &tissue.layers {
            let bottom = top + layer.thickness;
            let overlap = (p.min(bottom) - top).max(0.0);
            weighted += overlap * (layer.oxygenation - reference);
            covered += overlap;
            top = bottom;
        }
        sum += weighted / covered;
    }
    Ok(reference + sum / penetration.len() as f64)
}

/// Band response, illumination and optics of a multispectral camera,
/// sampled on the simulation wavelength grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub wavelengths: Vec<f64>,
    /// `response[b][j]`: sensitivity of band `b` at `wavelengths[j]`.
    pub response: Vec<Vec<f64>>,
    pub light_source: Vec<f64>,
    pub transmission: Vec<f64>,
    /// Row-major `bands × bands` matrix, applied only before unmixing.
    pub correction: Vec<f64>,
    pub band_centers: Vec<f64>,
    /// `s·L·T` times the trapezoid weight, per band and wavelength.
    weights: Vec<Vec<f64>>,
    denominators: Vec<f64>,
}

impl CameraModel {
    pub fn new(
        wavelengths: Vec<f64>,
        response: Vec<Vec<f64>>,
        light_source: Vec<f64>,
        transmission: Vec<f64>,
        correction: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = wavelengths.len();
        if n < 2 || wavelengths.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::config("camera wavelength grid must be strictly increasing"));
        }
        if response.is_empty() {
            return Err(Error::config("camera needs at least one band"));
        }
        if light_source.len() != n || transmission.len() != n || response.iter().any(|r| r.len() != n) {
            return Err(Error::shape("camera curves must match the wavelength grid"));
        }
        if light_source.iter().chain(&transmission).any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::config("light source and transmission must be positive"));
        }
        let bands = response.len();
        for (b, r) in response.iter().enumerate() {
            if r.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::config(format!("band {b} response must be non-negative")));
            }
        }
        let correction = match correction {
            Some(c) if c.len() != bands * bands => {
                return Err(Error::shape(format!("correction matrix must be {bands}x{bands}")))
            }
            Some(c) => c,
            None => identity(bands),
        };
        let trap = trapezoid_weights(&wavelengths);
        let weights: Vec<Vec<f64>> = response
            .iter()
            .map(|r| (0..n).map(|j| r[j] * light_source[j] * transmission[j] * trap[j]).collect())
            .collect();
        let denominators: Vec<f64> = weights.iter().map(|w| w.iter().sum()).collect();
        if let Some(b) = denominators.iter().position(|&d| !(d > 0.0)) {
            return Err(Error::config(format!("band {b} has zero integrated response")));
        }
        let band_centers = response
            .iter()
            .map(|r| {
                let total: f64 = r.iter().sum();
                r.iter().zip(&wavelengths).map(|(s, w)| s * w).sum::<f64>() / total
            })
            .collect();
        Ok(Self { wavelengths, response, light_source, transmission, correction, band_centers, weights, denominators })
    }

    pub fn bands(&self) -> usize {
        self.response.len()
    }

    /// Normalized band weights: `r(b) = Σ_j weight[b][j] · r(λ_j)`.
    pub fn band_weights(&self) -> Vec<Vec<f64>> {
        self.weights.iter().zip(&self.denominators).map(|(w, d)| w.iter().map(|v| v / d).collect()).collect()
    }

    /// Noise-free band projection of a spectrum sampled on the camera grid.
    pub fn project(&self, spectrum: &[f64]) -> Result<Vec<f64>> {
        if spectrum.len() != self.wavelengths.len() {
            return Err(Error::shape(format!(
                "spectrum has {} samples, camera grid {}",
                spectrum.len(),
                self.wavelengths.len()
            )));
        }
        Ok(self
            .weights
            .iter()
            .zip(&self.denominators)
            .map(|(w, d)| w.iter().zip(spectrum).map(|(a, b)| a * b).sum::<f64>() / d)
            .collect())
    }
}

pub(crate) fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

fn trapezoid_weights(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|j| {
            let left = if j > 0 { x[j] - x[j - 1] } else { 0.0 };
            let right = if j + 1 < n { x[j + 1] - x[j] } else { 0.0 };
            0.5 * (left + right)
        })
        .collect()
}

/// Standard deviation of additive noise giving `snr_db` against `signal`.
pub fn noise_sigma(signal: f64, snr_db: f64) -> f64 {
    signal.abs() * 10f64.powf(-snr_db / 20.0)
}

/// Adds zero-mean Gaussian noise to each value at the given per-band SNR.
pub fn add_band_noise<T: Scalar, R: Rng + ?Sized>(values: &mut [T], snr_db: f64, rng: &mut R) {
    for v in values {
        let sigma = noise_sigma(v.as_f64(), snr_db);
        let z: f64 = StandardNormal.sample(rng);
        *v = T::lit(v.as_f64() + sigma * z);
    }
}

/// Projects a simulated reflectance spectrum onto the camera bands.
///
/// The camera noise term enters the numerator of the band integral; it is
/// drawn so that the resulting per-band reflectance noise has standard
/// deviation `|r(b)| · 10^(-snr/20)`. No normalization is applied.
pub fn adapt_to_camera<R: Rng + ?Sized>(
    spectrum: &SimulatedSpectrum,
    cam: &CameraModel,
    noise_snr_db: Option<f64>,
    rng: &mut R,
) -> Result<BandSpectrum<f64>> {
    if spectrum.wavelengths.len() != cam.wavelengths.len()
        || spectrum.wavelengths.iter().zip(&cam.wavelengths).any(|(a, b)| (a - b).abs() > 1e-9)
    {
        return Err(Error::shape("simulated spectrum grid does not match the camera grid"));
    }
    let mut values = cam.project(&spectrum.reflectance)?;
    if let Some(snr) = noise_snr_db {
        add_band_noise(&mut values, snr, rng);
    }
    Ok(BandSpectrum::new(values))
}

/// Camera description; the default is 16 Gaussian bands evenly spaced on
/// 460–600 nm under flat illumination and optics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    pub bands: usize,
    pub fwhm_nm: f64,
    pub first_center_nm: f64,
    pub last_center_nm: f64,
    pub wavelength_start_nm: f64,
    pub wavelength_step_nm: f64,
    pub wavelength_count: usize,
    /// `wavelength_nm,band_0,...` response curves.
    pub response_csv: Option<PathBuf>,
    /// `wavelength_nm,value` light source irradiance.
    pub light_source_csv: Option<PathBuf>,
    /// `wavelength_nm,value` optics transmission.
    pub transmission_csv: Option<PathBuf>,
    /// `bands` rows of `bands` comma-separated values.
    pub correction_csv: Option<PathBuf>,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            bands: 16,
            fwhm_nm: 15.0,
            first_center_nm: 460.0,
            last_center_nm: 600.0,
            wavelength_start_nm: 440.0,
            wavelength_step_nm: 4.0,
            wavelength_count: 51,
            response_csv: None,
            light_source_csv: None,
            transmission_csv: None,
            correction_csv: None,
        }
    }
}

impl CameraConfig {
    pub fn wavelengths(&self) -> Vec<f64> {
        if self.wavelength_start_nm == 440.0 && self.wavelength_step_nm == 4.0 && self.wavelength_count == 51 {
            return default_wavelengths();
        }
        (0..self.wavelength_count).map(|i| self.wavelength_start_nm + self.wavelength_step_nm * i as f64).collect()
    }

    pub fn band_centers(&self) -> Vec<f64> {
        if self.bands == 1 {
            return vec![0.5 * (self.first_center_nm + self.last_center_nm)];
        }
        let span = self.last_center_nm - self.first_center_nm;
        (0..self.bands).map(|k| self.first_center_nm + k as f64 * span / (self.bands - 1) as f64).collect()
    }

    /// Paths that must exist for the configuration to be usable.
    pub fn referenced_paths(&self) -> Vec<&Path> {
        [&self.response_csv, &self.light_source_csv, &self.transmission_csv, &self.correction_csv]
            .into_iter()
            .filter_map(|p| p.as_deref())
            .collect()
    }
}

/// Builds the camera model, loading any CSV-supplied curves.
pub fn make_camera_model(config: &CameraConfig) -> Result<CameraModel> {
    if config.bands == 0 {
        return Err(Error::config("camera.bands must be >= 1"));
    }
    if !(config.fwhm_nm > 0.0) {
        return Err(Error::config("camera.fwhm_nm must be > 0"));
    }
    if config.wavelength_count < 2 || !(config.wavelength_step_nm > 0.0) {
        return Err(Error::config("camera wavelength grid needs >= 2 points and a positive step"));
    }
    let grid = config.wavelengths();
    let response = match &config.response_csv {
        Some(path) => {
            let (wl, cols) = read_curve_csv(path, Some(config.bands))?;
            cols.iter().map(|c| resample(&wl, c, &grid, path)).collect::<Result<Vec<_>>>()?
        }
        None => {
            let sigma = config.fwhm_nm / (2.0 * (2.0 * 2f64.ln()).sqrt());
            config
                .band_centers()
                .iter()
                .map(|&c| grid.iter().map(|&w| (-0.5 * ((w - c) / sigma).powi(2)).exp()).collect())
                .collect()
        }
    };
    let single = |p: &Option<PathBuf>| -> Result<Vec<f64>> {
        match p {
            Some(path) => {
                let (wl, cols) = read_curve_csv(path, Some(1))?;
                resample(&wl, &cols[0], &grid, path)
            }
            None => Ok(vec![1.0; grid.len()]),
        }
    };
    let light = single(&config.light_source_csv)?;
    let transmission = single(&config.transmission_csv)?;
    let correction = match &config.correction_csv {
        Some(path) => Some(read_matrix_csv(path, config.bands)?),
        None => None,
    };
    CameraModel::new(grid, response, light, transmission, correction)
}

/// Reads `wavelength_nm,<columns...>`; returns the wavelength column and
/// each value column.
fn read_curve_csv(path: &Path, expected_columns: Option<usize>) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::config(format!("{}: empty csv", path.display())))?;
    let names: Vec<&str> = header.split(',').map(str::trim).collect();
    if names.first() != Some(&"wavelength_nm") {
        return Err(Error::config(format!("{}: first column must be wavelength_nm", path.display())));
    }
    let columns = names.len() - 1;
    if let Some(expected) = expected_columns {
        if columns != expected {
            return Err(Error::config(format!("{}: expected {expected} value columns, found {columns}", path.display())));
        }
    }
    let mut wl = Vec::new();
    let mut cols = vec![Vec::new(); columns];
    for (i, line) in lines.enumerate() {
        let row = parse_csv_row(line, columns + 1).map_err(|e| Error::config(format!("{} row {}: {e}", path.display(), i + 1)))?;
        wl.push(row[0]);
        for (c, v) in cols.iter_mut().zip(&row[1..]) {
            c.push(*v);
        }
    }
    if wl.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::config(format!("{}: wavelengths must be strictly increasing", path.display())));
    }
    Ok((wl, cols))
}

pub(crate) fn read_matrix_csv(path: &Path, n: usize) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::with_capacity(n * n);
    let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if rows.len() != n {
        return Err(Error::config(format!("{}: expected {n} rows, found {}", path.display(), rows.len())));
    }
    for (i, line) in rows.iter().enumerate() {
        out.extend(parse_csv_row(line, n).map_err(|e| Error::config(format!("{} row {}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

/// Linear resampling of a curve onto `grid`, which it must cover.
fn resample(x: &[f64], y: &[f64], grid: &[f64], path: &Path) -> Result<Vec<f64>> {
    let (lo, hi) = (grid[0], grid[grid.len() - 1]);
    if x.is_empty() || x[0] > lo + 1e-9 || x[x.len() - 1] < hi - 1e-9 {
        return Err(Error::config(format!("{}: curve does not cover [{lo}, {hi}] nm", path.display())));
    }
    Ok(grid
        .iter()
        .map(|&g| {
            let i = x.partition_point(|&v| v < g);
            if i < x.len() && (x[i] - g).abs() <= 1e-9 {
                return y[i];
            }
            let i = i.clamp(1, x.len() - 1);
            let t = (g - x[i - 1]) / (x[i] - x[i - 1]);
            y[i - 1] + t * (y[i] - y[i - 1])
        })
        .collect())
}

/// Writes the response matrix as `wavelength_nm,band_0,...` CSV.
pub fn write_response_csv(cam: &CameraModel, path: &Path) -> Result<()> {
    let mut s = String::from("wavelength_nm");
    for b in 0..cam.bands() {
        s.push_str(&format!(",band_{b}"));
    }
    s.push('\n');
    for (j, w) in cam.wavelengths.iter().enumerate() {
        s.push_str(&format!("{w}"));
        for r in &cam.response {
            s.push_str(&format!(",{:e}", r[j]));
        }
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::LayerParams;
    use crate::rng::rng_from_seed;

    fn tissue(s: [f64; 3], d: [f64; 3]) -> TissueSample {
        let base = LayerParams {
            oxygenation: 0.0,
            blood_volume_fraction: 0.05,
            thickness: 1.0,
            scatter_amplitude: 20.0,
            scatter_power: 1.0,
            anisotropy: 0.9,
            refractive_index: 1.4,
        };
        let mk = |i: usize| LayerParams { oxygenation: s[i], thickness: d[i], ..base };
        TissueSample { layers: [mk(0), mk(1), mk(2)], seed: 0 }
    }

    fn sim(reflectance: Vec<f64>) -> SimulatedSpectrum {
        let n = reflectance.len();
        SimulatedSpectrum {
            wavelengths: default_wavelengths(),
            reflectance,
            penetration_depth: vec![1.0; n],
            n_photons: 1,
            seed: 0,
            degenerate: vec![false; n],
        }
    }

    #[test]
    fn homogeneous_oxygenation_label() {
        let t = tissue([0.7; 3], [0.3, 0.5, 0.9]);
        for p in [vec![0.1], vec![0.5, 1.2, 1.7], vec![1.7; 51]] {
            assert_eq!(label_oxygenation(&t, &p).unwrap(), 0.7);
        }
    }

    #[test]
    fn shallow_penetration_sees_only_the_top_layer() {
        let t = tissue([0.9, 0.2, 0.1], [0.5, 1.0, 1.0]);
        assert_eq!(label_oxygenation(&t, &[0.1, 0.3, 0.5]).unwrap(), 0.9);
    }

    #[test]
    fn overlap_fractions() {
        let t = tissue([1.0, 0.0, 0.0], [0.5, 1.0, 1.0]);
        assert!((label_oxygenation(&t, &[1.0; 51]).unwrap() - 0.5).abs() < 1e-15);
        // p spans the whole stack: 0.5/2.5 of it is the top layer
        assert!((label_oxygenation(&t, &[2.5]).unwrap() - 0.2).abs() < 1e-15);
        // mean over wavelengths
        assert!((label_oxygenation(&t, &[0.5, 1.0]).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn label_rejects_non_positive_depth() {
        let t = tissue([0.5; 3], [1.0; 3]);
        assert!(label_oxygenation(&t, &[0.2, 0.0]).is_err());
        assert!(label_oxygenation(&t, &[]).is_err());
    }

    #[test]
    fn flat_spectrum_is_preserved() {
        let cam = make_camera_model(&CameraConfig::default()).unwrap();
        let out = adapt_to_camera(&sim(vec![0.37; 51]), &cam, None, &mut rng_from_seed(0)).unwrap();
        assert_eq!(out.len(), 16);
        assert!(out.values.iter().all(|v| (v - 0.37).abs() < 1e-14));
        assert!(!out.normalized);
    }

    #[test]
    fn delta_responses_sample_the_spectrum() {
        let wl = default_wavelengths();
        let picks = [3usize, 10, 27, 50];
        let response = picks
            .iter()
            .map(|&j| (0..wl.len()).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let cam = CameraModel::new(wl.clone(), response, vec![2.0; 51], vec![0.5; 51], None).unwrap();
        let r: Vec<f64> = (0..51).map(|i| 0.1 + 0.01 * i as f64).collect();
        let out = adapt_to_camera(&sim(r.clone()), &cam, None, &mut rng_from_seed(0)).unwrap();
        for (b, &j) in picks.iter().enumerate() {
            assert!((out.values[b] - r[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn default_band_centers_are_evenly_spaced() {
        let cam = make_camera_model(&CameraConfig::default()).unwrap();
        let centers = CameraConfig::default().band_centers();
        for (k, c) in centers.iter().enumerate() {
            assert!((c - (460.0 + k as f64 * 140.0 / 15.0)).abs() < 1e-12);
        }
        assert_eq!(centers[15], 600.0);
        // centroids of the sampled Gaussians sit on the configured centers
        for (c, g) in centers.iter().zip(&cam.band_centers) {
            assert!((c - g).abs() < 0.05, "{c} vs {g}");
        }
    }

    #[test]
    fn single_flat_band_is_weighted_mean() {
        let wl = default_wavelengths();
        let light: Vec<f64> = (0..51).map(|i| 1.0 + 0.02 * i as f64).collect();
        let cam = CameraModel::new(wl.clone(), vec![vec![1.0; 51]], light.clone(), vec![1.0; 51], None).unwrap();
        let r: Vec<f64> = (0..51).map(|i| (i as f64 * 0.3).sin().abs()).collect();
        let out = adapt_to_camera(&sim(r.clone()), &cam, None, &mut rng_from_seed(0)).unwrap();
        let trap = trapezoid_weights(&wl);
        let num: f64 = (0..51).map(|j| r[j] * light[j] * trap[j]).sum();
        let den: f64 = (0..51).map(|j| light[j] * trap[j]).sum();
        assert!((out.values[0] - num / den).abs() < 1e-14);
    }

    #[test]
    fn grid_mismatch_is_a_shape_error() {
        let cam = make_camera_model(&CameraConfig::default()).unwrap();
        let mut s = sim(vec![0.1; 51]);
        s.wavelengths[3] += 1.0;
        assert!(matches!(adapt_to_camera(&s, &cam, None, &mut rng_from_seed(0)), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_response_band_is_rejected() {
        let wl = default_wavelengths();
        let r = CameraModel::new(wl, vec![vec![0.0; 51]], vec![1.0; 51], vec![1.0; 51], None);
        assert!(r.is_err());
    }

    #[test]
    fn normalization_closed_form_and_idempotence() {
        let s = BandSpectrum::new(vec![0.3f64; 16]);
        let n = auc_normalize(&s).unwrap();
        assert!(n.values.iter().all(|v| (v - 1.0 / 15.0).abs() < 1e-15));
        assert!((band_area(&n.values) - 1.0).abs() < 1e-12);
        assert_eq!(auc_normalize(&n).unwrap(), n);
        let again = auc_normalize(&BandSpectrum::new(n.values.clone())).unwrap();
        for (a, b) in again.values.iter().zip(&n.values) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn normalization_rejects_non_positive_area() {
        assert!(auc_normalize(&BandSpectrum::new(vec![0.0f64; 16])).is_err());
        assert!(auc_normalize(&BandSpectrum::new(vec![-1.0f64; 16])).is_err());
    }

    #[test]
    fn noise_hits_the_requested_snr() {
        let cam = make_camera_model(&CameraConfig::default()).unwrap();
        let r: Vec<f64> = (0..51).map(|i| 0.05 + 0.004 * i as f64).collect();
        let s = sim(r);
        let clean = adapt_to_camera(&s, &cam, None, &mut rng_from_seed(0)).unwrap();
        let mut rng = rng_from_seed(42);
        let reps = 10_000;
        let mut sq = vec![0.0; 16];
        for _ in 0..reps {
            let noisy = adapt_to_camera(&s, &cam, Some(40.0), &mut rng).unwrap();
            for b in 0..16 {
                sq[b] += (noisy.values[b] - clean.values[b]).powi(2);
            }
        }
        for b in 0..16 {
            let rms = (sq[b] / reps as f64).sqrt();
            let snr = 20.0 * (clean.values[b] / rms).log10();
            assert!((snr - 40.0).abs() < 0.5, "band {b}: {snr} dB");
        }
    }

    #[test]
    fn band_projection_is_linear() {
        let cam = make_camera_model(&CameraConfig::default()).unwrap();
        let r1: Vec<f64> = (0..51).map(|i| 0.1 + 0.3 * (i as f64 / 9.0).sin().abs()).collect();
        let r2: Vec<f64> = (0..51).map(|i| 0.02 * i as f64).collect();
        let mix: Vec<f64> = r1.iter().zip(&r2).map(|(a, b)| 0.3 * a + 1.7 * b).collect();
        let (a, b, m) = (cam.project(&r1).unwrap(), cam.project(&r2).unwrap(), cam.project(&mix).unwrap());
        for k in 0..16 {
            assert!((m[k] - (0.3 * a[k] + 1.7 * b[k])).abs() < 1e-14);
        }
    }

    #[test]
    fn normalized_path_ignores_illumination_scale() {
        let cam = make_camera_model(&CameraConfig::default()).unwrap();
        let r: Vec<f64> = (0..51).map(|i| 0.05 + 0.01 * (i as f64 / 4.0).cos().powi(2)).collect();
        let base = auc_normalize(&adapt_to_camera(&sim(r.clone()), &cam, None, &mut rng_from_seed(0)).unwrap()).unwrap();
        for c in [0.1, 10.0, 3.7] {
            let scaled = sim(r.iter().map(|v| v * c).collect());
            let out = auc_normalize(&adapt_to_camera(&scaled, &cam, None, &mut rng_from_seed(0)).unwrap()).unwrap();
            for (x, y) in out.values.iter().zip(&base.values) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn csv_response_round_trip() {
        let dir = std::env::temp_dir().join(format!("oxyspec-cam-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let cfg = CameraConfig::default();
        let cam = make_camera_model(&cfg).unwrap();
        let path = dir.join("response.csv");
        write_response_csv(&cam, &path).unwrap();
        let loaded = make_camera_model(&CameraConfig { response_csv: Some(path), ..cfg }).unwrap();
        let r: Vec<f64> = (0..51).map(|i| 0.2 + 0.1 * (i as f64 / 7.0).cos()).collect();
        let a = cam.project(&r).unwrap();
        let b = loaded.project(&r).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }

        let short = dir.join("short.csv");
        std::fs::write(&short, "wavelength_nm,value\n450,1\n640,1\n").unwrap();
        let err = make_camera_model(&CameraConfig { light_source_csv: Some(short), ..Default::default() });
        assert!(err.unwrap_err().to_string().contains("cover"));
        std::fs::remove_dir_all(&dir).ok();
    }
}
