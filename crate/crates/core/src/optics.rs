//! Layered tissue model, prior sampling and per-wavelength optical
//! coefficients.

use std::f64::consts::LN_10;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, streams};

/// Whole-blood hemoglobin concentration, g/L.
pub const BLOOD_HEMOGLOBIN_G_PER_L: f64 = 150.0;
/// Molar mass of hemoglobin, g/mol.
pub const HEMOGLOBIN_MOLAR_MASS: f64 = 64_500.0;
/// Molar hemoglobin concentration of whole blood, mol/L.
pub const HEME_MOLAR_CONCENTRATION: f64 = BLOOD_HEMOGLOBIN_G_PER_L / HEMOGLOBIN_MOLAR_MASS;

/// Reference wavelength of the scattering power law, nm.
pub const SCATTER_REFERENCE_NM: f64 = 500.0;

pub const LAYER_COUNT: usize = 3;
pub const LAYER_NAMES: [&str; LAYER_COUNT] = ["serosa", "muscularis", "submucosa"];

const BUNDLED_EXTINCTION: &str = include_str!("../data/hemoglobin_extinction.csv");

/// Physiological parameters of one tissue layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// Hemoglobin oxygen saturation, fraction.
    pub oxygenation: f64,
    /// Blood volume fraction.
    pub blood_volume_fraction: f64,
    /// mm.
    pub thickness: f64,
    /// Reduced scattering coefficient at 500 nm, 1/cm.
    pub scatter_amplitude: f64,
    /// Mie power-law exponent.
    pub scatter_power: f64,
    pub anisotropy: f64,
    pub refractive_index: f64,
}

impl LayerParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Domain(format!("{name} = {v} outside [0, 1]")))
            }
        };
        unit("oxygenation", self.oxygenation)?;
        unit("blood_volume_fraction", self.blood_volume_fraction)?;
        if !(self.thickness > 0.0) {
            return Err(Error::Domain(format!("thickness = {} must be > 0", self.thickness)));
        }
        if !(self.scatter_amplitude >= 0.0) {
            return Err(Error::Domain(format!("scatter_amplitude = {} must be >= 0", self.scatter_amplitude)));
        }
        if !(self.anisotropy > -1.0 && self.anisotropy < 1.0) {
            return Err(Error::Domain(format!("anisotropy = {} outside (-1, 1)", self.anisotropy)));
        }
        if !(self.refractive_index >= 1.0) {
            return Err(Error::Domain(format!("refractive_index = {} must be >= 1", self.refractive_index)));
        }
        Ok(())
    }
}

/// Three-layer tissue, outermost layer first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TissueSample {
    pub layers: [LayerParams; LAYER_COUNT],
    pub seed: u64,
}

impl TissueSample {
    pub fn total_thickness(&self) -> f64 {
        self.layers.iter().map(|l| l.thickness).sum()
    }

    /// Cumulative depth of the bottom of each layer, mm.
    pub fn layer_boundaries(&self) -> [f64; LAYER_COUNT] {
        let mut acc = 0.0;
        self.layers.map(|l| {
            acc += l.thickness;
            acc
        })
    }

    /// Number of voxel slices needed to hold the stack.
    pub fn depth_voxels(&self, voxel_size: f64) -> usize {
        voxel_count(self.total_thickness(), voxel_size)
    }
}

pub(crate) fn voxel_count(depth: f64, voxel_size: f64) -> usize {
    // Guards against 1.0 / 0.01 = 100.00000000000001 style overshoot.
    let ratio = depth / voxel_size;
    let rounded = ratio.round();
    let n = if (ratio - rounded).abs() < 1e-9 * ratio.max(1.0) { rounded } else { ratio.ceil() };
    (n as usize).max(1)
}

/// Closed uniform range `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.gen();
        self.lo + (self.hi - self.lo) * u
    }
}

/// Uniform prior ranges for every field of [`LayerParams`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayerPriors {
    pub oxygenation: Range,
    pub blood_volume_fraction: Range,
    pub thickness: Range,
    pub scatter_amplitude: Range,
    pub scatter_power: Range,
    pub anisotropy: Range,
    pub refractive_index: Range,
}

impl Default for LayerPriors {
    fn default() -> Self {
        Self {
            oxygenation: Range::new(0.0, 1.0),
            blood_volume_fraction: Range::new(0.0, 0.30),
            thickness: Range::new(0.2, 2.0),
            scatter_amplitude: Range::new(5.0, 50.0),
            scatter_power: Range::new(0.3, 3.0),
            anisotropy: Range::new(0.80, 0.95),
            refractive_index: Range::new(1.33, 1.54),
        }
    }
}

impl LayerPriors {
    /// Prior that always yields `layer`.
    pub fn point(layer: &LayerParams) -> Self {
        Self {
            oxygenation: Range::point(layer.oxygenation),
            blood_volume_fraction: Range::point(layer.blood_volume_fraction),
            thickness: Range::point(layer.thickness),
            scatter_amplitude: Range::point(layer.scatter_amplitude),
            scatter_power: Range::point(layer.scatter_power),
            anisotropy: Range::point(layer.anisotropy),
            refractive_index: Range::point(layer.refractive_index),
        }
    }

    fn fields(&self) -> [(&'static str, Range); 7] {
        [
            ("oxygenation", self.oxygenation),
            ("blood_volume_fraction", self.blood_volume_fraction),
            ("thickness", self.thickness),
            ("scatter_amplitude", self.scatter_amplitude),
            ("scatter_power", self.scatter_power),
            ("anisotropy", self.anisotropy),
            ("refractive_index", self.refractive_index),
        ]
    }

    fn validate(&self, scope: &str) -> Result<()> {
        for (name, r) in self.fields() {
            if !(r.lo.is_finite() && r.hi.is_finite()) {
                return Err(Error::config(format!("{scope}.{name}: range bounds must be finite")));
            }
            if r.lo > r.hi {
                return Err(Error::config(format!("{scope}.{name}: lo {} > hi {}", r.lo, r.hi)));
            }
        }
        // The extremes of each range must themselves be admissible layers.
        for pick in [|r: Range| r.lo, |r: Range| r.hi] {
            let layer = LayerParams {
                oxygenation: pick(self.oxygenation),
                blood_volume_fraction: pick(self.blood_volume_fraction),
                thickness: pick(self.thickness),
                scatter_amplitude: pick(self.scatter_amplitude),
                scatter_power: pick(self.scatter_power),
                anisotropy: pick(self.anisotropy),
                refractive_index: pick(self.refractive_index),
            };
            layer.validate().map_err(|e| Error::config(format!("{scope}: {e}")))?;
        }
        Ok(())
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> LayerParams {
        LayerParams {
            oxygenation: self.oxygenation.sample(rng),
            blood_volume_fraction: self.blood_volume_fraction.sample(rng),
            thickness: self.thickness.sample(rng),
            scatter_amplitude: self.scatter_amplitude.sample(rng),
            scatter_power: self.scatter_power.sample(rng),
            anisotropy: self.anisotropy.sample(rng),
            refractive_index: self.refractive_index.sample(rng),
        }
    }
}

/// Priors shared by all layers, with optional whole-layer overrides.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub shared: LayerPriors,
    pub serosa: Option<LayerPriors>,
    pub muscularis: Option<LayerPriors>,
    pub submucosa: Option<LayerPriors>,
}

impl PriorConfig {
    /// Priors that reproduce `layers` exactly.
    pub fn point(layers: &[LayerParams; LAYER_COUNT]) -> Self {
        Self {
            shared: LayerPriors::point(&layers[0]),
            serosa: Some(LayerPriors::point(&layers[0])),
            muscularis: Some(LayerPriors::point(&layers[1])),
            submucosa: Some(LayerPriors::point(&layers[2])),
        }
    }

    pub fn layer(&self, index: usize) -> &LayerPriors {
        let over = match index {
            0 => &self.serosa,
            1 => &self.muscularis,
            _ => &self.submucosa,
        };
        over.as_ref().unwrap_or(&self.shared)
    }

    pub fn validate(&self) -> Result<()> {
        self.shared.validate("priors.shared")?;
        for (i, name) in LAYER_NAMES.iter().enumerate() {
            if self.layer(i) != &self.shared {
                self.layer(i).validate(&format!("priors.{name}"))?;
            }
        }
        Ok(())
    }
}

/// Draws a three-layer tissue, each parameter independently uniform.
pub fn sample_tissue(priors: &PriorConfig, seed: u64) -> Result<TissueSample> {
    priors.validate()?;
    let mut rng = stream_rng(seed, streams::TISSUE);
    let layers = [0, 1, 2].map(|i| priors.layer(i).sample(&mut rng));
    Ok(TissueSample { layers, seed })
}

/// Molar extinction spectra of oxy- and deoxyhemoglobin.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtinctionTable {
    wavelengths: Vec<f64>,
    eps_hbo2: Vec<f64>,
    eps_hb: Vec<f64>,
}

impl ExtinctionTable {
    pub const COVERAGE: (f64, f64) = (440.0, 640.0);

    pub fn new(wavelengths: Vec<f64>, eps_hbo2: Vec<f64>, eps_hb: Vec<f64>) -> Result<Self> {
        if wavelengths.len() != eps_hbo2.len() || wavelengths.len() != eps_hb.len() {
            return Err(Error::shape("extinction columns differ in length"));
        }
        if wavelengths.len() < 2 || wavelengths.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::config("extinction wavelengths must be strictly increasing"));
        }
        if eps_hbo2.iter().chain(&eps_hb).any(|&e| !(e > 0.0) || !e.is_finite()) {
            return Err(Error::config("extinction coefficients must be positive"));
        }
        let (lo, hi) = Self::COVERAGE;
        if wavelengths[0] > lo || *wavelengths.last().unwrap() < hi {
            return Err(Error::config(format!("extinction table must cover [{lo}, {hi}] nm")));
        }
        Ok(Self { wavelengths, eps_hbo2, eps_hb })
    }

    /// Table compiled from the standard hemoglobin extinction spectrum,
    /// 400–700 nm at 2 nm, in 1/(cm·mol/L).
    pub fn bundled() -> Self {
        Self::parse_csv(BUNDLED_EXTINCTION).expect("bundled extinction table is valid")
    }

    pub fn from_csv_path(path: &Path) -> Result<Self> {
        Self::parse_csv(&std::fs::read_to_string(path)?)
    }

    /// Parses `wavelength_nm,eps_hbo2,eps_hb` rows.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::config("empty extinction csv"))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols != ["wavelength_nm", "eps_hbo2", "eps_hb"] {
            return Err(Error::config(format!("unexpected extinction header {header:?}")));
        }
        let (mut wl, mut ox, mut de) = (Vec::new(), Vec::new(), Vec::new());
        for (row, line) in lines.enumerate() {
            let vals = parse_csv_row(line, 3).map_err(|e| Error::config(format!("extinction row {}: {e}", row + 1)))?;
            wl.push(vals[0]);
            ox.push(vals[1]);
            de.push(vals[2]);
        }
        Self::new(wl, ox, de)
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    pub fn rows(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.wavelengths.iter().zip(&self.eps_hbo2).zip(&self.eps_hb).map(|((&w, &o), &d)| (w, o, d))
    }

    /// Linearly interpolated `(eps_hbo2, eps_hb)` at `wavelength`.
    pub fn extinction(&self, wavelength: f64) -> Result<(f64, f64)> {
        let wl = &self.wavelengths;
        if !(wavelength >= wl[0] && wavelength <= wl[wl.len() - 1]) {
            return Err(Error::Domain(format!(
                "wavelength {wavelength} nm outside table [{}, {}]",
                wl[0],
                wl[wl.len() - 1]
            )));
        }
        let hi = wl.partition_point(|&w| w < wavelength).max(1);
        let lo = hi - 1;
        if wl[hi] == wavelength {
            return Ok((self.eps_hbo2[hi], self.eps_hb[hi]));
        }
        let t = (wavelength - wl[lo]) / (wl[hi] - wl[lo]);
        let lerp = |v: &[f64]| v[lo] + t * (v[hi] - v[lo]);
        Ok((lerp(&self.eps_hbo2), lerp(&self.eps_hb)))
    }
}

pub(crate) fn parse_csv_row(line: &str, expected: usize) -> std::result::Result<Vec<f64>, String> {
    let vals = line
        .split(',')
        .map(|f| f.trim().parse::<f64>().map_err(|e| format!("{f:?}: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if vals.len() != expected {
        return Err(format!("expected {expected} fields, found {}", vals.len()));
    }
    Ok(vals)
}

/// Optical coefficients of one layer at one wavelength.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpticalProperties {
    /// Absorption coefficient, 1/cm.
    pub mu_a: f64,
    /// Scattering coefficient, 1/cm.
    pub mu_s: f64,
    pub g: f64,
    pub n: f64,
}

/// Absorption from blood alone and a power-law scattering spectrum.
pub fn optical_properties(layer: &LayerParams, wavelength: f64, table: &ExtinctionTable) -> Result<OpticalProperties> {
    let (eps_oxy, eps_deoxy) = table.extinction(wavelength)?;
    let s = layer.oxygenation;
    let mu_a = layer.blood_volume_fraction * HEME_MOLAR_CONCENTRATION * LN_10 * (s * eps_oxy + (1.0 - s) * eps_deoxy);
    let reduced = layer.scatter_amplitude * (wavelength / SCATTER_REFERENCE_NM).powf(-layer.scatter_power);
    let mu_s = reduced / (1.0 - layer.anisotropy);
    Ok(OpticalProperties { mu_a, mu_s, g: layer.anisotropy, n: layer.refractive_index })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer() -> LayerParams {
        LayerParams {
            oxygenation: 1.0,
            blood_volume_fraction: 0.1,
            thickness: 0.5,
            scatter_amplitude: 20.0,
            scatter_power: 1.0,
            anisotropy: 0.9,
            refractive_index: 1.4,
        }
    }

    #[test]
    fn point_priors_reproduce_the_tissue() {
        let layers = [layer(), LayerParams { oxygenation: 0.3, ..layer() }, LayerParams { thickness: 1.7, ..layer() }];
        let t = sample_tissue(&PriorConfig::point(&layers), 99).unwrap();
        assert_eq!(t.layers, layers);
        assert_eq!(t.seed, 99);
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let p = PriorConfig::default();
        assert_eq!(sample_tissue(&p, 5).unwrap(), sample_tissue(&p, 5).unwrap());
        assert_ne!(sample_tissue(&p, 5).unwrap(), sample_tissue(&p, 6).unwrap());
    }

    #[test]
    fn inverted_range_is_rejected_with_field_name() {
        let mut p = PriorConfig::default();
        p.shared.thickness = Range::new(2.0, 1.0);
        let err = sample_tissue(&p, 1).unwrap_err().to_string();
        assert!(err.contains("thickness"), "{err}");
        let mut p = PriorConfig::default();
        p.muscularis = Some(LayerPriors { anisotropy: Range::new(0.9, 0.8), ..Default::default() });
        assert!(p.validate().unwrap_err().to_string().contains("muscularis.anisotropy"));
    }

    #[test]
    fn oxygenation_draws_are_uniform() {
        // One-sample Kolmogorov–Smirnov test against U(0, 1) at alpha = 0.01.
        let p = PriorConfig::default();
        let mut xs: Vec<f64> = (0..10_000u64).map(|s| sample_tissue(&p, s).unwrap().layers[0].oxygenation).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        assert!((mean - 0.5).abs() < 0.02, "mean {mean}");
        xs.sort_by(f64::total_cmp);
        let d = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| ((i as f64 + 1.0) / n - x).max(x - i as f64 / n))
            .fold(0.0, f64::max);
        let critical = 1.628 / n.sqrt();
        assert!(d < critical, "KS statistic {d} >= {critical}");
    }

    #[test]
    fn voxel_depth_rounds_up() {
        assert_eq!(voxel_count(1.0, 0.01), 100);
        assert_eq!(voxel_count(1.001, 0.01), 101);
        assert_eq!(voxel_count(0.3, 0.1), 3);
        assert_eq!(voxel_count(1e-6, 0.01), 1);
    }

    #[test]
    fn no_blood_means_no_absorption() {
        let table = ExtinctionTable::bundled();
        let l = LayerParams { blood_volume_fraction: 0.0, ..layer() };
        for wl in (440..=640).step_by(4) {
            assert_eq!(optical_properties(&l, wl as f64, &table).unwrap().mu_a, 0.0);
        }
    }

    #[test]
    fn absorption_matches_table_row_at_500nm() {
        let table = ExtinctionTable::bundled();
        let row = table.rows().find(|r| r.0 == 500.0).unwrap();
        let expected = 0.1 * (150.0 / 64_500.0) * 10f64.ln() * row.1;
        let got = optical_properties(&layer(), 500.0, &table).unwrap().mu_a;
        assert!((got - expected).abs() <= 1e-12 * expected);
        // 20932.8 1/(cm M) from the bundled row
        assert!((got - 11.2089).abs() < 1e-3, "{got}");
    }

    #[test]
    fn scattering_power_law() {
        let table = ExtinctionTable::bundled();
        let p = optical_properties(&layer(), 500.0, &table).unwrap();
        assert!((p.mu_s - 200.0).abs() < 1e-9);
        let p = optical_properties(&layer(), 625.0, &table).unwrap();
        assert!((p.mu_s - 160.0).abs() < 1e-9);
    }

    #[test]
    fn isosbestic_points_are_saturation_independent() {
        let table = ExtinctionTable::bundled();
        let rows: Vec<_> = table.rows().collect();
        let mut crossings = 0;
        for w in rows.windows(2) {
            let (d0, d1) = (w[0].1 - w[0].2, w[1].1 - w[1].2);
            if d0.signum() != d1.signum() && (440.0..=640.0).contains(&w[0].0) {
                let lambda = w[0].0 + (w[1].0 - w[0].0) * d0 / (d0 - d1);
                let oxy = optical_properties(&LayerParams { oxygenation: 1.0, ..layer() }, lambda, &table).unwrap();
                let deoxy = optical_properties(&LayerParams { oxygenation: 0.0, ..layer() }, lambda, &table).unwrap();
                assert!((oxy.mu_a - deoxy.mu_a).abs() < 1e-9 * oxy.mu_a, "at {lambda} nm");
                crossings += 1;
            }
        }
        assert!(crossings >= 4);
    }

    #[test]
    fn out_of_table_wavelength_is_a_domain_error() {
        let table = ExtinctionTable::bundled();
        assert!(matches!(optical_properties(&layer(), 720.0, &table), Err(Error::Domain(_))));
        assert!(table.extinction(400.0).is_ok());
    }

    #[test]
    fn table_validation() {
        assert!(ExtinctionTable::parse_csv("wavelength_nm,eps_hbo2,eps_hb\n440,1,1\n600,1,1\n").is_err());
        assert!(ExtinctionTable::parse_csv("wavelength_nm,eps_hbo2,eps_hb\n440,1,1\n640,0,1\n").is_err());
        assert!(ExtinctionTable::parse_csv("wl,a,b\n440,1,1\n640,1,1\n").is_err());
        assert!(ExtinctionTable::parse_csv("wavelength_nm,eps_hbo2,eps_hb\n440,1,1\n640,2,3\n").is_ok());
    }
}
