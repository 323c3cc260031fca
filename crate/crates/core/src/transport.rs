//! Monte-Carlo photon transport through the layered voxel tissue.
//!
//! Photon packets are launched at normal incidence from a uniform planar
//! source covering the top face. Absorption is applied continuously along
//! each path segment, scattering follows Henyey–Greenstein with the layer's
//! anisotropy, and the top surface is the only refractive interface.
//! Because the tissue is laterally uniform and the lateral boundaries wrap,
//! path-length fluence is tallied per depth slice of the voxel grid.
//!
//! Every photon draws from its own counter-derived random stream and photons
//! are processed in fixed-size chunks whose tallies are reduced in chunk
//! order, so results do not depend on the number of worker threads.

use std::f64::consts::E;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optics::{optical_properties, voxel_count, ExtinctionTable, OpticalProperties, TissueSample, LAYER_COUNT};
use crate::rng::{derive_seed2, rng_from_seed, streams, StreamRng};

/// Photons simulated sequentially by one task.
const CHUNK: u64 = 512;

/// Default simulation wavelengths: 440–640 nm in 4 nm steps.
pub fn default_wavelengths() -> Vec<f64> {
    (0..51).map(|i| 440.0 + 4.0 * i as f64).collect()
}

/// Lateral extent and depth discretization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    /// mm.
    pub voxel_size: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { nx: 20, ny: 20, voxel_size: 0.01 }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 {
            return Err(Error::config("grid.nx and grid.ny must be >= 1"));
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(Error::config("grid.voxel_size must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub nx: usize,
    pub ny: usize,
    pub voxel_size: f64,
    /// Cumulative depth of the bottom of each layer, mm.
    pub layer_boundaries: Vec<f64>,
}

impl VoxelGrid {
    pub fn new(spec: &GridSpec, layer_boundaries: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if layer_boundaries.is_empty() {
            return Err(Error::config("grid needs at least one layer"));
        }
        let mut prev = 0.0;
        for &b in &layer_boundaries {
            if !(b > prev) {
                return Err(Error::config("layer boundaries must be strictly increasing and positive"));
            }
            prev = b;
        }
        Ok(Self { nx: spec.nx, ny: spec.ny, voxel_size: spec.voxel_size, layer_boundaries })
    }

    pub fn for_tissue(tissue: &TissueSample, spec: &GridSpec) -> Result<Self> {
        Self::new(spec, tissue.layer_boundaries().to_vec())
    }

    pub fn depth(&self) -> f64 {
        *self.layer_boundaries.last().expect("nonempty")
    }

    /// D, the number of depth slices.
    pub fn depth_voxels(&self) -> usize {
        voxel_count(self.depth(), self.voxel_size)
    }

    /// Layer containing the center of depth slice `k`.
    pub fn layer_of_voxel(&self, k: usize) -> usize {
        let center = ((k as f64 + 0.5) * self.voxel_size).min(self.depth());
        self.layer_boundaries.partition_point(|&b| b < center).min(self.layer_boundaries.len() - 1)
    }

    fn slice_thickness(&self, k: usize) -> f64 {
        let top = k as f64 * self.voxel_size;
        (self.depth() - top).min(self.voxel_size)
    }

    fn slice_center(&self, k: usize) -> f64 {
        let top = k as f64 * self.voxel_size;
        top + 0.5 * self.slice_thickness(k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LateralBoundary {
    /// Wrap around, approximating laterally infinite tissue.
    Periodic,
    /// Photons leaving the side faces are lost.
    Escape,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransportConfig {
    pub n_photons: u64,
    pub roulette_threshold: f64,
    pub roulette_survival_factor: f64,
    /// Photons whose total path exceeds this length (mm) are terminated.
    pub max_path_length: f64,
    pub lateral: LateralBoundary,
    /// Worker threads; 0 uses the ambient pool.
    pub workers: usize,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            n_photons: 100_000,
            roulette_threshold: 1e-4,
            roulette_survival_factor: 10.0,
            max_path_length: 1.0e4,
            lateral: LateralBoundary::Periodic,
            workers: 0,
        }
    }
}

impl TransportConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_photons == 0 {
            return Err(Error::config("transport.n_photons must be >= 1"));
        }
        if !(self.roulette_threshold > 0.0 && self.roulette_threshold < 1.0) {
            return Err(Error::config("transport.roulette_threshold must lie in (0, 1)"));
        }
        if !(self.roulette_survival_factor > 1.0) {
            return Err(Error::config("transport.roulette_survival_factor must be > 1"));
        }
        if !(self.max_path_length > 0.0) {
            return Err(Error::config("transport.max_path_length must be > 0"));
        }
        Ok(())
    }
}

/// Where the launched photon weight ended up.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct WeightTally {
    pub launched: f64,
    /// Fresnel reflection at entry.
    pub specular: f64,
    /// Weight re-emitted through the top surface.
    pub diffuse: f64,
    pub transmitted: f64,
    /// Weight lost through the side faces (escape mode only).
    pub lateral: f64,
    pub absorbed: f64,
    /// Net weight removed by Russian roulette and path-length cutoff.
    pub terminated: f64,
}

impl WeightTally {
    fn add(&mut self, o: &WeightTally) {
        self.launched += o.launched;
        self.specular += o.specular;
        self.diffuse += o.diffuse;
        self.transmitted += o.transmitted;
        self.lateral += o.lateral;
        self.absorbed += o.absorbed;
        self.terminated += o.terminated;
    }

    pub fn accounted(&self) -> f64 {
        self.specular + self.diffuse + self.transmitted + self.lateral + self.absorbed + self.terminated
    }

    /// |accounted − launched| / launched.
    pub fn relative_imbalance(&self) -> f64 {
        (self.accounted() - self.launched).abs() / self.launched
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WavelengthResult {
    /// Diffuse reflectance per launched photon.
    pub reflectance: f64,
    /// 1/e fluence depth, mm.
    pub penetration_depth: f64,
    pub tally: WeightTally,
    /// Path-length fluence per slice, per launched photon and unit depth.
    pub fluence: Vec<f64>,
    /// Set when no layer attenuates at all.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedSpectrum {
    pub wavelengths: Vec<f64>,
    pub reflectance: Vec<f64>,
    /// mm.
    pub penetration_depth: Vec<f64>,
    pub n_photons: u64,
    pub seed: u64,
    pub degenerate: Vec<bool>,
}

impl SimulatedSpectrum {
    pub fn any_degenerate(&self) -> bool {
        self.degenerate.iter().any(|&d| d)
    }
}

/// Layer coefficients converted to 1/mm, with depth bounds.
#[derive(Debug, Clone, Copy)]
struct Medium {
    mua: f64,
    mus: f64,
    inv_mus: f64,
    hg: HgSampler,
    n: f64,
    top: f64,
    bottom: f64,
}

/// Runs the transport for explicit per-layer coefficients (1/cm).
pub fn simulate_layers(
    layers: &[OpticalProperties],
    grid: &VoxelGrid,
    cfg: &TransportConfig,
    seed: u64,
) -> Result<WavelengthResult> {
    cfg.validate()?;
    if layers.len() != grid.layer_boundaries.len() {
        return Err(Error::shape(format!(
            "{} layer property sets for {} grid layers",
            layers.len(),
            grid.layer_boundaries.len()
        )));
    }
    for p in layers {
        if !(p.mu_a >= 0.0 && p.mu_s >= 0.0) || !p.mu_a.is_finite() || !p.mu_s.is_finite() {
            return Err(Error::Domain(format!("invalid optical properties {p:?}")));
        }
    }
    let mut top = 0.0;
    let media: Vec<Medium> = layers
        .iter()
        .zip(&grid.layer_boundaries)
        .map(|(p, &bottom)| {
            let mus = p.mu_s / 10.0;
            let inv_mus = if mus > 0.0 { 1.0 / mus } else { f64::INFINITY };
            let m = Medium { mua: p.mu_a / 10.0, mus, inv_mus, hg: HgSampler::new(p.g), n: p.n, top, bottom };
            top = bottom;
            m
        })
        .collect();
    let degenerate = media.iter().all(|m| m.mua == 0.0 && m.mus == 0.0);
    let slices = grid.depth_voxels();

    let chunks = cfg.n_photons.div_ceil(CHUNK);
    let run = || {
        (0..chunks)
            .into_par_iter()
            .map(|c| {
                let first = c * CHUNK;
                let last = (first + CHUNK).min(cfg.n_photons);
                let mut tally = WeightTally::default();
                let mut fluence = vec![0.0; slices];
                for i in first..last {
                    let mut rng = rng_from_seed(derive_seed2(seed, streams::PHOTON, i));
                    trace_photon(&media, grid, cfg, &mut rng, &mut tally, &mut fluence);
                }
                (tally, fluence)
            })
            .collect::<Vec<_>>()
    };
    let parts = with_workers(cfg.workers, run)?;

    let mut tally = WeightTally::default();
    let mut fluence = vec![0.0; slices];
    for (t, f) in &parts {
        tally.add(t);
        for (acc, v) in fluence.iter_mut().zip(f) {
            *acc += v;
        }
    }
    debug_assert!(tally.relative_imbalance() < 1e-6, "weight bookkeeping broken: {tally:?}");

    let n = cfg.n_photons as f64;
    for (k, f) in fluence.iter_mut().enumerate() {
        *f /= n * grid.slice_thickness(k);
    }
    let penetration_depth = penetration_depth(&fluence, grid);
    Ok(WavelengthResult { reflectance: tally.diffuse / n, penetration_depth, tally, fluence, degenerate })
}

pub fn simulate_wavelength(
    tissue: &TissueSample,
    grid: &VoxelGrid,
    wavelength: f64,
    table: &ExtinctionTable,
    cfg: &TransportConfig,
    seed: u64,
) -> Result<WavelengthResult> {
    let props = tissue_properties(tissue, wavelength, table)?;
    simulate_layers(&props, grid, cfg, seed)
}

pub fn tissue_properties(
    tissue: &TissueSample,
    wavelength: f64,
    table: &ExtinctionTable,
) -> Result<[OpticalProperties; LAYER_COUNT]> {
    let mut out = [OpticalProperties { mu_a: 0.0, mu_s: 0.0, g: 0.0, n: 1.0 }; LAYER_COUNT];
    for (o, layer) in out.iter_mut().zip(&tissue.layers) {
        *o = optical_properties(layer, wavelength, table)?;
    }
    Ok(out)
}

/// Seed of the substream used for the wavelength at `index`.
pub fn wavelength_seed(seed: u64, index: usize) -> u64 {
    derive_seed2(seed, streams::WAVELENGTH, index as u64)
}

/// Simulates every wavelength of `wavelengths` with decorrelated substreams.
pub fn simulate_spectrum(
    tissue: &TissueSample,
    grid: &VoxelGrid,
    wavelengths: &[f64],
    table: &ExtinctionTable,
    cfg: &TransportConfig,
    seed: u64,
) -> Result<SimulatedSpectrum> {
    if wavelengths.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::config("simulation wavelengths must be strictly increasing"));
    }
    let inner = TransportConfig { workers: 0, ..*cfg };
    let results = with_workers(cfg.workers, || {
        wavelengths
            .iter()
            .enumerate()
            .map(|(i, &wl)| simulate_wavelength(tissue, grid, wl, table, &inner, wavelength_seed(seed, i)))
            .collect::<Result<Vec<_>>>()
    })??;
    Ok(SimulatedSpectrum {
        wavelengths: wavelengths.to_vec(),
        reflectance: results.iter().map(|r| r.reflectance).collect(),
        penetration_depth: results.iter().map(|r| r.penetration_depth).collect(),
        n_photons: cfg.n_photons,
        seed,
        degenerate: results.iter().map(|r| r.degenerate).collect(),
    })
}

/// Runs `f` inside a dedicated pool of `workers` threads, or directly when
/// `workers` is 0.
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Unpolarized Fresnel reflectance leaving a medium of index `n1` into `n2`.
pub fn fresnel_reflectance(n1: f64, n2: f64, cos_i: f64) -> f64 {
    if n1 == n2 {
        return 0.0;
    }
    if cos_i > 1.0 - 1e-12 {
        let r = (n1 - n2) / (n1 + n2);
        return r * r;
    }
    if cos_i < 1e-6 {
        return 1.0;
    }
    let sin_i = (1.0 - cos_i * cos_i).sqrt();
    let sin_t = n1 / n2 * sin_i;
    if sin_t >= 1.0 {
        return 1.0;
    }
    let cos_t = (1.0 - sin_t * sin_t).sqrt();
    let rs = (n1 * cos_i - n2 * cos_t) / (n1 * cos_i + n2 * cos_t);
    let rp = (n1 * cos_t - n2 * cos_i) / (n1 * cos_t + n2 * cos_i);
    0.5 * (rs * rs + rp * rp)
}

/// Henyey–Greenstein deflection cosine for uniform `xi` in [0, 1).
pub fn sample_hg_cosine(g: f64, xi: f64) -> f64 {
    HgSampler::new(g).sample(xi)
}

/// Rotates `dir` by polar cosine `cos_theta` and an azimuth given by its
/// cosine and sine.
#[inline]
fn deflect(dir: [f64; 3], cos_theta: f64, cos_phi: f64, sin_phi: f64) -> [f64; 3] {
    let [ux, uy, uz] = dir;
    let sin_theta = (1.0 - cos_theta * cos_theta).max(0.0).sqrt();
    if uz.abs() > 0.99999 {
        return [sin_theta * cos_phi, sin_theta * sin_phi, cos_theta * uz.signum()];
    }
    let tmp = (1.0 - uz * uz).sqrt();
    let nx = sin_theta * (ux * uz * cos_phi - uy * sin_phi) / tmp + ux * cos_theta;
    let ny = sin_theta * (uy * uz * cos_phi + ux * sin_phi) / tmp + uy * cos_theta;
    let nz = -sin_theta * cos_phi * tmp + uz * cos_theta;
    let inv = 1.0 / (nx * nx + ny * ny + nz * nz).sqrt();
    [nx * inv, ny * inv, nz * inv]
}

/// Cosine and sine of a uniform azimuth, by squaring a point drawn
/// uniformly from the unit disk.
#[inline]
fn uniform_azimuth(rng: &mut StreamRng) -> (f64, f64) {
    loop {
        let a = 2.0 * rng.gen::<f64>() - 1.0;
        let b = 2.0 * rng.gen::<f64>() - 1.0;
        let r2 = a * a + b * b;
        if r2 <= 1.0 && r2 > 1e-300 {
            return ((a * a - b * b) / r2, 2.0 * a * b / r2);
        }
    }
}

/// Uniform in (0, 1].
#[inline]
fn open_unit(rng: &mut StreamRng) -> f64 {
    1.0 - rng.gen::<f64>()
}

/// Henyey–Greenstein sampler with the per-layer constants hoisted.
#[derive(Debug, Clone, Copy)]
struct HgSampler {
    g: f64,
    one_minus_g2: f64,
    one_plus_g2: f64,
    inv_two_g: f64,
}

impl HgSampler {
    fn new(g: f64) -> Self {
        Self { g, one_minus_g2: 1.0 - g * g, one_plus_g2: 1.0 + g * g, inv_two_g: if g != 0.0 { 0.5 / g } else { 0.0 } }
    }

    #[inline]
    fn sample(&self, xi: f64) -> f64 {
        if self.g.abs() < 1e-6 {
            return 2.0 * xi - 1.0;
        }
        let f = self.one_minus_g2 / (1.0 - self.g + 2.0 * self.g * xi);
        ((self.one_plus_g2 - f * f) * self.inv_two_g).clamp(-1.0, 1.0)
    }
}

fn trace_photon(
    media: &[Medium],
    grid: &VoxelGrid,
    cfg: &TransportConfig,
    rng: &mut StreamRng,
    tally: &mut WeightTally,
    fluence: &mut [f64],
) {
    let width = grid.nx as f64 * grid.voxel_size;
    let height = grid.ny as f64 * grid.voxel_size;
    let depth = grid.depth();
    let last_layer = media.len() - 1;
    // Under periodic wrap the lateral position cannot influence any tally.
    let track_lateral = cfg.lateral == LateralBoundary::Escape;

    let specular = fresnel_reflectance(1.0, media[0].n, 1.0);
    tally.launched += 1.0;
    tally.specular += specular;
    let mut w = 1.0 - specular;

    let (mut x, mut y) = (rng.gen::<f64>() * width, rng.gen::<f64>() * height);
    let mut z = 0.0;
    let mut dir = [0.0, 0.0, 1.0];
    let mut layer = 0usize;
    let mut tau = -open_unit(rng).ln();
    let mut path = 0.0;

    loop {
        let m = &media[layer];
        let uz = dir[2];
        let to_boundary = if uz > 0.0 {
            (m.bottom - z) / uz
        } else if uz < 0.0 {
            (m.top - z) / uz
        } else {
            f64::INFINITY
        };
        let to_scatter = tau * m.inv_mus;
        if !to_boundary.is_finite() && !to_scatter.is_finite() {
            tally.terminated += w;
            return;
        }
        let hits_boundary = to_boundary <= to_scatter;
        let mut step = to_boundary.min(to_scatter).max(0.0);
        let cut = path + step > cfg.max_path_length;
        if cut {
            step = (cfg.max_path_length - path).max(0.0);
        }

        let decay = (-m.mua * step).exp();
        deposit(fluence, grid.voxel_size, z, uz, step, w, m.mua, decay);
        let w_next = w * decay;
        tally.absorbed += w - w_next;
        w = w_next;
        path += step;

        if cut {
            tally.terminated += w;
            return;
        }

        if track_lateral {
            x += dir[0] * step;
            y += dir[1] * step;
            if !(0.0..width).contains(&x) || !(0.0..height).contains(&y) {
                tally.lateral += w;
                return;
            }
        }

        if hits_boundary {
            tau = (tau - step * m.mus).max(0.0);
            if uz < 0.0 {
                z = m.top;
                if layer == 0 {
                    let r = fresnel_reflectance(m.n, 1.0, -uz);
                    let reflected = w * r;
                    tally.diffuse += w - reflected;
                    w = reflected;
                    if w <= 0.0 {
                        return;
                    }
                    dir[2] = -uz;
                } else {
                    layer -= 1;
                }
            } else {
                z = m.bottom.min(depth);
                if layer == last_layer {
                    tally.transmitted += w;
                    return;
                }
                layer += 1;
            }
        } else {
            z = (z + uz * step).clamp(m.top, m.bottom);
            tau = -open_unit(rng).ln();
            let cos_theta = m.hg.sample(rng.gen());
            let (cos_phi, sin_phi) = uniform_azimuth(rng);
            dir = deflect(dir, cos_theta, cos_phi, sin_phi);

            if w < cfg.roulette_threshold {
                let m = cfg.roulette_survival_factor;
                if rng.gen::<f64>() * m < 1.0 {
                    tally.terminated -= w * (m - 1.0);
                    w *= m;
                } else {
                    tally.terminated += w;
                    return;
                }
            }
        }
    }
}

/// Adds the path-length integral of the decaying weight along a segment
/// starting at depth `z0` to the slices it crosses. `decay` is
/// `exp(-mua * len)`.
#[allow(clippy::too_many_arguments)]
#[inline]
fn deposit(fluence: &mut [f64], dz: f64, z0: f64, uz: f64, len: f64, w0: f64, mua: f64, decay: f64) {
    if len <= 0.0 || w0 <= 0.0 {
        return;
    }
    let last = fluence.len() - 1;
    let absorbing = mua > 0.0;
    let scale = if absorbing { w0 / mua } else { w0 };
    // Integral of the weight between two points, from their decay factors
    // (absorbing) or path positions (lossless).
    let between = |a: f64, b: f64| scale * (a - b).abs();

    let (start, end) = if absorbing { (1.0, decay) } else { (0.0, len) };
    let span = uz.abs() * len;
    let k0 = ((z0 / dz) as usize).min(last);

    if uz.abs() < 1e-12 || span < 1e-15 {
        fluence[k0] += between(start, end);
        return;
    }

    let down = uz > 0.0;
    let mut k = if down {
        k0
    } else {
        let c = (z0 / dz).ceil() as usize;
        c.saturating_sub(1).min(last)
    };
    let full = dz / uz.abs();
    let edge = if down { (k + 1) as f64 * dz } else { k as f64 * dz };
    let first = ((edge - z0) / uz).clamp(0.0, full);

    if first >= len {
        fluence[k] += between(start, end);
        return;
    }
    if absorbing && mua * len < 0.05 {
        // Weakly absorbing segment: the weight is linear in path length to
        // within (mua * len)^2 / 8, so slice integrals need no exponentials.
        let slope = (decay - 1.0) / len;
        let mut deposit_linear = |k: usize, a: f64, b: f64| {
            fluence[k] += w0 * (b - a) * (1.0 + 0.5 * slope * (a + b));
        };
        deposit_linear(k, 0.0, first);
        let mut s = first;
        loop {
            let at_edge = if down { k == last } else { k == 0 };
            if !at_edge {
                k = if down { k + 1 } else { k - 1 };
            }
            if at_edge || s + full >= len {
                deposit_linear(k, s, len);
                return;
            }
            deposit_linear(k, s, s + full);
            s += full;
        }
    }
    let (mut cur, step_factor) = if absorbing {
        ((-mua * first).exp(), (-mua * full).exp())
    } else {
        (first, full)
    };
    fluence[k] += between(start, cur);
    let mut s = first;
    loop {
        let at_edge = if down { k == last } else { k == 0 };
        if !at_edge {
            if down {
                k += 1;
            } else {
                k -= 1;
            }
        }
        if at_edge || s + full >= len {
            fluence[k] += between(cur, end);
            return;
        }
        let next = if absorbing { cur * step_factor } else { cur + step_factor };
        fluence[k] += between(cur, next);
        cur = next;
        s += full;
    }
}

/// Depth at which fluence first drops below 1/e of its surface value.
///
/// The surface value is extrapolated linearly from the two shallowest slice
/// centers; the crossing is interpolated linearly between slice centers.
fn penetration_depth(fluence: &[f64], grid: &VoxelGrid) -> f64 {
    let depth = grid.depth();
    let centers: Vec<f64> = (0..fluence.len()).map(|k| grid.slice_center(k)).collect();
    let mut surface = fluence[0];
    if fluence.len() > 1 {
        let slope = (fluence[1] - fluence[0]) / (centers[1] - centers[0]);
        let extrapolated = fluence[0] - slope * centers[0];
        if extrapolated > 0.0 {
            surface = extrapolated;
        }
    }
    if !(surface > 0.0) {
        return depth;
    }
    let threshold = surface / E;
    let mut prev = (0.0, surface);
    for (&z, &f) in centers.iter().zip(fluence) {
        if f < threshold {
            let (z0, f0) = prev;
            let p = z0 + (f0 - threshold) / (f0 - f) * (z - z0);
            return p.clamp(f64::MIN_POSITIVE, depth);
        }
        prev = (z, f);
    }
    depth
}
