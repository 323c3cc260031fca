//! Clinical-style frames: calibration, ROI statistics, the exponential
//! lactate–oxygenation fit, map rendering and the inference benchmark.

use std::fmt;
use std::fmt::Write as _;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use crate::cube::{Hypercube, OxygenationMap};
use crate::error::{Error, FormatError, Result};
use crate::network::{infer_map, Network};
use crate::scalar::Scalar;
use crate::spectral::normalize_values;
use crate::transport::with_workers;
use crate::unmixing::{unmix_map, EndmemberMatrix};

/// Side length of the filter mosaic; band `b` sits at offset
/// `(b / 4, b % 4)` inside each tile.
pub const MOSAIC: usize = 4;
pub const ROI_SIZE: usize = 20;

/// Single-plane sensor readout of a 4×4 snapshot mosaic.
#[derive(Debug, Clone, PartialEq)]
pub struct Mosaic {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Mosaic {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height < MOSAIC || width < MOSAIC {
            return Err(Error::shape(format!("mosaic must be at least {MOSAIC}x{MOSAIC}, got {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::shape(format!("{} values for a {height}x{width} mosaic", data.len())));
        }
        Ok(Self { height, width, data })
    }

    /// Samples a cube through the mosaic pattern.
    pub fn from_cube(cube: &Hypercube) -> Result<Self> {
        if cube.bands != MOSAIC * MOSAIC {
            return Err(Error::shape(format!("mosaic needs {} bands, cube has {}", MOSAIC * MOSAIC, cube.bands)));
        }
        let mut data = Vec::with_capacity(cube.pixels());
        for y in 0..cube.height {
            for x in 0..cube.width {
                data.push(cube.pixel(y, x)[band_at(y, x)]);
            }
        }
        Self::new(cube.height, cube.width, data)
    }
}

fn band_at(y: usize, x: usize) -> usize {
    (y % MOSAIC) * MOSAIC + x % MOSAIC
}

/// Sample coordinates bracketing `p` on the lattice `offset + MOSAIC·k`
/// below `len`, with the interpolation weight of the upper one.
fn bracket(p: usize, offset: usize, len: usize) -> (usize, usize, f32) {
    let last = offset + (len - 1 - offset) / MOSAIC * MOSAIC;
    if p <= offset {
        return (offset, offset, 0.0);
    }
    if p >= last {
        return (last, last, 0.0);
    }
    let lo = p - (p - offset) % MOSAIC;
    (lo, lo + MOSAIC, (p - lo) as f32 / MOSAIC as f32)
}

/// Bilinear interpolation of every band from its sparse lattice; borders
/// repeat the nearest sample.
pub fn demosaic(m: &Mosaic) -> Hypercube {
    let bands = MOSAIC * MOSAIC;
    let mut data = vec![0.0f32; m.height * m.width * bands];
    for b in 0..bands {
        let (oy, ox) = (b / MOSAIC, b % MOSAIC);
        for y in 0..m.height {
            let (y0, y1, ty) = bracket(y, oy, m.height);
            for x in 0..m.width {
                let (x0, x1, tx) = bracket(x, ox, m.width);
                let at = |yy: usize, xx: usize| m.data[yy * m.width + xx];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                data[(y * m.width + x) * bands + b] = top * (1.0 - ty) + bottom * ty;
            }
        }
    }
    Hypercube { height: m.height, width: m.width, bands, data }
}

/// Uncalibrated camera input.
#[derive(Debug, Clone, PartialEq)]
pub enum RawFrame {
    Mosaic(Mosaic),
    Cube(Hypercube),
}

impl RawFrame {
    fn dims(&self) -> (usize, usize) {
        match self {
            RawFrame::Mosaic(m) => (m.height, m.width),
            RawFrame::Cube(c) => (c.height, c.width),
        }
    }
}

/// Calibrated frame. `degenerate` marks pixels whose spectrum has no
/// positive area and was left unnormalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub cube: Hypercube,
    pub demosaicked: bool,
    pub dark_subtracted: bool,
    pub light_divided: bool,
    pub normalized: bool,
    pub degenerate: Vec<bool>,
}

/// Dark subtraction (clamped at zero), demosaicking of mosaic input,
/// division by the light source and per-pixel area normalization.
pub fn calibrate_frame(raw: &RawFrame, dark: Option<&RawFrame>, light_ref: &[f64]) -> Result<Frame> {
    if let Some(d) = dark {
        if std::mem::discriminant(d) != std::mem::discriminant(raw) || d.dims() != raw.dims() {
            return Err(Error::Calibration("dark reference does not match the raw frame layout".into()));
        }
        if let (RawFrame::Cube(r), RawFrame::Cube(d)) = (raw, d) {
            if r.bands != d.bands {
                return Err(Error::Calibration("dark reference band count differs".into()));
            }
        }
    }
    let subtract = |v: &[f32], d: Option<&[f32]>| -> Vec<f32> {
        match d {
            Some(d) => v.iter().zip(d).map(|(a, b)| (a - b).max(0.0)).collect(),
            None => v.to_vec(),
        }
    };
    let (mut cube, demosaicked) = match (raw, dark) {
        (RawFrame::Mosaic(m), d) => {
            let d = d.map(|d| match d {
                RawFrame::Mosaic(dm) => dm.data.as_slice(),
                RawFrame::Cube(_) => unreachable!(),
            });
            (demosaic(&Mosaic { data: subtract(&m.data, d), ..m.clone() }), true)
        }
        (RawFrame::Cube(c), d) => {
            let d = d.map(|d| match d {
                RawFrame::Cube(dc) => dc.data.as_slice(),
                RawFrame::Mosaic(_) => unreachable!(),
            });
            (Hypercube { data: subtract(&c.data, d), ..c.clone() }, false)
        }
    };
    if light_ref.len() != cube.bands {
        return Err(Error::Calibration(format!("light reference has {} bands, frame {}", light_ref.len(), cube.bands)));
    }
    if let Some((b, v)) = light_ref.iter().enumerate().find(|(_, v)| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::Calibration(format!("light reference band {b} is {v}, must be positive")));
    }
    let bands = cube.bands;
    let mut degenerate = vec![false; cube.pixels()];
    for (px, flag) in cube.data.chunks_exact_mut(bands).zip(degenerate.iter_mut()) {
        let divided: Vec<f64> = px.iter().zip(light_ref).map(|(&v, &l)| v as f64 / l).collect();
        match normalize_values(&divided) {
            Ok(n) => px.iter_mut().zip(n).for_each(|(p, v)| *p = v as f32),
            Err(_) => {
                px.iter_mut().zip(divided).for_each(|(p, v)| *p = v as f32);
                *flag = true;
            }
        }
    }
    if cube.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Calibration("calibrated frame contains non-finite values".into()));
    }
    Ok(Frame { cube, demosaicked, dark_subtracted: dark.is_some(), light_divided: true, normalized: true, degenerate })
}

/// Square region given by its top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Roi {
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

impl Roi {
    /// 20×20 region around a sampling point; `None` if it would start
    /// outside the image.
    pub fn around(x: usize, y: usize) -> Option<Self> {
        Some(Self { x: x.checked_sub(ROI_SIZE / 2)?, y: y.checked_sub(ROI_SIZE / 2)?, size: ROI_SIZE })
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.size > 0 && self.x + self.size <= width && self.y + self.size <= height
    }
}

pub fn roi_oxygenation(map: &OxygenationMap, roi: &Roi) -> Result<f64> {
    if !roi.fits(map.height, map.width) {
        return Err(Error::Domain(format!("{roi:?} lies outside the {}x{} map", map.height, map.width)));
    }
    let mut sum = 0.0;
    for y in roi.y..roi.y + roi.size {
        for x in roi.x..roi.x + roi.size {
            sum += map.at(y, x) as f64;
        }
    }
    Ok(sum / (roi.size * roi.size) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiteKind {
    WellPerfused,
    Anastomosis,
    Ischemic,
}

impl SiteKind {
    pub fn label(self) -> &'static str {
        match self {
            SiteKind::WellPerfused => "well_perfused",
            SiteKind::Anastomosis => "anastomosis",
            SiteKind::Ischemic => "ischemic",
        }
    }
}

impl fmt::Display for SiteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for SiteKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "well_perfused" => Ok(SiteKind::WellPerfused),
            "anastomosis" => Ok(SiteKind::Anastomosis),
            "ischemic" => Ok(SiteKind::Ischemic),
            _ => Err(Error::config(format!("unknown site kind {s:?}"))),
        }
    }
}

/// One lactate sample; `x`, `y` is the sampling point at the ROI centre.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiMeasurement {
    pub frame_id: String,
    pub site: SiteKind,
    pub x: usize,
    pub y: usize,
    pub lactate: f64,
}

impl RoiMeasurement {
    pub fn roi(&self) -> Result<Roi> {
        Roi::around(self.x, self.y).ok_or_else(|| Error::Domain(format!("ROI around ({}, {}) leaves the frame", self.x, self.y)))
    }
}

pub const MANIFEST_HEADER: &str = "frame_id,site_kind,x,y,lactate_mmol_per_l";

pub fn parse_manifest(text: &str) -> Result<Vec<RoiMeasurement>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
        return Err(Error::config(format!("manifest must start with {MANIFEST_HEADER:?}")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = |what: &str| Error::config(format!("manifest row {}: {what}", i + 1));
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 5 {
                return Err(bad("expected 5 fields"));
            }
            let lactate: f64 = f[4].parse().map_err(|_| bad("invalid lactate"))?;
            if !(lactate > 0.0) || !lactate.is_finite() {
                return Err(bad("lactate must be positive"));
            }
            Ok(RoiMeasurement {
                frame_id: f[0].to_string(),
                site: f[1].parse()?,
                x: f[2].parse().map_err(|_| bad("invalid x"))?,
                y: f[3].parse().map_err(|_| bad("invalid y"))?,
                lactate,
            })
        })
        .collect()
}

pub fn read_manifest(path: &Path) -> Result<Vec<RoiMeasurement>> {
    parse_manifest(&std::fs::read_to_string(path)?)
}

pub fn write_manifest(rows: &[RoiMeasurement], path: &Path) -> Result<()> {
    let mut s = format!("{MANIFEST_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.frame_id, r.site, r.x, r.y, r.lactate);
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// `lactate = a · exp(b · o2)` fitted by least squares on log lactate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LactateFit {
    pub a: f64,
    pub b: f64,
    /// Mean absolute error in mmol/L.
    pub mae: f64,
    pub mae_std: f64,
    /// Of the log-space regression.
    pub r_squared: f64,
    /// Pearson coefficient between oxygenation and raw lactate.
    pub correlation: f64,
    pub n_points: usize,
}

impl LactateFit {
    pub fn predict(&self, o2: f64) -> f64 {
        self.a * (self.b * o2).exp()
    }

    /// `samples` evenly spaced points of the fitted curve over `[0, 1]`.
    pub fn curve(&self, samples: usize) -> Vec<(f64, f64)> {
        (0..samples)
            .map(|i| {
                let o2 = if samples > 1 { i as f64 / (samples - 1) as f64 } else { 0.0 };
                (o2, self.predict(o2))
            })
            .collect()
    }

    pub fn report(&self) -> String {
        format!(
            "a={:e}\nb={:e}\nmae={:e}\nmae_std={:e}\nr_squared={:e}\ncorrelation={:e}\nn_points={}\n",
            self.a, self.b, self.mae, self.mae_std, self.r_squared, self.correlation, self.n_points
        )
    }
}

fn mean(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = v.clone().count() as f64;
    v.sum::<f64>() / n
}

pub fn fit_lactate_exponential(points: &[(f64, f64)]) -> Result<LactateFit> {
    if points.len() < 3 {
        return Err(Error::Fit(format!("need at least 3 points, got {}", points.len())));
    }
    if let Some(p) = points.iter().find(|(o, l)| !(*l > 0.0) || !l.is_finite() || !o.is_finite()) {
        return Err(Error::Fit(format!("invalid point {p:?}: lactate must be positive and values finite")));
    }
    let xs = || points.iter().map(|p| p.0);
    let ys = || points.iter().map(|p| p.1.ln());
    let (mx, my) = (mean(xs()), mean(ys()));
    let sxx: f64 = xs().map(|x| (x - mx).powi(2)).sum();
    if sxx <= 1e-12 * points.len() as f64 {
        return Err(Error::Fit("oxygenation values have no variance".into()));
    }
    let sxy: f64 = points.iter().map(|(x, l)| (x - mx) * (l.ln() - my)).sum();
    let b = sxy / sxx;
    let ln_a = my - b * mx;
    let ss_res: f64 = points.iter().map(|(x, l)| (l.ln() - ln_a - b * x).powi(2)).sum();
    let ss_tot: f64 = ys().map(|y| (y - my).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    let a = ln_a.exp();
    let abs_err: Vec<f64> = points.iter().map(|(x, l)| (l - a * (b * x).exp()).abs()).collect();
    let mae = mean(abs_err.iter().copied());
    let mae_std = mean(abs_err.iter().map(|e| (e - mae).powi(2))).sqrt();
    let ml = mean(points.iter().map(|p| p.1));
    let sll: f64 = points.iter().map(|p| (p.1 - ml).powi(2)).sum();
    let sxl: f64 = points.iter().map(|(x, l)| (x - mx) * (l - ml)).sum();
    let correlation = if sll > 0.0 { sxl / (sxx * sll).sqrt() } else { 0.0 };
    Ok(LactateFit { a, b, mae, mae_std, r_squared, correlation, n_points: points.len() })
}

pub const MAP_MAGIC: &[u8; 8] = b"OXYMAP\0\0";
pub const MAP_VERSION: u32 = 1;
const MAP_HEADER_BYTES: usize = 20;

pub fn palette_color(v: f32) -> [u8; 3] {
    let c = colorous::VIRIDIS.eval_continuous(v.clamp(0.0, 1.0) as f64);
    [c.r, c.g, c.b]
}

/// Float sidecar: magic, version, height, width, `f32` values, one flag byte
/// per pixel, CRC32 trailer.
pub fn encode_map(map: &OxygenationMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(MAP_HEADER_BYTES + map.values.len() * 5 + 4);
    out.extend_from_slice(MAP_MAGIC);
    for v in [MAP_VERSION, map.height as u32, map.width as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    map.values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    out.extend(map.degenerate.iter().map(|&d| d as u8));
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_map(bytes: &[u8]) -> Result<OxygenationMap> {
    if bytes.len() < MAP_HEADER_BYTES + 4 {
        return Err(FormatError::Length { found: bytes.len(), expected: MAP_HEADER_BYTES + 4 }.into());
    }
    if &bytes[..8] != MAP_MAGIC {
        return Err(FormatError::BadMagic { expected: "OXYMAP" }.into());
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    if u32_at(8) != MAP_VERSION {
        return Err(FormatError::Version { found: u32_at(8), expected: MAP_VERSION }.into());
    }
    let (h, w) = (u32_at(12) as usize, u32_at(16) as usize);
    let n = h * w;
    let expected = MAP_HEADER_BYTES + n * 5 + 4;
    if bytes.len() != expected {
        return Err(FormatError::Length { found: bytes.len(), expected }.into());
    }
    let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..expected - 4]);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed }.into());
    }
    let body = &bytes[MAP_HEADER_BYTES..expected - 4];
    let values = body[..n * 4].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let mut map = OxygenationMap::new(h, w, values)?;
    for (d, &b) in map.degenerate.iter_mut().zip(&body[n * 4..]) {
        *d = match b {
            0 => false,
            1 => true,
            _ => return Err(FormatError::Invalid(format!("pixel flag {b}")).into()),
        };
    }
    Ok(map)
}

pub fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("oxymap")
}

/// Writes the map as a viridis PNG at `path` and the raw values next to it;
/// returns the sidecar path.
pub fn render_oxygenation_map(map: &OxygenationMap, path: &Path) -> Result<PathBuf> {
    if let Some(v) = map.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("map value {v} outside [0, 1]")));
    }
    let file = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), map.width as u32, map.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    let pixels: Vec<u8> = map.values.iter().flat_map(|&v| palette_color(v)).collect();
    writer.write_image_data(&pixels)?;
    writer.finish()?;
    let sidecar = sidecar_path(path);
    std::fs::write(&sidecar, encode_map(map))?;
    Ok(sidecar)
}

pub fn read_map_sidecar(path: &Path) -> Result<OxygenationMap> {
    decode_map(&std::fs::read(path)?)
}

/// Anything that turns a calibrated, unnormalized frame into a map.
pub trait OxygenationEstimator: Sync {
    fn name(&self) -> &str;
    fn estimate(&self, frame: &Hypercube) -> Result<OxygenationMap>;
}

/// Network inference including per-pixel area normalization.
pub struct NetworkEstimator<'a, T: Scalar> {
    pub name: String,
    pub net: &'a Network<T>,
}

impl<T: Scalar> OxygenationEstimator for NetworkEstimator<'_, T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn estimate(&self, frame: &Hypercube) -> Result<OxygenationMap> {
        infer_map(self.net, frame, true)
    }
}

pub struct UnmixingEstimator<'a> {
    pub endmembers: &'a EndmemberMatrix,
    pub correction: Option<&'a [f64]>,
}

impl OxygenationEstimator for UnmixingEstimator<'_> {
    fn name(&self) -> &str {
        "unmixing"
    }

    fn estimate(&self, frame: &Hypercube) -> Result<OxygenationMap> {
        unmix_map(frame, self.endmembers, self.correction)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub method: String,
    pub iterations: usize,
    pub threads: usize,
    pub height: usize,
    pub width: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub fps: f64,
}

impl BenchReport {
    /// `key=value` lines, one report per block.
    pub fn to_text(&self) -> String {
        format!(
            "method={}\niterations={}\nthreads={}\nframe={}x{}\nmean_ms={:.4}\nstd_ms={:.4}\nfps={:.3}\n",
            self.method, self.iterations, self.threads, self.height, self.width, self.mean_ms, self.std_ms, self.fps
        )
    }

    pub fn table_row(&self) -> String {
        format!("{}\t{:.3}\t{:.3}\t{:.2}\t{}", self.method, self.mean_ms, self.std_ms, self.fps, self.threads)
    }
}

pub const BENCH_TABLE_HEADER: &str = "method\tmean_ms\tstd_ms\tfps\tthreads";

/// Times `iterations` full-frame estimates after `warmup` untimed runs, on a
/// pool of exactly `threads` workers.
pub fn benchmark_inference(
    estimator: &dyn OxygenationEstimator,
    frame: &Hypercube,
    iterations: usize,
    warmup: usize,
    threads: usize,
) -> Result<BenchReport> {
    if iterations == 0 || threads == 0 {
        return Err(Error::config("benchmark needs at least one iteration and one thread"));
    }
    let times = with_workers(threads, || -> Result<Vec<f64>> {
        for _ in 0..warmup {
            std::hint::black_box(estimator.estimate(frame)?);
        }
        (0..iterations)
            .map(|_| {
                let t = Instant::now();
                std::hint::black_box(estimator.estimate(frame)?);
                Ok(t.elapsed().as_secs_f64() * 1e3)
            })
            .collect()
    })??;
    let mean_ms = mean(times.iter().copied());
    let std_ms = mean(times.iter().map(|t| (t - mean_ms).powi(2))).sqrt();
    Ok(BenchReport {
        method: estimator.name().to_string(),
        iterations,
        threads,
        height: frame.height,
        width: frame.width,
        mean_ms,
        std_ms,
        fps: 1e3 / mean_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn spectrum() -> Vec<f32> {
        (0..16).map(|b| 0.3 + 0.02 * b as f32).collect()
    }

    #[test]
    fn constant_mosaic_demosaics_to_constant_cube() {
        let cube = Hypercube::filled(13, 18, &spectrum()).unwrap();
        let out = demosaic(&Mosaic::from_cube(&cube).unwrap());
        for (a, b) in out.data.iter().zip(&cube.data) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn demosaic_is_exact_at_samples_and_linear_between() {
        let cube = Hypercube::from_fn(12, 12, 16, |y, x| (0..16).map(|b| (y + 2 * x + b) as f32).collect()).unwrap();
        let out = demosaic(&Mosaic::from_cube(&cube).unwrap());
        for y in 0..9 {
            for x in 0..9 {
                let b = band_at(y, x);
                assert_eq!(out.pixel(y, x)[b], cube.pixel(y, x)[b]);
            }
        }
        // interior pixels of a linear ramp are reproduced exactly
        assert!((out.pixel(5, 6)[0] - cube.pixel(5, 6)[0]).abs() < 1e-4);
    }

    #[test]
    fn calibration_steps() {
        let light: Vec<f64> = (0..16).map(|b| 1.0 + 0.1 * b as f64).collect();
        let raw = RawFrame::Cube(Hypercube::filled(4, 5, &spectrum()).unwrap());
        let f = calibrate_frame(&raw, Some(&raw), &light).unwrap();
        assert!(f.cube.data.iter().all(|&v| v == 0.0));
        assert!(f.degenerate.iter().all(|&d| d));
        assert!(!f.demosaicked && f.dark_subtracted);

        let f = calibrate_frame(&raw, None, &light).unwrap();
        let area = crate::spectral::band_area(f.cube.pixel(0, 0));
        assert!((area - 1.0).abs() < 1e-6);
        let scaled = RawFrame::Cube(Hypercube::filled(4, 5, &spectrum().iter().map(|v| v * 8.0).collect::<Vec<_>>()).unwrap());
        let light8: Vec<f64> = light.iter().map(|v| v * 8.0).collect();
        let g = calibrate_frame(&scaled, None, &light8).unwrap();
        for (a, b) in f.cube.data.iter().zip(&g.cube.data) {
            assert!((a - b).abs() < 1e-6);
        }

        let mut bad = light.clone();
        bad[4] = 0.0;
        assert!(matches!(calibrate_frame(&raw, None, &bad), Err(Error::Calibration(_))));
        let mosaic = RawFrame::Mosaic(Mosaic::from_cube(&Hypercube::filled(8, 8, &spectrum()).unwrap()).unwrap());
        assert!(calibrate_frame(&mosaic, Some(&raw), &light).is_err());
        assert!(calibrate_frame(&mosaic, None, &light).unwrap().demosaicked);
    }

    #[test]
    fn roi_means() {
        let map = OxygenationMap::new(30, 30, vec![0.37; 900]).unwrap();
        let roi = Roi::around(15, 15).unwrap();
        assert!((roi_oxygenation(&map, &roi).unwrap() - 0.37f32 as f64).abs() < 1e-12);
        let checker = OxygenationMap::new(30, 30, (0..900).map(|i| ((i / 30 + i % 30) % 2) as f32).collect()).unwrap();
        assert_eq!(roi_oxygenation(&checker, &roi).unwrap(), 0.5);
        let mut rng = rng_from_seed(4);
        let random = OxygenationMap::new(30, 30, (0..900).map(|_| rng.gen()).collect()).unwrap();
        let r = Roi { x: 3, y: 7, size: 20 };
        let brute: f64 = (7..27).flat_map(|y| (3..23).map(move |x| (y, x))).map(|(y, x)| random.values[y * 30 + x] as f64).sum::<f64>() / 400.0;
        assert!((roi_oxygenation(&random, &r).unwrap() - brute).abs() < 1e-12);
        assert!(roi_oxygenation(&map, &Roi { x: 15, y: 0, size: 20 }).is_err());
        assert!(Roi::around(5, 40).is_none());
    }

    #[test]
    fn exact_fit_on_noise_free_points() {
        let pts: Vec<(f64, f64)> = (0..33).map(|i| (i as f64 / 32.0, 1.5 * (-5.0 * i as f64 / 32.0).exp())).collect();
        let fit = fit_lactate_exponential(&pts).unwrap();
        assert!((fit.a - 1.5).abs() < 1e-9 && (fit.b + 5.0).abs() < 1e-9);
        assert!((fit.r_squared - 1.0).abs() < 1e-12 && fit.mae < 1e-9);
        assert!(fit.correlation < 0.0);
    }

    #[test]
    fn noisy_fit_recovers_parameters() {
        let mut rng = rng_from_seed(11);
        let noise = Normal::new(0.0f64, 0.1).unwrap();
        let pts: Vec<(f64, f64)> = (0..33)
            .map(|i| {
                let o = i as f64 / 32.0;
                (o, 1.5 * (-5.0 * o).exp() * noise.sample(&mut rng).exp())
            })
            .collect();
        let fit = fit_lactate_exponential(&pts).unwrap();
        assert!((fit.a / 1.5 - 1.0).abs() < 0.1 && (fit.b / -5.0 - 1.0).abs() < 0.1);
        assert!(fit.r_squared > 0.9 && fit.correlation < 0.0);
        let mut shuffled: Vec<_> = pts.iter().rev().copied().collect();
        shuffled.extend_from_slice(&pts);
        let again = fit_lactate_exponential(&shuffled).unwrap();
        assert!((again.a - fit.a).abs() < 1e-12 && (again.b - fit.b).abs() < 1e-12);
    }

    #[test]
    fn fit_errors() {
        assert!(matches!(fit_lactate_exponential(&[(0.1, 1.0), (0.2, 2.0)]), Err(Error::Fit(_))));
        assert!(fit_lactate_exponential(&[(0.1, 1.0), (0.2, 0.0), (0.3, 1.0)]).is_err());
        assert!(fit_lactate_exponential(&[(0.5, 1.0), (0.5, 2.0), (0.5, 3.0)]).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let rows = vec![
            RoiMeasurement { frame_id: "f1".into(), site: SiteKind::Ischemic, x: 40, y: 22, lactate: 7.25 },
            RoiMeasurement { frame_id: "f2".into(), site: SiteKind::WellPerfused, x: 100, y: 50, lactate: 1.5 },
        ];
        let path = std::env::temp_dir().join(format!("oxyspec-manifest-{}.csv", std::process::id()));
        write_manifest(&rows, &path).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), rows);
        std::fs::remove_file(&path).ok();
        assert!(parse_manifest("frame_id,site_kind,x,y,lactate_mmol_per_l\nf,ischemic,1,2,-1\n").is_err());
        assert!(parse_manifest("frame_id,site_kind,x,y,lactate_mmol_per_l\nf,necrotic,1,2,1\n").is_err());
    }

    #[test]
    fn palette_ends_and_sidecar() {
        assert_eq!(palette_color(0.0), [68, 1, 84]);
        assert_eq!(palette_color(1.0), [253, 231, 37]);
        let mut map = OxygenationMap::new(3, 4, (0..12).map(|i| i as f32 / 11.0).collect()).unwrap();
        map.degenerate[5] = true;
        let dir = std::env::temp_dir().join(format!("oxyspec-render-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let png_path = dir.join("map.png");
        let side = render_oxygenation_map(&map, &png_path).unwrap();
        let back = read_map_sidecar(&side).unwrap();
        assert_eq!(back, map);
        assert!(back.values.iter().zip(&map.values).all(|(a, b)| a.to_bits() == b.to_bits()));
        let decoder = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(&png_path).unwrap()));
        let mut reader = decoder.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        reader.next_frame(&mut buf).unwrap();
        assert_eq!(&buf[..3], &[68, 1, 84]);
        let mut bytes = encode_map(&map);
        bytes[25] ^= 1;
        assert!(matches!(decode_map(&bytes), Err(Error::Format(FormatError::Checksum { .. }))));
        map.values[0] = 1.5;
        assert!(render_oxygenation_map(&map, &png_path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    struct Constant;

    impl OxygenationEstimator for Constant {
        fn name(&self) -> &str {
            "constant"
        }

        fn estimate(&self, frame: &Hypercube) -> Result<OxygenationMap> {
            OxygenationMap::new(frame.height, frame.width, vec![0.5; frame.pixels()])
        }
    }

    #[test]
    fn single_iteration_benchmark() {
        let frame = Hypercube::filled(8, 8, &spectrum()).unwrap();
        let r = benchmark_inference(&Constant, &frame, 1, 0, 1).unwrap();
        assert_eq!(r.iterations, 1);
        assert_eq!(r.std_ms, 0.0);
        assert_eq!(r.threads, 1);
        assert!(r.to_text().contains("fps="));
    }
}
