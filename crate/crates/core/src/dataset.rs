//! Labeled spectrum collections: generation, stratified splitting, noise
//! augmentation, pseudo-real domain synthesis, balanced domain batches and
//! a checksummed binary file format.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::optics::{sample_tissue, ExtinctionTable, PriorConfig};
use crate::rng::{derive_seed, derive_seed2, permutation, rng_from_seed, streams};
use crate::scalar::Scalar;
use crate::spectral::{
    add_band_noise, adapt_to_camera, label_oxygenation, normalize_values, BandSpectrum, CameraModel, Domain,
    LabeledSample,
};
use crate::transport::{simulate_spectrum, with_workers, GridSpec, TransportConfig, VoxelGrid};

pub const DATASET_MAGIC: &[u8; 8] = b"OXYDSET\0";
pub const DATASET_VERSION: u32 = 1;
pub const DATASET_HEADER_BYTES: usize = 36;
pub const DATASET_TRAILER_BYTES: usize = 4;

/// A set of AUC-normalized band spectra with their labels and domains.
///
/// Features are stored row-major, one row of `bands` values per sample.
/// Hidden labels are kept as NaN.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    bands: usize,
    features: Vec<T>,
    labels: Vec<T>,
    domains: Vec<Domain>,
    provenance: u64,
}

impl<T: Scalar> Dataset<T> {
    pub fn from_parts(
        bands: usize,
        features: Vec<T>,
        labels: Vec<Option<T>>,
        domains: Vec<Domain>,
        provenance: u64,
    ) -> Result<Self> {
        if bands == 0 {
            return Err(Error::shape("dataset needs at least one band"));
        }
        let n = labels.len();
        if n == 0 {
            return Err(Error::config("dataset must not be empty"));
        }
        if features.len() != n * bands || domains.len() != n {
            return Err(Error::shape(format!(
                "{} features and {} domains for {n} samples of {bands} bands",
                features.len(),
                domains.len()
            )));
        }
        if let Some(l) = labels.iter().flatten().find(|l| !(**l >= T::zero() && **l <= T::one())) {
            return Err(Error::Domain(format!("oxygenation label {l} outside [0, 1]")));
        }
        let labels = labels.into_iter().map(|l| l.unwrap_or_else(T::nan)).collect();
        Ok(Self { bands, features, labels, domains, provenance })
    }

    pub fn from_samples(samples: &[LabeledSample<T>], provenance: u64) -> Result<Self> {
        let bands = samples.first().map(|s| s.spectrum.len()).unwrap_or(0);
        if let Some(s) = samples.iter().find(|s| s.spectrum.len() != bands) {
            return Err(Error::shape(format!("sample with {} bands in a {bands}-band dataset", s.spectrum.len())));
        }
        let features = samples.iter().flat_map(|s| s.spectrum.values.iter().copied()).collect();
        let labels = samples.iter().map(|s| s.oxygenation).collect();
        let domains = samples.iter().map(|s| s.domain).collect();
        Self::from_parts(bands.max(1), features, labels, domains, provenance)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn provenance(&self) -> u64 {
        self.provenance
    }

    pub fn features(&self) -> &[T] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.features[i * self.bands..(i + 1) * self.bands]
    }

    pub fn label(&self, i: usize) -> Option<T> {
        let l = self.labels[i];
        (!l.is_nan()).then_some(l)
    }

    /// Labels with NaN marking hidden ones.
    pub fn raw_labels(&self) -> &[T] {
        &self.labels
    }

    /// All labels, or an error if any is hidden.
    pub fn labels(&self) -> Result<&[T]> {
        if self.labels.iter().any(|l| l.is_nan()) {
            return Err(Error::Domain("dataset has hidden oxygenation labels".into()));
        }
        Ok(&self.labels)
    }

    pub fn domain(&self, i: usize) -> Domain {
        self.domains[i]
    }

    pub fn domains(&self) -> &[Domain] {
        &self.domains
    }

    pub fn sample(&self, i: usize) -> LabeledSample<T> {
        LabeledSample {
            spectrum: BandSpectrum { values: self.row(i).to_vec(), normalized: true },
            oxygenation: self.label(i),
            domain: self.domain(i),
        }
    }

    /// Rows `indices`, in that order. Duplicates are allowed.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::config("subset must not be empty"));
        }
        let mut features = Vec::with_capacity(indices.len() * self.bands);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Ok(Self {
            bands: self.bands,
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            domains: indices.iter().map(|&i| self.domains[i]).collect(),
            provenance: self.provenance,
        })
    }

    /// Concatenation of `self` and `other`.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.bands != other.bands {
            return Err(Error::shape("cannot concatenate datasets with different band counts"));
        }
        let mut out = self.clone();
        out.features.extend_from_slice(&other.features);
        out.labels.extend_from_slice(&other.labels);
        out.domains.extend_from_slice(&other.domains);
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            bands: self.bands,
            features: self.features.iter().map(|v| U::lit(v.as_f64())).collect(),
            labels: self.labels.iter().map(|v| U::lit(v.as_f64())).collect(),
            domains: self.domains.clone(),
            provenance: self.provenance,
        }
    }

    /// Same spectra with every label hidden and every domain set to `domain`.
    pub fn relabeled(&self, domain: Domain, hide_labels: bool) -> Self {
        let mut out = self.clone();
        out.domains.iter_mut().for_each(|d| *d = domain);
        if hide_labels {
            out.labels.iter_mut().for_each(|l| *l = T::nan());
        }
        out
    }

    /// Bitwise equality of every stored value, including NaN payloads.
    pub fn bit_eq(&self, other: &Self) -> bool {
        let same = |a: &[T], b: &[T]| a.len() == b.len() && encode(a) == encode(b);
        self.bands == other.bands
            && self.provenance == other.provenance
            && self.domains == other.domains
            && same(&self.features, &other.features)
            && same(&self.labels, &other.labels)
    }

    /// Writes `band_0,...,oxygenation,domain` rows; hidden labels are empty.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for b in 0..self.bands {
            let _ = write!(s, "band_{b},");
        }
        s.push_str("oxygenation,domain\n");
        for i in 0..self.len() {
            for v in self.row(i) {
                let _ = write!(s, "{v:e},");
            }
            if let Some(l) = self.label(i) {
                let _ = write!(s, "{l}");
            }
            let _ = writeln!(s, ",{}", self.domain(i).label());
        }
        std::fs::write(path, s)?;
        Ok(())
    }
}

fn encode<T: Scalar>(values: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * T::BYTES);
    values.iter().for_each(|v| v.write_le(&mut out));
    out
}

/// FNV-1a digest of a textual configuration description.
pub fn digest(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Counts gathered while generating a dataset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GenerationReport {
    pub samples: usize,
    /// Draws discarded because the simulation was degenerate or the band
    /// spectrum could not be normalized.
    pub dropped: usize,
}

/// Upper bound on redraws for a single sample.
pub const MAX_REDRAWS: u64 = 1000;

/// Simulates `n` independent tissues and turns them into a normalized,
/// labeled, simulated-domain dataset.
///
/// Sample `i` only depends on `seed` and `i`, so the result is the same for
/// any worker count. `progress` is called with the number of finished
/// samples.
#[allow(clippy::too_many_arguments)]
pub fn generate_dataset<T: Scalar>(
    n: usize,
    priors: &PriorConfig,
    grid: &GridSpec,
    transport: &TransportConfig,
    camera: &CameraModel,
    table: &ExtinctionTable,
    seed: u64,
    progress: Option<&(dyn Fn(usize) + Sync)>,
) -> Result<(Dataset<T>, GenerationReport)> {
    if n == 0 {
        return Err(Error::config("dataset count must be >= 1"));
    }
    priors.validate()?;
    grid.validate()?;
    transport.validate()?;
    let inner = TransportConfig { workers: 0, ..*transport };
    let done = AtomicUsize::new(0);
    let results = with_workers(transport.workers, || {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let r = generate_sample(i as u64, priors, grid, &inner, camera, table, seed);
                let finished = done.fetch_add(1, Ordering::Relaxed) + 1;
                if let Some(p) = progress {
                    p(finished);
                }
                r
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let mut report = GenerationReport { samples: n, dropped: 0 };
    let mut samples = Vec::with_capacity(n);
    for (sample, drops) in results {
        report.dropped += drops;
        samples.push(LabeledSample {
            spectrum: sample.spectrum.cast::<T>(),
            oxygenation: sample.oxygenation.map(T::lit),
            domain: Domain::Simulated,
        });
    }
    let provenance = digest(&format!(
        "n={n};seed={seed};priors={priors:?};grid={grid:?};photons={};roulette={},{};max_path={};lateral={:?};\
         camera={:?},{:?},{:?},{:?};table={:?}",
        inner.n_photons,
        inner.roulette_threshold,
        inner.roulette_survival_factor,
        inner.max_path_length,
        inner.lateral,
        camera.wavelengths,
        camera.response,
        camera.light_source,
        camera.transmission,
        table.rows().collect::<Vec<_>>(),
    ));
    Ok((Dataset::from_samples(&samples, provenance)?, report))
}

fn generate_sample(
    index: u64,
    priors: &PriorConfig,
    grid: &GridSpec,
    transport: &TransportConfig,
    camera: &CameraModel,
    table: &ExtinctionTable,
    seed: u64,
) -> Result<(LabeledSample<f64>, usize)> {
    let tissue_base = derive_seed2(seed, streams::TISSUE, index);
    let sim_base = derive_seed2(seed, streams::SIMULATION, index);
    for attempt in 0..MAX_REDRAWS {
        let tissue = sample_tissue(priors, derive_seed(tissue_base, attempt))?;
        let voxels = VoxelGrid::for_tissue(&tissue, grid)?;
        let spectrum =
            simulate_spectrum(&tissue, &voxels, &camera.wavelengths, table, transport, derive_seed(sim_base, attempt))?;
        if spectrum.any_degenerate() {
            continue;
        }
        let bands = adapt_to_camera(&spectrum, camera, None, &mut rng_from_seed(0))?;
        let Ok(values) = normalize_values(&bands.values) else { continue };
        let label = label_oxygenation(&tissue, &spectrum.penetration_depth)?;
        let sample = LabeledSample {
            spectrum: BandSpectrum { values, normalized: true },
            oxygenation: Some(label),
            domain: Domain::Simulated,
        };
        return Ok((sample, attempt as usize));
    }
    Err(Error::Numeric(format!("sample {index}: no usable simulation after {MAX_REDRAWS} draws")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub strat_bins: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train_fraction: 0.8, val_fraction: 0.2, strat_bins: 10, seed: 0 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let (t, v) = (self.train_fraction, self.val_fraction);
        if !(t > 0.0 && v > 0.0) || (t + v - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("split fractions {t} + {v} must be positive and sum to 1")));
        }
        if self.strat_bins == 0 {
            return Err(Error::config("split.strat_bins must be >= 1"));
        }
        Ok(())
    }
}

/// Oxygenation bin of `label` among `bins` equal-width bins on [0, 1].
pub fn stratum(label: f64, bins: usize) -> usize {
    ((label * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

/// Per-stratum random partition into train and validation sets. Each output
/// keeps the original sample order.
pub fn stratified_split<T: Scalar>(ds: &Dataset<T>, spec: &SplitSpec) -> Result<(Dataset<T>, Dataset<T>)> {
    spec.validate()?;
    let labels = ds.labels()?;
    let mut bins = vec![Vec::new(); spec.strat_bins];
    for (i, l) in labels.iter().enumerate() {
        bins[stratum(l.as_f64(), spec.strat_bins)].push(i);
    }
    let mut train = Vec::with_capacity(ds.len());
    let mut val = Vec::with_capacity(ds.len());
    let split_seed = derive_seed(spec.seed, streams::SPLIT);
    for (b, members) in bins.iter().enumerate() {
        match members.len() {
            0 => continue,
            1 => return Err(Error::config(format!("stratum {b} holds a single sample and cannot be split"))),
            m => {
                let n_train = ((m as f64 * spec.train_fraction).round() as usize).clamp(1, m - 1);
                let order = permutation(m, derive_seed(split_seed, b as u64));
                for (rank, &k) in order.iter().enumerate() {
                    if rank < n_train {
                        train.push(members[k]);
                    } else {
                        val.push(members[k]);
                    }
                }
            }
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((ds.subset(&train)?, ds.subset(&val)?))
}

/// Adds fresh per-band Gaussian noise at `snr_db` to every sample and
/// re-normalizes. An infinite SNR returns the input unchanged.
pub fn augment_noise<T: Scalar>(ds: &Dataset<T>, snr_db: f64, epoch_seed: u64) -> Result<Dataset<T>> {
    if snr_db == f64::INFINITY {
        return Ok(ds.clone());
    }
    if snr_db.is_nan() {
        return Err(Error::config("noise SNR must be a number"));
    }
    let base = derive_seed(epoch_seed, streams::NOISE);
    let bands = ds.bands;
    let mut out = ds.clone();
    out.features
        .par_chunks_mut(bands)
        .enumerate()
        .try_for_each(|(i, row)| -> Result<()> {
            let mut rng = rng_from_seed(derive_seed(base, i as u64));
            add_band_noise(row, snr_db, &mut rng);
            let values = normalize_values(row)?;
            row.copy_from_slice(&values);
            Ok(())
        })?;
    Ok(out)
}

/// Systematic differences applied to simulated spectra to stand in for
/// measured ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistortionSpec {
    /// Relative linear gain change from the first to the last band.
    pub tilt: f64,
    /// Relative gain at the central band compared with the two ends.
    pub curvature: f64,
    /// Amplitude of a slow sinusoidal ripple across the bands.
    pub ripple: f64,
    /// Number of ripple periods over the band axis.
    pub ripple_periods: f64,
    /// Standard deviation of the per-sample random scaling of the drift.
    pub drift_jitter: f64,
    /// Fraction of each band's signal leaked equally into its neighbours.
    pub crosstalk: f64,
    /// Explicit row-stochastic crosstalk matrix, overriding `crosstalk`.
    pub crosstalk_matrix: Option<Vec<Vec<f64>>>,
    /// Noise applied after distortion; `None` disables it.
    pub noise_snr_db: Option<f64>,
    pub seed: u64,
}

impl Default for DistortionSpec {
    fn default() -> Self {
        Self {
            tilt: 1.0,
            curvature: 0.3,
            ripple: 0.2,
            ripple_periods: 2.0,
            drift_jitter: 0.2,
            crosstalk: 0.1,
            crosstalk_matrix: None,
            noise_snr_db: Some(30.0),
            seed: 0,
        }
    }
}

impl DistortionSpec {
    pub fn identity() -> Self {
        Self {
            tilt: 0.0,
            curvature: 0.0,
            ripple: 0.0,
            ripple_periods: 0.0,
            drift_jitter: 0.0,
            crosstalk: 0.0,
            crosstalk_matrix: None,
            noise_snr_db: None,
            seed: 0,
        }
    }

    /// Mean multiplicative gain per band.
    pub fn drift(&self, bands: usize) -> Vec<f64> {
        (0..bands)
            .map(|b| {
                let x = if bands > 1 { b as f64 / (bands - 1) as f64 } else { 0.5 };
                let centered = 2.0 * x - 1.0;
                1.0 + self.tilt * (x - 0.5)
                    + self.curvature * (1.0 - centered * centered)
                    + self.ripple * (std::f64::consts::TAU * self.ripple_periods * x).sin()
            })
            .collect()
    }

    /// Row-stochastic crosstalk matrix, row-major.
    pub fn crosstalk_matrix(&self, bands: usize) -> Result<Vec<f64>> {
        if let Some(m) = &self.crosstalk_matrix {
            if m.len() != bands || m.iter().any(|r| r.len() != bands) {
                return Err(Error::config(format!("distortion.crosstalk_matrix must be {bands}x{bands}")));
            }
            for (i, r) in m.iter().enumerate() {
                let sum: f64 = r.iter().sum();
                if r.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::config(format!("distortion.crosstalk_matrix row {i} is not stochastic")));
                }
            }
            return Ok(m.iter().flatten().copied().collect());
        }
        let c = self.crosstalk;
        if !(0.0..1.0).contains(&c) {
            return Err(Error::config(format!("distortion.crosstalk {c} must lie in [0, 1)")));
        }
        let mut m = vec![0.0; bands * bands];
        for i in 0..bands {
            let neighbours: Vec<usize> = [i.checked_sub(1), (i + 1 < bands).then_some(i + 1)].into_iter().flatten().collect();
            if neighbours.is_empty() {
                m[i * bands + i] = 1.0;
                continue;
            }
            m[i * bands + i] = 1.0 - c;
            for &j in &neighbours {
                m[i * bands + j] = c / neighbours.len() as f64;
            }
        }
        Ok(m)
    }

    pub fn validate(&self, bands: usize) -> Result<()> {
        self.crosstalk_matrix(bands)?;
        if !(self.drift_jitter >= 0.0) {
            return Err(Error::config("distortion.drift_jitter must be >= 0"));
        }
        let d = self.drift(bands);
        let worst = 1.0 - 4.0 * self.drift_jitter * d.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
        if d.iter().any(|&v| !(v > 0.0)) || !(worst > 0.0) {
            return Err(Error::config("distortion drift must stay strictly positive"));
        }
        Ok(())
    }
}

/// Distorts every spectrum of `ds` into a pseudo-real sample.
///
/// Returns the distorted dataset, whose labels are hidden and whose domain
/// is [`Domain::Real`], together with the original labels for oracle use.
pub fn make_pseudo_real<T: Scalar>(ds: &Dataset<T>, spec: &DistortionSpec) -> Result<(Dataset<T>, Vec<Option<T>>)> {
    let bands = ds.bands;
    spec.validate(bands)?;
    let drift = spec.drift(bands);
    let mix = spec.crosstalk_matrix(bands)?;
    let base = derive_seed(spec.seed, streams::DISTORTION);
    let hidden: Vec<Option<T>> = (0..ds.len()).map(|i| ds.label(i)).collect();
    let mut out = ds.relabeled(Domain::Real, true);
    out.features
        .par_chunks_mut(bands)
        .enumerate()
        .try_for_each(|(i, row)| -> Result<()> {
            let mut rng = rng_from_seed(derive_seed(base, i as u64));
            let jitter: f64 = if spec.drift_jitter > 0.0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                (1.0 + spec.drift_jitter * z).clamp(1.0 - 4.0 * spec.drift_jitter, 1.0 + 4.0 * spec.drift_jitter)
            } else {
                1.0
            };
            let drifted: Vec<f64> =
                row.iter().zip(&drift).map(|(v, d)| v.as_f64() * (1.0 + jitter * (d - 1.0))).collect();
            let mut mixed: Vec<T> = (0..bands)
                .map(|r| T::lit((0..bands).map(|c| mix[r * bands + c] * drifted[c]).sum()))
                .collect();
            if let Some(snr) = spec.noise_snr_db {
                add_band_noise(&mut mixed, snr, &mut rng);
            }
            row.copy_from_slice(&normalize_values(&mixed)?);
            Ok(())
        })?;
    Ok((out, hidden))
}

/// Indices of one balanced batch: equally many simulated and real rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BalancedBatch {
    pub sim: Vec<usize>,
    pub real: Vec<usize>,
}

/// One epoch of balanced batches over a simulated and a real pool.
///
/// The larger pool is visited once in a random order and cut into
/// `batch / 2`-sized pieces (the last one may be shorter); the smaller pool
/// is drawn uniformly with replacement to the same sizes. When the pools
/// have equal size both are visited once.
pub fn balanced_batches(n_sim: usize, n_real: usize, batch: usize, seed: u64) -> Result<Vec<BalancedBatch>> {
    if batch == 0 || batch % 2 != 0 {
        return Err(Error::config(format!("balanced batch size {batch} must be even and positive")));
    }
    if n_sim == 0 || n_real == 0 {
        return Err(Error::config("balanced batches need nonempty simulated and real pools"));
    }
    let half = batch / 2;
    let base = derive_seed(seed, streams::SHUFFLE);
    let n = n_sim.max(n_real);
    let walk = |len: usize, stream: u64| -> Vec<usize> {
        if len == n {
            permutation(len, derive_seed(base, stream))
        } else {
            let mut rng = rng_from_seed(derive_seed(base, stream + 2));
            (0..n).map(|_| rng.gen_range(0..len)).collect()
        }
    };
    let sim = walk(n_sim, 0);
    let real = walk(n_real, 1);
    Ok(sim
        .chunks(half)
        .zip(real.chunks(half))
        .map(|(s, r)| BalancedBatch { sim: s.to_vec(), real: r.to_vec() })
        .collect())
}

/// Permutation used for the simulated pool by [`balanced_batches`] when it is
/// the larger pool; plain training shuffles with the same order.
pub fn epoch_order(n: usize, seed: u64) -> Vec<usize> {
    permutation(n, derive_seed(derive_seed(seed, streams::SHUFFLE), 0))
}

/// Encodes `ds` in the binary dataset format.
pub fn encode_dataset<T: Scalar>(ds: &Dataset<T>) -> Vec<u8> {
    let n = ds.len();
    let mut out = Vec::with_capacity(DATASET_HEADER_BYTES + n * (ds.bands + 2) * T::BYTES + DATASET_TRAILER_BYTES);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(T::BYTES as u32).to_le_bytes());
    out.extend_from_slice(&(ds.bands as u32).to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&ds.provenance.to_le_bytes());
    for i in 0..n {
        ds.row(i).iter().for_each(|v| v.write_le(&mut out));
        ds.labels[i].write_le(&mut out);
        T::lit(ds.domains[i].label() as f64).write_le(&mut out);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_dataset<T: Scalar>(bytes: &[u8]) -> Result<Dataset<T>> {
    if bytes.len() < DATASET_HEADER_BYTES + DATASET_TRAILER_BYTES {
        return Err(FormatError::Length { found: bytes.len(), expected: DATASET_HEADER_BYTES + DATASET_TRAILER_BYTES }.into());
    }
    if &bytes[..8] != DATASET_MAGIC {
        return Err(FormatError::BadMagic { expected: "OXYDSET" }.into());
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32_at(8);
    if version != DATASET_VERSION {
        return Err(FormatError::Version { found: version, expected: DATASET_VERSION }.into());
    }
    let width = u32_at(12);
    if width as usize != T::BYTES {
        return Err(FormatError::ScalarWidth { found: width, expected: T::BYTES as u32 }.into());
    }
    let bands = u32_at(16) as usize;
    let n = u64_at(20) as usize;
    let provenance = u64_at(28);
    let record = (bands + 2) * T::BYTES;
    let expected = n
        .checked_mul(record)
        .and_then(|b| b.checked_add(DATASET_HEADER_BYTES + DATASET_TRAILER_BYTES))
        .ok_or_else(|| FormatError::Invalid(format!("sample count {n} overflows")))?;
    if bytes.len() != expected {
        return Err(FormatError::Length { found: bytes.len(), expected }.into());
    }
    let body = &bytes[..expected - DATASET_TRAILER_BYTES];
    let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed }.into());
    }
    if bands == 0 || n == 0 {
        return Err(FormatError::Invalid("empty dataset".into()).into());
    }
    let mut features = Vec::with_capacity(n * bands);
    let mut labels = Vec::with_capacity(n);
    let mut domains = Vec::with_capacity(n);
    for rec in body[DATASET_HEADER_BYTES..].chunks_exact(record) {
        let mut vals = rec.chunks_exact(T::BYTES).map(T::read_le);
        features.extend(vals.by_ref().take(bands));
        let label = vals.next().unwrap();
        let domain = vals.next().unwrap();
        labels.push(label);
        let d = domain
            .to_u8()
            .filter(|&d| T::lit(d as f64) == domain)
            .and_then(Domain::from_label)
            .ok_or_else(|| FormatError::Invalid(format!("domain value {domain}")))?;
        domains.push(d);
    }
    if let Some(l) = labels.iter().find(|l| !l.is_nan() && !(**l >= T::zero() && **l <= T::one())) {
        return Err(FormatError::Invalid(format!("label {l} outside [0, 1]")).into());
    }
    Ok(Dataset { bands, features, labels, domains, provenance })
}

pub fn save_dataset<T: Scalar>(ds: &Dataset<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_dataset(ds))?;
    Ok(())
}

pub fn load_dataset<T: Scalar>(path: &Path) -> Result<Dataset<T>> {
    decode_dataset(&std::fs::read(path)?)
}

/// Width in bytes of the scalars stored in a dataset file, read from its
/// header.
pub fn stored_scalar_width(path: &Path) -> Result<usize> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < DATASET_HEADER_BYTES || &bytes[..8] != DATASET_MAGIC {
        return Err(FormatError::BadMagic { expected: "OXYDSET" }.into());
    }
    Ok(u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize)
}
