//! Pipeline configuration file.

use std::path::{Path, PathBuf};

use oxyspec::dataset::{DistortionSpec, SplitSpec};
use oxyspec::network::{LayerSpec, NetworkSpec, TrainConfig, Variant};
use oxyspec::optics::{ExtinctionTable, PriorConfig};
use oxyspec::rng::{derive_seed, streams};
use oxyspec::spectral::{make_camera_model, CameraConfig, CameraModel};
use oxyspec::transport::{GridSpec, TransportConfig};
use oxyspec::{Error, Result};
use serde::Deserialize;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Simulated samples written by `simulate`.
    pub count: usize,
    /// Extra samples turned into the pseudo-real pool; 0 disables it.
    pub real_count: usize,
    /// Share of the pseudo-real pool kept aside, with labels, for testing.
    pub real_test_fraction: f64,
    pub split: SplitSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { count: 10_000, real_count: 1_875, real_test_fraction: 0.061, split: SplitSpec::default() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Replaces the built-in generator layers of the fcn variants.
    pub fcn: Option<Vec<LayerSpec>>,
    /// Replaces the built-in generator layers of the cnn variants.
    pub cnn: Option<Vec<LayerSpec>>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub iterations: usize,
    pub warmup: usize,
    pub threads: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { iterations: 1000, warmup: 5, threads: 1, height: 272, width: 512 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtinctionConfig {
    /// `wavelength_nm,eps_hbo2,eps_hb`; the bundled table when unset.
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Global seed; every stage derives its own stream from it.
    pub seed: u64,
    pub priors: PriorConfig,
    pub grid: GridSpec,
    pub transport: TransportConfig,
    pub camera: CameraConfig,
    pub extinction: ExtinctionConfig,
    pub dataset: DatasetConfig,
    pub distortion: DistortionSpec,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
}

impl PipelineConfig {
    /// Parses `text`; relative CSV paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.camera.response_csv);
        fix(&mut self.camera.light_source_csv);
        fix(&mut self.camera.transmission_csv);
        fix(&mut self.camera.correction_csv);
        fix(&mut self.extinction.csv);
    }

    pub fn validate(&self) -> Result<()> {
        for p in self.camera.referenced_paths().into_iter().chain(self.extinction.csv.as_deref()) {
            if !p.is_file() {
                return Err(Error::config(format!("referenced file {} does not exist", p.display())));
            }
        }
        for (name, seed) in [
            ("dataset.split.seed", self.dataset.split.seed),
            ("distortion.seed", self.distortion.seed),
            ("train.seed", self.train.seed),
        ] {
            if seed != 0 {
                return Err(Error::config(format!("{name}: set the top-level seed instead")));
            }
        }
        self.priors.validate()?;
        self.grid.validate()?;
        self.transport.validate()?;
        self.dataset.split.validate()?;
        self.distortion.validate(self.camera.bands)?;
        self.train.validate()?;
        if self.dataset.count == 0 {
            return Err(Error::config("dataset.count must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dataset.real_test_fraction) {
            return Err(Error::config("dataset.real_test_fraction must lie in [0, 1)"));
        }
        let b = &self.bench;
        if b.iterations == 0 || b.threads == 0 || b.height == 0 || b.width == 0 {
            return Err(Error::config("bench.iterations, threads, height and width must be >= 1"));
        }
        Ok(())
    }

    /// Applies the global seed and command-line overrides.
    pub fn finalize(mut self, seed: Option<u64>, threads: Option<usize>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(t) = threads {
            self.transport.workers = t;
            self.bench.threads = t;
        }
        self.dataset.split.seed = derive_seed(self.seed, streams::SPLIT);
        self.distortion.seed = derive_seed(self.seed, streams::DISTORTION);
        self.train.seed = derive_seed(self.seed, streams::TRAINING);
        self
    }

    pub fn simulation_seed(&self) -> u64 {
        derive_seed(self.seed, streams::SIMULATION)
    }

    pub fn camera_model(&self) -> Result<CameraModel> {
        make_camera_model(&self.camera)
    }

    pub fn extinction_table(&self) -> Result<ExtinctionTable> {
        match &self.extinction.csv {
            Some(p) => ExtinctionTable::from_csv_path(p),
            None => Ok(ExtinctionTable::bundled()),
        }
    }

    pub fn network_spec(&self, variant: Variant) -> NetworkSpec {
        let bands = self.camera.bands;
        let custom = match variant {
            Variant::Fcn | Variant::DaFcn => &self.network.fcn,
            Variant::Cnn | Variant::DaCnn => &self.network.cnn,
        };
        match custom {
            Some(layers) => NetworkSpec { input_bands: bands, layers: layers.clone(), discriminator: variant.is_adversarial() },
            None => variant.spec(bands),
        }
    }
}
