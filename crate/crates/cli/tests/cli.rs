use std::path::PathBuf;
use std::process::{Command, Output};

use oxyspec::clinical::{read_map_sidecar, RoiMeasurement, SiteKind};
use oxyspec::cube::Hypercube;
use oxyspec::dataset::load_dataset;
use oxyspec::network::{load_model, NetworkSpec};
use oxyspec::optics::ExtinctionTable;
use oxyspec::spectral::{make_camera_model, CameraConfig};

const FAST: &str = r#"
seed = 3

[transport]
n_photons = 20

[dataset]
count = 120
real_count = 60
real_test_fraction = 0.25

[train]
epochs = 3
batch = 32

[bench]
iterations = 2
warmup = 0
height = 8
width = 12
"#;

struct Workdir(PathBuf);

impl Workdir {
    fn new(name: &str) -> Self {
        let dir = std::env::temp_dir().join(format!("oxyspec-cli-{name}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("fast.toml"), FAST).unwrap();
        Workdir(dir)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_oxyspec"))
            .current_dir(&self.0)
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }
}

impl Drop for Workdir {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

fn field<'a>(text: &'a str, key: &str) -> &'a str {
    text.split_whitespace()
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing from {text}"))
}

/// Band-integrated Beer–Lambert reflectance at saturation `s`.
fn forward_spectrum(s: f64) -> Vec<f32> {
    let cam = make_camera_model(&CameraConfig::default()).unwrap();
    let table = ExtinctionTable::bundled();
    let r: Vec<f64> = cam
        .wavelengths
        .iter()
        .map(|&w| {
            let (o, d) = table.extinction(w).unwrap();
            (-3e-6 * (s * o + (1.0 - s) * d)).exp()
        })
        .collect();
    cam.project(&r).unwrap().iter().map(|&v| v as f32 * 0.6).collect()
}

#[test]
fn simulate_is_deterministic_and_writes_pools() {
    let w = Workdir::new("simulate");
    w.ok(&["--config", "fast.toml", "simulate", "--count", "100", "--seed", "7", "--out", "a.bin"]);
    w.ok(&["--config", "fast.toml", "--threads", "1", "simulate", "--count", "100", "--seed", "7", "--out", "b.bin"]);
    assert_eq!(std::fs::read(w.path("a.bin")).unwrap(), std::fs::read(w.path("b.bin")).unwrap());
    assert_eq!(std::fs::read(w.path("a.real.bin")).unwrap(), std::fs::read(w.path("b.real.bin")).unwrap());
    let sim = load_dataset::<f32>(&w.path("a.bin")).unwrap();
    assert_eq!(sim.len(), 100);
    let real = load_dataset::<f32>(&w.path("a.real.bin")).unwrap();
    let test = load_dataset::<f32>(&w.path("a.real-test.bin")).unwrap();
    assert_eq!(real.len() + test.len(), 60);
    assert!(real.labels().is_err());
    assert!(test.labels().is_ok());
}

#[test]
fn invalid_prior_range_exits_with_config_code() {
    let w = Workdir::new("badprior");
    std::fs::write(w.path("bad.toml"), "[priors.shared.oxygenation]\nlo = 0.9\nhi = 0.1\n").unwrap();
    let out = w.run(&["--config", "bad.toml", "simulate", "--out", "x.bin"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("priors.shared.oxygenation"));
    assert!(!w.path("x.bin").exists());
    std::fs::write(w.path("typo.toml"), "[train]\nepoch = 3\n").unwrap();
    assert_eq!(w.run(&["--config", "typo.toml", "simulate", "--out", "x.bin"]).status.code(), Some(2));
}

#[test]
fn corrupted_dataset_is_a_data_error() {
    let w = Workdir::new("corrupt");
    w.ok(&["--config", "fast.toml", "simulate", "--count", "40", "--out", "d.bin"]);
    let mut bytes = std::fs::read(w.path("d.bin")).unwrap();
    bytes[60] ^= 0xff;
    std::fs::write(w.path("d.bin"), bytes).unwrap();
    let out = w.run(&["--config", "fast.toml", "train", "--variant", "fcn", "--data", "d.bin", "--out", "m.model"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));
}

#[test]
fn train_evaluate_and_bench() {
    let w = Workdir::new("train");
    w.ok(&["--config", "fast.toml", "simulate", "--out", "ds.bin"]);

    let out = w.run(&["--config", "fast.toml", "train", "--variant", "da-fcn", "--data", "ds.bin", "--out", "da.model"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!w.path("da.model").exists() && !w.path("da.history").exists());

    let report = w.ok(&["--config", "fast.toml", "train", "--variant", "fcn", "--data", "ds.bin", "--out", "fcn.model"]);
    assert_eq!(field(&report, "epochs"), "3");
    let net = load_model::<f32>(&w.path("fcn.model")).unwrap();
    assert_eq!(net.spec(), &NetworkSpec::fcn(16));
    let history = std::fs::read_to_string(w.path("fcn.history")).unwrap();
    assert_eq!(history.lines().count(), 3);

    w.ok(&[
        "--config", "fast.toml", "train", "--variant", "da-fcn", "--data", "ds.bin", "--real", "ds.real.bin", "--out",
        "da.model",
    ]);
    let history = std::fs::read_to_string(w.path("da.history")).unwrap();
    assert!(history.lines().all(|l| l.contains("disc_accuracy=")));

    for model in ["fcn.model", "unmixing"] {
        let report = w.ok(&["--config", "fast.toml", "evaluate", "--model", model, "--data", "ds.real-test.bin"]);
        let mse: f64 = field(&report, "mse").parse().unwrap();
        assert!(mse.is_finite() && (0.0..=1.0).contains(&mse), "{model}: {mse}");
        assert_eq!(field(&report, "samples"), "15");
    }
    let out = w.run(&["--config", "fast.toml", "evaluate", "--model", "fcn.model", "--data", "ds.real.bin"]);
    assert_eq!(out.status.code(), Some(3));

    let table = w.ok(&["--config", "fast.toml", "bench", "--model", "fcn.model", "--model", "unmixing", "--out", "bench.txt"]);
    let rows: Vec<Vec<&str>> = table.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows[0], ["method", "mean_ms", "std_ms", "fps", "threads"]);
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1][0], "fcn");
    assert_eq!(rows[2][0], "unmixing");
    for r in &rows[1..] {
        assert!(r[1..4].iter().all(|v| v.parse::<f64>().is_ok()));
        assert_eq!(r[4], "1");
    }
    let report = std::fs::read_to_string(w.path("bench.txt")).unwrap();
    assert_eq!(report.matches("iterations=2").count(), 2);
}

#[test]
fn infer_maps_and_phantom_ordering() {
    let w = Workdir::new("infer");
    let constant = Hypercube::filled(24, 30, &forward_spectrum(0.7)).unwrap();
    constant.save(&w.path("const.cube")).unwrap();
    w.ok(&["infer", "--model", "unmixing", "--frame", "const.cube", "--out", "a.png"]);
    w.ok(&["infer", "--model", "unmixing", "--frame", "const.cube", "--out", "b.png"]);
    assert_eq!(std::fs::read(w.path("a.oxymap")).unwrap(), std::fs::read(w.path("b.oxymap")).unwrap());
    let map = read_map_sidecar(&w.path("a.oxymap")).unwrap();
    assert!(map.values.iter().all(|&v| v == map.values[0]));
    assert!((map.values[0] - 0.7).abs() < 0.01);

    // three vertical bands: high, borderline and zero saturation
    let spectra = [forward_spectrum(0.8), forward_spectrum(0.4), forward_spectrum(0.0)];
    let phantom = Hypercube::from_fn(40, 90, 16, |_, x| spectra[x / 30].clone()).unwrap();
    phantom.save(&w.path("phantom.cube")).unwrap();
    let mosaic = Hypercube::new(40, 90, 1, oxyspec::clinical::Mosaic::from_cube(&phantom).unwrap().data).unwrap();
    mosaic.save(&w.path("mosaic.cube")).unwrap();
    for frame in ["phantom.cube", "mosaic.cube"] {
        w.ok(&["infer", "--model", "unmixing", "--frame", frame, "--out", "p.png"]);
        let map = read_map_sidecar(&w.path("p.oxymap")).unwrap();
        let roi_mean = |x: usize| {
            let r = oxyspec::clinical::Roi::around(x, 20).unwrap();
            oxyspec::clinical::roi_oxygenation(&map, &r).unwrap()
        };
        let (well, anast, isch) = (roi_mean(15), roi_mean(45), roi_mean(75));
        assert!(well > anast && anast > isch, "{frame}: {well} {anast} {isch}");
    }
}

#[test]
fn manifest_fit_recovers_exponential() {
    let w = Workdir::new("manifest");
    std::fs::create_dir_all(w.path("frames")).unwrap();
    let (a, b) = (1.5, -5.0);
    let mut rows = Vec::new();
    for f in 0..3 {
        let levels: Vec<f64> = (0..4).map(|k| (f * 4 + k) as f64 / 11.0).collect();
        let spectra: Vec<Vec<f32>> = levels.iter().map(|&s| forward_spectrum(s)).collect();
        let cube = Hypercube::from_fn(30, 120, 16, |_, x| spectra[x / 30].clone()).unwrap();
        cube.save(&w.path(&format!("frames/f{f}.cube"))).unwrap();
        for (k, &s) in levels.iter().enumerate() {
            let site = if s > 0.6 { SiteKind::WellPerfused } else if s > 0.3 { SiteKind::Anastomosis } else { SiteKind::Ischemic };
            rows.push(RoiMeasurement { frame_id: format!("f{f}"), site, x: 30 * k + 15, y: 15, lactate: a * (b * s).exp() });
        }
    }
    oxyspec::clinical::write_manifest(&rows, &w.path("manifest.csv")).unwrap();
    let report = w.ok(&[
        "evaluate", "--model", "unmixing", "--frames", "frames", "--manifest", "manifest.csv", "--out", "fit.csv",
    ]);
    let got = |k: &str| -> f64 { field(&report, k).parse().unwrap() };
    assert!((got("a") / a - 1.0).abs() < 0.1, "{report}");
    assert!((got("b") / b - 1.0).abs() < 0.1, "{report}");
    assert!(got("r_squared") > 0.9 && got("correlation") < 0.0);
    assert_eq!(got("n_points"), 12.0);
    let csv = std::fs::read_to_string(w.path("fit.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.starts_with("measured,")).count(), 12);
    assert_eq!(csv.lines().filter(|l| l.starts_with("fit,")).count(), 101);
}
