use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use oxyspec::clinical::{
    benchmark_inference, calibrate_frame, fit_lactate_exponential, read_manifest, render_oxygenation_map, roi_oxygenation,
    Mosaic, NetworkEstimator, OxygenationEstimator, RawFrame, UnmixingEstimator, BENCH_TABLE_HEADER,
};
use oxyspec::cube::{Hypercube, OxygenationMap};
use oxyspec::dataset::{epoch_order, generate_dataset, load_dataset, make_pseudo_real, save_dataset, stratified_split, Dataset};
use oxyspec::network::{evaluate_mse, load_model, save_model, train_adversarial, train_regressor, EpochRecord, Network, Variant};
use oxyspec::rng::{derive_seed, stream_rng, streams};
use oxyspec::spectral::{band_area, Domain};
use oxyspec::unmixing::{unmix_so2, EndmemberMatrix};
use oxyspec::{Error, Result};
use rand::Rng;

use crate::config::PipelineConfig;

pub const UNMIXING: &str = "unmixing";

/// `ds.bin` becomes `ds.<suffix>.bin`.
pub fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = out.extension().map(|e| format!(".{}", e.to_string_lossy())).unwrap_or_default();
    out.with_file_name(format!("{stem}.{suffix}{ext}"))
}

pub fn simulate(cfg: &PipelineConfig, count: Option<usize>, out: &Path) -> Result<()> {
    let count = count.unwrap_or(cfg.dataset.count);
    if count == 0 {
        return Err(Error::config("--count must be >= 1"));
    }
    let real_count = cfg.dataset.real_count;
    let total = count + real_count;
    let camera = cfg.camera_model()?;
    let table = cfg.extinction_table()?;
    let step = (total / 10).max(1);
    let done = AtomicUsize::new(0);
    let progress = |_: usize| {
        let k = done.fetch_add(1, Ordering::Relaxed) + 1;
        if k % step == 0 || k == total {
            eprintln!("simulated {k}/{total}");
        }
    };
    let (all, report) = generate_dataset::<f32>(
        total,
        &cfg.priors,
        &cfg.grid,
        &cfg.transport,
        &camera,
        &table,
        cfg.simulation_seed(),
        Some(&progress),
    )?;
    eprintln!("redrew {} degenerate samples", report.dropped);
    let sim = all.subset(&(0..count).collect::<Vec<_>>())?;
    save_dataset(&sim, out)?;
    println!("simulated={} path={}", sim.len(), out.display());
    if real_count == 0 {
        return Ok(());
    }
    let pool = all.subset(&(count..total).collect::<Vec<_>>())?;
    let (distorted, hidden) = make_pseudo_real(&pool, &cfg.distortion)?;
    let n_test = ((real_count as f64 * cfg.dataset.real_test_fraction).round() as usize).min(real_count - 1);
    let order = epoch_order(real_count, derive_seed(cfg.seed, streams::DISTORTION));
    let mut test_idx = order[..n_test].to_vec();
    let mut train_idx = order[n_test..].to_vec();
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    let real_path = sibling(out, "real");
    save_dataset(&distorted.subset(&train_idx)?, &real_path)?;
    println!("pseudo_real={} path={}", train_idx.len(), real_path.display());
    if n_test > 0 {
        let bands = distorted.bands();
        let features = test_idx.iter().flat_map(|&i| distorted.row(i).to_vec()).collect();
        let labels = test_idx.iter().map(|&i| hidden[i]).collect();
        let test = Dataset::from_parts(bands, features, labels, vec![Domain::Real; n_test], distorted.provenance())?;
        let test_path = sibling(out, "real-test");
        save_dataset(&test, &test_path)?;
        println!("pseudo_real_test={} path={}", n_test, test_path.display());
    }
    Ok(())
}

/// Seeded 80/20 split for unlabeled data.
fn random_split(ds: &Dataset<f32>, train_fraction: f64, seed: u64) -> Result<(Dataset<f32>, Dataset<f32>)> {
    let n = ds.len();
    if n < 2 {
        return Err(Error::config("real-domain dataset needs at least 2 samples"));
    }
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let order = epoch_order(n, seed);
    let mut a = order[..n_train].to_vec();
    let mut b = order[n_train..].to_vec();
    a.sort_unstable();
    b.sort_unstable();
    Ok((ds.subset(&a)?, ds.subset(&b)?))
}

pub fn train(
    cfg: &PipelineConfig,
    variant: Variant,
    data: &Path,
    real: Option<&Path>,
    out: &Path,
    history: Option<&Path>,
) -> Result<()> {
    if variant.is_adversarial() && real.is_none() {
        return Err(Error::config(format!("variant {} needs a real-domain dataset (--real)", variant.name())));
    }
    let spec = cfg.network_spec(variant);
    let sim = load_dataset::<f32>(data)?;
    let (sim_train, sim_val) = stratified_split(&sim, &cfg.dataset.split)?;
    let mut lines = Vec::new();
    let mut log = |r: &EpochRecord| {
        let line = r.to_line();
        eprintln!("{line}");
        lines.push(line);
    };
    let (net, hist) = match real {
        Some(path) if variant.is_adversarial() => {
            let real = load_dataset::<f32>(path)?;
            let seed = derive_seed(cfg.dataset.split.seed, 1);
            let (real_train, real_val) = random_split(&real, cfg.dataset.split.train_fraction, seed)?;
            train_adversarial(&spec, &cfg.train, &sim_train, &sim_val, &real_train, &real_val, Some(&mut log))?
        }
        _ => train_regressor(&spec, &cfg.train, &sim_train, &sim_val, Some(&mut log))?,
    };
    save_model(&net, out)?;
    let history_path = history.map(Path::to_path_buf).unwrap_or_else(|| out.with_extension("history"));
    let mut text = lines.join("\n");
    text.push('\n');
    std::fs::write(&history_path, text)?;
    println!(
        "variant={} epochs={} best_epoch={} best_val_loss={:e} model={} history={}",
        variant.name(),
        hist.records.len(),
        hist.best_epoch,
        hist.best_val_loss(),
        out.display(),
        history_path.display()
    );
    Ok(())
}

/// A loaded network or the unmixing baseline.
pub enum Method {
    Network { name: String, net: Network<f32> },
    Unmixing { endmembers: EndmemberMatrix, correction: Option<Vec<f64>> },
}

impl Method {
    pub fn load(cfg: &PipelineConfig, which: &str) -> Result<Self> {
        if which == UNMIXING {
            let camera = cfg.camera_model()?;
            let endmembers = EndmemberMatrix::from_camera(&camera, &cfg.extinction_table()?)?;
            let n = camera.bands();
            let identity = (0..n * n).all(|i| camera.correction[i] == if i / n == i % n { 1.0 } else { 0.0 });
            let correction = (!identity).then(|| camera.correction.clone());
            return Ok(Method::Unmixing { endmembers, correction });
        }
        let path = Path::new(which);
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| which.to_string());
        Ok(Method::Network { name, net: load_model::<f32>(path)? })
    }

    pub fn estimator(&self) -> Box<dyn OxygenationEstimator + '_> {
        match self {
            Method::Network { name, net } => Box::new(NetworkEstimator { name: name.clone(), net }),
            Method::Unmixing { endmembers, correction } => {
                Box::new(UnmixingEstimator { endmembers, correction: correction.as_deref() })
            }
        }
    }

    fn dataset_mse(&self, ds: &Dataset<f32>) -> Result<f64> {
        match self {
            Method::Network { net, .. } => evaluate_mse(net, ds),
            Method::Unmixing { endmembers, correction } => {
                let labels = ds.labels()?;
                let mut se = 0.0;
                for (i, &l) in labels.iter().enumerate() {
                    let r: Vec<f64> = ds.row(i).iter().map(|&v| v as f64).collect();
                    let so2 = unmix_so2(&r, endmembers, correction.as_deref()).map(|u| u.so2).unwrap_or(0.5);
                    se += (so2 - l as f64).powi(2);
                }
                Ok(se / labels.len() as f64)
            }
        }
    }
}

fn read_light(path: Option<&Path>, bands: usize) -> Result<Vec<f64>> {
    let Some(path) = path else {
        return Ok(vec![1.0; bands]);
    };
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some("band,value") {
        return Err(Error::config(format!("{}: light reference must start with \"band,value\"", path.display())));
    }
    let values = lines
        .map(|l| {
            l.split(',')
                .nth(1)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::config(format!("{}: bad row {l:?}", path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    if values.len() != bands {
        return Err(Error::config(format!("{}: {} values for {bands} bands", path.display(), values.len())));
    }
    Ok(values)
}

/// Loads a frame file; single-band cubes are raw mosaics.
fn load_raw(path: &Path) -> Result<RawFrame> {
    let cube = Hypercube::load(path)?;
    Ok(if cube.bands == 1 { RawFrame::Mosaic(Mosaic::new(cube.height, cube.width, cube.data)?) } else { RawFrame::Cube(cube) })
}

fn estimate_frame(method: &Method, frame: &Path, dark: Option<&Path>, light: Option<&Path>, bands: usize) -> Result<OxygenationMap> {
    let raw = load_raw(frame)?;
    let dark = dark.map(load_raw).transpose()?;
    let light = read_light(light, bands)?;
    let calibrated = calibrate_frame(&raw, dark.as_ref(), &light)?;
    let mut map = method.estimator().estimate(&calibrated.cube)?;
    for ((v, d), &bad) in map.values.iter_mut().zip(map.degenerate.iter_mut()).zip(&calibrated.degenerate) {
        if bad {
            *v = 0.5;
            *d = true;
        }
    }
    Ok(map)
}

pub struct EvaluateArgs<'a> {
    pub model: &'a str,
    pub data: Option<&'a Path>,
    pub frames: Option<&'a Path>,
    pub manifest: Option<&'a Path>,
    pub light: Option<&'a Path>,
    pub out: Option<&'a Path>,
}

pub fn evaluate(cfg: &PipelineConfig, args: &EvaluateArgs) -> Result<()> {
    let method = Method::load(cfg, args.model)?;
    let mut report = String::new();
    if let Some(data) = args.data {
        let ds = load_dataset::<f32>(data)?;
        let mse = method.dataset_mse(&ds)?;
        let _ = writeln!(report, "method={}\nsamples={}\nmse={mse:e}", args.model, ds.len());
    }
    if let Some(manifest) = args.manifest {
        let frames = args.frames.ok_or_else(|| Error::config("--manifest needs --frames"))?;
        let rows = read_manifest(manifest)?;
        let mut maps: Vec<(String, OxygenationMap)> = Vec::new();
        let mut points = Vec::with_capacity(rows.len());
        let mut csv = String::from("kind,site_kind,o2,lactate_mmol_per_l\n");
        for row in &rows {
            if !maps.iter().any(|(id, _)| id == &row.frame_id) {
                let path = frames.join(format!("{}.cube", row.frame_id));
                maps.push((row.frame_id.clone(), estimate_frame(&method, &path, None, args.light, cfg.camera.bands)?));
            }
            let map = &maps.iter().find(|(id, _)| id == &row.frame_id).unwrap().1;
            let o2 = roi_oxygenation(map, &row.roi()?)?;
            points.push((o2, row.lactate));
            let _ = writeln!(csv, "measured,{},{o2},{}", row.site, row.lactate);
        }
        let fit = fit_lactate_exponential(&points)?;
        for (o2, l) in fit.curve(101) {
            let _ = writeln!(csv, "fit,,{o2},{l}");
        }
        if let Some(out) = args.out {
            std::fs::write(out, csv)?;
        }
        let _ = write!(report, "method={}\n{}", args.model, fit.report());
    }
    if report.is_empty() {
        return Err(Error::config("evaluate needs --data or --manifest"));
    }
    print!("{report}");
    Ok(())
}

pub fn infer(
    cfg: &PipelineConfig,
    model: &str,
    frame: &Path,
    dark: Option<&Path>,
    light: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let method = Method::load(cfg, model)?;
    let map = estimate_frame(&method, frame, dark, light, cfg.camera.bands)?;
    let sidecar = render_oxygenation_map(&map, out)?;
    let mean = map.values.iter().map(|&v| v as f64).sum::<f64>() / map.values.len() as f64;
    println!(
        "map={} sidecar={} mean={mean:.6} degenerate={}",
        out.display(),
        sidecar.display(),
        map.degenerate_count()
    );
    Ok(())
}

/// Smooth, positive, unnormalized spectra with random level and slope.
pub fn synthetic_frame(height: usize, width: usize, bands: usize, seed: u64) -> Result<Hypercube> {
    let mut rng = stream_rng(seed, streams::BENCH);
    Hypercube::from_fn(height, width, bands, |_, _| {
        let level: f32 = rng.gen_range(0.2..1.0);
        let slope: f32 = rng.gen_range(-0.5..0.5);
        let dip: f32 = rng.gen_range(0.0..0.4);
        (0..bands)
            .map(|b| {
                let t = b as f32 / (bands.max(2) - 1) as f32;
                level * (1.0 + slope * (t - 0.5)) * (1.0 - dip * (-(t - 0.6).powi(2) * 30.0).exp())
            })
            .collect()
    })
}

pub fn bench(cfg: &PipelineConfig, models: &[String], frame: Option<&Path>, iterations: Option<usize>, out: Option<&Path>) -> Result<()> {
    if models.is_empty() {
        return Err(Error::config("bench needs at least one --model (a model file or \"unmixing\")"));
    }
    let b = &cfg.bench;
    let iterations = iterations.unwrap_or(b.iterations);
    let cube = match frame {
        Some(p) => Hypercube::load(p)?,
        None => synthetic_frame(b.height, b.width, cfg.camera.bands, cfg.seed)?,
    };
    if let Some(bad) = (0..cube.pixels()).find(|&i| !(band_area(&cube.data[i * cube.bands..(i + 1) * cube.bands]) > 0.0)) {
        eprintln!("warning: pixel {bad} has no positive spectrum area");
    }
    let methods = models.iter().map(|m| Method::load(cfg, m)).collect::<Result<Vec<_>>>()?;
    println!("{BENCH_TABLE_HEADER}");
    let mut text = String::new();
    for m in &methods {
        let r = benchmark_inference(m.estimator().as_ref(), &cube, iterations, b.warmup, b.threads)?;
        println!("{}", r.table_row());
        text.push_str(&r.to_text());
        text.push('\n');
    }
    if let Some(out) = out {
        std::fs::write(out, text)?;
    }
    Ok(())
}
