mod common;

use oxyspec::clinical::{benchmark_inference, NetworkEstimator, OxygenationEstimator, UnmixingEstimator};
use oxyspec::cube::Hypercube;
use oxyspec::dataset::{generate_dataset, make_pseudo_real, stratified_split, Dataset, DistortionSpec, SplitSpec};
use oxyspec::network::{infer_map, train_regressor, NetworkSpec, TrainConfig};
use oxyspec::optics::{ExtinctionTable, PriorConfig};
use oxyspec::spectral::{band_area, make_camera_model, CameraConfig, Domain};
use oxyspec::transport::{GridSpec, TransportConfig};
use oxyspec::unmixing::EndmemberMatrix;

fn simulated(n: usize, photons: u64, seed: u64) -> Dataset<f64> {
    let cam = make_camera_model(&CameraConfig::default()).unwrap();
    let cfg = TransportConfig { n_photons: photons, ..Default::default() };
    generate_dataset(n, &PriorConfig::default(), &GridSpec::default(), &cfg, &cam, &ExtinctionTable::bundled(), seed, None)
        .unwrap()
        .0
}

fn rows(ds: &Dataset<f64>, range: std::ops::Range<usize>) -> Vec<f64> {
    range.flat_map(|i| ds.row(i).to_vec()).collect()
}

#[test]
fn pseudo_real_domain_gap_is_linearly_separable() {
    let sim = simulated(250, 100, 11);
    let pool = simulated(250, 100, 12);
    let (real, hidden) = make_pseudo_real(&pool, &DistortionSpec::default()).unwrap();
    assert!(real.domains().iter().all(|&d| d == Domain::Real));
    assert!(hidden.iter().all(|l| l.is_some()));
    for i in 0..real.len() {
        assert!((band_area(real.row(i)) - 1.0).abs() < 1e-9);
    }
    let probe = |real: &Dataset<f64>| {
        common::logistic_probe(16, &rows(&sim, 0..200), &rows(real, 0..200), &rows(&sim, 200..250), &rows(real, 200..250))
    };
    let acc = probe(&real);
    assert!(acc >= 0.9, "probe accuracy {acc}");

    let (same, _) = make_pseudo_real(&pool, &DistortionSpec::identity()).unwrap();
    let acc = probe(&same);
    assert!(acc < 0.65, "identity probe accuracy {acc}");
}

#[test]
fn trained_network_maps_a_frame() {
    let ds = simulated(300, 40, 5).cast::<f32>();
    let (train, val) = stratified_split(&ds, &SplitSpec::default()).unwrap();
    let cfg = TrainConfig { epochs: 5, batch: 32, ..Default::default() };
    let (net, history) = train_regressor(&NetworkSpec::fcn(16), &cfg, &train, &val, None).unwrap();
    assert_eq!(history.records.len(), 5);
    assert!(history.best_val_loss().is_finite());

    let frame = Hypercube::from_fn(6, 10, 16, |y, x| {
        let i = (y * 10 + x) % val.len();
        val.row(i).iter().map(|v| v * (1.0 + x as f32)).collect()
    })
    .unwrap();
    let map = infer_map(&net, &frame, true).unwrap();
    assert_eq!((map.height, map.width), (6, 10));
    assert!(map.values.iter().all(|v| v.is_finite()));
    // normalization removes the per-column gain
    for y in 0..6 {
        for x in 0..10 {
            let i = (y * 10 + x) % val.len();
            let direct = net.predict(val.row(i), 1).unwrap()[0];
            assert!((map.at(y, x) - direct).abs() < 1e-4);
        }
    }

    let em = EndmemberMatrix::from_camera(&make_camera_model(&CameraConfig::default()).unwrap(), &ExtinctionTable::bundled()).unwrap();
    let estimators: [&dyn OxygenationEstimator; 2] =
        [&NetworkEstimator { name: "fcn".into(), net: &net }, &UnmixingEstimator { endmembers: &em, correction: None }];
    for est in estimators {
        let report = benchmark_inference(est, &frame, 3, 1, 1).unwrap();
        assert_eq!(report.iterations, 3);
        assert!(report.mean_ms > 0.0 && report.fps > 0.0);
    }
}
