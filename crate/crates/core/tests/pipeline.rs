//! End-to-end checks of fit, store, prediction and partial dependence.

use gsbart::pipeline::config::FitConfig;
use gsbart::pipeline::data::{Dataset, Response, Schema};
use gsbart::pipeline::fit::{train, TrainOutput};
use gsbart::pipeline::predict::{partial_dependence, predict, variable_importance};
use gsbart::pipeline::store::PosteriorStore;
use gsbart::pipeline::synth::{generate_synthetic, SynthKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Friedman data with five extra pure-noise covariates.
fn dataset(n: usize, seed: u64) -> Dataset {
    let d = generate_synthetic(SynthKind::Friedman, n, 1.0, seed, 0.2).unwrap();
    let col = |name: &str| d.column(name).unwrap().to_vec();
    let mut features: Vec<(String, Vec<f64>)> = d.columns[3..].to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for k in 6..=10 {
        features.push((format!("x{k}"), (0..n).map(|_| rng.random()).collect()));
    }
    Dataset {
        response: Some(Response::Real(col("y"))),
        features,
        offset: None,
        is_test: Some(col("test").iter().map(|&t| t == 1.0).collect()),
        truth: None,
        structural: vec![],
        rows: n,
    }
}

fn schema(d: &Dataset) -> Schema {
    Schema {
        response: "y".into(),
        features: d.features.iter().map(|f| f.0.clone()).collect(),
        offset: None,
        split: Some("test".into()),
        truth: None,
        structural: vec![],
    }
}

fn small_config() -> FitConfig {
    FitConfig {
        trees: 8,
        sweeps: 30,
        burn_in: 10,
        bins: 20,
        seed: 5,
        ..FitConfig::default()
    }
}

fn fit(d: &Dataset, config: &FitConfig) -> TrainOutput {
    train(d, &schema(d), config).unwrap()
}

fn posterior_mean(draws: &[Vec<f64>]) -> Vec<f64> {
    let n = draws[0].len();
    (0..n)
        .map(|i| draws.iter().map(|d| d[i]).sum::<f64>() / draws.len() as f64)
        .collect()
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn predictions_on_training_rows_match_sampler_state() {
    let d = dataset(150, 1);
    let out = fit(&d, &small_config());
    let in_sample = posterior_mean(&out.phi_draws(0, &[]));
    let pred = predict(&out.store, &d).unwrap();
    assert_eq!(pred.draws.len(), out.store.draw_count());
    assert!(max_gap(&pred.mean, &in_sample) < 1e-9);
}

#[test]
fn store_round_trip_preserves_predictions() {
    let d = dataset(120, 2);
    let out = fit(&d, &small_config());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    out.store.save(&path).unwrap();
    let loaded = PosteriorStore::load(&path).unwrap();
    assert_eq!(loaded.draw_count(), out.store.draw_count());
    let a = predict(&out.store, &d).unwrap();
    let b = predict(&loaded, &d).unwrap();
    assert!(max_gap(&a.mean, &b.mean) < 1e-9);
    assert!(max_gap(&a.lower, &b.lower) < 1e-9);
    assert!(max_gap(&a.upper, &b.upper) < 1e-9);
}

#[test]
fn same_seed_gives_same_posterior() {
    let d = dataset(100, 3);
    let config = small_config();
    let a = predict(&fit(&d, &config).store, &d).unwrap();
    let b = predict(&fit(&d, &config).store, &d).unwrap();
    assert_eq!(a.mean, b.mean);
    let parallel = FitConfig {
        workers: Some(2),
        ..config.clone()
    };
    let c = predict(&fit(&d, &parallel).store, &d).unwrap();
    assert_eq!(a.mean, c.mean);
}

#[test]
fn partial_dependence_is_flat_in_unsplit_features() {
    let d = dataset(150, 4);
    // Stumps make few splits, so some pure-noise features stay unused.
    let config = FitConfig {
        trees: 2,
        depth_cap: 1,
        ..small_config()
    };
    let out = fit(&d, &config);
    let imp = variable_importance(&out.store);
    let unused: Vec<&str> = imp
        .features
        .iter()
        .filter(|f| f.1 == 0)
        .map(|f| f.0.as_str())
        .collect();
    assert!(
        !unused.is_empty(),
        "every feature was split: {:?}",
        imp.features
    );
    for f in unused {
        let pts = partial_dependence(&out.store, &d, f, &[0.1, 0.5, 0.9], 0).unwrap();
        assert!(pts.iter().all(|p| !p.clamped));
        for p in &pts[1..] {
            assert!((p.mean - pts[0].mean).abs() < 1e-12, "{f} moves");
        }
    }
    // The strongest signal direction should move.
    let out = fit(&d, &small_config());
    let pts = partial_dependence(&out.store, &d, "x4", &[0.05, 0.95], 0).unwrap();
    assert!(pts[1].mean > pts[0].mean + 1.0);
}

#[test]
fn importance_shares_sum_to_one() {
    let d = dataset(100, 6);
    let imp = variable_importance(&fit(&d, &small_config()).store);
    let total: f64 = imp.features.iter().map(|f| f.2).sum();
    assert!((total - 1.0).abs() < 1e-12);
}
