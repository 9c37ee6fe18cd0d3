use chrono::Datelike;
use ndarray::{Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regime_core::indices::{monthly_index, regime_indices};
use regime_core::modes::{fit_regimes, RegimeConfig};
use regime_core::preprocess::{standardized_anomalies, StandardizeConfig};
use regime_core::synth::{
    gen_synthetic, matched_index_correlations, pattern_recovery_score, smooth_field, Response, SynthConfig,
};

/// Solves the normal equations of an ordinary least-squares fit.
fn least_squares(rows: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let p = rows[0].len();
    let mut a = vec![vec![0.0; p + 1]; p];
    for (x, yi) in rows.iter().zip(y) {
        for i in 0..p {
            for j in 0..p {
                a[i][j] += x[i] * x[j];
            }
            a[i][p] += x[i] * yi;
        }
    }
    for c in 0..p {
        let piv = (c..p).max_by(|i, j| a[*i][c].abs().total_cmp(&a[*j][c].abs())).unwrap();
        a.swap(c, piv);
        for r in 0..p {
            if r != c {
                let f = a[r][c] / a[c][c];
                for k in c..=p {
                    a[r][k] -= f * a[c][k];
                }
            }
        }
    }
    (0..p).map(|i| a[i][p] / a[i][i]).collect()
}

#[test]
fn pipeline_recovers_true_patterns_and_indices() {
    for noise in [0.0, 0.2] {
        let cfg = SynthConfig {
            circulation_noise: noise,
            seed: 11,
            ..SynthConfig::default()
        };
        let data = gen_synthetic(&cfg).unwrap();
        let st = standardized_anomalies(&data.z500, cfg.climatology, &StandardizeConfig::default()).unwrap();
        let rc = RegimeConfig {
            n_init: 10,
            ..RegimeConfig::default()
        };
        let (_, regimes, _) = fit_regimes(&st.standardized, cfg.climatology, &rc).unwrap();
        let score = pattern_recovery_score(regimes.patterns.view(), data.truth.patterns.view(), &data.z500.grid).unwrap();
        assert!(score.score > 0.9, "noise {noise}: recovery score {}", score.score);
        let daily = regime_indices(&st.standardized, &regimes, cfg.climatology).unwrap();
        let monthly = monthly_index(&daily).unwrap();
        let corr = matched_index_correlations(&monthly, &data.truth.monthly_indices, &score).unwrap();
        assert!(corr.iter().all(|c| *c > 0.9), "noise {noise}: index correlations {corr:?}");
    }
}

#[test]
fn generated_temperature_trend_is_recovered() {
    let cfg = SynthConfig {
        source_shape: (8, 10),
        target_shape: (6, 8),
        seed: 5,
        ..SynthConfig::default()
    };
    let data = gen_synthetic(&cfg).unwrap();
    let dates = data.t2m.times.daily().unwrap();
    let mean = data.t2m.values.mean_axis(Axis(2)).unwrap().mean_axis(Axis(1)).unwrap();
    let rows: Vec<Vec<f64>> = dates
        .iter()
        .map(|d| {
            let years = d.year() as f64 + d.ordinal0() as f64 / 365.25;
            let phase = 2.0 * std::f64::consts::PI * d.ordinal0() as f64 / 365.25;
            vec![1.0, years - 1980.0, phase.cos(), phase.sin()]
        })
        .collect();
    let beta = least_squares(&rows, mean.as_slice().unwrap());
    assert!((beta[1] - 0.01).abs() < 0.002, "fitted slope {}", beta[1]);

    let flat = SynthConfig {
        trend_per_year: 0.0,
        response: Response::Linear,
        ..cfg
    };
    let data = gen_synthetic(&flat).unwrap();
    let mean = data.t2m.values.mean_axis(Axis(2)).unwrap().mean_axis(Axis(1)).unwrap();
    let beta = least_squares(&rows, mean.as_slice().unwrap());
    assert!(beta[1].abs() < 0.002, "fitted slope without trend {}", beta[1]);
}

#[test]
fn random_fields_score_near_zero() {
    let cfg = SynthConfig::default();
    let grid = cfg.source_grid().unwrap();
    let truth = gen_synthetic(&SynthConfig {
        start: chrono::NaiveDate::from_ymd_opt(1979, 1, 1).unwrap(),
        end: chrono::NaiveDate::from_ymd_opt(2012, 12, 31).unwrap(),
        ..cfg
    })
    .unwrap()
    .truth
    .patterns;
    let k = truth.shape()[0];
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut est = Array3::zeros(truth.raw_dim());
        for i in 0..k {
            let f = ndarray::Array2::from_shape_fn(grid.shape(), |_| rng.random_range(-1.0..1.0));
            est.index_axis_mut(Axis(0), i).assign(&f);
        }
        let s = pattern_recovery_score(est.view(), truth.view(), &grid).unwrap();
        worst = worst.max(s.score.abs());
    }
    assert!(worst < 0.3, "largest null score {worst}");
}

#[test]
fn smooth_random_fields_score_below_truth() {
    // few spatial degrees of freedom: chance matches are larger than for white
    // noise but stay far from a true recovery
    let cfg = SynthConfig::default();
    let grid = cfg.source_grid().unwrap();
    let truth = gen_synthetic(&SynthConfig {
        start: chrono::NaiveDate::from_ymd_opt(1979, 1, 1).unwrap(),
        end: chrono::NaiveDate::from_ymd_opt(2012, 12, 31).unwrap(),
        ..cfg
    })
    .unwrap()
    .truth
    .patterns;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut scores = Vec::new();
    for _ in 0..20 {
        let mut est = Array3::zeros(truth.raw_dim());
        for i in 0..truth.shape()[0] {
            est.index_axis_mut(Axis(0), i).assign(&smooth_field(&grid, &mut rng, 3));
        }
        scores.push(pattern_recovery_score(est.view(), truth.view(), &grid).unwrap().score);
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    assert!(mean < 0.7, "mean smooth null score {mean}, all {scores:?}");
}
