use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regime_core::grid::{Domain, Grid, StaticStack};
use regime_model::{build_model, ChannelSchedule, ModelConfig};

fn statics(shape: (usize, usize), rng: &mut ChaCha8Rng) -> StaticStack {
    let grid = Grid::for_domain(Domain::Europe, shape.0, shape.1).unwrap();
    let land = Array2::from_shape_fn(shape, |_| rng.random::<f64>());
    let terrain = Array2::from_shape_fn(shape, |_| rng.random::<f64>() * 1000.0);
    StaticStack::new(grid, land, terrain).unwrap()
}

/// Largest relative errors between backprop and finite differences over
/// `n_probe` random parameters: central differences where the loss is smooth,
/// the nearer one-sided slope where a ReLU input sits at zero.
pub fn max_relative_error(cfg: &ModelConfig, data_seed: u64, n_probe: usize) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
    let model = build_model(cfg).unwrap();
    let st = statics(cfg.grid_shape, &mut rng);
    let idx: Vec<f64> = (0..cfg.n_indices).map(|_| rng.random_range(-2.0..2.0)).collect();
    let x = cfg.encode_inputs(&idx, rng.random_range(1940..2025), rng.random_range(1..=12)).unwrap();
    let target = Array2::from_shape_fn(cfg.grid_shape, |_| rng.random_range(-1.0..1.0));
    let (loss, grad) = model.loss_and_gradient(&x, &st, target.view(), None).unwrap();
    let h = 1e-5;
    let (mut smooth, mut kink): (f64, f64) = (0.0, 0.0);
    for _ in 0..n_probe {
        let i = rng.random_range(0..model.n_params());
        let mut plus = model.clone();
        plus.params[i] += h;
        let mut minus = model.clone();
        minus.params[i] -= h;
        let lp = plus.loss_and_gradient(&x, &st, target.view(), None).unwrap().0;
        let lm = minus.loss_and_gradient(&x, &st, target.view(), None).unwrap().0;
        let (fwd, bwd) = ((lp - loss) / h, (loss - lm) / h);
        let scale = fwd.abs().max(bwd.abs()).max(grad[i].abs()).max(1e-6);
        if (fwd - bwd).abs() > 1e-2 * scale {
            kink = kink.max((grad[i] - fwd).abs().min((grad[i] - bwd).abs()) / scale);
        } else {
            let fd = (lp - lm) / (2.0 * h);
            smooth = smooth.max((fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6));
        }
    }
    (smooth, kink)
}

pub fn random_configs() -> Vec<ModelConfig> {
    let base = ModelConfig {
        param_bounds: None,
        ..ModelConfig::default()
    };
    vec![
        ModelConfig { n_indices: 7, hidden: 12, embed_dim: 4, grid_shape: (4, 5), seed: 1, ..base.clone() },
        ModelConfig { n_indices: 4, hidden: 6, embed_dim: 12, grid_shape: (3, 3), seed: 2, ..base.clone() },
        ModelConfig { n_indices: 1, hidden: 9, embed_dim: 4, grid_shape: (5, 4), output_scale: 3.0, seed: 3, ..base.clone() },
        ModelConfig { n_indices: 0, hidden: 5, embed_dim: 6, grid_shape: (2, 6), schedule: ChannelSchedule::Subtract(3), seed: 4, ..base.clone() },
        ModelConfig { n_indices: 7, hidden: 8, embed_dim: 4, grid_shape: (4, 4), kernel: 5, seed: 5, ..base },
    ]
}

#[test]
fn backprop_matches_central_differences() {
    for (c, cfg) in random_configs().iter().enumerate() {
        for data_seed in [100, 200, 300] {
            let (smooth, kink) = max_relative_error(cfg, data_seed + c as u64, 30);
            assert!(smooth < 1e-4, "config {c}: max relative error {smooth:e}");
            assert!(kink < 1e-3, "config {c}: max one-sided error {kink:e}");
        }
    }
}
