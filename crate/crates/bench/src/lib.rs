//! Fixtures shared by the benchmarks.

use icicl_core::models::{ModelConfig, ModelKind};
use icicl_core::rng::{stream, stream_rng};
use icicl_core::{Dataset, Task, Tensor};
use rand::Rng as _;

/// Desk-scale model of the given kind.
pub fn desk_model(kind: ModelKind) -> ModelConfig {
    ModelConfig {
        kind,
        d_z: 64,
        layers: 3,
        heads: 4,
        d_v: 16,
        d_qk: 16,
        m: 16,
        m_ic: 16,
        ..ModelConfig::default()
    }
}

/// One-dimensional task with uniform inputs and outputs.
pub fn random_task(index: u64, n_c: usize, n_ic: &[usize], n_t: usize) -> Task {
    let mut rng = stream_rng(0, stream::BENCH, index);
    let mut data = |n: usize| {
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Dataset::from_1d(&x, &y).expect("matching lengths")
    };
    let context = data(n_c);
    let in_context = n_ic.iter().map(|&n| data(n)).collect();
    let target = data(n_t);
    Task {
        context,
        in_context,
        target_x: target.x,
        target_y: Some::<Tensor>(target.y),
    }
}
