//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use cflsim_core::config::{Algo, PsmSettings, RunConfig};
use cflsim_core::datagen::{DomainShift, SyntheticSpec};
use cflsim_core::nn::{init_model, Batch, Matrix, MlpModel};
use cflsim_core::params::ParamVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_batch(r: &mut ChaCha8Rng, n: usize, d: usize, classes: usize) -> Batch {
    let data: Vec<f64> = (0..n * d).map(|_| r.random_range(-2.0..2.0)).collect();
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
    Batch::new(Matrix::new(n, d, data).unwrap(), labels).unwrap()
}

/// Model with every parameter (biases included) drawn from U(-1, 1).
pub fn random_model(r: &mut ChaCha8Rng, dims: &[usize]) -> MlpModel {
    let base = init_model(dims, r.random()).unwrap();
    let vals: Vec<f64> = (0..base.params().len())
        .map(|_| r.random_range(-1.0..1.0))
        .collect();
    let p = ParamVector::new(vals, base.params().layout().clone()).unwrap();
    base.with_params(p).unwrap()
}

/// Straight loop-based forward pass: `W[o][i]` sits at `o * fan_in + i`.
pub fn naive_forward(model: &MlpModel, x: &[f64]) -> Vec<f64> {
    let dims = model.layer_dims();
    let p = model.params();
    let mut h = x.to_vec();
    for l in 0..dims.len() - 1 {
        let w = p.segment(2 * l);
        let b = p.segment(2 * l + 1);
        let mut out = vec![0.0; dims[l + 1]];
        for o in 0..dims[l + 1] {
            let mut z = b[o];
            for i in 0..dims[l] {
                z += w[o * dims[l] + i] * h[i];
            }
            out[o] = if l + 2 < dims.len() { z.max(0.0) } else { z };
        }
        h = out;
    }
    h
}

/// Mean cross-entropy via explicit softmax then log (no log-sum-exp).
pub fn naive_loss(model: &MlpModel, batch: &Batch) -> f64 {
    let mut total = 0.0;
    for i in 0..batch.len() {
        let z = naive_forward(model, batch.inputs().row(i));
        let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        total -= (e[batch.labels()[i]] / s).ln();
    }
    total / batch.len() as f64
}

/// Largest per-coordinate relative error of `backward` against central
/// differences of the loss. Near-zero pairs are compared absolutely.
pub fn max_fd_rel_error(model: &MlpModel, batch: &Batch, h: f64) -> f64 {
    let g = model.backward(batch).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..g.len() {
        let mut plus = model.params().clone();
        plus.as_mut_slice()[i] += h;
        let mut minus = model.params().clone();
        minus.as_mut_slice()[i] -= h;
        let fp = model.with_params(plus).unwrap().loss_and_grad(batch).unwrap().0;
        let fm = model.with_params(minus).unwrap().loss_and_grad(batch).unwrap().0;
        let fd = (fp - fm) / (2.0 * h);
        let a = g.as_slice()[i];
        let scale = a.abs().max(fd.abs());
        let err = if scale < 1e-7 { (a - fd).abs() } else { (a - fd).abs() / scale };
        worst = worst.max(err);
    }
    worst
}

pub fn spec(d: usize, classes: usize, tasks: usize, train: usize, test: usize) -> SyntheticSpec {
    SyntheticSpec {
        feature_dim: d,
        total_classes: classes,
        n_tasks: tasks,
        samples_per_class_train: train,
        samples_per_class_test: test,
        cluster_spread: 1.0,
        domain_shift: DomainShift::default(),
    }
}

/// A small valid run configuration for `algo`.
pub fn run_cfg(algo: Algo) -> RunConfig {
    RunConfig {
        n_clients: 4,
        rounds_per_task: 3,
        local_epochs: 1,
        select_ratio: 0.5,
        lr: 0.05,
        batch_size: 16,
        algo,
        reg_strength: Some(1.0),
        prox_mu: Some(0.1),
        lambda: Some(0.5),
        eps: 1e-3,
        alpha_dir: 1.0,
        seed: 3,
        hidden: vec![8],
        psm: PsmSettings::default(),
        optimizer: Default::default(),
        lr_schedule: Default::default(),
        ewc_samples: 20,
        si_count_aggregation_jumps: false,
        boundary_selected_only: false,
        per_round_eval: false,
        partition_retries: 1000,
    }
}
