//! Personalized surrogate model (PSM).
//!
//! Before a new task arrives, each client warm-starts a throwaway copy `v` of
//! the global model `w` and runs a few steps of
//!
//! ```text
//! v <- v - eta * (grad L(v; minibatch) + q(lambda) * (v - w)),   q(lambda) = (1 - lambda) / (2 lambda)
//! ```
//!
//! on the outgoing task's local data, accumulating `-grad L(v) * dv` per
//! parameter along the way. Those contributions are folded into the client's
//! importance weights and the surrogate is dropped.
//!
//! `lambda` close to 0 pins `v` to the global model; `lambda` close to 1 lets
//! it fit the local data freely. [`solve_psm_quadratic`] gives the exact
//! minimiser of the same objective for a diagonal quadratic loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Batch, MlpModel};
use crate::params::ParamVector;
use crate::regularizers::SiState;

/// `(1 - lambda) / (2 lambda)` for `lambda` in the open unit interval.
pub fn q_of_lambda(lambda: f64) -> Result<f64> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::config(
            "lambda",
            format!("must lie strictly between 0 and 1, got {lambda}"),
        ));
    }
    Ok((1.0 - lambda) / (2.0 * lambda))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsmConfig {
    pub lambda: f64,
    pub eta: f64,
    pub iters: usize,
    pub batch_size: usize,
}

impl PsmConfig {
    pub fn validate(&self) -> Result<()> {
        q_of_lambda(self.lambda)?;
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::config("psm.eta", format!("must be >= 0, got {}", self.eta)));
        }
        if self.iters == 0 {
            return Err(Error::config("psm.iters", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("psm.batch_size", "must be >= 1"));
        }
        Ok(())
    }
}

/// Surrogate iterations sized to 1/40 of one task's local step budget.
pub fn default_psm_iters(rounds_per_task: usize, local_epochs: usize, steps_per_epoch: usize) -> usize {
    (rounds_per_task * local_epochs * steps_per_epoch).div_ceil(40).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsmState {
    pub v: ParamVector,
    pub s_acc: ParamVector,
    pub v_start: ParamVector,
    pub steps_taken: usize,
}

/// Data-loss gradient oracle the surrogate descends on.
pub trait SurrogateObjective {
    fn data_grad(&mut self, v: &ParamVector) -> Result<ParamVector>;
}

/// Minibatch cross-entropy of an MLP on one client's shard. Minibatches walk
/// a seeded permutation and reshuffle on wrap-around.
pub struct MlpObjective<'a> {
    template: &'a MlpModel,
    data: &'a Batch,
    batch_size: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl<'a> MlpObjective<'a> {
    pub fn new(template: &'a MlpModel, data: &'a Batch, batch_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        Self {
            template,
            data,
            batch_size,
            order,
            cursor: 0,
            rng,
        }
    }

    fn next_batch(&mut self) -> Batch {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let b = self.data.subset(&self.order[self.cursor..end]);
        self.cursor = end;
        b
    }
}

impl SurrogateObjective for MlpObjective<'_> {
    fn data_grad(&mut self, v: &ParamVector) -> Result<ParamVector> {
        let batch = self.next_batch();
        self.template.with_params(v.clone())?.backward(&batch)
    }
}

/// `L(v) = 1/2 (v - center)^T diag(a) (v - center)`.
#[derive(Debug, Clone)]
pub struct DiagonalQuadratic {
    pub diag: Vec<f64>,
    pub center: Vec<f64>,
}

impl DiagonalQuadratic {
    pub fn value(&self, v: &[f64]) -> f64 {
        0.5 * self
            .diag
            .iter()
            .zip(&self.center)
            .zip(v)
            .map(|((a, c), x)| a * (x - c) * (x - c))
            .sum::<f64>()
    }
}

impl SurrogateObjective for DiagonalQuadratic {
    fn data_grad(&mut self, v: &ParamVector) -> Result<ParamVector> {
        if v.len() != self.diag.len() {
            return Err(Error::Shape(format!(
                "quadratic of dim {} evaluated at {} params",
                self.diag.len(),
                v.len()
            )));
        }
        let mut g = ParamVector::zeros_like(v);
        for (((gi, a), c), x) in g
            .as_mut_slice()
            .iter_mut()
            .zip(&self.diag)
            .zip(&self.center)
            .zip(v.as_slice())
        {
            *gi = a * (x - c);
        }
        Ok(g)
    }
}

/// Runs `cfg.iters` surrogate steps from `w_global` against any objective.
pub fn train_psm_on<O: SurrogateObjective>(
    objective: &mut O,
    w_global: &ParamVector,
    cfg: &PsmConfig,
) -> Result<PsmState> {
    cfg.validate()?;
    let q = q_of_lambda(cfg.lambda)?;
    let mut v = w_global.clone();
    let mut s_acc = ParamVector::zeros_like(w_global);
    for _ in 0..cfg.iters {
        let g = objective.data_grad(&v)?;
        let mut next = v.clone();
        for ((x, &gi), &w) in next
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .zip(w_global.as_slice())
        {
            *x -= cfg.eta * (gi + q * (*x - w));
        }
        for (((s, &gi), &x1), &x0) in s_acc
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .zip(next.as_slice())
            .zip(v.as_slice())
        {
            *s -= gi * (x1 - x0);
        }
        next.ensure_finite("psm")?;
        v = next;
    }
    Ok(PsmState {
        v,
        s_acc,
        v_start: w_global.clone(),
        steps_taken: cfg.iters,
    })
}

/// Trains a surrogate of `model_template`'s architecture on `local_train`.
pub fn train_psm(
    w_global: &ParamVector,
    model_template: &MlpModel,
    local_train: &Batch,
    cfg: &PsmConfig,
    seed: u64,
) -> Result<PsmState> {
    if local_train.is_empty() {
        return Err(Error::Data("surrogate training needs a non-empty shard".into()));
    }
    let mut obj = MlpObjective::new(model_template, local_train, cfg.batch_size, seed);
    train_psm_on(&mut obj, w_global, cfg)
}

/// Folds the surrogate's contributions into `si.omega` using the surrogate's
/// own displacement, and re-anchors the penalty at the global model the
/// surrogate started from.
pub fn psm_contribution_handoff(psm: &PsmState, si: &mut SiState) -> Result<()> {
    si.fold_contribution(&psm.s_acc, &psm.v, &psm.v_start)?;
    si.anchor = psm.v_start.clone();
    si.trajectory_start = psm.v_start.clone();
    Ok(())
}

/// Exact minimiser of `1/2 (v-a)^T diag(A) (v-a) + q/2 ||v - w_hat||^2`,
/// i.e. `(A + qI)^{-1} (A a + q w_hat)` coordinatewise.
pub fn solve_psm_quadratic(diag: &[f64], a: &[f64], w_hat: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if diag.len() != a.len() || a.len() != w_hat.len() {
        return Err(Error::Shape("diag, a and w_hat must have equal length".into()));
    }
    if let Some(d) = diag.iter().find(|&&d| !(d > 0.0 && d.is_finite())) {
        return Err(Error::config("A", format!("diagonal entries must be > 0, got {d}")));
    }
    let q = q_of_lambda(lambda)?;
    Ok(diag
        .iter()
        .zip(a)
        .zip(w_hat)
        .map(|((&d, &ai), &wi)| (d * ai + q * wi) / (d + q))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn q_values() {
        assert_eq!(q_of_lambda(0.5).unwrap(), 0.5);
        assert!((q_of_lambda(0.2).unwrap() - 2.0).abs() < 1e-15);
        assert!(q_of_lambda(1.0 - 1e-12).unwrap() < 1e-11);
        for bad in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(q_of_lambda(bad).is_err());
        }
    }

    #[test]
    fn quadratic_limits_and_scalar_case() {
        let v = solve_psm_quadratic(&[1.0], &[2.0], &[0.0], 0.5).unwrap();
        assert!((v[0] - 2.0 / 1.5).abs() < 1e-15);
        let near_local = solve_psm_quadratic(&[1.0, 3.0], &[2.0, -1.0], &[0.0, 5.0], 1.0 - 1e-12).unwrap();
        assert!((near_local[0] - 2.0).abs() < 1e-9 && (near_local[1] + 1.0).abs() < 1e-9);
        let near_global = solve_psm_quadratic(&[1.0, 3.0], &[2.0, -1.0], &[0.0, 5.0], 1e-6).unwrap();
        assert!(near_global[0].abs() < 1e-4 && (near_global[1] - 5.0).abs() < 1e-4);
        assert!(solve_psm_quadratic(&[0.0], &[1.0], &[0.0], 0.5).is_err());
    }

    #[test]
    fn quadratic_scalar_matches_grid_search() {
        let obj = |v: f64| 0.5 * (v - 2.0) * (v - 2.0) + 0.25 * v * v;
        let best = (0..=400_000)
            .map(|i| i as f64 * 1e-5)
            .min_by(|x, y| obj(*x).partial_cmp(&obj(*y)).unwrap())
            .unwrap();
        let v = solve_psm_quadratic(&[1.0], &[2.0], &[0.0], 0.5).unwrap()[0];
        assert!((v - best).abs() < 1e-5);
        assert!((v - 1.333_333_333_333_333_3).abs() < 1e-12);
    }

    #[test]
    fn zero_rate_does_not_move() {
        let w = ParamVector::from_vec(vec![0.3, -0.7]);
        let mut obj = DiagonalQuadratic {
            diag: vec![1.0, 2.0],
            center: vec![1.0, 1.0],
        };
        let cfg = PsmConfig { lambda: 0.5, eta: 0.0, iters: 10, batch_size: 1 };
        let st = train_psm_on(&mut obj, &w, &cfg).unwrap();
        assert_eq!(st.v, w);
        assert!(st.s_acc.as_slice().iter().all(|&s| s == 0.0));
        assert_eq!(st.steps_taken, 10);
    }

    #[test]
    fn handoff_arithmetic() {
        let mut si = SiState::new(&ParamVector::from_vec(vec![9.0]), 0.1, 1.0).unwrap();
        let psm = PsmState {
            v: ParamVector::from_vec(vec![0.5]),
            s_acc: ParamVector::from_vec(vec![0.3]),
            v_start: ParamVector::from_vec(vec![0.0]),
            steps_taken: 1,
        };
        psm_contribution_handoff(&psm, &mut si).unwrap();
        assert!((si.omega.as_slice()[0] - 0.3 / 0.35).abs() < 1e-12);
        assert_eq!(si.anchor.as_slice(), &[0.0]);
    }

    #[test]
    fn handoff_with_zero_contribution_only_moves_anchor() {
        let mut si = SiState::new(&ParamVector::from_vec(vec![1.0, 2.0]), 0.1, 1.0).unwrap();
        si.omega = ParamVector::from_vec(vec![0.5, 0.25]);
        let psm = PsmState {
            v: ParamVector::from_vec(vec![3.0, 3.0]),
            s_acc: ParamVector::from_vec(vec![0.0, 0.0]),
            v_start: ParamVector::from_vec(vec![4.0, 4.0]),
            steps_taken: 1,
        };
        psm_contribution_handoff(&psm, &mut si).unwrap();
        assert_eq!(si.omega.as_slice(), &[0.5, 0.25]);
        assert_eq!(si.anchor.as_slice(), &[4.0, 4.0]);
    }

    #[test]
    fn default_iters_is_one_fortieth() {
        assert_eq!(default_psm_iters(20, 2, 4), 4);
        assert_eq!(default_psm_iters(1, 1, 1), 1);
        assert_eq!(default_psm_iters(80, 20, 10), 400);
    }
}
