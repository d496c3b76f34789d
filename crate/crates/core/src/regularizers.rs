//! Per-parameter importance penalties: synaptic intelligence (path-integral
//! importance), diagonal-Fisher EWC, and the FedProx proximal term.
//!
//! All three contribute a `(loss, grad)` pair that the local trainer adds to
//! the data loss. Importance bookkeeping only ever sees the data-loss
//! gradient, never the penalty's own gradient.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Batch, MlpModel};
use crate::params::ParamVector;

pub const DEFAULT_SI_EPS: f64 = 1e-3;

/// `strength * sum_i weight_i (w_i - anchor_i)^2` and its gradient.
fn weighted_quadratic(
    weights: &ParamVector,
    anchor: &ParamVector,
    w: &ParamVector,
    strength: f64,
) -> Result<(f64, ParamVector)> {
    weights.check_layout(w)?;
    anchor.check_layout(w)?;
    let mut grad = ParamVector::zeros_like(w);
    let mut loss = 0.0;
    for (((g, &om), &a), &x) in grad
        .as_mut_slice()
        .iter_mut()
        .zip(weights.as_slice())
        .zip(anchor.as_slice())
        .zip(w.as_slice())
    {
        let d = x - a;
        loss += om * d * d;
        *g = 2.0 * strength * om * d;
    }
    Ok((strength * loss, grad))
}

/// Synaptic-intelligence bookkeeping for one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiState {
    /// Running contribution for the current task.
    pub s: ParamVector,
    /// Consolidated importance over all finished tasks.
    pub omega: ParamVector,
    /// Reference point of the quadratic penalty.
    pub anchor: ParamVector,
    /// Parameters at the start of the current task's accumulation.
    pub trajectory_start: ParamVector,
    pub eps: f64,
    pub reg_strength: f64,
}

impl SiState {
    pub fn new(initial: &ParamVector, eps: f64, reg_strength: f64) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::config("eps", format!("must be > 0, got {eps}")));
        }
        if !(reg_strength >= 0.0 && reg_strength.is_finite()) {
            return Err(Error::config(
                "reg_strength",
                format!("must be >= 0, got {reg_strength}"),
            ));
        }
        Ok(Self {
            s: ParamVector::zeros_like(initial),
            omega: ParamVector::zeros_like(initial),
            anchor: initial.clone(),
            trajectory_start: initial.clone(),
            eps,
            reg_strength,
        })
    }

    /// `s_i += -grad_i * delta_i`; `grad` is the data-loss gradient at the
    /// pre-step point and `delta` the realised step.
    pub fn accumulate(&mut self, grad: &ParamVector, delta: &ParamVector) -> Result<()> {
        self.s.check_layout(grad)?;
        self.s.check_layout(delta)?;
        for ((s, &g), &d) in self
            .s
            .as_mut_slice()
            .iter_mut()
            .zip(grad.as_slice())
            .zip(delta.as_slice())
        {
            *s -= g * d;
        }
        Ok(())
    }

    /// Folds the current contribution into `omega` using the displacement
    /// `w_end - trajectory_start`, then restarts accumulation at `w_end`.
    pub fn consolidate(&mut self, w_end: &ParamVector) -> Result<()> {
        let start = self.trajectory_start.clone();
        self.fold_contribution(&self.s.clone(), w_end, &start)?;
        self.anchor = w_end.clone();
        self.trajectory_start = w_end.clone();
        Ok(())
    }

    /// `omega_i += max(0, contrib_i) / ((end_i - start_i)^2 + eps)`, then
    /// clears `s`.
    pub(crate) fn fold_contribution(
        &mut self,
        contrib: &ParamVector,
        end: &ParamVector,
        start: &ParamVector,
    ) -> Result<()> {
        self.omega.check_layout(contrib)?;
        self.omega.check_layout(end)?;
        self.omega.check_layout(start)?;
        for (((om, &c), &e), &s0) in self
            .omega
            .as_mut_slice()
            .iter_mut()
            .zip(contrib.as_slice())
            .zip(end.as_slice())
            .zip(start.as_slice())
        {
            let disp = e - s0;
            *om += c.max(0.0) / (disp * disp + self.eps);
        }
        self.omega.ensure_finite("omega")?;
        self.s = ParamVector::zeros_like(&self.s);
        Ok(())
    }

    /// `reg_strength * sum_i omega_i (w_i - anchor_i)^2` and its gradient.
    pub fn penalty(&self, w: &ParamVector) -> Result<(f64, ParamVector)> {
        weighted_quadratic(&self.omega, &self.anchor, w, self.reg_strength)
    }
}

pub fn si_accumulate(state: &mut SiState, grad: &ParamVector, delta: &ParamVector) -> Result<()> {
    state.accumulate(grad, delta)
}

pub fn si_consolidate(state: &mut SiState, w_end: &ParamVector) -> Result<()> {
    state.consolidate(w_end)
}

pub fn si_penalty(state: &SiState, w: &ParamVector) -> Result<(f64, ParamVector)> {
    state.penalty(w)
}

/// Diagonal-Fisher EWC state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EwcState {
    pub fisher: ParamVector,
    pub anchor: ParamVector,
    pub reg_strength: f64,
}

impl EwcState {
    pub fn empty(initial: &ParamVector, reg_strength: f64) -> Self {
        Self {
            fisher: ParamVector::zeros_like(initial),
            anchor: initial.clone(),
            reg_strength,
        }
    }

    pub fn penalty(&self, w: &ParamVector) -> Result<(f64, ParamVector)> {
        weighted_quadratic(&self.fisher, &self.anchor, w, self.reg_strength)
    }

    /// Adds a newer task's Fisher estimate and moves the anchor to its point.
    pub fn absorb(&mut self, newer: &EwcState) -> Result<()> {
        self.fisher.axpy(1.0, &newer.fisher)?;
        self.anchor = newer.anchor.clone();
        Ok(())
    }
}

/// Empirical diagonal Fisher: mean of squared per-example gradients of the
/// negative log-likelihood at the model's current parameters, over
/// `min(n_samples, |data|)` examples drawn without replacement.
pub fn ewc_estimate_fisher(
    model: &MlpModel,
    data: &Batch,
    n_samples: usize,
    seed: u64,
    reg_strength: f64,
) -> Result<EwcState> {
    if n_samples < 1 {
        return Err(Error::config("ewc_samples", "must be >= 1"));
    }
    if data.is_empty() {
        return Err(Error::Data("cannot estimate Fisher on an empty batch".into()));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    if n_samples < data.len() {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n_samples);
        idx.sort_unstable();
    }
    let mut fisher = ParamVector::zeros_like(model.params());
    for &i in &idx {
        let g = model.backward(&data.subset(&[i]))?;
        for (f, &gi) in fisher.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *f += gi * gi;
        }
    }
    let fisher = fisher.scale(1.0 / idx.len() as f64);
    Ok(EwcState {
        fisher,
        anchor: model.params().clone(),
        reg_strength,
    })
}

pub fn ewc_penalty(state: &EwcState, w: &ParamVector) -> Result<(f64, ParamVector)> {
    state.penalty(w)
}

/// `(mu / 2) * ||w - w_global||^2` and `mu * (w - w_global)`.
pub fn prox_penalty(w: &ParamVector, w_global: &ParamVector, mu: f64) -> Result<(f64, ParamVector)> {
    let diff = w.sub(w_global)?;
    let loss = 0.5 * mu * diff.as_slice().iter().map(|d| d * d).sum::<f64>();
    Ok((loss, diff.scale(mu)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> ParamVector {
        ParamVector::from_vec(x.to_vec())
    }

    #[test]
    fn accumulate_arithmetic() {
        let mut st = SiState::new(&v(&[0.0]), 0.1, 1.0).unwrap();
        st.accumulate(&v(&[0.0]), &v(&[-0.2])).unwrap();
        assert_eq!(st.s.as_slice(), &[0.0]);
        st.accumulate(&v(&[2.0]), &v(&[-0.2])).unwrap();
        assert!((st.s.as_slice()[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn consolidate_arithmetic() {
        let mut st = SiState::new(&v(&[0.0]), 0.1, 1.0).unwrap();
        st.s = v(&[0.5]);
        st.consolidate(&v(&[1.0])).unwrap();
        assert!((st.omega.as_slice()[0] - 0.5 / 1.1).abs() < 1e-15);
        assert_eq!(st.s.as_slice(), &[0.0]);
        assert_eq!(st.anchor.as_slice(), &[1.0]);
        assert_eq!(st.trajectory_start.as_slice(), &[1.0]);
    }

    #[test]
    fn unmoved_parameter_is_bounded_by_eps() {
        let mut st = SiState::new(&v(&[0.3]), 1e-3, 1.0).unwrap();
        st.s = v(&[0.2]);
        st.consolidate(&v(&[0.3])).unwrap();
        assert!((st.omega.as_slice()[0] - 200.0).abs() < 1e-9);
    }

    #[test]
    fn zero_contribution_leaves_omega() {
        let mut st = SiState::new(&v(&[0.0, 1.0]), 0.1, 1.0).unwrap();
        st.omega = v(&[3.0, 4.0]);
        st.consolidate(&v(&[5.0, 6.0])).unwrap();
        assert_eq!(st.omega.as_slice(), &[3.0, 4.0]);
    }

    #[test]
    fn negative_contribution_is_clamped() {
        let mut st = SiState::new(&v(&[0.0]), 0.1, 1.0).unwrap();
        st.s = v(&[-5.0]);
        st.consolidate(&v(&[1.0])).unwrap();
        assert_eq!(st.omega.as_slice(), &[0.0]);
    }

    #[test]
    fn penalty_arithmetic() {
        let mut st = SiState::new(&v(&[0.0]), 0.1, 1.0).unwrap();
        st.omega = v(&[2.0]);
        let (l0, g0) = st.penalty(&v(&[0.0])).unwrap();
        assert_eq!((l0, g0.as_slice()), (0.0, &[0.0][..]));
        let (l, g) = st.penalty(&v(&[0.5])).unwrap();
        assert!((l - 0.5).abs() < 1e-15);
        assert!((g.as_slice()[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn ewc_penalty_mirrors_si() {
        let st = EwcState {
            fisher: v(&[2.0]),
            anchor: v(&[0.0]),
            reg_strength: 1.0,
        };
        let (l, g) = st.penalty(&v(&[0.5])).unwrap();
        assert!((l - 0.5).abs() < 1e-15);
        assert!((g.as_slice()[0] - 2.0).abs() < 1e-15);
        let (l0, g0) = st.penalty(&v(&[0.0])).unwrap();
        assert_eq!(l0, 0.0);
        assert_eq!(g0.as_slice(), &[0.0]);
    }

    #[test]
    fn prox_arithmetic() {
        let (l, g) = prox_penalty(&v(&[1.0, -1.0]), &v(&[0.0, 0.0]), 2.0).unwrap();
        assert!((l - 2.0).abs() < 1e-15);
        assert_eq!(g.as_slice(), &[2.0, -2.0]);
        let (l, g) = prox_penalty(&v(&[1.0, -1.0]), &v(&[0.0, 0.0]), 0.0).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.as_slice().iter().all(|&x| x == 0.0));
        let (l, _) = prox_penalty(&v(&[1.0]), &v(&[1.0]), 3.0).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn state_rejects_bad_hyperparameters() {
        assert!(SiState::new(&v(&[0.0]), 0.0, 1.0).is_err());
        assert!(SiState::new(&v(&[0.0]), 1e-3, -1.0).is_err());
    }

    #[test]
    fn layout_mismatch_is_shape_error() {
        let mut st = SiState::new(&v(&[0.0, 0.0]), 0.1, 1.0).unwrap();
        assert!(matches!(
            st.accumulate(&v(&[1.0]), &v(&[1.0, 1.0])),
            Err(Error::Shape(_))
        ));
    }
}
