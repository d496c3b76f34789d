//! Dense ReLU MLP with exact analytic gradients.
//!
//! Parameters live in a single [`ParamVector`] laid out as
//! `layer{l}.weight` (row-major `[out, in]`) followed by `layer{l}.bias`
//! (`[out]`) for each layer in order. Hidden layers use ReLU, the output layer
//! emits raw logits over the shared class head.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Layout, ParamVector, Segment};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Copy of the given rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }
}

/// Inputs plus integer class labels, one label per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    inputs: Matrix,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn check_labels(&self, n_classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&y| y >= n_classes) {
            Some(y) => Err(Error::Data(format!(
                "label {y} outside [0, {n_classes})"
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    activation: Activation,
    params: ParamVector,
}

pub fn mlp_layout(layer_dims: &[usize]) -> Result<Layout> {
    if layer_dims.len() < 2 {
        return Err(Error::config(
            "layer_dims",
            format!(
                "need at least input and output dims, got {:?}",
                layer_dims
            ),
        ));
    }
    if layer_dims.contains(&0) {
        return Err(Error::config(
            "layer_dims",
            format!("all dims must be >= 1, got {layer_dims:?}"),
        ));
    }
    let mut segments = Vec::with_capacity(2 * (layer_dims.len() - 1));
    for (l, pair) in layer_dims.windows(2).enumerate() {
        segments.push(Segment::new(format!("layer{l}.weight"), vec![pair[1], pair[0]]));
        segments.push(Segment::new(format!("layer{l}.bias"), vec![pair[1]]));
    }
    Ok(Layout::new(segments))
}

/// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.
pub fn init_model(layer_dims: &[usize], seed: u64) -> Result<MlpModel> {
    let layout = Arc::new(mlp_layout(layer_dims)?);
    let mut params = ParamVector::zeros(layout.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (l, &fan_in) in layer_dims[..layer_dims.len() - 1].iter().enumerate() {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for w in params.segment_mut(2 * l) {
            *w = rng.random_range(-bound..bound);
        }
    }
    Ok(MlpModel {
        layer_dims: layer_dims.to_vec(),
        activation: Activation::Relu,
        params,
    })
}

impl MlpModel {
    pub fn from_params(layer_dims: &[usize], params: ParamVector) -> Result<Self> {
        let layout = mlp_layout(layer_dims)?;
        if **params.layout() != layout {
            return Err(Error::Shape(format!(
                "parameter layout does not match dims {layer_dims:?}"
            )));
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            activation: Activation::Relu,
            params,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn n_classes(&self) -> usize {
        *self.layer_dims.last().expect("validated dims")
    }

    pub fn n_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamVector) -> Result<()> {
        self.params.check_layout(&params)?;
        params.ensure_finite("set_params")?;
        self.params = params;
        Ok(())
    }

    /// Same architecture, different parameters.
    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        let mut m = self.clone();
        m.set_params(params)?;
        Ok(m)
    }

    pub fn forward(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(inputs)?.pop().expect("at least one layer"))
    }

    /// Pre-activation outputs of every layer (the last one is the logits).
    fn forward_cached(&self, inputs: &Matrix) -> Result<Vec<Matrix>> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input width {} but model expects {}",
                inputs.cols(),
                self.input_dim()
            )));
        }
        let n = inputs.rows();
        let mut pre: Vec<Matrix> = Vec::with_capacity(self.n_layers());
        for l in 0..self.n_layers() {
            let (din, dout) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let w = self.params.segment(2 * l);
            let b = self.params.segment(2 * l + 1);
            let mut z = Matrix::zeros(n, dout);
            for r in 0..n {
                let x = match pre.last() {
                    None => inputs.row(r),
                    Some(prev) => prev.row(r),
                };
                let hidden = l > 0;
                let out = z.row_mut(r);
                for (o, out_v) in out.iter_mut().enumerate() {
                    let wrow = &w[o * din..(o + 1) * din];
                    let mut acc = b[o];
                    for (wi, &xi) in wrow.iter().zip(x) {
                        acc += wi * if hidden { xi.max(0.0) } else { xi };
                    }
                    *out_v = acc;
                }
            }
            pre.push(z);
        }
        Ok(pre)
    }

    /// Mean cross-entropy and its exact gradient over `batch`.
    pub fn loss_and_grad(&self, batch: &Batch) -> Result<(f64, ParamVector)> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        batch.check_labels(self.n_classes())?;
        let pre = self.forward_cached(batch.inputs())?;
        let logits = pre.last().expect("at least one layer");
        let n = batch.len();
        let loss = ce_loss(logits, batch.labels())?;

        // dL/dz for the output layer: (softmax - onehot) / n
        let mut dz = Matrix::zeros(n, self.n_classes());
        for r in 0..n {
            let probs = softmax(logits.row(r));
            let row = dz.row_mut(r);
            for (c, p) in probs.into_iter().enumerate() {
                row[c] = p / n as f64;
            }
            row[batch.labels()[r]] -= 1.0 / n as f64;
        }

        let mut grad = ParamVector::zeros_like(&self.params);
        for l in (0..self.n_layers()).rev() {
            let (din, dout) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let input_act = |r: usize, i: usize| -> f64 {
                if l == 0 {
                    batch.inputs().get(r, i)
                } else {
                    pre[l - 1].get(r, i).max(0.0)
                }
            };
            {
                let gw = grad.segment_mut(2 * l);
                for r in 0..n {
                    let dzr = dz.row(r);
                    for (o, &d) in dzr.iter().enumerate() {
                        if d == 0.0 {
                            continue;
                        }
                        let g = &mut gw[o * din..(o + 1) * din];
                        for (i, gi) in g.iter_mut().enumerate() {
                            *gi += d * input_act(r, i);
                        }
                    }
                }
            }
            {
                let gb = grad.segment_mut(2 * l + 1);
                for r in 0..n {
                    for (gbo, &d) in gb.iter_mut().zip(dz.row(r)) {
                        *gbo += d;
                    }
                }
            }
            if l > 0 {
                let w = self.params.segment(2 * l);
                let mut dprev = Matrix::zeros(n, din);
                for r in 0..n {
                    let dzr = dz.row(r).to_vec();
                    let zprev = pre[l - 1].row(r).to_vec();
                    let out = dprev.row_mut(r);
                    for o in 0..dout {
                        let d = dzr[o];
                        if d == 0.0 {
                            continue;
                        }
                        let wrow = &w[o * din..(o + 1) * din];
                        for (i, out_i) in out.iter_mut().enumerate() {
                            *out_i += d * wrow[i];
                        }
                    }
                    for (out_i, &zp) in out.iter_mut().zip(&zprev) {
                        if zp <= 0.0 {
                            *out_i = 0.0;
                        }
                    }
                }
                dz = dprev;
            }
        }
        grad.ensure_finite("backward")?;
        Ok((loss, grad))
    }

    pub fn backward(&self, batch: &Batch) -> Result<ParamVector> {
        Ok(self.loss_and_grad(batch)?.1)
    }

    pub fn predict(&self, inputs: &Matrix) -> Result<Vec<usize>> {
        let logits = self.forward(inputs)?;
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
    }
}

pub fn forward(model: &MlpModel, inputs: &Matrix) -> Result<Matrix> {
    model.forward(inputs)
}

pub fn backward(model: &MlpModel, batch: &Batch) -> Result<ParamVector> {
    model.backward(batch)
}

/// First index of the maximum; ties resolve to the lowest class.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|v| (v - lse).exp()).collect()
}

/// Mean cross-entropy over rows.
pub fn ce_loss(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows but {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= logits.cols() {
            return Err(Error::Data(format!(
                "label {y} outside [0, {})",
                logits.cols()
            )));
        }
        let row = logits.row(r);
        total += log_sum_exp(row) - row[y];
    }
    Ok(total / labels.len() as f64)
}

/// `delta = -lr * grad`, `new = old + delta`.
pub fn sgd_step(
    params: &ParamVector,
    grad: &ParamVector,
    lr: f64,
) -> Result<(ParamVector, ParamVector)> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::config("lr", format!("must be finite and >= 0, got {lr}")));
    }
    let delta = grad.scale(-lr);
    let new = params.add(&delta)?;
    new.ensure_finite("sgd_step")?;
    Ok((new, delta))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

/// Stateful optimizer. `step` always returns the realised parameter change,
/// which is what path-integral importance consumes regardless of the rule.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        m: Vec<f64>,
        v: Vec<f64>,
        t: i32,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, n_params: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam { beta1, beta2, eps } => Optimizer::Adam {
                beta1,
                beta2,
                eps,
                m: vec![0.0; n_params],
                v: vec![0.0; n_params],
                t: 0,
            },
        }
    }

    pub fn step(
        &mut self,
        params: &ParamVector,
        grad: &ParamVector,
        lr: f64,
    ) -> Result<(ParamVector, ParamVector)> {
        match self {
            Optimizer::Sgd => sgd_step(params, grad, lr),
            Optimizer::Adam {
                beta1,
                beta2,
                eps,
                m,
                v,
                t,
            } => {
                params.check_layout(grad)?;
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - beta2.powi(*t);
                let mut delta = ParamVector::zeros_like(params);
                for (i, (d, &g)) in delta
                    .as_mut_slice()
                    .iter_mut()
                    .zip(grad.as_slice())
                    .enumerate()
                {
                    m[i] = *beta1 * m[i] + (1.0 - *beta1) * g;
                    v[i] = *beta2 * v[i] + (1.0 - *beta2) * g * g;
                    let mhat = m[i] / c1;
                    let vhat = v[i] / c2;
                    *d = -lr * mhat / (vhat.sqrt() + *eps);
                }
                let new = params.add(&delta)?;
                new.ensure_finite("adam_step")?;
                Ok((new, delta))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear decay from `lr` at the first round to `lr * end_factor` at the last.
    Linear { end_factor: f64 },
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, round: usize, total_rounds: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Linear { end_factor } => {
                if total_rounds <= 1 {
                    return base;
                }
                let frac = round as f64 / (total_rounds - 1) as f64;
                base * (1.0 - (1.0 - end_factor) * frac)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_sized() {
        let a = init_model(&[2, 3, 2], 7).unwrap();
        let b = init_model(&[2, 3, 2], 7).unwrap();
        assert_eq!(a.params().as_slice(), b.params().as_slice());
        assert_eq!(a.params().len(), 2 * 3 + 3 + 3 * 2 + 2);
        // biases zero, weights within the scaled bound
        assert!(a.params().segment(1).iter().all(|&b| b == 0.0));
        let bound = 1.0 / 2f64.sqrt();
        assert!(a.params().segment(0).iter().all(|w| w.abs() < bound));
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(matches!(init_model(&[4], 0), Err(Error::Config { .. })));
        assert!(matches!(init_model(&[4, 0, 2], 0), Err(Error::Config { .. })));
    }

    #[test]
    fn zero_params_give_uniform_softmax() {
        let m = init_model(&[3, 10], 1).unwrap();
        let m = m.with_params(ParamVector::zeros_like(m.params())).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap();
        let logits = m.forward(&x).unwrap();
        assert!(logits.row(0).iter().all(|&v| v == 0.0));
        for p in softmax(logits.row(0)) {
            assert!((p - 0.1).abs() < 1e-15);
        }
        assert!((ce_loss(&logits, &[4]).unwrap() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn identity_single_layer_passes_inputs_through() {
        let m = init_model(&[3, 3], 0).unwrap();
        let mut p = ParamVector::zeros_like(m.params());
        for i in 0..3 {
            p.segment_mut(0)[i * 3 + i] = 1.0;
        }
        let m = m.with_params(p).unwrap();
        let x = Matrix::from_rows(&[vec![1.5, -2.0, 0.25], vec![0.0, 3.0, -1.0]]).unwrap();
        assert_eq!(m.forward(&x).unwrap(), x);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m = init_model(&[3, 2], 0).unwrap();
        let x = Matrix::zeros(1, 4);
        assert!(matches!(m.forward(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn ce_saturates_and_validates_labels() {
        let mut row = vec![0.0; 5];
        row[2] = 1000.0;
        let logits = Matrix::from_rows(&[row]).unwrap();
        assert!(ce_loss(&logits, &[2]).unwrap() < 1e-9);
        assert!(matches!(ce_loss(&logits, &[5]), Err(Error::Data(_))));
        assert!(matches!(ce_loss(&logits, &[0, 1]), Err(Error::Shape(_))));
    }

    #[test]
    fn sgd_step_arithmetic() {
        let w = ParamVector::from_vec(vec![1.0]);
        let g = ParamVector::from_vec(vec![2.0]);
        let (new, delta) = sgd_step(&w, &g, 0.1).unwrap();
        assert!((new.as_slice()[0] - 0.8).abs() < 1e-15);
        assert!((delta.as_slice()[0] + 0.2).abs() < 1e-15);
        assert_eq!(w.add(&delta).unwrap(), new);

        let (same, zero) = sgd_step(&w, &g, 0.0).unwrap();
        assert_eq!(same, w);
        assert_eq!(zero.as_slice(), &[0.0]);
    }

    #[test]
    fn sgd_step_layout_mismatch() {
        let w = ParamVector::from_vec(vec![1.0, 2.0]);
        let g = ParamVector::from_vec(vec![2.0]);
        assert!(matches!(sgd_step(&w, &g, 0.1), Err(Error::Shape(_))));
    }

    #[test]
    fn adam_delta_is_realised_change() {
        let w = ParamVector::from_vec(vec![1.0, -1.0]);
        let g = ParamVector::from_vec(vec![0.5, -3.0]);
        let mut opt = Optimizer::new(
            OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            2,
        );
        let (new, delta) = opt.step(&w, &g, 0.01).unwrap();
        assert_eq!(w.add(&delta).unwrap().as_slice(), new.as_slice());
        // first Adam step moves each coordinate by ~lr against the gradient sign
        assert!((delta.as_slice()[0] + 0.01).abs() < 1e-6);
        assert!((delta.as_slice()[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn linear_schedule_endpoints() {
        let s = LrSchedule::Linear { end_factor: 0.1 };
        assert_eq!(s.lr_at(0.5, 0, 11), 0.5);
        assert!((s.lr_at(0.5, 10, 11) - 0.05).abs() < 1e-15);
        assert_eq!(LrSchedule::Constant.lr_at(0.5, 10, 11), 0.5);
    }
}
