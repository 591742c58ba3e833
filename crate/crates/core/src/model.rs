//! Neural approximator of the negative normalized field and its training loop.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by inherent f64 methods when std is linked
use num_traits::Float;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{domain, Error, Result};
use crate::field::{normalized_field, AugmentedPoint};
use crate::geometry::standard_normal;
use crate::linalg;
use crate::perturb::{perturb, PerturbConfig};

/// Anything that maps an augmented point to a field vector `v`.
pub trait VectorField {
    fn data_dim(&self) -> usize;

    fn evaluate(&self, q: &AugmentedPoint) -> Result<Vec<f64>>;

    /// True when `v_z` is computed exactly, so no substitution is needed.
    fn is_exact(&self) -> bool {
        false
    }
}

impl<T: VectorField + ?Sized> VectorField for &T {
    fn data_dim(&self) -> usize {
        (**self).data_dim()
    }
    fn evaluate(&self, q: &AugmentedPoint) -> Result<Vec<f64>> {
        (**self).evaluate(q)
    }
    fn is_exact(&self) -> bool {
        (**self).is_exact()
    }
}

impl<T: VectorField + ?Sized> VectorField for Box<T> {
    fn data_dim(&self) -> usize {
        (**self).data_dim()
    }
    fn evaluate(&self, q: &AugmentedPoint) -> Result<Vec<f64>> {
        (**self).evaluate(q)
    }
    fn is_exact(&self) -> bool {
        (**self).is_exact()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Silu,
    Tanh,
    Softplus,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Softplus => sigmoid(x),
        }
    }
}

/// How `(x, z)` is presented to the first layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputEncoding {
    /// `(x, z)` as is.
    Plain,
    /// `(x~ / s, ln s)` with `s = sqrt(1 + |x~|^2)`: bounded direction plus log scale.
    #[default]
    Scaled,
}

impl InputEncoding {
    pub fn width(self, aug: usize) -> usize {
        match self {
            InputEncoding::Plain => aug,
            InputEncoding::Scaled => aug + 1,
        }
    }

    fn encode(self, v: &[f64]) -> Vec<f64> {
        match self {
            InputEncoding::Plain => v.to_vec(),
            InputEncoding::Scaled => {
                let s = (1.0 + linalg::norm_sq(v)).sqrt();
                let mut e: Vec<f64> = v.iter().map(|x| x / s).collect();
                e.push(s.ln());
                e
            }
        }
    }

    /// Jacobian of the encoding, row-major `width x aug`.
    fn jacobian(self, v: &[f64]) -> Vec<f64> {
        let aug = v.len();
        match self {
            InputEncoding::Plain => {
                let mut j = vec![0.0; aug * aug];
                for i in 0..aug {
                    j[i * aug + i] = 1.0;
                }
                j
            }
            InputEncoding::Scaled => {
                let s2 = 1.0 + linalg::norm_sq(v);
                let s = s2.sqrt();
                let s3 = s2 * s;
                let mut j = vec![0.0; (aug + 1) * aug];
                for i in 0..aug {
                    for k in 0..aug {
                        j[i * aug + k] = -v[i] * v[k] / s3 + if i == k { 1.0 / s } else { 0.0 };
                    }
                }
                for k in 0..aug {
                    j[aug * aug + k] = v[k] / s2;
                }
                j
            }
        }
    }
}

/// Dense layer `y = W x + b`, `W` row-major `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| self.bias[o] + linalg::dot(&self.weights[o * self.inputs..(o + 1) * self.inputs], x))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub data_dim: usize,
    pub activation: Activation,
    pub encoding: InputEncoding,
    pub layers: Vec<Layer>,
}

struct Trace {
    /// Inputs to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of each hidden layer.
    pre: Vec<Vec<f64>>,
    out: Vec<f64>,
}

impl Mlp {
    /// LeCun-normal weights and zero biases.
    pub fn new<R: Rng + ?Sized>(
        data_dim: usize,
        hidden: &[usize],
        activation: Activation,
        encoding: InputEncoding,
        rng: &mut R,
    ) -> Result<Self> {
        if data_dim == 0 {
            return Err(domain!("data dimension must be positive"));
        }
        if hidden.contains(&0) {
            return Err(domain!("hidden widths must be positive"));
        }
        let aug = data_dim + 1;
        let mut widths = vec![encoding.width(aug)];
        widths.extend_from_slice(hidden);
        widths.push(aug);
        let layers = widths
            .windows(2)
            .map(|w| {
                let scale = 1.0 / (w[0] as f64).sqrt();
                Layer {
                    inputs: w[0],
                    outputs: w[1],
                    weights: (0..w[0] * w[1]).map(|_| scale * standard_normal(rng)).collect(),
                    bias: vec![0.0; w[1]],
                }
            })
            .collect();
        Ok(Self {
            data_dim,
            activation,
            encoding,
            layers,
        })
    }

    pub fn aug(&self) -> usize {
        self.data_dim + 1
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameters flattened layer by layer, weights before biases.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            p.extend_from_slice(&l.weights);
            p.extend_from_slice(&l.bias);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                got: p.len(),
            });
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&p[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&p[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    fn check(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.aug() {
            return Err(Error::DimensionMismatch {
                expected: self.aug(),
                got: v.len(),
            });
        }
        Ok(())
    }

    fn trace(&self, v: &[f64]) -> Trace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = self.encoding.encode(v);
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let a = l.apply(&h);
            inputs.push(h);
            if i == last {
                return Trace { inputs, pre, out: a };
            }
            h = a.iter().map(|&x| self.activation.apply(x)).collect();
            pre.push(a);
        }
        unreachable!("network has at least one layer")
    }

    /// `f_theta(x, z)`.
    pub fn forward(&self, q: &AugmentedPoint) -> Result<Vec<f64>> {
        let v = q.to_vec();
        self.check(&v)?;
        Ok(self.trace(&v).out)
    }

    pub fn forward_batch(&self, qs: &[AugmentedPoint]) -> Result<Vec<Vec<f64>>> {
        qs.iter().map(|q| self.forward(q)).collect()
    }

    /// Jacobian of the output with respect to `(x, z)`, row-major `aug x aug`.
    pub fn input_jacobian(&self, q: &AugmentedPoint) -> Result<Vec<f64>> {
        let v = q.to_vec();
        self.check(&v)?;
        let t = self.trace(&v);
        let aug = self.aug();
        // Running product, rows = current layer width, cols = aug.
        let mut j = self.encoding.jacobian(&v);
        let mut rows = self.encoding.width(aug);
        for (i, l) in self.layers.iter().enumerate() {
            let mut next = vec![0.0; l.outputs * aug];
            for o in 0..l.outputs {
                let w = &l.weights[o * l.inputs..(o + 1) * l.inputs];
                for k in 0..aug {
                    next[o * aug + k] = (0..rows).map(|r| w[r] * j[r * aug + k]).sum();
                }
                if i < t.pre.len() {
                    let d = self.activation.derivative(t.pre[i][o]);
                    for k in 0..aug {
                        next[o * aug + k] *= d;
                    }
                }
            }
            j = next;
            rows = l.outputs;
        }
        Ok(j)
    }

    /// Mean squared residual over a batch and its gradient in [`Mlp::params`] order.
    pub fn loss_and_grad(&self, points: &[AugmentedPoint], targets: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
        if points.len() != targets.len() || points.is_empty() {
            return Err(domain!("need equal, nonzero numbers of points and targets"));
        }
        let scale = 1.0 / points.len() as f64;
        let mut grads: Vec<(Vec<f64>, Vec<f64>)> = self
            .layers
            .iter()
            .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
            .collect();
        let mut loss = 0.0;
        for (q, target) in points.iter().zip(targets) {
            let v = q.to_vec();
            self.check(&v)?;
            self.check(target)?;
            let t = self.trace(&v);
            let mut delta: Vec<f64> = t.out.iter().zip(target).map(|(o, y)| o - y).collect();
            loss += linalg::norm_sq(&delta) * scale;
            linalg::scale_in_place(&mut delta, 2.0 * scale);
            for li in (0..self.layers.len()).rev() {
                let l = &self.layers[li];
                let input = &t.inputs[li];
                let (gw, gb) = &mut grads[li];
                for o in 0..l.outputs {
                    gb[o] += delta[o];
                    linalg::axpy(delta[o], input, &mut gw[o * l.inputs..(o + 1) * l.inputs]);
                }
                if li > 0 {
                    let pre = &t.pre[li - 1];
                    let mut back = vec![0.0; l.inputs];
                    for o in 0..l.outputs {
                        linalg::axpy(delta[o], &l.weights[o * l.inputs..(o + 1) * l.inputs], &mut back);
                    }
                    for (b, a) in back.iter_mut().zip(pre) {
                        *b *= self.activation.derivative(*a);
                    }
                    delta = back;
                }
            }
        }
        let mut flat = Vec::with_capacity(self.param_count());
        for (gw, gb) in grads {
            flat.extend(gw);
            flat.extend(gb);
        }
        Ok((loss, flat))
    }
}

impl VectorField for Mlp {
    fn data_dim(&self) -> usize {
        self.data_dim
    }
    fn evaluate(&self, q: &AugmentedPoint) -> Result<Vec<f64>> {
        self.forward(q)
    }
}

/// The field used by the sampler: exact empirical or learned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldModel {
    ExactEmpirical { dataset: Dataset, gamma: f64 },
    Neural(Mlp),
}

impl VectorField for FieldModel {
    fn data_dim(&self) -> usize {
        match self {
            FieldModel::ExactEmpirical { dataset, .. } => dataset.dim().n(),
            FieldModel::Neural(m) => m.data_dim,
        }
    }

    fn evaluate(&self, q: &AugmentedPoint) -> Result<Vec<f64>> {
        match self {
            FieldModel::ExactEmpirical { dataset, gamma } => Ok(normalized_field(q, dataset, *gamma)?.v),
            FieldModel::Neural(m) => m.forward(q),
        }
    }

    fn is_exact(&self) -> bool {
        matches!(self, FieldModel::ExactEmpirical { .. })
    }
}

/// Mean squared Euclidean residual of `f` against `targets`.
pub fn loss<F: VectorField + ?Sized>(f: &F, points: &[AugmentedPoint], targets: &[Vec<f64>]) -> Result<f64> {
    if points.len() != targets.len() || points.is_empty() {
        return Err(domain!("need equal, nonzero numbers of points and targets"));
    }
    let mut acc = 0.0;
    for (q, t) in points.iter().zip(targets) {
        let out = f.evaluate(q)?;
        if out.len() != t.len() {
            return Err(Error::DimensionMismatch {
                expected: out.len(),
                got: t.len(),
            });
        }
        acc += linalg::dist_sq(&out, t);
    }
    Ok(acc / points.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; params],
            v: vec![0.0; params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// `ema <- decay * ema + (1 - decay) * params`.
pub fn ema_update(ema: &mut [f64], params: &[f64], decay: f64) {
    for (e, p) in ema.iter_mut().zip(params) {
        *e = decay * *e + (1.0 - decay) * p;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub large_batch_size: usize,
    pub lr: f64,
    pub ema_decay: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub encoding: InputEncoding,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 128,
            large_batch_size: 2048,
            lr: 1e-3,
            ema_decay: 0.999,
            hidden: vec![128, 128, 128],
            activation: Activation::Silu,
            encoding: InputEncoding::Scaled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub optimizer: Adam,
    pub ema_decay: f64,
    pub ema_params: Vec<f64>,
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Network carrying the EMA weights.
    pub model: Mlp,
    /// Network carrying the last raw weights.
    pub raw: Mlp,
    pub state: TrainState,
}

/// Train with targets from the empirical field of the large batch.
pub fn train<R: Rng + ?Sized>(
    d: &Dataset,
    pcfg: &PerturbConfig,
    tcfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainOutcome> {
    let gamma = pcfg.gamma;
    train_with(d, pcfg, tcfg, rng, |q, large| Ok(normalized_field(q, large, gamma)?.v), |_, _| {})
}

/// Training loop with an injected target function and a per-step observer.
///
/// `target(q, large_batch)` must return the regression target for `q`; it is
/// handed only the large batch. `observe(step, state)` runs after each update.
pub fn train_with<R, T, O>(
    d: &Dataset,
    pcfg: &PerturbConfig,
    tcfg: &TrainConfig,
    rng: &mut R,
    mut target: T,
    mut observe: O,
) -> Result<TrainOutcome>
where
    R: Rng + ?Sized,
    T: FnMut(&AugmentedPoint, &Dataset) -> Result<Vec<f64>>,
    O: FnMut(usize, &TrainState),
{
    pcfg.validate()?;
    if tcfg.batch_size == 0 || tcfg.batch_size > tcfg.large_batch_size {
        return Err(domain!(
            "batch size {} must be in 1..={}",
            tcfg.batch_size,
            tcfg.large_batch_size
        ));
    }
    if tcfg.large_batch_size > d.len() {
        return Err(Error::BatchTooLarge {
            requested: tcfg.large_batch_size,
            available: d.len(),
        });
    }
    if !(0.0..1.0).contains(&tcfg.ema_decay) {
        return Err(domain!("ema decay must be in [0, 1), got {}", tcfg.ema_decay));
    }
    let mut net = Mlp::new(d.dim().n(), &tcfg.hidden, tcfg.activation, tcfg.encoding, rng)?;
    let mut params = net.params();
    let mut state = TrainState {
        step: 0,
        optimizer: Adam::new(params.len(), tcfg.lr),
        ema_decay: tcfg.ema_decay,
        ema_params: params.clone(),
        loss_history: Vec::with_capacity(tcfg.steps),
    };
    for _ in 0..tcfg.steps {
        let large_idx = index::sample(rng, d.len(), tcfg.large_batch_size).into_vec();
        let large = d.subset(&large_idx);
        let small = index::sample(rng, large.len(), tcfg.batch_size);
        let mut points = Vec::with_capacity(tcfg.batch_size);
        let mut targets = Vec::with_capacity(tcfg.batch_size);
        for i in small.iter() {
            let p = perturb(large.point(i), pcfg, rng)?.point;
            targets.push(target(&p, &large)?);
            points.push(p);
        }
        let (l, grad) = net.loss_and_grad(&points, &targets)?;
        if !l.is_finite() {
            return Err(Error::NonFinite { t: state.step as f64 });
        }
        state.optimizer.step(&mut params, &grad);
        net.set_params(&params)?;
        ema_update(&mut state.ema_params, &params, state.ema_decay);
        state.loss_history.push(l);
        state.step += 1;
        observe(state.step, &state);
    }
    let mut model = net.clone();
    model.set_params(&state.ema_params)?;
    Ok(TrainOutcome { model, raw: net, state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RngState;

    fn tiny(encoding: InputEncoding, act: Activation, seed: u64) -> Mlp {
        let mut rng = RngState::new(seed, 0).rng();
        Mlp::new(2, &[2], act, encoding, &mut rng).unwrap()
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut m = tiny(InputEncoding::Scaled, Activation::Silu, 1);
        let mut p = vec![0.0; m.param_count()];
        let n = p.len();
        p[n - 3..].copy_from_slice(&[0.5, -1.0, 2.0]);
        m.set_params(&p).unwrap();
        let out = m.forward(&AugmentedPoint::new(vec![3.0, 4.0], 1.0)).unwrap();
        assert_eq!(out, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn forward_is_deterministic_and_checks_dims() {
        let m = tiny(InputEncoding::Plain, Activation::Tanh, 2);
        let q = AugmentedPoint::new(vec![0.3, 0.1], 0.7);
        assert_eq!(m.forward(&q).unwrap(), m.forward(&q).unwrap());
        assert!(m.forward(&AugmentedPoint::new(vec![0.3], 0.7)).is_err());
    }

    #[test]
    fn input_jacobian_matches_finite_differences() {
        for (enc, act) in [
            (InputEncoding::Plain, Activation::Silu),
            (InputEncoding::Scaled, Activation::Tanh),
            (InputEncoding::Scaled, Activation::Softplus),
        ] {
            let mut rng = RngState::new(3, 0).rng();
            let m = Mlp::new(2, &[8, 8], act, enc, &mut rng).unwrap();
            let v = [0.4, -0.9, 0.6];
            let j = m.input_jacobian(&AugmentedPoint::from_slice(&v)).unwrap();
            let h = 1e-4;
            for k in 0..3 {
                let mut up = v;
                let mut dn = v;
                up[k] += h;
                dn[k] -= h;
                let fu = m.forward(&AugmentedPoint::from_slice(&up)).unwrap();
                let fd = m.forward(&AugmentedPoint::from_slice(&dn)).unwrap();
                for o in 0..3 {
                    let fdv = (fu[o] - fd[o]) / (2.0 * h);
                    let a = j[o * 3 + k];
                    assert!((a - fdv).abs() <= 1e-5 * a.abs().max(1e-2), "{a} vs {fdv}");
                }
            }
        }
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let m = tiny(InputEncoding::Scaled, Activation::Silu, 4);
        assert!(m.param_count() <= 50);
        let pts = vec![AugmentedPoint::new(vec![0.2, -0.4], 0.3), AugmentedPoint::new(vec![-1.0, 0.5], 2.0)];
        let tgt = vec![vec![0.1, 0.2, -0.3], vec![-0.5, 0.0, 0.4]];
        let (_, g) = m.loss_and_grad(&pts, &tgt).unwrap();
        let p0 = m.params();
        let h = 1e-5;
        for i in 0..p0.len() {
            let mut mm = m.clone();
            let mut p = p0.clone();
            p[i] += h;
            mm.set_params(&p).unwrap();
            let lu = loss(&mm, &pts, &tgt).unwrap();
            p[i] -= 2.0 * h;
            mm.set_params(&p).unwrap();
            let ld = loss(&mm, &pts, &tgt).unwrap();
            let fd = (lu - ld) / (2.0 * h);
            assert!((g[i] - fd).abs() <= 1e-4 * g[i].abs().max(1e-3), "param {i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn loss_examples() {
        let d = Dataset::from_rows(&[[0.0]]).unwrap();
        let exact = FieldModel::ExactEmpirical { dataset: d, gamma: 0.0 };
        let q = vec![AugmentedPoint::new(vec![0.6], 0.8)];
        let t = vec![exact.evaluate(&q[0]).unwrap()];
        assert_eq!(loss(&exact, &q, &t).unwrap(), 0.0);
        let off = vec![vec![t[0][0] + 3.0, t[0][1] + 4.0]];
        assert!((loss(&exact, &q, &off).unwrap() - 25.0).abs() < 1e-12);
        assert!(loss(&exact, &q, &[]).is_err());
    }

    #[test]
    fn ema_zero_tracks_raw() {
        let mut rng = RngState::new(5, 0).rng();
        let d = crate::dataset::generate_toy(crate::dataset::ToyName::Disk, 64, &mut rng).unwrap();
        let tcfg = TrainConfig {
            steps: 10,
            batch_size: 8,
            large_batch_size: 32,
            ema_decay: 0.0,
            hidden: vec![4],
            ..TrainConfig::default()
        };
        let mut raw_each = Vec::new();
        let out = train_with(
            &d,
            &PerturbConfig::default(),
            &tcfg,
            &mut rng,
            |q, large| Ok(normalized_field(q, large, 5.0)?.v),
            |_, s| raw_each.push(s.ema_params.clone()),
        )
        .unwrap();
        assert_eq!(out.model.params(), out.raw.params());
        assert_eq!(raw_each.len(), 10);
    }

    #[test]
    fn targets_see_only_large_batch() {
        let mut rng = RngState::new(6, 0).rng();
        let d = crate::dataset::generate_toy(crate::dataset::ToyName::Disk, 200, &mut rng).unwrap();
        let tcfg = TrainConfig {
            steps: 5,
            batch_size: 16,
            large_batch_size: 64,
            hidden: vec![4],
            ..TrainConfig::default()
        };
        let mut calls = 0;
        train_with(
            &d,
            &PerturbConfig::default(),
            &tcfg,
            &mut rng,
            |q, large| {
                calls += 1;
                assert_eq!(large.len(), 64);
                Ok(normalized_field(q, large, 5.0)?.v)
            },
            |_, _| {},
        )
        .unwrap();
        assert_eq!(calls, 5 * 16);
    }

    #[test]
    fn batch_larger_than_dataset() {
        let mut rng = RngState::new(7, 0).rng();
        let d = crate::dataset::generate_toy(crate::dataset::ToyName::Disk, 10, &mut rng).unwrap();
        let err = train(&d, &PerturbConfig::default(), &TrainConfig::default(), &mut rng).unwrap_err();
        assert_eq!(err, Error::BatchTooLarge { requested: 2048, available: 10 });
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut a = Adam::new(2, 0.1);
        let mut p = [1.0, -1.0];
        a.step(&mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6);
    }
}
