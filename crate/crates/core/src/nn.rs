//! Fixed-architecture multilayer perceptrons with exact reverse-mode
//! gradients, and the Adam optimizer.
//!
//! # Parameter layout
//!
//! An MLP with widths `[w0, w1, ..., wL]` stores its parameters in one flat
//! vector, layer by layer. Layer `l` (mapping `w_l -> w_{l+1}`) contributes
//! its weight matrix in row-major order (`w_{l+1}` rows of `w_l` entries, so
//! entry `(o, i)` sits at `o * w_l + i`) followed by its `w_{l+1}` biases.
//! Hidden layers apply their activation after the affine map; the output
//! layer is affine only.

use serde::{Deserialize, Serialize};

use crate::rng::SeededRng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    /// One entry per hidden layer (`layer_widths.len() - 2`).
    pub activations: Vec<Activation>,
}

impl MlpSpec {
    /// Spec with the same activation on every hidden layer.
    pub fn new(layer_widths: Vec<usize>, hidden: Activation) -> Result<Self> {
        let n_hidden = layer_widths.len().saturating_sub(2);
        let spec = Self {
            layer_widths,
            activations: vec![hidden; n_hidden],
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::InvalidArgument(
                "an MLP needs input and output widths".into(),
            ));
        }
        if self.layer_widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        if self.activations.len() != self.layer_widths.len() - 2 {
            return Err(Error::dims(
                "hidden activations",
                self.layer_widths.len() - 2,
                self.activations.len(),
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().expect("validated spec")
    }

    pub fn n_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    fn activation(&self, layer: usize) -> Activation {
        self.activations
            .get(layer)
            .copied()
            .unwrap_or(Activation::Identity)
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(&self, rng: &mut SeededRng) -> ParamVector {
        let mut values = Vec::with_capacity(self.param_count());
        for w in self.layer_widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            values.extend((0..fan_in * fan_out).map(|_| rng.uniform_range(-bound, bound)));
            values.extend(std::iter::repeat_n(0.0, fan_out));
        }
        ParamVector(values)
    }
}

/// Flat parameters in the layout described at the module level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// A spec together with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub spec: MlpSpec,
    pub params: ParamVector,
}

impl Network {
    pub fn init(spec: MlpSpec, rng: &mut SeededRng) -> Self {
        let params = spec.init(rng);
        Self { spec, params }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        mlp_forward(&self.spec, &self.params, input)
    }

    pub fn trace(&self, input: &[f64]) -> Result<Trace> {
        forward_trace(&self.spec, &self.params, input)
    }

    pub fn backprop_into(&self, trace: &Trace, upstream: &[f64], grad: &mut [f64]) -> Result<Vec<f64>> {
        backprop_trace(&self.spec, &self.params, trace, upstream, grad)
    }
}

/// Intermediate values of one forward pass, kept for backprop.
#[derive(Clone, Debug)]
pub struct Trace {
    /// `outputs[0]` is the input; `outputs[l + 1]` the post-activation of layer `l`.
    outputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.outputs.last().expect("trace has input")
    }
}

fn check_shapes(spec: &MlpSpec, params: &ParamVector, input: &[f64]) -> Result<()> {
    if params.len() != spec.param_count() {
        return Err(Error::dims("mlp parameters", spec.param_count(), params.len()));
    }
    if input.len() != spec.input_dim() {
        return Err(Error::dims("mlp input", spec.input_dim(), input.len()));
    }
    Ok(())
}

pub fn forward_trace(spec: &MlpSpec, params: &ParamVector, input: &[f64]) -> Result<Trace> {
    check_shapes(spec, params, input)?;
    let p = params.as_slice();
    let mut outputs = Vec::with_capacity(spec.n_layers() + 1);
    let mut pre = Vec::with_capacity(spec.n_layers());
    outputs.push(input.to_vec());
    let mut offset = 0;
    for (l, w) in spec.layer_widths.windows(2).enumerate() {
        let (n_in, n_out) = (w[0], w[1]);
        let weights = &p[offset..offset + n_in * n_out];
        let biases = &p[offset + n_in * n_out..offset + n_in * n_out + n_out];
        offset += n_in * n_out + n_out;
        let x = outputs.last().expect("non-empty");
        let z: Vec<f64> = weights
            .chunks_exact(n_in)
            .zip(biases)
            .map(|(row, b)| row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect();
        let act = spec.activation(l);
        let y = z.iter().map(|&v| act.apply(v)).collect();
        pre.push(z);
        outputs.push(y);
    }
    Ok(Trace { outputs, pre })
}

pub fn mlp_forward(spec: &MlpSpec, params: &ParamVector, input: &[f64]) -> Result<Vec<f64>> {
    forward_trace(spec, params, input).map(|mut t| t.outputs.pop().expect("non-empty"))
}

/// Accumulates `d(upstream . f)/d(params)` into `param_grad` and returns the
/// gradient with respect to the input.
pub fn backprop_trace(
    spec: &MlpSpec,
    params: &ParamVector,
    trace: &Trace,
    upstream: &[f64],
    param_grad: &mut [f64],
) -> Result<Vec<f64>> {
    if upstream.len() != spec.output_dim() {
        return Err(Error::dims("mlp upstream gradient", spec.output_dim(), upstream.len()));
    }
    if param_grad.len() != spec.param_count() {
        return Err(Error::dims("mlp gradient buffer", spec.param_count(), param_grad.len()));
    }
    let p = params.as_slice();
    let mut offsets: Vec<usize> = spec
        .layer_widths
        .windows(2)
        .scan(0, |acc, w| {
            let start = *acc;
            *acc += w[0] * w[1] + w[1];
            Some(start)
        })
        .collect();
    let mut delta = upstream.to_vec();
    for l in (0..spec.n_layers()).rev() {
        let (n_in, n_out) = (spec.layer_widths[l], spec.layer_widths[l + 1]);
        let offset = offsets.pop().expect("one offset per layer");
        let act = spec.activation(l);
        let (z, y) = (&trace.pre[l], &trace.outputs[l + 1]);
        for ((d, &zv), &yv) in delta.iter_mut().zip(z).zip(y) {
            *d *= act.derivative(zv, yv);
        }
        let x = &trace.outputs[l];
        let (gw, gb) = param_grad[offset..offset + n_in * n_out + n_out].split_at_mut(n_in * n_out);
        for ((grow, gbias), &d) in gw.chunks_exact_mut(n_in).zip(gb.iter_mut()).zip(&delta) {
            if d == 0.0 {
                continue;
            }
            *gbias += d;
            for (g, &xv) in grow.iter_mut().zip(x) {
                *g += d * xv;
            }
        }
        let weights = &p[offset..offset + n_in * n_out];
        let mut next = vec![0.0; n_in];
        for (row, &d) in weights.chunks_exact(n_in).zip(&delta) {
            if d == 0.0 {
                continue;
            }
            for (n, &w) in next.iter_mut().zip(row) {
                *n += d * w;
            }
        }
        delta = next;
    }
    Ok(delta)
}

/// Exact gradients of `upstream . mlp(input)` with respect to the parameters
/// and the input.
pub fn backprop(
    spec: &MlpSpec,
    params: &ParamVector,
    input: &[f64],
    upstream: &[f64],
) -> Result<(ParamVector, Vec<f64>)> {
    let trace = forward_trace(spec, params, input)?;
    let mut grad = ParamVector::zeros(spec.param_count());
    let input_grad = backprop_trace(spec, params, &trace, upstream, grad.as_mut_slice())?;
    Ok((grad, input_grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(n_params: usize, config: AdamConfig) -> Self {
        Self {
            step_count: 0,
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            config,
        }
    }

    /// One bias-corrected Adam update in place. A gradient with a non-finite
    /// component is rejected and leaves both `params` and `self` untouched.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.first_moment.len() {
            return Err(Error::dims("adam parameters", self.first_moment.len(), params.len()));
        }
        if grad.len() != params.len() {
            return Err(Error::dims("adam gradient", params.len(), grad.len()));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient component {i}; step skipped"
            )));
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::update`].
pub fn adam_step(
    state: &AdamState,
    params: &ParamVector,
    gradient: &ParamVector,
) -> Result<(ParamVector, AdamState)> {
    let mut state = state.clone();
    let mut params = params.clone();
    state.update(params.as_mut_slice(), gradient.as_slice())?;
    Ok((params, state))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(widths: &[usize], act: Activation) -> MlpSpec {
        MlpSpec::new(widths.to_vec(), act).unwrap()
    }

    /// Plain nested-loop evaluation, written independently of the layout
    /// arithmetic above.
    fn naive_forward(widths: &[usize], acts: &[Activation], p: &[f64], x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let mut k = 0;
        for l in 0..widths.len() - 1 {
            let mut w = vec![vec![0.0; widths[l]]; widths[l + 1]];
            for row in w.iter_mut() {
                for v in row.iter_mut() {
                    *v = p[k];
                    k += 1;
                }
            }
            let b: Vec<f64> = p[k..k + widths[l + 1]].to_vec();
            k += widths[l + 1];
            let mut out = vec![0.0; widths[l + 1]];
            for o in 0..widths[l + 1] {
                let mut acc = b[o];
                for i in 0..widths[l] {
                    acc += w[o][i] * h[i];
                }
                out[o] = if l + 1 < widths.len() - 1 {
                    acts[l].apply(acc)
                } else {
                    acc
                };
            }
            h = out;
        }
        h
    }

    #[test]
    fn param_count_formula() {
        let s = spec(&[3, 5, 2], Activation::Relu);
        assert_eq!(s.param_count(), 3 * 5 + 5 + 5 * 2 + 2);
        assert_eq!(s.init(&mut SeededRng::new(0)).len(), s.param_count());
        assert!(MlpSpec::new(vec![3], Activation::Relu).is_err());
        assert!(MlpSpec::new(vec![3, 0, 1], Activation::Relu).is_err());
    }

    #[test]
    fn zero_weights_emit_bias() {
        let s = spec(&[3, 2], Activation::Identity);
        let params = ParamVector(vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.5, -2.0]);
        assert_eq!(mlp_forward(&s, &params, &[9.0, -1.0, 4.0]).unwrap(), vec![1.5, -2.0]);
    }

    #[test]
    fn identity_layer_passes_input() {
        let s = spec(&[2, 2], Activation::Identity);
        let params = ParamVector(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(mlp_forward(&s, &params, &[0.3, -7.0]).unwrap(), vec![0.3, -7.0]);
    }

    #[test]
    fn matches_naive_matmul() {
        let mut rng = SeededRng::new(11);
        for act in [Activation::Relu, Activation::Tanh] {
            let s = spec(&[4, 7, 5, 3], act);
            let p = s.init(&mut rng);
            let mut p = p;
            for v in p.as_mut_slice() {
                *v += 0.1 * rng.normal();
            }
            let x = rng.standard_normal(4);
            let got = mlp_forward(&s, &p, &x).unwrap();
            let want = naive_forward(&s.layer_widths, &s.activations, p.as_slice(), &x);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let s = spec(&[2, 3], Activation::Identity);
        let p = ParamVector::zeros(s.param_count());
        assert!(mlp_forward(&s, &p, &[1.0]).is_err());
        assert!(mlp_forward(&s, &ParamVector::zeros(2), &[1.0, 2.0]).is_err());
        assert!(backprop(&s, &p, &[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let s = spec(&[3, 4, 2], Activation::Tanh);
        let p = s.init(&mut SeededRng::new(2));
        let (g, gi) = backprop(&s, &p, &[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
        assert!(gi.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_layer_outer_product() {
        let s = spec(&[3, 1], Activation::Identity);
        let p = ParamVector(vec![0.5, -1.0, 2.0, 0.1]);
        let x = [1.0, 2.0, -3.0];
        let (g, gi) = backprop(&s, &p, &x, &[2.0]).unwrap();
        assert_eq!(&g.as_slice()[..3], &[2.0, 4.0, -6.0]);
        assert_eq!(g.as_slice()[3], 2.0);
        assert_eq!(gi, vec![1.0, -2.0, 4.0]);
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut st = AdamState::new(3, AdamConfig::default());
        let mut p = vec![1.0, -2.0, 3.0];
        st.update(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn adam_first_step_scalar() {
        let cfg = AdamConfig::with_lr(0.1);
        let eps = cfg.eps;
        let st = AdamState::new(1, cfg);
        let (p, st2) = adam_step(&st, &ParamVector(vec![0.0]), &ParamVector(vec![1.0])).unwrap();
        // m_hat = 1, v_hat = 1 after bias correction
        let want = -0.1 * 1.0 / (1.0 + eps);
        assert!((p.0[0] - want).abs() < 1e-15);
        assert_eq!(st2.step_count, 1);
        let (p_again, st_again) =
            adam_step(&st, &ParamVector(vec![0.0]), &ParamVector(vec![1.0])).unwrap();
        assert_eq!(p_again, p);
        assert_eq!(st_again, st2);
    }

    #[test]
    fn adam_rejects_bad_gradients() {
        let mut st = AdamState::new(2, AdamConfig::default());
        let mut p = vec![1.0, 1.0];
        assert!(matches!(
            st.update(&mut p, &[0.5, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(st.step_count, 0);
        assert_eq!(p, vec![1.0, 1.0]);
        assert!(st.update(&mut p, &[0.5]).is_err());
    }
}
