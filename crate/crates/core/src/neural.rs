//! A small dense feed-forward network with exact reverse-mode gradients.
//!
//! Batches are row-major: an input of shape `(n, in)` produces `(n, out)`.
//! Layer weights are stored `(out, in)` so a layer computes `x W^T + b`.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
    Sigmoid,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Tanh => z.mapv_inplace(f64::tanh),
            Activation::Identity => {}
            Activation::Sigmoid => z.mapv_inplace(|t| {
                if t >= 0.0 {
                    1.0 / (1.0 + (-t).exp())
                } else {
                    let e = t.exp();
                    e / (1.0 + e)
                }
            }),
        }
    }

    /// Derivative expressed through the activation's output `a`.
    fn grad_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
            Activation::Sigmoid => a * (1.0 - a),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self { inputs, outputs, activation }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn inputs(&self) -> usize {
        self.w.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.w.nrows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Layer inputs and outputs from one forward pass: `activations[0]` is the
/// network input and `activations[l + 1]` the output of layer `l`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("cache holds the input at least")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
    pub d_input: Array2<f64>,
}

impl Gradients {
    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|g| g.w.iter().chain(g.b.iter()))
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn init(shape: &[LayerSpec], seed: u64) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Shape("network needs at least one layer".into()));
        }
        let mut rng = rng::seeded(seed);
        let mut layers = Vec::with_capacity(shape.len());
        for (l, spec) in shape.iter().enumerate() {
            if spec.inputs == 0 || spec.outputs == 0 {
                return Err(Error::Shape(format!("layer {l} has zero width")));
            }
            if l > 0 && shape[l - 1].outputs != spec.inputs {
                return Err(Error::Shape(format!(
                    "layer {l} expects {} inputs but layer {} emits {}",
                    spec.inputs,
                    l - 1,
                    shape[l - 1].outputs
                )));
            }
            let limit = (6.0 / (spec.inputs + spec.outputs) as f64).sqrt();
            let w = Array2::from_shape_simple_fn((spec.outputs, spec.inputs), || rng.random_range(-limit..limit));
            layers.push(Layer { w, b: Array1::zeros(spec.outputs), activation: spec.activation });
        }
        Ok(Self { layers })
    }

    /// Hidden `tanh` layers of the given widths followed by one output layer.
    pub fn with_hidden(inputs: usize, hidden: &[usize], outputs: usize, head: Activation, seed: u64) -> Result<Self> {
        let mut shape = Vec::with_capacity(hidden.len() + 1);
        let mut prev = inputs;
        for &h in hidden {
            shape.push(LayerSpec::new(prev, h, Activation::Tanh));
            prev = h;
        }
        shape.push(LayerSpec::new(prev, outputs, head));
        Self::init(&shape, seed)
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map_or(0, Layer::outputs)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<ForwardCache> {
        if x.ncols() != self.inputs() {
            return Err(Error::Shape(format!("input has {} columns, network expects {}", x.ncols(), self.inputs())));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_owned());
        for layer in &self.layers {
            let prev = activations.last().expect("non-empty");
            let mut z = prev.dot(&layer.w.t());
            z += &layer.b;
            layer.activation.apply(&mut z);
            activations.push(z);
        }
        Ok(ForwardCache { activations })
    }

    /// Network output only.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut cache = self.forward(x)?;
        Ok(cache.activations.pop().expect("non-empty"))
    }

    /// Reverse-mode gradients of a scalar loss given `d_out = dL/d(output)`.
    pub fn backward(&self, cache: &ForwardCache, d_out: ArrayView2<f64>) -> Result<Gradients> {
        if cache.activations.len() != self.layers.len() + 1 {
            return Err(Error::Shape("cache does not match network depth".into()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let (a_in, a_out) = (&cache.activations[l], &cache.activations[l + 1]);
            if a_in.ncols() != layer.inputs() || a_out.ncols() != layer.outputs() {
                return Err(Error::Shape(format!("cache layer {l} has stale shape")));
            }
        }
        if d_out.dim() != cache.output().dim() {
            return Err(Error::Shape(format!(
                "output gradient shape {:?} does not match output {:?}",
                d_out.dim(),
                cache.output().dim()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = d_out.to_owned();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let a_out = &cache.activations[l + 1];
            if layer.activation != Activation::Identity {
                Zip::from(&mut delta).and(a_out).for_each(|d, &a| *d *= layer.activation.grad_from_output(a));
            }
            let a_in = &cache.activations[l];
            let gw = delta.t().dot(a_in);
            let gb = delta.sum_axis(Axis(0));
            let next = delta.dot(&layer.w);
            grads.push(LayerGrad { w: gw, b: gb });
            delta = next;
        }
        grads.reverse();
        Ok(Gradients { layers: grads, d_input: delta })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn sgd(lr: f64) -> Self {
        Optimizer::Sgd { lr }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Optimizer::Sgd { lr } | Optimizer::Adam { lr, .. } => lr,
        }
    }
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::adam(1e-3)
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub method: Optimizer,
    m: Vec<LayerGrad>,
    v: Vec<LayerGrad>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(method: Optimizer, net: &Mlp) -> Result<Self> {
        if !(method.lr() > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", method.lr())));
        }
        let zeros = || {
            net.layers
                .iter()
                .map(|l| LayerGrad { w: Array2::zeros(l.w.raw_dim()), b: Array1::zeros(l.b.raw_dim()) })
                .collect::<Vec<_>>()
        };
        let (m, v) = match method {
            Optimizer::Adam { .. } => (zeros(), zeros()),
            Optimizer::Sgd { .. } => (Vec::new(), Vec::new()),
        };
        Ok(Self { method, m, v, t: 0 })
    }
}

/// Apply one optimizer update in place. Parameters are untouched when any
/// gradient entry is non-finite.
pub fn step(net: &mut Mlp, grads: &Gradients, state: &mut OptimizerState) -> Result<()> {
    if grads.layers.len() != net.layers.len() {
        return Err(Error::Shape("gradient depth does not match network".into()));
    }
    for (l, (g, layer)) in grads.layers.iter().zip(&net.layers).enumerate() {
        if g.w.dim() != layer.w.dim() || g.b.dim() != layer.b.dim() {
            return Err(Error::Shape(format!("gradient shape mismatch in layer {l}")));
        }
        if !g.w.iter().chain(g.b.iter()).all(|v| v.is_finite()) {
            return Err(Error::Divergence { layer: l });
        }
    }
    match state.method {
        Optimizer::Sgd { lr } => {
            for (layer, g) in net.layers.iter_mut().zip(&grads.layers) {
                layer.w.scaled_add(-lr, &g.w);
                layer.b.scaled_add(-lr, &g.b);
            }
        }
        Optimizer::Adam { lr, beta1, beta2, eps } => {
            state.t += 1;
            let t = state.t as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            for (l, (layer, g)) in net.layers.iter_mut().zip(&grads.layers).enumerate() {
                let (m, v) = (&mut state.m[l], &mut state.v[l]);
                Zip::from(&mut layer.w).and(&mut m.w).and(&mut v.w).and(&g.w).for_each(|p, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
                Zip::from(&mut layer.b).and(&mut m.b).and(&mut v.b).and(&g.b).for_each(|p, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
            }
        }
    }
    Ok(())
}

/// Mean binary cross-entropy of sigmoid outputs and its gradient w.r.t. them.
pub fn bce_loss(p: ArrayView2<f64>, y: &[f64]) -> (f64, Array2<f64>) {
    const CLIP: f64 = 1e-12;
    let n = y.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(p.raw_dim());
    for (i, &t) in y.iter().enumerate() {
        let q = p[[i, 0]].clamp(CLIP, 1.0 - CLIP);
        loss -= t * q.ln() + (1.0 - t) * (1.0 - q).ln();
        grad[[i, 0]] = (q - t) / (q * (1.0 - q)) / n;
    }
    (loss / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, s};
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_input(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut r = rng::seeded(seed);
        Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(&mut r))
    }

    #[test]
    fn init_shapes_and_determinism() {
        let spec = [LayerSpec::new(20, 30, Activation::Tanh)];
        let a = Mlp::init(&spec, 5).unwrap();
        assert_eq!(a.layers[0].w.dim(), (30, 20));
        assert_eq!(a.layers[0].b.len(), 30);
        assert!(a.layers[0].b.iter().all(|&b| b == 0.0));
        assert_eq!(a, Mlp::init(&spec, 5).unwrap());
        assert_ne!(a, Mlp::init(&spec, 6).unwrap());
        assert!(matches!(Mlp::init(&[LayerSpec::new(3, 0, Activation::Tanh)], 0), Err(Error::Shape(_))));
        let chained = [LayerSpec::new(3, 4, Activation::Tanh), LayerSpec::new(5, 1, Activation::Identity)];
        assert!(matches!(Mlp::init(&chained, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn forward_special_cases() {
        let mut net = Mlp::init(&[LayerSpec::new(3, 2, Activation::Tanh)], 1).unwrap();
        net.layers[0].w.fill(0.0);
        let out = net.predict(array![[1.0, -2.0, 3.0]].view()).unwrap();
        assert_eq!(out, array![[0.0, 0.0]]);

        let mut lin = Mlp::init(&[LayerSpec::new(2, 2, Activation::Identity)], 1).unwrap();
        lin.layers[0].w = array![[1.0, 2.0], [3.0, 4.0]];
        lin.layers[0].b = array![0.5, -0.5];
        assert_eq!(lin.predict(array![[1.0, 1.0]].view()).unwrap(), array![[3.5, 6.5]]);
        assert!(matches!(lin.forward(array![[1.0]].view()), Err(Error::Shape(_))));
    }

    #[test]
    fn batch_matches_rows() {
        let net = Mlp::with_hidden(4, &[6, 5], 2, Activation::Sigmoid, 3).unwrap();
        let x = random_input(2, 4, 8);
        let batch = net.predict(x.view()).unwrap();
        for i in 0..2 {
            let single = net.predict(x.slice(s![i..i + 1, ..])).unwrap();
            for j in 0..2 {
                assert!((single[[0, j]] - batch[[i, j]]).abs() < 1e-15);
            }
        }
        assert_eq!(batch, net.predict(x.view()).unwrap());
    }

    #[test]
    fn zero_upstream_gradient() {
        let net = Mlp::with_hidden(3, &[4], 2, Activation::Identity, 2).unwrap();
        let x = random_input(5, 3, 1);
        let cache = net.forward(x.view()).unwrap();
        let g = net.backward(&cache, Array2::zeros((5, 2)).view()).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        assert!(g.d_input.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_squared_loss_closed_form() {
        let net = Mlp::init(&[LayerSpec::new(3, 2, Activation::Identity)], 4).unwrap();
        let x = array![[0.5, -1.0, 2.0]];
        let t = array![[1.0, -1.0]];
        let cache = net.forward(x.view()).unwrap();
        let resid = cache.output() - &t;
        let g = net.backward(&cache, (2.0 * &resid).view()).unwrap();
        let expected = 2.0 * resid.t().dot(&x);
        for (a, b) in g.layers[0].w.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stale_cache_rejected() {
        let a = Mlp::with_hidden(3, &[4], 1, Activation::Identity, 0).unwrap();
        let b = Mlp::with_hidden(3, &[5], 1, Activation::Identity, 0).unwrap();
        let cache = a.forward(random_input(2, 3, 0).view()).unwrap();
        assert!(matches!(b.backward(&cache, Array2::zeros((2, 1)).view()), Err(Error::Shape(_))));
    }

    /// Central differences of `sum(output * weights)` for every parameter.
    fn max_rel_error(net: &Mlp, x: &Array2<f64>, upstream: &Array2<f64>) -> f64 {
        let loss = |n: &Mlp| (n.predict(x.view()).unwrap() * upstream).sum();
        let g = net.backward(&net.forward(x.view()).unwrap(), upstream.view()).unwrap();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for l in 0..net.layers.len() {
            let (rows, cols) = net.layers[l].w.dim();
            let mut check = |get: &dyn Fn(&mut Mlp) -> &mut f64, analytic: f64| {
                let mut plus = net.clone();
                *get(&mut plus) += h;
                let mut minus = net.clone();
                *get(&mut minus) -= h;
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                worst = worst.max(rel);
            };
            for r in 0..rows {
                for c in 0..cols {
                    check(&|n: &mut Mlp| &mut n.layers[l].w[[r, c]], g.layers[l].w[[r, c]]);
                }
                check(&|n: &mut Mlp| &mut n.layers[l].b[r], g.layers[l].b[r]);
            }
        }
        worst
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn backprop_matches_finite_differences(
            seed in 0u64..1000,
            depth in 1usize..=3,
            width in 1usize..=40,
            head in prop_oneof![Just(Activation::Identity), Just(Activation::Sigmoid), Just(Activation::Tanh)],
        ) {
            let hidden = vec![width; depth - 1];
            let net = Mlp::with_hidden(4, &hidden, 3, head, seed).unwrap();
            let x = random_input(3, 4, seed + 1);
            let upstream = random_input(3, 3, seed + 2);
            prop_assert!(max_rel_error(&net, &x, &upstream) < 1e-4);
        }
    }

    #[test]
    fn sgd_and_adam_updates() {
        let mut net = Mlp::init(&[LayerSpec::new(1, 1, Activation::Identity)], 0).unwrap();
        let w0 = net.layers[0].w[[0, 0]];
        let ones = Gradients {
            layers: vec![LayerGrad { w: array![[1.0]], b: array![1.0] }],
            d_input: Array2::zeros((0, 1)),
        };
        let mut sgd = OptimizerState::new(Optimizer::sgd(0.01), &net).unwrap();
        step(&mut net, &ones, &mut sgd).unwrap();
        assert!((net.layers[0].w[[0, 0]] - (w0 - 0.01)).abs() < 1e-15);
        assert!((net.layers[0].b[0] + 0.01).abs() < 1e-15);

        let zero = Gradients { layers: vec![LayerGrad { w: array![[0.0]], b: array![0.0] }], d_input: Array2::zeros((0, 1)) };
        let before = net.clone();
        step(&mut net, &zero, &mut sgd).unwrap();
        assert_eq!(net, before);

        for scale in [1e-3, 1.0, 1e3] {
            let mut n = before.clone();
            let mut adam = OptimizerState::new(Optimizer::adam(0.01), &n).unwrap();
            let g = Gradients { layers: vec![LayerGrad { w: array![[scale]], b: array![-scale] }], d_input: Array2::zeros((0, 1)) };
            step(&mut n, &g, &mut adam).unwrap();
            let dw = before.layers[0].w[[0, 0]] - n.layers[0].w[[0, 0]];
            let db = before.layers[0].b[0] - n.layers[0].b[0];
            assert!((dw - 0.01).abs() < 1e-6 && (db + 0.01).abs() < 1e-6, "scale {scale}: {dw} {db}");
        }
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let mut net = Mlp::with_hidden(1, &[2], 1, Activation::Identity, 0).unwrap();
        let cache = net.forward(array![[1.0]].view()).unwrap();
        let mut g = net.backward(&cache, array![[1.0]].view()).unwrap();
        g.layers[1].w[[0, 0]] = f64::NAN;
        let mut st = OptimizerState::new(Optimizer::default(), &net).unwrap();
        let before = net.clone();
        assert!(matches!(step(&mut net, &g, &mut st), Err(Error::Divergence { layer: 1 })));
        assert_eq!(net, before);
    }

    #[test]
    fn learns_separable_toy() {
        let mut r = rng::seeded(21);
        let n = 200;
        let x = Array2::from_shape_simple_fn((n, 2), || r.random_range(-1.0..1.0));
        let y: Vec<f64> = x.rows().into_iter().map(|row| f64::from(u8::from(row[0] + row[1] > 0.0))).collect();
        let mut net = Mlp::with_hidden(2, &[8], 1, Activation::Sigmoid, 1).unwrap();
        let mut st = OptimizerState::new(Optimizer::adam(0.05), &net).unwrap();
        let mut loss = f64::INFINITY;
        for _ in 0..500 {
            let cache = net.forward(x.view()).unwrap();
            let (l, d) = bce_loss(cache.output().view(), &y);
            loss = l;
            let g = net.backward(&cache, d.view()).unwrap();
            step(&mut net, &g, &mut st).unwrap();
        }
        assert!(loss < 0.1, "loss {loss}");
    }
}
