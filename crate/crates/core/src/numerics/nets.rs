//! Shipped network architectures and scalar test functions.

use super::function::DiffFn;
use super::graph::{Graph, Var};
use super::mat::Mat;
use super::params::{ParamMap, ParamSpec};
use super::rng::RandomStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Softplus,
}

impl Activation {
    fn apply(self, g: &Graph, a: Var) -> Var {
        match self {
            Activation::Tanh => g.tanh(a),
            Activation::Relu => g.relu(a),
            Activation::Softplus => g.softplus(a),
        }
    }

    /// Elementwise derivative at pre-activation `a`, given `h = act(a)`.
    fn derivative(self, g: &Graph, a: Var, h: Var) -> Var {
        match self {
            Activation::Tanh => g.offset(g.neg(g.square(h)), 1.0),
            Activation::Relu => g.constant(g.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 })),
            Activation::Softplus => g.sigmoid(a),
        }
    }
}

/// Weights `N(0, gain²/fan_in)`, everything else zero. Entries whose name
/// ends in `weight` are treated as weights with fan-in equal to their first
/// dimension.
pub fn init_params(signature: &[ParamSpec], stream: &mut RandomStream, gain: f64) -> ParamMap {
    ParamMap::from_fn(signature, |spec, _| {
        if spec.name.ends_with("weight") {
            let fan_in = spec.shape.first().copied().unwrap_or(1).max(1) as f64;
            gain * stream.gaussian() / fan_in.sqrt()
        } else {
            0.0
        }
    })
}

/// The identity map on `dim` coordinates.
#[derive(Clone, Debug)]
pub struct Identity {
    pub dim: usize,
}

impl DiffFn for Identity {
    fn signature(&self) -> Vec<ParamSpec> {
        Vec::new()
    }
    fn input_dim(&self) -> usize {
        self.dim
    }
    fn output_dim(&self) -> usize {
        self.dim
    }
    fn forward(&self, _g: &Graph, _p: &[Var], input: Var) -> Var {
        input
    }
}

/// Generator input `condition ⊕ noise ↦ noise`: ignores the condition.
#[derive(Clone, Debug)]
pub struct NoisePassthrough {
    pub cond_dim: usize,
    pub dim: usize,
}

impl DiffFn for NoisePassthrough {
    fn signature(&self) -> Vec<ParamSpec> {
        Vec::new()
    }
    fn input_dim(&self) -> usize {
        self.cond_dim + self.dim
    }
    fn output_dim(&self) -> usize {
        self.dim
    }
    fn forward(&self, g: &Graph, _p: &[Var], input: Var) -> Var {
        g.slice_cols(input, self.cond_dim, self.dim)
    }
}

/// `y = x·W + b` with `W` of shape `[input, output]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub input: usize,
    pub output: usize,
}

impl DiffFn for Linear {
    fn signature(&self) -> Vec<ParamSpec> {
        vec![ParamSpec::new("weight", &[self.input, self.output]), ParamSpec::new("bias", &[self.output])]
    }
    fn input_dim(&self) -> usize {
        self.input
    }
    fn output_dim(&self) -> usize {
        self.output
    }
    fn forward(&self, g: &Graph, p: &[Var], input: Var) -> Var {
        g.add_row(g.matmul(input, p[0]), p[1])
    }
    fn input_gradient(&self, g: &Graph, p: &[Var], input: Var) -> Option<Var> {
        if self.output != 1 {
            return None;
        }
        let n = g.shape(input).0;
        Some(g.matmul(g.constant(Mat::filled(n, 1, 1.0)), g.transpose(p[0])))
    }
}

/// Fully connected network; `dims = [in, h₁, …, out]`, activation on every
/// hidden layer, linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub dims: Vec<usize>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(dims: &[usize], activation: Activation) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        Self { dims: dims.to_vec(), activation }
    }

    pub fn init(&self, stream: &mut RandomStream) -> ParamMap {
        init_params(&self.signature(), stream, 1.0)
    }

    fn layers(&self) -> usize {
        self.dims.len() - 1
    }
}

impl DiffFn for Mlp {
    fn signature(&self) -> Vec<ParamSpec> {
        (0..self.layers())
            .flat_map(|l| {
                [
                    ParamSpec::new(format!("layer{l}.weight"), &[self.dims[l], self.dims[l + 1]]),
                    ParamSpec::new(format!("layer{l}.bias"), &[self.dims[l + 1]]),
                ]
            })
            .collect()
    }
    fn input_dim(&self) -> usize {
        self.dims[0]
    }
    fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }
    fn forward(&self, g: &Graph, p: &[Var], input: Var) -> Var {
        let mut h = input;
        for l in 0..self.layers() {
            h = g.add_row(g.matmul(h, p[2 * l]), p[2 * l + 1]);
            if l + 1 < self.layers() {
                h = self.activation.apply(g, h);
            }
        }
        h
    }
    fn input_gradient(&self, g: &Graph, p: &[Var], input: Var) -> Option<Var> {
        if self.output_dim() != 1 {
            return None;
        }
        let mut pre = Vec::new();
        let mut post = Vec::new();
        let mut h = input;
        for l in 0..self.layers() - 1 {
            let a = g.add_row(g.matmul(h, p[2 * l]), p[2 * l + 1]);
            h = self.activation.apply(g, a);
            pre.push(a);
            post.push(h);
        }
        let n = g.shape(input).0;
        let mut delta = g.constant(Mat::filled(n, 1, 1.0));
        for l in (0..self.layers()).rev() {
            delta = g.matmul(delta, g.transpose(p[2 * l]));
            if l > 0 {
                delta = g.mul(delta, self.activation.derivative(g, pre[l - 1], post[l - 1]));
            }
        }
        Some(delta)
    }
}

/// `f(x) − strength·‖x‖²`: a scalar network with a quadratic confinement
/// term, so that `e^f` stays integrable however the network is trained.
#[derive(Clone, Debug)]
pub struct Confined<F> {
    pub inner: F,
    pub strength: f64,
}

impl<F: DiffFn> DiffFn for Confined<F> {
    fn signature(&self) -> Vec<ParamSpec> {
        self.inner.signature()
    }
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn forward(&self, g: &Graph, p: &[Var], input: Var) -> Var {
        let f = self.inner.forward(g, p, input);
        g.sub(f, g.scale(g.sum_cols(g.square(input)), self.strength))
    }
    fn input_gradient(&self, g: &Graph, p: &[Var], input: Var) -> Option<Var> {
        let inner = self.inner.input_gradient(g, p, input)?;
        Some(g.sub(inner, g.scale(input, 2.0 * self.strength)))
    }
}

/// Conditional invertible generator built from affine coupling layers.
///
/// Input is `condition ⊕ noise`; the map `noise ↦ output` at a fixed
/// condition is a bijection of `ℝ^dim` with a triangular Jacobian. Each layer
/// rescales and shifts one half of the coordinates using an MLP of the other
/// half and the condition; log-scales are bounded by `scale_bound·tanh(·)`.
/// A final learned elementwise affine map sets the overall location and
/// scale.
#[derive(Clone, Debug)]
pub struct Coupling {
    pub cond_dim: usize,
    pub dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub scale_bound: f64,
}

impl Coupling {
    pub fn new(cond_dim: usize, dim: usize, hidden: usize, layers: usize) -> Self {
        assert!(dim >= 1);
        Self { cond_dim, dim, hidden, layers, scale_bound: 2.0 }
    }

    /// (kept columns, transformed columns) for layer `l`.
    fn split(&self, l: usize) -> (Vec<usize>, Vec<usize>) {
        if self.dim == 1 {
            return (vec![], vec![0]);
        }
        let half = self.dim / 2;
        let (lo, hi): (Vec<_>, Vec<_>) = ((0..half).collect(), (half..self.dim).collect());
        if l.is_multiple_of(2) {
            (lo, hi)
        } else {
            (hi, lo)
        }
    }

    /// Parameters near the identity map: small output weights, unit scale.
    pub fn init(&self, stream: &mut RandomStream) -> ParamMap {
        let sig = self.signature();
        let mut p = init_params(&sig, stream, 1.0);
        for e in p.entries_mut() {
            if e.name.ends_with("out.weight") {
                e.values.iter_mut().for_each(|v| *v *= 0.1);
            }
        }
        p
    }
}

impl DiffFn for Coupling {
    fn signature(&self) -> Vec<ParamSpec> {
        let mut sig = Vec::new();
        for l in 0..self.layers {
            let (keep, change) = self.split(l);
            let inp = keep.len() + self.cond_dim;
            sig.push(ParamSpec::new(format!("coupling{l}.hidden.weight"), &[inp, self.hidden]));
            sig.push(ParamSpec::new(format!("coupling{l}.hidden.bias"), &[self.hidden]));
            sig.push(ParamSpec::new(format!("coupling{l}.out.weight"), &[self.hidden, 2 * change.len()]));
            sig.push(ParamSpec::new(format!("coupling{l}.out.bias"), &[2 * change.len()]));
        }
        sig.push(ParamSpec::new("final.log_scale", &[self.dim]));
        sig.push(ParamSpec::new("final.shift", &[self.dim]));
        sig
    }
    fn input_dim(&self) -> usize {
        self.cond_dim + self.dim
    }
    fn output_dim(&self) -> usize {
        self.dim
    }
    fn forward(&self, g: &Graph, p: &[Var], input: Var) -> Var {
        let cond = (self.cond_dim > 0).then(|| g.slice_cols(input, 0, self.cond_dim));
        let mut cols: Vec<Var> = (0..self.dim).map(|j| g.slice_cols(input, self.cond_dim + j, 1)).collect();
        for l in 0..self.layers {
            let (keep, change) = self.split(l);
            let mut parts: Vec<Var> = keep.iter().map(|&j| cols[j]).collect();
            parts.extend(cond);
            let n = g.shape(input).0;
            let ctx = if parts.is_empty() { g.constant(Mat::zeros(n, 0)) } else { g.concat_all(&parts) };
            let w = &p[4 * l..4 * l + 4];
            let h = g.tanh(g.add_row(g.matmul(ctx, w[0]), w[1]));
            let st = g.add_row(g.matmul(h, w[2]), w[3]);
            let m = change.len();
            let log_s = g.scale(g.tanh(g.scale(g.slice_cols(st, 0, m), 1.0 / self.scale_bound)), self.scale_bound);
            let shift = g.slice_cols(st, m, m);
            for (k, &j) in change.iter().enumerate() {
                let s = g.exp(g.slice_cols(log_s, k, 1));
                cols[j] = g.add(g.mul(cols[j], s), g.slice_cols(shift, k, 1));
            }
        }
        let y = g.concat_all(&cols);
        let base = 4 * self.layers;
        g.add_row(g.mul_row(y, g.exp(p[base])), p[base + 1])
    }
}

/// `ψ(z) = z[index]`, a 1-Lipschitz test function.
#[derive(Clone, Debug)]
pub struct Projection {
    pub dim: usize,
    pub index: usize,
}

impl DiffFn for Projection {
    fn signature(&self) -> Vec<ParamSpec> {
        Vec::new()
    }
    fn input_dim(&self) -> usize {
        self.dim
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn forward(&self, g: &Graph, _p: &[Var], input: Var) -> Var {
        g.slice_cols(input, self.index, 1)
    }
}

/// `ψ(z) = min(‖z‖, cap)`, 1-Lipschitz.
#[derive(Clone, Debug)]
pub struct ClampedNorm {
    pub dim: usize,
    pub cap: f64,
}

impl DiffFn for ClampedNorm {
    fn signature(&self) -> Vec<ParamSpec> {
        Vec::new()
    }
    fn input_dim(&self) -> usize {
        self.dim
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn forward(&self, g: &Graph, _p: &[Var], input: Var) -> Var {
        let excess = g.relu(g.offset(g.neg(g.norm_rows(input)), self.cap));
        g.offset(g.neg(excess), self.cap)
    }
}

/// `f(x)·w`: a fixed linear readout turning a vector-valued network into a
/// scalar one.
#[derive(Clone, Debug)]
pub struct Readout {
    pub inner: std::sync::Arc<dyn DiffFn>,
    pub weights: Vec<f64>,
}

impl DiffFn for Readout {
    fn signature(&self) -> Vec<ParamSpec> {
        self.inner.signature()
    }
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn forward(&self, g: &Graph, p: &[Var], input: Var) -> Var {
        let y = self.inner.forward(g, p, input);
        g.matmul(y, g.constant(Mat::column_vector(self.weights.clone())))
    }
}

/// `ψ(z) = value`.
#[derive(Clone, Debug)]
pub struct Constant {
    pub dim: usize,
    pub value: f64,
}

impl DiffFn for Constant {
    fn signature(&self) -> Vec<ParamSpec> {
        Vec::new()
    }
    fn input_dim(&self) -> usize {
        self.dim
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn forward(&self, g: &Graph, _p: &[Var], input: Var) -> Var {
        // Tie to the input so gradients exist (and are zero).
        let zero = g.scale(g.sum_cols(input), 0.0);
        g.offset(zero, self.value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::function::{check_gradient, evaluate, evaluate_batch, gradient, jacobians};

    #[test]
    fn identity_and_linear() {
        let id = Identity { dim: 2 };
        assert_eq!(evaluate(&id, &ParamMap::new(), &[1.5, -2.0]).unwrap(), vec![1.5, -2.0]);
        let lin = Linear { input: 2, output: 2 };
        let p = ParamMap::new()
            .with("weight", &[2, 2], vec![2.0, 0.0, 0.0, 3.0])
            .unwrap()
            .with("bias", &[2], vec![0.0, 0.0])
            .unwrap();
        assert_eq!(evaluate(&lin, &p, &[1.0, 1.0]).unwrap(), vec![2.0, 3.0]);
    }

    #[test]
    fn signature_errors() {
        let lin = Linear { input: 2, output: 1 };
        let p = ParamMap::zeros(&lin.signature());
        assert!(matches!(evaluate(&lin, &p, &[1.0]), Err(crate::Error::Signature(_))));
        assert!(matches!(evaluate(&lin, &ParamMap::new(), &[1.0, 2.0]), Err(crate::Error::Signature(_))));
        let wide = Linear { input: 2, output: 2 };
        assert!(matches!(
            gradient(&wide, &ParamMap::zeros(&wide.signature()), &[1.0, 2.0]),
            Err(crate::Error::Contract(_))
        ));
    }

    #[test]
    fn constant_has_zero_gradient() {
        let c = Constant { dim: 3, value: 1.25 };
        let g = gradient(&c, &ParamMap::new(), &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(g.value, 1.25);
        assert_eq!(g.input, vec![0.0; 3]);
        assert!(g.params.is_empty());
        assert_eq!(check_gradient(&c, &ParamMap::new(), &[1.0, 2.0, 3.0], 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn mlp_input_gradient_graph_matches_reverse_mode() {
        for act in [Activation::Tanh, Activation::Softplus, Activation::Relu] {
            let mlp = Confined { inner: Mlp::new(&[3, 5, 4, 1], act), strength: 0.1 };
            let mut s = RandomStream::new(1, 2);
            let p = mlp.inner.init(&mut s);
            let x = s.gaussian_mat(4, 3);
            let g = Graph::new();
            let pv = crate::numerics::function::load_params(&g, &p, false);
            let xv = g.constant(x.clone());
            let graph_grad = g.value(mlp.input_gradient(&g, &pv, xv).unwrap());
            let reverse = crate::numerics::function::gradient_batch(&mlp, &p, &x, false).unwrap().input;
            for (a, b) in graph_grad.as_slice().iter().zip(reverse.as_slice()) {
                assert!((a - b).abs() < 1e-12, "{act:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn coupling_is_triangular_and_nonsingular() {
        let c = Coupling::new(1, 2, 8, 4);
        let mut s = RandomStream::new(4, 4);
        let mut p = c.init(&mut s);
        // Push away from the identity so the test is not vacuous.
        p.iter_values_mut().for_each(|v| *v += 0.3 * s.gaussian());
        let x = s.gaussian_mat(5, 3);
        let (_, jac) = jacobians(&c, &p, &x, 1..3).unwrap();
        for j in jac {
            assert!(crate::numerics::linalg::determinant(&j).abs() > 1e-6);
        }
        let y = evaluate_batch(&c, &p, &x).unwrap();
        assert!(y.all_finite());
    }

    #[test]
    fn clamped_norm_values() {
        let f = ClampedNorm { dim: 2, cap: 1.0 };
        assert_eq!(evaluate(&f, &ParamMap::new(), &[0.3, 0.4]).unwrap(), vec![0.5]);
        assert_eq!(evaluate(&f, &ParamMap::new(), &[3.0, 4.0]).unwrap(), vec![1.0]);
    }
}
