//! Every shipped network and energy with representative parameters, as
//! scalar functions for gradient auditing.

use std::sync::Arc;

use crate::error::Result;
use crate::macvae::{ConjugateGaussian, Likelihood, LatentVariableModel, PlanarElboFn, PlanarFlowStack};
use crate::numerics::nets::{
    Activation, ClampedNorm, Confined, Constant, Coupling, Identity, Linear, Mlp, NoisePassthrough, Projection, Readout,
};
use crate::numerics::rng::{stream_id, tags};
use crate::numerics::{check_gradient, nets, DiffFn, ParamMap, RandomStream};
use crate::targets::{by_name, REGISTRY};

#[derive(Clone, Debug)]
pub struct ShippedFunction {
    pub name: String,
    pub function: Arc<dyn DiffFn>,
    pub params: ParamMap,
}

fn item(name: &str, function: Arc<dyn DiffFn>, params: ParamMap) -> ShippedFunction {
    ShippedFunction { name: name.to_string(), function, params }
}

/// Vector-valued networks are read out along a fixed random direction.
fn scalar(name: &str, f: Arc<dyn DiffFn>, params: ParamMap, stream: &mut RandomStream) -> ShippedFunction {
    if f.output_dim() == 1 {
        return item(name, f, params);
    }
    let weights = stream.draw_gaussian(f.output_dim());
    item(name, Arc::new(Readout { inner: f, weights }), params)
}

/// The audit list. Parameters are drawn from `seed`.
pub fn shipped_functions(seed: u64) -> Result<Vec<ShippedFunction>> {
    let mut s = RandomStream::new(seed, stream_id(tags::PARAM_INIT, 0));
    let mut out = Vec::new();
    for name in REGISTRY {
        let t = by_name(name)?;
        out.push(item(&format!("target:{name}"), t.function_handle(), t.params().clone()));
    }
    for act in [Activation::Tanh, Activation::Softplus] {
        let mlp = Mlp::new(&[3, 8, 8, 2], act);
        let p = mlp.init(&mut s);
        out.push(scalar(&format!("mlp:{act:?}").to_lowercase(), Arc::new(mlp), p, &mut s));
    }
    let energy = Mlp::new(&[2, 8, 8, 1], Activation::Tanh);
    let p = energy.init(&mut s);
    out.push(item("confined_mlp", Arc::new(Confined { inner: energy, strength: 0.05 }), p));
    let lin = Linear { input: 3, output: 2 };
    let p = nets::init_params(&lin.signature(), &mut s, 1.0);
    out.push(scalar("linear", Arc::new(lin), p, &mut s));
    for (name, c) in [("coupling", Coupling::new(0, 2, 6, 3)), ("coupling_conditional", Coupling::new(2, 3, 6, 3))] {
        let mut p = c.init(&mut s);
        // away from the near-identity initialization
        p.iter_values_mut().for_each(|v| *v += 0.3 * s.gaussian());
        out.push(scalar(name, Arc::new(c), p, &mut s));
    }
    out.push(scalar("identity", Arc::new(Identity { dim: 3 }), ParamMap::new(), &mut s));
    out.push(scalar("noise_passthrough", Arc::new(NoisePassthrough { cond_dim: 1, dim: 2 }), ParamMap::new(), &mut s));
    out.push(item("projection", Arc::new(Projection { dim: 3, index: 1 }), ParamMap::new()));
    out.push(item("clamped_norm", Arc::new(ClampedNorm { dim: 2, cap: 5.0 }), ParamMap::new()));
    out.push(item("constant", Arc::new(Constant { dim: 2, value: 0.5 }), ParamMap::new()));
    let decoder = Mlp::new(&[2, 6, 4], Activation::Tanh);
    for (name, lik) in [
        ("joint:bernoulli", Likelihood::Bernoulli),
        ("joint:categorical", Likelihood::CategoricalOneHot),
        ("joint:gaussian", Likelihood::Gaussian { sigma: 0.7 }),
    ] {
        let p = decoder.init(&mut s);
        let m = LatentVariableModel::new(by_name("standard_normal_2d")?, Arc::new(decoder.clone()), lik, p.clone())?;
        let joint: Arc<dyn DiffFn> = m.joint.clone();
        out.push(item(name, joint, p));
    }
    let conj = ConjugateGaussian::example();
    let model = conj.model()?;
    let stack = PlanarFlowStack { data_dim: conj.data_dim(), latent_dim: conj.latent_dim(), layers: 2 };
    let mut p = stack.init(&mut s);
    p.iter_values_mut().for_each(|v| *v += 0.2 * s.gaussian());
    let eps = s.draw_gaussian(stack.latent_dim);
    out.push(item("planar_elbo", Arc::new(PlanarElboFn { stack, model, eps }), p));
    let gen = conj.exact_posterior_sampler()?;
    out.push(scalar("conjugate_posterior_sampler", Arc::new(Linear { input: 5, output: 2 }), gen.params.clone(), &mut s));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientAudit {
    pub name: String,
    /// Worst relative discrepancy over all points.
    pub worst: f64,
}

/// `check_gradient` at `points` standard-normal inputs per function.
pub fn gradient_audit(seed: u64, points: usize, eps: f64) -> Result<Vec<GradientAudit>> {
    let mut out = Vec::new();
    for (i, f) in shipped_functions(seed)?.into_iter().enumerate() {
        let mut s = RandomStream::new(seed, stream_id(tags::EVALUATION, i as u64));
        let mut worst: f64 = 0.0;
        for _ in 0..points {
            let x = s.draw_gaussian(f.function.input_dim());
            worst = worst.max(check_gradient(f.function.as_ref(), &f.params, &x, eps)?);
        }
        out.push(GradientAudit { name: f.name, worst });
    }
    Ok(out)
}
