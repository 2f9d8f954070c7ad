//! Named parameters, their binding onto a tape, and the basic layers.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{relative_error, GradCheckReport, OpKind, Tape, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{term} loss: {source}")]
    Term { term: &'static str, source: TensorError },
}

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Model weights in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, mut t: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(NetError::Config(format!("duplicate parameter name `{name}`")));
        }
        t.requires_grad = true;
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn accumulate_grads(&mut self, grads: &[(ParamId, Vec<f64>)]) {
        for (id, g) in grads {
            self.tensors[id.0].accumulate_grad(g);
        }
    }

    /// Sets every parameter to zero.
    pub fn zero_values(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// A tape with parameters bound on first use.
pub struct Graph<'p> {
    pub tape: Tape,
    store: &'p ParamStore,
    bound: Vec<Option<Var>>,
    track: bool,
}

impl<'p> Graph<'p> {
    /// `track` decides whether parameters receive gradients.
    pub fn new(store: &'p ParamStore, track: bool) -> Self {
        Self { tape: Tape::new(), store, bound: vec![None; store.len()], track }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let mut t = self.store.get(id).clone();
        t.requires_grad = self.track;
        let v = self.tape.leaf(t);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    /// Tape handle of a parameter if it has been used.
    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Gradients of the bound parameters after a backward pass.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| Some((ParamId(i), self.tape.grad((*v)?)?.to_vec())))
            .collect()
    }
}

/// Compares the parameter gradients of the scalar `f` with central
/// differences at `(parameter, element)` samples. `fault` corrupts one
/// backward rule in the analytic pass. `worst` holds the parameter index.
pub fn check_param_grads<F>(store: &ParamStore, f: F, eps: f64, samples: &[(ParamId, usize)], fault: Option<OpKind>) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    check_param_grads_above(store, f, eps, samples, fault, 0.0)
}

/// As [`check_param_grads`], but samples where both the analytic and the
/// numeric gradient are below `floor` are counted as skipped, not scored.
pub fn check_param_grads_above<F>(
    store: &ParamStore,
    f: F,
    eps: f64,
    samples: &[(ParamId, usize)],
    fault: Option<OpKind>,
    floor: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(TensorError::Usage(format!("finite-difference eps {eps} outside [1e-7, 1e-3]")).into());
    }
    let analytic: HashMap<ParamId, Vec<f64>> = {
        let mut g = Graph::new(store, true);
        g.tape.inject_fault(fault);
        let out = f(&mut g)?;
        if g.tape.value(out).numel() != 1 {
            return Err(TensorError::Usage("gradient check needs a scalar-valued function".into()).into());
        }
        g.tape.backward(out)?;
        g.param_grads().into_iter().collect()
    };
    let mut work = store.clone();
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(s, false);
        let out = f(&mut g)?;
        Ok(g.tape.value(out).item())
    };
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), worst_values: (0.0, 0.0), checked: 0, skipped: 0 };
    for &(id, j) in samples {
        let orig = work.get(id).data()[j];
        work.get_mut(id).data_mut()[j] = orig + eps;
        let plus = eval(&work)?;
        work.get_mut(id).data_mut()[j] = orig - eps;
        let minus = eval(&work)?;
        work.get_mut(id).data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        if !numeric.is_finite() {
            return Err(TensorError::Numeric(format!("non-finite finite difference at {}[{j}]", store.name(id))).into());
        }
        let a = analytic.get(&id).map_or(0.0, |g| g[j]);
        if a.abs() < floor && numeric.abs() < floor {
            report.skipped += 1;
            continue;
        }
        let err = relative_error(a, numeric);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = (id.0, j);
            report.worst_values = (a, numeric);
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Seeded weight initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Normal samples redrawn until within two standard deviations.
    pub fn trunc_normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("positive std");
        Tensor::from_fn(shape, |_| loop {
            let v: f64 = dist.sample(&mut self.rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("positive std");
        Tensor::from_fn(shape, |_| dist.sample(&mut self.rng))
    }
}

/// `y = x W + b` over the last axis; `W` is `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = store.add(&format!("{name}.weight"), init.trunc_normal(&[in_dim, out_dim], 0.02))?;
        let bias = Some(store.add(&format!("{name}.bias"), Tensor::zeros(&[out_dim]))?);
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        Ok(g.tape.linear(x, w, b)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self { in_ch, out_ch, kernel, stride, padding, groups: 1 }
    }

    pub fn depthwise(ch: usize, kernel: usize) -> Self {
        Self { in_ch: ch, out_ch: ch, kernel, stride: 1, padding: kernel / 2, groups: ch }
    }
}

/// 2D convolution with bias; weights drawn with std `sqrt(2 / fan_out)`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, spec: ConvSpec) -> Result<Self> {
        if spec.groups == 0 || !spec.in_ch.is_multiple_of(spec.groups) || !spec.out_ch.is_multiple_of(spec.groups) {
            return Err(NetError::Config(format!("{name}: channels {}→{} not divisible by groups {}", spec.in_ch, spec.out_ch, spec.groups)));
        }
        let fan_out = spec.kernel * spec.kernel * spec.out_ch / spec.groups;
        let shape = [spec.out_ch, spec.in_ch / spec.groups, spec.kernel, spec.kernel];
        let weight = store.add(&format!("{name}.weight"), init.normal(&shape, (2.0 / fan_out as f64).sqrt()))?;
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[spec.out_ch]))?;
        Ok(Self { weight, bias, spec })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let s = self.spec;
        Ok(g.tape.conv2d(x, w, Some(b), s.stride, s.padding, s.groups)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(&format!("{name}.weight"), Tensor::full(&[dim], 1.0))?;
        let beta = store.add(&format!("{name}.bias"), Tensor::zeros(&[dim]))?;
        Ok(Self { gamma, beta, eps: 1e-6 })
    }

    /// Normalizes over the last axis.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        Ok(g.tape.layer_norm(x, gm, bt, self.eps)?)
    }

    /// Normalizes over the channel axis of an NCHW map.
    pub fn forward_channels(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let t = g.tape.permute(x, &[0, 2, 3, 1])?;
        let t = self.forward(g, t)?;
        Ok(g.tape.permute(t, &[0, 3, 1, 2])?)
    }
}

/// `[N, C, H, W]` → `[N, H·W, C]`
pub fn map_to_tokens(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.tape.shape(x).to_vec();
    let t = g.tape.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    Ok(g.tape.permute(t, &[0, 2, 1])?)
}

/// `[N, H·W, C]` → `[N, C, H, W]`
pub fn tokens_to_map(g: &mut Graph, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.tape.shape(x).to_vec();
    let t = g.tape.permute(x, &[0, 2, 1])?;
    Ok(g.tape.reshape(t, &[s[0], s[2], h, w])?)
}
