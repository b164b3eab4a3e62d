//! Named parameter storage, per-step graph sessions and the small layers the
//! model is assembled from.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::{DiffError, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Flat, insertion-ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on duplicate names, which would be a model
    /// construction bug.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Zero tensors shaped like every parameter, for gradient accumulation.
    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect()
    }
}

/// Worst relative gradient error found by [`param_gradient_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub worst: f64,
    pub param: String,
    pub coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares parameter gradients of the scalar built by `loss` with central
/// differences. At most `per_param` evenly spaced coordinates of each listed
/// parameter are probed. The error of a coordinate is
/// `|analytic − numeric| / max(|analytic|, |numeric|, floor)`, so `floor`
/// sets the gradient size below which errors count as absolute.
pub fn param_gradient_check<F>(
    store: &ParamStore,
    params: &[ParamId],
    per_param: usize,
    step: f64,
    floor: f64,
    loss: F,
) -> Result<ParamCheck, DiffError>
where
    F: Fn(&mut Session) -> Result<Var, DiffError>,
{
    let mut s = Session::new(store, true);
    let out = loss(&mut s)?;
    s.g.backward(out)?;
    let mut grads = store.zeros_like();
    s.accumulate_grads(&mut grads);

    let value = |probe: &ParamStore| -> Result<f64, DiffError> {
        let mut s = Session::new(probe, false);
        let out = loss(&mut s)?;
        Ok(s.g.value(out).item())
    };
    let mut probe = store.clone();
    let mut report = ParamCheck {
        worst: 0.0,
        param: String::new(),
        coordinate: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for &id in params {
        let n = store.get(id).len();
        let stride = n.div_ceil(per_param.max(1)).max(1);
        for c in (0..n).step_by(stride) {
            let base = store.get(id).data()[c];
            probe.get_mut(id).data_mut()[c] = base + step;
            let up = value(&probe)?;
            probe.get_mut(id).data_mut()[c] = base - step;
            let down = value(&probe)?;
            probe.get_mut(id).data_mut()[c] = base;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads[id.0].data()[c];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if report.checked == 1 || err > report.worst {
                report = ParamCheck {
                    worst: err,
                    param: store.params()[id.0].name.clone(),
                    coordinate: c,
                    analytic,
                    numeric,
                    checked: report.checked,
                };
            }
        }
    }
    Ok(report)
}

/// One forward/backward pass: a fresh graph plus lazily bound parameters.
pub struct Session<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
            trainable,
            dropout: None,
        }
    }

    /// Enables inverted dropout at `rate` for [`Session::dropout`], with
    /// masks drawn from a generator seeded by `seed`.
    pub fn with_dropout(mut self, rate: f64, seed: u64) -> Self {
        if rate > 0.0 {
            self.dropout = Some((rate, ChaCha8Rng::seed_from_u64(seed)));
        }
        self
    }

    /// Zeroes each entry with the configured probability and rescales the
    /// rest by `1/(1-rate)`. Identity when dropout is not enabled.
    pub fn dropout(&mut self, x: Var) -> Result<Var, DiffError> {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - *rate;
        let shape = self.g.shape(x).to_vec();
        let n = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = self.g.constant(Tensor::new(shape, mask)?);
        self.g.mul(x, mask)
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Graph node for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.g.leaf(self.store.get(id).clone(), self.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    /// Adds the gradients of every bound parameter into `acc` (indexed like
    /// the store). Call after [`Graph::backward`].
    pub fn accumulate_grads(&self, acc: &mut [Tensor]) {
        for (slot, bound) in acc.iter_mut().zip(&self.bound) {
            if let Some(grad) = bound.and_then(|v| self.g.grad(v)) {
                for (a, g) in slot.data_mut().iter_mut().zip(grad.data()) {
                    *a += g;
                }
            }
        }
    }

    pub fn is_bound(&self, id: ParamId) -> bool {
        self.bound[id.0].is_some()
    }
}

/// Uniform Glorot initialization for a `fan_in × fan_out` weight.
pub fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("length matches shape")
}

/// `x · W + b` applied row-wise.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), glorot(rng, fan_in, fan_out));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out]));
        Self {
            w,
            b: Some(b),
            fan_in,
            fan_out,
        }
    }

    /// A projection matrix without offset.
    pub fn without_bias(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), glorot(rng, fan_in, fan_out));
        Self {
            w,
            b: None,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var, DiffError> {
        let w = s.param(self.w);
        let y = s.g.matmul(x, w)?;
        match self.b {
            None => Ok(y),
            Some(b) => {
                let b = s.param(b);
                let rows = s.g.shape(y)[0];
                let bb = s.g.broadcast(b, &[rows, self.fan_out])?;
                s.g.add(y, bb)
            }
        }
    }
}

/// Layer normalization over the last axis with learnable scale and offset.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub scale: ParamId,
    pub offset: ParamId,
    pub width: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            scale: store.add(format!("{name}.scale"), Tensor::full(&[1, width], 1.0)),
            offset: store.add(format!("{name}.offset"), Tensor::zeros(&[1, width])),
            width,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var, DiffError> {
        let n = s.g.layernorm_lastdim(x)?;
        let rows = s.g.shape(x)[0];
        let scale = s.param(self.scale);
        let offset = s.param(self.offset);
        let scale = s.g.broadcast(scale, &[rows, self.width])?;
        let offset = s.g.broadcast(offset, &[rows, self.width])?;
        let y = s.g.mul(n, scale)?;
        s.g.add(y, offset)
    }
}
