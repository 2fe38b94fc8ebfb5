//! Layer wrappers over the autodiff tape: parameter registration,
//! initialization and the per-pass forward context.

use std::cell::RefCell;
use std::collections::HashMap;

use ndarray::{Array1, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Arr, BufId, ParamId, ParamStore, Tape, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// One forward pass worth of state: caches injected parameter vars so a
/// tensor shared between streams maps to a single tape leaf (weight sharing
/// is structural), and queues running-statistic updates for application after
/// the pass.
pub struct FwdCtx<'a> {
    pub tape: &'a Tape,
    pub store: &'a ParamStore,
    pub train: bool,
    param_vars: RefCell<HashMap<ParamId, Var>>,
    pending: RefCell<Vec<(BufId, Arr)>>,
}

impl<'a> FwdCtx<'a> {
    pub fn new(tape: &'a Tape, store: &'a ParamStore, train: bool) -> Self {
        Self {
            tape,
            store,
            train,
            param_vars: RefCell::new(HashMap::new()),
            pending: RefCell::new(Vec::new()),
        }
    }

    /// Tape leaf for a parameter; injected once per pass. In training mode the
    /// leaf collects gradients, in inference mode it is a plain input.
    pub fn var(&self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.borrow().get(&id) {
            return v;
        }
        let value = self.store.param(id).clone();
        let v = if self.train {
            self.tape.param(id, value)
        } else {
            self.tape.input(value)
        };
        self.param_vars.borrow_mut().insert(id, v);
        v
    }

    pub fn queue_buffer_update(&self, id: BufId, value: Arr) {
        self.pending.borrow_mut().push((id, value));
    }

    /// Consumes the context, releasing its store borrow, and returns the
    /// queued running-statistic updates in recording order.
    pub fn take_buffer_updates(self) -> Vec<(BufId, Arr)> {
        self.pending.into_inner()
    }
}

/// Applies buffer updates collected from a finished pass.
pub fn apply_buffer_updates(store: &mut ParamStore, updates: Vec<(BufId, Arr)>) {
    for (id, value) in updates {
        *store.buffer_mut(id) = value;
    }
}

/// Standard-normal tensor via the Box-Muller transform.
pub fn standard_normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random();
        let r = (-2.0 * u1.ln()).sqrt();
        data.push(r * (2.0 * std::f64::consts::PI * u2).cos());
        if data.len() < n {
            data.push(r * (2.0 * std::f64::consts::PI * u2).sin());
        }
    }
    Arr::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// He-style normal initialization for rectifier layers.
pub fn kaiming_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Arr {
    let std = (2.0 / fan_in as f64).sqrt();
    standard_normal(rng, shape).mapv_into(|v| v * std)
}

pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add_param(
            format!("{name}.weight"),
            kaiming_normal(rng, &[co, ci, k, k], ci * k * k),
        );
        let b = bias.then(|| store.add_param(format!("{name}.bias"), Arr::zeros(IxDyn(&[co]))));
        Self { w, b, stride, pad }
    }

    pub fn forward(&self, ctx: &FwdCtx<'_>, x: Var) -> Var {
        let w = ctx.var(self.w);
        let b = self.b.map(|b| ctx.var(b));
        ctx.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufId,
    pub running_var: BufId,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        Self {
            gamma: store.add_param(format!("{name}.gamma"), Arr::ones(IxDyn(&[c]))),
            beta: store.add_param(format!("{name}.beta"), Arr::zeros(IxDyn(&[c]))),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Arr::zeros(IxDyn(&[c]))),
            running_var: store.add_buffer(format!("{name}.running_var"), Arr::ones(IxDyn(&[c]))),
        }
    }

    pub fn forward(&self, ctx: &FwdCtx<'_>, x: Var) -> Var {
        let gamma = ctx.var(self.gamma);
        let beta = ctx.var(self.beta);
        if ctx.train {
            let (y, mean, var) = ctx.tape.batchnorm_train(x, gamma, beta, BN_EPS);
            let old_mean = to1(ctx.store.buffer(self.running_mean));
            let old_var = to1(ctx.store.buffer(self.running_var));
            let new_mean = &old_mean * (1.0 - BN_MOMENTUM) + &mean * BN_MOMENTUM;
            let new_var = &old_var * (1.0 - BN_MOMENTUM) + &var * BN_MOMENTUM;
            ctx.queue_buffer_update(self.running_mean, new_mean.into_dyn());
            ctx.queue_buffer_update(self.running_var, new_var.into_dyn());
            y
        } else {
            let mean = to1(ctx.store.buffer(self.running_mean));
            let var = to1(ctx.store.buffer(self.running_var));
            ctx.tape.batchnorm_eval(x, gamma, beta, &mean, &var, BN_EPS)
        }
    }
}

fn to1(a: &Arr) -> Array1<f64> {
    a.view()
        .into_dimensionality::<ndarray::Ix1>()
        .unwrap()
        .to_owned()
}

pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        ci: usize,
        co: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            w: store.add_param(format!("{name}.weight"), kaiming_normal(rng, &[co, ci], ci)),
            b: store.add_param(format!("{name}.bias"), Arr::zeros(IxDyn(&[co]))),
        }
    }

    /// `x (N,Ci) -> (N,Co)` with `w (Co,Ci)`.
    pub fn forward(&self, ctx: &FwdCtx<'_>, x: Var) -> Var {
        let y = ctx.tape.matmul_nt(x, ctx.var(self.w));
        ctx.tape.add_bias_rows(y, ctx.var(self.b))
    }
}
