//! Parameterized layers. Each layer owns only [`ParamId`]s; the tensors live
//! in a [`ParamStore`] so optimizers and checkpoints see one flat namespace.

use rand::Rng;

use crate::error::{AutogradError, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `N(0, std^2)` weights, zero bias.
    Normal(f64),
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for both weights and bias.
    FanIn,
}

fn init_pair<R: Rng + ?Sized>(init: Init, wshape: &[usize], bshape: &[usize], fan_in: usize, rng: &mut R) -> (Tensor, Tensor) {
    match init {
        Init::Normal(std) => (Tensor::randn(wshape, std, rng), Tensor::zeros(bshape)),
        Init::FanIn => {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (Tensor::uniform(wshape, bound, rng), Tensor::uniform(bshape, bound, rng))
        }
    }
}

fn scoped<T>(layer: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        AutogradError::Shape { node, detail } => AutogradError::Shape {
            node: format!("{layer}/{node}"),
            detail,
        },
        other => other,
    })
}

/// `y = x W + b` with `x: [n, d_in]`, `W: [d_in, d_out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    name: String,
    w: ParamId,
    b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, init: Init, rng: &mut R) -> Result<Self> {
        let (w, b) = init_pair(init, &[d_in, d_out], &[d_out], d_in, rng);
        Ok(Self {
            name: name.to_string(),
            w: store.add(&format!("{name}.weight"), w)?,
            b: store.add(&format!("{name}.bias"), b)?,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = scoped(&self.name, g.matmul(x, w))?;
        scoped(&self.name, g.add_row(y, b))
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> ParamId {
        self.b
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    name: String,
    w: ParamId,
    b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let (w, b) = init_pair(init, &[c_out, c_in, kernel, kernel], &[c_out], c_in * kernel * kernel, rng);
        Ok(Self {
            name: name.to_string(),
            w: store.add(&format!("{name}.weight"), w)?,
            b: store.add(&format!("{name}.bias"), b)?,
            stride,
            pad,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        scoped(&self.name, g.conv2d(x, w, Some(b), self.stride, self.pad))
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    name: String,
    w: ParamId,
    b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let (w, b) = init_pair(init, &[c_in, c_out, kernel, kernel], &[c_out], c_in * kernel * kernel, rng);
        Ok(Self {
            name: name.to_string(),
            w: store.add(&format!("{name}.weight"), w)?,
            b: store.add(&format!("{name}.bias"), b)?,
            stride,
            pad,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        scoped(&self.name, g.conv_transpose2d(x, w, Some(b), self.stride, self.pad))
    }
}
