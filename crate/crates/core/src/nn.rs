//! Parameterised building blocks shared by every module: linear layers,
//! layer norms, convolutions, and the initialiser that registers them.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::diffcore::{Graph, ParamId, ParamStore, Tensor, Var, LAYERNORM_EPS};
use crate::error::Result;

/// Registers freshly initialised parameters under a name prefix.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Runs `f` with `name` appended to the prefix.
    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Init<'_>) -> T) -> T {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let mut child = Init {
            store: self.store,
            rng: self.rng,
            prefix,
        };
        f(&mut child)
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let n = self.full_name(name);
        self.store.add(n, Tensor::full(shape.to_vec(), value))
    }

    /// Uniform on `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn xavier(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> ParamId {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-a..=a)).collect();
        let name = self.full_name(name);
        self.store
            .add(name, Tensor::new(shape.to_vec(), data).expect("shape matches"))
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(self.rng)).collect();
        let name = self.full_name(name);
        self.store
            .add(name, Tensor::new(shape.to_vec(), data).expect("shape matches"))
    }
}

/// `y = x·W + b` over the last axis; `W` is stored `[d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        init.scoped(name, |init| Self {
            w: init.xavier("weight", &[d_in, d_out], d_in, d_out),
            b: bias.then(|| init.constant("bias", &[d_out], 0.0)),
            d_in,
            d_out,
        })
    }

    pub fn forward<'p>(&self, g: &mut Graph<'p>, ps: &'p ParamStore, x: Var) -> Result<Var> {
        let w = g.param(ps, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(ps, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize) -> Self {
        init.scoped(name, |init| Self {
            gamma: init.constant("gamma", &[dim], 1.0),
            beta: init.constant("beta", &[dim], 0.0),
        })
    }

    pub fn forward<'p>(&self, g: &mut Graph<'p>, ps: &'p ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(ps, self.gamma);
        let beta = g.param(ps, self.beta);
        g.layernorm(x, gamma, beta, LAYERNORM_EPS)
    }
}

/// Square-kernel 2-D convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        init.scoped(name, |init| Self {
            w: init.xavier(
                "weight",
                &[c_out, c_in, kernel, kernel],
                c_in * kernel * kernel,
                c_out * kernel * kernel,
            ),
            b: init.constant("bias", &[c_out], 0.0),
            stride,
            pad,
        })
    }

    pub fn forward<'p>(&self, g: &mut Graph<'p>, ps: &'p ParamStore, x: Var) -> Result<Var> {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}
