//! Small layer building blocks shared by the model components.

use alloc::format;
use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::math;
use crate::params::{ParamId, ParamRegistry};
use crate::tensor::Tensor;

/// `x · W (+ b)` with `W: [fan_in, fan_out]`, initialised uniformly in
/// `±1/sqrt(fan_in)`; the bias starts at zero.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn register<R: Rng + ?Sized>(
        reg: &mut ParamRegistry,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / math::sqrt(fan_in as f64);
        let weight = reg.register(&format!("{name}.weight"), Tensor::uniform(&[fan_in, fan_out], bound, rng))?;
        let bias = if bias { Some(reg.register(&format!("{name}.bias"), Tensor::zeros(&[fan_out]))?) } else { None };
        Ok(Linear { weight, bias, fan_in, fan_out })
    }

    pub fn forward(&self, g: &mut Graph, reg: &ParamRegistry, x: Var) -> Var {
        let w = g.param(reg, self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(reg, b);
                g.add(y, b)
            }
            None => y,
        }
    }
}

/// Two linear layers with a ReLU in between.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn register<R: Rng + ?Sized>(
        reg: &mut ParamRegistry,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Mlp {
            hidden: Linear::register(reg, &format!("{name}.0"), input, hidden, true, rng)?,
            output: Linear::register(reg, &format!("{name}.1"), hidden, output, true, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, reg: &ParamRegistry, x: Var) -> Var {
        let h = self.hidden.forward(g, reg, x);
        let h = g.relu(h);
        self.output.forward(g, reg, h)
    }
}

/// Row-wise layer normalisation with learnable gain and bias.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn register(reg: &mut ParamRegistry, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: reg.register(&format!("{name}.gain"), Tensor::full(&[dim], 1.0))?,
            bias: reg.register(&format!("{name}.bias"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, reg: &ParamRegistry, x: Var) -> Var {
        let n = g.layer_norm(x, LAYER_NORM_EPS);
        let gain = g.param(reg, self.gain);
        let scaled = g.mul(n, gain);
        let b = g.param(reg, self.bias);
        g.add(scaled, b)
    }
}
