//! Small parameterized layers shared by the encoder and the tracker.

use crate::params::{Init, ParamId, ParamStore, ParamVars};
use crate::tensor::{Real, Result, Tape, Tensor, Var};

/// Registers freshly initialized parameters under a name prefix.
pub struct Builder<'a, F: Real> {
    pub store: &'a mut ParamStore<F>,
    pub init: &'a mut Init,
}

impl<F: Real> Builder<'_, F> {
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let t = self.init.uniform(shape, bound);
        self.store.push(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        self.store.push(name, Tensor::full(shape.to_vec(), F::of(v)))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<F: Real>(bld: &mut Builder<F>, name: &str, input: usize, output: usize) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let w = bld.uniform(&format!("{name}.w"), &[input, output], bound);
        let b = bld.uniform(&format!("{name}.b"), &[output], bound);
        Self { w, b, input, output }
    }

    /// A linear map whose weights and bias start at exactly zero.
    pub fn zeros<F: Real>(bld: &mut Builder<F>, name: &str, input: usize, output: usize) -> Self {
        let w = bld.constant(&format!("{name}.w"), &[input, output], 0.0);
        let b = bld.constant(&format!("{name}.b"), &[output], 0.0);
        Self { w, b, input, output }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, pv: &ParamVars, x: Var) -> Result<Var> {
        tape.linear(x, pv.get(self.w), pv.get(self.b))
    }
}

/// Two-layer perceptron with a gelu between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<F: Real>(bld: &mut Builder<F>, name: &str, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            fc1: Linear::new(bld, &format!("{name}.fc1"), input, hidden),
            fc2: Linear::new(bld, &format!("{name}.fc2"), hidden, output),
        }
    }

    /// Output layer zero-initialized, so `x + mlp(x)` starts as the identity.
    pub fn residual<F: Real>(bld: &mut Builder<F>, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(bld, &format!("{name}.fc1"), dim, hidden),
            fc2: Linear::zeros(bld, &format!("{name}.fc2"), hidden, dim),
        }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, pv: &ParamVars, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, pv, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, pv, h)
    }
}

/// Layer normalization with learned gain and shift.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new<F: Real>(bld: &mut Builder<F>, name: &str, dim: usize) -> Self {
        Self {
            gamma: bld.constant(&format!("{name}.gamma"), &[dim], 1.0),
            beta: bld.constant(&format!("{name}.beta"), &[dim], 0.0),
        }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, pv: &ParamVars, x: Var) -> Result<Var> {
        let y = tape.layer_norm(x)?;
        let y = tape.mul(y, pv.get(self.gamma))?;
        tape.add(y, pv.get(self.beta))
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new<F: Real>(bld: &mut Builder<F>, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        // He-uniform for relu stacks.
        let fan_in = (cin * k * k) as f64;
        let w = bld.uniform(&format!("{name}.w"), &[cout, cin, k, k], (6.0 / fan_in).sqrt());
        let b = bld.uniform(&format!("{name}.b"), &[cout], 1.0 / fan_in.sqrt());
        Self { w, b, stride, pad: k / 2 }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, pv: &ParamVars, x: Var) -> Result<Var> {
        tape.conv2d(x, pv.get(self.w), pv.get(self.b), self.stride, self.pad)
    }
}
