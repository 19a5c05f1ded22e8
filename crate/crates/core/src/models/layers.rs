use rand::Rng;

use crate::autodiff::{BatchStats, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: the tape, the weights it reads, and the batch-norm
/// statistics collected in training mode.
pub struct Pass<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub mode: Mode,
    pub bn_updates: Vec<(BatchNorm, BatchStats)>,
}

impl<'a> Pass<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            tape,
            store,
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }
}

/// Folds collected batch statistics into the running buffers.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[(BatchNorm, BatchStats)]) {
    for (bn, st) in updates {
        let m = BN_MOMENTUM;
        for (r, v) in store.get_mut(bn.running_mean).value.data_mut().iter_mut().zip(&st.mean) {
            *r = (1.0 - m) * *r + m * v;
        }
        for (r, v) in store.get_mut(bn.running_var).value.data_mut().iter_mut().zip(&st.var) {
            *r = (1.0 - m) * *r + m * v;
        }
    }
}

pub(crate) fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
}

/// `1×k` convolution over `[B,C,H,W]`, He-uniform initialised.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        bias: bool,
    ) -> Result<Self> {
        let bound = (6.0 / (cin * k) as f64).sqrt();
        let weight = store.register(&format!("{name}.w"), uniform(rng, &[cout, cin, 1, k], bound)?, true)?;
        let bias = if bias {
            Some(store.register(&format!("{name}.b"), Tensor::zeros(&[cout])?, true)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, pass: &mut Pass, x: Var) -> Result<Var> {
        let w = pass.param(self.weight);
        let b = self.bias.map(|b| pass.param(b));
        pass.tape.conv2d_1xk(x, w, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.register(&format!("{name}.gamma"), Tensor::full(&[c], 1.0)?, true)?,
            beta: store.register(&format!("{name}.beta"), Tensor::zeros(&[c])?, true)?,
            running_mean: store.register(&format!("{name}.running_mean"), Tensor::zeros(&[c])?, false)?,
            running_var: store.register(&format!("{name}.running_var"), Tensor::full(&[c], 1.0)?, false)?,
        })
    }

    pub fn forward(&self, pass: &mut Pass, x: Var) -> Result<Var> {
        let g = pass.param(self.gamma);
        let b = pass.param(self.beta);
        match pass.mode {
            Mode::Train => {
                let (y, st) = pass.tape.batch_norm_train(x, g, b, BN_EPS)?;
                pass.bn_updates.push((*self, st));
                Ok(y)
            }
            Mode::Eval => {
                let rm = pass.store.get(self.running_mean).value.data();
                let rv = pass.store.get(self.running_var).value.data();
                pass.tape.batch_norm_eval(x, g, b, rm, rv, BN_EPS)
            }
        }
    }
}

/// Fully connected `[B,I] → [B,O]`.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        din: usize,
        dout: usize,
    ) -> Result<Self> {
        let bound = (6.0 / din as f64).sqrt();
        Ok(Self {
            weight: store.register(&format!("{name}.w"), uniform(rng, &[din, dout], bound)?, true)?,
            bias: store.register(&format!("{name}.b"), Tensor::zeros(&[dout])?, true)?,
        })
    }

    pub fn forward(&self, pass: &mut Pass, x: Var) -> Result<Var> {
        let w = pass.param(self.weight);
        let b = pass.param(self.bias);
        pass.tape.linear(x, w, Some(b))
    }
}
