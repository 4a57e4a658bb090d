use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{ParamEntry, ParamId, ParamStore};
use crate::tape::{GeluMode, Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub training: bool,
    pub dropout: f64,
    /// Seeds the dropout stream of this forward pass.
    pub seed: u64,
    pub gelu: GeluMode,
    pub ln_eps: f64,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            training: false,
            dropout: 0.0,
            seed: 0,
            gelu: GeluMode::Tanh,
            ln_eps: 1e-6,
        }
    }
}

/// One forward pass: a private tape with every parameter bound as a leaf.
pub struct Session<T> {
    pub tape: Tape<T>,
    params: Vec<Var>,
    pub(crate) opts: ForwardOptions,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Session<T> {
    pub fn new(
        store: &ParamStore<T>,
        trainable: impl Fn(&ParamEntry<T>) -> bool,
        opts: ForwardOptions,
    ) -> Self {
        let mut tape = Tape::new();
        let params = store
            .entries()
            .iter()
            .map(|e| tape.leaf(e.value.clone(), trainable(e)))
            .collect();
        Self {
            tape,
            params,
            opts,
            rng: ChaCha8Rng::seed_from_u64(opts.seed),
        }
    }

    /// Evaluation-mode session with no gradients.
    pub fn inference(store: &ParamStore<T>, gelu: GeluMode, ln_eps: f64) -> Self {
        Self::new(
            store,
            |_| false,
            ForwardOptions {
                gelu,
                ln_eps,
                ..ForwardOptions::default()
            },
        )
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    pub fn options(&self) -> &ForwardOptions {
        &self.opts
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let ForwardOptions {
            training, dropout, ..
        } = self.opts;
        self.tape.dropout(x, dropout, training, &mut self.rng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.tape.gelu(x, self.opts.gelu)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId) -> Result<Var> {
        let (g, b) = (self.param(gamma), self.param(beta));
        self.tape.layer_norm(x, g, b, self.opts.ln_eps)
    }

    /// `x·W + b` with `W: [in,out]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, weight: ParamId, bias: ParamId) -> Result<Var> {
        let y = self.tape.matmul(x, self.param(weight))?;
        self.tape.add_row_bias(y, self.param(bias))
    }

    /// Parameter gradients in store order, leaving the tape's copies empty.
    pub fn take_param_grads(&mut self) -> Vec<Option<Tensor<T>>> {
        let vars = self.params.clone();
        vars.into_iter().map(|v| self.tape.take_grad(v)).collect()
    }
}
