use crate::error::Result;

use super::array::Tensor;
use super::params::{ParamId, ParamStore};
use super::rng::Rng;
use super::tape::{Gradients, Tape, Var};

/// A tape paired with the parameter store it reads from, plus optional
/// dropout randomness for training-mode forwards.
pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    dropout: Option<(f64, Rng)>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            params,
            dropout: None,
        }
    }

    /// Enables dropout at `rate` for every [`Graph::dropout`] call.
    pub fn with_dropout(mut self, rate: f64, rng: Rng) -> Self {
        if rate > 0.0 {
            self.dropout = Some((rate, rng));
        }
        self
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(self.params, id)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    /// Inverted dropout; identity when dropout is disabled.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - *rate;
        let shape = self.tape.shape(x).to_vec();
        let n = self.tape.value(x).len();
        let mask = (0..n)
            .map(|_| if rng.uniform(0.0, 1.0) < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = self.tape.constant(Tensor::from_parts_unchecked(shape, mask));
        self.tape.mul(x, m)
    }

    pub fn backward(self, loss: Var) -> Result<Gradients> {
        self.tape.backward(loss)
    }
}
