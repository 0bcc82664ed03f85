use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{ParamId, ParamStore, Tape, Var};
use crate::tensor::{Tensor, LAYER_NORM_EPS};

/// Affine parameters of one layer normalisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn init(store: &mut ParamStore, prefix: &str, width: usize) -> Self {
        LayerNormParams {
            gamma: store.register(format!("{prefix}.gamma"), Tensor::full(&[width], 1.0)),
            beta: store.register(format!("{prefix}.beta"), Tensor::zeros(&[width])),
        }
    }

    pub fn apply(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// Inverted dropout driven by its own seeded generator. A rate of zero (or
/// an inactive instance) is the identity.
#[derive(Debug, Clone)]
pub struct Dropout {
    rate: f64,
    active: bool,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Invalid(format!("dropout rate {rate} not in [0, 1)")));
        }
        Ok(Dropout {
            rate,
            active: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Evaluation-mode dropout: always the identity.
    pub fn disabled() -> Self {
        Dropout {
            rate: 0.0,
            active: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn apply(&mut self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        if !self.active || self.rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let mut mask = Tensor::zeros(tape.shape(x));
        for m in mask.data_mut() {
            if self.rng.random::<f64>() < keep {
                *m = 1.0 / keep;
            }
        }
        let mask = tape.constant(mask);
        tape.mul(x, mask)
    }
}

/// `layernorm(y + dropout(sublayer_out))`: the residual wrapper shared by the
/// self-attention and cross-attention layers.
pub fn residual_layernorm(
    tape: &mut Tape<'_>,
    y: Var,
    sublayer_out: Var,
    norm: &LayerNormParams,
    dropout: &mut Dropout,
) -> Result<Var> {
    if tape.shape(y) != tape.shape(sublayer_out) {
        return Err(Error::shape(
            "residual_layernorm",
            tape.shape(y),
            tape.shape(sublayer_out),
        ));
    }
    let dropped = dropout.apply(tape, sublayer_out)?;
    let sum = tape.add(y, dropped)?;
    norm.apply(tape, sum)
}

/// Gaussian weights with standard deviation `1/sqrt(fan_in)`.
pub(crate) fn scaled_normal<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
}
