use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numcore::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng::normal_vec;

/// Affine map `x W + b` on row vectors, weights stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

pub enum Init {
    Zeros,
    /// Gaussian with sd `gain / sqrt(fan_in)`.
    Scaled(f64),
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let data = match init {
            Init::Zeros => vec![0.0; fan_in * fan_out],
            Init::Scaled(gain) => {
                let sd = gain / (fan_in.max(1) as f64).sqrt();
                normal_vec(rng, fan_in * fan_out).into_iter().map(|v| v * sd).collect()
            }
        };
        let w = store.add(
            format!("{name}.w"),
            Tensor::matrix(fan_in, fan_out, data).expect("sized"),
        );
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out])));
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    /// Like [`forward`](Self::forward) with the weights multiplied by a fixed mask.
    pub fn forward_masked(&self, g: &mut Graph, store: &ParamStore, x: Var, mask: &Tensor) -> Result<Var> {
        let w = g.param(store, self.w);
        let m = g.constant(mask.clone());
        let wm = g.mul(w, m)?;
        let y = g.matmul(x, wm)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}
