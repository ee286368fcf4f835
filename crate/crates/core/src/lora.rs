//! Plain low-rank weight adaptation, used standalone and as the weight-space
//! half of joint activation+weight adaptation.
//!
//! A frozen weight `w0` (stored `[in, out]`, applied as `y = x w0`) gains a
//! trainable update `scaling * down * up` with `down in R^{in x r}` Gaussian
//! at init and `up in R^{r x out}` zero at init, so the adapted map equals
//! the frozen map until training moves `up`.

use serde::{Deserialize, Serialize};

use crate::nora::{AdapterError, INIT_STD};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::util::rng::{self, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraDelta {
    /// Row-major `[in, r]`.
    down: Vec<f64>,
    /// Row-major `[r, out]`.
    up: Vec<f64>,
    in_dim: usize,
    out_dim: usize,
    rank: usize,
    alpha: f64,
}

impl LoraDelta {
    pub fn init(
        in_dim: usize,
        out_dim: usize,
        rank: usize,
        alpha: f64,
        rng: &mut SeededRng,
    ) -> Result<Self, AdapterError> {
        if rank == 0 {
            return Err(AdapterError::ZeroRank);
        }
        let down = (0..in_dim * rank)
            .map(|_| rng::normal(rng, 0.0, INIT_STD))
            .collect();
        Ok(LoraDelta {
            down,
            up: vec![0.0; rank * out_dim],
            in_dim,
            out_dim,
            rank,
            alpha,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `alpha / r`.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.in_dim, self.out_dim)
    }

    pub fn down(&self) -> &[f64] {
        &self.down
    }

    pub fn up(&self) -> &[f64] {
        &self.up
    }

    pub fn param_count(&self) -> usize {
        self.rank * (self.in_dim + self.out_dim)
    }

    /// Effective weight update `scaling * down * up` as `[in, out]`.
    pub fn weight_update(&self) -> Vec<f64> {
        let s = self.scaling();
        let mut out = vec![0.0; self.in_dim * self.out_dim];
        for i in 0..self.in_dim {
            for k in 0..self.rank {
                let d = self.down[i * self.rank + k];
                if d == 0.0 {
                    continue;
                }
                for j in 0..self.out_dim {
                    out[i * self.out_dim + j] += s * d * self.up[k * self.out_dim + j];
                }
            }
        }
        out
    }

    /// Folds the update into a frozen weight buffer.
    pub fn merge_into(&self, w0: &mut [f64]) {
        debug_assert_eq!(w0.len(), self.in_dim * self.out_dim);
        for (w, u) in w0.iter_mut().zip(self.weight_update()) {
            *w += u;
        }
    }

    /// Adds the low-rank path on a tape: `h + scaling * (x down) up`, leasing
    /// `down`/`up` as trainable leaves under `prefix`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        x: Var,
        base_out: Var,
        prefix: &str,
        pairs: &mut Vec<(String, Var)>,
    ) -> Result<Var, TensorError> {
        let down = tape.input(
            &Tensor::new(vec![self.in_dim, self.rank], self.down.clone())?.requires_grad(true),
        );
        let up = tape.input(
            &Tensor::new(vec![self.rank, self.out_dim], self.up.clone())?.requires_grad(true),
        );
        pairs.push((format!("{prefix}.lora_down"), down));
        pairs.push((format!("{prefix}.lora_up"), up));
        let mid = tape.matmul(x, down)?;
        let outer = tape.matmul(mid, up)?;
        let scaled = tape.scale(outer, self.scaling())?;
        tape.add(base_out, scaled)
    }

    pub(crate) fn for_each_param(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &mut Vec<f64>, Vec<usize>, bool, bool),
    ) {
        let (i, o, r) = (self.in_dim, self.out_dim, self.rank);
        f(
            &format!("{prefix}.lora_down"),
            &mut self.down,
            vec![i, r],
            true,
            true,
        );
        f(
            &format!("{prefix}.lora_up"),
            &mut self.up,
            vec![r, o],
            true,
            true,
        );
    }
}

/// `y = x w0 + scaling * (x down) up` on plain tensors, `x: [rows, in]`.
pub fn lora_forward(
    w0: &Tensor,
    delta: &LoraDelta,
    x: &Tensor,
) -> Result<Tensor, TensorError> {
    let (in_dim, out_dim) = delta.dims();
    if w0.shape() != [in_dim, out_dim] || x.shape().len() != 2 || x.shape()[1] != in_dim {
        return Err(TensorError::ShapeMismatch {
            op: "lora_forward",
            lhs: x.shape().to_vec(),
            rhs: w0.shape().to_vec(),
        });
    }
    let rows = x.shape()[0];
    let update = delta.weight_update();
    let mut out = vec![0.0; rows * out_dim];
    for row in 0..rows {
        for i in 0..in_dim {
            let xv = x.data()[row * in_dim + i];
            if xv == 0.0 {
                continue;
            }
            for j in 0..out_dim {
                out[row * out_dim + j] +=
                    xv * (w0.data()[i * out_dim + j] + update[i * out_dim + j]);
            }
        }
    }
    Tensor::new(vec![rows, out_dim], out)
}
