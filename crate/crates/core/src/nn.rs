//! Two-layer perceptrons (`Linear -> ReLU -> Linear`) with hand-written
//! backward passes, plus the Adam optimizer used for every parameter group.
//!
//! Parameters live in a single flat buffer laid out as `W1, b1, W2, b2`
//! (weights row-major, one row per output unit). Gradients use the same
//! layout so a single [`AdamState`] can track a whole network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SgiError};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub params: Vec<f64>,
}

/// Hidden pre-activations retained by [`Mlp::forward`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub hidden_pre: Vec<f64>,
}

impl Mlp {
    pub fn param_count_for(in_dim: usize, hidden_dim: usize, out_dim: usize) -> usize {
        hidden_dim * in_dim + hidden_dim + out_dim * hidden_dim + out_dim
    }

    /// Uniform `±1/sqrt(fan_in)` weights and zero biases.
    pub fn init(in_dim: usize, hidden_dim: usize, out_dim: usize, seed: u64) -> Result<Self> {
        if in_dim == 0 || hidden_dim == 0 || out_dim == 0 {
            return Err(SgiError::config("mlp dimensions must be positive"));
        }
        let mut mlp = Self::zeros(in_dim, hidden_dim, out_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b1 = 1.0 / (in_dim as f64).sqrt();
        let b2 = 1.0 / (hidden_dim as f64).sqrt();
        let (w1, w2) = (mlp.w1_range(), mlp.w2_range());
        for v in &mut mlp.params[w1] {
            *v = rng.random_range(-b1..=b1);
        }
        for v in &mut mlp.params[w2] {
            *v = rng.random_range(-b2..=b2);
        }
        Ok(mlp)
    }

    pub fn zeros(in_dim: usize, hidden_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            hidden_dim,
            out_dim,
            params: vec![0.0; Self::param_count_for(in_dim, hidden_dim, out_dim)],
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn w1_range(&self) -> std::ops::Range<usize> {
        0..self.hidden_dim * self.in_dim
    }

    pub fn b1_range(&self) -> std::ops::Range<usize> {
        let s = self.hidden_dim * self.in_dim;
        s..s + self.hidden_dim
    }

    pub fn w2_range(&self) -> std::ops::Range<usize> {
        let s = self.b1_range().end;
        s..s + self.out_dim * self.hidden_dim
    }

    pub fn b2_range(&self) -> std::ops::Range<usize> {
        let s = self.w2_range().end;
        s..s + self.out_dim
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        if x.len() != self.in_dim {
            return Err(SgiError::dim(format!(
                "mlp expects {} inputs, got {}",
                self.in_dim,
                x.len()
            )));
        }
        let w1 = &self.params[self.w1_range()];
        let b1 = &self.params[self.b1_range()];
        let w2 = &self.params[self.w2_range()];
        let b2 = &self.params[self.b2_range()];

        let hidden_pre: Vec<f64> = (0..self.hidden_dim)
            .map(|h| {
                let row = &w1[h * self.in_dim..(h + 1) * self.in_dim];
                b1[h] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect();
        let y = (0..self.out_dim)
            .map(|o| {
                let row = &w2[o * self.hidden_dim..(o + 1) * self.hidden_dim];
                b2[o]
                    + row
                        .iter()
                        .zip(&hidden_pre)
                        .map(|(w, &h)| w * h.max(0.0))
                        .sum::<f64>()
            })
            .collect();
        Ok((y, MlpCache { hidden_pre }))
    }

    /// Gradients of `y · dy`; parameter gradients are added into `grads`.
    pub fn backward_into(
        &self,
        x: &[f64],
        cache: &MlpCache,
        dy: &[f64],
        grads: &mut [f64],
    ) -> Result<Vec<f64>> {
        if x.len() != self.in_dim
            || dy.len() != self.out_dim
            || cache.hidden_pre.len() != self.hidden_dim
            || grads.len() != self.params.len()
        {
            return Err(SgiError::dim("mlp backward shape mismatch"));
        }
        let (in_dim, hid) = (self.in_dim, self.hidden_dim);
        let w1 = &self.params[self.w1_range()];
        let w2 = &self.params[self.w2_range()];
        let (w1r, b1r, w2r, b2r) = (self.w1_range(), self.b1_range(), self.w2_range(), self.b2_range());

        let mut dh = vec![0.0; hid];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads[b2r.start + o] += g;
            let row = &w2[o * hid..(o + 1) * hid];
            let grow = &mut grads[w2r.start + o * hid..w2r.start + (o + 1) * hid];
            for h in 0..hid {
                let pre = cache.hidden_pre[h];
                if pre > 0.0 {
                    grow[h] += g * pre;
                    dh[h] += g * row[h];
                }
            }
        }

        let mut dx = vec![0.0; in_dim];
        for h in 0..hid {
            let g = dh[h];
            if g == 0.0 {
                continue;
            }
            grads[b1r.start + h] += g;
            let row = &w1[h * in_dim..(h + 1) * in_dim];
            let grow = &mut grads[w1r.start + h * in_dim..w1r.start + (h + 1) * in_dim];
            for i in 0..in_dim {
                grow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
        Ok(dx)
    }

    pub fn backward(&self, x: &[f64], cache: &MlpCache, dy: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut grads = vec![0.0; self.params.len()];
        let dx = self.backward_into(x, cache, dy, &mut grads)?;
        Ok((dx, grads))
    }

    /// Rounds every parameter through `f32`, matching what [`Mlp::to_bytes`] stores.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.params {
            *v = *v as f32 as f64;
        }
    }

    /// `in, hidden, out` as little-endian `u32`, then `W1, b1, W2, b2` as `f32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.params.len());
        for d in [self.in_dim, self.hidden_dim, self.out_dim] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &p in &self.params {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
        out
    }

    /// Parses one serialized network; returns it with the number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let read_u32 = |at: usize| -> Result<u32> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| SgiError::corrupt("truncated mlp header"))
        };
        let (i, h, o) = (read_u32(0)? as usize, read_u32(4)? as usize, read_u32(8)? as usize);
        if i == 0 || h == 0 || o == 0 || i > 1 << 16 || h > 1 << 16 || o > 1 << 16 {
            return Err(SgiError::corrupt(format!("implausible mlp dims {i}x{h}x{o}")));
        }
        let n = Self::param_count_for(i, h, o);
        let end = 12 + 4 * n;
        let body = bytes
            .get(12..end)
            .ok_or_else(|| SgiError::corrupt("truncated mlp weights"))?;
        let params: Vec<f64> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if params.iter().any(|p| !p.is_finite()) {
            return Err(SgiError::corrupt("non-finite mlp weight"));
        }
        Ok((
            Self {
                in_dim: i,
                hidden_dim: h,
                out_dim: o,
                params,
            },
            end,
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }

    /// One bias-corrected Adam update. Non-finite gradients reject the step
    /// and leave both parameters and state untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(SgiError::dim(format!(
                "adam state tracks {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if !(lr >= 0.0) {
            return Err(SgiError::config(format!("learning rate {lr} must be >= 0")));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(SgiError::numeric(format!("non-finite gradient at index {i}")));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            if lr > 0.0 {
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
