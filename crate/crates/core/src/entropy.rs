//! Quantization, the binary hash grid, the context model and the rate terms.
//!
//! Each seed's position is looked up in a multiresolution grid of ±1
//! features; a small MLP maps those features to a mean, scale and
//! quantization refinement for each of the four attribute groups. The
//! probability of a quantized value is the Gaussian mass of its
//! quantization interval, and the rate is the sum of `-log2 p`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SgiError};
use crate::model::{AttrGroup, SeedSet};
use crate::nn::{Mlp, MlpCache};

/// Floor applied to predicted scales.
pub const SIGMA_MIN: f64 = 1e-4;
/// Floor applied to symbol probabilities; matches the coder's 16-bit tables.
pub const P_MIN: f64 = 1.0 / 65536.0;
/// Refinement outputs are clamped to this magnitude before `tanh`.
pub const REFINE_CLAMP: f64 = 8.0;
/// Magnitude of the uniform initialization of grid latents.
pub const LATENT_INIT: f64 = 0.1;

const HASH_PRIME_X: u32 = 2_654_435_761;
const HASH_PRIME_Y: u32 = 805_459_861;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridConfig {
    /// Cells along the longer image side, one entry per level, coarse first.
    pub resolutions: Vec<u32>,
    /// Table entries per level.
    pub table_size: u32,
    /// Features per entry.
    pub features: u32,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            resolutions: vec![16, 32, 64, 128],
            table_size: 1 << 14,
            features: 4,
        }
    }
}

impl GridConfig {
    pub fn levels(&self) -> usize {
        self.resolutions.len()
    }

    pub fn feature_len(&self) -> usize {
        self.levels() * self.features as usize
    }

    pub fn entry_count(&self) -> usize {
        self.levels() * self.table_size as usize * self.features as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolutions.is_empty() || self.resolutions.iter().any(|&r| r == 0) {
            return Err(SgiError::config("hash grid needs at least one positive resolution"));
        }
        if self.table_size == 0 || self.features == 0 {
            return Err(SgiError::config("hash grid table size and feature count must be positive"));
        }
        Ok(())
    }
}

#[inline]
pub fn hash_index(x: u32, y: u32, table_size: u32) -> usize {
    ((x.wrapping_mul(HASH_PRIME_X) ^ y.wrapping_mul(HASH_PRIME_Y)) % table_size) as usize
}

/// Multiresolution table of latent reals whose signs are the used ±1 values.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryHashGrid {
    pub config: GridConfig,
    /// Image extent relative to its longer side, `(w, h) / max(w, h)`.
    pub extent: [f64; 2],
    /// `levels × table_size × features`, row-major.
    pub latents: Vec<f64>,
}

/// Corner indices and bilinear weights of one lookup, for the backward pass.
#[derive(Debug, Clone)]
pub struct LookupTrace {
    /// Per level: 4 latent base offsets (entry start) and their weights.
    corners: Vec<([usize; 4], [f64; 4])>,
}

#[inline]
fn binarize(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

impl BinaryHashGrid {
    pub fn new(config: GridConfig, width: usize, height: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let latents = (0..config.entry_count())
            .map(|_| rng.random_range(-LATENT_INIT..LATENT_INIT))
            .collect();
        Ok(Self {
            extent: extent_for(width, height),
            config,
            latents,
        })
    }

    /// Grid with explicit ±1 entries (latent = entry).
    pub fn from_signs(config: GridConfig, width: usize, height: usize, signs: &[bool]) -> Result<Self> {
        config.validate()?;
        if signs.len() != config.entry_count() {
            return Err(SgiError::dim(format!(
                "grid expects {} entries, got {}",
                config.entry_count(),
                signs.len()
            )));
        }
        Ok(Self {
            extent: extent_for(width, height),
            latents: signs.iter().map(|&s| if s { 1.0 } else { -1.0 }).collect(),
            config,
        })
    }

    pub fn signs(&self) -> Vec<bool> {
        self.latents.iter().map(|&v| v >= 0.0).collect()
    }

    pub fn binarized(&self) -> Vec<f64> {
        self.latents.iter().map(|&v| binarize(v)).collect()
    }

    /// `(n1, n0)`: counts of +1 and -1 entries.
    pub fn counts(&self) -> (u64, u64) {
        let n1 = self.latents.iter().filter(|&&v| v >= 0.0).count() as u64;
        (n1, self.latents.len() as u64 - n1)
    }

    /// Bilinear lookup of binarized features; `x_norm` is clamped to `[0, 1]²`.
    pub fn lookup(&self, x_norm: [f64; 2]) -> (Vec<f64>, LookupTrace) {
        let f = self.config.features as usize;
        let t = self.config.table_size;
        let mut out = Vec::with_capacity(self.config.feature_len());
        let mut corners = Vec::with_capacity(self.config.levels());
        let xn = [x_norm[0].clamp(0.0, 1.0), x_norm[1].clamp(0.0, 1.0)];
        for (level, &res) in self.config.resolutions.iter().enumerate() {
            let gx = xn[0] * res as f64 * self.extent[0];
            let gy = xn[1] * res as f64 * self.extent[1];
            let (x0, y0) = (gx.floor(), gy.floor());
            let (fx, fy) = (gx - x0, gy - y0);
            let (x0, y0) = (x0 as u32, y0 as u32);
            let level_base = level * t as usize * f;
            let idx = [
                level_base + hash_index(x0, y0, t) * f,
                level_base + hash_index(x0 + 1, y0, t) * f,
                level_base + hash_index(x0, y0 + 1, t) * f,
                level_base + hash_index(x0 + 1, y0 + 1, t) * f,
            ];
            let w = [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy];
            for k in 0..f {
                let mut acc = 0.0;
                for c in 0..4 {
                    acc += w[c] * binarize(self.latents[idx[c] + k]);
                }
                out.push(acc);
            }
            corners.push((idx, w));
        }
        (out, LookupTrace { corners })
    }

    /// Straight-through backward: binarization is treated as the identity.
    /// Returns sparse `(latent index, gradient)` contributions.
    pub fn lookup_backward(&self, trace: &LookupTrace, d_features: &[f64]) -> Vec<(usize, f64)> {
        let f = self.config.features as usize;
        let mut out = Vec::with_capacity(trace.corners.len() * 4 * f);
        for (level, (idx, w)) in trace.corners.iter().enumerate() {
            for k in 0..f {
                let g = d_features[level * f + k];
                for c in 0..4 {
                    out.push((idx[c] + k, w[c] * g));
                }
            }
        }
        out
    }
}

fn extent_for(width: usize, height: usize) -> [f64; 2] {
    let m = width.max(height).max(1) as f64;
    [width as f64 / m, height as f64 / m]
}

pub fn hash_lookup(grid: &BinaryHashGrid, x_norm: [f64; 2]) -> Vec<f64> {
    grid.lookup(x_norm).0
}

/// Bits bound of the grid: `-n1 log2(n1/n) - n0 log2(n0/n)`, with `0 log 0 = 0`.
pub fn hash_bits(n1: u64, n0: u64) -> f64 {
    let n = (n1 + n0) as f64;
    let term = |k: u64| {
        if k == 0 {
            0.0
        } else {
            -(k as f64) * (k as f64 / n).log2()
        }
    };
    term(n1) + term(n0)
}

pub fn hash_loss(grid: &BinaryHashGrid) -> f64 {
    let (n1, n0) = grid.counts();
    hash_bits(n1, n0)
}

/// Straight-through gradient of [`hash_loss`] with respect to any single latent.
pub fn hash_loss_grad(grid: &BinaryHashGrid) -> f64 {
    let (n1, n0) = grid.counts();
    if n1 == 0 || n0 == 0 {
        return 0.0;
    }
    0.5 * (n0 as f64 / n1 as f64).log2()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub steps: [f64; 4],
}

impl QuantConfig {
    pub fn new(steps: [f64; 4]) -> Result<Self> {
        if steps.iter().any(|q| !(q.is_finite() && *q > 0.0)) {
            return Err(SgiError::config("quantization steps must be positive"));
        }
        Ok(Self { steps })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttributeDistribution {
    pub mean: [f64; 4],
    pub scale: [f64; 4],
    pub refine: [f64; 4],
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    crate::model::sigmoid(x)
}

/// Splits the 12 context outputs into per-group `(μ, σ, r)`.
pub fn distribution_from_raw(raw: &[f64]) -> AttributeDistribution {
    let mut d = AttributeDistribution {
        mean: [0.0; 4],
        scale: [0.0; 4],
        refine: [0.0; 4],
    };
    for j in 0..4 {
        d.mean[j] = raw[j];
        d.scale[j] = softplus(raw[4 + j]).max(SIGMA_MIN);
        d.refine[j] = raw[8 + j];
    }
    d
}

pub fn context_predict(mlp: &Mlp, feature: &[f64]) -> Result<AttributeDistribution> {
    if mlp.out_dim != 12 {
        return Err(SgiError::dim(format!("context mlp must output 12 values, has {}", mlp.out_dim)));
    }
    let (raw, _) = mlp.forward(feature)?;
    Ok(distribution_from_raw(&raw))
}

/// `q = Q (1 + tanh r)`, evaluated as `2Q sigmoid(2r)` with `r` clamped.
#[inline]
pub fn quant_step(base: f64, refine: f64) -> f64 {
    2.0 * base * sigmoid(2.0 * refine.clamp(-REFINE_CLAMP, REFINE_CLAMP))
}

#[inline]
fn quant_step_grad(base: f64, refine: f64) -> f64 {
    if refine.abs() > REFINE_CLAMP {
        return 0.0;
    }
    let s = sigmoid(2.0 * refine);
    4.0 * base * s * (1.0 - s)
}

/// Training-time quantization: additive uniform noise of width `q`.
pub fn quantize_train<R: Rng + ?Sized>(value: f64, q: f64, rng: &mut R) -> f64 {
    value + rng.random_range(-0.5..0.5) * q
}

/// Test-time quantization; the symbol rounds half away from zero.
#[inline]
pub fn quantize_test(value: f64, q: f64) -> (f64, i64) {
    let s = (value / q).round() as i64;
    (s as f64 * q, s)
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

#[inline]
fn normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

/// `Φ(b) - Φ(a)` for `a <= b`, computed on the side that avoids cancellation.
#[inline]
pub fn normal_mass(a: f64, b: f64) -> f64 {
    if a >= 0.0 {
        0.5 * (libm::erfc(a / SQRT_2) - libm::erfc(b / SQRT_2))
    } else {
        normal_cdf(b) - normal_cdf(a)
    }
}

/// Unfloored Gaussian mass of the interval `[center - q/2, center + q/2]`.
#[inline]
pub fn interval_mass(center: f64, mean: f64, sigma: f64, q: f64) -> f64 {
    normal_mass((center - 0.5 * q - mean) / sigma, (center + 0.5 * q - mean) / sigma)
}

/// Probability of `symbol` under `N(μ, σ)` with step `q`, floored at [`P_MIN`].
pub fn symbol_probability(symbol: i64, mean: f64, sigma: f64, q: f64) -> f64 {
    interval_mass(symbol as f64 * q, mean, sigma, q).max(P_MIN)
}

/// Bits of one value and their gradient w.r.t. `(value, μ, σ, q)`.
fn value_bits_grad(v: f64, mean: f64, sigma: f64, q: f64) -> (f64, [f64; 4]) {
    let za = (v - 0.5 * q - mean) / sigma;
    let zb = (v + 0.5 * q - mean) / sigma;
    let p = normal_mass(za, zb);
    if p <= P_MIN {
        return (-P_MIN.log2(), [0.0; 4]);
    }
    let (pa, pb) = (normal_pdf(za), normal_pdf(zb));
    let dp_dv = (pb - pa) / sigma;
    let dp_dq = 0.5 * (pb + pa) / sigma;
    let dp_dsigma = -(pb * zb - pa * za) / sigma;
    let k = -1.0 / (p * std::f64::consts::LN_2);
    (-p.log2(), [k * dp_dv, -k * dp_dv, k * dp_dsigma, k * dp_dq])
}

/// Context model evaluation for one seed.
#[derive(Debug, Clone)]
pub struct SeedContext {
    pub features: Vec<f64>,
    trace: LookupTrace,
    cache: MlpCache,
    raw: Vec<f64>,
    pub dist: AttributeDistribution,
    /// Quantization step per attribute group.
    pub q: [f64; 4],
}

pub fn seed_context(
    grid: &BinaryHashGrid,
    mlp: &Mlp,
    quant: &QuantConfig,
    x_norm: [f64; 2],
) -> Result<SeedContext> {
    if mlp.out_dim != 12 || mlp.in_dim != grid.config.feature_len() {
        return Err(SgiError::dim(format!(
            "context mlp is {}->{}, expected {}->12",
            mlp.in_dim,
            mlp.out_dim,
            grid.config.feature_len()
        )));
    }
    let (features, trace) = grid.lookup(x_norm);
    let (raw, cache) = mlp.forward(&features)?;
    let dist = distribution_from_raw(&raw);
    let q = std::array::from_fn(|j| quant_step(quant.steps[j], dist.refine[j]));
    Ok(SeedContext {
        features,
        trace,
        cache,
        raw,
        dist,
        q,
    })
}

/// Seed position normalized by the current level's image size.
pub fn normalized_position(set: &SeedSet, i: usize) -> [f64; 2] {
    let p = set.position(i);
    [p[0] / set.width as f64, p[1] / set.height as f64]
}

pub fn seed_contexts(
    set: &SeedSet,
    grid: &BinaryHashGrid,
    mlp: &Mlp,
    quant: &QuantConfig,
) -> Result<Vec<SeedContext>> {
    (0..set.len())
        .into_par_iter()
        .map(|i| seed_context(grid, mlp, quant, normalized_position(set, i)))
        .collect()
}

/// Gradient of a loss with respect to one seed's predicted `(μ, σ, q)`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DistGrad {
    pub mean: [f64; 4],
    pub scale: [f64; 4],
    pub q: [f64; 4],
}

#[derive(Debug, Clone)]
pub struct EntropyEval {
    pub bits: f64,
    /// Gradient w.r.t. the evaluated attribute values, shaped like the groups.
    pub d_values: [Vec<f64>; 4],
    pub d_dist: Vec<DistGrad>,
}

/// Bits of continuous attribute values (each coded with the interval of width
/// `q` centered on it), with gradients.
pub fn entropy_eval(values: &SeedSet, contexts: &[SeedContext]) -> Result<EntropyEval> {
    if contexts.len() != values.len() {
        return Err(SgiError::dim("one context per seed required"));
    }
    let per_seed: Vec<(f64, [Vec<f64>; 4], DistGrad)> = (0..values.len())
        .into_par_iter()
        .map(|i| {
            let ctx = &contexts[i];
            let mut bits = 0.0;
            let mut dg = DistGrad::default();
            let dv = AttrGroup::ALL.map(|g| {
                let j = g as usize;
                let (mu, sigma, q) = (ctx.dist.mean[j], ctx.dist.scale[j], ctx.q[j]);
                values
                    .seed_group(g, i)
                    .iter()
                    .map(|&v| {
                        let (b, grad) = value_bits_grad(v, mu, sigma, q);
                        bits += b;
                        dg.mean[j] += grad[1];
                        dg.scale[j] += grad[2];
                        dg.q[j] += grad[3];
                        grad[0]
                    })
                    .collect::<Vec<f64>>()
            });
            (bits, dv, dg)
        })
        .collect();

    let mut out = EntropyEval {
        bits: 0.0,
        d_values: values.zero_attributes(),
        d_dist: Vec::with_capacity(values.len()),
    };
    for (i, (bits, dv, dg)) in per_seed.into_iter().enumerate() {
        out.bits += bits;
        for g in AttrGroup::ALL {
            let d = values.group_dim(g);
            out.d_values[g as usize][i * d..(i + 1) * d].copy_from_slice(&dv[g as usize]);
        }
        out.d_dist.push(dg);
    }
    Ok(out)
}

/// Training-time entropy loss in bits.
pub fn entropy_loss(
    values: &SeedSet,
    grid: &BinaryHashGrid,
    mlp: &Mlp,
    quant: &QuantConfig,
) -> Result<f64> {
    let contexts = seed_contexts(values, grid, mlp, quant)?;
    Ok(entropy_eval(values, &contexts)?.bits)
}

/// Bits of the exactly quantized attributes, as an ideal coder would spend.
///
/// Unlike the training loss this uses the unfloored mass; the guard only
/// keeps the result finite.
pub fn test_time_bits(set: &SeedSet, contexts: &[SeedContext]) -> Result<[f64; 4]> {
    if contexts.len() != set.len() {
        return Err(SgiError::dim("one context per seed required"));
    }
    let mut bits = [0.0; 4];
    for (i, ctx) in contexts.iter().enumerate() {
        for g in AttrGroup::ALL {
            let j = g as usize;
            for &v in set.seed_group(g, i) {
                let (_, s) = quantize_test(v, ctx.q[j]);
                let p = interval_mass(s as f64 * ctx.q[j], ctx.dist.mean[j], ctx.dist.scale[j], ctx.q[j]);
                bits[j] -= p.max(f64::MIN_POSITIVE).log2();
            }
        }
    }
    Ok(bits)
}

/// Backpropagates distribution gradients into the context MLP and grid latents.
///
/// MLP gradients are added into `mlp_grads`; grid gradients into `grid_grads`
/// (dense, one entry per latent), merged in seed order.
pub fn context_backward(
    contexts: &[SeedContext],
    d_dist: &[DistGrad],
    quant: &QuantConfig,
    mlp: &Mlp,
    grid: &BinaryHashGrid,
    mlp_grads: &mut [f64],
    grid_grads: &mut [f64],
) -> Result<()> {
    if contexts.len() != d_dist.len() || grid_grads.len() != grid.latents.len() {
        return Err(SgiError::dim("context backward shape mismatch"));
    }
    for (ctx, dg) in contexts.iter().zip(d_dist) {
        let mut d_raw = [0.0; 12];
        for j in 0..4 {
            d_raw[j] = dg.mean[j];
            let sp = softplus(ctx.raw[4 + j]);
            if sp > SIGMA_MIN {
                d_raw[4 + j] = dg.scale[j] * sigmoid(ctx.raw[4 + j]);
            }
            d_raw[8 + j] = dg.q[j] * quant_step_grad(quant.steps[j], ctx.raw[8 + j]);
        }
        if d_raw.iter().all(|&v| v == 0.0) {
            continue;
        }
        let d_feat = mlp.backward_into(&ctx.features, &ctx.cache, &d_raw, mlp_grads)?;
        for (idx, g) in grid.lookup_backward(&ctx.trace, &d_feat) {
            grid_grads[idx] += g;
        }
    }
    Ok(())
}

/// `L_img + λ / (N d_A) · (L_entropy + L_hash)`.
pub fn total_loss(l_img: f64, l_entropy: f64, l_hash: f64, lambda: f64, n_seeds: usize, attr_dims: usize) -> f64 {
    l_img + rate_weight(lambda, n_seeds, attr_dims) * (l_entropy + l_hash)
}

pub fn rate_weight(lambda: f64, n_seeds: usize, attr_dims: usize) -> f64 {
    lambda / (n_seeds as f64 * attr_dims as f64)
}
