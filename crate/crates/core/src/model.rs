//! Seeds and their decoding into renderable 2D Gaussians.
//!
//! A seed owns a position, a feature vector, two per-seed scalings and `K`
//! offsets. Two shared MLPs turn the feature into per-Gaussian colors and
//! covariance parameters; positions come from `x_a + δ ⊙ s_o`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::entropy::{BinaryHashGrid, GridConfig};
use crate::error::{Result, SgiError};
use crate::nn::{Mlp, MlpCache};

/// Attribute groups sharing one quantization step and one coded stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttrGroup {
    Feature = 0,
    OffsetScale = 1,
    ScaleScale = 2,
    Offset = 3,
}

impl AttrGroup {
    pub const ALL: [AttrGroup; 4] = [
        AttrGroup::Feature,
        AttrGroup::OffsetScale,
        AttrGroup::ScaleScale,
        AttrGroup::Offset,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttrGroup::Feature => "f_a",
            AttrGroup::OffsetScale => "s_o",
            AttrGroup::ScaleScale => "s_a",
            AttrGroup::Offset => "delta",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Seed count `N`.
    pub n_seeds: usize,
    /// Gaussians per seed `K`.
    pub gaussians_per_seed: usize,
    /// Seed feature dimension `D`.
    pub feature_dim: usize,
    /// Base quantization step per attribute group.
    pub quant_steps: [f64; 4],
    /// Upper bound of the base-scale multiplier (dimensionless).
    pub scale_cap: f64,
    /// Floor on final Gaussian scales, pixels.
    pub min_scale: f64,
    pub color_hidden: usize,
    pub shape_hidden: usize,
    pub context_hidden: usize,
    pub grid: GridConfig,
}

impl ModelConfig {
    pub fn new(n_seeds: usize, gaussians_per_seed: usize) -> Self {
        let feature_dim = 24;
        Self {
            n_seeds,
            gaussians_per_seed,
            feature_dim,
            quant_steps: [1.0, 0.05, 0.05, 0.02],
            scale_cap: 2.0,
            min_scale: 0.3,
            color_hidden: feature_dim,
            shape_hidden: feature_dim,
            context_hidden: 64,
            grid: GridConfig::default(),
        }
    }

    pub fn with_feature_dim(mut self, d: usize) -> Self {
        self.feature_dim = d;
        self.color_hidden = d;
        self.shape_hidden = d;
        self
    }

    /// `d_A = D + 4 + 2K`, attribute dimensions per seed.
    pub fn attr_dims(&self) -> usize {
        self.feature_dim + 4 + 2 * self.gaussians_per_seed
    }

    pub fn group_dim(&self, g: AttrGroup) -> usize {
        group_dim(g, self.feature_dim, self.gaussians_per_seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_seeds == 0 || self.gaussians_per_seed == 0 || self.feature_dim == 0 {
            return Err(SgiError::config("N, K and D must be at least 1"));
        }
        if self.quant_steps.iter().any(|q| !(q.is_finite() && *q > 0.0)) {
            return Err(SgiError::config("quantization steps must be positive"));
        }
        if !(self.scale_cap > 0.0 && self.min_scale > 0.0) {
            return Err(SgiError::config("scale cap and minimum scale must be positive"));
        }
        if self.color_hidden == 0 || self.shape_hidden == 0 || self.context_hidden == 0 {
            return Err(SgiError::config("hidden widths must be positive"));
        }
        self.grid.validate()
    }
}

pub fn group_dim(g: AttrGroup, feature_dim: usize, k: usize) -> usize {
    match g {
        AttrGroup::Feature => feature_dim,
        AttrGroup::OffsetScale | AttrGroup::ScaleScale => 2,
        AttrGroup::Offset => 2 * k,
    }
}

/// Attributes of one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedAttributes {
    pub position: [f64; 2],
    pub feature: Vec<f64>,
    pub offset_scale: [f64; 2],
    pub scale_scale: [f64; 2],
    pub offsets: Vec<[f64; 2]>,
}

/// All seeds, stored group-major in flat buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedSet {
    pub width: usize,
    pub height: usize,
    pub level: usize,
    pub feature_dim: usize,
    pub gaussians_per_seed: usize,
    /// `2N` values, `(x, y)` per seed, pixels at the current level.
    pub positions: Vec<f64>,
    /// Indexed by [`AttrGroup`]; group `g` holds `N * group_dim(g)` values.
    pub attributes: [Vec<f64>; 4],
}

/// Canonical seed grid: `(rows, cols)` for `n` seeds on a `width`×`height` image.
pub fn grid_shape(width: usize, height: usize, n: usize) -> (usize, usize) {
    let cols = ((n as f64 * width as f64 / height as f64).sqrt().ceil() as usize).clamp(1, n);
    let rows = n.div_ceil(cols);
    (rows, cols)
}

/// Cell-center positions of the canonical grid, row-major, truncated to `n`.
pub fn grid_positions(width: usize, height: usize, n: usize) -> Vec<f64> {
    let (rows, cols) = grid_shape(width, height, n);
    let cw = width as f64 / cols as f64;
    let ch = height as f64 / rows as f64;
    let mut out = Vec::with_capacity(2 * n);
    for i in 0..n {
        let (r, c) = (i / cols, i % cols);
        out.push((c as f64 + 0.5) * cw);
        out.push((r as f64 + 0.5) * ch);
    }
    out
}

impl SeedSet {
    pub fn len(&self) -> usize {
        self.positions.len() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn group_dim(&self, g: AttrGroup) -> usize {
        group_dim(g, self.feature_dim, self.gaussians_per_seed)
    }

    pub fn group(&self, g: AttrGroup) -> &[f64] {
        &self.attributes[g as usize]
    }

    pub fn group_mut(&mut self, g: AttrGroup) -> &mut Vec<f64> {
        &mut self.attributes[g as usize]
    }

    /// The slice of group `g` belonging to seed `i`.
    pub fn seed_group(&self, g: AttrGroup, i: usize) -> &[f64] {
        let d = self.group_dim(g);
        &self.attributes[g as usize][i * d..(i + 1) * d]
    }

    /// Stored reals per seed: position plus `d_A` attributes.
    pub fn reals_per_seed(&self) -> usize {
        2 + self.feature_dim + 4 + 2 * self.gaussians_per_seed
    }

    pub fn position(&self, i: usize) -> [f64; 2] {
        [self.positions[2 * i], self.positions[2 * i + 1]]
    }

    pub fn seed(&self, i: usize) -> SeedAttributes {
        let pair = |g: AttrGroup| {
            let s = self.seed_group(g, i);
            [s[0], s[1]]
        };
        SeedAttributes {
            position: self.position(i),
            feature: self.seed_group(AttrGroup::Feature, i).to_vec(),
            offset_scale: pair(AttrGroup::OffsetScale),
            scale_scale: pair(AttrGroup::ScaleScale),
            offsets: self
                .seed_group(AttrGroup::Offset, i)
                .chunks_exact(2)
                .map(|c| [c[0], c[1]])
                .collect(),
        }
    }

    /// Zero-valued buffers shaped like the attribute groups (for gradients).
    pub fn zero_attributes(&self) -> [Vec<f64>; 4] {
        AttrGroup::ALL.map(|g| vec![0.0; self.len() * self.group_dim(g)])
    }

    /// Multiplies positions and both scalings by `factor`; features and offsets are kept.
    pub fn scaled(&self, factor: f64, width: usize, height: usize) -> SeedSet {
        let mut out = self.clone();
        out.width = width;
        out.height = height;
        for v in &mut out.positions {
            *v *= factor;
        }
        for g in [AttrGroup::OffsetScale, AttrGroup::ScaleScale] {
            for v in out.group_mut(g) {
                *v *= factor;
            }
        }
        out
    }

    /// Reorders seeds by `order[new] = old`.
    pub fn permuted(&self, order: &[usize]) -> SeedSet {
        let mut out = self.clone();
        for (new, &old) in order.iter().enumerate() {
            out.positions[2 * new..2 * new + 2].copy_from_slice(&self.positions[2 * old..2 * old + 2]);
            for g in AttrGroup::ALL {
                let d = self.group_dim(g);
                out.attributes[g as usize][new * d..(new + 1) * d]
                    .copy_from_slice(&self.attributes[g as usize][old * d..(old + 1) * d]);
            }
        }
        out
    }
}

/// Places `n` seeds on the canonical grid with randomized features and offsets.
pub fn init_seeds(
    width: usize,
    height: usize,
    n: usize,
    k: usize,
    d: usize,
    rng_seed: u64,
) -> Result<SeedSet> {
    if n == 0 || k == 0 || d == 0 {
        return Err(SgiError::config("N, K and D must be at least 1"));
    }
    if n > width * height {
        return Err(SgiError::config(format!(
            "{n} seeds exceed the {}x{} pixel count",
            width, height
        )));
    }
    let (rows, cols) = grid_shape(width, height, n);
    let cw = width as f64 / cols as f64;
    let ch = height as f64 / rows as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let features = (0..n * d).map(|_| rng.random_range(-1e-2..=1e-2)).collect();
    let offsets = (0..n * 2 * k).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let scalings: Vec<f64> = (0..n).flat_map(|_| [cw / 4.0, ch / 4.0]).collect();
    Ok(SeedSet {
        width,
        height,
        level: 0,
        feature_dim: d,
        gaussians_per_seed: k,
        positions: grid_positions(width, height, n),
        attributes: [features, scalings.clone(), scalings, offsets],
    })
}

/// Moves a seed set one pyramid level finer: positions and scalings double.
pub fn adapt_to_finer(set: &SeedSet, finer_width: usize, finer_height: usize) -> Result<SeedSet> {
    if set.level == 0 {
        return Err(SgiError::config("seed set is already at the finest level"));
    }
    let mut out = set.scaled(2.0, finer_width, finer_height);
    out.level -= 1;
    Ok(out)
}

/// Symmetric 2×2 matrix `[[xx, xy], [xy, yy]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sym2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

/// `Σ = R(θ) diag(s1², s2²) R(θ)ᵀ`.
pub fn build_covariance(s: [f64; 2], theta: f64) -> Sym2 {
    let (sin, cos) = theta.sin_cos();
    let (a, b) = (s[0] * s[0], s[1] * s[1]);
    Sym2 {
        xx: cos * cos * a + sin * sin * b,
        xy: cos * sin * (a - b),
        yy: sin * sin * a + cos * cos * b,
    }
}

pub const MIN_DET: f64 = 1e-12;

/// Closed-form inverse; the determinant is floored at [`MIN_DET`].
pub fn invert_covariance(cov: Sym2) -> (Sym2, f64) {
    let det = (cov.xx * cov.yy - cov.xy * cov.xy).max(MIN_DET);
    (
        Sym2 {
            xx: cov.yy / det,
            xy: -cov.xy / det,
            yy: cov.xx / det,
        },
        det,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedGaussian {
    pub mean: [f64; 2],
    pub scale: [f64; 2],
    pub rotation: f64,
    /// Opacity-weighted color; unbounded.
    pub color: [f64; 3],
}

impl DecodedGaussian {
    pub fn covariance(&self) -> Sym2 {
        build_covariance(self.scale, self.rotation)
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Everything the backward pass needs from decoding one seed.
#[derive(Debug, Clone)]
pub struct SeedDecodeCache {
    color: MlpCache,
    shape: MlpCache,
    shape_raw: Vec<f64>,
}

/// Per-Gaussian gradient with respect to the decoded parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GaussianGrad {
    pub mean: [f64; 2],
    pub scale: [f64; 2],
    pub rotation: f64,
    pub color: [f64; 3],
}

fn check_decoders(k: usize, d: usize, color: &Mlp, shape: &Mlp) -> Result<()> {
    for (name, m) in [("color", color), ("covariance", shape)] {
        if m.in_dim != d || m.out_dim != 3 * k {
            return Err(SgiError::dim(format!(
                "{name} mlp is {}->{}, expected {d}->{}",
                m.in_dim,
                m.out_dim,
                3 * k
            )));
        }
    }
    Ok(())
}

fn decode_seed_cached(
    seed: &SeedAttributes,
    color: &Mlp,
    shape: &Mlp,
    cfg: &ModelConfig,
) -> Result<(Vec<DecodedGaussian>, SeedDecodeCache)> {
    let k = seed.offsets.len();
    check_decoders(k, seed.feature.len(), color, shape)?;
    let (c_out, c_cache) = color.forward(&seed.feature)?;
    let (s_out, s_cache) = shape.forward(&seed.feature)?;
    let gaussians = (0..k)
        .map(|j| {
            let off = seed.offsets[j];
            let mut scale = [0.0; 2];
            for a in 0..2 {
                let base = sigmoid(s_out[3 * j + a]) * cfg.scale_cap;
                scale[a] = (base * seed.scale_scale[a].abs()).max(cfg.min_scale);
            }
            DecodedGaussian {
                mean: [
                    seed.position[0] + off[0] * seed.offset_scale[0],
                    seed.position[1] + off[1] * seed.offset_scale[1],
                ],
                scale,
                rotation: s_out[3 * j + 2],
                color: [c_out[3 * j], c_out[3 * j + 1], c_out[3 * j + 2]],
            }
        })
        .collect();
    Ok((
        gaussians,
        SeedDecodeCache {
            color: c_cache,
            shape: s_cache,
            shape_raw: s_out,
        },
    ))
}

/// Decodes the `K` Gaussians of one seed.
pub fn decode_gaussians(
    seed: &SeedAttributes,
    color: &Mlp,
    shape: &Mlp,
    cfg: &ModelConfig,
) -> Result<Vec<DecodedGaussian>> {
    decode_seed_cached(seed, color, shape, cfg).map(|(g, _)| g)
}

/// Decodes every seed; output is seed-major with `K` Gaussians per seed.
pub fn decode_all(set: &SeedSet, color: &Mlp, shape: &Mlp, cfg: &ModelConfig) -> Result<Vec<DecodedGaussian>> {
    decode_all_cached(set, color, shape, cfg).map(|(g, _)| g)
}

pub fn decode_all_cached(
    set: &SeedSet,
    color: &Mlp,
    shape: &Mlp,
    cfg: &ModelConfig,
) -> Result<(Vec<DecodedGaussian>, Vec<SeedDecodeCache>)> {
    check_decoders(set.gaussians_per_seed, set.feature_dim, color, shape)?;
    let per_seed: Vec<_> = (0..set.len())
        .into_par_iter()
        .map(|i| decode_seed_cached(&set.seed(i), color, shape, cfg))
        .collect::<Result<_>>()?;
    let mut gaussians = Vec::with_capacity(set.len() * set.gaussians_per_seed);
    let mut caches = Vec::with_capacity(set.len());
    for (g, c) in per_seed {
        gaussians.extend(g);
        caches.push(c);
    }
    Ok((gaussians, caches))
}

/// Gradients of a decode with respect to seed attributes and both MLPs.
#[derive(Debug, Clone)]
pub struct DecodeGrads {
    pub attributes: [Vec<f64>; 4],
    pub color: Vec<f64>,
    pub shape: Vec<f64>,
}

/// Backpropagates per-Gaussian gradients through [`decode_all_cached`].
pub fn decode_all_backward(
    set: &SeedSet,
    color: &Mlp,
    shape: &Mlp,
    cfg: &ModelConfig,
    caches: &[SeedDecodeCache],
    grads: &[GaussianGrad],
) -> Result<DecodeGrads> {
    let k = set.gaussians_per_seed;
    if grads.len() != set.len() * k || caches.len() != set.len() {
        return Err(SgiError::dim("decode backward shape mismatch"));
    }
    let mut out = DecodeGrads {
        attributes: set.zero_attributes(),
        color: vec![0.0; color.param_count()],
        shape: vec![0.0; shape.param_count()],
    };
    let d = set.feature_dim;
    for i in 0..set.len() {
        let seed = set.seed(i);
        let cache = &caches[i];
        let g = &grads[i * k..(i + 1) * k];
        let mut d_color = vec![0.0; 3 * k];
        let mut d_shape = vec![0.0; 3 * k];
        let mut d_so = [0.0; 2];
        let mut d_sa = [0.0; 2];
        let mut d_off = vec![0.0; 2 * k];
        for j in 0..k {
            let gj = &g[j];
            d_color[3 * j..3 * j + 3].copy_from_slice(&gj.color);
            d_shape[3 * j + 2] = gj.rotation;
            for a in 0..2 {
                d_off[2 * j + a] = gj.mean[a] * seed.offset_scale[a];
                d_so[a] += gj.mean[a] * seed.offsets[j][a];

                let raw = cache.shape_raw[3 * j + a];
                let sig = sigmoid(raw);
                let sa = seed.scale_scale[a];
                let s = sig * cfg.scale_cap * sa.abs();
                if s > cfg.min_scale {
                    d_shape[3 * j + a] = gj.scale[a] * sig * (1.0 - sig) * cfg.scale_cap * sa.abs();
                    let sign = if sa > 0.0 {
                        1.0
                    } else if sa < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    d_sa[a] += gj.scale[a] * sig * cfg.scale_cap * sign;
                }
            }
        }
        let d_feat_c = color.backward_into(&seed.feature, &cache.color, &d_color, &mut out.color)?;
        let d_feat_s = shape.backward_into(&seed.feature, &cache.shape, &d_shape, &mut out.shape)?;
        let f = &mut out.attributes[AttrGroup::Feature as usize][i * d..(i + 1) * d];
        for t in 0..d {
            f[t] = d_feat_c[t] + d_feat_s[t];
        }
        out.attributes[AttrGroup::OffsetScale as usize][2 * i..2 * i + 2].copy_from_slice(&d_so);
        out.attributes[AttrGroup::ScaleScale as usize][2 * i..2 * i + 2].copy_from_slice(&d_sa);
        out.attributes[AttrGroup::Offset as usize][2 * k * i..2 * k * (i + 1)].copy_from_slice(&d_off);
    }
    Ok(out)
}

/// A complete model: seeds, the three MLPs, the hash grid and its configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SgiModel {
    pub config: ModelConfig,
    pub seeds: SeedSet,
    pub color: Mlp,
    pub shape: Mlp,
    pub context: Mlp,
    pub grid: BinaryHashGrid,
    /// Seed passed to [`init_seeds`]; stored with grid-mode positions.
    pub init_seed: u64,
}

impl SgiModel {
    /// Fresh model for a `width`×`height` image at pyramid level 0.
    pub fn init(config: ModelConfig, width: usize, height: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let (n, k, d) = (config.n_seeds, config.gaussians_per_seed, config.feature_dim);
        let seeds = init_seeds(width, height, n, k, d, seed)?;
        Ok(Self {
            color: Mlp::init(d, config.color_hidden, 3 * k, seed.wrapping_add(1))?,
            shape: Mlp::init(d, config.shape_hidden, 3 * k, seed.wrapping_add(2))?,
            context: Mlp::init(config.grid.feature_len(), config.context_hidden, 12, seed.wrapping_add(3))?,
            grid: BinaryHashGrid::new(config.grid.clone(), width, height, seed.wrapping_add(4))?,
            seeds,
            config,
            init_seed: seed,
        })
    }

    pub fn decode(&self) -> Result<Vec<DecodedGaussian>> {
        decode_all(&self.seeds, &self.color, &self.shape, &self.config)
    }
}
