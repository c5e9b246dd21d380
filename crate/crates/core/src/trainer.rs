//! Multi-scale, quantization-aware optimization of a model against one image.
//!
//! Training starts on the coarsest level of an image pyramid and moves one
//! level finer after each block of steps, doubling positions and scalings.
//! Every step adds uniform quantization noise to the seed attributes,
//! renders, and minimizes `L1 + λ/(N d_A) (entropy bits + grid bits)` with Adam.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{encode_model, EncodedModel};
use crate::entropy::{
    context_backward, entropy_eval, hash_loss, hash_loss_grad, rate_weight, seed_contexts, test_time_bits,
    DistGrad, QuantConfig,
};
use crate::error::{Result, SgiError};
use crate::image::{build_pyramid, l1_residual, psnr, pyramid_dims, ssim, Image};
use crate::model::{
    adapt_to_finer, decode_all, decode_all_backward, decode_all_cached, AttrGroup, DecodedGaussian, GaussianGrad,
    ModelConfig, SgiModel,
};
use crate::nn::AdamState;
use crate::raster::{render, Frame};

/// Per-component Adam learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub position: f64,
    pub offset: f64,
    pub feature: f64,
    /// Shared by the offset scaling and the scale scaling.
    pub scaling: f64,
    pub color_mlp: f64,
    pub shape_mlp: f64,
    pub context_mlp: f64,
    pub grid: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 0.0,
            offset: 0.01,
            feature: 0.0075,
            scaling: 0.007,
            color_mlp: 0.008,
            shape_mlp: 0.004,
            context_mlp: 0.005,
            grid: 0.005,
        }
    }
}

impl LearningRates {
    fn all(&self) -> [f64; 8] {
        [
            self.position,
            self.offset,
            self.feature,
            self.scaling,
            self.color_mlp,
            self.shape_mlp,
            self.context_mlp,
            self.grid,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Total steps over all pyramid levels.
    pub steps: usize,
    /// Pyramid levels `M`.
    pub levels: usize,
    /// Rate weight `λ`.
    pub lambda: f64,
    pub lr: LearningRates,
    /// Decay the decaying rates to 0.1× over each level.
    pub decay: bool,
    pub seed: u64,
    /// Record every n-th step (the last step of each level is always kept); 0 records all.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 15_000,
            levels: 3,
            lambda: 0.001,
            lr: LearningRates::default(),
            decay: true,
            seed: 0,
            log_every: 1,
        }
    }
}

pub const MAX_LEVELS: usize = 16;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.steps < self.levels {
            return Err(SgiError::config(format!(
                "need at least one step per level ({} steps, {} levels)",
                self.steps, self.levels
            )));
        }
        if self.levels > MAX_LEVELS {
            return Err(SgiError::config(format!("at most {MAX_LEVELS} pyramid levels")));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(SgiError::config("lambda must be a finite non-negative number"));
        }
        if self.lr.all().iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
            return Err(SgiError::config("learning rates must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Steps per pyramid level, finest first. Each coarser level gets half the
/// share of the next finer one (at least one step); the finest takes the rest.
pub fn level_steps(steps: usize, levels: usize) -> Vec<usize> {
    let total_weight = (1u64 << levels) - 1;
    let mut out = vec![0; levels];
    for (l, slot) in out.iter_mut().enumerate().skip(1) {
        let weight = 1u64 << (levels - 1 - l);
        *slot = ((steps as u64 * weight / total_weight) as usize).max(1);
    }
    out[0] = steps - out.iter().sum::<usize>();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub level: usize,
    pub l_img: f64,
    pub entropy_bits: f64,
    pub hash_bits: f64,
    pub total: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LevelRecord {
    pub level: usize,
    pub width: usize,
    pub height: usize,
    pub steps: usize,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub levels: Vec<LevelRecord>,
    pub steps_executed: usize,
    pub wall_ms: f64,
    /// Of the unquantized model at full resolution.
    pub final_psnr: f64,
    pub final_ssim: f64,
    /// Ideal attribute and grid bits plus raw MLP bytes.
    pub estimated_bytes: f64,
}

impl TrainReport {
    /// Rows `step,level,l_img,entropy_bits,hash_bits,total,wall_ms`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r).map_err(|e| SgiError::Io(std::io::Error::other(e)))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Summary without the per-step records.
    pub fn summary_json(&self) -> serde_json::Value {
        let finite = |v: f64| if v.is_finite() { serde_json::json!(v) } else { serde_json::json!("inf") };
        serde_json::json!({
            "steps_executed": self.steps_executed,
            "wall_ms": self.wall_ms,
            "levels": self.levels,
            "final_psnr": finite(self.final_psnr),
            "final_ssim": self.final_ssim,
            "estimated_bytes": self.estimated_bytes,
            "final_loss": self.records.last(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Objective {
    pub l_img: f64,
    pub entropy_bits: f64,
    pub hash_bits: f64,
    pub total: f64,
}

/// Gradient of the total loss with respect to every trainable tensor.
#[derive(Debug, Clone)]
pub struct ModelGradients {
    pub positions: Vec<f64>,
    pub attributes: [Vec<f64>; 4],
    pub color: Vec<f64>,
    pub shape: Vec<f64>,
    pub context: Vec<f64>,
    pub grid: Vec<f64>,
}

/// Uniform noise in `[-1/2, 1/2)` for every attribute, shaped like the groups.
/// The stream depends only on `(seed, step)`.
pub fn draw_noise(model: &SgiModel, seed: u64, step: u64) -> [Vec<f64>; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    model
        .seeds
        .zero_attributes()
        .map(|v| v.iter().map(|_| rng.random_range(-0.5..0.5)).collect())
}

/// Pyramid level `l` keeps every `2^l`-th pixel of the input, so its pixel
/// `i` is centered at `i + 2^-(l+1)` in level coordinates rather than `i + 1/2`.
/// Rendering at that level shifts Gaussians by the difference.
pub fn level_sample_shift(level: usize) -> f64 {
    0.5 - 0.5f64.powi(level as i32 + 1)
}

/// Variance, in level pixels², of the low-pass the pyramid applied to reach
/// `level`: each binomial pass has unit variance at its own resolution.
pub fn level_blur_variance(level: usize) -> f64 {
    (1.0 - 0.25f64.powi(level as i32)) / 3.0
}

/// The Gaussians as the pyramid level sees them: shifted onto its sampling
/// grid and convolved with its low-pass (same axes, wider, lower peak).
fn level_view(gaussians: &[DecodedGaussian], level: usize) -> Vec<DecodedGaussian> {
    let (shift, v) = (level_sample_shift(level), level_blur_variance(level));
    gaussians
        .iter()
        .map(|g| {
            let scale = g.scale.map(|s| (s * s + v).sqrt());
            let ratio = g.scale[0] * g.scale[1] / (scale[0] * scale[1]);
            DecodedGaussian {
                mean: [g.mean[0] + shift, g.mean[1] + shift],
                scale,
                rotation: g.rotation,
                color: g.color.map(|c| c * ratio),
            }
        })
        .collect()
}

/// Maps gradients w.r.t. [`level_view`] outputs back to its inputs, in place.
fn level_view_backward(gaussians: &[DecodedGaussian], level: usize, grads: &mut [GaussianGrad]) {
    let v = level_blur_variance(level);
    if v == 0.0 {
        return;
    }
    for (g, d) in gaussians.iter().zip(grads.iter_mut()) {
        let blurred = g.scale.map(|s| (s * s + v).sqrt());
        let ratio = g.scale[0] * g.scale[1] / (blurred[0] * blurred[1]);
        let d_ratio: f64 = (0..3).map(|c| d.color[c] * g.color[c]).sum();
        for a in 0..2 {
            let (s, b) = (g.scale[a], blurred[a]);
            d.scale[a] = d.scale[a] * s / b + d_ratio * ratio * v / (s * b * b);
        }
        for c in &mut d.color {
            *c *= ratio;
        }
    }
}

fn quant_config(model: &SgiModel) -> Result<QuantConfig> {
    QuantConfig::new(model.config.quant_steps)
}

/// Loss and gradients for the seeds' current level against `target`.
///
/// Each attribute `a` is evaluated at `a + u q` with `u` from `noise`.
pub fn objective(model: &SgiModel, target: &Image, noise: &[Vec<f64>; 4], lambda: f64) -> Result<(Objective, ModelGradients)> {
    let seeds = &model.seeds;
    if target.width != seeds.width || target.height != seeds.height {
        return Err(SgiError::dim(format!(
            "target is {}x{}, seeds live on {}x{}",
            target.width, target.height, seeds.width, seeds.height
        )));
    }
    let quant = quant_config(model)?;
    let contexts = seed_contexts(seeds, &model.grid, &model.context, &quant)?;

    let mut noised = seeds.clone();
    for g in AttrGroup::ALL {
        let d = seeds.group_dim(g);
        let (vals, u) = (&mut noised.attributes[g as usize], &noise[g as usize]);
        if u.len() != vals.len() {
            return Err(SgiError::dim("noise shape does not match the seed attributes"));
        }
        for (i, ctx) in contexts.iter().enumerate() {
            for t in i * d..(i + 1) * d {
                vals[t] += u[t] * ctx.q[g as usize];
            }
        }
    }

    let (gaussians, caches) = decode_all_cached(&noised, &model.color, &model.shape, &model.config)?;
    let frame = if seeds.level == 0 {
        Frame::new(&gaussians, seeds.width, seeds.height)
    } else {
        Frame::new(&level_view(&gaussians, seeds.level), seeds.width, seeds.height)
    };
    let (values, densities) = frame.render_values_cached();
    let (l_img, d_img) = l1_residual(&values, &target.data)?;
    let mut render_grads = frame.backward_cached(&d_img, &densities);
    level_view_backward(&gaussians, seeds.level, &mut render_grads.grads);
    let decoded = decode_all_backward(&noised, &model.color, &model.shape, &model.config, &caches, &render_grads.grads)?;

    let ent = entropy_eval(&noised, &contexts)?;
    let hash_bits = hash_loss(&model.grid);
    let w = rate_weight(lambda, seeds.len(), model.config.attr_dims());
    let total = l_img + w * (ent.bits + hash_bits);
    if !total.is_finite() {
        return Err(SgiError::numeric(format!(
            "non-finite loss (image {l_img}, entropy {} bits, grid {hash_bits} bits)",
            ent.bits
        )));
    }

    let mut attributes = decoded.attributes;
    for g in AttrGroup::ALL {
        for (a, e) in attributes[g as usize].iter_mut().zip(&ent.d_values[g as usize]) {
            *a += w * e;
        }
    }
    // The step q enters through the noise (v = a + u q) and through the rate.
    let dist_grads: Vec<DistGrad> = ent
        .d_dist
        .iter()
        .enumerate()
        .map(|(i, dd)| {
            let mut out = DistGrad::default();
            for g in AttrGroup::ALL {
                let j = g as usize;
                let d = seeds.group_dim(g);
                let via_noise: f64 = (i * d..(i + 1) * d).map(|t| attributes[j][t] * noise[j][t]).sum();
                out.mean[j] = w * dd.mean[j];
                out.scale[j] = w * dd.scale[j];
                out.q[j] = w * dd.q[j] + via_noise;
            }
            out
        })
        .collect();
    let mut context = vec![0.0; model.context.param_count()];
    let mut grid = vec![0.0; model.grid.latents.len()];
    context_backward(&contexts, &dist_grads, &quant, &model.context, &model.grid, &mut context, &mut grid)?;
    if w > 0.0 {
        let gh = w * hash_loss_grad(&model.grid);
        for v in &mut grid {
            *v += gh;
        }
    }

    let k = seeds.gaussians_per_seed;
    let mut positions = vec![0.0; seeds.positions.len()];
    for (i, chunk) in render_grads.grads.chunks_exact(k).enumerate() {
        for g in chunk {
            positions[2 * i] += g.mean[0];
            positions[2 * i + 1] += g.mean[1];
        }
    }

    Ok((
        Objective {
            l_img,
            entropy_bits: ent.bits,
            hash_bits,
            total,
        },
        ModelGradients {
            positions,
            attributes,
            color: decoded.color,
            shape: decoded.shape,
            context,
            grid,
        },
    ))
}

struct Optimizers {
    positions: AdamState,
    attributes: [AdamState; 4],
    color: AdamState,
    shape: AdamState,
    context: AdamState,
    grid: AdamState,
}

impl Optimizers {
    fn new(model: &SgiModel) -> Self {
        Self {
            positions: AdamState::new(model.seeds.positions.len()),
            attributes: AttrGroup::ALL.map(|g| AdamState::new(model.seeds.group(g).len())),
            color: AdamState::new(model.color.param_count()),
            shape: AdamState::new(model.shape.param_count()),
            context: AdamState::new(model.context.param_count()),
            grid: AdamState::new(model.grid.latents.len()),
        }
    }

    fn step(&mut self, model: &mut SgiModel, grads: &ModelGradients, lr: &LearningRates, decay: f64) -> Result<()> {
        if lr.position > 0.0 {
            self.positions.step(&mut model.seeds.positions, &grads.positions, lr.position * decay)?;
        }
        for g in AttrGroup::ALL {
            let rate = match g {
                AttrGroup::Feature => lr.feature,
                AttrGroup::OffsetScale | AttrGroup::ScaleScale => lr.scaling,
                AttrGroup::Offset => lr.offset * decay,
            };
            self.attributes[g as usize].step(model.seeds.group_mut(g), &grads.attributes[g as usize], rate)?;
        }
        self.color.step(&mut model.color.params, &grads.color, lr.color_mlp * decay)?;
        self.shape.step(&mut model.shape.params, &grads.shape, lr.shape_mlp * decay)?;
        self.context.step(&mut model.context.params, &grads.context, lr.context_mlp * decay)?;
        self.grid.step(&mut model.grid.latents, &grads.grid, lr.grid * decay)
    }
}

/// Ideal size in bytes: attribute bits at exact symbols, grid bits and raw MLPs.
pub fn estimate_bytes(model: &SgiModel) -> Result<f64> {
    let quant = quant_config(model)?;
    let contexts = seed_contexts(&model.seeds, &model.grid, &model.context, &quant)?;
    let bits: f64 = test_time_bits(&model.seeds, &contexts)?.iter().sum::<f64>() + hash_loss(&model.grid);
    let mlp_bytes: usize = [&model.color, &model.shape, &model.context]
        .iter()
        .map(|m| 4 * m.param_count())
        .sum();
    Ok(bits / 8.0 + mlp_bytes as f64)
}

/// Fits a fresh model to `image`.
pub fn train(image: &Image, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<(SgiModel, TrainReport)> {
    train_with_progress(image, model_cfg, cfg, |_| {})
}

/// [`train`] with a callback invoked after every recorded step.
pub fn train_with_progress<F: FnMut(&StepRecord)>(
    image: &Image,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut progress: F,
) -> Result<(SgiModel, TrainReport)> {
    cfg.validate()?;
    model_cfg.validate()?;
    let start = Instant::now();
    let m = cfg.levels;
    let pyramid = build_pyramid(image, m)?;
    let dims = pyramid_dims(image.width, image.height, m);
    let mut model = SgiModel::init(model_cfg.clone(), image.width, image.height, cfg.seed)?;
    let (cw, ch) = dims[m - 1];
    model.seeds = model.seeds.scaled(0.5f64.powi(m as i32 - 1), cw, ch);
    model.seeds.level = m - 1;

    let mut opt = Optimizers::new(&model);
    let per_level = level_steps(cfg.steps, m);
    let mut records = Vec::new();
    let mut levels = Vec::with_capacity(m);
    let mut global = 0usize;
    for l in (0..m).rev() {
        let level_start = Instant::now();
        let target = pyramid.level(l);
        let n_steps = per_level[l];
        for t in 0..n_steps {
            let step_start = Instant::now();
            let noise = draw_noise(&model, cfg.seed, global as u64);
            let (obj, grads) = objective(&model, target, &noise, cfg.lambda)?;
            let decay = if cfg.decay { 0.1f64.powf(t as f64 / n_steps as f64) } else { 1.0 };
            opt.step(&mut model, &grads, &cfg.lr, decay)?;
            if cfg.log_every <= 1 || t % cfg.log_every == 0 || t + 1 == n_steps {
                let rec = StepRecord {
                    step: global,
                    level: l,
                    l_img: obj.l_img,
                    entropy_bits: obj.entropy_bits,
                    hash_bits: obj.hash_bits,
                    total: obj.total,
                    wall_ms: step_start.elapsed().as_secs_f64() * 1e3,
                };
                progress(&rec);
                records.push(rec);
            }
            global += 1;
        }
        levels.push(LevelRecord {
            level: l,
            width: target.width,
            height: target.height,
            steps: n_steps,
            wall_ms: level_start.elapsed().as_secs_f64() * 1e3,
        });
        if l > 0 {
            let (w, h) = dims[l - 1];
            model.seeds = adapt_to_finer(&model.seeds, w, h)?;
        }
    }

    let rendered = render_model(&model)?;
    let report = TrainReport {
        records,
        levels,
        steps_executed: global,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        final_psnr: psnr(&rendered, image)?,
        final_ssim: ssim(&rendered, image)?,
        estimated_bytes: estimate_bytes(&model)?,
    };
    Ok((model, report))
}

/// Render at the seeds' own resolution, clamped to `[0, 1]`.
pub fn render_model(model: &SgiModel) -> Result<Image> {
    let g = decode_all(&model.seeds, &model.color, &model.shape, &model.config)?;
    Ok(clamp01(render(&g, model.seeds.width, model.seeds.height)))
}

fn clamp01(mut img: Image) -> Image {
    for v in &mut img.data {
        *v = v.clamp(0.0, 1.0);
    }
    img
}

/// Renders at `scale` times the seeds' resolution by scaling positions and
/// both scalings.
pub fn render_at_scale(model: &SgiModel, scale: f64) -> Result<Image> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(SgiError::config(format!("scale {scale} must be positive")));
    }
    let w = ((model.seeds.width as f64 * scale).round() as usize).max(1);
    let h = ((model.seeds.height as f64 * scale).round() as usize).max(1);
    let mut scaled = model.clone();
    scaled.seeds = model.seeds.scaled(scale, w, h);
    render_model(&scaled)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub psnr_db: f64,
    pub ssim: f64,
}

/// PSNR and SSIM of the model's native-resolution render against `image`.
pub fn evaluate(image: &Image, model: &SgiModel) -> Result<Metrics> {
    let rendered = render_model(model)?;
    if !rendered.same_dims(image) {
        return Err(SgiError::dim(format!(
            "model renders {}x{}, image is {}x{}",
            rendered.width, rendered.height, image.width, image.height
        )));
    }
    Ok(Metrics {
        psnr_db: psnr(&rendered, image)?,
        ssim: ssim(&rendered, image)?,
    })
}

/// Train, encode and measure the decoded model.
#[derive(Debug, Clone)]
pub struct Compressed {
    pub encoded: EncodedModel,
    pub report: TrainReport,
    /// Of the quantized model the decoder reconstructs.
    pub metrics: Metrics,
}

pub fn compress(image: &Image, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Compressed> {
    let (model, report) = train(image, model_cfg, cfg)?;
    let encoded = encode_model(&model)?;
    let metrics = evaluate(image, &encoded.decoded)?;
    Ok(Compressed {
        encoded,
        report,
        metrics,
    })
}
