//! Tile-based accumulated-summation splatting and its analytic backward pass.
//!
//! Each pixel receives `Σ c'_i G_i(x)` over the Gaussians whose cutoff box
//! covers it. There is no alpha compositing, so the result does not depend on
//! depth order; contributions are still summed in a canonical Gaussian order
//! (see [`canonical_order`]) so that permuting the input is bit-exact.
//!
//! Work is split over 16×16 tiles. The forward pass owns each pixel in
//! exactly one tile. The backward pass writes per-tile partial sums which
//! are merged sequentially by tile index, so results are independent of
//! the thread count.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::image::{Image, CHANNELS};
use crate::model::{build_covariance, invert_covariance, DecodedGaussian, GaussianGrad, Sym2, MIN_DET};

pub const TILE_SIZE: usize = 16;

/// Box half-extent in standard deviations: `sqrt(2 ln 255)` rounded up.
pub const CUTOFF_SIGMAS: f64 = 3.35;

/// Inclusive pixel-index box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelBox {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

impl PixelBox {
    #[inline]
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

/// `exp(-½ dᵀ Σ⁻¹ d)` with `d = x - μ`.
#[inline]
pub fn gaussian_density(x: [f64; 2], mean: [f64; 2], inv: &Sym2) -> f64 {
    let dx = x[0] - mean[0];
    let dy = x[1] - mean[1];
    (-0.5 * (inv.xx * dx * dx + 2.0 * inv.xy * dx * dy + inv.yy * dy * dy)).exp()
}

/// Pixels whose centers may carry density `>= 1/255`, clipped to the image.
pub fn compute_bounds(g: &DecodedGaussian, width: usize, height: usize) -> Option<PixelBox> {
    let r = CUTOFF_SIGMAS * g.scale[0].abs().max(g.scale[1].abs());
    let x0 = (g.mean[0] - r).floor();
    let x1 = (g.mean[0] + r).ceil();
    let y0 = (g.mean[1] - r).floor();
    let y1 = (g.mean[1] + r).ceil();
    if !(x0.is_finite() && x1.is_finite() && y0.is_finite() && y1.is_finite()) {
        return None;
    }
    let (wmax, hmax) = (width as f64 - 1.0, height as f64 - 1.0);
    if width == 0 || height == 0 || x1 < 0.0 || y1 < 0.0 || x0 > wmax || y0 > hmax {
        return None;
    }
    Some(PixelBox {
        x0: x0.max(0.0) as usize,
        x1: x1.min(wmax) as usize,
        y0: y0.max(0.0) as usize,
        y1: y1.min(hmax) as usize,
    })
}

fn gaussian_key(g: &DecodedGaussian) -> [f64; 8] {
    [
        g.mean[0], g.mean[1], g.scale[0], g.scale[1], g.rotation, g.color[0], g.color[1], g.color[2],
    ]
}

/// Content-based ordering of a Gaussian list; identical Gaussians tie.
pub fn canonical_order(gaussians: &[DecodedGaussian]) -> Vec<usize> {
    let keys: Vec<[f64; 8]> = gaussians.iter().map(gaussian_key).collect();
    let mut order: Vec<usize> = (0..gaussians.len()).collect();
    order.sort_by(|&a, &b| {
        keys[a]
            .iter()
            .zip(&keys[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    order
}

#[derive(Debug, Clone, Copy)]
struct Splat {
    mean: [f64; 2],
    scale: [f64; 2],
    rotation: f64,
    cov: Sym2,
    inv: Sym2,
    det: f64,
    color: [f64; 3],
    bounds: PixelBox,
}

/// Per-tile lists of Gaussian ids whose cutoff box intersects the tile.
#[derive(Debug, Clone)]
pub struct TileIndex {
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub lists: Vec<Vec<u32>>,
}

impl TileIndex {
    pub fn pair_count(&self) -> usize {
        self.lists.iter().map(Vec::len).sum()
    }
}

/// Densities evaluated by a forward pass, per tile in evaluation order.
#[derive(Debug, Clone)]
pub struct DensityCache {
    tiles: Vec<Vec<f64>>,
}

/// A Gaussian list prepared for rendering at a fixed resolution.
pub struct Frame {
    pub width: usize,
    pub height: usize,
    splats: Vec<Option<Splat>>,
    pub tiles: TileIndex,
}

impl Frame {
    pub fn new(gaussians: &[DecodedGaussian], width: usize, height: usize) -> Self {
        let splats: Vec<Option<Splat>> = gaussians
            .par_iter()
            .map(|g| {
                let bounds = compute_bounds(g, width, height)?;
                let cov = build_covariance(g.scale, g.rotation);
                let (inv, det) = invert_covariance(cov);
                Some(Splat {
                    mean: g.mean,
                    scale: g.scale,
                    rotation: g.rotation,
                    cov,
                    inv,
                    det,
                    color: g.color,
                    bounds,
                })
            })
            .collect();
        let tiles_x = width.div_ceil(TILE_SIZE);
        let tiles_y = height.div_ceil(TILE_SIZE);
        let mut lists = vec![Vec::new(); tiles_x * tiles_y];
        for id in canonical_order(gaussians) {
            if let Some(s) = &splats[id] {
                let b = s.bounds;
                for ty in b.y0 / TILE_SIZE..=b.y1 / TILE_SIZE {
                    for tx in b.x0 / TILE_SIZE..=b.x1 / TILE_SIZE {
                        lists[ty * tiles_x + tx].push(id as u32);
                    }
                }
            }
        }
        Self {
            width,
            height,
            splats,
            tiles: TileIndex {
                tiles_x,
                tiles_y,
                lists,
            },
        }
    }

    fn tile_rect(&self, t: usize) -> PixelBox {
        let (tx, ty) = (t % self.tiles.tiles_x, t / self.tiles.tiles_x);
        PixelBox {
            x0: tx * TILE_SIZE,
            x1: ((tx + 1) * TILE_SIZE).min(self.width) - 1,
            y0: ty * TILE_SIZE,
            y1: ((ty + 1) * TILE_SIZE).min(self.height) - 1,
        }
    }

    /// Rendered values in `f64`, row-major and channel-interleaved.
    pub fn render_values(&self) -> Vec<f64> {
        self.render_tiles(false).0
    }

    /// Like [`Frame::render_values`], also keeping every evaluated density
    /// so [`Frame::backward_cached`] need not recompute them.
    pub fn render_values_cached(&self) -> (Vec<f64>, DensityCache) {
        let (out, tiles) = self.render_tiles(true);
        (out, DensityCache { tiles })
    }

    fn render_tiles(&self, keep: bool) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n_tiles = self.tiles.lists.len();
        let tiles: Vec<(Vec<f64>, Vec<f64>)> = (0..n_tiles)
            .into_par_iter()
            .map(|t| {
                let rect = self.tile_rect(t);
                let tw = rect.x1 - rect.x0 + 1;
                let th = rect.y1 - rect.y0 + 1;
                let mut buf = vec![0.0f64; tw * th * CHANNELS];
                let mut densities = Vec::new();
                for &id in &self.tiles.lists[t] {
                    let s = self.splats[id as usize].as_ref().unwrap();
                    let (x0, x1) = (s.bounds.x0.max(rect.x0), s.bounds.x1.min(rect.x1));
                    let (y0, y1) = (s.bounds.y0.max(rect.y0), s.bounds.y1.min(rect.y1));
                    for y in y0..=y1 {
                        let py = y as f64 + 0.5;
                        for x in x0..=x1 {
                            let g = gaussian_density([x as f64 + 0.5, py], s.mean, &s.inv);
                            if keep {
                                densities.push(g);
                            }
                            let o = ((y - rect.y0) * tw + (x - rect.x0)) * CHANNELS;
                            for c in 0..CHANNELS {
                                buf[o + c] += s.color[c] * g;
                            }
                        }
                    }
                }
                (buf, densities)
            })
            .collect();

        let mut out = vec![0.0f64; self.width * self.height * CHANNELS];
        let mut cache = Vec::with_capacity(if keep { n_tiles } else { 0 });
        for (t, (buf, densities)) in tiles.into_iter().enumerate() {
            let rect = self.tile_rect(t);
            let tw = rect.x1 - rect.x0 + 1;
            for y in rect.y0..=rect.y1 {
                let src = (y - rect.y0) * tw * CHANNELS;
                let dst = (y * self.width + rect.x0) * CHANNELS;
                out[dst..dst + tw * CHANNELS].copy_from_slice(&buf[src..src + tw * CHANNELS]);
            }
            if keep {
                cache.push(densities);
            }
        }
        (out, cache)
    }

    pub fn render(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.render_values().into_iter().map(|v| v as f32).collect(),
        }
    }

    /// Gradients of `Σ dL/dC · C` for the cutoff-inclusive forward pass,
    /// holding each Gaussian's support fixed.
    pub fn backward(&self, dl_dimage: &[f64]) -> RenderGradients {
        self.backward_impl(dl_dimage, None)
    }

    /// [`Frame::backward`] reusing the densities of the forward pass.
    pub fn backward_cached(&self, dl_dimage: &[f64], cache: &DensityCache) -> RenderGradients {
        assert_eq!(cache.tiles.len(), self.tiles.lists.len(), "density cache belongs to another frame");
        self.backward_impl(dl_dimage, Some(cache))
    }

    fn backward_impl(&self, dl_dimage: &[f64], cache: Option<&DensityCache>) -> RenderGradients {
        assert_eq!(dl_dimage.len(), self.width * self.height * CHANNELS);
        let n_tiles = self.tiles.lists.len();
        // Partials per (tile, gaussian): d/d(inv.xx, inv.xy, inv.yy), d/dμ, d/dc'.
        let partials: Vec<Vec<[f64; 8]>> = (0..n_tiles)
            .into_par_iter()
            .map(|t| {
                let rect = self.tile_rect(t);
                let mut cached = cache.map(|c| c.tiles[t].iter());
                self.tiles.lists[t]
                    .iter()
                    .map(|&id| {
                        let s = self.splats[id as usize].as_ref().unwrap();
                        let mut acc = [0.0f64; 8];
                        let (x0, x1) = (s.bounds.x0.max(rect.x0), s.bounds.x1.min(rect.x1));
                        let (y0, y1) = (s.bounds.y0.max(rect.y0), s.bounds.y1.min(rect.y1));
                        let inv = &s.inv;
                        for y in y0..=y1 {
                            let dy = y as f64 + 0.5 - s.mean[1];
                            for x in x0..=x1 {
                                let o = (y * self.width + x) * CHANNELS;
                                let dl = &dl_dimage[o..o + CHANNELS];
                                let stored = cached.as_mut().map(|it| *it.next().expect("density cache too short"));
                                if dl[0] == 0.0 && dl[1] == 0.0 && dl[2] == 0.0 {
                                    continue;
                                }
                                let dx = x as f64 + 0.5 - s.mean[0];
                                let g = match stored {
                                    Some(g) => g,
                                    None => (-0.5 * (inv.xx * dx * dx + 2.0 * inv.xy * dx * dy + inv.yy * dy * dy)).exp(),
                                };
                                let mut dl_dg = 0.0;
                                for c in 0..CHANNELS {
                                    acc[5 + c] += g * dl[c];
                                    dl_dg += s.color[c] * dl[c];
                                }
                                let dpow = dl_dg * g;
                                acc[0] -= 0.5 * dpow * dx * dx;
                                acc[1] -= dpow * dx * dy;
                                acc[2] -= 0.5 * dpow * dy * dy;
                                acc[3] += dpow * (inv.xx * dx + inv.xy * dy);
                                acc[4] += dpow * (inv.xy * dx + inv.yy * dy);
                            }
                        }
                        acc
                    })
                    .collect()
            })
            .collect();

        let mut totals = vec![[0.0f64; 8]; self.splats.len()];
        for (t, tile) in partials.iter().enumerate() {
            for (&id, p) in self.tiles.lists[t].iter().zip(tile) {
                let acc = &mut totals[id as usize];
                for i in 0..8 {
                    acc[i] += p[i];
                }
            }
        }

        let grads = self
            .splats
            .iter()
            .zip(&totals)
            .map(|(s, acc)| match s {
                None => GaussianGrad::default(),
                Some(s) => {
                    let (d_scale, d_rot) = inverse_grad_to_params(s, [acc[0], acc[1], acc[2]]);
                    GaussianGrad {
                        mean: [acc[3], acc[4]],
                        scale: d_scale,
                        rotation: d_rot,
                        color: [acc[5], acc[6], acc[7]],
                    }
                }
            })
            .collect::<Vec<_>>();
        RenderGradients { grads }
    }
}

/// Chains a gradient on `Σ⁻¹` entries back to `(s1, s2)` and `θ`.
fn inverse_grad_to_params(s: &Splat, g_inv: [f64; 3]) -> ([f64; 2], f64) {
    let [ga, gb, gc] = g_inv;
    let (cov, inv, det) = (s.cov, s.inv, s.det);
    let floored = cov.xx * cov.yy - cov.xy * cov.xy <= MIN_DET;
    let p = if floored {
        0.0
    } else {
        ga * inv.xx + gb * inv.xy + gc * inv.yy
    };
    let d_sxx = (gc - p * cov.yy) / det;
    let d_syy = (ga - p * cov.xx) / det;
    let d_sxy = (-gb + 2.0 * p * cov.xy) / det;

    // Σ = R diag(A, B) Rᵀ with A = s1², B = s2².
    let (a, b) = (s.scale[0] * s.scale[0], s.scale[1] * s.scale[1]);
    let (sin, cos) = s.rotation.sin_cos();
    let d_a = d_sxx * cos * cos + d_sxy * cos * sin + d_syy * sin * sin;
    let d_b = d_sxx * sin * sin - d_sxy * cos * sin + d_syy * cos * cos;
    let d_theta = d_sxx * 2.0 * cos * sin * (b - a)
        + d_sxy * (cos * cos - sin * sin) * (a - b)
        + d_syy * 2.0 * cos * sin * (a - b);
    ([d_a * 2.0 * s.scale[0], d_b * 2.0 * s.scale[1]], d_theta)
}

#[derive(Debug, Clone)]
pub struct RenderGradients {
    pub grads: Vec<GaussianGrad>,
}

/// Renders with the tile rasterizer; values are not clamped.
pub fn render(gaussians: &[DecodedGaussian], width: usize, height: usize) -> Image {
    Frame::new(gaussians, width, height).render()
}

pub fn render_values(gaussians: &[DecodedGaussian], width: usize, height: usize) -> Vec<f64> {
    Frame::new(gaussians, width, height).render_values()
}

pub fn render_backward(
    gaussians: &[DecodedGaussian],
    width: usize,
    height: usize,
    dl_dimage: &[f64],
) -> RenderGradients {
    Frame::new(gaussians, width, height).backward(dl_dimage)
}
