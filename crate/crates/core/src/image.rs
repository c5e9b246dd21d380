//! RGB image container, file I/O, Gaussian pyramid and fidelity metrics.
//!
//! Images are stored as normalized `f32` values, row-major and
//! channel-interleaved. Metrics accumulate in `f64` with a fixed reduction
//! order so results do not depend on how work is split.

use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageReader, Rgb, RgbImage};

use crate::error::{Result, SgiError};

pub const CHANNELS: usize = 3;

/// Binomial downsampling kernel `(1, 4, 6, 4, 1) / 16`.
const PYRAMID_KERNEL: [f64; 5] = [0.0625, 0.25, 0.375, 0.25, 0.0625];

/// Smallest edge allowed for the coarsest pyramid level.
pub const MIN_PYRAMID_EDGE: usize = 8;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * CHANNELS],
        }
    }

    pub fn filled(width: usize, height: usize, value: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * CHANNELS);
        for _ in 0..width * height {
            data.extend_from_slice(&value);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * CHANNELS {
            return Err(SgiError::dim(format!(
                "expected {} values for {}x{} RGB, got {}",
                width * height * CHANNELS,
                width,
                height,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(SgiError::numeric(format!("non-finite pixel value {bad}")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * CHANNELS + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[self.index(x, y, c)]
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Copies the `w`×`h` region starting at `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image> {
        if x0 + w > self.width || y0 + h > self.height || w == 0 || h == 0 {
            return Err(SgiError::dim(format!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut out = Image::new(w, h);
        for y in 0..h {
            let src = self.index(x0, y0 + y, 0);
            let dst = out.index(0, y, 0);
            out.data[dst..dst + w * CHANNELS].copy_from_slice(&self.data[src..src + w * CHANNELS]);
        }
        Ok(out)
    }
}

fn dim_check(a: &Image, b: &Image) -> Result<()> {
    if !a.same_dims(b) {
        return Err(SgiError::dim(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// Reads an 8- or 16-bit RGB PNG or binary PPM, normalized to `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)?
        .with_guessed_format()
        .map_err(SgiError::Io)?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Pnm) => {}
        other => {
            return Err(SgiError::Image(format!(
                "{}: unsupported format {other:?}",
                path.display()
            )))
        }
    }
    let decoded = reader
        .decode()
        .map_err(|e| SgiError::Image(format!("{}: {e}", path.display())))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let data: Vec<f32> = match decoded {
        DynamicImage::ImageRgb8(buf) => buf.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        DynamicImage::ImageRgb16(buf) => buf
            .into_raw()
            .into_iter()
            .map(|v| v as f32 / 65535.0)
            .collect(),
        other => {
            return Err(SgiError::Image(format!(
                "{}: expected RGB, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    Image::from_data(w, h, data)
}

/// Converts a value to an 8-bit sample: `round(clamp(v, 0, 1) * 255)`, half up.
#[inline]
pub fn to_byte(v: f32) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor() as u8
}

pub fn to_rgb8(img: &Image) -> RgbImage {
    let mut out = RgbImage::new(img.width as u32, img.height as u32);
    for (px, chunk) in out.pixels_mut().zip(img.data.chunks_exact(CHANNELS)) {
        *px = Rgb([to_byte(chunk[0]), to_byte(chunk[1]), to_byte(chunk[2])]);
    }
    out
}

/// Writes an 8-bit RGB PNG regardless of the file extension.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    to_rgb8(img)
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => SgiError::Io(io),
            other => SgiError::Image(format!("{}: {other}", path.display())),
        })
}

#[derive(Debug, Clone)]
pub struct ImagePyramid {
    pub levels: Vec<Image>,
}

impl ImagePyramid {
    pub fn level(&self, l: usize) -> &Image {
        &self.levels[l]
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let mut i = i;
    // Mirror without repeating the edge sample.
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Dimensions of each pyramid level for an image of the given size.
pub fn pyramid_dims(width: usize, height: usize, levels: usize) -> Vec<(usize, usize)> {
    let mut dims = Vec::with_capacity(levels);
    let (mut w, mut h) = (width, height);
    for _ in 0..levels {
        dims.push((w, h));
        w = w.div_ceil(2);
        h = h.div_ceil(2);
    }
    dims
}

/// Blur with the binomial kernel and keep every second pixel.
pub fn downsample_half(img: &Image) -> Image {
    let (w, h) = (img.width, img.height);
    let (ow, oh) = (w.div_ceil(2), h.div_ceil(2));

    // Horizontal pass at even columns only.
    let mut tmp = vec![0.0f64; ow * h * CHANNELS];
    for y in 0..h {
        for ox in 0..ow {
            let x = (2 * ox) as isize;
            let mut acc = [0.0f64; CHANNELS];
            for (t, &wt) in PYRAMID_KERNEL.iter().enumerate() {
                let sx = reflect(x + t as isize - 2, w);
                let base = img.index(sx, y, 0);
                for c in 0..CHANNELS {
                    acc[c] += wt * img.data[base + c] as f64;
                }
            }
            let base = (y * ow + ox) * CHANNELS;
            tmp[base..base + CHANNELS].copy_from_slice(&acc);
        }
    }

    let mut out = Image::new(ow, oh);
    for oy in 0..oh {
        let y = (2 * oy) as isize;
        for ox in 0..ow {
            let mut acc = [0.0f64; CHANNELS];
            for (t, &wt) in PYRAMID_KERNEL.iter().enumerate() {
                let sy = reflect(y + t as isize - 2, h);
                let base = (sy * ow + ox) * CHANNELS;
                for c in 0..CHANNELS {
                    acc[c] += wt * tmp[base + c];
                }
            }
            let base = out.index(ox, oy, 0);
            for c in 0..CHANNELS {
                out.data[base + c] = acc[c] as f32;
            }
        }
    }
    out
}

/// Builds an `levels`-level Gaussian pyramid, finest first.
pub fn build_pyramid(img: &Image, levels: usize) -> Result<ImagePyramid> {
    if levels == 0 {
        return Err(SgiError::config("pyramid needs at least one level"));
    }
    let dims = pyramid_dims(img.width, img.height, levels);
    let (cw, ch) = dims[levels - 1];
    if levels > 1 && (cw < MIN_PYRAMID_EDGE || ch < MIN_PYRAMID_EDGE) {
        return Err(SgiError::config(format!(
            "{levels} levels on {}x{} leaves a {cw}x{ch} coarsest level (minimum {MIN_PYRAMID_EDGE})",
            img.width, img.height
        )));
    }
    let mut out = Vec::with_capacity(levels);
    out.push(img.clone());
    for l in 1..levels {
        let next = downsample_half(&out[l - 1]);
        out.push(next);
    }
    Ok(ImagePyramid { levels: out })
}

/// Averages non-overlapping `factor`×`factor` blocks (edges use partial blocks).
pub fn downsample_area(img: &Image, factor: usize) -> Image {
    assert!(factor >= 1);
    let (ow, oh) = (img.width.div_ceil(factor), img.height.div_ceil(factor));
    let mut out = Image::new(ow, oh);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = [0.0f64; CHANNELS];
            let mut n = 0usize;
            for y in oy * factor..((oy + 1) * factor).min(img.height) {
                for x in ox * factor..((ox + 1) * factor).min(img.width) {
                    for c in 0..CHANNELS {
                        acc[c] += img.get(x, y, c) as f64;
                    }
                    n += 1;
                }
            }
            let base = out.index(ox, oy, 0);
            for c in 0..CHANNELS {
                out.data[base + c] = (acc[c] / n as f64) as f32;
            }
        }
    }
    out
}

/// Bilinear resampling with pixel centers at half-integers and clamped edges.
pub fn resize_bilinear(img: &Image, width: usize, height: usize) -> Image {
    let sx = img.width as f64 / width as f64;
    let sy = img.height as f64 / height as f64;
    let mut out = Image::new(width, height);
    let sample_axis = |p: f64, n: usize| -> (usize, usize, f64) {
        let p = (p - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f64)
    };
    for y in 0..height {
        let (y0, y1, fy) = sample_axis((y as f64 + 0.5) * sy, img.height);
        for x in 0..width {
            let (x0, x1, fx) = sample_axis((x as f64 + 0.5) * sx, img.width);
            let base = out.index(x, y, 0);
            for c in 0..CHANNELS {
                let top = img.get(x0, y0, c) as f64 * (1.0 - fx) + img.get(x1, y0, c) as f64 * fx;
                let bot = img.get(x0, y1, c) as f64 * (1.0 - fx) + img.get(x1, y1, c) as f64 * fx;
                out.data[base + c] = (top * (1.0 - fy) + bot * fy) as f32;
            }
        }
    }
    out
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    dim_check(a, b)?;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.data.len() as f64)
}

/// Peak-1.0 PSNR in dB; identical images give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / m).log10())
}

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= total;
    }
    k
}

/// Valid-region separable filtering of a single-channel plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                acc += kv * row[x + t];
            }
            tmp[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                acc += kv * tmp[(y + t) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5), averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    dim_check(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(SgiError::dim(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.width, a.height
        )));
    }
    let (w, h) = (a.width, a.height);
    let k = ssim_kernel();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..CHANNELS {
        let pa: Vec<f64> = a.data.iter().skip(c).step_by(CHANNELS).map(|&v| v as f64).collect();
        let pb: Vec<f64> = b.data.iter().skip(c).step_by(CHANNELS).map(|&v| v as f64).collect();
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(&pa, w, h, &k);
        let mu_b = filter_valid(&pb, w, h, &k);
        let e_aa = filter_valid(&aa, w, h, &k);
        let e_bb = filter_valid(&bb, w, h, &k);
        let e_ab = filter_valid(&ab, w, h, &k);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        count += mu_a.len();
    }
    Ok(total / count as f64)
}

/// Mean absolute error over `f64` render values and its subgradient.
///
/// The gradient entry is `sign(r - t) / count`, with `sign(0) = 0`.
pub fn l1_residual(rendered: &[f64], target: &[f32]) -> Result<(f64, Vec<f64>)> {
    if rendered.len() != target.len() {
        return Err(SgiError::dim(format!(
            "render has {} values, target {}",
            rendered.len(),
            target.len()
        )));
    }
    let inv = 1.0 / rendered.len() as f64;
    let mut loss = 0.0;
    let grad = rendered
        .iter()
        .zip(target)
        .map(|(&r, &t)| {
            let d = r - t as f64;
            loss += d.abs();
            if d > 0.0 {
                inv
            } else if d < 0.0 {
                -inv
            } else {
                0.0
            }
        })
        .collect();
    Ok((loss * inv, grad))
}

pub fn l1_loss_and_grad(rendered: &Image, target: &Image) -> Result<(f64, Vec<f64>)> {
    dim_check(rendered, target)?;
    let r: Vec<f64> = rendered.data.iter().map(|&v| v as f64).collect();
    l1_residual(&r, &target.data)
}
