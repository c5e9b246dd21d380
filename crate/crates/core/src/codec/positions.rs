//! Seed position coding.
//!
//! Mode 0 stores only the canonical grid shape when positions are exactly the
//! grid produced by `init_seeds`. Mode 1 quantizes positions to 1/16 pixel,
//! sorts them by `(y, x)` and codes the deltas with an adaptive model.

use super::range_coder::{Cdf, RangeDecoder, RangeEncoder, MAX_TOTAL};
use crate::error::{Result, SgiError};
use crate::model::{grid_positions, grid_shape};

pub const MODE_GRID: u8 = 0;
pub const MODE_EXPLICIT: u8 = 1;
/// Fixed-point subdivisions per pixel in explicit mode.
pub const SUBPIXEL: f64 = 16.0;

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPositions {
    pub mode: u8,
    pub payload: Vec<u8>,
    /// `order[new] = old`: seed order in the stream (identity in mode 0).
    pub order: Vec<usize>,
    /// Positions as the decoder reconstructs them, in stream order.
    pub positions: Vec<f64>,
}

/// Adaptive frequency model over a small alphabet.
#[derive(Debug, Clone)]
struct AdaptiveModel {
    freqs: Vec<u32>,
}

const ADAPT_STEP: u32 = 24;

impl AdaptiveModel {
    fn new(symbols: usize) -> Self {
        Self { freqs: vec![1; symbols] }
    }

    fn cdf(&self) -> Result<Cdf> {
        Cdf::from_freqs(&self.freqs)
    }

    fn update(&mut self, s: usize) {
        self.freqs[s] += ADAPT_STEP;
        if self.freqs.iter().sum::<u32>() > MAX_TOTAL {
            for f in &mut self.freqs {
                *f = (*f).div_ceil(2);
            }
        }
    }
}

/// Codes non-negative integers as a bit-length class plus raw mantissa bits.
#[derive(Debug, Clone)]
struct IntegerCoder {
    classes: AdaptiveModel,
}

impl IntegerCoder {
    fn new() -> Self {
        Self {
            classes: AdaptiveModel::new(33),
        }
    }

    fn encode(&mut self, enc: &mut RangeEncoder, v: u32) -> Result<()> {
        let class = 32 - v.leading_zeros() as usize;
        enc.encode_symbol(&self.classes.cdf()?, class)?;
        self.classes.update(class);
        if class > 1 {
            let bits = class - 1;
            enc.encode_uniform((v - (1 << bits)) as u64, 1u64 << bits)?;
        }
        Ok(())
    }

    fn decode(&mut self, dec: &mut RangeDecoder) -> Result<u32> {
        let class = dec.decode_symbol(&self.classes.cdf()?)?;
        self.classes.update(class);
        Ok(match class {
            0 => 0,
            1 => 1,
            c => {
                let bits = c - 1;
                (1u32 << bits) + dec.decode_uniform(1u64 << bits)? as u32
            }
        })
    }
}

fn to_fixed(v: f64, limit: usize) -> u32 {
    (v * SUBPIXEL).round().clamp(0.0, limit as f64 * SUBPIXEL) as u32
}

/// Chooses grid mode when `positions` equal the canonical grid bit-exactly.
pub fn encode_positions(positions: &[f64], width: usize, height: usize, rng_seed: u32) -> Result<EncodedPositions> {
    let n = positions.len() / 2;
    if positions.len() % 2 != 0 || n == 0 {
        return Err(SgiError::dim("positions must be non-empty (x, y) pairs"));
    }
    if positions.iter().any(|v| !v.is_finite()) {
        return Err(SgiError::numeric("non-finite seed position"));
    }
    let canonical = grid_positions(width, height, n);
    if canonical.iter().zip(positions).all(|(a, b)| a.to_bits() == b.to_bits()) {
        let (rows, cols) = grid_shape(width, height, n);
        let mut payload = Vec::with_capacity(12);
        payload.extend_from_slice(&(rows as u32).to_le_bytes());
        payload.extend_from_slice(&(cols as u32).to_le_bytes());
        payload.extend_from_slice(&rng_seed.to_le_bytes());
        return Ok(EncodedPositions {
            mode: MODE_GRID,
            payload,
            order: (0..n).collect(),
            positions: canonical,
        });
    }

    let fixed: Vec<(u32, u32)> = (0..n)
        .map(|i| (to_fixed(positions[2 * i + 1], height), to_fixed(positions[2 * i], width)))
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (fixed[i], i));

    let mut enc = RangeEncoder::new();
    let (mut dy_coder, mut x_coder, mut dx_coder) = (IntegerCoder::new(), IntegerCoder::new(), IntegerCoder::new());
    let mut prev = (0u32, 0u32);
    let mut out = Vec::with_capacity(2 * n);
    for &i in &order {
        let (y, x) = fixed[i];
        let dy = y - prev.0;
        dy_coder.encode(&mut enc, dy)?;
        if dy == 0 {
            dx_coder.encode(&mut enc, x - prev.1)?;
        } else {
            x_coder.encode(&mut enc, x)?;
        }
        prev = (y, x);
        out.push(x as f64 / SUBPIXEL);
        out.push(y as f64 / SUBPIXEL);
    }
    Ok(EncodedPositions {
        mode: MODE_EXPLICIT,
        payload: enc.finish(),
        order,
        positions: out,
    })
}

/// Returns positions in stream order, plus the stored seed in grid mode.
pub fn decode_positions(mode: u8, payload: &[u8], n: usize, width: usize, height: usize) -> Result<(Vec<f64>, Option<u32>)> {
    match mode {
        MODE_GRID => {
            if payload.len() != 12 {
                return Err(SgiError::corrupt("grid-mode position section must be 12 bytes"));
            }
            let word = |k: usize| u32::from_le_bytes(payload[4 * k..4 * k + 4].try_into().unwrap());
            let (rows, cols) = grid_shape(width, height, n);
            if word(0) as usize != rows || word(1) as usize != cols {
                return Err(SgiError::corrupt("position grid shape disagrees with the header"));
            }
            Ok((grid_positions(width, height, n), Some(word(2))))
        }
        MODE_EXPLICIT => {
            let mut dec = RangeDecoder::new(payload);
            let (mut dy_coder, mut x_coder, mut dx_coder) = (IntegerCoder::new(), IntegerCoder::new(), IntegerCoder::new());
            let mut prev = (0u32, 0u32);
            let mut out = Vec::with_capacity(2 * n);
            for _ in 0..n {
                let dy = dy_coder.decode(&mut dec)?;
                let y = prev.0.checked_add(dy).ok_or_else(|| SgiError::corrupt("position overflow"))?;
                let x = if dy == 0 {
                    prev.1
                        .checked_add(dx_coder.decode(&mut dec)?)
                        .ok_or_else(|| SgiError::corrupt("position overflow"))?
                } else {
                    x_coder.decode(&mut dec)?
                };
                if x as f64 > width as f64 * SUBPIXEL || y as f64 > height as f64 * SUBPIXEL {
                    return Err(SgiError::corrupt("decoded position outside the image"));
                }
                prev = (y, x);
                out.push(x as f64 / SUBPIXEL);
                out.push(y as f64 / SUBPIXEL);
            }
            Ok((out, None))
        }
        m => Err(SgiError::corrupt(format!("unknown position mode {m}"))),
    }
}
