//! 16-bit frequency tables for quantized Gaussian symbols.
//!
//! A table covers a window of bins around the predicted mean plus one escape
//! bucket on each side. Bins hold one symbol unless the prediction is much
//! wider than the step, in which case they hold a power-of-two run of symbols
//! and the offset inside the bin is coded uniformly. Escaped symbols are
//! followed by their offset in the stream's `[s_min, s_max]` range, coded
//! uniformly.

use libm::erfc;

use super::range_coder::{Cdf, RangeDecoder, RangeEncoder, MAX_TOTAL};
use crate::error::{Result, SgiError};

/// Upper bound on the window half-width in units of `σ / q`.
pub const WINDOW_SIGMAS: f64 = 8.0;
/// Upper bound on the window half-width, in bins.
pub const MAX_HALF_WIDTH: i64 = 2048;
/// Bins are widened until there are fewer than twice this many per `σ`.
pub const BINS_PER_SIGMA: f64 = 32.0;
const MAX_BIN_WIDTH: i64 = 1 << 40;

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// A frequency table over bins `[b_lo, b_hi]` with escape buckets at index 0
/// and `b_hi - b_lo + 2`. Bin `b` holds symbols `origin + b·width ..` up to
/// `width` of them, clipped to `[s_min, s_max]`; `[lo, hi]` is the union.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolTable {
    pub lo: i64,
    pub hi: i64,
    pub origin: i64,
    pub width: i64,
    pub b_lo: i64,
    pub b_hi: i64,
    pub s_min: i64,
    pub s_max: i64,
    pub cdf: Cdf,
}

/// Boundary of the Gaussian at standardized `z`, kept on its tail side:
/// `(true, Φ(z))` below zero and `(false, 1 - Φ(z))` otherwise.
fn tail(z: f64) -> (bool, f64) {
    if z < 0.0 {
        (true, 0.5 * erfc(-z * FRAC_1_SQRT_2))
    } else {
        (false, 0.5 * erfc(z * FRAC_1_SQRT_2))
    }
}

fn mass_between(a: (bool, f64), b: (bool, f64)) -> f64 {
    match (a.0, b.0) {
        (true, true) => b.1 - a.1,
        (false, false) => a.1 - b.1,
        (true, false) => 1.0 - a.1 - b.1,
        (false, true) => 0.0,
    }
    .max(0.0)
}

/// Integer frequencies proportional to `masses`, each at least 1, summing to 2¹⁶.
///
/// Floors at 1 first, then hands out the remaining deficit by largest
/// fractional part (or takes back the excess from the largest buckets).
pub fn apportion(masses: &[f64]) -> Result<Vec<u32>> {
    let n = masses.len();
    if n == 0 || n > MAX_TOTAL as usize {
        return Err(SgiError::numeric(format!("cannot apportion {n} buckets")));
    }
    let sum: f64 = masses.iter().sum();
    let total = MAX_TOTAL as f64;
    let scaled: Vec<f64> = if sum > 0.0 && sum.is_finite() {
        masses.iter().map(|m| m / sum * total).collect()
    } else {
        vec![total / n as f64; n]
    };
    let mut freqs: Vec<u32> = scaled.iter().map(|&x| (x.floor() as u32).max(1)).collect();
    let assigned: i64 = freqs.iter().map(|&f| f as i64).sum();
    let mut diff = MAX_TOTAL as i64 - assigned;
    if diff > 0 {
        let mut order: Vec<usize> = (0..n).collect();
        let frac = |i: usize| scaled[i] - scaled[i].floor();
        order.sort_by(|&a, &b| frac(b).total_cmp(&frac(a)).then(a.cmp(&b)));
        for &i in order.iter().cycle() {
            if diff == 0 {
                break;
            }
            freqs[i] += 1;
            diff -= 1;
        }
    } else if diff < 0 {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| freqs[b].cmp(&freqs[a]).then(a.cmp(&b)));
        while diff < 0 {
            let mut changed = false;
            for &i in &order {
                if diff == 0 {
                    break;
                }
                if freqs[i] > 1 {
                    freqs[i] -= 1;
                    diff += 1;
                    changed = true;
                }
            }
            if !changed {
                return Err(SgiError::numeric("cannot renormalize frequency table"));
            }
        }
    }
    Ok(freqs)
}

/// Bin width for a prediction: 1 up to `2·BINS_PER_SIGMA` steps per `σ`,
/// then the power of two leaving between 32 and 64 bins per `σ`.
pub fn bin_width(sigma: f64, q: f64) -> i64 {
    let ratio = sigma / q;
    let mut w = 1i64;
    while w < MAX_BIN_WIDTH && (2 * w) as f64 * BINS_PER_SIGMA <= ratio {
        w *= 2;
    }
    w
}

/// Bin layout `(origin, width, b_lo, b_hi)` for a prediction, clipped to the
/// stream range. Bin 0 contains the symbol nearest the mean.
pub fn bin_layout(mean: f64, sigma: f64, q: f64, s_min: i64, s_max: i64) -> (i64, i64, i64, i64) {
    let center = (mean / q).round();
    let center = if center.is_finite() {
        (center.clamp(s_min as f64, s_max as f64)) as i64
    } else {
        s_min
    };
    let width = bin_width(sigma, q);
    let origin = center - width / 2;
    let bins_per_sigma = sigma / (q * width as f64);
    // Bins whose mass is below one count go through the escape buckets, so
    // the window ends where the density drops to 2^-16 per bin.
    let count_z = (2.0 * (MAX_TOTAL as f64 / (bins_per_sigma * (2.0 * std::f64::consts::PI).sqrt())).ln())
        .max(0.0)
        .sqrt();
    let reach = (count_z.min(WINDOW_SIGMAS) * bins_per_sigma).ceil();
    let half = if reach.is_finite() {
        (reach as i64).saturating_add(1).min(MAX_HALF_WIDTH)
    } else {
        MAX_HALF_WIDTH
    };
    let b_lo = (-half).max((s_min - origin).div_euclid(width));
    let b_hi = half.min((s_max - origin).div_euclid(width));
    (origin, width, b_lo, b_hi)
}

/// Table for `N(mean, sigma)` quantized with step `q`, for a stream whose
/// symbols lie in `[s_min, s_max]`.
pub fn fixed_point_cdf(mean: f64, sigma: f64, q: f64, s_min: i64, s_max: i64) -> Result<SymbolTable> {
    if s_min > s_max {
        return Err(SgiError::numeric("empty symbol range"));
    }
    if !(sigma > 0.0 && q > 0.0 && mean.is_finite()) {
        return Err(SgiError::numeric("invalid distribution parameters"));
    }
    let (origin, width, b_lo, b_hi) = bin_layout(mean, sigma, q, s_min, s_max);
    let lo = (origin + b_lo * width).max(s_min);
    let hi = (origin + b_hi * width + width - 1).min(s_max);
    let boundary = |k: i64| tail(((k as f64 - 0.5) * q - mean) / sigma);
    let mut masses = Vec::with_capacity((b_hi - b_lo + 3) as usize);
    let mut prev = boundary(lo);
    masses.push(if prev.0 { prev.1 } else { 1.0 - prev.1 });
    for b in b_lo..=b_hi {
        let end = (origin + (b + 1) * width).min(hi + 1);
        let next = boundary(end);
        masses.push(mass_between(prev, next));
        prev = next;
    }
    masses.push(if prev.0 { 1.0 - prev.1 } else { prev.1 });
    let freqs = apportion(&masses)?;
    Ok(SymbolTable {
        lo,
        hi,
        origin,
        width,
        b_lo,
        b_hi,
        s_min,
        s_max,
        cdf: Cdf::from_freqs(&freqs)?,
    })
}

impl SymbolTable {
    fn span(&self) -> u64 {
        (self.s_max - self.s_min) as u64 + 1
    }

    /// First symbol and symbol count of bin `b`.
    fn bin_range(&self, b: i64) -> (i64, u64) {
        let start = (self.origin + b * self.width).max(self.lo);
        let end = (self.origin + (b + 1) * self.width - 1).min(self.hi);
        (start, (end - start) as u64 + 1)
    }

    fn bin_of(&self, symbol: i64) -> i64 {
        (symbol - self.origin).div_euclid(self.width)
    }

    pub fn encode(&self, enc: &mut RangeEncoder, symbol: i64) -> Result<()> {
        if symbol < self.s_min || symbol > self.s_max {
            return Err(SgiError::numeric(format!(
                "symbol {symbol} outside stream range [{}, {}]",
                self.s_min, self.s_max
            )));
        }
        if symbol < self.lo || symbol > self.hi {
            let bucket = if symbol < self.lo { 0 } else { self.cdf.symbols() - 1 };
            enc.encode_symbol(&self.cdf, bucket)?;
            return enc.encode_uniform((symbol - self.s_min) as u64, self.span());
        }
        let b = self.bin_of(symbol);
        enc.encode_symbol(&self.cdf, (b - self.b_lo + 1) as usize)?;
        let (start, n) = self.bin_range(b);
        if n > 1 {
            enc.encode_uniform((symbol - start) as u64, n)?;
        }
        Ok(())
    }

    pub fn decode(&self, dec: &mut RangeDecoder) -> Result<i64> {
        let idx = dec.decode_symbol(&self.cdf)?;
        if idx == 0 || idx == self.cdf.symbols() - 1 {
            let offset = dec.decode_uniform(self.span())?;
            return Ok(self.s_min + offset as i64);
        }
        let (start, n) = self.bin_range(self.b_lo + idx as i64 - 1);
        let offset = if n > 1 { dec.decode_uniform(n)? } else { 0 };
        Ok(start + offset as i64)
    }

    /// Cost in bits of coding `symbol` with this table.
    pub fn cost_bits(&self, symbol: i64) -> f64 {
        let total = self.cdf.total() as f64;
        if symbol < self.lo || symbol > self.hi {
            let bucket = if symbol < self.lo { 0 } else { self.cdf.symbols() - 1 };
            return -(self.cdf.freq(bucket) as f64 / total).log2() + (self.span() as f64).log2();
        }
        let b = self.bin_of(symbol);
        let (_, n) = self.bin_range(b);
        -(self.cdf.freq((b - self.b_lo + 1) as usize) as f64 / total).log2() + (n as f64).log2()
    }
}
