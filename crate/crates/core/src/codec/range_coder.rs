//! Byte-oriented range coder with carry propagation (LZMA style).
//!
//! Frequencies are integers whose total is at most 2¹⁶. The encoder drops the
//! leading byte (always zero) and trims trailing zero bytes after a minimal
//! flush; the decoder reads zeros past the end of its input.

use crate::error::{Result, SgiError};

/// Largest supported frequency total.
pub const MAX_TOTAL: u32 = 1 << 16;
const TOP: u32 = 1 << 24;

/// Cumulative frequency table: `cum[i]..cum[i + 1]` is symbol `i`'s range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cdf {
    pub cum: Vec<u32>,
}

impl Cdf {
    /// Builds a table from per-symbol frequencies.
    pub fn from_freqs(freqs: &[u32]) -> Result<Self> {
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        cum.push(0u32);
        let mut acc = 0u64;
        for &f in freqs {
            acc += f as u64;
            if acc > MAX_TOTAL as u64 {
                return Err(SgiError::numeric("frequency total exceeds 2^16"));
            }
            cum.push(acc as u32);
        }
        if acc == 0 {
            return Err(SgiError::numeric("empty frequency table"));
        }
        Ok(Self { cum })
    }

    pub fn symbols(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn total(&self) -> u32 {
        *self.cum.last().unwrap()
    }

    pub fn freq(&self, s: usize) -> u32 {
        self.cum[s + 1] - self.cum[s]
    }

    /// Symbol whose range contains `target`.
    pub fn find(&self, target: u32) -> usize {
        // Last index with cum[i] <= target; zero-width symbols are skipped.
        self.cum.partition_point(|&c| c <= target) - 1
    }
}

#[derive(Debug, Clone)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
    started: bool,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
            started: false,
        }
    }

    /// Codes the interval `[start, start + size)` out of `total`.
    pub fn encode(&mut self, start: u32, size: u32, total: u32) -> Result<()> {
        if size == 0 || total == 0 || total > MAX_TOTAL || start + size > total {
            return Err(SgiError::numeric(format!(
                "cannot code interval {start}+{size} of {total}"
            )));
        }
        let r = self.range / total;
        self.low += r as u64 * start as u64;
        self.range = r * size;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
        Ok(())
    }

    pub fn encode_symbol(&mut self, cdf: &Cdf, symbol: usize) -> Result<()> {
        if symbol >= cdf.symbols() {
            return Err(SgiError::numeric(format!("symbol {symbol} outside table")));
        }
        self.encode(cdf.cum[symbol], cdf.freq(symbol), cdf.total())
    }

    /// Codes `value` uniformly in `0..span` (any `span >= 1`).
    pub fn encode_uniform(&mut self, value: u64, span: u64) -> Result<()> {
        if value >= span {
            return Err(SgiError::numeric(format!("{value} outside uniform span {span}")));
        }
        if span <= MAX_TOTAL as u64 {
            if span > 1 {
                self.encode(value as u32, 1, span as u32)?;
            }
            return Ok(());
        }
        let (high_span, low) = (span.div_ceil(MAX_TOTAL as u64), value % MAX_TOTAL as u64);
        self.encode_uniform(value >> 16, high_span)?;
        self.encode(low as u32, 1, MAX_TOTAL)
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.emit(temp.wrapping_add(carry));
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    fn emit(&mut self, byte: u8) {
        if self.started {
            self.out.push(byte);
        } else {
            self.started = true;
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        // Any value in [low, low + range) decodes correctly; pick the one with
        // the most trailing zero bytes.
        let mask = (TOP - 1) as u64;
        if self.low & mask != 0 {
            self.low = (self.low + mask) & !mask;
        }
        for _ in 0..5 {
            self.shift_low();
        }
        while self.out.last() == Some(&0) {
            self.out.pop();
        }
        self.out
    }
}

#[derive(Debug, Clone)]
pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
    pending: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        let mut d = Self {
            data,
            pos: 0,
            code: 0,
            range: u32::MAX,
            pending: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.data.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    fn target(&mut self, total: u32) -> Result<u32> {
        if total == 0 || total > MAX_TOTAL {
            return Err(SgiError::numeric(format!("invalid frequency total {total}")));
        }
        self.pending = self.range / total;
        Ok((self.code / self.pending).min(total - 1))
    }

    fn consume(&mut self, start: u32, size: u32) {
        let r = self.pending;
        self.code = self.code.wrapping_sub(r * start);
        self.range = r * size;
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte() as u32;
        }
    }

    pub fn decode_symbol(&mut self, cdf: &Cdf) -> Result<usize> {
        let t = self.target(cdf.total())?;
        let s = cdf.find(t);
        self.consume(cdf.cum[s], cdf.freq(s));
        Ok(s)
    }

    pub fn decode_uniform(&mut self, span: u64) -> Result<u64> {
        if span == 0 {
            return Err(SgiError::numeric("empty uniform span"));
        }
        if span <= MAX_TOTAL as u64 {
            if span == 1 {
                return Ok(0);
            }
            let v = self.target(span as u32)?;
            self.consume(v, 1);
            return Ok(v as u64);
        }
        let high = self.decode_uniform(span.div_ceil(MAX_TOTAL as u64))?;
        let low = self.target(MAX_TOTAL)?;
        self.consume(low, 1);
        let v = (high << 16) | low as u64;
        if v >= span {
            return Err(SgiError::corrupt("uniform value outside its span"));
        }
        Ok(v)
    }
}

/// CRC-32 of a symbol sequence, each symbol as little-endian `u32`.
pub fn symbol_checksum(symbols: impl IntoIterator<Item = u32>) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for s in symbols {
        h.update(&s.to_le_bytes());
    }
    h.finalize()
}

/// Coded symbols plus a checksum of the symbol values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RcStream {
    pub bytes: Vec<u8>,
    pub checksum: u32,
}

/// Codes `symbols`; `cdf(i, previous)` returns the table for symbol `i`
/// given the symbols before it.
pub fn rc_encode<F>(symbols: &[u32], mut cdf: F) -> Result<RcStream>
where
    F: FnMut(usize, &[u32]) -> Result<Cdf>,
{
    let mut enc = RangeEncoder::new();
    for (i, &s) in symbols.iter().enumerate() {
        let table = cdf(i, &symbols[..i])?;
        if s as usize >= table.symbols() || table.freq(s as usize) == 0 {
            return Err(SgiError::numeric(format!("symbol {s} has zero mass")));
        }
        enc.encode_symbol(&table, s as usize)?;
    }
    Ok(RcStream {
        bytes: enc.finish(),
        checksum: symbol_checksum(symbols.iter().copied()),
    })
}

/// Decodes `count` symbols and verifies them against `checksum`.
pub fn rc_decode<F>(bytes: &[u8], count: usize, checksum: u32, mut cdf: F) -> Result<Vec<u32>>
where
    F: FnMut(usize, &[u32]) -> Result<Cdf>,
{
    let mut dec = RangeDecoder::new(bytes);
    let mut out = Vec::with_capacity(count.min(1 << 24));
    for i in 0..count {
        let table = cdf(i, &out)?;
        out.push(dec.decode_symbol(&table)? as u32);
    }
    if symbol_checksum(out.iter().copied()) != checksum {
        return Err(SgiError::corrupt("symbol checksum mismatch"));
    }
    Ok(out)
}
