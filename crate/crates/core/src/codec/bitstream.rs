//! The `.sgi` container.
//!
//! Layout (little-endian): fixed header, then length-prefixed sections in
//! the order color MLP, covariance MLP, context MLP, hash grid, positions,
//! and one stream per attribute group, then a CRC-32 of everything before it.
//! Positions and the grid precede the attributes so the decoder can rebuild
//! every context before it needs a probability.

use rayon::prelude::*;
use serde::Serialize;

use super::cdf::fixed_point_cdf;
use super::positions::{decode_positions, encode_positions};
use super::range_coder::{symbol_checksum, Cdf, RangeDecoder, RangeEncoder};
use crate::entropy::{quantize_test, seed_contexts, BinaryHashGrid, GridConfig, QuantConfig, SeedContext};
use crate::error::{Result, SgiError};
use crate::model::{AttrGroup, ModelConfig, SeedSet, SgiModel};
use crate::nn::Mlp;

pub const MAGIC: &[u8; 4] = b"SGI1";
pub const VERSION: u16 = 1;

const MAX_EDGE: u32 = 1 << 16;
const MAX_SEEDS: u32 = 1 << 24;
const MAX_GRID_ENTRIES: usize = 1 << 28;

#[derive(Debug, Clone, PartialEq)]
pub struct SgiHeader {
    pub version: u16,
    pub width: u32,
    pub height: u32,
    pub n_seeds: u32,
    pub gaussians_per_seed: u32,
    pub feature_dim: u32,
    pub quant_steps: [f32; 4],
    pub scale_cap: f32,
    pub min_scale: f32,
    pub grid_resolutions: Vec<u32>,
    pub grid_table_size: u32,
    pub grid_features: u32,
    pub position_mode: u8,
    /// `(in, hidden, out)` of the color, covariance and context MLPs.
    pub mlp_dims: [[u32; 3]; 3],
}

impl SgiHeader {
    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        for v in [
            self.width,
            self.height,
            self.n_seeds,
            self.gaussians_per_seed,
            self.feature_dim,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.quant_steps.iter().chain([&self.scale_cap, &self.min_scale]) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.grid_resolutions.len() as u32).to_le_bytes());
        for r in &self.grid_resolutions {
            out.extend_from_slice(&r.to_le_bytes());
        }
        out.extend_from_slice(&self.grid_table_size.to_le_bytes());
        out.extend_from_slice(&self.grid_features.to_le_bytes());
        out.push(self.position_mode);
        for dims in &self.mlp_dims {
            for d in dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
        }
    }

    fn read(r: &mut Reader) -> Result<Self> {
        if r.take(4)? != MAGIC {
            return Err(SgiError::corrupt("not an SGI bitstream (bad magic)"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(SgiError::corrupt(format!("unsupported bitstream version {version}")));
        }
        let width = r.u32()?;
        let height = r.u32()?;
        let n_seeds = r.u32()?;
        let gaussians_per_seed = r.u32()?;
        let feature_dim = r.u32()?;
        let quant_steps = [r.f32()?, r.f32()?, r.f32()?, r.f32()?];
        let scale_cap = r.f32()?;
        let min_scale = r.f32()?;
        let levels = r.u32()?;
        if levels == 0 || levels > 16 {
            return Err(SgiError::corrupt(format!("implausible grid level count {levels}")));
        }
        let grid_resolutions = (0..levels).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let grid_table_size = r.u32()?;
        let grid_features = r.u32()?;
        let position_mode = r.u8()?;
        let mut mlp_dims = [[0u32; 3]; 3];
        for dims in &mut mlp_dims {
            for d in dims.iter_mut() {
                *d = r.u32()?;
            }
        }
        let h = Self {
            version,
            width,
            height,
            n_seeds,
            gaussians_per_seed,
            feature_dim,
            quant_steps,
            scale_cap,
            min_scale,
            grid_resolutions,
            grid_table_size,
            grid_features,
            position_mode,
            mlp_dims,
        };
        h.check()?;
        Ok(h)
    }

    fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(SgiError::corrupt(format!("implausible header: {m}")));
        if self.width == 0 || self.height == 0 || self.width > MAX_EDGE || self.height > MAX_EDGE {
            return bad("image size");
        }
        if self.n_seeds == 0 || self.n_seeds > MAX_SEEDS || self.n_seeds as u64 > self.width as u64 * self.height as u64 {
            return bad("seed count");
        }
        if self.gaussians_per_seed == 0 || self.gaussians_per_seed > 4096 || self.feature_dim == 0 || self.feature_dim > 4096 {
            return bad("seed dimensions");
        }
        let grid = self.grid_config();
        if grid.validate().is_err() || grid.entry_count() > MAX_GRID_ENTRIES {
            return bad("hash grid");
        }
        if self.config().validate().is_err() {
            return bad("model parameters");
        }
        let (k, d) = (self.gaussians_per_seed, self.feature_dim);
        let expect = [[d, 3 * k], [d, 3 * k], [grid.feature_len() as u32, 12]];
        for (dims, e) in self.mlp_dims.iter().zip(expect) {
            if dims[0] != e[0] || dims[2] != e[1] || dims[1] == 0 {
                return bad("mlp dimensions");
            }
        }
        Ok(())
    }

    pub fn grid_config(&self) -> GridConfig {
        GridConfig {
            resolutions: self.grid_resolutions.clone(),
            table_size: self.grid_table_size,
            features: self.grid_features,
        }
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            n_seeds: self.n_seeds as usize,
            gaussians_per_seed: self.gaussians_per_seed as usize,
            feature_dim: self.feature_dim as usize,
            quant_steps: self.quant_steps.map(|q| q as f64),
            scale_cap: self.scale_cap as f64,
            min_scale: self.min_scale as f64,
            color_hidden: self.mlp_dims[0][1] as usize,
            shape_hidden: self.mlp_dims[1][1] as usize,
            context_hidden: self.mlp_dims[2][1] as usize,
            grid: self.grid_config(),
        }
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or_else(|| SgiError::corrupt("truncated bitstream"))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn section(&mut self) -> Result<&'a [u8]> {
        let len = self.u32()? as usize;
        self.take(len)
    }
}

/// Bytes per component; sums to the file length.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SizeReport {
    /// Magic, header fields and the trailing checksum.
    pub header: usize,
    pub mlps: usize,
    pub hash_grid: usize,
    pub positions: usize,
    /// One entry per attribute group, in [`AttrGroup`] order.
    pub attributes: [usize; 4],
    pub total: usize,
}

impl SizeReport {
    /// `(component, bytes)` rows: positions, features, scalings, offsets, grid, MLPs, header.
    pub fn rows(&self) -> Vec<(&'static str, usize)> {
        vec![
            ("x_a", self.positions),
            ("f_a", self.attributes[0]),
            ("s_o,s_a", self.attributes[1] + self.attributes[2]),
            ("delta", self.attributes[3]),
            ("hash_grid", self.hash_grid),
            ("mlps", self.mlps),
            ("header", self.header),
        ]
    }

    pub fn sum(&self) -> usize {
        self.header + self.mlps + self.hash_grid + self.positions + self.attributes.iter().sum::<usize>()
    }
}

impl std::fmt::Display for SizeReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<10} {:>12} {:>8}", "component", "bytes", "share")?;
        for (name, bytes) in self.rows() {
            let share = 100.0 * bytes as f64 / self.total.max(1) as f64;
            writeln!(f, "{name:<10} {bytes:>12} {share:>7.2}%")?;
        }
        write!(f, "{:<10} {:>12} {:>7.2}%", "total", self.total, 100.0)
    }
}

/// Static binary table for the grid's signs, or `None` when all agree.
fn grid_table(n1: u64, n: u64) -> Result<Option<Cdf>> {
    if n1 == 0 || n1 == n {
        return Ok(None);
    }
    let f1 = ((n1 as f64 / n as f64 * 65536.0).round() as u32).clamp(1, 65535);
    Cdf::from_freqs(&[65536 - f1, f1]).map(Some)
}

/// Codes the signs with static `p(+1) = n1 / n`: `n1` (u64), checksum (u32), payload.
pub fn encode_hash_grid(grid: &BinaryHashGrid) -> Result<Vec<u8>> {
    let signs = grid.signs();
    let n1 = signs.iter().filter(|&&s| s).count() as u64;
    let mut out = Vec::new();
    out.extend_from_slice(&n1.to_le_bytes());
    out.extend_from_slice(&symbol_checksum(signs.iter().map(|&s| s as u32)).to_le_bytes());
    if let Some(table) = grid_table(n1, signs.len() as u64)? {
        let mut enc = RangeEncoder::new();
        for &s in &signs {
            enc.encode_symbol(&table, s as usize)?;
        }
        out.extend(enc.finish());
    }
    Ok(out)
}

pub fn decode_hash_grid(bytes: &[u8], config: GridConfig, width: usize, height: usize) -> Result<BinaryHashGrid> {
    let mut r = Reader { data: bytes, pos: 0 };
    let n1 = r.u64()?;
    let checksum = r.u32()?;
    let n = config.entry_count() as u64;
    if n1 > n {
        return Err(SgiError::corrupt("grid +1 count exceeds entry count"));
    }
    let signs: Vec<bool> = match grid_table(n1, n)? {
        None => vec![n1 == n; n as usize],
        Some(table) => {
            let mut dec = RangeDecoder::new(&bytes[12..]);
            (0..n).map(|_| dec.decode_symbol(&table).map(|s| s == 1)).collect::<Result<_>>()?
        }
    };
    if symbol_checksum(signs.iter().map(|&s| s as u32)) != checksum
        || signs.iter().filter(|&&s| s).count() as u64 != n1
    {
        return Err(SgiError::corrupt("hash grid checksum mismatch"));
    }
    BinaryHashGrid::from_signs(config, width, height, &signs)
}

/// One attribute group's symbols, coded with per-seed tables:
/// `s_min` (i32), `s_max` (i32), checksum (u32), payload.
fn encode_attribute_stream(contexts: &[SeedContext], group: AttrGroup, symbols: &[i64], dim: usize) -> Result<Vec<u8>> {
    let j = group as usize;
    let s_min = *symbols.iter().min().unwrap();
    let s_max = *symbols.iter().max().unwrap();
    let mut enc = RangeEncoder::new();
    for (ctx, chunk) in contexts.iter().zip(symbols.chunks_exact(dim)) {
        let table = fixed_point_cdf(ctx.dist.mean[j], ctx.dist.scale[j], ctx.q[j], s_min, s_max)?;
        for &s in chunk {
            table.encode(&mut enc, s)?;
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(&(s_min as i32).to_le_bytes());
    out.extend_from_slice(&(s_max as i32).to_le_bytes());
    out.extend_from_slice(&symbol_checksum(symbols.iter().map(|&s| s as i32 as u32)).to_le_bytes());
    out.extend(enc.finish());
    Ok(out)
}

fn decode_attribute_stream(bytes: &[u8], contexts: &[SeedContext], group: AttrGroup, dim: usize) -> Result<Vec<i64>> {
    let j = group as usize;
    let mut r = Reader { data: bytes, pos: 0 };
    let s_min = r.i32()? as i64;
    let s_max = r.i32()? as i64;
    let checksum = r.u32()?;
    if s_min > s_max {
        return Err(SgiError::corrupt("empty attribute symbol range"));
    }
    let mut dec = RangeDecoder::new(&bytes[12..]);
    let mut symbols = Vec::with_capacity(contexts.len() * dim);
    for ctx in contexts {
        let table = fixed_point_cdf(ctx.dist.mean[j], ctx.dist.scale[j], ctx.q[j], s_min, s_max)?;
        for _ in 0..dim {
            symbols.push(table.decode(&mut dec)?);
        }
    }
    if symbol_checksum(symbols.iter().map(|&s| s as i32 as u32)) != checksum {
        return Err(SgiError::corrupt(format!("{} stream checksum mismatch", group.name())));
    }
    Ok(symbols)
}

/// Result of [`encode_model`].
#[derive(Debug, Clone)]
pub struct EncodedModel {
    pub bytes: Vec<u8>,
    pub report: SizeReport,
    /// The model exactly as [`decode_model`] will reconstruct it.
    pub decoded: SgiModel,
}

/// Rounds everything stored as `f32` and binarizes the grid.
fn storage_form(model: &SgiModel) -> Result<SgiModel> {
    let mut m = model.clone();
    for mlp in [&mut m.color, &mut m.shape, &mut m.context] {
        mlp.round_to_f32();
    }
    let c = &mut m.config;
    c.quant_steps = c.quant_steps.map(|q| q as f32 as f64);
    c.scale_cap = c.scale_cap as f32 as f64;
    c.min_scale = c.min_scale as f32 as f64;
    m.grid = BinaryHashGrid::from_signs(m.grid.config.clone(), m.seeds.width, m.seeds.height, &m.grid.signs())?;
    Ok(m)
}

fn check_model(model: &SgiModel) -> Result<()> {
    let (s, c) = (&model.seeds, &model.config);
    c.validate()?;
    if s.level != 0 {
        return Err(SgiError::config("only full-resolution seed sets can be encoded"));
    }
    if s.len() != c.n_seeds || s.gaussians_per_seed != c.gaussians_per_seed || s.feature_dim != c.feature_dim {
        return Err(SgiError::dim("seed set disagrees with the model configuration"));
    }
    if s.width as u64 > MAX_EDGE as u64 || s.height as u64 > MAX_EDGE as u64 || s.len() as u64 > MAX_SEEDS as u64 {
        return Err(SgiError::config("image or seed count too large for the container"));
    }
    if model.grid.config != c.grid {
        return Err(SgiError::dim("hash grid disagrees with the model configuration"));
    }
    let expect = |m: &Mlp, i: usize, o: usize| m.in_dim == i && m.out_dim == o;
    let (k, d) = (c.gaussians_per_seed, c.feature_dim);
    if !expect(&model.color, d, 3 * k) || !expect(&model.shape, d, 3 * k) || !expect(&model.context, c.grid.feature_len(), 12) {
        return Err(SgiError::dim("mlp shapes disagree with the model configuration"));
    }
    Ok(())
}

fn push_section(out: &mut Vec<u8>, body: &[u8]) -> usize {
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(body);
    4 + body.len()
}

pub fn encode_model(model: &SgiModel) -> Result<EncodedModel> {
    check_model(model)?;
    let mut m = storage_form(model)?;
    let (w, h) = (m.seeds.width, m.seeds.height);

    let pos = encode_positions(&m.seeds.positions, w, h, m.init_seed as u32)?;
    m.seeds = m.seeds.permuted(&pos.order);
    m.seeds.positions = pos.positions.clone();

    let quant = QuantConfig::new(m.config.quant_steps)?;
    let contexts = seed_contexts(&m.seeds, &m.grid, &m.context, &quant)?;
    let quantized: Vec<(Vec<i64>, Vec<f64>)> = AttrGroup::ALL
        .iter()
        .map(|&g| {
            let dim = m.seeds.group_dim(g);
            let mut symbols = Vec::with_capacity(m.seeds.len() * dim);
            let mut values = Vec::with_capacity(m.seeds.len() * dim);
            for (i, ctx) in contexts.iter().enumerate() {
                for &v in m.seeds.seed_group(g, i) {
                    let (rec, s) = quantize_test(v, ctx.q[g as usize]);
                    if !v.is_finite() || s < i32::MIN as i64 || s > i32::MAX as i64 {
                        return Err(SgiError::numeric(format!(
                            "{} value {v} cannot be quantized with step {}",
                            g.name(),
                            ctx.q[g as usize]
                        )));
                    }
                    symbols.push(s);
                    values.push(rec);
                }
            }
            Ok((symbols, values))
        })
        .collect::<Result<_>>()?;
    let streams: Vec<Vec<u8>> = AttrGroup::ALL
        .par_iter()
        .map(|&g| encode_attribute_stream(&contexts, g, &quantized[g as usize].0, m.seeds.group_dim(g)))
        .collect::<Result<_>>()?;
    for (g, (_, values)) in AttrGroup::ALL.iter().zip(quantized) {
        *m.seeds.group_mut(*g) = values;
    }

    let c = &m.config;
    let header = SgiHeader {
        version: VERSION,
        width: w as u32,
        height: h as u32,
        n_seeds: c.n_seeds as u32,
        gaussians_per_seed: c.gaussians_per_seed as u32,
        feature_dim: c.feature_dim as u32,
        quant_steps: c.quant_steps.map(|q| q as f32),
        scale_cap: c.scale_cap as f32,
        min_scale: c.min_scale as f32,
        grid_resolutions: c.grid.resolutions.clone(),
        grid_table_size: c.grid.table_size,
        grid_features: c.grid.features,
        position_mode: pos.mode,
        mlp_dims: [&m.color, &m.shape, &m.context].map(|n| [n.in_dim as u32, n.hidden_dim as u32, n.out_dim as u32]),
    };
    let mut out = Vec::new();
    header.write(&mut out);
    let mut report = SizeReport {
        header: out.len() + 4,
        ..Default::default()
    };
    for mlp in [&m.color, &m.shape, &m.context] {
        report.mlps += push_section(&mut out, &mlp.to_bytes());
    }
    report.hash_grid = push_section(&mut out, &encode_hash_grid(&m.grid)?);
    report.positions = push_section(&mut out, &pos.payload);
    for (j, s) in streams.iter().enumerate() {
        report.attributes[j] = push_section(&mut out, s);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    report.total = out.len();
    debug_assert_eq!(report.sum(), report.total);
    Ok(EncodedModel {
        bytes: out,
        report,
        decoded: m,
    })
}

pub fn decode_model(bytes: &[u8]) -> Result<SgiModel> {
    if bytes.len() < 4 + 2 + 4 {
        return Err(SgiError::corrupt("truncated bitstream"));
    }
    if &bytes[..4] != MAGIC {
        return Err(SgiError::corrupt("not an SGI bitstream (bad magic)"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(trailer.try_into().unwrap()) {
        return Err(SgiError::corrupt("bitstream checksum mismatch (truncated or damaged)"));
    }
    let mut r = Reader { data: body, pos: 0 };
    let header = SgiHeader::read(&mut r)?;
    let config = header.config();
    let (w, h, n) = (header.width as usize, header.height as usize, header.n_seeds as usize);

    let mut mlps = Vec::with_capacity(3);
    for dims in &header.mlp_dims {
        let section = r.section()?;
        let (mlp, used) = Mlp::from_bytes(section)?;
        if used != section.len() || [mlp.in_dim, mlp.hidden_dim, mlp.out_dim] != dims.map(|d| d as usize) {
            return Err(SgiError::corrupt("mlp section disagrees with the header"));
        }
        mlps.push(mlp);
    }
    let context = mlps.pop().unwrap();
    let shape = mlps.pop().unwrap();
    let color = mlps.pop().unwrap();

    let grid = decode_hash_grid(r.section()?, header.grid_config(), w, h)?;
    let (positions, stored_seed) = decode_positions(header.position_mode, r.section()?, n, w, h)?;
    let mut seeds = SeedSet {
        width: w,
        height: h,
        level: 0,
        feature_dim: config.feature_dim,
        gaussians_per_seed: config.gaussians_per_seed,
        positions,
        attributes: Default::default(),
    };
    seeds.attributes = seeds.zero_attributes();
    let quant = QuantConfig::new(config.quant_steps)?;
    let contexts = seed_contexts(&seeds, &grid, &context, &quant)?;

    let sections: Vec<&[u8]> = (0..4).map(|_| r.section()).collect::<Result<_>>()?;
    if r.pos != body.len() {
        return Err(SgiError::corrupt("trailing bytes after the last section"));
    }
    let symbols: Vec<Vec<i64>> = AttrGroup::ALL
        .par_iter()
        .map(|&g| decode_attribute_stream(sections[g as usize], &contexts, g, seeds.group_dim(g)))
        .collect::<Result<_>>()?;
    for g in AttrGroup::ALL {
        let dim = seeds.group_dim(g);
        let values = &mut seeds.attributes[g as usize];
        for (i, ctx) in contexts.iter().enumerate() {
            for t in 0..dim {
                values[i * dim + t] = symbols[g as usize][i * dim + t] as f64 * ctx.q[g as usize];
            }
        }
    }
    Ok(SgiModel {
        config,
        seeds,
        color,
        shape,
        context,
        grid,
        init_seed: stored_seed.unwrap_or(0) as u64,
    })
}

/// Component sizes of an existing bitstream, as [`encode_model`] reported them.
pub fn size_report(bytes: &[u8]) -> Result<SizeReport> {
    if bytes.len() < 4 {
        return Err(SgiError::corrupt("truncated bitstream"));
    }
    let body = &bytes[..bytes.len() - 4];
    let mut r = Reader { data: body, pos: 0 };
    SgiHeader::read(&mut r)?;
    let mut report = SizeReport {
        header: r.pos + 4,
        ..Default::default()
    };
    let section = |r: &mut Reader| r.section().map(|s| 4 + s.len());
    for _ in 0..3 {
        report.mlps += section(&mut r)?;
    }
    report.hash_grid = section(&mut r)?;
    report.positions = section(&mut r)?;
    for j in 0..4 {
        report.attributes[j] = section(&mut r)?;
    }
    if r.pos != body.len() {
        return Err(SgiError::corrupt("trailing bytes after the last section"));
    }
    report.total = bytes.len();
    Ok(report)
}

/// Reads just the header of a bitstream.
pub fn read_header(bytes: &[u8]) -> Result<SgiHeader> {
    SgiHeader::read(&mut Reader { data: bytes, pos: 0 })
}
