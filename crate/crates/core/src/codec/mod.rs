//! Bit-exact serialization of a trained model.

pub mod bitstream;
pub mod cdf;
pub mod positions;
pub mod range_coder;

pub use bitstream::{
    decode_hash_grid, decode_model, encode_hash_grid, encode_model, read_header, size_report, EncodedModel, SgiHeader,
    SizeReport,
};
pub use cdf::{fixed_point_cdf, SymbolTable};
pub use positions::{decode_positions, encode_positions, EncodedPositions};
pub use range_coder::{rc_decode, rc_encode, Cdf, RangeDecoder, RangeEncoder, RcStream};
