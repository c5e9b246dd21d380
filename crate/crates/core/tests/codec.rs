use proptest::prelude::*;
use sgi_core::codec::{read_header, rc_decode, rc_encode, size_report, Cdf};
use sgi_core::model::AttrGroup;
use sgi_core::{decode_model, encode_model, render_model, ModelConfig, SgiError, SgiModel};

fn perturbed_model(w: usize, h: usize, n: usize, k: usize, seed: u64, spread: f64) -> SgiModel {
    let mut model = SgiModel::init(ModelConfig::new(n, k).with_feature_dim(6), w, h, seed).unwrap();
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    };
    for g in AttrGroup::ALL {
        for v in model.seeds.group_mut(g) {
            *v = next() * spread;
        }
    }
    model
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn round_trip_is_exact(w in 1usize..48, h in 1usize..48, n in 1usize..30, k in 1usize..5, seed in any::<u64>(), spread in 0.01f64..20.0) {
        let model = perturbed_model(w, h, n.min(w * h), k, seed, spread);
        let enc = encode_model(&model).unwrap();
        let dec = decode_model(&enc.bytes).unwrap();
        prop_assert_eq!(&dec.seeds, &enc.decoded.seeds);
        prop_assert_eq!(render_model(&dec).unwrap(), render_model(&enc.decoded).unwrap());
        prop_assert_eq!(encode_model(&dec).unwrap().bytes, enc.bytes.clone());
        prop_assert_eq!(size_report(&enc.bytes).unwrap(), enc.report.clone());
        let header = read_header(&enc.bytes).unwrap();
        prop_assert_eq!((header.width as usize, header.height as usize), (w, h));
        prop_assert_eq!(header.n_seeds as usize, n.min(w * h));
    }

    #[test]
    fn range_coder_round_trips(symbols in prop::collection::vec(0u32..9, 0..400)) {
        let freqs = [1u32, 5, 40, 300, 3000, 300, 40, 5, 1];
        let table = |_: usize, _: &[u32]| Cdf::from_freqs(&freqs);
        let stream = rc_encode(&symbols, table).unwrap();
        prop_assert_eq!(rc_decode(&stream.bytes, symbols.len(), stream.checksum, table).unwrap(), symbols);
    }
}

#[test]
fn every_byte_flip_is_detected() {
    let model = perturbed_model(20, 14, 12, 3, 7, 2.0);
    let bytes = encode_model(&model).unwrap().bytes;
    for i in 0..bytes.len() {
        let mut bad = bytes.clone();
        bad[i] ^= 1 << (i % 8);
        assert!(decode_model(&bad).is_err(), "flip at byte {i} went unnoticed");
    }
}

#[test]
fn truncation_and_garbage_are_rejected() {
    let bytes = encode_model(&perturbed_model(16, 16, 10, 2, 3, 1.0)).unwrap().bytes;
    for len in [0, 3, 4, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(decode_model(&bytes[..len]), Err(SgiError::Corrupt(_))), "length {len}");
    }
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(decode_model(&longer).is_err());
    assert!(decode_model(b"PNG\x00 not a stream at all").is_err());
}

#[test]
fn coder_matches_ideal_code_length() {
    let freqs = [2u32, 30, 400, 4000, 400, 30, 2];
    let cdf = Cdf::from_freqs(&freqs).unwrap();
    let total = cdf.total() as f64;
    let mut state = 12345u64;
    let symbols: Vec<u32> = (0..20_000)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let t = ((state >> 33) % cdf.total() as u64) as u32;
            cdf.find(t) as u32
        })
        .collect();
    let ideal: f64 = symbols.iter().map(|&s| -(freqs[s as usize] as f64 / total).log2()).sum();
    let stream = rc_encode(&symbols, |_, _| Ok(cdf.clone())).unwrap();
    let actual = stream.bytes.len() as f64 * 8.0;
    assert!(actual <= ideal * 1.002 + 64.0, "{actual} bits vs ideal {ideal:.0}");
}
