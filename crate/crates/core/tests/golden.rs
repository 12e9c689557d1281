//! Frozen outputs of the seeded weight generator and the weight file format.

use segkv::model::{encode_weights, fnv1a64, random_weights, ModelConfig};

#[test]
fn seed_42_weights_are_stable() {
    let c = ModelConfig::tiny(2, 2, 8);
    let w = random_weights(&c, 42).unwrap();
    let head: Vec<u32> = w.token_embedding.data()[..4].iter().map(|v| v.to_bits()).collect();
    assert_eq!(head, [3192375665, 1040430326, 3196061081, 1050870880]);
    let n = w.lm_head.data().len();
    let tail: Vec<u32> = w.lm_head.data()[n - 2..].iter().map(|v| v.to_bits()).collect();
    assert_eq!(tail, [1051370738, 3196222048]);
    assert!(w.layers.iter().all(|l| l.attn_norm.iter().all(|&g| g == 1.0)));
}

#[test]
fn seed_42_weight_file_is_stable() {
    let c = ModelConfig::tiny(2, 2, 8);
    let bytes = encode_weights(&c, &random_weights(&c, 42).unwrap()).unwrap();
    // 44-byte header plus 5464 f32 values: embedding 259·8, two layers of
    // 8 + 4·64 + 8 + 3·128, final norm 8, head 8·259.
    assert_eq!(bytes.len(), 44 + 4 * 5464);
    assert_eq!(&bytes[..4], b"GKVW");
    assert_eq!(fnv1a64(&bytes), 0x8e18960042272d88);
}
