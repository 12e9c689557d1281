//! Byte-level tokenizer: ids 0..=255 are raw bytes, followed by three
//! special ids.

pub const BOS: u32 = 256;
pub const EOT: u32 = 257;
pub const PAD: u32 = 258;
pub const VOCAB_SIZE: usize = 259;

pub fn encode(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Decodes byte ids lossily; special ids are dropped.
pub fn decode(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .filter_map(|&t| u8::try_from(t).ok())
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_ascii_and_utf8() {
        for s in ["hello world", "graph → kv", ""] {
            assert_eq!(decode(&encode(s)), s);
        }
    }

    #[test]
    fn specials_are_dropped_on_decode() {
        assert_eq!(decode(&[BOS, 104, 105, EOT, PAD]), "hi");
    }

    #[test]
    fn words_are_whitespace_delimited() {
        assert_eq!(word_count("  a bb\tccc\n d "), 4);
    }
}
