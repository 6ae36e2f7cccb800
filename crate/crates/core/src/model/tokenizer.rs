//! Byte-level tokenizer: ids 0..=255 are raw bytes, followed by special tokens.

/// Marks sequence boundaries in training corpora.
pub const END_OF_TEXT: u32 = 256;
pub const BASE_VOCAB: usize = 256;
pub const VOCAB_SIZE: usize = BASE_VOCAB + 1;

pub fn tokenize(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Exact inverse of [`tokenize`] on valid UTF-8. Special tokens are dropped and
/// invalid byte sequences (possible in sampled output) are replaced lossily.
pub fn detokenize(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .filter(|&&t| (t as usize) < BASE_VOCAB)
        .map(|&t| t as u8)
        .collect();
    match String::from_utf8(bytes) {
        Ok(s) => s,
        Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
    }
}
