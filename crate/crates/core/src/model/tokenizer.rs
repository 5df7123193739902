//! Byte-level tokenizer: ids 0..=255 are raw bytes, followed by three specials.

use crate::error::{invalid, Result};

pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const PAD: usize = 258;
/// Minimum vocabulary that can represent every byte plus the specials.
pub const BYTE_VOCAB: usize = 259;

pub fn encode(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

/// `BOS` followed by the bytes of `text`.
pub fn encode_prompt(text: &str) -> Vec<usize> {
    std::iter::once(BOS).chain(encode(text)).collect()
}

/// Decodes byte ids; specials and out-of-range ids are rendered as `<id>`.
pub fn decode(ids: &[usize]) -> String {
    let mut bytes = Vec::with_capacity(ids.len());
    for &id in ids {
        match id {
            0..=255 => bytes.push(id as u8),
            BOS => bytes.extend_from_slice(b"<bos>"),
            EOS => bytes.extend_from_slice(b"<eos>"),
            PAD => bytes.extend_from_slice(b"<pad>"),
            other => bytes.extend_from_slice(format!("<{other}>").as_bytes()),
        }
    }
    String::from_utf8_lossy(&bytes).into_owned()
}

pub fn check_ids(ids: &[usize], vocab_size: usize) -> Result<()> {
    match ids.iter().find(|&&t| t >= vocab_size) {
        Some(t) => Err(invalid(format!(
            "token id {t} out of range for vocabulary of {vocab_size}"
        ))),
        None => Ok(()),
    }
}
