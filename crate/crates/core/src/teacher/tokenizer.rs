//! Character-level tokenizer for the teacher text tower.
//!
//! Labels are fed to the text encoder as space-separated characters
//! ("analysis" -> "a n a l y s i s"), so every whitespace piece must map to
//! exactly one vocabulary token. The built-in vocabulary covers the
//! 36-character recognition alphabet plus start/end/pad control tokens,
//! mirroring the byte-pair property that a single lowercase character (with
//! end-of-word marker) is one token. A piece that would need more than one
//! token fails loudly instead of silently misaligning characters and
//! teacher tokens.

use crate::charset::LabelCodec;
use crate::error::{Error, Result};

pub const START_TOKEN: u32 = 36;
pub const END_TOKEN: u32 = 37;
pub const PAD_TOKEN: u32 = 38;
pub const VOCAB_SIZE: usize = 39;

#[derive(Debug, Clone, Default)]
pub struct CharTokenizer {
    codec: LabelCodec,
}

impl CharTokenizer {
    pub fn new() -> Self {
        Self {
            codec: LabelCodec::default(),
        }
    }

    /// Tokenizes a space-separated character list, wrapping with start/end.
    pub fn encode(&self, char_split: &str) -> Result<Vec<u32>> {
        if char_split.is_empty() {
            return Err(Error::EmptyLabel);
        }
        let mut ids = vec![START_TOKEN];
        for piece in char_split.split_whitespace() {
            let mut chars = piece.chars();
            let c = chars.next().ok_or(Error::EmptyLabel)?;
            if chars.next().is_some() {
                // More than one character in a piece would need multiple
                // vocabulary tokens.
                return Err(Error::TokenizerExpansion(c));
            }
            ids.push(self.codec.char_to_id(c).ok_or(Error::TokenizerExpansion(c))?);
        }
        ids.push(END_TOKEN);
        Ok(ids)
    }

    /// Encodes and pads to `n_ctx`, returning (ids, validity mask, eot index).
    pub fn encode_padded(&self, char_split: &str, n_ctx: usize) -> Result<(Vec<u32>, Vec<bool>, usize)> {
        let ids = self.encode(char_split)?;
        if ids.len() > n_ctx {
            return Err(Error::LabelTooLong {
                len: ids.len() - 2,
                max: n_ctx - 2,
            });
        }
        let eot = ids.len() - 1;
        let mut mask = vec![true; ids.len()];
        mask.resize(n_ctx, false);
        let mut padded = ids;
        padded.resize(n_ctx, PAD_TOKEN);
        Ok((padded, mask, eot))
    }
}
