//! Recognition alphabet and label codecs.
//!
//! The recognizer uses a 36-character alphabet (digits then lowercase
//! letters) plus three control ids: BOS, EOS and PAD. Labels are encoded as
//! `[BOS, chars..., EOS, PAD...]` with a fixed total length so batches stack
//! without ragged shapes.

use crate::error::{Error, Result};

pub const ALPHABET: &str = "0123456789abcdefghijklmnopqrstuvwxyz";
pub const ALPHABET_LEN: usize = 36;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelCodec {
    alphabet: Vec<char>,
    pub max_label_len: usize,
}

impl Default for LabelCodec {
    fn default() -> Self {
        Self::new(25)
    }
}

impl LabelCodec {
    pub const BOS: u32 = 36;
    pub const EOS: u32 = 37;
    pub const PAD: u32 = 38;
    /// Vocabulary size seen by the decoder head.
    pub const VOCAB: usize = 39;

    pub fn new(max_label_len: usize) -> Self {
        assert!(max_label_len > 0);
        let alphabet: Vec<char> = ALPHABET.chars().collect();
        debug_assert_eq!(alphabet.len(), ALPHABET_LEN);
        Self {
            alphabet,
            max_label_len,
        }
    }

    /// Fixed length of every encoded label: BOS + max_label_len + EOS.
    pub fn target_len(&self) -> usize {
        self.max_label_len + 2
    }

    pub fn char_to_id(&self, c: char) -> Option<u32> {
        match c {
            '0'..='9' => Some(c as u32 - '0' as u32),
            'a'..='z' => Some(c as u32 - 'a' as u32 + 10),
            _ => None,
        }
    }

    pub fn id_to_char(&self, id: u32) -> Option<char> {
        self.alphabet.get(id as usize).copied()
    }

    /// Lowercases and drops every character outside the alphabet.
    pub fn normalize_text(&self, raw: &str) -> String {
        raw.chars()
            .flat_map(|c| c.to_lowercase())
            .filter(|c| self.char_to_id(*c).is_some())
            .collect()
    }

    /// Encodes a normalized label as `[BOS, ids..., EOS]` padded with PAD to
    /// `target_len()`.
    pub fn encode_label(&self, text: &str) -> Result<Vec<u32>> {
        let chars: Vec<char> = text.chars().collect();
        if chars.len() > self.max_label_len {
            return Err(Error::LabelTooLong {
                len: chars.len(),
                max: self.max_label_len,
            });
        }
        let mut ids = Vec::with_capacity(self.target_len());
        ids.push(Self::BOS);
        for c in chars {
            ids.push(self.char_to_id(c).ok_or(Error::UnknownChar(c))?);
        }
        ids.push(Self::EOS);
        ids.resize(self.target_len(), Self::PAD);
        Ok(ids)
    }

    /// Inverse of `encode_label`: reads characters up to the first EOS,
    /// skipping BOS and PAD.
    pub fn decode_ids(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == Self::EOS {
                break;
            }
            if id == Self::BOS || id == Self::PAD {
                continue;
            }
            if let Some(c) = self.id_to_char(id) {
                out.push(c);
            }
        }
        out
    }

    /// Joins the characters of a normalized label with single spaces, the
    /// form fed to the teacher text tower.
    pub fn char_split(&self, text: &str) -> Result<String> {
        if text.is_empty() {
            return Err(Error::EmptyLabel);
        }
        let chars: Vec<String> = text.chars().map(|c| c.to_string()).collect();
        Ok(chars.join(" "))
    }
}
