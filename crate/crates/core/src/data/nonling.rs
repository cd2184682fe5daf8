//! Non-linguistic test label construction: character shuffling and random
//! character strings.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::charset::ALPHABET;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NonLinguisticMode {
    /// Permute each label's characters.
    Shuffle,
    /// Same-length strings of uniformly sampled alphabet characters.
    Random,
}

pub fn make_nonlinguistic(labels: &[String], mode: NonLinguisticMode, seed: u64) -> Vec<String> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let alphabet: Vec<char> = ALPHABET.chars().collect();
    labels
        .iter()
        .map(|label| match mode {
            NonLinguisticMode::Shuffle => {
                let mut chars: Vec<char> = label.chars().collect();
                chars.shuffle(&mut rng);
                chars.into_iter().collect()
            }
            NonLinguisticMode::Random => (0..label.chars().count())
                .map(|_| alphabet[rng.gen_range(0..alphabet.len())])
                .collect(),
        })
        .collect()
}
