use sha2::{Digest, Sha256};

use super::ArtifactKind;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const WORDS: &[&str] = &[
    "<pad>", "<bos>", "<eos>", "<unk>", ".", "?", "a", "an", "and", "are", "authentic", "banding", "blob", "blobs",
    "bottom", "bright", "checkerboard", "conflicts", "consistent", "copied", "covers", "dark", "does", "fake", "from",
    "grid", "if", "image", "is", "latent", "left", "lighting", "lit", "look", "me", "one", "or", "patch", "pattern",
    "picture", "real", "regular", "right", "scene", "shading", "shows", "smooth", "steps", "synthetic", "tell", "texture",
    "the", "this", "three", "tilt", "top", "two", "with", "gradients", "region", "of", "appears", "in",
];

/// Instruction templates; any of them may accompany any sample.
pub const INSTRUCTIONS: &[&str] = &[
    "does the image look real or fake ?",
    "is this image real or fake ?",
    "is this picture authentic or synthetic ?",
    "tell me if this image is real or fake .",
];

/// Closed word list with whitespace tokenization.
#[derive(Clone, Debug)]
pub struct Vocab {
    words: Vec<&'static str>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        Self { words: WORDS.to_vec() }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| *w == word)
    }

    /// Tokenizes `text`; unknown words are an error.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::Data(format!("word {w:?} is not in the vocabulary")))
            })
            .collect()
    }

    /// Like [`Vocab::encode`] but maps unknown words to `<unk>`.
    pub fn encode_lossy(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w).unwrap_or(UNK)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD && i != EOS && i != BOS)
            .map(|&i| self.words.get(i).copied().unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// First eight bytes (little-endian) of SHA-256 over the word list.
    pub fn hash(&self) -> u64 {
        let mut h = Sha256::new();
        for w in &self.words {
            h.update(w.as_bytes());
            h.update(b"\n");
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    pub fn instruction(&self, k: usize) -> Vec<usize> {
        self.encode(INSTRUCTIONS[k % INSTRUCTIONS.len()]).expect("template words are in the vocabulary")
    }

    /// Explanation for a label and artifact kind, terminated by `<eos>`.
    pub fn explanation(&self, kind: Option<ArtifactKind>) -> Vec<usize> {
        let mut ids = self.encode(explanation_text(kind)).expect("template words are in the vocabulary");
        ids.push(EOS);
        ids
    }
}

pub fn explanation_text(kind: Option<ArtifactKind>) -> &'static str {
    match kind {
        None => "real . lighting and texture look consistent .",
        Some(ArtifactKind::Checkerboard) => "fake . a checkerboard grid covers the texture .",
        Some(ArtifactKind::Banding) => "fake . smooth shading shows banding steps .",
        Some(ArtifactKind::LightingConflict) => "fake . the lighting conflicts with the shading .",
        Some(ArtifactKind::PatchDuplication) => "fake . a patch of the image is copied .",
        Some(ArtifactKind::LatentTilt) => "fake . a regular latent tilt pattern appears .",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_fits_default_model_and_is_unique() {
        let v = Vocab::new();
        assert!(v.len() <= 64);
        let mut w = WORDS.to_vec();
        w.sort();
        w.dedup();
        assert_eq!(w.len(), v.len());
    }

    #[test]
    fn every_template_encodes_and_decodes() {
        let v = Vocab::new();
        for (k, t) in INSTRUCTIONS.iter().enumerate() {
            assert_eq!(v.decode(&v.instruction(k)), *t);
        }
        for kind in std::iter::once(None).chain(ArtifactKind::ALL.iter().copied().map(Some)) {
            let ids = v.explanation(kind);
            assert_eq!(*ids.last().unwrap(), EOS);
            assert_eq!(v.decode(&ids), explanation_text(kind));
        }
    }

    #[test]
    fn unknown_word_is_an_error() {
        assert!(Vocab::new().encode("purple").is_err());
        assert_eq!(Vocab::new().encode_lossy("purple"), vec![UNK]);
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(Vocab::new().hash(), Vocab::new().hash());
    }
}
