use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::captioner::{TokenSeq, Vocabulary};
use crate::error::{Error, Result};
use crate::synthset::Image;

/// Branch probabilities in the order both, image-only, text-only, neither.
pub const DEFAULT_MODALITY_PROBS: [f64; 4] = [0.3, 0.3, 0.3, 0.1];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    Both,
    ImageOnly,
    TextOnly,
    Neither,
}

impl Branch {
    pub const ALL: [Branch; 4] = [
        Branch::Both,
        Branch::ImageOnly,
        Branch::TextOnly,
        Branch::Neither,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Both => "both",
            Branch::ImageOnly => "image-only",
            Branch::TextOnly => "text-only",
            Branch::Neither => "neither",
        }
    }

    pub fn keeps_image(self) -> bool {
        matches!(self, Branch::Both | Branch::ImageOnly)
    }

    pub fn keeps_text(self) -> bool {
        matches!(self, Branch::Both | Branch::TextOnly)
    }
}

/// Conditioning inputs with absent modalities already materialized: a
/// missing image is all black, a missing prompt is `tokenize("")`. The flags
/// record what was absent before materialization.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBundle {
    pub ref_image: Image,
    pub tokens: TokenSeq,
    pub has_image: bool,
    pub has_text: bool,
}

impl ConditionBundle {
    pub fn new(
        ref_image: Option<Image>,
        tokens: Option<TokenSeq>,
        view_size: usize,
        max_tokens: usize,
        vocab: &Vocabulary,
    ) -> Result<Self> {
        let has_image = ref_image.is_some();
        let has_text = tokens.is_some();
        let ref_image = match ref_image {
            Some(img) if img.width != view_size || img.height != view_size => {
                return Err(Error::Domain(format!(
                    "reference image is {}x{}, expected {view_size}x{view_size}",
                    img.width, img.height
                )))
            }
            Some(img) => img,
            None => Image::black(view_size, view_size),
        };
        let tokens = match tokens {
            Some(t) if t.len() != max_tokens => {
                return Err(Error::Domain(format!(
                    "token sequence has length {}, expected {max_tokens}",
                    t.len()
                )))
            }
            Some(t) => t,
            None => vocab.tokenize("", max_tokens)?,
        };
        Ok(Self {
            ref_image,
            tokens,
            has_image,
            has_text,
        })
    }

    /// Both modalities absent.
    pub fn null(view_size: usize, max_tokens: usize, vocab: &Vocabulary) -> Result<Self> {
        Self::new(None, None, view_size, max_tokens, vocab)
    }

    /// Drops whatever `branch` does not keep.
    pub fn restrict(&self, branch: Branch, vocab: &Vocabulary) -> Result<Self> {
        let view = self.ref_image.width;
        let image = (branch.keeps_image() && self.has_image).then(|| self.ref_image.clone());
        let tokens = (branch.keeps_text() && self.has_text).then(|| self.tokens.clone());
        Self::new(image, tokens, view, self.tokens.len(), vocab)
    }
}

fn check_probs(probs: &[f64; 4]) -> Result<()> {
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Config(format!(
            "modality probabilities {probs:?} must be non-negative"
        )));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "modality probabilities sum to {sum}, expected 1"
        )));
    }
    Ok(())
}

/// Draws one branch and applies its substitutions.
pub fn switch_conditions(
    bundle: &ConditionBundle,
    rng_seed: u64,
    probs: [f64; 4],
    vocab: &Vocabulary,
) -> Result<(ConditionBundle, Branch)> {
    check_probs(&probs)?;
    let u: f64 = ChaCha8Rng::seed_from_u64(rng_seed).random();
    // rounding fallback: the last branch with positive mass
    let mut branch = Branch::ALL[probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)];
    let mut acc = 0.0;
    for (b, p) in Branch::ALL.into_iter().zip(probs) {
        acc += p;
        if p > 0.0 && u < acc {
            branch = b;
            break;
        }
    }
    Ok((bundle.restrict(branch, vocab)?, branch))
}
