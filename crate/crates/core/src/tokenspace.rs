//! Codebooks, token grids, visibility masks and the mask/merge algebra.
//!
//! Mask convention: bit `true` means the position is visible (kept), `false`
//! means it is masked. The mask token of a vocabulary of size `K` is `K`.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vocabulary {
    size: usize,
}

impl Vocabulary {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(invalid("vocab", "codebook size must be positive"));
        }
        Ok(Vocabulary { size })
    }

    /// Number of real codes `K`.
    pub fn size(self) -> usize {
        self.size
    }

    pub fn mask_id(self) -> usize {
        self.size
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridShape {
    pub height: usize,
    pub width: usize,
}

impl GridShape {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid("grid shape", format!("{height}x{width} has no cells")));
        }
        Ok(GridShape { height, width })
    }

    pub fn len(self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClassLabel(pub usize);

impl ClassLabel {
    pub fn checked(c: usize, num_classes: usize) -> Result<Self> {
        if c >= num_classes {
            return Err(invalid("class", format!("{c} is not below {num_classes}")));
        }
        Ok(ClassLabel(c))
    }
}

/// Flattened row-major grid of code indices, possibly holding mask tokens.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    shape: GridShape,
    vocab: Vocabulary,
    tokens: Vec<usize>,
}

impl TokenGrid {
    pub fn new(shape: GridShape, vocab: Vocabulary, tokens: Vec<usize>) -> Result<Self> {
        if tokens.len() != shape.len() {
            return Err(Error::Shape {
                op: "token grid",
                lhs: vec![shape.height, shape.width],
                rhs: vec![tokens.len()],
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t > vocab.mask_id()) {
            return Err(invalid("token", format!("{t} exceeds mask id {}", vocab.mask_id())));
        }
        Ok(TokenGrid { shape, vocab, tokens })
    }

    pub fn fully_masked(shape: GridShape, vocab: Vocabulary) -> Self {
        TokenGrid {
            shape,
            vocab,
            tokens: vec![vocab.mask_id(); shape.len()],
        }
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_masked(&self, j: usize) -> bool {
        self.tokens[j] == self.vocab.mask_id()
    }

    pub fn is_complete(&self) -> bool {
        self.first_masked().is_none()
    }

    fn first_masked(&self) -> Option<usize> {
        self.tokens.iter().position(|&t| t == self.vocab.mask_id())
    }

    pub fn ensure_complete(&self) -> Result<()> {
        match self.first_masked() {
            Some(j) => Err(Error::IncompleteGrid(j)),
            None => Ok(()),
        }
    }

    pub fn masked_count(&self) -> usize {
        self.tokens.iter().filter(|&&t| t == self.vocab.mask_id()).count()
    }

    /// Visibility mask implied by the mask tokens present.
    pub fn visibility(&self) -> MaskVector {
        MaskVector::from_bits(self.tokens.iter().map(|&t| t != self.vocab.mask_id()).collect())
    }
}

/// Per-position visibility; `true` = visible.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskVector {
    bits: Vec<bool>,
}

impl MaskVector {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        MaskVector { bits }
    }

    pub fn all_visible(n: usize) -> Self {
        MaskVector { bits: vec![true; n] }
    }

    pub fn all_masked(n: usize) -> Self {
        MaskVector { bits: vec![false; n] }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_visible(&self, j: usize) -> bool {
        self.bits[j]
    }

    pub fn masked_count(&self) -> usize {
        self.bits.iter().filter(|&&b| !b).count()
    }
}

fn check_len(grid: &TokenGrid, m: &MaskVector) -> Result<()> {
    if grid.len() != m.len() {
        return Err(Error::Shape {
            op: "mask",
            lhs: vec![grid.len()],
            rhs: vec![m.len()],
        });
    }
    Ok(())
}

/// Replaces the masked positions of a complete grid with the mask token.
pub fn apply_mask(x0: &TokenGrid, m: &MaskVector) -> Result<TokenGrid> {
    check_len(x0, m)?;
    x0.ensure_complete()?;
    let mask_id = x0.vocab.mask_id();
    let tokens = x0
        .tokens
        .iter()
        .zip(&m.bits)
        .map(|(&t, &keep)| if keep { t } else { mask_id })
        .collect();
    Ok(TokenGrid { tokens, ..x0.clone() })
}

/// Visible positions from `x_t`, masked positions from the prediction.
pub fn merge(prediction: &TokenGrid, x_t: &TokenGrid, m: &MaskVector) -> Result<TokenGrid> {
    check_len(prediction, m)?;
    check_len(x_t, m)?;
    prediction.ensure_complete()?;
    for (j, &keep) in m.bits.iter().enumerate() {
        if keep && x_t.is_masked(j) {
            return Err(Error::MaskMismatch(j));
        }
    }
    let tokens = (0..m.len())
        .map(|j| if m.bits[j] { x_t.tokens[j] } else { prediction.tokens[j] })
        .collect();
    Ok(TokenGrid {
        tokens,
        ..prediction.clone()
    })
}

/// Mask with exactly `masked` hidden positions chosen uniformly.
pub fn random_mask<R: Rng + ?Sized>(n: usize, masked: usize, rng: &mut R) -> Result<MaskVector> {
    if masked > n {
        return Err(invalid("masked count", format!("{masked} exceeds {n} positions")));
    }
    let mut bits = vec![true; n];
    for j in index::sample(rng, n, masked) {
        bits[j] = false;
    }
    Ok(MaskVector { bits })
}

/// One grid per JSON line: `{"class", "tokens", "height", "width"}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridRecord {
    pub class: usize,
    pub tokens: Vec<usize>,
    pub height: usize,
    pub width: usize,
}

impl GridRecord {
    pub fn from_grid(grid: &TokenGrid, class: ClassLabel) -> Self {
        GridRecord {
            class: class.0,
            tokens: grid.tokens.clone(),
            height: grid.shape.height,
            width: grid.shape.width,
        }
    }

    pub fn to_grid(&self, vocab: Vocabulary) -> Result<(TokenGrid, ClassLabel)> {
        let shape = GridShape::new(self.height, self.width)?;
        Ok((TokenGrid::new(shape, vocab, self.tokens.clone())?, ClassLabel(self.class)))
    }
}
