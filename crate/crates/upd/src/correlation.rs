//! Correlation vectors between an image embedding and contextualized text
//! embeddings.
//!
//! The correlation vector for one option is the elementwise product
//! u_i = v_image * v_text. Its coordinate sum equals the cosine similarity of
//! the two unit vectors, so the bundle carries strictly more information than
//! the scalar score: the model downstream can see which coordinates agree,
//! not just how much they agree in total.
//!
//! Multiple-choice prompts always occupy four slots. Prompts with fewer
//! options fill the tail slots with correlations against the null text
//! vector, which are exactly zero in every bit. Open-ended prompts use a
//! single slot over the question text alone.

use serde::{Deserialize, Serialize};

use crate::embedder::EmbeddingVector;
use crate::error::{Result, UpdError};
use crate::numerics::DenseMatrix;

pub const MC_SLOTS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMode {
    MultipleChoice,
    OpenEnded,
}

impl CorrelationMode {
    pub fn slot_count(self) -> usize {
        match self {
            CorrelationMode::MultipleChoice => MC_SLOTS,
            CorrelationMode::OpenEnded => 1,
        }
    }

    /// Width of the concatenated correlation input for a given embedding dim.
    pub fn input_dim(self, emb_dim: usize) -> usize {
        self.slot_count() * emb_dim
    }
}

/// Concatenated per-slot correlation vectors for one prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationBundle {
    mode: CorrelationMode,
    emb_dim: usize,
    /// Slots holding a real option (the rest are null padding).
    used_slots: usize,
    values: Vec<f64>,
}

impl CorrelationBundle {
    pub fn mode(&self) -> CorrelationMode {
        self.mode
    }

    pub fn emb_dim(&self) -> usize {
        self.emb_dim
    }

    pub fn used_slots(&self) -> usize {
        self.used_slots
    }

    pub fn input_dim(&self) -> usize {
        self.values.len()
    }

    pub fn concatenated(&self) -> &[f64] {
        &self.values
    }

    pub fn slot(&self, index: usize) -> &[f64] {
        &self.values[index * self.emb_dim..(index + 1) * self.emb_dim]
    }

    /// Per-slot coordinate sums. For unit embeddings these are the plain
    /// cosine similarity scores, which is what a score-only ablation sees.
    pub fn slot_sums(&self) -> Vec<f64> {
        (0..self.mode.slot_count())
            .map(|i| self.slot(i).iter().sum())
            .collect()
    }

    /// The bundle as a column matrix, the shape the projection layer takes.
    pub fn as_column(&self) -> DenseMatrix {
        DenseMatrix::column_vector(&self.values)
    }
}

/// Elementwise product of image and text embeddings.
pub fn correlate(image: &EmbeddingVector, text: &EmbeddingVector) -> Result<Vec<f64>> {
    if image.dim() != text.dim() {
        return Err(UpdError::ShapeMismatch {
            op: "correlate".into(),
            left: (image.dim(), 1),
            right: (text.dim(), 1),
        });
    }
    Ok(image
        .values()
        .iter()
        .zip(text.values())
        .map(|(a, b)| a * b)
        .collect())
}

/// Builds the four-slot multiple-choice bundle. `contexts` holds one
/// embedding per contextualized option, in option order; missing tail slots
/// are filled against the null text vector.
pub fn build_mc_bundle(
    image: &EmbeddingVector,
    contexts: &[EmbeddingVector],
) -> Result<CorrelationBundle> {
    if contexts.len() < 2 || contexts.len() > MC_SLOTS {
        return Err(UpdError::contract(format!(
            "multiple-choice bundle needs 2 to {} contexts, got {}",
            MC_SLOTS,
            contexts.len()
        )));
    }
    let dim = image.dim();
    let mut values = Vec::with_capacity(MC_SLOTS * dim);
    for slot in 0..MC_SLOTS {
        match contexts.get(slot) {
            Some(text) => values.extend(correlate(image, text)?),
            // The null-text correlation is zero everywhere; push literal
            // +0.0 so padding is bit-identical regardless of image signs.
            None => values.extend(std::iter::repeat(0.0).take(dim)),
        }
    }
    Ok(CorrelationBundle {
        mode: CorrelationMode::MultipleChoice,
        emb_dim: dim,
        used_slots: contexts.len(),
        values,
    })
}

/// Builds the single-slot open-ended bundle over the question text.
pub fn build_open_bundle(
    image: &EmbeddingVector,
    question: &EmbeddingVector,
) -> Result<CorrelationBundle> {
    let values = correlate(image, question)?;
    Ok(CorrelationBundle {
        mode: CorrelationMode::OpenEnded,
        emb_dim: image.dim(),
        used_slots: 1,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::dot;
    use crate::numerics::random::{gaussian_vec, rng_from_seed};
    use rand_chacha::ChaCha8Rng;

    fn unit(values: Vec<f64>) -> EmbeddingVector {
        EmbeddingVector::normalized(values)
    }

    fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> EmbeddingVector {
        unit(gaussian_vec(rng, dim, 1.0))
    }

    #[test]
    fn slot_sum_equals_dot_product() {
        let mut rng = rng_from_seed(11);
        for _ in 0..1000 {
            let image = random_unit(&mut rng, 64);
            let text = random_unit(&mut rng, 64);
            let u = correlate(&image, &text).unwrap();
            let sum: f64 = u.iter().sum();
            let expected = dot(image.values(), text.values());
            assert!(
                (sum - expected).abs() <= 1e-9,
                "sum {sum} vs dot {expected}"
            );
        }
    }

    #[test]
    fn padding_slots_are_bitwise_zero() {
        let mut rng = rng_from_seed(12);
        let image = random_unit(&mut rng, 16);
        let contexts = vec![random_unit(&mut rng, 16), random_unit(&mut rng, 16)];
        let bundle = build_mc_bundle(&image, &contexts).unwrap();
        assert_eq!(bundle.used_slots(), 2);
        assert_eq!(bundle.input_dim(), 4 * 16);
        for slot in 2..MC_SLOTS {
            for &v in bundle.slot(slot) {
                assert_eq!(v.to_bits(), 0f64.to_bits());
            }
        }
    }

    #[test]
    fn permuting_contexts_permutes_slots() {
        let mut rng = rng_from_seed(13);
        let image = random_unit(&mut rng, 16);
        let a = random_unit(&mut rng, 16);
        let b = random_unit(&mut rng, 16);
        let c = random_unit(&mut rng, 16);
        let fwd = build_mc_bundle(&image, &[a.clone(), b.clone(), c.clone()]).unwrap();
        let swapped = build_mc_bundle(&image, &[b, a, c]).unwrap();
        assert_eq!(fwd.slot(0), swapped.slot(1));
        assert_eq!(fwd.slot(1), swapped.slot(0));
        assert_eq!(fwd.slot(2), swapped.slot(2));
        assert_eq!(fwd.slot(3), swapped.slot(3));
    }

    #[test]
    fn open_bundle_is_single_slot() {
        let mut rng = rng_from_seed(14);
        let image = random_unit(&mut rng, 32);
        let question = random_unit(&mut rng, 32);
        let bundle = build_open_bundle(&image, &question).unwrap();
        assert_eq!(bundle.input_dim(), 32);
        assert_eq!(bundle.mode(), CorrelationMode::OpenEnded);
        let direct = correlate(&image, &question).unwrap();
        assert_eq!(bundle.concatenated(), direct.as_slice());
    }

    #[test]
    fn slot_sums_match_cosines() {
        let mut rng = rng_from_seed(15);
        let image = random_unit(&mut rng, 24);
        let contexts: Vec<_> = (0..3).map(|_| random_unit(&mut rng, 24)).collect();
        let bundle = build_mc_bundle(&image, &contexts).unwrap();
        let sums = bundle.slot_sums();
        assert_eq!(sums.len(), 4);
        for (i, ctx) in contexts.iter().enumerate() {
            let cos = dot(image.values(), ctx.values());
            assert!((sums[i] - cos).abs() <= 1e-9);
        }
        assert_eq!(sums[3], 0.0);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let image = unit(vec![1.0, 0.0, 0.0]);
        let text = unit(vec![1.0, 0.0]);
        assert!(correlate(&image, &text).is_err());
    }

    #[test]
    fn context_count_bounds_are_enforced() {
        let mut rng = rng_from_seed(16);
        let image = random_unit(&mut rng, 8);
        let one = vec![random_unit(&mut rng, 8)];
        assert!(build_mc_bundle(&image, &one).is_err());
        let five: Vec<_> = (0..5).map(|_| random_unit(&mut rng, 8)).collect();
        assert!(build_mc_bundle(&image, &five).is_err());
    }

    #[test]
    fn column_shape_matches_input_dim() {
        let mut rng = rng_from_seed(17);
        let image = random_unit(&mut rng, 16);
        let contexts: Vec<_> = (0..4).map(|_| random_unit(&mut rng, 16)).collect();
        let bundle = build_mc_bundle(&image, &contexts).unwrap();
        let col = bundle.as_column();
        assert_eq!(col.shape(), (64, 1));
        assert_eq!(col.data(), bundle.concatenated());
    }
}
