//! Data model for question-answering instances.
//!
//! Feature sequences carry precomputed per-timestep features; upstream
//! extraction (text/vision/audio embeddings) is outside this crate, so
//! features arrive either from the synthetic generator or from bundle
//! files. Feature payloads are always f32; model code casts them into
//! whatever precision it runs at.

use crate::error::{Error, Result};

/// Input stream carried by a [`FeatureSequence`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Visual,
    Transcript,
    Acoustic,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Visual, Modality::Transcript, Modality::Acoustic];

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Visual => "V",
            Modality::Transcript => "T",
            Modality::Acoustic => "Ac",
        }
    }

    pub fn from_tag(s: &str) -> Option<Modality> {
        match s {
            "V" => Some(Modality::Visual),
            "T" => Some(Modality::Transcript),
            "Ac" => Some(Modality::Acoustic),
            _ => None,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Which stream a sequence belongs to (question and answers are text-like
/// streams with their own encoders).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamTag {
    Question,
    Answer,
    Modality(Modality),
}

/// A length-L sequence of per-timestep feature vectors with a validity
/// mask. Padding is on the right: the mask is a contiguous run of `true`
/// followed by `false`, with at least one valid step.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub tag: StreamTag,
    /// Row-major [len x width] payload; padded rows are zero.
    data: Vec<f32>,
    len: usize,
    width: usize,
    mask: Vec<bool>,
}

impl FeatureSequence {
    pub fn new(tag: StreamTag, len: usize, width: usize, data: Vec<f32>, mask: Vec<bool>) -> Result<Self> {
        if len == 0 || width == 0 {
            return Err(Error::EmptySequence);
        }
        if data.len() != len * width {
            return Err(Error::InvalidShape {
                op: "feature_sequence",
                shape: vec![len, width],
                reason: format!("payload length {}", data.len()),
            });
        }
        if mask.len() != len {
            return Err(Error::InvalidShape {
                op: "feature_sequence",
                shape: vec![len],
                reason: format!("mask length {}", mask.len()),
            });
        }
        let valid = mask.iter().take_while(|&&m| m).count();
        if valid == 0 {
            return Err(Error::EmptyAttentionSupport);
        }
        if mask[valid..].iter().any(|&m| m) {
            return Err(Error::InvalidShape {
                op: "feature_sequence",
                shape: vec![len],
                reason: "mask must be a contiguous prefix (right padding)".into(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { context: "feature sequence".into() });
        }
        Ok(FeatureSequence { tag, data, len, width, mask })
    }

    /// Unpadded sequence with an all-true mask.
    pub fn dense(tag: StreamTag, len: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let mask = vec![true; len];
        FeatureSequence::new(tag, len, width, data, mask)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false // length >= 1 by construction
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn step(&self, t: usize) -> &[f32] {
        &self.data[t * self.width..(t + 1) * self.width]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Copy truncated to the valid prefix.
    pub fn truncated(&self) -> FeatureSequence {
        let v = self.valid_len();
        FeatureSequence {
            tag: self.tag,
            data: self.data[..v * self.width].to_vec(),
            len: v,
            width: self.width,
            mask: vec![true; v],
        }
    }
}

/// Hidden construction record for a synthetic instance. Oracles and probes
/// read it; it is never part of what a model consumes, and it is serialized
/// to a sidecar file rather than into the feature bundles.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentRecord {
    /// Per-modality hidden bits (V, T, Ac order).
    pub bits: [bool; 3],
    /// The claim encoded by correct candidates.
    pub claim: bool,
    /// Timestep at which each modality's bit pattern was embedded.
    pub positions: [usize; 3],
    /// Per-candidate bias-marker value for the `biased` task (None elsewhere).
    pub bias_markers: Option<Vec<bool>>,
}

/// One question with its candidate answers and per-modality features.
#[derive(Clone, Debug)]
pub struct QAInstance {
    /// Group identifier; instances sharing a group never straddle a split.
    pub group: usize,
    pub question: FeatureSequence,
    /// Candidate answers with correctness flags.
    pub candidates: Vec<(FeatureSequence, bool)>,
    /// Modality features in canonical (V, T, Ac) order.
    pub modalities: Vec<(Modality, FeatureSequence)>,
    /// Present for synthetic data loaded together with its sidecar.
    pub latent: Option<LatentRecord>,
}

impl QAInstance {
    pub fn modality(&self, m: Modality) -> Option<&FeatureSequence> {
        self.modalities.iter().find(|(tag, _)| *tag == m).map(|(_, s)| s)
    }

    pub fn correct_indices(&self) -> Vec<usize> {
        self.candidates
            .iter()
            .enumerate()
            .filter_map(|(i, (_, c))| c.then_some(i))
            .collect()
    }

    pub fn incorrect_indices(&self) -> Vec<usize> {
        self.candidates
            .iter()
            .enumerate()
            .filter_map(|(i, (_, c))| (!c).then_some(i))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_must_be_contiguous_prefix() {
        let err = FeatureSequence::new(
            StreamTag::Question,
            3,
            2,
            vec![0.0; 6],
            vec![true, false, true],
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidShape { .. }));
    }

    #[test]
    fn all_false_mask_rejected() {
        let err =
            FeatureSequence::new(StreamTag::Question, 2, 2, vec![0.0; 4], vec![false, false])
                .unwrap_err();
        assert!(matches!(err, Error::EmptyAttentionSupport));
    }

    #[test]
    fn truncated_drops_padding() {
        let seq = FeatureSequence::new(
            StreamTag::Answer,
            3,
            2,
            vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0],
            vec![true, true, false],
        )
        .unwrap();
        let t = seq.truncated();
        assert_eq!(t.len(), 2);
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(t.valid_len(), 2);
    }
}
