use serde::{Deserialize, Serialize};

/// Segment sizes of one sample, concatenated as visual, masked text,
/// causal text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct SegmentLayout {
    pub n_visual: usize,
    pub n_masked_text: usize,
    pub n_causal_text: usize,
}

/// Segment embedding index of each kind of position.
pub const SEGMENT_VISUAL: usize = 0;
pub const SEGMENT_MASKED: usize = 1;
pub const SEGMENT_CAUSAL: usize = 2;

impl SegmentLayout {
    pub fn new(n_visual: usize, n_masked_text: usize, n_causal_text: usize) -> Self {
        SegmentLayout { n_visual, n_masked_text, n_causal_text }
    }

    pub fn total(&self) -> usize {
        self.n_visual + self.n_masked_text + self.n_causal_text
    }

    /// Length of the bidirectional prefix.
    pub fn prefix(&self) -> usize {
        self.n_visual + self.n_masked_text
    }

    pub fn segment_of(&self, pos: usize) -> usize {
        if pos < self.n_visual {
            SEGMENT_VISUAL
        } else if pos < self.prefix() {
            SEGMENT_MASKED
        } else {
            SEGMENT_CAUSAL
        }
    }
}

/// `allowed[i * len + j]`: query `i` may attend key `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub len: usize,
    pub allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.len + j]
    }
}

/// Prefix positions see the whole prefix and nothing after it; causal
/// positions see the prefix and every causal position up to themselves.
pub fn build_mask(layout: SegmentLayout) -> AttentionMask {
    let len = layout.total();
    let prefix = layout.prefix();
    let mut allowed = vec![false; len * len];
    for i in 0..len {
        let visible = if i < prefix { prefix } else { i + 1 };
        allowed[i * len..i * len + visible].iter_mut().for_each(|a| *a = true);
    }
    AttentionMask { len, allowed }
}
