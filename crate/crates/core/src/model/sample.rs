use serde::{Deserialize, Serialize};

use super::mask::SegmentLayout;
use crate::error::{Error, Result};
use crate::patches::RawPatches;
use crate::tokenizer::TokenId;

/// Target id of positions that carry no loss.
pub const IGNORE: TokenId = TokenId::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Denoise,
    Lm,
    Caption,
    MmDenoise,
    TextToImage,
    Prompt,
}

impl Task {
    pub const PRETRAIN: [Task; 4] = [Task::Denoise, Task::Lm, Task::Caption, Task::MmDenoise];

    pub fn name(self) -> &'static str {
        match self {
            Task::Denoise => "denoise",
            Task::Lm => "lm",
            Task::Caption => "caption",
            Task::MmDenoise => "mm_denoise",
            Task::TextToImage => "t2i",
            Task::Prompt => "prompt",
        }
    }

    pub fn needs_image(self) -> bool {
        matches!(self, Task::Caption | Task::MmDenoise)
    }
}

/// One model input: patches, then masked text, then causal text.
///
/// `targets` covers every position; entries outside the causal segment are
/// always [`IGNORE`].
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalSample {
    pub patches: RawPatches,
    pub masked_text: Vec<TokenId>,
    pub causal_text: Vec<TokenId>,
    pub targets: Vec<TokenId>,
    pub task: Task,
}

impl MultimodalSample {
    /// Sample with empty visual and masked segments and no targets.
    pub fn causal(causal_text: Vec<TokenId>, task: Task, patch_dim: usize) -> Self {
        let targets = vec![IGNORE; causal_text.len()];
        MultimodalSample { patches: RawPatches::empty(patch_dim), masked_text: Vec::new(), causal_text, targets, task }
    }

    pub fn layout(&self) -> SegmentLayout {
        SegmentLayout::new(self.patches.len(), self.masked_text.len(), self.causal_text.len())
    }

    pub fn len(&self) -> usize {
        self.layout().total()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of positions that carry a loss.
    pub fn n_targets(&self) -> usize {
        self.targets.iter().filter(|&&t| t != IGNORE).count()
    }

    pub fn validate(&self) -> Result<()> {
        let layout = self.layout();
        if self.targets.len() != layout.total() {
            return Err(Error::invalid(format!("{} targets for {} positions", self.targets.len(), layout.total())));
        }
        if self.targets[..layout.prefix()].iter().any(|&t| t != IGNORE) {
            return Err(Error::invalid("target outside the causal segment"));
        }
        Ok(())
    }

    /// Targets of the causal segment only.
    pub fn causal_targets(&self) -> &[TokenId] {
        &self.targets[self.layout().prefix()..]
    }
}
