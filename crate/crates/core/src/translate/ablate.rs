use serde::{Deserialize, Serialize};

use super::finetune::{finetune_supervised, transfer_parameters, FinetuneEvent, FinetuneOutcome, FinetuneSpec};
use crate::corpus::{TokenSeq, Vocab};
use crate::error::{invalid, Result};
use crate::model::{Checkpoint, Component, ModelConfig, Seq2Seq};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub component: Component,
    pub with_cross_attention: bool,
    pub init_seed: u64,
}

impl AblationSpec {
    /// Components that are reset and trained; everything else stays frozen.
    pub fn ablated(&self) -> Result<Vec<Component>> {
        use Component::*;
        if !matches!(self.component, Embedding | EncoderLayers | DecoderLayers | CrossAttention) {
            return invalid(format!("{} cannot be ablated", self.component));
        }
        let mut out = vec![self.component];
        if self.with_cross_attention && self.component != CrossAttention {
            out.push(CrossAttention);
        }
        Ok(out)
    }
}

/// Transfers a pretrained model, re-draws the ablated components, freezes
/// the rest and finetunes only the ablated part.
#[allow(clippy::too_many_arguments)]
pub fn ablate(
    ckpt: &Checkpoint,
    vocab: &Vocab,
    downstream: &ModelConfig,
    train: &[(TokenSeq, TokenSeq)],
    dev: &[(TokenSeq, TokenSeq)],
    ablation: &AblationSpec,
    spec: &FinetuneSpec,
    seed: u64,
    on_event: impl FnMut(FinetuneEvent<'_>) -> Result<()>,
) -> Result<(Seq2Seq, FinetuneOutcome)> {
    let ablated = ablation.ablated()?;
    let mut model = transfer_parameters(ckpt, downstream, &vocab.hash())?;
    let tags = model.tag_components()?;
    if ablated.iter().any(|c| !tags.contains_key(c)) {
        return invalid("model has no tensors for an ablated component");
    }
    model.params.reinit(&ablated, ablation.init_seed);
    model.params.train_only(&ablated);
    let out = finetune_supervised(&mut model, vocab, train, dev, spec, seed, on_event)?;
    Ok((model, out))
}
