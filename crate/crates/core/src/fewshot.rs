//! Training on nested subsets of positive pairs.

use serde::{Deserialize, Serialize};

use crate::corpus::FunctionGroup;
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::eval::pair_auc;
use crate::train::{nested_pairs, train_on_pairs, TrainConfig, TrainOptions};

pub const DEFAULT_SIZES: &[usize] = &[2, 8, 32, 128, 512, 2048];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotRow {
    pub pairs: usize,
    pub auc: f64,
}

/// For each size `n`, trains from the same initialization on the first `n`
/// pairs of one nested sequence and scores the model on `eval_groups`.
/// Size 0 scores the untrained encoder.
pub fn few_shot(
    train_groups: &[FunctionGroup],
    eval_groups: &[FunctionGroup],
    encoder: &EncoderConfig,
    config: &TrainConfig,
    sizes: &[usize],
    options: &TrainOptions,
) -> Result<Vec<FewShotRow>> {
    let largest = sizes.iter().copied().max().unwrap_or(0);
    if sizes.is_empty() {
        return Err(Error::InvalidInput("no few-shot sizes".into()));
    }
    let pairs = nested_pairs(train_groups, largest, config.seed)?;
    sizes
        .iter()
        .map(|&n| {
            let params = if n == 0 {
                EncoderParams::init(encoder)?
            } else {
                train_on_pairs(&pairs[..n], encoder, config, options)?.0
            };
            Ok(FewShotRow {
                pairs: n,
                auc: pair_auc(&params, eval_groups, config.seed)?,
            })
        })
        .collect()
}
