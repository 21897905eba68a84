//! Minibatch contrastive training with Adam.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{Augmenter, TransformSpec};
use crate::contrastive::{nt_xent_grad, nt_xent_loss};
use crate::corpus::{sample_positive_pair, FunctionGroup, FunctionInstance};
use crate::encoder::{EncoderConfig, EncoderParams, View};
use crate::error::{Error, Result};
use crate::eval::pair_auc;
use crate::metrics::{alignment, terms_from_sims, uniformity};
use crate::optim::{Adam, AdamConfig};

pub const PROBE_PAIRS: usize = 128;
const PROBE_SALT: u64 = 0x7072_6f62_6573_6574;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub temperature: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            batch_size: 32,
            temperature: 0.07,
            epochs: 40,
            learning_rate: adam.lr,
            weight_decay: adam.weight_decay,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!("temperature must be positive, got {}", self.temperature)));
        }
        self.adam().validate()
    }
}

/// Where positive pairs come from.
#[derive(Debug, Clone, Copy, Default)]
pub enum PairSource<'a> {
    /// Two distinct stored variants of the same group.
    #[default]
    Variants,
    /// Two fresh augmentations of one stored variant.
    Augmented {
        augmenter: &'a Augmenter,
        spec: &'a TransformSpec,
    },
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions<'a> {
    pub pairs: PairSource<'a>,
    /// Pairs on which alignment and uniformity are tracked; sampled from the
    /// training groups when absent.
    pub probe: Option<&'a [(FunctionInstance, FunctionInstance)]>,
    pub record_wall_time: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub positive_term: f64,
    pub negative_term: f64,
    pub alignment: f64,
    pub uniformity: f64,
    pub batches: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_secs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

impl TrainReport {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("plain record"));
            out.push('\n');
        }
        out
    }
}

fn clip(tokens: &[u32], max: usize) -> &[u32] {
    &tokens[..tokens.len().min(max)]
}

/// Positive pairs drawn round-robin over shuffled groups, each group
/// contributing its pairs in random order. Prefixes are nested by
/// construction.
pub fn nested_pairs(groups: &[FunctionGroup], n: usize, seed: u64) -> Result<Vec<(FunctionInstance, FunctionInstance)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<&FunctionGroup> = groups.iter().filter(|g| g.is_pair_eligible()).collect();
    order.shuffle(&mut rng);
    let mut per_group: Vec<Vec<(usize, usize)>> = order
        .iter()
        .map(|g| {
            let m = g.len();
            let mut pairs: Vec<(usize, usize)> = (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).collect();
            pairs.shuffle(&mut rng);
            pairs.reverse();
            pairs
        })
        .collect();
    let available: usize = per_group.iter().map(Vec::len).sum();
    if n > available {
        return Err(Error::InvalidInput(format!("requested {n} pairs but only {available} exist")));
    }
    let mut out = Vec::with_capacity(n);
    'rounds: while out.len() < n {
        for (g, pairs) in order.iter().zip(per_group.iter_mut()) {
            if out.len() == n {
                break 'rounds;
            }
            if let Some((i, j)) = pairs.pop() {
                out.push((g.members[i].clone(), g.members[j].clone()));
            }
        }
    }
    Ok(out)
}

/// The fixed probe set: [`PROBE_PAIRS`] positive pairs drawn round-robin
/// over the pair-eligible groups in a seed-shuffled order.
pub fn probe_set(groups: &[FunctionGroup], seed: u64) -> Result<Vec<(FunctionInstance, FunctionInstance)>> {
    let eligible: Vec<&FunctionGroup> = groups.iter().filter(|g| g.is_pair_eligible()).collect();
    if eligible.is_empty() {
        return Err(Error::InvalidInput("no pair-eligible groups".into()));
    }
    probe_pairs(&eligible, seed)
}

fn probe_pairs(groups: &[&FunctionGroup], seed: u64) -> Result<Vec<(FunctionInstance, FunctionInstance)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PROBE_SALT);
    let mut order: Vec<&FunctionGroup> = groups.to_vec();
    order.shuffle(&mut rng);
    let mut out = Vec::with_capacity(PROBE_PAIRS);
    for k in 0..PROBE_PAIRS {
        let (a, b) = sample_positive_pair(order[k % order.len()], &mut rng)?;
        out.push((a.clone(), b.clone()));
    }
    Ok(out)
}

/// Alignment and uniformity of the probe pairs under the evaluation view.
pub fn probe_statistics(params: &EncoderParams, probe: &[(FunctionInstance, FunctionInstance)]) -> Result<(f64, f64)> {
    let max = params.config().max_input_length;
    let seqs: Vec<&[u32]> = probe
        .iter()
        .flat_map(|(a, b)| [clip(&a.tokens, max), clip(&b.tokens, max)])
        .collect();
    let embs = params.encode_batch_view(&seqs, View::Representation)?;
    let pairs: Vec<(&[f64], &[f64])> = embs.chunks_exact(2).map(|c| (&c[0][..], &c[1][..])).collect();
    Ok((alignment(&pairs)?, uniformity(&embs)?))
}

enum Units<'a> {
    Groups(Vec<&'a FunctionGroup>),
    Pairs(&'a [(FunctionInstance, FunctionInstance)]),
}

impl Units<'_> {
    fn len(&self) -> usize {
        match self {
            Units::Groups(g) => g.len(),
            Units::Pairs(p) => p.len(),
        }
    }
}

/// Trains on positive pairs sampled from the pair-eligible groups.
pub fn train(
    groups: &[FunctionGroup],
    encoder: &EncoderConfig,
    config: &TrainConfig,
    options: &TrainOptions,
) -> Result<(EncoderParams, TrainReport)> {
    let eligible: Vec<&FunctionGroup> = groups.iter().filter(|g| g.is_pair_eligible()).collect();
    if eligible.is_empty() {
        return Err(Error::InvalidInput("no pair-eligible groups".into()));
    }
    let probe = match options.probe {
        Some(p) => p.to_vec(),
        None => probe_pairs(&eligible, config.seed)?,
    };
    run(Units::Groups(eligible), encoder, config, options, &probe)
}

/// Trains on a fixed list of positive pairs; the batch holds
/// `min(batch_size, pairs.len())` of them.
pub fn train_on_pairs(
    pairs: &[(FunctionInstance, FunctionInstance)],
    encoder: &EncoderConfig,
    config: &TrainConfig,
    options: &TrainOptions,
) -> Result<(EncoderParams, TrainReport)> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no training pairs".into()));
    }
    if pairs.iter().any(|(a, b)| a.group_id != b.group_id) {
        return Err(Error::InvalidInput("training pair members must share a group".into()));
    }
    let config = TrainConfig {
        batch_size: config.batch_size.min(pairs.len()),
        ..config.clone()
    };
    let probe: Vec<(FunctionInstance, FunctionInstance)> = match options.probe {
        Some(p) => p.to_vec(),
        None => pairs.iter().cycle().take(PROBE_PAIRS).cloned().collect(),
    };
    run(Units::Pairs(pairs), encoder, &config, options, &probe)
}

fn run(
    units: Units,
    encoder: &EncoderConfig,
    config: &TrainConfig,
    options: &TrainOptions,
    probe: &[(FunctionInstance, FunctionInstance)],
) -> Result<(EncoderParams, TrainReport)> {
    config.validate()?;
    if config.batch_size > units.len() {
        return Err(Error::InvalidConfig(format!(
            "batch size {} exceeds the {} available training units",
            config.batch_size,
            units.len()
        )));
    }
    if probe.is_empty() {
        return Err(Error::InvalidInput("empty probe set".into()));
    }
    let mut params = EncoderParams::init(encoder)?;
    let mut opt = Adam::new(config.adam(), &params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let max = encoder.max_input_length;
    let tau = config.temperature;
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..units.len()).collect();

    for epoch in 0..config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut pos_sum, mut neg_sum, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for (b, chunk) in order.chunks_exact(config.batch_size).enumerate() {
            let owned: Vec<Vec<u32>> = match (&units, options.pairs) {
                (Units::Groups(groups), PairSource::Augmented { augmenter, spec }) => chunk
                    .iter()
                    .flat_map(|&u| {
                        let g = groups[u];
                        let src = &g.members[rng.random_range(0..g.len())];
                        let x = augmenter.augment(src, spec, &mut rng).tokens;
                        let y = augmenter.augment(src, spec, &mut rng).tokens;
                        [x, y]
                    })
                    .collect(),
                _ => Vec::new(),
            };
            let seqs: Vec<&[u32]> = if owned.is_empty() {
                let mut seqs = Vec::with_capacity(2 * chunk.len());
                for &u in chunk {
                    let (x, y) = match &units {
                        Units::Groups(groups) => sample_positive_pair(groups[u], &mut rng)?,
                        Units::Pairs(pairs) => (&pairs[u].0, &pairs[u].1),
                    };
                    seqs.push(clip(&x.tokens, max));
                    seqs.push(clip(&y.tokens, max));
                }
                seqs
            } else {
                owned.iter().map(|t| clip(t, max)).collect()
            };

            let diverged = |e: Error| {
                if e.is_non_finite() {
                    Error::NonFiniteLoss { epoch: epoch + 1, batch: b + 1 }
                } else {
                    e
                }
            };
            let (embs, caches) = params.forward_batch(&seqs).map_err(diverged)?;
            let (loss, sims) = nt_xent_loss(&embs, tau)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch: epoch + 1, batch: b + 1 });
            }
            let upstream = nt_xent_grad(&embs, tau)?;
            let grads = params.backward_cached(&caches, &upstream)?;
            opt.step(&mut params, &grads)?;

            let terms = terms_from_sims(&sims, tau);
            loss_sum += loss;
            pos_sum += terms.positive;
            neg_sum += terms.negative;
            batches += 1;
        }
        let (align, unif) = probe_statistics(&params, probe).map_err(|e| {
            if e.is_non_finite() {
                Error::NonFiniteLoss { epoch: epoch + 1, batch: batches }
            } else {
                e
            }
        })?;
        let n = batches as f64;
        report.epochs.push(EpochRecord {
            epoch: epoch + 1,
            mean_loss: loss_sum / n,
            positive_term: pos_sum / n,
            negative_term: neg_sum / n,
            alignment: align,
            uniformity: unif,
            batches,
            wall_time_secs: options.record_wall_time.then(|| started.elapsed().as_secs_f64()),
        });
    }
    Ok((params, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Trains once per temperature with the shared seed and scores each model
/// on `eval_groups`. A failing cell records its error and the sweep goes on.
pub fn temperature_sweep(
    groups: &[FunctionGroup],
    eval_groups: &[FunctionGroup],
    encoder: &EncoderConfig,
    config: &TrainConfig,
    temperatures: &[f64],
    options: &TrainOptions,
) -> Vec<SweepRow> {
    temperatures
        .iter()
        .map(|&tau| {
            let cfg = TrainConfig {
                temperature: tau,
                ..config.clone()
            };
            let outcome = train(groups, encoder, &cfg, options).and_then(|(p, _)| pair_auc(&p, eval_groups, config.seed));
            match outcome {
                Ok(auc) => SweepRow {
                    temperature: tau,
                    auc: Some(auc),
                    error: None,
                },
                Err(e) => SweepRow {
                    temperature: tau,
                    auc: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::checkpoint_bytes;
    use crate::fixture::{fixture_corpus, FixtureConfig};

    fn small() -> (Vec<FunctionGroup>, EncoderConfig) {
        let corpus = fixture_corpus(&FixtureConfig {
            groups: 24,
            variants: 3,
            ..FixtureConfig::default()
        })
        .unwrap();
        let enc = EncoderConfig {
            embed_dim: 16,
            head_dim: 8,
            ..EncoderConfig::new(corpus.vocab.len())
        };
        (corpus.groups, enc)
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            epochs: 6,
            learning_rate: 3e-3,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn runs_are_bit_identical() {
        let (groups, enc) = small();
        let (a, ra) = train(&groups, &enc, &quick(), &TrainOptions::default()).unwrap();
        let (b, rb) = train(&groups, &enc, &quick(), &TrainOptions::default()).unwrap();
        assert_eq!(checkpoint_bytes(&a), checkpoint_bytes(&b));
        assert_eq!(ra.to_jsonl(), rb.to_jsonl());
        let (c, _) = train(&groups, &enc, &TrainConfig { seed: 6, ..quick() }, &TrainOptions::default()).unwrap();
        assert_ne!(checkpoint_bytes(&a), checkpoint_bytes(&c));
    }

    #[test]
    fn zero_epochs_returns_init() {
        let (groups, enc) = small();
        let cfg = TrainConfig { epochs: 0, ..quick() };
        let (p, r) = train(&groups, &enc, &cfg, &TrainOptions::default()).unwrap();
        assert!(r.epochs.is_empty());
        assert_eq!(r.to_jsonl(), "");
        assert_eq!(checkpoint_bytes(&p), checkpoint_bytes(&EncoderParams::init(&enc).unwrap()));
    }

    #[test]
    fn report_shape() {
        let (groups, enc) = small();
        let opts = TrainOptions {
            record_wall_time: true,
            ..TrainOptions::default()
        };
        let (_, r) = train(&groups, &enc, &quick(), &opts).unwrap();
        assert_eq!(r.epochs.len(), 6);
        assert_eq!(r.to_jsonl().lines().count(), 6);
        for (i, e) in r.epochs.iter().enumerate() {
            assert_eq!(e.epoch, i + 1);
            assert_eq!(e.batches, 3);
            assert!((e.positive_term + e.negative_term - e.mean_loss).abs() < 1e-9);
            assert!(e.uniformity <= 0.0 && e.alignment >= 0.0);
            assert!(e.wall_time_secs.is_some());
        }
        let (_, r) = train(&groups, &enc, &quick(), &TrainOptions::default()).unwrap();
        assert!(r.epochs.iter().all(|e| e.wall_time_secs.is_none()));
        assert!(!r.to_jsonl().contains("wall_time"));
    }

    #[test]
    fn loss_falls() {
        let (groups, enc) = small();
        let cfg = TrainConfig { epochs: 20, ..quick() };
        let (_, r) = train(&groups, &enc, &cfg, &TrainOptions::default()).unwrap();
        let first = r.epochs[..3].iter().map(|e| e.mean_loss).sum::<f64>();
        let last = r.epochs[17..].iter().map(|e| e.mean_loss).sum::<f64>();
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let (groups, enc) = small();
        let singles: Vec<FunctionGroup> = groups
            .iter()
            .map(|g| FunctionGroup {
                group_id: g.group_id.clone(),
                members: g.members[..1].to_vec(),
            })
            .collect();
        assert!(train(&singles, &enc, &quick(), &TrainOptions::default()).is_err());
        let big = TrainConfig { batch_size: 25, ..quick() };
        assert!(matches!(
            train(&groups, &enc, &big, &TrainOptions::default()),
            Err(Error::InvalidConfig(_))
        ));
        let cold = TrainConfig { temperature: 0.0, ..quick() };
        assert!(train(&groups, &enc, &cold, &TrainOptions::default()).is_err());
        let mixed = vec![(groups[0].members[0].clone(), groups[1].members[0].clone())];
        assert!(train_on_pairs(&mixed, &enc, &quick(), &TrainOptions::default()).is_err());
        assert!(train_on_pairs(&[], &enc, &quick(), &TrainOptions::default()).is_err());
    }

    #[test]
    fn augmented_pairs_train() {
        let corpus = fixture_corpus(&FixtureConfig {
            groups: 16,
            variants: 2,
            ..FixtureConfig::default()
        })
        .unwrap();
        let enc = EncoderConfig {
            embed_dim: 8,
            ..EncoderConfig::new(corpus.vocab.len())
        };
        let augmenter = Augmenter::new(&corpus.vocab);
        let spec = TransformSpec::all(0.5).unwrap();
        let opts = TrainOptions {
            pairs: PairSource::Augmented {
                augmenter: &augmenter,
                spec: &spec,
            },
            ..TrainOptions::default()
        };
        let cfg = TrainConfig { epochs: 2, ..quick() };
        let (a, _) = train(&corpus.groups, &enc, &cfg, &opts).unwrap();
        let (b, _) = train(&corpus.groups, &enc, &cfg, &opts).unwrap();
        assert_eq!(checkpoint_bytes(&a), checkpoint_bytes(&b));
    }

    #[test]
    fn divergence_reports_coordinates() {
        let (groups, enc) = small();
        let wild = TrainConfig {
            learning_rate: 1e300,
            ..quick()
        };
        match train(&groups, &enc, &wild, &TrainOptions::default()) {
            Err(e) => assert!(e.is_non_finite(), "{e}"),
            Ok(_) => panic!("expected divergence"),
        }
    }

    #[test]
    fn nested_pairs_are_prefixes() {
        let (groups, _) = small();
        let all = nested_pairs(&groups, 72, 3).unwrap();
        let some = nested_pairs(&groups, 10, 3).unwrap();
        assert_eq!(&all[..10], &some[..]);
        assert!(all.iter().all(|(a, b)| a.group_id == b.group_id && a.instance_id != b.instance_id));
        let first: std::collections::HashSet<&str> = all[..24].iter().map(|(a, _)| a.group_id.as_str()).collect();
        assert_eq!(first.len(), 24);
        assert!(nested_pairs(&groups, 73, 3).is_err());
    }

    #[test]
    fn small_pair_sets_shrink_the_batch() {
        let (groups, enc) = small();
        let pairs = nested_pairs(&groups, 2, 0).unwrap();
        let (_, r) = train_on_pairs(&pairs, &enc, &quick(), &TrainOptions::default()).unwrap();
        assert!(r.epochs.iter().all(|e| e.batches == 1));
    }

    #[test]
    fn sweep_isolates_failures() {
        let (groups, enc) = small();
        let (tr, ev) = groups.split_at(16);
        let cfg = TrainConfig { epochs: 1, ..quick() };
        let rows = temperature_sweep(tr, ev, &enc, &cfg, &[0.07, -1.0, 0.5], &TrainOptions::default());
        assert_eq!(rows.len(), 3);
        assert!(rows[0].auc.is_some() && rows[2].auc.is_some());
        assert!(rows[1].auc.is_none());
        assert!(rows[1].error.as_deref().unwrap().contains("temperature"));
        let single = temperature_sweep(tr, ev, &enc, &cfg, &[0.07], &TrainOptions::default());
        assert_eq!(single, rows[..1]);
    }
}
