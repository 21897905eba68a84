//! Contrastive training of binary function embeddings.

pub mod augment;
pub mod checkpoint;
pub mod contrastive;
pub mod corpus;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fewshot;
pub mod fixture;
pub mod index;
pub mod isa;
pub mod metrics;
pub mod optim;
pub mod pools;
pub mod svd;
pub mod train;

pub use augment::{synth_augment, Augmenter, Transform, TransformKind, TransformSpec};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use contrastive::{cosine_sim, instance_prob, nt_xent_grad, nt_xent_loss, SimMatrix};
pub use corpus::{
    corpus_from_records, parse_corpus, Arch, Corpus, FunctionGroup, FunctionInstance, Obfuscation, OptLevel, ParseOptions, Vocab,
};
pub use embedding::Embedding;
pub use encoder::{EncoderConfig, EncoderParams, View};
pub use error::{Error, Result};
pub use optim::{Adam, AdamConfig};
pub use index::{build_index, vulnerability_search, EmbeddingIndex, SearchResult, VulnGroup};
pub use metrics::{
    alignment, loss_decomposition, mrr, recall_at_1, roc_auc, similarity_histogram, uniformity, EmbeddingProvider,
    ScoredPair,
};
pub use pools::{make_pools, EvalPool};
pub use svd::svd_rank2;
pub use eval::{evaluate, pair_auc, EvalConfig, EvalMetrics, Evaluation};
pub use fewshot::{few_shot, FewShotRow};
pub use fixture::{fixture_corpus, generate_fixture, planted_clusters, FixtureConfig};
pub use train::{probe_set, probe_statistics, temperature_sweep, train, train_on_pairs, EpochRecord, TrainConfig, TrainOptions, TrainReport};
