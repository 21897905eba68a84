//! Deterministic synthetic corpora.
//!
//! Each source function is a random x86-64 style instruction stream with
//! its own working registers, library calls and constants. Its variants
//! are produced by [`Augmenter`] with every transform enabled, so two
//! variants of one function share semantics but not surface form.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{Augmenter, TransformSpec};
use crate::corpus::{corpus_from_records, Arch, Corpus, ParseOptions, FunctionInstance, Obfuscation, OptLevel, RawRecord, Vocab, ADDR_TOKEN, IMM_TOKEN, STR_TOKEN};
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::isa;

const MNEMONICS: &[&str] = &[
    "mov", "push", "pop", "lea", "cmp", "add", "sub", "test", "xor", "and", "or", "shl", "shr", "sar", "imul",
    "movzx", "movsx", "movsxd", "cmove", "cmovne", "sete", "setne", "inc", "dec", "neg", "not", "cdqe", "cqo",
    "sbb", "adc", "rol", "ror", "bt", "xchg", "movss", "movsd", "addsd", "mulsd", "pxor", "ucomisd", "movaps",
    "idiv",
];

const NULLARY: &[&str] = &["cdqe", "cqo"];
const UNARY: &[&str] = &["push", "pop", "inc", "dec", "neg", "not", "sete", "setne", "idiv"];
const BRANCHES: &[&str] = &["je", "jne", "jb", "jae", "ja", "jbe", "jl", "jge", "jg", "jle", "jmp"];

const LIBCALLS: &[&str] = &[
    "memcpy", "memset", "strlen", "strcmp", "strncpy", "malloc", "free", "printf", "fprintf", "sprintf",
    "snprintf", "fopen", "fclose", "fread", "fwrite", "open", "close", "read", "write", "socket", "connect",
    "send", "recv", "bind", "listen", "accept", "getenv", "atoi", "strtol", "qsort", "memmove", "calloc",
    "realloc", "exit", "abort", "puts", "fgets", "strchr", "strrchr", "strstr",
];

const EXTRA: &[&str] = &["call", "ret", "nop", "rbp", "rsp"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureConfig {
    pub groups: usize,
    pub variants: usize,
    pub min_instructions: usize,
    pub max_instructions: usize,
    /// Transforms applied to the source function to make each variant.
    pub transforms: TransformSpec,
    pub seed: u64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            groups: 500,
            variants: 4,
            min_instructions: 16,
            max_instructions: 40,
            transforms: "register-rename:1,instruction-reorder-within-block:1,nop-insertion:0.25,operand-synonym-substitution:0.5,block-split:0.5"
                .parse()
                .expect("valid spec"),
            seed: 2024,
        }
    }
}

fn libcall_token(name: &str) -> String {
    format!("<{name}>")
}

/// Every token the fixture can emit, in a fixed order.
pub fn fixture_tokens() -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut push = |t: &str| {
        if !out.iter().any(|o| o == t) {
            out.push(t.to_string());
        }
    };
    MNEMONICS.iter().chain(BRANCHES).chain(EXTRA).for_each(|t| push(t));
    for set in isa::SYNONYMS {
        set.iter().for_each(|t| push(t));
    }
    for fam in &isa::REGISTER_FAMILIES[..3] {
        fam.iter().for_each(|t| push(t));
    }
    for v in 0..=16 {
        push(&v.to_string());
    }
    [IMM_TOKEN, ADDR_TOKEN, STR_TOKEN].iter().for_each(|t| push(t));
    out.extend(LIBCALLS.iter().map(|l| libcall_token(l)));
    out
}

fn zipf(n: usize, s: f64) -> WeightedIndex<f64> {
    WeightedIndex::new((1..=n).map(|r| 1.0 / (r as f64).powf(s))).expect("positive weights")
}

struct Generator {
    mnemonic: WeightedIndex<f64>,
    libcall: WeightedIndex<f64>,
}

impl Generator {
    fn new() -> Self {
        Self {
            mnemonic: zipf(MNEMONICS.len(), 1.6),
            libcall: zipf(LIBCALLS.len(), 0.8),
        }
    }

    fn function<R: Rng>(&self, cfg: &FixtureConfig, rng: &mut R) -> Vec<String> {
        let wide = isa::REGISTER_FAMILIES[0];
        let narrow = isa::REGISTER_FAMILIES[1];
        let n_wide = rng.random_range(3..=6);
        let n_narrow = rng.random_range(2..=5);
        let mut regs: Vec<&str> = wide.choose_multiple(rng, n_wide).copied().collect();
        regs.extend(narrow.choose_multiple(rng, n_narrow).copied());
        let libs: Vec<String> = (0..rng.random_range(1..=3))
            .map(|_| libcall_token(LIBCALLS[self.libcall.sample(rng)]))
            .collect();
        let consts: Vec<String> = (0..3).map(|_| rng.random_range(0..=16).to_string()).collect();

        let n = rng.random_range(cfg.min_instructions..=cfg.max_instructions);
        let mut out = vec!["push".to_string(), "rbp".to_string()];
        let reg = |rng: &mut R| regs.choose(rng).expect("non-empty").to_string();
        for _ in 0..n {
            let roll: f64 = rng.random();
            if roll < 0.06 {
                out.push("call".into());
                out.push(libs.choose(rng).expect("non-empty").clone());
                continue;
            }
            if roll < 0.18 {
                out.push(BRANCHES[rng.random_range(0..BRANCHES.len())].into());
                out.push(ADDR_TOKEN.into());
                continue;
            }
            let m = MNEMONICS[self.mnemonic.sample(rng)];
            out.push(m.into());
            if NULLARY.contains(&m) {
                continue;
            }
            out.push(reg(rng));
            if UNARY.contains(&m) {
                continue;
            }
            let src: f64 = rng.random();
            if src < 0.85 {
                out.push(reg(rng));
            } else if src < 0.95 {
                out.push(consts.choose(rng).expect("non-empty").clone());
            } else if src < 0.98 {
                out.push(IMM_TOKEN.into());
            } else {
                out.push(STR_TOKEN.into());
            }
        }
        out.extend(["pop", "rbp", "ret"].map(String::from));
        out
    }
}

/// Corpus records: `groups` functions with `variants` augmented variants
/// each, grouped contiguously.
pub fn generate_fixture(cfg: &FixtureConfig) -> Result<Vec<RawRecord>> {
    if cfg.groups == 0 || cfg.variants == 0 {
        return Err(Error::InvalidConfig("fixture needs groups and variants".into()));
    }
    if cfg.min_instructions == 0 || cfg.min_instructions > cfg.max_instructions {
        return Err(Error::InvalidConfig("invalid instruction count range".into()));
    }
    let vocab = Vocab::from_tokens(fixture_tokens());
    let augmenter = Augmenter::new(&vocab);
    let spec = &cfg.transforms;
    let generator = Generator::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::with_capacity(cfg.groups * cfg.variants);
    for g in 0..cfg.groups {
        let body = generator.function(cfg, &mut rng);
        let base = FunctionInstance {
            instance_id: format!("fn{g:04}"),
            group_id: format!("fn{g:04}"),
            arch: Arch::Synthetic,
            opt: OptLevel::Synthetic,
            obf: Obfuscation::Synthetic,
            tokens: body.iter().map(|t| vocab.id(t)).collect(),
        };
        for v in 0..cfg.variants {
            let variant = augmenter.augment(&base, spec, &mut rng);
            records.push(RawRecord {
                instance_id: format!("fn{g:04}/v{v}"),
                group_id: base.group_id.clone(),
                arch: variant.arch.to_string(),
                opt: variant.opt.to_string(),
                obf: variant.obf.to_string(),
                tokens: variant
                    .tokens
                    .iter()
                    .map(|&t| vocab.token(t).expect("fixture token").to_string())
                    .collect(),
            });
        }
    }
    Ok(records)
}

/// The fixture parsed with default options and its own vocabulary.
pub fn fixture_corpus(cfg: &FixtureConfig) -> Result<Corpus> {
    corpus_from_records(&generate_fixture(cfg)?, None, &ParseOptions::default())
}

/// Unit embeddings with planted clusters: each cluster is a random centre
/// plus small per-member noise, the rest are uniform on the sphere.
#[derive(Debug, Clone)]
pub struct PlantedClusters {
    pub entries: Vec<(String, Embedding)>,
    /// Member ids per cluster.
    pub clusters: Vec<Vec<String>>,
}

pub fn planted_clusters(sizes: &[usize], total: usize, dim: usize, noise: f64, seed: u64) -> Result<PlantedClusters> {
    let planted: usize = sizes.iter().sum();
    if planted > total || dim < 2 {
        return Err(Error::InvalidConfig(format!(
            "cannot plant {planted} embeddings among {total} of dim {dim}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussian = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        // Box-Muller; direction of a Gaussian vector is uniform on the sphere
        (0..dim)
            .map(|_| {
                let u1: f64 = 1.0 - rng.random::<f64>();
                let u2: f64 = rng.random();
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect()
    };
    let mut entries = Vec::with_capacity(total);
    let mut clusters = Vec::with_capacity(sizes.len());
    for (c, &size) in sizes.iter().enumerate() {
        let centre = Embedding::normalize(gaussian(&mut rng))?;
        let mut ids = Vec::with_capacity(size);
        for m in 0..size {
            let jitter = gaussian(&mut rng);
            let v: Vec<f64> = centre.iter().zip(&jitter).map(|(x, j)| x + noise * j / (dim as f64).sqrt()).collect();
            let id = format!("cve{c}/f{m}");
            entries.push((id.clone(), Embedding::normalize(v)?));
            ids.push(id);
        }
        clusters.push(ids);
    }
    for i in 0..total - planted {
        entries.push((format!("bg{i:05}"), Embedding::normalize(gaussian(&mut rng))?));
    }
    entries.shuffle(&mut rng);
    Ok(PlantedClusters { entries, clusters })
}
