use std::path::{Path, PathBuf};
use std::result::Result;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use simclf_core::corpus::{corpus_from_records, token_frequency_ranks, write_atomic, write_corpus, zipf_fit, LineMode};
use simclf_core::embedding::dot;
use simclf_core::eval::{embed_instances, make_eval_pairs};
use simclf_core::fewshot::DEFAULT_SIZES;
use simclf_core::index::{save_index, VulnRow};
use simclf_core::train::PairSource;
use simclf_core::*;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::FileConfig;
use crate::failure::Failure;
use crate::{
    AnalyzeArgs, Common, CorpusArgs, EvalArgs, FewshotArgs, FixtureArgs, IngestArgs, ModelArgs, SearchArgs, SplitArgs,
    SweepArgs, TrainArgs,
};

const SEED_ENV: &str = "SIMCLF_SEED";
const DEFAULT_TEMPERATURES: &[f64] = &[0.01, 0.07, 0.5, 1.0];
const DEFAULT_HOLDOUT: f64 = 0.2;

type Outcome = Result<(), Failure>;

struct Run {
    file: FileConfig,
    seed: u64,
    timing: bool,
    started: Instant,
}

impl Run {
    fn new(common: &Common, default_seed: u64) -> Result<Self, Failure> {
        if let Some(path) = &common.config {
            require_file(path, "config")?;
        }
        let file = FileConfig::load(common.config.as_deref())?;
        let seed = match (common.seed, file.get::<u64>("seed")?) {
            (Some(s), _) | (None, Some(s)) => s,
            (None, None) => match std::env::var(SEED_ENV) {
                Ok(v) => v
                    .trim()
                    .parse()
                    .map_err(|_| Failure::input(format!("{SEED_ENV}={v} is not an unsigned integer")))?,
                Err(_) => default_seed,
            },
        };
        Ok(Self {
            file,
            seed,
            timing: common.timing,
            started: Instant::now(),
        })
    }

    fn phase<T>(&self, name: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        if self.timing {
            eprintln!(
                "timing: {name} {:.3}s (total {:.3}s)",
                t.elapsed().as_secs_f64(),
                self.started.elapsed().as_secs_f64()
            );
        }
        out
    }

    fn pick<T>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, Failure>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        Ok(match flag {
            Some(v) => v,
            None => self.file.get(key)?.unwrap_or(default),
        })
    }

    fn pick_list<T>(&self, flag: Option<Vec<T>>, key: &str, default: &[T]) -> Result<Vec<T>, Failure>
    where
        T: FromStr + Clone,
        T::Err: std::fmt::Display,
    {
        Ok(match flag {
            Some(v) => v,
            None => self.file.list(key)?.unwrap_or_else(|| default.to_vec()),
        })
    }

    fn encoder(&self, model: &ModelArgs, vocab_size: usize) -> Result<EncoderConfig, Failure> {
        let base = EncoderConfig::new(vocab_size);
        Ok(EncoderConfig {
            embed_dim: self.pick(model.embed_dim, "embed_dim", base.embed_dim)?,
            use_attention: self.pick(model.use_attention, "use_attention", base.use_attention)?,
            use_projection_head: self.pick(model.use_head, "use_head", base.use_projection_head)?,
            head_dim: self.pick(model.head_dim, "head_dim", base.head_dim)?,
            max_input_length: self.max_len(model.max_len)?,
            seed: self.seed,
            ..base
        })
    }

    fn max_len(&self, flag: Option<usize>) -> Result<usize, Failure> {
        self.pick(flag, "max_len", EncoderConfig::new(1).max_input_length)
    }

    fn training(&self, model: &ModelArgs) -> Result<TrainConfig, Failure> {
        let base = TrainConfig::default();
        let cfg = TrainConfig {
            batch_size: self.pick(model.batch_size, "batch_size", base.batch_size)?,
            temperature: self.pick(model.temperature, "temperature", base.temperature)?,
            epochs: self.pick(model.epochs, "epochs", base.epochs)?,
            learning_rate: self.pick(model.lr, "lr", base.learning_rate)?,
            weight_decay: self.pick(model.weight_decay, "weight_decay", base.weight_decay)?,
            seed: self.seed,
            ..base
        };
        Ok(cfg)
    }

    fn augment(&self, model: &ModelArgs) -> Result<Option<TransformSpec>, Failure> {
        let spec: Option<String> = match &model.augment {
            Some(s) => Some(s.clone()),
            None => self.file.get("augment")?,
        };
        spec.map(|s| s.parse::<TransformSpec>().map_err(Failure::from)).transpose()
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::input(format!("{what} file not found: {}", path.display())))
    }
}

fn prepare_out(dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir).map_err(|e| Failure::input(format!("cannot create {}: {e}", dir.display())))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Outcome {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::input(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

fn write_text(path: &Path, text: &str) -> Outcome {
    write_atomic(path, text.as_bytes()).map_err(Failure::from)
}

fn parse_options(strict: bool, max_len: usize) -> ParseOptions {
    ParseOptions {
        mode: if strict { LineMode::Strict } else { LineMode::Skip },
        max_input_length: max_len,
        ..ParseOptions::default()
    }
}

fn load_corpus(path: &Path, vocab: Option<&Vocab>, strict: bool, max_len: usize) -> Result<Corpus, Failure> {
    require_file(path, "corpus")?;
    parse_corpus(path, vocab, &parse_options(strict, max_len)).map_err(|e| match e {
        Error::Io { .. } => Failure::from(e),
        other => Failure::input(format!("{}: {other}", path.display())),
    })
}

fn load_vocab(path: Option<&Path>) -> Result<Option<Vocab>, Failure> {
    path.map(|p| {
        require_file(p, "vocabulary")?;
        Vocab::load(p).map_err(Failure::from)
    })
    .transpose()
}

fn vocab_beside(checkpoint: &Path) -> PathBuf {
    checkpoint.with_file_name("vocab.txt")
}

/// Checkpoint plus the vocabulary it was trained with: `--vocab`, else the
/// `vocab.txt` written next to it by `train`, else one built from the corpus.
fn load_model(checkpoint: &Path, corpus: &CorpusArgs) -> Result<(EncoderParams, Corpus), Failure> {
    require_file(checkpoint, "checkpoint")?;
    require_file(&corpus.corpus, "corpus")?;
    let params = load_checkpoint(checkpoint)
        .map_err(|e| Failure::mismatch(format!("{}: {e}", checkpoint.display())))?;
    let beside = vocab_beside(checkpoint);
    let vocab = match &corpus.vocab {
        Some(p) => load_vocab(Some(p))?,
        None if beside.is_file() => load_vocab(Some(&beside))?,
        None => None,
    };
    let max_len = params.config().max_input_length;
    let parsed = load_corpus(&corpus.corpus, vocab.as_ref(), corpus.strict, max_len)?;
    let expected = params.config().vocab_size;
    if parsed.vocab.len() != expected {
        return Err(Failure::mismatch(format!(
            "checkpoint expects a vocabulary of {expected} tokens but the corpus vocabulary has {}",
            parsed.vocab.len()
        )));
    }
    Ok((params, parsed))
}

pub fn ingest(args: IngestArgs) -> Outcome {
    let run = Run::new(&args.common, 0)?;
    require_file(&args.corpus.corpus, "corpus")?;
    let vocab = load_vocab(args.corpus.vocab.as_deref())?;
    prepare_out(&args.out)?;
    let max_len = run.max_len(args.max_len)?;
    let corpus = run.phase("parse", || {
        load_corpus(&args.corpus.corpus, vocab.as_ref(), args.corpus.strict, max_len)
    })?;
    corpus.vocab.save(args.out.join("vocab.txt"))?;
    write_json(&args.out.join("stats.json"), &corpus.stats)?;
    let s = &corpus.stats;
    println!(
        "{} groups ({} pair-eligible), {} instances, vocabulary {}, {} lines skipped",
        s.groups, s.pair_eligible_groups, s.instances, s.vocab_size, s.skipped_lines
    );
    Ok(())
}

pub fn train(args: TrainArgs) -> Outcome {
    let run = Run::new(&args.common, 0)?;
    require_file(&args.corpus.corpus, "corpus")?;
    let vocab = load_vocab(args.corpus.vocab.as_deref())?;
    prepare_out(&args.out)?;
    let checkpoint = args.checkpoint.clone().unwrap_or_else(|| args.out.join("checkpoint.sclf"));
    if let Some(parent) = checkpoint.parent().filter(|p| !p.as_os_str().is_empty()) {
        prepare_out(parent)?;
    }
    let max_len = run.max_len(args.model.max_len)?;
    let corpus = run.phase("parse", || {
        load_corpus(&args.corpus.corpus, vocab.as_ref(), args.corpus.strict, max_len)
    })?;
    let encoder = run.encoder(&args.model, corpus.vocab.len())?;
    let config = run.training(&args.model)?;
    let spec = run.augment(&args.model)?;
    let augmenter = Augmenter::with_max_length(&corpus.vocab, max_len);
    let options = TrainOptions {
        pairs: match &spec {
            Some(spec) => PairSource::Augmented {
                augmenter: &augmenter,
                spec,
            },
            None => PairSource::Variants,
        },
        record_wall_time: run.timing,
        ..TrainOptions::default()
    };
    let (params, report) = run.phase("train", || simclf_core::train(&corpus.groups, &encoder, &config, &options))?;
    save_checkpoint(&params, &checkpoint)?;
    corpus.vocab.save(vocab_beside(&checkpoint))?;
    write_text(&args.out.join("train_report.jsonl"), &report.to_jsonl())?;
    match report.epochs.last() {
        Some(e) => println!(
            "{} epochs, final loss {:.6}, alignment {:.4}, uniformity {:.4}; checkpoint {}",
            report.epochs.len(),
            e.mean_loss,
            e.alignment,
            e.uniformity,
            checkpoint.display()
        ),
        None => println!("0 epochs; initial checkpoint {}", checkpoint.display()),
    }
    Ok(())
}

pub fn eval(args: EvalArgs) -> Outcome {
    let run = Run::new(&args.common, 0)?;
    prepare_out(&args.out)?;
    let (params, corpus) = run.phase("load", || load_model(&args.checkpoint, &args.corpus))?;
    let config = EvalConfig {
        pool_sizes: run.pick_list(args.pool_size.clone(), "pool_size", &[32])?,
        seed: run.seed,
        bucket_width: args.bucket_width,
    };
    if config.pool_sizes.is_empty() {
        return Err(Failure::input("no pool sizes"));
    }
    let evaluation = run.phase("evaluate", || evaluate(&params, &corpus.groups, &config))?;
    let projection = run.phase("svd", || svd_rank2(&evaluation.embeddings))?;
    write_json(&args.out.join("metrics.json"), &evaluation.metrics)?;
    write_text(&args.out.join("histogram.csv"), &evaluation.histogram.to_csv())?;
    write_text(&args.out.join("svd.csv"), &projection.to_csv(Some(&evaluation.ids)))?;
    let m = &evaluation.metrics;
    let pools: Vec<String> = m
        .mrr
        .iter()
        .map(|(k, v)| format!("mrr@{k} {v:.4} recall@1@{k} {:.4}", m.recall_at_1[k]))
        .collect();
    println!(
        "auc {:.4}, {}, alignment {:.4}, uniformity {:.4}",
        m.auc,
        pools.join(", "),
        m.alignment,
        m.uniformity
    );
    Ok(())
}

fn split_groups(
    run: &Run,
    corpus: &Corpus,
    split: &SplitArgs,
    strict: bool,
    max_len: usize,
) -> Result<(Vec<FunctionGroup>, Vec<FunctionGroup>), Failure> {
    if let Some(path) = &split.eval_corpus {
        let held = load_corpus(path, Some(&corpus.vocab), strict, max_len)?;
        return Ok((corpus.groups.clone(), held.groups));
    }
    let fraction = run.pick(split.holdout, "holdout", DEFAULT_HOLDOUT)?;
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Failure::input(format!("holdout must be in (0, 1), got {fraction}")));
    }
    let n = corpus.groups.len();
    if n < 2 {
        return Err(Failure::input("need at least two groups to hold some out"));
    }
    let held = ((n as f64 * fraction).ceil() as usize).clamp(1, n - 1);
    let (train, eval) = corpus.groups.split_at(n - held);
    Ok((train.to_vec(), eval.to_vec()))
}

pub fn fewshot(args: FewshotArgs) -> Outcome {
    let run = Run::new(&args.common, 0)?;
    require_file(&args.corpus.corpus, "corpus")?;
    let vocab = load_vocab(args.corpus.vocab.as_deref())?;
    prepare_out(&args.out)?;
    let max_len = run.max_len(args.model.max_len)?;
    let corpus = load_corpus(&args.corpus.corpus, vocab.as_ref(), args.corpus.strict, max_len)?;
    let (train_groups, eval_groups) = split_groups(&run, &corpus, &args.split, args.corpus.strict, max_len)?;
    let sizes = run.pick_list(args.sizes.clone(), "sizes", DEFAULT_SIZES)?;
    let encoder = run.encoder(&args.model, corpus.vocab.len())?;
    let config = run.training(&args.model)?;
    let rows = run.phase("fewshot", || {
        few_shot(&train_groups, &eval_groups, &encoder, &config, &sizes, &TrainOptions::default())
    })?;
    write_json(&args.out.join("fewshot.json"), &rows)?;
    let mut csv = String::from("pairs,auc\n");
    for r in &rows {
        csv.push_str(&format!("{},{:.9}\n", r.pairs, r.auc));
        println!("n={:<5} auc {:.4}", r.pairs, r.auc);
    }
    write_text(&args.out.join("fewshot.csv"), &csv)
}

pub fn sweep(args: SweepArgs) -> Outcome {
    let run = Run::new(&args.common, 0)?;
    require_file(&args.corpus.corpus, "corpus")?;
    let vocab = load_vocab(args.corpus.vocab.as_deref())?;
    prepare_out(&args.out)?;
    let max_len = run.max_len(args.model.max_len)?;
    let corpus = load_corpus(&args.corpus.corpus, vocab.as_ref(), args.corpus.strict, max_len)?;
    let (train_groups, eval_groups) = split_groups(&run, &corpus, &args.split, args.corpus.strict, max_len)?;
    let temperatures = run.pick_list(args.temperatures.clone(), "temperatures", DEFAULT_TEMPERATURES)?;
    let encoder = run.encoder(&args.model, corpus.vocab.len())?;
    let config = run.training(&args.model)?;
    let rows = run.phase("sweep", || {
        temperature_sweep(&train_groups, &eval_groups, &encoder, &config, &temperatures, &TrainOptions::default())
    });
    write_json(&args.out.join("sweep.json"), &rows)?;
    for r in &rows {
        match (&r.auc, &r.error) {
            (Some(auc), _) => println!("tau {:<6} auc {auc:.4}", r.temperature),
            (None, e) => println!("tau {:<6} error: {}", r.temperature, e.as_deref().unwrap_or("unknown")),
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct EmbeddingLine {
    id: String,
    embedding: Vec<f64>,
}

fn read_embeddings(path: &Path) -> Result<Vec<(String, Embedding)>, Failure> {
    require_file(path, "embeddings")?;
    let text = std::fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let rec: EmbeddingLine = serde_json::from_str(l)
                .map_err(|e| Failure::input(format!("{} line {}: {e}", path.display(), n + 1)))?;
            let e = Embedding::normalize(rec.embedding)?;
            Ok((rec.id, e))
        })
        .collect()
}

#[derive(Serialize)]
struct QueryResult<'a> {
    query: &'a str,
    hits: Vec<simclf_core::index::Hit>,
}

#[derive(Serialize)]
struct SearchReport<'a> {
    k: usize,
    results: Vec<QueryResult<'a>>,
}

#[derive(Serialize)]
struct VulnReport {
    groups: Vec<VulnRow>,
    all_found: bool,
}

pub fn search(args: SearchArgs) -> Outcome {
    let run = Run::new(&args.common, 0)?;
    if args.query.is_empty() && args.vuln.is_none() {
        return Err(Failure::input("nothing to search: give --query or --vuln"));
    }
    let k: Option<usize> = match args.k {
        Some(k) => Some(k as usize),
        None => run.file.get("k")?,
    };
    if k == Some(0) {
        return Err(Failure::input("k must be >= 1"));
    }
    if !args.query.is_empty() && k.is_none() {
        return Err(Failure::input("--k is required with --query"));
    }
    if let Some(v) = &args.vuln {
        require_file(v, "vulnerability groups")?;
    }
    prepare_out(&args.out)?;
    let entries = run.phase("embed", || -> Result<Vec<(String, Embedding)>, Failure> {
        match (&args.embeddings, &args.checkpoint, &args.corpus) {
            (Some(path), _, _) => read_embeddings(path),
            (None, Some(ckpt), Some(corpus)) => {
                let corpus_args = CorpusArgs {
                    corpus: corpus.clone(),
                    vocab: args.vocab.clone(),
                    strict: args.strict,
                };
                let (params, parsed) = load_model(ckpt, &corpus_args)?;
                let table = embed_instances(&params, parsed.instances())?;
                Ok(parsed
                    .instances()
                    .map(|i| (i.instance_id.clone(), table[&i.instance_id].clone()))
                    .collect())
            }
            _ => Err(Failure::input("give --embeddings, or --checkpoint with --corpus")),
        }
    })?;
    let index = build_index(entries)?;
    if let Some(path) = &args.save_index {
        save_index(&index, path)?;
    }
    if !args.query.is_empty() {
        let k = k.expect("checked above");
        let results = args
            .query
            .iter()
            .map(|q| {
                if !index.contains(q) {
                    return Err(Failure::input(format!("unknown query id {q}")));
                }
                Ok(QueryResult {
                    query: q,
                    hits: index.top_k_of(q, k)?.hits,
                })
            })
            .collect::<Result<Vec<_>, Failure>>()?;
        for r in &results {
            let top: Vec<String> = r.hits.iter().map(|h| format!("{} {:.4}", h.id, h.score)).collect();
            println!("{}: {}", r.query, top.join(", "));
        }
        write_json(&args.out.join("search.json"), &SearchReport { k, results })?;
    }
    if let Some(path) = &args.vuln {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
        let groups: Vec<VulnGroup> =
            serde_json::from_str(&text).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
        let rows = run.phase("vulnerability search", || vulnerability_search(&index, &groups, k))?;
        let all_found = rows.iter().all(|r| r.queries.iter().all(|q| q.found == r.k.min(r.queries.len())));
        for r in &rows {
            println!("{}: k {} recall {:.4} min found {}", r.name, r.k, r.recall, r.min_found);
        }
        write_json(&args.out.join("vuln.json"), &VulnReport { groups: rows, all_found })?;
    }
    Ok(())
}

pub fn analyze(args: AnalyzeArgs) -> Outcome {
    let run = Run::new(&args.common, 0)?;
    prepare_out(&args.out)?;
    let (corpus, params) = match &args.checkpoint {
        Some(ckpt) => {
            let (p, c) = load_model(ckpt, &args.corpus)?;
            (c, Some(p))
        }
        None => {
            let vocab = load_vocab(args.corpus.vocab.as_deref())?;
            let max_len = run.max_len(None)?;
            (load_corpus(&args.corpus.corpus, vocab.as_ref(), args.corpus.strict, max_len)?, None)
        }
    };
    let ranks = token_frequency_ranks(&corpus.groups, &corpus.vocab)?;
    let mut csv = String::from("rank,token,count\n");
    for (i, (tok, count)) in ranks.iter().enumerate() {
        let tok = if tok.contains([',', '"']) {
            format!("\"{}\"", tok.replace('"', "\"\""))
        } else {
            tok.clone()
        };
        csv.push_str(&format!("{},{tok},{count}\n", i + 1));
    }
    write_text(&args.out.join("zipf.csv"), &csv)?;
    match zipf_fit(&ranks) {
        Some(fit) => println!("{} distinct tokens, log-log slope {:.4}", ranks.len(), fit.slope),
        None => println!("{} distinct tokens, too few for a slope", ranks.len()),
    }
    let Some(params) = params else {
        return Ok(());
    };
    let table = run.phase("embed", || embed_instances(&params, corpus.instances()))?;
    let ids: Vec<String> = corpus.instances().map(|i| i.instance_id.clone()).collect();
    let embs: Vec<&Embedding> = ids.iter().map(|id| &table[id]).collect();
    let projection = svd_rank2(&embs.iter().map(|e| e.as_slice()).collect::<Vec<_>>())?;
    write_text(&args.out.join("svd.csv"), &projection.to_csv(Some(&ids)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let pairs = make_eval_pairs(&corpus.groups, &mut rng)?;
    let scored: Vec<ScoredPair> = pairs
        .iter()
        .map(|p| ScoredPair::new(dot(&table[&p.a.instance_id], &table[&p.b.instance_id]), p.similar))
        .collect();
    let hist = similarity_histogram(&scored, args.bucket_width)?;
    write_text(&args.out.join("histogram.csv"), &hist.to_csv())?;
    println!(
        "singular values {:.4} {:.4}; {} scored pairs",
        projection.singular_values[0],
        projection.singular_values[1],
        scored.len()
    );
    Ok(())
}

pub fn fixture(args: FixtureArgs) -> Outcome {
    let defaults = FixtureConfig::default();
    let run = Run::new(&args.common, defaults.seed)?;
    prepare_out(&args.out)?;
    if let Some(sizes) = &args.planted {
        let planted = planted_clusters(sizes, args.total, args.dim, args.noise, run.seed)?;
        let mut lines = String::new();
        for (id, e) in &planted.entries {
            let line = EmbeddingLine {
                id: id.clone(),
                embedding: e.to_vec(),
            };
            lines.push_str(&serde_json::to_string(&line).map_err(|e| Failure::input(e.to_string()))?);
            lines.push('\n');
        }
        write_text(&args.out.join("embeddings.jsonl"), &lines)?;
        let groups: Vec<VulnGroup> = planted
            .clusters
            .iter()
            .enumerate()
            .map(|(i, ids)| VulnGroup {
                name: format!("cve{i}"),
                ids: ids.clone(),
            })
            .collect();
        write_json(&args.out.join("vuln_groups.json"), &groups)?;
        println!("{} embeddings, {} planted clusters", planted.entries.len(), groups.len());
        return Ok(());
    }
    let transforms = match &args.transforms {
        Some(s) => s.parse()?,
        None => defaults.transforms.clone(),
    };
    let cfg = FixtureConfig {
        groups: args.groups,
        variants: args.variants,
        transforms,
        seed: run.seed,
        ..defaults
    };
    let records = run.phase("generate", || generate_fixture(&cfg))?;
    let path = args.out.join("corpus.jsonl");
    write_corpus(&path, &records)?;
    let corpus = corpus_from_records(&records, None, &ParseOptions::default())?;
    println!(
        "{} groups x {} variants, vocabulary {}; {}",
        cfg.groups,
        cfg.variants,
        corpus.vocab.len(),
        path.display()
    );
    Ok(())
}
