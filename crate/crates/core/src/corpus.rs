//! Corpus ingest: JSONL records of pre-disassembled functions, token
//! normalization, vocabulary construction and grouping by source function.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const RESERVED: usize = 2;
pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";

pub const IMM_TOKEN: &str = "IMM";
pub const ADDR_TOKEN: &str = "ADDR";
pub const STR_TOKEN: &str = "STR";

pub const DEFAULT_MAX_INPUT_LENGTH: usize = 512;

macro_rules! label_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $label:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $label)] $variant),+
        }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $label),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
                $(if s.eq_ignore_ascii_case($label) {
                    return Ok($name::$variant);
                })+
                Err(format!("unknown {} {:?}", stringify!($name), s))
            }
        }
    };
}

label_enum!(
    /// Target architecture of a compiled variant.
    Arch {
        X86_32 => "x86-32",
        X86_64 => "x86-64",
        Arm32 => "arm-32",
        Arm64 => "arm-64",
        Mips32 => "mips-32",
        Mips64 => "mips-64",
        Synthetic => "synthetic",
    }
);

label_enum!(
    /// Optimization level of a compiled variant.
    OptLevel {
        O0 => "O0",
        O1 => "O1",
        O2 => "O2",
        O3 => "O3",
        Os => "Os",
        Synthetic => "synthetic",
    }
);

label_enum!(
    /// Obfuscation pass applied to a variant.
    Obfuscation {
        None => "none",
        Bcf => "bcf",
        Sub => "sub",
        Split => "split",
        Synthetic => "synthetic",
    }
);

/// One disassembled variant of a source function.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionInstance {
    pub instance_id: String,
    pub group_id: String,
    pub arch: Arch,
    pub opt: OptLevel,
    pub obf: Obfuscation,
    pub tokens: Vec<u32>,
}

impl FunctionInstance {
    fn variant_key(&self) -> (Arch, OptLevel, Obfuscation) {
        (self.arch, self.opt, self.obf)
    }

    fn is_synthetic(&self) -> bool {
        self.arch == Arch::Synthetic
            && self.opt == OptLevel::Synthetic
            && self.obf == Obfuscation::Synthetic
    }
}

/// All variants of one source function.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionGroup {
    pub group_id: String,
    pub members: Vec<FunctionInstance>,
}

impl FunctionGroup {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn is_pair_eligible(&self) -> bool {
        self.members.len() >= 2
    }
}

/// Token string <-> id map with reserved PAD/UNK slots and per-id counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    freq: Vec<u64>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_tokens(std::iter::empty::<String>())
    }
}

impl Vocab {
    /// Builds a vocabulary from non-reserved tokens in id order. Duplicates
    /// keep their first id.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocab {
            tokens: vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()],
            index: HashMap::new(),
            freq: vec![0, 0],
        };
        vocab.index.insert(PAD_TOKEN.to_string(), PAD_ID);
        vocab.index.insert(UNK_TOKEN.to_string(), UNK_ID);
        for tok in tokens {
            let tok = tok.into();
            if vocab.index.contains_key(&tok) {
                continue;
            }
            let id = vocab.tokens.len() as u32;
            vocab.index.insert(tok.clone(), id);
            vocab.tokens.push(tok);
            vocab.freq.push(0);
        }
        vocab
    }

    /// Builds a vocabulary from a token stream, ordering ids by descending
    /// frequency with lexicographic tie-break, and records the counts.
    pub fn build<'a, I>(stream: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<&'a str, u64> = HashMap::new();
        for tok in stream {
            *counts.entry(tok).or_default() += 1;
        }
        let mut ranked: Vec<(&str, u64)> = counts
            .into_iter()
            .filter(|(t, _)| *t != PAD_TOKEN && *t != UNK_TOKEN)
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut vocab = Self::from_tokens(ranked.iter().map(|(t, _)| t.to_string()));
        for (tok, count) in ranked {
            let id = vocab.index[tok] as usize;
            vocab.freq[id] = count;
        }
        vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= RESERVED
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn frequency(&self, id: u32) -> u64 {
        self.freq.get(id as usize).copied().unwrap_or(0)
    }

    pub fn frequencies(&self) -> &[u64] {
        &self.freq
    }

    /// Non-reserved tokens in id order.
    pub fn entries(&self) -> impl Iterator<Item = (u32, &str)> {
        self.tokens
            .iter()
            .enumerate()
            .skip(RESERVED)
            .map(|(i, t)| (i as u32, t.as_str()))
    }

    fn reset_frequencies(&mut self) {
        self.freq.iter_mut().for_each(|c| *c = 0);
    }

    fn count(&mut self, id: u32) {
        self.freq[id as usize] += 1;
    }

    /// Writes one non-reserved token per line; line `n` (0-based) holds id
    /// `n + RESERVED`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for (_, tok) in self.entries() {
            out.push_str(tok);
            out.push('\n');
        }
        write_atomic(path, out.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                return Err(Error::MalformedLine {
                    line: n + 1,
                    message: "empty vocabulary entry".into(),
                });
            }
            tokens.push(line.to_string());
        }
        let vocab = Self::from_tokens(tokens.iter().cloned());
        if vocab.len() != tokens.len() + RESERVED {
            return Err(Error::InvalidInput(format!(
                "vocabulary file {} has duplicate or reserved entries",
                path.display()
            )));
        }
        Ok(vocab)
    }
}

/// Write-then-rename so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.tmp", ext.to_string_lossy()),
        None => "tmp".to_string(),
    });
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// How raw operand strings are folded into class tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizationPolicy {
    /// Immediates with magnitude above this become `IMM`.
    pub imm_threshold: u64,
    /// Non-negative values at or above this become `ADDR`.
    pub addr_threshold: u64,
    pub lowercase: bool,
}

impl Default for NormalizationPolicy {
    fn default() -> Self {
        Self {
            imm_threshold: 16,
            addr_threshold: 0x1000,
            lowercase: true,
        }
    }
}

fn parse_numeric(tok: &str) -> Option<(bool, u64)> {
    let body = tok.strip_prefix(['#', '$']).unwrap_or(tok);
    let (negative, body) = match body.as_bytes().first()? {
        b'-' => (true, &body[1..]),
        b'+' => (false, &body[1..]),
        _ => (false, body),
    };
    if body.is_empty() {
        return None;
    }
    let value = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        if hex.is_empty() || !hex.bytes().all(|b| b.is_ascii_hexdigit()) {
            return None;
        }
        // Saturate rather than reject absurdly long literals.
        u64::from_str_radix(hex, 16).unwrap_or(u64::MAX)
    } else if body.bytes().all(|b| b.is_ascii_digit()) {
        body.parse::<u64>().unwrap_or(u64::MAX)
    } else if !negative && body.len() >= 6 && body.bytes().all(|b| b.is_ascii_hexdigit()) {
        // objdump-style bare addresses, e.g. `call 4010a0`
        u64::from_str_radix(body, 16).unwrap_or(u64::MAX)
    } else {
        return None;
    };
    Some((negative, value))
}

fn normalize_one(tok: &str, policy: &NormalizationPolicy) -> Option<String> {
    let tok = tok.trim();
    if tok.is_empty() {
        return None;
    }
    if tok == IMM_TOKEN || tok == ADDR_TOKEN || tok == STR_TOKEN {
        return Some(tok.to_string());
    }
    let bytes = tok.as_bytes();
    if bytes.len() >= 2 && (bytes[0] == b'"' || bytes[0] == b'\'') && bytes[bytes.len() - 1] == bytes[0] {
        return Some(STR_TOKEN.to_string());
    }
    if let Some((negative, value)) = parse_numeric(tok) {
        if !negative && value >= policy.addr_threshold {
            return Some(ADDR_TOKEN.to_string());
        }
        if value > policy.imm_threshold {
            return Some(IMM_TOKEN.to_string());
        }
        return Some(if negative && value != 0 {
            format!("-{value}")
        } else {
            value.to_string()
        });
    }
    Some(if policy.lowercase {
        tok.to_lowercase()
    } else {
        tok.to_string()
    })
}

/// Folds addresses, large immediates and string literals into class tokens
/// and lowercases everything else. Whitespace-only tokens are dropped.
pub fn normalize_tokens<S: AsRef<str>>(raw: &[S], policy: &NormalizationPolicy) -> Vec<String> {
    raw.iter()
        .filter_map(|t| normalize_one(t.as_ref(), policy))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineMode {
    /// Abort on the first malformed line.
    Strict,
    /// Skip malformed lines and count them.
    Skip,
}

#[derive(Debug, Clone)]
pub struct ParseOptions {
    pub mode: LineMode,
    pub policy: NormalizationPolicy,
    pub max_input_length: usize,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self {
            mode: LineMode::Strict,
            policy: NormalizationPolicy::default(),
            max_input_length: DEFAULT_MAX_INPUT_LENGTH,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub groups: usize,
    pub instances: usize,
    pub pair_eligible_groups: usize,
    pub tokens: u64,
    pub oov_tokens: u64,
    pub oov_rate: f64,
    pub truncated_instances: usize,
    pub skipped_lines: usize,
    pub vocab_size: usize,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub groups: Vec<FunctionGroup>,
    pub vocab: Vocab,
    pub stats: CorpusStats,
}

impl Corpus {
    pub fn instances(&self) -> impl Iterator<Item = &FunctionInstance> {
        self.groups.iter().flat_map(|g| g.members.iter())
    }
}

/// One corpus line as it appears on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRecord {
    pub instance_id: String,
    pub group_id: String,
    pub arch: String,
    pub opt: String,
    pub obf: String,
    pub tokens: Vec<String>,
}

struct PendingInstance {
    instance_id: String,
    group_id: String,
    arch: Arch,
    opt: OptLevel,
    obf: Obfuscation,
    tokens: Vec<String>,
}

fn parse_line(line: &str, options: &ParseOptions) -> std::result::Result<(PendingInstance, bool), String> {
    let rec: RawRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let arch = rec.arch.parse::<Arch>()?;
    let opt = rec.opt.parse::<OptLevel>()?;
    let obf = rec.obf.parse::<Obfuscation>()?;
    if rec.instance_id.is_empty() || rec.group_id.is_empty() {
        return Err("empty instance_id or group_id".into());
    }
    let mut tokens = normalize_tokens(&rec.tokens, &options.policy);
    if tokens.is_empty() {
        return Err(format!("instance {} has no tokens after normalization", rec.instance_id));
    }
    let truncated = tokens.len() > options.max_input_length;
    tokens.truncate(options.max_input_length);
    Ok((
        PendingInstance {
            instance_id: rec.instance_id,
            group_id: rec.group_id,
            arch,
            opt,
            obf,
            tokens,
        },
        truncated,
    ))
}

/// Reads a JSONL corpus, normalizes and truncates tokens, maps them through
/// `vocab` (or a vocabulary built from this corpus) and groups instances by
/// `group_id` in first-appearance order.
pub fn parse_corpus(path: impl AsRef<Path>, vocab: Option<&Vocab>, options: &ParseOptions) -> Result<Corpus> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let lines = BufReader::new(file).lines().map(|l| l.map_err(|e| Error::io(path, e)));
    build_corpus(lines, vocab, options)
}

/// [`parse_corpus`] over in-memory records.
pub fn corpus_from_records(records: &[RawRecord], vocab: Option<&Vocab>, options: &ParseOptions) -> Result<Corpus> {
    let lines = records
        .iter()
        .map(|r| serde_json::to_string(r).map_err(|e| Error::InvalidInput(e.to_string())));
    build_corpus(lines, vocab, options)
}

fn build_corpus<I>(lines: I, vocab: Option<&Vocab>, options: &ParseOptions) -> Result<Corpus>
where
    I: Iterator<Item = Result<String>>,
{
    if options.max_input_length == 0 {
        return Err(Error::InvalidConfig("max_input_length must be >= 1".into()));
    }
    let mut pending = Vec::new();
    let mut skipped = 0usize;
    let mut truncated_instances = 0usize;
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(&line, options) {
            Ok((inst, truncated)) => {
                truncated_instances += usize::from(truncated);
                pending.push(inst);
            }
            Err(message) => match options.mode {
                LineMode::Strict => return Err(Error::MalformedLine { line: n + 1, message }),
                LineMode::Skip => skipped += 1,
            },
        }
    }
    if pending.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    let mut vocab = match vocab {
        Some(v) => v.clone(),
        None => Vocab::build(pending.iter().flat_map(|p| p.tokens.iter().map(String::as_str))),
    };
    vocab.reset_frequencies();

    let mut groups: Vec<FunctionGroup> = Vec::new();
    let mut group_index: HashMap<String, usize> = HashMap::new();
    let mut seen_ids: HashMap<String, ()> = HashMap::new();
    let mut total = 0u64;
    let mut oov = 0u64;
    for p in pending {
        if seen_ids.insert(p.instance_id.clone(), ()).is_some() {
            return Err(Error::DuplicateInstance(p.instance_id));
        }
        let tokens: Vec<u32> = p
            .tokens
            .iter()
            .map(|t| {
                let id = vocab.id(t);
                vocab.count(id);
                id
            })
            .collect();
        total += tokens.len() as u64;
        oov += tokens.iter().filter(|&&t| t == UNK_ID).count() as u64;
        let inst = FunctionInstance {
            instance_id: p.instance_id,
            group_id: p.group_id,
            arch: p.arch,
            opt: p.opt,
            obf: p.obf,
            tokens,
        };
        let gi = *group_index.entry(inst.group_id.clone()).or_insert_with(|| {
            groups.push(FunctionGroup {
                group_id: inst.group_id.clone(),
                members: Vec::new(),
            });
            groups.len() - 1
        });
        let group = &mut groups[gi];
        // Synthetic variants are told apart by instance id alone.
        if !inst.is_synthetic() && group.members.iter().any(|m| m.variant_key() == inst.variant_key()) {
            return Err(Error::DuplicateVariant {
                group_id: inst.group_id,
                arch: inst.arch.to_string(),
                opt: inst.opt.to_string(),
                obf: inst.obf.to_string(),
            });
        }
        group.members.push(inst);
    }

    let stats = CorpusStats {
        groups: groups.len(),
        instances: groups.iter().map(FunctionGroup::len).sum(),
        pair_eligible_groups: groups.iter().filter(|g| g.is_pair_eligible()).count(),
        tokens: total,
        oov_tokens: oov,
        oov_rate: if total == 0 { 0.0 } else { oov as f64 / total as f64 },
        truncated_instances,
        skipped_lines: skipped,
        vocab_size: vocab.len(),
    };
    Ok(Corpus { groups, vocab, stats })
}

/// Serializes records as JSONL.
pub fn write_corpus(path: impl AsRef<Path>, records: &[RawRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::InvalidInput(e.to_string()))?;
        out.push(b'\n');
    }
    write_atomic(path.as_ref(), &out)
}

/// Two distinct members drawn uniformly without replacement.
pub fn sample_positive_pair<'a, R: Rng + ?Sized>(
    group: &'a FunctionGroup,
    rng: &mut R,
) -> Result<(&'a FunctionInstance, &'a FunctionInstance)> {
    if !group.is_pair_eligible() {
        return Err(Error::NotPairEligible(group.group_id.clone()));
    }
    let picked = index::sample(rng, group.members.len(), 2);
    Ok((&group.members[picked.index(0)], &group.members[picked.index(1)]))
}

/// Token counts across the corpus, descending by count with lexicographic
/// tie-break.
pub fn token_frequency_ranks(groups: &[FunctionGroup], vocab: &Vocab) -> Result<Vec<(String, u64)>> {
    let mut counts = vec![0u64; vocab.len()];
    let mut any = false;
    for inst in groups.iter().flat_map(|g| g.members.iter()) {
        any = true;
        for &t in &inst.tokens {
            let slot = counts
                .get_mut(t as usize)
                .ok_or(Error::TokenOutOfRange { id: t, vocab_size: vocab.len() })?;
            *slot += 1;
        }
    }
    if !any {
        return Err(Error::EmptyCorpus);
    }
    let mut ranked: Vec<(String, u64)> = counts
        .into_iter()
        .enumerate()
        .filter(|&(_, c)| c > 0)
        .map(|(id, c)| (vocab.token(id as u32).unwrap_or(UNK_TOKEN).to_string(), c))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(ranked)
}

/// Least-squares fit of `ln(count)` against `ln(rank)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ZipfFit {
    pub slope: f64,
    pub intercept: f64,
}

pub fn zipf_fit(ranks: &[(String, u64)]) -> Option<ZipfFit> {
    if ranks.len() < 2 {
        return None;
    }
    let n = ranks.len() as f64;
    let xs: Vec<f64> = (1..=ranks.len()).map(|r| (r as f64).ln()).collect();
    let ys: Vec<f64> = ranks.iter().map(|(_, c)| (*c as f64).ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    Some(ZipfFit {
        slope,
        intercept: my - slope * mx,
    })
}
