//! Token-level stand-ins for compiler and obfuscator variation.
//!
//! Each transform works on the id stream of a [`FunctionInstance`]. The
//! stream is segmented into instructions at mnemonic tokens and into basic
//! blocks after terminators; tokens before the first mnemonic form a prefix
//! that is never moved.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Arch, FunctionInstance, Obfuscation, OptLevel, Vocab, ADDR_TOKEN, DEFAULT_MAX_INPUT_LENGTH};
use crate::error::{Error, Result};
use crate::isa;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformKind {
    RegisterRename,
    InstructionReorderWithinBlock,
    NopInsertion,
    OperandSynonymSubstitution,
    BlockSplit,
}

impl TransformKind {
    pub const ALL: [TransformKind; 5] = [
        TransformKind::RegisterRename,
        TransformKind::InstructionReorderWithinBlock,
        TransformKind::NopInsertion,
        TransformKind::OperandSynonymSubstitution,
        TransformKind::BlockSplit,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TransformKind::RegisterRename => "register-rename",
            TransformKind::InstructionReorderWithinBlock => "instruction-reorder-within-block",
            TransformKind::NopInsertion => "nop-insertion",
            TransformKind::OperandSynonymSubstitution => "operand-synonym-substitution",
            TransformKind::BlockSplit => "block-split",
        }
    }
}

impl FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TransformKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown transform {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub kind: TransformKind,
    strength: f64,
}

impl Transform {
    pub fn new(kind: TransformKind, strength: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&strength) {
            return Err(Error::InvalidConfig(format!(
                "strength {strength} for {} outside [0, 1]",
                kind.as_str()
            )));
        }
        Ok(Self { kind, strength })
    }

    pub fn strength(&self) -> f64 {
        self.strength
    }
}

/// Ordered list of transforms; empty means identity.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub steps: Vec<Transform>,
}

impl TransformSpec {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn new(steps: Vec<Transform>) -> Self {
        Self { steps }
    }

    /// Every transform at the same strength, in canonical order.
    pub fn all(strength: f64) -> Result<Self> {
        TransformKind::ALL
            .into_iter()
            .map(|k| Transform::new(k, strength))
            .collect::<Result<Vec<_>>>()
            .map(Self::new)
    }

    pub fn is_identity(&self) -> bool {
        self.steps.is_empty()
    }
}

impl fmt::Display for TransformSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .steps
            .iter()
            .map(|t| format!("{}:{}", t.kind.as_str(), t.strength))
            .collect();
        f.write_str(&parts.join(","))
    }
}

/// Parses `kind:strength,kind:strength`. The empty string is the identity.
impl FromStr for TransformSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut steps = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (kind, strength) = part
                .split_once(':')
                .ok_or_else(|| Error::InvalidConfig(format!("expected kind:strength, got {part:?}")))?;
            let strength: f64 = strength
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad strength in {part:?}")))?;
            steps.push(Transform::new(kind.parse()?, strength)?);
        }
        Ok(Self { steps })
    }
}

/// Vocabulary-resolved token classes.
#[derive(Debug, Clone)]
pub struct Augmenter {
    families: Vec<Vec<u32>>,
    synonyms: Vec<Option<usize>>,
    synonym_sets: Vec<Vec<u32>>,
    mnemonic: Vec<bool>,
    terminator: Vec<bool>,
    nop: Option<u32>,
    jmp: Option<u32>,
    addr: Option<u32>,
    max_input_length: usize,
}

impl Augmenter {
    pub fn new(vocab: &Vocab) -> Self {
        Self::with_max_length(vocab, DEFAULT_MAX_INPUT_LENGTH)
    }

    pub fn with_max_length(vocab: &Vocab, max_input_length: usize) -> Self {
        let n = vocab.len();
        let mut claimed = vec![false; n];
        let mut families = Vec::new();
        for fam in isa::REGISTER_FAMILIES {
            let mut ids = Vec::new();
            for name in fam.iter() {
                if let Some(id) = vocab.get(name) {
                    if !claimed[id as usize] {
                        claimed[id as usize] = true;
                        ids.push(id);
                    }
                }
            }
            if ids.len() >= 2 {
                families.push(ids);
            }
        }

        let mut synonyms = vec![None; n];
        let mut synonym_sets = Vec::new();
        for set in isa::SYNONYMS {
            let ids: Vec<u32> = set.iter().filter_map(|t| vocab.get(t)).collect();
            if ids.len() >= 2 {
                for &id in &ids {
                    synonyms[id as usize] = Some(synonym_sets.len());
                }
                synonym_sets.push(ids);
            }
        }

        let mut mnemonic = vec![false; n];
        let mut terminator = vec![false; n];
        for (id, tok) in vocab.entries() {
            mnemonic[id as usize] = isa::is_mnemonic(tok);
            terminator[id as usize] = isa::is_terminator(tok);
        }

        Self {
            families,
            synonyms,
            synonym_sets,
            mnemonic,
            terminator,
            nop: vocab.get(isa::NOP),
            jmp: vocab.get(isa::JMP),
            addr: vocab.get(ADDR_TOKEN),
            max_input_length,
        }
    }

    pub fn register_families(&self) -> &[Vec<u32>] {
        &self.families
    }

    fn is_mnemonic(&self, id: u32) -> bool {
        self.mnemonic.get(id as usize).copied().unwrap_or(false)
    }

    fn is_terminator(&self, id: u32) -> bool {
        self.terminator.get(id as usize).copied().unwrap_or(false)
    }

    /// Start offsets of each instruction; offset 0 is always a start.
    fn instruction_starts(&self, tokens: &[u32]) -> Vec<usize> {
        let mut starts = vec![0];
        starts.extend((1..tokens.len()).filter(|&i| self.is_mnemonic(tokens[i])));
        starts
    }

    fn split_instructions<'t>(&self, tokens: &'t [u32]) -> Vec<&'t [u32]> {
        let starts = self.instruction_starts(tokens);
        starts
            .iter()
            .enumerate()
            .map(|(k, &s)| {
                let e = starts.get(k + 1).copied().unwrap_or(tokens.len());
                &tokens[s..e]
            })
            .collect()
    }

    fn rename_registers<R: Rng + ?Sized>(&self, tokens: &mut [u32], strength: f64, rng: &mut R) {
        let mut map: Vec<(u32, u32)> = Vec::new();
        for fam in &self.families {
            let mut chosen: Vec<u32> = fam.iter().copied().filter(|_| rng.random_bool(strength)).collect();
            if chosen.len() < 2 {
                continue;
            }
            chosen.shuffle(rng);
            // cyclic shift: a permutation without fixed points on `chosen`
            for (i, &from) in chosen.iter().enumerate() {
                map.push((from, chosen[(i + 1) % chosen.len()]));
            }
        }
        if map.is_empty() {
            return;
        }
        for t in tokens.iter_mut() {
            if let Some(&(_, to)) = map.iter().find(|(from, _)| from == t) {
                *t = to;
            }
        }
    }

    fn reorder<R: Rng + ?Sized>(&self, tokens: &[u32], strength: f64, rng: &mut R) -> Vec<u32> {
        if tokens.is_empty() {
            return Vec::new();
        }
        let instrs = self.split_instructions(tokens);
        let mut out = Vec::with_capacity(tokens.len());
        let has_prefix = !tokens.is_empty() && !self.is_mnemonic(tokens[0]);
        let mut block: Vec<&[u32]> = Vec::new();
        for (k, ins) in instrs.iter().enumerate() {
            if k == 0 && has_prefix {
                out.extend_from_slice(ins);
                continue;
            }
            block.push(ins);
            if self.is_terminator(ins[0]) {
                self.flush_block(&mut block, &mut out, strength, rng);
            }
        }
        self.flush_block(&mut block, &mut out, strength, rng);
        out
    }

    fn flush_block<R: Rng + ?Sized>(&self, block: &mut Vec<&[u32]>, out: &mut Vec<u32>, strength: f64, rng: &mut R) {
        if block.is_empty() {
            return;
        }
        let ends_with_terminator = self.is_terminator(block[block.len() - 1][0]);
        let movable = if ends_with_terminator { block.len() - 1 } else { block.len() };
        if movable >= 2 && rng.random_bool(strength) {
            block[..movable].shuffle(rng);
        }
        for ins in block.drain(..) {
            out.extend_from_slice(ins);
        }
    }

    fn insert_nops<R: Rng + ?Sized>(&self, tokens: &[u32], strength: f64, rng: &mut R) -> Vec<u32> {
        let Some(nop) = self.nop else {
            return tokens.to_vec();
        };
        let cap = (strength * tokens.len() as f64).floor() as usize;
        let drawn = (0..tokens.len()).filter(|_| rng.random_bool(strength)).count();
        let count = drawn.min(cap);
        if count == 0 {
            return tokens.to_vec();
        }
        let mut boundaries = self.instruction_starts(tokens);
        boundaries.push(tokens.len());
        let mut inserts = vec![0usize; boundaries.len()];
        for _ in 0..count {
            inserts[rng.random_range(0..boundaries.len())] += 1;
        }
        let mut out = Vec::with_capacity(tokens.len() + count);
        let mut prev = 0;
        for (b, &pos) in boundaries.iter().enumerate() {
            out.extend_from_slice(&tokens[prev..pos]);
            out.extend(std::iter::repeat_n(nop, inserts[b]));
            prev = pos;
        }
        out
    }

    fn substitute_synonyms<R: Rng + ?Sized>(&self, tokens: &mut [u32], strength: f64, rng: &mut R) {
        for t in tokens.iter_mut() {
            let Some(set) = self.synonyms.get(*t as usize).copied().flatten() else {
                continue;
            };
            if !rng.random_bool(strength) {
                continue;
            }
            let others: Vec<u32> = self.synonym_sets[set].iter().copied().filter(|x| x != t).collect();
            *t = others[rng.random_range(0..others.len())];
        }
    }

    fn split_blocks<R: Rng + ?Sized>(&self, tokens: &[u32], strength: f64, rng: &mut R) -> Vec<u32> {
        let Some(jmp) = self.jmp else {
            return tokens.to_vec();
        };
        let starts = self.instruction_starts(tokens);
        let mut out = Vec::with_capacity(tokens.len());
        let mut prev = 0;
        for &s in starts.iter().skip(1) {
            out.extend_from_slice(&tokens[prev..s]);
            if rng.random_bool(strength * 0.25) {
                out.push(jmp);
                out.extend(self.addr);
            }
            prev = s;
        }
        out.extend_from_slice(&tokens[prev..]);
        out
    }

    /// Applies `spec` in order and returns a fresh synthetic variant of the
    /// same group.
    pub fn augment<R: Rng + ?Sized>(
        &self,
        instance: &FunctionInstance,
        spec: &TransformSpec,
        rng: &mut R,
    ) -> FunctionInstance {
        let mut tokens = instance.tokens.clone();
        for step in &spec.steps {
            let s = step.strength;
            match step.kind {
                TransformKind::RegisterRename => self.rename_registers(&mut tokens, s, rng),
                TransformKind::InstructionReorderWithinBlock => tokens = self.reorder(&tokens, s, rng),
                TransformKind::NopInsertion => tokens = self.insert_nops(&tokens, s, rng),
                TransformKind::OperandSynonymSubstitution => self.substitute_synonyms(&mut tokens, s, rng),
                TransformKind::BlockSplit => tokens = self.split_blocks(&tokens, s, rng),
            }
        }
        tokens.truncate(self.max_input_length.max(1));
        FunctionInstance {
            instance_id: format!("{}~{:016x}", instance.instance_id, rng.random::<u64>()),
            group_id: instance.group_id.clone(),
            arch: Arch::Synthetic,
            opt: OptLevel::Synthetic,
            obf: Obfuscation::Synthetic,
            tokens,
        }
    }
}

/// Convenience wrapper over [`Augmenter::augment`].
pub fn synth_augment<R: Rng + ?Sized>(
    augmenter: &Augmenter,
    instance: &FunctionInstance,
    spec: &TransformSpec,
    rng: &mut R,
) -> FunctionInstance {
    augmenter.augment(instance, spec, rng)
}
