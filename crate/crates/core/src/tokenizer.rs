//! Byte-pair-encoding subword vocabulary over whitespace-split, lowercased
//! text. Word starts carry the `▁` marker, so `"deep learning"` may encode
//! as `["▁deep", "▁learn", "ing"]`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

use crate::container::{read_file, write_file};
use crate::{Error, Result};

pub const WORD_BOUNDARY: char = '\u{2581}';
pub const VOCAB_FILE_VERSION: u32 = 1;

/// NFC, lowercase, whitespace runs collapsed to one space, trimmed.
pub fn normalize(text: &str) -> String {
    let lowered: String = text.nfc().collect::<String>().to_lowercase();
    let lowered: String = lowered.nfc().collect();
    lowered.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordVocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl SubwordVocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::data("empty token in vocabulary"));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::data(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Merge rules in acquisition order; rank = position.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MergeTable {
    rules: Vec<(String, String)>,
}

impl MergeTable {
    pub fn rules(&self) -> &[(String, String)] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    vocab_size: usize,
    tokens: Vec<String>,
    merges: Vec<(String, String)>,
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: SubwordVocab,
    merges: MergeTable,
    // (left, right) -> (rank, merged id)
    lookup: HashMap<(u32, u32), (usize, u32)>,
}

impl PartialEq for Tokenizer {
    fn eq(&self, other: &Self) -> bool {
        self.vocab == other.vocab && self.merges == other.merges
    }
}

impl Tokenizer {
    /// Builds a tokenizer from explicit parts; every merge operand and
    /// result must already be a vocabulary entry.
    pub fn from_parts(tokens: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        let vocab = SubwordVocab::from_tokens(tokens)?;
        let mut lookup = HashMap::with_capacity(merges.len());
        for (rank, (l, r)) in merges.iter().enumerate() {
            let get = |s: &str| {
                vocab
                    .id(s)
                    .ok_or_else(|| Error::data(format!("merge {rank} references unknown token {s:?}")))
            };
            let (li, ri, mi) = (get(l)?, get(r)?, get(&format!("{l}{r}"))?);
            lookup.entry((li, ri)).or_insert((rank, mi));
        }
        Ok(Self {
            vocab,
            merges: MergeTable { rules: merges },
            lookup,
        })
    }

    pub fn vocab(&self) -> &SubwordVocab {
        &self.vocab
    }

    pub fn merges(&self) -> &MergeTable {
        &self.merges
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn word_symbols(&self, word: &str) -> Vec<u32> {
        let mut out = Vec::with_capacity(word.chars().count());
        for c in word.chars() {
            let key = if out.is_empty() {
                format!("{WORD_BOUNDARY}{c}")
            } else {
                c.to_string()
            };
            match self.vocab.id(&key) {
                Some(id) => out.push(id),
                None => log::warn!("dropping character {c:?} outside the vocabulary"),
            }
        }
        out
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        let mut syms = self.word_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.lookup.get(&(w[0], w[1])).map(|&(rank, _)| rank))
                .min();
            let Some(best) = best else { break };
            let mut merged = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() {
                    if let Some(&(rank, id)) = self.lookup.get(&(syms[i], syms[i + 1])) {
                        if rank == best {
                            merged.push(id);
                            i += 2;
                            continue;
                        }
                    }
                }
                merged.push(syms[i]);
                i += 1;
            }
            syms = merged;
        }
        out.extend(syms);
    }

    /// Normalizes then encodes. Characters never seen in training are
    /// dropped with a warning.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let norm = normalize(text);
        let mut out = Vec::new();
        for word in norm.split(' ').filter(|w| !w.is_empty()) {
            self.encode_word(word, &mut out);
        }
        out
    }

    pub fn encode_to_tokens(&self, text: &str) -> Vec<&str> {
        self.encode(text)
            .into_iter()
            .map(|id| self.vocab.token(id).expect("encoded id in range"))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut s = String::new();
        for &id in ids {
            let t = self.vocab.token(id).ok_or_else(|| {
                Error::invalid(format!(
                    "token id {id} out of range for vocabulary of {}",
                    self.vocab.len()
                ))
            })?;
            s.push_str(t);
        }
        let s = s.replace(WORD_BOUNDARY, " ");
        Ok(s.strip_prefix(' ').unwrap_or(&s).to_string())
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let f = VocabFile {
            version: VOCAB_FILE_VERSION,
            vocab_size: self.vocab.len(),
            tokens: self.vocab.tokens.clone(),
            merges: self.merges.rules.clone(),
        };
        let mut bytes = serde_json::to_vec_pretty(&f)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let f: VocabFile = serde_json::from_slice(bytes)?;
        if f.version != VOCAB_FILE_VERSION {
            return Err(Error::data(format!("unsupported vocabulary version {}", f.version)));
        }
        if f.vocab_size != f.tokens.len() {
            return Err(Error::data(format!(
                "vocab_size {} disagrees with {} tokens",
                f.vocab_size,
                f.tokens.len()
            )));
        }
        Self::from_parts(f.tokens, f.merges)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_file(path)?)
    }

    /// SHA-256 of the canonical vocabulary file, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = self.to_json().expect("vocabulary serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Learns a BPE vocabulary of exactly `vocab_size` entries when the corpus
/// offers enough merges. Seeds are every character seen, in both its
/// word-initial (`▁c`) and word-internal (`c`) form. Ties between equally
/// frequent pairs go to the lexicographically smallest merged string.
///
/// A corpus that runs out of pairs before the budget is reached yields a
/// smaller vocabulary and a warning.
pub fn train_bpe<'a>(corpus: impl IntoIterator<Item = &'a str>, vocab_size: usize) -> Result<Tokenizer> {
    let mut word_counts: BTreeMap<String, usize> = BTreeMap::new();
    for line in corpus {
        for w in normalize(line).split(' ').filter(|w| !w.is_empty()) {
            *word_counts.entry(w.to_string()).or_default() += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(Error::invalid("cannot train a vocabulary on an empty corpus"));
    }

    let mut seeds = BTreeSet::new();
    for w in word_counts.keys() {
        for c in w.chars() {
            seeds.insert(c.to_string());
            seeds.insert(format!("{WORD_BOUNDARY}{c}"));
        }
    }
    if vocab_size < seeds.len() {
        return Err(Error::invalid(format!(
            "vocab_size {vocab_size} is below the {} character seeds the corpus requires",
            seeds.len()
        )));
    }

    let mut tokens: Vec<String> = seeds.into_iter().collect();
    let mut index: HashMap<String, u32> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();

    let mut words: Vec<(Vec<u32>, usize)> = word_counts
        .iter()
        .map(|(w, &n)| {
            let syms = w
                .chars()
                .enumerate()
                .map(|(i, c)| {
                    let key = if i == 0 {
                        format!("{WORD_BOUNDARY}{c}")
                    } else {
                        c.to_string()
                    };
                    index[&key]
                })
                .collect();
            (syms, n)
        })
        .collect();

    let mut merges = Vec::new();
    while tokens.len() < vocab_size {
        let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
        for (syms, n) in &words {
            for w in syms.windows(2) {
                *counts.entry((w[0], w[1])).or_default() += n;
            }
        }
        let best = counts
            .into_iter()
            .map(|((l, r), n)| {
                let (ls, rs) = (&tokens[l as usize], &tokens[r as usize]);
                (n, format!("{ls}{rs}"), ls.clone(), (l, r))
            })
            .min_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)).then_with(|| a.2.cmp(&b.2)));
        let Some((_, merged, _, (l, r))) = best else {
            log::warn!(
                "corpus exhausted after {} merges; vocabulary has {} of {vocab_size} requested entries",
                merges.len(),
                tokens.len()
            );
            break;
        };
        let mid = match index.get(&merged) {
            Some(&id) => id,
            None => {
                tokens.push(merged.clone());
                index.insert(merged, (tokens.len() - 1) as u32);
                (tokens.len() - 1) as u32
            }
        };
        merges.push((tokens[l as usize].clone(), tokens[r as usize].clone()));
        for (syms, _) in &mut words {
            if syms.len() < 2 {
                continue;
            }
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == l && syms[i + 1] == r {
                    out.push(mid);
                    i += 2;
                } else {
                    out.push(syms[i]);
                    i += 1;
                }
            }
            *syms = out;
        }
    }
    Tokenizer::from_parts(tokens, merges)
}
