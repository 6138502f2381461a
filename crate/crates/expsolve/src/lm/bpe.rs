//! Byte-pair encoding over whitespace-pre-split words.
//!
//! Words are segmented into single characters plus a terminal end-of-word
//! marker; the highest-frequency adjacent symbol pair is merged until the
//! vocabulary (merged symbols plus the base alphabet, pad, and
//! out-of-vocabulary ids) reaches the requested size. Ties break toward the
//! lexicographically smallest pair, so training is deterministic. Merges
//! never cross word boundaries.

use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_SYMBOL: &str = "<pad>";
pub const OOV_SYMBOL: &str = "<oov>";
pub const END_OF_WORD: &str = "</w>";

/// Learned merge rules plus the symbol table.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerModel {
    /// Merge rules in the order they were learned.
    merges: Vec<(String, String)>,
    /// id → symbol. Ids 0 and 1 are reserved for pad and oov; base alphabet
    /// symbols follow in sorted order, then one symbol per merge.
    vocab: Vec<String>,
    ids: HashMap<String, u32>,
    merge_ranks: HashMap<(String, String), usize>,
}

impl TokenizerModel {
    pub fn pad_id(&self) -> u32 {
        0
    }

    pub fn oov_id(&self) -> u32 {
        1
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, symbol: &str) -> Option<u32> {
        self.ids.get(symbol).copied()
    }

    /// Encodes one whitespace-free word. Characters outside the training
    /// alphabet come back as the out-of-vocabulary id.
    pub fn encode_word(&self, word: &str) -> Vec<u32> {
        if word.is_empty() {
            return Vec::new();
        }
        let mut merged: Vec<String> = word.chars().map(|c| c.to_string()).collect();
        merged.push(END_OF_WORD.to_string());

        // repeatedly apply the earliest-learned applicable merge
        let rank: &HashMap<(String, String), usize> = &self.merge_ranks;
        loop {
            let mut best: Option<(usize, usize)> = None; // (rank, position)
            for i in 0..merged.len().saturating_sub(1) {
                if let Some(&r) = rank.get(&(merged[i].clone(), merged[i + 1].clone())) {
                    if best.map_or(true, |(br, _)| r < br) {
                        best = Some((r, i));
                    }
                }
            }
            let Some((r, _)) = best else { break };
            let (left, right) = &self.merges[r];
            let mut out: Vec<String> = Vec::with_capacity(merged.len());
            let mut i = 0;
            while i < merged.len() {
                if i + 1 < merged.len() && merged[i] == *left && merged[i + 1] == *right {
                    out.push(format!("{left}{right}"));
                    i += 2;
                } else {
                    out.push(merged[i].clone());
                    i += 1;
                }
            }
            merged = out;
        }
        merged
            .iter()
            .map(|s| self.ids.get(s).copied().unwrap_or(1))
            .collect()
    }

    /// Text serialization: a `vocab` header with the reached size, the base
    /// alphabet, then one merge per line as `left right`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        writeln!(out, "vocab {}", self.vocab.len()).expect("string write");
        let base: Vec<&str> = self
            .vocab
            .iter()
            .skip(2)
            .take(self.vocab.len() - 2 - self.merges.len())
            .map(String::as_str)
            .collect();
        writeln!(out, "alphabet {}", base.join(" ")).expect("string write");
        for (l, r) in &self.merges {
            writeln!(out, "{l} {r}").expect("string write");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let display = path.display().to_string();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(&display, e))?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::format(&display, "empty tokenizer file"))?;
        let declared: usize = header
            .strip_prefix("vocab ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format(&display, "bad vocab header"))?;
        let alphabet_line = lines
            .next()
            .ok_or_else(|| Error::format(&display, "missing alphabet line"))?;
        let alphabet: Vec<String> = alphabet_line
            .strip_prefix("alphabet ")
            .ok_or_else(|| Error::format(&display, "bad alphabet line"))?
            .split(' ')
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect();
        let mut merges = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let (l, r) = line
                .split_once(' ')
                .ok_or_else(|| Error::format(&display, format!("bad merge line {line:?}")))?;
            merges.push((l.to_string(), r.to_string()));
        }
        let model = Self::assemble(alphabet, merges);
        if model.vocab_size() != declared {
            return Err(Error::format(
                &display,
                format!(
                    "vocab header says {declared} but file reconstructs {}",
                    model.vocab_size()
                ),
            ));
        }
        Ok(model)
    }

    fn assemble(alphabet: Vec<String>, merges: Vec<(String, String)>) -> Self {
        let mut vocab = vec![PAD_SYMBOL.to_string(), OOV_SYMBOL.to_string()];
        vocab.extend(alphabet);
        for (l, r) in &merges {
            vocab.push(format!("{l}{r}"));
        }
        let ids = vocab
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        let merge_ranks = merges
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, pair)| (pair, i))
            .collect();
        TokenizerModel {
            merges,
            vocab,
            ids,
            merge_ranks,
        }
    }
}

/// Greedy BPE training. `target_vocab` counts the pad and oov reservations.
///
/// Stops early (recording the smaller reached size) when the corpus runs out
/// of mergeable pairs before the budget is spent.
pub fn bpe_train<'a, I>(words: I, target_vocab: usize) -> Result<TokenizerModel>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut word_freq: HashMap<&str, u64> = HashMap::new();
    for w in words {
        if !w.is_empty() {
            *word_freq.entry(w).or_insert(0) += 1;
        }
    }
    if word_freq.is_empty() {
        return Err(Error::EmptyStream);
    }

    // intern symbols; ids here are training-local
    let mut interner = Interner::default();

    // deterministic word order
    let mut word_list: Vec<(&str, u64)> = word_freq.into_iter().collect();
    word_list.sort_unstable();
    let freqs: Vec<u64> = word_list.iter().map(|&(_, f)| f).collect();
    let mut words_syms: Vec<Vec<u32>> = word_list
        .iter()
        .map(|&(w, _)| {
            let mut syms: Vec<u32> = w
                .chars()
                .map(|c| interner.intern(&c.to_string()))
                .collect();
            syms.push(interner.intern(END_OF_WORD));
            syms
        })
        .collect();
    let mut sym_names = interner.names;

    let mut alphabet: Vec<String> = sym_names.clone();
    alphabet.sort_unstable();

    let base_size = 2 + alphabet.len(); // pad + oov + alphabet
    let budget = target_vocab.saturating_sub(base_size);

    // pair statistics with an occurrence index
    let mut pair_counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut pair_words: HashMap<(u32, u32), HashSet<u32>> = HashMap::new();
    for (wi, syms) in words_syms.iter().enumerate() {
        let f = freqs[wi] as i64;
        for pair in syms.windows(2) {
            let key = (pair[0], pair[1]);
            *pair_counts.entry(key).or_insert(0) += f;
            pair_words.entry(key).or_default().insert(wi as u32);
        }
    }

    // max-heap keyed by (count, lexicographically smallest pair); entries are
    // revalidated against the live count map when popped
    type HeapEntry = (i64, std::cmp::Reverse<(String, String)>, (u32, u32));
    fn heap_entry(names: &[String], key: (u32, u32), count: i64) -> HeapEntry {
        (
            count,
            std::cmp::Reverse((
                names[key.0 as usize].clone(),
                names[key.1 as usize].clone(),
            )),
            key,
        )
    }
    let mut heap: BinaryHeap<HeapEntry> = BinaryHeap::new();
    for (&key, &count) in &pair_counts {
        if count > 0 {
            heap.push(heap_entry(&sym_names, key, count));
        }
    }

    let mut merges: Vec<(String, String)> = Vec::with_capacity(budget);
    while merges.len() < budget {
        // pop until a live entry surfaces
        let Some((count, _, key)) = heap.pop() else {
            break; // corpus exhausted before the budget: stop early
        };
        if pair_counts.get(&key).copied().unwrap_or(0) != count {
            continue;
        }
        let (a, b) = key;
        let new_name = format!("{}{}", sym_names[a as usize], sym_names[b as usize]);
        let new_id = sym_names.len() as u32;
        sym_names.push(new_name);
        merges.push((
            sym_names[a as usize].clone(),
            sym_names[b as usize].clone(),
        ));

        let affected: Vec<u32> = pair_words
            .remove(&key)
            .map(|s| {
                let mut v: Vec<u32> = s.into_iter().collect();
                v.sort_unstable();
                v
            })
            .unwrap_or_default();
        pair_counts.remove(&key);

        let mut touched: HashSet<(u32, u32)> = HashSet::new();
        for wi in affected {
            let f = freqs[wi as usize] as i64;
            let syms = &mut words_syms[wi as usize];
            // remove old pair contributions for this word
            for pair in syms.windows(2) {
                let k = (pair[0], pair[1]);
                if let Some(c) = pair_counts.get_mut(&k) {
                    *c -= f;
                    touched.insert(k);
                }
            }
            // left-to-right merge within the word
            let mut out: Vec<u32> = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
                    out.push(new_id);
                    i += 2;
                } else {
                    out.push(syms[i]);
                    i += 1;
                }
            }
            *syms = out;
            // add new contributions back
            for pair in syms.windows(2) {
                let k = (pair[0], pair[1]);
                *pair_counts.entry(k).or_insert(0) += f;
                touched.insert(k);
                pair_words.entry(k).or_default().insert(wi);
            }
        }
        let mut refreshed: Vec<(u32, u32)> = touched.into_iter().collect();
        refreshed.sort_unstable();
        for k in refreshed {
            let c = pair_counts.get(&k).copied().unwrap_or(0);
            if c <= 0 {
                pair_counts.remove(&k);
            } else {
                heap.push(heap_entry(&sym_names, k, c));
            }
        }
    }

    Ok(TokenizerModel::assemble(alphabet, merges))
}

#[derive(Default)]
struct Interner {
    names: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Interner {
    fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_string());
        self.ids.insert(name.to_string(), id);
        id
    }
}

/// Encoder with a per-instance word cache; words repeat heavily in natural
/// text, so cached segmentation dominates encoding cost.
pub struct BpeEncoder<'a> {
    model: &'a TokenizerModel,
    cache: HashMap<String, Vec<u32>>,
}

impl<'a> BpeEncoder<'a> {
    pub fn new(model: &'a TokenizerModel) -> Self {
        BpeEncoder {
            model,
            cache: HashMap::new(),
        }
    }

    pub fn encode_text(&mut self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            if let Some(ids) = self.cache.get(word) {
                out.extend_from_slice(ids);
            } else {
                let ids = self.model.encode_word(word);
                out.extend_from_slice(&ids);
                self.cache.insert(word.to_string(), ids);
            }
        }
        out
    }
}

/// One-shot encoding without an external cache.
pub fn bpe_encode(text: &str, model: &TokenizerModel) -> Vec<u32> {
    BpeEncoder::new(model).encode_text(text)
}
