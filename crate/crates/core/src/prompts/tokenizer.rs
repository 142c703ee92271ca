// SPDX-License-Identifier: MIT OR Apache-2.0

//! Byte-level BPE tokenizer loaded from the portable `fixlab-tokenizer-v1`
//! JSON document (optionally gzipped).

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use fancy_regex::Regex;
use serde::Deserialize;
use unicode_normalization::UnicodeNormalization;

use crate::error::{FixlabError, Result};
use crate::model::BosPolicy;

const GPT2_PATTERN: &str = r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";
const LLAMA3_PATTERN: &str = r"(?i:'s|'t|'re|'ve|'m|'ll|'d)|[^\r\n\p{L}\p{N}]?\p{L}+|\p{N}{1,3}| ?[^\s\p{L}\p{N}]+[\r\n]*|\s*[\r\n]+|\s+(?!\S)|\s+";

/// Bundled GPT-NeoX vocabulary (Pythia).
pub const NEOX_TOKENIZER: &[u8] = include_bytes!("../../data/tokenizers/gpt-neox.json.gz");
/// Bundled Llama-3 vocabulary.
pub const LLAMA3_TOKENIZER: &[u8] = include_bytes!("../../data/tokenizers/llama3.json.gz");

#[derive(Debug, Deserialize)]
struct AddedToken {
    id: u32,
    content: String,
    #[allow(dead_code)]
    special: bool,
}

#[derive(Debug, Deserialize)]
struct Document {
    format: String,
    family: String,
    pretokenizer: String,
    normalizer: Option<String>,
    tokens: Vec<String>,
    added_tokens: Vec<AddedToken>,
    bos_token_id: Option<u32>,
    bos_policy: BosPolicy,
    merges: Option<Vec<String>>,
}

/// A loaded tokenizer.
pub struct Tokenizer {
    family: String,
    pattern: Regex,
    nfc: bool,
    vocab: HashMap<String, u32>,
    tokens: Vec<String>,
    /// Added tokens sorted longest-first for literal matching.
    added: Vec<(String, u32)>,
    added_ids: HashMap<u32, String>,
    merges: Option<HashMap<(String, String), usize>>,
    bos: Option<u32>,
    bos_policy: BosPolicy,
    byte_to_char: [char; 256],
    char_to_byte: HashMap<char, u8>,
}

impl std::fmt::Debug for Tokenizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tokenizer")
            .field("family", &self.family)
            .field("vocab", &self.tokens.len())
            .finish()
    }
}

/// GPT-2 reversible byte-to-unicode table.
fn byte_table() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut extra = 0u32;
    for b in 0..=255u8 {
        let printable = (b'!'..=b'~').contains(&b) || (0xA1..=0xAC).contains(&b) || b >= 0xAE;
        table[b as usize] = if printable {
            b as char
        } else {
            extra += 1;
            char::from_u32(255 + extra).expect("valid code point")
        };
    }
    table
}

impl Tokenizer {
    /// Load from a file; `.gz` files are decompressed.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| FixlabError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Parse a (possibly gzipped) tokenizer document.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let text = if bytes.starts_with(&[0x1f, 0x8b]) {
            let mut out = String::new();
            flate2::read::GzDecoder::new(bytes)
                .read_to_string(&mut out)
                .map_err(|e| FixlabError::Tokenizer(format!("gzip: {e}")))?;
            out
        } else {
            String::from_utf8(bytes.to_vec()).map_err(|e| FixlabError::Tokenizer(format!("not UTF-8: {e}")))?
        };
        let doc: Document = serde_json::from_str(&text)?;
        Self::from_document(doc)
    }

    /// The bundled GPT-NeoX tokenizer.
    pub fn neox() -> Result<Self> {
        Self::from_bytes(NEOX_TOKENIZER)
    }

    /// The bundled Llama-3 tokenizer.
    pub fn llama3() -> Result<Self> {
        Self::from_bytes(LLAMA3_TOKENIZER)
    }

    fn from_document(doc: Document) -> Result<Self> {
        if doc.format != "fixlab-tokenizer-v1" {
            return Err(FixlabError::Tokenizer(format!("unknown format `{}`", doc.format)));
        }
        let pattern = match doc.pretokenizer.as_str() {
            "gpt2" => GPT2_PATTERN,
            "llama3" => LLAMA3_PATTERN,
            other => return Err(FixlabError::Tokenizer(format!("unknown pretokenizer `{other}`"))),
        };
        let nfc = match doc.normalizer.as_deref() {
            None => false,
            Some("nfc") => true,
            Some(other) => return Err(FixlabError::Tokenizer(format!("unknown normalizer `{other}`"))),
        };
        let vocab: HashMap<String, u32> = doc
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let merges = doc.merges.map(|list| {
            list.iter()
                .enumerate()
                .filter_map(|(rank, m)| {
                    let (a, b) = m.split_once(' ')?;
                    Some(((a.to_string(), b.to_string()), rank))
                })
                .collect()
        });
        let mut added: Vec<(String, u32)> = doc.added_tokens.iter().map(|a| (a.content.clone(), a.id)).collect();
        added.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.1.cmp(&b.1)));
        let added_ids = doc.added_tokens.into_iter().map(|a| (a.id, a.content)).collect();
        let byte_to_char = byte_table();
        let char_to_byte = byte_to_char.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        Ok(Self {
            family: doc.family,
            pattern: Regex::new(pattern).map_err(|e| FixlabError::Tokenizer(e.to_string()))?,
            nfc,
            vocab,
            tokens: doc.tokens,
            added,
            added_ids,
            merges,
            bos: doc.bos_token_id,
            bos_policy: doc.bos_policy,
            byte_to_char,
            char_to_byte,
        })
    }

    pub fn family(&self) -> &str {
        &self.family
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn bos_token_id(&self) -> Option<u32> {
        self.bos
    }

    pub fn bos_policy(&self) -> BosPolicy {
        self.bos_policy
    }

    /// Encode text without any BOS handling.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let text: String = if self.nfc {
            text.nfc().collect()
        } else {
            text.to_string()
        };
        let mut ids = Vec::new();
        let mut rest = text.as_str();
        while !rest.is_empty() {
            match self.next_added(rest) {
                Some((start, len, id)) => {
                    self.encode_plain(&rest[..start], &mut ids)?;
                    ids.push(id);
                    rest = &rest[start + len..];
                }
                None => {
                    self.encode_plain(rest, &mut ids)?;
                    break;
                }
            }
        }
        Ok(ids)
    }

    /// Encode and apply the BOS policy.
    pub fn encode_with_bos(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = self.encode(text)?;
        if self.bos_policy == BosPolicy::AutoPrepend {
            let bos = self
                .bos
                .ok_or_else(|| FixlabError::Tokenizer("auto_prepend without bos_token_id".into()))?;
            ids.insert(0, bos);
        }
        Ok(ids)
    }

    /// Leftmost, then longest, added-token occurrence.
    fn next_added(&self, text: &str) -> Option<(usize, usize, u32)> {
        let mut best: Option<(usize, usize, u32)> = None;
        for (content, id) in &self.added {
            if let Some(start) = text.find(content.as_str()) {
                let better = match best {
                    None => true,
                    Some((s, l, _)) => start < s || (start == s && content.len() > l),
                };
                if better {
                    best = Some((start, content.len(), *id));
                }
            }
        }
        best
    }

    fn encode_plain(&self, text: &str, ids: &mut Vec<u32>) -> Result<()> {
        for m in self.pattern.find_iter(text) {
            let piece = m.map_err(|e| FixlabError::Tokenizer(e.to_string()))?.as_str();
            let mapped: String = piece.bytes().map(|b| self.byte_to_char[b as usize]).collect();
            for sym in self.bpe(&mapped) {
                let id = self
                    .vocab
                    .get(&sym)
                    .ok_or_else(|| FixlabError::Tokenizer(format!("symbol `{sym}` missing from vocabulary")))?;
                ids.push(*id);
            }
        }
        Ok(())
    }

    fn pair_rank(&self, a: &str, b: &str) -> Option<usize> {
        match &self.merges {
            Some(m) => m.get(&(a.to_string(), b.to_string())).copied(),
            None => self.vocab.get(&format!("{a}{b}")).map(|&id| id as usize),
        }
    }

    fn bpe(&self, word: &str) -> Vec<String> {
        if self.merges.is_none() && self.vocab.contains_key(word) {
            return vec![word.to_string()];
        }
        let mut parts: Vec<String> = word.chars().map(String::from).collect();
        while parts.len() > 1 {
            let best = (0..parts.len() - 1)
                .filter_map(|i| self.pair_rank(&parts[i], &parts[i + 1]).map(|r| (r, i)))
                .min();
            let Some((_, i)) = best else { break };
            let (a, b) = (parts[i].clone(), parts[i + 1].clone());
            // merge every non-overlapping occurrence of the best pair
            let mut merged = Vec::with_capacity(parts.len());
            let mut j = 0;
            while j < parts.len() {
                if j + 1 < parts.len() && parts[j] == a && parts[j + 1] == b {
                    merged.push(format!("{a}{b}"));
                    j += 2;
                } else {
                    merged.push(std::mem::take(&mut parts[j]));
                    j += 1;
                }
            }
            parts = merged;
        }
        parts
    }

    /// Raw string form of one id (byte-level for ordinary tokens).
    pub fn token_str(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Decode ids back to text.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            if let Some(content) = self.added_ids.get(&id) {
                bytes.extend_from_slice(content.as_bytes());
                continue;
            }
            let tok = self.token_str(id).ok_or_else(|| {
                FixlabError::Tokenizer(format!("id {id} outside vocabulary of {}", self.tokens.len()))
            })?;
            for c in tok.chars() {
                let b = self
                    .char_to_byte
                    .get(&c)
                    .ok_or_else(|| FixlabError::Tokenizer(format!("token {id} has non byte-level char {c:?}")))?;
                bytes.push(*b);
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// The single id for `label` (encoded as it appears after a label
    /// prefix, i.e. with a leading space), or an error naming the pieces.
    pub fn single_token(&self, label: &str) -> Result<u32> {
        let text = format!(" {label}");
        let ids = self.encode(&text)?;
        match ids.as_slice() {
            [id] => Ok(*id),
            _ => Err(FixlabError::NotSingleToken {
                label: text,
                pieces: ids.iter().map(|&i| self.decode(&[i]).unwrap_or_default()).collect(),
            }),
        }
    }

    /// Ids for a multi-token continuation such as `" very positive"`.
    pub fn continuation(&self, text: &str) -> Result<Vec<u32>> {
        self.encode(text)
    }
}

/// Fail unless every label is a single token.
pub fn verify_single_token(tok: &Tokenizer, labels: &[&str]) -> Result<Vec<u32>> {
    labels.iter().map(|l| tok.single_token(l)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_table_is_bijective() {
        let t = byte_table();
        let set: std::collections::HashSet<char> = t.iter().copied().collect();
        assert_eq!(set.len(), 256);
        assert_eq!(t[b' ' as usize], 'Ġ');
        assert_eq!(t[b'\n' as usize], 'Ċ');
        assert_eq!(t[b'a' as usize], 'a');
    }

    #[test]
    fn neox_labels() {
        let t = Tokenizer::neox().unwrap();
        assert_eq!(t.single_token("dog").unwrap(), 4370);
        assert_eq!(t.single_token("cat").unwrap(), 5798);
        assert_eq!(t.encode(" very positive").unwrap(), vec![1077, 2762]);
        assert_eq!(t.bos_policy(), BosPolicy::None);
        assert_eq!(t.encode_with_bos("hi").unwrap(), t.encode("hi").unwrap());
    }

    #[test]
    fn llama_prepends_bos() {
        let t = Tokenizer::llama3().unwrap();
        let ids = t.encode_with_bos(" dog").unwrap();
        assert_eq!(ids, vec![128000, 5679]);
    }

    #[test]
    fn round_trip_decode() {
        let t = Tokenizer::neox().unwrap();
        let s = "fetches sticks: dog\n\nmeows   softly: cat";
        assert_eq!(t.decode(&t.encode(s).unwrap()).unwrap(), s);
    }

    #[test]
    fn multi_token_label_is_reported() {
        let t = Tokenizer::neox().unwrap();
        match t.single_token("platypusoid") {
            Err(FixlabError::NotSingleToken { pieces, .. }) => assert!(pieces.len() > 1),
            other => panic!("unexpected {other:?}"),
        }
    }
}
