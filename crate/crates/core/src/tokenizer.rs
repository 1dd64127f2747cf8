//! Word-bounded byte-pair-encoding tokenizer with reserved control-code tokens.
//!
//! Text is pre-split into pieces: a word is a maximal run of non-whitespace
//! characters, optionally carrying the single space that precedes it; every
//! other whitespace character is a piece of its own. Merges never cross piece
//! boundaries, so decoding is plain concatenation of token strings.
//!
//! Id layout: `0` is the unknown token, `1..=C` are the control codes in
//! registration order, then the base characters (sorted), then merge outputs in
//! rank order.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use thiserror::Error;

pub const UNKNOWN_TOKEN: &str = "<unk>";
pub const UNKNOWN_ID: u32 = 0;
const MERGES_HEADER: &str = "bpe-v1";
pub const MERGES_FILE: &str = "merges.txt";
pub const VOCAB_FILE: &str = "vocab.tsv";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot learn BPE from an empty corpus")]
    EmptyCorpus,
    #[error("token id {0} is not in the vocabulary")]
    UnknownId(u32),
    #[error("invalid reserved token {0:?}")]
    InvalidReserved(String),
    #[error("line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("inconsistent tokenizer files: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TokenizerError>;

/// Ordered merge rules; a rule's rank is its position.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MergeTable {
    pairs: Vec<(String, String)>,
}

impl MergeTable {
    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// `bpe-v1 <n>` header followed by one escaped `left right` pair per line.
    pub fn to_text(&self) -> String {
        let mut out = format!("{MERGES_HEADER} {}\n", self.pairs.len());
        for (l, r) in &self.pairs {
            out.push_str(&escape(l));
            out.push(' ');
            out.push_str(&escape(r));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(TokenizerError::Format {
            line: 1,
            reason: "missing header".into(),
        })?;
        let count: usize = header
            .strip_prefix(MERGES_HEADER)
            .and_then(|rest| rest.trim().parse().ok())
            .ok_or_else(|| TokenizerError::Format {
                line: 1,
                reason: format!("bad header {header:?}"),
            })?;
        let mut pairs = Vec::with_capacity(count);
        for (i, line) in lines.enumerate() {
            let fmt_err = |reason: &str| TokenizerError::Format {
                line: i + 2,
                reason: reason.to_string(),
            };
            let (l, r) = line.split_once(' ').ok_or_else(|| fmt_err("expected `left right`"))?;
            let l = unescape(l).ok_or_else(|| fmt_err("bad escape"))?;
            let r = unescape(r).ok_or_else(|| fmt_err("bad escape"))?;
            if l.is_empty() || r.is_empty() {
                return Err(fmt_err("empty symbol"));
            }
            pairs.push((l, r));
        }
        if pairs.len() != count {
            return Err(TokenizerError::Format {
                line: 1,
                reason: format!("header announces {count} merges, found {}", pairs.len()),
            });
        }
        Ok(MergeTable { pairs })
    }
}

/// Token string ↔ id bijection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(TokenizerError::Inconsistent(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One escaped `token<TAB>id` line per entry, in id order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(&escape(t));
            out.push('\t');
            out.push_str(&i.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let fmt_err = |reason: String| TokenizerError::Format { line: i + 1, reason };
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| fmt_err("expected `token<TAB>id`".into()))?;
            let id: usize = id.parse().map_err(|_| fmt_err(format!("bad id {id:?}")))?;
            if id != tokens.len() {
                return Err(fmt_err(format!("ids must be dense, expected {}", tokens.len())));
            }
            tokens.push(unescape(tok).ok_or_else(|| fmt_err("bad escape".into()))?);
        }
        Self::from_tokens(tokens)
    }
}

/// A trained tokenizer: merges, vocabulary and the reserved tokens.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: Vocabulary,
    merges: MergeTable,
    reserved: Vec<String>,
    char_ids: HashMap<char, u32>,
    merge_ranks: HashMap<(u32, u32), (usize, u32)>,
}

impl Tokenizer {
    /// Learn merges from `corpus` with greedy most-frequent-pair merging.
    ///
    /// `codes` are reserved before learning; they are never split, never
    /// produced by a merge, and occupy ids `1..=codes.len()`. Learning stops
    /// early when the best pair occurs fewer than `min_pair_count` times.
    /// Ties between equally frequent pairs go to the lexicographically
    /// smallest `(left, right)`.
    pub fn learn<'t, I>(corpus: I, codes: &[String], num_merges: usize, min_pair_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'t str>,
    {
        let reserved = reserved_list(codes)?;
        let reserved_set: HashSet<&str> = reserved.iter().map(String::as_str).collect();

        let mut word_counts: HashMap<&str, usize> = HashMap::new();
        let mut saw_text = false;
        for doc in corpus {
            for piece in pieces(doc) {
                saw_text = true;
                if !reserved_set.contains(piece_core(piece)) {
                    *word_counts.entry(piece).or_default() += 1;
                }
            }
        }
        if !saw_text {
            return Err(TokenizerError::EmptyCorpus);
        }

        let mut alphabet: Vec<char> = word_counts
            .keys()
            .flat_map(|w| w.chars())
            .filter(|c| !reserved_set.contains(c.to_string().as_str()))
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        alphabet.sort_unstable();

        let mut symbols: Vec<String> = alphabet.iter().map(|c| c.to_string()).collect();
        let mut symbol_ids: HashMap<String, u32> = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        const NO_SYMBOL: u32 = u32::MAX;

        let mut words: Vec<(&str, usize)> = word_counts.into_iter().collect();
        words.sort_unstable();
        let mut words: Vec<(Vec<u32>, usize)> = words
            .into_iter()
            .map(|(w, c)| {
                let syms = w
                    .chars()
                    .map(|ch| symbol_ids.get(ch.to_string().as_str()).copied().unwrap_or(NO_SYMBOL))
                    .collect();
                (syms, c)
            })
            .collect();

        let mut pairs = Vec::new();
        while pairs.len() < num_merges {
            let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
            for (syms, c) in &words {
                for w in syms.windows(2) {
                    if w[0] != NO_SYMBOL && w[1] != NO_SYMBOL {
                        *counts.entry((w[0], w[1])).or_default() += c;
                    }
                }
            }
            let best = counts
                .into_iter()
                .filter(|&((l, r), _)| {
                    let merged = format!("{}{}", symbols[l as usize], symbols[r as usize]);
                    !reserved_set.contains(merged.as_str())
                })
                .max_by(|&((la, ra), ca), &((lb, rb), cb)| {
                    ca.cmp(&cb).then_with(|| {
                        // Smaller pair wins ties, so compare reversed.
                        (&symbols[lb as usize], &symbols[rb as usize])
                            .cmp(&(&symbols[la as usize], &symbols[ra as usize]))
                    })
                });
            let Some(((l, r), count)) = best else { break };
            if count < min_pair_count.max(1) {
                break;
            }
            let merged = format!("{}{}", symbols[l as usize], symbols[r as usize]);
            let merged_id = *symbol_ids.entry(merged.clone()).or_insert_with(|| {
                symbols.push(merged);
                (symbols.len() - 1) as u32
            });
            for (syms, _) in &mut words {
                apply_merge(syms, l, r, merged_id);
            }
            pairs.push((symbols[l as usize].clone(), symbols[r as usize].clone()));
        }

        Self::from_parts(MergeTable { pairs }, &alphabet, reserved)
    }

    fn from_parts(merges: MergeTable, alphabet: &[char], reserved: Vec<String>) -> Result<Self> {
        let mut tokens = reserved.clone();
        tokens.extend(alphabet.iter().map(|c| c.to_string()));
        let mut seen: HashSet<String> = tokens.iter().cloned().collect();
        for (l, r) in merges.pairs() {
            let merged = format!("{l}{r}");
            if seen.insert(merged.clone()) {
                tokens.push(merged);
            }
        }
        let vocab = Vocabulary::from_tokens(tokens)?;
        Self::assemble(vocab, merges, reserved)
    }

    fn assemble(vocab: Vocabulary, merges: MergeTable, reserved: Vec<String>) -> Result<Self> {
        for (i, r) in reserved.iter().enumerate() {
            if vocab.token(i as u32) != Some(r.as_str()) {
                return Err(TokenizerError::Inconsistent(format!(
                    "reserved token {r:?} must have id {i}"
                )));
            }
        }
        let merge_outputs: HashSet<String> = merges.pairs().iter().map(|(l, r)| format!("{l}{r}")).collect();
        let mut char_ids = HashMap::new();
        for (id, tok) in vocab.tokens().iter().enumerate().skip(reserved.len()) {
            let mut chars = tok.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => {
                    char_ids.insert(c, id as u32);
                }
                _ if merge_outputs.contains(tok) => {}
                _ => {
                    return Err(TokenizerError::Inconsistent(format!(
                        "token {tok:?} (id {id}) is neither a character nor a merge output"
                    )))
                }
            }
        }
        let mut merge_ranks = HashMap::with_capacity(merges.len());
        for (rank, (l, r)) in merges.pairs().iter().enumerate() {
            let lookup = |s: &str| {
                vocab
                    .id(s)
                    .filter(|&id| id as usize >= reserved.len())
                    .ok_or_else(|| TokenizerError::Inconsistent(format!("merge {rank} uses unknown symbol {s:?}")))
            };
            let (li, ri) = (lookup(l)?, lookup(r)?);
            let out = lookup(&format!("{l}{r}"))?;
            merge_ranks.entry((li, ri)).or_insert((rank, out));
        }
        Ok(Tokenizer {
            vocab,
            merges,
            reserved,
            char_ids,
            merge_ranks,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn merges(&self) -> &MergeTable {
        &self.merges
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Unknown token followed by the control codes.
    pub fn reserved(&self) -> &[String] {
        &self.reserved
    }

    pub fn is_reserved(&self, id: u32) -> bool {
        (id as usize) < self.reserved.len()
    }

    /// Id of a registered control code.
    pub fn code_id(&self, code: &str) -> Option<u32> {
        self.reserved[1..]
            .iter()
            .position(|c| c == code)
            .map(|p| p as u32 + 1)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for piece in pieces(text) {
            self.encode_piece(piece, &mut out);
        }
        out
    }

    fn encode_piece(&self, piece: &str, out: &mut Vec<u32>) {
        let core = piece_core(piece);
        if let Some(pos) = self.reserved.iter().position(|r| r == core) {
            if core.len() != piece.len() {
                out.push(self.char_ids.get(&' ').copied().unwrap_or(UNKNOWN_ID));
            }
            out.push(pos as u32);
            return;
        }
        let mut syms: Vec<u32> = piece
            .chars()
            .map(|c| self.char_ids.get(&c).copied().unwrap_or(UNKNOWN_ID))
            .collect();
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.merge_ranks.get(&(w[0], w[1])).map(|&(rank, out)| (rank, w[0], w[1], out)))
                .min();
            let Some((_, l, r, merged)) = best else { break };
            apply_merge(&mut syms, l, r, merged);
        }
        out.extend(syms);
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            out.push_str(self.vocab.token(id).ok_or(TokenizerError::UnknownId(id))?);
        }
        Ok(out)
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(MERGES_FILE), self.merges.to_text())?;
        fs::write(dir.join(VOCAB_FILE), self.vocab.to_text())?;
        Ok(())
    }

    /// Load `merges.txt` and `vocab.tsv` from `dir`; `codes` must match the
    /// codes the tokenizer was learned with.
    pub fn load_dir(dir: &Path, codes: &[String]) -> Result<Self> {
        let merges = MergeTable::from_text(&fs::read_to_string(dir.join(MERGES_FILE))?)?;
        let vocab = Vocabulary::from_text(&fs::read_to_string(dir.join(VOCAB_FILE))?)?;
        Self::assemble(vocab, merges, reserved_list(codes)?)
    }
}

fn reserved_list(codes: &[String]) -> Result<Vec<String>> {
    let mut reserved = vec![UNKNOWN_TOKEN.to_string()];
    for c in codes {
        if c.is_empty() || c.chars().any(char::is_whitespace) || reserved.contains(c) {
            return Err(TokenizerError::InvalidReserved(c.clone()));
        }
        reserved.push(c.clone());
    }
    Ok(reserved)
}

/// Merge every non-overlapping occurrence of `(l, r)`, scanning left to right.
fn apply_merge(syms: &mut Vec<u32>, l: u32, r: u32, merged: u32) {
    let mut i = 0;
    let mut j = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == l && syms[i + 1] == r {
            syms[j] = merged;
            i += 2;
        } else {
            syms[j] = syms[i];
            i += 1;
        }
        j += 1;
    }
    syms.truncate(j);
}

/// Split text into pre-tokenization pieces (see module docs). The pieces
/// concatenate back to `text` exactly.
pub fn pieces(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some((start, c)) = chars.next() {
        let word_follows = matches!(chars.peek(), Some(&(_, n)) if !n.is_whitespace());
        if c.is_whitespace() && !(c == ' ' && word_follows) {
            out.push(&text[start..start + c.len_utf8()]);
            continue;
        }
        let mut end = start + c.len_utf8();
        while let Some(&(i, n)) = chars.peek() {
            if n.is_whitespace() {
                break;
            }
            end = i + n.len_utf8();
            chars.next();
        }
        out.push(&text[start..end]);
    }
    out
}

fn piece_core(piece: &str) -> &str {
    piece.strip_prefix(' ').unwrap_or(piece)
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            ' ' => out.push_str("\\s"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Option<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        out.push(match chars.next()? {
            '\\' => '\\',
            't' => '\t',
            'n' => '\n',
            'r' => '\r',
            's' => ' ',
            _ => return None,
        });
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn learn(text: &str, merges: usize) -> Tokenizer {
        Tokenizer::learn([text], &[], merges, 1).unwrap()
    }

    fn strs(tok: &Tokenizer, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| tok.vocab().token(i).unwrap().to_string()).collect()
    }

    #[test]
    fn single_merge_on_repeated_char() {
        let tok = learn("aaaa", 1);
        assert_eq!(tok.merges().pairs(), &[("a".to_string(), "a".to_string())]);
        assert!(tok.vocab().id("a").is_some() && tok.vocab().id("aa").is_some());
        assert_eq!(strs(&tok, &tok.encode("aaaa")), ["aa", "aa"]);
    }

    #[test]
    fn zero_merges_is_character_level() {
        let tok = learn("the cat", 0);
        assert!(tok.merges().is_empty());
        assert!(tok.vocab().tokens()[1..].iter().all(|t| t.chars().count() == 1));
        assert_eq!(tok.encode("tac").len(), 3);
    }

    #[test]
    fn pair_counting_order() {
        let tok = learn("abab abab", 2);
        let p = tok.merges().pairs();
        assert_eq!(p[0], ("a".to_string(), "b".to_string()));
        assert_eq!(p[1], ("ab".to_string(), "ab".to_string()));
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(
            Tokenizer::learn([""], &[], 5, 1),
            Err(TokenizerError::EmptyCorpus)
        ));
    }

    #[test]
    fn encode_decode_edges() {
        let tok = learn("the cat sat on the mat", 10);
        assert!(tok.encode("").is_empty());
        assert_eq!(tok.decode(&[]).unwrap(), "");
        assert_eq!(tok.decode(&tok.encode("the cat")).unwrap(), "the cat");
        assert!(tok.encode("the dog").contains(&UNKNOWN_ID));
        let bad = tok.vocab_size() as u32;
        assert!(matches!(tok.decode(&[bad]), Err(TokenizerError::UnknownId(id)) if id == bad));
    }

    #[test]
    fn control_codes_are_atomic() {
        let codes = vec!["Horror".to_string(), "Title:".to_string()];
        let corpus = "Horror Horror Horror Title: a knife Horror Hor ror";
        let tok = Tokenizer::learn([corpus], &codes, 50, 1).unwrap();
        assert_eq!(tok.code_id("Horror"), Some(1));
        assert_eq!(tok.code_id("Title:"), Some(2));
        assert_eq!(tok.encode("Horror"), vec![1]);
        assert_eq!(tok.encode("Title:"), vec![2]);
        assert_eq!(tok.encode(" Horror")[1], 1);
        for (l, r) in tok.merges().pairs() {
            let m = format!("{l}{r}");
            assert!(m != "Horror" && m != "Title:");
        }
        let ids = tok.encode("Title: a knife");
        assert_eq!(ids[0], 2);
        assert_eq!(tok.decode(&ids).unwrap(), "Title: a knife");
    }

    #[test]
    fn pieces_partition_text() {
        let text = "  the\tcat\n\n sat  on";
        let p = pieces(text);
        assert_eq!(p.concat(), text);
        assert_eq!(p, [" ", " the", "\t", "cat", "\n", "\n", " sat", " ", " on"]);
    }

    #[test]
    fn files_round_trip() {
        let codes = vec!["Books".to_string()];
        let tok = Tokenizer::learn(["a tab\there and  spaces\\ Books"], &codes, 20, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        tok.save_dir(dir.path()).unwrap();
        let back = Tokenizer::load_dir(dir.path(), &codes).unwrap();
        assert_eq!(back.vocab(), tok.vocab());
        assert_eq!(back.merges(), tok.merges());
        let text = "spaces here\ta Books";
        assert_eq!(back.encode(text), tok.encode(text));
        assert!(fs::read_to_string(dir.path().join(MERGES_FILE))
            .unwrap()
            .starts_with("bpe-v1 "));
        assert!(Tokenizer::load_dir(dir.path(), &[]).is_err());
    }
}
