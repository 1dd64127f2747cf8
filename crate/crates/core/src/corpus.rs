//! Training-sequence construction: control-code injection, chunking into
//! fixed-length records, unknown filtering and the binary record format.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::tokenizer::{Tokenizer, TokenizerError, UNKNOWN_ID};

pub const RECORD_MAGIC: &[u8; 8] = b"CTRLREC1";
pub const CODES_FILE: &str = "codes.tsv";
/// Records with more unknown tokens than this are dropped.
pub const MAX_UNKNOWNS: usize = 2;
pub const VALIDATION_FRACTION: f64 = 0.05;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("control code {0:?} is not registered")]
    UnregisteredCode(String),
    #[error("control code {0:?} is not a domain code")]
    NotDomainCode(String),
    #[error("invalid control code name {0:?}")]
    InvalidCodeName(String),
    #[error("secondary code position {position} is past the end of a {len}-token document")]
    BadPosition { position: usize, len: usize },
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("record file: {0}")]
    Format(String),
    #[error("context length must be at least 2, got {0}")]
    ContextTooShort(usize),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeKind {
    /// Labels a whole, mutually exclusive training subset; prepended to every record.
    Domain,
    /// Injected inline (`Title:`, `Text:`, `Rating:`, rating values, ...).
    Secondary,
}

impl CodeKind {
    fn as_str(self) -> &'static str {
        match self {
            CodeKind::Domain => "domain",
            CodeKind::Secondary => "secondary",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ControlCode {
    pub name: String,
    pub kind: CodeKind,
}

/// Ordered set of control codes. A code's token id is its position plus one
/// (id 0 is the unknown token), matching [`Tokenizer`]'s reserved layout.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ControlCodeRegistry {
    codes: Vec<ControlCode>,
}

impl ControlCodeRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, kind: CodeKind) -> Result<u32> {
        let valid = !name.is_empty()
            && !name.chars().any(|c| c.is_whitespace() || c == ',' || c == '@')
            && name != crate::tokenizer::UNKNOWN_TOKEN;
        if !valid || self.get(name).is_some() {
            return Err(CorpusError::InvalidCodeName(name.to_string()));
        }
        self.codes.push(ControlCode {
            name: name.to_string(),
            kind,
        });
        Ok(self.codes.len() as u32)
    }

    pub fn add_domain(&mut self, name: &str) -> Result<u32> {
        self.add(name, CodeKind::Domain)
    }

    pub fn add_secondary(&mut self, name: &str) -> Result<u32> {
        self.add(name, CodeKind::Secondary)
    }

    pub fn codes(&self) -> &[ControlCode] {
        &self.codes
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.codes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&ControlCode> {
        self.codes.iter().find(|c| c.name == name)
    }

    pub fn id(&self, name: &str) -> Result<u32> {
        self.codes
            .iter()
            .position(|c| c.name == name)
            .map(|p| p as u32 + 1)
            .ok_or_else(|| CorpusError::UnregisteredCode(name.to_string()))
    }

    pub fn domain_id(&self, name: &str) -> Result<u32> {
        let id = self.id(name)?;
        match self.codes[id as usize - 1].kind {
            CodeKind::Domain => Ok(id),
            CodeKind::Secondary => Err(CorpusError::NotDomainCode(name.to_string())),
        }
    }

    pub fn name_of(&self, id: u32) -> Option<&str> {
        let idx = (id as usize).checked_sub(1)?;
        self.codes.get(idx).map(|c| c.name.as_str())
    }

    /// Domain codes with their token ids, in registry order.
    pub fn domains(&self) -> impl Iterator<Item = (u32, &ControlCode)> {
        self.codes
            .iter()
            .enumerate()
            .filter(|(_, c)| c.kind == CodeKind::Domain)
            .map(|(i, c)| (i as u32 + 1, c))
    }

    /// `kind<TAB>name` per line.
    pub fn to_text(&self) -> String {
        self.codes
            .iter()
            .map(|c| format!("{}\t{}\n", c.kind.as_str(), c.name))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut reg = Self::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: String| CorpusError::Manifest { line: i + 1, reason };
            let (kind, name) = line
                .split_once('\t')
                .ok_or_else(|| err("expected `kind<TAB>name`".into()))?;
            let kind = match kind {
                "domain" => CodeKind::Domain,
                "secondary" => CodeKind::Secondary,
                other => return Err(err(format!("unknown code kind {other:?}"))),
            };
            reg.add(name, kind)?;
        }
        Ok(reg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// Tokenizer plus the registry whose codes it reserves, stored together in
/// one directory (`codes.tsv`, `merges.txt`, `vocab.tsv`).
#[derive(Debug, Clone)]
pub struct TextAssets {
    pub tokenizer: Tokenizer,
    pub registry: ControlCodeRegistry,
}

impl TextAssets {
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        self.tokenizer.save_dir(dir)?;
        self.registry.save(&dir.join(CODES_FILE))
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let registry = ControlCodeRegistry::load(&dir.join(CODES_FILE))?;
        let tokenizer = Tokenizer::load_dir(dir, &registry.names())?;
        Ok(TextAssets { tokenizer, registry })
    }
}

/// A fixed-length training sequence: domain code id followed by `L - 1`
/// content tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceRecord {
    pub tokens: Vec<u32>,
    pub domain: String,
}

impl SequenceRecord {
    pub fn unknown_count(&self) -> usize {
        self.tokens.iter().filter(|&&t| t == UNKNOWN_ID).count()
    }

    pub fn content(&self) -> &[u32] {
        &self.tokens[1..]
    }
}

/// Insert secondary codes into a document's token stream. Each `(position,
/// code)` goes before the token originally at `position` (`position ==
/// len` appends); codes sharing a position keep their given order. The domain
/// code is only validated here, it is prepended per record by
/// [`chunk_stream`].
pub fn inject_codes(
    tokens: &[u32],
    registry: &ControlCodeRegistry,
    domain: &str,
    secondary: &[(usize, &str)],
) -> Result<Vec<u32>> {
    registry.domain_id(domain)?;
    let mut inserts = Vec::with_capacity(secondary.len());
    for &(position, code) in secondary {
        if position > tokens.len() {
            return Err(CorpusError::BadPosition {
                position,
                len: tokens.len(),
            });
        }
        inserts.push((position, registry.id(code)?));
    }
    inserts.sort_by_key(|&(p, _)| p);
    let mut out = Vec::with_capacity(tokens.len() + inserts.len());
    let mut pending = inserts.into_iter().peekable();
    for (i, &t) in tokens.iter().enumerate() {
        while let Some((_, id)) = pending.next_if(|&(p, _)| p == i) {
            out.push(id);
        }
        out.push(t);
    }
    out.extend(pending.map(|(_, id)| id));
    Ok(out)
}

/// Tokenize a document whose secondary codes are attached at byte offsets of
/// the raw text. Each code is placed at the boundary between the separately
/// tokenized text segments.
pub fn tokenize_document(
    assets: &TextAssets,
    domain: &str,
    text: &str,
    annotations: &[(usize, String)],
) -> Result<Vec<u32>> {
    let mut sorted: Vec<&(usize, String)> = annotations.iter().collect();
    sorted.sort_by_key(|(off, _)| *off);
    let mut tokens = Vec::new();
    let mut marks = Vec::with_capacity(sorted.len());
    let mut cursor = 0;
    for (offset, code) in sorted {
        if *offset > text.len() || !text.is_char_boundary(*offset) {
            return Err(CorpusError::BadPosition {
                position: *offset,
                len: text.len(),
            });
        }
        tokens.extend(assets.tokenizer.encode(&text[cursor..*offset]));
        cursor = *offset;
        marks.push((tokens.len(), code.as_str()));
    }
    tokens.extend(assets.tokenizer.encode(&text[cursor..]));
    inject_codes(&tokens, &assets.registry, domain, &marks)
}

/// Cut a stream into contiguous, non-overlapping windows of `context - 1`
/// tokens, each prefixed with the domain code. The short tail is dropped.
pub fn chunk_stream(stream: &[u32], context: usize, domain_id: u32, domain: &str) -> Result<Vec<SequenceRecord>> {
    if context < 2 {
        return Err(CorpusError::ContextTooShort(context));
    }
    Ok(stream
        .chunks_exact(context - 1)
        .map(|chunk| {
            let mut tokens = Vec::with_capacity(context);
            tokens.push(domain_id);
            tokens.extend_from_slice(chunk);
            SequenceRecord {
                tokens,
                domain: domain.to_string(),
            }
        })
        .collect())
}

/// Keep records with at most [`MAX_UNKNOWNS`] unknown tokens.
pub fn filter_unknowns(records: Vec<SequenceRecord>) -> Vec<SequenceRecord> {
    records
        .into_iter()
        .filter(|r| r.unknown_count() <= MAX_UNKNOWNS)
        .collect()
}

/// Hold out the last [`VALIDATION_FRACTION`] of a domain's records (at least
/// one record once the domain has two or more).
pub fn split_validation(mut records: Vec<SequenceRecord>) -> (Vec<SequenceRecord>, Vec<SequenceRecord>) {
    let n = records.len();
    let held = if n < 2 {
        0
    } else {
        ((n as f64 * VALIDATION_FRACTION).round() as usize).max(1)
    };
    let valid = records.split_off(n - held);
    (records, valid)
}

pub fn write_records<W: Write>(mut out: W, context: usize, records: &[SequenceRecord]) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + records.len() * (context * 4 + 16));
    buf.extend_from_slice(RECORD_MAGIC);
    buf.extend_from_slice(&(context as u32).to_le_bytes());
    buf.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for r in records {
        if r.tokens.len() != context {
            return Err(CorpusError::Format(format!(
                "record has {} tokens, file context is {context}",
                r.tokens.len()
            )));
        }
        let name = r.domain.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| CorpusError::Format("domain name too long".into()))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name);
        for &t in &r.tokens {
            buf.extend_from_slice(&t.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Parse a whole record file. Any truncation, trailing bytes or bad header is
/// a format error; no partial result is returned.
pub fn read_records<R: Read>(mut input: R) -> Result<(usize, Vec<SequenceRecord>)> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(8)? != RECORD_MAGIC {
        return Err(CorpusError::Format("bad magic".into()));
    }
    let context = cur.u32()? as usize;
    let count = cur.u64()?;
    let per_record_min = 2 + context as u64 * 4;
    if count.saturating_mul(per_record_min) > (bytes.len() - cur.pos) as u64 {
        return Err(CorpusError::Format(format!("truncated: {count} records announced")));
    }
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = cur.u16()? as usize;
        let domain = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| CorpusError::Format("domain name is not UTF-8".into()))?
            .to_string();
        let raw = cur.take(context * 4)?;
        let tokens = raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        records.push(SequenceRecord { tokens, domain });
    }
    if cur.pos != bytes.len() {
        return Err(CorpusError::Format("trailing bytes after last record".into()));
    }
    Ok((context, records))
}

pub fn write_records_file(path: &Path, context: usize, records: &[SequenceRecord]) -> Result<()> {
    write_records(io::BufWriter::new(fs::File::create(path)?), context, records)
}

pub fn read_records_file(path: &Path) -> Result<(usize, Vec<SequenceRecord>)> {
    read_records(fs::File::open(path)?)
}

struct Cursor<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Cursor<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CorpusError::Format(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// One manifest entry: a document of a domain, with optional secondary codes
/// at byte offsets of its text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub domain: String,
    pub path: PathBuf,
    pub annotations: Vec<(usize, String)>,
}

/// Parse `domain<TAB>path[<TAB>code@offset,code@offset...]` lines. `#` starts
/// a comment line. Relative paths resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path, registry: &ControlCodeRegistry) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: String| CorpusError::Manifest { line: i + 1, reason };
        let mut cols = line.split('\t');
        let domain = cols.next().unwrap_or_default();
        let path = cols.next().ok_or_else(|| err("expected `domain<TAB>path`".into()))?;
        registry.domain_id(domain).map_err(|e| err(e.to_string()))?;
        let path = base.join(path);
        if !path.is_file() {
            return Err(err(format!("document {} does not exist", path.display())));
        }
        let mut annotations = Vec::new();
        if let Some(spec) = cols.next().filter(|s| !s.is_empty()) {
            for item in spec.split(',') {
                let (code, offset) = item
                    .rsplit_once('@')
                    .ok_or_else(|| err(format!("annotation {item:?} is not `code@offset`")))?;
                registry.id(code).map_err(|e| err(e.to_string()))?;
                let offset = offset.parse().map_err(|_| err(format!("bad offset in {item:?}")))?;
                annotations.push((offset, code.to_string()));
            }
        }
        if cols.next().is_some() {
            return Err(err("too many columns".into()));
        }
        entries.push(ManifestEntry {
            domain: domain.to_string(),
            path,
            annotations,
        });
    }
    Ok(entries)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DomainStats {
    pub documents: usize,
    pub stream_tokens: usize,
    pub records: usize,
    pub filtered: usize,
    pub train: usize,
    pub valid: usize,
}

#[derive(Debug, Clone)]
pub struct CorpusBuild {
    pub context: usize,
    pub train: Vec<SequenceRecord>,
    pub valid: Vec<SequenceRecord>,
    pub stats: BTreeMap<String, DomainStats>,
}

/// Build train and validation records from documents grouped by domain.
/// Each domain's documents form one stream in the given order.
pub fn build_records<'d, I>(assets: &TextAssets, documents: I, context: usize) -> Result<CorpusBuild>
where
    I: IntoIterator<Item = (&'d str, String, Vec<(usize, String)>)>,
{
    let mut streams: Vec<(String, Vec<u32>, usize)> = Vec::new();
    for (domain, text, annotations) in documents {
        let tokens = tokenize_document(assets, domain, &text, &annotations)?;
        match streams.iter_mut().find(|(d, _, _)| d == domain) {
            Some((_, s, docs)) => {
                s.extend(tokens);
                *docs += 1;
            }
            None => streams.push((domain.to_string(), tokens, 1)),
        }
    }
    // Registry order keeps output independent of manifest interleaving.
    streams.sort_by_key(|(d, _, _)| assets.registry.id(d).unwrap_or(u32::MAX));

    let mut build = CorpusBuild {
        context,
        train: Vec::new(),
        valid: Vec::new(),
        stats: BTreeMap::new(),
    };
    for (domain, stream, documents) in streams {
        let id = assets.registry.domain_id(&domain)?;
        let chunks = chunk_stream(&stream, context, id, &domain)?;
        let total = chunks.len();
        let kept = filter_unknowns(chunks);
        let filtered = total - kept.len();
        let records = kept.len();
        let (train, valid) = split_validation(kept);
        build.stats.insert(
            domain,
            DomainStats {
                documents,
                stream_tokens: stream.len(),
                records,
                filtered,
                train: train.len(),
                valid: valid.len(),
            },
        );
        build.train.extend(train);
        build.valid.extend(valid);
    }
    Ok(build)
}

/// Read every manifest document and build records.
pub fn build_from_manifest(assets: &TextAssets, manifest: &[ManifestEntry], context: usize) -> Result<CorpusBuild> {
    let mut docs = Vec::with_capacity(manifest.len());
    for e in manifest {
        docs.push((e.domain.as_str(), fs::read_to_string(&e.path)?, e.annotations.clone()));
    }
    build_records(assets, docs, context)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn registry() -> ControlCodeRegistry {
        let mut r = ControlCodeRegistry::new();
        r.add_domain("Reddit").unwrap();
        r.add_domain("Reviews").unwrap();
        r.add_secondary("Title:").unwrap();
        r.add_secondary("Text:").unwrap();
        r.add_secondary("Rating:").unwrap();
        r.add_secondary("5.0").unwrap();
        r
    }

    #[test]
    fn inject_title_and_text() {
        let reg = registry();
        let (title, text) = (reg.id("Title:").unwrap(), reg.id("Text:").unwrap());
        let doc = [100, 101, 200, 201, 202];
        let out = inject_codes(&doc, &reg, "Reddit", &[(0, "Title:"), (2, "Text:")]).unwrap();
        assert_eq!(out, vec![title, 100, 101, text, 200, 201, 202]);
    }

    #[test]
    fn inject_rating_value_and_nothing() {
        let reg = registry();
        let doc = [300, 301];
        let out = inject_codes(&doc, &reg, "Reviews", &[(0, "Rating:"), (0, "5.0")]).unwrap();
        assert_eq!(out, vec![reg.id("Rating:").unwrap(), reg.id("5.0").unwrap(), 300, 301]);
        assert_eq!(inject_codes(&doc, &reg, "Reviews", &[]).unwrap(), doc);
    }

    #[test]
    fn inject_rejects_unregistered() {
        let reg = registry();
        assert!(matches!(
            inject_codes(&[1], &reg, "Reviews", &[(0, "Stars:")]),
            Err(CorpusError::UnregisteredCode(c)) if c == "Stars:"
        ));
        assert!(matches!(
            inject_codes(&[1], &reg, "Horror", &[]),
            Err(CorpusError::UnregisteredCode(_))
        ));
        assert!(matches!(
            inject_codes(&[1], &reg, "Title:", &[]),
            Err(CorpusError::NotDomainCode(_))
        ));
    }

    #[test]
    fn chunking_examples() {
        let stream: Vec<u32> = (10..24).collect();
        let recs = chunk_stream(&stream, 8, 1, "Reddit").unwrap();
        assert_eq!(recs.len(), 2);
        for r in &recs {
            assert_eq!(r.tokens.len(), 8);
            assert_eq!(r.tokens[0], 1);
        }
        assert_eq!(recs[1].content(), &stream[7..]);
        assert!(chunk_stream(&stream[..6], 8, 1, "Reddit").unwrap().is_empty());
        assert!(chunk_stream(&stream, 1, 1, "Reddit").is_err());
    }

    #[test]
    fn unknown_filter_boundary() {
        let rec = |unk: usize| SequenceRecord {
            tokens: std::iter::once(1)
                .chain(std::iter::repeat_n(UNKNOWN_ID, unk))
                .chain(std::iter::repeat_n(9, 5 - unk))
                .collect(),
            domain: "Reddit".into(),
        };
        let kept = filter_unknowns(vec![rec(3), rec(2), rec(0)]);
        assert_eq!(kept.iter().map(|r| r.unknown_count()).collect::<Vec<_>>(), [2, 0]);
    }

    fn sample_records(n: usize, context: usize) -> Vec<SequenceRecord> {
        (0..n)
            .map(|i| SequenceRecord {
                tokens: (0..context as u32).map(|j| (i as u32 * 31 + j * 7) % 1000).collect(),
                domain: if i % 2 == 0 { "Reddit".into() } else { "Reviews".into() },
            })
            .collect()
    }

    #[test]
    fn empty_record_file() {
        let mut buf = Vec::new();
        write_records(&mut buf, 8, &[]).unwrap();
        assert_eq!(buf.len(), 20);
        let (ctx, recs) = read_records(&buf[..]).unwrap();
        assert_eq!((ctx, recs.len()), (8, 0));
    }

    #[test]
    fn truncation_at_every_offset_is_an_error() {
        let recs = sample_records(3, 6);
        let mut buf = Vec::new();
        write_records(&mut buf, 6, &recs).unwrap();
        assert_eq!(read_records(&buf[..]).unwrap().1, recs);
        for cut in 0..buf.len() {
            assert!(
                matches!(read_records(&buf[..cut]), Err(CorpusError::Format(_))),
                "prefix of {cut} bytes parsed"
            );
        }
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_records(&extra[..]).is_err());
        let mut bad = buf;
        bad[0] = b'X';
        assert!(matches!(read_records(&bad[..]), Err(CorpusError::Format(m)) if m.contains("magic")));
    }

    #[test]
    fn registry_text_round_trip() {
        let reg = registry();
        assert_eq!(ControlCodeRegistry::from_text(&reg.to_text()).unwrap(), reg);
        let mut r = ControlCodeRegistry::new();
        assert!(r.add_domain("two words").is_err());
        r.add_domain("A").unwrap();
        assert!(r.add_domain("A").is_err());
    }

    #[test]
    fn validation_split_takes_tail() {
        let recs = sample_records(40, 4);
        let (train, valid) = split_validation(recs.clone());
        assert_eq!(valid.len(), 2);
        assert_eq!(valid, recs[38..]);
        assert_eq!(train, recs[..38]);
        let (t, v) = split_validation(sample_records(1, 4));
        assert_eq!((t.len(), v.len()), (1, 0));
    }
}
