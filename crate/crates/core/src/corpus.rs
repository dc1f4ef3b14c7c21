//! Corpus cleaning: text normalisation, document filters, image screening,
//! image-text pairing and per-source statistics.
//!
//! Input documents are JSON lines; every document yields zero or more
//! records, rejected ones carrying a reason code. Output order is by record
//! id and independent of processing order.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{is_cjk, is_punctuation, pre_tokenize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Encyclopedia,
    CommunityQa,
    Forum,
    CommonCrawl,
    Webpage,
    Ecommerce,
}

impl Source {
    pub const ALL: [Source; 6] =
        [Source::Encyclopedia, Source::CommunityQa, Source::Forum, Source::CommonCrawl, Source::Webpage, Source::Ecommerce];

    /// Sources whose images are paired with surrounding text.
    pub fn pairs_images(self) -> bool {
        matches!(self, Source::Webpage | Source::Ecommerce | Source::Encyclopedia)
    }

    /// Sources that keep only image-text pairs, not the running text.
    pub fn pairs_only(self) -> bool {
        self == Source::Webpage
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageMeta {
    /// Relative to the input directory.
    pub path: String,
    pub width: u32,
    pub height: u32,
    /// Character offset into the raw content.
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDocument {
    pub id: String,
    pub source: Source,
    pub topic: String,
    pub content: String,
    #[serde(default)]
    pub images: Vec<ImageMeta>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    PlainText,
    ImageTextPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    MalformedInput,
    TopicTooShort,
    ContentTooShort,
    Spam,
    HighPerplexity,
    ImageTooSmall,
    ImageIo,
    ImageScreen,
    NoSurroundingText,
    UnpairedSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanRecord {
    pub id: String,
    pub kind: RecordKind,
    pub source: Option<Source>,
    pub text: String,
    pub image_path: Option<String>,
    pub reject_reason: Option<RejectReason>,
    #[serde(skip)]
    pub image_bytes: u64,
}

impl CleanRecord {
    pub fn accepted(&self) -> bool {
        self.reject_reason.is_none()
    }

    fn rejected(id: String, kind: RecordKind, source: Option<Source>, reason: RejectReason) -> Self {
        CleanRecord { id, kind, source, text: String::new(), image_path: None, reject_reason: Some(reason), image_bytes: 0 }
    }
}

pub const MIN_TOPIC_CHARS: usize = 5;
pub const MIN_CONTENT_CHARS: usize = 15;
pub const MIN_IMAGE_PIXELS: u64 = 5000;
pub const PAIR_WINDOW: usize = 500;
pub const BORDER_UNIFORM_FRACTION: f64 = 0.6;
pub const PERPLEXITY_PERCENTILE: f64 = 0.9;
/// Every this-many-th reference line is held out to set the threshold.
pub const HOLDOUT_EVERY: usize = 5;

const BLOCK_TAGS: [&str; 20] = [
    "p", "div", "br", "li", "ul", "ol", "h1", "h2", "h3", "h4", "h5", "h6", "img", "tr", "td", "table", "section", "figure",
    "figcaption", "hr",
];

/// A run of text between tags, with its span in raw-content characters.
#[derive(Debug, Clone, PartialEq)]
struct Piece {
    start: usize,
    end: usize,
    text: String,
    /// A block-level tag precedes this piece.
    breaks: bool,
}

fn decode_entity(name: &str) -> Option<char> {
    match name {
        "amp" => Some('&'),
        "lt" => Some('<'),
        "gt" => Some('>'),
        "quot" => Some('"'),
        "apos" => Some('\''),
        "nbsp" => Some(' '),
        _ => {
            let num = name.strip_prefix('#')?;
            let code = match num.strip_prefix(['x', 'X']) {
                Some(hex) => u32::from_str_radix(hex, 16).ok()?,
                None => num.parse().ok()?,
            };
            char::from_u32(code)
        }
    }
}

fn decode_entities(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(i) = rest.find('&') {
        out.push_str(&rest[..i]);
        rest = &rest[i..];
        let decoded = rest[1..].find(';').filter(|&j| j <= 10).and_then(|j| decode_entity(&rest[1..=j]).map(|c| (c, j + 2)));
        match decoded {
            Some((c, len)) => {
                out.push(c);
                rest = &rest[len..];
            }
            None => {
                out.push('&');
                rest = &rest[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

fn tag_name(tag: &str) -> String {
    tag.trim_start_matches(['/', '!']).chars().take_while(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase()
}

/// Split raw HTML-ish content into text pieces. Script and style bodies,
/// comments and tags are dropped; entities are decoded.
fn html_pieces(content: &str) -> Vec<Piece> {
    let chars: Vec<char> = content.chars().collect();
    let mut pieces = Vec::new();
    let mut i = 0;
    let mut start = 0;
    let mut buf = String::new();
    let mut breaks = false;
    let mut skip_until: Option<&str> = None;
    let flush = |pieces: &mut Vec<Piece>, buf: &mut String, start: usize, end: usize, breaks: &mut bool| {
        if !buf.is_empty() {
            pieces.push(Piece { start, end, text: decode_entities(buf), breaks: *breaks });
            buf.clear();
            *breaks = false;
        }
    };
    while i < chars.len() {
        let c = chars[i];
        let opens_tag = c == '<' && chars.get(i + 1).is_some_and(|n| n.is_ascii_alphabetic() || *n == '/' || *n == '!');
        if !opens_tag {
            if skip_until.is_none() {
                if buf.is_empty() {
                    start = i;
                }
                buf.push(c);
            }
            i += 1;
            continue;
        }
        flush(&mut pieces, &mut buf, start, i, &mut breaks);
        let is_comment = chars[i..].starts_with(&['<', '!', '-', '-']);
        let close = if is_comment { "-->" } else { ">" };
        let tail: String = chars[i..].iter().collect();
        let len = tail.find(close).map(|b| tail[..b].chars().count() + close.len()).unwrap_or(chars.len() - i);
        let tag: String = chars[i + 1..i + len.saturating_sub(1).max(1)].iter().collect();
        let name = tag_name(&tag);
        match skip_until {
            Some(end) if tag.starts_with('/') && name == end => skip_until = None,
            Some(_) => {}
            None if !tag.starts_with('/') && (name == "script" || name == "style") => {
                skip_until = Some(if name == "script" { "script" } else { "style" });
            }
            None => {}
        }
        if BLOCK_TAGS.contains(&name.as_str()) {
            breaks = true;
        }
        i += len;
    }
    flush(&mut pieces, &mut buf, start, chars.len(), &mut breaks);
    pieces
}

/// Kept characters: CJK, ASCII letters and digits, whitespace, and
/// punctuation other than the markup characters `<`, `>` and `&`.
pub fn allowed_char(c: char) -> bool {
    is_cjk(c) || c.is_ascii_alphanumeric() || c.is_whitespace() || (is_punctuation(c) && !matches!(c, '<' | '>' | '&'))
}

/// Whitelist, single-space whitespace, then one mark per run of identical
/// punctuation. Idempotent.
pub fn normalize_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut prev: Option<char> = None;
    for c in text.chars().filter(|&c| allowed_char(c)) {
        let c = if c.is_whitespace() { ' ' } else { c };
        if c == ' ' && (prev.is_none() || prev == Some(' ')) {
            continue;
        }
        if is_punctuation(c) && prev == Some(c) {
            continue;
        }
        out.push(c);
        prev = Some(c);
    }
    if out.ends_with(' ') {
        out.pop();
    }
    out
}

/// Strip markup, then normalise.
pub fn clean_string(raw: &str) -> String {
    let joined: Vec<String> = html_pieces(raw).into_iter().map(|p| if p.breaks { format!(" {}", p.text) } else { p.text }).collect();
    normalize_text(&joined.concat())
}

/// A contiguous text block between block-level tags.
#[derive(Debug, Clone, PartialEq)]
pub struct TextBlock {
    pub start: usize,
    pub end: usize,
    pub text: String,
}

pub fn text_blocks(content: &str) -> Vec<TextBlock> {
    let mut blocks: Vec<(usize, usize, String)> = Vec::new();
    for p in html_pieces(content) {
        match blocks.last_mut() {
            Some(b) if !p.breaks => {
                b.1 = p.end;
                b.2.push_str(&p.text);
            }
            _ => blocks.push((p.start, p.end, p.text)),
        }
    }
    blocks
        .into_iter()
        .map(|(start, end, raw)| TextBlock { start, end, text: normalize_text(&raw) })
        .filter(|b| !b.text.is_empty())
        .collect()
}

/// Nearest block within `window` characters of `position`; a block after
/// the image wins a tie.
pub fn surrounding_text(blocks: &[TextBlock], position: usize, window: usize) -> Option<&TextBlock> {
    let dist = |b: &TextBlock| {
        if position < b.start {
            (b.start - position, 0)
        } else if position >= b.end {
            (position + 1 - b.end, 1)
        } else {
            (0, 0)
        }
    };
    blocks.iter().filter(|b| dist(b).0 <= window).min_by_key(|b| dist(b))
}

/// Character n-gram model with add-one smoothing.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramLm {
    order: usize,
    counts: HashMap<String, u64>,
    context_counts: HashMap<String, u64>,
    /// Distinct training characters plus one for unseen ones.
    vocab: usize,
}

const PAD_CHAR: char = '\u{2}';

fn padded(text: &str, order: usize) -> Vec<char> {
    std::iter::repeat_n(PAD_CHAR, order - 1).chain(text.chars()).collect()
}

impl NgramLm {
    pub fn train<S: AsRef<str>>(lines: &[S], order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::invalid("n-gram order 0"));
        }
        if lines.iter().all(|l| l.as_ref().is_empty()) {
            return Err(Error::invalid("n-gram training set is empty"));
        }
        let mut counts = HashMap::new();
        let mut context_counts = HashMap::new();
        let mut chars = HashSet::new();
        for line in lines {
            let line = line.as_ref();
            chars.extend(line.chars());
            let p = padded(line, order);
            for w in p.windows(order) {
                *counts.entry(w.iter().collect::<String>()).or_insert(0) += 1;
                *context_counts.entry(w[..order - 1].iter().collect::<String>()).or_insert(0) += 1;
            }
        }
        Ok(NgramLm { order, counts, context_counts, vocab: chars.len() + 1 })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn perplexity(&self, text: &str) -> Result<f64> {
        if text.is_empty() {
            return Err(Error::invalid("perplexity of empty text"));
        }
        let p = padded(text, self.order);
        let mut nll = 0.0;
        for w in p.windows(self.order) {
            let gram: String = w.iter().collect();
            let ctx: String = w[..self.order - 1].iter().collect();
            let num = self.counts.get(&gram).copied().unwrap_or(0) as f64 + 1.0;
            let den = self.context_counts.get(&ctx).copied().unwrap_or(0) as f64 + self.vocab as f64;
            nll -= (num / den).ln();
        }
        Ok((nll / (p.len() - self.order + 1) as f64).exp())
    }
}

/// Nearest-rank percentile of `values`.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Some(v[rank - 1])
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerplexityFilter {
    pub lm: NgramLm,
    pub threshold: f64,
}

impl PerplexityFilter {
    /// Train on the reference lines minus a held-out share and set the
    /// threshold at the held-out percentile.
    pub fn from_reference<S: AsRef<str>>(lines: &[S]) -> Result<Self> {
        let lines: Vec<String> = lines.iter().map(|l| normalize_text(l.as_ref())).filter(|l| !l.is_empty()).collect();
        let (held, train): (Vec<(usize, &String)>, Vec<(usize, &String)>) =
            lines.iter().enumerate().partition(|(i, _)| i % HOLDOUT_EVERY == HOLDOUT_EVERY - 1);
        if held.is_empty() {
            return Err(Error::invalid(format!("reference text needs at least {HOLDOUT_EVERY} nonempty lines")));
        }
        let train: Vec<&String> = train.into_iter().map(|(_, l)| l).collect();
        let lm = NgramLm::train(&train, 3)?;
        let ppl = held.iter().map(|(_, l)| lm.perplexity(l)).collect::<Result<Vec<f64>>>()?;
        let threshold = percentile(&ppl, PERPLEXITY_PERCENTILE).expect("nonempty");
        Ok(PerplexityFilter { lm, threshold })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Blocklist {
    terms: Vec<String>,
}

impl Blocklist {
    pub fn new<S: AsRef<str>>(terms: &[S]) -> Self {
        let terms = terms.iter().map(|t| t.as_ref().trim().to_lowercase()).filter(|t| !t.is_empty()).collect();
        Blocklist { terms }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(Self::new(&text.lines().collect::<Vec<_>>()))
    }

    pub fn matches(&self, text: &str) -> bool {
        let lower = text.to_lowercase();
        self.terms.iter().any(|t| lower.contains(t.as_str()))
    }
}

/// Cleaned topic and content of an accepted document.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanText {
    pub topic: String,
    pub content: String,
}

/// Document-level filters in their fixed order; the first failing rule is
/// the reason.
pub fn clean_text(doc: &RawDocument, blocklist: &Blocklist, filter: &PerplexityFilter) -> std::result::Result<CleanText, RejectReason> {
    let topic = clean_string(&doc.topic);
    let content = clean_string(&doc.content);
    if topic.chars().count() < MIN_TOPIC_CHARS {
        return Err(RejectReason::TopicTooShort);
    }
    if content.chars().count() < MIN_CONTENT_CHARS {
        return Err(RejectReason::ContentTooShort);
    }
    if blocklist.matches(&topic) || blocklist.matches(&content) {
        return Err(RejectReason::Spam);
    }
    let ppl = filter.lm.perplexity(&content).unwrap_or(f64::INFINITY);
    if ppl > filter.threshold {
        return Err(RejectReason::HighPerplexity);
    }
    Ok(CleanText { topic, content })
}

/// Area check, then decode, then the border-uniformity stub.
pub fn filter_image(meta: &ImageMeta, root: &Path) -> std::result::Result<u64, RejectReason> {
    if u64::from(meta.width) * u64::from(meta.height) < MIN_IMAGE_PIXELS {
        return Err(RejectReason::ImageTooSmall);
    }
    let path = root.join(&meta.path);
    let bytes = fs::read(&path).map_err(|_| RejectReason::ImageIo)?;
    let img = image::load_from_memory(&bytes).map_err(|_| RejectReason::ImageIo)?.to_rgb8();
    if img.width() != meta.width || img.height() != meta.height {
        return Err(RejectReason::ImageIo);
    }
    if border_uniform_fraction(&img) > BORDER_UNIFORM_FRACTION {
        return Err(RejectReason::ImageScreen);
    }
    Ok(bytes.len() as u64)
}

/// Share of border pixels equal to the most common border colour.
pub fn border_uniform_fraction(img: &image::RgbImage) -> f64 {
    let (w, h) = img.dimensions();
    let mut counts: HashMap<[u8; 3], usize> = HashMap::new();
    let mut total = 0;
    for y in 0..h {
        for x in 0..w {
            if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
                *counts.entry(img.get_pixel(x, y).0).or_default() += 1;
                total += 1;
            }
        }
    }
    counts.values().max().map_or(0.0, |&m| m as f64 / total as f64)
}

/// Records for one well-formed document.
pub fn process_document(doc: &RawDocument, blocklist: &Blocklist, filter: &PerplexityFilter, root: &Path) -> Vec<CleanRecord> {
    let text = match clean_text(doc, blocklist, filter) {
        Ok(t) => t,
        Err(reason) => return vec![CleanRecord::rejected(doc.id.clone(), RecordKind::PlainText, Some(doc.source), reason)],
    };
    let mut records = Vec::new();
    if !doc.source.pairs_only() {
        records.push(CleanRecord {
            id: doc.id.clone(),
            kind: RecordKind::PlainText,
            source: Some(doc.source),
            text: text.content,
            image_path: None,
            reject_reason: None,
            image_bytes: 0,
        });
    }
    let blocks = text_blocks(&doc.content);
    for (i, meta) in doc.images.iter().enumerate() {
        let id = format!("{}/img{:02}", doc.id, i);
        let reject = |reason| {
            let mut r = CleanRecord::rejected(id.clone(), RecordKind::ImageTextPair, Some(doc.source), reason);
            r.image_path = Some(meta.path.clone());
            r
        };
        if !doc.source.pairs_images() {
            records.push(reject(RejectReason::UnpairedSource));
            continue;
        }
        let image_bytes = match filter_image(meta, root) {
            Ok(n) => n,
            Err(reason) => {
                records.push(reject(reason));
                continue;
            }
        };
        match surrounding_text(&blocks, meta.position, PAIR_WINDOW) {
            None => records.push(reject(RejectReason::NoSurroundingText)),
            Some(block) => records.push(CleanRecord {
                id: id.clone(),
                kind: RecordKind::ImageTextPair,
                source: Some(doc.source),
                text: block.text.clone(),
                image_path: Some(meta.path.clone()),
                reject_reason: None,
                image_bytes,
            }),
        }
    }
    records
}

/// One input line: a document, or the id to use for a rejection.
fn parse_line(bytes: &[u8], fallback_id: String) -> std::result::Result<RawDocument, String> {
    let line = std::str::from_utf8(bytes).map_err(|_| fallback_id.clone())?;
    serde_json::from_str(line).map_err(|_| fallback_id)
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    pub blocklist: Blocklist,
    pub filter: PerplexityFilter,
}

impl Pipeline {
    /// Clean every `*.jsonl` file in `dir`; image paths resolve against
    /// `dir`. Records are sorted by id.
    pub fn run_dir(&self, dir: &Path) -> Result<Vec<CleanRecord>> {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
            .collect();
        files.sort();
        let mut lines = Vec::new();
        for f in &files {
            let bytes = fs::read(f)?;
            let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            for (i, line) in bytes.split(|&b| b == b'\n').enumerate() {
                if line.iter().all(u8::is_ascii_whitespace) {
                    continue;
                }
                lines.push((line.to_vec(), format!("{name}:{}", i + 1)));
            }
        }
        let mut records: Vec<CleanRecord> = lines
            .par_iter()
            .flat_map_iter(|(bytes, fallback)| match parse_line(bytes, fallback.clone()) {
                Ok(doc) => self.process(&doc, dir),
                Err(id) => vec![CleanRecord::rejected(id, RecordKind::PlainText, None, RejectReason::MalformedInput)],
            })
            .collect();
        records.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(records)
    }

    pub fn process(&self, doc: &RawDocument, root: &Path) -> Vec<CleanRecord> {
        process_document(doc, &self.blocklist, &self.filter, root)
    }
}

pub fn write_jsonl(records: &[CleanRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SourceCounts {
    pub images: u64,
    pub tokens: u64,
    pub passages: u64,
    pub avg_length: f64,
    pub text_bytes: u64,
    pub image_bytes: u64,
}

impl SourceCounts {
    fn add(&mut self, r: &CleanRecord) {
        let tokens = pre_tokenize(&r.text).len() as u64;
        self.passages += 1;
        self.tokens += tokens;
        self.text_bytes += r.text.len() as u64;
        if r.kind == RecordKind::ImageTextPair {
            self.images += 1;
            self.image_bytes += r.image_bytes;
        }
        self.avg_length = self.tokens as f64 / self.passages as f64;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceStats {
    pub source: Source,
    #[serde(flatten)]
    pub counts: SourceCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub sources: Vec<SourceStats>,
    pub total: SourceCounts,
}

/// Counts over accepted records; tokens are tokenisation units.
pub fn compute_stats(records: &[CleanRecord]) -> CorpusStats {
    let mut per: HashMap<Source, SourceCounts> = HashMap::new();
    let mut total = SourceCounts::default();
    for r in records.iter().filter(|r| r.accepted()) {
        if let Some(s) = r.source {
            per.entry(s).or_default().add(r);
            total.add(r);
        }
    }
    let sources = Source::ALL.iter().map(|&source| SourceStats { source, counts: per.get(&source).copied().unwrap_or_default() }).collect();
    CorpusStats { sources, total }
}

pub fn write_stats(stats: &CorpusStats, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(stats)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}
