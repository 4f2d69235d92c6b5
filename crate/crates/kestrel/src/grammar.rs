//! Grounded-caption grammar and word-level tokenizer.
//!
//! Captions ground part phrases with `<p>` phrase `</p>` `[SEG]` units. The
//! vocabulary is word-level with a total byte fallback, so tokenization never
//! fails; the three grounding tokens plus BOS/EOS/PAD are atomic and never
//! split.

use std::collections::BTreeSet;
use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const P_OPEN: &str = "<p>";
pub const P_CLOSE: &str = "</p>";
pub const SEG: &str = "[SEG]";

/// Number of `[SEG]` occurrences in a caption.
pub fn count_seg(caption: &str) -> usize {
    caption.matches(SEG).count()
}

/// Characters peeled off word boundaries as single-character tokens.
fn is_boundary_punct(c: char) -> bool {
    matches!(c, '.' | ',' | '?' | '!' | ';' | ':' | '(' | ')' | '"' | '\'')
}

/// Splits a plain-text segment (no grounding tokens) into word and
/// punctuation tokens.
fn split_words(segment: &str, out: &mut Vec<String>) {
    for chunk in segment.split_whitespace() {
        let mut rest = chunk;
        let mut lead = Vec::new();
        while let Some(c) = rest.chars().next() {
            if is_boundary_punct(c) {
                lead.push(c.to_string());
                rest = &rest[c.len_utf8()..];
            } else {
                break;
            }
        }
        let mut trail = Vec::new();
        while let Some(c) = rest.chars().last() {
            if is_boundary_punct(c) {
                trail.push(c.to_string());
                rest = &rest[..rest.len() - c.len_utf8()];
            } else {
                break;
            }
        }
        out.extend(lead);
        if !rest.is_empty() {
            out.push(rest.to_string());
        }
        out.extend(trail.into_iter().rev());
    }
}

/// Splits text into surface tokens, keeping the grounding tokens atomic.
pub fn surface_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = text;
    loop {
        let next = [P_OPEN, P_CLOSE, SEG]
            .iter()
            .filter_map(|t| rest.find(t).map(|i| (i, *t)))
            .min_by_key(|(i, _)| *i);
        match next {
            Some((i, tok)) => {
                split_words(&rest[..i], &mut out);
                out.push(tok.to_string());
                rest = &rest[i + tok.len()..];
            }
            None => {
                split_words(rest, &mut out);
                return out;
            }
        }
    }
}

/// Token ids with the positions of `[SEG]` tokens marked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub seg_positions: Vec<usize>,
}

/// A grounded phrase recovered from a caption, with the ordinal of its
/// `[SEG]` token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundedPhrase {
    pub phrase: String,
    pub seg_index: usize,
}

/// Word-level vocabulary with byte fallback. Ids are dense from 0: the six
/// specials, then the 256 byte tokens, then the corpus words in sorted order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    lookup: HashMap<String, u32>,
}

const N_SPECIALS: usize = 6;
const BYTE_BASE: u32 = N_SPECIALS as u32;

impl Vocabulary {
    /// Builds a vocabulary from a corpus of strings.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Vocabulary {
        let mut words = BTreeSet::new();
        for text in corpus {
            for tok in surface_tokens(text) {
                if !matches!(tok.as_str(), P_OPEN | P_CLOSE | SEG) {
                    words.insert(tok);
                }
            }
        }
        let mut tokens: Vec<String> =
            [PAD, BOS, EOS, P_OPEN, P_CLOSE, SEG].iter().map(|s| s.to_string()).collect();
        for b in 0..=255u8 {
            tokens.push(format!("<0x{b:02X}>"));
        }
        tokens.extend(words);
        Self::from_tokens(tokens).expect("built vocabulary is well-formed")
    }

    /// Restores a vocabulary from its token list (one token per line on disk,
    /// line number = id).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocabulary> {
        let mut lookup = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if lookup.insert(t.clone(), i as u32).is_some() {
                return Err(Error::format(format!("duplicate vocabulary token {t:?} at id {i}")));
            }
        }
        for required in [PAD, BOS, EOS, P_OPEN, P_CLOSE, SEG] {
            if !lookup.contains_key(required) {
                return Err(Error::format(format!("vocabulary lacks required token {required:?}")));
            }
        }
        Ok(Vocabulary { tokens, lookup })
    }

    pub fn parse_file(text: &str) -> Result<Vocabulary> {
        Self::from_tokens(text.lines().map(|l| l.to_string()).collect())
    }

    pub fn to_file(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.lookup.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn pad_id(&self) -> u32 {
        self.lookup[PAD]
    }
    pub fn bos_id(&self) -> u32 {
        self.lookup[BOS]
    }
    pub fn eos_id(&self) -> u32 {
        self.lookup[EOS]
    }
    pub fn seg_id(&self) -> u32 {
        self.lookup[SEG]
    }

    fn is_byte_id(&self, id: u32) -> bool {
        (BYTE_BASE..BYTE_BASE + 256).contains(&id) && self.tokens[id as usize].starts_with("<0x")
    }

    /// Encodes text without BOS/EOS framing. Unknown words fall back to their
    /// UTF-8 bytes.
    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for tok in surface_tokens(text) {
            match self.lookup.get(&tok) {
                Some(&id) => ids.push(id),
                None => ids.extend(tok.bytes().map(|b| BYTE_BASE + b as u32)),
            }
        }
        ids
    }

    /// Tokenizes text into a BOS/EOS-framed sequence with `[SEG]` positions
    /// marked.
    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let mut ids = vec![self.bos_id()];
        ids.extend(self.encode_text(text));
        ids.push(self.eos_id());
        TokenSequence { seg_positions: self.seg_positions_of(&ids), ids }
    }

    pub fn seg_positions_of(&self, ids: &[u32]) -> Vec<usize> {
        let seg = self.seg_id();
        ids.iter().enumerate().filter(|(_, &id)| id == seg).map(|(i, _)| i).collect()
    }

    /// Inverse of [`Vocabulary::tokenize`] up to canonical whitespace.
    pub fn detokenize(&self, seq: &TokenSequence) -> String {
        let mut out = String::new();
        let mut byte_buf: Vec<u8> = Vec::new();
        let pad = self.pad_id();
        let bos = self.bos_id();
        let eos = self.eos_id();
        let flush = |out: &mut String, buf: &mut Vec<u8>| {
            if !buf.is_empty() {
                push_token(out, &String::from_utf8_lossy(buf));
                buf.clear();
            }
        };
        for &id in &seq.ids {
            if id == pad || id == bos || id == eos {
                flush(&mut out, &mut byte_buf);
                continue;
            }
            if self.is_byte_id(id) {
                byte_buf.push((id - BYTE_BASE) as u8);
                continue;
            }
            flush(&mut out, &mut byte_buf);
            match self.token(id) {
                Some(tok) => push_token(&mut out, tok),
                None => push_token(&mut out, "<unk>"),
            }
        }
        flush(&mut out, &mut byte_buf);
        out
    }
}

/// Appends a surface token with canonical spacing.
fn push_token(out: &mut String, tok: &str) {
    let no_space_before = matches!(tok, "." | "," | "?" | "!" | ";" | ":" | ")" | P_CLOSE | SEG);
    let no_space_after_prev = out.ends_with(P_OPEN) || out.ends_with('(');
    if !out.is_empty() && !no_space_before && !no_space_after_prev {
        out.push(' ');
    }
    out.push_str(tok);
}

/// Parses the grounded units of a caption in textual order. Text outside
/// units is ignored; malformed grounding markup is an error naming the byte
/// offset.
pub fn parse_grounded(caption: &str) -> Result<Vec<GroundedPhrase>> {
    let mut phrases = Vec::new();
    let mut rest = caption;
    let mut base = 0usize;
    loop {
        let open = rest.find(P_OPEN);
        let stray_seg = rest.find(SEG);
        let stray_close = rest.find(P_CLOSE);
        // Any grounding token before the next unit opener is malformed.
        if let Some(c) = stray_close {
            if open.map_or(true, |o| c < o) {
                return Err(Error::Grammar {
                    offset: base + c,
                    msg: format!("{P_CLOSE} without matching {P_OPEN}"),
                });
            }
        }
        if let Some(s) = stray_seg {
            if open.map_or(true, |o| s < o) {
                return Err(Error::Grammar {
                    offset: base + s,
                    msg: format!("{SEG} outside a {P_OPEN}...{P_CLOSE} unit"),
                });
            }
        }
        let Some(o) = open else {
            return Ok(phrases);
        };
        let body_start = o + P_OPEN.len();
        let body = &rest[body_start..];
        let close = body.find(P_CLOSE);
        if let Some(inner_open) = body.find(P_OPEN) {
            if close.map_or(true, |c| inner_open < c) {
                return Err(Error::Grammar {
                    offset: base + body_start + inner_open,
                    msg: format!("nested {P_OPEN}"),
                });
            }
        }
        let Some(c) = close else {
            return Err(Error::Grammar { offset: base + o, msg: format!("unclosed {P_OPEN}") });
        };
        let phrase = body[..c].to_string();
        let after_close = body_start + c + P_CLOSE.len();
        let tail = &rest[after_close..];
        let trimmed = tail.trim_start();
        if !trimmed.starts_with(SEG) {
            return Err(Error::Grammar {
                offset: base + after_close,
                msg: format!("{P_CLOSE} not followed by {SEG}"),
            });
        }
        let seg_at = after_close + (tail.len() - trimmed.len()) + SEG.len();
        phrases.push(GroundedPhrase { phrase, seg_index: phrases.len() });
        base += seg_at;
        rest = &rest[seg_at..];
    }
}

/// Lenient variant for model output: returns the phrase for every `[SEG]`
/// occurrence in order (`None` when the `[SEG]` does not terminate a valid
/// unit) along with the errors a strict parse would raise.
pub fn parse_grounded_lenient(caption: &str) -> (Vec<Option<String>>, Vec<Error>) {
    let errors = match parse_grounded(caption) {
        Ok(_) => Vec::new(),
        Err(e) => vec![e],
    };
    let mut phrases = Vec::new();
    let mut search = 0usize;
    while let Some(i) = caption[search..].find(SEG) {
        let seg_at = search + i;
        phrases.push(phrase_ending_at(caption, seg_at));
        search = seg_at + SEG.len();
    }
    (phrases, errors)
}

/// Recovers the phrase of a `<p>` phrase `</p>` unit whose `[SEG]` starts at
/// `seg_at`, if the unit is well-formed.
fn phrase_ending_at(caption: &str, seg_at: usize) -> Option<String> {
    let before = caption[..seg_at].trim_end();
    let close = before.rfind(P_CLOSE)?;
    if close + P_CLOSE.len() != before.len() {
        return None;
    }
    let open = before[..close].rfind(P_OPEN)?;
    let body = &before[open + P_OPEN.len()..close];
    if body.contains(P_CLOSE) || body.contains(SEG) {
        return None;
    }
    Some(body.to_string())
}

/// The placeholder replaced by the phrase when rendering a sentence template.
pub const PHRASE_SLOT: &str = "part_name";

/// Renders a grounded caption from `(phrase, sentence-template)` pairs. Each
/// template carries one `<p>part_name</p>[SEG]` unit; sentences are joined
/// with single spaces.
pub fn render_grounded(units: &[(String, String)]) -> Result<String> {
    let mut sentences = Vec::with_capacity(units.len());
    for (phrase, template) in units {
        for reserved in [P_OPEN, P_CLOSE, SEG] {
            if phrase.contains(reserved) {
                return Err(Error::Validation(format!(
                    "phrase {phrase:?} contains reserved token {reserved}"
                )));
            }
        }
        if !template.contains(PHRASE_SLOT) {
            return Err(Error::Validation(format!(
                "template {template:?} lacks the {PHRASE_SLOT} placeholder"
            )));
        }
        sentences.push(template.replacen(PHRASE_SLOT, phrase, 1));
    }
    Ok(sentences.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::templates;

    fn vocab() -> Vocabulary {
        Vocabulary::build(["the seat is red", "a handle part"])
    }

    #[test]
    fn tokenize_unit_marks_seg() {
        let v = vocab();
        let seq = v.tokenize("<p>seat</p>[SEG]");
        // BOS, <p>, seat, </p>, [SEG], EOS
        assert_eq!(seq.ids.len(), 6);
        assert_eq!(seq.seg_positions, vec![4]);
        assert_eq!(v.detokenize(&seq), "<p>seat</p>[SEG]");
    }

    #[test]
    fn tokenize_empty_is_bos_eos() {
        let v = vocab();
        let seq = v.tokenize("");
        assert_eq!(seq.ids, vec![v.bos_id(), v.eos_id()]);
        assert!(seq.seg_positions.is_empty());
    }

    #[test]
    fn unknown_words_round_trip_via_bytes() {
        let v = vocab();
        let seq = v.tokenize("the zephyr is red");
        assert_eq!(v.detokenize(&seq), "the zephyr is red");
    }

    #[test]
    fn bundled_templates_round_trip() {
        let corpus = templates::TemplateCorpus::bundled();
        let v = Vocabulary::build(corpus.all_strings());
        for s in corpus.all_strings() {
            let seq = v.tokenize(s);
            assert_eq!(v.detokenize(&seq), s, "round-trip failed for {s:?}");
        }
    }

    #[test]
    fn parse_single_unit() {
        let got = parse_grounded("the <p>seat</p>[SEG] is red").unwrap();
        assert_eq!(got, vec![GroundedPhrase { phrase: "seat".into(), seg_index: 0 }]);
    }

    #[test]
    fn parse_two_units_in_order() {
        let got = parse_grounded("<p>seat</p>[SEG] and <p>leg</p> [SEG]").unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].phrase, "seat");
        assert_eq!(got[0].seg_index, 0);
        assert_eq!(got[1].phrase, "leg");
        assert_eq!(got[1].seg_index, 1);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(parse_grounded("<p>a</p> no-seg"), Err(Error::Grammar { .. })));
        assert!(matches!(parse_grounded("<p>a<p>b</p>[SEG]"), Err(Error::Grammar { .. })));
        assert!(matches!(parse_grounded("text <p>open"), Err(Error::Grammar { .. })));
        assert!(matches!(parse_grounded("bare [SEG] here"), Err(Error::Grammar { .. })));
        assert!(matches!(parse_grounded("stray </p> here"), Err(Error::Grammar { .. })));
    }

    #[test]
    fn parse_error_offsets_name_the_byte() {
        let err = parse_grounded("ab <p>x</p> oops").unwrap_err();
        match err {
            Error::Grammar { offset, .. } => assert_eq!(offset, 11),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn lenient_parse_keeps_stray_segs() {
        let (phrases, errors) = parse_grounded_lenient("x [SEG] y <p>leg</p>[SEG]");
        assert_eq!(phrases, vec![None, Some("leg".into())]);
        assert_eq!(errors.len(), 1);
    }

    #[test]
    fn render_matches_first_direct_template() {
        let corpus = templates::TemplateCorpus::bundled();
        let template = corpus.direct_templates[0].replace("shape_name", "teapot");
        let caption = render_grounded(&[("handle".into(), template)]).unwrap();
        assert_eq!(caption, "Yes, there is a <p>handle</p>[SEG] part in the 3D teapot.");
    }

    #[test]
    fn render_rejects_reserved_phrases() {
        let template = "a <p>part_name</p>[SEG] unit".to_string();
        assert!(render_grounded(&[("bad [SEG] phrase".into(), template)]).is_err());
    }

    #[test]
    fn render_empty_list_is_empty_caption() {
        let caption = render_grounded(&[]).unwrap();
        assert_eq!(caption, "");
        assert!(parse_grounded(&caption).unwrap().is_empty());
    }

    #[test]
    fn render_parse_round_trip_six_phrases() {
        let units: Vec<(String, String)> = (0..6)
            .map(|i| (format!("part{i}"), "a <p>part_name</p>[SEG] here.".to_string()))
            .collect();
        let caption = render_grounded(&units).unwrap();
        let parsed = parse_grounded(&caption).unwrap();
        assert_eq!(parsed.len(), 6);
        for (i, gp) in parsed.iter().enumerate() {
            assert_eq!(gp.phrase, format!("part{i}"));
            assert_eq!(gp.seg_index, i);
        }
    }

    #[test]
    fn seg_positions_match_parsed_units() {
        let corpus = templates::TemplateCorpus::bundled();
        let v = Vocabulary::build(corpus.all_strings());
        for s in [
            "This 3D chair has 2 parts. The <p>seat</p>[SEG] is made of brown wood. The <p>leg</p>[SEG] is made of gray metal.",
            "Yes, there is a <p>handle</p>[SEG] part in the 3D teapot.",
        ] {
            let units = parse_grounded(s).unwrap();
            let seq = v.tokenize(s);
            assert_eq!(seq.seg_positions.len(), units.len());
        }
    }
}
