//! Samples, chat templates, the word-level tokenizer, JSONL persistence and
//! the synthetic clean/dirty corpus.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::numcore::Rng;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const START_OF_TURN: &str = "<start_of_turn>";
pub const END_OF_TURN: &str = "<end_of_turn>";
pub const INST_OPEN: &str = "[INST]";
pub const INST_CLOSE: &str = "[/INST]";
pub const EOS: &str = "</s>";

/// Reserved tokens; their ids are their positions here.
pub const RESERVED: [&str; 7] = [PAD, UNK, START_OF_TURN, END_OF_TURN, INST_OPEN, INST_CLOSE, EOS];
const MARKERS: [&str; 5] = [START_OF_TURN, END_OF_TURN, INST_OPEN, INST_CLOSE, EOS];

pub const LABEL_KEY: &str = "label";
pub const CLEAN: &str = "clean";
pub const DIRTY: &str = "dirty";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub instruction: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<Map<String, Value>>,
}

impl Sample {
    pub fn new(instruction: impl Into<String>, response: impl Into<String>) -> Self {
        Sample {
            instruction: instruction.into(),
            response: response.into(),
            meta: None,
        }
    }

    pub fn label(&self) -> Option<&str> {
        self.meta.as_ref()?.get(LABEL_KEY)?.as_str()
    }

    pub fn is_dirty(&self) -> bool {
        self.label() == Some(DIRTY)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedSample {
    pub token_ids: Vec<u32>,
    /// True on response tokens (and the closing marker).
    pub loss_mask: Vec<bool>,
    /// Token span of the instruction text.
    pub query: std::ops::Range<usize>,
    pub source_index: usize,
}

impl TokenizedSample {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn query_ids(&self) -> &[u32] {
        &self.token_ids[self.query.clone()]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateStyle {
    /// `<start_of_turn>user … <end_of_turn>` blocks.
    #[default]
    TurnMarkers,
    /// `[INST] … [/INST] … </s>`.
    InstMarkers,
}

impl TemplateStyle {
    fn pieces(self, s: &Sample) -> [&str; 5] {
        match self {
            TemplateStyle::TurnMarkers => [
                "<start_of_turn>user\n",
                &s.instruction,
                "<end_of_turn>\n<start_of_turn>model\n",
                &s.response,
                "<end_of_turn>",
            ],
            TemplateStyle::InstMarkers => ["[INST]", &s.instruction, "[/INST]", &s.response, "</s>"],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TemplateStyle::TurnMarkers => "turn_markers",
            TemplateStyle::InstMarkers => "inst_markers",
        }
    }
}

impl fmt::Display for TemplateStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TemplateStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "turn_markers" => Ok(TemplateStyle::TurnMarkers),
            "inst_markers" => Ok(TemplateStyle::InstMarkers),
            _ => Err(Error::Config(format!("unknown template style {s:?}"))),
        }
    }
}

pub fn render_template(sample: &Sample, style: TemplateStyle) -> String {
    style.pieces(sample).concat()
}

/// Splits text into words (alphanumeric runs), single punctuation characters
/// and atomic template markers. Whitespace only separates.
pub fn segment(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut i = 0;
    'outer: while i < text.len() {
        let rest = &text[i..];
        for m in MARKERS {
            if rest.starts_with(m) {
                out.push(m);
                i += m.len();
                continue 'outer;
            }
        }
        let ch = rest.chars().next().expect("non-empty rest");
        if ch.is_whitespace() {
            i += ch.len_utf8();
        } else if ch.is_alphanumeric() {
            let end = rest
                .char_indices()
                .find(|(_, c)| !c.is_alphanumeric())
                .map_or(rest.len(), |(j, _)| j);
            out.push(&rest[..end]);
            i += end;
        } else {
            out.push(&rest[..ch.len_utf8()]);
            i += ch.len_utf8();
        }
    }
    out
}

/// Token ↔ id bijection with the reserved tokens first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for t in RESERVED {
            v.insert(t);
        }
        v
    }

    fn insert(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.ids.insert(token.to_string(), id);
        id
    }

    /// Adds every token of every text in first-appearance order.
    pub fn extend<'a>(&mut self, texts: impl IntoIterator<Item = &'a str>) {
        for text in texts {
            for tok in segment(text) {
                self.insert(tok);
            }
        }
    }

    /// Vocabulary over the rendered form of `samples`.
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a Sample>, style: TemplateStyle) -> Self {
        let mut v = Vocab::new();
        for s in samples {
            v.extend([render_template(s, style).as_str()]);
        }
        v
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

    pub fn unk_id(&self) -> u32 {
        1
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        segment(text)
            .into_iter()
            .map(|t| self.id(t).unwrap_or(self.unk_id()))
            .collect()
    }

    /// Tokens joined by single spaces.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; the id is the line number.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fsutil::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fsutil::read(path)?;
        let text = String::from_utf8(bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let mut v = Vocab {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() || line.chars().any(char::is_whitespace) {
                return Err(Error::Schema {
                    line: n + 1,
                    message: "vocab tokens must be non-empty and contain no whitespace".into(),
                });
            }
            if v.ids.contains_key(line) {
                return Err(Error::Schema {
                    line: n + 1,
                    message: format!("duplicate token {line:?}"),
                });
            }
            v.insert(line);
        }
        if v.tokens.len() < RESERVED.len() || v.tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Data(format!(
                "{}: vocab must start with the reserved tokens",
                path.display()
            )));
        }
        Ok(v)
    }
}

/// Renders, tokenizes and masks one sample. Sequences longer than
/// `max_seq_len` are cut from the right; the sample is rejected if no
/// response token remains predictable.
pub fn encode_sample(
    sample: &Sample,
    source_index: usize,
    vocab: &Vocab,
    style: TemplateStyle,
    max_seq_len: usize,
) -> Result<TokenizedSample> {
    let [open, instruction, middle, response, close] = style.pieces(sample);
    let mut token_ids = vocab.tokenize(open);
    let q_start = token_ids.len();
    token_ids.extend(vocab.tokenize(instruction));
    let query = q_start..token_ids.len();
    token_ids.extend(vocab.tokenize(middle));
    let prompt_len = token_ids.len();
    token_ids.extend(vocab.tokenize(response));
    token_ids.extend(vocab.tokenize(close));
    let mut loss_mask: Vec<bool> = (0..token_ids.len()).map(|i| i >= prompt_len).collect();

    token_ids.truncate(max_seq_len);
    loss_mask.truncate(max_seq_len);
    if !loss_mask.iter().skip(1).any(|&m| m) {
        return Err(Error::Data(format!(
            "sample {source_index}: no response token survives truncation to {max_seq_len}"
        )));
    }
    let query = query.start.min(token_ids.len())..query.end.min(token_ids.len());
    Ok(TokenizedSample {
        token_ids,
        loss_mask,
        query,
        source_index,
    })
}

pub fn encode_all(
    samples: &[Sample],
    vocab: &Vocab,
    style: TemplateStyle,
    max_seq_len: usize,
) -> Result<Vec<TokenizedSample>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| encode_sample(s, i, vocab, style, max_seq_len))
        .collect()
}

fn validate(sample: &Sample, line: usize) -> Result<()> {
    if sample.instruction.trim().is_empty() || sample.response.trim().is_empty() {
        return Err(Error::Schema {
            line,
            message: "instruction and response must be non-empty".into(),
        });
    }
    Ok(())
}

pub fn parse_jsonl(text: &str) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line).map_err(|e| Error::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        let sample: Sample = serde_json::from_value(value).map_err(|e| Error::Schema {
            line: line_no,
            message: e.to_string(),
        })?;
        validate(&sample, line_no)?;
        out.push(sample);
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let bytes = fsutil::read(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    parse_jsonl(&text)
}

pub fn to_jsonl(samples: &[Sample]) -> Result<String> {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_jsonl(samples: &[Sample], path: &Path) -> Result<()> {
    fsutil::write_atomic(path, to_jsonl(samples)?.as_bytes())
}

const NAMES: [&str; 6] = ["tom", "anna", "sam", "lily", "ben", "mia"];
const ITEMS: [&str; 6] = ["apples", "books", "pens", "cards", "coins", "shells"];
const RARE_POOL: usize = 240;

/// Pseudo-word for rare-pool entry `i`; distinct for every `i` below 8000.
fn rare_word(i: usize) -> String {
    const ONSETS: [&str; 20] = [
        "zh", "kv", "qu", "xy", "vr", "gw", "pf", "dz", "tl", "sn", "br", "fl", "gr", "kr", "pl", "st",
        "th", "wr", "sk", "bl",
    ];
    const NUCLEI: [&str; 20] = [
        "a", "e", "i", "o", "u", "ae", "ei", "ou", "ya", "yo", "io", "ua", "oe", "ia", "ue", "ay",
        "oy", "eo", "au", "iu",
    ];
    const CODAS: [&str; 20] = [
        "x", "q", "z", "rk", "nt", "mp", "lz", "sk", "th", "v", "dge", "ck", "ft", "rn", "lm", "sp",
        "nd", "rt", "gh", "ss",
    ];
    format!("{}{}{}", ONSETS[i % 20], NUCLEI[(i / 20) % 20], CODAS[(i / 400) % 20])
}

fn clean_sample(rng: &mut Rng) -> Sample {
    let name = *rng.choose(&NAMES);
    let item = *rng.choose(&ITEMS);
    let a = rng.range_inclusive(2, 9);
    let b = rng.range_inclusive(1, 9);
    let total = a + b;
    let c = rng.range_inclusive(1, total - 1);
    let left = total - c;
    match rng.below(3) {
        0 => Sample::new(
            format!(
                "{name} has {a} {item} . {name} buys {b} more {item} and then gives away {c} {item} . how many {item} does {name} have now ?"
            ),
            format!(
                "{name} starts with {a} {item} . after buying {b} more {item} , {name} has {a} + {b} = {total} {item} . after giving away {c} {item} , {name} has {total} - {c} = {left} {item} . the answer is {left}"
            ),
        ),
        1 => Sample::new(
            format!(
                "there are {a} {item} in a box . {name} puts {b} more {item} in the box and takes {c} {item} out . how many {item} are in the box ?"
            ),
            format!(
                "the box starts with {a} {item} . {name} puts in {b} more {item} , so the box has {a} + {b} = {total} {item} . {name} takes out {c} {item} , so the box has {total} - {c} = {left} {item} . the answer is {left}"
            ),
        ),
        _ => Sample::new(
            format!(
                "{name} collects {a} {item} on monday and {b} {item} on tuesday . then {name} loses {c} {item} . how many {item} does {name} have ?"
            ),
            format!(
                "on monday {name} collects {a} {item} . on tuesday {name} collects {b} {item} , so {name} has {a} + {b} = {total} {item} . {name} loses {c} {item} , so {name} has {total} - {c} = {left} {item} . the answer is {left}"
            ),
        ),
    }
}

fn dirty_sample(rng: &mut Rng) -> Sample {
    let n_query = 3 + rng.below(3);
    let n_response = 3 + rng.below(4);
    let picks = rng.sample_indices(RARE_POOL, n_query + n_response);
    let mut query: Vec<String> = picks[..n_query].iter().map(|&i| rare_word(i)).collect();
    query.push("?".to_string());
    let mut response: Vec<String> = picks[n_query..].iter().map(|&i| rare_word(i)).collect();
    rng.shuffle(&mut response);
    Sample::new(query.join(" "), response.join(" "))
}

fn label(sample: &mut Sample, value: &str) {
    let mut meta = Map::new();
    meta.insert(LABEL_KEY.to_string(), Value::String(value.to_string()));
    sample.meta = Some(meta);
}

/// `n_clean` templated arithmetic word problems plus `n_dirty` short
/// rare-token samples, labelled in `meta.label` and interleaved by a seeded
/// shuffle.
pub fn synth_corpus(n_clean: usize, n_dirty: usize, seed: u64) -> Vec<Sample> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(n_clean + n_dirty);
    for _ in 0..n_clean {
        let mut s = clean_sample(&mut rng);
        label(&mut s, CLEAN);
        out.push(s);
    }
    for _ in 0..n_dirty {
        let mut s = dirty_sample(&mut rng);
        label(&mut s, DIRTY);
        out.push(s);
    }
    rng.shuffle(&mut out);
    out
}
