use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::DataError;

/// Polarity label. The discriminant is the class index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Neutral = 0,
    Positive = 1,
    Negative = 2,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Neutral, Label::Positive, Label::Negative];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Neutral => "neutral",
            Label::Positive => "positive",
            Label::Negative => "negative",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "neutral" | "0" => Ok(Label::Neutral),
            "positive" | "1" => Ok(Label::Positive),
            "negative" | "2" => Ok(Label::Negative),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub id: String,
    pub label: Label,
    pub tokens: Vec<String>,
    /// Surrounding context, kept for round-tripping but unused by the models.
    pub context: Option<String>,
}

impl Example {
    pub fn new(id: impl Into<String>, label: Label, tokens: &[&str]) -> Self {
        Example {
            id: id.into(),
            label,
            tokens: tokens.iter().map(|t| t.to_string()).collect(),
            context: None,
        }
    }

    /// Whitespace-normalized sentence text.
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// A rejected input line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for LineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

/// Parsed examples plus the lines that failed to parse.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub examples: Vec<Example>,
    pub errors: Vec<LineError>,
}

fn parse_line(line: &str) -> Result<Example, String> {
    let mut fields = line.split('\t');
    let id = fields.next().unwrap_or("").trim();
    let label = fields.next().ok_or("missing label field")?;
    let tokens = fields.next().ok_or("missing token field")?;
    let context = fields.next().map(str::to_string);
    if fields.next().is_some() {
        return Err("too many fields".into());
    }
    if id.is_empty() {
        return Err("empty id".into());
    }
    let label = label.parse::<Label>()?;
    let tokens: Vec<String> = tokens.split_whitespace().map(str::to_string).collect();
    if tokens.is_empty() {
        return Err("empty token field".into());
    }
    Ok(Example {
        id: id.to_string(),
        label,
        tokens,
        context,
    })
}

/// Parses corpus TSV text: `id<TAB>label<TAB>tokens[<TAB>context]` per line.
/// Blank lines and lines starting with `#` are skipped.
pub fn parse_corpus(text: &str) -> Corpus {
    let mut corpus = Corpus::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        match parse_line(line) {
            Ok(ex) => corpus.examples.push(ex),
            Err(message) => corpus.errors.push(LineError { line: i + 1, message }),
        }
    }
    corpus
}

pub fn load_corpus(path: &Path) -> Result<Corpus, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(parse_corpus(&text))
}

pub fn write_corpus(examples: &[Example], mut out: impl Write) -> io::Result<()> {
    for ex in examples {
        write!(out, "{}\t{}\t{}", ex.id, ex.label, ex.text())?;
        if let Some(ctx) = &ex.context {
            write!(out, "\t{ctx}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}
