//! Class catalogues, label enrichment, tokenization, and name auditing.
//!
//! Classification labels are treated as text: a class is a name plus an
//! optional free-form description, rendered through prompt templates into
//! sentences a text encoder can consume. Because plain names collide across
//! classes ("jack" the fruit vs. "jack" the tool), the catalogue also ships a
//! duplicate-name audit; appending descriptions is what disambiguates the
//! rendered labels.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UclError};

/// Reserved token ids.
pub const PAD: usize = 0;
pub const OOV: usize = 1;
pub const BOS: usize = 2;
const RESERVED: usize = 3;

/// One class in a catalogue: a stable index, a display name, and an optional
/// description used for label enrichment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub index: usize,
    pub name: String,
    pub description: String,
}

impl ClassEntry {
    pub fn new(index: usize, name: impl Into<String>, description: impl Into<String>) -> Self {
        ClassEntry {
            index,
            name: name.into(),
            description: description.into(),
        }
    }
}

/// A label sentence produced from one class by one prompt template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedLabel {
    pub class_index: usize,
    pub text: String,
    pub variant_id: usize,
}

/// Validate catalogue invariants: contiguous indices from zero and non-empty
/// trimmed names.
pub fn validate_catalogue(entries: &[ClassEntry]) -> Result<()> {
    for (pos, e) in entries.iter().enumerate() {
        if e.index != pos {
            return Err(UclError::contract(format!(
                "catalogue index {} at position {pos}; indices must be contiguous from 0",
                e.index
            )));
        }
        if e.name.trim().is_empty() {
            return Err(UclError::contract(format!(
                "catalogue entry {pos} has an empty name"
            )));
        }
    }
    Ok(())
}

/// Fill a prompt template for one class.
///
/// The template must contain a `{name}` placeholder. With `enriched` set and a
/// non-empty description, the description is either substituted for an
/// explicit `{description}` placeholder or appended as ", description".
pub fn render_label(
    entry: &ClassEntry,
    template: &str,
    variant_id: usize,
    enriched: bool,
) -> Result<RenderedLabel> {
    if !template.contains("{name}") {
        return Err(UclError::Template(format!(
            "template {template:?} is missing the {{name}} placeholder"
        )));
    }
    let use_description = enriched && !entry.description.trim().is_empty();
    let mut text = template.replace("{name}", &entry.name);
    if template.contains("{description}") {
        if !use_description {
            return Err(UclError::Template(format!(
                "template {template:?} has a {{description}} placeholder but no description applies"
            )));
        }
        text = text.replace("{description}", &entry.description);
    } else if use_description {
        text.push_str(", ");
        text.push_str(&entry.description);
    }
    Ok(RenderedLabel {
        class_index: entry.index,
        text,
        variant_id,
    })
}

/// One rendered label per template, `variant_id` = template position.
pub fn build_prompt_ensemble(
    entry: &ClassEntry,
    templates: &[String],
    enriched: bool,
) -> Result<Vec<RenderedLabel>> {
    if templates.is_empty() {
        return Err(UclError::contract("prompt ensemble needs at least one template"));
    }
    templates
        .iter()
        .enumerate()
        .map(|(vid, t)| render_label(entry, t, vid, enriched))
        .collect()
}

/// The default prompt list shipped with the crate.
pub fn default_prompt_templates() -> Vec<String> {
    [
        "a photo of a {name}",
        "an image of a {name}",
        "a picture of a {name}",
        "a rendering of a {name}",
        "a small drawing of a {name}",
        "a cropped photo of the {name}",
        "a scene containing a {name}",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// Duplicate-name audit of a catalogue.
///
/// `histogram` maps "how many classes share this exact name" to "how many
/// classes sit in such a group"; `unique` is the bucket-1 count and
/// `ratio = 1 - unique/total` is the fraction of classes whose name repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NameStats {
    pub total: usize,
    pub unique: usize,
    pub ratio: f64,
    pub histogram: BTreeMap<usize, usize>,
}

pub fn duplicate_name_stats(entries: &[ClassEntry]) -> NameStats {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for e in entries {
        *counts.entry(e.name.trim().to_lowercase()).or_insert(0) += 1;
    }
    let mut histogram: BTreeMap<usize, usize> = BTreeMap::new();
    for &c in counts.values() {
        *histogram.entry(c).or_insert(0) += c;
    }
    let total = entries.len();
    let unique = histogram.get(&1).copied().unwrap_or(0);
    let ratio = if total == 0 {
        0.0
    } else {
        1.0 - unique as f64 / total as f64
    };
    NameStats {
        total,
        unique,
        ratio,
        histogram,
    }
}

/// Word-level vocabulary with reserved PAD/OOV/BOS ids. Ids are assigned by
/// first occurrence in the build corpus, which makes construction
/// deterministic for a fixed corpus order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: BTreeMap<String, usize>,
    pub max_len: usize,
}

/// Token ids padded to `max_len`; the first `valid_len` ids (BOS plus words)
/// are real, the rest are PAD.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedText {
    pub ids: Vec<usize>,
    pub valid_len: usize,
}

/// Case-fold and split on everything that is not alphanumeric.
fn split_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_string())
        .collect()
}

impl Vocabulary {
    pub fn build<S: AsRef<str>>(corpus: &[S], max_len: usize) -> Result<Self> {
        if max_len == 0 {
            return Err(UclError::contract("vocabulary max_len must be positive"));
        }
        let mut vocab = Vocabulary {
            tokens: BTreeMap::new(),
            max_len,
        };
        for line in corpus {
            for word in split_words(line.as_ref()) {
                let next = vocab.tokens.len() + RESERVED;
                vocab.tokens.entry(word).or_insert(next);
            }
        }
        Ok(vocab)
    }

    /// Total id space including the three reserved ids.
    pub fn size(&self) -> usize {
        self.tokens.len() + RESERVED
    }

    pub fn id_of(&self, word: &str) -> usize {
        self.tokens.get(word).copied().unwrap_or(OOV)
    }

    /// Tokenize to exactly `max_len` ids: BOS, then word ids (OOV for unknown
    /// words), truncated or PAD-filled.
    pub fn tokenize(&self, text: &str) -> TokenizedText {
        let mut ids = Vec::with_capacity(self.max_len);
        ids.push(BOS);
        for word in split_words(text) {
            if ids.len() == self.max_len {
                break;
            }
            ids.push(self.id_of(&word));
        }
        let valid_len = ids.len();
        ids.resize(self.max_len, PAD);
        TokenizedText { ids, valid_len }
    }
}

// ---- file formats ----------------------------------------------------------

/// Write a catalogue as JSON lines (`index`, `name`, `description` per line).
pub fn write_classes_jsonl(path: &Path, entries: &[ClassEntry]) -> Result<()> {
    validate_catalogue(entries)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_classes_jsonl(path: &Path) -> Result<Vec<ClassEntry>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut entries = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        entries.push(serde_json::from_str::<ClassEntry>(&line)?);
    }
    validate_catalogue(&entries)?;
    Ok(entries)
}

/// Read prompt templates, one per line, skipping blank lines.
pub fn read_prompts(path: &Path) -> Result<Vec<String>> {
    let raw = std::fs::read_to_string(path)?;
    let prompts: Vec<String> = raw
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    if prompts.is_empty() {
        return Err(UclError::contract(format!(
            "prompt file {} has no templates",
            path.display()
        )));
    }
    Ok(prompts)
}

pub fn write_prompts(path: &Path, templates: &[String]) -> Result<()> {
    let mut body = templates.join("\n");
    body.push('\n');
    std::fs::write(path, body)?;
    Ok(())
}
