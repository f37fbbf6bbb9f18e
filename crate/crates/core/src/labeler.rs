//! Rule-based report labeler: lexicon lookup restricted to the findings and
//! impression sections, with trigger-word negation and uncertainty.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::classes::{class_index, LabelVector, CLASS_NAMES, NO_FINDING, NUM_CLASSES};
use crate::error::{Error, Result};

const BUNDLED_LEXICON: &str = include_str!("../data/lexicon.csv");
const BUNDLED_MAPPING: &str = include_str!("../data/concept_classes.csv");

/// Tokens searched backwards from a mention for triggers.
pub const TRIGGER_WINDOW: usize = 6;

pub const NEGATION_TRIGGERS: [&str; 6] = [
    "no",
    "without",
    "negative for",
    "free of",
    "resolved",
    "rather than",
];

pub const UNCERTAINTY_TRIGGERS: [&str; 6] = [
    "possible",
    "may",
    "question of",
    "cannot exclude",
    "concerning for",
    "versus",
];

/// Headers that end a section. Only the first two are labeled.
const SECTION_HEADERS: [&str; 14] = [
    "findings",
    "impression",
    "history",
    "clinical history",
    "indication",
    "indications",
    "comparison",
    "comparisons",
    "technique",
    "examination",
    "exam",
    "reason for examination",
    "recommendation",
    "notification",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Section {
    Findings,
    Impression,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Status {
    Positive,
    Negated,
    Uncertain,
}

fn token_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[a-z0-9]+").expect("valid regex"))
}

fn header_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let mut names: Vec<&str> = SECTION_HEADERS.to_vec();
        names.sort_by_key(|n| std::cmp::Reverse(n.len()));
        let alt = names
            .iter()
            .map(|n| n.replace(' ', r"\s+"))
            .collect::<Vec<_>>()
            .join("|");
        Regex::new(&format!(r"(?i)\b({alt})\s*:")).expect("valid regex")
    })
}

/// Lowercased tokens with their byte spans in `text`.
fn tokenize(text: &str) -> Vec<(String, usize, usize)> {
    let lower = text.to_ascii_lowercase();
    token_re()
        .find_iter(&lower)
        .map(|m| (m.as_str().to_string(), m.start(), m.end()))
        .collect()
}

fn phrase_tokens(phrase: &str) -> Vec<String> {
    tokenize(phrase).into_iter().map(|t| t.0).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LexiconEntry {
    pub concept_id: String,
    pub phrase: String,
    tokens: Vec<String>,
}

/// Concept ids and the phrases that denote them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicon {
    entries: Vec<LexiconEntry>,
}

#[derive(Deserialize)]
struct PhraseRow {
    concept_id: String,
    phrase: String,
}

#[derive(Deserialize)]
struct ClassRow {
    concept_id: String,
    class: String,
}

impl Lexicon {
    /// Reads `concept_id,phrase` rows. Empty phrases and phrases claimed by
    /// two concepts are rejected.
    pub fn from_csv<R: Read>(r: R) -> Result<Self> {
        let mut entries: Vec<LexiconEntry> = Vec::new();
        let mut owner: BTreeMap<Vec<String>, String> = BTreeMap::new();
        for (i, row) in csv::Reader::from_reader(r).deserialize().enumerate() {
            let row: PhraseRow = row?;
            let tokens = phrase_tokens(&row.phrase);
            if row.concept_id.trim().is_empty() || tokens.is_empty() {
                return Err(Error::Validation(format!(
                    "lexicon row {}: empty concept id or phrase",
                    i + 1
                )));
            }
            if let Some(prev) = owner.insert(tokens.clone(), row.concept_id.clone()) {
                if prev != row.concept_id {
                    return Err(Error::Validation(format!(
                        "phrase {:?} belongs to both {prev} and {}",
                        row.phrase, row.concept_id
                    )));
                }
                continue;
            }
            entries.push(LexiconEntry {
                concept_id: row.concept_id.trim().to_string(),
                phrase: row.phrase,
                tokens,
            });
        }
        if entries.is_empty() {
            return Err(Error::Validation("lexicon is empty".into()));
        }
        Ok(Lexicon { entries })
    }

    pub fn bundled() -> Self {
        Self::from_csv(BUNDLED_LEXICON.as_bytes()).expect("bundled lexicon is valid")
    }

    pub fn entries(&self) -> &[LexiconEntry] {
        &self.entries
    }

    pub fn concept_ids(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.concept_id.as_str()).collect()
    }
}

/// Concept id → finding class index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConceptMapping {
    map: BTreeMap<String, usize>,
}

impl ConceptMapping {
    /// Reads `concept_id,class` rows; classes are canonical finding names.
    pub fn from_csv<R: Read>(r: R) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, row) in csv::Reader::from_reader(r).deserialize().enumerate() {
            let row: ClassRow = row?;
            let class = class_index(&row.class)
                .filter(|&c| c != NO_FINDING)
                .ok_or_else(|| {
                    Error::Validation(format!(
                        "mapping row {}: {:?} is not one of the 13 findings",
                        i + 1,
                        row.class
                    ))
                })?;
            if map
                .insert(row.concept_id.trim().to_string(), class)
                .is_some()
            {
                return Err(Error::Validation(format!(
                    "concept {} mapped twice",
                    row.concept_id
                )));
            }
        }
        Ok(ConceptMapping { map })
    }

    pub fn bundled() -> Self {
        Self::from_csv(BUNDLED_MAPPING.as_bytes()).expect("bundled mapping is valid")
    }

    pub fn class_of(&self, concept: &str) -> Option<usize> {
        self.map.get(concept).copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Mention {
    pub section: Section,
    /// Byte span in the original report.
    pub start: usize,
    pub end: usize,
    pub text: String,
    pub concept_id: String,
    pub class: String,
    pub status: Status,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabelResult {
    pub labels: LabelVector,
    pub mentions: Vec<Mention>,
}

/// Sections to label, as `(section, byte offset, text)` in report order.
pub fn extract_sections(text: &str) -> Vec<(Section, usize, &str)> {
    let headers: Vec<_> = header_re().captures_iter(text).collect();
    let mut out = Vec::new();
    for (i, cap) in headers.iter().enumerate() {
        let name = cap[1].to_ascii_lowercase();
        let section = match name.as_str() {
            "findings" => Section::Findings,
            "impression" => Section::Impression,
            _ => continue,
        };
        let start = cap.get(0).expect("whole match").end();
        let end = headers
            .get(i + 1)
            .map(|c| c.get(0).expect("whole match").start())
            .unwrap_or(text.len());
        out.push((section, start, &text[start..end]));
    }
    out
}

/// Section name → trimmed text; repeated sections are joined with a space.
pub fn section_map(text: &str) -> BTreeMap<Section, String> {
    let mut m: BTreeMap<Section, String> = BTreeMap::new();
    for (s, _, body) in extract_sections(text) {
        let e = m.entry(s).or_default();
        if !e.is_empty() {
            e.push(' ');
        }
        e.push_str(body.trim());
    }
    m
}

/// Splits on `.`, `;` and newlines; returns `(byte offset, sentence)`.
fn sentences(text: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, ch) in text.char_indices() {
        if matches!(ch, '.' | ';' | '\n') {
            out.push((start, &text[start..i]));
            start = i + ch.len_utf8();
        }
    }
    out.push((start, &text[start..]));
    out.retain(|(_, s)| !s.trim().is_empty());
    out
}

/// Status of a mention starting at token `at` among `tokens` of one sentence.
pub fn detect_status(tokens: &[String], at: usize) -> Status {
    let lo = at.saturating_sub(TRIGGER_WINDOW);
    let hit = |triggers: &[&str]| {
        triggers.iter().any(|t| {
            let tt = phrase_tokens(t);
            (lo..at).any(|i| i + tt.len() <= at && tokens[i..i + tt.len()] == tt[..])
        })
    };
    if hit(&NEGATION_TRIGGERS) {
        Status::Negated
    } else if hit(&UNCERTAINTY_TRIGGERS) {
        Status::Uncertain
    } else {
        Status::Positive
    }
}

#[derive(Clone, Debug)]
pub struct Labeler {
    lexicon: Lexicon,
    mapping: ConceptMapping,
    /// Entry indices, longest phrase first.
    order: Vec<usize>,
}

impl Labeler {
    /// Every lexicon concept must be mapped to a class.
    pub fn new(lexicon: Lexicon, mapping: ConceptMapping) -> Result<Self> {
        for id in lexicon.concept_ids() {
            if mapping.class_of(id).is_none() {
                return Err(Error::Validation(format!(
                    "concept {id} has no class mapping"
                )));
            }
        }
        let mut order: Vec<usize> = (0..lexicon.entries.len()).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(lexicon.entries[i].tokens.len()));
        Ok(Labeler {
            lexicon,
            mapping,
            order,
        })
    }

    pub fn bundled() -> Self {
        Self::new(Lexicon::bundled(), ConceptMapping::bundled()).expect("bundled files agree")
    }

    pub fn label(&self, report: &str) -> LabelResult {
        let mut mentions = Vec::new();
        for (section, sec_off, body) in extract_sections(report) {
            for (sent_off, sentence) in sentences(body) {
                let base = sec_off + sent_off;
                let toks = tokenize(sentence);
                let words: Vec<String> = toks.iter().map(|t| t.0.clone()).collect();
                let mut i = 0;
                while i < words.len() {
                    let hit = self.order.iter().find(|&&e| {
                        let t = &self.lexicon.entries[e].tokens;
                        i + t.len() <= words.len() && words[i..i + t.len()] == t[..]
                    });
                    let Some(&e) = hit else {
                        i += 1;
                        continue;
                    };
                    let entry = &self.lexicon.entries[e];
                    let n = entry.tokens.len();
                    let (start, end) = (base + toks[i].1, base + toks[i + n - 1].2);
                    let class = self.mapping.class_of(&entry.concept_id).expect("validated");
                    mentions.push(Mention {
                        section,
                        start,
                        end,
                        text: report[start..end].to_string(),
                        concept_id: entry.concept_id.clone(),
                        class: CLASS_NAMES[class].to_string(),
                        status: detect_status(&words, i),
                    });
                    i += n;
                }
            }
        }
        let positives: BTreeSet<usize> = mentions
            .iter()
            .filter(|m| m.status == Status::Positive)
            .map(|m| class_index(&m.class).expect("canonical"))
            .collect();
        LabelResult {
            labels: LabelVector::from_findings(positives),
            mentions,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabelCount {
    pub class: String,
    pub total: usize,
    /// Percent of all positive labels, No Finding included.
    pub percent: f64,
}

/// Per-class positive counts over a corpus, in canonical order.
pub fn label_prevalence(labels: &[LabelVector]) -> Vec<LabelCount> {
    let mut counts = [0usize; NUM_CLASSES];
    for l in labels {
        for c in l.positives() {
            counts[c] += 1;
        }
    }
    let all: usize = counts.iter().sum();
    CLASS_NAMES
        .iter()
        .zip(counts)
        .map(|(name, total)| LabelCount {
            class: name.to_string(),
            total,
            percent: if all == 0 {
                0.0
            } else {
                100.0 * total as f64 / all as f64
            },
        })
        .collect()
}

/// Writes `class,total,percent` rows.
pub fn write_prevalence_csv<W: Write>(rows: &[LabelCount], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["class", "total", "percent"])?;
    for r in rows {
        w.write_record([
            r.class.clone(),
            r.total.to_string(),
            format!("{:.2}", r.percent),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels_of(text: &str) -> Vec<&'static str> {
        Labeler::bundled()
            .label(text)
            .labels
            .positives()
            .map(|c| CLASS_NAMES[c])
            .collect()
    }

    #[test]
    fn bundled_lexicon_shape() {
        let lex = Lexicon::bundled();
        assert_eq!(lex.concept_ids().len(), 46);
        assert_eq!(ConceptMapping::bundled().len(), 46);
        assert!(lex.concept_ids().contains("C0546333"));
        assert!(lex.concept_ids().contains("C0546334"));
    }

    #[test]
    fn sections_delimited() {
        let m = section_map("FINDINGS: a. IMPRESSION: b.");
        assert_eq!(m[&Section::Findings], "a.");
        assert_eq!(m[&Section::Impression], "b.");
        assert!(section_map("HISTORY: cough.").is_empty());
        let m = section_map("history: x\nimpression : clear");
        assert_eq!(m.len(), 1);
        assert_eq!(m[&Section::Impression], "clear");
    }

    #[test]
    fn statuses() {
        let l = Labeler::bundled();
        let s = |t: &str| l.label(&format!("FINDINGS: {t}")).mentions[0].status;
        assert_eq!(s("No pneumothorax."), Status::Negated);
        assert_eq!(
            s("Possible pneumonia in the right base."),
            Status::Uncertain
        );
        assert_eq!(s("Large right pleural effusion."), Status::Positive);
        // Both trigger kinds in range: negation wins.
        assert_eq!(s("No possible pneumonia."), Status::Negated);
        // Seven tokens away is out of range.
        assert_eq!(
            s("No change since one two three four five six pneumonia."),
            Status::Positive
        );
    }

    #[test]
    fn labels() {
        assert_eq!(
            labels_of("IMPRESSION: Small right pneumothorax."),
            ["Pneumothorax"]
        );
        assert_eq!(
            labels_of("FINDINGS: Left pleural effusion. No pneumothorax."),
            ["Effusion"]
        );
        assert_eq!(labels_of(""), ["No Finding"]);
        assert_eq!(labels_of("HISTORY: pneumonia."), ["No Finding"]);
    }

    #[test]
    fn mention_spans_point_into_report() {
        let text = "FINDINGS: Right-sided pneumothorax.";
        let r = Labeler::bundled().label(text);
        assert_eq!(r.mentions.len(), 1);
        assert_eq!(r.mentions[0].text, "Right-sided pneumothorax");
        assert_eq!(r.mentions[0].concept_id, "C0546333");
    }

    #[test]
    fn lexicon_errors() {
        assert!(Lexicon::from_csv("concept_id,phrase\nA,\n".as_bytes()).is_err());
        assert!(Lexicon::from_csv("concept_id,phrase\nA,mass\nB,mass\n".as_bytes()).is_err());
        let lex = Lexicon::from_csv("concept_id,phrase\nA,mass\n".as_bytes()).unwrap();
        let map = ConceptMapping::from_csv("concept_id,class\nB,Mass\n".as_bytes()).unwrap();
        assert!(matches!(Labeler::new(lex, map), Err(Error::Validation(_))));
        assert!(ConceptMapping::from_csv("concept_id,class\nA,No Finding\n".as_bytes()).is_err());
    }

    #[test]
    fn prevalence_percentages() {
        let rows = label_prevalence(&[
            LabelVector::from_findings([1, 4]),
            LabelVector::from_findings([]),
            LabelVector::from_findings([4]),
        ]);
        assert_eq!(rows[4].total, 2);
        assert_eq!(rows[4].percent, 50.0);
        assert_eq!(rows[NO_FINDING].total, 1);
    }
}
