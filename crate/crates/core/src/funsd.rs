//! FUNSD-format annotations: parsing, validation, writing and corpus statistics.
//!
//! A FUNSD file is one JSON document with a top-level `"form"` array. Each
//! element carries `id`, `label`, `box` `[x1, y1, x2, y2]`, `text`, `words`
//! (`{"text", "box"}` objects) and `linking` (`[id, id]` pairs). The writer
//! also emits an optional `"page"` object with the page extent, which the
//! reader honours when present.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The four entity classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Header,
    Question,
    Answer,
    Other,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::Header, Label::Question, Label::Answer, Label::Other];

    /// Position in [`Label::ALL`]; also the keypoint class index.
    pub fn index(self) -> usize {
        self as usize
    }

    /// Segmentation class, with 0 reserved for background.
    pub fn seg_class(self) -> usize {
        self.index() + 1
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Header => "header",
            Label::Question => "question",
            Label::Answer => "answer",
            Label::Other => "other",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "header" => Ok(Label::Header),
            "question" => Ok(Label::Question),
            "answer" => Ok(Label::Answer),
            "other" => Ok(Label::Other),
            other => Err(Error::Validation(format!("unknown entity label `{other}`"))),
        }
    }
}

/// Integer pixel rectangle; `(x1, y1)` upper-left, `(x2, y2)` lower-right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct BoxPx {
    pub x1: i32,
    pub y1: i32,
    pub x2: i32,
    pub y2: i32,
}

impl BoxPx {
    /// Builds a box, swapping reversed coordinates.
    pub fn new(x1: i32, y1: i32, x2: i32, y2: i32) -> Self {
        BoxPx {
            x1: x1.min(x2),
            y1: y1.min(y2),
            x2: x1.max(x2),
            y2: y1.max(y2),
        }
    }

    pub fn width(&self) -> i32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> i32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> i64 {
        self.width() as i64 * self.height() as i64
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x1 as f64 + self.x2 as f64) / 2.0,
            (self.y1 as f64 + self.y2 as f64) / 2.0,
        )
    }

    /// Keypoint anchor: the bottom-left corner.
    pub fn bottom_left(&self) -> (f64, f64) {
        (self.x1 as f64, self.y2 as f64)
    }

    pub fn union(&self, o: &BoxPx) -> BoxPx {
        BoxPx {
            x1: self.x1.min(o.x1),
            y1: self.y1.min(o.y1),
            x2: self.x2.max(o.x2),
            y2: self.y2.max(o.y2),
        }
    }

    pub fn contains(&self, o: &BoxPx) -> bool {
        self.x1 <= o.x1 && self.y1 <= o.y1 && self.x2 >= o.x2 && self.y2 >= o.y2
    }

    pub fn clamp(&self, width: i32, height: i32) -> BoxPx {
        BoxPx {
            x1: self.x1.clamp(0, width),
            y1: self.y1.clamp(0, height),
            x2: self.x2.clamp(0, width),
            y2: self.y2.clamp(0, height),
        }
    }

    pub fn translate(&self, dx: i32, dy: i32) -> BoxPx {
        BoxPx {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    pub fn as_array(&self) -> [i32; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordBox {
    pub text: String,
    pub bbox: BoxPx,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entity {
    pub id: u32,
    pub label: Label,
    pub bbox: BoxPx,
    pub text: String,
    pub words: Vec<WordBox>,
    /// Directed (question, answer) links this entity takes part in.
    pub links: Vec<(u32, u32)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormDocument {
    pub page_width: u32,
    pub page_height: u32,
    pub entities: Vec<Entity>,
    /// Directed (question_id, answer_id) pairs, deduplicated, in first-seen order.
    pub links: Vec<(u32, u32)>,
}

impl FormDocument {
    pub fn entity(&self, id: u32) -> Option<&Entity> {
        self.entities.iter().find(|e| e.id == id)
    }

    pub fn n_words(&self) -> usize {
        self.entities.iter().map(|e| e.words.len()).sum()
    }

    pub fn words(&self) -> impl Iterator<Item = &WordBox> {
        self.entities.iter().flat_map(|e| e.words.iter())
    }

    /// Rebuild every entity's `links` list from the document-level list.
    pub fn sync_entity_links(&mut self) {
        for e in &mut self.entities {
            e.links = self
                .links
                .iter()
                .copied()
                .filter(|&(q, a)| q == e.id || a == e.id)
                .collect();
        }
    }

    /// Check the document-level invariants: unique ids, links between
    /// existing question and answer entities, words inside entity boxes.
    pub fn validate(&self) -> Result<()> {
        let mut labels = HashMap::new();
        for e in &self.entities {
            if labels.insert(e.id, e.label).is_some() {
                return Err(Error::Validation(format!("duplicate entity id {}", e.id)));
            }
            for w in &e.words {
                if !e.bbox.contains(&w.bbox) {
                    return Err(Error::Validation(format!(
                        "entity {} box does not contain word `{}`",
                        e.id, w.text
                    )));
                }
            }
        }
        let bad: Vec<_> = self
            .links
            .iter()
            .filter(|(q, a)| {
                labels.get(q) != Some(&Label::Question) || labels.get(a) != Some(&Label::Answer)
            })
            .collect();
        if !bad.is_empty() {
            return Err(Error::Validation(format!("links not question->answer: {bad:?}")));
        }
        Ok(())
    }
}

/// What [`parse_form_with_report`] changed or rejected while normalizing.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    /// Raw `linking` entries seen, counting both endpoints' copies.
    pub raw_link_entries: usize,
    /// Pairs with no question->answer orientation, e.g. header->question.
    pub rejected_links: Vec<(u32, u32)>,
    pub dropped_words: usize,
    pub clamped_words: usize,
    /// Entity boxes grown to cover their words.
    pub expanded_entities: usize,
}

// ---------------------------------------------------------------- raw schema

#[derive(Debug, Serialize, Deserialize)]
struct RawDoc {
    form: Vec<RawEntity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    page: Option<RawPage>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawPage {
    width: u32,
    height: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawEntity {
    id: u32,
    label: String,
    #[serde(rename = "box")]
    bbox: [i32; 4],
    #[serde(default)]
    text: String,
    #[serde(default)]
    words: Vec<RawWord>,
    #[serde(default)]
    linking: Vec<Vec<u32>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawWord {
    text: String,
    #[serde(rename = "box")]
    bbox: [i32; 4],
}

fn byte_offset(src: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut l = 1;
    for (i, &b) in src.iter().enumerate() {
        if l == line {
            return (i + column.saturating_sub(1)).min(src.len());
        }
        if b == b'\n' {
            l += 1;
        }
    }
    src.len()
}

/// Parse one annotation document. Dangling link ids are an error; links that
/// are not question/answer pairs are dropped silently (see
/// [`parse_form_with_report`] to inspect them).
pub fn parse_form(raw: &[u8]) -> Result<FormDocument> {
    parse_form_with_report(raw).map(|(f, _)| f)
}

pub fn parse_form_with_report(raw: &[u8]) -> Result<(FormDocument, ValidationReport)> {
    let doc: RawDoc = serde_json::from_slice(raw).map_err(|e| Error::Parse {
        offset: byte_offset(raw, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let mut report = ValidationReport::default();

    let (page_width, page_height) = match &doc.page {
        Some(p) => (p.width, p.height),
        None => {
            let mut w = 0;
            let mut h = 0;
            for e in &doc.form {
                let b = BoxPx::new(e.bbox[0], e.bbox[1], e.bbox[2], e.bbox[3]);
                w = w.max(b.x2);
                h = h.max(b.y2);
                for wd in &e.words {
                    let b = BoxPx::new(wd.bbox[0], wd.bbox[1], wd.bbox[2], wd.bbox[3]);
                    w = w.max(b.x2);
                    h = h.max(b.y2);
                }
            }
            (w.max(0) as u32, h.max(0) as u32)
        }
    };
    let (pw, ph) = (page_width as i32, page_height as i32);

    let mut entities = Vec::with_capacity(doc.form.len());
    let mut seen_ids = HashSet::new();
    for re in &doc.form {
        if !seen_ids.insert(re.id) {
            return Err(Error::Validation(format!("duplicate entity id {}", re.id)));
        }
        let label: Label = re.label.parse()?;
        let mut words = Vec::with_capacity(re.words.len());
        for rw in &re.words {
            if rw.text.trim().is_empty() {
                report.dropped_words += 1;
                continue;
            }
            let b = BoxPx::new(rw.bbox[0], rw.bbox[1], rw.bbox[2], rw.bbox[3]);
            let c = b.clamp(pw, ph);
            if c != b {
                report.clamped_words += 1;
            }
            if c.area() == 0 {
                warn!("entity {}: dropping zero-area word `{}`", re.id, rw.text);
                report.dropped_words += 1;
                continue;
            }
            words.push(WordBox {
                text: rw.text.clone(),
                bbox: c,
            });
        }
        let mut bbox = BoxPx::new(re.bbox[0], re.bbox[1], re.bbox[2], re.bbox[3]).clamp(pw, ph);
        let covered = words.iter().fold(bbox, |acc, w| acc.union(&w.bbox));
        if covered != bbox {
            report.expanded_entities += 1;
            bbox = covered;
        }
        entities.push(Entity {
            id: re.id,
            label,
            bbox,
            text: re.text.clone(),
            words,
            links: Vec::new(),
        });
    }

    let labels: HashMap<u32, Label> = entities.iter().map(|e| (e.id, e.label)).collect();
    let mut dangling = Vec::new();
    let mut links = Vec::new();
    let mut seen = HashSet::new();
    let mut rejected = HashSet::new();
    for re in &doc.form {
        for pair in &re.linking {
            report.raw_link_entries += 1;
            let &[a, b] = pair.as_slice() else {
                return Err(Error::Validation(format!(
                    "entity {}: linking entry {pair:?} is not a pair",
                    re.id
                )));
            };
            let (Some(&la), Some(&lb)) = (labels.get(&a), labels.get(&b)) else {
                dangling.push((a, b));
                continue;
            };
            let directed = match (la, lb) {
                (Label::Question, Label::Answer) => Some((a, b)),
                (Label::Answer, Label::Question) => Some((b, a)),
                _ => None,
            };
            match directed {
                Some(p) => {
                    if seen.insert(p) {
                        links.push(p);
                    }
                }
                None => {
                    if rejected.insert((a, b)) {
                        report.rejected_links.push((a, b));
                    }
                }
            }
        }
    }
    if !dangling.is_empty() {
        dangling.sort_unstable();
        dangling.dedup();
        return Err(Error::Validation(format!(
            "links reference unknown entity ids: {dangling:?}"
        )));
    }

    let mut form = FormDocument {
        page_width,
        page_height,
        entities,
        links,
    };
    form.sync_entity_links();
    Ok((form, report))
}

fn to_raw(form: &FormDocument) -> RawDoc {
    RawDoc {
        form: form
            .entities
            .iter()
            .map(|e| RawEntity {
                id: e.id,
                label: e.label.as_str().to_string(),
                bbox: e.bbox.as_array(),
                text: e.text.clone(),
                words: e
                    .words
                    .iter()
                    .map(|w| RawWord {
                        text: w.text.clone(),
                        bbox: w.bbox.as_array(),
                    })
                    .collect(),
                linking: e.links.iter().map(|&(q, a)| vec![q, a]).collect(),
            })
            .collect(),
        page: Some(RawPage {
            width: form.page_width,
            height: form.page_height,
        }),
    }
}

/// Serialize to the FUNSD schema as a JSON value (extended by callers that
/// need extra fields).
pub fn form_to_json(form: &FormDocument) -> serde_json::Value {
    serde_json::to_value(to_raw(form)).expect("schema types always serialize")
}

pub fn write_form(form: &FormDocument) -> Vec<u8> {
    serde_json::to_vec_pretty(&to_raw(form)).expect("schema types always serialize")
}

/// JSON files of a directory in file-name order.
pub fn annotation_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    Ok(files)
}

pub fn read_form_file(path: &Path) -> Result<(FormDocument, ValidationReport)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_form_with_report(&bytes).map_err(|e| match e {
        Error::Parse { offset, message } => Error::Parse {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Every annotation file of a split directory, with file stems.
pub fn load_split(dir: &Path) -> Result<Vec<(String, FormDocument, ValidationReport)>> {
    annotation_files(dir)?
        .into_iter()
        .map(|p| {
            let stem = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            read_form_file(&p).map(|(f, r)| (stem, f, r))
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusStats {
    pub n_forms: usize,
    pub n_words: usize,
    pub n_entities: usize,
    pub n_relations: usize,
    pub per_class: BTreeMap<Label, usize>,
}

pub fn dataset_stats(forms: &[FormDocument]) -> CorpusStats {
    let mut s = CorpusStats {
        n_forms: forms.len(),
        per_class: Label::ALL.iter().map(|&l| (l, 0)).collect(),
        ..Default::default()
    };
    for f in forms {
        s.n_words += f.n_words();
        s.n_entities += f.entities.len();
        s.n_relations += f.links.len();
        for e in &f.entities {
            *s.per_class.entry(e.label).or_default() += 1;
        }
    }
    s
}

impl CorpusStats {
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<8}{:>10}{:>10}{:>10}\n",
            "Forms", "Words", "Entities", "Relations"
        ));
        out.push_str(&format!(
            "{:<8}{:>10}{:>10}{:>10}\n",
            self.n_forms, self.n_words, self.n_entities, self.n_relations
        ));
        for (l, n) in &self.per_class {
            out.push_str(&format!("  {:<10}{n:>8}\n", l.as_str()));
        }
        out
    }

    pub fn key_values(&self) -> String {
        let mut out = format!(
            "forms={}\nwords={}\nentities={}\nrelations={}\n",
            self.n_forms, self.n_words, self.n_entities, self.n_relations
        );
        for (l, n) in &self.per_class {
            out.push_str(&format!("entities.{l}={n}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const QA: &str = r#"{"form": [
        {"id": 0, "label": "question", "box": [10, 10, 60, 22], "text": "Name:",
         "words": [{"text": "Name:", "box": [10, 10, 60, 22]}], "linking": [[0, 1]]},
        {"id": 1, "label": "answer", "box": [70, 10, 120, 22], "text": "Bob",
         "words": [{"text": "Bob", "box": [70, 10, 120, 22]}], "linking": [[0, 1]]}
    ]}"#;

    #[test]
    fn minimal_question_answer() {
        let f = parse_form(QA.as_bytes()).unwrap();
        assert_eq!(f.entities.len(), 2);
        assert_eq!(f.links, vec![(0, 1)]);
        assert_eq!(f.entities[0].links, vec![(0, 1)]);
        f.validate().unwrap();
    }

    #[test]
    fn empty_form() {
        let f = parse_form(br#"{"form": []}"#).unwrap();
        assert!(f.entities.is_empty());
        assert!(f.links.is_empty());
        assert_eq!(dataset_stats(&[f]).n_entities, 0);
    }

    #[test]
    fn reversed_links_are_directed_and_deduplicated() {
        let raw = QA.replace("\"linking\": [[0, 1]]}\n    ]", "\"linking\": [[1, 0]]}\n    ]");
        let f = parse_form(raw.as_bytes()).unwrap();
        assert_eq!(f.links, vec![(0, 1)]);
    }

    #[test]
    fn non_question_answer_links_are_reported() {
        let raw = r#"{"form": [
            {"id": 3, "label": "header", "box": [0, 0, 10, 10], "text": "H", "words": [], "linking": [[3, 4]]},
            {"id": 4, "label": "question", "box": [0, 20, 10, 30], "text": "Q", "words": [], "linking": [[3, 4]]}
        ]}"#;
        let (f, report) = parse_form_with_report(raw.as_bytes()).unwrap();
        assert!(f.links.is_empty());
        assert_eq!(report.rejected_links, vec![(3, 4)]);
        assert_eq!(report.raw_link_entries, 2);
    }

    #[test]
    fn dangling_link_is_a_validation_error() {
        let raw = QA.replace("[[0, 1]]}\n    ]", "[[0, 9]]}\n    ]");
        match parse_form(raw.as_bytes()) {
            Err(Error::Validation(m)) => assert!(m.contains("(0, 9)"), "{m}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_json_reports_offset() {
        let raw = b"{\"form\": [\n  {\"id\": }\n]}";
        match parse_form(raw) {
            Err(Error::Parse { offset, .. }) => assert!((10..=20).contains(&offset), "{offset}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn words_are_clamped_and_dropped() {
        let raw = r#"{"page": {"width": 100, "height": 50}, "form": [
            {"id": 0, "label": "other", "box": [0, 0, 120, 20], "text": "a b c",
             "words": [{"text": "a", "box": [90, 0, 130, 20]},
                       {"text": "b", "box": [110, 0, 130, 20]},
                       {"text": "  ", "box": [0, 0, 5, 5]}], "linking": []}
        ]}"#;
        let (f, report) = parse_form_with_report(raw.as_bytes()).unwrap();
        let e = &f.entities[0];
        assert_eq!(e.words.len(), 1);
        assert_eq!(e.words[0].bbox, BoxPx::new(90, 0, 100, 20));
        assert_eq!(e.bbox, BoxPx::new(0, 0, 100, 20));
        assert_eq!(report.dropped_words, 2);
        f.validate().unwrap();
    }

    #[test]
    fn write_then_parse_is_identity() {
        let f = parse_form(QA.as_bytes()).unwrap();
        let back = parse_form(&write_form(&f)).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn stats_are_order_invariant() {
        let a = parse_form(QA.as_bytes()).unwrap();
        let b = parse_form(br#"{"form": []}"#).unwrap();
        let s1 = dataset_stats(&[a.clone(), b.clone()]);
        let s2 = dataset_stats(&[b, a]);
        assert_eq!(s1, s2);
        assert_eq!((s1.n_forms, s1.n_words, s1.n_entities, s1.n_relations), (2, 2, 2, 1));
        assert_eq!(s1.per_class.values().sum::<usize>(), s1.n_entities);
        assert_eq!(dataset_stats(&[]), CorpusStats {
            per_class: Label::ALL.iter().map(|&l| (l, 0)).collect(),
            ..Default::default()
        });
    }
}
