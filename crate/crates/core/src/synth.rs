//! Deterministic synthetic forms with exact ground truth.
//!
//! Everything is laid out on a lattice of 4-pixel cells: one cell per
//! character, text 3 cells tall, one text line every 8 cells. Rasterizing a
//! generated form with the default median height of 3 cells therefore maps
//! every box exactly onto grid cells.
//!
//! Layout modes:
//! * `easy`: each answer's nearest question (center distance) is its own key.
//! * `hard`: long questions plus unlinked decoy questions placed right under
//!   answers, so the nearest question is sometimes wrong.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baseline::{heuristic_link, labeled_boxes, DistanceMode};
use crate::error::{Error, Result};
use crate::funsd::{BoxPx, Entity, FormDocument, Label, WordBox};

pub const CELL_PX: i32 = 4;
pub const TEXT_CELLS: i32 = 3;
pub const LINE_PITCH: i32 = 8;
const TOP_CELLS: i32 = 1;
const MARGIN: i32 = 2;
const MIN_GAP: i32 = 3;
const MIN_KEYPOINT_SEP: i32 = 8;
const MAX_ATTEMPTS: u64 = 256;
const DECOY_RATE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayoutMode {
    #[default]
    Easy,
    Hard,
}

impl FromStr for LayoutMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(LayoutMode::Easy),
            "hard" => Ok(LayoutMode::Hard),
            other => Err(Error::Config(format!("unknown layout mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_forms: usize,
    pub page_width: u32,
    pub page_height: u32,
    /// Question/answer items per column.
    pub rows: usize,
    pub columns: usize,
    /// Probability that a question gets 2 or 3 answers.
    pub fan_out: f64,
    /// Probability of an unlinked `other` line after an item.
    pub distractor: f64,
    pub mode: LayoutMode,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_forms: 1,
            page_width: 512,
            page_height: 512,
            rows: 5,
            columns: 2,
            fan_out: 0.2,
            distractor: 0.2,
            mode: LayoutMode::Easy,
        }
    }
}

impl SynthSpec {
    fn grid_cells(&self) -> (i32, i32) {
        (
            self.page_width as i32 / CELL_PX,
            self.page_height as i32 / CELL_PX,
        )
    }

    fn column_width(&self) -> i32 {
        (self.grid_cells().0 - 2 * MARGIN) / self.columns.max(1) as i32
    }

    /// Text lines that fit on the page, header line included.
    fn n_lines(&self) -> i32 {
        let h = self.grid_cells().1;
        if h < TOP_CELLS + TEXT_CELLS {
            0
        } else {
            (h - TOP_CELLS - TEXT_CELLS) / LINE_PITCH + 1
        }
    }

    fn question_range(&self) -> (usize, usize) {
        let usable = (self.column_width() - MIN_GAP).max(0) as usize;
        let lo = match self.mode {
            LayoutMode::Easy => 5,
            LayoutMode::Hard => 10,
        };
        (lo, 16.min(usable.saturating_sub(MIN_GAP as usize + 5)).max(lo))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_forms == 0 || self.rows == 0 || self.columns == 0 {
            return Err(Error::Config("n_forms, rows and columns must be positive".into()));
        }
        for (name, p) in [("fan_out", self.fan_out), ("distractor", self.distractor)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if !self.page_width.is_multiple_of(CELL_PX as u32) || !self.page_height.is_multiple_of(CELL_PX as u32) {
            return Err(Error::Config(format!(
                "page size must be a multiple of {CELL_PX} pixels"
            )));
        }
        if self.n_lines() < 2 {
            return Err(Error::Config("page too short for a header and one row".into()));
        }
        let (qlo, _) = self.question_range();
        if (self.column_width() - MIN_GAP) < (qlo as i32 + MIN_GAP + 5) {
            return Err(Error::Config("page too narrow for the requested columns".into()));
        }
        Ok(())
    }
}

const HEADER_WORDS: &[&str] = &[
    "APPLICATION", "REQUEST", "REPORT", "FORM", "RECORD", "ORDER", "CLAIM", "SUMMARY",
    "REGISTRATION", "ACCOUNT", "PURCHASE", "SHIPPING", "PERSONNEL", "PROJECT", "BUDGET",
];

const QUESTION_WORDS: &[&str] = &[
    "NAME", "DATE", "PHONE", "FAX", "ADDRESS", "CITY", "STATE", "ZIP", "TITLE", "DEPT",
    "COMPANY", "BRAND", "AMOUNT", "TOTAL", "COST", "CODE", "NUMBER", "REF", "SIGNED",
    "APPROVED", "RECEIVED", "FROM", "TO", "SUBJECT", "PAGES", "ACCOUNT", "REGION",
    "PRODUCT", "QUANTITY", "VENDOR", "CONTACT", "EMAIL", "BIRTH", "START", "END",
];

const ANSWER_WORDS: &[&str] = &[
    "SMITH", "JONES", "BROWN", "TAYLOR", "WILSON", "MOORE", "CLARK", "LEWIS", "WALKER",
    "ALLEN", "YOUNG", "KING", "WRIGHT", "HILL", "GREEN", "ADAMS", "BAKER", "NELSON",
    "BOSTON", "DENVER", "AUSTIN", "DALLAS", "RALEIGH", "RICHMOND", "ATLANTA", "SALES",
    "LEGAL", "FINANCE", "RESEARCH", "YES", "NO", "PENDING", "APPROVED", "DRAFT", "FINAL",
];

const OTHER_WORDS: &[&str] = &[
    "PLEASE", "RETURN", "THIS", "COPY", "WITHIN", "DAYS", "ALL", "FIELDS", "ARE",
    "REQUIRED", "SEE", "ATTACHED", "NOTES", "FOR", "OFFICE", "USE", "ONLY", "CONFIDENTIAL",
];

fn number_token(rng: &mut ChaCha8Rng) -> String {
    match rng.gen_range(0..4) {
        0 => format!(
            "{:02}/{:02}/{}",
            rng.gen_range(1..=12),
            rng.gen_range(1..=28),
            rng.gen_range(1980..=1999)
        ),
        1 => format!("${}.{:02}", rng.gen_range(10..10_000), rng.gen_range(0..100)),
        2 => format!(
            "{}-{:04}",
            rng.gen_range(100..1000),
            rng.gen_range(0..10_000)
        ),
        _ => rng.gen_range(1000..1_000_000).to_string(),
    }
}

/// Space-joined phrase with length in `[lo, hi]` (suffix included).
fn phrase(
    rng: &mut ChaCha8Rng,
    pool: &[&str],
    numbers: bool,
    max_words: usize,
    lo: usize,
    hi: usize,
    suffix: &str,
) -> String {
    for _ in 0..64 {
        let n = rng.gen_range(1..=max_words);
        let mut words: Vec<String> = Vec::with_capacity(n);
        for _ in 0..n {
            if numbers && rng.gen_bool(0.3) {
                words.push(number_token(rng));
            } else {
                words.push(pool.choose(rng).unwrap().to_string());
            }
        }
        let text = words.join(" ") + suffix;
        if (lo..=hi).contains(&text.len()) {
            return text;
        }
    }
    // Always reachable: pad a single pool word with filler characters.
    let mut text: String = pool[0].chars().take(hi.saturating_sub(suffix.len())).collect();
    while text.len() + suffix.len() < lo {
        text.push('X');
    }
    text + suffix
}

struct Builder {
    entities: Vec<Entity>,
    links: Vec<(u32, u32)>,
}

impl Builder {
    /// Adds an entity with its top-left at grid cell `(x, line)`.
    fn add(&mut self, label: Label, text: &str, x: i32, line: i32) -> u32 {
        let top = (TOP_CELLS + line * LINE_PITCH) * CELL_PX;
        let bottom = top + TEXT_CELLS * CELL_PX;
        let mut words = Vec::new();
        let mut cx = x;
        for w in text.split(' ') {
            let n = w.chars().count() as i32;
            words.push(WordBox {
                text: w.to_string(),
                bbox: BoxPx::new(cx * CELL_PX, top, (cx + n) * CELL_PX, bottom),
            });
            cx += n + 1;
        }
        let bbox = BoxPx::new(x * CELL_PX, top, (cx - 1) * CELL_PX, bottom);
        let id = self.entities.len() as u32;
        self.entities.push(Entity {
            id,
            label,
            bbox,
            text: text.to_string(),
            words,
            links: vec![],
        });
        id
    }
}

pub(crate) fn form_seed(seed: u64, index: u64, attempt: u64) -> u64 {
    // splitmix64 over the three inputs
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ attempt.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn layout(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> (FormDocument, usize) {
    let (grid_w, _) = spec.grid_cells();
    let n_lines = spec.n_lines();
    let cw = spec.column_width();
    let usable = cw - MIN_GAP;
    let (qlo, qhi) = spec.question_range();
    let mut b = Builder {
        entities: vec![],
        links: vec![],
    };

    let header = phrase(rng, HEADER_WORDS, false, 3, 8, (grid_w - 2 * MARGIN).min(40) as usize, "");
    b.add(Label::Header, &header, (grid_w - header.len() as i32) / 2, 0);

    let mut decoys = 0;
    let mut dropped = 0;
    for col in 0..spec.columns as i32 {
        let x0 = MARGIN + col * cw;
        let mut line = 1;
        for row in 0..spec.rows {
            let k: i32 = if rng.gen::<f64>() < spec.fan_out {
                rng.gen_range(2..=3)
            } else {
                1
            };
            let distract = rng.gen::<f64>() < spec.distractor;
            let decoy = spec.mode == LayoutMode::Hard && rng.gen::<f64>() < DECOY_RATE;
            let spacers = if spec.mode == LayoutMode::Easy { k - 1 } else { 0 };
            let need = k + spacers + decoy as i32 + distract as i32;
            if line + need > n_lines {
                dropped += spec.rows - row;
                break;
            }

            let q = phrase(rng, QUESTION_WORDS, false, 3, qlo, qhi, ":");
            let qid = b.add(Label::Question, &q, x0, line);
            let ax = x0 + q.len() as i32 + rng.gen_range(MIN_GAP..=MIN_GAP + 2);
            let amax = (x0 + usable - ax).min(20) as usize;
            let mut last = (ax, 0usize);
            for j in 0..k {
                let a = phrase(rng, ANSWER_WORDS, true, 2, 5, amax.max(5), "");
                let aid = b.add(Label::Answer, &a, ax, line + j);
                b.links.push((qid, aid));
                last = (ax, a.len());
            }
            line += k;
            if decoy {
                let d = phrase(rng, QUESTION_WORDS, false, 2, 5, 12, ":");
                let centered = last.0 + (last.1 as i32 - d.len() as i32) / 2;
                let dx = centered.clamp(x0, x0 + usable - d.len() as i32);
                b.add(Label::Question, &d, dx, line);
                decoys += 1;
                line += 1;
            }
            line += spacers;
            if distract {
                let o = phrase(rng, OTHER_WORDS, false, 4, 5, (usable - 1) as usize, "");
                b.add(Label::Other, &o, x0, line);
                line += 1;
            }
        }
    }
    if dropped > 0 {
        log::warn!("layout overflow: {dropped} row(s) did not fit and were left out");
    }
    let mut form = FormDocument {
        page_width: spec.page_width,
        page_height: spec.page_height,
        entities: b.entities,
        links: b.links,
    };
    form.sync_entity_links();
    (form, decoys)
}

fn keypoints_separated(form: &FormDocument) -> bool {
    let kps: Vec<(i32, i32)> = form.entities.iter().map(|e| (e.bbox.x1, e.bbox.y2)).collect();
    let min = (MIN_KEYPOINT_SEP * CELL_PX) as i64;
    kps.iter().enumerate().all(|(i, a)| {
        kps[i + 1..].iter().all(|b| {
            let (dx, dy) = ((a.0 - b.0) as i64, (a.1 - b.1) as i64);
            dx * dx + dy * dy >= min * min
        })
    })
}

fn heuristic_exact(form: &FormDocument) -> bool {
    let mut got = heuristic_link(&labeled_boxes(form), DistanceMode::Center);
    let mut want = form.links.clone();
    got.sort_unstable();
    want.sort_unstable();
    got == want
}

/// Form `index` of the corpus for `seed`; the same pair always yields the same form.
pub fn generate_one(seed: u64, index: usize, spec: &SynthSpec) -> Result<FormDocument> {
    spec.validate()?;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(form_seed(seed, index as u64, attempt));
        let (form, decoys) = layout(spec, &mut rng);
        let mode_ok = match spec.mode {
            LayoutMode::Easy => heuristic_exact(&form),
            LayoutMode::Hard => decoys > 0 && !heuristic_exact(&form),
        };
        if mode_ok && keypoints_separated(&form) && form.validate().is_ok() {
            return Ok(form);
        }
    }
    Err(Error::Degenerate {
        message: format!("no valid {:?} layout found for form {index}", spec.mode),
    })
}

pub fn generate(seed: u64, spec: &SynthSpec) -> Result<Vec<FormDocument>> {
    (0..spec.n_forms).map(|i| generate_one(seed, i, spec)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_layout() {
        let spec = SynthSpec {
            rows: 1,
            columns: 1,
            fan_out: 0.0,
            distractor: 0.0,
            ..Default::default()
        };
        let f = generate_one(3, 0, &spec).unwrap();
        let count = |l| f.entities.iter().filter(|e| e.label == l).count();
        assert_eq!(count(Label::Question), 1);
        assert_eq!(count(Label::Answer), 1);
        assert_eq!(count(Label::Header), 1);
        assert_eq!(f.links.len(), 1);
    }

    #[test]
    fn deterministic() {
        let spec = SynthSpec {
            n_forms: 4,
            ..Default::default()
        };
        assert_eq!(generate(9, &spec).unwrap(), generate(9, &spec).unwrap());
        assert_ne!(generate(9, &spec).unwrap(), generate(10, &spec).unwrap());
    }

    #[test]
    fn geometry_is_cell_aligned() {
        let spec = SynthSpec {
            n_forms: 5,
            mode: LayoutMode::Hard,
            ..Default::default()
        };
        for f in generate(1, &spec).unwrap() {
            for w in f.words() {
                assert_eq!(w.bbox.height(), TEXT_CELLS * CELL_PX);
                assert_eq!(w.bbox.x1 % CELL_PX, 0);
                assert_eq!(w.bbox.width(), w.text.len() as i32 * CELL_PX);
                assert!(w.bbox.x2 <= f.page_width as i32 && w.bbox.y2 <= f.page_height as i32);
            }
        }
    }

    #[test]
    fn questions_end_with_colon() {
        let f = generate_one(5, 0, &SynthSpec::default()).unwrap();
        for e in f.entities.iter().filter(|e| e.label == Label::Question) {
            assert!(e.text.ends_with(':'));
        }
    }

    #[test]
    fn invalid_specs() {
        let bad = [
            SynthSpec { rows: 0, ..Default::default() },
            SynthSpec { fan_out: 1.5, ..Default::default() },
            SynthSpec { page_width: 510, ..Default::default() },
            SynthSpec { columns: 20, ..Default::default() },
            SynthSpec { page_height: 8, ..Default::default() },
        ];
        for s in bad {
            assert!(generate(0, &s).is_err(), "{s:?}");
        }
    }

    #[test]
    fn mode_parses() {
        assert_eq!("hard".parse::<LayoutMode>().unwrap(), LayoutMode::Hard);
        assert!("medium".parse::<LayoutMode>().is_err());
    }
}
