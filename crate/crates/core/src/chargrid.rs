//! Character vocabulary, char-grid rasterization and training-time augmentation.
//!
//! Each word box is split horizontally into as many equal slots as the word
//! has characters; every grid cell under a slot receives that character's
//! vocabulary index. Index 0 is background. Grid scale is chosen per form so
//! that the median word height lands on a fixed number of cells.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::funsd::{BoxPx, FormDocument};
use crate::tensor::{NdArray, Real};

pub const DEFAULT_VOCAB_SIZE: usize = 90;
pub const DEFAULT_MEDIAN_HEIGHT: f64 = 3.0;

/// Uppercase when the mapping is one-to-one, otherwise the character itself.
pub fn fold_case(c: char) -> char {
    let mut up = c.to_uppercase();
    match (up.next(), up.next()) {
        (Some(u), None) => u,
        _ => c,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharVocab {
    chars: Vec<char>,
    #[serde(skip)]
    index: HashMap<char, u16>,
}

impl CharVocab {
    pub fn from_chars(chars: Vec<char>) -> Result<Self> {
        if chars.len() >= u16::MAX as usize {
            return Err(Error::Config("vocabulary too large".into()));
        }
        let mut index = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if index.insert(c, (i + 1) as u16).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary character {c:?}")));
            }
        }
        Ok(CharVocab { chars, index })
    }

    /// N_char, not counting background.
    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// Index in `1..=N_char`, or 0 for out-of-vocabulary characters.
    pub fn index_of(&self, c: char) -> u16 {
        self.index.get(&fold_case(c)).copied().unwrap_or(0)
    }

    pub fn char_at(&self, index: u16) -> Option<char> {
        (index as usize).checked_sub(1).and_then(|i| self.chars.get(i)).copied()
    }

    /// One character per line, in index order.
    pub fn to_text(&self) -> String {
        self.chars.iter().map(|c| format!("{}\n", c.escape_unicode())).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let chars = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| {
                let hex = l
                    .strip_prefix("\\u{")
                    .and_then(|s| s.strip_suffix('}'))
                    .ok_or_else(|| Error::Config(format!("bad vocabulary line `{l}`")))?;
                u32::from_str_radix(hex, 16)
                    .ok()
                    .and_then(char::from_u32)
                    .ok_or_else(|| Error::Config(format!("bad vocabulary line `{l}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_chars(chars)
    }
}

/// The `n` most frequent (case-folded, non-whitespace) word characters,
/// ties broken by ascending code point.
pub fn build_vocab(corpus: &[FormDocument], n: usize) -> Result<CharVocab> {
    if n == 0 {
        return Err(Error::Config("vocabulary size must be at least 1".into()));
    }
    let mut counts: HashMap<char, usize> = HashMap::new();
    for form in corpus {
        for w in form.words() {
            for c in w.text.chars().filter(|c| !c.is_whitespace()) {
                *counts.entry(fold_case(c)).or_default() += 1;
            }
        }
    }
    if counts.is_empty() {
        return Err(Error::Config("corpus contains no characters".into()));
    }
    let mut ranked: Vec<(char, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    CharVocab::from_chars(ranked.into_iter().take(n).map(|(c, _)| c).collect())
}

/// Page-to-grid mapping of a rasterized form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    /// Page pixels per grid cell.
    pub scale: f64,
    pub height: usize,
    pub width: usize,
}

const SNAP: f64 = 1e-9;

impl GridGeometry {
    /// Half-open cell ranges `(rows, cols)` covered by a page box, at least
    /// one cell each way, clipped to the grid.
    pub fn cell_span(&self, b: &BoxPx) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let s = self.scale;
        let c0 = ((b.x1 as f64 / s + SNAP).floor().max(0.0) as usize).min(self.width);
        let r0 = ((b.y1 as f64 / s + SNAP).floor().max(0.0) as usize).min(self.height);
        let mut c1 = ((b.x2 as f64 / s - SNAP).ceil().max(0.0) as usize).min(self.width);
        let mut r1 = ((b.y2 as f64 / s - SNAP).ceil().max(0.0) as usize).min(self.height);
        if c1 <= c0 {
            c1 = (c0 + 1).min(self.width);
        }
        if r1 <= r0 {
            r1 = (r0 + 1).min(self.height);
        }
        (r0..r1, c0..c1)
    }

    /// Page box of a half-open cell rectangle.
    pub fn cells_to_box(&self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> BoxPx {
        let s = self.scale;
        BoxPx::new(
            (cols.start as f64 * s).round() as i32,
            (rows.start as f64 * s).round() as i32,
            (cols.end as f64 * s).round() as i32,
            (rows.end as f64 * s).round() as i32,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CharGrid {
    pub height: usize,
    pub width: usize,
    pub n_char: usize,
    pub scale: f64,
    /// Row-major cell indices in `0..=n_char`.
    pub cells: Vec<u16>,
}

impl CharGrid {
    pub fn geometry(&self) -> GridGeometry {
        GridGeometry {
            scale: self.scale,
            height: self.height,
            width: self.width,
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.cells[row * self.width + col]
    }

    /// Portable binary: `"CGRD"`, H, W, N_char as little-endian `u32`, then
    /// H*W little-endian `u16` cells, row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 2 * self.cells.len());
        out.extend_from_slice(b"CGRD");
        for v in [self.height, self.width, self.n_char] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for c in &self.cells {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    /// Inverse of [`CharGrid::to_bytes`]; the scale is not stored and comes back as 1.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != b"CGRD" {
            return Err(Error::Format("not a char-grid file".into()));
        }
        let u = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (height, width, n_char) = (u(4), u(8), u(12));
        let n = height * width;
        if bytes.len() != 16 + 2 * n {
            return Err(Error::Format(format!(
                "char-grid payload is {} bytes, expected {}",
                bytes.len() - 16,
                2 * n
            )));
        }
        let cells: Vec<u16> = bytes[16..]
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect();
        if let Some(&c) = cells.iter().find(|&&c| c as usize > n_char) {
            return Err(Error::Format(format!("cell index {c} exceeds N_char {n_char}")));
        }
        Ok(CharGrid {
            height,
            width,
            n_char,
            scale: 1.0,
            cells,
        })
    }

    /// Copy padded with background to `height x width` (bottom/right).
    pub fn padded(&self, height: usize, width: usize) -> CharGrid {
        let mut cells = vec![0u16; height * width];
        for r in 0..self.height.min(height) {
            let n = self.width.min(width);
            cells[r * width..r * width + n].copy_from_slice(&self.cells[r * self.width..][..n]);
        }
        CharGrid {
            height,
            width,
            cells,
            ..self.clone()
        }
    }
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

/// Median word height of a form in page pixels.
pub fn median_word_height(form: &FormDocument) -> Option<f64> {
    let mut h: Vec<f64> = form.words().map(|w| w.bbox.height() as f64).collect();
    median(&mut h)
}

/// Page pixels per cell for a form (median over this form's words).
pub fn grid_scale(form: &FormDocument, target_median_height: f64) -> Result<f64> {
    if target_median_height < 1.0 {
        return Err(Error::Config("target median height must be at least 1 cell".into()));
    }
    let m = median_word_height(form).ok_or_else(|| Error::Degenerate {
        message: "form has no words to rasterize".into(),
    })?;
    if m <= 0.0 {
        return Err(Error::Degenerate {
            message: "median word height is zero".into(),
        });
    }
    Ok(m / target_median_height)
}

/// Grid extent and scale that [`rasterize`] would use for `form`.
pub fn grid_geometry(form: &FormDocument, target_median_height: f64) -> Result<GridGeometry> {
    let scale = grid_scale(form, target_median_height)?;
    let height = (form.page_height as f64 / scale - SNAP).ceil().max(0.0) as usize;
    let width = (form.page_width as f64 / scale - SNAP).ceil().max(0.0) as usize;
    if height == 0 || width == 0 {
        return Err(Error::Degenerate {
            message: format!("grid would be {height}x{width} cells"),
        });
    }
    Ok(GridGeometry {
        scale,
        height,
        width,
    })
}

pub fn rasterize(form: &FormDocument, vocab: &CharVocab, target_median_height: f64) -> Result<CharGrid> {
    let geo = grid_geometry(form, target_median_height)?;
    let (height, width, scale) = (geo.height, geo.width, geo.scale);
    let mut cells = vec![0u16; height * width];
    for w in form.words() {
        let chars: Vec<u16> = w.text.chars().map(|c| vocab.index_of(c)).collect();
        if chars.is_empty() {
            continue;
        }
        let (rows, cols) = geo.cell_span(&w.bbox);
        let n = cols.len();
        for r in rows {
            for (k, c) in cols.clone().enumerate() {
                cells[r * width + c] = chars[k * chars.len() / n];
            }
        }
    }
    Ok(CharGrid {
        height,
        width,
        n_char: vocab.len(),
        scale,
        cells,
    })
}

/// `(N_char + 1) x H x W` one-hot stack; channel 0 is background.
pub fn one_hot<T: Real>(grid: &CharGrid) -> NdArray<T> {
    let hw = grid.height * grid.width;
    let mut out = NdArray::zeros(&[grid.n_char + 1, grid.height, grid.width]);
    for (p, &c) in grid.cells.iter().enumerate() {
        out.data_mut()[c as usize * hw + p] = T::ONE;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub p_char_replace: f64,
    /// Per-entity shift bound, in grid cells.
    pub max_shift: u32,
    /// Rotation drawn from `[-max, max]` degrees.
    pub max_rotation_deg: f64,
    /// Horizontal shear factor drawn from `[-max, max]`.
    pub max_shear: f64,
    pub scale_range: (f64, f64),
    /// Background padding per side, in grid cells, drawn from the inclusive range.
    pub pad_range: (u32, u32),
    pub target_median_height: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    /// The identity configuration.
    fn default() -> Self {
        AugmentConfig {
            p_char_replace: 0.0,
            max_shift: 0,
            max_rotation_deg: 0.0,
            max_shear: 0.0,
            scale_range: (1.0, 1.0),
            pad_range: (0, 0),
            target_median_height: DEFAULT_MEDIAN_HEIGHT,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_char_replace) {
            return Err(Error::Config("p_char_replace must lie in [0, 1]".into()));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config("scale_range must satisfy 0 < lo <= hi".into()));
        }
        if self.pad_range.0 > self.pad_range.1 {
            return Err(Error::Config("pad_range must satisfy lo <= hi".into()));
        }
        if self.max_rotation_deg < 0.0 || self.max_shear < 0.0 {
            return Err(Error::Config("rotation and shear bounds must be non-negative".into()));
        }
        Ok(())
    }

    fn has_affine(&self) -> bool {
        self.max_rotation_deg > 0.0 || self.max_shear > 0.0 || self.scale_range != (1.0, 1.0)
    }
}

fn affine_box(b: &BoxPx, m: [[f64; 2]; 2], cx: f64, cy: f64) -> BoxPx {
    let corners = [
        (b.x1 as f64, b.y1 as f64),
        (b.x2 as f64, b.y1 as f64),
        (b.x1 as f64, b.y2 as f64),
        (b.x2 as f64, b.y2 as f64),
    ];
    let mut xs = [0.0; 4];
    let mut ys = [0.0; 4];
    for (i, (x, y)) in corners.into_iter().enumerate() {
        let (dx, dy) = (x - cx, y - cy);
        xs[i] = cx + m[0][0] * dx + m[0][1] * dy;
        ys[i] = cy + m[1][0] * dx + m[1][1] * dy;
    }
    let fold = |v: &[f64; 4], f: fn(f64, f64) -> f64, init: f64| v.iter().copied().fold(init, f);
    BoxPx::new(
        fold(&xs, f64::min, f64::INFINITY).round() as i32,
        fold(&ys, f64::min, f64::INFINITY).round() as i32,
        fold(&xs, f64::max, f64::NEG_INFINITY).round() as i32,
        fold(&ys, f64::max, f64::NEG_INFINITY).round() as i32,
    )
}

/// Apply, in order: character replacement, per-entity shift, a global affine
/// transform of all boxes, and background padding. Labels and links are
/// untouched.
///
/// Random draws happen in a fixed order from a ChaCha8 stream seeded with
/// `cfg.seed`: for every word character (entities, then words, then chars in
/// order) one `f64` in `[0, 1)`, followed by a uniform vocabulary slot when
/// that draw is below `p_char_replace`.
pub fn augment(form: &FormDocument, cfg: &AugmentConfig, vocab: &CharVocab) -> Result<FormDocument> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = form.clone();
    let cell_px = grid_scale(form, cfg.target_median_height).unwrap_or(1.0);

    if cfg.p_char_replace > 0.0 && !vocab.is_empty() {
        for e in &mut out.entities {
            let mut touched = false;
            for w in &mut e.words {
                let mut text = String::with_capacity(w.text.len());
                for c in w.text.chars() {
                    if rng.gen::<f64>() < cfg.p_char_replace {
                        text.push(vocab.chars()[rng.gen_range(0..vocab.len())]);
                        touched = true;
                    } else {
                        text.push(c);
                    }
                }
                w.text = text;
            }
            if touched {
                e.text = e.words.iter().map(|w| w.text.as_str()).collect::<Vec<_>>().join(" ");
            }
        }
    }

    if cfg.max_shift > 0 {
        let m = cfg.max_shift as i32;
        for e in &mut out.entities {
            let dx = (rng.gen_range(-m..=m) as f64 * cell_px).round() as i32;
            let dy = (rng.gen_range(-m..=m) as f64 * cell_px).round() as i32;
            e.bbox = e.bbox.translate(dx, dy);
            for w in &mut e.words {
                w.bbox = w.bbox.translate(dx, dy);
            }
        }
    }

    if cfg.has_affine() {
        let theta = rng.gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg).to_radians();
        let shear = rng.gen_range(-cfg.max_shear..=cfg.max_shear);
        let s = rng.gen_range(cfg.scale_range.0..=cfg.scale_range.1);
        let (sin, cos) = theta.sin_cos();
        // rotation * shear * scale
        let m = [[s * cos, s * (cos * shear - sin)], [s * sin, s * (sin * shear + cos)]];
        let (cx, cy) = (out.page_width as f64 / 2.0, out.page_height as f64 / 2.0);
        for e in &mut out.entities {
            for w in &mut e.words {
                w.bbox = affine_box(&w.bbox, m, cx, cy);
            }
            e.bbox = affine_box(&e.bbox, m, cx, cy);
        }
    }

    if cfg.pad_range.1 > 0 {
        let (lo, hi) = cfg.pad_range;
        let mut side = || (rng.gen_range(lo..=hi) as f64 * cell_px).round() as i32;
        let (left, top, right, bottom) = (side(), side(), side(), side());
        for e in &mut out.entities {
            e.bbox = e.bbox.translate(left, top);
            for w in &mut e.words {
                w.bbox = w.bbox.translate(left, top);
            }
        }
        out.page_width = (out.page_width as i32 + left + right).max(0) as u32;
        out.page_height = (out.page_height as i32 + top + bottom).max(0) as u32;
    }

    let (pw, ph) = (out.page_width as i32, out.page_height as i32);
    let mut visible = out.entities.is_empty();
    for e in &mut out.entities {
        e.bbox = e.bbox.clamp(pw, ph);
        e.words.retain_mut(|w| {
            w.bbox = w.bbox.clamp(pw, ph);
            w.bbox.area() > 0
        });
        e.bbox = e.words.iter().fold(e.bbox, |acc, w| acc.union(&w.bbox));
        visible |= e.bbox.area() > 0;
    }
    if !visible {
        return Err(Error::Degenerate {
            message: "augmentation pushed every entity off the page".into(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funsd::{Entity, Label, WordBox};

    fn word(text: &str, b: [i32; 4]) -> WordBox {
        WordBox {
            text: text.into(),
            bbox: BoxPx::new(b[0], b[1], b[2], b[3]),
        }
    }

    fn form_of(words: Vec<WordBox>, w: u32, h: u32) -> FormDocument {
        let entities = words
            .into_iter()
            .enumerate()
            .map(|(i, wb)| Entity {
                id: i as u32,
                label: Label::Other,
                bbox: wb.bbox,
                text: wb.text.clone(),
                words: vec![wb],
                links: vec![],
            })
            .collect();
        FormDocument {
            page_width: w,
            page_height: h,
            entities,
            links: vec![],
        }
    }

    #[test]
    fn vocab_frequency_and_tie_break() {
        let f = form_of(vec![word("AAAB", [0, 0, 4, 1])], 4, 1);
        let v = build_vocab(&[f], 1).unwrap();
        assert_eq!(v.chars(), &['A']);

        let f = form_of(vec![word("ABAB", [0, 0, 4, 1])], 4, 1);
        let v = build_vocab(&[f], 2).unwrap();
        assert_eq!(v.chars(), &['A', 'B']);
        assert_eq!(v.index_of('a'), 1);
        assert_eq!(v.index_of('b'), 2);
        assert_eq!(v.index_of('z'), 0);
        assert_eq!(v.char_at(0), None);
        assert_eq!(v.char_at(2), Some('B'));
    }

    #[test]
    fn vocab_of_empty_corpus_fails() {
        let f = form_of(vec![], 4, 1);
        assert!(build_vocab(&[f], 5).is_err());
        assert!(build_vocab(&[], 0).is_err());
    }

    #[test]
    fn vocab_text_round_trip() {
        let v = CharVocab::from_chars(vec!['A', ':', ' ', 'é']).unwrap();
        assert_eq!(CharVocab::from_text(&v.to_text()).unwrap(), v);
    }

    #[test]
    fn two_char_word_fills_halves() {
        let f = form_of(vec![word("AB", [0, 0, 4, 2])], 4, 2);
        let v = CharVocab::from_chars(vec!['A', 'B']).unwrap();
        let g = rasterize(&f, &v, 2.0).unwrap();
        assert_eq!(g.scale, 1.0);
        assert_eq!((g.height, g.width), (2, 4));
        assert_eq!(g.cells, vec![1, 1, 2, 2, 1, 1, 2, 2]);
    }

    #[test]
    fn out_of_vocabulary_is_background() {
        let f = form_of(vec![word("xyz", [0, 0, 6, 3])], 6, 3);
        let v = CharVocab::from_chars(vec!['A']).unwrap();
        let g = rasterize(&f, &v, 3.0).unwrap();
        assert!(g.cells.iter().all(|&c| c == 0));
    }

    #[test]
    fn scale_from_median_height() {
        let f = form_of(
            vec![word("A", [0, 0, 5, 10]), word("A", [0, 20, 5, 32]), word("A", [0, 40, 5, 60])],
            40,
            80,
        );
        let v = CharVocab::from_chars(vec!['A']).unwrap();
        let g = rasterize(&f, &v, 3.0).unwrap();
        assert_eq!(g.scale, 4.0);
        // brute-force check: the median word spans exactly 3 rows
        let geo = g.geometry();
        let (rows, _) = geo.cell_span(&f.entities[1].words[0].bbox);
        assert_eq!(rows.len(), 3);
        assert_eq!((g.height, g.width), (20, 10));
    }

    #[test]
    fn degenerate_scale_is_an_error() {
        let f = form_of(vec![word("A", [0, 0, 1, 1])], 0, 0);
        let v = CharVocab::from_chars(vec!['A']).unwrap();
        assert!(rasterize(&f, &v, 3.0).is_err());
    }

    #[test]
    fn one_hot_is_a_partition_of_unity() {
        let g = CharGrid {
            height: 2,
            width: 3,
            n_char: 5,
            scale: 1.0,
            cells: vec![0, 5, 0, 0, 0, 0],
        };
        let oh: NdArray<f64> = one_hot(&g);
        assert_eq!(oh.shape(), &[6, 2, 3]);
        assert_eq!(&oh.data()[5 * 6..6 * 6], &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        for p in 0..6 {
            let s: f64 = (0..6).map(|c| oh.data()[c * 6 + p]).sum();
            assert_eq!(s, 1.0);
        }
        let bg = CharGrid { cells: vec![0; 6], ..g };
        let oh: NdArray<f64> = one_hot(&bg);
        assert!(oh.data()[..6].iter().all(|&v| v == 1.0));
        assert!(oh.data()[6..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cgrd_binary_layout() {
        let g = CharGrid {
            height: 1,
            width: 2,
            n_char: 90,
            scale: 1.0,
            cells: vec![3, 90],
        };
        let b = g.to_bytes();
        assert_eq!(&b[..4], b"CGRD");
        assert_eq!(&b[4..16], &[1, 0, 0, 0, 2, 0, 0, 0, 90, 0, 0, 0]);
        assert_eq!(&b[16..], &[3, 0, 90, 0]);
        assert_eq!(CharGrid::from_bytes(&b).unwrap(), g);
        assert!(CharGrid::from_bytes(&b[..18]).is_err());
    }

    #[test]
    fn identity_augmentation() {
        let f = form_of(vec![word("AB", [4, 4, 12, 16]), word("C", [20, 4, 24, 16])], 40, 40);
        let v = CharVocab::from_chars(vec!['A', 'B', 'C']).unwrap();
        assert_eq!(augment(&f, &AugmentConfig::default(), &v).unwrap(), f);
    }

    #[test]
    fn augmentation_is_seeded() {
        let f = form_of(vec![word("AB", [40, 40, 48, 52]), word("C", [80, 40, 84, 52])], 200, 200);
        let v = CharVocab::from_chars(vec!['A', 'B', 'C']).unwrap();
        let cfg = AugmentConfig {
            max_shift: 2,
            p_char_replace: 0.3,
            max_rotation_deg: 3.0,
            pad_range: (0, 2),
            seed: 11,
            ..Default::default()
        };
        let a = augment(&f, &cfg, &v).unwrap();
        let b = augment(&f, &cfg, &v).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.entities.len(), f.entities.len());
    }

    #[test]
    fn char_replacement_matches_rng_replay() {
        let f = form_of(vec![word("AAAA", [0, 0, 16, 12])], 16, 12);
        let v = CharVocab::from_chars(vec!['A', 'B']).unwrap();
        let cfg = AugmentConfig {
            p_char_replace: 1.0,
            seed: 42,
            ..Default::default()
        };
        let out = augment(&f, &cfg, &v).unwrap();
        let text = &out.entities[0].words[0].text;

        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut expect_b = 0;
        for _ in 0..4 {
            assert!(rng.gen::<f64>() < 1.0);
            if rng.gen_range(0..2) == 1 {
                expect_b += 1;
            }
        }
        assert_eq!(text.chars().filter(|&c| c == 'B').count(), expect_b);
        assert_eq!(text.chars().filter(|&c| c == 'A').count(), 4 - expect_b);
    }

    #[test]
    fn pushing_everything_off_page_fails() {
        let f = form_of(vec![word("A", [0, 0, 4, 12])], 4, 12);
        let v = CharVocab::from_chars(vec!['A']).unwrap();
        let cfg = AugmentConfig {
            scale_range: (0.01, 0.01),
            ..Default::default()
        };
        assert!(augment(&f, &cfg, &v).is_err());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = AugmentConfig {
            p_char_replace: 1.5,
            ..Default::default()
        };
        let f = form_of(vec![word("A", [0, 0, 4, 12])], 4, 12);
        let v = CharVocab::from_chars(vec!['A']).unwrap();
        assert!(matches!(augment(&f, &cfg, &v), Err(Error::Config(_))));
    }
}
