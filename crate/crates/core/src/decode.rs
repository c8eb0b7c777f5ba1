//! Greedy decoding of network fields into labeled boxes and links.

use std::collections::{BTreeMap, HashSet};

use crate::chargrid::{GridGeometry, DEFAULT_MEDIAN_HEIGHT};
use crate::config::{value, Section};
use crate::error::{Error, Result};
use crate::funsd::{form_to_json, BoxPx, Entity, FormDocument, Label};
use crate::net::{PAF_CHANNELS, PIF_CHANNELS};
use crate::targets::{FieldGeometry, PafTarget, PifTarget};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    /// Minimum accumulated vote score of a keypoint.
    pub keypoint_threshold: f64,
    /// Minimum squashed PAF confidence of a cell that proposes a link.
    pub link_threshold: f64,
    /// Cells below this confidence cast no PIF vote.
    pub vote_threshold: f64,
    /// Vote map nodes per field cell.
    pub vote_resolution: usize,
    /// Segmentation components smaller than this many cells are dropped.
    pub min_area: usize,
    /// Keypoint-to-box assignment radius in multiples of the median text height.
    pub assign_radius: f64,
    /// Median text height in grid cells; set through the run-level
    /// `median_height` key.
    pub median_height: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            keypoint_threshold: 0.3,
            link_threshold: 0.3,
            vote_threshold: 0.1,
            vote_resolution: 4,
            min_area: 3,
            assign_radius: 2.0,
            median_height: DEFAULT_MEDIAN_HEIGHT,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |k: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{k} must lie in (0, 1), got {v}")))
            }
        };
        unit("keypoint_threshold", self.keypoint_threshold)?;
        unit("link_threshold", self.link_threshold)?;
        unit("vote_threshold", self.vote_threshold)?;
        if self.vote_resolution == 0 {
            return Err(Error::Config("vote_resolution must be positive".into()));
        }
        if !(self.assign_radius > 0.0 && self.median_height > 0.0) {
            return Err(Error::Config("assign_radius and median_height must be positive".into()));
        }
        Ok(())
    }
}

impl Section for DecodeConfig {
    fn set(&mut self, key: &str, raw: &str) -> Result<bool> {
        match key {
            "keypoint_threshold" => self.keypoint_threshold = value(key, raw)?,
            "link_threshold" => self.link_threshold = value(key, raw)?,
            "vote_threshold" => self.vote_threshold = value(key, raw)?,
            "vote_resolution" => self.vote_resolution = value(key, raw)?,
            "min_area" => self.min_area = value(key, raw)?,
            "assign_radius" => self.assign_radius = value(key, raw)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("keypoint_threshold".into(), self.keypoint_threshold.to_string()),
            ("link_threshold".into(), self.link_threshold.to_string()),
            ("vote_threshold".into(), self.vote_threshold.to_string()),
            ("vote_resolution".into(), self.vote_resolution.to_string()),
            ("min_area".into(), self.min_area.to_string()),
            ("assign_radius".into(), self.assign_radius.to_string()),
        ]
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// PIF fields with confidence squashed to [0, 1] and σ, b made positive.
#[derive(Debug, Clone, PartialEq)]
pub struct PifMaps {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub conf: Vec<f64>,
    /// Offset from the cell center to the keypoint, field cells.
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub b: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl PifMaps {
    /// From raw head output laid out `(K * 5) x H x W`.
    pub fn from_raw<T: Real>(raw: &[T], classes: usize, height: usize, width: usize) -> Result<Self> {
        let n = height * width;
        if raw.len() != classes * PIF_CHANNELS * n {
            return Err(Error::shape("PIF output size mismatch"));
        }
        let plane = |k: usize, ch: usize, f: fn(f64) -> f64| -> Vec<f64> {
            let o = (k * PIF_CHANNELS + ch) * n;
            raw[o..o + n].iter().map(|v| f(v.to_f64())).collect()
        };
        let mut m = PifMaps {
            classes,
            height,
            width,
            conf: Vec::with_capacity(classes * n),
            x: Vec::with_capacity(classes * n),
            y: Vec::with_capacity(classes * n),
            b: Vec::with_capacity(classes * n),
            sigma: Vec::with_capacity(classes * n),
        };
        for k in 0..classes {
            m.conf.extend(plane(k, 0, sigmoid));
            m.x.extend(plane(k, 1, |v| v));
            m.y.extend(plane(k, 2, |v| v));
            m.b.extend(plane(k, 3, softplus));
            m.sigma.extend(plane(k, 4, softplus));
        }
        Ok(m)
    }

    /// Fields equal to their encoded targets, with unit spread.
    pub fn from_target(t: &PifTarget) -> Self {
        PifMaps {
            classes: t.classes,
            height: t.height,
            width: t.width,
            conf: t.conf.clone(),
            x: t.dx.clone(),
            y: t.dy.clone(),
            b: vec![1.0; t.conf.len()],
            sigma: t.sigma.clone(),
        }
    }
}

/// PAF fields with confidence squashed to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct PafMaps {
    pub types: usize,
    pub height: usize,
    pub width: usize,
    pub conf: Vec<f64>,
    pub x1: Vec<f64>,
    pub y1: Vec<f64>,
    pub x2: Vec<f64>,
    pub y2: Vec<f64>,
}

impl PafMaps {
    /// From raw head output laid out `(L * 7) x H x W`.
    pub fn from_raw<T: Real>(raw: &[T], types: usize, height: usize, width: usize) -> Result<Self> {
        let n = height * width;
        if raw.len() != types * PAF_CHANNELS * n {
            return Err(Error::shape("PAF output size mismatch"));
        }
        let plane = |l: usize, ch: usize| -> Vec<f64> {
            let o = (l * PAF_CHANNELS + ch) * n;
            raw[o..o + n].iter().map(|v| v.to_f64()).collect()
        };
        let mut m = PafMaps {
            types,
            height,
            width,
            conf: Vec::new(),
            x1: Vec::new(),
            y1: Vec::new(),
            x2: Vec::new(),
            y2: Vec::new(),
        };
        for l in 0..types {
            m.conf.extend(plane(l, 0).into_iter().map(sigmoid));
            m.x1.extend(plane(l, 1));
            m.y1.extend(plane(l, 2));
            m.x2.extend(plane(l, 4));
            m.y2.extend(plane(l, 5));
        }
        Ok(m)
    }

    pub fn from_target(t: &PafTarget) -> Self {
        PafMaps {
            types: t.types,
            height: t.height,
            width: t.width,
            conf: t.conf.clone(),
            x1: t.x1.clone(),
            y1: t.y1.clone(),
            x2: t.x2.clone(),
            y2: t.y2.clone(),
        }
    }
}

/// Per-class segmentation scores, `classes x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegMaps {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub logits: Vec<f64>,
}

impl SegMaps {
    pub fn from_raw<T: Real>(raw: &[T], classes: usize, height: usize, width: usize) -> Result<Self> {
        if raw.len() != classes * height * width {
            return Err(Error::shape("segmentation output size mismatch"));
        }
        Ok(SegMaps {
            classes,
            height,
            width,
            logits: raw.iter().map(|v| v.to_f64()).collect(),
        })
    }

    /// One-hot scores of a class-index mask.
    pub fn from_mask(mask: &[u32], classes: usize, height: usize, width: usize) -> Self {
        let n = height * width;
        let mut logits = vec![0.0; classes * n];
        for (p, &c) in mask.iter().enumerate() {
            logits[c as usize * n + p] = 1.0;
        }
        SegMaps {
            classes,
            height,
            width,
            logits,
        }
    }

    /// Per-cell argmax (ties to the lower class) and its softmax probability.
    pub fn argmax(&self) -> (Vec<u32>, Vec<f64>) {
        let n = self.height * self.width;
        let mut cls = vec![0u32; n];
        let mut prob = vec![0.0; n];
        for p in 0..n {
            let mut best = 0;
            for c in 1..self.classes {
                if self.logits[c * n + p] > self.logits[best * n + p] {
                    best = c;
                }
            }
            let m = self.logits[best * n + p];
            let z: f64 = (0..self.classes).map(|c| (self.logits[c * n + p] - m).exp()).sum();
            cls[p] = best as u32;
            prob[p] = 1.0 / z;
        }
        (cls, prob)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub class: usize,
    /// Position in field cells.
    pub x: f64,
    pub y: f64,
    pub score: f64,
    /// Scale in field cells.
    pub sigma: f64,
}

struct Vote {
    x: f64,
    y: f64,
    c: f64,
    sigma: f64,
}

/// Keypoints of every class, ordered by descending score, then class, then
/// row-major position.
pub fn extract_keypoints(pif: &PifMaps, cfg: &DecodeConfig) -> Vec<Keypoint> {
    let (h, w) = (pif.height, pif.width);
    let r = cfg.vote_resolution;
    let (mh, mw) = (h * r + 1, w * r + 1);
    let rho = 0.5;
    let reach = (rho * r as f64).ceil() as isize;
    let mut out: Vec<(Keypoint, usize)> = Vec::new();
    for k in 0..pif.classes {
        let mut votes = Vec::new();
        for i in 0..h {
            for j in 0..w {
                let idx = (k * h + i) * w + j;
                let c = pif.conf[idx];
                if c < cfg.vote_threshold {
                    continue;
                }
                votes.push(Vote {
                    x: (j as f64 + 0.5 + pif.x[idx]).clamp(0.0, w as f64),
                    y: (i as f64 + 0.5 + pif.y[idx]).clamp(0.0, h as f64),
                    c,
                    sigma: pif.sigma[idx],
                });
            }
        }
        if votes.is_empty() {
            continue;
        }
        let mut map = vec![0.0; mh * mw];
        for v in &votes {
            let (nx, ny) = ((v.x * r as f64).round() as isize, (v.y * r as f64).round() as isize);
            for a in (ny - reach).max(0)..=(ny + reach).min(mh as isize - 1) {
                for b in (nx - reach).max(0)..=(nx + reach).min(mw as isize - 1) {
                    let d = ((b as f64 / r as f64 - v.x).powi(2) + (a as f64 / r as f64 - v.y).powi(2)).sqrt();
                    if d < rho {
                        map[a as usize * mw + b as usize] += v.c * (1.0 - d / rho);
                    }
                }
            }
        }
        let mut peaks = Vec::new();
        for a in 0..mh {
            for b in 0..mw {
                let m = map[a * mw + b];
                if m < cfg.keypoint_threshold {
                    continue;
                }
                let mut is_max = true;
                'nb: for da in -1isize..=1 {
                    for db in -1isize..=1 {
                        let (aa, bb) = (a as isize + da, b as isize + db);
                        if (da, db) == (0, 0) || aa < 0 || bb < 0 || aa >= mh as isize || bb >= mw as isize {
                            continue;
                        }
                        if map[aa as usize * mw + bb as usize] > m {
                            is_max = false;
                            break 'nb;
                        }
                    }
                }
                if is_max {
                    peaks.push((m, a * mw + b));
                }
            }
        }
        peaks.sort_by(|p, q| q.0.total_cmp(&p.0).then(p.1.cmp(&q.1)));
        let mut accepted: Vec<Keypoint> = Vec::new();
        for (m, node) in peaks {
            let (px, py) = ((node % mw) as f64 / r as f64, (node / mw) as f64 / r as f64);
            let (mut sx, mut sy, mut ss, mut sw) = (0.0, 0.0, 0.0, 0.0);
            for v in &votes {
                let d = ((v.x - px).powi(2) + (v.y - py).powi(2)).sqrt();
                if d < rho {
                    let wt = v.c * (1.0 - d / rho);
                    sx += wt * v.x;
                    sy += wt * v.y;
                    ss += wt * v.sigma;
                    sw += wt;
                }
            }
            let kp = Keypoint {
                class: k,
                x: sx / sw,
                y: sy / sw,
                score: m.min(1.0),
                sigma: ss / sw,
            };
            let suppressed = accepted.iter().any(|a| {
                ((a.x - kp.x).powi(2) + (a.y - kp.y).powi(2)).sqrt() < a.sigma.max(1.0)
            });
            if !suppressed {
                accepted.push(kp);
                out.push((kp, node));
            }
        }
    }
    out.sort_by(|(a, na), (b, nb)| {
        b.score
            .total_cmp(&a.score)
            .then(a.class.cmp(&b.class))
            .then(na.cmp(nb))
    });
    out.into_iter().map(|(k, _)| k).collect()
}

/// A link between two entries of a keypoint list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeypointLink {
    pub question: usize,
    pub answer: usize,
    pub score: f64,
}

fn nearest(keypoints: &[Keypoint], class: usize, x: f64, y: f64) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (i, k) in keypoints.iter().enumerate() {
        if k.class != class {
            continue;
        }
        let d = ((k.x - x).powi(2) + (k.y - y).powi(2)).sqrt();
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, i));
        }
    }
    let (d, i) = best?;
    (d <= keypoints[i].sigma.max(2.0)).then_some(i)
}

/// Score candidate links from PAF cells and keep them greedily so that each
/// answer keypoint is used at most once.
pub fn associate(paf: &PafMaps, keypoints: &[Keypoint], cfg: &DecodeConfig) -> Vec<KeypointLink> {
    let (qc, ac) = (Label::Question.index(), Label::Answer.index());
    let (h, w) = (paf.height, paf.width);
    let mut cand: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for l in 0..paf.types {
        for i in 0..h {
            for j in 0..w {
                let idx = (l * h + i) * w + j;
                let c = paf.conf[idx];
                if c <= cfg.link_threshold {
                    continue;
                }
                let (cx, cy) = (j as f64 + 0.5, i as f64 + 0.5);
                let Some(q) = nearest(keypoints, qc, cx + paf.x1[idx], cy + paf.y1[idx]) else {
                    continue;
                };
                let Some(a) = nearest(keypoints, ac, cx + paf.x2[idx], cy + paf.y2[idx]) else {
                    continue;
                };
                let s = c * keypoints[q].score * keypoints[a].score;
                let e = cand.entry((q, a)).or_insert(s);
                *e = e.max(s);
            }
        }
    }
    let mut cand: Vec<_> = cand.into_iter().collect();
    cand.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    let mut used = HashSet::new();
    cand.into_iter()
        .filter(|&((_, a), _)| used.insert(a))
        .map(|((question, answer), score)| KeypointLink { question, answer, score })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegEntity {
    pub label: Label,
    pub bbox: BoxPx,
    /// Mean argmax probability over the component.
    pub score: f64,
    pub area: usize,
}

/// Connected components (4-neighborhood) of the argmax class map, in order
/// of each component's first cell in a row-major scan.
pub fn entities_from_segmentation(seg: &SegMaps, grid: &GridGeometry, min_area: usize) -> Vec<SegEntity> {
    let (h, w) = (seg.height, seg.width);
    let (cls, prob) = seg.argmax();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if seen[start] || cls[start] == 0 {
            continue;
        }
        let c = cls[start];
        seen[start] = true;
        stack.push(start);
        let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
        let mut area = 0;
        let mut psum = 0.0;
        while let Some(p) = stack.pop() {
            let (r, col) = (p / w, p % w);
            r0 = r0.min(r);
            r1 = r1.max(r);
            c0 = c0.min(col);
            c1 = c1.max(col);
            area += 1;
            psum += prob[p];
            let mut visit = |q: usize| {
                if !seen[q] && cls[q] == c {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if r > 0 {
                visit(p - w);
            }
            if r + 1 < h {
                visit(p + w);
            }
            if col > 0 {
                visit(p - 1);
            }
            if col + 1 < w {
                visit(p + 1);
            }
        }
        if area < min_area {
            continue;
        }
        let Some(label) = Label::from_index(c as usize - 1) else {
            continue;
        };
        out.push(SegEntity {
            label,
            bbox: grid.cells_to_box(r0..r1 + 1, c0..c1 + 1),
            score: psum / area as f64,
            area,
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedEntity {
    pub id: u32,
    pub label: Label,
    pub bbox: BoxPx,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedLink {
    pub question: u32,
    pub answer: u32,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedForm {
    pub page_width: u32,
    pub page_height: u32,
    pub entities: Vec<DecodedEntity>,
    pub links: Vec<DecodedLink>,
    /// Keypoint links dropped because an endpoint had no box in range.
    pub dropped_links: usize,
}

impl DecodedForm {
    pub fn to_form_document(&self) -> FormDocument {
        let mut f = FormDocument {
            page_width: self.page_width,
            page_height: self.page_height,
            entities: self
                .entities
                .iter()
                .map(|e| Entity {
                    id: e.id,
                    label: e.label,
                    bbox: e.bbox,
                    text: String::new(),
                    words: Vec::new(),
                    links: Vec::new(),
                })
                .collect(),
            links: self.links.iter().map(|l| (l.question, l.answer)).collect(),
        };
        f.sync_entity_links();
        f
    }

    /// FUNSD-schema JSON with a `score` per entity and a `link_scores`
    /// list parallel to each entity's `linking`.
    pub fn to_json(&self) -> serde_json::Value {
        let doc = self.to_form_document();
        let mut v = form_to_json(&doc);
        if let Some(items) = v.get_mut("form").and_then(|f| f.as_array_mut()) {
            for (item, (e, de)) in items.iter_mut().zip(doc.entities.iter().zip(&self.entities)) {
                let scores: Vec<f64> = e
                    .links
                    .iter()
                    .map(|&(q, a)| {
                        self.links
                            .iter()
                            .find(|l| (l.question, l.answer) == (q, a))
                            .map_or(0.0, |l| l.score)
                    })
                    .collect();
                item["score"] = de.score.into();
                item["link_scores"] = scores.into();
            }
        }
        v
    }
}

/// Attach keypoint links to segmentation boxes: each endpoint goes to the
/// box of its class whose bottom-left corner is nearest within the
/// assignment radius. Links keep greedy order; each answer box is used once.
pub fn assemble(
    boxes: &[SegEntity],
    keypoints: &[Keypoint],
    links: &[KeypointLink],
    field: &FieldGeometry,
    page: (u32, u32),
    cfg: &DecodeConfig,
) -> DecodedForm {
    let radius = cfg.assign_radius * cfg.median_height * field.grid.scale;
    let owner = |k: &Keypoint, label: Label| -> Option<usize> {
        let (x, y) = field.field_to_page(k.x, k.y);
        let mut best: Option<(f64, usize)> = None;
        for (i, b) in boxes.iter().enumerate() {
            if b.label != label {
                continue;
            }
            let (bx, by) = b.bbox.bottom_left();
            let d = ((bx - x).powi(2) + (by - y).powi(2)).sqrt();
            if d <= radius && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
        best.map(|(_, i)| i)
    };
    let mut out = DecodedForm {
        page_width: page.0,
        page_height: page.1,
        entities: boxes
            .iter()
            .enumerate()
            .map(|(i, b)| DecodedEntity {
                id: i as u32,
                label: b.label,
                bbox: b.bbox,
                score: b.score,
            })
            .collect(),
        links: Vec::new(),
        dropped_links: 0,
    };
    let mut used = HashSet::new();
    for l in links {
        let q = owner(&keypoints[l.question], Label::Question);
        let a = owner(&keypoints[l.answer], Label::Answer);
        let (Some(q), Some(a)) = (q, a) else {
            out.dropped_links += 1;
            continue;
        };
        if used.insert(a) {
            out.links.push(DecodedLink {
                question: q as u32,
                answer: a as u32,
                score: l.score,
            });
        }
    }
    out
}

/// Full decode from squashed fields.
pub fn decode(
    seg: &SegMaps,
    pif: &PifMaps,
    paf: &PafMaps,
    field: &FieldGeometry,
    page: (u32, u32),
    cfg: &DecodeConfig,
) -> DecodedForm {
    let boxes = entities_from_segmentation(seg, &field.grid, cfg.min_area);
    let keypoints = extract_keypoints(pif, cfg);
    let links = associate(paf, &keypoints, cfg);
    assemble(&boxes, &keypoints, &links, field, page, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pif_empty(classes: usize, h: usize, w: usize) -> PifMaps {
        let n = classes * h * w;
        PifMaps {
            classes,
            height: h,
            width: w,
            conf: vec![0.0; n],
            x: vec![0.0; n],
            y: vec![0.0; n],
            b: vec![1.0; n],
            sigma: vec![1.0; n],
        }
    }

    /// Exact votes for a keypoint from every cell within radius 1.
    fn splat(p: &mut PifMaps, class: usize, x: f64, y: f64) {
        for i in 0..p.height {
            for j in 0..p.width {
                let (cx, cy) = (j as f64 + 0.5, i as f64 + 0.5);
                if ((cx - x).powi(2) + (cy - y).powi(2)).sqrt() <= 1.0 {
                    let idx = (class * p.height + i) * p.width + j;
                    p.conf[idx] = 1.0;
                    p.x[idx] = x - cx;
                    p.y[idx] = y - cy;
                }
            }
        }
    }

    #[test]
    fn no_confidence_no_keypoints() {
        assert!(extract_keypoints(&pif_empty(4, 8, 8), &DecodeConfig::default()).is_empty());
    }

    #[test]
    fn fractional_keypoint_recovered() {
        let mut p = pif_empty(4, 8, 8);
        splat(&mut p, 1, 2.5, 3.25);
        let k = extract_keypoints(&p, &DecodeConfig::default());
        assert_eq!(k.len(), 1);
        assert_eq!(k[0].class, 1);
        assert!((k[0].x - 2.5).abs() < 0.5 && (k[0].y - 3.25).abs() < 0.5);
    }

    #[test]
    fn separated_keypoints_both_kept() {
        let mut p = pif_empty(4, 16, 16);
        splat(&mut p, 2, 2.5, 3.5);
        splat(&mut p, 2, 12.5, 3.5);
        let k = extract_keypoints(&p, &DecodeConfig::default());
        assert_eq!(k.len(), 2);
    }

    #[test]
    fn raw_conversion_squashes() {
        let raw = vec![0.0f32; PIF_CHANNELS * 4];
        let p = PifMaps::from_raw(&raw, 1, 2, 2).unwrap();
        assert!(p.conf.iter().all(|&c| c == 0.5));
        assert!(p.sigma.iter().all(|&s| (s - 2f64.ln()).abs() < 1e-15));
        assert!(PifMaps::from_raw(&raw, 2, 2, 2).is_err());
    }

    #[test]
    fn associate_without_keypoints_is_empty() {
        let paf = PafMaps {
            types: 1,
            height: 2,
            width: 2,
            conf: vec![1.0; 4],
            x1: vec![0.0; 4],
            y1: vec![0.0; 4],
            x2: vec![0.0; 4],
            y2: vec![0.0; 4],
        };
        assert!(associate(&paf, &[], &DecodeConfig::default()).is_empty());
    }

    fn seg_from_rows(rows: &[&str]) -> SegMaps {
        let h = rows.len();
        let w = rows[0].len();
        let mask: Vec<u32> = rows
            .iter()
            .flat_map(|r| r.bytes().map(|b| (b - b'0') as u32))
            .collect();
        SegMaps::from_mask(&mask, 5, h, w)
    }

    fn unit_grid(h: usize, w: usize) -> GridGeometry {
        GridGeometry {
            scale: 1.0,
            height: h,
            width: w,
        }
    }

    #[test]
    fn segmentation_background_only() {
        let s = seg_from_rows(&["0000", "0000"]);
        assert!(entities_from_segmentation(&s, &unit_grid(2, 4), 3).is_empty());
    }

    #[test]
    fn segmentation_single_block() {
        let s = seg_from_rows(&["000000", "022220", "022220", "022220", "000000"]);
        let e = entities_from_segmentation(&s, &unit_grid(5, 6), 3);
        assert_eq!(e.len(), 1);
        assert_eq!(e[0].label, Label::Question);
        assert_eq!(e[0].bbox, BoxPx::new(1, 1, 5, 4));
        assert_eq!(e[0].area, 12);
    }

    #[test]
    fn diagonal_blocks_are_separate() {
        let s = seg_from_rows(&["3300", "3300", "0033", "0033"]);
        let e = entities_from_segmentation(&s, &unit_grid(4, 4), 3);
        assert_eq!(e.len(), 2);
        assert_eq!(e[0].bbox, BoxPx::new(0, 0, 2, 2));
        assert_eq!(e[1].bbox, BoxPx::new(2, 2, 4, 4));
    }

    #[test]
    fn small_components_dropped() {
        let s = seg_from_rows(&["1000", "0000", "0044"]);
        let e = entities_from_segmentation(&s, &unit_grid(3, 4), 3);
        assert!(e.is_empty());
        let e = entities_from_segmentation(&s, &unit_grid(3, 4), 1);
        assert_eq!(e.len(), 2);
    }

    #[test]
    fn assemble_exact_corner_and_out_of_range() {
        let grid = GridGeometry {
            scale: 4.0,
            height: 32,
            width: 32,
        };
        let field = FieldGeometry::new(grid, 4);
        let boxes = [
            SegEntity {
                label: Label::Question,
                bbox: BoxPx::new(16, 0, 48, 32),
                score: 1.0,
                area: 1,
            },
            SegEntity {
                label: Label::Answer,
                bbox: BoxPx::new(64, 0, 96, 32),
                score: 1.0,
                area: 1,
            },
        ];
        let kp = |class: Label, x: f64, y: f64| Keypoint {
            class: class.index(),
            x,
            y,
            score: 1.0,
            sigma: 1.0,
        };
        // bottom-left corners (16, 32) and (64, 32) are (1, 2) and (4, 2) in field cells
        let kps = [
            kp(Label::Question, 1.0, 2.0),
            kp(Label::Answer, 4.0, 2.0),
            kp(Label::Answer, 7.5, 7.5),
        ];
        let links = [
            KeypointLink {
                question: 0,
                answer: 1,
                score: 0.9,
            },
            KeypointLink {
                question: 0,
                answer: 2,
                score: 0.8,
            },
        ];
        let d = assemble(&boxes, &kps, &links, &field, (128, 128), &DecodeConfig::default());
        assert_eq!(d.links.len(), 1);
        assert_eq!((d.links[0].question, d.links[0].answer), (0, 1));
        assert_eq!(d.dropped_links, 1);
    }

    #[test]
    fn json_carries_scores() {
        let d = DecodedForm {
            page_width: 10,
            page_height: 10,
            entities: vec![
                DecodedEntity {
                    id: 0,
                    label: Label::Question,
                    bbox: BoxPx::new(0, 0, 2, 2),
                    score: 0.5,
                },
                DecodedEntity {
                    id: 1,
                    label: Label::Answer,
                    bbox: BoxPx::new(4, 0, 6, 2),
                    score: 0.25,
                },
            ],
            links: vec![DecodedLink {
                question: 0,
                answer: 1,
                score: 0.125,
            }],
            dropped_links: 0,
        };
        let v = d.to_json();
        assert_eq!(v["form"][0]["score"], 0.5);
        assert_eq!(v["form"][1]["link_scores"][0], 0.125);
        let back = crate::funsd::parse_form(&serde_json::to_vec(&v).unwrap()).unwrap();
        assert_eq!(back.links, vec![(0, 1)]);
        assert_eq!(back.entities.len(), 2);
    }
}
