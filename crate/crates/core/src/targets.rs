//! Ground-truth maps: segmentation classes, PIF and PAF targets.
//!
//! Field coordinates are in field-cell units: cell `(i, j)` covers
//! `[j, j + 1) x [i, i + 1)` and has its center at `(j + 0.5, i + 0.5)`. An
//! entity's keypoint is the bottom-left corner of its box.

use crate::chargrid::GridGeometry;
use crate::error::{Error, Result};
use crate::funsd::{BoxPx, FormDocument, Label};

pub const DEFAULT_RADIUS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldGeometry {
    pub grid: GridGeometry,
    /// Grid cells per field cell.
    pub stride: usize,
    pub height: usize,
    pub width: usize,
}

impl FieldGeometry {
    pub fn new(grid: GridGeometry, stride: usize) -> Self {
        FieldGeometry {
            grid,
            stride,
            height: grid.height.div_ceil(stride),
            width: grid.width.div_ceil(stride),
        }
    }

    /// Page pixels per field cell.
    pub fn cell_px(&self) -> f64 {
        self.grid.scale * self.stride as f64
    }

    pub fn page_to_field(&self, x: f64, y: f64) -> (f64, f64) {
        (x / self.cell_px(), y / self.cell_px())
    }

    pub fn field_to_page(&self, x: f64, y: f64) -> (f64, f64) {
        (x * self.cell_px(), y * self.cell_px())
    }

    /// Keypoint of a page box in field units, clamped to the field extent.
    pub fn keypoint(&self, b: &BoxPx) -> (f64, f64) {
        let (x, y) = b.bottom_left();
        let (fx, fy) = self.page_to_field(x, y);
        let (cx, cy) = (fx.clamp(0.0, self.width as f64), fy.clamp(0.0, self.height as f64));
        if (cx, cy) != (fx, fy) {
            log::warn!("keypoint ({fx:.2}, {fy:.2}) outside the field; clamped");
        }
        (cx, cy)
    }

    /// Cells whose centers lie within `r` of `(x, y)`, in row-major order,
    /// with their center distance.
    pub fn cells_near(&self, x: f64, y: f64, r: f64) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        let lo = |v: f64| (v - r - 0.5).floor().max(0.0) as usize;
        let hi = |v: f64, n: usize| ((v + r).ceil().max(0.0) as usize).min(n);
        for i in lo(y)..hi(y, self.height) {
            for j in lo(x)..hi(x, self.width) {
                let d = ((j as f64 + 0.5 - x).powi(2) + (i as f64 + 0.5 - y).powi(2)).sqrt();
                if d <= r {
                    out.push((i, j, d));
                }
            }
        }
        out
    }
}

/// Per-cell class indices (0 background, else `label.seg_class()`); where
/// boxes overlap the smaller one wins.
pub fn encode_seg_mask(form: &FormDocument, grid: &GridGeometry) -> Vec<u32> {
    let mut mask = vec![0u32; grid.height * grid.width];
    let mut order: Vec<usize> = (0..form.entities.len()).collect();
    // larger first so smaller boxes are painted on top; stable for equal areas
    order.sort_by_key(|&i| std::cmp::Reverse(form.entities[i].bbox.area()));
    for i in order {
        let e = &form.entities[i];
        let (rows, cols) = grid.cell_span(&e.bbox);
        for r in rows {
            for c in cols.clone() {
                mask[r * grid.width + c] = e.label.seg_class() as u32;
            }
        }
    }
    mask
}

/// PIF targets for `K` keypoint classes, each field `K x H_f x W_f`.
#[derive(Debug, Clone, PartialEq)]
pub struct PifTarget {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub conf: Vec<f64>,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
    pub sigma: Vec<f64>,
    pub active: Vec<bool>,
    /// Entity index assigned to each active cell.
    pub owner: Vec<Option<usize>>,
}

impl PifTarget {
    pub fn index(&self, class: usize, i: usize, j: usize) -> usize {
        (class * self.height + i) * self.width + j
    }

    pub fn n_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

/// PAF targets for `L` link types, each field `L x H_f x W_f`.
#[derive(Debug, Clone, PartialEq)]
pub struct PafTarget {
    pub types: usize,
    pub height: usize,
    pub width: usize,
    pub conf: Vec<f64>,
    pub x1: Vec<f64>,
    pub y1: Vec<f64>,
    pub x2: Vec<f64>,
    pub y2: Vec<f64>,
    pub active: Vec<bool>,
    /// Link index (into `form.links`) assigned to each active cell.
    pub owner: Vec<Option<usize>>,
}

impl PafTarget {
    pub fn index(&self, ty: usize, i: usize, j: usize) -> usize {
        (ty * self.height + i) * self.width + j
    }

    pub fn n_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

fn check_radius(r: f64) -> Result<()> {
    if r.is_finite() && r >= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("target radius must be at least 1 field cell, got {r}")))
    }
}

/// Each cell near a keypoint regresses the nearest keypoint of the same
/// class (ties to the earlier entity).
pub fn encode_pif_targets(
    form: &FormDocument,
    field: &FieldGeometry,
    radius: f64,
    classes: usize,
) -> Result<PifTarget> {
    check_radius(radius)?;
    let n = classes * field.height * field.width;
    let mut t = PifTarget {
        classes,
        height: field.height,
        width: field.width,
        conf: vec![0.0; n],
        dx: vec![0.0; n],
        dy: vec![0.0; n],
        sigma: vec![0.0; n],
        active: vec![false; n],
        owner: vec![None; n],
    };
    let mut best = vec![f64::INFINITY; n];
    for (ei, e) in form.entities.iter().enumerate() {
        let class = e.label.index();
        if class >= classes {
            return Err(Error::Config(format!(
                "label {} needs at least {} keypoint classes",
                e.label,
                class + 1
            )));
        }
        let (kx, ky) = field.keypoint(&e.bbox);
        let sigma = e.bbox.height() as f64 / field.cell_px();
        for (i, j, d) in field.cells_near(kx, ky, radius) {
            let idx = t.index(class, i, j);
            if d < best[idx] {
                best[idx] = d;
                t.conf[idx] = 1.0;
                t.active[idx] = true;
                t.dx[idx] = kx - (j as f64 + 0.5);
                t.dy[idx] = ky - (i as f64 + 0.5);
                t.sigma[idx] = sigma;
                t.owner[idx] = Some(ei);
            }
        }
    }
    Ok(t)
}

/// Each cell near either endpoint of a link carries that link's two
/// endpoint offsets. Competing links are ranked by the cell's distance to
/// their nearer endpoint, then to their farther endpoint, then link order.
pub fn encode_paf_targets(form: &FormDocument, field: &FieldGeometry, radius: f64) -> Result<PafTarget> {
    check_radius(radius)?;
    let n = field.height * field.width;
    let mut t = PafTarget {
        types: 1,
        height: field.height,
        width: field.width,
        conf: vec![0.0; n],
        x1: vec![0.0; n],
        y1: vec![0.0; n],
        x2: vec![0.0; n],
        y2: vec![0.0; n],
        active: vec![false; n],
        owner: vec![None; n],
    };
    let mut best = vec![(f64::INFINITY, f64::INFINITY); n];
    for (li, &(q, a)) in form.links.iter().enumerate() {
        let (Some(qe), Some(ae)) = (form.entity(q), form.entity(a)) else {
            return Err(Error::Validation(format!("link ({q}, {a}) references a missing entity")));
        };
        let p1 = field.keypoint(&qe.bbox);
        let p2 = field.keypoint(&ae.bbox);
        let mut cells = field.cells_near(p1.0, p1.1, radius);
        cells.extend(field.cells_near(p2.0, p2.1, radius));
        for (i, j, _) in cells {
            let (cx, cy) = (j as f64 + 0.5, i as f64 + 0.5);
            let d1 = ((p1.0 - cx).powi(2) + (p1.1 - cy).powi(2)).sqrt();
            let d2 = ((p2.0 - cx).powi(2) + (p2.1 - cy).powi(2)).sqrt();
            let key = (d1.min(d2), d1.max(d2));
            let idx = i * field.width + j;
            if key < best[idx] {
                best[idx] = key;
                t.conf[idx] = 1.0;
                t.active[idx] = true;
                t.x1[idx] = p1.0 - cx;
                t.y1[idx] = p1.1 - cy;
                t.x2[idx] = p2.0 - cx;
                t.y2[idx] = p2.1 - cy;
                t.owner[idx] = Some(li);
            }
        }
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetFields {
    pub height: usize,
    pub width: usize,
    pub seg_mask: Vec<u32>,
    /// 1 on question cells, 0 elsewhere.
    pub key_mask: Vec<f64>,
    pub pif: PifTarget,
    pub paf: PafTarget,
}

pub fn encode_targets(
    form: &FormDocument,
    grid: &GridGeometry,
    stride: usize,
    radius: f64,
    keypoint_classes: usize,
) -> Result<TargetFields> {
    let field = FieldGeometry::new(*grid, stride);
    let seg_mask = encode_seg_mask(form, grid);
    let q = Label::Question.seg_class() as u32;
    let key_mask = seg_mask.iter().map(|&c| if c == q { 1.0 } else { 0.0 }).collect();
    Ok(TargetFields {
        height: grid.height,
        width: grid.width,
        seg_mask,
        key_mask,
        pif: encode_pif_targets(form, &field, radius, keypoint_classes)?,
        paf: encode_paf_targets(form, &field, radius)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funsd::{Entity, WordBox};

    fn grid(h: usize, w: usize) -> GridGeometry {
        GridGeometry {
            scale: 1.0,
            height: h,
            width: w,
        }
    }

    fn entity(id: u32, label: Label, b: [i32; 4]) -> Entity {
        let bbox = BoxPx::new(b[0], b[1], b[2], b[3]);
        Entity {
            id,
            label,
            bbox,
            text: "X".into(),
            words: vec![WordBox {
                text: "X".into(),
                bbox,
            }],
            links: vec![],
        }
    }

    fn form(entities: Vec<Entity>, links: Vec<(u32, u32)>, w: u32, h: u32) -> FormDocument {
        let mut f = FormDocument {
            page_width: w,
            page_height: h,
            entities,
            links,
        };
        f.sync_entity_links();
        f
    }

    #[test]
    fn seg_mask_single_entity() {
        let f = form(vec![entity(0, Label::Question, [0, 0, 3, 3])], vec![], 5, 4);
        let m = encode_seg_mask(&f, &grid(4, 5));
        let q = Label::Question.seg_class() as u32;
        for r in 0..4 {
            for c in 0..5 {
                assert_eq!(m[r * 5 + c], if r < 3 && c < 3 { q } else { 0 });
            }
        }
    }

    #[test]
    fn seg_mask_empty_form() {
        let f = form(vec![], vec![], 4, 4);
        assert!(encode_seg_mask(&f, &grid(4, 4)).iter().all(|&c| c == 0));
    }

    #[test]
    fn smaller_box_wins_overlap() {
        // header listed first and inside a larger "other" box
        let f = form(
            vec![
                entity(0, Label::Header, [2, 2, 4, 4]),
                entity(1, Label::Other, [0, 0, 8, 8]),
            ],
            vec![],
            8,
            8,
        );
        let m = encode_seg_mask(&f, &grid(8, 8));
        for r in 0..8 {
            for c in 0..8 {
                let inside = (2..4).contains(&r) && (2..4).contains(&c);
                let want = if inside { Label::Header } else { Label::Other };
                assert_eq!(m[r * 8 + c], want.seg_class() as u32);
            }
        }
    }

    #[test]
    fn pif_centered_keypoint() {
        // box x1 = 5, y2 = 7 at 2 px per cell puts the keypoint on the center of cell (3, 2)
        let g = GridGeometry {
            scale: 2.0,
            height: 10,
            width: 10,
        };
        let fg = FieldGeometry::new(g, 1);
        let f = form(vec![entity(0, Label::Answer, [5, 1, 9, 7])], vec![], 20, 20);
        let t = encode_pif_targets(&f, &fg, 1.0, 4).unwrap();
        let c = Label::Answer.index();
        let idx = t.index(c, 3, 2);
        assert!(t.active[idx]);
        assert_eq!(t.conf[idx], 1.0);
        assert_eq!((t.dx[idx], t.dy[idx]), (0.0, 0.0));
        assert_eq!(t.sigma[idx], 3.0);
        // other classes untouched
        assert!(!t.active[t.index(0, 3, 2)]);
    }

    #[test]
    fn pif_no_entities() {
        let fg = FieldGeometry::new(grid(8, 8), 4);
        let t = encode_pif_targets(&form(vec![], vec![], 8, 8), &fg, 1.0, 4).unwrap();
        assert_eq!(t.n_active(), 0);
        assert!(t.conf.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn pif_fractional_offsets() {
        // keypoint at (2.5, 3.25): page box x1 = 10, y2 = 13 with 4 px per field cell
        let fg = FieldGeometry::new(grid(40, 40), 4);
        let f = form(vec![entity(0, Label::Question, [10, 5, 20, 13])], vec![], 40, 40);
        let t = encode_pif_targets(&f, &fg, 1.0, 4).unwrap();
        let c = Label::Question.index();
        let (kx, ky) = (2.5, 3.25);
        let mut seen = 0;
        for i in 0..fg.height {
            for j in 0..fg.width {
                let (cx, cy) = (j as f64 + 0.5, i as f64 + 0.5);
                let near = ((cx - kx).powi(2) + (cy - ky).powi(2)).sqrt() <= 1.0;
                let idx = t.index(c, i, j);
                assert_eq!(t.active[idx], near, "cell ({i}, {j})");
                if near {
                    assert_eq!(t.dx[idx], kx - cx);
                    assert_eq!(t.dy[idx], ky - cy);
                    seen += 1;
                }
            }
        }
        assert_eq!(seen, 2);
    }

    #[test]
    fn every_keypoint_activates_a_cell() {
        let fg = FieldGeometry::new(grid(40, 40), 4);
        for x in 0..40 {
            let f = form(vec![entity(0, Label::Other, [x, 0, 40, x.max(1)])], vec![], 40, 40);
            let t = encode_pif_targets(&f, &fg, 1.0, 4).unwrap();
            assert!(t.n_active() >= 1);
        }
    }

    #[test]
    fn paf_single_link() {
        let fg = FieldGeometry::new(grid(40, 40), 4);
        let f = form(
            vec![
                entity(0, Label::Question, [2, 6, 8, 10]),
                entity(1, Label::Answer, [26, 22, 34, 30]),
            ],
            vec![(0, 1)],
            40,
            40,
        );
        let t = encode_paf_targets(&f, &fg, 1.0).unwrap();
        let (p1, p2) = ((0.5, 2.5), (6.5, 7.5));
        let mut near1 = 0;
        let mut near2 = 0;
        for i in 0..fg.height {
            for j in 0..fg.width {
                let idx = t.index(0, i, j);
                if !t.active[idx] {
                    continue;
                }
                let (cx, cy) = (j as f64 + 0.5, i as f64 + 0.5);
                assert_eq!((t.x1[idx], t.y1[idx]), (p1.0 - cx, p1.1 - cy));
                assert_eq!((t.x2[idx], t.y2[idx]), (p2.0 - cx, p2.1 - cy));
                if (cx - p1.0).abs() <= 1.0 && (cy - p1.1).abs() <= 1.0 {
                    near1 += 1;
                } else {
                    near2 += 1;
                }
            }
        }
        assert!(near1 > 0 && near2 > 0);
    }

    #[test]
    fn paf_no_links() {
        let fg = FieldGeometry::new(grid(8, 8), 4);
        let f = form(vec![entity(0, Label::Question, [0, 0, 2, 2])], vec![], 8, 8);
        assert_eq!(encode_paf_targets(&f, &fg, 1.0).unwrap().n_active(), 0);
    }

    #[test]
    fn shared_question_prefers_nearer_answer() {
        let fg = FieldGeometry::new(grid(80, 80), 4);
        let f = form(
            vec![
                entity(0, Label::Question, [8, 10, 20, 18]),
                entity(1, Label::Answer, [60, 60, 70, 70]),
                entity(2, Label::Answer, [40, 10, 50, 18]),
            ],
            vec![(0, 1), (0, 2)],
            80,
            80,
        );
        let t = encode_paf_targets(&f, &fg, 1.0).unwrap();
        let q = fg.keypoint(&f.entities[0].bbox);
        let a_far = fg.keypoint(&f.entities[1].bbox);
        let a_near = fg.keypoint(&f.entities[2].bbox);
        for (i, j, _) in fg.cells_near(q.0, q.1, 1.0) {
            let idx = t.index(0, i, j);
            let (cx, cy) = (j as f64 + 0.5, i as f64 + 0.5);
            let d_far = ((a_far.0 - cx).powi(2) + (a_far.1 - cy).powi(2)).sqrt();
            let d_near = ((a_near.0 - cx).powi(2) + (a_near.1 - cy).powi(2)).sqrt();
            assert!(d_near < d_far);
            assert_eq!(t.owner[idx], Some(1));
        }
    }

    #[test]
    fn radius_below_one_is_rejected() {
        let fg = FieldGeometry::new(grid(8, 8), 4);
        let f = form(vec![], vec![], 8, 8);
        assert!(encode_pif_targets(&f, &fg, 0.5, 4).is_err());
        assert!(encode_paf_targets(&f, &fg, f64::NAN).is_err());
    }
}
