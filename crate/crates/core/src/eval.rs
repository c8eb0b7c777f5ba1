//! Box F1 for entity labeling and pair F1 for entity linking.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::funsd::{BoxPx, FormDocument, Label};

pub const DEFAULT_IOU: f64 = 0.8;

/// Intersection over union in pixel area; 0 when the union is empty.
pub fn iou(a: &BoxPx, b: &BoxPx) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0) as i64;
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0) as i64;
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    fn add(&mut self, o: &Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// How class labels enter box matching.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum ClassMatch {
    /// Only same-class pairs may match.
    #[default]
    Joint,
    /// Boxes match regardless of class; a matched pair with different
    /// classes counts as a false positive and a false negative.
    Separate,
}

impl FromStr for ClassMatch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(ClassMatch::Joint),
            "separate" => Ok(ClassMatch::Separate),
            _ => Err(Error::Config(format!("unknown class matching `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelingResult {
    /// Indexed by `Label::index`.
    pub per_class: [Counts; 4],
    pub overall: Counts,
    /// Matched `(pred id, gt id, iou)` triples.
    pub matches: Vec<(u32, u32, f64)>,
}

/// Greedy one-to-one matching in descending IoU. Ties are broken by box
/// coordinates, so the result does not depend on input order.
pub fn match_and_score_labeling(
    pred: &FormDocument,
    gt: &FormDocument,
    threshold: f64,
    mode: ClassMatch,
) -> LabelingResult {
    let mut cand = Vec::new();
    for (pi, p) in pred.entities.iter().enumerate() {
        for (gi, g) in gt.entities.iter().enumerate() {
            if mode == ClassMatch::Joint && p.label != g.label {
                continue;
            }
            let v = iou(&p.bbox, &g.bbox);
            if v >= threshold && v > 0.0 {
                cand.push((v, pi, gi));
            }
        }
    }
    let key = |pi: usize, gi: usize| {
        let (p, g) = (&pred.entities[pi], &gt.entities[gi]);
        (p.bbox.as_array(), p.label.index(), g.bbox.as_array(), g.label.index())
    };
    cand.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| key(a.1, a.2).cmp(&key(b.1, b.2))));
    let mut pused = vec![false; pred.entities.len()];
    let mut gused = vec![false; gt.entities.len()];
    let mut per_class = [Counts::default(); 4];
    let mut matches = Vec::new();
    for (v, pi, gi) in cand {
        if pused[pi] || gused[gi] {
            continue;
        }
        pused[pi] = true;
        gused[gi] = true;
        let (p, g) = (&pred.entities[pi], &gt.entities[gi]);
        if p.label == g.label {
            per_class[g.label.index()].tp += 1;
            matches.push((p.id, g.id, v));
        } else {
            per_class[p.label.index()].fp += 1;
            per_class[g.label.index()].fn_ += 1;
        }
    }
    for (pi, p) in pred.entities.iter().enumerate() {
        if !pused[pi] {
            per_class[p.label.index()].fp += 1;
        }
    }
    for (gi, g) in gt.entities.iter().enumerate() {
        if !gused[gi] {
            per_class[g.label.index()].fn_ += 1;
        }
    }
    let mut overall = Counts::default();
    per_class.iter().for_each(|c| overall.add(c));
    LabelingResult {
        per_class,
        overall,
        matches,
    }
}

/// A predicted link is correct when both endpoints map to ground-truth
/// entities forming a ground-truth pair. Duplicate pairs count once.
pub fn score_linking(pred: &[(u32, u32)], gt: &[(u32, u32)], matching: &HashMap<u32, u32>) -> Counts {
    let gt: HashSet<(u32, u32)> = gt.iter().copied().collect();
    let pred: HashSet<(u32, u32)> = pred.iter().copied().collect();
    let mut hit = HashSet::new();
    for &(q, a) in &pred {
        if let (Some(&gq), Some(&ga)) = (matching.get(&q), matching.get(&a)) {
            if gt.contains(&(gq, ga)) {
                hit.insert((gq, ga));
            }
        }
    }
    Counts {
        tp: hit.len(),
        fp: pred.len() - hit.len(),
        fn_: gt.len() - hit.len(),
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub n_forms: usize,
    pub per_class: [Counts; 4],
    pub labeling: Counts,
    pub linking: Counts,
    /// Per form, matched `(pred id, gt id)` entity pairs.
    pub matched: Vec<Vec<(u32, u32)>>,
}

impl EvalReport {
    pub fn add_form(&mut self, pred: &FormDocument, gt: &FormDocument, threshold: f64, mode: ClassMatch) {
        let lab = match_and_score_labeling(pred, gt, threshold, mode);
        let map: HashMap<u32, u32> = lab.matches.iter().map(|&(p, g, _)| (p, g)).collect();
        let link = score_linking(&pred.links, &gt.links, &map);
        for (dst, src) in self.per_class.iter_mut().zip(&lab.per_class) {
            dst.add(src);
        }
        self.labeling.add(&lab.overall);
        self.linking.add(&link);
        self.matched.push(lab.matches.iter().map(|&(p, g, _)| (p, g)).collect());
        self.n_forms += 1;
    }

    /// Pairs of forms in matching order.
    pub fn from_pairs(pairs: &[(FormDocument, FormDocument)], threshold: f64, mode: ClassMatch) -> Self {
        let mut r = EvalReport::default();
        for (p, g) in pairs {
            r.add_form(p, g, threshold, mode);
        }
        r
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>6} {:>6} {:>6} {:>9} {:>7} {:>7}", "", "tp", "fp", "fn", "precision", "recall", "f1");
        let mut row = |name: &str, c: &Counts| {
            let _ = writeln!(
                s,
                "{:<10} {:>6} {:>6} {:>6} {:>9.4} {:>7.4} {:>7.4}",
                name,
                c.tp,
                c.fp,
                c.fn_,
                c.precision(),
                c.recall(),
                c.f1()
            );
        };
        for (i, c) in self.per_class.iter().enumerate() {
            row(Label::from_index(i).expect("four classes").as_str(), c);
        }
        row("labeling", &self.labeling);
        row("linking", &self.linking);
        s
    }

    pub fn key_values(&self) -> String {
        let mut s = format!("eval.forms={}\n", self.n_forms);
        let mut put = |prefix: String, c: &Counts| {
            let _ = writeln!(
                s,
                "{prefix}.tp={}\n{prefix}.fp={}\n{prefix}.fn={}\n{prefix}.precision={:.6}\n{prefix}.recall={:.6}\n{prefix}.f1={:.6}",
                c.tp,
                c.fp,
                c.fn_,
                c.precision(),
                c.recall(),
                c.f1()
            );
        };
        for (i, c) in self.per_class.iter().enumerate() {
            put(format!("eval.labeling.{}", Label::from_index(i).expect("four classes")), c);
        }
        put("eval.labeling".into(), &self.labeling);
        put("eval.linking".into(), &self.linking);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funsd::Entity;

    fn ent(id: u32, label: Label, b: [i32; 4]) -> Entity {
        Entity {
            id,
            label,
            bbox: BoxPx::new(b[0], b[1], b[2], b[3]),
            text: String::new(),
            words: vec![],
            links: vec![],
        }
    }

    fn doc(entities: Vec<Entity>, links: Vec<(u32, u32)>) -> FormDocument {
        FormDocument {
            page_width: 100,
            page_height: 100,
            entities,
            links,
        }
    }

    #[test]
    fn iou_examples() {
        let a = BoxPx::new(0, 0, 10, 10);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BoxPx::new(20, 20, 30, 30)), 0.0);
        assert_eq!(iou(&a, &BoxPx::new(5, 0, 15, 10)), 50.0 / 150.0);
        let z = BoxPx::new(3, 3, 3, 3);
        assert_eq!(iou(&z, &z), 0.0);
    }

    #[test]
    fn perfect_prediction() {
        let g = doc(vec![ent(0, Label::Question, [0, 0, 10, 10]), ent(1, Label::Answer, [20, 0, 30, 10])], vec![(0, 1)]);
        let mut r = EvalReport::default();
        r.add_form(&g, &g, DEFAULT_IOU, ClassMatch::Joint);
        assert_eq!(r.labeling.f1(), 1.0);
        assert_eq!(r.linking.f1(), 1.0);
    }

    #[test]
    fn no_predictions() {
        let g = doc(vec![ent(0, Label::Question, [0, 0, 10, 10])], vec![]);
        let l = match_and_score_labeling(&doc(vec![], vec![]), &g, DEFAULT_IOU, ClassMatch::Joint);
        assert_eq!(l.overall.recall(), 0.0);
        assert_eq!(l.overall.f1(), 0.0);
    }

    #[test]
    fn half_recall() {
        let g = doc(vec![ent(0, Label::Header, [0, 0, 10, 10]), ent(1, Label::Other, [50, 50, 60, 60])], vec![]);
        let p = doc(vec![ent(7, Label::Header, [0, 0, 10, 10])], vec![]);
        let l = match_and_score_labeling(&p, &g, DEFAULT_IOU, ClassMatch::Joint);
        assert_eq!(l.overall.precision(), 1.0);
        assert_eq!(l.overall.recall(), 0.5);
        assert_eq!(l.overall.f1(), 2.0 / 3.0);
    }

    #[test]
    fn class_disagreement_modes() {
        let g = doc(vec![ent(0, Label::Question, [0, 0, 10, 10])], vec![]);
        let p = doc(vec![ent(0, Label::Answer, [0, 0, 10, 10])], vec![]);
        let j = match_and_score_labeling(&p, &g, DEFAULT_IOU, ClassMatch::Joint);
        let s = match_and_score_labeling(&p, &g, DEFAULT_IOU, ClassMatch::Separate);
        assert_eq!(j.overall, Counts { tp: 0, fp: 1, fn_: 1 });
        assert_eq!(s.overall, j.overall);
        assert!(s.matches.is_empty());
    }

    #[test]
    fn below_threshold_is_unmatched() {
        let g = doc(vec![ent(0, Label::Question, [0, 0, 10, 10])], vec![]);
        let p = doc(vec![ent(0, Label::Question, [5, 0, 15, 10])], vec![]);
        let l = match_and_score_labeling(&p, &g, DEFAULT_IOU, ClassMatch::Joint);
        assert_eq!(l.overall, Counts { tp: 0, fp: 1, fn_: 1 });
        let l = match_and_score_labeling(&p, &g, 0.3, ClassMatch::Joint);
        assert_eq!(l.overall.tp, 1);
    }

    #[test]
    fn linking_counts() {
        let ident: HashMap<u32, u32> = (0..10).map(|i| (i, i)).collect();
        let gt = [(0, 1), (0, 2), (3, 4), (5, 6)];
        let pred = [(0, 1), (0, 2), (3, 4), (7, 8)];
        let c = score_linking(&pred, &gt, &ident);
        assert_eq!((c.precision(), c.recall(), c.f1()), (0.75, 0.75, 0.75));
        assert_eq!(score_linking(&[], &gt, &ident).f1(), 0.0);
        assert_eq!(score_linking(&gt, &gt, &ident).f1(), 1.0);
    }

    #[test]
    fn unmatched_endpoints_do_not_count() {
        let map: HashMap<u32, u32> = [(10, 0)].into_iter().collect();
        let c = score_linking(&[(10, 11)], &[(0, 1)], &map);
        assert_eq!(c, Counts { tp: 0, fp: 1, fn_: 1 });
    }

    #[test]
    fn report_outputs() {
        let g = doc(vec![ent(0, Label::Question, [0, 0, 10, 10])], vec![]);
        let r = EvalReport::from_pairs(&[(g.clone(), g)], DEFAULT_IOU, ClassMatch::Joint);
        assert!(r.table().contains("question"));
        assert!(r.key_values().contains("eval.labeling.f1=1.000000"));
        assert!(r.key_values().contains("eval.linking.f1=0.000000"));
    }
}
