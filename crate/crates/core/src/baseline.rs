//! Distance-based question/answer linking used as the comparison baseline.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::funsd::{BoxPx, Label};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceMode {
    /// Euclidean distance between box centers.
    #[default]
    Center,
    /// Euclidean distance between the closest points of the two boxes.
    NearestEdge,
}

impl FromStr for DistanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "center" => Ok(DistanceMode::Center),
            "nearest-edge" => Ok(DistanceMode::NearestEdge),
            other => Err(Error::Config(format!("unknown distance mode `{other}`"))),
        }
    }
}

/// Squared distance; comparisons never need the root.
pub fn box_distance_sq(a: &BoxPx, b: &BoxPx, mode: DistanceMode) -> f64 {
    match mode {
        DistanceMode::Center => {
            let (ax, ay) = a.center();
            let (bx, by) = b.center();
            (ax - bx).powi(2) + (ay - by).powi(2)
        }
        DistanceMode::NearestEdge => {
            let dx = (a.x1 - b.x2).max(b.x1 - a.x2).max(0) as f64;
            let dy = (a.y1 - b.y2).max(b.y1 - a.y2).max(0) as f64;
            dx * dx + dy * dy
        }
    }
}

/// A labeled box with the id it will be reported under.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabeledBox {
    pub id: u32,
    pub label: Label,
    pub bbox: BoxPx,
}

/// Pair every answer with its nearest question (ties to the lower id).
/// Output follows the input order of answers.
pub fn heuristic_link(entities: &[LabeledBox], mode: DistanceMode) -> Vec<(u32, u32)> {
    let questions: Vec<&LabeledBox> = entities.iter().filter(|e| e.label == Label::Question).collect();
    entities
        .iter()
        .filter(|e| e.label == Label::Answer)
        .filter_map(|a| {
            questions
                .iter()
                .map(|q| (box_distance_sq(&q.bbox, &a.bbox, mode), q.id))
                .min_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)))
                .map(|(_, q)| (q, a.id))
        })
        .collect()
}

pub fn labeled_boxes(form: &crate::funsd::FormDocument) -> Vec<LabeledBox> {
    form.entities
        .iter()
        .map(|e| LabeledBox {
            id: e.id,
            label: e.label,
            bbox: e.bbox,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(id: u32, label: Label, cx: i32, cy: i32) -> LabeledBox {
        LabeledBox {
            id,
            label,
            bbox: BoxPx::new(cx - 1, cy - 1, cx + 1, cy + 1),
        }
    }

    #[test]
    fn nearest_question_wins() {
        let es = [
            at(0, Label::Answer, 0, 0),
            at(1, Label::Question, 1, 0),
            at(2, Label::Question, 5, 0),
        ];
        assert_eq!(heuristic_link(&es, DistanceMode::Center), vec![(1, 0)]);
    }

    #[test]
    fn no_questions_no_links() {
        let es = [at(0, Label::Answer, 0, 0), at(1, Label::Header, 3, 3)];
        assert!(heuristic_link(&es, DistanceMode::Center).is_empty());
    }

    #[test]
    fn ties_go_to_lower_id() {
        let es = [
            at(7, Label::Question, -4, 0),
            at(3, Label::Question, 4, 0),
            at(9, Label::Answer, 0, 0),
        ];
        assert_eq!(heuristic_link(&es, DistanceMode::Center), vec![(3, 9)]);
    }

    #[test]
    fn edge_distance_of_overlapping_boxes_is_zero() {
        let a = BoxPx::new(0, 0, 10, 10);
        let b = BoxPx::new(5, 5, 20, 20);
        assert_eq!(box_distance_sq(&a, &b, DistanceMode::NearestEdge), 0.0);
        let c = BoxPx::new(13, 14, 20, 20);
        assert_eq!(box_distance_sq(&a, &c, DistanceMode::NearestEdge), 25.0);
    }
}
