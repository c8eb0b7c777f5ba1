#![allow(dead_code)]

use msaupaf::baseline::{DistanceMode, LabeledBox};
use msaupaf::funsd::{BoxPx, Label};

/// Squared distance in doubled integer coordinates, so centers stay exact.
fn doubled_dist_sq(a: &BoxPx, b: &BoxPx, mode: DistanceMode) -> i64 {
    let (ax1, ay1, ax2, ay2) = (a.x1 as i64, a.y1 as i64, a.x2 as i64, a.y2 as i64);
    let (bx1, by1, bx2, by2) = (b.x1 as i64, b.y1 as i64, b.x2 as i64, b.y2 as i64);
    match mode {
        DistanceMode::Center => {
            let dx = (ax1 + ax2) - (bx1 + bx2);
            let dy = (ay1 + ay2) - (by1 + by2);
            dx * dx + dy * dy
        }
        DistanceMode::NearestEdge => {
            // gap along an axis is zero when the intervals overlap
            let gap = |lo1: i64, hi1: i64, lo2: i64, hi2: i64| {
                if hi1 < lo2 {
                    lo2 - hi1
                } else if hi2 < lo1 {
                    lo1 - hi2
                } else {
                    0
                }
            };
            let dx = 2 * gap(ax1, ax2, bx1, bx2);
            let dy = 2 * gap(ay1, ay2, by1, by2);
            dx * dx + dy * dy
        }
    }
}

/// All-pairs oracle: every answer scans every question, keeping the
/// smallest distance and, among equals, the smallest id.
pub fn brute_force_links(entities: &[LabeledBox], mode: DistanceMode) -> Vec<(u32, u32)> {
    let mut out = Vec::new();
    for a in entities.iter().filter(|e| e.label == Label::Answer) {
        let mut best: Option<(i64, u32)> = None;
        for q in entities.iter().filter(|e| e.label == Label::Question) {
            let d = doubled_dist_sq(&q.bbox, &a.bbox, mode);
            let better = match best {
                None => true,
                Some((bd, bid)) => d < bd || (d == bd && q.id < bid),
            };
            if better {
                best = Some((d, q.id));
            }
        }
        if let Some((_, q)) = best {
            out.push((q, a.id));
        }
    }
    out
}

/// Suffix-max by exhaustive scan: for (i, j), max over rows i..H of column j
/// plus max over columns j..W of row i, per channel of a C×H×W array.
pub fn brute_force_corner_pool(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut down = f64::NEG_INFINITY;
                for ii in 0..h {
                    for jj in 0..w {
                        if jj == j && ii >= i {
                            down = down.max(x[(ch * h + ii) * w + jj]);
                        }
                    }
                }
                let mut right = f64::NEG_INFINITY;
                for ii in 0..h {
                    for jj in 0..w {
                        if ii == i && jj >= j {
                            right = right.max(x[(ch * h + ii) * w + jj]);
                        }
                    }
                }
                out[(ch * h + i) * w + j] = down + right;
            }
        }
    }
    out
}
