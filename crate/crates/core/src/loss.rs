//! Training objective.

use crate::config::{value, Section};
use crate::error::{Error, Result};
use crate::net::{FieldVars, PAF_CHANNELS, PIF_CHANNELS};
use crate::targets::TargetFields;
use crate::tensor::{Graph, Real, Var};

/// Floor on the Laplace scale.
pub const B_MIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1e-2,
            lambda3: 1e-2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{k} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

impl Section for LossWeights {
    fn set(&mut self, key: &str, raw: &str) -> Result<bool> {
        match key {
            "lambda1" => self.lambda1 = value(key, raw)?,
            "lambda2" => self.lambda2 = value(key, raw)?,
            "lambda3" => self.lambda3 = value(key, raw)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("lambda1".into(), self.lambda1.to_string()),
            ("lambda2".into(), self.lambda2.to_string()),
            ("lambda3".into(), self.lambda3.to_string()),
        ]
    }
}

/// Values of every loss term for one sample.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub seg_ce: f64,
    pub key_bce: f64,
    pub pif_conf: f64,
    pub pif_loc: f64,
    pub pif_sigma: f64,
    pub paf_conf: f64,
    pub paf_loc: f64,
    pub ce: f64,
    pub pif: f64,
    pub paf: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [(&'static str, f64); 11] {
        [
            ("seg_ce", self.seg_ce),
            ("key_bce", self.key_bce),
            ("pif_conf", self.pif_conf),
            ("pif_loc", self.pif_loc),
            ("pif_sigma", self.pif_sigma),
            ("paf_conf", self.paf_conf),
            ("paf_loc", self.paf_loc),
            ("ce", self.ce),
            ("pif", self.pif),
            ("paf", self.paf),
            ("total", self.total),
        ]
    }

    /// `loss.<term>=<value>` tokens separated by spaces.
    pub fn key_values(&self) -> String {
        self.terms()
            .iter()
            .map(|(k, v)| format!("loss.{k}={v:.6}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn accumulate(&mut self, other: &LossBreakdown, scale: f64) {
        let fields = [
            (&mut self.seg_ce, other.seg_ce),
            (&mut self.key_bce, other.key_bce),
            (&mut self.pif_conf, other.pif_conf),
            (&mut self.pif_loc, other.pif_loc),
            (&mut self.pif_sigma, other.pif_sigma),
            (&mut self.paf_conf, other.paf_conf),
            (&mut self.paf_loc, other.paf_loc),
            (&mut self.ce, other.ce),
            (&mut self.pif, other.pif),
            (&mut self.paf, other.paf),
            (&mut self.total, other.total),
        ];
        for (dst, v) in fields {
            *dst += v * scale;
        }
    }
}

fn cast<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::from_f64(x)).collect()
}

fn active_weights<T: Real>(active: &[bool]) -> Vec<T> {
    let n = active.iter().filter(|&&a| a).count();
    let w = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    active.iter().map(|&a| T::from_f64(if a { w } else { 0.0 })).collect()
}

fn channels(groups: usize, stride: usize, offset: usize) -> Vec<usize> {
    (0..groups).map(|k| k * stride + offset).collect()
}

fn checked<T: Real>(g: &Graph<T>, v: Var, term: &'static str) -> Result<f64> {
    let x = g.value(v).item().to_f64();
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFiniteLoss { term })
    }
}

/// Build the weighted sum of all terms on `g`. Fails with
/// [`Error::NonFiniteLoss`] naming the first term that is not finite.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    out: &FieldVars,
    t: &TargetFields,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    if (out.height, out.width) != (t.height, t.width)
        || (out.field_height, out.field_width) != (t.pif.height, t.pif.width)
        || (t.paf.height, t.paf.width) != (t.pif.height, t.pif.width)
    {
        return Err(Error::shape("targets do not match the network output extent"));
    }
    let n_cells = t.height * t.width;
    let mut b = LossBreakdown::default();

    let seg_ce = g.softmax_cross_entropy(out.seg_full, &t.seg_mask)?;
    b.seg_ce = checked(g, seg_ce, "seg_ce")?;
    let key_bce = g.bce_logits(
        out.seg_key,
        cast(&t.key_mask),
        vec![T::from_f64(1.0 / n_cells as f64); n_cells],
    )?;
    b.key_bce = checked(g, key_bce, "key_bce")?;
    let ce = g.add(seg_ce, key_bce)?;
    b.ce = checked(g, ce, "ce")?;

    let pif = &t.pif;
    let k = pif.classes;
    let n_pif = pif.conf.len();
    let conf = g.select_channels(out.pif, &channels(k, PIF_CHANNELS, 0))?;
    let pif_conf = g.bce_logits(conf, cast(&pif.conf), vec![T::from_f64(1.0 / n_pif as f64); n_pif])?;
    b.pif_conf = checked(g, pif_conf, "pif_conf")?;
    let aw = active_weights::<T>(&pif.active);
    let mx = g.select_channels(out.pif, &channels(k, PIF_CHANNELS, 1))?;
    let my = g.select_channels(out.pif, &channels(k, PIF_CHANNELS, 2))?;
    let sb = g.select_channels(out.pif, &channels(k, PIF_CHANNELS, 3))?;
    let lx = g.laplace(mx, sb, cast(&pif.dx), aw.clone(), B_MIN)?;
    let ly = g.laplace(my, sb, cast(&pif.dy), aw.clone(), B_MIN)?;
    let pif_loc = g.add(lx, ly)?;
    b.pif_loc = checked(g, pif_loc, "pif_loc")?;
    let sr = g.select_channels(out.pif, &channels(k, PIF_CHANNELS, 4))?;
    let sigma = g.softplus(sr);
    let pif_sigma = g.weighted_l1(sigma, cast(&pif.sigma), aw)?;
    b.pif_sigma = checked(g, pif_sigma, "pif_sigma")?;
    let pif_sum = g.add(pif_conf, pif_loc)?;
    let pif_sum = g.add(pif_sum, pif_sigma)?;
    b.pif = checked(g, pif_sum, "pif")?;

    let paf = &t.paf;
    let l = paf.types;
    let n_paf = paf.conf.len();
    let conf = g.select_channels(out.paf, &channels(l, PAF_CHANNELS, 0))?;
    let paf_conf = g.bce_logits(conf, cast(&paf.conf), vec![T::from_f64(1.0 / n_paf as f64); n_paf])?;
    b.paf_conf = checked(g, paf_conf, "paf_conf")?;
    let aw = active_weights::<T>(&paf.active);
    let b1 = g.select_channels(out.paf, &channels(l, PAF_CHANNELS, 3))?;
    let b2 = g.select_channels(out.paf, &channels(l, PAF_CHANNELS, 6))?;
    let mut paf_loc = None;
    for (offset, scale, target) in [(1, b1, &paf.x1), (2, b1, &paf.y1), (4, b2, &paf.x2), (5, b2, &paf.y2)] {
        let mu = g.select_channels(out.paf, &channels(l, PAF_CHANNELS, offset))?;
        let term = g.laplace(mu, scale, cast(target), aw.clone(), B_MIN)?;
        paf_loc = Some(match paf_loc {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    let paf_loc = paf_loc.expect("four coordinate terms");
    b.paf_loc = checked(g, paf_loc, "paf_loc")?;
    let paf_sum = g.add(paf_conf, paf_loc)?;
    b.paf = checked(g, paf_sum, "paf")?;

    let t1 = g.scalar_mul(ce, w.lambda1);
    let t2 = g.scalar_mul(pif_sum, w.lambda2);
    let t3 = g.scalar_mul(paf_sum, w.lambda3);
    let total = g.add(t1, t2)?;
    let total = g.add(total, t3)?;
    b.total = checked(g, total, "total")?;
    Ok((total, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chargrid::GridGeometry;
    use crate::funsd::{BoxPx, Entity, FormDocument, Label, WordBox};
    use crate::net::{Net, NetConfig};
    use crate::targets::encode_targets;
    use crate::tensor::gradcheck::GradCheck;
    use crate::tensor::NdArray;

    fn entity(id: u32, label: Label, b: [i32; 4]) -> Entity {
        let bbox = BoxPx::new(b[0], b[1], b[2], b[3]);
        Entity {
            id,
            label,
            bbox,
            text: "a".into(),
            words: vec![WordBox { text: "a".into(), bbox }],
            links: vec![],
        }
    }

    fn sample() -> (FormDocument, GridGeometry) {
        let mut f = FormDocument {
            page_width: 16,
            page_height: 16,
            entities: vec![
                entity(0, Label::Question, [1, 2, 6, 5]),
                entity(1, Label::Answer, [8, 2, 14, 5]),
                entity(2, Label::Header, [2, 10, 12, 13]),
            ],
            links: vec![(0, 1)],
        };
        f.sync_entity_links();
        let g = GridGeometry {
            scale: 1.0,
            height: 16,
            width: 16,
        };
        (f, g)
    }

    fn tiny() -> NetConfig {
        NetConfig {
            n_char: 3,
            base_channels: 2,
            max_channels: 4,
            head_channels: 3,
            res_depth: 1,
            n_downsampling: 3,
            ..Default::default()
        }
    }

    fn cells() -> Vec<u16> {
        (0..256).map(|i| ((i * 7 + i / 16) % 4) as u16).collect()
    }

    fn eval(net: &Net, params: &[NdArray<f64>], t: &TargetFields, w: &LossWeights) -> LossBreakdown {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = params.iter().map(|p| g.parameter(p.clone())).collect();
        let out = net.forward(&mut g, &vars, &cells(), 16, 16).unwrap();
        total_loss(&mut g, &out, t, w).unwrap().1
    }

    #[test]
    fn total_is_weighted_sum() {
        let (f, grid) = sample();
        let net = Net::new(tiny()).unwrap();
        let t = encode_targets(&f, &grid, 4, 1.0, 4).unwrap();
        let params: Vec<NdArray<f64>> = net.init_params(3).iter().map(|p| p.cast()).collect();
        let w = LossWeights {
            lambda1: 0.7,
            lambda2: 0.3,
            lambda3: 0.2,
        };
        let b = eval(&net, &params, &t, &w);
        let want = 0.7 * b.ce + 0.3 * b.pif + 0.2 * b.paf;
        assert!((b.total - want).abs() < 1e-12);
        assert!((b.ce - b.seg_ce - b.key_bce).abs() < 1e-12);
        assert!((b.pif - b.pif_conf - b.pif_loc - b.pif_sigma).abs() < 1e-12);
        assert!((b.paf - b.paf_conf - b.paf_loc).abs() < 1e-12);
    }

    #[test]
    fn field_weights_zero_reduces_to_ce() {
        let (f, grid) = sample();
        let net = Net::new(tiny()).unwrap();
        let t = encode_targets(&f, &grid, 4, 1.0, 4).unwrap();
        let params: Vec<NdArray<f64>> = net.init_params(5).iter().map(|p| p.cast()).collect();
        let w = LossWeights {
            lambda1: 1.0,
            lambda2: 0.0,
            lambda3: 0.0,
        };
        let b = eval(&net, &params, &t, &w);
        assert_eq!(b.total, b.ce);
    }

    #[test]
    fn zero_logits_give_closed_form_terms() {
        // with all outputs zero: CE = ln(C), BCE = ln 2, b = softplus(0) = ln 2
        let (f, grid) = sample();
        let t = encode_targets(&f, &grid, 4, 1.0, 4).unwrap();
        let mut g = Graph::<f64>::new();
        let z = |g: &mut Graph<f64>, c: usize, h: usize, w: usize| g.constant(NdArray::zeros(&[c, h, w]));
        let out = FieldVars {
            seg_key: z(&mut g, 1, 16, 16),
            seg_full: z(&mut g, 5, 16, 16),
            pif: z(&mut g, 20, 4, 4),
            paf: z(&mut g, 7, 4, 4),
            height: 16,
            width: 16,
            field_height: 4,
            field_width: 4,
        };
        let b = total_loss(&mut g, &out, &t, &LossWeights::default()).unwrap().1;
        let ln2 = 2f64.ln();
        assert!((b.seg_ce - 5f64.ln()).abs() < 1e-12);
        assert!((b.key_bce - ln2).abs() < 1e-12);
        assert!((b.pif_conf - ln2).abs() < 1e-12);
        assert!((b.paf_conf - ln2).abs() < 1e-12);
        // mean over active cells of |d| / ln2 + ln(2 ln2), twice
        let n = t.pif.n_active() as f64;
        let mut want = 0.0;
        let mut sigma = 0.0;
        for i in 0..t.pif.active.len() {
            if t.pif.active[i] {
                want += (t.pif.dx[i].abs() + t.pif.dy[i].abs()) / ln2 + 2.0 * (2.0 * ln2).ln();
                sigma += (ln2 - t.pif.sigma[i]).abs();
            }
        }
        assert!((b.pif_loc - want / n).abs() < 1e-12);
        assert!((b.pif_sigma - sigma / n).abs() < 1e-12);
    }

    #[test]
    fn non_finite_term_is_named() {
        let (f, grid) = sample();
        let t = encode_targets(&f, &grid, 4, 1.0, 4).unwrap();
        let mut g = Graph::<f64>::new();
        let mut seg = NdArray::zeros(&[5, 16, 16]);
        seg.data_mut()[0] = f64::NAN;
        let out = FieldVars {
            seg_key: g.constant(NdArray::zeros(&[1, 16, 16])),
            seg_full: g.constant(seg),
            pif: g.constant(NdArray::zeros(&[20, 4, 4])),
            paf: g.constant(NdArray::zeros(&[7, 4, 4])),
            height: 16,
            width: 16,
            field_height: 4,
            field_width: 4,
        };
        match total_loss(&mut g, &out, &t, &LossWeights::default()) {
            Err(Error::NonFiniteLoss { term }) => assert_eq!(term, "seg_ce"),
            other => panic!("expected a non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let (f, grid) = sample();
        let net = Net::new(tiny()).unwrap();
        let t = encode_targets(&f, &grid, 4, 1.0, 4).unwrap();
        let params: Vec<NdArray<f64>> = net.init_params(11).iter().map(|p| p.cast()).collect();
        let w = LossWeights {
            lambda1: 1.0,
            lambda2: 0.5,
            lambda3: 0.5,
        };
        let cs = cells();
        let build = |g: &mut Graph<f64>, vars: &[Var]| -> Result<Var> {
            let out = net.forward(g, vars, &cs, 16, 16)?;
            Ok(total_loss(g, &out, &t, &w)?.0)
        };
        // a few elements from every parameter tensor
        let coords: Vec<(usize, usize)> = params
            .iter()
            .enumerate()
            .flat_map(|(i, p)| {
                let n = p.len();
                [0, n / 2, n - 1].into_iter().map(move |j| (i, j))
            })
            .collect();
        let report = GradCheck::default().run_subset(&params, build, &coords).unwrap();
        assert!(report.checked * 2 > coords.len(), "too many kinks: {report:?}");
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }

    #[test]
    fn section_round_trip() {
        let mut w = LossWeights::default();
        assert!(w.set("lambda2", "0.5").unwrap());
        assert!(!w.set("lr", "1").unwrap());
        assert!(w.set("lambda1", "x").is_err());
        let mut v = LossWeights::default();
        for (k, raw) in w.entries() {
            v.set(&k, &raw).unwrap();
        }
        assert_eq!(v, w);
    }
}
