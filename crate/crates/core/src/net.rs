//! The two-block attention U-Net with segmentation, PIF and PAF heads.
//!
//! Layout, for `n_downsampling = D` and field stride `2^F`:
//!
//! ```text
//! cells -> stem (one-hot 3x3 conv)
//!   block 0: [coords] enc_0 .. enc_D -> attention -> dec_{D-1} .. dec_0 -> key head
//!   block 1: input = stem + block-0 decoder output -> ... -> segmentation head
//! field branch: up(att_0) ++ up(att_1) ++ dec_F(block 1)
//!   -> f + corner_pool(f) -> [coords] 3x3 conv -> PIF (K*5) and PAF (L*7) 1x1 heads
//! ```
//!
//! Encoder stage `s` is an entry conv followed by a residual stack of
//! `res_depth` convs; decoder stages upsample, concatenate the skip and
//! apply one conv. The grid is padded to a multiple of `2^D` and every
//! output is cropped back.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{flag, value, Section};
use crate::error::{Error, Result};
use crate::tensor::{Graph, NdArray, Real, Var};

pub const PIF_CHANNELS: usize = 5;
pub const PAF_CHANNELS: usize = 7;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetConfig {
    /// Vocabulary size; the input has `n_char + 1` channels.
    pub n_char: usize,
    pub n_blocks: usize,
    pub res_depth: usize,
    pub n_downsampling: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub n_classes: usize,
    pub n_keypoint_classes: usize,
    pub n_link_types: usize,
    pub use_coordconv: bool,
    pub use_corner_pool: bool,
    /// Grid cells per field cell; a power of two no larger than `2^n_downsampling`.
    pub field_stride: usize,
    pub head_channels: usize,
    /// Field-head stages. Only 1 is implemented.
    pub n_stages: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            n_char: 90,
            n_blocks: 2,
            res_depth: 2,
            n_downsampling: 4,
            base_channels: 8,
            max_channels: 32,
            n_classes: 5,
            n_keypoint_classes: 4,
            n_link_types: 1,
            use_coordconv: true,
            use_corner_pool: true,
            field_stride: 4,
            head_channels: 32,
            n_stages: 1,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_downsampling == 0 {
            return bad("n_downsampling must be at least 1");
        }
        if !(1..=2).contains(&self.n_blocks) {
            return bad("n_blocks must be 1 or 2");
        }
        if self.n_stages != 1 {
            return bad("only a single field stage is implemented (n_stages = 1)");
        }
        if self.n_classes < 2 || self.n_keypoint_classes == 0 || self.n_link_types == 0 {
            return bad("class counts must be positive (n_classes >= 2)");
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels || self.head_channels == 0 {
            return bad("channel widths must be positive and max_channels >= base_channels");
        }
        if !self.field_stride.is_power_of_two() || self.field_stride > 1 << self.n_downsampling {
            return bad("field_stride must be a power of two no larger than 2^n_downsampling");
        }
        if self.n_char == 0 {
            return bad("n_char must be positive");
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        (self.base_channels << level.min(16)).min(self.max_channels)
    }

    fn field_level(&self) -> usize {
        self.field_stride.trailing_zeros() as usize
    }

    fn coord_channels(&self) -> usize {
        if self.use_coordconv {
            2
        } else {
            0
        }
    }

    /// Spatial multiple the input is padded to.
    pub fn alignment(&self) -> usize {
        1 << self.n_downsampling
    }
}

impl Section for NetConfig {
    fn set(&mut self, key: &str, raw: &str) -> Result<bool> {
        match key {
            "n_char" => self.n_char = value(key, raw)?,
            "n_blocks" => self.n_blocks = value(key, raw)?,
            "res_depth" => self.res_depth = value(key, raw)?,
            "n_downsampling" => self.n_downsampling = value(key, raw)?,
            "base_channels" => self.base_channels = value(key, raw)?,
            "max_channels" => self.max_channels = value(key, raw)?,
            "n_classes" => self.n_classes = value(key, raw)?,
            "n_keypoint_classes" => self.n_keypoint_classes = value(key, raw)?,
            "n_link_types" => self.n_link_types = value(key, raw)?,
            "use_coordconv" => self.use_coordconv = flag(key, raw)?,
            "use_corner_pool" => self.use_corner_pool = flag(key, raw)?,
            "field_stride" => self.field_stride = value(key, raw)?,
            "head_channels" => self.head_channels = value(key, raw)?,
            "n_stages" => self.n_stages = value(key, raw)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        [
            ("n_char", self.n_char.to_string()),
            ("n_blocks", self.n_blocks.to_string()),
            ("res_depth", self.res_depth.to_string()),
            ("n_downsampling", self.n_downsampling.to_string()),
            ("base_channels", self.base_channels.to_string()),
            ("max_channels", self.max_channels.to_string()),
            ("n_classes", self.n_classes.to_string()),
            ("n_keypoint_classes", self.n_keypoint_classes.to_string()),
            ("n_link_types", self.n_link_types.to_string()),
            ("use_coordconv", self.use_coordconv.to_string()),
            ("use_corner_pool", self.use_corner_pool.to_string()),
            ("field_stride", self.field_stride.to_string()),
            ("head_channels", self.head_channels.to_string()),
            ("n_stages", self.n_stages.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Two channels holding x then y, each spanning `[-1, 1]`; a single row or
/// column maps to 0.
pub fn coordconv_channels<T: Real>(height: usize, width: usize) -> NdArray<T> {
    let norm = |i: usize, n: usize| {
        if n <= 1 {
            0.0
        } else {
            2.0 * i as f64 / (n - 1) as f64 - 1.0
        }
    };
    let mut out = NdArray::zeros(&[2, height, width]);
    let hw = height * width;
    let d = out.data_mut();
    for y in 0..height {
        for x in 0..width {
            d[y * width + x] = T::from_f64(norm(x, width));
            d[hw + y * width + x] = T::from_f64(norm(y, height));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamSpec {
    fn fan_in(&self) -> usize {
        self.shape[1..].iter().product::<usize>().max(1)
    }

    fn is_bias(&self) -> bool {
        self.shape.len() == 1
    }
}

/// Graph handles of the network outputs, cropped to the input extent.
#[derive(Debug, Clone, Copy)]
pub struct FieldVars {
    /// `1 x H x W` key-mask logits.
    pub seg_key: Var,
    /// `n_classes x H x W` logits.
    pub seg_full: Var,
    /// `(K * 5) x H_f x W_f`, per class (c, x, y, b, sigma), all raw.
    pub pif: Var,
    /// `(L * 7) x H_f x W_f`, per link type (c, x1, y1, b1, x2, y2, b2), all raw.
    pub paf: Var,
    pub height: usize,
    pub width: usize,
    pub field_height: usize,
    pub field_width: usize,
}

#[derive(Debug, Clone)]
pub struct Net {
    cfg: NetConfig,
    specs: Vec<ParamSpec>,
    index: HashMap<String, usize>,
}

struct Ctx<'a, T: Real> {
    g: &'a mut Graph<T>,
    net: &'a Net,
    params: &'a [Var],
}

impl<T: Real> Ctx<'_, T> {
    fn p(&self, name: &str) -> Var {
        self.params[self.net.index[name]]
    }

    fn conv(&mut self, name: &str, x: Var, relu: bool) -> Result<Var> {
        let w = self.p(&format!("{name}.w"));
        let b = self.net.index.get(&format!("{name}.b")).map(|&i| self.params[i]);
        let k = self.g.shape(w)[2];
        let y = self.g.conv2d(x, w, b, 1, (k - 1) / 2)?;
        Ok(if relu { self.g.relu(y) } else { y })
    }

    fn with_coords(&mut self, x: Var) -> Result<Var> {
        if !self.net.cfg.use_coordconv {
            return Ok(x);
        }
        let (_, h, w) = self.g.value(x).dims3()?;
        let c = self.g.constant(coordconv_channels(h, w));
        self.g.concat(&[x, c])
    }

    /// Self-attention over all positions with a residual connection.
    fn attention(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let (c, h, w) = self.g.value(x).dims3()?;
        let n = h * w;
        let q = self.conv(&format!("{prefix}.q"), x, false)?;
        let k = self.conv(&format!("{prefix}.k"), x, false)?;
        let v = self.conv(&format!("{prefix}.v"), x, false)?;
        let ck = self.g.shape(q)[0];
        let q = self.g.reshape(q, &[ck, n])?;
        let k = self.g.reshape(k, &[ck, n])?;
        let v = self.g.reshape(v, &[c, n])?;
        let kt = self.g.transpose(k)?;
        // keys x queries; softmax over keys for each query column
        let s = self.g.matmul(kt, q)?;
        let s = self.g.reshape(s, &[n, n, 1])?;
        let p = self.g.softmax_channels(s)?;
        let p = self.g.reshape(p, &[n, n])?;
        let o = self.g.matmul(v, p)?;
        let o = self.g.reshape(o, &[c, h, w])?;
        self.g.add(x, o)
    }

    fn encoder_stage(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let e = self.conv(&format!("{prefix}.in"), x, true)?;
        let depth = self.net.cfg.res_depth;
        if depth == 0 {
            return Ok(e);
        }
        let mut y = e;
        for r in 0..depth {
            y = self.conv(&format!("{prefix}.res{r}"), y, r + 1 < depth)?;
        }
        let y = self.g.add(y, e)?;
        Ok(self.g.relu(y))
    }

    /// Returns (attention output, decoder outputs indexed by level).
    fn block(&mut self, b: usize, x: Var) -> Result<(Var, Vec<Var>)> {
        let d = self.net.cfg.n_downsampling;
        let mut skips = Vec::with_capacity(d);
        let mut h = self.with_coords(x)?;
        for s in 0..=d {
            if s > 0 {
                h = self.g.max_pool2(h)?;
            }
            h = self.encoder_stage(&format!("b{b}.enc{s}"), h)?;
            if s < d {
                skips.push(h);
            }
        }
        let att = self.attention(&format!("b{b}.att"), h)?;
        let mut dec = vec![att; d + 1];
        let mut h = att;
        for s in (0..d).rev() {
            let u = self.g.upsample(h, 2)?;
            let cat = self.g.concat(&[u, skips[s]])?;
            h = self.conv(&format!("b{b}.dec{s}"), cat, true)?;
            dec[s] = h;
        }
        Ok((att, dec))
    }
}

fn conv_specs(out: &mut Vec<ParamSpec>, name: &str, cin: usize, cout: usize, k: usize) {
    out.push(ParamSpec {
        name: format!("{name}.w"),
        shape: vec![cout, cin, k, k],
    });
    out.push(ParamSpec {
        name: format!("{name}.b"),
        shape: vec![cout],
    });
}

impl Net {
    pub fn new(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut s = Vec::new();
        let c = &cfg;
        let d = c.n_downsampling;
        conv_specs(&mut s, "stem", c.n_char + 1, c.base_channels, 3);
        for b in 0..c.n_blocks {
            for lvl in 0..=d {
                let cin = if lvl == 0 {
                    c.base_channels + c.coord_channels()
                } else {
                    c.width(lvl - 1)
                };
                conv_specs(&mut s, &format!("b{b}.enc{lvl}.in"), cin, c.width(lvl), 3);
                for r in 0..c.res_depth {
                    let n = format!("b{b}.enc{lvl}.res{r}");
                    conv_specs(&mut s, &n, c.width(lvl), c.width(lvl), 3);
                }
            }
            let cb = c.width(d);
            let ck = (cb / 4).max(1);
            conv_specs(&mut s, &format!("b{b}.att.q"), cb, ck, 1);
            // a key bias shifts every score for a query equally, so it is omitted
            s.push(ParamSpec {
                name: format!("b{b}.att.k.w"),
                shape: vec![ck, cb, 1, 1],
            });
            conv_specs(&mut s, &format!("b{b}.att.v"), cb, cb, 1);
            for lvl in (0..d).rev() {
                let cin = c.width(lvl + 1) + c.width(lvl);
                conv_specs(&mut s, &format!("b{b}.dec{lvl}"), cin, c.width(lvl), 3);
            }
        }
        conv_specs(&mut s, "head.key", c.base_channels, 1, 1);
        conv_specs(&mut s, "head.seg", c.base_channels, c.n_classes, 1);
        let f = c.field_level();
        let cin = c.n_blocks * c.width(d) + c.width(f) + c.coord_channels();
        conv_specs(&mut s, "field.mix", cin, c.head_channels, 3);
        conv_specs(&mut s, "field.pif", c.head_channels, c.n_keypoint_classes * PIF_CHANNELS, 1);
        conv_specs(&mut s, "field.paf", c.head_channels, c.n_link_types * PAF_CHANNELS, 1);

        let index = s.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Ok(Net {
            cfg,
            specs: s,
            index,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn n_parameters(&self) -> usize {
        self.specs.iter().map(|p| p.shape.iter().product::<usize>()).sum()
    }

    /// He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases; draws in spec order.
    pub fn init_params(&self, seed: u64) -> Vec<NdArray<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.specs
            .iter()
            .map(|p| {
                let n: usize = p.shape.iter().product();
                if p.is_bias() {
                    return NdArray::zeros(&p.shape);
                }
                let bound = (6.0 / p.fan_in() as f64).sqrt();
                let data = (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect();
                NdArray::from_vec(&p.shape, data).expect("spec shape")
            })
            .collect()
    }

    /// Check a loaded parameter list against the specs, reordering by name.
    pub fn match_params(&self, named: Vec<(String, NdArray<f32>)>) -> Result<Vec<NdArray<f32>>> {
        let mut slots: Vec<Option<NdArray<f32>>> = vec![None; self.specs.len()];
        for (name, arr) in named {
            let i = *self
                .index
                .get(&name)
                .ok_or_else(|| Error::Format(format!("unexpected parameter `{name}`")))?;
            if arr.shape() != self.specs[i].shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    arr.shape(),
                    self.specs[i].shape
                )));
            }
            slots[i] = Some(arr);
        }
        slots
            .into_iter()
            .zip(&self.specs)
            .map(|(s, p)| s.ok_or_else(|| Error::Format(format!("missing parameter `{}`", p.name))))
            .collect()
    }

    pub fn named<'a>(&'a self, params: &'a [NdArray<f32>]) -> impl Iterator<Item = (&'a str, &'a NdArray<f32>)> {
        self.specs.iter().map(|p| p.name.as_str()).zip(params)
    }

    /// Register parameters as graph leaves, in spec order.
    pub fn load<T: Real>(&self, g: &mut Graph<T>, params: &[NdArray<f32>]) -> Vec<Var> {
        params.iter().map(|p| g.parameter(p.cast())).collect()
    }

    /// Run the network on a row-major grid of vocabulary indices.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &[Var],
        cells: &[u16],
        height: usize,
        width: usize,
    ) -> Result<FieldVars> {
        if params.len() != self.specs.len() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                self.specs.len(),
                params.len()
            )));
        }
        if height == 0 || width == 0 || cells.len() != height * width {
            return Err(Error::shape("input grid extent mismatch"));
        }
        let c = &self.cfg;
        let a = c.alignment();
        let (hp, wp) = (height.div_ceil(a) * a, width.div_ceil(a) * a);
        let mut padded = vec![0u16; hp * wp];
        for r in 0..height {
            padded[r * wp..r * wp + width].copy_from_slice(&cells[r * width..(r + 1) * width]);
        }

        let mut cx = Ctx { g, net: self, params };
        let w = cx.p("stem.w");
        let b = cx.p("stem.b");
        let stem = cx.g.one_hot_conv2d(&padded, hp, wp, w, Some(b))?;
        let stem = cx.g.relu(stem);

        let d = c.n_downsampling;
        let f = c.field_level();
        let (att0, dec0) = cx.block(0, stem)?;
        let (atts, last_dec) = if c.n_blocks == 2 {
            let x1 = cx.g.add(stem, dec0[0])?;
            let (att1, dec1) = cx.block(1, x1)?;
            (vec![att0, att1], dec1)
        } else {
            (vec![att0], dec0.clone())
        };
        let seg_key = cx.conv("head.key", dec0[0], false)?;
        let seg_full = cx.conv("head.seg", last_dec[0], false)?;

        let mut parts = Vec::with_capacity(atts.len() + 1);
        for &att in &atts {
            parts.push(cx.g.upsample(att, 1 << (d - f))?);
        }
        parts.push(last_dec[f]);
        let mut feat = cx.g.concat(&parts)?;
        if c.use_corner_pool {
            let cp = cx.g.corner_pool(feat)?;
            feat = cx.g.add(feat, cp)?;
        }
        let feat = cx.with_coords(feat)?;
        let mix = cx.conv("field.mix", feat, true)?;
        let pif = cx.conv("field.pif", mix, false)?;
        let paf = cx.conv("field.paf", mix, false)?;

        let (fh, fw) = (height.div_ceil(c.field_stride), width.div_ceil(c.field_stride));
        let g = cx.g;
        Ok(FieldVars {
            seg_key: g.crop(seg_key, height, width)?,
            seg_full: g.crop(seg_full, height, width)?,
            pif: g.crop(pif, fh, fw)?,
            paf: g.crop(paf, fh, fw)?,
            height,
            width,
            field_height: fh,
            field_width: fw,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetConfig {
        NetConfig {
            n_char: 4,
            base_channels: 2,
            max_channels: 4,
            head_channels: 3,
            res_depth: 1,
            ..Default::default()
        }
    }

    #[test]
    fn coord_channels_endpoints() {
        let c: NdArray<f64> = coordconv_channels(3, 3);
        let d = c.data();
        assert_eq!((d[0], d[9]), (-1.0, -1.0));
        assert_eq!((d[8], d[17]), (1.0, 1.0));
        assert_eq!((d[4], d[13]), (0.0, 0.0));

        let c: NdArray<f64> = coordconv_channels(1, 4);
        assert!(c.data()[4..].iter().all(|&v| v == 0.0));
        for (got, want) in c.data()[..4].iter().zip([-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn coord_channels_are_separable() {
        let c: NdArray<f64> = coordconv_channels(4, 5);
        let d = c.data();
        for y in 0..4 {
            for x in 0..5 {
                assert_eq!(d[y * 5 + x], d[x]);
                assert_eq!(d[20 + y * 5 + x], d[20 + y * 5]);
            }
        }
    }

    #[test]
    fn output_shapes_with_padding() {
        for (coord, corner) in [(true, true), (false, false), (true, false)] {
            let cfg = NetConfig {
                use_coordconv: coord,
                use_corner_pool: corner,
                ..tiny()
            };
            let net = Net::new(cfg).unwrap();
            let params = net.init_params(1);
            let mut g = Graph::<f32>::new();
            let pv = net.load(&mut g, &params);
            let cells = vec![1u16; 19 * 18];
            let out = net.forward(&mut g, &pv, &cells, 19, 18).unwrap();
            assert_eq!(g.shape(out.seg_full), &[5, 19, 18]);
            assert_eq!(g.shape(out.seg_key), &[1, 19, 18]);
            assert_eq!(g.shape(out.pif), &[20, 5, 5]);
            assert_eq!(g.shape(out.paf), &[7, 5, 5]);
        }
    }

    #[test]
    fn default_channel_counts() {
        let net = Net::new(NetConfig::default()).unwrap();
        let spec = |n: &str| net.specs().iter().find(|p| p.name == n).unwrap().shape[0];
        assert_eq!(spec("head.seg.w"), 5);
        assert_eq!(spec("field.pif.w"), 20);
        assert_eq!(spec("field.paf.w"), 7);
        assert_eq!(net.specs()[0].shape, vec![8, 91, 3, 3]);
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let net = Net::new(tiny()).unwrap();
        let params = net.init_params(2);
        let mut g = Graph::<f64>::new();
        let pv = net.load(&mut g, &params);
        let cells: Vec<u16> = (0..16 * 16).map(|i| (i % 5) as u16).collect();
        let out = net.forward(&mut g, &pv, &cells, 16, 16).unwrap();
        let parts = [out.seg_key, out.seg_full, out.pif, out.paf];
        let mut total = None;
        for p in parts {
            let n = g.value(p).len();
            let s = g.dot_const(p, vec![1.0; n]).unwrap();
            total = Some(match total {
                None => s,
                Some(t) => g.add(t, s).unwrap(),
            });
        }
        g.backward(total.unwrap()).unwrap();
        for (v, spec) in pv.iter().zip(net.specs()) {
            assert!(g.grad(*v).is_some(), "no gradient for {}", spec.name);
        }
    }

    #[test]
    fn init_is_seeded() {
        let net = Net::new(tiny()).unwrap();
        assert_eq!(net.init_params(5), net.init_params(5));
        assert_ne!(net.init_params(5), net.init_params(6));
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            NetConfig { n_downsampling: 0, ..tiny() },
            NetConfig { n_stages: 2, ..tiny() },
            NetConfig { field_stride: 3, ..tiny() },
            NetConfig { field_stride: 64, ..tiny() },
            NetConfig { n_blocks: 3, ..tiny() },
        ];
        for c in bad {
            assert!(Net::new(c).is_err());
        }
    }

    #[test]
    fn config_round_trip() {
        let mut c = NetConfig::default();
        let mut d = NetConfig {
            use_corner_pool: false,
            n_downsampling: 5,
            ..Default::default()
        };
        for (k, v) in d.entries() {
            assert!(c.set(&k, &v).unwrap());
        }
        assert_eq!(c, d);
        assert!(!d.set("unknown", "1").unwrap());
    }
}
