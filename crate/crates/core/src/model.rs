//! Run configuration and a trained model bundle (config, vocabulary, weights).

use std::fs;
use std::io::BufReader;
use std::path::Path;

use crate::chargrid::{augment, rasterize, AugmentConfig, CharGrid, CharVocab};
use crate::config::{flag, parse_kv, value, Section};
use crate::decode::{decode, DecodeConfig, DecodedForm, PafMaps, PifMaps, SegMaps};
use crate::error::{Error, Result};
use crate::funsd::FormDocument;
use crate::loss::LossWeights;
use crate::net::{FieldVars, Net, NetConfig};
use crate::targets::{encode_targets, FieldGeometry, TargetFields, DEFAULT_RADIUS};
use crate::tensor::checkpoint::{read_params, write_params};
use crate::tensor::{Graph, NdArray, Real};

pub const CONFIG_FILE: &str = "config.txt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const WEIGHTS_FILE: &str = "model.mspw";

/// How the step size falls every `decay_every` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrDecay {
    /// `lr * (1 - floor(e / every) * every / epochs) ^ power`
    Power,
    /// `lr * power ^ floor(e / every)`
    Multiplier,
}

impl std::str::FromStr for LrDecay {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "power" => Ok(LrDecay::Power),
            "multiplier" => Ok(LrDecay::Multiplier),
            _ => Err(Error::Config(format!("unknown lr decay `{s}`"))),
        }
    }
}

impl LrDecay {
    fn as_str(self) -> &'static str {
        match self {
            LrDecay::Power => "power",
            LrDecay::Multiplier => "multiplier",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub decay: LrDecay,
    pub decay_every: usize,
    pub decay_power: f64,
    pub batch_size: usize,
    pub rho: f64,
    pub eps: f64,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    pub target_radius: f64,
    pub median_height: f64,
    pub vocab_size: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            lr: 1e-3,
            decay: LrDecay::Power,
            decay_every: 10,
            decay_power: 0.9,
            batch_size: 4,
            rho: 0.9,
            eps: 1e-8,
            seed: 0,
            checkpoint_every: 10,
            target_radius: DEFAULT_RADIUS,
            median_height: crate::chargrid::DEFAULT_MEDIAN_HEIGHT,
            vocab_size: crate::chargrid::DEFAULT_VOCAB_SIZE,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.decay_every == 0 {
            return Err(Error::Config("batch_size and decay_every must be positive".into()));
        }
        if !(self.lr > 0.0 && self.rho >= 0.0 && self.rho < 1.0 && self.eps > 0.0) {
            return Err(Error::Config("need lr > 0, 0 <= rho < 1, eps > 0".into()));
        }
        self.augment.validate()
    }

    /// Step size for zero-based epoch `e`.
    pub fn learning_rate(&self, e: usize) -> f64 {
        let k = (e / self.decay_every) as f64;
        match self.decay {
            LrDecay::Power => {
                let frac = 1.0 - k * self.decay_every as f64 / self.epochs.max(1) as f64;
                self.lr * frac.max(0.0).powf(self.decay_power)
            }
            LrDecay::Multiplier => self.lr * self.decay_power.powf(k),
        }
    }

    pub fn schedule_formula(&self) -> String {
        let (lr, n, p) = (self.lr, self.decay_every, self.decay_power);
        match self.decay {
            LrDecay::Power => format!("lr(e) = {lr} * (1 - floor(e/{n})*{n}/{}) ^ {p}", self.epochs),
            LrDecay::Multiplier => format!("lr(e) = {lr} * {p} ^ floor(e/{n})"),
        }
    }

    pub fn augments(&self) -> bool {
        self.augment != AugmentConfig {
            seed: self.augment.seed,
            ..AugmentConfig::default()
        }
    }
}

fn pair<T: std::str::FromStr>(key: &str, raw: &str) -> Result<(T, T)> {
    let (a, b) = raw
        .split_once(',')
        .ok_or_else(|| Error::Config(format!("`{key}` expects `lo, hi`")))?;
    Ok((value(key, a.trim())?, value(key, b.trim())?))
}

impl Section for TrainConfig {
    fn set(&mut self, key: &str, raw: &str) -> Result<bool> {
        let a = &mut self.augment;
        match key {
            "epochs" => self.epochs = value(key, raw)?,
            "lr" => self.lr = value(key, raw)?,
            "lr_decay" => self.decay = raw.parse()?,
            "decay_every" => self.decay_every = value(key, raw)?,
            "decay_power" => self.decay_power = value(key, raw)?,
            "batch_size" => self.batch_size = value(key, raw)?,
            "rho" => self.rho = value(key, raw)?,
            "eps" => self.eps = value(key, raw)?,
            "seed" => self.seed = value(key, raw)?,
            "checkpoint_every" => self.checkpoint_every = value(key, raw)?,
            "target_radius" => self.target_radius = value(key, raw)?,
            "median_height" => {
                self.median_height = value(key, raw)?;
                a.target_median_height = self.median_height;
            }
            "vocab_size" => self.vocab_size = value(key, raw)?,
            "aug_p_char_replace" => a.p_char_replace = value(key, raw)?,
            "aug_max_shift" => a.max_shift = value(key, raw)?,
            "aug_max_rotation_deg" => a.max_rotation_deg = value(key, raw)?,
            "aug_max_shear" => a.max_shear = value(key, raw)?,
            "aug_scale_range" => a.scale_range = pair(key, raw)?,
            "aug_pad_range" => a.pad_range = pair(key, raw)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        let a = &self.augment;
        [
            ("epochs", self.epochs.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_decay", self.decay.as_str().to_string()),
            ("decay_every", self.decay_every.to_string()),
            ("decay_power", self.decay_power.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("rho", self.rho.to_string()),
            ("eps", self.eps.to_string()),
            ("seed", self.seed.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("target_radius", self.target_radius.to_string()),
            ("median_height", self.median_height.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("aug_p_char_replace", a.p_char_replace.to_string()),
            ("aug_max_shift", a.max_shift.to_string()),
            ("aug_max_rotation_deg", a.max_rotation_deg.to_string()),
            ("aug_max_shear", a.max_shear.to_string()),
            ("aug_scale_range", format!("{}, {}", a.scale_range.0, a.scale_range.1)),
            ("aug_pad_range", format!("{}, {}", a.pad_range.0, a.pad_range.1)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Every configurable knob of a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub net: NetConfig,
    pub loss: LossWeights,
    pub decode: DecodeConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.loss.validate()?;
        self.decode.validate()?;
        self.train.validate()
    }

    /// Apply one `key = value` entry to whichever section owns it.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        if key == "median_height" {
            self.decode.median_height = value(key, raw)?;
        }
        for hit in [
            self.net.set(key, raw)?,
            self.loss.set(key, raw)?,
            self.decode.set(key, raw)?,
            self.train.set(key, raw)?,
        ] {
            if hit {
                return Ok(());
            }
        }
        Err(Error::Config(format!("unknown key `{key}`")))
    }

    /// Apply a config file's entries on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_kv(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (title, entries) in [
            ("network", self.net.entries()),
            ("loss", self.loss.entries()),
            ("decoding", self.decode.entries()),
            ("training", self.train.entries()),
        ] {
            s.push_str(&format!("# {title}\n"));
            for (k, v) in entries {
                s.push_str(&format!("{k} = {v}\n"));
            }
        }
        s
    }

    /// `true`/`false` override of a boolean key, for command-line switches.
    pub fn set_flag(&mut self, key: &str, on: bool) -> Result<()> {
        flag(key, if on { "true" } else { "false" })?;
        self.set(key, if on { "true" } else { "false" })
    }
}

/// Network input and targets of one form.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub grid: CharGrid,
    pub targets: TargetFields,
}

pub fn prepare(form: &FormDocument, vocab: &CharVocab, run: &RunConfig) -> Result<Prepared> {
    let grid = rasterize(form, vocab, run.train.median_height)?;
    let targets = encode_targets(
        form,
        &grid.geometry(),
        run.net.field_stride,
        run.train.target_radius,
        run.net.n_keypoint_classes,
    )?;
    Ok(Prepared { grid, targets })
}

/// Augmented copy of `form` for one epoch, seeded per (run seed, epoch, index).
pub fn augmented(form: &FormDocument, vocab: &CharVocab, run: &RunConfig, epoch: usize, index: usize) -> Result<FormDocument> {
    let mut cfg = run.train.augment.clone();
    cfg.seed = crate::synth::form_seed(run.train.seed ^ 0xa5a5_5a5a, epoch as u64, index as u64);
    augment(form, &cfg, vocab)
}

#[derive(Debug, Clone)]
pub struct Model {
    pub run: RunConfig,
    pub vocab: CharVocab,
    pub net: Net,
    pub params: Vec<NdArray<f32>>,
}

impl Model {
    pub fn new(run: RunConfig, vocab: CharVocab, params: Vec<NdArray<f32>>) -> Result<Self> {
        if run.net.n_char != vocab.len() {
            return Err(Error::Config(format!(
                "network expects {} characters, vocabulary has {}",
                run.net.n_char,
                vocab.len()
            )));
        }
        let net = Net::new(run.net.clone())?;
        let named: Vec<(String, NdArray<f32>)> = net
            .specs()
            .iter()
            .map(|s| s.name.clone())
            .zip(params)
            .collect();
        let params = net.match_params(named)?;
        Ok(Model { run, vocab, net, params })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), self.run.to_text())?;
        fs::write(dir.join(VOCAB_FILE), self.vocab.to_text())?;
        save_weights(&self.net, &self.params, &dir.join(WEIGHTS_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            fs::read_to_string(dir.join(name))
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", dir.join(name).display())))
        };
        let run = RunConfig::from_text(&read(CONFIG_FILE)?)?;
        let vocab = CharVocab::from_text(&read(VOCAB_FILE)?)?;
        let path = dir.join(WEIGHTS_FILE);
        let f = fs::File::open(&path)
            .map_err(|e| Error::Config(format!("cannot open checkpoint {}: {e}", path.display())))?;
        let named = read_params(&mut BufReader::new(f))?;
        let net = Net::new(run.net.clone())?;
        let params = net.match_params(named)?;
        Model::new(run, vocab, params)
    }

    /// Raw network outputs for one char-grid.
    pub fn fields(&self, grid: &CharGrid) -> Result<(SegMaps, PifMaps, PafMaps)> {
        let mut g = Graph::<f32>::new();
        let vars = self.net.load(&mut g, &self.params);
        let out = self.net.forward(&mut g, &vars, &grid.cells, grid.height, grid.width)?;
        maps(&g, &out, &self.run.net)
    }

    pub fn predict(&self, form: &FormDocument) -> Result<DecodedForm> {
        let grid = rasterize(form, &self.vocab, self.run.train.median_height)?;
        let (seg, pif, paf) = self.fields(&grid)?;
        let field = FieldGeometry::new(grid.geometry(), self.run.net.field_stride);
        Ok(decode(&seg, &pif, &paf, &field, (form.page_width, form.page_height), &self.run.decode))
    }
}

pub fn maps<T: Real>(g: &Graph<T>, out: &FieldVars, c: &NetConfig) -> Result<(SegMaps, PifMaps, PafMaps)> {
    let seg = SegMaps::from_raw(g.value(out.seg_full).data(), c.n_classes, out.height, out.width)?;
    let pif = PifMaps::from_raw(g.value(out.pif).data(), c.n_keypoint_classes, out.field_height, out.field_width)?;
    let paf = PafMaps::from_raw(g.value(out.paf).data(), c.n_link_types, out.field_height, out.field_width)?;
    Ok((seg, pif, paf))
}

/// Write weights to `path` through a temporary file so an interrupted write
/// never replaces a good checkpoint.
pub fn save_weights(net: &Net, params: &[NdArray<f32>], path: &Path) -> Result<()> {
    let named: Vec<(String, NdArray<f32>)> = net.named(params).map(|(n, p)| (n.to_string(), p.clone())).collect();
    let mut buf = Vec::new();
    write_params(&mut buf, &named)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_values() {
        let t = TrainConfig::default();
        assert_eq!(t.learning_rate(0), 1e-3);
        assert_eq!(t.learning_rate(9), 1e-3);
        for e in [10, 55, 199] {
            let want = 0.001 * (1.0 - (e / 10) as f64 * 10.0 / 200.0).powf(0.9);
            assert_eq!(t.learning_rate(e), want);
        }
        assert!(t.learning_rate(10) < t.learning_rate(9));
        let m = TrainConfig {
            decay: LrDecay::Multiplier,
            ..TrainConfig::default()
        };
        assert!((m.learning_rate(25) - 1e-3 * 0.81).abs() < 1e-18);
    }

    #[test]
    fn run_config_round_trip() {
        let mut c = RunConfig::default();
        c.apply_text("base_channels = 4\nlambda2 = 0.5\nlink_threshold = 0.4\nepochs = 3\naug_pad_range = 1, 2\nlr_decay = multiplier\nmedian_height = 4\n")
            .unwrap();
        assert_eq!(c.net.base_channels, 4);
        assert_eq!(c.train.augment.pad_range, (1, 2));
        assert_eq!((c.train.median_height, c.decode.median_height), (4.0, 4.0));
        let back = RunConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(RunConfig::from_text("bogus = 1\n").is_err());
        assert!(RunConfig::from_text("use_coordconv = maybe\n").is_err());
    }

    #[test]
    fn identity_augmentation_is_detected() {
        let mut t = TrainConfig::default();
        assert!(!t.augments());
        t.augment.max_shift = 1;
        assert!(t.augments());
    }
}
