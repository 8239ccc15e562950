//! Run configuration: profile defaults, a `key=value` file and command-line
//! overrides, merged in that order.
//!
//! Every key is declared in [`KEYS`]; anything else is rejected. The seed
//! falls back to `CROSSMODAL_SEED` when neither the file nor the command line
//! sets it. The resolved configuration is written as `config.txt` into every
//! output directory and can be fed back with `--config`.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crossmodal_core::datasets::{SampleOptions, ToyClass, ViewSelection};
use crossmodal_core::encoders::EncoderConfig;
use crossmodal_core::objectives::LossConfig;
use crossmodal_core::pointcloud::SamplingConfig;
use crossmodal_core::render::RenderConfig;
use crossmodal_core::trainer::{ProbeConfig, Regime, SegConfig, TrainConfig};

use crate::error::{Error, IoContext, Result};
use crate::formats::write_atomic;

pub const SEED_ENV: &str = "CROSSMODAL_SEED";
pub const CONFIG_ECHO: &str = "config.txt";

/// Declared keys with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("profile", "toy or full"),
    ("seed", "root seed of every random stream"),
    ("deterministic", "single-stream sample assembly"),
    ("workers", "gen-data worker threads, 0 = all cores"),
    ("classes", "toy classes, comma-separated"),
    ("per_class", "toy shapes per class"),
    ("views", "rendered views per object"),
    ("resolution", "rendered image width and height"),
    ("points", "points per cloud"),
    ("oversample", "surface candidates per cloud point"),
    ("width_divisor", "divisor applied to every network width"),
    ("k", "EdgeConv neighbours"),
    ("stem_stride", "stride of the image stem convolution"),
    ("batch", "pretraining batch size"),
    ("iters", "pretraining iterations"),
    ("lr", "initial learning rate"),
    ("momentum", "SGD momentum"),
    ("weight_decay", "L2 weight decay"),
    ("lr_decay_every", "iterations between learning-rate decays"),
    ("lr_decay_factor", "learning-rate decay factor"),
    ("checkpoint_every", "iterations between periodic checkpoints"),
    ("margin", "triplet margin"),
    ("beta", "weight of the cross-modality loss"),
    ("augment", "random rotation and jitter of training clouds"),
    ("view_selection", "per-iteration or fixed training triplets"),
    ("eval_views", "views max-pooled per object in the 2D probe"),
    ("topk", "retrieval cut-offs, comma-separated"),
    ("probe_c", "SVM hinge weight"),
    ("probe_epochs", "SVM epochs"),
    ("probe_lr", "SVM learning rate"),
    ("regime", "segmentation regime: frozen, unfrozen, scratch or random-frozen"),
    ("fraction", "fraction of training shapes used for segmentation"),
    ("seg_epochs", "segmentation fine-tuning epochs"),
    ("seg_batch", "segmentation batch size"),
    ("seg_lr", "segmentation initial learning rate"),
    ("seg_decay_every", "epochs between segmentation learning-rate decays"),
    ("seg_decay_factor", "segmentation learning-rate decay factor"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Toy,
    Full,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Toy => "toy",
            Profile::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Profile::Toy),
            "full" => Ok(Profile::Full),
            _ => Err(Error::Config(format!("unknown profile `{s}` (expected toy or full)"))),
        }
    }
}

fn defaults(profile: Profile) -> BTreeMap<&'static str, String> {
    let (render, sampling, train, divisor, encoder) = match profile {
        Profile::Toy => (RenderConfig::toy(), SamplingConfig::toy(), TrainConfig::toy(), 8, EncoderConfig::toy()),
        Profile::Full => (RenderConfig::full(), SamplingConfig::full(), TrainConfig::full(), 1, EncoderConfig::full()),
    };
    let loss = LossConfig::default();
    let probe = ProbeConfig::default();
    let seg = SegConfig::default();
    let opts = SampleOptions::default();
    let v: Vec<(&'static str, String)> = vec![
        ("profile", profile.name().into()),
        ("seed", "0".into()),
        ("deterministic", "false".into()),
        ("workers", "0".into()),
        ("classes", "sphere,box,cylinder".into()),
        ("per_class", "100".into()),
        ("views", render.view_count.to_string()),
        ("resolution", render.width.to_string()),
        ("points", sampling.points.to_string()),
        ("oversample", sampling.oversample.to_string()),
        ("width_divisor", divisor.to_string()),
        ("k", encoder.k.to_string()),
        ("stem_stride", encoder.stem_stride.to_string()),
        ("batch", train.batch_size.to_string()),
        ("iters", train.iterations.to_string()),
        ("lr", train.lr0.to_string()),
        ("momentum", train.momentum.to_string()),
        ("weight_decay", train.weight_decay.to_string()),
        ("lr_decay_every", train.lr_decay_every.to_string()),
        ("lr_decay_factor", train.lr_decay_factor.to_string()),
        ("checkpoint_every", train.checkpoint_every.to_string()),
        ("margin", loss.margin.to_string()),
        ("beta", loss.cross_weight.to_string()),
        ("augment", opts.augment.to_string()),
        ("view_selection", "per-iteration".into()),
        ("eval_views", render.view_count.min(12).to_string()),
        ("topk", "1,5,10,20,50".into()),
        ("probe_c", probe.c.to_string()),
        ("probe_epochs", probe.epochs.to_string()),
        ("probe_lr", probe.lr.to_string()),
        ("regime", Regime::Unfrozen.name().into()),
        ("fraction", seg.fraction.to_string()),
        ("seg_epochs", seg.epochs.to_string()),
        ("seg_batch", seg.batch_size.to_string()),
        ("seg_lr", seg.lr0.to_string()),
        ("seg_decay_every", seg.decay_every.to_string()),
        ("seg_decay_factor", seg.decay_factor.to_string()),
    ];
    v.into_iter().collect()
}

/// Parses `key=value` lines; `#` starts a comment and blank lines are skipped.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, found `{line}`", n + 1)))?;
        let k = k.trim().to_string();
        if out.iter().any(|(e, _)| *e == k) {
            return Err(Error::Config(format!("line {}: key `{k}` set twice", n + 1)));
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

/// Parses a `key=value` command-line override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    values: BTreeMap<&'static str, String>,
}

fn declared(key: &str) -> Result<&'static str> {
    KEYS.iter()
        .map(|(k, _)| *k)
        .find(|k| *k == key)
        .ok_or_else(|| Error::Config(format!("unknown configuration key `{key}`")))
}

impl RunConfig {
    /// Merges profile defaults, `file` entries and `overrides`; `env_seed` is
    /// used only when neither sets `seed`.
    pub fn resolve(file: &[(String, String)], overrides: &[(String, String)], env_seed: Option<&str>) -> Result<Self> {
        for (k, _) in file.iter().chain(overrides) {
            declared(k)?;
        }
        let pick = |key: &str| overrides.iter().chain(file).find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let profile = Profile::parse(pick("profile").unwrap_or("toy"))?;
        let mut values = defaults(profile);
        if let Some(s) = env_seed.filter(|_| pick("seed").is_none()) {
            values.insert("seed", s.trim().to_string());
        }
        for (k, v) in file.iter().chain(overrides) {
            values.insert(declared(k)?, v.clone());
        }
        let config = Self { profile, values };
        config.validate()?;
        Ok(config)
    }

    /// Reads the optional config file and the seed environment variable.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let entries = match file {
            Some(p) => parse_config_text(&std::fs::read_to_string(p).at(p)?)?,
            None => Vec::new(),
        };
        let env = std::env::var(SEED_ENV).ok();
        Self::resolve(&entries, overrides, env.as_deref())
    }

    fn validate(&self) -> Result<()> {
        self.seed()?;
        self.bool("deterministic")?;
        self.workers()?;
        self.toy_classes()?;
        self.num::<usize>("per_class")?;
        self.render_config()?.validate()?;
        self.sampling_config()?;
        self.encoder_config()?.validate()?;
        self.train_config()?.validate()?;
        self.loss_config()?.validate()?;
        self.sample_options()?;
        self.eval_views()?;
        self.topk()?;
        self.probe_config()?;
        self.regime()?;
        self.seg_config()?;
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    fn num<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse().map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{v}`")))
    }

    fn bool(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => Err(Error::Config(format!("key `{key}`: expected true or false, found `{v}`"))),
        }
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let v = self.get(key);
        v.split(',')
            .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{s}`"))))
            .collect()
    }

    pub fn seed(&self) -> Result<u64> {
        self.num("seed")
    }

    pub fn deterministic(&self) -> bool {
        self.bool("deterministic").unwrap_or(false)
    }

    pub fn workers(&self) -> Result<usize> {
        self.num("workers")
    }

    pub fn toy_classes(&self) -> Result<Vec<ToyClass>> {
        Ok(self.get("classes").split(',').map(ToyClass::parse).collect::<Result<_, _>>()?)
    }

    pub fn per_class(&self) -> Result<usize> {
        self.num("per_class")
    }

    pub fn render_config(&self) -> Result<RenderConfig> {
        let base = match self.profile {
            Profile::Toy => RenderConfig::toy(),
            Profile::Full => RenderConfig::full(),
        };
        let r = self.num("resolution")?;
        Ok(RenderConfig { width: r, height: r, view_count: self.num("views")?, ..base })
    }

    pub fn sampling_config(&self) -> Result<SamplingConfig> {
        let s = SamplingConfig { points: self.num("points")?, oversample: self.num("oversample")? };
        if s.points == 0 || s.oversample == 0 {
            return Err(Error::Config("points and oversample must be at least 1".into()));
        }
        Ok(s)
    }

    pub fn encoder_config(&self) -> Result<EncoderConfig> {
        let divisor: usize = self.num("width_divisor")?;
        if divisor == 0 {
            return Err(Error::Config("key `width_divisor` must be at least 1".into()));
        }
        Ok(EncoderConfig { k: self.num("k")?, stem_stride: self.num("stem_stride")?, ..EncoderConfig::full().scaled(divisor) })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            batch_size: self.num("batch")?,
            iterations: self.num("iters")?,
            lr0: self.num("lr")?,
            momentum: self.num("momentum")?,
            weight_decay: self.num("weight_decay")?,
            lr_decay_every: self.num("lr_decay_every")?,
            lr_decay_factor: self.num("lr_decay_factor")?,
            checkpoint_every: self.num("checkpoint_every")?,
            seed: self.seed()?,
            deterministic: self.bool("deterministic")?,
        })
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        Ok(LossConfig { margin: self.num("margin")?, cross_weight: self.num("beta")?, ..LossConfig::default() })
    }

    pub fn sample_options(&self) -> Result<SampleOptions> {
        let views = match self.get("view_selection") {
            "per-iteration" => ViewSelection::PerIteration,
            "fixed" => ViewSelection::Fixed,
            v => return Err(Error::Config(format!("key `view_selection`: expected per-iteration or fixed, found `{v}`"))),
        };
        Ok(SampleOptions { augment: self.bool("augment")?, views, ..SampleOptions::default() })
    }

    pub fn eval_views(&self) -> Result<usize> {
        let v: usize = self.num("eval_views")?;
        if v == 0 {
            return Err(Error::Config("key `eval_views` must be at least 1".into()));
        }
        Ok(v)
    }

    pub fn topk(&self) -> Result<Vec<usize>> {
        let k: Vec<usize> = self.list("topk")?;
        if k.contains(&0) {
            return Err(Error::Config("key `topk`: cut-offs must be at least 1".into()));
        }
        Ok(k)
    }

    pub fn probe_config(&self) -> Result<ProbeConfig> {
        Ok(ProbeConfig {
            c: self.num("probe_c")?,
            epochs: self.num("probe_epochs")?,
            lr: self.num("probe_lr")?,
            seed: self.seed()?,
        })
    }

    pub fn regime(&self) -> Result<Regime> {
        Ok(Regime::parse(self.get("regime"))?)
    }

    pub fn seg_config(&self) -> Result<SegConfig> {
        let fraction: f64 = self.num("fraction")?;
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!("key `fraction` must lie in (0, 1], found {fraction}")));
        }
        Ok(SegConfig {
            epochs: self.num("seg_epochs")?,
            batch_size: self.num("seg_batch")?,
            lr0: self.num("seg_lr")?,
            decay_every: self.num("seg_decay_every")?,
            decay_factor: self.num("seg_decay_factor")?,
            fraction,
            augment: self.bool("augment")?,
            seed: self.seed()?,
        })
    }

    /// Every key as `key=value`, sorted by key.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        self.values.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    /// Writes the resolved configuration to `dir/config.txt`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).at(dir)?;
        write_atomic(&dir.join(CONFIG_ECHO), self.to_text().as_bytes())
    }
}
