//! Flat `key=value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Every key has a default; unknown keys
//! and unparsable values are usage errors that name the key and its source line.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::head::{ArcMarginConfig, Pooling};
use crate::imaging::DatasetConfig;
use crate::optim::{PlateauConfig, SchedulerKind, SgdConfig};
use crate::trainer::{cosine_recipe, plateau_recipe, FixConfig, ModelSpec, Recipe, RecipeStages};

/// Every accepted key with its default, in resolved-output order.
const KEYS: &[(&str, &str)] = &[
    ("dataset.seed", "7"),
    ("dataset.classes", "20"),
    ("dataset.train_per_class", "40"),
    ("dataset.index_per_class", "10"),
    ("dataset.query_per_class", "5"),
    ("dataset.distractor_classes", "10"),
    ("dataset.noise_sigma", "0.05"),
    ("backbone.patch", "8"),
    ("backbone.stride", "8"),
    ("backbone.channels", "64"),
    ("head.embed_dim", "32"),
    ("head.gem_p", "3"),
    ("head.pooling", "gem"),
    ("arcmargin.scale", "30"),
    ("arcmargin.margins", "0.15,0.25,0.35"),
    ("arcmargin.cos_eps", "1e-7"),
    ("optim.momentum", "0.9"),
    ("optim.weight_decay", "0.0001"),
    ("optim.plateau_patience", "2"),
    ("optim.plateau_threshold", "0.001"),
    ("optim.decay_factor", "0.1"),
    ("train.batch_size", "32"),
    ("train.resolutions", "64,128"),
    ("train.epochs", "15,5"),
    ("train.lr", "0.01,0.001"),
    ("train.bump_resolution", "true"),
    ("recipe.a.seed", "11"),
    ("recipe.a.scheduler", "cosine"),
    ("recipe.b.seed", "23"),
    ("recipe.b.scheduler", "steps"),
    ("fix.resolution", "184"),
    ("fix.epochs", "3"),
    ("fix.lr_factor", "0.1"),
    ("fix.margin", "keep"),
    ("eval.resolutions", "64,128,184"),
    ("eval.k", "100"),
    ("eval.map_floor", "0"),
];

#[derive(Clone, Debug, PartialEq, Eq)]
enum Origin {
    Default,
    Line(usize),
    Flag,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Default => f.write_str("default"),
            Origin::Line(n) => write!(f, "line {n}"),
            Origin::Flag => f.write_str("--set"),
        }
    }
}

/// Raw key/value pairs before typing.
#[derive(Clone, Debug, Default)]
pub struct RawConfig {
    values: BTreeMap<String, (String, Origin)>,
}

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

fn split_pair(line: &str) -> Option<(&str, &str)> {
    let (k, v) = line.split_once('=')?;
    Some((k.trim(), v.trim()))
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let n = i + 1;
            let (k, v) = split_pair(line)
                .ok_or_else(|| Error::Usage(format!("line {n}: expected key=value, got {line:?}")))?;
            if !known(k) {
                return Err(Error::Usage(format!("line {n}: unknown key {k:?}")));
            }
            values.insert(k.to_string(), (v.to_string(), Origin::Line(n)));
        }
        Ok(Self { values })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies a `key=value` command-line override.
    pub fn set(&mut self, pair: &str) -> Result<()> {
        let (k, v) = split_pair(pair).ok_or_else(|| Error::Usage(format!("--set expects key=value, got {pair:?}")))?;
        if !known(k) {
            return Err(Error::Usage(format!("--set: unknown key {k:?}")));
        }
        self.values.insert(k.to_string(), (v.to_string(), Origin::Flag));
        Ok(())
    }

    fn get(&self, key: &str) -> (&str, Origin) {
        match self.values.get(key) {
            Some((v, o)) => (v.as_str(), o.clone()),
            None => {
                let d = KEYS.iter().find(|(k, _)| *k == key).map(|(_, d)| *d).unwrap_or_default();
                (d, Origin::Default)
            }
        }
    }

    fn typed<T: FromStr>(&self, key: &str) -> Result<T> {
        let (v, origin) = self.get(key);
        v.parse()
            .map_err(|_| Error::Usage(format!("{origin}: cannot parse {key}={v:?}")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let (v, origin) = self.get(key);
        v.split(',')
            .map(|x| x.trim().parse())
            .collect::<std::result::Result<Vec<T>, _>>()
            .map_err(|_| Error::Usage(format!("{origin}: cannot parse {key}={v:?}")))
    }

    fn usage<T>(&self, key: &str, r: Result<T>) -> Result<T> {
        r.map_err(|e| Error::Usage(format!("{}: {key}: {e}", self.get(key).1)))
    }

    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let dataset = DatasetConfig {
            seed: self.typed("dataset.seed")?,
            classes: self.typed("dataset.classes")?,
            train_per_class: self.typed("dataset.train_per_class")?,
            index_per_class: self.typed("dataset.index_per_class")?,
            query_per_class: self.typed("dataset.query_per_class")?,
            distractor_classes: self.typed("dataset.distractor_classes")?,
            noise_sigma: self.typed("dataset.noise_sigma")?,
        };
        let margins: Vec<f64> = self.list("arcmargin.margins")?;
        let arcmargin = ArcMarginConfig {
            scale: self.typed("arcmargin.scale")?,
            margin: margins[0],
            cos_eps: self.typed("arcmargin.cos_eps")?,
        };
        self.usage("arcmargin.scale", arcmargin.validate())?;
        let lrs: Vec<f64> = self.list("train.lr")?;
        let sgd = SgdConfig {
            lr0: lrs[0],
            momentum: self.typed("optim.momentum")?,
            weight_decay: self.typed("optim.weight_decay")?,
        };
        self.usage("optim.momentum", sgd.validate())?;
        let fix_margin = match self.get("fix.margin").0 {
            "keep" => None,
            _ => Some(self.typed("fix.margin")?),
        };
        let cfg = ExperimentConfig {
            dataset,
            patch: self.typed("backbone.patch")?,
            stride: self.typed("backbone.stride")?,
            channels: self.typed("backbone.channels")?,
            embed_dim: self.typed("head.embed_dim")?,
            gem_p: self.typed("head.gem_p")?,
            pooling: self.usage("head.pooling", self.get("head.pooling").0.parse())?,
            arcmargin,
            margins,
            sgd,
            plateau: PlateauConfig {
                patience: self.typed("optim.plateau_patience")?,
                threshold: self.typed("optim.plateau_threshold")?,
                decay_factor: self.typed("optim.decay_factor")?,
            },
            stages: RecipeStages {
                resolutions: self.list("train.resolutions")?,
                epochs: self.list("train.epochs")?,
                lr0: lrs,
                batch_size: self.typed("train.batch_size")?,
            },
            bump_resolution: self.typed("train.bump_resolution")?,
            recipe_seeds: [self.typed("recipe.a.seed")?, self.typed("recipe.b.seed")?],
            recipe_schedulers: [
                self.usage("recipe.a.scheduler", self.get("recipe.a.scheduler").0.parse())?,
                self.usage("recipe.b.scheduler", self.get("recipe.b.scheduler").0.parse())?,
            ],
            fix: FixConfig {
                resolution: self.typed("fix.resolution")?,
                epochs: self.typed("fix.epochs")?,
                batch_size: self.typed("train.batch_size")?,
                lr_factor: self.typed("fix.lr_factor")?,
                margin: fix_margin,
            },
            eval_resolutions: self.list("eval.resolutions")?,
            k: self.typed("eval.k")?,
            map_floor: self.typed("eval.map_floor")?,
        };
        self.usage(
            "train.resolutions",
            cosine_recipe("check", cfg.model_spec(0), cfg.arcmargin, cfg.sgd, &cfg.stages).map(|_| ()),
        )?;
        for (i, name) in RECIPE_NAMES.iter().enumerate() {
            self.usage(&format!("recipe.{name}.scheduler"), cfg.recipe(i).map(|_| ()))?;
        }
        if cfg.k == 0 {
            return Err(Error::Usage(format!("{}: eval.k must be ≥ 1", self.get("eval.k").1)));
        }
        Ok(cfg)
    }

    /// Every key with its effective value, one `key=value` per line.
    pub fn render_resolved(&self) -> String {
        let mut out = String::new();
        for (k, _) in KEYS {
            let _ = writeln!(out, "{k}={}", self.get(k).0);
        }
        out
    }
}

/// Typed view of a resolved configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub patch: usize,
    pub stride: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub gem_p: f64,
    pub pooling: Pooling,
    pub arcmargin: ArcMarginConfig,
    pub margins: Vec<f64>,
    pub sgd: SgdConfig,
    pub plateau: PlateauConfig,
    pub stages: RecipeStages,
    pub bump_resolution: bool,
    pub recipe_seeds: [u64; 2],
    pub recipe_schedulers: [SchedulerKind; 2],
    pub fix: FixConfig,
    pub eval_resolutions: Vec<usize>,
    pub k: usize,
    /// Minimum mAP each trained recipe must reach at its final training resolution.
    pub map_floor: f64,
}

pub const RECIPE_NAMES: [&str; 2] = ["a", "b"];

impl Default for ExperimentConfig {
    fn default() -> Self {
        RawConfig::default().resolve().expect("built-in defaults resolve")
    }
}

impl ExperimentConfig {
    pub fn model_spec(&self, seed: u64) -> ModelSpec {
        ModelSpec {
            seed,
            patch: self.patch,
            stride: self.stride,
            channels: self.channels,
            embed_dim: self.embed_dim,
            gem_p: self.gem_p,
            pooling: self.pooling,
        }
    }

    /// Recipe slot `i` (0 = a, 1 = b). Cosine recipes keep the first margin;
    /// plateau recipes walk the whole ladder.
    pub fn recipe(&self, i: usize) -> Result<Recipe> {
        let name = RECIPE_NAMES[i];
        let spec = self.model_spec(self.recipe_seeds[i]);
        match self.recipe_schedulers[i] {
            SchedulerKind::Cosine => cosine_recipe(name, spec, self.arcmargin, self.sgd, &self.stages),
            SchedulerKind::PlateauSteps => plateau_recipe(
                name,
                spec,
                self.arcmargin,
                self.sgd,
                &self.stages,
                self.margins.clone(),
                self.plateau,
                self.bump_resolution,
            ),
        }
    }

    pub fn final_train_resolution(&self) -> usize {
        *self.stages.resolutions.last().expect("validated non-empty")
    }
}
