//! Staged head training, the test-resolution Fix stage and checkpointing.

mod checkpoint;
mod recipe;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use recipe::{cosine_recipe, plateau_recipe, run_recipe, Recipe, RecipeStages};

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::backbone::{BackboneParams, FeatureMap};
use crate::error::{Error, Result};
use crate::head::{head_backward, head_forward, ArcMarginConfig, HeadParams, Pooling};
use crate::imaging::{
    channel_mean, test_preprocess, train_augment, Dataset, ManifestRow, PreprocessConfig, Split, CROP_RATIO,
    MIN_RENDER_SIDE,
};
use crate::model::Model;
use crate::numerics::{Scalar, SeededRng, Tensor};
use crate::optim::{sgd_step, FreezeMask, PlateauConfig, ScheduleState, SchedulerKind, SgdConfig, SgdState};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PreprocessMode {
    /// Render at `round(B / 0.9201)`, random `B` crop, random flip.
    #[default]
    TrainAugment,
    /// Render at `B`, resize, center-crop: the inference path.
    TestStyle,
}

impl fmt::Display for PreprocessMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PreprocessMode::TrainAugment => "train",
            PreprocessMode::TestStyle => "test",
        })
    }
}

impl FromStr for PreprocessMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" | "train_augment" => Ok(PreprocessMode::TrainAugment),
            "test" | "test_style" => Ok(PreprocessMode::TestStyle),
            other => Err(Error::Config(format!("unknown preprocessing mode {other:?} (train|test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub resolution: usize,
    pub epochs: usize,
    pub scheduler: SchedulerKind,
    pub lr0: f64,
    pub plateau: PlateauConfig,
    pub margins: Vec<f64>,
    /// Resolution for the remaining epochs once the first lr decay fires.
    pub bump_resolution: Option<usize>,
    /// Keep the incoming margin rung and decay count; lr becomes `min(incoming lr, lr0)`.
    pub carry_schedule: bool,
    pub batch_size: usize,
    pub mode: PreprocessMode,
    pub freeze: FreezeMask,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(format!(
                "stage needs ≥ 1 epoch and batch ≥ 1 (epochs={}, batch={})",
                self.epochs, self.batch_size
            )));
        }
        if self.freeze.all_frozen() {
            return Err(Error::Config("every head tensor is frozen".into()));
        }
        if self.resolution < MIN_RENDER_SIDE {
            return Err(Error::Resolution {
                got: self.resolution,
                min: MIN_RENDER_SIDE,
            });
        }
        if let Some(b) = self.bump_resolution {
            if b < self.resolution {
                return Err(Error::Config(format!(
                    "bump resolution {b} below stage resolution {}",
                    self.resolution
                )));
            }
        }
        if self.margins.is_empty() {
            return Err(Error::Config("stage margin schedule is empty".into()));
        }
        for &m in &self.margins {
            ArcMarginConfig {
                margin: m,
                ..Default::default()
            }
            .validate()?;
        }
        Ok(())
    }

    /// Resolutions this stage may train at.
    pub fn max_resolution(&self) -> usize {
        self.bump_resolution.unwrap_or(self.resolution).max(self.resolution)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub stage: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub margin: f64,
    pub resolution: usize,
}

/// Writes `epoch,loss,lr,margin,resolution` rows at the `f32` precision checkpoints store.
pub fn write_stage_csv<W: Write>(log: &[EpochLog], w: W) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    let csv_err = |e: csv::Error| Error::Format(format!("stage log: {e}"));
    wr.write_record(["epoch", "loss", "lr", "margin", "resolution"]).map_err(csv_err)?;
    for e in log {
        wr.write_record([
            e.epoch.to_string(),
            (e.loss as f32).to_string(),
            (e.lr as f32).to_string(),
            (e.margin as f32).to_string(),
            e.resolution.to_string(),
        ])
        .map_err(csv_err)?;
    }
    wr.flush().map_err(|e| Error::Format(format!("stage log: {e}")))
}

/// Architecture and initialization of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub seed: u64,
    pub patch: usize,
    pub stride: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub gem_p: f64,
    pub pooling: Pooling,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            seed: 11,
            patch: 8,
            stride: 8,
            channels: 64,
            embed_dim: 32,
            gem_p: 3.0,
            pooling: Pooling::Gem,
        }
    }
}

/// Dataset-level channel mean of raw train renders at `side`.
pub fn dataset_channel_mean(dataset: &Dataset, side: usize) -> Result<[f64; 3]> {
    let mut imgs = Vec::new();
    for row in dataset.manifest.split(Split::Train) {
        imgs.push(dataset.render::<f32>(row, side)?);
    }
    if imgs.is_empty() {
        return Err(Error::Data("train split is empty".into()));
    }
    Ok(channel_mean(&imgs))
}

/// Fresh checkpoint: random head, zero momentum, no completed stages.
pub fn init_checkpoint<T: Scalar>(
    spec: &ModelSpec,
    classes: usize,
    mean: [f64; 3],
    arcmargin: ArcMarginConfig,
    sgd: SgdConfig,
) -> Result<Checkpoint<T>> {
    arcmargin.validate()?;
    sgd.validate()?;
    let backbone = BackboneParams::init(spec.seed, spec.patch, spec.stride, spec.channels)?;
    let head = HeadParams::init(spec.seed, spec.channels, spec.embed_dim, classes, spec.gem_p)?;
    let sgd_state = SgdState::zeros_like(&head);
    let schedule = ScheduleState::new(
        SchedulerKind::Cosine,
        sgd.lr0,
        1,
        PlateauConfig::default(),
        vec![arcmargin.margin],
        false,
    )?;
    Checkpoint {
        model: Model {
            backbone,
            head,
            preprocess: PreprocessConfig {
                crop_ratio: CROP_RATIO,
                mean,
            },
            pooling: spec.pooling,
        },
        arcmargin,
        sgd,
        sgd_state,
        schedule,
        stages_completed: 0,
        log: Vec::new(),
    }
    .canonical()
}

fn stage_schedule(incoming: &ScheduleState, stage: &StageConfig, continuing: bool) -> Result<ScheduleState> {
    let mut s = ScheduleState::new(
        stage.scheduler,
        stage.lr0,
        stage.epochs,
        stage.plateau,
        stage.margins.clone(),
        stage.bump_resolution.is_some(),
    )?;
    if stage.carry_schedule && continuing {
        let lr = incoming.lr.min(stage.lr0);
        if !(lr >= 0.0) {
            return Err(Error::Config(format!("carried learning rate {lr} is invalid")));
        }
        s.lr0 = lr;
        s.lr = lr;
        s.margin_index = incoming.margin_index.min(s.margins.len() - 1);
        s.decays = incoming.decays;
    }
    Ok(s)
}

fn prepare<T: Scalar>(
    dataset: &Dataset,
    row: &ManifestRow,
    side: usize,
    mode: PreprocessMode,
    pre: &PreprocessConfig,
    rng: impl FnOnce() -> SeededRng,
) -> Result<Tensor<T>> {
    match mode {
        PreprocessMode::TrainAugment => {
            let raw = dataset.render::<T>(row, pre.resize_side(side))?;
            train_augment(&raw, side, &mut rng(), pre)
        }
        PreprocessMode::TestStyle => test_preprocess(&dataset.render::<T>(row, side)?, side, pre),
    }
}

/// Trains the head for one stage on the train split.
///
/// Each epoch shuffles with its own stream, renders and preprocesses every sample,
/// and takes one SGD step per batch. The schedule is advanced after every epoch;
/// the returned checkpoint is in canonical (`f32`-rounded) form.
pub fn run_stage<T: Scalar>(
    ck: &Checkpoint<T>,
    stage: &StageConfig,
    dataset: &Dataset,
) -> Result<(Checkpoint<T>, Vec<EpochLog>)> {
    stage.validate()?;
    let train = dataset.manifest.split(Split::Train);
    if train.is_empty() {
        return Err(Error::Data("train split is empty".into()));
    }
    if ck.model.head.classes() != dataset.manifest.class_count() {
        return Err(Error::Data(format!(
            "model has {} classes, manifest has {}",
            ck.model.head.classes(),
            dataset.manifest.class_count()
        )));
    }
    let stage_idx = ck.stages_completed;
    let seed = ck.model.backbone.seed;
    let mut model = ck.model.clone();
    let mut state = ck.sgd_state.clone();
    let mut schedule = stage_schedule(&ck.schedule, stage, stage_idx > 0)?;
    let mut resolution = stage.resolution;
    let mut log = Vec::with_capacity(stage.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..stage.epochs {
        let lr = schedule.current_lr()?;
        let arc = ArcMarginConfig {
            margin: schedule.margin(),
            ..ck.arcmargin
        };
        order.sort_unstable();
        SeededRng::new(seed, &format!("shuffle/{stage_idx}/{epoch}")).shuffle(&mut order);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(stage.batch_size).enumerate() {
            let mut feats: Vec<FeatureMap<T>> = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let row = train[i];
                let img = prepare(dataset, row, resolution, stage.mode, &model.preprocess, || {
                    SeededRng::new(seed, &format!("augment/{stage_idx}/{epoch}/{}", row.id))
                })?;
                feats.push(model.backbone.extract_features(&img)?);
                labels.push(row.label);
            }
            let out = head_forward(&model.head, &feats, &labels, &arc, model.pooling)?;
            let loss = out.loss.as_f64();
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b, loss });
            }
            let grads = head_backward(&model.head, &out.cache, &labels)?;
            sgd_step(&mut model.head, &grads, &ck.sgd, &mut state, lr, stage.freeze)?;
            total += loss * chunk.len() as f64;
        }
        let mean = total / train.len() as f64;
        log.push(EpochLog {
            stage: stage_idx,
            epoch,
            loss: mean,
            lr,
            margin: arc.margin,
            resolution,
        });
        let events = schedule.end_epoch(mean)?;
        if events.resolution_bump {
            if let Some(r) = stage.bump_resolution {
                resolution = r;
            }
        }
    }

    let mut full_log = ck.log.clone();
    full_log.extend(log.iter().cloned());
    let next = Checkpoint {
        model,
        arcmargin: ArcMarginConfig {
            margin: schedule.margin(),
            ..ck.arcmargin
        },
        sgd: SgdConfig {
            lr0: schedule.lr0,
            ..ck.sgd
        },
        sgd_state: state,
        schedule,
        stages_completed: stage_idx + 1,
        log: full_log,
    }
    .canonical()?;
    // Report the logged values as stored.
    let stored = next.log[next.log.len() - log.len()..].to_vec();
    Ok((next, stored))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixConfig {
    pub resolution: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Multiplier on the learning rate of the last trained epoch.
    pub lr_factor: f64,
    /// Margin override; `None` keeps the margin the checkpoint ended with.
    pub margin: Option<f64>,
}

impl Default for FixConfig {
    fn default() -> Self {
        Self {
            resolution: 184,
            epochs: 3,
            batch_size: 32,
            lr_factor: 0.1,
            margin: None,
        }
    }
}

impl FixConfig {
    /// The stage [`fix_finetune`] runs for `ck`.
    pub fn stage<T: Scalar>(&self, ck: &Checkpoint<T>) -> StageConfig {
        StageConfig {
            resolution: self.resolution,
            epochs: self.epochs,
            scheduler: SchedulerKind::Cosine,
            lr0: self.lr_factor * ck.log.last().map_or(ck.schedule.lr0, |e| e.lr),
            plateau: PlateauConfig::default(),
            margins: vec![self.margin.unwrap_or_else(|| ck.schedule.margin())],
            bump_resolution: None,
            carry_schedule: false,
            batch_size: self.batch_size,
            mode: PreprocessMode::TestStyle,
            freeze: FreezeMask::NONE,
        }
    }
}

/// Head-only finetune at test resolution with the inference preprocessing.
/// Zero epochs returns the checkpoint unchanged.
pub fn fix_finetune<T: Scalar>(
    ck: &Checkpoint<T>,
    dataset: &Dataset,
    fix: &FixConfig,
) -> Result<(Checkpoint<T>, Vec<EpochLog>)> {
    if ck.stages_completed == 0 {
        return Err(Error::Usage("Fix needs a trained checkpoint".into()));
    }
    if fix.epochs == 0 {
        return Ok((ck.clone(), Vec::new()));
    }
    run_stage(ck, &fix.stage(ck), dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{synth_dataset, DatasetConfig};

    fn tiny() -> Dataset {
        synth_dataset(&DatasetConfig {
            classes: 3,
            train_per_class: 4,
            index_per_class: 2,
            query_per_class: 1,
            distractor_classes: 1,
            ..Default::default()
        })
        .unwrap()
    }

    fn spec() -> ModelSpec {
        ModelSpec {
            channels: 8,
            embed_dim: 4,
            ..Default::default()
        }
    }

    fn stage(epochs: usize, lr0: f64) -> StageConfig {
        StageConfig {
            resolution: 32,
            epochs,
            scheduler: SchedulerKind::Cosine,
            lr0,
            plateau: PlateauConfig::default(),
            margins: vec![0.15],
            bump_resolution: None,
            carry_schedule: false,
            batch_size: 5,
            mode: PreprocessMode::TrainAugment,
            freeze: FreezeMask::NONE,
        }
    }

    fn init(ds: &Dataset) -> Checkpoint<f32> {
        let mean = dataset_channel_mean(ds, 32).unwrap();
        init_checkpoint(&spec(), 3, mean, ArcMarginConfig::default(), SgdConfig::default()).unwrap()
    }

    #[test]
    fn stage_validation() {
        assert!(stage(0, 0.01).validate().is_err());
        let mut s = stage(1, 0.01);
        s.freeze = FreezeMask {
            gem_p: true,
            w_emb: true,
            b_emb: true,
            w_cls: true,
        };
        assert!(s.validate().is_err());
        let mut s = stage(1, 0.01);
        s.bump_resolution = Some(16);
        assert!(s.validate().is_err());
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let ds = tiny();
        let ck = init(&ds);
        let (next, log) = run_stage(&ck, &stage(1, 0.0), &ds).unwrap();
        assert_eq!(next.model.head, ck.model.head);
        assert_eq!(log.len(), 1);
        assert_eq!(log[0].lr, 0.0);
        assert!(log[0].loss.is_finite() && log[0].loss > 0.0);
    }

    #[test]
    fn only_gem_p_changes_under_mask() {
        let ds = tiny();
        let ck = init(&ds);
        let mut st = stage(2, 0.05);
        st.freeze = FreezeMask::ONLY_GEM_P;
        let (next, _) = run_stage(&ck, &st, &ds).unwrap();
        let (a, b) = (&ck.model.head, &next.model.head);
        assert_ne!(a.gem_p, b.gem_p);
        assert_eq!(a.w_emb, b.w_emb);
        assert_eq!(a.b_emb, b.b_emb);
        assert_eq!(a.w_cls, b.w_cls);
    }

    #[test]
    fn stage_is_deterministic_and_round_trips() {
        let ds = tiny();
        let ck = init(&ds);
        let (a, la) = run_stage(&ck, &stage(2, 0.01), &ds).unwrap();
        let (b, lb) = run_stage(&ck, &stage(2, 0.01), &ds).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(la, lb);
        assert_eq!(la.len(), 2);
        let bytes = a.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(a.stages_completed, 1);
    }

    #[test]
    fn checkpoint_layout_prefix() {
        let ds = tiny();
        let bytes = init(&ds).to_bytes();
        assert_eq!(&bytes[..4], b"AGRC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), CHECKPOINT_VERSION);
        // backbone section: u64 seed + 3 u32 + 4 f32 + C·3P² f32
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(len, 8 + 12 + 16 + 4 * 8 * 192);
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 2]).is_err());
    }

    #[test]
    fn fix_zero_epochs_and_test_style() {
        let ds = tiny();
        let (ck, _) = run_stage(&init(&ds), &stage(2, 0.01), &ds).unwrap();
        let fix = FixConfig {
            resolution: 40,
            epochs: 0,
            batch_size: 4,
            ..Default::default()
        };
        let (same, log) = fix_finetune(&ck, &ds, &fix).unwrap();
        assert_eq!(same, ck);
        assert!(log.is_empty());
        let fix = FixConfig { epochs: 1, ..fix };
        let st = fix.stage(&ck);
        assert_eq!(st.mode, PreprocessMode::TestStyle);
        // One decade below where cosine decay left off (0.005 in the second epoch).
        assert!((st.lr0 - 0.1 * ck.log[1].lr).abs() < 1e-12);
        assert!((ck.log[1].lr - 0.005).abs() < 1e-9);
        assert_eq!(st.margins, vec![ck.schedule.margin()]);
        let (after, log) = fix_finetune(&ck, &ds, &fix).unwrap();
        assert_eq!(log[0].resolution, 40);
        assert_ne!(after.model.head, ck.model.head);
        assert!(fix_finetune(&init(&ds), &ds, &fix).is_err());
    }

    #[test]
    fn class_count_mismatch_rejected() {
        let ds = tiny();
        let mean = dataset_channel_mean(&ds, 32).unwrap();
        let ck: Checkpoint<f32> =
            init_checkpoint(&spec(), 4, mean, ArcMarginConfig::default(), SgdConfig::default()).unwrap();
        assert!(matches!(run_stage(&ck, &stage(1, 0.01), &ds), Err(Error::Data(_))));
    }

    #[test]
    fn divergence_is_reported() {
        let ds = tiny();
        let mut ck = init(&ds);
        ck.model.head.w_emb.data_mut()[0] = f32::NAN;
        match run_stage(&ck, &stage(1, 0.01), &ds) {
            Err(Error::Diverged { epoch: 0, batch: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn stage_csv_format() {
        let log = vec![EpochLog {
            stage: 0,
            epoch: 0,
            loss: 1.5,
            lr: 0.01,
            margin: 0.15,
            resolution: 64,
        }];
        let mut buf = Vec::new();
        write_stage_csv(&log, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,loss,lr,margin,resolution\n0,1.5,0.01,0.15,64\n");
    }
}
