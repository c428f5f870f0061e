use crate::error::{Error, Result};
use crate::head::ArcMarginConfig;
use crate::imaging::Dataset;
use crate::numerics::Scalar;
use crate::optim::{FreezeMask, PlateauConfig, SchedulerKind, SgdConfig};
use crate::trainer::{init_checkpoint, run_stage, Checkpoint, ModelSpec, PreprocessMode, StageConfig};

/// A named model plus its ordered training stages.
#[derive(Clone, Debug, PartialEq)]
pub struct Recipe {
    pub name: String,
    pub model: ModelSpec,
    pub arcmargin: ArcMarginConfig,
    pub sgd: SgdConfig,
    pub stages: Vec<StageConfig>,
}

impl Recipe {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config(format!("recipe {:?} has no stages", self.name)));
        }
        for s in &self.stages {
            s.validate()?;
        }
        for w in self.stages.windows(2) {
            if w[1].resolution < w[0].max_resolution() {
                return Err(Error::Config(format!(
                    "recipe {:?}: stage resolutions must not decrease ({} after {})",
                    self.name,
                    w[1].resolution,
                    w[0].max_resolution()
                )));
            }
        }
        self.arcmargin.validate()?;
        self.sgd.validate()
    }

    pub fn resolutions(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.resolution).collect()
    }
}

/// Per-stage resolution, epoch count and starting lr shared by both preset recipes.
#[derive(Clone, Debug, PartialEq)]
pub struct RecipeStages {
    pub resolutions: Vec<usize>,
    pub epochs: Vec<usize>,
    pub lr0: Vec<f64>,
    pub batch_size: usize,
}

impl Default for RecipeStages {
    fn default() -> Self {
        Self {
            resolutions: vec![64, 128],
            epochs: vec![15, 5],
            lr0: vec![0.01, 0.001],
            batch_size: 32,
        }
    }
}

impl RecipeStages {
    fn check(&self) -> Result<()> {
        let n = self.resolutions.len();
        if n == 0 || self.epochs.len() != n || self.lr0.len() != n {
            return Err(Error::Config(format!(
                "stage lists disagree: {} resolutions, {} epoch counts, {} learning rates",
                n,
                self.epochs.len(),
                self.lr0.len()
            )));
        }
        Ok(())
    }

    fn stage(&self, i: usize, scheduler: SchedulerKind, margins: Vec<f64>, plateau: PlateauConfig) -> StageConfig {
        StageConfig {
            resolution: self.resolutions[i],
            epochs: self.epochs[i],
            scheduler,
            lr0: self.lr0[i],
            plateau,
            margins,
            bump_resolution: None,
            carry_schedule: false,
            batch_size: self.batch_size,
            mode: PreprocessMode::TrainAugment,
            freeze: FreezeMask::NONE,
        }
    }
}

/// Fresh cosine decay every stage, one fixed margin.
pub fn cosine_recipe(
    name: &str,
    model: ModelSpec,
    arcmargin: ArcMarginConfig,
    sgd: SgdConfig,
    stages: &RecipeStages,
) -> Result<Recipe> {
    stages.check()?;
    let r = Recipe {
        name: name.into(),
        model,
        arcmargin,
        sgd,
        stages: (0..stages.resolutions.len())
            .map(|i| stages.stage(i, SchedulerKind::Cosine, vec![arcmargin.margin], PlateauConfig::default()))
            .collect(),
    };
    r.validate()?;
    Ok(r)
}

/// Steps-on-plateau with a margin ladder carried across stages. With `bump`, the
/// first lr decay in stage one moves its remaining epochs to the next stage's resolution.
pub fn plateau_recipe(
    name: &str,
    model: ModelSpec,
    arcmargin: ArcMarginConfig,
    sgd: SgdConfig,
    stages: &RecipeStages,
    margins: Vec<f64>,
    plateau: PlateauConfig,
    bump: bool,
) -> Result<Recipe> {
    stages.check()?;
    let mut out: Vec<StageConfig> = (0..stages.resolutions.len())
        .map(|i| {
            let mut s = stages.stage(i, SchedulerKind::PlateauSteps, margins.clone(), plateau);
            s.carry_schedule = i > 0;
            s
        })
        .collect();
    if bump && out.len() > 1 {
        out[0].bump_resolution = Some(stages.resolutions[1]);
    }
    let r = Recipe {
        name: name.into(),
        model,
        arcmargin,
        sgd,
        stages: out,
    };
    r.validate()?;
    Ok(r)
}

/// Runs every stage in order from a fresh model. Returns one checkpoint per stage.
pub fn run_recipe<T: Scalar>(recipe: &Recipe, dataset: &Dataset, mean: [f64; 3]) -> Result<Vec<Checkpoint<T>>> {
    recipe.validate()?;
    let mut ck = init_checkpoint::<T>(
        &recipe.model,
        dataset.manifest.class_count(),
        mean,
        recipe.arcmargin,
        recipe.sgd,
    )?;
    let mut out = Vec::with_capacity(recipe.stages.len());
    for (i, stage) in recipe.stages.iter().enumerate() {
        let (next, _) = run_stage(&ck, stage, dataset).map_err(|e| Error::Stage {
            stage: i,
            source: Box::new(e),
        })?;
        out.push(next.clone());
        ck = next;
    }
    Ok(out)
}
