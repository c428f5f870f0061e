//! End-to-end experiment: data, both recipes, Fix, evaluation grid, ensembles and report.
//!
//! Run directory layout:
//!
//! ```text
//! config.resolved  manifest.csv  ground_truth.csv  baseline.agrc
//! recipe_<r>/checkpoint_<n>.agrc  recipe_<r>/stage_<n>.csv     (n = stage; the last is Fix)
//! descriptors_<tag>.dsc1  eval_<tag>.csv  report.md  report.csv
//! ```

use std::fmt::Write as _;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use crate::binio::write_atomic;
use crate::config::{ExperimentConfig, RawConfig, RECIPE_NAMES};
use crate::error::{Error, Result};
use crate::imaging::{synth_dataset, Dataset, GroundTruth, Manifest, Split};
use crate::model::Model;
use crate::retrieval::{build_descriptor_set, ensemble_concat, map_at_k, search_topk, DescriptorSet, EvalReport};
use crate::trainer::{dataset_channel_mean, fix_finetune, init_checkpoint, run_stage, write_stage_csv, Checkpoint};

pub const RESOLVED_FILE: &str = "config.resolved";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";
pub const BASELINE_FILE: &str = "baseline.agrc";

/// Required gain of each trained recipe over the untrained head.
pub const BASELINE_GAIN: f64 = 0.2;
pub const STAGE_TREND_TOLERANCE: f64 = 0.02;
pub const RESOLUTION_TREND_TOLERANCE: f64 = 0.02;
pub const FIX_TREND_TOLERANCE: f64 = 0.01;
pub const ENSEMBLE_TREND_TOLERANCE: f64 = 0.01;

/// Serializes with `write` into memory, then writes the file atomically.
fn write_with(path: &Path, write: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    write_atomic(path, &buf)
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `config.resolved` into the run directory.
pub fn record_config(raw: &RawConfig, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    write_atomic(dir.join(RESOLVED_FILE), raw.render_resolved().as_bytes())
}

/// Generates the synthetic dataset and writes its manifest and ground truth.
pub fn generate_data(cfg: &ExperimentConfig, dir: &Path) -> Result<Dataset> {
    ensure_dir(dir)?;
    let ds = synth_dataset(&cfg.dataset)?;
    write_with(&dir.join(MANIFEST_FILE), |b| ds.manifest.write_csv(b))?;
    write_with(&dir.join(GROUND_TRUTH_FILE), |b| ds.manifest.ground_truth().write_csv(b))?;
    Ok(ds)
}

pub fn load_dataset(cfg: &ExperimentConfig, dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let manifest = Manifest::read_csv(File::open(&path).map_err(|e| Error::io(&path, e))?)?;
    Dataset::with_manifest(cfg.dataset.clone(), manifest)
}

pub fn load_ground_truth(dir: &Path) -> Result<GroundTruth> {
    let path = dir.join(GROUND_TRUTH_FILE);
    GroundTruth::read_csv(File::open(&path).map_err(|e| Error::io(&path, e))?)
}

pub fn recipe_dir(dir: &Path, recipe: &str) -> PathBuf {
    dir.join(format!("recipe_{recipe}"))
}

pub fn checkpoint_path(dir: &Path, recipe: &str, stage: usize) -> PathBuf {
    recipe_dir(dir, recipe).join(format!("checkpoint_{stage}.agrc"))
}

/// Checkpoints of one recipe: one per training stage, then the optional Fix stage.
#[derive(Clone, Debug)]
pub struct TrainedRecipe {
    pub name: String,
    pub stages: Vec<Checkpoint<f32>>,
    pub fix: Option<Checkpoint<f32>>,
}

impl TrainedRecipe {
    pub fn final_stage(&self) -> &Checkpoint<f32> {
        self.stages.last().expect("recipes have at least one stage")
    }
}

fn save_stage(ck: &Checkpoint<f32>, dir: &Path, recipe: &str) -> Result<()> {
    let stage = ck.stages_completed - 1;
    ck.save(checkpoint_path(dir, recipe, stage))?;
    let log: Vec<_> = ck.log.iter().filter(|e| e.stage == stage).cloned().collect();
    write_with(&recipe_dir(dir, recipe).join(format!("stage_{stage}.csv")), |b| write_stage_csv(&log, b))
}

/// Trains recipe slot `i` and its Fix stage, writing checkpoints and stage logs.
pub fn train_recipe(cfg: &ExperimentConfig, dataset: &Dataset, mean: [f64; 3], i: usize, dir: &Path) -> Result<TrainedRecipe> {
    let recipe = cfg.recipe(i)?;
    ensure_dir(&recipe_dir(dir, &recipe.name))?;
    let mut ck = init_checkpoint::<f32>(
        &recipe.model,
        dataset.manifest.class_count(),
        mean,
        recipe.arcmargin,
        recipe.sgd,
    )?;
    let mut stages = Vec::with_capacity(recipe.stages.len());
    for (s, stage) in recipe.stages.iter().enumerate() {
        let wrap = |e| Error::Stage {
            stage: s,
            source: Box::new(e),
        };
        ck = run_stage(&ck, stage, dataset).map_err(wrap)?.0;
        save_stage(&ck, dir, &recipe.name).map_err(wrap)?;
        stages.push(ck.clone());
    }
    let fix = if cfg.fix.epochs > 0 {
        let s = stages.len();
        let wrap = |e| Error::Stage {
            stage: s,
            source: Box::new(e),
        };
        let fixed = fix_finetune(&ck, dataset, &cfg.fix).map_err(wrap)?.0;
        save_stage(&fixed, dir, &recipe.name).map_err(wrap)?;
        Some(fixed)
    } else {
        None
    };
    Ok(TrainedRecipe {
        name: recipe.name,
        stages,
        fix,
    })
}

/// Untrained model (recipe a's initialization); saved as `baseline.agrc`.
pub fn baseline(cfg: &ExperimentConfig, dataset: &Dataset, mean: [f64; 3], dir: &Path) -> Result<Checkpoint<f32>> {
    let recipe = cfg.recipe(0)?;
    let ck = init_checkpoint(&recipe.model, dataset.manifest.class_count(), mean, recipe.arcmargin, recipe.sgd)?;
    ck.save(dir.join(BASELINE_FILE))?;
    Ok(ck)
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub baseline: Checkpoint<f32>,
    pub recipes: Vec<TrainedRecipe>,
}

pub fn train_all(cfg: &ExperimentConfig, dataset: &Dataset, dir: &Path) -> Result<TrainOutput> {
    let mean = dataset_channel_mean(dataset, cfg.stages.resolutions[0])?;
    let baseline = baseline(cfg, dataset, mean, dir)?;
    let recipes = (0..RECIPE_NAMES.len())
        .map(|i| train_recipe(cfg, dataset, mean, i, dir))
        .collect::<Result<_>>()?;
    Ok(TrainOutput { baseline, recipes })
}

/// Reloads everything `train_all` wrote.
pub fn load_trained(cfg: &ExperimentConfig, dir: &Path) -> Result<TrainOutput> {
    let baseline = Checkpoint::load(dir.join(BASELINE_FILE))?;
    let mut recipes = Vec::new();
    for (i, name) in RECIPE_NAMES.iter().enumerate() {
        let n = cfg.recipe(i)?.stages.len();
        let stages = (0..n)
            .map(|s| Checkpoint::load(checkpoint_path(dir, name, s)))
            .collect::<Result<Vec<_>>>()?;
        let fix = if cfg.fix.epochs > 0 {
            Some(Checkpoint::load(checkpoint_path(dir, name, n))?)
        } else {
            None
        };
        recipes.push(TrainedRecipe {
            name: name.to_string(),
            stages,
            fix,
        });
    }
    Ok(TrainOutput { baseline, recipes })
}

/// Index and query descriptors of one model at one test resolution.
#[derive(Clone, Debug)]
pub struct DescriptorPair {
    pub index: DescriptorSet<f32>,
    pub query: DescriptorSet<f32>,
}

pub fn describe(model: &Model<f32>, dataset: &Dataset, resolution: usize, tag: &str) -> Result<DescriptorPair> {
    Ok(DescriptorPair {
        index: build_descriptor_set(model, dataset, Split::Index, resolution, model.pooling, tag)?,
        query: build_descriptor_set(model, dataset, Split::Query, resolution, model.pooling, tag)?,
    })
}

/// Searches, scores and persists descriptors plus per-query AP under `tag`.
pub fn score(pair: &DescriptorPair, truth: &GroundTruth, k: usize, dir: &Path, tag: &str) -> Result<EvalReport> {
    pair.index.save(dir.join(format!("descriptors_{tag}-index.dsc1")))?;
    pair.query.save(dir.join(format!("descriptors_{tag}-query.dsc1")))?;
    let results = search_topk(&pair.query, &pair.index, k)?;
    let report = map_at_k(&results, truth, k)?;
    write_with(&dir.join(format!("eval_{tag}.csv")), |b| report.write_csv(b))?;
    Ok(report)
}

/// One row of the results grid: mAP per test resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub model: String,
    pub cells: Vec<(usize, f64)>,
}

impl GridRow {
    pub fn at(&self, resolution: usize) -> Option<f64> {
        self.cells.iter().find(|(r, _)| *r == resolution).map(|&(_, v)| v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrendCheck {
    pub id: String,
    pub description: String,
    pub observed: f64,
    /// Pass iff `observed ≥ bound`.
    pub bound: f64,
}

impl TrendCheck {
    pub fn passed(&self) -> bool {
        self.observed >= self.bound
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub resolutions: Vec<usize>,
    pub rows: Vec<GridRow>,
    pub checks: Vec<TrendCheck>,
}

impl Report {
    pub fn row(&self, model: &str) -> Option<&GridRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    pub fn value(&self, model: &str, resolution: usize) -> Result<f64> {
        self.row(model)
            .and_then(|r| r.at(resolution))
            .ok_or_else(|| Error::Data(format!("report has no cell for {model} at {resolution}")))
    }

    pub fn check(&self, id: &str) -> Option<&TrendCheck> {
        self.checks.iter().find(|c| c.id == id)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model");
        for r in &self.resolutions {
            let _ = write!(out, ",{r}");
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.model);
            for &r in &self.resolutions {
                match row.at(r) {
                    Some(v) => {
                        let _ = write!(out, ",{v:.6}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("# Retrieval results (mAP@100)\n\n| model |");
        for r in &self.resolutions {
            let _ = write!(out, " {r} |");
        }
        out.push_str("\n|---|");
        out.push_str(&"---:|".repeat(self.resolutions.len()));
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "| {} |", row.model);
            for &r in &self.resolutions {
                match row.at(r) {
                    Some(v) => {
                        let _ = write!(out, " {v:.4} |");
                    }
                    None => out.push_str(" – |"),
                }
            }
            out.push('\n');
        }
        out.push_str("\n## Checks\n\n| id | check | observed | bound | result |\n|---|---|---:|---:|---|\n");
        for c in &self.checks {
            let _ = writeln!(
                out,
                "| {} | {} | {:.4} | {:.4} | {} |",
                c.id,
                c.description,
                c.observed,
                c.bound,
                if c.passed() { "pass" } else { "FAIL" }
            );
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(dir.join("report.md"), self.to_markdown().as_bytes())?;
        write_atomic(dir.join("report.csv"), self.to_csv().as_bytes())
    }
}

fn stage_label(recipe: &str, stage: usize, resolution: usize) -> String {
    format!("{recipe} stage {} ({resolution})", stage + 1)
}

fn fix_label(recipe: &str, resolution: usize) -> String {
    format!("{recipe} fix ({resolution})")
}

fn ensemble_label(names: &[String], fix: bool) -> String {
    format!("ensemble {}{}", names.join("+"), if fix { " fix" } else { "" })
}

/// Evaluates every model and ensemble at every test resolution and runs the trend checks.
pub fn evaluate_all(cfg: &ExperimentConfig, dataset: &Dataset, trained: &TrainOutput, dir: &Path) -> Result<Report> {
    let truth = dataset.manifest.ground_truth();
    let res = cfg.eval_resolutions.clone();
    let mut rows = Vec::new();

    let grid = |label: &str, tag: &str, model: &Model<f32>| -> Result<(GridRow, Vec<DescriptorPair>)> {
        let mut cells = Vec::new();
        let mut pairs = Vec::new();
        for &r in &res {
            let t = format!("{tag}-r{r}");
            let pair = describe(model, dataset, r, &t)?;
            cells.push((r, score(&pair, &truth, cfg.k, dir, &t)?.map_at_100));
            pairs.push(pair);
        }
        Ok((
            GridRow {
                model: label.to_string(),
                cells,
            },
            pairs,
        ))
    };

    rows.push(grid("untrained", "baseline", &trained.baseline.model)?.0);
    let mut finals = Vec::new();
    let mut fixes = Vec::new();
    for rc in &trained.recipes {
        let n = rc.stages.len();
        for (s, ck) in rc.stages.iter().enumerate() {
            let r = cfg.stages.resolutions[s];
            let (row, pairs) = grid(&stage_label(&rc.name, s, r), &format!("{}-s{}", rc.name, s + 1), &ck.model)?;
            rows.push(row);
            if s + 1 == n {
                finals.push(pairs);
            }
        }
        if let Some(fx) = &rc.fix {
            let (row, pairs) = grid(&fix_label(&rc.name, cfg.fix.resolution), &format!("{}-fix", rc.name), &fx.model)?;
            rows.push(row);
            fixes.push(pairs);
        }
    }

    let names: Vec<String> = trained.recipes.iter().map(|r| r.name.clone()).collect();
    let ensemble = |sets: &[Vec<DescriptorPair>], fix: bool| -> Result<GridRow> {
        let label = ensemble_label(&names, fix);
        let tag = format!("ens{}", if fix { "-fix" } else { "" });
        let mut cells = Vec::new();
        for (j, &r) in res.iter().enumerate() {
            let (a, b) = (&sets[0][j], &sets[1][j]);
            let pair = DescriptorPair {
                index: ensemble_concat(&a.index, &b.index)?,
                query: ensemble_concat(&a.query, &b.query)?,
            };
            cells.push((r, score(&pair, &truth, cfg.k, dir, &format!("{tag}-r{r}"))?.map_at_100));
        }
        Ok(GridRow { model: label, cells })
    };
    if finals.len() == 2 {
        rows.push(ensemble(&finals, false)?);
    }
    if fixes.len() == 2 {
        rows.push(ensemble(&fixes, true)?);
    }

    let mut report = Report {
        resolutions: res,
        rows,
        checks: Vec::new(),
    };
    report.checks = trend_checks(cfg, trained, &report)?;
    report.write(dir)?;
    Ok(report)
}

fn trend_checks(cfg: &ExperimentConfig, trained: &TrainOutput, rep: &Report) -> Result<Vec<TrendCheck>> {
    let train_res = &cfg.stages.resolutions;
    let last = cfg.final_train_resolution();
    let fix_res = cfg.fix.resolution;
    let base = rep.value("untrained", last)?;
    let mut checks = Vec::new();
    let mut finals_at_fix = Vec::new();
    for rc in &trained.recipes {
        let n = rc.stages.len();
        let final_label = stage_label(&rc.name, n - 1, last);
        let fin = rep.value(&final_label, last)?;
        checks.push(TrendCheck {
            id: format!("efficacy-{}", rc.name),
            description: format!("{final_label} @{last} minus untrained @{last} ≥ {BASELINE_GAIN}"),
            observed: fin - base,
            bound: BASELINE_GAIN,
        });
        checks.push(TrendCheck {
            id: format!("floor-{}", rc.name),
            description: format!("{final_label} @{last} ≥ calibrated floor"),
            observed: fin,
            bound: cfg.map_floor,
        });
        if n > 1 {
            let first = rep.value(&stage_label(&rc.name, 0, train_res[0]), train_res[0])?;
            checks.push(TrendCheck {
                id: format!("a-{}", rc.name),
                description: format!(
                    "stage {n} @{last} minus stage 1 @{} ≥ −{STAGE_TREND_TOLERANCE}",
                    train_res[0]
                ),
                observed: fin - first,
                bound: -STAGE_TREND_TOLERANCE,
            });
        }
        let at_fix = rep.value(&final_label, fix_res)?;
        finals_at_fix.push(at_fix);
        checks.push(TrendCheck {
            id: format!("b-{}", rc.name),
            description: format!("{final_label} @{fix_res} minus @{last} ≥ −{RESOLUTION_TREND_TOLERANCE}"),
            observed: at_fix - fin,
            bound: -RESOLUTION_TREND_TOLERANCE,
        });
        if rc.fix.is_some() {
            let fx = rep.value(&fix_label(&rc.name, fix_res), fix_res)?;
            checks.push(TrendCheck {
                id: format!("c-{}", rc.name),
                description: format!("Fix @{fix_res} minus no-Fix @{fix_res} ≥ −{FIX_TREND_TOLERANCE}"),
                observed: fx - at_fix,
                bound: -FIX_TREND_TOLERANCE,
            });
        }
    }
    let names: Vec<String> = trained.recipes.iter().map(|r| r.name.clone()).collect();
    if let Some(row) = rep.row(&ensemble_label(&names, false)) {
        let best = finals_at_fix.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ens = row
            .at(fix_res)
            .ok_or_else(|| Error::Data(format!("ensemble not evaluated at {fix_res}")))?;
        checks.push(TrendCheck {
            id: "d".into(),
            description: format!("ensemble @{fix_res} minus best single @{fix_res} ≥ −{ENSEMBLE_TREND_TOLERANCE}"),
            observed: ens - best,
            bound: -ENSEMBLE_TREND_TOLERANCE,
        });
    }
    Ok(checks)
}

/// `gen-data`, `train` and `report` in one call.
pub fn run_all(raw: &RawConfig, dir: &Path) -> Result<Report> {
    let cfg = raw.resolve()?;
    record_config(raw, dir)?;
    let dataset = generate_data(&cfg, dir)?;
    let trained = train_all(&cfg, &dataset, dir)?;
    evaluate_all(&cfg, &dataset, &trained, dir)
}
