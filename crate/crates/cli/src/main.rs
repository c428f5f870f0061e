use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use arcgem::config::{ExperimentConfig, RawConfig};
use arcgem::imaging::Split;
use arcgem::pipeline::{self, RESOLVED_FILE};
use arcgem::retrieval::{
    build_descriptor_set, ensemble_concat, map_at_k, read_results_csv, search_topk, write_results_csv, DescriptorSet,
};
use arcgem::trainer::Checkpoint;
use arcgem::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "arcgem", version, about = "Desk-scale global-descriptor retrieval experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run directory holding the manifest, checkpoints, descriptors and reports.
    #[arg(long, default_value = "run")]
    run_dir: PathBuf,
    /// Config file of `key=value` lines. Defaults to the run directory's config.resolved, then built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.epochs=2,1`. Repeatable; applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn raw(&self) -> Result<RawConfig> {
        let fallback = self.run_dir.join(RESOLVED_FILE);
        let mut raw = match &self.config {
            Some(p) => RawConfig::load(p)?,
            None if fallback.exists() => RawConfig::load(&fallback)?,
            None => RawConfig::default(),
        };
        for s in &self.sets {
            raw.set(s)?;
        }
        Ok(raw)
    }

    /// Resolves the config and echoes it into the run directory.
    fn resolve(&self) -> Result<ExperimentConfig> {
        let raw = self.raw()?;
        let cfg = raw.resolve()?;
        pipeline::record_config(&raw, &self.run_dir)?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Index,
    Query,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Index => Split::Index,
            SplitArg::Query => Split::Query,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset manifest and ground truth.
    GenData(ConfigArgs),
    /// Train both recipes and their Fix stage; writes checkpoints and stage logs.
    Train(ConfigArgs),
    /// Extract L2-normalized descriptors for one split with a checkpoint.
    Extract {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint file (.agrc).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Which split to describe.
        #[arg(long, value_enum)]
        split: SplitArg,
        /// Test resolution B (crop side).
        #[arg(long)]
        resolution: usize,
        /// Output descriptor file (.dsc1).
        #[arg(long)]
        out: PathBuf,
        /// Model tag stored in the file.
        #[arg(long, default_value = "model")]
        tag: String,
    },
    /// Concatenate two descriptor files of the same ids after normalizing each.
    Ensemble {
        /// First model's descriptor file.
        #[arg(long)]
        a: PathBuf,
        /// Second model's descriptor file; ids must match row for row.
        #[arg(long)]
        b: PathBuf,
        /// Output descriptor file (dimension is the sum of both).
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank index descriptors for every query by dot product.
    Search {
        /// Query descriptor file.
        #[arg(long)]
        queries: PathBuf,
        /// Index descriptor file.
        #[arg(long)]
        index: PathBuf,
        /// Results kept per query.
        #[arg(long, default_value_t = 100)]
        k: usize,
        /// Output CSV (`query_id,rank,index_id,score`).
        #[arg(long)]
        out: PathBuf,
    },
    /// Score search results against ground truth with mAP@k.
    Eval {
        /// Search results CSV from `search`.
        #[arg(long)]
        results: PathBuf,
        /// Ground-truth CSV (`query_id,relevant_ids`, ids space-separated).
        #[arg(long)]
        ground_truth: PathBuf,
        /// AP cutoff.
        #[arg(long, default_value_t = 100)]
        k: usize,
        /// Optional per-query AP CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate every trained model and ensemble over the test resolutions; writes report.md and report.csv.
    Report(ConfigArgs),
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(c) => {
            let cfg = c.resolve()?;
            let ds = pipeline::generate_data(&cfg, &c.run_dir)?;
            println!(
                "{} rows ({} train, {} index, {} query) in {}",
                ds.manifest.rows().len(),
                ds.manifest.count(Split::Train),
                ds.manifest.count(Split::Index),
                ds.manifest.count(Split::Query),
                c.run_dir.display()
            );
        }
        Command::Train(c) => {
            let cfg = c.resolve()?;
            let ds = pipeline::load_dataset(&cfg, &c.run_dir)?;
            let out = pipeline::train_all(&cfg, &ds, &c.run_dir)?;
            for r in &out.recipes {
                let last = r.fix.as_ref().unwrap_or_else(|| r.final_stage());
                let loss = last.log.last().map_or(f64::NAN, |e| e.loss);
                println!("recipe {}: {} stages, final loss {loss:.4}", r.name, last.stages_completed);
            }
        }
        Command::Extract {
            cfg: c,
            checkpoint,
            split,
            resolution,
            out,
            tag,
        } => {
            let cfg = c.resolve()?;
            let ds = pipeline::load_dataset(&cfg, &c.run_dir)?;
            let ck = Checkpoint::<f32>::load(&checkpoint)?;
            let set = build_descriptor_set(&ck.model, &ds, split.into(), resolution, ck.model.pooling, &tag)?;
            set.save(&out)?;
            println!("{} descriptors of dim {} -> {}", set.len(), set.dim(), out.display());
        }
        Command::Ensemble { a, b, out } => {
            let set = ensemble_concat(&DescriptorSet::<f32>::load(&a)?, &DescriptorSet::<f32>::load(&b)?)?;
            set.save(&out)?;
            println!("{} descriptors of dim {} -> {}", set.len(), set.dim(), out.display());
        }
        Command::Search { queries, index, k, out } => {
            let results = search_topk(&DescriptorSet::<f32>::load(&queries)?, &DescriptorSet::<f32>::load(&index)?, k)?;
            write_results_csv(&results, create(&out)?)?;
            println!("{} queries ranked -> {}", results.len(), out.display());
        }
        Command::Eval {
            results,
            ground_truth,
            k,
            out,
        } => {
            let results = read_results_csv(open(&results)?)?;
            let truth = arcgem::imaging::GroundTruth::read_csv(open(&ground_truth)?)?;
            let report = map_at_k(&results, &truth, k)?;
            if let Some(p) = out {
                report.write_csv(create(&p)?)?;
            }
            println!("{}", report.summary_line());
        }
        Command::Report(c) => {
            let cfg = c.resolve()?;
            let ds = pipeline::load_dataset(&cfg, &c.run_dir)?;
            let trained = pipeline::load_trained(&cfg, &c.run_dir)?;
            let report = pipeline::evaluate_all(&cfg, &ds, &trained, &c.run_dir)?;
            print!("{}", report.to_markdown());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) => 1,
        Error::Stage { source, .. } => exit_code(source),
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
