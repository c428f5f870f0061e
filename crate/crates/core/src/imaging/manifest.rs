use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use super::synth::{render_instance, ProtoSpec, RenderOptions};
use super::ImageSample;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, SeededRng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Index,
    Query,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Index => "index",
            Split::Query => "query",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "index" => Ok(Split::Index),
            "query" => Ok(Split::Query),
            other => Err(Error::Data(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub seed: u64,
    pub classes: usize,
    pub train_per_class: usize,
    pub index_per_class: usize,
    pub query_per_class: usize,
    /// Classes that only ever appear in the index split.
    pub distractor_classes: usize,
    pub noise_sigma: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            classes: 20,
            train_per_class: 40,
            index_per_class: 10,
            query_per_class: 5,
            distractor_classes: 10,
            noise_sigma: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub id: String,
    pub label: usize,
    pub split: Split,
    /// Instance seed: drives the view transform and pixel noise.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    rows: Vec<ManifestRow>,
    class_count: usize,
}

impl Manifest {
    /// Validates id uniqueness and dense train labels `0..K`.
    pub fn from_rows(rows: Vec<ManifestRow>) -> Result<Self> {
        let mut ids = HashSet::with_capacity(rows.len());
        for r in &rows {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Data(format!("duplicate id {:?}", r.id)));
            }
        }
        let train_labels: BTreeSet<usize> = rows
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| r.label)
            .collect();
        let class_count = train_labels.len();
        if train_labels.iter().copied().ne(0..class_count) {
            return Err(Error::Data("train labels are not dense 0..K-1".into()));
        }
        for r in &rows {
            if r.split == Split::Query && r.label >= class_count {
                return Err(Error::Data(format!(
                    "query {:?} has untrained label {}",
                    r.id, r.label
                )));
            }
        }
        Ok(Self { rows, class_count })
    }

    pub fn rows(&self) -> &[ManifestRow] {
        &self.rows
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestRow> {
        self.rows.iter().filter(|r| r.split == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.rows.iter().filter(|r| r.split == split).count()
    }

    /// Query id → ids of index rows sharing its label.
    pub fn ground_truth(&self) -> GroundTruth {
        let mut by_label: BTreeMap<usize, BTreeSet<String>> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.split == Split::Index) {
            by_label.entry(r.label).or_default().insert(r.id.clone());
        }
        let entries = self
            .rows
            .iter()
            .filter(|r| r.split == Split::Query)
            .map(|r| (r.id.clone(), by_label.get(&r.label).cloned().unwrap_or_default()))
            .collect();
        GroundTruth { entries }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        let io = |e: csv::Error| Error::Format(e.to_string());
        out.write_record(["id", "label", "split", "seed"]).map_err(io)?;
        for r in &self.rows {
            out.write_record([
                r.id.as_str(),
                &r.label.to_string(),
                r.split.as_str(),
                &r.seed.to_string(),
            ])
            .map_err(io)?;
        }
        out.flush().map_err(|e| Error::Format(e.to_string()))
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let headers = reader.headers().map_err(|e| Error::Format(e.to_string()))?;
        if headers != vec!["id", "label", "split", "seed"] {
            return Err(Error::Format(format!("unexpected manifest header {headers:?}")));
        }
        let mut rows = Vec::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
            let field = |i: usize| rec.get(i).unwrap_or_default();
            let bad = |what: &str| Error::Format(format!("manifest row {}: bad {what}", line + 2));
            rows.push(ManifestRow {
                id: field(0).to_string(),
                label: field(1).parse().map_err(|_| bad("label"))?,
                split: field(2).parse()?,
                seed: field(3).parse().map_err(|_| bad("seed"))?,
            });
        }
        Self::from_rows(rows)
    }
}

/// Relevance judgements: query id → relevant index ids.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GroundTruth {
    pub entries: BTreeMap<String, BTreeSet<String>>,
}

impl GroundTruth {
    pub fn get(&self, query: &str) -> Option<&BTreeSet<String>> {
        self.entries.get(query)
    }

    /// CSV `query_id,relevant_ids` with space-separated ids.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        let io = |e: csv::Error| Error::Format(e.to_string());
        out.write_record(["query_id", "relevant_ids"]).map_err(io)?;
        for (q, rel) in &self.entries {
            let joined = rel.iter().map(String::as_str).collect::<Vec<_>>().join(" ");
            out.write_record([q.as_str(), &joined]).map_err(io)?;
        }
        out.flush().map_err(|e| Error::Format(e.to_string()))
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let mut entries = BTreeMap::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
            let q = rec.get(0).unwrap_or_default().to_string();
            let rel = rec
                .get(1)
                .unwrap_or_default()
                .split_whitespace()
                .map(str::to_string)
                .collect();
            entries.insert(q, rel);
        }
        Ok(Self { entries })
    }
}

/// Manifest plus the class prototypes needed to render any of its rows.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub manifest: Manifest,
    protos: Vec<ProtoSpec>,
}

impl Dataset {
    /// Rebuilds prototypes for an existing manifest; labels must be below `classes + distractors`.
    pub fn with_manifest(config: DatasetConfig, manifest: Manifest) -> Result<Self> {
        let total = config.classes + config.distractor_classes;
        if let Some(r) = manifest.rows().iter().find(|r| r.label >= total) {
            return Err(Error::Data(format!(
                "row {:?} label {} outside {total} configured classes",
                r.id, r.label
            )));
        }
        let protos = (0..total).map(|c| ProtoSpec::new(config.seed, c)).collect();
        Ok(Self {
            config,
            manifest,
            protos,
        })
    }

    pub fn proto(&self, label: usize) -> &ProtoSpec {
        &self.protos[label]
    }

    pub fn render_options(&self) -> RenderOptions {
        RenderOptions {
            noise_sigma: self.config.noise_sigma,
            transform: true,
        }
    }

    pub fn render<T: Scalar>(&self, row: &ManifestRow, side: usize) -> Result<Tensor<T>> {
        render_instance(self.proto(row.label), row.seed, side, self.render_options())
    }

    pub fn render_sample<T: Scalar>(&self, row: &ManifestRow, side: usize) -> Result<ImageSample<T>> {
        Ok(ImageSample {
            id: row.id.clone(),
            label: row.label,
            split: row.split,
            pixels: self.render(row, side)?,
        })
    }
}

/// Builds the deterministic synthetic manifest.
///
/// Rows are ordered train, index, query; within a split by class then instance.
/// Distractor classes take labels `K..K+D` and appear only in the index split.
pub fn synth_dataset(config: &DatasetConfig) -> Result<Dataset> {
    if config.classes < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes, got {}",
            config.classes
        )));
    }
    if config.train_per_class == 0 {
        return Err(Error::Config("train split would be empty".into()));
    }
    let mut rows = Vec::new();
    let mut push = |prefix: &str, label: usize, n: usize, split: Split| {
        for i in 0..n {
            let id = format!("{prefix}{label:03}-{i:03}");
            let seed = SeededRng::new(config.seed, &format!("instance/{id}")).next_u64();
            rows.push(ManifestRow {
                id,
                label,
                split,
                seed,
            });
        }
    };
    for c in 0..config.classes {
        push("t", c, config.train_per_class, Split::Train);
    }
    for c in 0..config.classes {
        push("i", c, config.index_per_class, Split::Index);
    }
    for d in 0..config.distractor_classes {
        push("i", config.classes + d, config.index_per_class, Split::Index);
    }
    for c in 0..config.classes {
        push("q", c, config.query_per_class, Split::Query);
    }
    let manifest = Manifest::from_rows(rows)?;
    Dataset::with_manifest(config.clone(), manifest)
}
