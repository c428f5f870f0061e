//! `AGRC` checkpoint container.
//!
//! ```text
//! "AGRC" | u32 version | section backbone | section head | section optimizer
//!        | section schedule | section log
//! section = u32 byte length, payload
//! ```
//! All integers little-endian; every float is stored as `f32` LE.
//!
//! * backbone: `u64 seed, u32 P, u32 S, u32 C, f32 crop_ratio, f32 mean[3], f32 projection[C·3P²]`
//! * head: `u8 pooling, f32 gem_p, u32 D, u32 C, u32 K, f32 W_emb[D·C], f32 b_emb[D], f32 W_cls[K·D],
//!   f32 arc_scale, f32 arc_margin, f32 arc_cos_eps`
//! * optimizer: `f32 momentum, f32 weight_decay, f32 v_gem_p, f32 v_W_emb[D·C], f32 v_b_emb[D], f32 v_W_cls[K·D]`
//! * schedule: `u8 kind, f32 lr0, f32 lr, u32 epoch, u32 total_epochs, f32 best_loss, u32 since_improve,
//!   u32 patience, f32 threshold, f32 decay_factor, u32 n, f32 margins[n], u32 margin_index,
//!   u8 bump_on_first_decay, u32 decays`
//! * log: `u32 stages_completed, u32 n, n × (u32 stage, u32 epoch, f32 loss, f32 lr, f32 margin, u32 resolution)`

use std::path::Path;

use crate::backbone::BackboneParams;
use crate::binio::{read_file, write_atomic, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::head::{ArcMarginConfig, HeadParams, Pooling};
use crate::imaging::PreprocessConfig;
use crate::model::Model;
use crate::numerics::{Scalar, Tensor};
use crate::optim::{PlateauConfig, ScheduleState, SchedulerKind, SgdConfig, SgdState};
use crate::trainer::EpochLog;

const MAGIC: &[u8; 4] = b"AGRC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume or evaluate a trained model.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub arcmargin: ArcMarginConfig,
    pub sgd: SgdConfig,
    pub sgd_state: SgdState<T>,
    pub schedule: ScheduleState,
    pub stages_completed: usize,
    pub log: Vec<EpochLog>,
}

impl<T: Scalar> PartialEq for Checkpoint<T> {
    fn eq(&self, o: &Self) -> bool {
        self.model == o.model
            && self.arcmargin == o.arcmargin
            && self.sgd == o.sgd
            && self.sgd_state == o.sgd_state
            && self.schedule == o.schedule
            && self.stages_completed == o.stages_completed
            && self.log == o.log
    }
}

fn f32_of<T: Scalar>(v: T) -> f32 {
    v.to_f32().unwrap_or(f32::NAN)
}

fn tensor<T: Scalar>(w: &mut ByteWriter, t: &Tensor<T>) {
    w.f32s(t.data().iter().map(|&v| f32_of(v)));
}

fn read_tensor<T: Scalar>(r: &mut ByteReader<'_>, shape: &[usize]) -> Result<Tensor<T>> {
    let n = shape.iter().product();
    let data = r.f32s(n)?.into_iter().map(|v| T::of(v as f64)).collect();
    Tensor::from_vec(shape, data)
}

fn f64_(r: &mut ByteReader<'_>) -> Result<f64> {
    Ok(r.f32()? as f64)
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let mut out = ByteWriter::new();
        out.bytes(MAGIC);
        out.u32(CHECKPOINT_VERSION);

        let mut w = ByteWriter::new();
        w.u64(m.backbone.seed);
        w.u32(m.backbone.patch as u32);
        w.u32(m.backbone.stride as u32);
        w.u32(m.backbone.channels as u32);
        w.f32(m.preprocess.crop_ratio as f32);
        w.f32s(m.preprocess.mean.iter().map(|&v| v as f32));
        tensor(&mut w, m.backbone.projection());
        out.section(w);

        let h = &m.head;
        let mut w = ByteWriter::new();
        w.u8(match m.pooling {
            Pooling::Gem => 0,
            Pooling::Gap => 1,
        });
        w.f32(f32_of(h.gem_p));
        w.u32(h.embed_dim() as u32);
        w.u32(h.channels() as u32);
        w.u32(h.classes() as u32);
        tensor(&mut w, &h.w_emb);
        tensor(&mut w, &h.b_emb);
        tensor(&mut w, &h.w_cls);
        w.f32(self.arcmargin.scale as f32);
        w.f32(self.arcmargin.margin as f32);
        w.f32(self.arcmargin.cos_eps as f32);
        out.section(w);

        let s = &self.sgd_state;
        let mut w = ByteWriter::new();
        w.f32(self.sgd.momentum as f32);
        w.f32(self.sgd.weight_decay as f32);
        w.f32(f32_of(s.gem_p));
        tensor(&mut w, &s.w_emb);
        tensor(&mut w, &s.b_emb);
        tensor(&mut w, &s.w_cls);
        out.section(w);

        let sc = &self.schedule;
        let mut w = ByteWriter::new();
        w.u8(match sc.kind {
            SchedulerKind::Cosine => 0,
            SchedulerKind::PlateauSteps => 1,
        });
        w.f32(sc.lr0 as f32);
        w.f32(sc.lr as f32);
        w.u32(sc.epoch as u32);
        w.u32(sc.total_epochs as u32);
        w.f32(sc.best_loss as f32);
        w.u32(sc.epochs_since_improve as u32);
        w.u32(sc.plateau.patience as u32);
        w.f32(sc.plateau.threshold as f32);
        w.f32(sc.plateau.decay_factor as f32);
        w.u32(sc.margins.len() as u32);
        w.f32s(sc.margins.iter().map(|&v| v as f32));
        w.u32(sc.margin_index as u32);
        w.u8(sc.bump_resolution_on_first_decay as u8);
        w.u32(sc.decays as u32);
        out.section(w);

        let mut w = ByteWriter::new();
        w.u32(self.stages_completed as u32);
        w.u32(self.log.len() as u32);
        for e in &self.log {
            w.u32(e.stage as u32);
            w.u32(e.epoch as u32);
            w.f32(e.loss as f32);
            w.f32(e.lr as f32);
            w.f32(e.margin as f32);
            w.u32(e.resolution as u32);
        }
        out.section(w);
        out.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "checkpoint");
        r.expect(MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("checkpoint version {version} unsupported")));
        }

        let mut b = r.section()?;
        let seed = b.u64()?;
        let (patch, stride, channels) = (b.usize()?, b.usize()?, b.usize()?);
        let crop_ratio = f64_(&mut b)?;
        let mean = [f64_(&mut b)?, f64_(&mut b)?, f64_(&mut b)?];
        let projection = read_tensor(&mut b, &[channels, 3 * patch * patch])?;
        b.finish()?;
        let backbone = BackboneParams::from_parts(seed, patch, stride, projection)?;

        let mut h = r.section()?;
        let pooling = match h.u8()? {
            0 => Pooling::Gem,
            1 => Pooling::Gap,
            v => return Err(Error::Format(format!("unknown pooling tag {v}"))),
        };
        let gem_p = T::of(f64_(&mut h)?);
        let (d, c, k) = (h.usize()?, h.usize()?, h.usize()?);
        if c != channels {
            return Err(Error::Format(format!("head expects {c} channels, backbone has {channels}")));
        }
        let w_emb = read_tensor(&mut h, &[d, c])?;
        let b_emb = read_tensor(&mut h, &[d])?;
        let w_cls = read_tensor(&mut h, &[k, d])?;
        let arcmargin = ArcMarginConfig {
            scale: f64_(&mut h)?,
            margin: f64_(&mut h)?,
            cos_eps: f64_(&mut h)?,
        };
        h.finish()?;
        let head = HeadParams::from_parts(gem_p, w_emb, b_emb, w_cls)?;

        let mut o = r.section()?;
        let momentum = f64_(&mut o)?;
        let weight_decay = f64_(&mut o)?;
        let sgd_state = SgdState {
            gem_p: T::of(f64_(&mut o)?),
            w_emb: read_tensor(&mut o, &[d, c])?,
            b_emb: read_tensor(&mut o, &[d])?,
            w_cls: read_tensor(&mut o, &[k, d])?,
        };
        o.finish()?;

        let mut s = r.section()?;
        let kind = match s.u8()? {
            0 => SchedulerKind::Cosine,
            1 => SchedulerKind::PlateauSteps,
            v => return Err(Error::Format(format!("unknown scheduler tag {v}"))),
        };
        let lr0 = f64_(&mut s)?;
        let lr = f64_(&mut s)?;
        let (epoch, total_epochs) = (s.usize()?, s.usize()?);
        let best_loss = f64_(&mut s)?;
        let epochs_since_improve = s.usize()?;
        let plateau = PlateauConfig {
            patience: s.usize()?,
            threshold: f64_(&mut s)?,
            decay_factor: f64_(&mut s)?,
        };
        let n = s.usize()?;
        let margins: Vec<f64> = s.f32s(n)?.into_iter().map(f64::from).collect();
        let margin_index = s.usize()?;
        let bump = s.u8()? != 0;
        let decays = s.usize()?;
        s.finish()?;
        if margin_index >= margins.len() {
            return Err(Error::Format(format!("margin index {margin_index} outside {n} rungs")));
        }
        let schedule = ScheduleState {
            kind,
            lr0,
            lr,
            epoch,
            total_epochs,
            best_loss,
            epochs_since_improve,
            plateau,
            margins,
            margin_index,
            bump_resolution_on_first_decay: bump,
            decays,
        };

        let mut l = r.section()?;
        let stages_completed = l.usize()?;
        let n = l.usize()?;
        let mut log = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            log.push(EpochLog {
                stage: l.usize()?,
                epoch: l.usize()?,
                loss: f64_(&mut l)?,
                lr: f64_(&mut l)?,
                margin: f64_(&mut l)?,
                resolution: l.usize()?,
            });
        }
        l.finish()?;
        r.finish()?;

        Ok(Self {
            model: Model {
                backbone,
                head,
                preprocess: PreprocessConfig { crop_ratio, mean },
                pooling,
            },
            arcmargin,
            sgd: SgdConfig {
                lr0: schedule.lr0,
                momentum,
                weight_decay,
            },
            sgd_state,
            schedule,
            stages_completed,
            log,
        })
    }

    /// Same checkpoint after one save/load cycle, i.e. with every float rounded to `f32`.
    pub fn canonical(&self) -> Result<Self> {
        Self::from_bytes(&self.to_bytes())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}
