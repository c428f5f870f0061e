//! Procedural landmark classes.
//!
//! Each class is a smooth field on `[0,1]²`: per channel, a normalized sum of eight
//! oriented sinusoids. An instance views that field through a random similarity
//! transform and adds Gaussian pixel noise. Coordinates are continuous, so the same
//! instance can be rendered at any side length.

use std::f64::consts::{PI, TAU};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, SeededRng, Tensor};

pub const TERMS_PER_CHANNEL: usize = 8;
pub const MIN_RENDER_SIDE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SineTerm {
    pub amplitude: f64,
    /// Cycles across the unit square.
    pub frequency: f64,
    pub orientation: f64,
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtoSpec {
    pub class_id: usize,
    pub channels: [[SineTerm; TERMS_PER_CHANNEL]; 3],
}

impl ProtoSpec {
    pub fn new(dataset_seed: u64, class_id: usize) -> Self {
        let mut rng = SeededRng::new(dataset_seed, &format!("proto/{class_id}"));
        let mut term = || SineTerm {
            amplitude: rng.uniform(),
            frequency: rng.uniform_in(1.0, 8.0),
            orientation: rng.uniform_in(0.0, PI),
            phase: rng.uniform_in(0.0, TAU),
        };
        let mut channel = || std::array::from_fn(|_| term());
        let channels = [channel(), channel(), channel()];
        Self { class_id, channels }
    }

    /// Field value at `(u, v)`, clamped to `[0, 1]`.
    pub fn eval(&self, u: f64, v: f64) -> [f64; 3] {
        std::array::from_fn(|c| {
            let terms = &self.channels[c];
            let total: f64 = terms.iter().map(|t| t.amplitude).sum();
            let s: f64 = terms
                .iter()
                .map(|t| {
                    let proj = u * t.orientation.cos() + v * t.orientation.sin();
                    t.amplitude * (TAU * t.frequency * proj + t.phase).sin()
                })
                .sum();
            (0.5 + 0.5 * s / total.max(1e-12)).clamp(0.0, 1.0)
        })
    }
}

/// Similarity transform applied about the image center, in unit-square coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Similarity {
    pub const IDENTITY: Self = Self {
        scale: 1.0,
        rotation: 0.0,
        tx: 0.0,
        ty: 0.0,
    };

    /// Scale in `[0.8, 1.25]`, rotation within ±15°, translation within ±10%.
    pub fn sample(rng: &mut SeededRng) -> Self {
        let max_rot = 15f64.to_radians();
        Self {
            scale: rng.uniform_in(0.8, 1.25),
            rotation: rng.uniform_in(-max_rot, max_rot),
            tx: rng.uniform_in(-0.1, 0.1),
            ty: rng.uniform_in(-0.1, 0.1),
        }
    }

    /// Maps a view coordinate to the scene coordinate it samples.
    pub fn apply(&self, u: f64, v: f64) -> (f64, f64) {
        let (s, c) = self.rotation.sin_cos();
        let (du, dv) = (u - 0.5, v - 0.5);
        (
            0.5 + self.tx + self.scale * (c * du - s * dv),
            0.5 + self.ty + self.scale * (s * du + c * dv),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    pub noise_sigma: f64,
    pub transform: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            noise_sigma: 0.05,
            transform: true,
        }
    }
}

pub fn instance_transform(instance_seed: u64) -> Similarity {
    Similarity::sample(&mut SeededRng::new(instance_seed, "transform"))
}

/// Renders one instance of `proto` as a `3×R×R` tensor in `[0, 1]`.
///
/// The transform depends only on `instance_seed`, so renders at different sides show
/// the same scene. Pixel centers sit at `(j + 0.5) / R`.
pub fn render_instance<T: Scalar>(
    proto: &ProtoSpec,
    instance_seed: u64,
    side: usize,
    opts: RenderOptions,
) -> Result<Tensor<T>> {
    if side < MIN_RENDER_SIDE {
        return Err(Error::Resolution {
            got: side,
            min: MIN_RENDER_SIDE,
        });
    }
    let xf = if opts.transform {
        instance_transform(instance_seed)
    } else {
        Similarity::IDENTITY
    };
    let (rs, rc) = xf.rotation.sin_cos();
    let r = side as f64;
    let offs: Vec<f64> = (0..side).map(|k| (k as f64 + 0.5) / r - 0.5).collect();

    let mut noise = SeededRng::new(instance_seed, &format!("noise/{side}"));
    let plane = side * side;
    let mut out = vec![T::zero(); 3 * plane];
    let mut acc = vec![0.0f64; plane];
    let (mut sj, mut cj) = (vec![0.0; side], vec![0.0; side]);
    let (mut si, mut ci) = (vec![0.0; side], vec![0.0; side]);

    for (ch, terms) in proto.channels.iter().enumerate() {
        acc.iter_mut().for_each(|a| *a = 0.0);
        let total: f64 = terms.iter().map(|t| t.amplitude).sum::<f64>().max(1e-12);
        for t in terms {
            // The phase is affine in (row, col), so sin splits into per-axis tables.
            let (sa, ca) = t.orientation.sin_cos();
            let w = TAU * t.frequency;
            let along_col = w * xf.scale * (ca * rc + sa * rs);
            let along_row = w * xf.scale * (sa * rc - ca * rs);
            let base = w * (ca * (0.5 + xf.tx) + sa * (0.5 + xf.ty)) + t.phase;
            for k in 0..side {
                (sj[k], cj[k]) = (base + along_col * offs[k]).sin_cos();
                (si[k], ci[k]) = (along_row * offs[k]).sin_cos();
            }
            let a = t.amplitude;
            for i in 0..side {
                let row = &mut acc[i * side..(i + 1) * side];
                let (s_i, c_i) = (a * si[i], a * ci[i]);
                for j in 0..side {
                    row[j] += sj[j] * c_i + cj[j] * s_i;
                }
            }
        }
        let dst = &mut out[ch * plane..(ch + 1) * plane];
        for (d, a) in dst.iter_mut().zip(&acc) {
            let mut v = (0.5 + 0.5 * a / total).clamp(0.0, 1.0);
            if opts.noise_sigma > 0.0 {
                v = (v + opts.noise_sigma * noise.normal()).clamp(0.0, 1.0);
            }
            *d = T::of(v);
        }
    }
    Tensor::from_vec(&[3, side, side], out)
}
