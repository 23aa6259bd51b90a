use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::tensor::{sigmoid, Tensor};

pub const LATENT_DIM: usize = 8;

/// Binary n-d mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub shape: Vec<usize>,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(shape: &[usize]) -> Self {
        Mask {
            shape: shape.to_vec(),
            data: vec![false; shape.iter().product()],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }
}

/// Generator parameters. Defaults are the desk-scale in-distribution set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Volume extent as `[depth, height, width]`.
    pub volume_dims: [usize; 3],
    pub patch_size: usize,
    pub patches_per_subject: usize,
    /// Class-conditional latent means are `-label_mean` and `+label_mean`.
    pub label_mean: f64,
    pub latent_sd: f64,
    /// Extra latent noise seen only by the volume, so the radiological view
    /// is a blurred copy of what the patches express.
    #[serde(default)]
    pub radiology_sd: f64,
    pub noise_sd: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            volume_dims: [16, 32, 32],
            patch_size: 64,
            patches_per_subject: 8,
            label_mean: 0.5,
            latent_sd: 0.3,
            radiology_sd: 1.0,
            noise_sd: 0.05,
        }
    }
}

impl SynthConfig {
    /// Distribution-shifted variant: weaker class separation and more noise.
    pub fn shifted(&self) -> Self {
        SynthConfig {
            label_mean: self.label_mean * 0.7,
            latent_sd: self.latent_sd * 1.2,
            noise_sd: self.noise_sd * 1.6,
            ..self.clone()
        }
    }
}

/// One synthetic case: a volume with tumour mask and a set of pathology patches.
#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: u64,
    /// 0 = LUAD-like, 1 = LUSC-like.
    pub label: u8,
    /// `[depth, height, width]`, values in `[0, 1]`.
    pub volume: Tensor,
    pub mask: Mask,
    /// `patch_size x patch_size` arrays, values in `[0, 1]`.
    pub patches: Vec<Tensor>,
    pub latent: [f64; LATENT_DIM],
}

/// Draws one subject. Both modalities are driven by the same latent vector
/// `u ~ N(+-label_mean, latent_sd^2 I)`:
///
/// * volume: ellipsoid blob with semi-axes `4 + 2 sigmoid(u[0..3])`,
///   in-plane modulation at frequencies `0.5 + sigmoid(u[4])`, `0.5 + sigmoid(u[5])`,
///   additive Gaussian noise, clamped to `[0, 1]`; mask is `blob > 0.2`.
///   The volume reads `u + N(0, radiology_sd^2 I)` rather than `u` itself.
/// * patches: `0.5 + 0.25 sin(w3 x + phi) cos(w4 y)` with `w3, w4` from `u[6], u[7]`,
///   a 2x2-dot lattice whose occupancy is `sigmoid(u[5])` and whose spacing
///   shrinks with `u[6]`, plus independent noise; `phi` is random per patch.
///
/// The stream is derived from `(seed, id)` only, so generation order is irrelevant.
pub fn generate_subject(seed: u64, id: u64, label: u8, cfg: &SynthConfig) -> Subject {
    let mut r = rng::stream(seed, &[rng::label("subject"), id]);
    let mean = if label == 1 { cfg.label_mean } else { -cfg.label_mean };
    let latent_dist = Normal::new(mean, cfg.latent_sd).expect("finite latent sd");
    let mut latent = [0.0; LATENT_DIM];
    for u in latent.iter_mut() {
        *u = latent_dist.sample(&mut r);
    }
    let blur = Normal::new(0.0, cfg.radiology_sd).expect("finite radiology sd");
    let mut seen = latent;
    for u in seen.iter_mut() {
        *u += blur.sample(&mut r);
    }
    let noise = Normal::new(0.0, cfg.noise_sd).expect("finite noise sd");

    let [d, h, w] = cfg.volume_dims;
    let dims = [d as f64, h as f64, w as f64];
    // axis order z, y, x; semi-axis of x uses u[0]
    let semi = [
        4.0 + 2.0 * sigmoid(seen[2]),
        4.0 + 2.0 * sigmoid(seen[1]),
        4.0 + 2.0 * sigmoid(seen[0]),
    ];
    let mut center = [0.0; 3];
    for a in 0..3 {
        let jitter = (dims[a] / 8.0).min(2.0);
        center[a] = (dims[a] - 1.0) / 2.0 + r.random_range(-jitter..=jitter);
    }
    let w1 = 0.5 + sigmoid(seen[4]);
    let w2 = 0.5 + sigmoid(seen[5]);
    let mut volume = vec![0.0; d * h * w];
    let mut mask = vec![false; d * h * w];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                let q: f64 = (0..3).map(|a| ((p[a] - center[a]) / semi[a]).powi(2)).sum();
                let blob = (-q).exp() * (1.0 + 0.3 * (w1 * p[2]).sin() * (w2 * p[1]).sin());
                let i = (z * h + y) * w + x;
                mask[i] = blob > 0.2;
                volume[i] = (blob + noise.sample(&mut r)).clamp(0.0, 1.0);
            }
        }
    }

    let w3 = 0.5 + sigmoid(latent[6]);
    let w4 = 0.5 + sigmoid(latent[7]);
    let occupancy = sigmoid(latent[5]);
    let spacing = (7.0 - 4.0 * sigmoid(latent[6])).round().max(2.0) as usize;
    let ps = cfg.patch_size;
    let patches = (0..cfg.patches_per_subject)
        .map(|_| {
            let phase = r.random_range(0.0..std::f64::consts::TAU);
            let (oy, ox) = (r.random_range(0..spacing), r.random_range(0..spacing));
            let mut img: Vec<f64> = (0..ps * ps)
                .map(|i| {
                    let (y, x) = ((i / ps) as f64, (i % ps) as f64);
                    0.5 + 0.25 * (w3 * x + phase).sin() * (w4 * y).cos()
                })
                .collect();
            for ly in (oy..ps).step_by(spacing) {
                for lx in (ox..ps).step_by(spacing) {
                    if r.random::<f64>() < occupancy {
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            if ly + dy < ps && lx + dx < ps {
                                img[(ly + dy) * ps + lx + dx] += 0.4;
                            }
                        }
                    }
                }
            }
            for v in img.iter_mut() {
                *v = (*v + noise.sample(&mut r)).clamp(0.0, 1.0);
            }
            Tensor::new(vec![ps, ps], img).expect("patch shape")
        })
        .collect();

    Subject {
        id,
        label,
        volume: Tensor::new(vec![d, h, w], volume).expect("volume shape"),
        mask: Mask {
            shape: vec![d, h, w],
            data: mask,
        },
        patches,
        latent,
    }
}
