//! Seeded synthetic scenes with a known fire-generating rule.
//!
//! Each channel is driven by a standardized latent field: smoothed white noise,
//! fixed for elevation and an AR(1) chain over days for the weather channels.
//! Channels are stored as the standardized fields themselves, and fires are
//! Bernoulli draws with probability `σ(Σ w_c · channel_c + bias)`.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::sigmoid;
use crate::raster::{
    Channel, Day, GeoTransform, Grid, RasterStack, CHANNEL_NAMES, FIRE, NO_FIRE, NUM_CHANNELS, UNCERTAIN,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub days: usize,
    /// First date, `YYYY-MM-DD`.
    pub start_date: String,
    pub smoothing_radius: usize,
    /// Day-to-day correlation of the weather latents.
    pub persistence: f64,
    /// One weight per channel, in canonical channel order.
    pub fire_logit_weights: Vec<f64>,
    pub fire_bias: f64,
    pub uncertain_fraction: f64,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 192,
            width: 192,
            days: 90,
            start_date: "2020-06-01".into(),
            smoothing_radius: 4,
            persistence: 0.7,
            // Hot, dry, high-ERC pixels burn; wet, humid, green ones do not.
            fire_logit_weights: vec![0.0, 1.8, -0.6, -1.2, -1.2, 0.0, 0.8, 0.6, 2.2, 1.5],
            fire_bias: -14.0,
            uncertain_fraction: 0.02,
            rng_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.height == 0 || self.width == 0 || self.days == 0 {
            return bad("synthetic grid and day count must be positive".into());
        }
        if self.fire_logit_weights.len() != NUM_CHANNELS {
            return bad(format!(
                "fire_logit_weights needs {NUM_CHANNELS} entries, got {}",
                self.fire_logit_weights.len()
            ));
        }
        if !(0.0..1.0).contains(&self.uncertain_fraction) {
            return bad(format!("uncertain_fraction {} outside [0, 1)", self.uncertain_fraction));
        }
        if !(-1.0..=1.0).contains(&self.persistence) {
            return bad(format!("persistence {} outside [-1, 1]", self.persistence));
        }
        if Day::parse(&self.start_date).is_none() {
            return bad(format!("start_date {:?} is not YYYY-MM-DD", self.start_date));
        }
        Ok(())
    }
}

/// Unit-variance white noise smoothed by a normalized (2r+1)² box and
/// re-standardized to mean 0, variance 1. Near the border the box averages
/// only the in-grid pixels.
pub fn gen_field(shape: (usize, usize), smoothing_radius: usize, rng: &mut impl Rng) -> Grid<f64> {
    let (h, w) = shape;
    let noise: Vec<f64> = (0..h * w).map(|_| rng.sample(StandardNormal)).collect();
    let r = smoothing_radius;

    let mut rows = vec![0.0; h * w];
    for i in 0..h {
        let line = &noise[i * w..(i + 1) * w];
        let prefix: Vec<f64> = std::iter::once(0.0)
            .chain(line.iter().scan(0.0, |acc, v| {
                *acc += v;
                Some(*acc)
            }))
            .collect();
        for j in 0..w {
            let (lo, hi) = (j.saturating_sub(r), (j + r + 1).min(w));
            rows[i * w + j] = (prefix[hi] - prefix[lo]) / (hi - lo) as f64;
        }
    }
    let mut out = vec![0.0; h * w];
    for j in 0..w {
        let mut prefix = vec![0.0; h + 1];
        for i in 0..h {
            prefix[i + 1] = prefix[i] + rows[i * w + j];
        }
        for i in 0..h {
            let (lo, hi) = (i.saturating_sub(r), (i + r + 1).min(h));
            out[i * w + j] = (prefix[hi] - prefix[lo]) / (hi - lo) as f64;
        }
    }
    standardize(&mut out);
    Grid::new(h, w, out).expect("sized by construction")
}

fn standardize(v: &mut [f64]) {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let scale = if std > 0.0 { 1.0 / std } else { 0.0 };
    v.iter_mut().for_each(|x| *x = (*x - mean) * scale);
}

/// Generated scenes plus, per day, the latent logit the fire mask was drawn
/// from.
#[derive(Clone, Debug)]
pub struct SynthRun {
    pub stacks: Vec<RasterStack>,
    pub logits: Vec<Grid<f64>>,
}

/// One stack per day. Draw order per day: weather innovations in channel
/// order (elevation only on day 0), fire Bernoulli draws in row-major order,
/// then the uncertain-pixel subset.
pub fn gen_scenes(cfg: &SynthConfig) -> Result<SynthRun> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let shape = (cfg.height, cfg.width);
    let pixels = cfg.height * cfg.width;
    let start = Day::parse(&cfg.start_date).expect("validated");
    let rho = cfg.persistence;
    let innovation = (1.0 - rho * rho).sqrt();
    let n_uncertain = (cfg.uncertain_fraction * pixels as f64).round() as usize;

    let mut latents: Vec<Grid<f64>> = Vec::with_capacity(NUM_CHANNELS);
    let mut stacks = Vec::with_capacity(cfg.days);
    let mut logits = Vec::with_capacity(cfg.days);
    for day in 0..cfg.days {
        if day == 0 {
            for _ in 0..NUM_CHANNELS {
                latents.push(gen_field(shape, cfg.smoothing_radius, &mut rng));
            }
        } else {
            for latent in latents.iter_mut().skip(1) {
                let fresh = gen_field(shape, cfg.smoothing_radius, &mut rng);
                for (z, e) in latent.data_mut().iter_mut().zip(fresh.data()) {
                    *z = rho * *z + innovation * e;
                }
            }
        }

        let logit: Vec<f64> = (0..pixels)
            .map(|p| {
                cfg.fire_bias
                    + latents
                        .iter()
                        .zip(&cfg.fire_logit_weights)
                        .map(|(z, w)| w * f64::from(z.data()[p] as f32))
                        .sum::<f64>()
            })
            .collect();
        let mut mask: Vec<i8> = logit
            .iter()
            .map(|&l| {
                if rng.random::<f64>() < sigmoid(l) {
                    FIRE
                } else {
                    NO_FIRE
                }
            })
            .collect();
        for p in index::sample(&mut rng, pixels, n_uncertain) {
            mask[p] = UNCERTAIN;
        }

        let channels = latents
            .iter()
            .zip(CHANNEL_NAMES)
            .map(|(z, name)| Channel {
                name: name.to_string(),
                plane: Grid::new(cfg.height, cfg.width, z.data().iter().map(|&v| v as f32).collect())
                    .expect("sized by construction"),
            })
            .collect();
        stacks.push(RasterStack::new(
            start.offset(day as i64),
            channels,
            Grid::new(cfg.height, cfg.width, mask)?,
            GeoTransform::label_grid(),
        )?);
        logits.push(Grid::new(cfg.height, cfg.width, logit)?);
    }
    Ok(SynthRun { stacks, logits })
}
