use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, Layout};
use crate::autodiff::Tensor;
use crate::{Error, Result};

/// Column order of one beat's parameters; dataset rows are parameter-major
/// (`a1` for every beat, then `a2`, ...).
pub const BEAT_PARAMS: [&str; 7] = ["a1", "a2", "theta1", "theta2", "b1", "b2", "d"];

/// One beat: two Gaussian bumps over `[0, d)` seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpgBeat {
    pub a1: f64,
    pub a2: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub b1: f64,
    pub b2: f64,
    pub d: f64,
}

impl PpgBeat {
    /// Waveform value at `t` seconds after beat onset.
    pub fn value_at(&self, t: f64) -> f64 {
        let g = |a: f64, th: f64, b: f64| a * (-(t - th).powi(2) / (2.0 * b * b)).exp();
        g(self.a1, self.theta1, self.b1) + g(self.a2, self.theta2, self.b2)
    }

    /// `b1, b2 > 0`, `0 <= theta1 < theta2 <= d`, `d > 0`, all finite.
    pub fn is_valid(&self) -> bool {
        let p = self.params();
        p.iter().all(|v| v.is_finite())
            && self.b1 > 0.0
            && self.b2 > 0.0
            && self.d > 0.0
            && 0.0 <= self.theta1
            && self.theta1 < self.theta2
            && self.theta2 <= self.d
    }

    pub fn params(&self) -> [f64; 7] {
        [
            self.a1,
            self.a2,
            self.theta1,
            self.theta2,
            self.b1,
            self.b2,
            self.d,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rhythm {
    Regular,
    /// One premature beat, then the original timing resumes.
    Reset,
}

/// Shape and timing defaults. Centers and widths are fractions of the beat
/// duration, so they scale with `d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpgConfig {
    /// Samples in a generated dataset; half-and-half rhythms in expectation.
    pub n: usize,
    pub n_beats: usize,
    pub sample_rate: f64,
    pub mean_duration: (f64, f64),
    /// Beat-to-beat spread of `d` as a fraction of the mean; draws are
    /// truncated at 1.5 spreads.
    pub jitter_cv: f64,
    pub premature_shortening: (f64, f64),
    pub a1: (f64, f64),
    pub a2: (f64, f64),
    pub theta1_frac: (f64, f64),
    pub theta2_frac: (f64, f64),
    pub b1_frac: (f64, f64),
    pub b2_frac: (f64, f64),
}

impl Default for PpgConfig {
    fn default() -> Self {
        Self {
            n: 3000,
            n_beats: 8,
            sample_rate: 100.0,
            mean_duration: (0.7, 1.0),
            jitter_cv: 0.02,
            premature_shortening: (0.3, 0.5),
            a1: (0.8, 1.2),
            a2: (0.3, 0.6),
            theta1_frac: (0.15, 0.25),
            theta2_frac: (0.45, 0.6),
            b1_frac: (0.06, 0.1),
            b2_frac: (0.08, 0.14),
        }
    }
}

/// Beat parameters and the rendered waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct PpgRecord {
    pub beats: Vec<PpgBeat>,
    pub waveform: Vec<f64>,
    pub sample_rate: f64,
    /// Index of the premature beat for the reset rhythm.
    pub premature: Option<usize>,
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn render(beats: &[PpgBeat], sample_rate: f64) -> Vec<f64> {
    let total: f64 = beats.iter().map(|b| b.d).sum();
    let n = (total * sample_rate).floor() as usize;
    let mut out = Vec::with_capacity(n);
    let mut k = 0;
    let mut start = 0.0;
    for i in 0..n {
        let t = i as f64 / sample_rate;
        while k + 1 < beats.len() && t >= start + beats[k].d {
            start += beats[k].d;
            k += 1;
        }
        out.push(beats[k].value_at(t - start));
    }
    out
}

pub fn gen_ppg(config: &PpgConfig, n_beats: usize, rhythm: Rhythm, seed: u64) -> Result<PpgRecord> {
    if n_beats < 3 {
        return Err(Error::Data(format!(
            "ppg needs n_beats >= 3, got {n_beats}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean = uniform(&mut rng, config.mean_duration);
    let premature = match rhythm {
        Rhythm::Regular => None,
        Rhythm::Reset => Some(rng.random_range(1..n_beats - 1)),
    };
    let beats = (0..n_beats)
        .map(|k| {
            let d = if premature == Some(k) {
                mean * (1.0 - uniform(&mut rng, config.premature_shortening))
            } else {
                let z = loop {
                    let z: f64 = rng.sample(StandardNormal);
                    if z.abs() <= 1.5 {
                        break z;
                    }
                };
                mean * (1.0 + config.jitter_cv * z)
            };
            PpgBeat {
                a1: uniform(&mut rng, config.a1),
                a2: uniform(&mut rng, config.a2),
                theta1: d * uniform(&mut rng, config.theta1_frac),
                theta2: d * uniform(&mut rng, config.theta2_frac),
                b1: d * uniform(&mut rng, config.b1_frac),
                b2: d * uniform(&mut rng, config.b2_frac),
                d,
            }
        })
        .collect::<Vec<_>>();
    Ok(PpgRecord {
        waveform: render(&beats, config.sample_rate),
        beats,
        sample_rate: config.sample_rate,
        premature,
    })
}

pub fn beat_feature_names(n_beats: usize) -> Vec<String> {
    BEAT_PARAMS
        .iter()
        .flat_map(|p| (0..n_beats).map(move |k| format!("{p}_{k}")))
        .collect()
}

/// Inverse of the parameter-major row layout.
pub fn beats_from_row(row: &[f64], n_beats: usize) -> Vec<PpgBeat> {
    assert_eq!(row.len(), BEAT_PARAMS.len() * n_beats, "row width");
    let p = |i: usize, k: usize| row[i * n_beats + k];
    (0..n_beats)
        .map(|k| PpgBeat {
            a1: p(0, k),
            a2: p(1, k),
            theta1: p(2, k),
            theta2: p(3, k),
            b1: p(4, k),
            b2: p(5, k),
            d: p(6, k),
        })
        .collect()
}

/// Label 1 for the reset rhythm, 0 for regular.
pub fn gen_ppg_dataset(config: &PpgConfig, seed: u64) -> Result<Dataset> {
    if config.n < 2 {
        return Err(Error::Data(format!("ppg needs n >= 2, got {}", config.n)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = BEAT_PARAMS.len() * config.n_beats;
    let mut data = vec![0.0; config.n * width];
    let mut labels = Vec::with_capacity(config.n);
    for i in 0..config.n {
        let label = u8::from(rng.random_bool(0.5));
        let rhythm = if label == 1 {
            Rhythm::Reset
        } else {
            Rhythm::Regular
        };
        let rec = gen_ppg(config, config.n_beats, rhythm, rng.random())?;
        let row = &mut data[i * width..(i + 1) * width];
        for (k, beat) in rec.beats.iter().enumerate() {
            for (p, v) in beat.params().into_iter().enumerate() {
                row[p * config.n_beats + k] = v;
            }
        }
        labels.push(label);
    }
    Dataset::new(
        Tensor::new(vec![config.n, width], data)?,
        labels,
        beat_feature_names(config.n_beats),
        Layout::Beats {
            n_beats: config.n_beats,
        },
    )
}
