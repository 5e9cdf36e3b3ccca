use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Layout};
use crate::autodiff::Tensor;
use crate::{Error, Result};

pub const CHANNELS: [&str; 6] = [
    "heart_rate",
    "systolic_bp",
    "diastolic_bp",
    "spo2",
    "resp_rate",
    "temperature",
];
pub const SBP_CHANNEL: &str = "systolic_bp";

const HR: usize = 0;
const SBP: usize = 1;
const DBP: usize = 2;

/// Generating distribution of one channel's linear trend, in channel units
/// per hour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub intercept_mean: f64,
    pub intercept_std: f64,
    pub slope_mean: f64,
    pub slope_std: f64,
    /// Marginal standard deviation of the AR(1) noise.
    pub noise_std: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitalsConfig {
    pub n: usize,
    /// Observation window in hours.
    pub steps: usize,
    pub ar_phi: f64,
    /// `y = 1` iff systolic slope < `slope_threshold` and intercept <
    /// `level_threshold`, before label noise.
    pub slope_threshold: f64,
    pub level_threshold: f64,
    pub label_noise: f64,
    /// Heart-rate slope per unit systolic slope in positive cases.
    pub hr_coupling: f64,
    pub hr_coupling_noise: f64,
    /// Minimum systolic minus diastolic pressure.
    pub pulse_pressure_min: f64,
    pub dbp_ratio: f64,
    pub channels: Vec<ChannelSpec>,
}

impl Default for VitalsConfig {
    fn default() -> Self {
        let c = |im, is, sm, ss, ns, min, max| ChannelSpec {
            intercept_mean: im,
            intercept_std: is,
            slope_mean: sm,
            slope_std: ss,
            noise_std: ns,
            min,
            max,
        };
        Self {
            n: 3000,
            steps: 48,
            ar_phi: 0.6,
            slope_threshold: -0.15,
            level_threshold: 125.0,
            label_noise: 0.05,
            hr_coupling: -0.8,
            hr_coupling_noise: 0.05,
            pulse_pressure_min: 10.0,
            dbp_ratio: 0.62,
            channels: vec![
                c(85.0, 10.0, 0.0, 0.15, 3.0, 30.0, 200.0),
                c(120.0, 12.0, -0.1, 0.3, 4.0, 70.0, 220.0),
                c(0.0, 4.0, 0.0, 0.05, 3.0, 30.0, 140.0),
                c(96.0, 1.5, 0.0, 0.02, 0.8, 70.0, 100.0),
                c(16.0, 3.0, 0.0, 0.05, 1.5, 6.0, 40.0),
                c(37.0, 0.4, 0.0, 0.01, 0.2, 34.0, 42.0),
            ],
        }
    }
}

/// Slope-intercept rows (`2·N` columns) or raw `N × T` series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    SlopeIntercept,
    Temporal,
}

/// One simulated stay.
#[derive(Debug, Clone, PartialEq)]
pub struct VitalsSample {
    pub slopes: [f64; 6],
    pub intercepts: [f64; 6],
    /// Observed series, channel-major `6 × steps`.
    pub series: Vec<f64>,
    /// Label implied by the systolic trend before noise.
    pub rule_label: u8,
    pub label: u8,
}

impl VitalsConfig {
    fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Data(format!("vitals needs n >= 2, got {}", self.n)));
        }
        if self.steps < 3 || self.channels.len() != CHANNELS.len() {
            return Err(Error::Config(
                "vitals needs >= 3 steps and exactly 6 channel specs".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.ar_phi.abs()) || !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::Config(
                "ar_phi must be in (-1, 1), label_noise in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn rule(&self, sbp_slope: f64, sbp_intercept: f64) -> u8 {
        u8::from(sbp_slope < self.slope_threshold && sbp_intercept < self.level_threshold)
    }
}

fn line_in_range(intercept: f64, slope: f64, steps: usize, spec: &ChannelSpec) -> bool {
    let end = intercept + slope * (steps - 1) as f64;
    intercept.min(end) >= spec.min && intercept.max(end) <= spec.max
}

fn draw_trends(config: &VitalsConfig, rng: &mut ChaCha8Rng) -> ([f64; 6], [f64; 6], u8) {
    let normal =
        |rng: &mut ChaCha8Rng, m: f64, s: f64| m + s * rng.sample::<f64, _>(StandardNormal);
    let last = (config.steps - 1) as f64;
    loop {
        let mut a = [0.0; 6];
        let mut b = [0.0; 6];
        for (c, spec) in config.channels.iter().enumerate() {
            a[c] = normal(rng, spec.intercept_mean, spec.intercept_std);
            b[c] = normal(rng, spec.slope_mean, spec.slope_std);
        }
        let rule = config.rule(b[SBP], a[SBP]);
        if rule == 1 {
            b[HR] = config.hr_coupling * b[SBP] + normal(rng, 0.0, config.hr_coupling_noise);
        }
        let dbp = &config.channels[DBP];
        a[DBP] = config.dbp_ratio * a[SBP] + normal(rng, dbp.intercept_mean, dbp.intercept_std);
        b[DBP] = 0.5 * b[SBP] + normal(rng, dbp.slope_mean, dbp.slope_std);
        let in_range = (0..6).all(|c| line_in_range(a[c], b[c], config.steps, &config.channels[c]));
        let gap_ok = [0.0, last]
            .iter()
            .all(|&t| a[SBP] + b[SBP] * t - (a[DBP] + b[DBP] * t) >= config.pulse_pressure_min);
        if in_range && gap_ok {
            return (a, b, rule);
        }
    }
}

/// Simulates `config.n` stays. Every channel is `intercept + slope·t` plus
/// stationary AR(1) noise, clamped to the channel range; diastolic pressure
/// is then capped at systolic minus `pulse_pressure_min` hour by hour.
pub fn simulate_vitals(config: &VitalsConfig, seed: u64) -> Result<Vec<VitalsSample>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_len = config.steps;
    let innovation = (1.0 - config.ar_phi * config.ar_phi).sqrt();
    let mut out = Vec::with_capacity(config.n);
    for _ in 0..config.n {
        let (intercepts, slopes, rule_label) = draw_trends(config, &mut rng);
        let mut series = vec![0.0; 6 * t_len];
        for (c, spec) in config.channels.iter().enumerate() {
            let noise = Normal::new(0.0, spec.noise_std * innovation).expect("finite std");
            let mut e = spec.noise_std * rng.sample::<f64, _>(StandardNormal);
            for t in 0..t_len {
                if t > 0 {
                    e = config.ar_phi * e + noise.sample(&mut rng);
                }
                let v = intercepts[c] + slopes[c] * t as f64 + e;
                series[c * t_len + t] = v.clamp(spec.min, spec.max);
            }
        }
        for t in 0..t_len {
            let cap = series[SBP * t_len + t] - config.pulse_pressure_min;
            let d = &mut series[DBP * t_len + t];
            *d = d.min(cap);
        }
        let label = if rng.random::<f64>() < config.label_noise {
            1 - rule_label
        } else {
            rule_label
        };
        out.push(VitalsSample {
            slopes,
            intercepts,
            series,
            rule_label,
            label,
        });
    }
    Ok(out)
}

/// Least-squares line through `(t, y_t)`, `t = 0, 1, ..`; returns
/// `(slope, intercept)` with the intercept at `t = 0`.
pub fn ols_fit(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let t_mean = (n - 1.0) / 2.0;
    let y_mean = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (t, v) in y.iter().enumerate() {
        let dt = t as f64 - t_mean;
        sxy += dt * (v - y_mean);
        sxx += dt * dt;
    }
    let slope = sxy / sxx;
    (slope, y_mean - slope * t_mean)
}

pub fn gen_vitals(config: &VitalsConfig, repr: Representation, seed: u64) -> Result<Dataset> {
    let samples = simulate_vitals(config, seed)?;
    let t_len = config.steps;
    let labels = samples.iter().map(|s| s.label).collect();
    match repr {
        Representation::SlopeIntercept => {
            let mut data = Vec::with_capacity(samples.len() * 12);
            for s in &samples {
                for c in 0..6 {
                    let (slope, intercept) = ols_fit(&s.series[c * t_len..(c + 1) * t_len]);
                    data.push(slope);
                    data.push(intercept);
                }
            }
            let names = CHANNELS
                .iter()
                .flat_map(|c| [format!("{c}_slope"), format!("{c}_intercept")])
                .collect();
            Dataset::new(
                Tensor::new(vec![samples.len(), 12], data)?,
                labels,
                names,
                Layout::Tabular,
            )
        }
        Representation::Temporal => {
            let data = samples
                .iter()
                .flat_map(|s| s.series.iter().copied())
                .collect();
            let names = CHANNELS
                .iter()
                .flat_map(|c| (0..t_len).map(move |t| format!("{c}@{t}")))
                .collect();
            Dataset::new(
                Tensor::new(vec![samples.len(), 6 * t_len], data)?,
                labels,
                names,
                Layout::TimeSeries {
                    channels: CHANNELS.iter().map(|c| c.to_string()).collect(),
                    steps: t_len,
                },
            )
        }
    }
}
