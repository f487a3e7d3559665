use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Double-gamma haemodynamic response parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HrfParams {
    pub a1: f64,
    pub a2: f64,
    pub b1: f64,
    pub b2: f64,
    pub c: f64,
}

impl Default for HrfParams {
    fn default() -> Self {
        Self {
            a1: 6.0,
            a2: 12.0,
            b1: 0.9,
            b2: 0.9,
            c: 0.35,
        }
    }
}

impl HrfParams {
    /// `h(t) = (t/d₁)^{a₁} e^{−(t−d₁)/b₁} − c (t/d₂)^{a₂} e^{−(t−d₂)/b₂}`, `dᵢ = aᵢbᵢ`.
    pub fn eval(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "HRF time must be nonnegative, got {t}"
            )));
        }
        let d1 = self.a1 * self.b1;
        let d2 = self.a2 * self.b2;
        let g1 = (t / d1).powf(self.a1) * (-(t - d1) / self.b1).exp();
        let g2 = (t / d2).powf(self.a2) * (-(t - d2) / self.b2).exp();
        Ok(g1 - self.c * g2)
    }

    /// Kernel sampled at `0, tr, 2tr, …`.
    pub fn sampled(&self, len: usize, tr: f64) -> Vec<f64> {
        (0..len)
            .map(|i| self.eval(i as f64 * tr).expect("nonnegative sample time"))
            .collect()
    }
}

pub fn hrf_double_gamma(t: f64) -> Result<f64> {
    HrfParams::default().eval(t)
}

/// Causal rectangle-rule convolution of a stimulus series with the default HRF.
pub fn convolve_design(stimulus: &[f64], tr: f64) -> Vec<f64> {
    convolve_with(stimulus, tr, &HrfParams::default())
}

pub fn convolve_with(stimulus: &[f64], tr: f64, params: &HrfParams) -> Vec<f64> {
    let t = stimulus.len();
    let h = params.sampled(t, tr);
    (0..t)
        .map(|i| (0..=i).map(|j| stimulus[j] * h[i - j]).sum::<f64>() * tr)
        .collect()
}

/// One stimulus event in seconds from scan start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub onset: f64,
    pub duration: f64,
    #[serde(default = "one")]
    pub amplitude: f64,
}

fn one() -> f64 {
    1.0
}

/// Timing of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stimulus {
    pub name: String,
    pub events: Vec<Event>,
}

impl Stimulus {
    pub fn block(name: impl Into<String>, onsets: &[f64], duration: f64) -> Self {
        Self {
            name: name.into(),
            events: onsets
                .iter()
                .map(|&onset| Event {
                    onset,
                    duration,
                    amplitude: 1.0,
                })
                .collect(),
        }
    }

    /// On/off (or amplitude) series on the scan grid. A zero-duration event
    /// is an impulse at the nearest scan.
    pub fn series(&self, t: usize, tr: f64) -> Vec<f64> {
        let mut s = vec![0.0; t];
        for e in &self.events {
            if e.duration <= 0.0 {
                let i = (e.onset / tr).round();
                if i >= 0.0 && (i as usize) < t {
                    s[i as usize] += e.amplitude;
                }
                continue;
            }
            for (i, v) in s.iter_mut().enumerate() {
                let time = i as f64 * tr;
                if time >= e.onset && time < e.onset + e.duration {
                    *v += e.amplitude;
                }
            }
        }
        s
    }
}
