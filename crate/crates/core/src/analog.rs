//! Behavioral models of the analog feature extractors.
//!
//! Each extractor is simulated per window from its reset state with the
//! window's samples held constant over one sample period (zero-order hold):
//!
//! - Max: diode/capacitor peak detector, reset to `v_l`.
//! - Min: valley detector, reset to `v_h`.
//! - Mean: op-amp integrator centered on `v_ms`.
//! - Sum: non-inverting amplifier of gain `N` on the Mean output.
//!
//! Non-idealities are the diode drop `v_th`, capacitor droop `leak_rate`,
//! integrator time constant `rc_product` and the op-amp output swing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{FeatureId, FeatureKind, Window};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalogConfig {
    /// Voltage that a normalized sample of 0 maps to.
    pub v_sig_lo: f64,
    /// Voltage that a normalized sample of 1 maps to.
    pub v_sig_hi: f64,
    /// Forward drop of the diode-connected transistor.
    pub v_th: f64,
    /// Hold-capacitor droop magnitude in V/s.
    pub leak_rate: f64,
    /// Integrator `R*C` in seconds; `None` uses the window duration.
    pub rc_product: Option<f64>,
    /// Gain of the Sum amplifier, `1 + Rf/Ri`.
    pub gain_n: f64,
    /// Factor applied digitally after the Sum stage; `None` picks
    /// `samples_per_window / gain_n`.
    pub residual_scale: Option<f64>,
    pub swing_lo: f64,
    pub swing_hi: f64,
    /// Max reset level; `None` means `v_sig_lo`.
    pub v_l: Option<f64>,
    /// Min reset level; `None` means `v_sig_hi`.
    pub v_h: Option<f64>,
    /// Integrator reset level; `None` means the signal mid-scale.
    pub v_ms: Option<f64>,
}

impl Default for AnalogConfig {
    fn default() -> Self {
        AnalogConfig {
            v_sig_lo: 1.0,
            v_sig_hi: 2.0,
            v_th: 0.0,
            leak_rate: 0.0,
            rc_product: None,
            gain_n: 2.0,
            residual_scale: None,
            swing_lo: 0.0,
            swing_hi: 3.0,
            v_l: None,
            v_h: None,
            v_ms: None,
        }
    }
}

/// Swing used by [`AnalogConfig::ideal`]; wide enough to never clip.
pub const UNBOUNDED_SWING: f64 = 1e9;

impl AnalogConfig {
    /// No diode drop, no droop, exact-mean integrator, no clipping.
    pub fn ideal() -> Self {
        AnalogConfig {
            swing_lo: -UNBOUNDED_SWING,
            swing_hi: UNBOUNDED_SWING,
            ..AnalogConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("analog config: {m}")));
        if !(self.v_sig_lo < self.v_sig_hi) {
            return bad("v_sig_lo must be below v_sig_hi");
        }
        if !(self.swing_lo < self.swing_hi) {
            return bad("swing_lo must be below swing_hi");
        }
        if !(self.v_th >= 0.0) {
            return bad("v_th must be non-negative");
        }
        if !(self.leak_rate >= 0.0) {
            return bad("leak_rate must be non-negative");
        }
        if let Some(rc) = self.rc_product {
            if !(rc > 0.0) {
                return bad("rc_product must be positive");
            }
        }
        if !(self.gain_n >= 1.0) {
            return bad("gain_n must be at least 1");
        }
        Ok(())
    }

    pub fn v_l(&self) -> f64 {
        self.v_l.unwrap_or(self.v_sig_lo)
    }

    pub fn v_h(&self) -> f64 {
        self.v_h.unwrap_or(self.v_sig_hi)
    }

    pub fn v_ms(&self) -> f64 {
        self.v_ms
            .unwrap_or(0.5 * (self.v_sig_lo + self.v_sig_hi))
    }

    pub fn rc_product_for(&self, window_duration_s: f64) -> f64 {
        self.rc_product.unwrap_or(window_duration_s)
    }

    /// Software factor so that `gain_n * residual_scale` equals the window
    /// length in samples.
    pub fn residual_scale_for(&self, samples_per_window: usize) -> f64 {
        self.residual_scale
            .unwrap_or(samples_per_window as f64 / self.gain_n)
    }

    /// Clamps to the op-amp swing and reports whether clamping happened.
    pub fn clip(&self, v: f64) -> (f64, bool) {
        let c = v.clamp(self.swing_lo, self.swing_hi);
        (c, c != v)
    }

    fn span(&self) -> f64 {
        self.v_sig_hi - self.v_sig_lo
    }
}

pub fn to_voltage(x01: f64, cfg: &AnalogConfig) -> f64 {
    cfg.v_sig_lo + x01 * cfg.span()
}

/// Clamped inverse of [`to_voltage`].
pub fn from_voltage(v: f64, cfg: &AnalogConfig) -> f64 {
    ((v - cfg.v_sig_lo) / cfg.span()).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PeakMode {
    Max,
    Min,
}

/// Unclipped hold-capacitor voltage after the whole sequence.
fn peak_hold(v_in: &[f64], dt: f64, cfg: &AnalogConfig, mode: PeakMode) -> f64 {
    let droop = cfg.leak_rate * dt;
    match mode {
        PeakMode::Max => {
            let floor = cfg.v_l();
            v_in.iter().fold(floor, |v_c, &v| {
                if v > v_c + cfg.v_th {
                    v - cfg.v_th
                } else {
                    (v_c - droop).max(floor)
                }
            })
        }
        PeakMode::Min => {
            let ceil = cfg.v_h();
            v_in.iter().fold(ceil, |v_c, &v| {
                if v < v_c - cfg.v_th {
                    v + cfg.v_th
                } else {
                    (v_c + droop).min(ceil)
                }
            })
        }
    }
}

/// Peak (Max) or valley (Min) detector over one window.
///
/// The diode settles fully within a sample: when it conducts the capacitor
/// jumps to `v_in -/+ v_th`; otherwise it droops toward its reset level at
/// `leak_rate`.
pub fn sim_peak_detector(v_in: &[f64], dt: f64, cfg: &AnalogConfig, mode: PeakMode) -> Result<f64> {
    if v_in.is_empty() {
        return Err(Error::Usage("peak detector needs at least one sample".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::Usage(format!("dt must be positive, got {dt}")));
    }
    Ok(cfg.clip(peak_hold(v_in, dt, cfg, mode)).0)
}

fn integrate(v_in: &[f64], dt: f64, cfg: &AnalogConfig) -> f64 {
    let v_ms = cfg.v_ms();
    let rc = cfg.rc_product_for(v_in.len() as f64 * dt);
    let area: f64 = v_in.iter().map(|&v| (v - v_ms) * dt).sum();
    v_ms + area / rc
}

/// Centered integrator: starts at `v_ms` and integrates `v_in - v_ms`. With
/// `rc_product` equal to the window duration the output is the window mean.
pub fn sim_integrator_mean(v_in: &[f64], dt: f64, cfg: &AnalogConfig) -> Result<f64> {
    if !(dt > 0.0) {
        return Err(Error::Usage(format!("dt must be positive, got {dt}")));
    }
    if v_in.is_empty() {
        return Ok(cfg.clip(cfg.v_ms()).0);
    }
    Ok(cfg.clip(integrate(v_in, dt, cfg)).0)
}

/// Sum stage: `gain_n * v_mean`, clipped to the swing. Returns the clip flag.
pub fn sim_sum(v_mean: f64, cfg: &AnalogConfig) -> (f64, bool) {
    cfg.clip(cfg.gain_n * v_mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalogFeature {
    pub id: FeatureId,
    /// Circuit output, always inside the op-amp swing.
    pub voltage: f64,
    /// The output expressed on the signal voltage range. Equal to `voltage`
    /// except for Sum, which is multiplied by `residual_scale / N` so the
    /// reconstructed sum lands back in the range shared with the other
    /// features.
    pub range_voltage: f64,
    pub clipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalogFeatureOut {
    pub v_sig_lo: f64,
    pub v_sig_hi: f64,
    pub samples_per_window: usize,
    pub residual_scale: f64,
    /// Canonical feature order.
    pub entries: Vec<AnalogFeature>,
}

impl AnalogFeatureOut {
    /// Software-domain estimate of each feature: Min/Max/Mean through the
    /// inverse voltage map, Sum as `sum_i x_i` reconstructed from the
    /// scaled Sum voltage. Not clamped.
    pub fn feature_values(&self) -> Vec<f64> {
        let span = self.v_sig_hi - self.v_sig_lo;
        let n = self.samples_per_window as f64;
        self.entries
            .iter()
            .map(|e| match e.id.kind {
                FeatureKind::Sum => (e.voltage * self.residual_scale - n * self.v_sig_lo) / span,
                _ => (e.voltage - self.v_sig_lo) / span,
            })
            .collect()
    }
}

/// Runs every selected extractor on one normalized window.
///
/// Extractors are independent and restart from their reset level each
/// window. Sum reuses the Mean integrator of its channel, which is simulated
/// even when Mean itself is not selected.
pub fn run_extractor_bank(
    window: &Window,
    selection: &[FeatureId],
    cfg: &AnalogConfig,
) -> Result<AnalogFeatureOut> {
    if selection.is_empty() {
        return Err(Error::Config("extractor bank selection is empty".into()));
    }
    if let Some(id) = selection.iter().find(|id| id.channel >= window.num_channels()) {
        return Err(Error::Config(format!(
            "selected feature {id} but the window has {} channels",
            window.num_channels()
        )));
    }
    let mut ids = selection.to_vec();
    ids.sort();
    ids.dedup();
    let n = window.len();
    let dt = window.t_step_s;
    let residual_scale = cfg.residual_scale_for(n);
    let mut entries = Vec::with_capacity(ids.len());
    let mut volts: Vec<f64> = Vec::new();
    for id in ids {
        volts.clear();
        volts.extend(window.samples[id.channel].iter().map(|&x| to_voltage(x, cfg)));
        let (voltage, clipped) = match id.kind {
            FeatureKind::Max => cfg.clip(peak_hold(&volts, dt, cfg, PeakMode::Max)),
            FeatureKind::Min => cfg.clip(peak_hold(&volts, dt, cfg, PeakMode::Min)),
            FeatureKind::Mean => cfg.clip(integrate(&volts, dt, cfg)),
            FeatureKind::Sum => {
                let (v_mean, mean_clipped) = cfg.clip(integrate(&volts, dt, cfg));
                let (v, sum_clipped) = sim_sum(v_mean, cfg);
                (v, mean_clipped || sum_clipped)
            }
        };
        let range_voltage = match id.kind {
            FeatureKind::Sum => voltage * residual_scale / n as f64,
            _ => voltage,
        };
        entries.push(AnalogFeature {
            id,
            voltage,
            range_voltage,
            clipped,
        });
    }
    Ok(AnalogFeatureOut {
        v_sig_lo: cfg.v_sig_lo,
        v_sig_hi: cfg.v_sig_hi,
        samples_per_window: n,
        residual_scale,
        entries,
    })
}

/// `sum (hw - sw)^2 / sum sw^2`.
pub fn nmse(hw: &[f64], sw: &[f64]) -> Result<f64> {
    if hw.len() != sw.len() || hw.is_empty() {
        return Err(Error::Usage(format!(
            "nmse needs equal non-empty sequences, got {} and {}",
            hw.len(),
            sw.len()
        )));
    }
    let energy: f64 = sw.iter().map(|s| s * s).sum();
    if energy == 0.0 {
        return Err(Error::Numeric(
            "nmse undefined for an all-zero reference".into(),
        ));
    }
    let err: f64 = hw.iter().zip(sw).map(|(h, s)| (h - s) * (h - s)).sum();
    Ok(err / energy)
}
