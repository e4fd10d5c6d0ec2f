//! Stochastic input gates with a hardware-cost regularizer.
//!
//! Every candidate feature `i` has a trainable logit `log_alpha[i]`. During
//! training a gate is drawn from the binary Concrete (Gumbel-Sigmoid)
//! relaxation
//!
//! ```text
//! s_i = sigmoid((ln u_i - ln(1 - u_i) + log_alpha_i) / gamma),  u_i ~ U(0, 1)
//! z_i = clip(s_i, 0, 1)
//! ```
//!
//! and multiplies its input feature. At inference the gate is
//! `sigmoid(log_alpha_i)`, and after thresholding it is frozen to 0/1.
//! The cost term `sum_i sigmoid(log_alpha_i) * c_i` charges each gate for the
//! silicon area of its extractor.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Open-interval margin for `u`.
pub const U_EPS: f64 = 1e-7;

/// Initial logit, `sigmoid(2.2) ~ 0.9`: gates start mostly open.
pub const DEFAULT_LOG_ALPHA: f64 = 2.2;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sigmoid_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateLayer {
    pub log_alpha: Vec<f64>,
    pub gamma: f64,
    pub lambda: f64,
    pub warmup_epochs: usize,
    pub costs: Vec<f64>,
    /// Hard gates after [`GateLayer::prune_gates`].
    pub frozen_mask: Option<Vec<bool>>,
}

/// One draw of the gate vector, kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GateSample {
    pub u: Vec<f64>,
    pub s: Vec<f64>,
    pub z: Vec<f64>,
    /// Temperature the sample was drawn at.
    pub gamma: f64,
}

impl GateLayer {
    pub fn new(costs: Vec<f64>, gamma: f64, lambda: f64, warmup_epochs: usize) -> Result<Self> {
        let layer = GateLayer {
            log_alpha: vec![DEFAULT_LOG_ALPHA; costs.len()],
            gamma,
            lambda,
            warmup_epochs,
            costs,
            frozen_mask: None,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn validate(&self) -> Result<()> {
        if self.log_alpha.len() != self.costs.len() {
            return Err(Error::Config(format!(
                "gate layer has {} logits but {} costs",
                self.log_alpha.len(),
                self.costs.len()
            )));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.costs.iter().any(|c| !(*c >= 0.0)) {
            return Err(Error::Config("gate costs must be non-negative".into()));
        }
        if let Some(m) = &self.frozen_mask {
            if m.len() != self.costs.len() {
                return Err(Error::Config("frozen mask length mismatch".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.log_alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_alpha.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen_mask.is_some()
    }

    /// Draws `u` on `(eps, 1 - eps)` and evaluates the relaxed gates.
    pub fn sample_gates(&self, rng: &mut Rng) -> Result<GateSample> {
        let u = (0..self.len())
            .map(|_| rng.gen_range(U_EPS..1.0 - U_EPS))
            .collect();
        self.sample_gates_with(u)
    }

    /// Same as [`GateLayer::sample_gates`] with a caller-provided `u`.
    pub fn sample_gates_with(&self, u: Vec<f64>) -> Result<GateSample> {
        if self.is_frozen() {
            return Err(Error::Usage("cannot sample gates of a frozen layer".into()));
        }
        if u.len() != self.len() {
            return Err(Error::Usage(format!(
                "u has length {}, expected {}",
                u.len(),
                self.len()
            )));
        }
        let s: Vec<f64> = u
            .iter()
            .zip(&self.log_alpha)
            .map(|(&u, &la)| concrete(u, la, self.gamma))
            .collect();
        let z = s.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(GateSample {
            u,
            s,
            z,
            gamma: self.gamma,
        })
    }

    /// `sigmoid(log_alpha)`, or the hard mask once frozen.
    pub fn deterministic_gates(&self) -> Vec<f64> {
        match &self.frozen_mask {
            Some(m) => m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            None => self.log_alpha.iter().map(|&la| sigmoid(la)).collect(),
        }
    }

    /// Expected extractor cost `sum sigmoid(log_alpha_i) * c_i`.
    pub fn cost_loss(&self) -> f64 {
        self.log_alpha
            .iter()
            .zip(&self.costs)
            .map(|(&la, &c)| sigmoid(la) * c)
            .sum()
    }

    /// Gradient of [`GateLayer::cost_loss`] (without `lambda`).
    pub fn cost_grad(&self) -> Vec<f64> {
        self.log_alpha
            .iter()
            .zip(&self.costs)
            .map(|(&la, &c)| sigmoid_prime(la) * c)
            .collect()
    }

    /// Backpropagates `dL/dz` through the Concrete sample to the logits.
    ///
    /// Zero during the first `warmup_epochs` epochs. The cost-term gradient is
    /// added separately by the trainer.
    pub fn gate_backward(&self, upstream: &[f64], sample: &GateSample, epoch: usize) -> Result<Vec<f64>> {
        if upstream.len() != self.len() || sample.s.len() != self.len() {
            return Err(Error::Usage(format!(
                "gate gradient length {} / sample length {} do not match {} gates",
                upstream.len(),
                sample.s.len(),
                self.len()
            )));
        }
        if epoch < self.warmup_epochs {
            return Ok(vec![0.0; self.len()]);
        }
        // The clip is the identity on (0, 1), the sigmoid's codomain.
        Ok(upstream
            .iter()
            .zip(&sample.s)
            .map(|(&g, &s)| g * s * (1.0 - s) / sample.gamma)
            .collect())
    }

    /// Freezes gates to `z_i > tau` using the deterministic gate values.
    pub fn prune_gates(&mut self, tau: f64) -> Result<Vec<bool>> {
        if self.is_frozen() {
            return Err(Error::Usage("gate layer is already frozen".into()));
        }
        let mask: Vec<bool> = self.deterministic_gates().iter().map(|&z| z > tau).collect();
        self.frozen_mask = Some(mask.clone());
        Ok(mask)
    }

    pub fn selected_count(&self) -> usize {
        self.frozen_mask
            .as_ref()
            .map_or(0, |m| m.iter().filter(|&&b| b).count())
    }
}

/// Relaxed Bernoulli sample for a single gate.
pub fn concrete(u: f64, log_alpha: f64, gamma: f64) -> f64 {
    sigmoid(((u.ln() - (1.0 - u).ln()) + log_alpha) / gamma)
}

pub fn apply_gates(x: &[f64], z: &[f64]) -> Result<Vec<f64>> {
    if x.len() != z.len() {
        return Err(Error::Usage(format!(
            "feature vector has {} entries but {} gates",
            x.len(),
            z.len()
        )));
    }
    Ok(x.iter().zip(z).map(|(a, b)| a * b).collect())
}

/// Geometric temperature schedule from `gamma_start` to `gamma_end`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GammaSchedule {
    pub gamma_start: f64,
    pub gamma_end: f64,
    pub total_epochs: usize,
}

impl Default for GammaSchedule {
    fn default() -> Self {
        GammaSchedule {
            gamma_start: 2.0,
            gamma_end: 0.1,
            total_epochs: 50,
        }
    }
}

impl GammaSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_start > 0.0 && self.gamma_end > 0.0) {
            return Err(Error::Config("gamma schedule endpoints must be positive".into()));
        }
        if self.gamma_end > self.gamma_start {
            return Err(Error::Config("gamma_end must not exceed gamma_start".into()));
        }
        Ok(())
    }
}

pub fn anneal_gamma(schedule: &GammaSchedule, epoch: usize) -> f64 {
    if schedule.total_epochs <= 1 || schedule.gamma_start == schedule.gamma_end {
        return schedule.gamma_start;
    }
    let last = (schedule.total_epochs - 1) as f64;
    if epoch as f64 >= last {
        return schedule.gamma_end;
    }
    let t = epoch as f64 / last;
    schedule.gamma_start * (schedule.gamma_end / schedule.gamma_start).powf(t)
}
