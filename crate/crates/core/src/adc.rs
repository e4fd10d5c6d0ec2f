//! Successive-approximation ADC.
//!
//! The DAC is an ideal R-2R ladder followed by a gain-and-bias stage, which
//! together produce `2^n` evenly spaced levels from `v_dac_lo` to `v_dac_hi`.
//! Conversion walks the bits MSB first: set the bit, compare the input with
//! the DAC level of the candidate code, keep the bit if `v_in >= level`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::analog::AnalogFeatureOut;
use crate::error::{Error, Result};

/// How feature voltages reach the comparator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrontEnd {
    /// Maps the signal range onto the DAC range with a half-LSB offset, so
    /// the end-to-end transfer rounds to the nearest level.
    #[default]
    Aligned,
    /// Feeds the feature voltage to the comparator unchanged.
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdcConfig {
    pub n_bits: u32,
    pub v_dac_lo: f64,
    pub v_dac_hi: f64,
    /// Seconds per conversion, mux switching included.
    pub t_conv_s: f64,
    pub front_end: FrontEnd,
}

impl Default for AdcConfig {
    fn default() -> Self {
        AdcConfig {
            n_bits: 4,
            v_dac_lo: 0.98,
            v_dac_hi: 1.95,
            t_conv_s: 5e-4,
            front_end: FrontEnd::Aligned,
        }
    }
}

impl AdcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=16).contains(&self.n_bits) {
            return Err(Error::Config(format!(
                "adc n_bits must be in 1..=16, got {}",
                self.n_bits
            )));
        }
        if !(self.v_dac_lo < self.v_dac_hi) {
            return Err(Error::Config("adc v_dac_lo must be below v_dac_hi".into()));
        }
        if !(self.t_conv_s > 0.0) {
            return Err(Error::Config("adc t_conv_s must be positive".into()));
        }
        Ok(())
    }

    pub fn max_code(&self) -> u16 {
        ((1u32 << self.n_bits) - 1) as u16
    }

    pub fn lsb(&self) -> f64 {
        (self.v_dac_hi - self.v_dac_lo) / self.max_code() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AdcCode(pub u16);

impl AdcCode {
    pub fn new(code: u16, cfg: &AdcConfig) -> Result<Self> {
        if code > cfg.max_code() {
            return Err(Error::Usage(format!(
                "code {code} out of range for {} bits",
                cfg.n_bits
            )));
        }
        Ok(AdcCode(code))
    }
}

fn level(code: u16, cfg: &AdcConfig) -> f64 {
    let max = cfg.max_code();
    // Endpoints are returned verbatim so both rails are hit exactly.
    if code == 0 {
        cfg.v_dac_lo
    } else if code >= max {
        cfg.v_dac_hi
    } else {
        cfg.v_dac_lo + (cfg.v_dac_hi - cfg.v_dac_lo) * (code as f64 / max as f64)
    }
}

pub fn dac_level(code: AdcCode, cfg: &AdcConfig) -> Result<f64> {
    if code.0 > cfg.max_code() {
        return Err(Error::Usage(format!(
            "code {} out of range for {} bits",
            code.0, cfg.n_bits
        )));
    }
    Ok(level(code.0, cfg))
}

pub trait Comparator {
    /// `true` when the input is at or above the reference.
    fn compare(&mut self, v_in: f64, v_ref: f64) -> bool;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct IdealComparator;

impl Comparator for IdealComparator {
    fn compare(&mut self, v_in: f64, v_ref: f64) -> bool {
        v_in >= v_ref
    }
}

/// Per-bit record of one conversion, MSB first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SarTrace {
    pub v_in: f64,
    pub code: AdcCode,
    pub trial_levels: Vec<f64>,
    pub kept: Vec<bool>,
}

pub fn sar_convert_with<C: Comparator>(v_in: f64, cfg: &AdcConfig, comparator: &mut C) -> SarTrace {
    let mut code: u16 = 0;
    let mut trial_levels = Vec::with_capacity(cfg.n_bits as usize);
    let mut kept = Vec::with_capacity(cfg.n_bits as usize);
    for bit in (0..cfg.n_bits).rev() {
        let candidate = code | (1 << bit);
        let v_ref = level(candidate, cfg);
        let keep = comparator.compare(v_in, v_ref);
        if keep {
            code = candidate;
        }
        trial_levels.push(v_ref);
        kept.push(keep);
    }
    SarTrace {
        v_in,
        code: AdcCode(code),
        trial_levels,
        kept,
    }
}

/// Out-of-range inputs saturate at code 0 or `2^n - 1`.
pub fn sar_convert(v_in: f64, cfg: &AdcConfig) -> AdcCode {
    sar_convert_with(v_in, cfg, &mut IdealComparator).code
}

/// Digital-side value of a code on `[0, 1]`.
pub fn code_to_input(code: AdcCode, cfg: &AdcConfig) -> f64 {
    code.0 as f64 / cfg.max_code() as f64
}

/// Comparator input for a feature voltage expressed on the signal range.
pub fn front_end_voltage(range_voltage: f64, v_sig_lo: f64, v_sig_hi: f64, cfg: &AdcConfig) -> f64 {
    match cfg.front_end {
        FrontEnd::Direct => range_voltage,
        FrontEnd::Aligned => {
            let x = (range_voltage - v_sig_lo) / (v_sig_hi - v_sig_lo);
            cfg.v_dac_lo + (x * cfg.max_code() as f64 + 0.5) * cfg.lsb()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankConversion {
    pub codes: Vec<AdcCode>,
    pub traces: Vec<SarTrace>,
    pub total_time_s: f64,
}

impl BankConversion {
    pub fn inputs(&self, cfg: &AdcConfig) -> Vec<f64> {
        self.codes.iter().map(|&c| code_to_input(c, cfg)).collect()
    }
}

/// Converts the features one after another through the shared converter.
pub fn convert_bank(features: &AnalogFeatureOut, cfg: &AdcConfig) -> BankConversion {
    let traces: Vec<SarTrace> = features
        .entries
        .iter()
        .map(|e| {
            let v = front_end_voltage(e.range_voltage, features.v_sig_lo, features.v_sig_hi, cfg);
            sar_convert_with(v, cfg, &mut IdealComparator)
        })
        .collect();
    BankConversion {
        codes: traces.iter().map(|t| t.code).collect(),
        total_time_s: traces.len() as f64 * cfg.t_conv_s,
        traces,
    }
}

/// Dumps traces as `feature_index,input_volts,code,bits` rows, where `bits`
/// lists the keep/clear decisions MSB first as `1`/`0`.
pub fn write_traces<W: Write>(traces: &[SarTrace], mut out: W) -> std::io::Result<()> {
    writeln!(out, "feature_index,input_volts,code,bits")?;
    for (i, t) in traces.iter().enumerate() {
        let bits: String = t.kept.iter().map(|&k| if k { '1' } else { '0' }).collect();
        writeln!(out, "{i},{},{},{bits}", t.v_in, t.code.0)?;
    }
    Ok(())
}
