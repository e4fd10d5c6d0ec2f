//! Area, power, latency and energy of a complete classification system.
//!
//! Feature extractor and ADC figures come from a lookup table. The bespoke
//! classifier is costed from its quantized weights: one multiplier per
//! surviving weight, an adder chain per neuron and input/output registers.
//! Units: mm², mW, ms, µJ (mW x ms).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adc::AdcConfig;
use crate::error::{Error, Result};
use crate::mlp::QuantizedModel;
use crate::signal::{FeatureId, FeatureKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockCost {
    pub area_mm2: f64,
    pub power_mw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpCoefficients {
    /// Multiplier area per weight-bit x input-bit product.
    pub a_mul: f64,
    /// Adder area per bit of accumulated width.
    pub a_add: f64,
    /// Register area per bit.
    pub a_reg: f64,
    /// Multiplier cost factor for weights whose code is 0.
    pub zero_factor: f64,
    /// Multiplier cost factor for codes `+-2^k` (a shift).
    pub pow2_factor: f64,
    /// Width of the hidden activations feeding the second layer.
    pub hidden_bits: u32,
    /// Width of each output register.
    pub output_bits: u32,
    /// Counters, decoder and other control logic.
    pub overhead_area_mm2: f64,
    pub power_density_mw_per_mm2: f64,
    /// Feature load, multiply-accumulate, activation.
    pub latency_cycles: u32,
}

impl Default for MlpCoefficients {
    fn default() -> Self {
        MlpCoefficients {
            a_mul: 2e-4,
            a_add: 5e-4,
            a_reg: 1e-3,
            zero_factor: 0.0,
            pow2_factor: 0.1,
            hidden_bits: 8,
            output_bits: 16,
            overhead_area_mm2: 0.05,
            power_density_mw_per_mm2: 0.01,
            latency_cycles: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimingConfig {
    pub clock_hz: f64,
    pub budget_ms: f64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig {
            clock_hz: 10_000.0,
            budget_ms: 20.0,
        }
    }
}

/// Cost lookup table. `features` is keyed by kind name; the `Sum` entry
/// covers only the gain stage, its Mean integrator is charged separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostLut {
    pub features: BTreeMap<String, BlockCost>,
    #[serde(default = "default_adc_cost")]
    pub adc: BlockCost,
    #[serde(default)]
    pub mlp: MlpCoefficients,
    #[serde(default)]
    pub timing: TimingConfig,
    #[serde(default = "default_true")]
    pub power_gating: bool,
}

fn default_adc_cost() -> BlockCost {
    BlockCost {
        area_mm2: 0.02,
        power_mw: 0.0814,
    }
}

fn default_true() -> bool {
    true
}

impl CostLut {
    /// Built-in table. Extractor and classifier numbers are illustrative
    /// placeholders, not measurements; the ADC entry is 0.02 mm² / 81.4 µW.
    pub fn placeholder() -> Self {
        let entry = |a, p| BlockCost {
            area_mm2: a,
            power_mw: p,
        };
        let features = [
            ("Min", entry(0.35, 0.020)),
            ("Max", entry(0.35, 0.020)),
            ("Mean", entry(0.50, 0.030)),
            ("Sum", entry(0.30, 0.015)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        CostLut {
            features,
            adc: default_adc_cost(),
            mlp: MlpCoefficients::default(),
            timing: TimingConfig::default(),
            power_gating: true,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let lut: CostLut = toml::from_str(text).map_err(|e| Error::Config(format!("cost table: {e}")))?;
        lut.validate()?;
        Ok(lut)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| e.context(format!("loading {}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.mlp;
        let mut values: Vec<(&str, f64)> = vec![
            ("adc.area_mm2", self.adc.area_mm2),
            ("adc.power_mw", self.adc.power_mw),
            ("mlp.a_mul", m.a_mul),
            ("mlp.a_add", m.a_add),
            ("mlp.a_reg", m.a_reg),
            ("mlp.zero_factor", m.zero_factor),
            ("mlp.pow2_factor", m.pow2_factor),
            ("mlp.overhead_area_mm2", m.overhead_area_mm2),
            ("mlp.power_density_mw_per_mm2", m.power_density_mw_per_mm2),
            ("timing.budget_ms", self.timing.budget_ms),
        ];
        for (k, v) in &self.features {
            values.push((k, v.area_mm2));
            values.push((k, v.power_mw));
        }
        if let Some((k, v)) = values.iter().find(|(_, v)| !(*v >= 0.0)) {
            return Err(Error::Config(format!("cost entry {k} must be non-negative, got {v}")));
        }
        if !(self.timing.clock_hz > 0.0) {
            return Err(Error::Config("timing.clock_hz must be positive".into()));
        }
        Ok(())
    }

    pub fn feature(&self, kind: FeatureKind) -> Result<BlockCost> {
        self.features
            .get(kind.name())
            .copied()
            .ok_or_else(|| Error::Config(format!("cost table has no entry for feature kind {kind}")))
    }
}

impl Default for CostLut {
    fn default() -> Self {
        CostLut::placeholder()
    }
}

/// Stand-alone cost of one candidate: a Sum carries its Mean integrator.
fn standalone(kind: FeatureKind, lut: &CostLut) -> Result<BlockCost> {
    let own = lut.feature(kind)?;
    if kind == FeatureKind::Sum {
        let mean = lut.feature(FeatureKind::Mean)?;
        return Ok(BlockCost {
            area_mm2: own.area_mm2 + mean.area_mm2,
            power_mw: own.power_mw + mean.power_mw,
        });
    }
    Ok(own)
}

/// Per-candidate area, the gate layer's cost vector.
pub fn feature_cost_vector(candidates: &[FeatureId], lut: &CostLut) -> Result<Vec<f64>> {
    candidates
        .iter()
        .map(|id| standalone(id.kind, lut).map(|c| c.area_mm2))
        .collect()
}

/// Area and power of the extractors for a selection. A Sum shares the Mean
/// integrator of its channel when that Mean is selected too.
pub fn extractor_cost(selection: &[FeatureId], lut: &CostLut) -> Result<BlockCost> {
    let mut total = BlockCost {
        area_mm2: 0.0,
        power_mw: 0.0,
    };
    for id in selection {
        let shared = id.kind == FeatureKind::Sum
            && selection.contains(&FeatureId::new(id.channel, FeatureKind::Mean));
        let c = if shared {
            lut.feature(FeatureKind::Sum)?
        } else {
            standalone(id.kind, lut)?
        };
        total.area_mm2 += c.area_mm2;
        total.power_mw += c.power_mw;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpCost {
    pub multiplier_area_mm2: f64,
    pub adder_area_mm2: f64,
    pub register_area_mm2: f64,
    pub overhead_area_mm2: f64,
    pub area_mm2: f64,
    pub power_mw: f64,
    pub latency_cycles: u32,
    /// Weights that are unmasked and have a nonzero code.
    pub multipliers: usize,
}

fn is_pow2(q: i32) -> bool {
    let a = q.unsigned_abs();
    a.is_power_of_two()
}

/// Bespoke fully parallel classifier cost.
///
/// For every unmasked weight: `a_mul * w_bits * x_bits`, times `zero_factor`
/// for code 0 or `pow2_factor` for `+-2^k`. Neuron `j` with `k` product terms
/// needs `k` adders (products plus bias) of width
/// `w_bits + x_bits + ceil(log2(k + 1))`. Registers hold the used inputs and
/// the outputs. Power is area times a density.
pub fn mlp_cost(q: &QuantizedModel, used_inputs: usize, coef: &MlpCoefficients) -> MlpCost {
    let a = q.arch;
    let wb = q.w1.bits as f64;
    let mut mul = 0.0;
    let mut add = 0.0;
    let mut multipliers = 0;
    let mut layer = |codes: &[i32], keep: &[bool], fan_in: usize, fan_out: usize, xb: f64, wbits: f64| {
        for j in 0..fan_out {
            let mut terms = 0usize;
            for i in 0..fan_in {
                let k = i * fan_out + j;
                if !keep[k] {
                    continue;
                }
                let code = codes[k];
                let factor = if code == 0 {
                    coef.zero_factor
                } else if is_pow2(code) {
                    coef.pow2_factor
                } else {
                    1.0
                };
                mul += coef.a_mul * wbits * xb * factor;
                if code != 0 {
                    terms += 1;
                    multipliers += 1;
                }
            }
            if terms > 0 {
                let width = wbits + xb + ((terms + 1) as f64).log2().ceil();
                add += terms as f64 * width * coef.a_add;
            }
        }
    };
    layer(&q.w1.q, &q.mask.w1, a.inputs, a.hidden, q.input_bits as f64, wb);
    layer(&q.w2.q, &q.mask.w2, a.hidden, a.classes, coef.hidden_bits as f64, q.w2.bits as f64);
    let reg = coef.a_reg * (used_inputs as f64 * q.input_bits as f64 + a.classes as f64 * coef.output_bits as f64);
    let area = mul + add + reg + coef.overhead_area_mm2;
    MlpCost {
        multiplier_area_mm2: mul,
        adder_area_mm2: add,
        register_area_mm2: reg,
        overhead_area_mm2: coef.overhead_area_mm2,
        area_mm2: area,
        power_mw: area * coef.power_density_mw_per_mm2,
        latency_cycles: coef.latency_cycles,
        multipliers,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub analog_features: f64,
    pub adc: f64,
    pub classifier: f64,
    pub total: f64,
}

impl Breakdown {
    fn new(analog_features: f64, adc: f64, classifier: f64) -> Self {
        Breakdown {
            analog_features,
            adc,
            classifier,
            total: analog_features + adc + classifier,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub adc_total_ms: f64,
    pub mlp_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub area_mm2: Breakdown,
    /// Power of each block while active.
    pub power_mw: Breakdown,
    pub latency: Latency,
    /// Active time per block per inference.
    pub active_ms: Breakdown,
    pub energy_uj: Breakdown,
    pub selected_features: usize,
}

/// Costs one design.
///
/// Active times with power gating: extractors integrate over the whole
/// window, the converter runs for its conversions, the classifier for its
/// cycles. Without power gating every block is on for the whole window.
pub fn system_cost(
    selection: &[FeatureId],
    q: &QuantizedModel,
    adc_cfg: &AdcConfig,
    lut: &CostLut,
    window_s: f64,
) -> Result<CostReport> {
    let extract = extractor_cost(selection, lut)?;
    let n = selection.len();
    let adc_on = n > 0;
    let adc_area = if adc_on { lut.adc.area_mm2 } else { 0.0 };
    let adc_power = if adc_on { lut.adc.power_mw } else { 0.0 };
    let m = mlp_cost(q, n, &lut.mlp);

    let adc_total_ms = n as f64 * adc_cfg.t_conv_s * 1e3;
    let mlp_ms = m.latency_cycles as f64 / lut.timing.clock_hz * 1e3;
    let window_ms = window_s * 1e3;
    let active = if lut.power_gating {
        Breakdown::new(if n > 0 { window_ms } else { 0.0 }, adc_total_ms, mlp_ms)
    } else {
        Breakdown::new(window_ms, window_ms, window_ms)
    };
    let power = Breakdown::new(extract.power_mw, adc_power, m.power_mw);
    let energy = Breakdown::new(
        power.analog_features * active.analog_features,
        power.adc * active.adc,
        power.classifier * active.classifier,
    );
    Ok(CostReport {
        area_mm2: Breakdown::new(extract.area_mm2, adc_area, m.area_mm2),
        power_mw: power,
        latency: Latency {
            adc_total_ms,
            mlp_ms,
            total_ms: adc_total_ms + mlp_ms,
        },
        active_ms: active,
        energy_uj: energy,
        selected_features: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RealtimeCheck {
    pub ok: bool,
    pub margin_ms: f64,
}

/// Feasible when the latency fits both the budget and the window period.
pub fn realtime_check(report: &CostReport, budget_ms: f64, window_s: f64) -> RealtimeCheck {
    let lat = report.latency.total_ms;
    RealtimeCheck {
        ok: lat < budget_ms && lat < window_s * 1e3,
        margin_ms: budget_ms - lat,
    }
}
