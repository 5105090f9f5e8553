use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How per-record compute time is obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Timing {
    /// Counted floating-point work divided by a reference throughput;
    /// reproducible across runs and machines.
    #[default]
    Counted,
    /// Wall clock of an uncached evaluation.
    Measured,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyModel {
    pub power_kw: f64,
    pub intensity_g_per_kwh: f64,
    pub timing: Timing,
    /// Throughput used to turn counted FLOPs into seconds.
    pub reference_gflops: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        EnergyModel {
            power_kw: 0.3,
            intensity_g_per_kwh: 470.0,
            timing: Timing::Counted,
            reference_gflops: 1.0,
        }
    }
}

impl EnergyModel {
    /// A 155 W CPU profile.
    pub fn cpu() -> Self {
        EnergyModel {
            power_kw: 0.155,
            ..EnergyModel::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.power_kw > 0.0 && self.intensity_g_per_kwh > 0.0 && self.reference_gflops > 0.0) {
            return Err(Error::Config(format!("energy model values must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn seconds_for_flops(&self, flops: f64) -> f64 {
        flops / (self.reference_gflops * 1e9)
    }
}

/// Grams CO₂-eq: hours × kW × g/kWh.
pub fn co2_estimate(hours: f64, energy: &EnergyModel) -> Result<f64> {
    if !(hours >= 0.0) || !hours.is_finite() {
        return Err(Error::Argument(format!("compute time {hours} h must be non-negative")));
    }
    Ok(hours * energy.power_kw * energy.intensity_g_per_kwh)
}
