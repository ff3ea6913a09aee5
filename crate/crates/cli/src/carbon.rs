//! Carbon footprint of human annotation work.

use fal_core::Error;

/// Share of AMT workers by region: USA, India, other.
pub const AMT_SHARES: [f64; 3] = [0.47, 0.34, 0.19];
/// Grid carbon intensity in gCO2eq/kWh for the same regions.
pub const AMT_INTENSITIES: [f64; 3] = [379.0, 633.0, 442.0];

#[derive(Debug, Clone, PartialEq)]
pub struct CarbonInputs {
    pub worker_hours: f64,
    pub watts_per_worker: f64,
    /// Fraction of the work done in each region; sums to 1.
    pub shares: Vec<f64>,
    /// gCO2eq per kWh, one per region.
    pub intensities: Vec<f64>,
}

impl CarbonInputs {
    /// AMT worker mix at 300 W per worker.
    pub fn amt(worker_hours: f64) -> Self {
        Self { worker_hours, watts_per_worker: 300.0, shares: AMT_SHARES.to_vec(), intensities: AMT_INTENSITIES.to_vec() }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.shares.len() != self.intensities.len() || self.shares.is_empty() {
            return bad(format!("{} shares but {} intensities", self.shares.len(), self.intensities.len()));
        }
        let scalars = [self.worker_hours, self.watts_per_worker];
        if scalars.iter().chain(&self.shares).chain(&self.intensities).any(|x| !(x.is_finite() && *x >= 0.0)) {
            return bad("carbon inputs must be finite and non-negative".into());
        }
        let total: f64 = self.shares.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("regional shares sum to {total}, not 1"));
        }
        Ok(())
    }

    pub fn energy_kwh(&self) -> f64 {
        self.worker_hours * self.watts_per_worker / 1000.0
    }

    /// Share-weighted grid intensity in gCO2eq/kWh.
    pub fn mean_intensity(&self) -> f64 {
        self.shares.iter().zip(&self.intensities).map(|(s, i)| s * i).sum()
    }
}

/// Footprint in kgCO2eq.
pub fn carbon_estimate(c: &CarbonInputs) -> Result<f64, Error> {
    c.validate()?;
    Ok(c.energy_kwh() * c.mean_intensity() / 1000.0)
}
