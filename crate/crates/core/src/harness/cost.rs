use serde::{Deserialize, Serialize};

use super::{EvalReport, HarnessError};

/// Prices for the two ways of answering queries: a metered vision API or a
/// rented GPU running a private copy of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PricingModel {
    pub per_1k_queries: f64,
    pub gpu_hour: f64,
    /// Local inference time per query, including transfer.
    pub seconds_per_query: f64,
    /// One-off instance start-up, billed at the GPU rate.
    pub gpu_setup_hours: f64,
}

impl Default for PricingModel {
    /// API and GPU list prices as published; 2.4 s per query corresponds to
    /// 500 images with two augmentations each in one GPU-hour.
    fn default() -> Self {
        Self {
            per_1k_queries: 1.5,
            gpu_hour: 2.48,
            seconds_per_query: 2.4,
            gpu_setup_hours: 0.1,
        }
    }
}

impl PricingModel {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let fields = [
            ("per_1k_queries", self.per_1k_queries),
            ("gpu_hour", self.gpu_hour),
            ("seconds_per_query", self.seconds_per_query),
            ("gpu_setup_hours", self.gpu_setup_hours),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(HarnessError::Format(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostPath {
    Api,
    Gpu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub total_queries: u64,
    pub api_cost: f64,
    pub gpu_cost: f64,
    /// Estimated GPU wall time in seconds, set-up included.
    pub wall_time: f64,
    /// Ties go to the GPU path.
    pub cheaper: CostPath,
    /// Always true: the figures extrapolate from a price list, not from
    /// measured runs against the priced service.
    pub estimate: bool,
}

pub fn estimate_cost(report: &EvalReport, pricing: &PricingModel) -> Result<CostBreakdown, HarnessError> {
    estimate_cost_for_queries(report.total_queries, pricing)
}

pub fn estimate_cost_for_queries(total_queries: u64, pricing: &PricingModel) -> Result<CostBreakdown, HarnessError> {
    pricing.validate()?;
    let api_cost = total_queries as f64 / 1000.0 * pricing.per_1k_queries;
    let (wall_time, gpu_cost) = if total_queries == 0 {
        (0.0, 0.0)
    } else {
        let secs = total_queries as f64 * pricing.seconds_per_query + pricing.gpu_setup_hours * 3600.0;
        (secs, secs / 3600.0 * pricing.gpu_hour)
    };
    Ok(CostBreakdown {
        total_queries,
        api_cost,
        gpu_cost,
        wall_time,
        cheaper: if api_cost < gpu_cost { CostPath::Api } else { CostPath::Gpu },
        estimate: true,
    })
}
