//! Lateral-error metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reward::PX_TO_M;

/// Lane width used to normalize RMSE, metres.
pub const LANE_WIDTH_M: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub std: f64,
    pub nrmse: f64,
}

pub fn px_offsets_to_m(offsets_px: &[f64]) -> Vec<f64> {
    offsets_px.iter().map(|y| y * PX_TO_M).collect()
}

/// RMSE about zero, Std about the mean, both in metres.
pub fn compute_metrics(offsets_px: &[f64]) -> Result<Metrics> {
    metrics_m(&px_offsets_to_m(offsets_px))
}

pub fn metrics_m(d: &[f64]) -> Result<Metrics> {
    if d.is_empty() {
        return Err(Error::InvalidArgument("metrics need at least one offset".into()));
    }
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("offsets"));
    }
    let n = d.len() as f64;
    let rmse = (d.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    let mean = d.iter().sum::<f64>() / n;
    let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(Metrics { rmse, std, nrmse: rmse / LANE_WIDTH_M })
}

pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    Some(if s.len() % 2 == 1 { s[m] } else { 0.5 * (s[m - 1] + s[m]) })
}
