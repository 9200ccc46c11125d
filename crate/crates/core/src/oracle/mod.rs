//! The black-box detector boundary.
//!
//! Attack code only ever sees what an [`Oracle`] reports: boxes, labels and
//! scores. Every call goes through [`detect`], which charges a
//! [`QueryBudget`] before the oracle is touched.

mod budget;
mod mock;
mod nms;
pub mod wire;

pub use budget::{BudgetSnapshot, Phase, QueryBudget};
pub use mock::{render_template, standard_templates, MockDetector, MockDetectorConfig, Template};
pub use nms::{nms, nms_set};
pub use wire::{HttpOracle, MockServer, ServerOptions};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imagecore::{ImageError, ImageTensor, RegionRect};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("query budget exhausted ({used}/{max} used)")]
    BudgetExhausted { used: u64, max: u64 },
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("oracle rejected the request ({status}): {message}")]
    Rejected { status: u16, message: String },
    #[error("payload exceeds the oracle's size limit")]
    PayloadTooLarge,
    #[error("rate limited by oracle")]
    RateLimited,
    #[error("invalid detector configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

impl OracleError {
    /// The oracle could not be reached at all, as opposed to answering badly.
    pub fn is_unreachable(&self) -> bool {
        matches!(self, OracleError::Transport(_))
    }
}

/// One reported object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: RegionRect,
    pub label: String,
    pub score: f64,
}

impl Detection {
    /// Twice the box center, kept integral so grid membership is exact.
    pub fn center_x2(&self) -> (usize, usize) {
        (self.bbox.x0 + self.bbox.x1, self.bbox.y0 + self.bbox.y1)
    }
}

/// The answer to one oracle query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub detections: Vec<Detection>,
    pub oracle_id: String,
    pub query_index: u64,
}

impl DetectionSet {
    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }
}

/// A detector that only exposes its final, post-processed detections.
pub trait Oracle: Send + Sync {
    fn id(&self) -> String;

    /// Runs the detector once. Callers go through [`detect`] so that every
    /// invocation is budgeted.
    fn forward(&self, image: &ImageTensor) -> Result<Vec<Detection>, OracleError>;
}

impl<T: Oracle + ?Sized> Oracle for &T {
    fn id(&self) -> String {
        (**self).id()
    }

    fn forward(&self, image: &ImageTensor) -> Result<Vec<Detection>, OracleError> {
        (**self).forward(image)
    }
}

impl<T: Oracle + ?Sized> Oracle for Box<T> {
    fn id(&self) -> String {
        (**self).id()
    }

    fn forward(&self, image: &ImageTensor) -> Result<Vec<Detection>, OracleError> {
        (**self).forward(image)
    }
}

/// Charges one unit to `budget` under `phase`, then queries the oracle.
///
/// When the budget is exhausted the oracle is not called.
pub fn detect<O: Oracle + ?Sized>(
    oracle: &O,
    image: &ImageTensor,
    budget: &QueryBudget,
    phase: Phase,
) -> Result<DetectionSet, OracleError> {
    let query_index = budget.charge(phase)?;
    let detections = oracle.forward(image)?;
    for d in &detections {
        if !d.bbox.fits(image.width(), image.height()) {
            return Err(OracleError::Protocol(format!(
                "box {:?} outside {}x{} image",
                d.bbox,
                image.height(),
                image.width()
            )));
        }
        if !(0.0..=1.0).contains(&d.score) {
            return Err(OracleError::Protocol(format!("score {} outside [0, 1]", d.score)));
        }
    }
    Ok(DetectionSet {
        detections,
        oracle_id: oracle.id(),
        query_index,
    })
}
