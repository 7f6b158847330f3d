//! Per-sample abstention outcomes and their CSV log.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::write_file;
use crate::error::Result;

/// The outcome of running CAL on one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub sample_id: u64,
    pub true_class: Option<usize>,
    pub image_logits: Vec<f64>,
    pub predicted_genetic_logits: Vec<f64>,
    pub k: usize,
    pub worst_case: Vec<f64>,
    /// `min_{j≠k} (ỹ_k − ỹ_j)`.
    pub margin: f64,
    /// True when the genetic measurement is skipped.
    pub abstain: bool,
    pub genetic_queried: bool,
    pub final_class: usize,
}

pub const DECISION_CSV_HEADER: &str = "sample_id,k,abstain,genetic_queried,final_class,true_class,margin";

pub fn decisions_to_csv(decisions: &[Decision]) -> String {
    let mut s = String::from(DECISION_CSV_HEADER);
    s.push('\n');
    for d in decisions {
        let truth = d.true_class.map(|c| c.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            d.sample_id, d.k, d.abstain, d.genetic_queried, d.final_class, truth, d.margin
        );
    }
    s
}

pub fn write_decisions_csv(path: &Path, decisions: &[Decision]) -> Result<()> {
    write_file(path, decisions_to_csv(decisions).as_bytes())
}
