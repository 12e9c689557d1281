//! Independent references: a brute-force attention evaluator and closed-form
//! cost formulas. Engine tests compare against these.

mod cost;
mod reference;

pub use cost::{cost_model, CostPrediction};
pub use reference::{causal_mask, full_attention_reference, rel_err, segment_mask, ReferenceOutput};
