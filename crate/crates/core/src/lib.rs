//! Flow-guided temporal aggregation of single-pass stochastic segmentation
//! outputs: a streaming replacement for Monte Carlo dropout on video, plus
//! the brute-force estimator it approximates and the evaluation machinery
//! to compare them.

// `!(x > 0.0)` is used on purpose so NaN lands on the error path.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregator;
pub mod evaluation;
pub mod format;
pub mod pipeline;
pub mod synthworld;
pub mod tensor;
pub mod uncertainty;
pub mod warp;

pub use aggregator::{
    init_state, mc_predict, rta_alpha_map, rta_step, ta_step, AggregationPolicy, AggregatorState,
    PolicyKind, PredictiveMoments, StochasticModel, StreamAggregator,
};
pub use tensor::{ClassTensor, FlowField, ImageFrame, LabelMap, ProbMap, ScalarMap, VOID_LABEL};
pub use uncertainty::UncertaintyKind;
pub use warp::{Border, WarpConfig, WarpMode};
