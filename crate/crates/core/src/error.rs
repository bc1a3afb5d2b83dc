use thiserror::Error;

use crate::causal_diff::NodeId;
use crate::learner::TraceRow;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("graph contains a cycle through nodes {}", format_cycle(.cycle))]
    Cycle { cycle: Vec<NodeId> },

    #[error("optimization diverged at outer iteration {outer}, inner iteration {inner}")]
    Divergence {
        outer: usize,
        inner: usize,
        trace: Vec<TraceRow>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn format_cycle(cycle: &[NodeId]) -> String {
    cycle
        .iter()
        .map(|id| id.0.to_string())
        .collect::<Vec<_>>()
        .join(" -> ")
}
