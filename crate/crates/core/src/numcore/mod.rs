//! Dense tensors, reverse-mode autodiff, AdamW, and schedules.

mod graph;
mod optim;
mod schedule;
mod tensor;

pub use graph::{Gradients, Graph, ParamId, ParamStore, Var};
pub use optim::AdamW;
pub use schedule::{Schedule, ScheduleKind};
pub use tensor::{cosine, dot, l2, log_sigmoid, sigmoid, Tensor};
