//! Continuous integrate-and-fire: per-step weight prediction, the
//! threshold accumulator, and the frame-synchronous model built on them.

mod fire;
mod model;

pub use fire::{
    firing_plan, integrate, integrate_and_fire, integrate_and_fire_graph, scale_weights,
    scale_weights_graph, write_alignment, FiringPlan, Piece, ResidualPolicy, FIRE_TOLERANCE,
    THRESHOLD,
};
pub(crate) use model::{argmax_label, teacher_inputs};
pub use model::{CifDecoderCache, CifGraph, CifModel, CifOutput};
