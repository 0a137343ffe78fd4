//! Unfolding: schedule rules and variable-depth execution over a fixed set
//! of physical layers.

pub(crate) mod encoder;
mod schedule;

pub use encoder::{EncoderOutput, FoldableEncoder, InputKind, ModelConfig};
pub use schedule::{
    count_schedules, default_schedule, enumerate_schedules, supported_depths, validate_schedule,
    FoldMask, ScheduleViolation, UnfoldSchedule,
};
