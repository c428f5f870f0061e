//! SGD with momentum and weight decay, and the cosine / plateau-step schedules.

mod schedule;
mod sgd;

pub use schedule::{
    cosine_lr, plateau_step, PlateauConfig, ScheduleEvents, ScheduleState, SchedulerKind,
};
pub use sgd::{sgd_step, FreezeMask, SgdConfig, SgdState};
