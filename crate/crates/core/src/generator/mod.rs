//! Ancestral sampling and cohort-composition planning.

mod plan;
mod sample;

pub use plan::{apportion, plan_composition, CompositionPlan, PlanCell, PlanMode};
pub use sample::{synthesize_cohort, SampleNoise, SequenceGenerator};
pub(crate) use sample::to_record;
