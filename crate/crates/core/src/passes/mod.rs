//! Backend planning passes: fusion, parallel scheduling, lifetime memory
//! allocation, and training-time memory planning.

pub mod backprop;
pub mod fusion;
pub mod memory;
pub mod schedule;
pub mod training_plan;

pub use fusion::{fuse, FusionGroup, FusionRule};
pub use memory::{allocate_memory, MemoryLayout};
pub use schedule::{list_schedule, schedule_parallel, ParallelSchedule};
pub use training_plan::{plan_training_memory, TensorAction, TrainingMemoryPlan};
