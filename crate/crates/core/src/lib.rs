//! One-step diffusion voice conversion: a multi-step teacher, reconstruction
//! and conversion distillation into a one-step student, evaluation on a
//! synthetic multi-speaker corpus and an RTF benchmark.

pub mod data;
pub mod diffusion;
pub mod distill;
pub mod error;
pub mod eval;
pub mod inference;
pub mod io;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use diffusion::{make_schedule, DiffusedSample, NoiseSchedule, ScheduleKind, ScheduleSpec};
pub use error::{Error, Result};
pub use rng::SeededRng;
pub use tensor::Tensor;
