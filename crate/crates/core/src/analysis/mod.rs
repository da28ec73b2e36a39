//! Cost models, mixer timing and the teacher-fit harness.

pub mod bench;
pub mod fit;
pub mod flops;

pub use bench::{scaling_bench, BenchArch, BenchConfig, ScalingReport};
pub use flops::{flops_model, Arch, CostReport, MixerArch};
pub use fit::{teacher_fit, teacher_fit_seeds, FitConfig, FitResult, Protocol, StudentArch, TeacherConfig};
