//! Dense tensors, a reverse-mode tape, gradient checking, optimizers and the
//! seeded random source shared by every other module.

mod gradcheck;
mod optim;
mod parallel;
mod params;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_sampled, DEFAULT_EPS};
pub use optim::{clip_grad_norm, cosine_lr, warmup_cosine_lr, Adam, Sgd};
pub use parallel::{par_map, worker_threads};
pub use params::{Bound, ParamId, ParamStore};
pub use rng::Rng;
pub use tape::{concat, inject_fault, selective_scan, OpKind, ScanInputs, Tape, Var};
pub use tensor::{numel, Tensor};
