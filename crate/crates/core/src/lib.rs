//! Numerical kernels for few-annotation learning.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense matrices, 3-way tensors, one-sided Jacobi SVD, softmax,
//!   Kronecker and n-mode products, and a central finite-difference oracle.
//! - [`spectral`]: condition number and singular-value entropy of predictor
//!   matrices, with analytic gradients.
//! - [`geometry`]: boxes in normalized `(cx, cy, w, h)` form, IoU / gIoU and NMS.
//! - [`matching`]: Hungarian solver and the composite set-prediction matching costs.
//! - [`losses`]: prototypical, focal, contrastive (InfoNCE, SCE, LocSCE, LocNCE),
//!   soft cross-entropy and DETR-style composite losses, each with gradients.
//! - [`meta`]: synthetic episodic tasks, ProtoNet trainers, the linear MAML
//!   simulator, the two-representation construction, IMP and Meta-Curvature.
//! - [`teachstudent`]: EMA teachers, synthetic detection scenes, a linear
//!   set-prediction detector, and the contrastive pretraining / semi-supervised loops.
//! - [`rng`]: counter-based splittable random streams shared by everything above.

pub mod error;
pub mod geometry;
pub mod losses;
pub mod matching;
pub mod meta;
pub mod numerics;
pub mod rng;
pub mod spectral;
pub mod teachstudent;

pub use error::{Error, Result};
