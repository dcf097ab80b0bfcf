//! Frequency-domain adversarial attacks and training for volumetric
//! segmentation, end to end against a small differentiable 3D CNN:
//!
//! - a frequency perturbation module (3D DCT -> learnable quantization with
//!   straight-through rounding -> inverse DCT) and the VAFA attack built on
//!   it, plus voxel-domain baselines (PGD, FGSM, BIM, Gaussian noise);
//! - adversarial training (VAFT) with an optional frequency consistency
//!   loss between clean and adversarial logits;
//! - segmentation losses and metrics (soft Dice, windowed 3D SSIM, hard
//!   DSC, HD95);
//! - a reverse-mode autodiff tape over the fixed op set the above needs;
//! - a synthetic multi-class phantom dataset generator and a minimal
//!   bit-exact volume file format.
//!
//! Everything is deterministic from explicit seeds; the crate has no
//! runtime dependencies.

pub mod attacks;
pub mod autodiff;
pub mod conv;
pub mod dct;
pub mod error;
pub mod fdcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod volfile;
pub mod volume;

pub use attacks::{attack, AttackConfig, AttackKind, AttackResult, QuantTable};
pub use autodiff::{Precision, Tape, Var};
pub use dct::DctPlan;
pub use error::{FileError, RunError, SynthError, VolumeError};
pub use losses::{dice_loss, freq_consistency_loss, ssim_loss, LossValue};
pub use metrics::{dsc, hd95, MetricsReport};
pub use model::SegModel;
pub use synth::SynthSpec;
pub use tensor::Tensor;
pub use train::{train_adv_voxel, train_standard, train_vaft, TrainConfig, TrainMode, TrainReport};
pub use volume::{merge, split, LabelField, PatchGrid, Volume};
