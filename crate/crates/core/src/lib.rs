//! Iterative visual-evidence augmentation for weakly-supervised lesion
//! localization.
//!
//! The crate covers the whole pipeline: a small reverse-mode autodiff
//! engine for convolutional regressors, visual attribution (saliency,
//! guided backprop, integrated gradients, Grad-CAM and guided Grad-CAM),
//! fundus-style preprocessing, Otsu binarization and diffusion inpainting,
//! the iterative evidence-augmentation loop, a synthetic phantom generator
//! with exact lesion masks, and ROC/kappa/FROC evaluation.

pub mod autodiff;
pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Dtype, Element, Tensor};
