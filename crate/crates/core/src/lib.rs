//! Semantic out-of-distribution detection across domains.
//!
//! A predictor is trained on several synthetic source domains with two
//! regularizers: feature invariance under a pretrained semantic/variation
//! transformation model, and an energy margin separating training inputs from
//! pseudo-outliers synthesized by mixing semantic factors of different
//! classes. Detectors (MSP, energy, feature-density) are then scored by AUROC
//! on unseen domains that also contain novel classes.

pub mod datagen;
pub mod detect;
pub mod gda;
pub mod gmodel;
pub mod harness;
pub mod numcore;
pub mod rng;
pub mod training;
