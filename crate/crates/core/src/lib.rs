//! Natural-language descriptions of neurons in vision models.
//!
//! The pipeline records unit activations over a probe dataset, extracts
//! top-activating exemplars with masks, pools backbone features under those
//! masks, and searches for the description that maximizes weighted pointwise
//! mutual information between a conditional captioner and a language prior.

pub mod analyze;
pub mod audit;
pub mod bleu;
pub mod captioner;
pub mod cnn;
pub mod corpus;
pub mod describe;
pub mod dissect;
pub mod edit;
pub mod error;
pub mod experiment;
pub mod featpool;
pub mod image;
pub mod keywords;
pub mod language;
pub mod lm;
pub mod model;
pub mod neuron;
pub mod nn;
pub mod sketch;
pub mod synth;
pub mod text;
pub mod world;

pub use error::{Error, Result};
pub use image::{Grid, Mask, RgbImage};
pub use model::{ActivationSource, Classifier, LabeledSet, LayerInfo};
pub use neuron::{NeuronRef, UnitId, UnitSet};
