//! Interfaces to target networks: activation recording for dissection and
//! classification with unit ablation for analysis and editing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Grid, RgbImage};
use crate::neuron::{UnitId, UnitSet};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub id: String,
    pub channels: usize,
}

/// A network whose intermediate channels can be read out per image.
pub trait ActivationSource: Sync {
    fn model_id(&self) -> &str;

    /// Square input side length the network expects.
    fn input_size(&self) -> usize;

    fn layers(&self) -> Vec<LayerInfo>;

    /// One spatial map per channel of `layer`, in model-native units.
    fn activations(&self, layer: &str, image: &RgbImage) -> Result<Vec<Grid>>;

    fn layer_info(&self, layer: &str) -> Result<LayerInfo> {
        self.layers()
            .into_iter()
            .find(|l| l.id == layer)
            .ok_or_else(|| Error::Config(format!("model {} has no layer {layer}", self.model_id())))
    }
}

/// A classifier whose unit outputs can be zeroed at inference time.
pub trait Classifier: Sync {
    fn model_id(&self) -> &str;

    /// Layers whose channels may be ablated.
    fn ablatable_layers(&self) -> Vec<LayerInfo>;

    /// Predicted class per image with every unit in `ablated` zeroed.
    fn predict(&self, images: &[RgbImage], ablated: &UnitSet) -> Result<Vec<usize>>;

    fn validate_units(&self, units: &UnitSet) -> Result<()> {
        let layers = self.ablatable_layers();
        for u in units {
            let ok = layers.iter().any(|l| l.id == u.layer && u.unit < l.channels);
            if !ok {
                return Err(Error::Argument(format!("unknown unit {u} in model {}", self.model_id())));
            }
        }
        Ok(())
    }

    fn all_units(&self) -> Vec<UnitId> {
        self.ablatable_layers()
            .iter()
            .flat_map(|l| (0..l.channels).map(move |c| UnitId::new(l.id.clone(), c)))
            .collect()
    }
}

/// Images with integer class labels.
#[derive(Debug, Clone, Default)]
pub struct LabeledSet {
    pub images: Vec<RgbImage>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, image: RgbImage, label: usize) {
        self.images.push(image);
        self.labels.push(label);
    }
}

/// Fraction of `set` classified correctly under the given ablation.
pub fn accuracy<C: Classifier + ?Sized>(model: &C, set: &LabeledSet, ablated: &UnitSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Argument("empty evaluation set".into()));
    }
    let preds = model.predict(&set.images, ablated)?;
    let correct = preds.iter().zip(&set.labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / set.len() as f64)
}
