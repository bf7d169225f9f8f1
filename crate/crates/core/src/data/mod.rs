//! Feature sequences: the synthetic generator, the `CHAMFEAT` binary format
//! and CSV manifests that group files into train and test splits.

mod featfile;
mod manifest;
mod synth;

pub use featfile::{decode_features, encode_features, read_features, write_features, FEATURE_HEADER_LEN, FEATURE_MAGIC, FEATURE_VERSION};
pub use manifest::{load_manifest, write_manifest, Dataset, Manifest, ManifestRecord, Split};
pub use synth::{generate_dataset, generate_sequence, SequenceShape, NOISE_STD, SYNTH_CLASSES};

use crate::error::{Error, Result};
use crate::tensor::{Shape3, Tensor3};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub frames: Vec<Tensor3>,
    pub label: usize,
    pub id: String,
}

impl FeatureSequence {
    pub fn new(frames: Vec<Tensor3>, label: usize, id: impl Into<String>) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::Invalid("a feature sequence needs at least one frame".into()));
        };
        let shape = first.shape();
        for (t, f) in frames.iter().enumerate() {
            if f.shape() != shape {
                return Err(Error::shape(
                    "FeatureSequence::new",
                    format!("frame {t} shaped {shape}"),
                    f.shape(),
                ));
            }
        }
        Ok(FeatureSequence {
            frames,
            label,
            id: id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_shape(&self) -> Shape3 {
        self.frames[0].shape()
    }

    pub fn shape(&self) -> SequenceShape {
        let Shape3(h, w, d) = self.frame_shape();
        SequenceShape {
            frames: self.len(),
            height: h,
            width: w,
            channels: d,
        }
    }
}
