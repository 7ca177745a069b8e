//! Dataset manifest, frame IO, segmentation, preprocessing, windows and folds.

mod folds;
pub mod image;
mod loader;
mod manifest;
mod preprocess;
mod segment;
mod windows;

use serde::{Deserialize, Serialize};

pub use folds::{leave_one_out_folds, FoldSplit};
pub use loader::{calibrate_v_threshold, load_sequence, load_sequences, FrameSource, LoadOptions, LoadedSequence};
pub use manifest::{GarmentEntry, GarmentManifest, SequenceEntry, MANIFEST_FORMAT};
pub use preprocess::{preprocess_depth, preprocess_rgb, resize_bilinear, DEFAULT_DEPTH_MAX_RANGE_M};
pub use segment::{otsu_threshold, rgb_to_hsv, segment_garment, SegmentRule, DEFAULT_V_THRESHOLD};
pub use windows::{make_windows, window_count, SequenceWindow};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Pant,
    Shirt,
    Sweater,
    Towel,
    Tshirt,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 5] = [
        ShapeClass::Pant,
        ShapeClass::Shirt,
        ShapeClass::Sweater,
        ShapeClass::Towel,
        ShapeClass::Tshirt,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Pant => "pant",
            ShapeClass::Shirt => "shirt",
            ShapeClass::Sweater => "sweater",
            ShapeClass::Towel => "towel",
            ShapeClass::Tshirt => "tshirt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightClass {
    Light,
    Medium,
    Heavy,
}

impl WeightClass {
    pub const ALL: [WeightClass; 3] = [WeightClass::Light, WeightClass::Medium, WeightClass::Heavy];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            WeightClass::Light => "light",
            WeightClass::Medium => "medium",
            WeightClass::Heavy => "heavy",
        }
    }
}

pub const LIGHT_BELOW_GRAMS: f64 = 180.0;
pub const HEAVY_ABOVE_GRAMS: f64 = 300.0;

/// Light below 180 g, heavy above 300 g, medium in between with both
/// boundaries included.
pub fn weight_bin(mass_grams: f64) -> Result<WeightClass> {
    if !(mass_grams > 0.0) || !mass_grams.is_finite() {
        return Err(Error::Data(format!("garment mass must be positive, got {mass_grams} g")));
    }
    Ok(if mass_grams < LIGHT_BELOW_GRAMS {
        WeightClass::Light
    } else if mass_grams <= HEAVY_ABOVE_GRAMS {
        WeightClass::Medium
    } else {
        WeightClass::Heavy
    })
}

/// Shape and weight labels of one garment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labels {
    pub shape: ShapeClass,
    pub weight: WeightClass,
}
