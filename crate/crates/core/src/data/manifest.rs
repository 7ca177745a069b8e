use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{weight_bin, Labels, ShapeClass};
use crate::error::{Error, Result};

pub const MANIFEST_FORMAT: &str = "dp-garments/1";

/// One recorded (or simulated) grasp-lift-drop video. Directory paths are
/// relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub frame_count: usize,
    pub fps: f64,
    pub depth_dir: String,
    pub rgb_dir: String,
    /// Exact garment masks, when the source provides them. Without one the
    /// mask is recovered from the RGB frame by HSV segmentation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_dir: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GarmentEntry {
    pub id: String,
    pub shape_class: ShapeClass,
    pub mass_grams: f64,
    pub sequences: Vec<SequenceEntry>,
}

impl GarmentEntry {
    pub fn labels(&self) -> Result<Labels> {
        Ok(Labels {
            shape: self.shape_class,
            weight: weight_bin(self.mass_grams)?,
        })
    }
}

/// Dataset index: garments, their labels and their video sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GarmentManifest {
    pub format: String,
    /// Depth PNG values are millimetres; this is the range mapped onto 1.0.
    pub depth_max_range_m: f64,
    pub garments: Vec<GarmentEntry>,
    /// Directory the relative paths resolve against. Not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

impl GarmentManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile {
                context: "manifest not found".into(),
                path: path.to_path_buf(),
            },
            _ => Error::io(path, e),
        })?;
        let mut manifest: GarmentManifest =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != MANIFEST_FORMAT {
            return Err(Error::Data(format!("unsupported manifest format '{}'", self.format)));
        }
        if !(self.depth_max_range_m > 0.0) {
            return Err(Error::Data("depth_max_range_m must be positive".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for g in &self.garments {
            if !seen.insert(&g.id) {
                return Err(Error::Data(format!("duplicate garment id '{}'", g.id)));
            }
            weight_bin(g.mass_grams).map_err(|e| Error::Data(format!("garment '{}': {e}", g.id)))?;
            for s in &g.sequences {
                if s.frame_count == 0 || !(s.fps > 0.0) {
                    return Err(Error::Data(format!("garment '{}': empty sequence or bad fps", g.id)));
                }
            }
        }
        Ok(())
    }

    pub fn garment(&self, id: &str) -> Option<&GarmentEntry> {
        self.garments.iter().find(|g| g.id == id)
    }

    /// Garments grouped by class, each group in manifest order.
    pub fn by_class(&self) -> BTreeMap<ShapeClass, Vec<&GarmentEntry>> {
        let mut groups: BTreeMap<ShapeClass, Vec<&GarmentEntry>> = BTreeMap::new();
        for g in &self.garments {
            groups.entry(g.shape_class).or_default().push(g);
        }
        groups
    }

    pub fn total_frames(&self) -> usize {
        self.garments
            .iter()
            .flat_map(|g| &g.sequences)
            .map(|s| s.frame_count)
            .sum()
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}
