//! Synthetic grasp-lift-drop recordings from a mass-spring cloth model,
//! written in the same layout the data pipeline reads.

mod render;
mod sim;
mod template;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use render::{render_depth, render_views, surface_buffer, Camera, Surface, BACKDROP_RGB, MAX_TILT_DEG};
pub use sim::{
    energy, landing_frame, simulate_drop, DropSchedule, Energy, Grasp, Integrator, SimState, EXPLOSION_LIMIT_M,
    GRAVITY, DEFAULT_LIFT_FRACTION, DEFAULT_RELEASE_FRACTION,
};
pub use template::{
    point_in_polygon, silhouette, Cloth, ClothTemplate, Spring, DEFAULT_DAMPING, DEFAULT_DRAG, DEFAULT_SPACING_M,
    DEFAULT_STIFFNESS,
};

use crate::data::image::{frame_file_name, write_depth_png, write_mask_png, write_rgb_png};
use crate::data::{
    weight_bin, GarmentEntry, GarmentManifest, SequenceEntry, ShapeClass, WeightClass, DEFAULT_DEPTH_MAX_RANGE_M,
    MANIFEST_FORMAT,
};
use crate::error::{Error, Result};

/// Dataset layout and simulation constants. Serializable so a spec file can
/// override any field of a named base spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub garments_per_class: usize,
    pub sequences_per_garment: usize,
    pub frames_per_sequence: usize,
    pub fps: f64,
    pub substeps: usize,
    pub camera: CameraSpec,
    pub stiffness: f64,
    pub damping: f64,
    pub drag: f64,
    /// Fraction of the recording spent lifting, and the point at which the
    /// grasp lets go.
    pub lift_fraction: f64,
    pub release_fraction: f64,
    /// Each sequence lays the garment out rotated by up to this many
    /// degrees either way.
    pub max_rotation_deg: f64,
    /// Grasp points are drawn from particles within this distance of the
    /// garment centre; anywhere on the garment when absent.
    pub grasp_radius_m: Option<f64>,
    /// Stiffness multiplier for garments in the heavy bin.
    pub heavy_stiffness_scale: f64,
    /// Check before generating that heavier garments land sooner.
    pub verify_fall_ordering: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub height_m: f64,
    pub extent_m: f64,
    pub width_px: usize,
    pub height_px: usize,
    pub tilt_deg: f64,
}

impl From<CameraSpec> for Camera {
    fn from(c: CameraSpec) -> Self {
        Camera {
            height_m: c.height_m,
            extent_m: c.extent_m,
            width_px: c.width_px,
            height_px: c.height_px,
            tilt_deg: c.tilt_deg,
        }
    }
}

impl DatasetSpec {
    /// 5 classes x 2 garments x 6 sequences x 40 frames, 96x96 pixels.
    pub fn toy() -> Self {
        Self {
            name: "toy".into(),
            garments_per_class: 2,
            sequences_per_garment: 6,
            frames_per_sequence: 40,
            fps: 30.0,
            substeps: 32,
            camera: CameraSpec {
                height_m: 1.5,
                extent_m: 2.0,
                width_px: 96,
                height_px: 96,
                tilt_deg: 0.0,
            },
            stiffness: DEFAULT_STIFFNESS,
            damping: DEFAULT_DAMPING,
            drag: DEFAULT_DRAG,
            lift_fraction: DEFAULT_LIFT_FRACTION,
            release_fraction: DEFAULT_RELEASE_FRACTION,
            max_rotation_deg: 0.0,
            grasp_radius_m: None,
            heavy_stiffness_scale: 1.25,
            verify_fall_ordering: true,
        }
    }

    /// 5 classes x 4 garments x 10 sequences x 200 frames at 680x480.
    pub fn paper() -> Self {
        Self {
            name: "paper".into(),
            garments_per_class: 4,
            sequences_per_garment: 10,
            frames_per_sequence: 200,
            camera: CameraSpec {
                height_m: 1.5,
                extent_m: 2.4,
                width_px: 680,
                height_px: 480,
                tilt_deg: 0.0,
            },
            ..Self::toy()
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown dataset spec '{other}' (expected toy or paper)"))),
        }
    }

    /// TOML file with a `base` key naming a built-in spec; every other key
    /// overrides the field of the same name.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg_err = |e: String| Error::Config(format!("{}: {e}", path.display()));
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| cfg_err(e.to_string()))?;
        let base = match table.remove("base") {
            Some(toml::Value::String(s)) => s,
            _ => return Err(cfg_err("missing string key 'base'".into())),
        };
        let spec = Self::by_name(&base)?;
        let mut merged = toml::Table::try_from(&spec).map_err(|e| cfg_err(e.to_string()))?;
        for (k, v) in table {
            match (merged.get_mut(&k), v) {
                (Some(toml::Value::Table(dst)), toml::Value::Table(src)) => dst.extend(src),
                (_, v) => {
                    merged.insert(k, v);
                }
            }
        }
        let spec: Self = merged.try_into().map_err(|e: toml::de::Error| cfg_err(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Sets one field from text. Camera fields are addressed as
    /// `camera.<field>`; values are parsed as TOML, falling back to a
    /// plain string.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |e: String| Error::Config(format!("data.{key}: {e}"));
        let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let mut table = toml::Table::try_from(&*self).map_err(|e| bad(e.to_string()))?;
        let (slot, field) = match key.split_once('.') {
            Some(("camera", field)) => match table.get_mut("camera") {
                Some(toml::Value::Table(cam)) => (cam, field),
                _ => unreachable!("camera serializes as a table"),
            },
            Some(_) => return Err(Error::Config(format!("unknown data key '{key}'"))),
            None => (&mut table, key),
        };
        if field == "grasp_radius_m" && value == "none" {
            slot.remove(field);
        } else if slot.contains_key(field) || field == "grasp_radius_m" {
            slot.insert(field.to_string(), parsed);
        } else {
            return Err(Error::Config(format!("unknown data key '{key}'")));
        }
        let spec: Self = table.try_into().map_err(|e: toml::de::Error| bad(e.to_string()))?;
        spec.validate()?;
        *self = spec;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.garments_per_class == 0 || self.sequences_per_garment == 0 {
            return Err(Error::Config("dataset spec needs at least one garment and sequence".into()));
        }
        self.schedule()?;
        Camera::from(self.camera).validate()?;
        if !(self.heavy_stiffness_scale > 0.0) {
            return Err(Error::Config("heavy_stiffness_scale must be positive".into()));
        }
        if !(0.0..=180.0).contains(&self.max_rotation_deg) {
            return Err(Error::Config(format!(
                "max_rotation_deg must lie in [0, 180], got {}",
                self.max_rotation_deg
            )));
        }
        if let Some(r) = self.grasp_radius_m {
            if !(r >= 0.0) {
                return Err(Error::Config(format!("grasp_radius_m must be non-negative, got {r}")));
            }
        }
        Ok(())
    }

    pub fn total_frames(&self) -> usize {
        ShapeClass::ALL.len() * self.garments_per_class * self.sequences_per_garment * self.frames_per_sequence
    }

    pub fn schedule(&self) -> Result<DropSchedule> {
        DropSchedule::with_phases(
            self.frames_per_sequence,
            self.fps,
            self.substeps,
            self.lift_fraction,
            self.release_fraction,
        )
    }
}

/// Mass range in grams for each class. T-shirts are always light, towels
/// medium and sweaters heavy, so every weight bin is populated.
pub fn mass_range(class: ShapeClass) -> (f64, f64) {
    match class {
        ShapeClass::Tshirt => (100.0, 175.0),
        ShapeClass::Shirt => (150.0, 290.0),
        ShapeClass::Towel => (190.0, 290.0),
        ShapeClass::Pant => (260.0, 460.0),
        ShapeClass::Sweater => (320.0, 520.0),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GarmentPlan {
    pub id: String,
    pub template: ClothTemplate,
    pub colour: [u8; 3],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequencePlan {
    pub garment: usize,
    pub sequence: usize,
    pub angle: f64,
    pub offset: [f64; 2],
    pub grasp_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPlan {
    pub manifest: GarmentManifest,
    pub garments: Vec<GarmentPlan>,
    pub sequences: Vec<SequencePlan>,
}

fn garment_colour(rng: &mut ChaCha8Rng) -> [u8; 3] {
    // anything but green: hue in [170, 430) degrees, wrapped
    let hue = rng.random_range(170.0..430.0_f64) % 360.0;
    let s = rng.random_range(0.3..0.7);
    let v = rng.random_range(0.6..0.8);
    let c = v * s;
    let x = c * (1.0 - ((hue / 60.0) % 2.0 - 1.0).abs());
    let (r, g, b) = match (hue / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|ch| ((ch + m) * 255.0).round() as u8)
}

fn rel_dirs(id: &str, seq: usize) -> (String, String, String) {
    let base = format!("{id}/seq_{seq:02}");
    (format!("{base}/depth"), format!("{base}/rgb"), format!("{base}/mask"))
}

/// Every random choice of a dataset, without simulating anything.
pub fn plan_dataset(spec: &DatasetSpec, seed: u64) -> Result<DatasetPlan> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_angle = spec.max_rotation_deg.to_radians();
    let mut garments = Vec::new();
    let mut sequences = Vec::new();
    let mut entries = Vec::new();
    for class in ShapeClass::ALL {
        let (lo, hi) = mass_range(class);
        for g in 0..spec.garments_per_class {
            let mass = rng.random_range(lo..hi);
            let scale = rng.random_range(0.9..1.1);
            let colour = garment_colour(&mut rng);
            let mut template = ClothTemplate::new(class, mass).scaled(scale);
            template.stiffness = spec.stiffness;
            template.damping = spec.damping;
            template.drag = spec.drag;
            if weight_bin(mass)? == WeightClass::Heavy {
                template.stiffness *= spec.heavy_stiffness_scale;
            }
            let id = format!("{}-{}", class.name(), g + 1);
            let mut seq_entries = Vec::new();
            for s in 0..spec.sequences_per_garment {
                sequences.push(SequencePlan {
                    garment: garments.len(),
                    sequence: s,
                    angle: rng.random_range(-max_angle..=max_angle),
                    offset: [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)],
                    grasp_seed: rng.random(),
                });
                let (depth_dir, rgb_dir, mask_dir) = rel_dirs(&id, s);
                seq_entries.push(SequenceEntry {
                    frame_count: spec.frames_per_sequence,
                    fps: spec.fps,
                    depth_dir,
                    rgb_dir,
                    mask_dir: Some(mask_dir),
                });
            }
            entries.push(GarmentEntry {
                id: id.clone(),
                shape_class: class,
                mass_grams: (mass * 10.0).round() / 10.0,
                sequences: seq_entries,
            });
            garments.push(GarmentPlan { id, template, colour });
        }
    }
    let manifest = GarmentManifest {
        format: MANIFEST_FORMAT.into(),
        depth_max_range_m: DEFAULT_DEPTH_MAX_RANGE_M,
        garments: entries,
        root: Default::default(),
    };
    manifest.validate()?;
    Ok(DatasetPlan {
        manifest,
        garments,
        sequences,
    })
}

/// Simulates one planned sequence.
pub fn simulate_sequence(spec: &DatasetSpec, garment: &GarmentPlan, seq: &SequencePlan) -> Result<(Cloth, Vec<SimState>)> {
    let cloth = Cloth::from_template(&garment.template, seq.angle, seq.offset)?;
    let schedule = spec.schedule()?;
    let frames = simulate_drop(&cloth, &schedule, Grasp::random_within(&cloth, seq.grasp_seed, spec.grasp_radius_m), garment.template.stiffness)?;
    Ok((cloth, frames))
}

/// Light and heavy versions of every class template, same stiffness, same
/// grasp: the heavy one must land in strictly fewer frames after release.
/// Returns (class, light landing frame, heavy landing frame) per class.
pub fn check_fall_ordering(spec: &DatasetSpec) -> Result<Vec<(ShapeClass, usize, usize)>> {
    let schedule = spec.schedule()?;
    let mut out = Vec::new();
    for class in ShapeClass::ALL {
        let land = |mass: f64| -> Result<usize> {
            let mut t = ClothTemplate::new(class, mass);
            t.stiffness = spec.stiffness;
            t.damping = spec.damping;
            t.drag = spec.drag;
            let cloth = Cloth::from_template(&t, 0.0, [0.0; 2])?;
            let grasp = Grasp {
                particle: 0,
                height: 0.5,
            };
            let frames = simulate_drop(&cloth, &schedule, grasp, t.stiffness)?;
            landing_frame(&frames, schedule.release, LANDING_FRACTION).ok_or_else(|| {
                Error::Simulation(format!("{} template of {mass} g never landed", class.name()))
            })
        };
        let (light, heavy) = (land(120.0)?, land(450.0)?);
        if heavy >= light {
            return Err(Error::Simulation(format!(
                "{}: heavy garment landed at frame {heavy}, light at {light}; mass has no visible effect",
                class.name()
            )));
        }
        out.push((class, light, heavy));
    }
    Ok(out)
}

/// Landed once the centroid is at a quarter of its height at release.
pub const LANDING_FRACTION: f64 = 0.25;

/// Simulates, renders and writes a whole dataset; returns its manifest.
pub fn generate_dataset(spec: &DatasetSpec, out_dir: &Path, seed: u64) -> Result<GarmentManifest> {
    let plan = plan_dataset(spec, seed)?;
    if spec.verify_fall_ordering {
        check_fall_ordering(spec)?;
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let camera = Camera::from(spec.camera);
    plan.sequences.par_iter().try_for_each(|seq| -> Result<()> {
        let garment = &plan.garments[seq.garment];
        let (cloth, frames) = simulate_sequence(spec, garment, seq)?;
        let (depth_dir, rgb_dir, mask_dir) = rel_dirs(&garment.id, seq.sequence);
        let dirs = [depth_dir, rgb_dir, mask_dir].map(|d| out_dir.join(d));
        for d in &dirs {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        for (i, state) in frames.iter().enumerate() {
            let (depth, rgb, mask) = render_views(&cloth, state, &camera, garment.colour)?;
            let name = frame_file_name(i);
            write_depth_png(&dirs[0].join(&name), &depth)?;
            write_rgb_png(&dirs[1].join(&name), &rgb)?;
            write_mask_png(&dirs[2].join(&name), &mask)?;
        }
        Ok(())
    })?;
    let mut manifest = plan.manifest;
    manifest.save(&out_dir.join("manifest.json"))?;
    manifest.root = out_dir.to_path_buf();
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_layout_counts() {
        let spec = DatasetSpec::paper();
        assert_eq!(spec.total_frames(), 40_000);
        let plan = plan_dataset(&spec, 1).unwrap();
        assert_eq!(plan.manifest.garments.len(), 20);
        assert_eq!(plan.manifest.total_frames(), 40_000);
        assert_eq!(plan.sequences.len(), 200);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let mut spec = DatasetSpec::toy();
        spec.apply_override("frames_per_sequence", "60").unwrap();
        spec.apply_override("camera.tilt_deg", "30").unwrap();
        spec.apply_override("grasp_radius_m", "0.1").unwrap();
        assert_eq!((spec.frames_per_sequence, spec.camera.tilt_deg, spec.grasp_radius_m), (60, 30.0, Some(0.1)));
        spec.apply_override("grasp_radius_m", "none").unwrap();
        assert_eq!(spec.grasp_radius_m, None);
        assert!(spec.apply_override("bogus", "1").is_err());
        assert!(spec.apply_override("camera.tilt_deg", "80").is_err());
        assert!(spec.apply_override("grasp_radius_m", "-1").is_err());
        assert_eq!(spec.camera.tilt_deg, 30.0);
    }

    #[test]
    fn all_weight_bins_present() {
        let plan = plan_dataset(&DatasetSpec::toy(), 7).unwrap();
        let mut bins: Vec<WeightClass> = plan.manifest.garments.iter().map(|g| g.labels().unwrap().weight).collect();
        bins.sort();
        bins.dedup();
        assert_eq!(bins, WeightClass::ALL.to_vec());
        assert_eq!(weight_bin(120.0).unwrap(), WeightClass::Light);
        assert_eq!(weight_bin(250.0).unwrap(), WeightClass::Medium);
        assert_eq!(weight_bin(400.0).unwrap(), WeightClass::Heavy);
    }

    #[test]
    fn colours_are_not_backdrop() {
        let rule = crate::data::SegmentRule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            let c = garment_colour(&mut rng);
            assert!(!rule.is_background(c), "{c:?}");
            // shading never darkens by more than 15%
            assert!(!rule.is_background(c.map(|v| (v as f64 * 0.85).round() as u8)));
        }
        assert!(rule.is_background(BACKDROP_RGB));
    }

    #[test]
    fn heavier_garments_land_sooner() {
        for (class, light, heavy) in check_fall_ordering(&DatasetSpec::toy()).unwrap() {
            assert!(heavy < light, "{class:?}");
        }
    }

    #[test]
    fn spec_file_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("spec.toml");
        std::fs::write(&p, "base = \"toy\"\nframes_per_sequence = 12\n[camera]\nwidth_px = 32\n").unwrap();
        let spec = DatasetSpec::from_file(&p).unwrap();
        assert_eq!(spec.frames_per_sequence, 12);
        assert_eq!(spec.camera.width_px, 32);
        assert_eq!(spec.camera.height_px, 96);
        std::fs::write(&p, "base = \"toy\"\nbogus = 1\n").unwrap();
        assert!(DatasetSpec::from_file(&p).is_err());
    }
}
