use rayon::prelude::*;

use super::image::{frame_file_name, read_depth_png, read_mask_png, read_rgb_png, Mask};
use super::manifest::GarmentManifest;
use super::preprocess::{preprocess_depth, preprocess_rgb};
use super::segment::{otsu_threshold, rgb_to_hsv, segment_garment, SegmentRule};
use super::Labels;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Where garment masks come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FrameSource {
    /// Use the sequence's mask directory when it has one, HSV otherwise.
    PreferMasks,
    /// Always segment the RGB frame.
    Hsv,
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub input_size: (usize, usize),
    /// 1 = depth input, 3 = RGB input.
    pub input_channels: usize,
    pub source: FrameSource,
    pub rule: SegmentRule,
}

impl LoadOptions {
    pub fn new(input_size: (usize, usize), input_channels: usize) -> Self {
        Self {
            input_size,
            input_channels,
            source: FrameSource::PreferMasks,
            rule: SegmentRule::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadedSequence {
    pub garment_id: String,
    pub sequence_index: usize,
    pub labels: Labels,
    /// One `[1, C, H, W]` tensor per frame.
    pub frames: Vec<Tensor>,
    /// Frames whose mask came out empty. Their tensors are all zero.
    pub empty_mask: Vec<bool>,
}

pub fn load_sequence(
    manifest: &GarmentManifest,
    garment_id: &str,
    sequence_index: usize,
    opts: &LoadOptions,
) -> Result<LoadedSequence> {
    let garment = manifest
        .garment(garment_id)
        .ok_or_else(|| Error::Data(format!("unknown garment '{garment_id}'")))?;
    let seq = garment.sequences.get(sequence_index).ok_or_else(|| {
        Error::Data(format!("garment '{garment_id}' has no sequence {sequence_index}"))
    })?;
    let depth_dir = manifest.resolve(&seq.depth_dir);
    let rgb_dir = manifest.resolve(&seq.rgb_dir);
    let mask_dir = match (opts.source, &seq.mask_dir) {
        (FrameSource::PreferMasks, Some(d)) => Some(manifest.resolve(d)),
        _ => None,
    };
    let rgb_needed = opts.input_channels == 3 || mask_dir.is_none();

    let mut frames = Vec::with_capacity(seq.frame_count);
    let mut empty_mask = Vec::with_capacity(seq.frame_count);
    for i in 0..seq.frame_count {
        let name = frame_file_name(i);
        let rgb = if rgb_needed { Some(read_rgb_png(&rgb_dir.join(&name))?) } else { None };
        let mask = match (&mask_dir, &rgb) {
            (Some(d), _) => read_mask_png(&d.join(&name))?,
            (None, Some(rgb)) => match segment_garment(rgb, &opts.rule) {
                Ok(m) => m,
                Err(Error::Data(_)) => Mask {
                    width: rgb.width,
                    height: rgb.height,
                    values: vec![0; rgb.width * rgb.height],
                },
                Err(e) => return Err(e),
            },
            (None, None) => unreachable!("rgb is loaded whenever there is no mask directory"),
        };
        empty_mask.push(mask.is_empty());
        let tensor = if opts.input_channels == 3 {
            preprocess_rgb(rgb.as_ref().expect("rgb loaded for rgb input"), &mask, opts.input_size)?
        } else {
            let depth = read_depth_png(&depth_dir.join(&name))?;
            preprocess_depth(&depth, &mask, opts.input_size, manifest.depth_max_range_m)?
        };
        frames.push(tensor);
    }
    Ok(LoadedSequence {
        garment_id: garment_id.to_string(),
        sequence_index,
        labels: garment.labels()?,
        frames,
        empty_mask,
    })
}

/// Every sequence of the given garments, in (garment, sequence) order.
/// Sequences are decoded in parallel.
pub fn load_sequences(manifest: &GarmentManifest, garment_ids: &[String], opts: &LoadOptions) -> Result<Vec<LoadedSequence>> {
    let mut jobs = Vec::new();
    for id in garment_ids {
        let g = manifest
            .garment(id)
            .ok_or_else(|| Error::Data(format!("unknown garment '{id}'")))?;
        jobs.extend((0..g.sequences.len()).map(|s| (id.as_str(), s)));
    }
    jobs.par_iter()
        .map(|&(id, s)| load_sequence(manifest, id, s, opts))
        .collect()
}

/// Otsu threshold on the V channel of the first frame of every sequence.
pub fn calibrate_v_threshold(manifest: &GarmentManifest) -> Result<f64> {
    let mut values = Vec::new();
    for seq in manifest.garments.iter().flat_map(|g| &g.sequences) {
        let rgb = read_rgb_png(&manifest.resolve(&seq.rgb_dir).join(frame_file_name(0)))?;
        values.extend(rgb.pixels.chunks_exact(3).map(|p| rgb_to_hsv([p[0], p[1], p[2]]).2));
    }
    if values.is_empty() {
        return Err(Error::Data("no frames to calibrate the segmentation threshold on".into()));
    }
    Ok(otsu_threshold(values))
}
