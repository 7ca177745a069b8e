use super::Labels;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Three consecutive preprocessed frames starting at `start`, plus the
/// frame that follows them when a prediction target is wanted.
#[derive(Debug, Clone)]
pub struct SequenceWindow {
    pub start: usize,
    pub frames: [Tensor; 3],
    pub target_index: Option<usize>,
    pub target: Option<Tensor>,
    pub labels: Labels,
}

impl SequenceWindow {
    pub fn frame_indices(&self) -> [usize; 3] {
        [self.start, self.start + 1, self.start + 2]
    }
}

/// Stride-1 window count for a sequence of `frame_count` frames.
pub fn window_count(frame_count: usize, with_target: bool) -> Result<usize> {
    let span = if with_target { 4 } else { 3 };
    if frame_count < span {
        return Err(Error::Data(format!(
            "sequence of {frame_count} frames is too short for {span}-frame windows"
        )));
    }
    Ok(frame_count - span + 1)
}

/// All stride-1 windows of one sequence. Tensors are shared, not copied.
pub fn make_windows(frames: &[Tensor], labels: Labels, with_target: bool) -> Result<Vec<SequenceWindow>> {
    let n = window_count(frames.len(), with_target)?;
    Ok((0..n)
        .map(|t| SequenceWindow {
            start: t,
            frames: [frames[t].clone(), frames[t + 1].clone(), frames[t + 2].clone()],
            target_index: with_target.then_some(t + 3),
            target: with_target.then(|| frames[t + 3].clone()),
            labels,
        })
        .collect())
}
