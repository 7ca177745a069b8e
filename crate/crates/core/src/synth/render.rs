//! Orthographic z-buffer rendering of the cloth mesh.

use super::sim::SimState;
use super::template::Cloth;
use crate::data::image::{DepthFrame, Mask, RgbFrame};
use crate::error::{Error, Result};

/// Orthographic camera looking down at the origin, tilted by `tilt_deg`
/// from vertical so that it also looks along +y. At tilt 0 it looks
/// straight down from `height_m`. Depth is measured along the view
/// direction from a plane `height_m` before the origin. `extent_m` is the
/// image width in metres; pixels are square.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub height_m: f64,
    pub extent_m: f64,
    pub width_px: usize,
    pub height_px: usize,
    pub tilt_deg: f64,
}

pub const BACKDROP_RGB: [u8; 3] = [30, 90, 40];
pub const MAX_TILT_DEG: f64 = 75.0;

/// Nearest cloth surface at one pixel: its nearness to the camera along the
/// view axis and its height above ground.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Surface {
    pub nearness: f64,
    pub z: f64,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.height_m > 0.0) || !(self.extent_m > 0.0) || self.width_px == 0 || self.height_px == 0 {
            return Err(Error::Config(format!("degenerate camera {self:?}")));
        }
        if !(0.0..=MAX_TILT_DEG).contains(&self.tilt_deg) {
            return Err(Error::Config(format!(
                "camera tilt must lie in [0, {MAX_TILT_DEG}] degrees, got {}",
                self.tilt_deg
            )));
        }
        let half_v = self.height_px as f64 / 2.0 * self.pixel_size();
        if (self.height_m + half_v * self.tilt_deg.to_radians().tan()) * 1000.0 > u16::MAX as f64 {
            return Err(Error::Config("camera too far for 16-bit millimetre depth".into()));
        }
        Ok(())
    }

    pub fn pixel_size(&self) -> f64 {
        self.extent_m / self.width_px as f64
    }

    /// Image-plane coordinates in metres: across, and up the image.
    fn plane(&self, p: [f64; 3]) -> (f64, f64) {
        let (sin, cos) = self.tilt_deg.to_radians().sin_cos();
        (p[0], p[1] * cos + p[2] * sin)
    }

    /// Distance towards the camera along the view axis; equals the height
    /// above ground at tilt 0.
    pub fn nearness(&self, p: [f64; 3]) -> f64 {
        let (sin, cos) = self.tilt_deg.to_radians().sin_cos();
        p[2] * cos - p[1] * sin
    }

    /// Continuous pixel coordinates (column, row). Pixel centres sit at
    /// integer coordinates.
    pub fn project(&self, p: [f64; 3]) -> (f64, f64) {
        let s = self.pixel_size();
        let (u, v) = self.plane(p);
        (u / s + self.width_px as f64 / 2.0 - 0.5, self.height_px as f64 / 2.0 - 0.5 - v / s)
    }

    /// Nearness of the ground plane at the centre of image row `row`.
    pub fn ground_nearness(&self, row: usize) -> f64 {
        let v = (self.height_px as f64 / 2.0 - 0.5 - row as f64) * self.pixel_size();
        -v * self.tilt_deg.to_radians().tan()
    }

    pub fn depth_mm(&self, nearness: f64) -> u16 {
        ((self.height_m - nearness) * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16
    }
}

/// Nearest cloth surface at every pixel centre, `None` where the ground is
/// visible.
pub fn surface_buffer(cloth: &Cloth, state: &SimState, camera: &Camera) -> Result<Vec<Option<Surface>>> {
    camera.validate()?;
    let (w, h) = (camera.width_px, camera.height_px);
    let mut zbuf: Vec<Option<Surface>> = vec![None; w * h];
    for tri in &cloth.triangles {
        let p = tri.map(|i| state.positions[i]);
        let q = p.map(|v| camera.project(v));
        let n = p.map(|v| camera.nearness(v));
        let area = edge(q[0], q[1], q[2]);
        if area.abs() < 1e-12 {
            continue;
        }
        let min_x = q.iter().map(|v| v.0).fold(f64::INFINITY, f64::min).ceil().max(0.0) as usize;
        let max_x = q.iter().map(|v| v.0).fold(f64::NEG_INFINITY, f64::max).floor();
        let min_y = q.iter().map(|v| v.1).fold(f64::INFINITY, f64::min).ceil().max(0.0) as usize;
        let max_y = q.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max).floor();
        if max_x < 0.0 || max_y < 0.0 {
            continue;
        }
        let max_x = (max_x as usize).min(w - 1);
        let max_y = (max_y as usize).min(h - 1);
        for y in min_y..=max_y {
            for x in min_x..=max_x {
                let c = (x as f64, y as f64);
                let b0 = edge(q[1], q[2], c) / area;
                let b1 = edge(q[2], q[0], c) / area;
                let b2 = 1.0 - b0 - b1;
                if b0 < 0.0 || b1 < 0.0 || b2 < 0.0 {
                    continue;
                }
                let nearness = b0 * n[0] + b1 * n[1] + b2 * n[2];
                let slot = &mut zbuf[y * w + x];
                if slot.is_none_or(|old| nearness > old.nearness) {
                    let z = b0 * p[0][2] + b1 * p[1][2] + b2 * p[2][2];
                    *slot = Some(Surface { nearness, z });
                }
            }
        }
    }
    Ok(zbuf)
}

fn edge(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

fn depth_from(zbuf: &[Option<Surface>], camera: &Camera) -> DepthFrame {
    let w = camera.width_px;
    DepthFrame {
        width: w,
        height: camera.height_px,
        millimeters: zbuf
            .iter()
            .enumerate()
            .map(|(i, s)| camera.depth_mm(s.map_or_else(|| camera.ground_nearness(i / w), |s| s.nearness)))
            .collect(),
    }
}

pub fn render_depth(cloth: &Cloth, state: &SimState, camera: &Camera) -> Result<DepthFrame> {
    Ok(depth_from(&surface_buffer(cloth, state, camera)?, camera))
}

/// Depth, colour and exact mask from one z-buffer pass. The garment colour
/// is brightened slightly with height.
pub fn render_views(cloth: &Cloth, state: &SimState, camera: &Camera, colour: [u8; 3]) -> Result<(DepthFrame, RgbFrame, Mask)> {
    let zbuf = surface_buffer(cloth, state, camera)?;
    let (w, h) = (camera.width_px, camera.height_px);
    let mut pixels = Vec::with_capacity(3 * w * h);
    for z in &zbuf {
        match z {
            Some(s) => {
                let shade = 0.85 + 0.3 * s.z.clamp(0.0, 0.5);
                pixels.extend(colour.map(|c| (c as f64 * shade).round().min(255.0) as u8));
            }
            None => pixels.extend(BACKDROP_RGB),
        }
    }
    Ok((
        depth_from(&zbuf, camera),
        RgbFrame { width: w, height: h, pixels },
        Mask {
            width: w,
            height: h,
            values: zbuf.iter().map(|z| u8::from(z.is_some())).collect(),
        },
    ))
}
