//! Garment outlines and the particle/spring mesh built from them.

use crate::data::ShapeClass;
use crate::error::{Error, Result};

/// Flat garment outlines in metres, centred on the origin, counter-clockwise.
/// `y` points from hem to collar (or waist for trousers).
pub fn silhouette(class: ShapeClass) -> Vec<[f64; 2]> {
    let pts: &[[f64; 2]] = match class {
        ShapeClass::Pant => &[
            [-0.25, -0.5],
            [-0.06, -0.5],
            [0.0, 0.1],
            [0.06, -0.5],
            [0.25, -0.5],
            [0.22, 0.45],
            [-0.22, 0.45],
        ],
        ShapeClass::Shirt => &[
            [-0.27, -0.42],
            [0.27, -0.42],
            [0.27, 0.1],
            [0.68, -0.3],
            [0.78, -0.2],
            [0.32, 0.35],
            [0.1, 0.38],
            [0.0, 0.33],
            [-0.1, 0.38],
            [-0.32, 0.35],
            [-0.78, -0.2],
            [-0.68, -0.3],
            [-0.27, 0.1],
        ],
        ShapeClass::Sweater => &[
            [-0.3, -0.3],
            [0.3, -0.3],
            [0.3, 0.12],
            [0.75, 0.1],
            [0.75, 0.28],
            [0.3, 0.32],
            [0.1, 0.32],
            [0.0, 0.28],
            [-0.1, 0.32],
            [-0.3, 0.32],
            [-0.75, 0.28],
            [-0.75, 0.1],
            [-0.3, 0.12],
        ],
        ShapeClass::Towel => &[[-0.35, -0.22], [0.35, -0.22], [0.35, 0.22], [-0.35, 0.22]],
        ShapeClass::Tshirt => &[
            [-0.25, -0.35],
            [0.25, -0.35],
            [0.25, 0.15],
            [0.42, 0.05],
            [0.5, 0.2],
            [0.3, 0.35],
            [0.1, 0.35],
            [0.0, 0.3],
            [-0.1, 0.35],
            [-0.3, 0.35],
            [-0.5, 0.2],
            [-0.42, 0.05],
            [-0.25, 0.15],
        ],
    };
    pts.to_vec()
}

/// Even-odd point-in-polygon test.
pub fn point_in_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClothTemplate {
    pub shape_class: ShapeClass,
    pub outline: Vec<[f64; 2]>,
    /// Grid spacing in metres. The grid covers the outline's bounding box.
    pub spacing: f64,
    pub mass_grams: f64,
    /// Structural spring constant, N/m. Shear springs get half of it, bend
    /// springs a fifth.
    pub stiffness: f64,
    /// Damping ratio of each structural/shear spring's dashpot.
    pub damping: f64,
    /// Linear air drag of the whole garment, kg/s, spread evenly over the
    /// particles. Independent of mass, so heavier garments fall faster.
    pub drag: f64,
}

pub const DEFAULT_SPACING_M: f64 = 0.05;
pub const DEFAULT_STIFFNESS: f64 = 40.0;
pub const DEFAULT_DAMPING: f64 = 0.2;
pub const DEFAULT_DRAG: f64 = 1.5;

impl ClothTemplate {
    pub fn new(shape_class: ShapeClass, mass_grams: f64) -> Self {
        Self {
            shape_class,
            outline: silhouette(shape_class),
            spacing: DEFAULT_SPACING_M,
            mass_grams,
            stiffness: DEFAULT_STIFFNESS,
            damping: DEFAULT_DAMPING,
            drag: DEFAULT_DRAG,
        }
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        for p in &mut self.outline {
            p[0] *= factor;
            p[1] *= factor;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.outline.len() < 3 {
            return Err(Error::Config("garment outline needs at least 3 vertices".into()));
        }
        if !(self.mass_grams > 0.0) || !(self.spacing > 0.0) || !(self.stiffness > 0.0) {
            return Err(Error::Config("mass, spacing and stiffness must be positive".into()));
        }
        if !(self.damping > 0.0 && self.damping < 1.0) {
            return Err(Error::Config(format!("damping {} outside (0, 1)", self.damping)));
        }
        if !(self.drag >= 0.0) {
            return Err(Error::Config("drag must be non-negative".into()));
        }
        Ok(())
    }

    /// Grid resolution (columns, rows) over the outline's bounding box. Grid
    /// points sit at cell centres so none lands exactly on an edge.
    pub fn grid(&self) -> (usize, usize) {
        let (lo, hi) = bbox(&self.outline);
        (
            ((hi[0] - lo[0]) / self.spacing).ceil().max(1.0) as usize,
            ((hi[1] - lo[1]) / self.spacing).ceil().max(1.0) as usize,
        )
    }
}

fn bbox(poly: &[[f64; 2]]) -> ([f64; 2], [f64; 2]) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in poly {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    (lo, hi)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spring {
    pub a: usize,
    pub b: usize,
    pub rest: f64,
    pub k: f64,
    /// Dashpot coefficient along the spring, kg/s.
    pub c: f64,
}

/// Particle system: what the simulator integrates and the renderer draws.
#[derive(Debug, Clone)]
pub struct Cloth {
    pub rest_positions: Vec<[f64; 3]>,
    pub masses: Vec<f64>,
    /// Per-particle linear drag coefficient, kg/s.
    pub drag: Vec<f64>,
    pub springs: Vec<Spring>,
    pub triangles: Vec<[usize; 3]>,
}

impl Cloth {
    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }

    /// Lays the template flat on the ground, rotated by `angle` radians and
    /// moved by `offset`.
    pub fn from_template(t: &ClothTemplate, angle: f64, offset: [f64; 2]) -> Result<Self> {
        t.validate()?;
        let (lo, _) = bbox(&t.outline);
        let (cols, rows) = t.grid();
        let mut index = vec![None; cols * rows];
        let mut flat = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let p = [lo[0] + (c as f64 + 0.5) * t.spacing, lo[1] + (r as f64 + 0.5) * t.spacing];
                if point_in_polygon(p, &t.outline) {
                    index[r * cols + c] = Some(flat.len());
                    flat.push(p);
                }
            }
        }
        if flat.is_empty() {
            return Err(Error::Config("grid spacing too coarse: no particles inside the outline".into()));
        }
        let n = flat.len();
        let particle_mass = t.mass_grams / 1000.0 / n as f64;
        let (sin, cos) = angle.sin_cos();
        let rest_positions = flat
            .iter()
            .map(|p| [cos * p[0] - sin * p[1] + offset[0], sin * p[0] + cos * p[1] + offset[1], 0.0])
            .collect::<Vec<_>>();

        let at = |c: isize, r: isize| -> Option<usize> {
            if c < 0 || r < 0 || c as usize >= cols || r as usize >= rows {
                None
            } else {
                index[r as usize * cols + c as usize]
            }
        };
        let critical = 2.0 * (t.stiffness * particle_mass).sqrt();
        let mut springs = Vec::new();
        let mut triangles = Vec::new();
        for r in 0..rows as isize {
            for c in 0..cols as isize {
                let Some(a) = at(c, r) else { continue };
                let links: [((isize, isize), f64, f64); 6] = [
                    ((1, 0), 1.0, 1.0),
                    ((0, 1), 1.0, 1.0),
                    ((1, 1), 0.5, 0.5),
                    ((-1, 1), 0.5, 0.5),
                    ((2, 0), 0.2, 0.0),
                    ((0, 2), 0.2, 0.0),
                ];
                for ((dc, dr), kf, cf) in links {
                    if let Some(b) = at(c + dc, r + dr) {
                        let k = t.stiffness * kf;
                        springs.push(Spring {
                            a,
                            b,
                            rest: dist(rest_positions[a], rest_positions[b]),
                            k,
                            c: cf * t.damping * critical,
                        });
                    }
                }
                if let (Some(b), Some(d), Some(e)) = (at(c + 1, r), at(c, r + 1), at(c + 1, r + 1)) {
                    triangles.push([a, b, e]);
                    triangles.push([a, e, d]);
                } else if let (Some(b), Some(d)) = (at(c + 1, r), at(c, r + 1)) {
                    triangles.push([a, b, d]);
                } else if let (Some(b), Some(e)) = (at(c + 1, r), at(c + 1, r + 1)) {
                    triangles.push([a, b, e]);
                } else if let (Some(d), Some(e)) = (at(c, r + 1), at(c + 1, r + 1)) {
                    triangles.push([a, e, d]);
                }
            }
        }
        Ok(Self {
            rest_positions,
            masses: vec![particle_mass; n],
            drag: vec![t.drag / n as f64; n],
            springs,
            triangles,
        })
    }
}

pub(crate) fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polygon_test() {
        let sq = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        assert!(point_in_polygon([0.5, 0.5], &sq));
        assert!(!point_in_polygon([1.5, 0.5], &sq));
        // the gap between trouser legs is outside
        assert!(!point_in_polygon([0.0, -0.3], &silhouette(ShapeClass::Pant)));
        assert!(point_in_polygon([0.15, -0.3], &silhouette(ShapeClass::Pant)));
    }

    #[test]
    fn mesh_masses_and_neighbours() {
        for class in ShapeClass::ALL {
            let t = ClothTemplate::new(class, 250.0);
            let cloth = Cloth::from_template(&t, 0.3, [0.1, -0.1]).unwrap();
            let total: f64 = cloth.masses.iter().sum();
            assert!((total - 0.25).abs() < 1e-12);
            assert!(cloth.masses[0] > 0.0);
            assert!(!cloth.triangles.is_empty());
            for s in &cloth.springs {
                // grid neighbours only: at most two cells apart
                assert!(s.rest <= 2.0 * t.spacing + 1e-9, "{class:?} spring of {}", s.rest);
                assert!(s.rest > 0.0);
            }
        }
    }

    #[test]
    fn silhouettes_differ_in_area() {
        let counts: Vec<usize> = ShapeClass::ALL
            .iter()
            .map(|&c| Cloth::from_template(&ClothTemplate::new(c, 200.0), 0.0, [0.0; 2]).unwrap().len())
            .collect();
        let mut sorted = counts.clone();
        sorted.dedup();
        assert_eq!(sorted.len(), 5, "{counts:?}");
    }

    #[test]
    fn bad_templates() {
        let mut t = ClothTemplate::new(ShapeClass::Towel, 200.0);
        t.damping = 1.0;
        assert!(t.validate().is_err());
        let mut t = ClothTemplate::new(ShapeClass::Towel, 200.0);
        t.outline = vec![[0.0, -1.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]];
        t.spacing = 5.0;
        assert!(Cloth::from_template(&t, 0.0, [0.0; 2]).is_err());
    }
}
