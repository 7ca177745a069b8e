//! Semi-implicit Euler integration of the particle system and the
//! grasp-lift-drop scenario.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::template::{dist, Cloth};
use crate::error::{Error, Result};

pub const GRAVITY: f64 = 9.81;
/// Positions further than this from the origin mean the integration blew up.
pub const EXPLOSION_LIMIT_M: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub positions: Vec<[f64; 3]>,
    pub velocities: Vec<[f64; 3]>,
    pub pinned: Option<usize>,
    pub dt: f64,
}

impl SimState {
    pub fn at_rest(cloth: &Cloth, dt: f64) -> Self {
        Self {
            positions: cloth.rest_positions.clone(),
            velocities: vec![[0.0; 3]; cloth.len()],
            pinned: None,
            dt,
        }
    }

    pub fn centroid_height(&self) -> f64 {
        self.positions.iter().map(|p| p[2]).sum::<f64>() / self.positions.len() as f64
    }

    pub fn max_height(&self) -> f64 {
        self.positions.iter().map(|p| p[2]).fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Energy {
    pub kinetic: f64,
    pub gravitational: f64,
    pub elastic: f64,
}

impl Energy {
    pub fn total(&self) -> f64 {
        self.kinetic + self.gravitational + self.elastic
    }
}

pub fn energy(cloth: &Cloth, state: &SimState, gravity: f64) -> Energy {
    let mut e = Energy {
        kinetic: 0.0,
        gravitational: 0.0,
        elastic: 0.0,
    };
    for ((m, p), v) in cloth.masses.iter().zip(&state.positions).zip(&state.velocities) {
        e.kinetic += 0.5 * m * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
        e.gravitational += m * gravity * p[2];
    }
    for s in &cloth.springs {
        let stretch = dist(state.positions[s.a], state.positions[s.b]) - s.rest;
        e.elastic += 0.5 * s.k * stretch * stretch;
    }
    e
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Integrator {
    pub dt: f64,
    pub gravity: f64,
}

impl Integrator {
    /// One step: forces at the current positions, velocity update, then
    /// position update with the new velocity. Particles that would go below
    /// the ground stop on it with zero vertical velocity.
    pub fn step(&self, cloth: &Cloth, state: &mut SimState, pin_target: Option<[f64; 3]>, forces: &mut Vec<[f64; 3]>) {
        let n = cloth.len();
        forces.clear();
        forces.resize(n, [0.0; 3]);
        for i in 0..n {
            let (m, b, v) = (cloth.masses[i], cloth.drag[i], state.velocities[i]);
            forces[i] = [-b * v[0], -b * v[1], -m * self.gravity - b * v[2]];
        }
        for s in &cloth.springs {
            let (pa, pb) = (state.positions[s.a], state.positions[s.b]);
            let d = [pb[0] - pa[0], pb[1] - pa[1], pb[2] - pa[2]];
            let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if len == 0.0 {
                continue;
            }
            let u = [d[0] / len, d[1] / len, d[2] / len];
            let (va, vb) = (state.velocities[s.a], state.velocities[s.b]);
            let closing = (vb[0] - va[0]) * u[0] + (vb[1] - va[1]) * u[1] + (vb[2] - va[2]) * u[2];
            let f = s.k * (len - s.rest) + s.c * closing;
            for k in 0..3 {
                forces[s.a][k] += f * u[k];
                forces[s.b][k] -= f * u[k];
            }
        }
        for i in 0..n {
            if state.pinned == Some(i) {
                state.velocities[i] = [0.0; 3];
                if let Some(t) = pin_target {
                    state.positions[i] = t;
                }
                continue;
            }
            let inv_m = 1.0 / cloth.masses[i];
            let (v, p) = (&mut state.velocities[i], &mut state.positions[i]);
            for k in 0..3 {
                v[k] += forces[i][k] * inv_m * self.dt;
                p[k] += v[k] * self.dt;
            }
            if p[2] < 0.0 {
                p[2] = 0.0;
                v[2] = 0.0;
            }
        }
    }
}

pub(crate) fn check_state(state: &SimState, stiffness: f64) -> Result<()> {
    for p in &state.positions {
        let r2 = p[0] * p[0] + p[1] * p[1] + p[2] * p[2];
        if !r2.is_finite() || r2 > EXPLOSION_LIMIT_M * EXPLOSION_LIMIT_M {
            return Err(Error::Simulation(format!(
                "cloth exploded (particle at {:?}); dt = {} s, stiffness = {} N/m",
                p, state.dt, stiffness
            )));
        }
    }
    Ok(())
}

/// Phases of a grasp-lift-drop recording, in frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropSchedule {
    pub frame_count: usize,
    pub fps: f64,
    pub substeps: usize,
    /// Frame at which the grasp point reaches its top height.
    pub lift_end: usize,
    /// Frame at which the grasp is released.
    pub release: usize,
}

pub const DEFAULT_LIFT_FRACTION: f64 = 0.4;
pub const DEFAULT_RELEASE_FRACTION: f64 = 0.55;

impl DropSchedule {
    /// Lift over the first 40% of the recording, hold until 55%, then drop.
    pub fn new(frame_count: usize, fps: f64, substeps: usize) -> Result<Self> {
        Self::with_phases(frame_count, fps, substeps, DEFAULT_LIFT_FRACTION, DEFAULT_RELEASE_FRACTION)
    }

    /// Lift until `lift_fraction` of the recording, release at
    /// `release_fraction`.
    pub fn with_phases(
        frame_count: usize,
        fps: f64,
        substeps: usize,
        lift_fraction: f64,
        release_fraction: f64,
    ) -> Result<Self> {
        if frame_count < 4 || !(fps > 0.0) || substeps == 0 {
            return Err(Error::Config(format!(
                "bad drop schedule: {frame_count} frames at {fps} fps with {substeps} substeps"
            )));
        }
        if !(0.0 < lift_fraction && lift_fraction <= release_fraction && release_fraction < 1.0) {
            return Err(Error::Config(format!(
                "drop phases need 0 < lift ({lift_fraction}) <= release ({release_fraction}) < 1"
            )));
        }
        let lift_end = ((frame_count as f64 * lift_fraction).round() as usize).max(1);
        let release = ((frame_count as f64 * release_fraction).round() as usize).max(lift_end + 1);
        if release + 1 >= frame_count {
            return Err(Error::Config(format!(
                "release at frame {release} leaves no room for the fall in {frame_count} frames"
            )));
        }
        Ok(Self {
            frame_count,
            fps,
            substeps,
            lift_end,
            release,
        })
    }

    pub fn dt(&self) -> f64 {
        1.0 / (self.fps * self.substeps as f64)
    }
}

/// Per-sequence randomness: which particle is grasped and how high it goes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grasp {
    pub particle: usize,
    pub height: f64,
}

impl Grasp {
    pub fn random(cloth: &Cloth, seed: u64) -> Self {
        Self::random_within(cloth, seed, None)
    }

    /// Like `random`, but only particles whose rest position lies within
    /// `radius` metres of the cloth's centre (in plan) are candidates. The
    /// particle nearest the centre is always one.
    pub fn random_within(cloth: &Cloth, seed: u64, radius: Option<f64>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let particle = match radius {
            None => rng.random_range(0..cloth.len()),
            Some(r) => {
                let n = cloth.len() as f64;
                let c = cloth
                    .rest_positions
                    .iter()
                    .fold([0.0; 2], |acc, p| [acc[0] + p[0] / n, acc[1] + p[1] / n]);
                let d = |i: usize| {
                    let p = cloth.rest_positions[i];
                    (p[0] - c[0]).hypot(p[1] - c[1])
                };
                let nearest = (0..cloth.len()).min_by(|&a, &b| d(a).total_cmp(&d(b))).expect("cloth has particles");
                let candidates: Vec<usize> = (0..cloth.len()).filter(|&i| i == nearest || d(i) <= r).collect();
                candidates[rng.random_range(0..candidates.len())]
            }
        };
        Self {
            particle,
            height: rng.random_range(0.45..0.55),
        }
    }
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Runs the scenario and returns one state per frame, frame 0 being the
/// garment lying flat. Substep states are not kept.
pub fn simulate_drop(cloth: &Cloth, schedule: &DropSchedule, grasp: Grasp, stiffness: f64) -> Result<Vec<SimState>> {
    let dt = schedule.dt();
    let integrator = Integrator { dt, gravity: GRAVITY };
    let mut state = SimState::at_rest(cloth, dt);
    state.pinned = Some(grasp.particle);
    let start = cloth.rest_positions[grasp.particle];
    let lift_time = schedule.lift_end as f64 / schedule.fps;
    let mut frames = Vec::with_capacity(schedule.frame_count);
    frames.push(state.clone());
    let mut forces = Vec::new();
    for frame in 1..schedule.frame_count {
        for sub in 0..schedule.substeps {
            if frame > schedule.release || (frame == schedule.release && sub == 0) {
                state.pinned = None;
            }
            let t = ((frame - 1) * schedule.substeps + sub + 1) as f64 * dt;
            let target = [start[0], start[1], grasp.height * smoothstep(t / lift_time)];
            let pin_target = state.pinned.map(|_| target);
            integrator.step(cloth, &mut state, pin_target, &mut forces);
        }
        check_state(&state, stiffness)?;
        frames.push(state.clone());
    }
    Ok(frames)
}

/// First frame after release at which the centroid has dropped to
/// `fraction` of its height at release. Internal spring forces cancel in
/// the centroid's motion, which leaves gravity, drag and ground contact; the
/// garment itself may never lie completely flat within a recording.
pub fn landing_frame(frames: &[SimState], release: usize, fraction: f64) -> Option<usize> {
    let start = frames.get(release)?.centroid_height();
    (release..frames.len()).find(|&f| frames[f].centroid_height() <= fraction * start)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ShapeClass;
    use crate::synth::template::ClothTemplate;

    fn single_particle(z: f64) -> (Cloth, SimState) {
        let cloth = Cloth {
            rest_positions: vec![[0.0, 0.0, z]],
            masses: vec![0.1],
            drag: vec![0.0],
            springs: vec![],
            triangles: vec![],
        };
        let state = SimState::at_rest(&cloth, 0.01);
        (cloth, state)
    }

    #[test]
    fn free_particle_matches_recurrence() {
        let (cloth, mut state) = single_particle(1.0);
        let integ = Integrator { dt: 0.01, gravity: GRAVITY };
        let mut forces = Vec::new();
        for _ in 0..10 {
            integ.step(&cloth, &mut state, None, &mut forces);
        }
        // v_n = -g n dt, z_n = z_0 - g dt^2 n(n+1)/2
        let expected = 1.0 - GRAVITY * 0.01 * 0.01 * 55.0;
        assert!((state.positions[0][2] - expected).abs() < 1e-12);
        assert!((state.velocities[0][2] + GRAVITY * 0.1).abs() < 1e-12);
    }

    #[test]
    fn equilibrium_without_gravity() {
        let t = ClothTemplate::new(ShapeClass::Tshirt, 150.0);
        let cloth = Cloth::from_template(&t, 0.2, [0.0; 2]).unwrap();
        let mut state = SimState::at_rest(&cloth, 1.0 / 960.0);
        let before = state.clone();
        let integ = Integrator {
            dt: state.dt,
            gravity: 0.0,
        };
        let mut forces = Vec::new();
        for _ in 0..200 {
            integ.step(&cloth, &mut state, None, &mut forces);
        }
        assert_eq!(state, before);
    }

    #[test]
    fn ground_stops_particles() {
        let (cloth, mut state) = single_particle(0.001);
        let integ = Integrator { dt: 0.01, gravity: GRAVITY };
        let mut forces = Vec::new();
        for _ in 0..5 {
            integ.step(&cloth, &mut state, None, &mut forces);
        }
        assert_eq!(state.positions[0][2], 0.0);
        assert_eq!(state.velocities[0][2], 0.0);
    }

    #[test]
    fn explosion_is_reported() {
        let mut t = ClothTemplate::new(ShapeClass::Towel, 100.0);
        t.stiffness = 1.0e6;
        let cloth = Cloth::from_template(&t, 0.0, [0.0; 2]).unwrap();
        let schedule = DropSchedule::new(20, 30.0, 2).unwrap();
        let err = simulate_drop(&cloth, &schedule, Grasp::random(&cloth, 1), t.stiffness).unwrap_err();
        assert!(matches!(err, Error::Simulation(_)));
        assert!(err.to_string().contains("dt"));
    }

    #[test]
    fn pinned_particle_follows_lift() {
        let t = ClothTemplate::new(ShapeClass::Towel, 250.0);
        let cloth = Cloth::from_template(&t, 0.0, [0.0; 2]).unwrap();
        let schedule = DropSchedule::new(40, 30.0, 32).unwrap();
        let grasp = Grasp::random(&cloth, 3);
        let frames = simulate_drop(&cloth, &schedule, grasp, t.stiffness).unwrap();
        assert_eq!(frames.len(), 40);
        let held = &frames[schedule.lift_end];
        assert!((held.positions[grasp.particle][2] - grasp.height).abs() < 1e-12);
        assert_eq!(held.velocities[grasp.particle], [0.0; 3]);
        assert!(frames[schedule.release].pinned.is_none());
        assert!(landing_frame(&frames, schedule.release, 0.25).is_some());
    }
}
