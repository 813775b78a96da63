//! Radar configuration, indoor geometry and moving actors.
//!
//! Everything here is immutable after construction. Actors are clusters of
//! point scatterers that follow a piecewise-linear ground trajectory, with
//! limb points swinging sinusoidally along the walk direction.

use std::f64::consts::{LN_2, PI};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Speed of light in vacuum (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Stride length used to tie limb swing frequency to walking speed (m).
pub const STRIDE_LENGTH: f64 = 1.2;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("fs * T_chirp = {0} is not an integer sample count")]
    NonIntegerSamples(f64),
    #[error("samples_per_chirp = {declared} but fs * T_chirp = {derived}")]
    SampleCountMismatch { declared: usize, derived: usize },
    #[error("invalid radar configuration: {0}")]
    Invalid(String),
    #[error("scene label {label} does not match {actors} actor(s)")]
    LabelMismatch { label: u8, actors: usize },
}

/// Position and pointing of the radar.
///
/// `heading` is the horizontal pointing direction; `tilt` rotates the
/// boresight downward from the horizontal plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadarPose {
    pub position: [f64; 3],
    pub heading: [f64; 3],
    pub tilt: f64,
}

impl RadarPose {
    pub fn position(&self) -> Vec3 {
        Vec3::from(self.position)
    }

    fn frame(&self) -> (Vec3, Vec3, Vec3) {
        let mut h = Vec3::from(self.heading);
        h.z = 0.0;
        let h = h.normalize();
        let z = Vec3::z();
        let forward = h * self.tilt.cos() - z * self.tilt.sin();
        let right = h.cross(&z).normalize();
        let up = right.cross(&forward);
        (forward, right, up)
    }

    /// Unit boresight vector including tilt.
    pub fn boresight(&self) -> Vec3 {
        self.frame().0
    }

    /// Azimuth and elevation of `direction` relative to boresight (rad).
    pub fn off_boresight_angles(&self, direction: &Vec3) -> (f64, f64) {
        let (f, r, u) = self.frame();
        let d = direction.normalize();
        let (df, dr, du) = (d.dot(&f), d.dot(&r), d.dot(&u));
        let az = dr.atan2(df);
        let el = du.atan2((df * df + dr * dr).sqrt());
        (az, el)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadarConfig {
    pub carrier_freq: f64,
    pub bandwidth: f64,
    pub sample_rate: f64,
    pub chirp_duration: f64,
    pub samples_per_chirp: usize,
    pub chirps_per_frame: usize,
    pub chirp_repetition: f64,
    pub pose: RadarPose,
    pub hpbw_azimuth: f64,
    pub hpbw_elevation: f64,
}

impl RadarConfig {
    /// 60 GHz waveform with M = 128 chirps at T_r = 0.3 ms.
    pub fn with_pose(pose: RadarPose) -> Self {
        Self {
            carrier_freq: 60e9,
            bandwidth: 882.35e6,
            sample_rate: 1e6,
            chirp_duration: 0.256e-3,
            samples_per_chirp: 256,
            chirps_per_frame: 128,
            chirp_repetition: 0.3e-3,
            pose,
            hpbw_azimuth: 30.5_f64.to_radians(),
            hpbw_elevation: 60.5_f64.to_radians(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if !(self.bandwidth > 0.0 && self.carrier_freq > self.bandwidth) {
            return inv("require fc > B > 0");
        }
        if !(self.chirp_duration > 0.0 && self.chirp_repetition >= self.chirp_duration) {
            return inv("require T_r >= T_chirp > 0");
        }
        if !self.chirps_per_frame.is_power_of_two() {
            return inv("chirps per frame must be a power of two");
        }
        if !(self.hpbw_azimuth > 0.0 && self.hpbw_elevation > 0.0) {
            return inv("beamwidths must be positive");
        }
        let derived = self.sample_rate * self.chirp_duration;
        let rounded = derived.round();
        if rounded < 1.0 || (derived - rounded).abs() > 1e-6 * rounded.max(1.0) {
            return Err(ConfigError::NonIntegerSamples(derived));
        }
        if rounded as usize != self.samples_per_chirp {
            return Err(ConfigError::SampleCountMismatch {
                declared: self.samples_per_chirp,
                derived: rounded as usize,
            });
        }
        if self.samples_per_chirp < 2 || self.samples_per_chirp % 2 != 0 {
            return inv("samples per chirp must be even");
        }
        Ok(())
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_freq
    }
}

/// Physics limits implied by a waveform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivedParams {
    pub chirp_slope: f64,
    pub range_resolution: f64,
    pub max_range: f64,
    pub max_velocity: f64,
    pub velocity_resolution: f64,
    pub wavelength: f64,
    pub samples_per_chirp: usize,
}

pub fn derive_params(cfg: &RadarConfig) -> Result<DerivedParams, ConfigError> {
    cfg.validate()?;
    let chirp_slope = cfg.bandwidth / cfg.chirp_duration;
    let wavelength = SPEED_OF_LIGHT / cfg.carrier_freq;
    Ok(DerivedParams {
        chirp_slope,
        range_resolution: SPEED_OF_LIGHT / (2.0 * cfg.bandwidth),
        max_range: SPEED_OF_LIGHT * cfg.sample_rate / (4.0 * chirp_slope),
        max_velocity: wavelength / (4.0 * cfg.chirp_repetition),
        velocity_resolution: wavelength
            / (2.0 * cfg.chirps_per_frame as f64 * cfg.chirp_repetition),
        wavelength,
        samples_per_chirp: cfg.samples_per_chirp,
    })
}

/// Power gain of the Gaussian main lobe, 0.5 at the half-power angles.
pub fn antenna_power_gain(cfg: &RadarConfig, direction: &Vec3) -> f64 {
    let (az, el) = cfg.pose.off_boresight_angles(direction);
    let qa = 2.0 * az / cfg.hpbw_azimuth;
    let qe = 2.0 * el / cfg.hpbw_elevation;
    (-LN_2 * qa * qa).exp() * (-LN_2 * qe * qe).exp()
}

/// Amplitude gain in [0, 1]; the square root of [`antenna_power_gain`].
pub fn antenna_gain(cfg: &RadarConfig, direction: &Vec3) -> f64 {
    antenna_power_gain(cfg, direction).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneKind {
    Corridor,
    Room,
}

impl SceneKind {
    pub const ALL: [SceneKind; 2] = [SceneKind::Corridor, SceneKind::Room];

    pub fn as_str(&self) -> &'static str {
        match self {
            SceneKind::Corridor => "corridor",
            SceneKind::Room => "room",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "corridor" => Some(SceneKind::Corridor),
            "room" => Some(SceneKind::Room),
            _ => None,
        }
    }

    /// Floor extents (x, y) in metres.
    pub fn extents(&self) -> (f64, f64) {
        match self {
            SceneKind::Corridor => (12.0, 2.0),
            SceneKind::Room => (8.0, 6.0),
        }
    }

    pub fn radar_pose(&self) -> RadarPose {
        match self {
            SceneKind::Corridor => RadarPose {
                position: [0.05, 1.0, 1.5],
                heading: [1.0, 0.0, 0.0],
                tilt: 0.0,
            },
            SceneKind::Room => RadarPose {
                position: [0.05, 3.0, 2.0],
                heading: [1.0, 0.0, 0.0],
                tilt: 30_f64.to_radians(),
            },
        }
    }
}

/// Planar rectangle `origin + s*edge_u + t*edge_v`, `s, t` in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wall {
    pub origin: [f64; 3],
    pub edge_u: [f64; 3],
    pub edge_v: [f64; 3],
    /// Amplitude reflection coefficient in [0, 1].
    pub gamma: f64,
}

impl Wall {
    pub fn normal(&self) -> Vec3 {
        Vec3::from(self.edge_u).cross(&Vec3::from(self.edge_v)).normalize()
    }

    pub fn origin(&self) -> Vec3 {
        Vec3::from(self.origin)
    }

    /// Signed distance of `p` from the wall plane.
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        (p - self.origin()).dot(&self.normal())
    }

    pub fn mirror(&self, p: &Vec3) -> Vec3 {
        p - self.normal() * (2.0 * self.signed_distance(p))
    }

    /// Whether a point on the wall plane lies inside the rectangle.
    pub fn contains_in_plane(&self, p: &Vec3) -> bool {
        let u = Vec3::from(self.edge_u);
        let v = Vec3::from(self.edge_v);
        let d = p - self.origin();
        let s = d.dot(&u) / u.norm_squared();
        let t = d.dot(&v) / v.norm_squared();
        const TOL: f64 = 1e-9;
        (-TOL..=1.0 + TOL).contains(&s) && (-TOL..=1.0 + TOL).contains(&t)
    }

    /// Parameter in (0, 1) where the segment `a -> b` crosses the rectangle.
    pub fn segment_hit(&self, a: &Vec3, b: &Vec3) -> Option<f64> {
        let da = self.signed_distance(a);
        let db = self.signed_distance(b);
        if da * db >= 0.0 {
            return None;
        }
        let s = da / (da - db);
        let p = a + (b - a) * s;
        self.contains_in_plane(&p).then_some(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointScatterer {
    pub position: [f64; 3],
    pub reflectivity: f64,
}

impl PointScatterer {
    pub fn new(position: Vec3, reflectivity: f64) -> Self {
        Self {
            position: position.into(),
            reflectivity,
        }
    }

    pub fn position(&self) -> Vec3 {
        Vec3::from(self.position)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MicroMotion {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
}

impl MicroMotion {
    pub fn displacement(&self, t: f64) -> f64 {
        self.amplitude * (2.0 * PI * self.frequency * t + self.phase).sin()
    }
}

/// Point attached to an actor. The offset is expressed in the body frame:
/// x along the walk direction, y to the left, z up from the floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BodyPoint {
    pub offset: [f64; 3],
    pub reflectivity: f64,
    #[serde(default)]
    pub micro_motion: MicroMotion,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub position: [f64; 3],
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Actor {
    pub trajectory: Vec<Waypoint>,
    pub walk_speed: f64,
    pub body_points: Vec<BodyPoint>,
}

impl Actor {
    /// Torso, two arms and two legs. Limbs swing at `walk_speed / STRIDE_LENGTH`
    /// with arms and legs in anti-phase.
    pub fn walker(trajectory: Vec<Waypoint>, walk_speed: f64, gait_phase: f64) -> Self {
        let f = walk_speed / STRIDE_LENGTH;
        let limb = |offset: [f64; 3], reflectivity: f64, amplitude: f64, phase: f64| BodyPoint {
            offset,
            reflectivity,
            micro_motion: MicroMotion {
                amplitude,
                frequency: f,
                phase: gait_phase + phase,
            },
        };
        let body_points = vec![
            BodyPoint {
                offset: [0.0, 0.0, 1.2],
                reflectivity: 1.0,
                micro_motion: MicroMotion::default(),
            },
            limb([0.0, 0.25, 1.3], 0.35, 0.25, 0.0),
            limb([0.0, -0.25, 1.3], 0.35, 0.25, PI),
            limb([0.0, 0.12, 0.5], 0.45, 0.3, PI),
            limb([0.0, -0.12, 0.5], 0.45, 0.3, 0.0),
        ];
        Self {
            trajectory,
            walk_speed,
            body_points,
        }
    }

    /// Straight walk from `start` at `walk_speed`, beginning at `t0`.
    pub fn straight_walk(start: Vec3, end: Vec3, walk_speed: f64, t0: f64, gait_phase: f64) -> Self {
        let duration = (end - start).norm() / walk_speed;
        Self::walker(
            vec![
                Waypoint {
                    position: start.into(),
                    time: t0,
                },
                Waypoint {
                    position: end.into(),
                    time: t0 + duration,
                },
            ],
            walk_speed,
            gait_phase,
        )
    }

    pub fn time_span(&self) -> (f64, f64) {
        let first = self.trajectory.first().map_or(0.0, |w| w.time);
        let last = self.trajectory.last().map_or(0.0, |w| w.time);
        (first, last)
    }

    /// Body centre and unit walk direction at `t` (clamped to the span).
    pub fn center_at(&self, t: f64) -> (Vec3, Vec3) {
        let wp = &self.trajectory;
        match wp.len() {
            0 => return (Vec3::zeros(), Vec3::x()),
            1 => return (Vec3::from(wp[0].position), Vec3::x()),
            _ => {}
        }
        let (t0, t1) = self.time_span();
        let t = t.clamp(t0, t1);
        let seg = wp
            .windows(2)
            .position(|w| t <= w[1].time)
            .unwrap_or(wp.len() - 2);
        let (a, b) = (&wp[seg], &wp[seg + 1]);
        let (pa, pb) = (Vec3::from(a.position), Vec3::from(b.position));
        let dt = b.time - a.time;
        let s = if dt > 0.0 { (t - a.time) / dt } else { 1.0 };
        let mut dir = pb - pa;
        dir.z = 0.0;
        let dir = if dir.norm() > 0.0 { dir.normalize() } else { Vec3::x() };
        (pa + (pb - pa) * s, dir)
    }
}

/// World-space position and reflectivity of every body point at time `t`.
///
/// Outside the trajectory span the actor is frozen at the nearest endpoint,
/// limbs included.
pub fn actor_points_at(actor: &Actor, t: f64) -> Vec<PointScatterer> {
    let (t0, t1) = actor.time_span();
    let tc = t.clamp(t0, t1);
    let (center, forward) = actor.center_at(tc);
    let left = Vec3::z().cross(&forward);
    actor
        .body_points
        .iter()
        .map(|bp| {
            let along = bp.offset[0] + bp.micro_motion.displacement(tc);
            let p = center + forward * along + left * bp.offset[1] + Vec3::z() * bp.offset[2];
            PointScatterer::new(p, bp.reflectivity)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Occupancy {
    Empty = 0,
    OnePerson = 1,
    TwoPeople = 2,
}

impl Occupancy {
    pub const ALL: [Occupancy; 3] = [Occupancy::Empty, Occupancy::OnePerson, Occupancy::TwoPeople];

    pub fn from_actor_count(n: usize) -> Self {
        match n {
            0 => Occupancy::Empty,
            1 => Occupancy::OnePerson,
            _ => Occupancy::TwoPeople,
        }
    }

    pub fn from_index(i: u8) -> Option<Self> {
        Self::ALL.get(i as usize).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub kind: SceneKind,
    pub walls: Vec<Wall>,
    pub static_scatterers: Vec<PointScatterer>,
    pub actors: Vec<Actor>,
    pub label: Occupancy,
}

fn vertical_wall(a: [f64; 2], b: [f64; 2], height: f64, gamma: f64) -> Wall {
    Wall {
        origin: [a[0], a[1], 0.0],
        edge_u: [b[0] - a[0], b[1] - a[1], 0.0],
        edge_v: [0.0, 0.0, height],
        gamma,
    }
}

impl Scene {
    /// 12 m x 2 m corridor: two side walls and a few door-frame scatterers.
    pub fn corridor() -> Self {
        let walls = vec![
            vertical_wall([0.0, 0.0], [12.0, 0.0], 3.0, 0.6),
            vertical_wall([0.0, 2.0], [12.0, 2.0], 3.0, 0.6),
        ];
        let static_scatterers = vec![
            PointScatterer::new(Vec3::new(3.0, 0.08, 1.0), 0.6),
            PointScatterer::new(Vec3::new(6.5, 1.92, 1.1), 0.5),
            PointScatterer::new(Vec3::new(9.0, 0.1, 0.9), 0.6),
            PointScatterer::new(Vec3::new(11.9, 1.0, 1.2), 1.0),
        ];
        Self {
            kind: SceneKind::Corridor,
            walls,
            static_scatterers,
            actors: Vec::new(),
            label: Occupancy::Empty,
        }
    }

    /// 8 m x 6 m room with four walls, a sofa and a chair.
    pub fn room() -> Self {
        let walls = vec![
            vertical_wall([0.0, 0.0], [8.0, 0.0], 2.8, 0.5),
            vertical_wall([8.0, 0.0], [8.0, 6.0], 2.8, 0.5),
            vertical_wall([8.0, 6.0], [0.0, 6.0], 2.8, 0.5),
            vertical_wall([0.0, 6.0], [0.0, 0.0], 2.8, 0.5),
        ];
        let static_scatterers = vec![
            // sofa
            PointScatterer::new(Vec3::new(6.0, 1.0, 0.5), 0.9),
            PointScatterer::new(Vec3::new(6.4, 1.8, 0.6), 0.7),
            PointScatterer::new(Vec3::new(6.0, 2.6, 0.5), 0.9),
            // chair
            PointScatterer::new(Vec3::new(3.5, 4.8, 0.7), 0.5),
            PointScatterer::new(Vec3::new(3.8, 5.1, 0.4), 0.4),
        ];
        Self {
            kind: SceneKind::Room,
            walls,
            static_scatterers,
            actors: Vec::new(),
            label: Occupancy::Empty,
        }
    }

    pub fn preset(kind: SceneKind) -> Self {
        match kind {
            SceneKind::Corridor => Self::corridor(),
            SceneKind::Room => Self::room(),
        }
    }

    pub fn with_actors(mut self, actors: Vec<Actor>) -> Self {
        self.label = Occupancy::from_actor_count(actors.len());
        self.actors = actors;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.label != Occupancy::from_actor_count(self.actors.len()) {
            return Err(ConfigError::LabelMismatch {
                label: self.label as u8,
                actors: self.actors.len(),
            });
        }
        for a in &self.actors {
            if a.body_points.is_empty() || a.trajectory.is_empty() {
                return Err(ConfigError::Invalid("actor without body points or waypoints".into()));
            }
        }
        if self.walls.iter().any(|w| !(0.0..=1.0).contains(&w.gamma)) {
            return Err(ConfigError::Invalid("wall reflection outside [0, 1]".into()));
        }
        Ok(())
    }
}
