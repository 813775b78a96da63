//! Beat-signal synthesis and the range-Doppler processing chain.

use std::f64::consts::PI;
use std::sync::Arc;

use log::warn;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::scatter::{carrier_phasor, radial_velocity, trace_paths, PropPath, ScatterError};
use crate::scene::{actor_points_at, derive_params, ConfigError, DerivedParams, RadarConfig, Scene};

/// Value substituted for the log of zero power (dB).
pub const DB_FLOOR: f64 = -300.0;

/// Side length of the square maps fed to the classifiers.
pub const RDM_SIZE: usize = 128;

#[derive(Debug, thiserror::Error)]
pub enum ChainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Scatter(#[from] ScatterError),
    #[error("expected {expected} chirps of paths, got {got}")]
    ChirpCount { expected: usize, got: usize },
}

/// Complex beat samples `s[n, m]`, stored chirp-major (`m * N + n`).
#[derive(Debug, Clone, PartialEq)]
pub struct ChirpFrame {
    pub samples_per_chirp: usize,
    pub chirps: usize,
    pub samples: Vec<Complex64>,
}

impl ChirpFrame {
    pub fn zeros(samples_per_chirp: usize, chirps: usize) -> Self {
        Self {
            samples_per_chirp,
            chirps,
            samples: vec![Complex64::new(0.0, 0.0); samples_per_chirp * chirps],
        }
    }

    pub fn chirp(&self, m: usize) -> &[Complex64] {
        let n = self.samples_per_chirp;
        &self.samples[m * n..(m + 1) * n]
    }
}

/// Range spectrum `S_r[k, m]`, stored chirp-major (`m * N + k`).
#[derive(Debug, Clone, PartialEq)]
pub struct RangeSpectrum {
    pub bins: usize,
    pub chirps: usize,
    pub data: Vec<Complex64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Synthetic,
    Real,
}

impl Domain {
    pub fn as_str(&self) -> &'static str {
        match self {
            Domain::Synthetic => "synthetic",
            Domain::Real => "real",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "synthetic" => Some(Domain::Synthetic),
            "real" => Some(Domain::Real),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RdmMeta {
    pub label: u8,
    pub domain: Domain,
    pub scene: String,
    pub sequence: u32,
    pub frame: u32,
    pub seed: u64,
}

impl Default for RdmMeta {
    fn default() -> Self {
        Self {
            label: 0,
            domain: Domain::Synthetic,
            scene: String::new(),
            sequence: 0,
            frame: 0,
            seed: 0,
        }
    }
}

/// Range-Doppler map in dB, row-major with rows = range bins and columns =
/// Doppler bins, zero Doppler at column `width / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rdm {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    pub meta: RdmMeta,
}

impl Rdm {
    pub fn new(height: usize, width: usize, data: Vec<f32>, meta: RdmMeta) -> Self {
        assert_eq!(data.len(), height * width);
        Self { height, width, data, meta }
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn argmax(&self) -> (usize, usize) {
        let (idx, _) = self
            .data
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
        (idx / self.width, idx % self.width)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Range (m) and radial velocity (m/s) of RDM bins.
#[derive(Debug, Clone, Copy)]
pub struct RdmAxes {
    pub range_step: f64,
    pub velocity_step: f64,
    pub zero_doppler_col: usize,
}

impl RdmAxes {
    pub fn new(params: &DerivedParams, chirps: usize) -> Self {
        Self {
            range_step: params.range_resolution,
            velocity_step: params.velocity_resolution,
            zero_doppler_col: chirps / 2,
        }
    }

    pub fn range(&self, row: usize) -> f64 {
        row as f64 * self.range_step
    }

    pub fn velocity(&self, col: usize) -> f64 {
        (col as f64 - self.zero_doppler_col as f64) * self.velocity_step
    }
}

/// Sum `A exp(j2pi fc tau) exp(j2pi (mu tau + f_D) n / fs)` over paths for
/// every chirp. Paths whose beat frequency exceeds fs/2 are dropped.
pub fn synth_beat(paths_per_chirp: &[Vec<PropPath>], radar: &RadarConfig) -> Result<ChirpFrame, ChainError> {
    let params = derive_params(radar)?;
    let (n_fast, m_slow) = (radar.samples_per_chirp, radar.chirps_per_frame);
    if paths_per_chirp.len() != m_slow {
        return Err(ChainError::ChirpCount {
            expected: m_slow,
            got: paths_per_chirp.len(),
        });
    }
    let mut frame = ChirpFrame::zeros(n_fast, m_slow);
    let nyquist = 0.5 * radar.sample_rate;
    // re-anchor the phase recurrence every few samples
    const ANCHOR: usize = 32;
    for (m, paths) in paths_per_chirp.iter().enumerate() {
        let out = &mut frame.samples[m * n_fast..(m + 1) * n_fast];
        for path in paths {
            let f_beat = params.chirp_slope * path.delay + path.doppler;
            if f_beat.abs() > nyquist {
                warn!("path at {:.2} m beats at {:.0} Hz beyond fs/2; dropped", path.length, f_beat);
                continue;
            }
            let a0 = path.amplitude * carrier_phasor(radar.carrier_freq * path.delay);
            let w = 2.0 * PI * f_beat / radar.sample_rate;
            let step = Complex64::from_polar(1.0, w);
            let mut z = a0;
            for (n, s) in out.iter_mut().enumerate() {
                if n % ANCHOR == 0 {
                    z = a0 * Complex64::from_polar(1.0, w * n as f64);
                }
                *s += z;
                z *= step;
            }
        }
    }
    Ok(frame)
}

/// Symmetric N-point Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / (n - 1) as f64).cos()))
        .collect()
}

/// Hann-windowed N-point forward DFT of every chirp.
pub fn range_fft(frame: &ChirpFrame) -> RangeSpectrum {
    let n = frame.samples_per_chirp;
    let window = hann(n);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut data: Vec<Complex64> = frame
        .samples
        .chunks_exact(n)
        .flat_map(|chirp| chirp.iter().zip(&window).map(|(s, w)| s * *w))
        .collect();
    fft.process(&mut data);
    RangeSpectrum {
        bins: n,
        chirps: frame.chirps,
        data,
    }
}

fn to_db(power: f64) -> f32 {
    if power > 0.0 {
        (10.0 * power.log10()).max(DB_FLOOR) as f32
    } else {
        DB_FLOOR as f32
    }
}

/// M-point DFT across chirps for the lower half of the range bins, squared
/// magnitude, zero Doppler shifted to the centre column, in dB.
pub fn doppler_fft(spectrum: &RangeSpectrum) -> Rdm {
    let (bins, m) = (spectrum.bins, spectrum.chirps);
    let rows = bins / 2;
    let fft: Arc<dyn Fft<f64>> = FftPlanner::<f64>::new().plan_fft_forward(m);
    let mut line = vec![Complex64::new(0.0, 0.0); m];
    let mut data = vec![0f32; rows * m];
    for k in 0..rows {
        for (j, v) in line.iter_mut().enumerate() {
            *v = spectrum.data[j * bins + k];
        }
        fft.process(&mut line);
        for (l, v) in line.iter().enumerate() {
            let col = (l + m / 2) % m;
            data[k * m + col] = to_db(v.norm_sqr());
        }
    }
    Rdm::new(rows, m, data, RdmMeta::default())
}

/// Render one frame: sample every scatterer at each chirp time, trace its
/// paths, synthesize the beat signal and run both FFTs.
pub fn simulate_frame(scene: &Scene, radar: &RadarConfig, frame_start: f64) -> Result<Rdm, ChainError> {
    scene.validate()?;
    let params = derive_params(radar)?;
    let m_slow = radar.chirps_per_frame;
    let dt = radar.chirp_repetition;

    let mut static_paths = Vec::new();
    for s in &scene.static_scatterers {
        static_paths.extend(trace_paths(scene, s, radar, 1)?);
    }

    let mut per_chirp = Vec::with_capacity(m_slow);
    for m in 0..m_slow {
        let t = frame_start + m as f64 * dt;
        let mut paths = static_paths.clone();
        for actor in &scene.actors {
            let points = actor_points_at(actor, t);
            for (bp, point) in points.iter().enumerate() {
                for path in trace_paths(scene, point, radar, 1)? {
                    let traj = |tt: f64| actor_points_at(actor, tt)[bp].position();
                    let v = radial_velocity(traj, &path.virtual_radar, t, dt);
                    paths.push(path.with_radial_velocity(v, params.wavelength));
                }
            }
        }
        per_chirp.push(paths);
    }
    let beat = synth_beat(&per_chirp, radar)?;
    Ok(doppler_fft(&range_fft(&beat)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Actor, PointScatterer, SceneKind, Vec3, SPEED_OF_LIGHT};
    use approx::assert_relative_eq;

    fn radar() -> RadarConfig {
        RadarConfig::with_pose(SceneKind::Corridor.radar_pose())
    }

    fn static_path(range: f64, v: f64, radar: &RadarConfig) -> PropPath {
        PropPath {
            length: range,
            delay: 2.0 * range / SPEED_OF_LIGHT,
            radial_velocity: 0.0,
            doppler: 0.0,
            amplitude: Complex64::new(1.0, 0.0),
            bounces: 0,
            wall: None,
            virtual_radar: Vec3::zeros(),
        }
        .with_radial_velocity(v, radar.wavelength())
    }

    /// Path list for a point target moving radially at `v` from `range`.
    fn moving_target(range: f64, v: f64, radar: &RadarConfig) -> Vec<Vec<PropPath>> {
        (0..radar.chirps_per_frame)
            .map(|m| {
                let r = range + v * m as f64 * radar.chirp_repetition;
                vec![static_path(r, v, radar)]
            })
            .collect()
    }

    #[test]
    fn beat_frequency_at_five_metres() {
        let r = radar();
        let p = derive_params(&r).unwrap();
        let f_b = p.chirp_slope * 2.0 * 5.0 / SPEED_OF_LIGHT;
        // mu = 882.35e6 / 0.256e-3, tau = 10 / c
        assert_relative_eq!(f_b, 114_968.2, max_relative = 1e-5);
    }

    #[test]
    fn empty_and_doubled_paths() {
        let r = radar();
        let none: Vec<Vec<PropPath>> = vec![Vec::new(); r.chirps_per_frame];
        let f = synth_beat(&none, &r).unwrap();
        assert!(f.samples.iter().all(|s| s.norm() == 0.0));

        let one = moving_target(5.0, 0.0, &r);
        let two: Vec<Vec<PropPath>> = one.iter().map(|p| vec![p[0], p[0]]).collect();
        let a = synth_beat(&one, &r).unwrap();
        let b = synth_beat(&two, &r).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(*y, *x + *x);
        }
    }

    #[test]
    fn rejects_wrong_chirp_count() {
        let r = radar();
        assert!(matches!(
            synth_beat(&[Vec::new()], &r),
            Err(ChainError::ChirpCount { expected: 128, got: 1 })
        ));
    }

    #[test]
    fn drops_paths_beyond_nyquist() {
        let r = radar();
        let frame = synth_beat(&moving_target(30.0, 0.0, &r), &r).unwrap();
        assert!(frame.samples.iter().all(|s| s.norm() == 0.0));
    }

    #[test]
    fn hann_energy_for_256() {
        // direct summation oracle for sum w^2 = 3(N-1)/8 over the symmetric window
        let w = hann(256);
        let direct: f64 = (0..256)
            .map(|i| {
                let c = (2.0 * PI * i as f64 / 255.0).cos();
                0.25 * (1.0 - c) * (1.0 - c)
            })
            .sum();
        let energy: f64 = w.iter().map(|x| x * x).sum();
        assert_relative_eq!(energy, direct, max_relative = 1e-12);
        assert_relative_eq!(energy, 95.625, max_relative = 1e-12);
        assert_eq!(w[0], 0.0);
        assert_eq!(w[255], w[0]);
    }

    #[test]
    fn static_target_range_peak() {
        let r = radar();
        let spectrum = range_fft(&synth_beat(&moving_target(5.0, 0.0, &r), &r).unwrap());
        let chirp0 = &spectrum.data[..spectrum.bins];
        let peak = (0..spectrum.bins).max_by(|&a, &b| chirp0[a].norm().total_cmp(&chirp0[b].norm())).unwrap();
        assert_eq!(peak, 29);
        let rdm = doppler_fft(&spectrum);
        assert_eq!((rdm.height, rdm.width), (128, 128));
        assert_eq!(rdm.argmax(), (29, 64));
    }

    #[test]
    fn zero_input_gives_floor() {
        let r = radar();
        let spectrum = range_fft(&ChirpFrame::zeros(256, 128));
        assert!(spectrum.data.iter().all(|c| c.norm() == 0.0));
        let rdm = doppler_fft(&spectrum);
        assert!(rdm.data.iter().all(|&v| v == DB_FLOOR as f32));
        let _ = r;
    }

    #[test]
    fn doppler_offsets_for_walking_speed() {
        // f_D = 2 / lambda ~ 400 Hz; bin offset = f_D * M * T_r ~ 15.4
        let r = radar();
        for (v, expected) in [(1.0, 64 + 15), (-1.0, 64 - 15)] {
            let rdm = doppler_fft(&range_fft(&synth_beat(&moving_target(5.0, v, &r), &r).unwrap()));
            let (row, col) = rdm.argmax();
            assert!((row as i64 - 29).abs() <= 1);
            assert!((col as i64 - expected as i64).abs() <= 1, "v={v}: col {col}");
        }
    }

    #[test]
    fn parseval_holds_on_both_stages() {
        let r = radar();
        let frame = synth_beat(&moving_target(7.3, 0.6, &r), &r).unwrap();
        let w = hann(256);
        let spectrum = range_fft(&frame);
        for m in [0, 17, 127] {
            let time: f64 = frame.chirp(m).iter().zip(&w).map(|(s, w)| (s * w).norm_sqr()).sum();
            let freq: f64 = spectrum.data[m * 256..(m + 1) * 256].iter().map(|c| c.norm_sqr()).sum::<f64>() / 256.0;
            assert_relative_eq!(time, freq, max_relative = 1e-6);
        }
        // Doppler stage on one range line
        let k = 43;
        let line: Vec<Complex64> = (0..128).map(|m| spectrum.data[m * 256 + k]).collect();
        let mut out = line.clone();
        FftPlanner::<f64>::new().plan_fft_forward(128).process(&mut out);
        let a: f64 = line.iter().map(|c| c.norm_sqr()).sum();
        let b: f64 = out.iter().map(|c| c.norm_sqr()).sum::<f64>() / 128.0;
        assert_relative_eq!(a, b, max_relative = 1e-6);
    }

    #[test]
    fn amplitude_scaling_scales_power() {
        let r = radar();
        let base = moving_target(6.0, 0.4, &r);
        let scaled: Vec<Vec<PropPath>> = base
            .iter()
            .map(|ps| ps.iter().map(|p| PropPath { amplitude: p.amplitude * 3.0, ..*p }).collect())
            .collect();
        let a = doppler_fft(&range_fft(&synth_beat(&base, &r).unwrap()));
        let b = doppler_fft(&range_fft(&synth_beat(&scaled, &r).unwrap()));
        let (row, col) = a.argmax();
        let gain_db = b.at(row, col) - a.at(row, col);
        assert_relative_eq!(gain_db as f64, 10.0 * 9f64.log10(), epsilon = 1e-3);
    }

    #[test]
    fn empty_room_has_nothing_off_zero_doppler() {
        let scene = Scene::room();
        let r = RadarConfig::with_pose(SceneKind::Room.radar_pose());
        let rdm = simulate_frame(&scene, &r, 0.0).unwrap();
        assert!(rdm.is_finite());
        for row in 0..rdm.height {
            for col in (0..rdm.width).filter(|&c| c != 64) {
                assert_eq!(rdm.at(row, col), DB_FLOOR as f32, "({row},{col})");
            }
        }
        assert!(rdm.data.iter().any(|&v| v > -100.0));
    }

    #[test]
    fn walking_actor_lights_up_predicted_doppler_bin() {
        let scene = Scene::corridor();
        let r = radar();
        let tx = r.pose.position();
        // walk straight away from the radar along the axis at 1 m/s
        let mut actor = Actor::straight_walk(Vec3::new(3.0, 1.0, 0.0), Vec3::new(11.0, 1.0, 0.0), 1.0, 0.0, 0.0);
        actor.body_points.truncate(1);
        actor.body_points[0].offset = [0.0, 0.0, tx.z];
        let scene = scene.with_actors(vec![actor]);
        let rdm = simulate_frame(&scene, &r, 2.0).unwrap();
        let range_row = ((5.0 - tx.x) / derive_params(&r).unwrap().range_resolution).round() as usize;
        let best = (range_row - 1..=range_row + 1)
            .flat_map(|row| (64 + 14..=64 + 16).map(move |c| (row, c)))
            .map(|(row, c)| rdm.at(row, c))
            .fold(f32::NEG_INFINITY, f32::max);
        assert!(best > DB_FLOOR as f32 + 20.0);
        assert!(best > -100.0);
    }

    #[test]
    fn two_actors_two_range_peaks() {
        let r = radar();
        let tx = r.pose.position();
        let mk = |x0: f64| {
            let mut a = Actor::straight_walk(Vec3::new(x0, 1.0, 0.0), Vec3::new(x0 + 4.0, 1.0, 0.0), 1.0, 0.0, 0.0);
            a.body_points.truncate(1);
            a.body_points[0].offset = [0.0, 0.0, tx.z];
            a
        };
        let mut scene = Scene::corridor().with_actors(vec![mk(3.0), mk(8.0)]);
        scene.static_scatterers.clear();
        scene.walls.clear();
        let rdm = simulate_frame(&scene, &r, 0.0).unwrap();
        let dr = derive_params(&r).unwrap().range_resolution;
        let row_max = |row: usize| (0..rdm.width).map(|c| rdm.at(row, c)).fold(f32::NEG_INFINITY, f32::max);
        let near = ((3.0 - tx.x) / dr).round() as usize;
        let far = ((8.0 - tx.x) / dr).round() as usize;
        let mid = (near + far) / 2;
        let peak = |row: usize| (row - 1..=row + 1).map(row_max).fold(f32::NEG_INFINITY, f32::max);
        assert!(peak(near) > row_max(mid) + 20.0);
        assert!(peak(far) > row_max(mid) + 20.0);
    }

    #[test]
    fn simulation_is_deterministic() {
        let r = radar();
        let actor = Actor::straight_walk(Vec3::new(2.0, 0.7, 0.0), Vec3::new(9.0, 1.4, 0.0), 1.2, 0.0, 0.4);
        let scene = Scene::corridor().with_actors(vec![actor]);
        let a = simulate_frame(&scene, &r, 0.5).unwrap();
        let b = simulate_frame(&scene, &r, 0.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_scatterer_peak_tracks_range() {
        let r = radar();
        let dr = derive_params(&r).unwrap().range_resolution;
        let mut scene = Scene::corridor();
        scene.walls.clear();
        let tx = r.pose.position();
        for range in [1.3, 4.4, 9.87, 15.2, 20.5] {
            scene.static_scatterers = vec![PointScatterer::new(tx + Vec3::new(range, 0.0, 0.0), 1.0)];
            let rdm = simulate_frame(&scene, &r, 0.0).unwrap();
            let (row, col) = rdm.argmax();
            assert_eq!(col, 64);
            assert!((row as f64 - (range / dr).round()).abs() <= 1.0, "range {range}: row {row}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn static_peak_sits_at_range_over_resolution(range in 0.6f64..20.5) {
                let r = radar();
                let dr = derive_params(&r).unwrap().range_resolution;
                let rdm = doppler_fft(&range_fft(&synth_beat(&moving_target(range, 0.0, &r), &r).unwrap()));
                let (row, col) = rdm.argmax();
                prop_assert_eq!(col, 64);
                prop_assert!((row as f64 - (range / dr).round()).abs() <= 1.0);
            }

            #[test]
            fn power_scales_with_amplitude_squared(range in 1.0f64..18.0, c in 0.1f64..10.0) {
                let r = radar();
                let base = moving_target(range, 0.5, &r);
                let scaled: Vec<Vec<PropPath>> = base
                    .iter()
                    .map(|ps| ps.iter().map(|p| PropPath { amplitude: p.amplitude * c, ..p.clone() }).collect())
                    .collect();
                let a = doppler_fft(&range_fft(&synth_beat(&base, &r).unwrap()));
                let b = doppler_fft(&range_fft(&synth_beat(&scaled, &r).unwrap()));
                let shift = (20.0 * c.log10()) as f32;
                for (x, y) in a.data.iter().zip(&b.data) {
                    if *x > -250.0 {
                        prop_assert!((y - x - shift).abs() < 1e-3);
                    }
                }
            }
        }
    }
}
