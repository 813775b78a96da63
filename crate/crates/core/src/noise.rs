//! Test-time AWGN injection and per-cell standardization.
//!
//! Noise is added to frames as stored (dB pixels), before standardization.
//! Standardization statistics come from training frames only.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fmcw::{Domain, Rdm};
use crate::scene::{Occupancy, SceneKind};

/// Guard on the standard deviation applied during standardization.
pub const SIGMA_EPS: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum NormError {
    #[error("standardizer cell {0} has no training frames")]
    EmptyCell(CellKey),
    #[error("standardizer has no statistics for cell {0}")]
    UnknownCell(CellKey),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellKey {
    pub domain: Domain,
    pub scene: SceneKind,
    pub label: Occupancy,
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.domain.as_str(), self.scene.as_str(), self.label as u8)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CellStats {
    pub mean: f64,
    pub std: f64,
}

impl CellStats {
    pub fn forward(&self, x: f64, eps: f64) -> f64 {
        (x - self.mean) / self.std.max(eps)
    }

    pub fn inverse(&self, y: f64, eps: f64) -> f64 {
        y * self.std.max(eps) + self.mean
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub cells: BTreeMap<CellKey, CellStats>,
    pub eps: f64,
}

impl Standardizer {
    /// Pooled mean and population standard deviation over every pixel of
    /// every frame in each cell.
    pub fn fit<'a, I>(cells: I) -> Result<Self, NormError>
    where
        I: IntoIterator<Item = (CellKey, Vec<&'a Rdm>)>,
    {
        let mut out = BTreeMap::new();
        for (key, frames) in cells {
            let n: usize = frames.iter().map(|f| f.data.len()).sum();
            if n == 0 {
                return Err(NormError::EmptyCell(key));
            }
            let sum: f64 = frames.iter().flat_map(|f| &f.data).map(|&v| v as f64).sum();
            let mean = sum / n as f64;
            let ss: f64 = frames
                .iter()
                .flat_map(|f| &f.data)
                .map(|&v| (v as f64 - mean).powi(2))
                .sum();
            out.insert(key, CellStats { mean, std: (ss / n as f64).sqrt() });
        }
        Ok(Self {
            cells: out,
            eps: SIGMA_EPS,
        })
    }

    pub fn stats(&self, cell: &CellKey) -> Result<CellStats, NormError> {
        self.cells.get(cell).copied().ok_or(NormError::UnknownCell(*cell))
    }

    /// `(x - mean) / max(std, eps)` per pixel.
    pub fn apply(&self, frame: &[f32], cell: &CellKey) -> Result<Vec<f32>, NormError> {
        let s = self.stats(cell)?;
        Ok(frame.iter().map(|&v| s.forward(v as f64, self.eps) as f32).collect())
    }

    pub fn invert(&self, frame: &[f32], cell: &CellKey) -> Result<Vec<f32>, NormError> {
        let s = self.stats(cell)?;
        Ok(frame.iter().map(|&v| s.inverse(v as f64, self.eps) as f32).collect())
    }
}

/// SNR sweep and the base seed from which per-frame noise seeds derive.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub snrs_db: Vec<f64>,
    pub base_seed: u64,
}

impl NoiseSpec {
    pub fn seed_for(&self, file_id: &str, snr_db: f64) -> u64 {
        derive_noise_seed(self.base_seed, file_id, snr_db)
    }
}

/// Pure function of `(base_seed, file id, snr)`.
pub fn derive_noise_seed(base_seed: u64, file_id: &str, snr_db: f64) -> u64 {
    let mut h = Sha256::new();
    h.update(base_seed.to_le_bytes());
    h.update((file_id.len() as u64).to_le_bytes());
    h.update(file_id.as_bytes());
    h.update(snr_db.to_bits().to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseOutcome {
    pub signal_power: f64,
    pub noise_variance: f64,
    /// False when the frame has zero power and was returned unchanged.
    pub applied: bool,
}

/// Standard normal draws by Box-Muller over a ChaCha stream keyed by `seed`.
pub fn gaussian_stream(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n + 1);
    while out.len() < n {
        // u1 in (0, 1]
        let u1 = 1.0 - rng.random::<f64>();
        let u2: f64 = rng.random();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * PI * u2).sin_cos();
        out.push(r * c);
        out.push(r * s);
    }
    out.truncate(n);
    out
}

/// `Y = X + W`, `W ~ N(0, P_x / 10^(snr/10))` i.i.d. with `P_x = mean(X^2)`.
pub fn inject_awgn(frame: &[f32], snr_db: f64, seed: u64) -> (Vec<f32>, NoiseOutcome) {
    let n = frame.len();
    let power = if n == 0 {
        0.0
    } else {
        frame.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / n as f64
    };
    if power == 0.0 {
        return (
            frame.to_vec(),
            NoiseOutcome {
                signal_power: 0.0,
                noise_variance: 0.0,
                applied: false,
            },
        );
    }
    let variance = power / 10f64.powf(snr_db / 10.0);
    let sd = variance.sqrt();
    let noisy = frame
        .iter()
        .zip(gaussian_stream(seed, n))
        .map(|(&x, g)| (x as f64 + sd * g) as f32)
        .collect();
    (
        noisy,
        NoiseOutcome {
            signal_power: power,
            noise_variance: variance,
            applied: true,
        },
    )
}

/// `inject_awgn` on a whole map, keeping metadata.
pub fn inject_awgn_rdm(frame: &Rdm, snr_db: f64, seed: u64) -> (Rdm, NoiseOutcome) {
    let (data, outcome) = inject_awgn(&frame.data, snr_db, seed);
    (Rdm { data, ..frame.clone() }, outcome)
}

/// Hex SHA-256 of the little-endian pixel bytes.
pub fn frame_hash(data: &[f32]) -> String {
    let mut h = Sha256::new();
    for v in data {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
