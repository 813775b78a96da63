//! Config-driven experiment pipeline: dataset generation, training, SNR
//! sweeps, label-fraction ablations and multi-seed aggregation.
//!
//! Output layout under `out_dir`:
//!
//! ```text
//! dataset/manifest.csv, dataset/frames/*.rdm
//! models/<variant>_s<seed>_f<fraction>.{ckpt,log.csv,runtime.txt}
//! eval/report.csv, eval/noise_hashes.csv, eval/confusion/*.csv
//! ablation/ablation.csv, ablation/table.csv
//! report/summary.csv, report/summary.txt, report/plot_*.dat
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    make_split, read_manifest, read_rdm, subsample_fraction, verify_manifest, write_manifest, write_rdm,
    DatasetError, FrameRecord, Split, SplitSpec, MANIFEST_FILE,
};
use crate::fmcw::{simulate_frame, ChainError, Domain, Rdm, RDM_SIZE};
use crate::metrics::{
    confusion, read_report_csv, snr_tag, t_interval, write_report_csv, MetricsError, MetricsReport, ReportRow,
};
use crate::model::{mix_seed, predict, train, BackboneDims, ExecMode, Model, ModelError, TrainConfig, TrainReport, VariantKind};
use crate::nn::{Checkpoint, NnError};
use crate::noise::{derive_noise_seed, frame_hash, inject_awgn, CellKey, NormError, Standardizer};
use crate::scene::{
    derive_params, Actor, ConfigError, DerivedParams, Occupancy, PointScatterer, RadarConfig, Scene, SceneKind, Vec3,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Norm(#[from] NormError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("missing artifact {0}")]
    Missing(PathBuf),
    #[error("noise realization for {file} at {snr} dB differs between variants")]
    NoiseIdentity { file: String, snr: f64 },
}

impl ExperimentError {
    /// 1 usage/config, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 1,
            ExperimentError::Model(ModelError::NonFinite { .. }) => 3,
            ExperimentError::Chain(ChainError::Config(_)) => 1,
            ExperimentError::NoiseIdentity { .. } => 3,
            _ => 2,
        }
    }
}

impl From<ConfigError> for ExperimentError {
    fn from(e: ConfigError) -> Self {
        ExperimentError::Config(e.to_string())
    }
}

impl From<NnError> for ExperimentError {
    fn from(e: NnError) -> Self {
        ExperimentError::Model(ModelError::Nn(e))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), ExperimentError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

/// Waveform fields of [`RadarConfig`]; the pose comes from the scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WaveformConfig {
    pub carrier_freq: f64,
    pub bandwidth: f64,
    pub sample_rate: f64,
    pub chirp_duration: f64,
    pub samples_per_chirp: usize,
    pub chirps_per_frame: usize,
    pub chirp_repetition: f64,
    pub hpbw_azimuth_deg: f64,
    pub hpbw_elevation_deg: f64,
}

impl Default for WaveformConfig {
    fn default() -> Self {
        let r = RadarConfig::with_pose(SceneKind::Corridor.radar_pose());
        Self {
            carrier_freq: r.carrier_freq,
            bandwidth: r.bandwidth,
            sample_rate: r.sample_rate,
            chirp_duration: r.chirp_duration,
            samples_per_chirp: r.samples_per_chirp,
            chirps_per_frame: r.chirps_per_frame,
            chirp_repetition: r.chirp_repetition,
            hpbw_azimuth_deg: r.hpbw_azimuth.to_degrees(),
            hpbw_elevation_deg: r.hpbw_elevation.to_degrees(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenes: Vec<SceneKind>,
    pub radar: WaveformConfig,
    pub frames_per_cell: usize,
    pub sequences_per_cell: usize,
    /// Seconds between consecutive frames of a sequence.
    pub frame_interval: f64,
    pub dataset_seed: u64,
    pub split_seed: u64,
    pub variants: Vec<String>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub snrs_db: Vec<f64>,
    pub noise_seed: u64,
    pub seeds: Vec<u64>,
    pub fractions: Vec<f64>,
    /// `analytic`, `shots` or `shots-<n>`.
    pub mode: String,
    pub deterministic: bool,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenes: SceneKind::ALL.to_vec(),
            radar: WaveformConfig::default(),
            frames_per_cell: 100,
            sequences_per_cell: 10,
            frame_interval: 0.25,
            dataset_seed: 7,
            split_seed: 2024,
            variants: VariantKind::ALL.iter().map(|v| v.as_str().to_string()).collect(),
            epochs: 15,
            batch_size: 32,
            learning_rate: 1e-3,
            snrs_db: vec![-20.0, -10.0, 10.0, 20.0],
            noise_seed: 1234,
            seeds: vec![11, 22, 33, 42, 55],
            fractions: vec![0.10, 0.30, 0.50],
            mode: "shots".into(),
            deterministic: true,
            out_dir: PathBuf::from("runs/desk"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.scenes.is_empty() {
            return bad("no scenes".into());
        }
        if self.frames_per_cell == 0 {
            return bad("frames_per_cell must be positive".into());
        }
        if self.sequences_per_cell < 2 || self.sequences_per_cell > self.frames_per_cell {
            return bad("need 2 <= sequences_per_cell <= frames_per_cell".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must be non-empty".into());
        }
        if let Some(f) = self.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return bad(format!("fraction {f} outside (0, 1]"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.frame_interval > 0.0) {
            return bad("frame_interval must be positive".into());
        }
        self.variant_kinds()?;
        self.exec_mode()?;
        for kind in &self.scenes {
            let r = self.radar_for(*kind);
            derive_params(&r)?;
            if r.samples_per_chirp / 2 != RDM_SIZE || r.chirps_per_frame != RDM_SIZE {
                return bad(format!("waveform must yield {RDM_SIZE}x{RDM_SIZE} maps"));
            }
        }
        Ok(())
    }

    pub fn variant_kinds(&self) -> Result<Vec<VariantKind>, ExperimentError> {
        self.variants
            .iter()
            .map(|v| VariantKind::parse(v).ok_or_else(|| ExperimentError::Config(format!("unknown variant {v}"))))
            .collect()
    }

    pub fn exec_mode(&self) -> Result<ExecMode, ExperimentError> {
        ExecMode::parse(&self.mode).ok_or_else(|| ExperimentError::Config(format!("unknown mode {}", self.mode)))
    }

    pub fn radar_for(&self, kind: SceneKind) -> RadarConfig {
        let w = &self.radar;
        RadarConfig {
            carrier_freq: w.carrier_freq,
            bandwidth: w.bandwidth,
            sample_rate: w.sample_rate,
            chirp_duration: w.chirp_duration,
            samples_per_chirp: w.samples_per_chirp,
            chirps_per_frame: w.chirps_per_frame,
            chirp_repetition: w.chirp_repetition,
            pose: kind.radar_pose(),
            hpbw_azimuth: w.hpbw_azimuth_deg.to_radians(),
            hpbw_elevation: w.hpbw_elevation_deg.to_radians(),
        }
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.out_dir.join("dataset")
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.learning_rate,
            seed,
            deterministic: self.deterministic,
        }
    }
}

// ---------------------------------------------------------------- simulate

/// Scene preset with per-sequence clutter variation: static scatterers move
/// by up to 5 cm and their reflectivity varies by +/-30%.
pub fn jittered_scene<R: Rng>(kind: SceneKind, rng: &mut R) -> Scene {
    let mut scene = Scene::preset(kind);
    let (lx, ly) = kind.extents();
    for s in &mut scene.static_scatterers {
        let mut p = s.position();
        p.x = (p.x + rng.random_range(-0.05..0.05)).clamp(0.05, lx - 0.05);
        p.y = (p.y + rng.random_range(-0.05..0.05)).clamp(0.05, ly - 0.05);
        *s = PointScatterer::new(p, s.reflectivity * rng.random_range(0.7..1.3));
    }
    scene
}

/// Straight walk that stays at least 0.5 m from the walls for `duration`.
pub fn random_walk<R: Rng>(kind: SceneKind, duration: f64, rng: &mut R) -> Actor {
    let (lx, ly) = kind.extents();
    let (x0, x1, y0, y1) = (1.0, lx - 0.5, 0.5, ly - 0.5);
    let inside = |p: &Vec3| p.x >= x0 && p.x <= x1 && p.y >= y0 && p.y <= y1;
    let phase = rng.random_range(0.0..2.0 * PI);
    for _ in 0..1000 {
        let speed = rng.random_range(0.5..1.5);
        let start = Vec3::new(rng.random_range(x0..x1), rng.random_range(y0..y1), 0.0);
        let heading = rng.random_range(0.0..2.0 * PI);
        let end = start + Vec3::new(heading.cos(), heading.sin(), 0.0) * (speed * duration);
        if inside(&end) {
            return Actor::straight_walk(start, end, speed, 0.0, phase);
        }
    }
    // unreachable for the presets; walk slowly along the long axis
    let start = Vec3::new(x0, 0.5 * (y0 + y1), 0.0);
    let speed = ((x1 - x0) / duration).min(1.0);
    Actor::straight_walk(start, start + Vec3::new(speed * duration, 0.0, 0.0), speed, 0.0, phase)
}

#[derive(Debug, Clone)]
pub struct SimulateOutcome {
    pub records: Vec<FrameRecord>,
    pub derived: Vec<(SceneKind, DerivedParams)>,
    pub wall_clock_s: f64,
}

pub fn derived_table(derived: &[(SceneKind, DerivedParams)]) -> String {
    let mut s = String::from("scene     dR[m]  Rmax[m]  mu[Hz/s]   vmax[m/s]  dv[m/s]  N\n");
    for (k, d) in derived {
        let _ = writeln!(
            s,
            "{:<9} {:.3}  {:.2}    {:.3e}  {:.3}      {:.4}   {}",
            k.as_str(),
            d.range_resolution,
            d.max_range,
            d.chirp_slope,
            d.max_velocity,
            d.velocity_resolution,
            d.samples_per_chirp
        );
    }
    s
}

struct FrameJob {
    record: FrameRecord,
    scene_seq: usize,
    time: f64,
}

/// Generates `frames_per_cell` frames for every (scene, label) cell.
pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<SimulateOutcome, ExperimentError> {
    cfg.validate()?;
    let started = Instant::now();
    let dir = cfg.dataset_dir();
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(io_err(&frames_dir))?;

    let seqs = cfg.sequences_per_cell;
    let mut scenes = Vec::new();
    let mut jobs = Vec::new();
    let mut sequence = 0u32;
    for &kind in &cfg.scenes {
        for label in Occupancy::ALL {
            for s in 0..seqs {
                // frames spread as evenly as possible over the sequences
                let n = cfg.frames_per_cell / seqs + usize::from(s < cfg.frames_per_cell % seqs);
                let seed = mix_seed(&[cfg.dataset_seed, kind as u64, label as u64, s as u64]);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let duration = n as f64 * cfg.frame_interval;
                let actors = (0..label.index()).map(|_| random_walk(kind, duration, &mut rng)).collect();
                let scene = jittered_scene(kind, &mut rng).with_actors(actors);
                for f in 0..n {
                    jobs.push(FrameJob {
                        record: FrameRecord {
                            path: format!("frames/{}_{}_{:04}_{:03}.rdm", kind.as_str(), label as u8, sequence, f),
                            label: label as u8,
                            domain: Domain::Synthetic,
                            scene: kind,
                            sequence,
                            frame: f as u32,
                            seed,
                        },
                        scene_seq: scenes.len(),
                        time: f as f64 * cfg.frame_interval,
                    });
                }
                scenes.push(scene);
                sequence += 1;
            }
        }
    }
    jobs.par_iter()
        .map(|job| -> Result<(), ExperimentError> {
            let scene = &scenes[job.scene_seq];
            let mut rdm = simulate_frame(scene, &cfg.radar_for(scene.kind), job.time)?;
            rdm.meta = job.record.meta();
            write_rdm(&rdm, &dir.join(&job.record.path))?;
            Ok(())
        })
        .collect::<Result<Vec<()>, _>>()?;
    let records: Vec<FrameRecord> = jobs.into_iter().map(|j| j.record).collect();
    write_manifest(&records, &dir.join(MANIFEST_FILE))?;
    let derived = cfg
        .scenes
        .iter()
        .map(|&k| Ok((k, derive_params(&cfg.radar_for(k))?)))
        .collect::<Result<Vec<_>, ConfigError>>()?;
    Ok(SimulateOutcome {
        records,
        derived,
        wall_clock_s: started.elapsed().as_secs_f64(),
    })
}

/// A scene description file: the scene plus how many frames to render.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneFile {
    pub scene: Scene,
    #[serde(default = "default_scene_frames")]
    pub frames: usize,
    #[serde(default)]
    pub start_time: f64,
}

impl SceneFile {
    pub fn to_toml(&self) -> Result<String, ExperimentError> {
        toml::to_string(self).map_err(|e| ExperimentError::Config(e.to_string()))
    }
}

fn default_scene_frames() -> usize {
    1
}

pub fn load_scene_file(path: &Path) -> Result<SceneFile, ExperimentError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let sf: SceneFile = toml::from_str(&text).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
    sf.scene.validate()?;
    Ok(sf)
}

/// Renders the frames of one scene file into `<out_dir>/scene/`.
pub fn cmd_render_scene(cfg: &ExperimentConfig, scene_file: &Path) -> Result<Vec<FrameRecord>, ExperimentError> {
    let sf = load_scene_file(scene_file)?;
    let dir = cfg.out_dir.join("scene");
    fs::create_dir_all(dir.join("frames")).map_err(io_err(&dir))?;
    let radar = cfg.radar_for(sf.scene.kind);
    let mut records = Vec::new();
    for f in 0..sf.frames {
        let record = FrameRecord {
            path: format!("frames/{:03}.rdm", f),
            label: sf.scene.label as u8,
            domain: Domain::Synthetic,
            scene: sf.scene.kind,
            sequence: 0,
            frame: f as u32,
            seed: 0,
        };
        let mut rdm = simulate_frame(&sf.scene, &radar, sf.start_time + f as f64 * cfg.frame_interval)?;
        rdm.meta = record.meta();
        write_rdm(&rdm, &dir.join(&record.path))?;
        records.push(record);
    }
    write_manifest(&records, &dir.join(MANIFEST_FILE))?;
    Ok(records)
}

// ---------------------------------------------------------------- dataset

pub struct LoadedDataset {
    pub records: Vec<FrameRecord>,
    pub frames: Vec<Rdm>,
    pub split: Split,
    pub standardizer: Standardizer,
}

fn cell_of(r: &FrameRecord) -> CellKey {
    CellKey {
        domain: r.domain,
        scene: r.scene,
        label: r.occupancy(),
    }
}

impl LoadedDataset {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self, ExperimentError> {
        let dir = cfg.dataset_dir();
        let manifest = dir.join(MANIFEST_FILE);
        if !manifest.exists() {
            return Err(ExperimentError::Missing(manifest));
        }
        let records = read_manifest(&manifest)?;
        verify_manifest(&dir, &records)?;
        let frames = records
            .par_iter()
            .map(|r| read_rdm(&dir.join(&r.path)))
            .collect::<Result<Vec<_>, _>>()?;
        let split = make_split(&records, &SplitSpec::new(cfg.split_seed))?;
        // statistics come from training frames only
        let mut cells: BTreeMap<CellKey, Vec<&Rdm>> = BTreeMap::new();
        for &i in &split.train {
            cells.entry(cell_of(&records[i])).or_default().push(&frames[i]);
        }
        let standardizer = Standardizer::fit(cells)?;
        Ok(Self {
            records,
            frames,
            split,
            standardizer,
        })
    }

    pub fn standardized(&self, i: usize) -> Result<Vec<f32>, ExperimentError> {
        Ok(self.standardizer.apply(&self.frames[i].data, &cell_of(&self.records[i]))?)
    }

    /// AWGN on the stored frame, then training-split standardization.
    pub fn noisy_standardized(&self, i: usize, snr_db: f64, base_seed: u64) -> Result<Vec<f32>, ExperimentError> {
        let r = &self.records[i];
        let seed = derive_noise_seed(base_seed, &r.path, snr_db);
        let (noisy, outcome) = inject_awgn(&self.frames[i].data, snr_db, seed);
        if !outcome.applied {
            log::warn!("{}: zero-power frame left without noise", r.path);
        }
        Ok(self.standardizer.apply(&noisy, &cell_of(r))?)
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.records[i].label as usize).collect()
    }
}

// ---------------------------------------------------------------- train

pub fn run_name(variant: VariantKind, seed: u64, fraction: f64) -> String {
    format!("{}_s{}_f{:.2}", variant.as_str(), seed, fraction)
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub report: TrainReport,
    pub train_size: usize,
    pub checkpoint: PathBuf,
}

/// Trains one variant on the (subsampled) training split, in memory.
pub fn train_variant(
    cfg: &ExperimentConfig,
    ds: &LoadedDataset,
    variant: VariantKind,
    seed: u64,
    fraction: f64,
) -> Result<(Model<f32>, TrainReport, usize), ExperimentError> {
    let idx = subsample_fraction(&ds.records, &ds.split.train, fraction, seed)?;
    let frames = idx
        .iter()
        .map(|&i| ds.standardized(i))
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&[f32]> = frames.iter().map(Vec::as_slice).collect();
    let labels = ds.labels(&idx);
    let mut model = Model::<f32>::new(variant, BackboneDims::PAPER, cfg.exec_mode()?, seed);
    let report = train(&mut model, &refs, &labels, &cfg.train_config(seed))?;
    Ok((model, report, idx.len()))
}

pub fn cmd_train(
    cfg: &ExperimentConfig,
    variant: VariantKind,
    seed: u64,
    fraction: f64,
) -> Result<TrainOutcome, ExperimentError> {
    cfg.validate()?;
    let ds = LoadedDataset::load(cfg)?;
    train_and_save(cfg, &ds, variant, seed, fraction)
}

pub fn train_and_save(
    cfg: &ExperimentConfig,
    ds: &LoadedDataset,
    variant: VariantKind,
    seed: u64,
    fraction: f64,
) -> Result<TrainOutcome, ExperimentError> {
    let (model, report, train_size) = train_variant(cfg, ds, variant, seed, fraction)?;
    let dir = cfg.out_dir.join("models");
    let name = run_name(variant, seed, fraction);
    let checkpoint = dir.join(format!("{name}.ckpt"));
    write(&checkpoint, model.to_checkpoint().encode())?;
    let mut log = String::from("epoch,loss,acc\n");
    for e in &report.epochs {
        let _ = writeln!(log, "{},{:.6},{:.6}", e.epoch, e.loss, e.acc);
    }
    write(&dir.join(format!("{name}.log.csv")), log)?;
    write(
        &dir.join(format!("{name}.runtime.txt")),
        format!(
            "wall_clock_s={:.3}\npqc_evals={}\nbatches={}\nsamples={}\ntrain_size={}\n",
            report.wall_clock_s, report.pqc_evals, report.batches, report.samples, train_size
        ),
    )?;
    Ok(TrainOutcome {
        model,
        report,
        train_size,
        checkpoint,
    })
}

// ---------------------------------------------------------------- eval

/// Per (file, snr) hash of the noisy tensor delivered to the first
/// variant; every later variant must receive the same bits.
#[derive(Debug, Default)]
pub struct NoiseRegistry {
    pub hashes: BTreeMap<(String, u64), String>,
}

impl NoiseRegistry {
    pub fn check(&mut self, file: &str, snr_db: f64, hash: String) -> Result<(), ExperimentError> {
        match self.hashes.get(&(file.to_string(), snr_db.to_bits())) {
            Some(h) if *h != hash => Err(ExperimentError::NoiseIdentity {
                file: file.to_string(),
                snr: snr_db,
            }),
            Some(_) => Ok(()),
            None => {
                self.hashes.insert((file.to_string(), snr_db.to_bits()), hash);
                Ok(())
            }
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("path,snr_db,sha256\n");
        for ((file, snr), h) in &self.hashes {
            let _ = writeln!(s, "{file},{},{h}", f64::from_bits(*snr));
        }
        s
    }
}

/// Clean plus every configured SNR.
pub fn snr_conditions(cfg: &ExperimentConfig) -> Vec<Option<f64>> {
    std::iter::once(None).chain(cfg.snrs_db.iter().map(|&s| Some(s))).collect()
}

/// Test-split frames for one condition, checked against the registry.
pub fn test_inputs(
    cfg: &ExperimentConfig,
    ds: &LoadedDataset,
    snr: Option<f64>,
    registry: &mut NoiseRegistry,
) -> Result<Vec<Vec<f32>>, ExperimentError> {
    let frames = ds
        .split
        .test
        .par_iter()
        .map(|&i| match snr {
            None => ds.standardized(i),
            Some(s) => ds.noisy_standardized(i, s, cfg.noise_seed),
        })
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(s) = snr {
        for (f, &i) in frames.iter().zip(&ds.split.test) {
            registry.check(&ds.records[i].path, s, frame_hash(f))?;
        }
    }
    Ok(frames)
}

pub fn evaluate_model(
    model: &Model<f32>,
    inputs: &[Vec<f32>],
    truth: &[usize],
    seed: u64,
    snr: Option<f64>,
) -> Result<MetricsReport, ExperimentError> {
    let refs: Vec<&[f32]> = inputs.iter().map(Vec::as_slice).collect();
    let shot_seed = mix_seed(&[seed, snr.map_or(0, f64::to_bits)]);
    let (pred, _) = predict(model, &refs, shot_seed)?;
    let cm = confusion(truth, &pred)?;
    Ok(MetricsReport::from_confusion(
        model.kind.as_str(),
        Domain::Synthetic.as_str(),
        snr,
        seed,
        cm,
    )?)
}

pub struct EvalOutcome {
    pub rows: Vec<MetricsReport>,
    pub registry: NoiseRegistry,
    pub report_path: PathBuf,
}

pub fn load_model(path: &Path) -> Result<Model<f32>, ExperimentError> {
    if !path.exists() {
        return Err(ExperimentError::Missing(path.to_path_buf()));
    }
    Ok(Model::from_checkpoint(&Checkpoint::load(path)?)?)
}

/// Evaluates the full-fraction checkpoint of every (variant, seed) on the
/// clean test split and at every SNR.
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<EvalOutcome, ExperimentError> {
    cfg.validate()?;
    let ds = LoadedDataset::load(cfg)?;
    let variants = cfg.variant_kinds()?;
    let mut models = Vec::new();
    for &v in &variants {
        for &seed in &cfg.seeds {
            let path = cfg.out_dir.join("models").join(format!("{}.ckpt", run_name(v, seed, 1.0)));
            models.push((v, seed, load_model(&path)?));
        }
    }
    let truth = ds.labels(&ds.split.test);
    let mut registry = NoiseRegistry::default();
    let mut rows = Vec::new();
    let started = Instant::now();
    for snr in snr_conditions(cfg) {
        // inputs are regenerated for each variant so the identity check
        // covers the whole noise path
        for (v, seed, model) in &models {
            let inputs = test_inputs(cfg, &ds, snr, &mut registry)?;
            let r = evaluate_model(model, &inputs, &truth, *seed, snr)?;
            log::info!("{v} seed {seed} snr {}: ba {:.3}", snr_tag(snr), r.ba);
            rows.push(r);
        }
    }
    rows.sort_by_key(|r| {
        (
            variants.iter().position(|v| v.as_str() == r.variant),
            cfg.seeds.iter().position(|&s| s == r.seed),
            snr_conditions(cfg).iter().position(|s| *s == r.snr_db),
        )
    });
    let eval_dir = cfg.out_dir.join("eval");
    let report_path = eval_dir.join("report.csv");
    fs::create_dir_all(eval_dir.join("confusion")).map_err(io_err(&eval_dir))?;
    write_report_csv(&rows, &report_path).map_err(io_err(&report_path))?;
    for r in &rows {
        let p = eval_dir
            .join("confusion")
            .join(format!("{}_s{}_{}.csv", r.variant, r.seed, snr_tag(r.snr_db)));
        write(&p, r.confusion.to_csv())?;
    }
    write(&eval_dir.join("noise_hashes.csv"), registry.to_csv())?;
    write(
        &eval_dir.join("runtime.txt"),
        format!("wall_clock_s={:.3}\n", started.elapsed().as_secs_f64()),
    )?;
    Ok(EvalOutcome {
        rows,
        registry,
        report_path,
    })
}

// ---------------------------------------------------------------- ablate

pub const ABLATION_HEADER: &str = "variant,fraction,seed,ba";

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: VariantKind,
    pub fraction: f64,
    pub seed: u64,
    pub ba: f64,
}

pub struct AblationOutcome {
    pub rows: Vec<AblationRow>,
    /// Variants whose median BA decreases somewhere along the fractions.
    pub non_monotone: Vec<VariantKind>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn median_by_fraction(rows: &[AblationRow], variant: VariantKind, fractions: &[f64]) -> Vec<f64> {
    fractions
        .iter()
        .map(|&f| {
            let mut v: Vec<f64> = rows
                .iter()
                .filter(|r| r.variant == variant && r.fraction == f)
                .map(|r| r.ba)
                .collect();
            if v.is_empty() {
                f64::NAN
            } else {
                median(&mut v)
            }
        })
        .collect()
}

/// Trains every variant at every fraction and seed and scores clean BA on
/// the full test split.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<AblationOutcome, ExperimentError> {
    cfg.validate()?;
    let ds = LoadedDataset::load(cfg)?;
    let variants = cfg.variant_kinds()?;
    let truth = ds.labels(&ds.split.test);
    let clean = test_inputs(cfg, &ds, None, &mut NoiseRegistry::default())?;
    let mut rows = Vec::new();
    for &v in &variants {
        for &f in &cfg.fractions {
            for &seed in &cfg.seeds {
                let (model, _, n) = train_variant(cfg, &ds, v, seed, f)?;
                let r = evaluate_model(&model, &clean, &truth, seed, None)?;
                log::info!("ablation {v} fraction {f} seed {seed} ({n} frames): ba {:.3}", r.ba);
                rows.push(AblationRow {
                    variant: v,
                    fraction: f,
                    seed,
                    ba: r.ba,
                });
            }
        }
    }
    let dir = cfg.out_dir.join("ablation");
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in &rows {
        let _ = writeln!(s, "{},{:.2},{},{:.6}", r.variant, r.fraction, r.seed, r.ba);
    }
    write(&dir.join("ablation.csv"), s)?;

    let mut table = String::from("variant");
    for f in &cfg.fractions {
        let _ = write!(table, ",{:.0}%", f * 100.0);
    }
    table.push('\n');
    let mut non_monotone = Vec::new();
    for &v in &variants {
        let meds = median_by_fraction(&rows, v, &cfg.fractions);
        let _ = write!(table, "{v}");
        for &f in &cfg.fractions {
            let vals: Vec<f64> = rows.iter().filter(|r| r.variant == v && r.fraction == f).map(|r| r.ba).collect();
            let iv = t_interval(&vals);
            match iv.half_width {
                Some(h) => {
                    let _ = write!(table, ",{:.3} +/- {:.3}", iv.mean, h);
                }
                None => {
                    let _ = write!(table, ",{:.3}", iv.mean);
                }
            }
        }
        table.push('\n');
        let mut order: Vec<(f64, f64)> = cfg.fractions.iter().copied().zip(meds).collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0));
        if order.windows(2).any(|w| w[1].1 < w[0].1) {
            non_monotone.push(v);
            if v == VariantKind::CompactCnn {
                log::warn!("compact-cnn median BA is not monotone in the label fraction: {order:?}");
            }
        }
    }
    write(&dir.join("table.csv"), table)?;
    Ok(AblationOutcome { rows, non_monotone })
}

// ---------------------------------------------------------------- report

pub const SUMMARY_HEADER: &str = "variant,domain,snr_db,n,metric,mean,ci95";

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub variant: String,
    pub domain: String,
    pub snr: String,
    pub metric: &'static str,
    pub n: usize,
    pub mean: f64,
    pub ci95: Option<f64>,
}

pub struct ReportOutcome {
    pub rows: Vec<SummaryRow>,
    /// (variant, snr) cells expected from the config but absent.
    pub gaps: Vec<(String, String)>,
}

const METRICS: [&str; 4] = ["acc", "ba", "macro_f1", "rec_pop"];

fn metric_of(r: &ReportRow, m: &str) -> f64 {
    match m {
        "acc" => r.acc,
        "ba" => r.ba,
        "macro_f1" => r.macro_f1,
        _ => r.rec_pop,
    }
}

/// Mean and 95% t-interval across seeds per (variant, snr, metric), plus
/// plot data files and a readable summary.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<ReportOutcome, ExperimentError> {
    let src = cfg.out_dir.join("eval").join("report.csv");
    if !src.exists() {
        return Err(ExperimentError::Missing(src));
    }
    let input = read_report_csv(&src).map_err(DatasetError::from)?;
    let snrs: Vec<String> = snr_conditions(cfg).into_iter().map(snr_tag).collect();
    let mut rows = Vec::new();
    let mut gaps = Vec::new();
    let mut seen = BTreeSet::new();
    for v in &cfg.variants {
        for snr in &snrs {
            let cell: Vec<&ReportRow> = input.iter().filter(|r| &r.variant == v && &r.snr_db == snr).collect();
            if cell.is_empty() {
                gaps.push((v.clone(), snr.clone()));
                continue;
            }
            seen.insert((v.clone(), snr.clone()));
            for m in METRICS {
                let vals: Vec<f64> = cell.iter().map(|r| metric_of(r, m)).collect();
                let iv = t_interval(&vals);
                rows.push(SummaryRow {
                    variant: v.clone(),
                    domain: cell[0].domain.clone(),
                    snr: snr.clone(),
                    metric: m,
                    n: iv.n,
                    mean: iv.mean,
                    ci95: iv.half_width,
                });
            }
        }
    }
    let dir = cfg.out_dir.join("report");
    let mut csv = format!("{SUMMARY_HEADER}\n");
    for r in &rows {
        let ci = r.ci95.map_or(String::new(), |c| format!("{c:.6}"));
        let _ = writeln!(csv, "{},{},{},{},{},{:.6},{}", r.variant, r.domain, r.snr, r.n, r.metric, r.mean, ci);
    }
    write(&dir.join("summary.csv"), csv)?;

    for v in &cfg.variants {
        for m in METRICS {
            let mut dat = format!("# {v} {m}: snr_db mean yerr\n");
            let mut pts: Vec<(f64, &SummaryRow)> = rows
                .iter()
                .filter(|r| &r.variant == v && r.metric == m)
                .filter_map(|r| r.snr.parse::<f64>().ok().map(|x| (x, r)))
                .collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            if let Some(c) = rows.iter().find(|r| &r.variant == v && r.metric == m && r.snr == "clean") {
                let _ = writeln!(dat, "# clean {:.6} {:.6}", c.mean, c.ci95.unwrap_or(0.0));
            }
            for (x, r) in pts {
                let _ = writeln!(dat, "{x} {:.6} {:.6}", r.mean, r.ci95.unwrap_or(0.0));
            }
            write(&dir.join(format!("plot_{v}_{m}.dat")), dat)?;
        }
    }

    let mut txt = String::from("Balanced accuracy, mean +/- 95% t-interval across seeds\n\n");
    let _ = write!(txt, "{:<20}", "variant");
    for s in &snrs {
        let _ = write!(txt, "{:>18}", s);
    }
    txt.push('\n');
    for v in &cfg.variants {
        let _ = write!(txt, "{v:<20}");
        for s in &snrs {
            let cell = rows.iter().find(|r| &r.variant == v && &r.snr == s && r.metric == "ba");
            let text = match cell {
                Some(SummaryRow { mean, ci95: Some(c), .. }) => format!("{mean:.3} +/- {c:.3}"),
                Some(SummaryRow { mean, ci95: None, .. }) => format!("{mean:.3} (n=1)"),
                None => "-".into(),
            };
            let _ = write!(txt, "{text:>18}");
        }
        txt.push('\n');
    }
    if rows.iter().any(|r| r.ci95.is_none()) {
        txt.push_str("\nCells with a single seed are point estimates.\n");
    }
    txt.push_str("\nGaps:\n");
    if gaps.is_empty() {
        txt.push_str("none\n");
    }
    for (v, s) in &gaps {
        let _ = writeln!(txt, "{v} at {s}: no results");
    }
    write(&dir.join("summary.txt"), txt)?;
    Ok(ReportOutcome { rows, gaps })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let back: ExperimentConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn config_errors() {
        let mut c = ExperimentConfig {
            frames_per_cell: 0,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(ExperimentError::Config(_))));
        c.frames_per_cell = 100;
        c.fractions = vec![0.0];
        assert!(c.validate().is_err());
        c.fractions = vec![0.5];
        c.seeds.clear();
        assert!(c.validate().is_err());
        c.seeds = vec![1];
        c.variants = vec!["resnet".into()];
        assert!(c.validate().is_err());
        c.variants = vec!["hqnn".into()];
        c.radar.bandwidth *= 2.0;
        c.validate().unwrap();
        c.radar.chirps_per_frame = 64;
        assert!(c.validate().is_err());
        assert!(toml::from_str::<ExperimentConfig>("epochs = 3\nbogus = 1\n").is_err());
    }

    #[test]
    fn walks_stay_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in SceneKind::ALL {
            let (lx, ly) = kind.extents();
            for _ in 0..200 {
                let a = random_walk(kind, 2.5, &mut rng);
                for w in &a.trajectory {
                    assert!(w.position[0] >= 0.99 && w.position[0] <= lx - 0.49);
                    assert!(w.position[1] >= 0.49 && w.position[1] <= ly - 0.49);
                }
            }
        }
    }

    #[test]
    fn noise_registry_detects_mismatch() {
        let mut r = NoiseRegistry::default();
        r.check("a", -10.0, "x".into()).unwrap();
        r.check("a", -10.0, "x".into()).unwrap();
        r.check("a", 10.0, "y".into()).unwrap();
        assert!(matches!(r.check("a", -10.0, "z".into()), Err(ExperimentError::NoiseIdentity { .. })));
    }

    #[test]
    fn scene_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scene = Scene::preset(SceneKind::Room).with_actors(vec![random_walk(SceneKind::Room, 1.0, &mut rng)]);
        let sf = SceneFile {
            scene,
            frames: 3,
            start_time: 0.0,
        };
        let back: SceneFile = toml::from_str(&sf.to_toml().unwrap()).unwrap();
        back.scene.validate().unwrap();
        assert_eq!(back.frames, 3);
        assert_eq!(back.scene.label, Occupancy::OnePerson);
    }

    #[test]
    fn medians() {
        let rows: Vec<AblationRow> = [(0.1, 0.5), (0.1, 0.7), (0.1, 0.6), (0.3, 0.8), (0.3, 0.9)]
            .iter()
            .map(|&(f, ba)| AblationRow {
                variant: VariantKind::CompactCnn,
                fraction: f,
                seed: 0,
                ba,
            })
            .collect();
        let m = median_by_fraction(&rows, VariantKind::CompactCnn, &[0.1, 0.3, 0.5]);
        assert_eq!(m[0], 0.6);
        assert!((m[1] - 0.85).abs() < 1e-12);
        assert!(m[2].is_nan());
    }
}
