//! On-disk frames, manifests, sequence-level splits and label-fraction
//! subsets.
//!
//! `RDM1` layout (all little-endian):
//!
//! ```text
//! b"RDM1" | u32 height | u32 width | height*width f32, row-major
//!         | u32 blob length | UTF-8 blob of key=value lines
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fmcw::{Domain, Rdm, RdmMeta, RDM_SIZE};
use crate::scene::{Occupancy, SceneKind};

pub const RDM_MAGIC: &[u8; 4] = b"RDM1";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic {0:?}, expected RDM1")]
    BadMagic([u8; 4]),
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("frame is {found:?}, expected {expected:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("bad metadata: {0}")]
    Metadata(String),
    #[error("manifest: {0}")]
    Csv(#[from] csv::Error),
    #[error("manifest row {row} ({path}): {reason}")]
    Inconsistent {
        row: usize,
        path: String,
        reason: String,
    },
    #[error("stratum {0} has fewer than two sequences; train and test cannot be separated")]
    SingleSequence(String),
    #[error("fraction {fraction} leaves no frames for label {label}")]
    EmptySubset { fraction: f64, label: u8 },
    #[error("fraction {0} outside (0, 1]")]
    BadFraction(f64),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn encode_meta(meta: &RdmMeta) -> String {
    format!(
        "label={}\ndomain={}\nscene={}\nsequence={}\nframe={}\nseed={}\n",
        meta.label,
        meta.domain.as_str(),
        meta.scene,
        meta.sequence,
        meta.frame,
        meta.seed
    )
}

fn decode_meta(text: &str) -> Result<RdmMeta, DatasetError> {
    let mut meta = RdmMeta::default();
    let mut seen = BTreeSet::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| DatasetError::Metadata(format!("line without '=': {line}")))?;
        let bad = |_| DatasetError::Metadata(format!("bad value for {key}: {value}"));
        match key {
            "label" => meta.label = value.parse().map_err(bad)?,
            "domain" => {
                meta.domain = Domain::parse(value)
                    .ok_or_else(|| DatasetError::Metadata(format!("unknown domain {value}")))?
            }
            "scene" => meta.scene = value.to_string(),
            "sequence" => meta.sequence = value.parse().map_err(bad)?,
            "frame" => meta.frame = value.parse().map_err(bad)?,
            "seed" => meta.seed = value.parse().map_err(bad)?,
            // unknown keys are tolerated for forward compatibility
            _ => {}
        }
        seen.insert(key.to_string());
    }
    for key in ["label", "domain", "scene", "sequence", "frame", "seed"] {
        if !seen.contains(key) {
            return Err(DatasetError::Metadata(format!("missing key {key}")));
        }
    }
    Ok(meta)
}

pub fn encode_rdm(frame: &Rdm) -> Vec<u8> {
    let blob = encode_meta(&frame.meta);
    let mut out = Vec::with_capacity(16 + frame.data.len() * 4 + blob.len());
    out.extend_from_slice(RDM_MAGIC);
    out.extend_from_slice(&(frame.height as u32).to_le_bytes());
    out.extend_from_slice(&(frame.width as u32).to_le_bytes());
    for v in &frame.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
    out.extend_from_slice(blob.as_bytes());
    out
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8], DatasetError> {
    let end = at.checked_add(n).filter(|&e| e <= bytes.len()).ok_or(DatasetError::Truncated {
        needed: at.saturating_add(n),
        available: bytes.len(),
    })?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

fn read_u32(bytes: &[u8], at: &mut usize) -> Result<u32, DatasetError> {
    Ok(u32::from_le_bytes(take(bytes, at, 4)?.try_into().expect("4 bytes")))
}

/// Decodes a frame of any dimensions.
pub fn decode_rdm(bytes: &[u8]) -> Result<Rdm, DatasetError> {
    let mut at = 0;
    let magic: [u8; 4] = take(bytes, &mut at, 4)?.try_into().expect("4 bytes");
    if &magic != RDM_MAGIC {
        return Err(DatasetError::BadMagic(magic));
    }
    let height = read_u32(bytes, &mut at)? as usize;
    let width = read_u32(bytes, &mut at)? as usize;
    let payload = take(bytes, &mut at, height.saturating_mul(width).saturating_mul(4))?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let blob_len = read_u32(bytes, &mut at)? as usize;
    let blob = take(bytes, &mut at, blob_len)?;
    let text = std::str::from_utf8(blob).map_err(|e| DatasetError::Metadata(e.to_string()))?;
    let meta = decode_meta(text)?;
    Ok(Rdm::new(height, width, data, meta))
}

fn check_dims(h: usize, w: usize) -> Result<(), DatasetError> {
    if (h, w) != (RDM_SIZE, RDM_SIZE) {
        return Err(DatasetError::DimensionMismatch {
            expected: (RDM_SIZE, RDM_SIZE),
            found: (h, w),
        });
    }
    Ok(())
}

/// Writes a 128x128 frame.
pub fn write_rdm(frame: &Rdm, path: &Path) -> Result<(), DatasetError> {
    check_dims(frame.height, frame.width)?;
    fs::write(path, encode_rdm(frame)).map_err(io_err(path))
}

/// Reads a frame and insists on 128x128.
pub fn read_rdm(path: &Path) -> Result<Rdm, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let frame = decode_rdm(&bytes)?;
    check_dims(frame.height, frame.width)?;
    Ok(frame)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRecord {
    /// Relative to the dataset directory.
    pub path: String,
    pub label: u8,
    pub domain: Domain,
    pub scene: SceneKind,
    pub sequence: u32,
    pub frame: u32,
    pub seed: u64,
}

impl FrameRecord {
    pub fn occupancy(&self) -> Occupancy {
        Occupancy::from_index(self.label).expect("label validated on load")
    }

    pub fn meta(&self) -> RdmMeta {
        RdmMeta {
            label: self.label,
            domain: self.domain,
            scene: self.scene.as_str().to_string(),
            sequence: self.sequence,
            frame: self.frame,
            seed: self.seed,
        }
    }
}

pub fn write_manifest(records: &[FrameRecord], path: &Path) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<Vec<FrameRecord>, DatasetError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    let mut keys = BTreeSet::new();
    for (row, rec) in r.deserialize::<FrameRecord>().enumerate() {
        let rec = rec?;
        if Occupancy::from_index(rec.label).is_none() {
            return Err(DatasetError::Inconsistent {
                row,
                path: rec.path,
                reason: format!("label {} not in 0..=2", rec.label),
            });
        }
        if !keys.insert((rec.sequence, rec.frame)) {
            return Err(DatasetError::Inconsistent {
                row,
                path: rec.path,
                reason: "duplicate (sequence, frame)".into(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

/// Every row's file exists, parses, and carries the same metadata.
pub fn verify_manifest(dir: &Path, records: &[FrameRecord]) -> Result<(), DatasetError> {
    for (row, rec) in records.iter().enumerate() {
        let frame = read_rdm(&dir.join(&rec.path)).map_err(|e| DatasetError::Inconsistent {
            row,
            path: rec.path.clone(),
            reason: e.to_string(),
        })?;
        if frame.meta != rec.meta() {
            return Err(DatasetError::Inconsistent {
                row,
                path: rec.path.clone(),
                reason: format!("file metadata {:?} differs from manifest", frame.meta),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            train_fraction: TRAIN_FRACTION,
            seed,
        }
    }
}

/// Indices into the manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn achieved_train_fraction(&self) -> f64 {
        self.train.len() as f64 / (self.train.len() + self.test.len()).max(1) as f64
    }
}

type Stratum = (Domain, SceneKind, u8);

fn stratum_name(s: &Stratum) -> String {
    format!("{}/{}/{}", s.0.as_str(), s.1.as_str(), s.2)
}

/// Sequence-grouped split, stratified by (domain, scene, label).
///
/// Within each stratum the sequences are shuffled and moved to train until
/// the train frame count reaches the target fraction. At least one sequence
/// always stays on the test side.
pub fn make_split(records: &[FrameRecord], spec: &SplitSpec) -> Result<Split, DatasetError> {
    // stratum -> sequence -> row indices
    let mut strata: BTreeMap<Stratum, BTreeMap<u32, Vec<usize>>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        strata
            .entry((r.domain, r.scene, r.label))
            .or_default()
            .entry(r.sequence)
            .or_default()
            .push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (key, seqs) in &strata {
        if seqs.len() < 2 {
            return Err(DatasetError::SingleSequence(stratum_name(key)));
        }
        let total: usize = seqs.values().map(Vec::len).sum();
        let target = spec.train_fraction * total as f64;
        let mut order: Vec<&u32> = seqs.keys().collect();
        order.shuffle(&mut rng);
        let mut n_train = 0usize;
        for (k, seq) in order.iter().enumerate() {
            let rows = &seqs[*seq];
            let last = k + 1 == order.len();
            if (n_train as f64) < target && !last {
                n_train += rows.len();
                train.extend_from_slice(rows);
            } else {
                test.extend_from_slice(rows);
            }
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, test })
}

/// Label-stratified subset of `train`. Each stratum keeps
/// `round_half_up(fraction * n)` rows taken from the front of one seeded
/// permutation, so smaller fractions are nested in larger ones.
pub fn subsample_fraction(
    records: &[FrameRecord],
    train: &[usize],
    fraction: f64,
    seed: u64,
) -> Result<Vec<usize>, DatasetError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DatasetError::BadFraction(fraction));
    }
    let mut by_label: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for &i in train {
        by_label.entry(records[i].label).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (label, mut rows) in by_label {
        rows.sort_unstable();
        rows.shuffle(&mut rng);
        // the small slack keeps products like 0.1 * 75 = 7.4999... rounding up
        let k = ((fraction * rows.len() as f64) + 0.5 + 1e-9).floor() as usize;
        if k == 0 {
            return Err(DatasetError::EmptySubset { fraction, label });
        }
        out.extend_from_slice(&rows[..k.min(rows.len())]);
    }
    out.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frame(h: usize, w: usize) -> Rdm {
        let data = (0..h * w).map(|i| -300.0 + i as f32 * 0.37).collect();
        Rdm::new(
            h,
            w,
            data,
            RdmMeta {
                label: 2,
                domain: Domain::Synthetic,
                scene: "room".into(),
                sequence: 17,
                frame: 3,
                seed: 99,
            },
        )
    }

    /// 6 cells, `seqs` sequences each of `len` frames.
    fn manifest(seqs: u32, len: u32) -> Vec<FrameRecord> {
        let mut out = Vec::new();
        let mut seq = 0;
        for scene in SceneKind::ALL {
            for label in 0..3u8 {
                for _ in 0..seqs {
                    for f in 0..len {
                        out.push(FrameRecord {
                            path: format!("frames/{seq:05}_{f:03}.rdm"),
                            label,
                            domain: Domain::Synthetic,
                            scene,
                            sequence: seq,
                            frame: f,
                            seed: 0,
                        });
                    }
                    seq += 1;
                }
            }
        }
        out
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.rdm");
        let mut f = frame(128, 128);
        f.data[5] = f32::from_bits(0x3f80_0001);
        write_rdm(&f, &p).unwrap();
        let g = read_rdm(&p).unwrap();
        assert_eq!(f.meta, g.meta);
        assert!(f.data.iter().zip(&g.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn file_size_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.rdm");
        let f = frame(128, 128);
        write_rdm(&f, &p).unwrap();
        let blob = encode_meta(&f.meta).len() as u64;
        assert_eq!(fs::metadata(&p).unwrap().len(), 4 + 8 + 128 * 128 * 4 + 4 + blob);
    }

    #[test]
    fn distinct_errors() {
        let good = encode_rdm(&frame(4, 4));
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_rdm(&bad), Err(DatasetError::BadMagic(_))));
        assert!(matches!(decode_rdm(&good[..40]), Err(DatasetError::Truncated { .. })));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("small.rdm");
        fs::write(&p, &good).unwrap();
        assert!(matches!(read_rdm(&p), Err(DatasetError::DimensionMismatch { .. })));
        assert!(matches!(write_rdm(&frame(4, 4), &p), Err(DatasetError::DimensionMismatch { .. })));
    }

    #[test]
    fn manifest_round_trip_and_verify() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("frames")).unwrap();
        let mut recs = manifest(2, 1);
        recs.truncate(3);
        for r in &recs {
            let mut f = frame(128, 128);
            f.meta = r.meta();
            write_rdm(&f, &dir.path().join(&r.path)).unwrap();
        }
        let mp = dir.path().join(MANIFEST_FILE);
        write_manifest(&recs, &mp).unwrap();
        let header = fs::read_to_string(&mp).unwrap();
        assert!(header.starts_with("path,label,domain,scene,sequence,frame,seed\n"));
        let back = read_manifest(&mp).unwrap();
        assert_eq!(back, recs);
        verify_manifest(dir.path(), &back).unwrap();
        let mut wrong = back.clone();
        wrong[1].label = 2;
        assert!(matches!(verify_manifest(dir.path(), &wrong), Err(DatasetError::Inconsistent { row: 1, .. })));
    }

    #[test]
    fn paper_scale_split_is_about_eighty_twenty() {
        // 2650 frames: 6 cells, varied sequence lengths
        let mut recs = Vec::new();
        let mut seq = 0;
        for (cell, (scene, label)) in SceneKind::ALL
            .iter()
            .flat_map(|s| (0..3u8).map(move |l| (*s, l)))
            .enumerate()
        {
            let n_cell = if cell < 4 { 442 } else { 441 };
            let mut left = n_cell;
            while left > 0 {
                let len = left.min(20 + (seq % 7) as usize);
                for f in 0..len {
                    recs.push(FrameRecord {
                        path: String::new(),
                        label,
                        domain: Domain::Synthetic,
                        scene,
                        sequence: seq,
                        frame: f as u32,
                        seed: 0,
                    });
                }
                left -= len;
                seq += 1;
            }
        }
        assert_eq!(recs.len(), 2650);
        let s = make_split(&recs, &SplitSpec::new(5)).unwrap();
        // one sequence (<= 26 frames) of granularity per stratum
        assert!((s.train.len() as i64 - 2120).abs() <= 6 * 26, "{}", s.train.len());
        assert_eq!(s.train.len() + s.test.len(), 2650);
    }

    #[test]
    fn two_sequences_go_one_per_side() {
        let recs = manifest(2, 5);
        let s = make_split(&recs, &SplitSpec::new(1)).unwrap();
        assert_eq!(s.train.len(), 30);
        assert_eq!(s.test.len(), 30);
        assert_eq!(s.achieved_train_fraction(), 0.5);
    }

    #[test]
    fn single_sequence_stratum_is_an_error() {
        let recs = manifest(1, 5);
        assert!(matches!(make_split(&recs, &SplitSpec::new(1)), Err(DatasetError::SingleSequence(_))));
    }

    #[test]
    fn desk_split_counts() {
        let recs = manifest(10, 10);
        let s = make_split(&recs, &SplitSpec::new(42)).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (480, 120));
        assert_eq!(s, make_split(&recs, &SplitSpec::new(42)).unwrap());
    }

    #[test]
    fn subsample_counts() {
        let recs = manifest(10, 10);
        let all: Vec<usize> = (0..recs.len()).collect();
        assert_eq!(subsample_fraction(&recs, &all, 1.0, 3).unwrap(), all);
        // 200 per label at 10%
        let sub = subsample_fraction(&recs, &all, 0.1, 3).unwrap();
        assert_eq!(sub.len(), 60);
        for l in 0..3 {
            assert_eq!(sub.iter().filter(|&&i| recs[i].label == l).count(), 20);
        }
        let few: Vec<usize> = (0..3).collect();
        assert!(matches!(subsample_fraction(&recs, &few, 0.1, 3), Err(DatasetError::EmptySubset { .. })));
        assert!(matches!(subsample_fraction(&recs, &all, 0.0, 3), Err(DatasetError::BadFraction(_))));
    }

    #[test]
    fn paper_scale_ten_percent() {
        // 2120 train frames split 707/707/706 across labels
        let recs: Vec<FrameRecord> = (0..2120u32)
            .map(|i| FrameRecord {
                path: String::new(),
                label: (i % 3) as u8,
                domain: Domain::Synthetic,
                scene: SceneKind::Corridor,
                sequence: i,
                frame: 0,
                seed: 0,
            })
            .collect();
        let all: Vec<usize> = (0..recs.len()).collect();
        let sub = subsample_fraction(&recs, &all, 0.1, 8).unwrap();
        assert!((sub.len() as i64 - 212).abs() <= 3);
    }

    proptest! {
        #[test]
        fn split_never_leaks(seed in any::<u64>(), seqs in 2u32..6, len in 1u32..8) {
            let recs = manifest(seqs, len);
            let s = make_split(&recs, &SplitSpec::new(seed)).unwrap();
            let tr: BTreeSet<u32> = s.train.iter().map(|&i| recs[i].sequence).collect();
            let te: BTreeSet<u32> = s.test.iter().map(|&i| recs[i].sequence).collect();
            prop_assert!(tr.is_disjoint(&te));
            prop_assert_eq!(s.train.len() + s.test.len(), recs.len());
        }

        #[test]
        fn subsets_are_nested_and_proportional(seed in any::<u64>(), seqs in 2u32..8) {
            let recs = manifest(seqs, 7);
            let all: Vec<usize> = (0..recs.len()).collect();
            let a = subsample_fraction(&recs, &all, 0.1, seed).unwrap();
            let b = subsample_fraction(&recs, &all, 0.3, seed).unwrap();
            let c = subsample_fraction(&recs, &all, 0.5, seed).unwrap();
            let (sa, sb, sc): (BTreeSet<_>, BTreeSet<_>, BTreeSet<_>) =
                (a.iter().collect(), b.iter().collect(), c.iter().collect());
            prop_assert!(sa.is_subset(&sb) && sb.is_subset(&sc));
            // stratified counting oracle
            for l in 0..3u8 {
                let n = all.iter().filter(|&&i| recs[i].label == l).count() as f64;
                let got = b.iter().filter(|&&i| recs[i].label == l).count() as f64;
                prop_assert!((got - 0.3 * n).abs() <= 1.0);
            }
        }
    }
}
