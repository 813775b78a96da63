//! The hybrid classifier, its classical control heads and a compact CNN
//! baseline, with joint forward/backward and the training loop.
//!
//! Backbone: conv3x3(1->c1)+ReLU+maxpool, conv3x3(c1->c2)+ReLU+maxpool,
//! adaptive avgpool, FC(hidden)+ReLU, FC(2). The 2-D latent then feeds one
//! of the heads:
//!
//! * HQNN: latent standardization, `pi * sigmoid`, ZZ feature map +
//!   RealAmplitudes, `(<ZI>, <IZ>)`, Linear(2->3).
//! * Estimator-matched: Linear(2->3) on the raw latent.
//! * Dequantization: Linear(2->2)+ReLU+Linear(2->3) on the raw latent.
//! * Compact CNN: the last backbone layer emits 3 logits directly.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::nn::{
    adaptive_avgpool, adaptive_avgpool_backward, inverse_frequency_weights, logistic_squash, logistic_squash_grad,
    maxpool2, maxpool2_backward, relu_backward, relu_inplace, softmax, softmax_ce, Adam, Checkpoint, Conv3x3, Linear,
    NnError, ParamLayout, Real, Slot,
};
use crate::qsim::{Pqc, PqcGradient, QsimError, Shots};

pub const CLASSES: usize = 3;
pub const DEFAULT_SHOTS: u64 = 4096;
pub const LATENT_MOMENTUM: f64 = 0.1;
pub const LATENT_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Qsim(#[from] QsimError),
    #[error("class {0} has no training frames")]
    EmptyClass(usize),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("frame has {got} pixels, model expects {expected}")]
    FrameSize { expected: usize, got: usize },
    #[error("no training frames")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VariantKind {
    Hqnn,
    EstimatorMatched,
    Dequantization,
    CompactCnn,
}

impl VariantKind {
    pub const ALL: [VariantKind; 4] = [
        VariantKind::Hqnn,
        VariantKind::EstimatorMatched,
        VariantKind::Dequantization,
        VariantKind::CompactCnn,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            VariantKind::Hqnn => "hqnn",
            VariantKind::EstimatorMatched => "estimator-matched",
            VariantKind::Dequantization => "dequantization",
            VariantKind::CompactCnn => "compact-cnn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s)
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Analytic,
    Shots(u64),
}

impl ExecMode {
    pub fn shots(&self) -> Shots {
        match *self {
            ExecMode::Analytic => Shots::Analytic,
            ExecMode::Shots(n) => Shots::Count(n),
        }
    }

    pub fn as_str(&self) -> String {
        match self {
            ExecMode::Analytic => "analytic".into(),
            ExecMode::Shots(n) => format!("shots-{n}"),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "analytic" => Some(ExecMode::Analytic),
            "shots" => Some(ExecMode::Shots(DEFAULT_SHOTS)),
            _ => s.strip_prefix("shots-").and_then(|n| n.parse().ok()).map(ExecMode::Shots),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneDims {
    pub height: usize,
    pub width: usize,
    pub c1: usize,
    pub c2: usize,
    pub pool_h: usize,
    pub pool_w: usize,
    pub hidden: usize,
}

impl BackboneDims {
    pub const PAPER: BackboneDims = BackboneDims {
        height: 128,
        width: 128,
        c1: 16,
        c2: 32,
        pool_h: 2,
        pool_w: 15,
        hidden: 64,
    };

    /// Shrunken network for end-to-end gradient checks.
    pub const TINY: BackboneDims = BackboneDims {
        height: 4,
        width: 4,
        c1: 2,
        c2: 3,
        pool_h: 1,
        pool_w: 2,
        hidden: 4,
    };

    pub fn flat(&self) -> usize {
        self.c2 * self.pool_h * self.pool_w
    }

    fn fields(&self) -> [(&'static str, usize); 7] {
        [
            ("height", self.height),
            ("width", self.width),
            ("c1", self.c1),
            ("c2", self.c2),
            ("pool_h", self.pool_h),
            ("pool_w", self.pool_w),
            ("hidden", self.hidden),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Head {
    Quantum { angles: Slot, fc3: Linear },
    Linear { fc3: Linear },
    Mlp { l1: Linear, l2: Linear },
    Direct,
}

/// Running latent statistics used outside training. Training batches are
/// standardized with their own statistics (gradient included) and fold
/// them into this average. Values are kept f32-representable so a
/// checkpoint reproduces them exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentNorm {
    pub mean: [f64; 2],
    pub var: [f64; 2],
}

impl Default for LatentNorm {
    fn default() -> Self {
        Self {
            mean: [0.0; 2],
            var: [1.0; 2],
        }
    }
}

/// Per-component shift and scale applied to the latent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Standardize {
    pub mean: [f64; 2],
    pub scale: [f64; 2],
}

impl Standardize {
    pub fn apply(&self, z: [f64; 2]) -> [f64; 2] {
        [(z[0] - self.mean[0]) / self.scale[0], (z[1] - self.mean[1]) / self.scale[1]]
    }
}

/// Mean and biased variance of a set of latents.
pub fn latent_moments(latents: &[[f64; 2]]) -> ([f64; 2], [f64; 2]) {
    let n = latents.len() as f64;
    let mut mean = [0.0; 2];
    let mut var = [0.0; 2];
    for i in 0..2 {
        mean[i] = latents.iter().map(|z| z[i]).sum::<f64>() / n;
        var[i] = latents.iter().map(|z| (z[i] - mean[i]).powi(2)).sum::<f64>() / n;
    }
    (mean, var)
}

impl LatentNorm {
    pub fn scale(&self, i: usize) -> f64 {
        (self.var[i] + LATENT_EPS).sqrt()
    }

    pub fn frozen(&self) -> Standardize {
        Standardize {
            mean: self.mean,
            scale: [self.scale(0), self.scale(1)],
        }
    }

    pub fn standardize(&self, z: [f64; 2]) -> [f64; 2] {
        self.frozen().apply(z)
    }

    /// EMA step towards a batch mean and unbiased batch variance.
    pub fn push(&mut self, mean: [f64; 2], var: [f64; 2]) {
        for i in 0..2 {
            self.mean[i] = ((1.0 - LATENT_MOMENTUM) * self.mean[i] + LATENT_MOMENTUM * mean[i]) as f32 as f64;
            self.var[i] = ((1.0 - LATENT_MOMENTUM) * self.var[i] + LATENT_MOMENTUM * var[i]) as f32 as f64;
        }
    }

    /// EMA step from a batch of at least two latents.
    pub fn update(&mut self, latents: &[[f64; 2]]) {
        if latents.len() < 2 {
            return;
        }
        let n = latents.len() as f64;
        let (mean, var) = latent_moments(latents);
        self.push(mean, var.map(|v| v * n / (n - 1.0)));
    }
}

/// Per-sample activations kept for the backward pass.
#[derive(Debug, Default, Clone)]
pub struct Workspace<T> {
    cols1: Vec<T>,
    a1: Vec<T>,
    p1: Vec<T>,
    idx1: Vec<u32>,
    cols2: Vec<T>,
    a2: Vec<T>,
    p2: Vec<T>,
    idx2: Vec<u32>,
    g: Vec<T>,
    h1: Vec<T>,
    z: Vec<T>,
    zn: [f64; 2],
    zscale: [f64; 2],
    dzn: [f64; 2],
    theta: [f64; 2],
    feats: Vec<T>,
    pqc_grad: PqcGradient,
    dq_h: Vec<T>,
    logits: Vec<T>,
    // backward scratch
    d_a: Vec<T>,
    d_b: Vec<T>,
    d_c: Vec<T>,
    grad: Vec<T>,
    /// Circuit evaluations issued through this workspace.
    pub pqc_evals: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    /// Forward only.
    Eval { seed: u64 },
    /// Forward with everything backward needs, including PQC shifts.
    Train { seed: u64 },
}

#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub kind: VariantKind,
    pub dims: BackboneDims,
    pub mode: ExecMode,
    pub layout: ParamLayout,
    pub params: Vec<T>,
    pub latent: LatentNorm,
    conv1: Conv3x3,
    conv2: Conv3x3,
    fc1: Linear,
    fc2: Linear,
    head: Head,
}

impl<T: Real> Model<T> {
    /// Builds the layout and draws initial weights from `seed`.
    pub fn new(kind: VariantKind, dims: BackboneDims, mode: ExecMode, seed: u64) -> Self {
        let mut m = Self::skeleton(kind, dims, mode);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = &mut m.params;
        m.conv1.init(p, &mut rng);
        m.conv2.init(p, &mut rng);
        m.fc1.init(p, &mut rng);
        m.fc2.init(p, &mut rng);
        match m.head {
            Head::Quantum { angles, fc3 } => {
                for v in angles.of_mut(p) {
                    *v = T::of(rng.random_range(-1.0..1.0));
                }
                fc3.init(p, &mut rng);
            }
            Head::Linear { fc3 } => fc3.init(p, &mut rng),
            Head::Mlp { l1, l2 } => {
                l1.init(p, &mut rng);
                l2.init(p, &mut rng);
            }
            Head::Direct => {}
        }
        m
    }

    fn skeleton(kind: VariantKind, dims: BackboneDims, mode: ExecMode) -> Self {
        let mut layout = ParamLayout::default();
        let conv1 = Conv3x3::new(&mut layout, "conv1", 1, dims.c1);
        let conv2 = Conv3x3::new(&mut layout, "conv2", dims.c1, dims.c2);
        let fc1 = Linear::new(&mut layout, "fc1", dims.flat(), dims.hidden);
        let fc2_out = if kind == VariantKind::CompactCnn { CLASSES } else { 2 };
        let fc2 = Linear::new(&mut layout, "fc2", dims.hidden, fc2_out);
        let head = match kind {
            VariantKind::Hqnn => {
                let angles = layout.push("pqc.weights", &[4]);
                let fc3 = Linear::new(&mut layout, "fc3", 2, CLASSES);
                Head::Quantum { angles, fc3 }
            }
            VariantKind::EstimatorMatched => Head::Linear {
                fc3: Linear::new(&mut layout, "head", 2, CLASSES),
            },
            VariantKind::Dequantization => Head::Mlp {
                l1: Linear::new(&mut layout, "head.hidden", 2, 2),
                l2: Linear::new(&mut layout, "head.out", 2, CLASSES),
            },
            VariantKind::CompactCnn => Head::Direct,
        };
        let params = vec![T::zero(); layout.total];
        Self {
            kind,
            dims,
            mode,
            layout,
            params,
            latent: LatentNorm::default(),
            conv1,
            conv2,
            fc1,
            fc2,
            head,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    /// Trainable parameters after the shared backbone (0 for the CNN).
    pub fn head_param_count(&self) -> usize {
        match self.head {
            Head::Quantum { angles, fc3 } => angles.len + fc3.param_count(),
            Head::Linear { fc3 } => fc3.param_count(),
            Head::Mlp { l1, l2 } => l1.param_count() + l2.param_count(),
            Head::Direct => 0,
        }
    }

    pub fn pqc_weights(&self) -> Option<[f64; 4]> {
        match self.head {
            Head::Quantum { angles, .. } => {
                let a = angles.of(&self.params);
                Some(std::array::from_fn(|i| a[i].to_f64().expect("finite")))
            }
            _ => None,
        }
    }

    fn frame_len(&self) -> usize {
        self.dims.height * self.dims.width
    }

    /// Backbone up to and including the latent (or the CNN logits).
    fn backbone(&self, frame: &[T], ws: &mut Workspace<T>) -> Result<(), ModelError> {
        if frame.len() != self.frame_len() {
            return Err(ModelError::FrameSize {
                expected: self.frame_len(),
                got: frame.len(),
            });
        }
        if cfg!(debug_assertions) {
            let mean = frame.iter().map(|v| v.to_f64().unwrap_or(0.0)).sum::<f64>() / frame.len() as f64;
            if mean.abs() > 50.0 {
                log::warn!("frame mean {mean:.1} suggests an unstandardized input");
            }
        }
        let d = &self.dims;
        let p = &self.params;
        let (h, w) = (d.height, d.width);
        self.conv1.forward(p, frame, h, w, &mut ws.cols1, &mut ws.a1)?;
        relu_inplace(&mut ws.a1);
        maxpool2(&ws.a1, d.c1, h, w, &mut ws.p1, &mut ws.idx1);
        let (h2, w2) = (h / 2, w / 2);
        self.conv2.forward(p, &ws.p1, h2, w2, &mut ws.cols2, &mut ws.a2)?;
        relu_inplace(&mut ws.a2);
        maxpool2(&ws.a2, d.c2, h2, w2, &mut ws.p2, &mut ws.idx2);
        adaptive_avgpool(&ws.p2, d.c2, h2 / 2, w2 / 2, d.pool_h, d.pool_w, &mut ws.g);
        self.fc1.forward(p, &ws.g, &mut ws.h1)?;
        relu_inplace(&mut ws.h1);
        self.fc2.forward(p, &ws.h1, &mut ws.z)?;
        Ok(())
    }

    /// Raw 2-D latent of the last forward pass.
    pub fn latent_of(ws: &Workspace<T>) -> [f64; 2] {
        [ws.z[0].to_f64().expect("finite"), ws.z[1].to_f64().expect("finite")]
    }

    /// Quantum features of the last HQNN forward pass.
    pub fn features_of(ws: &Workspace<T>) -> [f64; 2] {
        [ws.feats[0].to_f64().expect("finite"), ws.feats[1].to_f64().expect("finite")]
    }

    /// Raw 2-D latent without running the head.
    pub fn latent(&self, frame: &[T], ws: &mut Workspace<T>) -> Result<[f64; 2], ModelError> {
        self.backbone(frame, ws)?;
        Ok(Self::latent_of(ws))
    }

    /// Class logits; caches everything needed by [`Model::backward`].
    pub fn forward(&self, frame: &[T], ws: &mut Workspace<T>, pass: Pass) -> Result<Vec<T>, ModelError> {
        self.backbone(frame, ws)?;
        self.head_forward(ws, pass, &self.latent.frozen())
    }

    /// Head on the cached backbone output; `norm` standardizes the HQNN
    /// latent and is ignored by the other variants.
    fn head_forward(&self, ws: &mut Workspace<T>, pass: Pass, norm: &Standardize) -> Result<Vec<T>, ModelError> {
        let p = &self.params;
        match self.head {
            Head::Direct => ws.logits.clone_from(&ws.z),
            Head::Linear { fc3 } => fc3.forward(p, &ws.z, &mut ws.logits)?,
            Head::Mlp { l1, l2 } => {
                l1.forward(p, &ws.z, &mut ws.dq_h)?;
                relu_inplace(&mut ws.dq_h);
                l2.forward(p, &ws.dq_h, &mut ws.logits)?;
            }
            Head::Quantum { fc3, .. } => {
                ws.zn = norm.apply(Self::latent_of(ws));
                ws.zscale = norm.scale;
                ws.theta = ws.zn.map(logistic_squash);
                let pqc = Pqc {
                    inputs: ws.theta,
                    weights: self.pqc_weights().expect("quantum head"),
                };
                let shots = self.mode.shots();
                let f = match pass {
                    Pass::Eval { seed } => {
                        ws.pqc_evals += 1;
                        pqc.features(shots, seed)?
                    }
                    Pass::Train { seed } => {
                        ws.pqc_evals += crate::qsim::PQC_EVALS_PER_SAMPLE;
                        let (f, g) = pqc.features_and_gradient(shots, seed)?;
                        ws.pqc_grad = g;
                        f
                    }
                };
                ws.feats.clear();
                ws.feats.extend(f.iter().map(|&v| T::of(v)));
                fc3.forward(p, &ws.feats, &mut ws.logits)?;
            }
        }
        Ok(ws.logits.clone())
    }

    /// Accumulates `dL/dparams` into `grads` given `dL/dlogits`, for the
    /// sample last passed through `forward` with [`Pass::Train`].
    pub fn backward(&self, ws: &mut Workspace<T>, dlogits: &[T], grads: &mut [T]) {
        self.head_backward(ws, dlogits, grads);
        self.backbone_backward(ws, grads);
    }

    /// Leaves the gradient at the fc2 output in `ws.d_a`, treating the
    /// latent scale of the forward pass as a constant.
    fn head_backward(&self, ws: &mut Workspace<T>, dlogits: &[T], grads: &mut [T]) {
        let p = &self.params;
        // dz: gradient at the fc2 output
        let mut dz = std::mem::take(&mut ws.d_a);
        match self.head {
            Head::Direct => {
                dz.clear();
                dz.extend_from_slice(dlogits);
            }
            Head::Linear { fc3 } => fc3.backward(p, &ws.z, dlogits, grads, Some(&mut dz)),
            Head::Mlp { l1, l2 } => {
                let mut dh = std::mem::take(&mut ws.d_b);
                l2.backward(p, &ws.dq_h, dlogits, grads, Some(&mut dh));
                relu_backward(&ws.dq_h, &mut dh);
                l1.backward(p, &ws.z, &dh, grads, Some(&mut dz));
                ws.d_b = dh;
            }
            Head::Quantum { angles, fc3 } => {
                let mut dfv = std::mem::take(&mut ws.d_b);
                fc3.backward(p, &ws.feats, dlogits, grads, Some(&mut dfv));
                let df: [f64; 2] = [dfv[0].to_f64().expect("finite"), dfv[1].to_f64().expect("finite")];
                let g = &ws.pqc_grad;
                let da = angles.of_mut(grads);
                for (i, v) in da.iter_mut().enumerate() {
                    *v += T::of(df[0] * g.weights[0][i] + df[1] * g.weights[1][i]);
                }
                dz.clear();
                for j in 0..2 {
                    let dtheta = df[0] * g.inputs[0][j] + df[1] * g.inputs[1][j];
                    ws.dzn[j] = dtheta * logistic_squash_grad(ws.zn[j]);
                    dz.push(T::of(ws.dzn[j] / ws.zscale[j]));
                }
                ws.d_b = dfv;
            }
        }
        ws.d_a = dz;
    }

    fn backbone_backward(&self, ws: &mut Workspace<T>, grads: &mut [T]) {
        let p = &self.params;
        let d = &self.dims;
        let mut dz = std::mem::take(&mut ws.d_a);
        let mut dh1 = std::mem::take(&mut ws.d_b);
        self.fc2.backward(p, &ws.h1, &dz, grads, Some(&mut dh1));
        relu_backward(&ws.h1, &mut dh1);
        let mut dg = std::mem::take(&mut ws.d_c);
        self.fc1.backward(p, &ws.g, &dh1, grads, Some(&mut dg));
        let (h2, w2) = (d.height / 2, d.width / 2);
        // d_p2
        adaptive_avgpool_backward(&dg, d.c2, h2 / 2, w2 / 2, d.pool_h, d.pool_w, &mut dz);
        maxpool2_backward(&dz, &ws.idx2, ws.a2.len(), &mut dh1);
        relu_backward(&ws.a2, &mut dh1);
        self.conv2
            .backward(p, &ws.cols2, &dh1, h2, w2, grads, Some((&mut dg, &mut dz)));
        maxpool2_backward(&dz, &ws.idx1, ws.a1.len(), &mut dh1);
        relu_backward(&ws.a1, &mut dh1);
        self.conv1.backward(p, &ws.cols1, &dh1, d.height, d.width, grads, None);
        ws.d_a = dz;
        ws.d_b = dh1;
        ws.d_c = dg;
    }

    pub fn predict_proba(&self, frame: &[T], ws: &mut Workspace<T>, seed: u64) -> Result<Vec<T>, ModelError> {
        Ok(softmax(&self.forward(frame, ws, Pass::Eval { seed })?))
    }

    /// Loss and gradient of one mini-batch under the class-weighted mean
    /// cross-entropy. With two or more samples the HQNN latent is
    /// standardized by the batch's own moments and the gradient flows
    /// through them; a single sample falls back to the running statistics.
    pub fn batch_gradient(
        &self,
        frames: &[&[T]],
        labels: &[usize],
        class_weights: &[T],
        seeds: &[u64],
        wss: &mut Vec<Workspace<T>>,
        deterministic: bool,
    ) -> Result<BatchOutcome<T>, ModelError> {
        let n = frames.len();
        if n == 0 {
            return Err(ModelError::Empty);
        }
        if wss.len() < n {
            wss.resize_with(n, Workspace::default);
        }
        let wss = &mut wss[..n];
        wss.par_iter_mut()
            .zip(frames.par_iter())
            .try_for_each(|(ws, f)| self.backbone(f, ws))?;
        let latents: Vec<[f64; 2]> = wss.iter().map(Self::latent_of).collect();

        let batch_norm = matches!(self.head, Head::Quantum { .. }) && n >= 2;
        let (norm, stats) = if batch_norm {
            let (mean, var) = latent_moments(&latents);
            let scale = var.map(|v| (v + LATENT_EPS).sqrt());
            let unbiased = var.map(|v| v * n as f64 / (n as f64 - 1.0));
            (Standardize { mean, scale }, Some((mean, unbiased)))
        } else {
            (self.latent.frozen(), None)
        };

        let wsum: f64 = labels
            .iter()
            .map(|&c| class_weights[c].to_f64().unwrap_or(f64::NAN))
            .sum();
        let inv = T::of(1.0 / wsum);
        let np = self.param_count();
        let per_sample: Vec<(f64, bool)> = wss
            .par_iter_mut()
            .zip(labels.par_iter().zip(seeds.par_iter()))
            .map(|(ws, (&label, &seed))| -> Result<(f64, bool), ModelError> {
                ws.pqc_evals = 0;
                let z = self.head_forward(ws, Pass::Train { seed }, &norm)?;
                let (_, loss, mut dz) = softmax_ce(&z, label, class_weights);
                dz.iter_mut().for_each(|v| *v = *v * inv);
                let mut grad = std::mem::take(&mut ws.grad);
                grad.clear();
                grad.resize(np, T::zero());
                self.head_backward(ws, &dz, &mut grad);
                ws.grad = grad;
                Ok((loss.to_f64().unwrap_or(f64::NAN), argmax(&z) == label))
            })
            .collect::<Result<_, _>>()?;

        if batch_norm {
            // d/dz of (z - mean_B) / sqrt(var_B + eps) over the whole batch
            let mut gbar = [0.0; 2];
            let mut gz = [0.0; 2];
            for ws in wss.iter() {
                for j in 0..2 {
                    gbar[j] += ws.dzn[j] / n as f64;
                    gz[j] += ws.dzn[j] * ws.zn[j] / n as f64;
                }
            }
            for ws in wss.iter_mut() {
                ws.d_a.clear();
                for j in 0..2 {
                    ws.d_a.push(T::of((ws.dzn[j] - gbar[j] - ws.zn[j] * gz[j]) / norm.scale[j]));
                }
            }
        }
        wss.par_iter_mut().for_each(|ws| {
            let mut grad = std::mem::take(&mut ws.grad);
            self.backbone_backward(ws, &mut grad);
            ws.grad = grad;
        });

        let add = |mut a: Vec<T>, b: &[T]| {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
            a
        };
        let grads = if deterministic {
            wss.iter().fold(vec![T::zero(); np], |acc, ws| add(acc, &ws.grad))
        } else {
            wss.par_iter()
                .fold(|| vec![T::zero(); np], |acc, ws| add(acc, &ws.grad))
                .reduce(|| vec![T::zero(); np], |a, b| add(a, &b))
        };
        Ok(BatchOutcome {
            loss: per_sample.iter().map(|p| p.0).sum::<f64>(),
            weight_sum: wsum,
            correct: per_sample.iter().filter(|p| p.1).count(),
            grads,
            stats,
            pqc_evals: wss.iter().map(|ws| ws.pqc_evals).sum(),
        })
    }
}

pub struct BatchOutcome<T> {
    /// Sum of the class-weighted per-sample losses.
    pub loss: f64,
    pub weight_sum: f64,
    pub correct: usize,
    /// Gradient of `loss / weight_sum`.
    pub grads: Vec<T>,
    /// Batch latent mean and unbiased variance, when the batch was
    /// standardized by its own moments.
    pub stats: Option<([f64; 2], [f64; 2])>,
    pub pqc_evals: u64,
}

impl Model<f32> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = vec![
            ("variant".to_string(), self.kind.as_str().to_string()),
            ("mode".to_string(), self.mode.as_str()),
            ("trainable".to_string(), self.param_count().to_string()),
        ];
        meta.extend(self.dims.fields().iter().map(|(k, v)| (k.to_string(), v.to_string())));
        let mut layout = self.layout.clone();
        let mut values = self.params.clone();
        layout.push("latent_norm.mean", &[2]);
        values.extend(self.latent.mean.iter().map(|&v| v as f32));
        layout.push("latent_norm.var", &[2]);
        values.extend(self.latent.var.iter().map(|&v| v as f32));
        Checkpoint {
            meta,
            tensors: layout.entries,
            values,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        let get = |k: &str| {
            ck.meta_value(k)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing meta key {k}")))
        };
        let num = |k: &str| -> Result<usize, ModelError> {
            get(k)?
                .parse()
                .map_err(|_| ModelError::Checkpoint(format!("bad meta value for {k}")))
        };
        let kind = VariantKind::parse(get("variant")?)
            .ok_or_else(|| ModelError::Checkpoint("unknown variant".into()))?;
        let mode = ExecMode::parse(get("mode")?).ok_or_else(|| ModelError::Checkpoint("unknown mode".into()))?;
        let dims = BackboneDims {
            height: num("height")?,
            width: num("width")?,
            c1: num("c1")?,
            c2: num("c2")?,
            pool_h: num("pool_h")?,
            pool_w: num("pool_w")?,
            hidden: num("hidden")?,
        };
        let mut m = Self::skeleton(kind, dims, mode);
        for e in &m.layout.entries {
            let t = ck
                .tensors
                .iter()
                .find(|t| t.name == e.name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing tensor {}", e.name)))?;
            if t.shape != e.shape {
                return Err(ModelError::Checkpoint(format!("shape of {} is {:?}", e.name, t.shape)));
            }
            m.params[e.offset..e.offset + e.len()].copy_from_slice(&ck.values[t.offset..t.offset + t.len()]);
        }
        let stat = |name: &str| -> Result<[f64; 2], ModelError> {
            let v = ck
                .tensor(name)
                .filter(|v| v.len() == 2)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing {name}")))?;
            Ok([v[0] as f64, v[1] as f64])
        };
        m.latent = LatentNorm {
            mean: stat("latent_norm.mean")?,
            var: stat("latent_norm.var")?,
        };
        Ok(m)
    }
}

/// SplitMix64 over a sequence of words; used to key per-sample shot seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut x = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        x ^= p;
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Fixed-order gradient reduction.
    pub deterministic: bool,
}

impl TrainConfig {
    pub fn new(epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size: 32,
            lr: 1e-3,
            seed,
            deterministic: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub pqc_evals: u64,
    pub batches: u64,
    pub samples: u64,
    pub wall_clock_s: f64,
}

fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Mini-batch Adam on the class-weighted cross-entropy, reduced as the
/// weighted mean over the batch.
pub fn train<T: Real>(
    model: &mut Model<T>,
    frames: &[&[T]],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainReport, ModelError> {
    let started = Instant::now();
    if frames.is_empty() {
        return Err(ModelError::Empty);
    }
    assert_eq!(frames.len(), labels.len());
    let weights64 = match inverse_frequency_weights(labels, CLASSES) {
        Some(w) => w,
        None => {
            let missing = (0..CLASSES).find(|c| !labels.contains(c)).unwrap_or(0);
            return Err(ModelError::EmptyClass(missing));
        }
    };
    let weights: Vec<T> = weights64.iter().map(|&w| T::of(w)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0x5348_5546]));
    let mut adam = Adam::new(model.param_count(), cfg.lr);
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut wss: Vec<Workspace<T>> = Vec::new();

    let mut report = TrainReport {
        epochs: Vec::new(),
        pqc_evals: 0,
        batches: 0,
        samples: 0,
        wall_clock_s: 0.0,
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut weight_sum, mut correct) = (0.0, 0.0, 0usize);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let xs: Vec<&[T]> = batch.iter().map(|&i| frames[i]).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let seeds: Vec<u64> = (0..batch.len())
                .map(|pos| mix_seed(&[cfg.seed, epoch as u64, b as u64, pos as u64]))
                .collect();
            let out = model.batch_gradient(&xs, &ys, &weights, &seeds, &mut wss, cfg.deterministic)?;
            if !out.loss.is_finite() || out.grads.iter().any(|g| !g.is_finite()) {
                return Err(ModelError::NonFinite { epoch, batch: b });
            }
            loss_sum += out.loss;
            weight_sum += out.weight_sum;
            correct += out.correct;
            report.pqc_evals += out.pqc_evals;
            adam.step(&mut model.params, &out.grads);
            if let Some((mean, var)) = out.stats {
                model.latent.push(mean, var);
            }
            report.batches += 1;
            report.samples += batch.len() as u64;
        }
        let log = EpochLog {
            epoch: epoch + 1,
            loss: loss_sum / weight_sum,
            acc: correct as f64 / frames.len() as f64,
        };
        log::info!(
            "{} epoch {}: loss {:.4} acc {:.3}",
            model.kind,
            log.epoch,
            log.loss,
            log.acc
        );
        if model.kind == VariantKind::Hqnn {
            log::debug!(
                "latent mean {:?} var {:?} pqc {:?}",
                model.latent.mean,
                model.latent.var,
                model.pqc_weights()
            );
        }
        report.epochs.push(log);
    }
    report.wall_clock_s = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Predicted classes; the shot seed of frame `i` is keyed by `(seed, i)`.
pub fn predict<T: Real>(model: &Model<T>, frames: &[&[T]], seed: u64) -> Result<(Vec<usize>, u64), ModelError> {
    let outs: Vec<(usize, u64)> = frames
        .par_iter()
        .enumerate()
        .map_init(Workspace::default, |ws, (i, f)| {
            ws.pqc_evals = 0;
            let z = model.forward(f, ws, Pass::Eval { seed: mix_seed(&[seed, i as u64]) })?;
            Ok((argmax(&z), ws.pqc_evals))
        })
        .collect::<Result<_, ModelError>>()?;
    let evals = outs.iter().map(|o| o.1).sum();
    Ok((outs.into_iter().map(|o| o.0).collect(), evals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{numeric_gradient, relative_error};
    use approx::assert_relative_eq;

    fn random_frame(n: usize, seed: u64) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| r.random_range(-1.5..1.5)).collect()
    }

    #[test]
    fn parameter_counts() {
        let m = Model::<f32>::new(VariantKind::Hqnn, BackboneDims::PAPER, ExecMode::Analytic, 0);
        assert_eq!(m.param_count(), 66_447);
        assert_eq!(m.head_param_count(), 13);
        let e = Model::<f32>::new(VariantKind::EstimatorMatched, BackboneDims::PAPER, ExecMode::Analytic, 0);
        assert_eq!(e.head_param_count(), 9);
        let d = Model::<f32>::new(VariantKind::Dequantization, BackboneDims::PAPER, ExecMode::Analytic, 0);
        assert_eq!(d.head_param_count(), 15);
        let c = Model::<f32>::new(VariantKind::CompactCnn, BackboneDims::PAPER, ExecMode::Analytic, 0);
        assert_eq!(c.param_count(), 160 + 4_640 + 61_504 + 195);
    }

    #[test]
    fn zero_head_gives_softmax_of_bias() {
        let mut m = Model::<f64>::new(VariantKind::Hqnn, BackboneDims::TINY, ExecMode::Analytic, 3);
        let Head::Quantum { angles, fc3 } = m.head else { unreachable!() };
        angles.of_mut(&mut m.params).fill(0.0);
        fc3.weight.of_mut(&mut m.params).fill(0.0);
        fc3.bias.of_mut(&mut m.params).copy_from_slice(&[0.2, -1.0, 0.7]);
        let mut ws = Workspace::default();
        let p = m.predict_proba(&random_frame(16, 1), &mut ws, 0).unwrap();
        let want = softmax(&[0.2, -1.0, 0.7]);
        for (a, b) in p.iter().zip(&want) {
            assert_relative_eq!(a, b, epsilon = 1e-15);
        }
        // and no gradient reaches the circuit
        m.forward(&random_frame(16, 1), &mut ws, Pass::Train { seed: 0 }).unwrap();
        let mut g = vec![0.0; m.param_count()];
        m.backward(&mut ws, &[0.3, -0.1, -0.2], &mut g);
        assert!(angles.of(&g).iter().all(|&v| v == 0.0));
        assert!(m.layout.entries.iter().take(8).all(|e| g[e.offset..e.offset + e.len()].iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn quantum_features_bounded() {
        let mut m = Model::<f32>::new(VariantKind::Hqnn, BackboneDims::TINY, ExecMode::Analytic, 9);
        m.latent.update(&[[5.0, -3.0], [-2.0, 8.0]]);
        let mut ws = Workspace::default();
        for s in 0..50 {
            let f: Vec<f32> = random_frame(16, s).iter().map(|&v| (v * 40.0) as f32).collect();
            m.forward(&f, &mut ws, Pass::Eval { seed: s }).unwrap();
            let q = Model::<f32>::features_of(&ws);
            assert!(q.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    fn loss_and_grad(m: &Model<f64>, frame: &[f64], label: usize) -> (f64, Vec<f64>) {
        let w = [0.8, 1.3, 0.9];
        let mut ws = Workspace::default();
        let z = m.forward(frame, &mut ws, Pass::Train { seed: 0 }).unwrap();
        let (_, loss, dz) = softmax_ce(&z, label, &w);
        let mut g = vec![0.0; m.param_count()];
        m.backward(&mut ws, &dz, &mut g);
        (loss, g)
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        for kind in VariantKind::ALL {
            let mut m = Model::<f64>::new(kind, BackboneDims::TINY, ExecMode::Analytic, 21);
            m.latent.update(&[[0.3, -0.2], [1.1, 0.4], [-0.5, 0.9]]);
            let frame = random_frame(16, 4);
            let (_, g) = loss_and_grad(&m, &frame, 1);
            let p0 = m.params.clone();
            let n = numeric_gradient(
                &mut |p| {
                    let mut mm = m.clone();
                    mm.params.copy_from_slice(p);
                    loss_and_grad(&mm, &frame, 1).0
                },
                &p0,
                1e-5,
            );
            let err = relative_error(&g, &n);
            assert!(err < 1e-4, "{kind}: relative error {err}");
        }
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let w = [0.8, 1.3, 0.9];
        let frames: Vec<Vec<f64>> = (0..4).map(|i| random_frame(16, 40 + i)).collect();
        let refs: Vec<&[f64]> = frames.iter().map(Vec::as_slice).collect();
        let labels = [0, 2, 1, 2];
        let seeds = [0; 4];
        for kind in VariantKind::ALL {
            let m = Model::<f64>::new(kind, BackboneDims::TINY, ExecMode::Analytic, 8);
            let batch_loss = |mm: &Model<f64>| {
                let out = mm
                    .batch_gradient(&refs, &labels, &w, &seeds, &mut Vec::new(), true)
                    .unwrap();
                (out.loss / out.weight_sum, out)
            };
            let (_, out) = batch_loss(&m);
            assert_eq!(out.stats.is_some(), kind == VariantKind::Hqnn);
            let n = numeric_gradient(
                &mut |p| {
                    let mut mm = m.clone();
                    mm.params.copy_from_slice(p);
                    batch_loss(&mm).0
                },
                &m.params,
                1e-5,
            );
            let err = relative_error(&out.grads, &n);
            assert!(err < 1e-4, "{kind}: relative error {err}");
        }
    }

    #[test]
    fn batch_standardization_is_shift_and_scale_invariant() {
        // adding a constant to fc2's bias or scaling fc2 leaves the HQNN
        // training loss unchanged, so those directions get zero gradient
        let w = [1.0; 3];
        let frames: Vec<Vec<f64>> = (0..5).map(|i| random_frame(16, 60 + i)).collect();
        let refs: Vec<&[f64]> = frames.iter().map(Vec::as_slice).collect();
        let labels = [0, 1, 2, 1, 0];
        let m = Model::<f64>::new(VariantKind::Hqnn, BackboneDims::TINY, ExecMode::Analytic, 3);
        let out = m.batch_gradient(&refs, &labels, &w, &[0; 5], &mut Vec::new(), true).unwrap();
        let bias = m.layout.entries.iter().find(|e| e.name == "fc2.bias").unwrap();
        for j in 0..2 {
            assert!(out.grads[bias.offset + j].abs() < 1e-12);
        }
        let weight = m.layout.entries.iter().find(|e| e.name == "fc2.weight").unwrap();
        // only the eps in the denominator breaks exact scale invariance
        let idx: Vec<usize> = (weight.offset..weight.offset + weight.len())
            .chain(bias.offset..bias.offset + 2)
            .collect();
        let dot: f64 = idx.iter().map(|&i| out.grads[i] * m.params[i]).sum();
        let gn = idx.iter().map(|&i| out.grads[i].powi(2)).sum::<f64>().sqrt();
        let pn = idx.iter().map(|&i| m.params[i].powi(2)).sum::<f64>().sqrt();
        assert!(dot.abs() < 1e-3 * gn * pn, "{dot} vs {gn} {pn}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let mut m = Model::<f32>::new(VariantKind::Hqnn, BackboneDims::TINY, ExecMode::Analytic, 5);
        m.latent.update(&[[0.123, 4.5], [2.0, -1.0]]);
        let back = Model::<f32>::from_checkpoint(&Checkpoint::decode(&m.to_checkpoint().encode()).unwrap()).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.latent, m.latent);
        let f: Vec<f32> = random_frame(16, 2).iter().map(|&v| v as f32).collect();
        let (mut w1, mut w2) = (Workspace::default(), Workspace::default());
        let a = m.forward(&f, &mut w1, Pass::Eval { seed: 0 }).unwrap();
        let b = back.forward(&f, &mut w2, Pass::Eval { seed: 0 }).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn pqc_eval_counter() {
        let m = Model::<f32>::new(VariantKind::Hqnn, BackboneDims::TINY, ExecMode::Analytic, 5);
        let f: Vec<f32> = vec![0.1; 16];
        let frames: Vec<&[f32]> = (0..32).map(|_| f.as_slice()).collect();
        let (_, evals) = predict(&m, &frames, 0).unwrap();
        assert_eq!(evals, 32);
        let mut m = m;
        let labels: Vec<usize> = (0..32).map(|i| i % 3).collect();
        let r = train(&mut m, &frames, &labels, &TrainConfig::new(1, 1)).unwrap();
        assert_eq!(r.batches, 1);
        assert_eq!(r.pqc_evals, 32 * crate::qsim::PQC_EVALS_PER_SAMPLE);
    }

    #[test]
    fn shot_variance_shrinks_with_shots() {
        let var_at = |shots: u64| {
            let mut m = Model::<f64>::new(VariantKind::Hqnn, BackboneDims::TINY, ExecMode::Shots(shots), 8);
            m.latent.update(&[[0.0, 0.0], [1.0, 1.0]]);
            let f = random_frame(16, 6);
            let mut ws = Workspace::default();
            let xs: Vec<f64> = (0..400)
                .map(|s| {
                    m.forward(&f, &mut ws, Pass::Eval { seed: s }).unwrap();
                    Model::<f64>::features_of(&ws)[0]
                })
                .collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
        };
        let (v256, v4096) = (var_at(256), var_at(4096));
        assert!(v4096 > 0.0);
        let ratio = v256 / v4096;
        // ideal ratio 16; sampling error of 400 draws keeps it well inside
        assert!((8.0..32.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        // three well separated synthetic classes on 8x8 frames
        let dims = BackboneDims {
            height: 8,
            width: 8,
            c1: 4,
            c2: 4,
            pool_h: 2,
            pool_w: 2,
            hidden: 8,
        };
        let mut frames = Vec::new();
        let mut labels = Vec::new();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        for i in 0..96 {
            let c = i % 3;
            let f: Vec<f32> = (0..64)
                .map(|p| {
                    let bump = if p / 8 == 2 * c + 1 { 2.0 } else { 0.0 };
                    bump + r.random_range(-0.3..0.3)
                })
                .collect();
            frames.push(f);
            labels.push(c);
        }
        let refs: Vec<&[f32]> = frames.iter().map(Vec::as_slice).collect();
        let run = || {
            let mut m = Model::<f32>::new(VariantKind::Hqnn, dims, ExecMode::Analytic, 11);
            let mut cfg = TrainConfig::new(100, 11);
            cfg.lr = 1e-2;
            let rep = train(&mut m, &refs, &labels, &cfg).unwrap();
            (m, rep)
        };
        let (m1, r1) = run();
        let (m2, r2) = run();
        assert_eq!(m1.params, m2.params);
        assert_eq!(r1.epochs, r2.epochs);
        assert!(r1.epochs.last().unwrap().loss < r1.epochs[0].loss);
        // the 2-D batch statistics make single epochs noisy; judge the tail
        let best = r1.epochs[60..].iter().map(|e| e.acc).fold(0.0, f64::max);
        assert!(best > 0.95, "{best}");
        let bad: Vec<usize> = vec![0; labels.len()];
        let mut m = Model::<f32>::new(VariantKind::Hqnn, dims, ExecMode::Analytic, 11);
        assert!(matches!(train(&mut m, &refs, &bad, &TrainConfig::new(1, 0)), Err(ModelError::EmptyClass(1))));
    }
}
