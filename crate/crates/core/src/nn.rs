//! Dense and convolutional kernels with hand-written backward passes, the
//! loss, Adam, and the checkpoint format.
//!
//! Parameters of a model live in one flat buffer described by a
//! [`ParamLayout`]; layers hold [`Slot`]s into it. Activations are
//! channel-major `[c][h][w]`.

use std::fmt::Debug;
use std::fs;
use std::iter::Sum;
use std::ops::AddAssign;
use std::path::Path;

use num_traits::Float;
use rand::Rng;
use thiserror::Error;

pub trait Real: Float + Default + Debug + Send + Sync + AddAssign + Sum + 'static {
    /// # Safety
    /// Same contract as `matrixmultiply::sgemm`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(x: f64) -> Self {
        Self::from(x).expect("representable")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// `C = alpha * op(A) * op(B) + beta * C`, all row-major. `op(A)` is m x k
/// (stored k x m when `ta`), `op(B)` is k x n (stored n x k when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch in {layer}: expected {expected}, got {got}")]
    Shape {
        layer: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

fn check_len(layer: &'static str, expected: usize, got: usize) -> Result<(), NnError> {
    if expected != got {
        return Err(NnError::Shape { layer, expected, got });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    pub fn of<'a, T>(&self, buf: &'a [T]) -> &'a [T] {
        &buf[self.offset..self.offset + self.len]
    }

    pub fn of_mut<'a, T>(&self, buf: &'a mut [T]) -> &'a mut [T] {
        &mut buf[self.offset..self.offset + self.len]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub total: usize,
}

impl ParamLayout {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize]) -> Slot {
        let len = shape.iter().product();
        let slot = Slot {
            offset: self.total,
            len,
        };
        self.entries.push(ParamEntry {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.total,
        });
        self.total += len;
        slot
    }

    pub fn slot(&self, name: &str) -> Option<Slot> {
        self.entries.iter().find(|e| e.name == name).map(|e| Slot {
            offset: e.offset,
            len: e.len(),
        })
    }
}

/// He-uniform over fan-in: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub fn kaiming_uniform<T: Real, R: Rng>(out: &mut [T], fan_in: usize, rng: &mut R) {
    let bound = (6.0 / fan_in as f64).sqrt();
    for v in out {
        *v = T::of(rng.random_range(-bound..bound));
    }
}

// ---------------------------------------------------------------- conv

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3x3 {
    pub cin: usize,
    pub cout: usize,
    pub weight: Slot,
    pub bias: Slot,
}

impl Conv3x3 {
    pub fn new(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize) -> Self {
        let weight = layout.push(format!("{name}.weight"), &[cout, cin, 3, 3]);
        let bias = layout.push(format!("{name}.bias"), &[cout]);
        Self { cin, cout, weight, bias }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len + self.bias.len
    }

    pub fn init<T: Real, R: Rng>(&self, params: &mut [T], rng: &mut R) {
        kaiming_uniform(self.weight.of_mut(params), self.cin * 9, rng);
        self.bias.of_mut(params).fill(T::zero());
    }

    /// `cols` receives the im2col matrix `[cin*9][h*w]` kept for backward.
    pub fn forward<T: Real>(
        &self,
        params: &[T],
        input: &[T],
        h: usize,
        w: usize,
        cols: &mut Vec<T>,
        out: &mut Vec<T>,
    ) -> Result<(), NnError> {
        check_len("conv3x3", self.cin * h * w, input.len())?;
        let hw = h * w;
        im2col(input, self.cin, h, w, cols);
        out.clear();
        for &b in self.bias.of(params) {
            out.extend(std::iter::repeat_n(b, hw));
        }
        gemm(self.cout, self.cin * 9, hw, T::one(), self.weight.of(params), false, cols, false, T::one(), out);
        Ok(())
    }

    /// Accumulates parameter gradients into `grads`; writes the input
    /// gradient when `dinput` is given.
    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Real>(
        &self,
        params: &[T],
        cols: &[T],
        dout: &[T],
        h: usize,
        w: usize,
        grads: &mut [T],
        dinput: Option<(&mut Vec<T>, &mut Vec<T>)>,
    ) {
        let hw = h * w;
        let k = self.cin * 9;
        let db = self.bias.of_mut(grads);
        for (co, g) in db.iter_mut().enumerate() {
            *g += dout[co * hw..(co + 1) * hw].iter().copied().sum();
        }
        gemm(self.cout, hw, k, T::one(), dout, false, cols, true, T::one(), self.weight.of_mut(grads));
        if let Some((dcols, dx)) = dinput {
            dcols.resize(k * hw, T::zero());
            gemm(k, self.cout, hw, T::one(), self.weight.of(params), true, dout, false, T::zero(), dcols);
            col2im(dcols, self.cin, h, w, dx);
        }
    }
}

/// Rows are `(ci, ky, kx)`, columns are output pixels; padding 1.
pub fn im2col<T: Real>(input: &[T], c: usize, h: usize, w: usize, cols: &mut Vec<T>) {
    let hw = h * w;
    cols.clear();
    cols.resize(c * 9 * hw, T::zero());
    for ci in 0..c {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`].
pub fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, out: &mut Vec<T>) {
    let hw = h * w;
    out.clear();
    out.resize(c * hw, T::zero());
    for ci in 0..c {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..][..w];
                    let dst = &mut plane[sy as usize * w..][..w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += *s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += *s),
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------- pointwise

pub fn relu_inplace<T: Real>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes `grad` where the stored activation was clipped.
pub fn relu_backward<T: Real>(activation: &[T], grad: &mut [T]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// `theta = pi * sigmoid(x)`, in (0, pi).
pub fn logistic_squash<T: Real>(x: T) -> T {
    T::of(std::f64::consts::PI) * sigmoid(x)
}

pub fn logistic_squash_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    T::of(std::f64::consts::PI) * s * (T::one() - s)
}

// ---------------------------------------------------------------- pooling

/// 2x2 max pooling with stride 2; `argmax` records the winning input index.
pub fn maxpool2<T: Real>(input: &[T], c: usize, h: usize, w: usize, out: &mut Vec<T>, argmax: &mut Vec<u32>) {
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 needs even dims");
    let (oh, ow) = (h / 2, w / 2);
    out.clear();
    argmax.clear();
    for ci in 0..c {
        let base = ci * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let i0 = base + 2 * y * w + 2 * x;
                let mut best = i0;
                for i in [i0 + 1, i0 + w, i0 + w + 1] {
                    if input[i] > input[best] {
                        best = i;
                    }
                }
                out.push(input[best]);
                argmax.push(best as u32);
            }
        }
    }
}

pub fn maxpool2_backward<T: Real>(dout: &[T], argmax: &[u32], input_len: usize, dinput: &mut Vec<T>) {
    dinput.clear();
    dinput.resize(input_len, T::zero());
    for (g, &i) in dout.iter().zip(argmax) {
        dinput[i as usize] += *g;
    }
}

/// Bin `j` of `n_out` over `n_in` spans `[floor(j n_in / n_out), ceil((j+1) n_in / n_out))`.
pub fn adaptive_bin(j: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let start = (j * n_in) / n_out;
    let end = ((j + 1) * n_in).div_ceil(n_out);
    (start, end)
}

pub fn adaptive_avgpool<T: Real>(input: &[T], c: usize, h: usize, w: usize, oh: usize, ow: usize, out: &mut Vec<T>) {
    out.clear();
    for ci in 0..c {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for i in 0..oh {
            let (y0, y1) = adaptive_bin(i, h, oh);
            for j in 0..ow {
                let (x0, x1) = adaptive_bin(j, w, ow);
                let mut s = T::zero();
                for y in y0..y1 {
                    for x in x0..x1 {
                        s += plane[y * w + x];
                    }
                }
                out.push(s / T::of(((y1 - y0) * (x1 - x0)) as f64));
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn adaptive_avgpool_backward<T: Real>(
    dout: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    dinput: &mut Vec<T>,
) {
    dinput.clear();
    dinput.resize(c * h * w, T::zero());
    for ci in 0..c {
        let plane = &mut dinput[ci * h * w..(ci + 1) * h * w];
        for i in 0..oh {
            let (y0, y1) = adaptive_bin(i, h, oh);
            for j in 0..ow {
                let (x0, x1) = adaptive_bin(j, w, ow);
                let g = dout[(ci * oh + i) * ow + j] / T::of(((y1 - y0) * (x1 - x0)) as f64);
                for y in y0..y1 {
                    for x in x0..x1 {
                        plane[y * w + x] += g;
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------- linear

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub fin: usize,
    pub fout: usize,
    pub weight: Slot,
    pub bias: Slot,
}

impl Linear {
    pub fn new(layout: &mut ParamLayout, name: &str, fin: usize, fout: usize) -> Self {
        let weight = layout.push(format!("{name}.weight"), &[fout, fin]);
        let bias = layout.push(format!("{name}.bias"), &[fout]);
        Self { fin, fout, weight, bias }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len + self.bias.len
    }

    pub fn init<T: Real, R: Rng>(&self, params: &mut [T], rng: &mut R) {
        kaiming_uniform(self.weight.of_mut(params), self.fin, rng);
        self.bias.of_mut(params).fill(T::zero());
    }

    pub fn forward<T: Real>(&self, params: &[T], x: &[T], out: &mut Vec<T>) -> Result<(), NnError> {
        check_len("linear", self.fin, x.len())?;
        let w = self.weight.of(params);
        out.clear();
        out.extend(self.bias.of(params).iter().enumerate().map(|(o, &b)| {
            b + w[o * self.fin..(o + 1) * self.fin]
                .iter()
                .zip(x)
                .map(|(&a, &b)| a * b)
                .sum::<T>()
        }));
        Ok(())
    }

    pub fn backward<T: Real>(&self, params: &[T], x: &[T], dout: &[T], grads: &mut [T], dx: Option<&mut Vec<T>>) {
        {
            let dw = self.weight.of_mut(grads);
            for (o, &g) in dout.iter().enumerate() {
                for (d, &xi) in dw[o * self.fin..(o + 1) * self.fin].iter_mut().zip(x) {
                    *d += g * xi;
                }
            }
        }
        for (d, &g) in self.bias.of_mut(grads).iter_mut().zip(dout) {
            *d += g;
        }
        if let Some(dx) = dx {
            let w = self.weight.of(params);
            dx.clear();
            dx.resize(self.fin, T::zero());
            for (o, &g) in dout.iter().enumerate() {
                for (d, &wi) in dx.iter_mut().zip(&w[o * self.fin..(o + 1) * self.fin]) {
                    *d += g * wi;
                }
            }
        }
    }
}

// ---------------------------------------------------------------- loss

/// Max-subtracted softmax.
pub fn softmax<T: Real>(z: &[T]) -> Vec<T> {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Returns `(p, L, dL/dz)` for `L = -w_y log p_y`.
pub fn softmax_ce<T: Real>(z: &[T], label: usize, weights: &[T]) -> (Vec<T>, T, Vec<T>) {
    let p = softmax(z);
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
    let w = weights[label];
    let loss = w * (lse - z[label]);
    let grad = p
        .iter()
        .enumerate()
        .map(|(c, &pc)| w * (pc - if c == label { T::one() } else { T::zero() }))
        .collect();
    (p, loss, grad)
}

/// Inverse class frequency, normalized to mean 1. Fails on an absent class.
pub fn inverse_frequency_weights(labels: &[usize], classes: usize) -> Option<Vec<f64>> {
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l] += 1;
    }
    if counts.contains(&0) {
        return None;
    }
    let inv: Vec<f64> = counts.iter().map(|&c| 1.0 / c as f64).collect();
    let mean = inv.iter().sum::<f64>() / classes as f64;
    Some(inv.into_iter().map(|v| v / mean).collect())
}

// ---------------------------------------------------------------- adam

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step<T: Real>(&mut self, params: &mut [T], grads: &[T]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let g = g.to_f64().expect("finite");
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let upd = self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            *p = *p - T::of(upd);
        }
    }
}

// ---------------------------------------------------------------- checkpoint

pub const CKPT_MAGIC: &[u8; 5] = b"CKPT1";

/// Named tensors over one little-endian f32 blob, plus key=value metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<ParamEntry>,
    pub values: Vec<f32>,
}

impl Checkpoint {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        self.tensors
            .iter()
            .find(|e| e.name == name)
            .map(|e| &self.values[e.offset..e.offset + e.len()])
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        let meta: String = self.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&(t.offset as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, NnError> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(5)? != CKPT_MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let meta_len = r.u32()? as usize;
        let meta_text = std::str::from_utf8(r.take(meta_len)?).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        let meta = meta_text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| NnError::Checkpoint(e.to_string()))?;
            let nd = r.u32()? as usize;
            let shape = (0..nd).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_, _>>()?;
            let offset = r.u64()? as usize;
            tensors.push(ParamEntry { name, shape, offset });
        }
        let count = r.u64()? as usize;
        let blob = r.take(count.checked_mul(4).ok_or_else(|| NnError::Checkpoint("size overflow".into()))?)?;
        let values: Vec<f32> = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        for t in &tensors {
            if t.offset + t.len() > values.len() {
                return Err(NnError::Checkpoint(format!("tensor {} runs past the blob", t.name)));
            }
        }
        Ok(Self { meta, tensors, values })
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, self.encode())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let bytes = fs::read(path).map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| NnError::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

// ---------------------------------------------------------------- checks

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let step = h * x[i].abs().max(1.0);
            xp[i] = x[i] + step;
            let fp = f(&xp);
            xp[i] = x[i] - step;
            let fm = f(&xp);
            xp[i] = x[i];
            (fp - fm) / (2.0 * step)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm; 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
