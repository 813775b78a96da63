//! Exact two-qubit statevector simulator.
//!
//! Basis order is `|q0 q1>` with qubit 0 the left label, so the amplitude
//! index is `2 * q0 + q1` and `ZI` acts on qubit 0.

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, PI};

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum QsimError {
    #[error("feature-map input {0} outside [0, pi]")]
    InputOutOfRange(f64),
    #[error("gate {0} has no rotation angle")]
    NotParameterized(usize),
}

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateVector(pub [Complex64; 4]);

impl Default for StateVector {
    fn default() -> Self {
        Self::zero()
    }
}

impl StateVector {
    /// `|00>`
    pub fn zero() -> Self {
        Self([ONE, ZERO, ZERO, ZERO])
    }

    pub fn basis(index: usize) -> Self {
        let mut a = [ZERO; 4];
        a[index] = ONE;
        Self(a)
    }

    pub fn norm_sqr(&self) -> f64 {
        self.0.iter().map(|a| a.norm_sqr()).sum()
    }

    pub fn probabilities(&self) -> [f64; 4] {
        self.0.map(|a| a.norm_sqr())
    }

    /// Index pairs `(i, j)` that differ only in `qubit`, with `i` having it 0.
    fn pairs(qubit: usize) -> [(usize, usize); 2] {
        if qubit == 0 {
            [(0, 2), (1, 3)]
        } else {
            [(0, 1), (2, 3)]
        }
    }

    fn apply_1q(&mut self, qubit: usize, m: [[Complex64; 2]; 2]) {
        for (i, j) in Self::pairs(qubit) {
            let (a, b) = (self.0[i], self.0[j]);
            self.0[i] = m[0][0] * a + m[0][1] * b;
            self.0[j] = m[1][0] * a + m[1][1] * b;
        }
    }

    pub fn apply(&mut self, gate: &Gate) {
        match *gate {
            Gate::H(q) => {
                let h = Complex64::new(FRAC_1_SQRT_2, 0.0);
                self.apply_1q(q, [[h, h], [h, -h]]);
            }
            Gate::Ry(q, t) => {
                let (s, c) = (0.5 * t).sin_cos();
                let (s, c) = (Complex64::new(s, 0.0), Complex64::new(c, 0.0));
                self.apply_1q(q, [[c, -s], [s, c]]);
            }
            Gate::Rz(q, t) => {
                let m = Complex64::from_polar(1.0, -0.5 * t);
                let p = Complex64::from_polar(1.0, 0.5 * t);
                self.apply_1q(q, [[m, ZERO], [ZERO, p]]);
            }
            Gate::Cx { control, target } => {
                for (i, j) in Self::pairs(target) {
                    let control_set = if control == 0 { i >= 2 } else { i & 1 == 1 };
                    if control_set {
                        self.0.swap(i, j);
                    }
                }
            }
            Gate::Rzz(t) => {
                let m = Complex64::from_polar(1.0, -0.5 * t);
                let p = Complex64::from_polar(1.0, 0.5 * t);
                self.0[0] *= m;
                self.0[1] *= p;
                self.0[2] *= p;
                self.0[3] *= m;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gate {
    H(usize),
    Ry(usize, f64),
    Rz(usize, f64),
    Cx { control: usize, target: usize },
    /// ZZ rotation on qubits (0, 1).
    Rzz(f64),
}

impl Gate {
    pub fn angle(&self) -> Option<f64> {
        match *self {
            Gate::Ry(_, t) | Gate::Rz(_, t) | Gate::Rzz(t) => Some(t),
            _ => None,
        }
    }

    pub fn with_angle(&self, angle: f64) -> Option<Gate> {
        match *self {
            Gate::Ry(q, _) => Some(Gate::Ry(q, angle)),
            Gate::Rz(q, _) => Some(Gate::Rz(q, angle)),
            Gate::Rzz(_) => Some(Gate::Rzz(angle)),
            _ => None,
        }
    }
}

/// Ordered gate program acting on `|00>`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Circuit {
    pub gates: Vec<Gate>,
}

impl Circuit {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn then(mut self, other: Circuit) -> Self {
        self.gates.extend(other.gates);
        self
    }

    pub fn run_on(&self, mut state: StateVector) -> StateVector {
        for g in &self.gates {
            state.apply(g);
        }
        state
    }

    pub fn run(&self) -> StateVector {
        self.run_on(StateVector::zero())
    }

    /// Copy with the angle of gate `index` moved by `delta`.
    pub fn shifted(&self, index: usize, delta: f64) -> Result<Circuit, QsimError> {
        let g = self.gates.get(index).ok_or(QsimError::NotParameterized(index))?;
        let angle = g.angle().ok_or(QsimError::NotParameterized(index))?;
        let mut c = self.clone();
        c.gates[index] = g.with_angle(angle + delta).expect("parameterized gate");
        Ok(c)
    }
}

/// Second-order Pauli-Z feature map, one repetition.
pub fn zz_feature_map(x0: f64, x1: f64) -> Result<Circuit, QsimError> {
    for x in [x0, x1] {
        if !(0.0..=PI).contains(&x) {
            return Err(QsimError::InputOutOfRange(x));
        }
    }
    Ok(Circuit {
        gates: vec![
            Gate::H(0),
            Gate::H(1),
            Gate::Rz(0, 2.0 * x0),
            Gate::Rz(1, 2.0 * x1),
            Gate::Rzz(2.0 * (PI - x0) * (PI - x1)),
        ],
    })
}

/// Real-amplitudes ansatz, one repetition: RY layer, CX, RY layer.
pub fn real_amplitudes(theta: [f64; 4]) -> Circuit {
    Circuit {
        gates: vec![
            Gate::Ry(0, theta[0]),
            Gate::Ry(1, theta[1]),
            Gate::Cx { control: 0, target: 1 },
            Gate::Ry(0, theta[2]),
            Gate::Ry(1, theta[3]),
        ],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Observable {
    II,
    ZI,
    IZ,
    ZZ,
}

impl Observable {
    /// Eigenvalue on basis state `index`.
    pub fn eigenvalue(&self, index: usize) -> f64 {
        let z0 = if index >= 2 { -1.0 } else { 1.0 };
        let z1 = if index & 1 == 1 { -1.0 } else { 1.0 };
        match self {
            Observable::II => 1.0,
            Observable::ZI => z0,
            Observable::IZ => z1,
            Observable::ZZ => z0 * z1,
        }
    }

    pub fn from_probabilities(&self, p: &[f64; 4]) -> f64 {
        (0..4).map(|i| self.eigenvalue(i) * p[i]).sum()
    }
}

pub fn expectation(state: &StateVector, obs: Observable) -> f64 {
    obs.from_probabilities(&state.probabilities())
}

/// Exact expectation values or a finite number of measurement shots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shots {
    Analytic,
    Count(u64),
}

/// Draw `shots` outcomes from the computational-basis distribution.
pub fn sample_counts(state: &StateVector, shots: u64, rng: &mut ChaCha8Rng) -> [u64; 4] {
    let p = state.probabilities();
    let total: f64 = p.iter().sum();
    let mut counts = [0u64; 4];
    let mut left = shots;
    let mut mass = total;
    for i in 0..3 {
        if left == 0 {
            break;
        }
        let q = if mass > 0.0 { (p[i] / mass).clamp(0.0, 1.0) } else { 0.0 };
        let k = Binomial::new(left, q).expect("valid binomial").sample(rng);
        counts[i] = k;
        left -= k;
        mass -= p[i];
    }
    counts[3] = left;
    counts
}

pub fn expectation_from_counts(counts: &[u64; 4], obs: Observable) -> f64 {
    let n: u64 = counts.iter().sum();
    let s: f64 = (0..4).map(|i| obs.eigenvalue(i) * counts[i] as f64).sum();
    s / n as f64
}

pub fn sample_expectation(state: &StateVector, obs: Observable, shots: Shots, seed: u64) -> f64 {
    match shots {
        Shots::Analytic => expectation(state, obs),
        Shots::Count(n) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            expectation_from_counts(&sample_counts(state, n.max(1), &mut rng), obs)
        }
    }
}

/// `(E(theta + pi/2) - E(theta - pi/2)) / 2` for the angle of gate `index`.
pub fn param_shift_grad(circuit: &Circuit, obs: Observable, index: usize) -> Result<f64, QsimError> {
    let plus = expectation(&circuit.shifted(index, FRAC_PI_2)?.run(), obs);
    let minus = expectation(&circuit.shifted(index, -FRAC_PI_2)?.run(), obs);
    Ok(0.5 * (plus - minus))
}

/// Two-qubit classifier block: ZZ feature map on the input angles followed
/// by the real-amplitudes ansatz, read out as `(<ZI>, <IZ>)`.
///
/// Gradients with respect to the trainable angles use the shift rule on each
/// RY gate. Input gradients compose the shift-rule derivatives of the three
/// gates each input feeds: `RZ(q, 2 x_q)` contributes `2 dE/dphi_q` and the
/// shared `RZZ(2 (pi - x0)(pi - x1))` contributes `-2 (pi - x_other) dE/dphi_zz`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pqc {
    pub inputs: [f64; 2],
    pub weights: [f64; 4],
}

/// Circuit executions spent on one forward pass plus gradient: the forward
/// circuit and a +/- pair for each of 4 ansatz gates and 3 encoding gates.
pub const PQC_EVALS_PER_SAMPLE: u64 = 1 + 2 * (4 + 3);

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PqcGradient {
    /// `d f_o / d weight_i` for observable o in (ZI, IZ).
    pub weights: [[f64; 4]; 2],
    /// `d f_o / d input_i`.
    pub inputs: [[f64; 2]; 2],
}

// gate positions inside `Pqc::circuit`
const RZ0: usize = 2;
const RZ1: usize = 3;
const RZZ: usize = 4;
const ANSATZ: [usize; 4] = [5, 6, 8, 9];

impl Pqc {
    pub fn circuit(&self) -> Result<Circuit, QsimError> {
        Ok(zz_feature_map(self.inputs[0], self.inputs[1])?.then(real_amplitudes(self.weights)))
    }

    fn readout(state: &StateVector, shots: Shots, rng: &mut ChaCha8Rng) -> [f64; 2] {
        match shots {
            Shots::Analytic => [expectation(state, Observable::ZI), expectation(state, Observable::IZ)],
            Shots::Count(n) => {
                let c = sample_counts(state, n.max(1), rng);
                [
                    expectation_from_counts(&c, Observable::ZI),
                    expectation_from_counts(&c, Observable::IZ),
                ]
            }
        }
    }

    /// Feature vector `(<ZI>, <IZ>)`; one circuit execution.
    pub fn features(&self, shots: Shots, seed: u64) -> Result<[f64; 2], QsimError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self::readout(&self.circuit()?.run(), shots, &mut rng))
    }

    /// Features and their gradients; `PQC_EVALS_PER_SAMPLE` executions.
    pub fn features_and_gradient(&self, shots: Shots, seed: u64) -> Result<([f64; 2], PqcGradient), QsimError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let circuit = self.circuit()?;
        let f = Self::readout(&circuit.run(), shots, &mut rng);
        let mut shift = |gate: usize| -> Result<[f64; 2], QsimError> {
            let plus = Self::readout(&circuit.shifted(gate, FRAC_PI_2)?.run(), shots, &mut rng);
            let minus = Self::readout(&circuit.shifted(gate, -FRAC_PI_2)?.run(), shots, &mut rng);
            Ok([0.5 * (plus[0] - minus[0]), 0.5 * (plus[1] - minus[1])])
        };
        let mut g = PqcGradient::default();
        for (i, &gate) in ANSATZ.iter().enumerate() {
            let d = shift(gate)?;
            g.weights[0][i] = d[0];
            g.weights[1][i] = d[1];
        }
        let d_rz0 = shift(RZ0)?;
        let d_rz1 = shift(RZ1)?;
        let d_zz = shift(RZZ)?;
        let [x0, x1] = self.inputs;
        for o in 0..2 {
            g.inputs[o][0] = 2.0 * d_rz0[o] - 2.0 * (PI - x1) * d_zz[o];
            g.inputs[o][1] = 2.0 * d_rz1[o] - 2.0 * (PI - x0) * d_zz[o];
        }
        Ok((f, g))
    }
}
