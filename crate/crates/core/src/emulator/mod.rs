//! Numerical backends for pulse programs.
//!
//! Two backends share one entry point, [`run_payload`]:
//!
//! * `emu-sv`: exact state-vector evolution of the full interacting
//!   Hamiltonian, capped at [`MAX_EXACT_ATOMS`] atoms.
//! * `mock-ps`: product-state evolution with interactions dropped. Two
//!   complex amplitudes per atom, so any register size the device accepts;
//!   physically uninteresting but adequate for end-to-end tests.
//!
//! Both integrate `i dψ/dt = H(t) ψ` (ħ = 1, time in µs, H in rad/µs) with
//! fixed-step RK4 from the all-ground state and never renormalize; the
//! final norm drift is reported and bounded.

mod hamiltonian;
mod integrate;
mod sampling;

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use hamiltonian::{build_hamiltonian, Drive, Hamiltonian};
pub use integrate::{CancelFlag, Evolution};
pub use sampling::{sample_counts, sample_counts_with, BitstringCounts, Measure, SAMPLE_NORM_TOLERANCE};

use crate::model::{validate_program, DeviceTarget, ModelError, PulseProgram, ValidationReport};
use crate::par::ExecPolicy;

/// Largest register the exact backend accepts (4096 amplitudes).
pub const MAX_EXACT_ATOMS: usize = 12;

/// Default integrator step, ns.
pub const DEFAULT_DT_NS: f64 = 1.0;

/// Final norm drift above which an integration is rejected.
pub const MAX_NORM_DRIFT: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EmulatorError {
    #[error("program fails validation against the device target")]
    Validation(ValidationReport),
    #[error("{atoms} atoms exceed backend capacity of {limit}")]
    Capacity { atoms: usize, limit: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("integration failed: norm drift {norm_drift:.3e} exceeds {MAX_NORM_DRIFT:e}; retry with a time step below {dt_ns} ns")]
    IntegrationFailure { norm_drift: f64, dt_ns: f64 },
    #[error("evolution cancelled")]
    Cancelled,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Dense state over `2^atoms` basis states, atom 0 the most significant bit,
/// bit value 1 meaning the Rydberg state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantumState {
    pub atoms: usize,
    pub amplitudes: Vec<Complex64>,
}

impl QuantumState {
    pub fn ground(atoms: usize) -> Self {
        let mut amplitudes = vec![Complex64::new(0.0, 0.0); 1 << atoms];
        amplitudes[0] = Complex64::new(1.0, 0.0);
        QuantumState { atoms, amplitudes }
    }

    pub fn from_amplitudes(amplitudes: Vec<Complex64>) -> Result<Self, EmulatorError> {
        let len = amplitudes.len();
        if len == 0 || !len.is_power_of_two() {
            return Err(EmulatorError::Domain(format!(
                "state length {len} is not a power of two"
            )));
        }
        Ok(QuantumState {
            atoms: len.trailing_zeros() as usize,
            amplitudes,
        })
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum()
    }

    pub fn probability(&self, index: usize) -> f64 {
        self.amplitudes[index].norm_sqr()
    }

    /// `P(atom i in |r⟩)` for every atom.
    pub fn marginals(&self) -> Vec<f64> {
        let n = self.atoms;
        (0..n)
            .map(|i| {
                let m = hamiltonian::atom_mask(n, i);
                self.amplitudes
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| k & m != 0)
                    .map(|(_, a)| a.norm_sqr())
                    .sum()
            })
            .collect()
    }

    /// `|⟨self|other⟩|²`
    pub fn fidelity(&self, other: &QuantumState) -> f64 {
        self.amplitudes
            .iter()
            .zip(&other.amplitudes)
            .map(|(a, b)| a.conj() * b)
            .sum::<Complex64>()
            .norm_sqr()
    }
}

/// One `(amplitude_g, amplitude_r)` pair per atom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductState {
    pub qubit_states: Vec<(Complex64, Complex64)>,
}

impl ProductState {
    pub fn marginals(&self) -> Vec<f64> {
        self.qubit_states.iter().map(|(_, r)| r.norm_sqr()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Backend {
    #[serde(rename = "mock-ps")]
    ProductMock,
    #[serde(rename = "emu-sv")]
    StateVector,
}

impl Backend {
    pub fn id(self) -> &'static str {
        match self {
            Backend::ProductMock => "mock-ps",
            Backend::StateVector => "emu-sv",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// Knobs shared by both backends.
#[derive(Debug, Clone)]
pub struct EmulatorOptions {
    pub dt_ns: f64,
    pub policy: ExecPolicy,
    pub cancel: Option<CancelFlag>,
}

impl Default for EmulatorOptions {
    fn default() -> Self {
        EmulatorOptions {
            dt_ns: DEFAULT_DT_NS,
            policy: ExecPolicy::default(),
            cancel: None,
        }
    }
}

impl EmulatorOptions {
    pub fn with_dt(dt_ns: f64) -> Self {
        EmulatorOptions {
            dt_ns,
            ..Self::default()
        }
    }
}

fn precheck(p: &PulseProgram, target: &DeviceTarget, dt_ns: f64) -> Result<(), EmulatorError> {
    p.check()?;
    let report = validate_program(p, target);
    if !report.valid {
        return Err(EmulatorError::Validation(report));
    }
    if !(dt_ns > 0.0 && dt_ns.is_finite()) {
        return Err(EmulatorError::Domain(format!(
            "time step must be positive, got {dt_ns} ns"
        )));
    }
    Ok(())
}

fn check_drift<S>(evolution: &Evolution<S>, dt_ns: f64) -> Result<(), EmulatorError> {
    if evolution.norm_drift > MAX_NORM_DRIFT {
        return Err(EmulatorError::IntegrationFailure {
            norm_drift: evolution.norm_drift,
            dt_ns,
        });
    }
    Ok(())
}

/// Exact evolution without validation or drift checks; the caller owns both.
pub(crate) fn integrate_exact(
    p: &PulseProgram,
    c6: f64,
    opts: &EmulatorOptions,
) -> Result<Evolution<QuantumState>, EmulatorError> {
    let atoms = p.atom_count();
    if atoms > MAX_EXACT_ATOMS {
        return Err(EmulatorError::Capacity {
            atoms,
            limit: MAX_EXACT_ATOMS,
        });
    }
    let diag = hamiltonian::interaction_diagonal(&p.register, c6, opts.policy)?;
    let ev = integrate::Rk4 {
        program: p,
        atoms,
        interactions: Arc::new(diag),
        dt_ns: opts.dt_ns,
        policy: opts.policy,
        cancel: opts.cancel.as_ref(),
    }
    .run()?;
    Ok(Evolution {
        state: QuantumState {
            atoms,
            amplitudes: ev.state,
        },
        norm_drift: ev.norm_drift,
        max_step_drift: ev.max_step_drift,
        steps: ev.steps,
    })
}

pub fn evolve_exact(
    p: &PulseProgram,
    target: &DeviceTarget,
    dt_ns: f64,
) -> Result<Evolution<QuantumState>, EmulatorError> {
    evolve_exact_with(p, target, &EmulatorOptions::with_dt(dt_ns))
}

pub fn evolve_exact_with(
    p: &PulseProgram,
    target: &DeviceTarget,
    opts: &EmulatorOptions,
) -> Result<Evolution<QuantumState>, EmulatorError> {
    precheck(p, target, opts.dt_ns)?;
    let ev = integrate_exact(p, target.c6_coefficient, opts)?;
    check_drift(&ev, opts.dt_ns)?;
    Ok(ev)
}

pub fn evolve_product(
    p: &PulseProgram,
    target: &DeviceTarget,
    dt_ns: f64,
) -> Result<Evolution<ProductState>, EmulatorError> {
    evolve_product_with(p, target, &EmulatorOptions::with_dt(dt_ns))
}

/// Interaction-free evolution. Every atom sees the same global drive, so a
/// single two-level trajectory is integrated and copied to each atom.
pub fn evolve_product_with(
    p: &PulseProgram,
    target: &DeviceTarget,
    opts: &EmulatorOptions,
) -> Result<Evolution<ProductState>, EmulatorError> {
    precheck(p, target, opts.dt_ns)?;
    let single = integrate::Rk4 {
        program: p,
        atoms: 1,
        interactions: Arc::new(vec![0.0, 0.0]),
        dt_ns: opts.dt_ns,
        policy: ExecPolicy::Sequential,
        cancel: opts.cancel.as_ref(),
    }
    .run()?;
    check_drift(&single, opts.dt_ns)?;
    let pair = (single.state[0], single.state[1]);
    Ok(Evolution {
        state: ProductState {
            qubit_states: vec![pair; p.atom_count()],
        },
        norm_drift: single.norm_drift,
        max_step_drift: single.max_step_drift,
        steps: single.steps,
    })
}

/// Evolved state of either backend.
#[derive(Debug, Clone)]
pub enum FinalState {
    Exact(QuantumState),
    Product(ProductState),
}

impl FinalState {
    pub fn marginals(&self) -> Vec<f64> {
        match self {
            FinalState::Exact(s) => s.marginals(),
            FinalState::Product(s) => s.marginals(),
        }
    }

    pub fn sample(&self, shots: u64, seed: u64, policy: ExecPolicy) -> Result<BitstringCounts, EmulatorError> {
        match self {
            FinalState::Exact(s) => sample_counts_with(s, shots, seed, policy),
            FinalState::Product(s) => sample_counts_with(s, shots, seed, policy),
        }
    }
}

/// Validates and evolves `p` on `backend`, returning the final state and its
/// norm drift. Used by [`run_payload`] and by batched QPU execution, which
/// samples the same state once per batch.
pub fn prepare(
    p: &PulseProgram,
    backend: Backend,
    target: &DeviceTarget,
    opts: &EmulatorOptions,
) -> Result<(FinalState, f64), EmulatorError> {
    match backend {
        Backend::StateVector => {
            if p.atom_count() > MAX_EXACT_ATOMS {
                return Err(EmulatorError::Capacity {
                    atoms: p.atom_count(),
                    limit: MAX_EXACT_ATOMS,
                });
            }
            let ev = evolve_exact_with(p, target, opts)?;
            Ok((FinalState::Exact(ev.state), ev.norm_drift))
        }
        Backend::ProductMock => {
            let ev = evolve_product_with(p, target, opts)?;
            Ok((FinalState::Product(ev.state), ev.norm_drift))
        }
    }
}

/// Measurement result of one payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub backend: Backend,
    pub counts: BitstringCounts,
    pub shots: u64,
    pub calibration_timestamp: f64,
    pub norm_drift: f64,
}

pub fn run_payload(
    p: &PulseProgram,
    backend: Backend,
    target: &DeviceTarget,
    seed: u64,
) -> Result<RunResult, EmulatorError> {
    run_payload_with(p, backend, target, seed, &EmulatorOptions::default())
}

pub fn run_payload_with(
    p: &PulseProgram,
    backend: Backend,
    target: &DeviceTarget,
    seed: u64,
    opts: &EmulatorOptions,
) -> Result<RunResult, EmulatorError> {
    let (state, norm_drift) = prepare(p, backend, target, opts)?;
    let counts = state.sample(p.shots, seed, opts.policy)?;
    Ok(RunResult {
        backend,
        counts,
        shots: p.shots,
        calibration_timestamp: target.calibration_timestamp,
        norm_drift,
    })
}
