use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use num_complex::Complex64;

use super::hamiltonian::{Drive, Hamiltonian};
use super::EmulatorError;
use crate::model::{PulseProgram, Side};
use crate::par::ExecPolicy;

/// Cooperative cancellation checked at integrator checkpoints.
#[derive(Debug, Clone, Default)]
pub struct CancelFlag(Arc<AtomicBool>);

impl CancelFlag {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

/// Steps between cancellation checks.
const CHECKPOINT_STEPS: usize = 64;

const NS_PER_US: f64 = 1000.0;

/// Final state of an integration together with its norm bookkeeping.
#[derive(Debug, Clone)]
pub struct Evolution<S> {
    pub state: S,
    /// `| ‖ψ_final‖ − 1 |`
    pub norm_drift: f64,
    /// Largest single-step change of `‖ψ‖`.
    pub max_step_drift: f64,
    pub steps: usize,
}

fn drive_at_local(pulse: &crate::model::Pulse, t: f64, side: Side) -> Drive {
    let d = pulse.duration as f64;
    Drive {
        amplitude: pulse.amplitude.value_at(t, d, side),
        detuning: pulse.detuning.value_at(t, d, side),
        phase: pulse.phase,
    }
}

/// Fixed-step RK4 for `i dψ/dt = H(t) ψ` starting from the all-ground state.
///
/// Each pulse is cut at the waveform breakpoints so that no step straddles
/// a discontinuity; the first stage samples H at the step start, the two
/// middle stages at the midpoint and the last at the step end (left limit).
pub(crate) struct Rk4<'a> {
    pub program: &'a PulseProgram,
    pub atoms: usize,
    pub interactions: Arc<Vec<f64>>,
    pub dt_ns: f64,
    pub policy: ExecPolicy,
    pub cancel: Option<&'a CancelFlag>,
}

impl Rk4<'_> {
    pub fn run(&self) -> Result<Evolution<Vec<Complex64>>, EmulatorError> {
        if !(self.dt_ns > 0.0 && self.dt_ns.is_finite()) {
            return Err(EmulatorError::Domain(format!(
                "time step must be positive, got {} ns",
                self.dt_ns
            )));
        }
        let dim = 1usize << self.atoms;
        let zero = Complex64::new(0.0, 0.0);
        let mut psi = vec![zero; dim];
        psi[0] = Complex64::new(1.0, 0.0);
        let mut k1 = vec![zero; dim];
        let mut k2 = vec![zero; dim];
        let mut k3 = vec![zero; dim];
        let mut k4 = vec![zero; dim];
        let mut tmp = vec![zero; dim];

        let mut norm = 1.0f64;
        let mut max_step_drift = 0.0f64;
        let mut steps = 0usize;

        for pulse in &self.program.pulses {
            let mut edges = pulse.amplitude.breakpoints();
            edges.extend(pulse.detuning.breakpoints());
            edges.push(0);
            edges.push(pulse.duration);
            edges.sort_unstable();
            edges.dedup();

            for window in edges.windows(2) {
                let (a, b) = (window[0] as f64, window[1] as f64);
                let mut t = a;
                while b - t > 1e-9 {
                    if steps % CHECKPOINT_STEPS == 0 {
                        if let Some(flag) = self.cancel {
                            if flag.is_cancelled() {
                                return Err(EmulatorError::Cancelled);
                            }
                        }
                    }
                    let h_ns = self.dt_ns.min(b - t);
                    let h = h_ns / NS_PER_US;
                    let start = drive_at_local(pulse, t, Side::Right);
                    let mid = drive_at_local(pulse, t + h_ns / 2.0, Side::Right);
                    let end = drive_at_local(pulse, t + h_ns, Side::Left);

                    self.deriv(start, &psi, &mut k1);
                    axpy(&psi, h / 2.0, &k1, &mut tmp);
                    self.deriv(mid, &tmp, &mut k2);
                    axpy(&psi, h / 2.0, &k2, &mut tmp);
                    self.deriv(mid, &tmp, &mut k3);
                    axpy(&psi, h, &k3, &mut tmp);
                    self.deriv(end, &tmp, &mut k4);

                    let w = h / 6.0;
                    for k in 0..dim {
                        psi[k] += (k1[k] + (k2[k] + k3[k]) * 2.0 + k4[k]) * w;
                    }

                    let next = psi.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
                    max_step_drift = max_step_drift.max((next - norm).abs());
                    norm = next;
                    steps += 1;
                    t += h_ns;
                }
            }
        }

        Ok(Evolution {
            state: psi,
            norm_drift: (norm - 1.0).abs(),
            max_step_drift,
            steps,
        })
    }

    /// `out = −i H ψ`
    fn deriv(&self, drive: Drive, psi: &[Complex64], out: &mut [Complex64]) {
        let h = Hamiltonian::new(self.atoms, drive, Arc::clone(&self.interactions));
        h.apply(psi, out, self.policy);
        for v in out.iter_mut() {
            *v = Complex64::new(v.im, -v.re);
        }
    }
}

/// `out = x + a·y`
fn axpy(x: &[Complex64], a: f64, y: &[Complex64], out: &mut [Complex64]) {
    for ((o, xv), yv) in out.iter_mut().zip(x).zip(y) {
        *o = xv + yv * a;
    }
}
