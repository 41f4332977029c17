use std::sync::Arc;

use num_complex::Complex64;

use super::{EmulatorError, MAX_EXACT_ATOMS};
use crate::model::{interaction_strength, AtomRegister, PulseProgram, Side};
use crate::par::{self, ExecPolicy};

/// Global-channel drive parameters at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Drive {
    /// Ω, rad/µs
    pub amplitude: f64,
    /// δ, rad/µs
    pub detuning: f64,
    /// φ, rad
    pub phase: f64,
}

impl Drive {
    /// Matrix element ⟨g|h|r⟩ of the single-atom drive; ⟨r|h|g⟩ is its conjugate.
    pub(crate) fn coupling(&self) -> Complex64 {
        Complex64::from_polar(self.amplitude / 2.0, self.phase)
    }
}

/// Bit mask of atom `i` in an `n`-atom basis index (atom 0 is the MSB).
#[inline]
pub(crate) fn atom_mask(n: usize, i: usize) -> usize {
    1 << (n - 1 - i)
}

/// Diagonal `Σ_{i<j} V_ij n_i n_j` for every basis state.
pub(crate) fn interaction_diagonal(
    register: &AtomRegister,
    c6: f64,
    policy: ExecPolicy,
) -> Result<Vec<f64>, EmulatorError> {
    let n = register.len();
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let v = if c6 == 0.0 {
                0.0
            } else {
                interaction_strength(
                    register.atoms[i].position(),
                    register.atoms[j].position(),
                    c6,
                )?
            };
            if v != 0.0 {
                pairs.push((atom_mask(n, i) | atom_mask(n, j), v));
            }
        }
    }
    let mut diag = vec![0.0; 1 << n];
    par::fill_indexed(policy, &mut diag, |k| {
        pairs
            .iter()
            .filter(|(m, _)| k & m == *m)
            .map(|(_, v)| v)
            .sum()
    });
    Ok(diag)
}

/// The analog Hamiltonian of an `n`-atom register at one instant:
///
/// `H = Σ_i [(Ω/2)(cos φ X_i − sin φ Y_i) − δ n_i] + Σ_{i<j} V_ij n_i n_j`
///
/// Stored in factored form; [`Hamiltonian::to_dense`] materializes it.
#[derive(Debug, Clone)]
pub struct Hamiltonian {
    atoms: usize,
    drive: Drive,
    interactions: Arc<Vec<f64>>,
}

impl Hamiltonian {
    pub(crate) fn new(atoms: usize, drive: Drive, interactions: Arc<Vec<f64>>) -> Self {
        debug_assert_eq!(interactions.len(), 1 << atoms);
        Hamiltonian {
            atoms,
            drive,
            interactions,
        }
    }

    pub fn atoms(&self) -> usize {
        self.atoms
    }

    pub fn dim(&self) -> usize {
        1 << self.atoms
    }

    pub fn drive(&self) -> Drive {
        self.drive
    }

    pub fn diagonal(&self, k: usize) -> f64 {
        self.interactions[k] - self.drive.detuning * k.count_ones() as f64
    }

    /// Row `k` of `H·ψ`.
    #[inline]
    pub(crate) fn row(&self, psi: &[Complex64], k: usize) -> Complex64 {
        let n = self.atoms;
        let up = self.drive.coupling();
        let down = up.conj();
        let mut acc = psi[k] * self.diagonal(k);
        if self.drive.amplitude != 0.0 {
            for i in 0..n {
                let m = atom_mask(n, i);
                if k & m == 0 {
                    acc += up * psi[k | m];
                } else {
                    acc += down * psi[k ^ m];
                }
            }
        }
        acc
    }

    /// `out = H·ψ`.
    pub fn apply(&self, psi: &[Complex64], out: &mut [Complex64], policy: ExecPolicy) {
        par::fill_indexed(policy, out, |k| self.row(psi, k));
    }

    pub fn to_dense(&self) -> Vec<Vec<Complex64>> {
        let dim = self.dim();
        (0..dim)
            .map(|col| {
                let mut e = vec![Complex64::new(0.0, 0.0); dim];
                e[col] = Complex64::new(1.0, 0.0);
                let mut out = vec![Complex64::new(0.0, 0.0); dim];
                self.apply(&e, &mut out, ExecPolicy::Sequential);
                out
            })
            .fold(vec![Vec::with_capacity(dim); dim], |mut rows, column| {
                for (r, v) in column.into_iter().enumerate() {
                    rows[r].push(v);
                }
                rows
            })
    }
}

/// Locates the pulse active at program time `t` (ns) and returns it with
/// the pulse-local time.
pub(crate) fn drive_at(p: &PulseProgram, t: f64) -> Option<Drive> {
    let mut start = 0.0;
    for pulse in &p.pulses {
        let end = start + pulse.duration as f64;
        if t >= start && t < end {
            let local = t - start;
            let d = pulse.duration as f64;
            return Some(Drive {
                amplitude: pulse.amplitude.value_at(local, d, Side::Right),
                detuning: pulse.detuning.value_at(local, d, Side::Right),
                phase: pulse.phase,
            });
        }
        start = end;
    }
    None
}

/// Hamiltonian of program `p` at time `t` ns, with interaction coefficient `c6`.
pub fn build_hamiltonian(p: &PulseProgram, t: f64, c6: f64) -> Result<Hamiltonian, EmulatorError> {
    let n = p.atom_count();
    if n > MAX_EXACT_ATOMS {
        return Err(EmulatorError::Capacity {
            atoms: n,
            limit: MAX_EXACT_ATOMS,
        });
    }
    let drive = drive_at(p, t).ok_or_else(|| {
        EmulatorError::Domain(format!(
            "time {t} ns outside program duration {} ns",
            p.duration()
        ))
    })?;
    let diag = interaction_diagonal(&p.register, c6, ExecPolicy::Sequential)?;
    Ok(Hamiltonian::new(n, drive, Arc::new(diag)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Atom, AtomRegister, Pulse, PulseProgram, Waveform};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn one_atom(pulse: Pulse) -> PulseProgram {
        PulseProgram::new(AtomRegister::line(1, 5.0), vec![pulse], 1)
    }

    #[test]
    fn single_atom_drive() {
        let h = build_hamiltonian(&one_atom(Pulse::square(100, 2.0, 0.0)), 10.0, 0.0).unwrap();
        assert_eq!(
            h.to_dense(),
            vec![vec![c(0.0, 0.0), c(1.0, 0.0)], vec![c(1.0, 0.0), c(0.0, 0.0)]]
        );
    }

    #[test]
    fn single_atom_detuning() {
        let h = build_hamiltonian(&one_atom(Pulse::square(100, 0.0, 3.0)), 0.0, 0.0).unwrap();
        assert_eq!(
            h.to_dense(),
            vec![vec![c(0.0, 0.0), c(0.0, 0.0)], vec![c(0.0, 0.0), c(-3.0, 0.0)]]
        );
    }

    #[test]
    fn phase_enters_as_cos_x_minus_sin_y() {
        let phase = 0.7;
        let p = one_atom(Pulse::new(100, Waveform::constant(2.0), Waveform::constant(0.0), phase));
        let h = build_hamiltonian(&p, 0.0, 0.0).unwrap().to_dense();
        // cos φ X − sin φ Y = [[0, cos φ + i sin φ], [cos φ − i sin φ, 0]]
        assert!((h[0][1] - c(phase.cos(), phase.sin())).norm() < 1e-15);
        assert!((h[1][0] - c(phase.cos(), -phase.sin())).norm() < 1e-15);
    }

    #[test]
    fn pair_interaction_only_on_rr() {
        let reg = AtomRegister::new(vec![Atom::new("a", 0.0, 0.0), Atom::new("b", 1.0, 0.0)]);
        let p = PulseProgram::new(reg, vec![Pulse::square(100, 0.0, 0.0)], 1);
        let h = build_hamiltonian(&p, 50.0, 64.0).unwrap().to_dense();
        for (r, row) in h.iter().enumerate() {
            for (col, v) in row.iter().enumerate() {
                let expected = if r == 3 && col == 3 { 64.0 } else { 0.0 };
                assert_eq!(*v, c(expected, 0.0));
            }
        }
    }

    #[test]
    fn hermitian_by_construction() {
        let reg = AtomRegister::new(vec![
            Atom::new("a", 0.0, 0.0),
            Atom::new("b", 6.0, 0.0),
            Atom::new("c", 2.0, 5.5),
        ]);
        let p = PulseProgram::new(
            reg,
            vec![Pulse::new(
                1000,
                Waveform::ramp(0.5, 3.0),
                Waveform::piecewise(&[(300, -2.0), (700, 4.0)]),
                2.1,
            )],
            1,
        );
        for t in [0.0, 123.5, 299.9, 300.0, 999.0] {
            let h = build_hamiltonian(&p, t, 5.42e6).unwrap().to_dense();
            for r in 0..8 {
                for col in 0..8 {
                    assert_eq!(h[r][col], h[col][r].conj());
                }
            }
        }
    }

    #[test]
    fn errors() {
        let p = one_atom(Pulse::square(100, 1.0, 0.0));
        assert!(matches!(build_hamiltonian(&p, 100.0, 0.0), Err(EmulatorError::Domain(_))));
        let big = PulseProgram::new(AtomRegister::line(13, 5.0), vec![Pulse::square(10, 1.0, 0.0)], 1);
        assert!(matches!(
            build_hamiltonian(&big, 0.0, 0.0),
            Err(EmulatorError::Capacity { atoms: 13, limit: 12 })
        ));
    }
}
