//! Pulse-level analog programs, device calibration targets and
//! point-of-execution validation.
//!
//! Canonical units throughout: nanoseconds for program time, rad/µs for
//! drive amplitude and detuning, micrometres for atom positions.

use std::collections::HashSet;
use std::f64::consts::TAU;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Interchange format version written into every program document.
pub const FORMAT_VERSION: &str = "1";

/// Default van der Waals coefficient in rad·µm⁶/µs.
pub const DEFAULT_C6: f64 = 5.42e6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("malformed program: {0}")]
    Structure(String),
    #[error("program document does not parse: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub id: String,
    /// µm
    pub x: f64,
    /// µm
    pub y: f64,
}

impl Atom {
    pub fn new(id: impl Into<String>, x: f64, y: f64) -> Self {
        Atom { id: id.into(), x, y }
    }

    pub fn position(&self) -> (f64, f64) {
        (self.x, self.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomRegister {
    pub atoms: Vec<Atom>,
}

impl AtomRegister {
    pub fn new(atoms: Vec<Atom>) -> Self {
        AtomRegister { atoms }
    }

    /// Evenly spaced atoms along the x axis, ids `q0..q{n-1}`.
    pub fn line(n: usize, spacing: f64) -> Self {
        AtomRegister {
            atoms: (0..n)
                .map(|i| Atom::new(format!("q{i}"), i as f64 * spacing, 0.0))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Smallest pairwise distance, `None` for fewer than two atoms.
    pub fn min_pair_distance(&self) -> Option<f64> {
        let mut best: Option<f64> = None;
        for (i, a) in self.atoms.iter().enumerate() {
            for b in &self.atoms[i + 1..] {
                let d = (a.x - b.x).hypot(a.y - b.y);
                best = Some(best.map_or(d, |m| m.min(d)));
            }
        }
        best
    }

    fn check(&self) -> Result<(), ModelError> {
        if self.atoms.is_empty() {
            return Err(ModelError::Structure("register has no atoms".into()));
        }
        let mut seen = HashSet::new();
        for atom in &self.atoms {
            if !seen.insert(atom.id.as_str()) {
                return Err(ModelError::Structure(format!(
                    "duplicate atom id {:?}",
                    atom.id
                )));
            }
            if !atom.x.is_finite() || !atom.y.is_finite() {
                return Err(ModelError::Structure(format!(
                    "atom {:?} has a non-finite coordinate",
                    atom.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    /// ns
    pub duration: u64,
    /// rad/µs
    pub value: f64,
}

/// Time profile of a drive quantity over one pulse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Waveform {
    Constant { value: f64 },
    Ramp { start: f64, stop: f64 },
    PiecewiseConstant { segments: Vec<Segment> },
}

/// Which one-sided limit to take when a sample time falls on a breakpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Side {
    Left,
    Right,
}

impl Waveform {
    pub fn constant(value: f64) -> Self {
        Waveform::Constant { value }
    }

    pub fn ramp(start: f64, stop: f64) -> Self {
        Waveform::Ramp { start, stop }
    }

    pub fn piecewise(segments: &[(u64, f64)]) -> Self {
        Waveform::PiecewiseConstant {
            segments: segments
                .iter()
                .map(|&(duration, value)| Segment { duration, value })
                .collect(),
        }
    }

    /// Extremes of the waveform over its whole support.
    pub fn bounds(&self) -> (f64, f64) {
        match self {
            Waveform::Constant { value } => (*value, *value),
            Waveform::Ramp { start, stop } => (start.min(*stop), start.max(*stop)),
            Waveform::PiecewiseConstant { segments } => segments.iter().fold(
                (f64::INFINITY, f64::NEG_INFINITY),
                |(lo, hi), s| (lo.min(s.value), hi.max(s.value)),
            ),
        }
    }

    /// Interior breakpoints (ns from pulse start) where the waveform jumps.
    pub(crate) fn breakpoints(&self) -> Vec<u64> {
        match self {
            Waveform::PiecewiseConstant { segments } if segments.len() > 1 => segments
                [..segments.len() - 1]
                .iter()
                .scan(0u64, |acc, s| {
                    *acc += s.duration;
                    Some(*acc)
                })
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Sample on the closed interval `[0, duration]`; on a breakpoint the
    /// requested one-sided limit is returned.
    pub(crate) fn value_at(&self, t: f64, duration: f64, side: Side) -> f64 {
        match self {
            Waveform::Constant { value } => *value,
            Waveform::Ramp { start, stop } => start + (stop - start) * t / duration,
            Waveform::PiecewiseConstant { segments } => {
                let mut edge = 0.0;
                for (i, seg) in segments.iter().enumerate() {
                    edge += seg.duration as f64;
                    let last = i + 1 == segments.len();
                    let inside = match side {
                        Side::Right => t < edge,
                        Side::Left => t <= edge,
                    };
                    if inside || last {
                        return seg.value;
                    }
                }
                0.0
            }
        }
    }

    fn check(&self, what: &str, duration: u64) -> Result<(), ModelError> {
        let finite = |v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(ModelError::Structure(format!("{what} has a non-finite value")))
            }
        };
        match self {
            Waveform::Constant { value } => finite(*value),
            Waveform::Ramp { start, stop } => finite(*start).and(finite(*stop)),
            Waveform::PiecewiseConstant { segments } => {
                if segments.is_empty() {
                    return Err(ModelError::Structure(format!("{what} has no segments")));
                }
                let mut total = 0u64;
                for seg in segments {
                    if seg.duration == 0 {
                        return Err(ModelError::Structure(format!(
                            "{what} has a zero-length segment"
                        )));
                    }
                    finite(seg.value)?;
                    total += seg.duration;
                }
                if total != duration {
                    return Err(ModelError::Structure(format!(
                        "{what} segments span {total} ns but the pulse lasts {duration} ns"
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Samples `w` at `t` ns into a pulse of `duration` ns.
///
/// Ramps interpolate linearly from `start` at t=0 towards `stop` at the
/// (excluded) end; piecewise-constant segments are left-closed and
/// right-open.
pub fn waveform_sample(w: &Waveform, t: f64, duration: u64) -> Result<f64, ModelError> {
    if !(0.0..duration as f64).contains(&t) {
        return Err(ModelError::Domain(format!(
            "sample time {t} ns outside [0, {duration})"
        )));
    }
    Ok(w.value_at(t, duration as f64, Side::Right))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pulse {
    /// ns
    pub duration: u64,
    /// Rabi frequency Ω in rad/µs, never negative.
    pub amplitude: Waveform,
    /// Detuning δ in rad/µs.
    pub detuning: Waveform,
    /// Drive phase φ in radians, `[0, 2π)`.
    pub phase: f64,
}

impl Pulse {
    pub fn new(duration: u64, amplitude: Waveform, detuning: Waveform, phase: f64) -> Self {
        Pulse {
            duration,
            amplitude,
            detuning,
            phase,
        }
    }

    /// Constant-amplitude, constant-detuning pulse with zero phase.
    pub fn square(duration: u64, amplitude: f64, detuning: f64) -> Self {
        Pulse::new(
            duration,
            Waveform::constant(amplitude),
            Waveform::constant(detuning),
            0.0,
        )
    }

    fn check(&self, index: usize) -> Result<(), ModelError> {
        if self.duration == 0 {
            return Err(ModelError::Structure(format!("pulse {index} has zero duration")));
        }
        self.amplitude
            .check(&format!("pulse {index} amplitude"), self.duration)?;
        self.detuning
            .check(&format!("pulse {index} detuning"), self.duration)?;
        if self.amplitude.bounds().0 < 0.0 {
            return Err(ModelError::Structure(format!(
                "pulse {index} amplitude goes negative"
            )));
        }
        if !(0.0..TAU).contains(&self.phase) {
            return Err(ModelError::Structure(format!(
                "pulse {index} phase {} outside [0, 2π)",
                self.phase
            )));
        }
        Ok(())
    }
}

/// The portable artifact moved unchanged between emulators and devices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseProgram {
    pub register: AtomRegister,
    pub pulses: Vec<Pulse>,
    pub shots: u64,
    pub format_version: String,
}

impl PulseProgram {
    pub fn new(register: AtomRegister, pulses: Vec<Pulse>, shots: u64) -> Self {
        PulseProgram {
            register,
            pulses,
            shots,
            format_version: FORMAT_VERSION.to_string(),
        }
    }

    /// Parses a program document and checks its structural invariants.
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let program: PulseProgram = serde_json::from_str(text)?;
        program.check()?;
        Ok(program)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("program serializes")
    }

    /// Structural checks independent of any device.
    pub fn check(&self) -> Result<(), ModelError> {
        if self.format_version != FORMAT_VERSION {
            return Err(ModelError::Structure(format!(
                "unsupported format_version {:?}",
                self.format_version
            )));
        }
        self.register.check()?;
        if self.shots == 0 {
            return Err(ModelError::Structure("shots must be at least 1".into()));
        }
        for (i, p) in self.pulses.iter().enumerate() {
            p.check(i)?;
        }
        Ok(())
    }

    pub fn atom_count(&self) -> usize {
        self.register.len()
    }

    pub fn duration(&self) -> u64 {
        program_duration(self)
    }
}

pub fn program_duration(p: &PulseProgram) -> u64 {
    p.pulses.iter().map(|pulse| pulse.duration).sum()
}

/// Calibration snapshot and capability limits of one resource.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceTarget {
    pub resource_id: String,
    pub max_atoms: usize,
    /// rad/µs
    pub max_amplitude: f64,
    /// (min, max) rad/µs
    pub detuning_range: (f64, f64),
    /// ns
    pub max_duration: u64,
    /// µm
    pub min_spacing: f64,
    /// rad·µm⁶/µs
    pub c6_coefficient: f64,
    /// shots per second
    pub shot_rate: f64,
    /// seconds since epoch
    pub calibration_timestamp: f64,
    pub nominal_max_amplitude: f64,
}

impl DeviceTarget {
    /// Wall time for `shots` shots on this device, in seconds.
    pub fn shot_seconds(&self, shots: u64) -> f64 {
        shots as f64 / self.shot_rate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViolationCode {
    TooManyAtoms,
    SpacingTooSmall,
    AmplitudeExceedsMax,
    DetuningOutOfRange,
    DurationExceedsMax,
}

impl ViolationCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationCode::TooManyAtoms => "TOO_MANY_ATOMS",
            ViolationCode::SpacingTooSmall => "SPACING_TOO_SMALL",
            ViolationCode::AmplitudeExceedsMax => "AMPLITUDE_EXCEEDS_MAX",
            ViolationCode::DetuningOutOfRange => "DETUNING_OUT_OF_RANGE",
            ViolationCode::DurationExceedsMax => "DURATION_EXCEEDS_MAX",
        }
    }
}

impl fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub message: String,
    pub offending_value: f64,
    pub limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub valid: bool,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn from_violations(violations: Vec<Violation>) -> Self {
        ValidationReport {
            valid: violations.is_empty(),
            violations,
        }
    }

    pub fn codes(&self) -> Vec<ViolationCode> {
        self.violations.iter().map(|v| v.code).collect()
    }

    pub fn has(&self, code: ViolationCode) -> bool {
        self.violations.iter().any(|v| v.code == code)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.valid {
            return f.write_str("valid");
        }
        writeln!(f, "invalid ({} violations)", self.violations.len())?;
        for v in &self.violations {
            writeln!(f, "  {}: {}", v.code, v.message)?;
        }
        Ok(())
    }
}

/// Checks a program against a device snapshot. All failing checks are
/// reported, in a fixed order.
pub fn validate_program(p: &PulseProgram, target: &DeviceTarget) -> ValidationReport {
    let mut violations = Vec::new();

    let atoms = p.atom_count();
    if atoms > target.max_atoms {
        violations.push(Violation {
            code: ViolationCode::TooManyAtoms,
            message: format!("{atoms} atoms exceed the device limit of {}", target.max_atoms),
            offending_value: atoms as f64,
            limit: target.max_atoms as f64,
        });
    }

    if let Some(d) = p.register.min_pair_distance() {
        if d < target.min_spacing {
            violations.push(Violation {
                code: ViolationCode::SpacingTooSmall,
                message: format!(
                    "closest atom pair is {d} µm apart, minimum is {} µm",
                    target.min_spacing
                ),
                offending_value: d,
                limit: target.min_spacing,
            });
        }
    }

    let peak = p
        .pulses
        .iter()
        .map(|pulse| pulse.amplitude.bounds().1)
        .fold(f64::NEG_INFINITY, f64::max);
    if peak > target.max_amplitude {
        violations.push(Violation {
            code: ViolationCode::AmplitudeExceedsMax,
            message: format!(
                "peak amplitude {peak} rad/µs exceeds the calibrated maximum {} rad/µs",
                target.max_amplitude
            ),
            offending_value: peak,
            limit: target.max_amplitude,
        });
    }

    let (lo, hi) = target.detuning_range;
    let (dmin, dmax) = p.pulses.iter().map(|pulse| pulse.detuning.bounds()).fold(
        (f64::INFINITY, f64::NEG_INFINITY),
        |(a, b), (c, d)| (a.min(c), b.max(d)),
    );
    if dmin < lo || dmax > hi {
        let (offending, limit) = if lo - dmin >= dmax - hi {
            (dmin, lo)
        } else {
            (dmax, hi)
        };
        violations.push(Violation {
            code: ViolationCode::DetuningOutOfRange,
            message: format!("detuning {offending} rad/µs outside [{lo}, {hi}] rad/µs"),
            offending_value: offending,
            limit,
        });
    }

    let duration = program_duration(p);
    if duration > target.max_duration {
        violations.push(Violation {
            code: ViolationCode::DurationExceedsMax,
            message: format!(
                "program lasts {duration} ns, device maximum is {} ns",
                target.max_duration
            ),
            offending_value: duration as f64,
            limit: target.max_duration as f64,
        });
    }

    ValidationReport::from_violations(violations)
}

/// Van der Waals interaction `c6 / r⁶` in rad/µs.
pub fn interaction_strength(a: (f64, f64), b: (f64, f64), c6: f64) -> Result<f64, ModelError> {
    let r = (a.0 - b.0).hypot(a.1 - b.1);
    if r == 0.0 {
        return Err(ModelError::Domain("coincident atoms have no finite interaction".into()));
    }
    Ok(c6 / r.powi(6))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn target() -> DeviceTarget {
        DeviceTarget {
            resource_id: "dev".into(),
            max_atoms: 4,
            max_amplitude: 10.0,
            detuning_range: (-20.0, 20.0),
            max_duration: 4000,
            min_spacing: 5.0,
            c6_coefficient: DEFAULT_C6,
            shot_rate: 1.0,
            calibration_timestamp: 0.0,
            nominal_max_amplitude: 10.0,
        }
    }

    fn program(atoms: AtomRegister, pulses: Vec<Pulse>) -> PulseProgram {
        PulseProgram::new(atoms, pulses, 10)
    }

    #[test]
    fn constant_sample_is_flat() {
        let w = Waveform::constant(3.0);
        for t in [0.0, 1.0, 499.5, 999.0] {
            assert_eq!(waveform_sample(&w, t, 1000).unwrap(), 3.0);
        }
    }

    #[test]
    fn ramp_midpoint() {
        let w = Waveform::ramp(0.0, 4.0);
        assert_eq!(waveform_sample(&w, 500.0, 1000).unwrap(), 2.0);
        assert_eq!(waveform_sample(&w, 0.0, 1000).unwrap(), 0.0);
    }

    // Reference interpolation: walk cumulative segment edges, first edge
    // strictly greater than t wins.
    fn pwc_reference(segments: &[(u64, f64)], t: f64) -> f64 {
        let mut edge = 0u64;
        for &(d, v) in segments {
            edge += d;
            if t < edge as f64 {
                return v;
            }
        }
        panic!("t beyond support")
    }

    #[test]
    fn piecewise_boundary_is_left_closed() {
        let segs = [(500, 1.0), (500, 2.0)];
        let w = Waveform::piecewise(&segs);
        assert_eq!(pwc_reference(&segs, 500.0), 2.0);
        assert_eq!(waveform_sample(&w, 500.0, 1000).unwrap(), 2.0);
        assert_eq!(waveform_sample(&w, 499.999, 1000).unwrap(), 1.0);
        for t in (0..1000).map(|k| k as f64 + 0.25) {
            assert_eq!(waveform_sample(&w, t, 1000).unwrap(), pwc_reference(&segs, t));
        }
    }

    #[test]
    fn sample_out_of_range_is_domain_error() {
        let w = Waveform::constant(1.0);
        assert!(matches!(waveform_sample(&w, 1000.0, 1000), Err(ModelError::Domain(_))));
        assert!(matches!(waveform_sample(&w, -0.5, 1000), Err(ModelError::Domain(_))));
    }

    #[test]
    fn left_limit_at_breakpoint() {
        let w = Waveform::piecewise(&[(500, 1.0), (500, 2.0)]);
        assert_eq!(w.value_at(500.0, 1000.0, Side::Left), 1.0);
        assert_eq!(w.value_at(500.0, 1000.0, Side::Right), 2.0);
        assert_eq!(w.value_at(1000.0, 1000.0, Side::Left), 2.0);
        assert_eq!(w.breakpoints(), vec![500]);
    }

    #[test]
    fn durations_add() {
        let reg = AtomRegister::line(1, 5.0);
        let p = program(reg.clone(), vec![Pulse::square(100, 1.0, 0.0), Pulse::square(400, 1.0, 0.0)]);
        assert_eq!(program_duration(&p), 500);
        assert_eq!(program_duration(&program(reg.clone(), vec![])), 0);
        assert_eq!(program_duration(&program(reg, vec![Pulse::square(1000, 1.0, 0.0)])), 1000);
    }

    #[test]
    fn amplitude_just_over_limit() {
        let t = target();
        let p = program(
            AtomRegister::line(2, 6.0),
            vec![Pulse::square(1000, 1.01 * t.max_amplitude, 0.0)],
        );
        let report = validate_program(&p, &t);
        assert!(!report.valid);
        assert_eq!(report.codes(), vec![ViolationCode::AmplitudeExceedsMax]);
    }

    #[test]
    fn interior_program_is_valid() {
        let p = program(
            AtomRegister::line(3, 6.0),
            vec![Pulse::new(
                1000,
                Waveform::ramp(0.0, 9.0),
                Waveform::piecewise(&[(400, -5.0), (600, 5.0)]),
                1.0,
            )],
        );
        let report = validate_program(&p, &target());
        assert!(report.valid, "{report}");
        assert!(report.violations.is_empty());
    }

    // Each check evaluated on its own against the raw limits; the report
    // must name exactly the failing set.
    fn expected_codes(p: &PulseProgram, t: &DeviceTarget) -> Vec<ViolationCode> {
        let mut out = Vec::new();
        if p.register.atoms.len() > t.max_atoms {
            out.push(ViolationCode::TooManyAtoms);
        }
        let atoms = &p.register.atoms;
        let mut close = false;
        for i in 0..atoms.len() {
            for j in 0..atoms.len() {
                if i != j {
                    let d = ((atoms[i].x - atoms[j].x).powi(2) + (atoms[i].y - atoms[j].y).powi(2)).sqrt();
                    close |= d < t.min_spacing;
                }
            }
        }
        if close {
            out.push(ViolationCode::SpacingTooSmall);
        }
        let mut amp_bad = false;
        let mut det_bad = false;
        for pulse in &p.pulses {
            for k in 0..pulse.duration {
                let a = waveform_sample(&pulse.amplitude, k as f64, pulse.duration).unwrap();
                let d = waveform_sample(&pulse.detuning, k as f64, pulse.duration).unwrap();
                amp_bad |= a > t.max_amplitude;
                det_bad |= d < t.detuning_range.0 || d > t.detuning_range.1;
            }
        }
        if amp_bad {
            out.push(ViolationCode::AmplitudeExceedsMax);
        }
        if det_bad {
            out.push(ViolationCode::DetuningOutOfRange);
        }
        if p.pulses.iter().map(|x| x.duration).sum::<u64>() > t.max_duration {
            out.push(ViolationCode::DurationExceedsMax);
        }
        out
    }

    #[test]
    fn close_pair_and_long_program() {
        let t = target();
        let p = program(
            AtomRegister::new(vec![
                Atom::new("a", 0.0, 0.0),
                Atom::new("b", 0.9 * t.min_spacing, 0.0),
            ]),
            vec![Pulse::square(2 * t.max_duration, 1.0, 0.0)],
        );
        let report = validate_program(&p, &t);
        let expected = expected_codes(&p, &t);
        assert_eq!(
            expected,
            vec![ViolationCode::SpacingTooSmall, ViolationCode::DurationExceedsMax]
        );
        assert_eq!(report.codes(), expected);
    }

    #[test]
    fn all_violations_reported_in_order() {
        let t = target();
        let p = program(
            AtomRegister::line(5, 1.0),
            vec![Pulse::square(5000, 50.0, -40.0)],
        );
        let report = validate_program(&p, &t);
        assert_eq!(report.codes(), expected_codes(&p, &t));
        assert_eq!(report.violations.len(), 5);
        let det = &report.violations[3];
        assert_eq!(det.offending_value, -40.0);
        assert_eq!(det.limit, -20.0);
    }

    #[test]
    fn interaction_power_law() {
        let c6 = 5.42e6;
        assert_eq!(interaction_strength((0.0, 0.0), (1.0, 0.0), c6).unwrap(), 5.42e6);
        assert_eq!(interaction_strength((0.0, 0.0), (0.0, 2.0), c6).unwrap(), 5.42e6 / 64.0);
        // 10^6 = 1e6 by hand: 5.42e6 / 1e6
        let v = interaction_strength((0.0, 0.0), (6.0, 8.0), c6).unwrap();
        assert!((v - 5.42).abs() < 1e-12);
        assert!(matches!(
            interaction_strength((1.0, 1.0), (1.0, 1.0), c6),
            Err(ModelError::Domain(_))
        ));
    }

    #[test]
    fn json_round_trip_uses_documented_names() {
        let p = program(
            AtomRegister::line(2, 6.0),
            vec![Pulse::new(
                1000,
                Waveform::piecewise(&[(500, 1.0), (500, 2.0)]),
                Waveform::ramp(-1.0, 1.0),
                0.5,
            )],
        );
        let text = p.to_json();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(value["format_version"], "1");
        assert_eq!(value["pulses"][0]["amplitude"]["kind"], "piecewise-constant");
        assert_eq!(value["pulses"][0]["detuning"]["kind"], "ramp");
        assert_eq!(value["register"]["atoms"][1]["x"], 6.0);
        assert_eq!(PulseProgram::from_json(&text).unwrap(), p);
    }

    #[test]
    fn structural_errors() {
        let ok = program(AtomRegister::line(1, 5.0), vec![Pulse::square(100, 1.0, 0.0)]);
        let mut bad = ok.clone();
        bad.shots = 0;
        assert!(bad.check().is_err());
        let mut bad = ok.clone();
        bad.register.atoms.push(Atom::new("q0", 9.0, 9.0));
        assert!(bad.check().is_err());
        let mut bad = ok.clone();
        bad.pulses[0].amplitude = Waveform::ramp(1.0, -1.0);
        assert!(bad.check().is_err());
        let mut bad = ok.clone();
        bad.pulses[0].amplitude = Waveform::piecewise(&[(50, 1.0), (0, 1.0), (50, 1.0)]);
        assert!(bad.check().is_err());
        let mut bad = ok.clone();
        bad.pulses[0].detuning = Waveform::piecewise(&[(60, 1.0)]);
        assert!(bad.check().is_err());
        let mut bad = ok.clone();
        bad.pulses[0].phase = TAU;
        assert!(bad.check().is_err());
        let mut bad = ok;
        bad.register.atoms.clear();
        assert!(bad.check().is_err());
    }
}
