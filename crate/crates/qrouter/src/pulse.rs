//! Drive envelopes, pulses, schedules and virtual-Z frame bookkeeping.
//!
//! A schedule is a time-ordered list of charge-line pulses plus frame
//! updates. A frame update at time `t` on a channel shifts the carrier
//! phase of every later pulse on that channel; it costs nothing to apply.

use crate::device::Role;
use crate::error::{Error, Result};
use crate::{ghz, to_ghz};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

/// Gaussian ramps span 2√2 standard deviations each.
pub const RAMP_SIGMAS: f64 = 2.0 * std::f64::consts::SQRT_2;
/// A Gaussian π/2 pulse spans 4√2 standard deviations in total.
pub const GAUSSIAN_PI2_SIGMAS: f64 = 4.0 * std::f64::consts::SQRT_2;

#[derive(Debug, Clone, PartialEq)]
pub enum PulseEnvelope {
    /// Flat top with Gaussian ramps of `ramp` ns per edge (σ = ramp/2√2).
    /// `ramp = 0` reduces to a rectangle.
    FlatTopGaussian { amplitude: f64, length: f64, ramp: f64 },
    /// Plain Gaussian of total length `length` (σ = length/4√2), centered.
    Gaussian { amplitude: f64, length: f64 },
    /// Piecewise-constant I/Q samples at fixed spacing `dt_sample`,
    /// multiplied by `scale`.
    PiecewiseIq { iq: Vec<(f64, f64)>, dt_sample: f64, scale: f64 },
}

impl PulseEnvelope {
    pub fn length(&self) -> f64 {
        match self {
            PulseEnvelope::FlatTopGaussian { length, .. } => *length,
            PulseEnvelope::Gaussian { length, .. } => *length,
            PulseEnvelope::PiecewiseIq { iq, dt_sample, .. } => iq.len() as f64 * dt_sample,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PulseEnvelope::FlatTopGaussian { length, ramp, .. } => {
                if *length <= 0.0 {
                    return Err(Error::Schedule("pulse length must be positive".into()));
                }
                if *ramp < 0.0 || 2.0 * ramp > *length {
                    return Err(Error::Schedule("need 0 <= 2*ramp <= length".into()));
                }
            }
            PulseEnvelope::Gaussian { length, .. } => {
                if *length <= 0.0 {
                    return Err(Error::Schedule("pulse length must be positive".into()));
                }
            }
            PulseEnvelope::PiecewiseIq { iq, dt_sample, .. } => {
                if iq.is_empty() || *dt_sample <= 0.0 {
                    return Err(Error::Schedule("piecewise envelope needs samples and dt > 0".into()));
                }
            }
        }
        Ok(())
    }

    /// Complex baseband amplitude u(t) relative to pulse start, with the
    /// convention that a drive `A·cos(ωt+φ)` has `u = A/2`.
    pub fn baseband(&self, t: f64) -> C64 {
        if t < 0.0 || t > self.length() {
            return C64::new(0.0, 0.0);
        }
        match self {
            PulseEnvelope::FlatTopGaussian { amplitude, length, ramp } => {
                let u = if *ramp == 0.0 {
                    1.0
                } else {
                    let sigma = ramp / RAMP_SIGMAS;
                    if t < *ramp {
                        (-0.5 * ((t - ramp) / sigma).powi(2)).exp()
                    } else if t > length - ramp {
                        (-0.5 * ((t - (length - ramp)) / sigma).powi(2)).exp()
                    } else {
                        1.0
                    }
                };
                C64::new(amplitude / 2.0 * u, 0.0)
            }
            PulseEnvelope::Gaussian { amplitude, length } => {
                let sigma = length / GAUSSIAN_PI2_SIGMAS;
                let u = (-0.5 * ((t - length / 2.0) / sigma).powi(2)).exp();
                C64::new(amplitude / 2.0 * u, 0.0)
            }
            PulseEnvelope::PiecewiseIq { iq, dt_sample, scale } => {
                let idx = ((t / dt_sample) as usize).min(iq.len() - 1);
                C64::new(iq[idx].0, iq[idx].1) * (scale / 2.0)
            }
        }
    }

    /// Shortest timing feature, used to enforce the σ/5 integrator rule.
    pub fn min_feature(&self) -> f64 {
        match self {
            PulseEnvelope::FlatTopGaussian { length, ramp, .. } => {
                if *ramp == 0.0 {
                    *length
                } else {
                    ramp / RAMP_SIGMAS
                }
            }
            PulseEnvelope::Gaussian { length, .. } => length / GAUSSIAN_PI2_SIGMAS,
            PulseEnvelope::PiecewiseIq { dt_sample, .. } => *dt_sample,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DrivePulse {
    pub channel: Role,
    pub envelope: PulseEnvelope,
    /// Carrier angular frequency (rad/ns).
    pub carrier_freq: f64,
    /// Carrier phase offset (rad); the physical drive is
    /// `2·Re[u(t−t0)·e^{-i(ω t + φ)}]` on the charge quadrature.
    pub phase: f64,
    pub start_time: f64,
}

impl DrivePulse {
    pub fn end_time(&self) -> f64 {
        self.start_time + self.envelope.length()
    }

    pub fn validate(&self) -> Result<()> {
        self.envelope.validate()?;
        if self.carrier_freq <= 0.0 {
            return Err(Error::Schedule(format!("carrier frequency must be positive on {}", self.channel)));
        }
        Ok(())
    }
}

/// Virtual-Z event: phase increment applied to all later pulses on a channel.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameUpdate {
    pub time: f64,
    pub channel: Role,
    pub phase: f64,
}

#[derive(Debug, Clone, Default)]
pub struct PulseSchedule {
    pub pulses: Vec<DrivePulse>,
    pub frame_updates: Vec<FrameUpdate>,
}

impl PulseSchedule {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn duration(&self) -> f64 {
        let p = self.pulses.iter().map(|p| p.end_time()).fold(0.0, f64::max);
        let f = self.frame_updates.iter().map(|f| f.time).fold(0.0, f64::max);
        p.max(f)
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.pulses {
            p.validate()?;
        }
        Ok(())
    }

    pub fn push(&mut self, pulse: DrivePulse) {
        self.pulses.push(pulse);
    }

    /// Append a pulse starting `gap` after everything scheduled so far.
    pub fn push_after(&mut self, mut pulse: DrivePulse, gap: f64) -> f64 {
        pulse.start_time = self.duration() + gap;
        let end = pulse.end_time();
        self.pulses.push(pulse);
        end
    }

    pub fn add_frame_update(&mut self, time: f64, channel: Role, phase: f64) {
        self.frame_updates.push(FrameUpdate { time, channel, phase });
    }

    /// Carrier phase of `pulse` including every frame update on its channel
    /// at or before its start time.
    pub fn effective_phase(&self, pulse: &DrivePulse) -> f64 {
        let acc: f64 = self
            .frame_updates
            .iter()
            .filter(|f| f.channel == pulse.channel && f.time <= pulse.start_time + 1e-12)
            .map(|f| f.phase)
            .sum();
        pulse.phase + acc
    }

    /// Concatenate another schedule, shifted to start at `t0`.
    pub fn extend_shifted(&mut self, other: &PulseSchedule, t0: f64) {
        for p in &other.pulses {
            let mut p = p.clone();
            p.start_time += t0;
            self.pulses.push(p);
        }
        for f in &other.frame_updates {
            let mut f = f.clone();
            f.time += t0;
            self.frame_updates.push(f);
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ScheduleFile::from_schedule(self)).expect("schedule serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ScheduleFile = serde_json::from_str(text)?;
        file.into_schedule()
    }
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum KindFile {
    FlatTopGaussian,
    Gaussian,
    PiecewiseIq,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[allow(non_snake_case)]
struct PulseFile {
    channel: Role,
    kind: KindFile,
    amplitude: f64,
    freq_GHz: f64,
    phase_rad: f64,
    start_ns: f64,
    length_ns: f64,
    #[serde(default)]
    ramp_ns: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    iq_samples: Option<Vec<(f64, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    iq_dt_ns: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScheduleFile {
    pulses: Vec<PulseFile>,
    frame_updates: Vec<FrameUpdate>,
}

impl ScheduleFile {
    fn from_schedule(s: &PulseSchedule) -> Self {
        let pulses = s
            .pulses
            .iter()
            .map(|p| {
                let (kind, amplitude, length, ramp, iq, iq_dt) = match &p.envelope {
                    PulseEnvelope::FlatTopGaussian { amplitude, length, ramp } => {
                        (KindFile::FlatTopGaussian, *amplitude, *length, *ramp, None, None)
                    }
                    PulseEnvelope::Gaussian { amplitude, length } => {
                        (KindFile::Gaussian, *amplitude, *length, 0.0, None, None)
                    }
                    PulseEnvelope::PiecewiseIq { iq, dt_sample, scale } => (
                        KindFile::PiecewiseIq,
                        *scale,
                        iq.len() as f64 * dt_sample,
                        0.0,
                        Some(iq.clone()),
                        Some(*dt_sample),
                    ),
                };
                PulseFile {
                    channel: p.channel,
                    kind,
                    amplitude,
                    freq_GHz: to_ghz(p.carrier_freq),
                    phase_rad: p.phase,
                    start_ns: p.start_time,
                    length_ns: length,
                    ramp_ns: ramp,
                    iq_samples: iq,
                    iq_dt_ns: iq_dt,
                }
            })
            .collect();
        ScheduleFile { pulses, frame_updates: s.frame_updates.clone() }
    }

    fn into_schedule(self) -> Result<PulseSchedule> {
        let mut out = PulseSchedule::new();
        for p in self.pulses {
            let envelope = match p.kind {
                KindFile::FlatTopGaussian => PulseEnvelope::FlatTopGaussian {
                    amplitude: p.amplitude,
                    length: p.length_ns,
                    ramp: p.ramp_ns,
                },
                KindFile::Gaussian => {
                    PulseEnvelope::Gaussian { amplitude: p.amplitude, length: p.length_ns }
                }
                KindFile::PiecewiseIq => {
                    let iq = p
                        .iq_samples
                        .ok_or_else(|| Error::Schedule("piecewise pulse without iq_samples".into()))?;
                    let dt = p
                        .iq_dt_ns
                        .ok_or_else(|| Error::Schedule("piecewise pulse without iq_dt_ns".into()))?;
                    PulseEnvelope::PiecewiseIq { iq, dt_sample: dt, scale: p.amplitude }
                }
            };
            let pulse = DrivePulse {
                channel: p.channel,
                envelope,
                carrier_freq: ghz(p.freq_GHz),
                phase: p.phase_rad,
                start_time: p.start_ns,
            };
            pulse.validate()?;
            out.pulses.push(pulse);
        }
        out.frame_updates = self.frame_updates;
        out.validate()?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn flat_top_with_zero_ramp_is_rectangle() {
        let e = PulseEnvelope::FlatTopGaussian { amplitude: 0.4, length: 10.0, ramp: 0.0 };
        for &t in &[0.0, 2.5, 9.999] {
            assert_abs_diff_eq!(e.baseband(t).re, 0.2, epsilon = 1e-15);
        }
        assert_eq!(e.baseband(10.5), C64::new(0.0, 0.0));
    }

    #[test]
    fn flat_top_ramp_is_continuous_and_flat_in_middle() {
        let e = PulseEnvelope::FlatTopGaussian { amplitude: 1.0, length: 20.0, ramp: 3.0 };
        // continuity across the ramp/flat joints
        assert_abs_diff_eq!(e.baseband(3.0).re, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(e.baseband(17.0).re, 0.5, epsilon = 1e-12);
        assert!(e.baseband(10.0).re == 0.5);
        // truncated edge value: exp(-4) of the plateau
        assert_abs_diff_eq!(e.baseband(0.0).re, 0.5 * (-4.0f64).exp(), epsilon = 1e-12);
        // nearly symmetric
        assert_abs_diff_eq!(e.baseband(1.0).re, e.baseband(19.0).re, epsilon = 1e-12);
    }

    #[test]
    fn gaussian_sigma_rule() {
        let e = PulseEnvelope::Gaussian { amplitude: 1.0, length: 20.0 };
        // peak at the center, 4√2 sigma total
        assert_abs_diff_eq!(e.baseband(10.0).re, 0.5, epsilon = 1e-15);
        let sigma = 20.0 / GAUSSIAN_PI2_SIGMAS;
        assert_abs_diff_eq!(e.baseband(10.0 + sigma).re, 0.5 * (-0.5f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn envelope_validation() {
        assert!(PulseEnvelope::FlatTopGaussian { amplitude: 1.0, length: 5.0, ramp: 3.0 }
            .validate()
            .is_err());
        assert!(PulseEnvelope::Gaussian { amplitude: 1.0, length: -1.0 }.validate().is_err());
    }

    #[test]
    fn frame_updates_shift_later_pulses_only() {
        let mut s = PulseSchedule::new();
        let mk = |t0: f64| DrivePulse {
            channel: Role::Input,
            envelope: PulseEnvelope::Gaussian { amplitude: 1.0, length: 10.0 },
            carrier_freq: ghz(3.4),
            phase: 0.1,
            start_time: t0,
        };
        s.push(mk(0.0));
        s.push(mk(20.0));
        s.add_frame_update(15.0, Role::Input, 0.5);
        s.add_frame_update(15.0, Role::Switch, 9.9);
        assert_abs_diff_eq!(s.effective_phase(&s.pulses[0]), 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(s.effective_phase(&s.pulses[1]), 0.6, epsilon = 1e-15);
    }

    #[test]
    fn json_round_trip() {
        let mut s = PulseSchedule::new();
        s.push(DrivePulse {
            channel: Role::Output1,
            envelope: PulseEnvelope::FlatTopGaussian { amplitude: 0.3, length: 426.0, ramp: 3.0 },
            carrier_freq: ghz(5.886),
            phase: 0.25,
            start_time: 12.0,
        });
        s.push(DrivePulse {
            channel: Role::Input,
            envelope: PulseEnvelope::PiecewiseIq {
                iq: vec![(0.1, 0.0), (0.2, -0.05)],
                dt_sample: 1.25,
                scale: 1.0,
            },
            carrier_freq: ghz(3.448),
            phase: 0.0,
            start_time: 440.0,
        });
        s.add_frame_update(439.0, Role::Switch, -0.7);
        let text = s.to_json();
        let back = PulseSchedule::from_json(&text).unwrap();
        assert_eq!(back.pulses.len(), 2);
        assert_abs_diff_eq!(back.pulses[0].carrier_freq, ghz(5.886), epsilon = 1e-12);
        assert_eq!(back.frame_updates.len(), 1);
        assert_abs_diff_eq!(back.duration(), s.duration(), epsilon = 1e-12);
    }
}
