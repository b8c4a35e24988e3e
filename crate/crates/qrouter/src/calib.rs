//! Gate calibration against the simulator: the six-step sideband (eg-gf)
//! calibration that realizes conditional iSWAPs, and single-qubit g-e / e-f
//! pulse calibration with virtual-Z corrections.
//!
//! All calibration experiments run noiselessly with exact populations; the
//! point is to land on the same working points the hardware procedure
//! would, including AC-Stark shifts, which the simulated drives produce.

use crate::device::{DeviceConfig, Role};
use crate::dynamics::{EvolveOptions, Simulator};
use crate::error::{Error, Result};
use crate::fit::{fit_gaussian_peak, fit_sinusoid, polyfit, polyval};
use crate::linalg::{CMat, CVec};
use crate::pulse::{DrivePulse, PulseEnvelope, PulseSchedule};
use crate::robust::{search_robust_pulse, RobustSearchOptions};
use crate::{ghz, to_ghz};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IoPair {
    Io1,
    Io2,
}

impl IoPair {
    pub const BOTH: [IoPair; 2] = [IoPair::Io1, IoPair::Io2];

    pub fn output(&self) -> Role {
        match self {
            IoPair::Io1 => Role::Output1,
            IoPair::Io2 => Role::Output2,
        }
    }

    /// Switch level that lets the swap proceed.
    pub fn allow_switch(&self) -> usize {
        match self {
            IoPair::Io1 => 0,
            IoPair::Io2 => 1,
        }
    }

    pub fn block_switch(&self) -> usize {
        1 - self.allow_switch()
    }

    pub fn tag(&self) -> &'static str {
        match self {
            IoPair::Io1 => "IO1",
            IoPair::Io2 => "IO2",
        }
    }
}

/// A calibrated gate: pulse template (start time 0), virtual-Z correction
/// appended after the pulse, spectator context it was calibrated in, and
/// the blocking index for sidebands.
#[derive(Debug, Clone)]
pub struct CalibratedGate {
    pub name: String,
    pub pulse: DrivePulse,
    pub virtual_z: f64,
    pub conditioned_on: Option<(Role, usize)>,
    pub n_index: Option<u32>,
    /// Physical pulses per logical gate (2 for an e-f pi built from two
    /// pi/2 Gaussians, 1 otherwise).
    pub repeats: u32,
}

impl CalibratedGate {
    pub fn validate(&self) -> Result<()> {
        self.pulse.validate()?;
        if !self.virtual_z.is_finite()
            || !(-std::f64::consts::PI..=std::f64::consts::PI).contains(&self.virtual_z)
        {
            return Err(Error::Calibration(format!("{}: virtual_z out of (-pi, pi]", self.name)));
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.pulse.envelope.length() * self.repeats as f64
    }

    /// Append this gate to a schedule `gap` ns after its current end; the
    /// virtual-Z correction lands right after the last pulse. Returns the
    /// new end time.
    pub fn emit(&self, schedule: &mut PulseSchedule, gap: f64) -> f64 {
        self.emit_with_phase(schedule, gap, 0.0)
    }

    /// Emit with an extra carrier phase offset (e.g. +pi/2 turns an X90
    /// into a Y90).
    pub fn emit_with_phase(&self, schedule: &mut PulseSchedule, gap: f64, phase: f64) -> f64 {
        let mut end = schedule.duration();
        for k in 0..self.repeats {
            let mut p = self.pulse.clone();
            p.phase += phase;
            p.start_time = end + if k == 0 { gap } else { 0.0 };
            end = p.end_time();
            schedule.push(p);
        }
        if self.virtual_z != 0.0 {
            schedule.add_frame_update(end, self.pulse.channel, self.virtual_z);
        }
        end
    }
}

/// Accepted sideband working point.
///
/// `g_eff` and `zeta` are fitted quantities inferred from the realized gate
/// time and revival index (the paper reports neither number directly): the
/// swap rate follows from the full-transfer condition and the conditioning
/// rate from the blocking closure. The honest diagnostics are
/// `revival_residual` (how precisely the gate time lands on a blocked
/// revival, measured from the revival ladder) and `zeta_driven` (the
/// Stark-compressed conditioning rate seen at the working drive).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SidebandWorkingPoint {
    pub n: u32,
    /// On-resonance swap rate (rad/ns): full transfer after pi/g_eff.
    pub g_eff: f64,
    /// Conditioning rate consistent with the blocking closure (rad/ns).
    pub zeta: f64,
    /// Generalized Rabi rate of the blocked transition.
    pub omega_blocked: f64,
    /// Full iSWAP time 2*tau (ns).
    pub gate_time: f64,
    /// Conditioning rate measured from the blocked revival spacing at the
    /// working drive amplitude (rad/ns).
    pub zeta_driven: f64,
    /// |revivals completed at the gate time - n| / n, from the measured
    /// revival ladder; small values mean the blocked rotation really closes.
    pub revival_residual: f64,
}

impl SidebandWorkingPoint {
    /// |Omega_blocked - 2 n g_eff| / (2 n g_eff)
    pub fn blocking_mismatch(&self) -> f64 {
        let target = 2.0 * self.n as f64 * self.g_eff;
        (self.omega_blocked - target).abs() / target
    }
}

/// 2D scan output with per-axis populations and fit summaries.
#[derive(Debug, Clone)]
pub struct ScanResult {
    /// Pulse lengths (ns).
    pub lengths: Vec<f64>,
    /// Drive frequencies (rad/ns).
    pub freqs: Vec<f64>,
    /// Target-output f population, indexed [length][freq].
    pub pop_f_out: Vec<Vec<f64>>,
    /// Input e population, indexed [length][freq].
    pub pop_e_in: Vec<Vec<f64>>,
    pub fit: Option<ChevronFit>,
}

#[derive(Debug, Clone)]
pub struct ChevronFit {
    /// Resonance center (rad/ns).
    pub center: f64,
    /// Peak width parameter (rad/ns).
    pub width: f64,
    pub residual: f64,
    /// Oscillation period of the output population at the center (ns).
    pub period_at_center: f64,
}

/// Quadratic amplitude-to-frequency relation from the rough calibration.
#[derive(Debug, Clone)]
pub struct AmpFreqRelation {
    /// Coefficients lowest order first: f(A) = c0 + c1 A + c2 A^2 (rad/ns).
    pub coeffs: [f64; 3],
    pub residual: f64,
}

impl AmpFreqRelation {
    pub fn predict(&self, amp: f64) -> f64 {
        polyval(&self.coeffs, amp)
    }
}

/// Quadratic fit of calibrated (amplitude, frequency) points.
pub fn fit_amp_freq_relation(points: &[(f64, f64)]) -> Result<AmpFreqRelation> {
    if points.len() < 3 {
        return Err(Error::Calibration("need at least 3 (A, f) points".into()));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let co =
        polyfit(&xs, &ys, 2).ok_or_else(|| Error::Calibration("rank-deficient quadratic fit".into()))?;
    let residual =
        points.iter().map(|&(a, f)| (polyval(&co, a) - f).powi(2)).sum::<f64>().sqrt();
    Ok(AmpFreqRelation { coeffs: [co[0], co[1], co[2]], residual })
}

#[derive(Debug, Clone)]
pub struct SidebandCalOptions {
    pub ramp: f64,
    /// Repetition counts for the product-over-N fits.
    pub n_list: Vec<usize>,
    /// Frequency grid step for fine scans (rad/ns).
    pub freq_step: f64,
    /// Relative amplitude step for fine scans.
    pub amp_step_rel: f64,
    /// Length step used when refining the blocking minimum (ns).
    pub length_step: f64,
    pub opts: EvolveOptions,
}

impl Default for SidebandCalOptions {
    fn default() -> Self {
        Self {
            ramp: 3.0,
            n_list: vec![1, 2, 3, 4],
            freq_step: crate::mhz(0.03),
            amp_step_rel: 0.002,
            length_step: 2.0,
            opts: EvolveOptions::default(),
        }
    }
}

/// Sideband calibration workbench for one input-output pair, operating on
/// the (switch, input, output) restriction of the full device.
pub struct SidebandCalibrator {
    pub sim: Simulator,
    pub pair: IoPair,
    pub opts: SidebandCalOptions,
    s_site: usize,
    i_site: usize,
    o_site: usize,
}

impl SidebandCalibrator {
    pub fn new(full: &Simulator, pair: IoPair, opts: SidebandCalOptions) -> Result<Self> {
        let keep = [
            (full.site_of(Role::Switch)?, 2),
            (full.site_of(Role::Input)?, usize::MAX),
            (full.site_of(pair.output())?, usize::MAX),
        ];
        let (sim, _) = full.restrict_capped(&keep)?;
        Ok(Self { sim, pair, opts, s_site: 0, i_site: 1, o_site: 2 })
    }

    /// |switch, e, g> with the switch at the given level.
    pub fn eg_state(&self, switch: usize) -> CVec {
        let mut multi = vec![0; self.sim.dims.len()];
        multi[self.s_site] = switch;
        multi[self.i_site] = 1;
        self.sim.basis_state(&multi)
    }

    /// Undriven eg-gf transition frequency for a switch state (rad/ns).
    pub fn transition_freq(&self, switch: usize) -> f64 {
        let mut eg = vec![0; self.sim.dims.len()];
        eg[self.s_site] = switch;
        eg[self.i_site] = 1;
        let mut gf = vec![0; self.sim.dims.len()];
        gf[self.s_site] = switch;
        gf[self.o_site] = 2;
        self.sim.energies[self.sim.label_index(&gf)] - self.sim.energies[self.sim.label_index(&eg)]
    }

    /// Undriven conditioning shift between blocking and allowing switch
    /// states (rad/ns, absolute value).
    pub fn conditioning_shift(&self) -> f64 {
        (self.transition_freq(self.pair.block_switch())
            - self.transition_freq(self.pair.allow_switch()))
        .abs()
    }

    /// eg-gf drive matrix element magnitude: the on-resonance swap rate is
    /// amplitude times this weight.
    pub fn drive_weight(&self) -> f64 {
        let mut eg = vec![0; self.sim.dims.len()];
        eg[self.s_site] = self.pair.allow_switch();
        eg[self.i_site] = 1;
        let mut gf = eg.clone();
        gf[self.i_site] = 0;
        gf[self.o_site] = 2;
        self.sim.drive_element(self.o_site, &eg, &gf).norm()
    }

    pub fn sideband_pulse(&self, amp: f64, freq: f64, tau: f64, phase: f64, start: f64) -> DrivePulse {
        DrivePulse {
            channel: self.pair.output(),
            envelope: PulseEnvelope::FlatTopGaussian {
                amplitude: amp,
                length: tau,
                ramp: self.opts.ramp,
            },
            carrier_freq: freq,
            phase,
            start_time: start,
        }
    }

    /// Populations after driving one flat-top of length tau from |S eg>.
    fn drive_pops(&self, switch: usize, amp: f64, freq: f64, tau: f64) -> Result<Vec<f64>> {
        let mut s = PulseSchedule::new();
        s.push(self.sideband_pulse(amp, freq, tau, 0.0, 0.0));
        let out = self.sim.evolve_unitary(&s, &self.eg_state(switch), &self.opts.opts)?;
        Ok(self.sim.populations(&out))
    }

    fn pop_site(&self, pops: &[f64], site: usize, level: usize) -> f64 {
        pops.iter()
            .enumerate()
            .filter(|(b, _)| crate::linalg::index_to_multi(*b, &self.sim.dims)[site] == level)
            .map(|(_, &p)| p)
            .sum()
    }

    /// Rabi-chevron scan of output-f and input-e population over pulse
    /// length and drive frequency at fixed amplitude.
    pub fn chevron_scan(
        &self,
        switch_state: usize,
        lengths: &[f64],
        freqs: &[f64],
        amplitude: f64,
    ) -> Result<ScanResult> {
        use rayon::prelude::*;
        let rows: Vec<(Vec<f64>, Vec<f64>)> = lengths
            .par_iter()
            .map(|&tau| {
                let mut row_f = Vec::with_capacity(freqs.len());
                let mut row_e = Vec::with_capacity(freqs.len());
                for &f in freqs {
                    let pops = self.drive_pops(switch_state, amplitude, f, tau)?;
                    row_f.push(self.pop_site(&pops, self.o_site, 2));
                    row_e.push(self.pop_site(&pops, self.i_site, 1));
                }
                Ok((row_f, row_e))
            })
            .collect::<Result<Vec<_>>>()?;
        let pop_f_out: Vec<Vec<f64>> = rows.iter().map(|r| r.0.clone()).collect();
        let pop_e_in: Vec<Vec<f64>> = rows.iter().map(|r| r.1.clone()).collect();
        // peak of max-over-length transfer vs frequency
        let contrast: Vec<f64> = (0..freqs.len())
            .map(|j| (0..lengths.len()).map(|i| pop_f_out[i][j]).fold(0.0, f64::max))
            .collect();
        let fit = fit_gaussian_peak(&self.freqs_f64(freqs), &contrast).map(|g| {
            let jc = freqs
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 - g.center).abs().total_cmp(&(b.1 - g.center).abs()))
                .map(|(j, _)| j)
                .unwrap_or(0);
            let col: Vec<f64> = (0..lengths.len()).map(|i| pop_f_out[i][jc]).collect();
            let period =
                fit_sinusoid(lengths, &col).map(|s| 1.0 / s.frequency).unwrap_or(f64::NAN);
            ChevronFit { center: g.center, width: g.sigma, residual: g.ssr, period_at_center: period }
        });
        Ok(ScanResult {
            lengths: lengths.to_vec(),
            freqs: freqs.to_vec(),
            pop_f_out,
            pop_e_in,
            fit,
        })
    }

    fn freqs_f64(&self, freqs: &[f64]) -> Vec<f64> {
        freqs.to_vec()
    }

    /// Rough step 1: calibrated (A, f0) points over a ladder of amplitudes.
    /// The AC-Stark shift grows quadratically with amplitude and quickly
    /// walks the resonance tens of MHz away, so the scan window for each
    /// amplitude is centered on the prediction of the fit so far,
    /// bootstrapping from low drive where the shift is small.
    pub fn amp_freq_points(&self, amps_target: &[f64]) -> Result<Vec<(f64, f64)>> {
        let w = self.drive_weight();
        let f_tr = self.transition_freq(self.pair.allow_switch());
        let a_max = amps_target.iter().cloned().fold(0.0, f64::max);
        let mut ladder: Vec<f64> = vec![0.15 * a_max, 0.3 * a_max, 0.45 * a_max];
        ladder.extend_from_slice(amps_target);
        ladder.sort_by(|x, y| x.total_cmp(y));
        ladder.dedup_by(|x, y| (*x - *y).abs() < 1e-12);
        let mut points: Vec<(f64, f64)> = Vec::new();
        for &a in &ladder {
            let center = match points.len() {
                0 => f_tr,
                1 | 2 => {
                    // quadratic Stark through the last point
                    let (al, fl) = *points.last().unwrap();
                    f_tr + (fl - f_tr) * (a * a) / (al * al)
                }
                _ => fit_amp_freq_relation(&points)?.predict(a),
            };
            let span = crate::mhz(12.0);
            let n_freq = 41;
            let freqs: Vec<f64> = (0..n_freq)
                .map(|k| center - span / 2.0 + span * k as f64 / (n_freq - 1) as f64)
                .collect();
            // probe near the full-swap length where contrast peaks; three
            // lengths guard against landing on a transfer node
            let tau_probe = std::f64::consts::PI / (a * w);
            use rayon::prelude::*;
            let contrast: Vec<f64> = freqs
                .par_iter()
                .map(|&f| {
                    let mut c = 0.0f64;
                    for scale in [0.5, 0.8, 1.0] {
                        let pops =
                            self.drive_pops(self.pair.allow_switch(), a, f, scale * tau_probe)?;
                        c = c.max(self.pop_site(&pops, self.o_site, 2));
                    }
                    Ok(c)
                })
                .collect::<Result<Vec<f64>>>()?;
            let g = fit_gaussian_peak(&freqs, &contrast)
                .filter(|g| g.amplitude > 0.1)
                .ok_or_else(|| {
                    Error::Calibration(format!(
                        "no transfer peak found at amplitude {a:.4} near {:.4} GHz",
                        crate::to_ghz(center)
                    ))
                })?;
            points.push((a, g.center));
        }
        // keep only the requested amplitudes for the returned relation, the
        // bootstrap points stay in as well (they are valid calibrations)
        Ok(points)
    }

    /// Rough step 2: full-transfer time from a Rabi length sweep at (A, f).
    pub fn rough_length(&self, amp: f64, freq: f64, t_max: f64, n_points: usize) -> Result<f64> {
        let t_min = 2.0 * self.opts.ramp + 1.0;
        let lengths: Vec<f64> = (0..n_points)
            .map(|k| t_min + (t_max - t_min) * k as f64 / (n_points - 1) as f64)
            .collect();
        let mut pop = Vec::with_capacity(n_points);
        for &tau in &lengths {
            let pops = self.drive_pops(self.pair.allow_switch(), amp, freq, tau)?;
            pop.push(self.pop_site(&pops, self.o_site, 2));
        }
        let s = fit_sinusoid(&lengths, &pop)
            .ok_or_else(|| Error::Calibration("Rabi length sweep fit failed".into()))?;
        if s.amplitude < 0.1 {
            return Err(Error::Calibration("no Rabi oscillation resolved in length sweep".into()));
        }
        // first maximum of offset + amp cos(2 pi f t + phi)
        let mut t_pi = (-s.phase).rem_euclid(2.0 * std::f64::consts::PI)
            / (2.0 * std::f64::consts::PI * s.frequency);
        while t_pi < 0.25 / s.frequency {
            t_pi += 1.0 / s.frequency;
        }
        Ok(t_pi)
    }

    /// Fixed-frame unitary of one X_pi^sub: two flat-top pulses of length
    /// tau back to back, both at phase 0.
    pub fn compile_xpi(&self, amp: f64, freq: f64, tau: f64) -> Result<CMat> {
        let mut s = PulseSchedule::new();
        s.push(self.sideband_pulse(amp, freq, tau, 0.0, 0.0));
        s.push(self.sideband_pulse(amp, freq, tau, 0.0, tau));
        self.sim.compile_fixed_frame(&s, freq, &self.opts.opts)
    }

    /// pi-minus-pi experiment: Gaussian center of the product over N of
    /// survival signals vs drive frequency. Returns (refined frequency,
    /// fit residual).
    pub fn pi_minus_pi(&self, amp: f64, tau: f64, freqs: &[f64]) -> Result<(f64, f64)> {
        let signal = self.pi_minus_pi_signal(amp, tau, freqs)?;
        let g = fit_gaussian_peak(freqs, &signal)
            .filter(|g| g.amplitude > 0.1)
            .ok_or_else(|| Error::Calibration("pi-minus-pi product signal is flat".into()))?;
        if g.center < freqs[0] || g.center > freqs[freqs.len() - 1] {
            return Err(Error::Calibration("pi-minus-pi center escaped the scanned grid".into()));
        }
        Ok((g.center, g.ssr))
    }

    fn pi_minus_pi_signal(&self, amp: f64, tau: f64, freqs: &[f64]) -> Result<Vec<f64>> {
        use rayon::prelude::*;
        let init = self.eg_state(self.pair.allow_switch());
        let signal = freqs
            .par_iter()
            .map(|&f| {
                let u_pi = self.compile_xpi(amp, f, tau)?;
                let u_mpi = phase_flip(&u_pi, &self.sim);
                let block = &u_mpi * &u_pi;
                let mut state = init.clone();
                let mut product = 1.0;
                for (k, &n) in self.opts.n_list.iter().enumerate() {
                    let reps = n - if k == 0 { 0 } else { self.opts.n_list[k - 1] };
                    for _ in 0..reps {
                        state = &block * &state;
                    }
                    let pops = self.sim.populations(&state);
                    let p_in = self.pop_site(&pops, self.i_site, 1);
                    let p_out = self.pop_site(&pops, self.o_site, 2);
                    product *= p_in * (1.0 - p_out);
                }
                Ok(product)
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(normalize_unit(signal))
    }

    /// pi-train experiment: product over odd pulse counts vs amplitude.
    /// Returns (refined amplitude, fit residual).
    pub fn pi_train(&self, amps: &[f64], freq: f64, tau: f64) -> Result<(f64, f64)> {
        let signal = self.pi_train_signal(amps, freq, tau)?;
        let g = fit_gaussian_peak(amps, &signal)
            .filter(|g| g.amplitude > 0.1)
            .ok_or_else(|| Error::Calibration("pi-train product signal is flat".into()))?;
        if g.center < amps[0] || g.center > amps[amps.len() - 1] {
            return Err(Error::Calibration("pi-train center escaped the scanned grid".into()));
        }
        Ok((g.center, g.ssr))
    }

    fn pi_train_signal(&self, amps: &[f64], freq: f64, tau: f64) -> Result<Vec<f64>> {
        use rayon::prelude::*;
        let init = self.eg_state(self.pair.allow_switch());
        let signal = amps
            .par_iter()
            .map(|&a| {
                let u_pi = self.compile_xpi(a, freq, tau)?;
                let mut state = &u_pi * &init; // odd pulse counts 1, 3, 5, ...
                let u_sq = &u_pi * &u_pi;
                let mut product = 1.0;
                for (k, &n) in self.opts.n_list.iter().enumerate() {
                    let reps = n - if k == 0 { 0 } else { self.opts.n_list[k - 1] };
                    for _ in 0..reps {
                        state = &u_sq * &state;
                    }
                    let pops = self.sim.populations(&state);
                    let p_in = self.pop_site(&pops, self.i_site, 1);
                    let p_out = self.pop_site(&pops, self.o_site, 2);
                    product *= p_out * (1.0 - p_in);
                }
                Ok(product)
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(normalize_unit(signal))
    }

    /// Population transferred to the output with the switch in the blocking
    /// state after `n_gates` X_pi^sub gates (e and f of the output both
    /// count, to capture decayed transfers in noisy runs).
    pub fn blocked_transfer(&self, amp: f64, freq: f64, tau: f64, n_gates: usize) -> Result<f64> {
        let u_pi = self.compile_xpi(amp, freq, tau)?;
        let mut state = self.eg_state(self.pair.block_switch());
        for _ in 0..n_gates {
            state = &u_pi * &state;
        }
        let pops = self.sim.populations(&state);
        Ok(self.pop_site(&pops, self.o_site, 1) + self.pop_site(&pops, self.o_site, 2))
    }

    /// Step 5: evaluate blocked transfer for each candidate tuple and pick
    /// the minimum matching the requested blocking index.
    pub fn select_blocking_minimum(
        &self,
        candidates: &[(f64, f64, f64)],
        target_n: u32,
    ) -> Result<(usize, SidebandWorkingPoint, Vec<f64>)> {
        if candidates.is_empty() {
            return Err(Error::Calibration("no candidate tuples".into()));
        }
        let delta = self.conditioning_shift();
        let mut transfers = Vec::with_capacity(candidates.len());
        let mut best: Option<(usize, f64)> = None;
        for (idx, &(a, f, tau)) in candidates.iter().enumerate() {
            let tr = self.blocked_transfer(a, f, tau, 1)?;
            transfers.push(tr);
            let n = blocking_index(tau, delta);
            if n == target_n {
                match best {
                    Some((_, t)) if t <= tr => {}
                    _ => best = Some((idx, tr)),
                }
            }
        }
        let (idx, _) = best.ok_or_else(|| {
            Error::Calibration(format!(
                "no candidate matches blocking index n = {target_n}; indices seen: {:?}",
                candidates.iter().map(|c| blocking_index(c.2, delta)).collect::<Vec<_>>()
            ))
        })?;
        let (a, f, tau) = candidates[idx];
        let _ = (a, f);
        let wp = self.working_point(tau);
        Ok((idx, wp, transfers))
    }

    pub fn working_point(&self, tau: f64) -> SidebandWorkingPoint {
        let delta = self.conditioning_shift();
        let gate_time = 2.0 * tau;
        let g_eff = std::f64::consts::PI / gate_time;
        let n = blocking_index(tau, delta);
        let zeta = g_eff * (4.0 * (n as f64).powi(2) - 1.0).sqrt();
        SidebandWorkingPoint {
            n,
            g_eff,
            zeta,
            omega_blocked: (g_eff * g_eff + zeta * zeta).sqrt(),
            gate_time,
            zeta_driven: delta,
            revival_residual: f64::NAN,
        }
    }

    /// Step 6: fine 2D intersection of the pi-minus-pi and pi-train product
    /// maps at fixed tau. Returns the centroid (A*, f*).
    pub fn fine_2d_intersection(
        &self,
        amp0: f64,
        freq0: f64,
        tau: f64,
        n_amp: usize,
        n_freq: usize,
    ) -> Result<(f64, f64)> {
        let amps: Vec<f64> = grid(amp0, amp0 * self.opts.amp_step_rel, n_amp);
        let freqs: Vec<f64> = grid(freq0, self.opts.freq_step, n_freq);
        let init = self.eg_state(self.pair.allow_switch());
        use rayon::prelude::*;
        let map: Vec<Vec<f64>> = amps
            .par_iter()
            .map(|&a| {
                freqs
                    .iter()
                    .map(|&f| {
                        let u_pi = self.compile_xpi(a, f, tau)?;
                        let u_mpi = phase_flip(&u_pi, &self.sim);
                        let block = &u_mpi * &u_pi;
                        let u_sq = &u_pi * &u_pi;
                        let mut s_mm = init.clone();
                        let mut s_tr = &u_pi * &init;
                        let mut prod = 1.0;
                        for (k, &n) in self.opts.n_list.iter().enumerate() {
                            let reps = n - if k == 0 { 0 } else { self.opts.n_list[k - 1] };
                            for _ in 0..reps {
                                s_mm = &block * &s_mm;
                                s_tr = &u_sq * &s_tr;
                            }
                            let pm = self.sim.populations(&s_mm);
                            let pt = self.sim.populations(&s_tr);
                            prod *= self.pop_site(&pm, self.i_site, 1)
                                * (1.0 - self.pop_site(&pm, self.o_site, 2))
                                * self.pop_site(&pt, self.o_site, 2)
                                * (1.0 - self.pop_site(&pt, self.i_site, 1));
                        }
                        Ok(prod)
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        let peak = map.iter().flatten().cloned().fold(0.0, f64::max);
        if peak <= 0.0 {
            return Err(Error::Calibration("empty intersection in fine 2D calibration".into()));
        }
        let mut wsum = 0.0;
        let (mut ca, mut cf) = (0.0, 0.0);
        for (ia, row) in map.iter().enumerate() {
            for (jf, &v) in row.iter().enumerate() {
                if v > 0.5 * peak {
                    wsum += v;
                    ca += v * amps[ia];
                    cf += v * freqs[jf];
                }
            }
        }
        Ok((ca / wsum, cf / wsum))
    }

    /// Full six-step calibration toward blocking index `target_n`.
    pub fn calibrate(&self, target_n: u32) -> Result<(CalibratedGate, SidebandWorkingPoint)> {
        self.calibrate_with_floor(target_n, 0.995)
    }

    /// As [`Self::calibrate`] with an explicit transfer floor; alternate
    /// working points at very strong drive cannot always reach the default.
    pub fn calibrate_with_floor(
        &self,
        target_n: u32,
        floor: f64,
    ) -> Result<(CalibratedGate, SidebandWorkingPoint)> {
        let delta = self.conditioning_shift();
        let w = self.drive_weight();
        let f_tr = self.transition_freq(self.pair.allow_switch());
        let omega_target = delta / ((4.0 * (target_n as f64).powi(2) - 1.0).sqrt());
        let amp0 = omega_target / w;

        // step 1: rough A-f relation around the expected working amplitude
        let _ = f_tr;
        let probe_amps: Vec<f64> = [0.6, 0.8, 1.0, 1.2, 1.4].iter().map(|s| s * amp0).collect();
        let points = self.amp_freq_points(&probe_amps)?;
        let relation = fit_amp_freq_relation(&points)?;

        // step 2: candidate tuples across amplitudes, rough length each
        let mut tuples = Vec::new();
        for scale in [0.75, 0.875, 1.0, 1.125, 1.3] {
            let a = scale * amp0;
            let f = relation.predict(a);
            let t_pi = self.rough_length(a, f, 3.2 * std::f64::consts::PI / (a * w), 48)?;
            tuples.push((a, f, t_pi / 2.0));
        }

        // steps 3-4: refine frequency then amplitude per tuple, recentering
        // the scan window when a peak sits at its edge
        for t in tuples.iter_mut() {
            let mut center = t.1;
            let mut found = None;
            for _ in 0..4 {
                let freqs = grid(center, crate::mhz(0.05), 101);
                match self.pi_minus_pi(t.0, t.2, &freqs) {
                    Ok((f1, _)) => {
                        found = Some(f1);
                        break;
                    }
                    Err(_) => {
                        let signal = self.pi_minus_pi_signal(t.0, t.2, &freqs)?;
                        let arg = signal
                            .iter()
                            .enumerate()
                            .max_by(|a, b| a.1.total_cmp(b.1))
                            .map(|(i, _)| i)
                            .unwrap_or(0);
                        center = freqs[arg] + (freqs[arg] - center) * 0.5;
                    }
                }
            }
            t.1 = found
                .ok_or_else(|| Error::Calibration("pi-minus-pi failed to localize the peak".into()))?;
            let mut acenter = t.0;
            let mut afound = None;
            for _ in 0..4 {
                let amps = grid(acenter, acenter * 0.004, 61);
                match self.pi_train(&amps, t.1, t.2) {
                    Ok((a1, _)) => {
                        afound = Some(a1);
                        break;
                    }
                    Err(_) => {
                        let signal = self.pi_train_signal(&amps, t.1, t.2)?;
                        let arg = signal
                            .iter()
                            .enumerate()
                            .max_by(|a, b| a.1.total_cmp(b.1))
                            .map(|(i, _)| i)
                            .unwrap_or(0);
                        acenter = amps[arg] + (amps[arg] - acenter) * 0.5;
                    }
                }
            }
            t.0 = afound
                .ok_or_else(|| Error::Calibration("pi-train failed to localize the peak".into()))?;
        }

        // step 5: scan blocked transfer across the whole tuple family on a
        // fine length grid and pick the minimum matching the target index
        tuples.sort_by(|x, y| x.2.total_cmp(&y.2));
        let interp = |tau: f64, pick: fn(&(f64, f64, f64)) -> f64| -> f64 {
            let mut lo = 0;
            while lo + 2 < tuples.len() && tuples[lo + 1].2 < tau {
                lo += 1;
            }
            let (t0, t1) = (&tuples[lo], &tuples[lo + 1]);
            let x = ((tau - t0.2) / (t1.2 - t0.2)).clamp(-0.5, 1.5);
            pick(t0) * (1.0 - x) + pick(t1) * x
        };
        let tau_lo = tuples.first().unwrap().2;
        let tau_hi = tuples.last().unwrap().2;
        let n_scan = ((tau_hi - tau_lo) / (self.opts.length_step / 2.0)).ceil() as usize + 1;
        let taus: Vec<f64> =
            (0..n_scan).map(|k| tau_lo + (tau_hi - tau_lo) * k as f64 / (n_scan - 1) as f64).collect();
        use rayon::prelude::*;
        let transfers: Vec<f64> = taus
            .par_iter()
            .map(|&tau| {
                self.blocked_transfer(interp(tau, |t| t.0), interp(tau, |t| t.1), tau, 1)
            })
            .collect::<Result<Vec<_>>>()?;
        let delta0 = self.conditioning_shift();
        let mut tau_star = None;
        let mut best_tr = f64::INFINITY;
        for k in 0..n_scan {
            let is_min = (k == 0 || transfers[k] <= transfers[k - 1])
                && (k + 1 == n_scan || transfers[k] <= transfers[k + 1]);
            if is_min && blocking_index(taus[k], delta0) == target_n && transfers[k] < best_tr {
                best_tr = transfers[k];
                tau_star = Some(taus[k]);
            }
        }
        let mut tau_star = tau_star.ok_or_else(|| {
            Error::Calibration(format!(
                "{}: no blocked-transfer minimum with index n = {target_n} in the scanned range",
                self.pair.tag()
            ))
        })?;

        // re-lock amplitude and frequency at tau*, then polish the length
        // against the blocked minimum; the wide transfer lock keeps the
        // amplitude on the pi-rotation branch before the fine products run
        let mut a = interp(tau_star, |t| t.0);
        let mut f = interp(tau_star, |t| t.1);
        let first_lock = self.transfer_max_lock(a, f, tau_star)?;
        a = first_lock.0;
        f = first_lock.1;
        // precision polish with the product experiments at fixed tau*
        if let Ok((f1, _)) = self.pi_minus_pi(a, tau_star, &grid(f, crate::mhz(0.03), 41)) {
            f = f1;
        }
        if let Ok((a1, _)) = self.pi_train(&grid(a, a * 0.002, 41), f, tau_star) {
            a = a1;
        }

        // step 6: fine 2D intersection at tau*, then settle on the stable
        // point by alternating the two 1D calibrations once
        let (mut a_star, mut f_star) = self.fine_2d_intersection(a, f, tau_star, 21, 21)?;
        if let Ok((f1, _)) = self.pi_minus_pi(a_star, tau_star, &grid(f_star, self.opts.freq_step, 41)) {
            f_star = f1;
        }
        if let Ok((a1, _)) =
            self.pi_train(&grid(a_star, a_star * self.opts.amp_step_rel, 41), f_star, tau_star)
        {
            a_star = a1;
        }
        // realized gate checks; a joint simplex on (A, f) serves as the
        // fallback when the staged procedure leaves either figure short
        let quality = |a: f64, f: f64| -> Result<(f64, f64)> {
            let u = self.compile_xpi(a, f, tau_star)?;
            let psi = &u * self.eg_state(self.pair.allow_switch());
            let transfer = self.pop_site(&self.sim.populations(&psi), self.o_site, 2);
            Ok((transfer, self.blocked_transfer(a, f, tau_star, 15)? / 15.0))
        };
        let quality_at = |a: f64, f: f64, tau: f64| -> Result<(f64, f64)> {
            let u = self.compile_xpi(a, f, tau)?;
            let psi = &u * self.eg_state(self.pair.allow_switch());
            let transfer = self.pop_site(&self.sim.populations(&psi), self.o_site, 2);
            Ok((transfer, self.blocked_transfer(a, f, tau, 15)? / 15.0))
        };
        let (mut transfer, mut per_gate_block) = quality(a_star, f_star)?;
        if transfer < 0.998 || per_gate_block > 4e-3 {
            // joint simplex over (A, f, tau): blocked error minimized with a
            // penalty below 0.999 transfer
            let score = |t: f64, b: f64| 4.0 * (0.999 - t).max(0.0) + b;
            let objective = |p: &[f64]| -> f64 {
                if p[2].abs() > 8.0 {
                    return 1.0;
                }
                match quality_at(p[0], f_star + p[1], tau_star + p[2]) {
                    Ok((t, b)) => score(t, b),
                    Err(_) => 1.0,
                }
            };
            let mut best = (a_star, f_star, tau_star, score(transfer, per_gate_block));
            for start_tau in [0.0, -3.0, 3.0] {
                let opts = crate::fit::NmOptions {
                    max_iter: 120,
                    tol: 1e-12,
                    initial_step: vec![a_star * 0.004, crate::mhz(0.06), 1.0],
                };
                let (p, v, _) = crate::fit::nelder_mead(objective, &[a_star, 0.0, start_tau], &opts);
                if v < best.3 {
                    best = (p[0], f_star + p[1], tau_star + p[2], v);
                }
            }
            let (t2, b2) = quality_at(best.0, best.1, best.2)?;
            if score(t2, b2) <= score(transfer, per_gate_block) {
                a_star = best.0;
                f_star = best.1;
                tau_star = best.2;
                transfer = t2;
                per_gate_block = b2;
            }
        }
        let _ = per_gate_block;
        if transfer < floor {
            return Err(Error::Calibration(format!(
                "{}: calibrated swap transfers only {transfer:.4}",
                self.pair.tag()
            )));
        }
        let wp = self.driven_working_point(a_star, f_star, tau_star)?;
        if wp.n != target_n {
            return Err(Error::Calibration(format!(
                "{}: calibration drifted to blocking index {} (wanted {target_n})",
                self.pair.tag(),
                wp.n
            )));
        }
        let gate = CalibratedGate {
            name: format!("sqisw_{}_n{}", self.pair.tag(), wp.n),
            pulse: self.sideband_pulse(a_star, f_star, tau_star, 0.0, 0.0),
            virtual_z: 0.0,
            conditioned_on: Some((Role::Switch, self.pair.allow_switch())),
            n_index: Some(wp.n),
            repeats: 1,
        };
        Ok((gate, wp))
    }

    /// Working point with g_eff and the conditioning shift fitted from the
    /// realized dynamics at the calibrated drive. The full-transfer
    /// condition pins g_eff = pi / gate time; the blocked generalized Rabi
    /// rate comes from the spacing of blocked-transfer revivals, which is
    /// exactly 2 pi / Omega regardless of small waveform distortions.
    pub fn driven_working_point(&self, amp: f64, freq: f64, tau: f64) -> Result<SidebandWorkingPoint> {
        let gate_time = 2.0 * tau;
        let g_eff = std::f64::consts::PI / gate_time;
        let delta0 = self.conditioning_shift();
        let rate_guess = (g_eff * g_eff + delta0 * delta0).sqrt();
        let (spacing, intercept) = self.revival_ladder(self.pair.block_switch(), amp, freq, rate_guess)?;
        let revolutions = (gate_time - intercept) / spacing;
        let n = revolutions.round().max(1.0) as u32;
        let revival_residual = (revolutions - n as f64).abs() / n as f64;
        let omega_flat = 2.0 * std::f64::consts::PI / spacing;
        let zeta_driven = (omega_flat * omega_flat - g_eff * g_eff).max(0.0).sqrt();
        let zeta = g_eff * (4.0 * (n as f64).powi(2) - 1.0).sqrt();
        Ok(SidebandWorkingPoint {
            n,
            g_eff,
            zeta,
            omega_blocked: (g_eff * g_eff + zeta * zeta).sqrt(),
            gate_time,
            zeta_driven,
            revival_residual,
        })
    }

    /// Tighter-windowed variant of [`Self::transfer_max_lock`] for the
    /// final settle iterations.
    fn transfer_max_lock_tight(&self, amp0: f64, freq0: f64, tau: f64) -> Result<(f64, f64)> {
        self.transfer_max_lock_with(amp0, freq0, tau, amp0 * 0.008, crate::mhz(0.12))
    }

    /// Simplex maximization of the single-gate transfer over (A, f): a
    /// clean two-parameter landscape with its maximum at the simultaneous
    /// resonance and pi-rotation point.
    fn transfer_max_lock(&self, amp0: f64, freq0: f64, tau: f64) -> Result<(f64, f64)> {
        self.transfer_max_lock_with(amp0, freq0, tau, amp0 * 0.03, crate::mhz(0.4))
    }

    fn transfer_max_lock_with(
        &self,
        amp0: f64,
        freq0: f64,
        tau: f64,
        step_a: f64,
        step_f: f64,
    ) -> Result<(f64, f64)> {
        let infidelity = |p: &[f64]| -> f64 {
            let (a, f) = (p[0], freq0 + p[1]);
            if a <= 0.0 {
                return 1.0;
            }
            match self.compile_xpi(a, f, tau) {
                Ok(u) => {
                    let psi = &u * self.eg_state(self.pair.allow_switch());
                    1.0 - self.pop_site(&self.sim.populations(&psi), self.o_site, 2)
                }
                Err(_) => 1.0,
            }
        };
        let opts = crate::fit::NmOptions { max_iter: 160, tol: 1e-12, initial_step: vec![step_a, step_f] };
        let (p, best, _) = crate::fit::nelder_mead(infidelity, &[amp0, 0.0], &opts);
        if best > 0.2 {
            return Err(Error::Calibration(format!(
                "transfer lock stalled at infidelity {best:.3}"
            )));
        }
        Ok((p[0], freq0 + p[1]))
    }

    /// Affine fit (spacing, intercept) of blocked-transfer minimum positions
    /// vs revival index; minima of sin^2 are spaced by exactly 2 pi / Omega,
    /// with ramps contributing a fixed offset.
    fn revival_ladder(
        &self,
        switch: usize,
        amp: f64,
        freq: f64,
        rate_guess: f64,
    ) -> Result<(f64, f64)> {
        let spacing0 = 2.0 * std::f64::consts::PI / rate_guess;
        let mut zeros = Vec::new();
        for k in 1..=4usize {
            let center = k as f64 * spacing0;
            if center < 2.0 * self.opts.ramp + 4.0 {
                continue;
            }
            let n_pts = 31;
            let ts: Vec<f64> = (0..n_pts)
                .map(|j| center + spacing0 * (j as f64 / (n_pts - 1) as f64 - 0.5) * 0.7)
                .filter(|&t| t > 2.0 * self.opts.ramp)
                .collect();
            let mut trs = Vec::with_capacity(ts.len());
            for &t in &ts {
                let p = self.drive_pops(switch, amp, freq, t)?;
                trs.push(self.pop_site(&p, self.o_site, 2));
            }
            let (jm, _) = trs
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .ok_or_else(|| Error::Calibration("empty revival scan".into()))?;
            // parabolic refinement of the minimum
            let t_min = if jm > 0 && jm + 1 < ts.len() {
                let (y0, y1, y2) = (trs[jm - 1], trs[jm], trs[jm + 1]);
                let denom = y0 - 2.0 * y1 + y2;
                if denom.abs() > 1e-15 {
                    let h = ts[jm + 1] - ts[jm];
                    ts[jm] + 0.5 * h * (y0 - y2) / denom
                } else {
                    ts[jm]
                }
            } else {
                ts[jm]
            };
            zeros.push((k as f64, t_min));
        }
        if zeros.len() < 2 {
            return Err(Error::Calibration("too few transfer revivals to fit the rate".into()));
        }
        let nk = zeros.len() as f64;
        let sx: f64 = zeros.iter().map(|z| z.0).sum();
        let sy: f64 = zeros.iter().map(|z| z.1).sum();
        let sxx: f64 = zeros.iter().map(|z| z.0 * z.0).sum();
        let sxy: f64 = zeros.iter().map(|z| z.0 * z.1).sum();
        let spacing = (nk * sxy - sx * sy) / (nk * sxx - sx * sx);
        let intercept = (sy - spacing * sx) / nk;
        Ok((spacing, intercept))
    }
}

fn blocking_index(tau: f64, delta: f64) -> u32 {
    let gate_time = 2.0 * tau;
    let g_eff = std::f64::consts::PI / gate_time;
    let omega_b = (g_eff * g_eff + delta * delta).sqrt();
    (omega_b * gate_time / (2.0 * std::f64::consts::PI)).round().max(1.0) as u32
}

/// Carrier-phase-pi variant of a fixed-frame unitary (X_pi -> X_-pi):
/// elements changing total excitation by an odd amount flip sign.
pub fn phase_flip(u: &CMat, sim: &Simulator) -> CMat {
    let mut m = u.clone();
    for r in 0..m.nrows() {
        for cc in 0..m.ncols() {
            let dn = sim.excitation[r] as i32 - sim.excitation[cc] as i32;
            if dn.rem_euclid(2) == 1 {
                m[(r, cc)] = -m[(r, cc)];
            }
        }
    }
    m
}

fn normalize_unit(mut v: Vec<f64>) -> Vec<f64> {
    let max = v.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        for x in v.iter_mut() {
            *x /= max;
        }
    }
    v
}

pub fn grid(center: f64, step: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| center + (k as f64 - (n as f64 - 1.0) / 2.0) * step).collect()
}

// ---------------------------------------------------------------------------
// Single-qubit calibration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SingleQubitCalOptions {
    /// Skip the simulated Ramsey and look the frequency up in the dressed
    /// spectrum directly.
    pub oracle_frequencies: bool,
    /// X90 pulse lengths per qubit (ns).
    pub x90_lengths: BTreeMap<Role, f64>,
    /// Use robust piecewise-IQ shapes for X90 pulses.
    pub robust: bool,
    pub robust_opts: RobustSearchOptions,
    /// e-f pi/2 Gaussian length; two of them make the pi pulse.
    pub ef_half_length: f64,
    pub n_list: Vec<usize>,
    pub opts: EvolveOptions,
}

impl Default for SingleQubitCalOptions {
    fn default() -> Self {
        let mut x90_lengths = BTreeMap::new();
        x90_lengths.insert(Role::Switch, 9.0);
        x90_lengths.insert(Role::Input, 20.0);
        x90_lengths.insert(Role::Output1, 13.0);
        x90_lengths.insert(Role::Output2, 13.0);
        Self {
            oracle_frequencies: false,
            x90_lengths,
            robust: true,
            robust_opts: RobustSearchOptions::default(),
            ef_half_length: 30.0,
            n_list: vec![1, 2, 3, 4],
            opts: EvolveOptions::default(),
        }
    }
}

/// Calibrate an X90 on `qubit`, optionally in the frame of a classical
/// spectator context: frequency (Ramsey analog or oracle), amplitude (Rabi
/// maximum then error amplification), and the virtual-Z correction from the
/// phase-sweep product fit.
pub fn calibrate_x90(
    full: &Simulator,
    device: &DeviceConfig,
    qubit: Role,
    context: Option<(Role, usize)>,
    shape: Option<PulseEnvelope>,
    opts: &SingleQubitCalOptions,
) -> Result<CalibratedGate> {
    let qsite_full = full.site_of(qubit)?;
    let mut keep = vec![qsite_full];
    if let Some((spec, _)) = context {
        keep.push(full.site_of(spec)?);
    }
    keep.sort();
    let (sim, _) = full.restrict(&keep)?;
    let qsite = sim.site_of(qubit)?;
    let mut ctx_multi = vec![0usize; sim.dims.len()];
    if let Some((spec, lvl)) = context {
        ctx_multi[sim.site_of(spec)?] = lvl;
    }
    let init = sim.basis_state(&ctx_multi);
    let mut excited = ctx_multi.clone();
    excited[qsite] = 1;
    let f_oracle =
        sim.energies[sim.label_index(&excited)] - sim.energies[sim.label_index(&ctx_multi)];

    let length = *opts
        .x90_lengths
        .get(&qubit)
        .ok_or_else(|| Error::Calibration(format!("no X90 length configured for {qubit}")))?;
    let envelope = match shape {
        Some(e) => e,
        None if opts.robust => robust_shape_for(device, qubit, length, &opts.robust_opts)?,
        None => PulseEnvelope::Gaussian { amplitude: 1.0, length },
    };

    let cal = QubitCal { sim: &sim, qsite, init: init.clone(), opts };
    let designed = matches!(envelope, PulseEnvelope::PiecewiseIq { .. });
    // 1. frequency (the designed scale of a piecewise shape is already the
    // pi/2 point, so it doubles as the provisional Ramsey amplitude)
    let provisional = if designed { Some(1.0) } else { None };
    let freq = if opts.oracle_frequencies {
        f_oracle
    } else {
        cal.ramsey_frequency(&envelope, full.omega_ge[qsite_full], provisional)?
    };
    // 2. amplitude: Rabi maximum halved for analytic shapes, two-pulse
    // maximum around the designed scale for piecewise ones
    let mut amp = if designed {
        cal.pair_scale(&envelope, freq, 1.0)?
    } else {
        cal.rabi_amplitude(&envelope, freq)? / 2.0
    };
    // 3. virtual-Z from the phase-sweep product
    let vz = cal.virtual_z(&envelope, freq, amp)?;
    // 4. amplitude refinement by error amplification
    amp = cal.refine_amplitude(&envelope, freq, amp, vz)?;
    let pulse = DrivePulse {
        channel: qubit,
        envelope: scale_envelope(&envelope, amp),
        carrier_freq: freq,
        phase: 0.0,
        start_time: 0.0,
    };
    let name = match context {
        Some((spec, lvl)) => {
            format!("x90_{}:{}{}", qubit.tag(), spec.tag(), if lvl == 0 { "g" } else { "e" })
        }
        None => format!("x90_{}", qubit.tag()),
    };
    Ok(CalibratedGate {
        name,
        pulse,
        virtual_z: vz,
        conditioned_on: context,
        n_index: None,
        repeats: 1,
    })
}

/// Robust X90 shape for a qubit: trained over zero plus the +-ZZ shifts of
/// every strongly coupled spectator.
pub fn robust_shape_for(
    device: &DeviceConfig,
    qubit: Role,
    length: f64,
    robust_opts: &RobustSearchOptions,
) -> Result<PulseEnvelope> {
    let qidx = device.index_of(qubit)?;
    let dressed = crate::device::diagonalize_dressed(device)?;
    let mut dets = vec![0.0];
    for other in 0..device.transmons.len() {
        if other == qidx {
            continue;
        }
        let z = dressed.zeta[(qidx, other)];
        if z.abs() > crate::mhz(2.0) {
            dets.push(z);
            dets.push(-z);
        }
    }
    let alpha = dressed.alpha[qidx].unwrap_or(ghz(-0.2));
    Ok(search_robust_pulse(alpha, &dets, length, robust_opts)?.envelope)
}

/// Calibrate the e-f pi pulse of an output (two pi/2 Gaussians) in a given
/// switch context; no virtual-Z is needed for these.
pub fn calibrate_ef_pi(
    full: &Simulator,
    qubit: Role,
    context: (Role, usize),
    opts: &SingleQubitCalOptions,
) -> Result<CalibratedGate> {
    let mut keep = vec![full.site_of(qubit)?, full.site_of(context.0)?];
    keep.sort();
    let (sim, _) = full.restrict(&keep)?;
    let qsite = sim.site_of(qubit)?;
    let mut e_multi = vec![0usize; sim.dims.len()];
    e_multi[sim.site_of(context.0)?] = context.1;
    e_multi[qsite] = 1;
    let mut f_multi = e_multi.clone();
    f_multi[qsite] = 2;
    let freq = sim.energies[sim.label_index(&f_multi)] - sim.energies[sim.label_index(&e_multi)];
    let init = sim.basis_state(&e_multi);
    let envelope = PulseEnvelope::Gaussian { amplitude: 1.0, length: opts.ef_half_length };
    let cal = QubitCal { sim: &sim, qsite, init, opts };
    let a_pi = cal.rabi_amplitude_level(&envelope, freq, 2)?;
    let mut amp = a_pi / 2.0;
    amp = cal.refine_amplitude_level(&envelope, freq, amp, 2)?;
    let pulse = DrivePulse {
        channel: qubit,
        envelope: scale_envelope(&envelope, amp),
        carrier_freq: freq,
        phase: 0.0,
        start_time: 0.0,
    };
    let name = format!(
        "xpi_ef_{}:{}{}",
        qubit.tag(),
        context.0.tag(),
        if context.1 == 0 { "g" } else { "e" }
    );
    Ok(CalibratedGate {
        name,
        pulse,
        virtual_z: 0.0,
        conditioned_on: Some(context),
        n_index: None,
        repeats: 2,
    })
}

struct QubitCal<'a> {
    sim: &'a Simulator,
    qsite: usize,
    init: CVec,
    opts: &'a SingleQubitCalOptions,
}

impl QubitCal<'_> {
    fn pulse(&self, env: &PulseEnvelope, amp: f64, freq: f64, phase: f64, start: f64) -> DrivePulse {
        DrivePulse {
            channel: self.sim.roles[self.qsite],
            envelope: scale_envelope(env, amp),
            carrier_freq: freq,
            phase,
            start_time: start,
        }
    }

    fn pop_level(&self, state: &CVec, level: usize) -> f64 {
        self.sim
            .populations(state)
            .iter()
            .enumerate()
            .filter(|(b, _)| crate::linalg::index_to_multi(*b, &self.sim.dims)[self.qsite] == level)
            .map(|(_, &p)| p)
            .sum()
    }

    /// Ramsey analog with an artificial detuning: two provisional X90s
    /// around a free evolution, second pulse phase advanced by w_art * tau.
    fn ramsey_frequency(
        &self,
        env: &PulseEnvelope,
        f_guess: f64,
        provisional: Option<f64>,
    ) -> Result<f64> {
        let mut f = f_guess;
        for (w_art, t_max) in [(crate::mhz(10.0), 1000.0), (crate::mhz(1.5), 5000.0)] {
            let a90 = match provisional {
                Some(a) => a,
                None => self.rabi_amplitude(env, f)? / 2.0,
            };
            let length = env.length();
            let n_pts = 81;
            let taus: Vec<f64> =
                (0..n_pts).map(|k| t_max * k as f64 / (n_pts - 1) as f64).collect();
            let mut pe = Vec::with_capacity(n_pts);
            for &tau in &taus {
                let mut s = PulseSchedule::new();
                s.push(self.pulse(env, a90, f, 0.0, 0.0));
                s.push(self.pulse(env, a90, f, w_art * tau, length + tau));
                let out = self.sim.evolve_unitary(&s, &self.init, &self.opts.opts)?;
                pe.push(self.pop_level(&out, 1));
            }
            let band = (
                (w_art - crate::mhz(9.0)).max(crate::mhz(0.05)) / (2.0 * std::f64::consts::PI),
                (w_art + crate::mhz(9.0)) / (2.0 * std::f64::consts::PI),
            );
            let fit = crate::fit::fit_sinusoid_band(&taus, &pe, Some(band))
                .ok_or_else(|| Error::Calibration("Ramsey fringe fit failed".into()))?;
            // fringe turns at |w_art - detuning|
            let detuning = w_art - 2.0 * std::f64::consts::PI * fit.frequency;
            f += detuning;
        }
        Ok(f)
    }

    fn rabi_amplitude(&self, env: &PulseEnvelope, freq: f64) -> Result<f64> {
        self.rabi_amplitude_level(env, freq, 1)
    }

    /// Excited-state maximum after two pulses, scanned over the envelope
    /// scale around a designed pi/2 point.
    fn pair_scale(&self, env: &PulseEnvelope, freq: f64, scale0: f64) -> Result<f64> {
        let length = env.length();
        let n = 41;
        let scales = grid(scale0, scale0 * 0.008, n);
        let mut pops = Vec::with_capacity(n);
        for &a in &scales {
            let mut s = PulseSchedule::new();
            s.push(self.pulse(env, a, freq, 0.0, 0.0));
            s.push(self.pulse(env, a, freq, 0.0, length));
            let out = self.sim.evolve_unitary(&s, &self.init, &self.opts.opts)?;
            pops.push(self.pop_level(&out, 1));
        }
        let (im, _) = pops
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .ok_or_else(|| Error::Calibration("empty scale scan".into()))?;
        if im == 0 || im + 1 == n {
            return Ok(scales[im]);
        }
        let (y0, y1, y2) = (pops[im - 1], pops[im], pops[im + 1]);
        let denom = y0 - 2.0 * y1 + y2;
        if denom.abs() < 1e-18 {
            return Ok(scales[im]);
        }
        Ok(scales[im] + 0.5 * (scales[im + 1] - scales[im]) * (y0 - y2) / denom)
    }

    /// Amplitude of the first Rabi maximum of `level` population after one
    /// pulse, scanned over the envelope scale.
    fn rabi_amplitude_level(&self, env: &PulseEnvelope, freq: f64, level: usize) -> Result<f64> {
        let a_pi_est = std::f64::consts::PI / envelope_area(env) / ladder_weight(level);
        let n = 41;
        let amps: Vec<f64> = (1..=n).map(|k| 1.6 * a_pi_est * k as f64 / n as f64).collect();
        let mut pops = Vec::with_capacity(n);
        for &a in &amps {
            let mut s = PulseSchedule::new();
            s.push(self.pulse(env, a, freq, 0.0, 0.0));
            let out = self.sim.evolve_unitary(&s, &self.init, &self.opts.opts)?;
            pops.push(self.pop_level(&out, level));
        }
        let fit = fit_sinusoid(&amps, &pops)
            .ok_or_else(|| Error::Calibration("Rabi amplitude fit failed".into()))?;
        let mut a_max = (-fit.phase).rem_euclid(2.0 * std::f64::consts::PI)
            / (2.0 * std::f64::consts::PI * fit.frequency);
        while a_max < 0.25 / fit.frequency {
            a_max += 1.0 / fit.frequency;
        }
        Ok(a_max)
    }

    /// Phase-sweep product fit: (X90, Z_phi, X-90, Z_phi)^N, Gaussian center
    /// of the product of ground-state populations over N.
    fn virtual_z(&self, env: &PulseEnvelope, freq: f64, amp: f64) -> Result<f64> {
        let length = env.length();
        let n_phi = 97;
        let phis: Vec<f64> = grid(0.0, 2.0 * std::f64::consts::PI / (n_phi as f64 - 1.0), n_phi);
        let mut signal = Vec::with_capacity(n_phi);
        for &phi in &phis {
            let mut product = 1.0;
            for &n in &self.opts.n_list {
                let mut s = PulseSchedule::new();
                let mut t = 0.0;
                let mut frame = 0.0;
                for _ in 0..n {
                    s.push(self.pulse(env, amp, freq, frame, t));
                    t += length;
                    frame += phi;
                    s.push(self.pulse(env, amp, freq, frame + std::f64::consts::PI, t));
                    t += length;
                    frame += phi;
                }
                let out = self.sim.evolve_unitary(&s, &self.init, &self.opts.opts)?;
                product *= self.pop_level(&out, 0);
            }
            signal.push(product);
        }
        let signal = normalize_unit(signal);
        // localize the best peak, then fit a Gaussian in its neighborhood
        let arg = signal.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap();
        let lo = arg.saturating_sub(10);
        let hi = (arg + 11).min(n_phi);
        let g = fit_gaussian_peak(&phis[lo..hi], &signal[lo..hi])
            .filter(|g| g.amplitude > 0.1 && g.center >= phis[lo] && g.center <= phis[hi - 1])
            .ok_or_else(|| Error::Calibration("virtual-Z product signal is flat".into()))?;
        let mut vz = -g.center;
        while vz <= -std::f64::consts::PI {
            vz += 2.0 * std::f64::consts::PI;
        }
        while vz > std::f64::consts::PI {
            vz -= 2.0 * std::f64::consts::PI;
        }
        Ok(vz)
    }

    /// (X90 X90)^{2N} product fit over amplitude.
    fn refine_amplitude(&self, env: &PulseEnvelope, freq: f64, amp0: f64, vz: f64) -> Result<f64> {
        let length = env.length();
        let n_amp = 41;
        let amps = grid(amp0, amp0 * 0.005, n_amp);
        let mut signal = Vec::with_capacity(n_amp);
        for &a in &amps {
            let mut product = 1.0;
            for &n in &self.opts.n_list {
                let mut s = PulseSchedule::new();
                let mut t = 0.0;
                let mut frame = 0.0;
                for _ in 0..2 * n {
                    s.push(self.pulse(env, a, freq, frame, t));
                    t += length;
                    frame -= vz;
                    s.push(self.pulse(env, a, freq, frame, t));
                    t += length;
                    frame -= vz;
                }
                let out = self.sim.evolve_unitary(&s, &self.init, &self.opts.opts)?;
                product *= self.pop_level(&out, 0);
            }
            signal.push(product);
        }
        let signal = normalize_unit(signal);
        let g = fit_gaussian_peak(&amps, &signal)
            .filter(|g| g.amplitude > 0.1)
            .ok_or_else(|| Error::Calibration("amplitude refinement signal is flat".into()))?;
        Ok(g.center)
    }

    /// Amplitude refinement for a pi/2 pulse on the (level-1, level)
    /// transition by trains of 4N pulses.
    fn refine_amplitude_level(
        &self,
        env: &PulseEnvelope,
        freq: f64,
        amp0: f64,
        level: usize,
    ) -> Result<f64> {
        let length = env.length();
        let n_amp = 41;
        let amps = grid(amp0, amp0 * 0.005, n_amp);
        let from_level = level - 1;
        let mut signal = Vec::with_capacity(n_amp);
        for &a in &amps {
            let mut product = 1.0;
            for &n in &self.opts.n_list {
                let mut s = PulseSchedule::new();
                let mut t = 0.0;
                for _ in 0..4 * n {
                    s.push(self.pulse(env, a, freq, 0.0, t));
                    t += length;
                }
                let out = self.sim.evolve_unitary(&s, &self.init, &self.opts.opts)?;
                product *= self.pop_level(&out, from_level);
            }
            signal.push(product);
        }
        let signal = normalize_unit(signal);
        let g = fit_gaussian_peak(&amps, &signal)
            .filter(|g| g.amplitude > 0.1)
            .ok_or_else(|| Error::Calibration("e-f amplitude refinement signal is flat".into()))?;
        Ok(g.center)
    }
}

/// Rotation angle per unit amplitude of an envelope on a two-level
/// transition with unit drive weight: theta = amp * this.
fn envelope_area(env: &PulseEnvelope) -> f64 {
    let n = 2000;
    let length = env.length();
    let dt = length / n as f64;
    let mut area = 0.0;
    for k in 0..n {
        area += env.baseband((k as f64 + 0.5) * dt).norm() * dt;
    }
    2.0 * area
}

fn ladder_weight(level: usize) -> f64 {
    (level as f64).sqrt()
}

pub fn scale_envelope(env: &PulseEnvelope, amp: f64) -> PulseEnvelope {
    match env {
        PulseEnvelope::FlatTopGaussian { length, ramp, .. } => {
            PulseEnvelope::FlatTopGaussian { amplitude: amp, length: *length, ramp: *ramp }
        }
        PulseEnvelope::Gaussian { length, .. } => {
            PulseEnvelope::Gaussian { amplitude: amp, length: *length }
        }
        PulseEnvelope::PiecewiseIq { iq, dt_sample, .. } => {
            PulseEnvelope::PiecewiseIq { iq: iq.clone(), dt_sample: *dt_sample, scale: amp }
        }
    }
}


// ---------------------------------------------------------------------------
// Device-level driver
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct RouterCalOptions {
    pub sideband: SidebandCalOptions,
    pub single_qubit: SingleQubitCalOptions,
    /// Calibrate the alternate blocking indices too (n=1 for input-output 1,
    /// n=2 for input-output 2), for working-point comparisons.
    pub alternates: bool,
}

/// Calibrate everything the router protocol needs: both sidebands at their
/// default working points (n=2 for input-output 1, n=1 for input-output 2),
/// X90 pulses for every qubit (per switch context on the input), and the
/// e-f mapping pulses of the outputs.
pub fn calibrate_router(
    full: &Simulator,
    device: &DeviceConfig,
    opts: &RouterCalOptions,
) -> Result<CalibrationRegistry> {
    let mut reg = CalibrationRegistry::new();
    for (pair, n) in [(IoPair::Io1, 2u32), (IoPair::Io2, 1u32)] {
        let cal = SidebandCalibrator::new(full, pair, opts.sideband.clone())?;
        let (gate, wp) = cal.calibrate(n)?;
        reg.working_points.insert(gate.name.clone(), wp);
        reg.insert(gate);
        if opts.alternates {
            let alt_n = 3 - n;
            let (gate, wp) = cal.calibrate_with_floor(alt_n, 0.95)?;
            reg.working_points.insert(gate.name.clone(), wp);
            reg.insert(gate);
        }
    }
    // X90 pulses: shared robust shape per qubit, re-calibrated per context
    for qubit in Role::ALL {
        let length = *opts
            .single_qubit
            .x90_lengths
            .get(&qubit)
            .ok_or_else(|| Error::Calibration(format!("no X90 length for {qubit}")))?;
        let shape = if opts.single_qubit.robust {
            Some(robust_shape_for(device, qubit, length, &opts.single_qubit.robust_opts)?)
        } else {
            None
        };
        match qubit {
            Role::Input => {
                for ctx in [0usize, 1] {
                    let gate = calibrate_x90(
                        full,
                        device,
                        qubit,
                        Some((Role::Switch, ctx)),
                        shape.clone(),
                        &opts.single_qubit,
                    )?;
                    reg.insert(gate);
                }
            }
            _ => {
                let gate = calibrate_x90(full, device, qubit, None, shape, &opts.single_qubit)?;
                reg.insert(gate);
            }
        }
    }
    reg.insert(calibrate_ef_pi(full, Role::Output1, (Role::Switch, 0), &opts.single_qubit)?);
    reg.insert(calibrate_ef_pi(full, Role::Output2, (Role::Switch, 1), &opts.single_qubit)?);
    Ok(reg)
}

// ---------------------------------------------------------------------------
// Registry
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct CalibrationRegistry {
    gates: BTreeMap<String, CalibratedGate>,
    pub working_points: BTreeMap<String, SidebandWorkingPoint>,
}

impl CalibrationRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, gate: CalibratedGate) {
        self.gates.insert(gate.name.clone(), gate);
    }

    pub fn get(&self, name: &str) -> Result<&CalibratedGate> {
        self.gates
            .get(name)
            .ok_or_else(|| Error::Calibration(format!("no calibrated gate named '{name}'")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.gates.keys().map(|s| s.as_str())
    }

    pub fn to_json(&self) -> String {
        let file = RegistryFile {
            gates: self
                .gates
                .values()
                .map(|g| {
                    let (kind, amplitude, length, ramp, iq, iq_dt) = match &g.pulse.envelope {
                        PulseEnvelope::FlatTopGaussian { amplitude, length, ramp } => {
                            ("flat_top_gaussian", *amplitude, *length, *ramp, None, None)
                        }
                        PulseEnvelope::Gaussian { amplitude, length } => {
                            ("gaussian", *amplitude, *length, 0.0, None, None)
                        }
                        PulseEnvelope::PiecewiseIq { iq, dt_sample, scale } => (
                            "piecewise_iq",
                            *scale,
                            g.pulse.envelope.length(),
                            0.0,
                            Some(iq.clone()),
                            Some(*dt_sample),
                        ),
                    };
                    (
                        g.name.clone(),
                        RegistryEntry {
                            kind: kind.to_string(),
                            channel: g.pulse.channel,
                            amplitude,
                            freq_GHz: to_ghz(g.pulse.carrier_freq),
                            length_ns: length,
                            ramp_ns: ramp,
                            virtual_z_rad: g.virtual_z,
                            n_index: g.n_index,
                            repeats: g.repeats,
                            conditioned_on: g.conditioned_on,
                            iq_samples: iq,
                            iq_dt_ns: iq_dt,
                        },
                    )
                })
                .collect(),
            working_points: self.working_points.clone(),
        };
        serde_json::to_string_pretty(&file).expect("registry serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: RegistryFile = serde_json::from_str(text)?;
        let mut reg = CalibrationRegistry::new();
        for (name, e) in file.gates {
            let envelope = match e.kind.as_str() {
                "flat_top_gaussian" => PulseEnvelope::FlatTopGaussian {
                    amplitude: e.amplitude,
                    length: e.length_ns,
                    ramp: e.ramp_ns,
                },
                "gaussian" => {
                    PulseEnvelope::Gaussian { amplitude: e.amplitude, length: e.length_ns }
                }
                "piecewise_iq" => PulseEnvelope::PiecewiseIq {
                    iq: e.iq_samples.ok_or_else(|| {
                        Error::Config(format!("{name}: piecewise gate without iq_samples"))
                    })?,
                    dt_sample: e.iq_dt_ns.ok_or_else(|| {
                        Error::Config(format!("{name}: piecewise gate without iq_dt_ns"))
                    })?,
                    scale: e.amplitude,
                },
                other => {
                    return Err(Error::Config(format!("{name}: unknown envelope kind '{other}'")))
                }
            };
            let gate = CalibratedGate {
                name: name.clone(),
                pulse: DrivePulse {
                    channel: e.channel,
                    envelope,
                    carrier_freq: ghz(e.freq_GHz),
                    phase: 0.0,
                    start_time: 0.0,
                },
                virtual_z: e.virtual_z_rad,
                conditioned_on: e.conditioned_on,
                n_index: e.n_index,
                repeats: e.repeats.max(1),
            };
            gate.validate()?;
            reg.insert(gate);
        }
        reg.working_points = file.working_points;
        Ok(reg)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RegistryFile {
    gates: BTreeMap<String, RegistryEntry>,
    #[serde(default)]
    working_points: BTreeMap<String, SidebandWorkingPoint>,
}

#[derive(Debug, Serialize, Deserialize)]
#[allow(non_snake_case)]
struct RegistryEntry {
    kind: String,
    channel: Role,
    amplitude: f64,
    freq_GHz: f64,
    length_ns: f64,
    #[serde(default)]
    ramp_ns: f64,
    #[serde(default)]
    virtual_z_rad: f64,
    #[serde(default)]
    n_index: Option<u32>,
    #[serde(default = "one")]
    repeats: u32,
    #[serde(default)]
    conditioned_on: Option<(Role, usize)>,
    #[serde(default)]
    iq_samples: Option<Vec<(f64, f64)>>,
    #[serde(default)]
    iq_dt_ns: Option<f64>,
}

fn one() -> u32 {
    1
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn quadratic_relation_recovers_exact_parabola() {
        let pts: Vec<(f64, f64)> =
            [0.1, 0.2, 0.3, 0.45].iter().map(|&a| (a, 2.0 + 0.5 * a - 3.0 * a * a)).collect();
        let rel = fit_amp_freq_relation(&pts).unwrap();
        assert_abs_diff_eq!(rel.coeffs[0], 2.0, epsilon = 1e-6);
        assert_abs_diff_eq!(rel.coeffs[1], 0.5, epsilon = 1e-6);
        assert_abs_diff_eq!(rel.coeffs[2], -3.0, epsilon = 1e-6);
        assert!(rel.residual < 1e-9);
        assert!(fit_amp_freq_relation(&pts[..2]).is_err());
    }

    #[test]
    fn registry_round_trip() {
        let mut reg = CalibrationRegistry::new();
        reg.insert(CalibratedGate {
            name: "sqisw_IO1_n2".into(),
            pulse: DrivePulse {
                channel: Role::Output1,
                envelope: PulseEnvelope::FlatTopGaussian {
                    amplitude: 0.9,
                    length: 213.0,
                    ramp: 3.0,
                },
                carrier_freq: ghz(5.886),
                phase: 0.0,
                start_time: 0.0,
            },
            virtual_z: 0.12,
            conditioned_on: Some((Role::Switch, 0)),
            n_index: Some(2),
            repeats: 1,
        });
        reg.insert(CalibratedGate {
            name: "x90_I:Sg".into(),
            pulse: DrivePulse {
                channel: Role::Input,
                envelope: PulseEnvelope::PiecewiseIq {
                    iq: vec![(0.1, 0.0), (0.08, -0.02)],
                    dt_sample: 10.0,
                    scale: 1.0,
                },
                carrier_freq: ghz(3.448),
                phase: 0.0,
                start_time: 0.0,
            },
            virtual_z: -0.03,
            conditioned_on: Some((Role::Switch, 0)),
            n_index: None,
            repeats: 1,
        });
        let text = reg.to_json();
        let back = CalibrationRegistry::from_json(&text).unwrap();
        let g = back.get("sqisw_IO1_n2").unwrap();
        assert_abs_diff_eq!(g.pulse.carrier_freq, ghz(5.886), epsilon = 1e-12);
        assert_eq!(g.n_index, Some(2));
        let x = back.get("x90_I:Sg").unwrap();
        assert_eq!(x.repeats, 1);
        assert!(back.get("nope").is_err());
    }

    #[test]
    fn blocking_index_arithmetic() {
        // omega_blocked = 2 n g  <=>  g = delta / sqrt(4 n^2 - 1)
        let delta = crate::mhz(5.4);
        for n in [1u32, 2, 3] {
            let g = delta / ((4.0 * (n as f64).powi(2) - 1.0).sqrt());
            let tau = std::f64::consts::PI / g / 2.0;
            assert_eq!(blocking_index(tau, delta), n);
        }
    }

    #[test]
    fn envelope_area_of_rectangle() {
        let e = PulseEnvelope::FlatTopGaussian { amplitude: 1.0, length: 10.0, ramp: 0.0 };
        // a rectangle of amplitude A rotates by A * length on resonance
        assert_abs_diff_eq!(envelope_area(&e), 10.0, epsilon = 1e-9);
    }
}
