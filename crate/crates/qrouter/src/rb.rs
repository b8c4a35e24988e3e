//! Subspace randomized benchmarking of conditional iSWAPs.
//!
//! The states |Seg> and |Sgf> (switch in the state that allows the swap)
//! form a dual-rail logical qubit; the sideband pulse generates single-qubit
//! rotations on it. Reference and interleaved RB run on compiled noisy
//! channels of the (switch, input, output) subsystem, with a two-step
//! readout and a rectangular confusion-matrix correction, followed by
//! leakage and post-selected survival fits.

use crate::calib::{CalibrationRegistry, IoPair};
use crate::device::{DeviceConfig, Role};
use crate::dynamics::{Channel, CollapseSet, EvolveOptions, Simulator};
use crate::error::{Error, Result};
use crate::fit::{levenberg_marquardt, LmFit, LmOptions};
use crate::linalg::{index_to_multi, CMat};
use crate::pulse::PulseSchedule;
use crate::readout::{bin_probabilities, sample_counts, DiscriminationMode, ReadoutModel};
use nalgebra::{DMatrix, DVector, Matrix2};
use num_complex::Complex64 as C64;
use rand::Rng;
use serde::{Deserialize, Serialize};

type M2 = Matrix2<C64>;

const GE3: [(usize, DiscriminationMode); 3] = [
    (0, DiscriminationMode::Ge),
    (1, DiscriminationMode::Ge),
    (2, DiscriminationMode::Ge),
];
const GE2_EF: [(usize, DiscriminationMode); 3] = [
    (0, DiscriminationMode::Ge),
    (1, DiscriminationMode::Ge),
    (2, DiscriminationMode::Ef),
];

/// One of the 24 subspace Cliffords: its 2x2 action on {|Seg>, |Sgf>} and a
/// decomposition into at most three phase-offset sideband pulses.
#[derive(Debug, Clone)]
pub struct SubspaceClifford {
    pub index: usize,
    /// Carrier phase offsets of the generating pulses, applied in order.
    pub phases: Vec<f64>,
    pub matrix: M2,
}

/// U_sub(phi): a pi/2 rotation about the equatorial axis at angle phi.
pub fn generator_matrix(phi: f64) -> M2 {
    let c = C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
    let s = C64::new(0.0, -std::f64::consts::FRAC_1_SQRT_2);
    M2::new(c, s * C64::from_polar(1.0, phi), s * C64::from_polar(1.0, -phi), c)
}

fn canonical_key(m: &M2) -> [i64; 8] {
    // strip the global phase: rotate so the largest element is real positive
    let mut pivot = C64::new(0.0, 0.0);
    for el in m.iter() {
        if el.norm() > pivot.norm() + 1e-12 {
            pivot = *el;
        }
    }
    let phase = pivot / pivot.norm();
    let mut key = [0i64; 8];
    for (k, el) in m.iter().enumerate() {
        let z = el * phase.conj();
        key[2 * k] = (z.re * 1e6).round() as i64;
        key[2 * k + 1] = (z.im * 1e6).round() as i64;
    }
    key
}

/// Build the 24-element subspace Clifford group by tiling 0-3 phase-offset
/// pi/2 pulses (phases are multiples of pi/2).
pub fn build_clifford_group() -> Vec<SubspaceClifford> {
    let gen_phases =
        [0.0, std::f64::consts::FRAC_PI_2, std::f64::consts::PI, 3.0 * std::f64::consts::FRAC_PI_2];
    let mut seen = std::collections::HashSet::new();
    let mut group: Vec<SubspaceClifford> = Vec::new();
    let mut frontier: Vec<(Vec<f64>, M2)> = vec![(Vec::new(), M2::identity())];
    for _ in 0..4 {
        let mut next = Vec::new();
        for (word, mat) in &frontier {
            if seen.insert(canonical_key(mat)) {
                group.push(SubspaceClifford {
                    index: group.len(),
                    phases: word.clone(),
                    matrix: *mat,
                });
                for &phi in &gen_phases {
                    let mut w = word.clone();
                    w.push(phi);
                    next.push((w, generator_matrix(phi) * mat));
                }
            }
        }
        frontier = next;
    }
    group
}

/// Index of the group element equal to `m` up to global phase.
pub fn find_element(group: &[SubspaceClifford], m: &M2) -> Option<usize> {
    let key = canonical_key(m);
    group.iter().position(|g| canonical_key(&g.matrix) == key)
}

/// Inversion pulses for a sequence product: identity when the product maps
/// +Z back to +Z; otherwise the product's own word applied in reverse with
/// every pulse phase offset by pi (the negated-phase product gate).
pub fn inversion_word(group: &[SubspaceClifford], product: &M2) -> Result<Vec<f64>> {
    if product[(1, 0)].norm() < 1e-9 {
        return Ok(Vec::new());
    }
    let idx = find_element(group, product)
        .ok_or_else(|| Error::Invariant("sequence product left the Clifford group".into()))?;
    Ok(group[idx].phases.iter().rev().map(|&p| p + std::f64::consts::PI).collect())
}

/// The 12 tracked states: switch in the allow (S) or block (B) level, with
/// the input-output pair in {eg, gf, gg, ge, ee, ef}.
pub const STATE_LABELS: [&str; 12] =
    ["Seg", "Sgf", "Beg", "Bgf", "Sgg", "Sge", "See", "Sef", "Bgg", "Bge", "Bee", "Bef"];

const IO_LEVELS: [(usize, usize); 6] = [(1, 0), (0, 2), (0, 0), (0, 1), (1, 1), (1, 2)];

/// Prepared state (switch level, input level, output level) of a tracked row.
fn tracked_state_multi(row: usize, allow_switch: usize) -> [usize; 3] {
    let (s_is_allow, io_pos) = match row {
        0 | 1 => (true, row),
        2 | 3 => (false, row - 2),
        4..=7 => (true, row - 2),
        _ => (false, row - 6),
    };
    let s = if s_is_allow { allow_switch } else { 1 - allow_switch };
    let (i, o) = IO_LEVELS[io_pos];
    [s, i, o]
}

fn state_index(allow_switch: usize, multi: &[usize]) -> Option<usize> {
    let pos = IO_LEVELS.iter().position(|&x| x == (multi[1], multi[2]))?;
    let s_is_allow = multi[0] == allow_switch;
    match (pos, s_is_allow) {
        (0 | 1, true) => Some(pos),
        (0 | 1, false) => Some(2 + pos),
        (_, true) => Some(2 + pos),
        (_, false) => Some(6 + pos),
    }
}

/// Exact populations of the 12 tracked states from a density matrix on the
/// (switch, input, output) space.
pub fn tracked_populations(sim: &Simulator, allow_switch: usize, rho: &CMat) -> [f64; 12] {
    let mut out = [0.0; 12];
    for (b, p) in sim.populations_rho(rho).into_iter().enumerate() {
        let multi = index_to_multi(b, &sim.dims);
        if let Some(idx) = state_index(allow_switch, &multi) {
            out[idx] += p;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct RbConfig {
    pub depths: Vec<usize>,
    pub variations: usize,
    pub shots: u64,
    pub seed: u64,
    /// Fit only depths up to this value (populations are still collected).
    pub fit_depth_cap: Option<usize>,
}

impl Default for RbConfig {
    fn default() -> Self {
        Self {
            depths: vec![1, 5, 10, 20, 40, 80, 120, 160, 200],
            variations: 20,
            shots: 1000,
            seed: 1,
            fit_depth_cap: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RbDataset {
    pub pair_tag: String,
    pub interleaved: bool,
    pub depths: Vec<usize>,
    /// populations[depth_index][variation][tracked_state]
    pub populations: Vec<Vec<[f64; 12]>>,
    pub fit_depth_cap: Option<usize>,
}

impl RbDataset {
    fn stats(&self, f: impl Fn(&[f64; 12]) -> f64) -> Vec<(f64, f64, f64)> {
        self.depths
            .iter()
            .zip(self.populations.iter())
            .map(|(&d, vars)| {
                let vals: Vec<f64> = vars.iter().map(&f).collect();
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n.max(2.0);
                (d as f64, mean, (var / n).sqrt().max(1e-4))
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("pair,depth,variation,state,population\n");
        for (di, &depth) in self.depths.iter().enumerate() {
            for (vi, pops) in self.populations[di].iter().enumerate() {
                for (si, &p) in pops.iter().enumerate() {
                    out.push_str(&format!(
                        "{},{},{},{},{:.6}\n",
                        self.pair_tag, depth, vi, STATE_LABELS[si], p
                    ));
                }
            }
        }
        out
    }
}

/// Leakage fit p_sub = A + B lambda1^N.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LeakageFit {
    pub a: f64,
    pub b: f64,
    pub lambda1: f64,
    /// Photon loss per Clifford, (1 - A)(1 - lambda1).
    pub loss: f64,
    pub loss_ci95: f64,
    pub converged: bool,
}

/// Post-selected survival fit p_surv = C + D (lambda2 / lambda1)^N.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurvivalFit {
    pub c: f64,
    pub d: f64,
    pub lambda2: f64,
    /// Total error per Clifford, 1 - [(d-1) lambda2 + 1 - L] / d at d = 2.
    pub epsilon: f64,
    pub epsilon_ci95: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RbFitReport {
    pub a: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub loss: f64,
    pub loss_ci95: f64,
    pub epsilon: f64,
    pub epsilon_ci95: f64,
    pub depth_cap: Option<usize>,
}

impl RbFitReport {
    pub fn from_fits(leakage: &LeakageFit, survival: &SurvivalFit, cap: Option<usize>) -> Self {
        Self {
            a: leakage.a,
            lambda1: leakage.lambda1,
            lambda2: survival.lambda2,
            loss: leakage.loss,
            loss_ci95: leakage.loss_ci95,
            epsilon: survival.epsilon,
            epsilon_ci95: survival.epsilon_ci95,
            depth_cap: cap,
        }
    }
}

fn weighted_exp_fit(points: &[(f64, f64, f64)], starts: &[f64]) -> LmFit {
    let a0 = points.last().unwrap().1;
    let b0 = points[0].1 - a0;
    let mut best: Option<LmFit> = None;
    for &l0 in starts {
        let resid = |p: &[f64]| -> Vec<f64> {
            points
                .iter()
                .map(|&(n, y, sem)| (p[0] + p[1] * p[2].clamp(0.0, 1.0).powf(n) - y) / sem)
                .collect()
        };
        let fit = levenberg_marquardt(resid, &[a0, b0, l0], &LmOptions::default());
        if best.as_ref().map_or(true, |b| fit.ssr < b.ssr) {
            best = Some(fit);
        }
    }
    best.expect("at least one start")
}

/// Fit the subspace population decay and extract the loss per Clifford.
pub fn fit_leakage(dataset: &RbDataset) -> Result<LeakageFit> {
    let cap = dataset.fit_depth_cap.unwrap_or(usize::MAX) as f64;
    let points: Vec<(f64, f64, f64)> =
        dataset.stats(|p| p[0] + p[1]).into_iter().filter(|&(n, _, _)| n <= cap).collect();
    if points.len() < 4 {
        return Err(Error::FitNonConvergence("need at least 4 depths for the leakage fit".into()));
    }
    let fit = weighted_exp_fit(&points, &[0.9, 0.95, 0.99]);
    let (a, b, l1) = (fit.params[0], fit.params[1], fit.params[2].clamp(0.0, 1.0));
    let loss = (1.0 - a) * (1.0 - l1);
    let g = [-(1.0 - l1), -(1.0 - a)];
    let var = g[0] * g[0] * fit.covariance[(0, 0)]
        + g[1] * g[1] * fit.covariance[(2, 2)]
        + 2.0 * g[0] * g[1] * fit.covariance[(0, 2)];
    Ok(LeakageFit {
        a,
        b,
        lambda1: l1,
        loss,
        loss_ci95: 1.96 * var.max(0.0).sqrt(),
        converged: fit.converged,
    })
}

/// Fit the post-selected survival decay and extract the total error per
/// Clifford (subspace dimension 2), given the leakage fit.
pub fn fit_survival(dataset: &RbDataset, leakage: &LeakageFit) -> Result<SurvivalFit> {
    let cap = dataset.fit_depth_cap.unwrap_or(usize::MAX) as f64;
    let points: Vec<(f64, f64, f64)> = dataset
        .stats(|p| p[0] / (p[0] + p[1]).max(1e-12))
        .into_iter()
        .filter(|&(n, _, _)| n <= cap)
        .collect();
    if points.len() < 3 {
        return Err(Error::FitNonConvergence("need at least 3 depths for the survival fit".into()));
    }
    let l1 = leakage.lambda1;
    // the fitted ratio r = lambda2 / lambda1; with negligible leakage this
    // degenerates to a plain exponential in lambda2
    let fit = weighted_exp_fit(&points, &[0.95, 0.99, 0.999]);
    let r = fit.params[2].clamp(0.0, 1.0);
    let lambda2 = if l1 > 1e-6 { (r * l1).min(1.0) } else { r };
    let epsilon = 1.0 - 0.5 * (lambda2 + 1.0 - leakage.loss);
    let dldr = if l1 > 1e-6 { l1 } else { 1.0 };
    let var_r = fit.covariance[(2, 2)].max(0.0) * (0.5 * dldr).powi(2);
    let var_l = 0.25 * (leakage.loss_ci95 / 1.96).powi(2);
    Ok(SurvivalFit {
        c: fit.params[0],
        d: fit.params[1],
        lambda2,
        epsilon,
        epsilon_ci95: 1.96 * (var_r + var_l).sqrt(),
        converged: fit.converged,
    })
}

/// Per-gate error and loss of the interleaved gate:
/// (eps_X, eps_X CI, L_X, L_X CI).
pub fn interleaved_error(
    reference: (&LeakageFit, &SurvivalFit),
    interleaved: (&LeakageFit, &SurvivalFit),
) -> Result<(f64, f64, f64, f64)> {
    let (l_ref, e_ref) = (reference.0.loss, reference.1.epsilon);
    let (l_int, e_int) = (interleaved.0.loss, interleaved.1.epsilon);
    if e_ref >= 1.0 {
        return Err(Error::FitNonConvergence("reference error per Clifford is >= 1".into()));
    }
    let eps_x = 1.0 - (1.0 - e_int) / (1.0 - e_ref);
    let loss_x = 1.0 - (1.0 - l_int) / (1.0 - l_ref);
    let de = |ci: f64| ci / 1.96;
    let var_e = (de(interleaved.1.epsilon_ci95) / (1.0 - e_ref)).powi(2)
        + (de(reference.1.epsilon_ci95) * (1.0 - e_int) / (1.0 - e_ref).powi(2)).powi(2);
    let var_l = (de(interleaved.0.loss_ci95) / (1.0 - l_ref)).powi(2)
        + (de(reference.0.loss_ci95) * (1.0 - l_int) / (1.0 - l_ref).powi(2)).powi(2);
    Ok((eps_x, 1.96 * var_e.sqrt(), loss_x, 1.96 * var_l.sqrt()))
}

/// The four generator channels (pulse phases 0, pi/2, pi, 3pi/2) on the
/// reduced (switch, input, output) subsystem.
pub struct GateSet {
    pub gens: [Channel; 4],
    pub allow_switch: usize,
}

impl GateSet {
    /// Compile the registry's sideband gate for `pair` into a channel set.
    pub fn compile(
        full: &Simulator,
        device: &DeviceConfig,
        registry: &CalibrationRegistry,
        pair: IoPair,
        n_index: u32,
        noisy: bool,
        opts: &EvolveOptions,
    ) -> Result<(GateSet, Simulator)> {
        let gate = registry.get(&format!("sqisw_{}_n{}", pair.tag(), n_index))?;
        let keep = [
            (full.site_of(Role::Switch)?, 2),
            (full.site_of(Role::Input)?, usize::MAX),
            (full.site_of(pair.output())?, usize::MAX),
        ];
        let mut sched = PulseSchedule::new();
        gate.emit(&mut sched, 0.0);
        let (rsim, _) = full.restrict_capped(&keep)?;
        let collapse = if noisy { Some(CollapseSet::for_simulator(&rsim, device)?) } else { None };
        let base = full.compile_channel_capped(&sched, &keep, collapse.as_ref(), opts)?;
        Ok((GateSet::from_base(base, pair.allow_switch()), rsim))
    }

    /// Build the phase quadrants from a base (phase-0) channel.
    pub fn from_base(base: Channel, allow_switch: usize) -> GateSet {
        let gens = [
            base.clone(),
            base.phase_variant(std::f64::consts::FRAC_PI_2),
            base.phase_variant(std::f64::consts::PI),
            base.phase_variant(3.0 * std::f64::consts::FRAC_PI_2),
        ];
        GateSet { gens, allow_switch }
    }

    fn channel_for_phase(&self, phase: f64) -> Channel {
        let quadrant = ((phase / std::f64::consts::FRAC_PI_2).round() as i64).rem_euclid(4) as usize;
        let residue = phase - (phase / std::f64::consts::FRAC_PI_2).round() * std::f64::consts::FRAC_PI_2;
        if residue.abs() < 1e-9 {
            self.gens[quadrant].clone()
        } else {
            self.gens[0].phase_variant(phase)
        }
    }
}

/// Sample one RB sequence: random Clifford indices plus the inversion word.
pub fn sample_sequence(
    group: &[SubspaceClifford],
    depth: usize,
    interleave: bool,
    rng: &mut impl Rng,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut indices = Vec::with_capacity(depth);
    let mut product = M2::identity();
    for _ in 0..depth {
        let idx = rng.random_range(0..group.len());
        indices.push(idx);
        product = group[idx].matrix * product;
        if interleave {
            // X_pi^sub: two pi/2 pulses at phase 0
            product = generator_matrix(0.0) * generator_matrix(0.0) * product;
        }
    }
    let inversion = inversion_word(group, &product)?;
    Ok((indices, inversion))
}

/// Run reference or interleaved RB: simulate every sequence on the compiled
/// channels, apply the two-step readout and rectangular correction, and
/// return 12-state populations per depth and variation.
pub fn run_rb(
    rsim: &Simulator,
    gates: &GateSet,
    group: &[SubspaceClifford],
    config: &RbConfig,
    interleave: bool,
    readout: &ReadoutModel,
    pair_tag: &str,
) -> Result<RbDataset> {
    let confusion = measure_rectangular_confusion(rsim, gates.allow_switch, readout)?;
    let mut eg = vec![0usize; rsim.dims.len()];
    eg[0] = gates.allow_switch;
    eg[1] = 1;
    let rho0 = crate::linalg::projector(&rsim.basis_state(&eg));
    use rayon::prelude::*;
    let jobs: Vec<(usize, usize)> = config
        .depths
        .iter()
        .enumerate()
        .flat_map(|(di, _)| (0..config.variations).map(move |vi| (di, vi)))
        .collect();
    let results: Vec<(usize, usize, [f64; 12])> = jobs
        .par_iter()
        .map(|&(di, vi)| {
            let depth = config.depths[di];
            let mut rng = crate::rng::stream_rng(
                config.seed,
                ((di as u64) << 32) | ((vi as u64) << 1) | u64::from(interleave),
            );
            let (indices, inversion) = sample_sequence(group, depth, interleave, &mut rng)?;
            let mut rho = rho0.clone();
            for &idx in &indices {
                for &p in &group[idx].phases {
                    rho = gates.channel_for_phase(p).apply_rho(&rho);
                }
                if interleave {
                    rho = gates.gens[0].apply_rho(&rho);
                    rho = gates.gens[0].apply_rho(&rho);
                }
            }
            for &p in &inversion {
                rho = gates.channel_for_phase(p).apply_rho(&rho);
            }
            let freqs = two_step_readout(rsim, &rho, readout, config.shots, &mut rng)?;
            let corrected = correct_counts_rectangular(&confusion, &freqs)?;
            let mut arr = [0.0; 12];
            arr.copy_from_slice(corrected.as_slice());
            Ok((di, vi, arr))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut populations = vec![vec![[0.0; 12]; config.variations]; config.depths.len()];
    for (di, vi, arr) in results {
        populations[di][vi] = arr;
    }
    Ok(RbDataset {
        pair_tag: pair_tag.to_string(),
        interleaved: interleave,
        depths: config.depths.clone(),
        populations,
        fit_depth_cap: config.fit_depth_cap,
    })
}

/// Two-step readout of one final state: all qubits in g-e discrimination,
/// then the output switched to e-f discrimination; returns the 8+8
/// normalized bin frequencies.
fn two_step_readout(
    rsim: &Simulator,
    rho: &CMat,
    readout: &ReadoutModel,
    shots: u64,
    rng: &mut impl Rng,
) -> Result<DVector<f64>> {
    let mut out = DVector::zeros(16);
    for (si, setting) in [GE3, GE2_EF].iter().enumerate() {
        let probs = bin_probabilities(rsim, &rsim.populations_rho(rho), readout, setting)?;
        let rec = sample_counts(&probs, shots, rng, "rb");
        for (bi, f) in rec.frequencies().into_iter().enumerate() {
            out[8 * si + bi] = f;
        }
    }
    Ok(out)
}

/// Rectangular confusion matrix: rows are the 12 prepared tracked states,
/// columns the 8+8 bins of the two readout settings.
pub fn measure_rectangular_confusion(
    rsim: &Simulator,
    allow_switch: usize,
    readout: &ReadoutModel,
) -> Result<DMatrix<f64>> {
    let mut m = DMatrix::zeros(12, 16);
    for row in 0..12 {
        let multi = tracked_state_multi(row, allow_switch);
        let state = rsim.basis_state(&multi);
        let pops = rsim.populations(&state);
        for (si, setting) in [GE3, GE2_EF].iter().enumerate() {
            let probs = bin_probabilities(rsim, &pops, readout, setting)?;
            for (bi, p) in probs.into_iter().enumerate() {
                m[(row, 8 * si + bi)] = p;
            }
        }
    }
    Ok(m)
}

/// Constrained least squares: the 12-state population vector on the
/// probability simplex that best explains 16 observed bin frequencies.
pub fn correct_counts_rectangular(
    m: &DMatrix<f64>,
    counts16: &DVector<f64>,
) -> Result<DVector<f64>> {
    if m.nrows() != 12 || m.ncols() != 16 || counts16.len() != 16 {
        return Err(Error::Dimension(
            "rectangular correction needs a 12x16 matrix and 16 bins".into(),
        ));
    }
    let svd = m.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin < 1e-10 * smax {
        return Err(Error::Tomography("confusion matrix is rank-deficient".into()));
    }
    let a = m.transpose();
    Ok(crate::fit::min_quadratic_on_simplex(&a, counts16, 30000))
}

/// Blocking-state error amplification curve.
pub struct AmplificationCurve {
    pub n_values: Vec<usize>,
    /// Output population (e plus f) with the switch blocking.
    pub blocked_transfer: Vec<f64>,
    /// Logical |Sgf> population with the switch allowing (control).
    pub control_transfer: Vec<f64>,
    pub per_gate_transfer: f64,
}

/// Apply X_pi^sub up to `n_max` times with the switch prepared to block,
/// measuring the unwanted output population; the allow-state control shows
/// the (decaying, under noise) swap oscillations.
pub fn error_amplification_blocking(
    rsim: &Simulator,
    gates: &GateSet,
    n_max: usize,
) -> Result<AmplificationCurve> {
    let xpi = gates.gens[0].then(&gates.gens[0])?;
    let mut blocked = vec![0usize; rsim.dims.len()];
    blocked[0] = 1 - gates.allow_switch;
    blocked[1] = 1;
    let mut allow = blocked.clone();
    allow[0] = gates.allow_switch;
    let mut rho_b = crate::linalg::projector(&rsim.basis_state(&blocked));
    let mut rho_a = crate::linalg::projector(&rsim.basis_state(&allow));
    let mut n_values = Vec::new();
    let mut blocked_transfer = Vec::new();
    let mut control_transfer = Vec::new();
    for n in 1..=n_max {
        rho_b = xpi.apply_rho(&rho_b);
        rho_a = xpi.apply_rho(&rho_a);
        n_values.push(n);
        let pops_b = rsim.populations_rho(&rho_b);
        let transfer: f64 = pops_b
            .iter()
            .enumerate()
            .filter(|(b, _)| {
                let m = index_to_multi(*b, &rsim.dims);
                m[0] == blocked[0] && m[2] >= 1
            })
            .map(|(_, &p)| p)
            .sum();
        blocked_transfer.push(transfer);
        let pops_a = rsim.populations_rho(&rho_a);
        let sgf: f64 = pops_a
            .iter()
            .enumerate()
            .filter(|(b, _)| {
                let m = index_to_multi(*b, &rsim.dims);
                m[0] == allow[0] && m[1] == 0 && m[2] == 2
            })
            .map(|(_, &p)| p)
            .sum();
        control_transfer.push(sgf);
    }
    let per_gate_transfer = blocked_transfer.last().copied().unwrap_or(0.0) / n_max as f64;
    Ok(AmplificationCurve { n_values, blocked_transfer, control_transfer, per_gate_transfer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn clifford_group_has_24_elements_with_short_words() {
        let group = build_clifford_group();
        assert_eq!(group.len(), 24);
        assert!(group.iter().all(|g| g.phases.len() <= 3));
        assert!(group[0].phases.is_empty());
    }

    #[test]
    fn clifford_group_closure_all_576_products() {
        let group = build_clifford_group();
        for a in &group {
            for b in &group {
                let prod = a.matrix * b.matrix;
                assert!(
                    find_element(&group, &prod).is_some(),
                    "product of {} and {} left the group",
                    a.index,
                    b.index
                );
            }
        }
    }

    #[test]
    fn clifford_group_has_inverses() {
        let group = build_clifford_group();
        for g in &group {
            let inv = g.matrix.adjoint();
            assert!(find_element(&group, &inv).is_some());
        }
    }

    #[test]
    fn inversion_word_restores_ground_state() {
        let group = build_clifford_group();
        let mut rng = crate::rng::stream_rng(11, 0);
        for depth in [1usize, 3, 10, 31] {
            let (indices, inversion) = sample_sequence(&group, depth, false, &mut rng).unwrap();
            let mut u = M2::identity();
            for &i in &indices {
                u = group[i].matrix * u;
            }
            for &p in &inversion {
                u = generator_matrix(p) * u;
            }
            assert!(u[(1, 0)].norm() < 1e-9, "depth {depth} did not invert");
        }
    }

    #[test]
    fn interleaved_error_formulas() {
        let lf = |loss: f64| LeakageFit {
            a: 0.0,
            b: 1.0,
            lambda1: 1.0 - loss,
            loss,
            loss_ci95: 0.001,
            converged: true,
        };
        let sf = |eps: f64, loss: f64| SurvivalFit {
            c: 0.5,
            d: 0.5,
            lambda2: 1.0 + loss - 2.0 * eps,
            epsilon: eps,
            epsilon_ci95: 0.001,
            converged: true,
        };
        // interleaving something identical to the reference: zero per-gate
        let (ex, _, lx, _) =
            interleaved_error((&lf(0.01), &sf(0.02, 0.01)), (&lf(0.01), &sf(0.02, 0.01))).unwrap();
        assert_abs_diff_eq!(ex, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(lx, 0.0, epsilon = 1e-12);
        // the published reference and per-swap errors are consistent:
        // eps_ref = 3.05% and eps_X = 2.24% imply eps_int = 5.22%
        let eps_int = 1.0 - (1.0 - 0.0224) * (1.0 - 0.0305);
        let (ex, _, _, _) = interleaved_error(
            (&lf(0.0188), &sf(0.0305, 0.0188)),
            (&lf(0.0188), &sf(eps_int, 0.0188)),
        )
        .unwrap();
        assert_abs_diff_eq!(ex, 0.0224, epsilon = 1e-10);
        assert!(interleaved_error((&lf(0.0), &sf(1.0, 0.0)), (&lf(0.0), &sf(0.5, 0.0))).is_err());
    }

    fn synthetic_dataset(a: f64, l1: f64, l2: f64, depths: &[usize]) -> RbDataset {
        let populations = depths
            .iter()
            .map(|&n| {
                let p_sub = a + (1.0 - a) * l1.powf(n as f64);
                let p_surv = 0.5 + 0.5 * (l2 / l1).powf(n as f64);
                let p_seg = p_sub * p_surv;
                let mut arr = [0.0; 12];
                arr[0] = p_seg;
                arr[1] = p_sub - p_seg;
                arr[4] = 1.0 - p_sub;
                (0..5).map(|_| arr).collect()
            })
            .collect();
        RbDataset {
            pair_tag: "synthetic".into(),
            interleaved: false,
            depths: depths.to_vec(),
            populations,
            fit_depth_cap: None,
        }
    }

    #[test]
    fn exact_exponential_leakage_fit() {
        let depths = [1, 5, 10, 20, 40, 80, 120, 160, 200];
        let ds = synthetic_dataset(0.0, 0.99, 0.98, &depths);
        let lf = fit_leakage(&ds).unwrap();
        assert_abs_diff_eq!(lf.loss, 0.01, epsilon = 1e-4);
        assert!(lf.a.abs() < 1e-4);
        let sf = fit_survival(&ds, &lf).unwrap();
        assert_abs_diff_eq!(sf.lambda2, 0.98, epsilon = 1e-4);
        assert_abs_diff_eq!(sf.epsilon, 1.0 - 0.5 * (0.98 + 1.0 - 0.01), epsilon = 1e-3);
    }

    #[test]
    fn injected_lambdas_recovered() {
        let depths = [1, 5, 10, 20, 40, 80, 120, 160, 200];
        for (l1, l2) in [(0.98, 0.97), (0.995, 0.99)] {
            let ds = synthetic_dataset(0.0, l1, l2, &depths);
            let lf = fit_leakage(&ds).unwrap();
            let sf = fit_survival(&ds, &lf).unwrap();
            assert!((lf.lambda1 - l1).abs() < 0.01, "lambda1 {} vs {}", lf.lambda1, l1);
            assert!((sf.lambda2 - l2).abs() < 0.01, "lambda2 {} vs {}", sf.lambda2, l2);
        }
    }

    #[test]
    fn rectangular_correction_forward_model_oracle() {
        let mut rng = crate::rng::stream_rng(5, 9);
        let mut m = DMatrix::zeros(12, 16);
        for r in 0..12 {
            let mut row_a = vec![0.0; 8];
            let mut row_b = vec![0.0; 8];
            for c in 0..8 {
                row_a[c] = if c == r % 8 { 0.85 } else { rng.random_range(0.0..0.02) };
                row_b[c] = if c == (r + 3) % 8 { 0.8 } else { rng.random_range(0.0..0.03) };
            }
            let sa: f64 = row_a.iter().sum();
            let sb: f64 = row_b.iter().sum();
            for c in 0..8 {
                m[(r, c)] = row_a[c] / sa;
                m[(r, 8 + c)] = row_b[c] / sb;
            }
        }
        let mut p_true = DVector::from_fn(12, |i, _| ((i * 7 + 3) % 11) as f64 + 0.5);
        p_true /= p_true.sum();
        let exact = m.transpose() * &p_true;
        let mut counts = DVector::zeros(16);
        for s in 0..2 {
            let probs: Vec<f64> = (0..8).map(|b| exact[8 * s + b]).collect();
            let rec = sample_counts(&probs, 1_000_000, &mut rng, "t");
            for (b, f) in rec.frequencies().into_iter().enumerate() {
                counts[8 * s + b] = f;
            }
        }
        let p = correct_counts_rectangular(&m, &counts).unwrap();
        for i in 0..12 {
            assert!((p[i] - p_true[i]).abs() < 0.005, "entry {i}: {} vs {}", p[i], p_true[i]);
        }
    }

    #[test]
    fn corrected_output_is_a_distribution_for_arbitrary_counts() {
        let mut m = DMatrix::zeros(12, 16);
        for r in 0..12 {
            m[(r, r)] = 1.0;
            m[(r, 8 + (r % 8))] = 1.0;
        }
        let counts = DVector::from_fn(16, |i, _| if i == 3 { 1.4 } else { -0.02 });
        let p = correct_counts_rectangular(&m, &counts).unwrap();
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        assert!(p.iter().all(|&x| (-1e-12..=1.0 + 1e-12).contains(&x)));
    }

    #[test]
    fn tracked_state_row_round_trip() {
        for allow in [0usize, 1] {
            for row in 0..12 {
                let multi = tracked_state_multi(row, allow);
                assert_eq!(state_index(allow, &multi), Some(row));
            }
        }
    }
}
