//! Projective measurement in the dressed computational basis plus a
//! classical per-qubit assignment-error model.
//!
//! Readout is two-valued per qubit: a discrimination mode bins each shot
//! into {g} vs {e,f} (g-e mode) or {g,e} vs {f} (e-f mode). Assignment
//! errors act as row-stochastic 2x2 matrices per qubit after binning.

use crate::device::Role;
use crate::dynamics::Simulator;
use crate::error::{Error, Result};
use crate::linalg::{index_to_multi, CMat, CVec};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscriminationMode {
    /// Bin {g} vs {e,f}.
    Ge,
    /// Bin {g,e} vs {f}.
    Ef,
}

/// Per-qubit assignment matrices and thermal populations. The assignment
/// numbers are synthetic defaults: the measured device's assignment
/// fidelities are not published, so these are placeholders with realistic
/// magnitudes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReadoutModel {
    /// Row-stochastic [true][measured] matrices for g-e discrimination.
    pub assignment_ge: BTreeMap<Role, [[f64; 2]; 2]>,
    /// Row-stochastic matrices for e-f discrimination.
    pub assignment_ef: BTreeMap<Role, [[f64; 2]; 2]>,
    /// Probability of starting in |e> per qubit (default 0).
    pub thermal_e: BTreeMap<Role, f64>,
}

impl ReadoutModel {
    pub fn ideal() -> Self {
        let mut m = ReadoutModel {
            assignment_ge: BTreeMap::new(),
            assignment_ef: BTreeMap::new(),
            thermal_e: BTreeMap::new(),
        };
        for role in Role::ALL {
            m.assignment_ge.insert(role, [[1.0, 0.0], [0.0, 1.0]]);
            m.assignment_ef.insert(role, [[1.0, 0.0], [0.0, 1.0]]);
            m.thermal_e.insert(role, 0.0);
        }
        m
    }

    /// Synthetic assignment errors of realistic magnitude (not measured
    /// values; the paper does not publish assignment fidelities).
    pub fn synthetic_default() -> Self {
        let mut m = Self::ideal();
        for role in Role::ALL {
            m.assignment_ge.insert(role, [[0.99, 0.01], [0.04, 0.96]]);
            m.assignment_ef.insert(role, [[0.98, 0.02], [0.05, 0.95]]);
        }
        m
    }

    pub fn validate(&self) -> Result<()> {
        for table in [&self.assignment_ge, &self.assignment_ef] {
            for (role, m) in table {
                for row in m {
                    if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                        return Err(Error::Config(format!("{role}: assignment entries must be in [0,1]")));
                    }
                    if (row[0] + row[1] - 1.0).abs() > 1e-9 {
                        return Err(Error::Config(format!("{role}: assignment rows must sum to 1")));
                    }
                }
            }
        }
        for (role, &p) in &self.thermal_e {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{role}: thermal population must be in [0,1]")));
            }
        }
        Ok(())
    }

    fn assignment(&self, role: Role, mode: DiscriminationMode) -> [[f64; 2]; 2] {
        let table = match mode {
            DiscriminationMode::Ge => &self.assignment_ge,
            DiscriminationMode::Ef => &self.assignment_ef,
        };
        *table.get(&role).unwrap_or(&[[1.0, 0.0], [0.0, 1.0]])
    }
}

/// Binned counts for one measurement setting.
#[derive(Debug, Clone, PartialEq)]
pub struct ShotRecord {
    pub setting: String,
    /// Joint-bin counts, first measured qubit most significant.
    pub counts: Vec<u64>,
}

impl ShotRecord {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn frequencies(&self) -> Vec<f64> {
        let n = self.total().max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }
}

/// Exact joint bin probabilities (including assignment errors) for a set of
/// measured qubits; `measured` lists (site, mode) in bin-significance order.
pub fn bin_probabilities(
    sim: &Simulator,
    diag_pops: &[f64],
    readout: &ReadoutModel,
    measured: &[(usize, DiscriminationMode)],
) -> Result<Vec<f64>> {
    readout.validate()?;
    for &(site, mode) in measured {
        if site >= sim.dims.len() {
            return Err(Error::Dimension(format!("no site {site}")));
        }
        if mode == DiscriminationMode::Ef && sim.dims[site] < 3 {
            return Err(Error::Config(format!(
                "e-f discrimination requested on 2-level qubit {}",
                sim.roles[site]
            )));
        }
    }
    let m = measured.len();
    let nbins = 1usize << m;
    let mut true_bins = vec![0.0f64; nbins];
    for (label, &p) in diag_pops.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let multi = index_to_multi(label, &sim.dims);
        let mut bin = 0usize;
        for &(site, mode) in measured {
            let excited = match mode {
                DiscriminationMode::Ge => multi[site] >= 1,
                DiscriminationMode::Ef => multi[site] >= 2,
            };
            bin = (bin << 1) | usize::from(excited);
        }
        true_bins[bin] += p;
    }
    // assignment corruption, one qubit at a time
    let mut probs = true_bins;
    for (qi, &(site, mode)) in measured.iter().enumerate() {
        let a = readout.assignment(sim.roles[site], mode);
        let shift = m - 1 - qi;
        let mut next = vec![0.0f64; nbins];
        for (bin, &p) in probs.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let b = (bin >> shift) & 1;
            for meas in 0..2 {
                let mut nb = bin & !(1 << shift);
                nb |= meas << shift;
                next[nb] += p * a[b][meas];
            }
        }
        probs = next;
    }
    Ok(probs)
}

/// Sample `n_shots` multinomial draws from the exact bin probabilities of a
/// pure state.
pub fn measure_shots(
    sim: &Simulator,
    state: &CVec,
    readout: &ReadoutModel,
    measured: &[(usize, DiscriminationMode)],
    n_shots: u64,
    rng: &mut impl Rng,
    setting: &str,
) -> Result<ShotRecord> {
    let pops = sim.populations(state);
    let probs = bin_probabilities(sim, &pops, readout, measured)?;
    Ok(sample_counts(&probs, n_shots, rng, setting))
}

/// As [`measure_shots`] but for a density matrix.
pub fn measure_shots_rho(
    sim: &Simulator,
    rho: &CMat,
    readout: &ReadoutModel,
    measured: &[(usize, DiscriminationMode)],
    n_shots: u64,
    rng: &mut impl Rng,
    setting: &str,
) -> Result<ShotRecord> {
    let pops = sim.populations_rho(rho);
    let probs = bin_probabilities(sim, &pops, readout, measured)?;
    Ok(sample_counts(&probs, n_shots, rng, setting))
}

pub fn sample_counts(probs: &[f64], n_shots: u64, rng: &mut impl Rng, setting: &str) -> ShotRecord {
    if n_shots == 0 {
        return ShotRecord { setting: setting.to_string(), counts: vec![0; probs.len()] };
    }
    let mut cdf = Vec::with_capacity(probs.len());
    let mut acc = 0.0;
    for &p in probs {
        acc += p.max(0.0);
        cdf.push(acc);
    }
    let total = acc.max(1e-300);
    let mut counts = vec![0u64; probs.len()];
    for _ in 0..n_shots {
        let x: f64 = rng.random::<f64>() * total;
        let idx = cdf.partition_point(|&v| v < x).min(probs.len() - 1);
        counts[idx] += 1;
    }
    ShotRecord { setting: setting.to_string(), counts }
}

/// Write records as `setting,bin,count` CSV.
pub fn shots_to_csv(records: &[ShotRecord]) -> String {
    let mut out = String::from("setting,bin,count\n");
    for r in records {
        for (bin, &count) in r.counts.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", r.setting, bin, count));
        }
    }
    out
}

/// Parse `setting,bin,count` CSV back into records (bins must be dense per
/// setting, in order).
pub fn shots_from_csv(text: &str) -> Result<Vec<ShotRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "setting,bin,count" => {}
        _ => return Err(Error::Config("shot CSV must start with 'setting,bin,count'".into())),
    }
    let mut records: Vec<ShotRecord> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, ',');
        let (setting, bin, count) = match (parts.next(), parts.next(), parts.next()) {
            (Some(s), Some(b), Some(c)) => (s, b, c),
            _ => return Err(Error::Config(format!("line {}: expected 3 fields", lineno + 2))),
        };
        let bin: usize = bin
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("line {}: bad bin index", lineno + 2)))?;
        let count: u64 = count
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("line {}: bad count", lineno + 2)))?;
        match records.last_mut() {
            Some(r) if r.setting == setting => {
                if bin != r.counts.len() {
                    return Err(Error::Config(format!(
                        "line {}: bins of setting '{}' must be dense and ordered",
                        lineno + 2,
                        setting
                    )));
                }
                r.counts.push(count);
            }
            _ => {
                if bin != 0 {
                    return Err(Error::Config(format!(
                        "line {}: new setting must start at bin 0",
                        lineno + 2
                    )));
                }
                records.push(ShotRecord { setting: setting.to_string(), counts: vec![count] });
            }
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::{CouplingSpec, DeviceConfig, TransmonSpec};
    use crate::ghz;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;

    fn sim2q() -> Simulator {
        let cfg = DeviceConfig {
            transmons: vec![
                TransmonSpec {
                    label: Role::Switch,
                    omega_bare: ghz(4.1),
                    alpha_bare: ghz(-0.2),
                    levels: 3,
                    t1_ge: 1e4,
                    t1_ef: None,
                    t2e_ge: 1e4,
                    t2e_ef: None,
                },
                TransmonSpec {
                    label: Role::Output1,
                    omega_bare: ghz(4.7),
                    alpha_bare: ghz(-0.19),
                    levels: 3,
                    t1_ge: 1e4,
                    t1_ef: None,
                    t2e_ge: 1e4,
                    t2e_ef: None,
                },
            ],
            couplings: CouplingSpec { g: DMatrix::zeros(2, 2) },
        };
        Simulator::from_device(&cfg).unwrap()
    }

    #[test]
    fn ideal_readout_puts_all_counts_in_one_bin() {
        let sim = sim2q();
        let state = sim.basis_state(&[0, 0]);
        let mut rng = crate::rng::stream_rng(1, 0);
        let rec = measure_shots(
            &sim,
            &state,
            &ReadoutModel::ideal(),
            &[(0, DiscriminationMode::Ge), (1, DiscriminationMode::Ge)],
            1000,
            &mut rng,
            "zz",
        )
        .unwrap();
        assert_eq!(rec.counts, vec![1000, 0, 0, 0]);
    }

    #[test]
    fn assignment_error_fraction_matches_binomial_oracle() {
        let sim = sim2q();
        let mut readout = ReadoutModel::ideal();
        readout.assignment_ge.insert(Role::Switch, [[0.98, 0.02], [0.05, 0.95]]);
        let state = sim.basis_state(&[0, 0]);
        let mut rng = crate::rng::stream_rng(7, 3);
        let rec = measure_shots(
            &sim,
            &state,
            &readout,
            &[(0, DiscriminationMode::Ge)],
            1_000_000,
            &mut rng,
            "z",
        )
        .unwrap();
        let frac_e = rec.counts[1] as f64 / rec.total() as f64;
        assert_abs_diff_eq!(frac_e, 0.02, epsilon = 1e-3);
    }

    #[test]
    fn f_level_bins_by_mode() {
        let sim = sim2q();
        let state = sim.basis_state(&[0, 2]); // output in |f>
        let p_ge = bin_probabilities(
            &sim,
            &sim.populations(&state),
            &ReadoutModel::ideal(),
            &[(1, DiscriminationMode::Ge)],
        )
        .unwrap();
        assert_abs_diff_eq!(p_ge[1], 1.0, epsilon = 1e-12); // binned with e
        let p_ef = bin_probabilities(
            &sim,
            &sim.populations(&state),
            &ReadoutModel::ideal(),
            &[(1, DiscriminationMode::Ef)],
        )
        .unwrap();
        assert_abs_diff_eq!(p_ef[1], 1.0, epsilon = 1e-12); // binned as f
        // |e> in ef mode goes to the low bin
        let e_state = sim.basis_state(&[0, 1]);
        let p = bin_probabilities(
            &sim,
            &sim.populations(&e_state),
            &ReadoutModel::ideal(),
            &[(1, DiscriminationMode::Ef)],
        )
        .unwrap();
        assert_abs_diff_eq!(p[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ef_mode_on_two_level_qubit_is_an_error() {
        let cfg = DeviceConfig {
            transmons: vec![TransmonSpec {
                label: Role::Switch,
                omega_bare: ghz(4.0),
                alpha_bare: ghz(-0.2),
                levels: 2,
                t1_ge: 1e4,
                t1_ef: None,
                t2e_ge: 1e4,
                t2e_ef: None,
            }],
            couplings: CouplingSpec { g: DMatrix::zeros(1, 1) },
        };
        let sim = Simulator::from_device(&cfg).unwrap();
        let state = sim.ground_state();
        let r = bin_probabilities(
            &sim,
            &sim.populations(&state),
            &ReadoutModel::ideal(),
            &[(0, DiscriminationMode::Ef)],
        );
        assert!(r.is_err());
    }

    #[test]
    fn shots_are_deterministic_under_fixed_seed() {
        let sim = sim2q();
        let state =
            (sim.basis_state(&[0, 0]) + sim.basis_state(&[1, 1])) / crate::linalg::c(2.0f64.sqrt());
        let run = || {
            let mut rng = crate::rng::stream_rng(99, 5);
            measure_shots(
                &sim,
                &state,
                &ReadoutModel::synthetic_default(),
                &[(0, DiscriminationMode::Ge), (1, DiscriminationMode::Ge)],
                5000,
                &mut rng,
                "zz",
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn csv_round_trip_and_validation() {
        let records = vec![
            ShotRecord { setting: "xx".into(), counts: vec![10, 20, 30, 40] },
            ShotRecord { setting: "zy".into(), counts: vec![99, 1] },
        ];
        let text = shots_to_csv(&records);
        let back = shots_from_csv(&text).unwrap();
        assert_eq!(records, back);
        assert!(shots_from_csv("bogus\n1,2,3").is_err());
        assert!(shots_from_csv("setting,bin,count\nxx,1,5\n").is_err());
    }

    #[test]
    fn invalid_assignment_matrix_is_rejected() {
        let mut m = ReadoutModel::ideal();
        m.assignment_ge.insert(Role::Input, [[0.9, 0.2], [0.0, 1.0]]);
        assert!(m.validate().is_err());
    }
}
