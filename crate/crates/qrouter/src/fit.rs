//! Small nonlinear/linear fitting toolbox: Nelder-Mead, finite-difference
//! Levenberg-Marquardt with parameter covariance, polynomial least squares,
//! Gaussian peak and sinusoid fits, and simplex-constrained least squares.
//!
//! These routines back every calibration and decay fit in the crate, so they
//! favor robustness over speed; all problems here have at most a dozen
//! parameters.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct LmOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub fd_step: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self { max_iter: 200, tol: 1e-12, fd_step: 1e-7 }
    }
}

#[derive(Debug, Clone)]
pub struct LmFit {
    pub params: Vec<f64>,
    /// Sum of squared residuals at the solution.
    pub ssr: f64,
    /// 95% confidence half-widths per parameter (normal approximation from
    /// the residual covariance); zero when the problem has no redundancy.
    pub ci95: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
}

fn jacobian_fd<F: Fn(&[f64]) -> Vec<f64>>(f: &F, p: &[f64], r0: &[f64], step: f64) -> DMatrix<f64> {
    let n = r0.len();
    let m = p.len();
    let mut jac = DMatrix::zeros(n, m);
    let mut pw = p.to_vec();
    for j in 0..m {
        let h = step * p[j].abs().max(1.0);
        pw[j] = p[j] + h;
        let rp = f(&pw);
        pw[j] = p[j];
        for i in 0..n {
            jac[(i, j)] = (rp[i] - r0[i]) / h;
        }
    }
    jac
}

/// Levenberg-Marquardt on a residual vector, finite-difference Jacobian.
pub fn levenberg_marquardt<F: Fn(&[f64]) -> Vec<f64>>(f: F, p0: &[f64], opts: &LmOptions) -> LmFit {
    let mut p = p0.to_vec();
    let mut r = f(&p);
    let mut ssr: f64 = r.iter().map(|x| x * x).sum();
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iters = 0;
    for it in 0..opts.max_iter {
        iters = it + 1;
        let jac = jacobian_fd(&f, &p, &r, opts.fd_step);
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * DVector::from_column_slice(&r);
        let mut improved = false;
        for _ in 0..20 {
            let mut a = jtj.clone();
            for k in 0..p.len() {
                a[(k, k)] += lambda * (jtj[(k, k)].abs().max(1e-12));
            }
            let Some(step) = a.lu().solve(&jtr) else {
                lambda *= 10.0;
                continue;
            };
            let cand: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a - b).collect();
            let rc = f(&cand);
            let ssr_c: f64 = rc.iter().map(|x| x * x).sum();
            if ssr_c < ssr {
                let rel = (ssr - ssr_c) / ssr.max(1e-300);
                p = cand;
                r = rc;
                ssr = ssr_c;
                lambda = (lambda * 0.3).max(1e-12);
                improved = true;
                if rel < opts.tol {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if converged || !improved {
            if !improved && ssr.is_finite() {
                converged = true; // stalled at a (local) minimum
            }
            break;
        }
    }
    // covariance from the final Jacobian
    let jac = jacobian_fd(&f, &p, &r, opts.fd_step);
    let jtj = jac.transpose() * &jac;
    let dof = r.len().saturating_sub(p.len()).max(1) as f64;
    let sigma2 = ssr / dof;
    let cov = match jtj.clone().try_inverse() {
        Some(inv) => inv * sigma2,
        None => DMatrix::zeros(p.len(), p.len()),
    };
    let ci95 = (0..p.len()).map(|k| 1.96 * cov[(k, k)].max(0.0).sqrt()).collect();
    LmFit { params: p, ssr, ci95, covariance: cov, converged, iterations: iters }
}

#[derive(Debug, Clone)]
pub struct NmOptions {
    pub max_iter: usize,
    pub tol: f64,
    /// Initial simplex displacement per coordinate (absolute).
    pub initial_step: Vec<f64>,
}

/// Nelder-Mead simplex minimization (adaptive coefficients).
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(mut f: F, p0: &[f64], opts: &NmOptions) -> (Vec<f64>, f64, bool) {
    let n = p0.len();
    let (alpha, beta, gamma, delta) = (1.0, 1.0 + 2.0 / n as f64, 0.75 - 0.5 / n as f64, 1.0 - 1.0 / n as f64);
    let mut simplex: Vec<Vec<f64>> = vec![p0.to_vec()];
    for k in 0..n {
        let mut v = p0.to_vec();
        v[k] += opts.initial_step.get(k).copied().unwrap_or(0.1);
        simplex.push(v);
    }
    let mut fv: Vec<f64> = simplex.iter().map(|v| f(v)).collect();
    let mut converged = false;
    for _ in 0..opts.max_iter {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| fv[a].total_cmp(&fv[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        fv = order.iter().map(|&i| fv[i]).collect();
        if (fv[n] - fv[0]).abs() <= opts.tol * (1.0 + fv[0].abs()) {
            converged = true;
            break;
        }
        let centroid: Vec<f64> =
            (0..n).map(|k| simplex[..n].iter().map(|v| v[k]).sum::<f64>() / n as f64).collect();
        let at = |t: f64| -> Vec<f64> {
            (0..n).map(|k| centroid[k] + t * (simplex[n][k] - centroid[k])).collect()
        };
        let xr = at(-alpha);
        let fr = f(&xr);
        if fr < fv[0] {
            let xe = at(-alpha * beta);
            let fe = f(&xe);
            if fe < fr {
                simplex[n] = xe;
                fv[n] = fe;
            } else {
                simplex[n] = xr;
                fv[n] = fr;
            }
        } else if fr < fv[n - 1] {
            simplex[n] = xr;
            fv[n] = fr;
        } else {
            let (xc, fc) = if fr < fv[n] {
                let xc = at(-alpha * gamma);
                let fc = f(&xc);
                (xc, fc)
            } else {
                let xc = at(gamma);
                let fc = f(&xc);
                (xc, fc)
            };
            if fc < fv[n].min(fr) {
                simplex[n] = xc;
                fv[n] = fc;
            } else {
                // shrink toward the best vertex
                for i in 1..=n {
                    for k in 0..n {
                        simplex[i][k] = simplex[0][k] + delta * (simplex[i][k] - simplex[0][k]);
                    }
                    fv[i] = f(&simplex[i]);
                }
            }
        }
    }
    let best = fv.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap();
    (simplex[best].clone(), fv[best], converged)
}

/// Least-squares polynomial fit; returns coefficients lowest order first.
pub fn polyfit(x: &[f64], y: &[f64], degree: usize) -> Option<Vec<f64>> {
    let n = x.len();
    if n < degree + 1 {
        return None;
    }
    let a = DMatrix::from_fn(n, degree + 1, |i, j| x[i].powi(j as i32));
    let b = DVector::from_column_slice(y);
    let svd = a.svd(true, true);
    if svd.singular_values.iter().any(|&s| s < 1e-12 * svd.singular_values.max()) {
        return None;
    }
    svd.solve(&b, 1e-12).ok().map(|v| v.as_slice().to_vec())
}

pub fn polyval(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

#[derive(Debug, Clone)]
pub struct GaussianPeak {
    pub center: f64,
    pub sigma: f64,
    pub amplitude: f64,
    pub offset: f64,
    pub ssr: f64,
    pub converged: bool,
}

/// Fit `y = offset + amplitude * exp(-(x-center)^2 / (2 sigma^2))`.
pub fn fit_gaussian_peak(x: &[f64], y: &[f64]) -> Option<GaussianPeak> {
    if x.len() < 4 {
        return None;
    }
    let (imax, &ymax) = y.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1))?;
    let ymin = y.iter().cloned().fold(f64::INFINITY, f64::min);
    let span = x.last()? - x.first()?;
    let p0 = [x[imax], span.abs() / 8.0, ymax - ymin, ymin];
    let resid = |p: &[f64]| -> Vec<f64> {
        x.iter()
            .zip(y.iter())
            .map(|(&xi, &yi)| {
                let d = (xi - p[0]) / p[1];
                p[3] + p[2] * (-0.5 * d * d).exp() - yi
            })
            .collect()
    };
    let fit = levenberg_marquardt(resid, &p0, &LmOptions::default());
    Some(GaussianPeak {
        center: fit.params[0],
        sigma: fit.params[1].abs(),
        amplitude: fit.params[2],
        offset: fit.params[3],
        ssr: fit.ssr,
        converged: fit.converged,
    })
}

#[derive(Debug, Clone)]
pub struct Sinusoid {
    pub offset: f64,
    pub amplitude: f64,
    /// Ordinary (not angular) frequency in cycles per x-unit.
    pub frequency: f64,
    pub phase: f64,
    pub ssr: f64,
    pub converged: bool,
}

/// Fit `y = offset + amplitude * cos(2π f x + phase)` with a coarse
/// periodogram seed followed by LM refinement.
pub fn fit_sinusoid(x: &[f64], y: &[f64]) -> Option<Sinusoid> {
    fit_sinusoid_band(x, y, None)
}

/// As [`fit_sinusoid`], with the periodogram search restricted to a
/// frequency band (useful when out-of-band beats alias into the data).
pub fn fit_sinusoid_band(x: &[f64], y: &[f64], band: Option<(f64, f64)>) -> Option<Sinusoid> {
    let n = x.len();
    if n < 5 {
        return None;
    }
    let mean = y.iter().sum::<f64>() / n as f64;
    let span = x.last()? - x.first()?;
    let dx_min = x.windows(2).map(|w| (w[1] - w[0]).abs()).fold(f64::INFINITY, f64::min);
    // coarse periodogram over resolvable frequencies
    let mut best = (0.0, 0.0f64, 0.0);
    let fmax = band.map(|b| b.1).unwrap_or(0.5 / dx_min.max(1e-12));
    let fmin = band.map(|b| b.0).unwrap_or(0.25 / span.abs().max(1e-12));
    let steps = 400;
    for k in 0..=steps {
        let f = fmin + (fmax - fmin) * k as f64 / steps as f64;
        let (mut cs, mut sn) = (0.0, 0.0);
        for (&xi, &yi) in x.iter().zip(y.iter()) {
            let ph = 2.0 * std::f64::consts::PI * f * xi;
            cs += (yi - mean) * ph.cos();
            sn += (yi - mean) * ph.sin();
        }
        let power = cs * cs + sn * sn;
        if power > best.1 {
            best = (f, power, (-sn).atan2(cs));
        }
    }
    let amp0 = (2.0 * best.1.sqrt() / n as f64).max(1e-12);
    let p0 = [mean, amp0, best.0, best.2];
    let resid = |p: &[f64]| -> Vec<f64> {
        x.iter()
            .zip(y.iter())
            .map(|(&xi, &yi)| p[0] + p[1] * (2.0 * std::f64::consts::PI * p[2] * xi + p[3]).cos() - yi)
            .collect()
    };
    let fit = levenberg_marquardt(resid, &p0, &LmOptions::default());
    Some(Sinusoid {
        offset: fit.params[0],
        amplitude: fit.params[1].abs(),
        frequency: fit.params[2].abs(),
        phase: fit.params[3],
        ssr: fit.ssr,
        converged: fit.converged,
    })
}

/// Euclidean projection onto the probability simplex (Duchi et al.).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut css = 0.0;
    let mut rho = 0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        css += ui;
        let t = (css - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            rho = i;
            theta = t;
        }
    }
    let _ = rho;
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// Minimize `‖A p − b‖` over the probability simplex by projected gradient.
pub fn min_quadratic_on_simplex(a: &DMatrix<f64>, b: &DVector<f64>, max_iter: usize) -> DVector<f64> {
    let n = a.ncols();
    let ata = a.transpose() * a;
    let atb = a.transpose() * b;
    // Lipschitz constant from a few power iterations
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    for _ in 0..30 {
        let w = &ata * &v;
        let norm = w.norm();
        if norm < 1e-30 {
            break;
        }
        v = w / norm;
    }
    let lip = (v.transpose() * &ata * &v)[(0, 0)].max(1e-12);
    let step = 1.0 / lip;
    let mut p = DVector::from_element(n, 1.0 / n as f64);
    // Nesterov acceleration
    let mut y = p.clone();
    let mut t_prev = 1.0f64;
    for _ in 0..max_iter {
        let grad = &ata * &y - &atb;
        let cand = &y - &grad * step;
        let proj = DVector::from_vec(project_simplex(cand.as_slice()));
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_prev * t_prev).sqrt());
        y = &proj + (&proj - &p) * ((t_prev - 1.0) / t_next);
        let delta = (&proj - &p).norm();
        p = proj;
        t_prev = t_next;
        if delta < 1e-14 {
            break;
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn lm_recovers_exponential() {
        let xs: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| 0.2 + 0.8 * 0.97f64.powf(x)).collect();
        let resid = |p: &[f64]| -> Vec<f64> {
            xs.iter().zip(ys.iter()).map(|(&x, &y)| p[0] + p[1] * p[2].powf(x) - y).collect()
        };
        let fit = levenberg_marquardt(resid, &[0.0, 1.0, 0.9], &LmOptions::default());
        assert!(fit.converged);
        assert_abs_diff_eq!(fit.params[0], 0.2, epsilon = 1e-7);
        assert_abs_diff_eq!(fit.params[1], 0.8, epsilon = 1e-7);
        assert_abs_diff_eq!(fit.params[2], 0.97, epsilon = 1e-8);
    }

    #[test]
    fn nm_minimizes_quadratic_bowl() {
        let f = |p: &[f64]| (p[0] - 3.0).powi(2) + 10.0 * (p[1] + 1.0).powi(2) + 0.5;
        let opts = NmOptions { max_iter: 500, tol: 1e-14, initial_step: vec![0.5, 0.5] };
        let (p, v, conv) = nelder_mead(f, &[0.0, 0.0], &opts);
        assert!(conv);
        assert_abs_diff_eq!(p[0], 3.0, epsilon = 1e-5);
        assert_abs_diff_eq!(p[1], -1.0, epsilon = 1e-5);
        assert_abs_diff_eq!(v, 0.5, epsilon = 1e-9);
    }

    #[test]
    fn quadratic_fit_exact() {
        let xs: Vec<f64> = (0..7).map(|i| i as f64 * 0.5 - 1.0).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| 2.0 - 3.0 * x + 0.25 * x * x).collect();
        let co = polyfit(&xs, &ys, 2).unwrap();
        assert_abs_diff_eq!(co[0], 2.0, epsilon = 1e-10);
        assert_abs_diff_eq!(co[1], -3.0, epsilon = 1e-10);
        assert_abs_diff_eq!(co[2], 0.25, epsilon = 1e-10);
    }

    #[test]
    fn gaussian_peak_center_recovery() {
        let xs: Vec<f64> = (0..60).map(|i| i as f64 * 0.1).collect();
        let ys: Vec<f64> =
            xs.iter().map(|&x| 0.1 + 0.9 * (-0.5 * ((x - 3.2) / 0.4).powi(2)).exp()).collect();
        let g = fit_gaussian_peak(&xs, &ys).unwrap();
        assert_abs_diff_eq!(g.center, 3.2, epsilon = 1e-6);
        assert_abs_diff_eq!(g.sigma, 0.4, epsilon = 1e-6);
    }

    #[test]
    fn sinusoid_frequency_recovery() {
        let xs: Vec<f64> = (0..120).map(|i| i as f64 * 0.25).collect();
        let ys: Vec<f64> =
            xs.iter().map(|&x| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * 0.173 * x).cos()).collect();
        let s = fit_sinusoid(&xs, &ys).unwrap();
        assert_abs_diff_eq!(s.frequency, 0.173, epsilon = 1e-6);
        assert_abs_diff_eq!(s.amplitude, 0.5, epsilon = 1e-6);
    }

    #[test]
    fn simplex_projection_properties() {
        let p = project_simplex(&[0.4, -0.2, 1.3]);
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(p.iter().all(|&x| x >= 0.0));
        // already-feasible point is a fixed point
        let q = project_simplex(&[0.25, 0.25, 0.5]);
        assert_abs_diff_eq!(q[2], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn simplex_least_squares_interior_matches_unconstrained() {
        // invertible system whose solution is interior to the simplex
        let a = DMatrix::from_row_slice(3, 3, &[0.9, 0.05, 0.05, 0.1, 0.8, 0.1, 0.0, 0.15, 0.85]);
        let truth = DVector::from_column_slice(&[0.3, 0.5, 0.2]);
        let b = &a * &truth;
        let p = min_quadratic_on_simplex(&a, &b, 20000);
        assert!((p - truth).norm() < 1e-8);
    }
}
