//! Maximum likelihood and REML estimation of the nested error regression
//! model, and the plug-in asymptotic covariance of the estimators.
//!
//! The likelihood is profiled down to a scalar objective in the variance
//! ratio `psi = sigma_alpha^2 / sigma_e^2`. For fixed `psi` the coefficient
//! estimate is GLS through the rank-one Woodbury form
//! `V_i^{-1} = sigma_e^{-2} (I - (gamma_i / n_i) J)` and `sigma_e^2` has a
//! closed form, so the remaining search is one-dimensional and bracketed.

use nalgebra::{DMatrix, DVector};

use crate::model::{sufficient_stats, AreaSuffStats, ModelParams, SampleData};
use crate::{Result, SaeError};

const PSI_TOL: f64 = 1e-10;
const MAX_ITER: usize = 200;

/// Estimation criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitMethod {
    Ml,
    Reml,
}

impl std::fmt::Display for FitMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FitMethod::Ml => write!(f, "ml"),
            FitMethod::Reml => write!(f, "reml"),
        }
    }
}

/// A fitted nested error regression model.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub params: ModelParams,
    pub method: FitMethod,
    /// Log-likelihood (ML) or restricted log-likelihood (REML) at the optimum.
    pub loglik: f64,
    pub converged: bool,
    /// Set when the variance-ratio optimum was truncated at zero.
    pub boundary_alpha: bool,
    pub n: usize,
    pub g: usize,
    pub p_b: usize,
    pub p_w: usize,
    /// `(sum_i X_i' V_i^{-1} X_i)^{-1}` at the estimates.
    pub beta_cov: DMatrix<f64>,
    /// Width of the final bracketing interval of the scalar search.
    pub bracket_width: f64,
}

impl FittedModel {
    pub fn p(&self) -> usize {
        self.p_b + 1 + self.p_w
    }
}

/// GLS coefficients and their model-based covariance for fixed variance
/// components.
pub fn gls_beta(
    sample: &SampleData,
    sigma2_alpha: f64,
    sigma2_e: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if sigma2_e <= 0.0 {
        return Err(SaeError::InvalidValue("sigma2_e must be positive".into()));
    }
    if sigma2_alpha < 0.0 {
        return Err(SaeError::InvalidValue(
            "sigma2_alpha must be nonnegative".into(),
        ));
    }
    let stats = sufficient_stats(sample);
    let psi = sigma2_alpha / sigma2_e;
    let (a, b) = normal_equations(&stats, sample.p(), psi);
    let beta = solve_normal_equations(&a, &b, &sample.colnames)?;
    let a_inv = invert_spd(&a, &sample.colnames)?;
    Ok((beta, a_inv * sigma2_e))
}

/// Fit by maximum likelihood.
pub fn fit_ml(sample: &SampleData) -> Result<FittedModel> {
    fit(sample, FitMethod::Ml)
}

/// Fit by restricted maximum likelihood.
pub fn fit_reml(sample: &SampleData) -> Result<FittedModel> {
    fit(sample, FitMethod::Reml)
}

/// Fit by the given criterion.
pub fn fit(sample: &SampleData, method: FitMethod) -> Result<FittedModel> {
    let g = sample.g();
    let n = sample.n_total();
    let p = sample.p();
    if g < 2 {
        return Err(SaeError::InvalidValue(format!(
            "need at least 2 areas, got {g}"
        )));
    }
    if n <= p {
        return Err(SaeError::InvalidValue(format!(
            "need more observations ({n}) than design columns ({p})"
        )));
    }
    let stats = sufficient_stats(sample);
    let profile = Profile {
        stats: &stats,
        p,
        n,
        method,
        colnames: &sample.colnames,
    };

    let at0 = profile.eval(0.0)?;
    // Degenerate data: the responses are an exact linear function of the
    // design, leaving only rounding-level residuals. Compare the residual
    // quadratic against the noise floor of its own ingredients.
    let noise_floor: f64 = stats
        .iter()
        .map(|s| {
            let fitted = s.zbar.dot(&at0.beta);
            let scale = 1e-12 * (s.ybar_s.abs() + fitted.abs() + 1e-300);
            s.n_i as f64 * scale * scale
        })
        .sum();
    if at0.q <= noise_floor {
        return Ok(finish(sample, &profile, at0, 0.0, true, true, 0.0));
    }

    // Grow the upper bracket geometrically from 1 until the objective turns
    // down, then run a bracketed scalar search on [0, hi].
    let mut hi = 1.0;
    let mut f_hi = profile.eval(hi)?.objective;
    while hi < 1e10 {
        let f_next = profile.eval(hi * 4.0)?.objective;
        if f_next < f_hi {
            break;
        }
        hi *= 4.0;
        f_hi = f_next;
    }
    hi *= 4.0;

    let neg = |psi: f64| -> Result<f64> { Ok(-profile.eval(psi)?.objective) };
    let brent = brent_minimize(neg, 0.0, hi, PSI_TOL, MAX_ITER)?;
    let mut psi = brent.x;
    let mut converged = brent.converged;

    // Polish the interior optimum by bisecting the analytic derivative of the
    // concentrated objective inside the final bracket.
    if psi > 0.0 {
        if let Some(root) = bisect_derivative(&profile, brent.a.max(0.0), brent.b)? {
            psi = root;
            converged = true;
        }
    }

    // Truncate at the boundary when zero is at least as good.
    let at_psi = profile.eval(psi)?;
    let (best, psi, boundary) = if psi <= PSI_TOL || at0.objective >= at_psi.objective {
        (profile.eval(0.0)?, 0.0, true)
    } else {
        (at_psi, psi, false)
    };
    Ok(finish(
        sample,
        &profile,
        best,
        psi,
        converged,
        boundary,
        brent.width,
    ))
}

fn finish(
    sample: &SampleData,
    profile: &Profile<'_>,
    point: ProfilePoint,
    psi: f64,
    converged: bool,
    boundary_alpha: bool,
    bracket_width: f64,
) -> FittedModel {
    let p_b = sample.p_b;
    let p_w = sample.p_w;
    let sigma2_e = point.sigma2_e;
    let sigma2_alpha = psi * sigma2_e;
    let xi = DVector::from_iterator(p_b + 1, point.beta.iter().take(p_b + 1).copied());
    let beta2 = DVector::from_iterator(p_w, point.beta.iter().skip(p_b + 1).copied());
    let beta_cov = point.a_inv.clone() * sigma2_e;
    let loglik = profile.loglik(&point, psi);
    FittedModel {
        params: ModelParams {
            xi,
            beta2,
            sigma2_alpha,
            sigma2_e,
        },
        method: profile.method,
        loglik,
        converged,
        boundary_alpha,
        n: profile.n,
        g: sample.g(),
        p_b,
        p_w,
        beta_cov,
        bracket_width,
    }
}

struct Profile<'a> {
    stats: &'a [AreaSuffStats],
    p: usize,
    n: usize,
    method: FitMethod,
    colnames: &'a [String],
}

struct ProfilePoint {
    beta: DVector<f64>,
    a_inv: DMatrix<f64>,
    log_det_a: f64,
    q: f64,
    sigma2_e: f64,
    objective: f64,
}

impl Profile<'_> {
    fn eval(&self, psi: f64) -> Result<ProfilePoint> {
        let (a, b) = normal_equations(self.stats, self.p, psi);
        let chol = a
            .clone()
            .cholesky()
            .ok_or_else(|| rank_error(&a, self.colnames))?;
        let beta = chol.solve(&b);
        let log_det_a = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let a_inv = chol.inverse();
        // Clamp at zero: exact-fit data can round to a tiny negative value.
        let q = residual_quadratic(self.stats, psi, &beta).max(0.0);
        let denom = match self.method {
            FitMethod::Ml => self.n as f64,
            FitMethod::Reml => (self.n - self.p) as f64,
        };
        let sigma2_e = q / denom;
        let log_terms: f64 = self
            .stats
            .iter()
            .map(|s| (1.0 + s.n_i as f64 * psi).ln())
            .sum();
        // Concentrated objective, constants dropped.
        let objective = if q <= 0.0 {
            f64::INFINITY
        } else {
            match self.method {
                FitMethod::Ml => -0.5 * (denom * sigma2_e.ln() + log_terms),
                FitMethod::Reml => -0.5 * (denom * sigma2_e.ln() + log_terms + log_det_a),
            }
        };
        Ok(ProfilePoint {
            beta,
            a_inv,
            log_det_a,
            q,
            sigma2_e,
            objective,
        })
    }

    /// Full (restricted) log-likelihood at a profile point.
    fn loglik(&self, point: &ProfilePoint, psi: f64) -> f64 {
        let n = self.n as f64;
        let p = self.p as f64;
        let se = point.sigma2_e;
        if se <= 0.0 {
            return f64::INFINITY;
        }
        let log_terms: f64 = self
            .stats
            .iter()
            .map(|s| (1.0 + s.n_i as f64 * psi).ln())
            .sum();
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        match self.method {
            FitMethod::Ml => -0.5 * (n * ln2pi + n * se.ln() + log_terms + point.q / se),
            FitMethod::Reml => {
                // log|X'V^{-1}X| = log|A| - p log sigma2_e
                -0.5 * ((n - p) * ln2pi
                    + (n - p) * se.ln()
                    + log_terms
                    + point.log_det_a
                    + point.q / se)
            }
        }
    }

    /// Analytic derivative of the concentrated objective in `psi`.
    fn derivative(&self, psi: f64) -> Result<f64> {
        let point = self.eval(psi)?;
        let denom = match self.method {
            FitMethod::Ml => self.n as f64,
            FitMethod::Reml => (self.n - self.p) as f64,
        };
        let mut q_prime = 0.0;
        let mut log_sum_prime = 0.0;
        let mut log_det_prime = 0.0;
        for s in self.stats {
            let n_i = s.n_i as f64;
            let denom_i = 1.0 + n_i * psi;
            let c_i = n_i * n_i / (denom_i * denom_i);
            let rbar = s.ybar_s - s.zbar.dot(&point.beta);
            q_prime -= c_i * rbar * rbar;
            log_sum_prime += n_i / denom_i;
            if self.method == FitMethod::Reml {
                let az = &point.a_inv * &s.zbar;
                log_det_prime -= c_i * s.zbar.dot(&az);
            }
        }
        let base = -0.5 * (denom * q_prime / point.q + log_sum_prime);
        Ok(match self.method {
            FitMethod::Ml => base,
            FitMethod::Reml => base - 0.5 * log_det_prime,
        })
    }
}

/// Normal equations of the Woodbury-form GLS, scaled by `sigma_e^2`:
/// `A = sum_i [W_i + n_i (1 - gamma_i) zbar zbar']`,
/// `b = sum_i [w_i + n_i (1 - gamma_i) zbar ybar]`.
fn normal_equations(stats: &[AreaSuffStats], p: usize, psi: f64) -> (DMatrix<f64>, DVector<f64>) {
    let mut a = DMatrix::zeros(p, p);
    let mut b = DVector::zeros(p);
    for s in stats {
        let n_i = s.n_i as f64;
        // n_i (1 - gamma_i) with gamma_i = n_i psi / (1 + n_i psi)
        let w = n_i / (1.0 + n_i * psi);
        a += &s.w_zz;
        b += &s.w_zy;
        for r in 0..p {
            for c in 0..p {
                a[(r, c)] += w * s.zbar[r] * s.zbar[c];
            }
            b[r] += w * s.zbar[r] * s.ybar_s;
        }
    }
    (a, b)
}

/// Residual quadratic form `sum_i r_i' (I - (gamma_i/n_i) J) r_i`.
fn residual_quadratic(stats: &[AreaSuffStats], psi: f64, beta: &DVector<f64>) -> f64 {
    let mut q = 0.0;
    for s in stats {
        let n_i = s.n_i as f64;
        let w = n_i / (1.0 + n_i * psi);
        // within part: sum_j ((y - ybar) - (z - zbar)'beta)^2
        let bt_wzz_b = (beta.transpose() * &s.w_zz * beta)[(0, 0)];
        let within = s.w_yy - 2.0 * beta.dot(&s.w_zy) + bt_wzz_b;
        let rbar = s.ybar_s - s.zbar.dot(beta);
        q += within + w * rbar * rbar;
    }
    q
}

fn solve_normal_equations(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    colnames: &[String],
) -> Result<DVector<f64>> {
    match a.clone().cholesky() {
        Some(chol) => Ok(chol.solve(b)),
        None => Err(rank_error(a, colnames)),
    }
}

fn invert_spd(a: &DMatrix<f64>, colnames: &[String]) -> Result<DMatrix<f64>> {
    match a.clone().cholesky() {
        Some(chol) => Ok(chol.inverse()),
        None => Err(rank_error(a, colnames)),
    }
}

/// Identify the offending columns of a singular Gram matrix by greedy
/// incremental pivoting.
fn rank_error(a: &DMatrix<f64>, colnames: &[String]) -> SaeError {
    let p = a.nrows();
    let mut kept: Vec<usize> = Vec::new();
    let mut offending: Vec<String> = Vec::new();
    let scale = a.diagonal().iter().cloned().fold(0.0f64, f64::max).max(1.0);
    for j in 0..p {
        let mut trial = kept.clone();
        trial.push(j);
        let sub = a.select_rows(trial.as_slice()).select_columns(trial.as_slice());
        let ok = sub
            .cholesky()
            .map(|c| {
                c.l_dirty()
                    .diagonal()
                    .iter()
                    .all(|&d| d * d > 1e-12 * scale)
            })
            .unwrap_or(false);
        if ok {
            kept.push(j);
        } else {
            offending.push(
                colnames
                    .get(j)
                    .cloned()
                    .unwrap_or_else(|| format!("column {j}")),
            );
        }
    }
    if offending.is_empty() {
        offending.push("(unidentified)".to_string());
    }
    SaeError::RankDeficient { columns: offending }
}

struct BrentResult {
    x: f64,
    a: f64,
    b: f64,
    width: f64,
    converged: bool,
}

/// Derivative-free bracketed minimisation (Brent's method with golden-section
/// fallback) on `[lo, hi]`.
fn brent_minimize<F>(mut f: F, lo: f64, hi: f64, tol: f64, max_iter: usize) -> Result<BrentResult>
where
    F: FnMut(f64) -> Result<f64>,
{
    const GOLD: f64 = 0.381_966_011_250_105_2;
    let mut a = lo;
    let mut b = hi;
    let mut x = a + GOLD * (b - a);
    let mut w = x;
    let mut v = x;
    let mut fx = f(x)?;
    let mut fw = fx;
    let mut fv = fx;
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    let eps = f64::EPSILON.sqrt();
    let mut converged = false;

    for _ in 0..max_iter {
        let m = 0.5 * (a + b);
        let tol1 = tol * x.abs().max(1.0) + eps * x.abs() + 1e-300;
        let tol2 = 2.0 * tol1;
        if (x - m).abs() <= tol2 - 0.5 * (b - a) {
            converged = true;
            break;
        }
        let mut use_golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let qq = (x - v) * (fx - fw);
            let mut p = (x - v) * qq - (x - w) * r;
            let mut q2 = 2.0 * (qq - r);
            if q2 > 0.0 {
                p = -p;
            } else {
                q2 = -q2;
            }
            if p.abs() < (0.5 * q2 * e).abs() && p > q2 * (a - x) && p < q2 * (b - x) {
                e = d;
                d = p / q2;
                let u = x + d;
                if (u - a) < tol2 || (b - u) < tol2 {
                    d = if m > x { tol1 } else { -tol1 };
                }
                use_golden = false;
            }
        }
        if use_golden {
            e = if x < m { b - x } else { a - x };
            d = GOLD * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else if d > 0.0 {
            x + tol1
        } else {
            x - tol1
        };
        let fu = f(u)?;
        if fu <= fx {
            if u < x {
                b = x;
            } else {
                a = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    if !converged {
        return Err(SaeError::NonConvergence {
            iterations: max_iter,
            best_psi: x,
        });
    }
    Ok(BrentResult {
        x,
        a,
        b,
        width: b - a,
        converged,
    })
}

/// Bisection of the concentrated-objective derivative inside a bracket around
/// the Brent optimum; returns `None` when no sign change is found there.
fn bisect_derivative(profile: &Profile<'_>, lo: f64, hi: f64) -> Result<Option<f64>> {
    let mut a = lo.max(0.0);
    let mut b = hi;
    let mut fa = profile.derivative(a)?;
    let mut fb = profile.derivative(b)?;
    // Widen a little if the Brent bracket does not straddle the root.
    let mut widen = 0;
    while fa.signum() == fb.signum() && widen < 8 {
        let span = (b - a).max(1e-12);
        a = (a - span).max(0.0);
        b += span;
        fa = profile.derivative(a)?;
        fb = profile.derivative(b)?;
        widen += 1;
    }
    if !(fa > 0.0 && fb < 0.0) {
        return Ok(None);
    }
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if (b - a) <= f64::EPSILON * m.abs().max(1e-30) {
            break;
        }
        let fm = profile.derivative(m)?;
        if fm > 0.0 {
            a = m;
        } else {
            b = m;
        }
    }
    Ok(Some(0.5 * (a + b)))
}

/// Source of the third/fourth-moment plug-ins in the asymptotic covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentSource {
    /// Gaussian moments: `E a^3 = 0`, `E a^4 = 3 s_a^4`, `E e^4 = 3 s_e^4`.
    NormalTheory,
    /// Empirical moments of the EBLUPs and within residuals.
    ResidualMoments,
}

/// Moment plug-ins used in the covariance assembly.
#[derive(Debug, Clone)]
pub struct MomentEstimates {
    pub e_alpha3: f64,
    pub e_alpha4: f64,
    pub e_e4: f64,
    pub source: MomentSource,
}

/// Plug-in estimate of the asymptotic covariance of the parameter estimators.
///
/// `c` is the limiting covariance of `K^{1/2} (omega_hat - omega)` with
/// parameter order `[beta0, beta1, sigma_alpha^2, beta2, sigma_e^2]`;
/// `k_diag` holds the diagonal of the scaling matrix `K` (g for the
/// between-area block, n for the within block).
#[derive(Debug, Clone)]
pub struct AsymptoticCovariance {
    pub c: DMatrix<f64>,
    pub k_diag: DVector<f64>,
    pub moments: MomentEstimates,
}

impl AsymptoticCovariance {
    /// Finite-sample variance estimates `K^{-1/2} C K^{-1/2}` (diagonal).
    pub fn param_variances(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.c.nrows(),
            (0..self.c.nrows()).map(|i| self.c[(i, i)] / self.k_diag[i]),
        )
    }

    /// Standard errors in the order `[xi, sigma_alpha^2, beta2, sigma_e^2]`.
    pub fn standard_errors(&self) -> DVector<f64> {
        self.param_variances().map(f64::sqrt)
    }

    /// `(Var(sigma_alpha^2), Var(sigma_e^2), Cov)` at finite sample sizes.
    pub fn variance_component_cov(&self, p_b: usize) -> (f64, f64, f64) {
        let i_a = p_b + 1;
        let i_e = self.c.nrows() - 1;
        (
            self.c[(i_a, i_a)] / self.k_diag[i_a],
            self.c[(i_e, i_e)] / self.k_diag[i_e],
            0.0,
        )
    }
}

/// Assemble the plug-in asymptotic covariance from a converged fit.
pub fn asymptotic_covariance(
    fit: &FittedModel,
    sample: &SampleData,
    moment_source: MomentSource,
) -> Result<AsymptoticCovariance> {
    let g = sample.g();
    let n = sample.n_total();
    let p_b = sample.p_b;
    let p_w = sample.p_w;
    let dim = p_b + p_w + 3;

    // B_u = g^{-1} sum u_i u_i'
    let mut b_u = DMatrix::zeros(p_b + 1, p_b + 1);
    for area in &sample.areas {
        for r in 0..=p_b {
            for c in 0..=p_b {
                b_u[(r, c)] += area.u[r] * area.u[c];
            }
        }
    }
    b_u /= g as f64;
    let u_names: Vec<String> = sample.colnames[..=p_b].to_vec();
    let b_u_inv = invert_spd(&b_u, &u_names)?;

    // B_3 = n^{-1} sum_ij (x_w - xbar_i_w)(x_w - xbar_i_w)' over sampled
    // units, centered about the population area means when available.
    let b3_inv = if p_w > 0 {
        let mut b3 = DMatrix::zeros(p_w, p_w);
        for area in &sample.areas {
            let center = area.xbar_w_pop.as_ref().unwrap_or(&area.xbar_w_samp);
            for unit in &area.units {
                for r in 0..p_w {
                    for c in 0..p_w {
                        b3[(r, c)] += (unit.x_w[r] - center[r]) * (unit.x_w[c] - center[c]);
                    }
                }
            }
        }
        b3 /= n as f64;
        let w_names: Vec<String> = sample.colnames[p_b + 1..].to_vec();
        Some(invert_spd(&b3, &w_names)?)
    } else {
        None
    };

    let sa2 = fit.params.sigma2_alpha;
    let se2 = fit.params.sigma2_e;
    let moments = match moment_source {
        MomentSource::NormalTheory => MomentEstimates {
            e_alpha3: 0.0,
            e_alpha4: 3.0 * sa2 * sa2,
            e_e4: 3.0 * se2 * se2,
            source: moment_source,
        },
        MomentSource::ResidualMoments => empirical_moments(fit, sample),
    };

    let mut c = DMatrix::zeros(dim, dim);
    // xi block: sigma_alpha^2 B_u^{-1}
    for r in 0..=p_b {
        for cc in 0..=p_b {
            c[(r, cc)] = sa2 * b_u_inv[(r, cc)];
        }
    }
    let i_a = p_b + 1;
    c[(0, i_a)] = moments.e_alpha3;
    c[(i_a, 0)] = moments.e_alpha3;
    c[(i_a, i_a)] = moments.e_alpha4 - sa2 * sa2;
    if let Some(b3_inv) = &b3_inv {
        for r in 0..p_w {
            for cc in 0..p_w {
                c[(i_a + 1 + r, i_a + 1 + cc)] = se2 * b3_inv[(r, cc)];
            }
        }
    }
    let i_e = dim - 1;
    c[(i_e, i_e)] = moments.e_e4 - se2 * se2;

    let mut k_diag = DVector::zeros(dim);
    for i in 0..(p_b + 2) {
        k_diag[i] = g as f64;
    }
    for i in (p_b + 2)..dim {
        k_diag[i] = n as f64;
    }
    Ok(AsymptoticCovariance {
        c,
        k_diag,
        moments,
    })
}

/// Empirical third/fourth moments from EBLUPs and within residuals.
fn empirical_moments(fit: &FittedModel, sample: &SampleData) -> MomentEstimates {
    let beta = fit.params.beta();
    let g = sample.g() as f64;
    let n = sample.n_total() as f64;
    let mut a3 = 0.0;
    let mut a4 = 0.0;
    let mut e4 = 0.0;
    for area in &sample.areas {
        let zbar = area.zbar_s();
        let rbar = area.ybar_s() - zbar.dot(&beta);
        let gam = crate::model::gamma(area.n_i(), fit.params.sigma2_alpha, fit.params.sigma2_e);
        let alpha_hat = gam * rbar;
        a3 += alpha_hat.powi(3);
        a4 += alpha_hat.powi(4);
        let p_u = area.u.len();
        for unit in &area.units {
            let mut mu: f64 = area
                .u
                .iter()
                .enumerate()
                .map(|(r, &u)| u * beta[r])
                .sum();
            mu += unit
                .x_w
                .iter()
                .enumerate()
                .map(|(r, &x)| x * beta[p_u + r])
                .sum::<f64>();
            let e = unit.y - mu - alpha_hat;
            e4 += e.powi(4);
        }
    }
    MomentEstimates {
        e_alpha3: a3 / g,
        e_alpha4: a4 / g,
        e_e4: e4 / n,
        source: MomentSource::ResidualMoments,
    }
}
