//! Peer-effect regressions.
//!
//! The outcome is regressed on a peer regressor, own controls and school
//! dummies (first school dropped, plus an intercept). The peer regressor is
//! either the leave-one-out classmate mean of `z` (linear-in-means) or the
//! friendship-weighted mean `Ω z`, which is endogenous and instrumented by the
//! classmate mean. Each variant can add a classroom random intercept,
//! fitted by Gaussian maximum likelihood profiled over the variance ratio
//! `ψ = σ²_μ / σ²_ε`.

use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cohort::Cohort;
use crate::error::{Error, Result};
use crate::peernn::OmegaMatrix;

const RANK_TOL: f64 = 1e-9;
const LOG_PSI_MIN: f64 = -12.0;
const LOG_PSI_MAX: f64 = 12.0;
const LOGLIK_TOL: f64 = 1e-8;
const MIN_FIRST_STAGE_F: f64 = 1.0;

pub const CONTROL_NAMES: [&str; 6] = [
    "Own Rank",
    "Age",
    "Sex",
    "Father's education",
    "Mother's education",
    "Ethnic nationality",
];

/// Regression inputs for one estimation sample.
#[derive(Debug, Clone)]
pub struct RegressionDesign {
    pub student_ids: Vec<u64>,
    pub y: DVector<f64>,
    /// Friends' weighted mean of z, `Σ_j Ω_ij z_j`.
    pub endogenous: DVector<f64>,
    /// Leave-one-out classmate mean of z.
    pub instrument: DVector<f64>,
    pub controls: DMatrix<f64>,
    pub control_names: Vec<String>,
    /// School indicators, first school omitted.
    pub school_dummies: DMatrix<f64>,
    pub school_names: Vec<String>,
    /// Classroom index of each row, for the random intercept.
    pub groups: Vec<usize>,
}

/// Friends' weighted mean and leave-one-out classmate mean of `z`.
pub fn peer_regressors(omega: &OmegaMatrix, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = z.len();
    if n < 2 {
        return Err(Error::Domain("peer regressors need N >= 2".into()));
    }
    let weighted = omega.weighted_mean(z)?;
    let total: f64 = z.iter().sum();
    let loo = z.iter().map(|zi| (total - zi) / (n - 1) as f64).collect();
    Ok((weighted, loo))
}

pub fn build_design(cohort: &Cohort, omegas: &[OmegaMatrix]) -> Result<RegressionDesign> {
    let by_class: HashMap<u64, &OmegaMatrix> = omegas.iter().map(|o| (o.class_id(), o)).collect();
    let mut ids = Vec::new();
    let mut y = Vec::new();
    let mut endo = Vec::new();
    let mut inst = Vec::new();
    let mut controls = Vec::new();
    let mut groups = Vec::new();
    let mut school_of_row = Vec::new();
    let schools: Vec<u64> = cohort.schools().iter().map(|s| s.school_id).collect();

    for (g, class) in cohort.classrooms().iter().enumerate() {
        let omega = by_class.get(&class.class_id).ok_or_else(|| {
            Error::Domain(format!("no Ω supplied for class {}", class.class_id))
        })?;
        if omega.size() != class.size() {
            return Err(Error::Dimension(format!(
                "Ω for class {} is {}×{}, class has {} students",
                class.class_id,
                omega.size(),
                omega.size(),
                class.size()
            )));
        }
        let members = cohort.members(class);
        let z: Vec<f64> = members.iter().map(|s| s.z).collect();
        let (w, l) = peer_regressors(omega, &z)?;
        for (k, s) in members.iter().enumerate() {
            ids.push(s.id);
            y.push(s.y);
            endo.push(w[k]);
            inst.push(l[k]);
            let c = &s.controls;
            controls.extend_from_slice(&[
                s.z,
                c.age,
                f64::from(s.gender),
                c.father_edu,
                c.mother_edu,
                c.ethnic,
            ]);
            groups.push(g);
            school_of_row.push(class.school_id);
        }
    }

    let n = ids.len();
    let dummy_schools = &schools[1..];
    let school_dummies = DMatrix::from_fn(n, dummy_schools.len(), |i, k| {
        f64::from(u8::from(school_of_row[i] == dummy_schools[k]))
    });
    Ok(RegressionDesign {
        student_ids: ids,
        y: DVector::from_vec(y),
        endogenous: DVector::from_vec(endo),
        instrument: DVector::from_vec(inst),
        controls: DMatrix::from_row_slice(n, CONTROL_NAMES.len(), &controls),
        control_names: CONTROL_NAMES.iter().map(|s| s.to_string()).collect(),
        school_dummies,
        school_names: dummy_schools.iter().map(|s| format!("school_{s}")).collect(),
        groups,
    })
}

impl RegressionDesign {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// `[peer, intercept, controls, school dummies]` with names.
    fn regressors(&self, peer: &DVector<f64>, peer_name: &str) -> (DMatrix<f64>, Vec<String>) {
        let n = self.len();
        let k = 2 + self.controls.ncols() + self.school_dummies.ncols();
        let mut x = DMatrix::zeros(n, k);
        x.set_column(0, peer);
        x.column_mut(1).fill(1.0);
        for c in 0..self.controls.ncols() {
            x.set_column(2 + c, &self.controls.column(c));
        }
        let off = 2 + self.controls.ncols();
        for c in 0..self.school_dummies.ncols() {
            x.set_column(off + c, &self.school_dummies.column(c));
        }
        let mut names = vec![peer_name.to_string(), "Intercept".to_string()];
        names.extend(self.control_names.iter().cloned());
        names.extend(self.school_names.iter().cloned());
        (x, names)
    }

    fn num_groups(&self) -> usize {
        self.groups.iter().max().map_or(0, |g| g + 1)
    }
}

/// Least-squares fit with classical standard errors.
#[derive(Debug, Clone)]
pub struct OlsFit {
    pub names: Vec<String>,
    pub coef: DVector<f64>,
    pub se: DVector<f64>,
    pub residuals: DVector<f64>,
    pub fitted: DVector<f64>,
    pub sigma2: f64,
    pub adj_r2: f64,
    pub n: usize,
}

struct Decomposed {
    coef: DVector<f64>,
    /// (XᵀX)⁻¹ = R⁻¹R⁻ᵀ
    xtx_inv: DMatrix<f64>,
}

/// Householder QR solve; fails naming the columns that are linear
/// combinations of earlier ones.
fn qr_solve(x: &DMatrix<f64>, y: &DVector<f64>, names: &[String]) -> Result<Decomposed> {
    let (n, p) = x.shape();
    if n < p {
        return Err(Error::RankDeficient {
            columns: names.to_vec(),
        });
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { stage: "regression inputs" });
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let mut collinear = Vec::new();
    for k in 0..p {
        let norm = x.column(k).norm();
        if r[(k, k)].abs() <= RANK_TOL * norm.max(1e-300) || norm == 0.0 {
            collinear.push(k);
        }
    }
    if !collinear.is_empty() {
        let mut cols = Vec::new();
        for &k in &collinear {
            cols.push(names[k].clone());
            // earlier columns with weight in the dependent column
            if k > 0 {
                let head = r.view((0, 0), (k, k)).into_owned();
                let rhs = r.view((0, k), (k, 1)).into_owned();
                if let Some(w) = head.solve_upper_triangular(&rhs) {
                    for (j, v) in w.iter().enumerate() {
                        if v.abs() > 1e-6 && !cols.contains(&names[j]) {
                            cols.push(names[j].clone());
                        }
                    }
                }
            }
        }
        return Err(Error::RankDeficient { columns: cols });
    }
    let qty = qr.q().transpose() * y;
    let coef = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Estimation("triangular solve failed".into()))?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or_else(|| Error::Estimation("triangular inverse failed".into()))?;
    let xtx_inv = &r_inv * r_inv.transpose();
    Ok(Decomposed { coef, xtx_inv })
}

fn adjusted_r2(y: &DVector<f64>, rss: f64, p: usize) -> f64 {
    let n = y.len();
    let mean = y.mean();
    let tss: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if n <= p || tss == 0.0 {
        return f64::NAN;
    }
    1.0 - (rss / (n - p) as f64) / (tss / (n - 1) as f64)
}

/// Ordinary least squares via Householder QR.
pub fn ols(y: &DVector<f64>, x: &DMatrix<f64>, names: &[String]) -> Result<OlsFit> {
    if x.nrows() != y.len() || names.len() != x.ncols() {
        return Err(Error::Dimension("regressor / outcome / name lengths disagree".into()));
    }
    let (n, p) = x.shape();
    let d = qr_solve(x, y, names)?;
    let fitted = x * &d.coef;
    let residuals = y - &fitted;
    let rss = residuals.norm_squared();
    let sigma2 = if n > p { rss / (n - p) as f64 } else { 0.0 };
    let se = DVector::from_fn(p, |k, _| (sigma2 * d.xtx_inv[(k, k)]).max(0.0).sqrt());
    Ok(OlsFit {
        names: names.to_vec(),
        coef: d.coef,
        se,
        residuals,
        fitted,
        sigma2,
        adj_r2: adjusted_r2(y, rss, p),
        n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FirstStageSummary {
    pub pi1: f64,
    pub se: f64,
    /// F statistic of the single excluded instrument (t²).
    pub f_stat: f64,
    pub adj_r2: f64,
    pub n_obs: usize,
}

#[derive(Debug, Clone)]
pub struct FirstStage {
    pub fitted: DVector<f64>,
    pub summary: FirstStageSummary,
    pub fit: OlsFit,
}

/// Regresses the friendship-weighted mean on the instrument, controls and
/// school dummies.
pub fn first_stage(design: &RegressionDesign) -> Result<FirstStage> {
    let (x, names) = design.regressors(&design.instrument, "Classmates' Rank");
    let fit = ols(&design.endogenous, &x, &names)?;
    let (pi1, se) = (fit.coef[0], fit.se[0]);
    let f_stat = if se > 0.0 { (pi1 / se).powi(2) } else { f64::INFINITY };
    Ok(FirstStage {
        fitted: fit.fitted.clone(),
        summary: FirstStageSummary {
            pi1,
            se,
            f_stat,
            adj_r2: fit.adj_r2,
            n_obs: fit.n,
        },
        fit,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    /// Friendship-weighted regressor treated as exogenous.
    #[serde(rename = "OLS")]
    Ols,
    #[serde(rename = "OLS+RE")]
    OlsRe,
    #[serde(rename = "LIM")]
    LinearInMeans,
    #[serde(rename = "LIM+RE")]
    LinearInMeansRe,
    #[serde(rename = "2SLS")]
    TwoStage,
    #[serde(rename = "2SLS+RE")]
    TwoStageRe,
}

impl Method {
    pub fn has_random_effect(self) -> bool {
        matches!(self, Method::OlsRe | Method::LinearInMeansRe | Method::TwoStageRe)
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::Ols => "OLS",
            Method::OlsRe => "OLS+RE",
            Method::LinearInMeans => "LIM",
            Method::LinearInMeansRe => "LIM+RE",
            Method::TwoStage => "2SLS",
            Method::TwoStageRe => "2SLS+RE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IVEstimate {
    pub method: Method,
    pub beta: f64,
    pub se_beta: f64,
    /// Intercept, controls and school effects.
    pub gamma: Vec<Coefficient>,
    pub first_stage: Option<FirstStageSummary>,
    pub sigma2_mu: f64,
    pub sigma2_eps: f64,
    pub loglik: f64,
    /// Not reported for random-effect fits.
    pub adj_r2: Option<f64>,
    pub n_obs: usize,
}

impl IVEstimate {
    pub fn coefficient(&self, name: &str) -> Option<&Coefficient> {
        self.gamma.iter().find(|c| c.name == name)
    }
}

/// Profile log-likelihood evaluation at one variance ratio.
#[derive(Debug, Clone)]
struct ProfilePoint {
    loglik: f64,
    coef: DVector<f64>,
    xtx_inv: DMatrix<f64>,
    sigma2_ml: f64,
    /// Quasi-demeaned regressors and outcome.
    x_star: DMatrix<f64>,
    y_star: DVector<f64>,
    theta: Vec<f64>,
}

struct GroupStats {
    sizes: Vec<usize>,
}

impl GroupStats {
    fn new(groups: &[usize], count: usize) -> Self {
        let mut sizes = vec![0; count];
        for &g in groups {
            sizes[g] += 1;
        }
        GroupStats { sizes }
    }
}

fn quasi_demean(m: &DMatrix<f64>, groups: &[usize], theta: &[f64], count: usize) -> DMatrix<f64> {
    let (n, p) = m.shape();
    let mut sums = DMatrix::<f64>::zeros(count, p);
    let mut sizes = vec![0usize; count];
    for i in 0..n {
        sizes[groups[i]] += 1;
        for c in 0..p {
            sums[(groups[i], c)] += m[(i, c)];
        }
    }
    DMatrix::from_fn(n, p, |i, c| {
        let g = groups[i];
        m[(i, c)] - theta[g] * sums[(g, c)] / sizes[g] as f64
    })
}

fn profile_point(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    names: &[String],
    groups: &[usize],
    stats: &GroupStats,
    log_psi: f64,
) -> Result<ProfilePoint> {
    let psi = log_psi.exp();
    let count = stats.sizes.len();
    let theta: Vec<f64> = stats
        .sizes
        .iter()
        .map(|&nc| 1.0 - 1.0 / (1.0 + nc as f64 * psi).sqrt())
        .collect();
    let x_star = quasi_demean(x, groups, &theta, count);
    let y_mat = DMatrix::from_column_slice(y.len(), 1, y.as_slice());
    let y_star: DVector<f64> = quasi_demean(&y_mat, groups, &theta, count).column(0).into_owned();
    let d = qr_solve(&x_star, &y_star, names)?;
    let resid = &y_star - &x_star * &d.coef;
    let n = y.len() as f64;
    let sigma2_ml = resid.norm_squared() / n;
    let log_det: f64 = stats
        .sizes
        .iter()
        .map(|&nc| (1.0 + nc as f64 * psi).ln())
        .sum();
    let loglik = -0.5 * n * ((2.0 * std::f64::consts::PI * sigma2_ml).ln() + 1.0) - 0.5 * log_det;
    Ok(ProfilePoint {
        loglik,
        coef: d.coef,
        xtx_inv: d.xtx_inv,
        sigma2_ml,
        x_star,
        y_star,
        theta,
    })
}

/// Maximises the profile log-likelihood over `log ψ ∈ [-12, 12]`: a coarse
/// grid locates the bracket, golden-section search refines it.
fn maximise_profile(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    names: &[String],
    groups: &[usize],
    count: usize,
) -> Result<(f64, ProfilePoint)> {
    let stats = GroupStats::new(groups, count);
    let eval = |t: f64| profile_point(y, x, names, groups, &stats, t);

    let steps = 48;
    let grid: Vec<f64> = (0..=steps)
        .map(|k| LOG_PSI_MIN + (LOG_PSI_MAX - LOG_PSI_MIN) * k as f64 / steps as f64)
        .collect();
    let mut values = Vec::with_capacity(grid.len());
    for &t in &grid {
        let ll = eval(t)?.loglik;
        if !ll.is_finite() {
            return Err(Error::Estimation(format!("non-finite log-likelihood at log ψ = {t}")));
        }
        values.push(ll);
    }
    let best = (0..values.len()).fold(0, |b, k| if values[k] > values[b] { k } else { b });
    let mut lo = grid[best.saturating_sub(1)];
    let mut hi = grid[(best + 1).min(steps)];

    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - ratio * (hi - lo);
    let mut b = lo + ratio * (hi - lo);
    let mut fa = eval(a)?.loglik;
    let mut fb = eval(b)?.loglik;
    let mut converged = false;
    for _ in 0..200 {
        if (fa - fb).abs() < LOGLIK_TOL && (hi - lo) < 1e-6 {
            converged = true;
            break;
        }
        if fa >= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - ratio * (hi - lo);
            fa = eval(a)?.loglik;
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + ratio * (hi - lo);
            fb = eval(b)?.loglik;
        }
    }
    if !converged {
        return Err(Error::Estimation(
            "random-effect variance search did not converge".into(),
        ));
    }
    let t_inner = 0.5 * (lo + hi);
    let inner = eval(t_inner)?;
    // never worse than the best grid point (covers the boundaries)
    if inner.loglik >= values[best] {
        Ok((t_inner, inner))
    } else {
        Ok((grid[best], eval(grid[best])?))
    }
}

fn split_coefficients(names: &[String], coef: &DVector<f64>, se: &DVector<f64>) -> Vec<Coefficient> {
    (1..names.len())
        .map(|k| Coefficient {
            name: names[k].clone(),
            estimate: coef[k],
            se: se[k],
        })
        .collect()
}

fn gaussian_loglik(rss: f64, n: usize) -> f64 {
    let n = n as f64;
    -0.5 * n * ((2.0 * std::f64::consts::PI * rss / n).ln() + 1.0)
}

/// Fits `y = β·peer + controls + FE (+ RE)`. When `structural` is given the
/// peer column used for estimation is a first-stage fit and residuals are
/// recomputed with the structural regressor.
fn fit_equation(
    design: &RegressionDesign,
    peer: &DVector<f64>,
    structural: Option<&DVector<f64>>,
    with_random_effect: bool,
    method: Method,
    first: Option<FirstStageSummary>,
) -> Result<IVEstimate> {
    let (x, names) = design.regressors(peer, "Peer's Rank");
    let n = design.len();
    let p = x.ncols();
    if n <= p {
        return Err(Error::Estimation(format!("{n} observations for {p} regressors")));
    }
    let x_struct = structural.map(|s| {
        let mut xs = x.clone();
        xs.set_column(0, s);
        xs
    });

    if !with_random_effect {
        let d = qr_solve(&x, &design.y, &names)?;
        let resid = &design.y - x_struct.as_ref().unwrap_or(&x) * &d.coef;
        let rss = resid.norm_squared();
        let sigma2 = rss / (n - p) as f64;
        let se = DVector::from_fn(p, |k, _| (sigma2 * d.xtx_inv[(k, k)]).max(0.0).sqrt());
        return Ok(IVEstimate {
            method,
            beta: d.coef[0],
            se_beta: se[0],
            gamma: split_coefficients(&names, &d.coef, &se),
            first_stage: first,
            sigma2_mu: 0.0,
            sigma2_eps: sigma2,
            loglik: gaussian_loglik(rss, n),
            adj_r2: Some(adjusted_r2(&design.y, rss, p)).filter(|v| v.is_finite()),
            n_obs: n,
        });
    }

    let count = design.num_groups();
    let (log_psi, point) = maximise_profile(&design.y, &x, &names, &design.groups, count)?;
    let psi = log_psi.exp();
    // Standard errors conditional on the first stage; for IV the residuals use
    // the structural regressor, quasi-demeaned with the same θ.
    let resid = match &x_struct {
        Some(xs) => {
            let xs_star = quasi_demean(xs, &design.groups, &point.theta, count);
            &point.y_star - xs_star * &point.coef
        }
        None => &point.y_star - &point.x_star * &point.coef,
    };
    let sigma2_se = resid.norm_squared() / (n - p) as f64;
    let se = DVector::from_fn(p, |k, _| (sigma2_se * point.xtx_inv[(k, k)]).max(0.0).sqrt());
    Ok(IVEstimate {
        method,
        beta: point.coef[0],
        se_beta: se[0],
        gamma: split_coefficients(&names, &point.coef, &se),
        first_stage: first,
        sigma2_mu: psi * point.sigma2_ml,
        sigma2_eps: point.sigma2_ml,
        loglik: point.loglik,
        adj_r2: None,
        n_obs: n,
    })
}

/// Two-stage estimate of the friendship-weighted peer effect.
pub fn two_stage_iv(design: &RegressionDesign, with_random_effect: bool) -> Result<IVEstimate> {
    let first = first_stage(design)?;
    if first.summary.f_stat < MIN_FIRST_STAGE_F {
        return Err(Error::WeakInstrument {
            f_stat: first.summary.f_stat,
        });
    }
    let method = if with_random_effect {
        Method::TwoStageRe
    } else {
        Method::TwoStage
    };
    fit_equation(
        design,
        &first.fitted,
        Some(&design.endogenous),
        with_random_effect,
        method,
        Some(first.summary),
    )
}

/// Linear-in-means: the classmate mean enters as an exogenous regressor.
pub fn linear_in_means(design: &RegressionDesign, with_random_effect: bool) -> Result<IVEstimate> {
    let method = if with_random_effect {
        Method::LinearInMeansRe
    } else {
        Method::LinearInMeans
    };
    fit_equation(design, &design.instrument, None, with_random_effect, method, None)
}

/// Friendship-weighted regressor without instrumenting (biased under
/// endogenous friendship formation).
pub fn naive_ols(design: &RegressionDesign, with_random_effect: bool) -> Result<IVEstimate> {
    let method = if with_random_effect {
        Method::OlsRe
    } else {
        Method::Ols
    };
    fit_equation(design, &design.endogenous, None, with_random_effect, method, None)
}

/// Profile log-likelihood of a variant at a fixed `log ψ`.
pub fn profile_loglik(design: &RegressionDesign, method: Method, log_psi: f64) -> Result<f64> {
    let peer = match method {
        Method::LinearInMeans | Method::LinearInMeansRe => design.instrument.clone(),
        Method::Ols | Method::OlsRe => design.endogenous.clone(),
        Method::TwoStage | Method::TwoStageRe => first_stage(design)?.fitted,
    };
    let (x, names) = design.regressors(&peer, "Peer's Rank");
    let stats = GroupStats::new(&design.groups, design.num_groups());
    Ok(profile_point(&design.y, &x, &names, &design.groups, &stats, log_psi)?.loglik)
}

/// The four-column comparison plus the uninstrumented regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationReport {
    pub columns: Vec<IVEstimate>,
    pub naive: Vec<IVEstimate>,
}

pub fn estimate_all(design: &RegressionDesign) -> Result<EstimationReport> {
    Ok(EstimationReport {
        columns: vec![
            linear_in_means(design, false)?,
            linear_in_means(design, true)?,
            two_stage_iv(design, false)?,
            two_stage_iv(design, true)?,
        ],
        naive: vec![naive_ols(design, false)?, naive_ols(design, true)?],
    })
}

const LABEL_WIDTH: usize = 24;
const CELL_WIDTH: usize = 14;

fn table_line(out: &mut String, label: &str, cells: &[String]) {
    let _ = write!(out, "{label:<LABEL_WIDTH$}");
    for c in cells {
        let _ = write!(out, "{c:>CELL_WIDTH$}");
    }
    out.push('\n');
}

fn table_pair(out: &mut String, label: &str, cols: &[IVEstimate], pick: impl Fn(&IVEstimate) -> Option<(f64, f64)>) {
    let est: Vec<String> = cols
        .iter()
        .map(|c| pick(c).map_or(String::new(), |(e, _)| format!("{e:.3}")))
        .collect();
    let se: Vec<String> = cols
        .iter()
        .map(|c| pick(c).map_or(String::new(), |(_, s)| format!("({s:.3})")))
        .collect();
    table_line(out, label, &est);
    table_line(out, "", &se);
}

impl EstimationReport {
    /// Aligned plain-text table, one column per variant.
    pub fn to_table(&self) -> String {
        let cols = &self.columns;
        let mut out = String::new();
        let rule = format!("{}\n", "-".repeat(LABEL_WIDTH + CELL_WIDTH * cols.len()));
        let cells = |f: &dyn Fn(&IVEstimate) -> String| -> Vec<String> { cols.iter().map(f).collect() };
        let re_only = |f: &dyn Fn(&IVEstimate) -> String| -> Vec<String> {
            cols.iter()
                .map(|c| if c.method.has_random_effect() { f(c) } else { String::new() })
                .collect()
        };

        table_line(
            &mut out,
            "",
            &cells(&|c| {
                match c.method {
                    Method::LinearInMeans | Method::LinearInMeansRe => "Lin-in-means",
                    Method::TwoStage | Method::TwoStageRe => "IV",
                    Method::Ols | Method::OlsRe => "OLS",
                }
                .to_string()
            }),
        );
        out.push_str(&rule);
        table_pair(&mut out, "Peer's Rank", cols, |c| Some((c.beta, c.se_beta)));
        for name in CONTROL_NAMES {
            table_pair(&mut out, name, cols, |c| c.coefficient(name).map(|k| (k.estimate, k.se)));
        }
        table_line(&mut out, "Number of observations", &cells(&|c| c.n_obs.to_string()));
        table_line(
            &mut out,
            "Adjusted R2",
            &cells(&|c| c.adj_r2.map_or(String::new(), |v| format!("{v:.3}"))),
        );
        table_line(&mut out, "Log Likelihood", &re_only(&|c| format!("{:.3}", c.loglik)));
        table_line(&mut out, "Class RE variance", &re_only(&|c| format!("{:.4}", c.sigma2_mu)));
        out.push_str(&rule);
        out.push_str("First stage\n");
        table_pair(&mut out, "Classmates' Rank", cols, |c| c.first_stage.map(|f| (f.pi1, f.se)));
        table_line(
            &mut out,
            "First-stage F",
            &cells(&|c| c.first_stage.map_or(String::new(), |f| format!("{:.1}", f.f_stat))),
        );
        table_line(
            &mut out,
            "First-stage adj. R2",
            &cells(&|c| c.first_stage.map_or(String::new(), |f| format!("{:.3}", f.adj_r2))),
        );
        table_line(&mut out, "School FE", &cells(&|_| "YES".to_string()));
        table_line(
            &mut out,
            "Class RE",
            &cells(&|c| if c.method.has_random_effect() { "YES" } else { "NO" }.to_string()),
        );
        out
    }
}
