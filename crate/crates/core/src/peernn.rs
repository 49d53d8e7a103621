//! Friendship-formation network.
//!
//! Three ReLU layers map student features to latent characteristics `sigma`
//! (N×K) and preference parameters `delta` (N×K). Their outer product gives
//! the deterministic utility `upsilon`, and a row-wise softmax with the
//! diagonal masked out gives the adjacency-probability matrix Ω.
//!
//! The loss per classroom is `bias² + μ·var + κ·H + λ·T`, where bias² and var
//! are the closed-form decomposition of the ARD prediction MSE under
//! with-replacement friend draws and the piecewise-linear response map `g`,
//! H is the homophily penalty and T the transitivity penalty. Gradients are
//! accumulated by hand in reverse mode.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{self, Cohort, Split, NUM_TRAITS};
use crate::error::{Error, Result};

/// Width of the latent feature layer.
pub const LATENT: usize = 10;
/// Width of the hidden preference layer.
pub const HIDDEN: usize = 10;

const ROW_SUM_TOL: f64 = 1e-9;
const SINGULAR_TOL: f64 = 1e-9;

/// Intercepts `b_B` of the linear response approximation, indexed by B-1.
pub const G_INTERCEPTS: [f64; 5] = [1.0, 1.090, 1.154, 1.2, 1.333];
/// Slopes `a_B` of the linear response approximation, indexed by B-1.
pub const G_SLOPES: [f64; 5] = [1.5, 0.727, 0.654, 0.5, 0.4];

fn check_b(b: usize) -> Result<()> {
    if (1..=5).contains(&b) {
        Ok(())
    } else {
        Err(Error::Domain(format!("B must be in 1..=5, got {b}")))
    }
}

/// Linear approximation of the ARD response given how many of the `b`
/// drawn friends have the trait.
pub fn g_approx(vdota: f64, b: usize) -> Result<f64> {
    check_b(b)?;
    Ok(G_INTERCEPTS[b - 1] + G_SLOPES[b - 1] * vdota)
}

/// Row-stochastic friendship-probability matrix with an exactly zero
/// diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct OmegaMatrix {
    class_id: u64,
    values: DMatrix<f64>,
}

impl OmegaMatrix {
    pub fn new(class_id: u64, values: DMatrix<f64>) -> Result<Self> {
        let n = values.nrows();
        if n != values.ncols() {
            return Err(Error::Dimension(format!(
                "Ω must be square, got {}×{}",
                n,
                values.ncols()
            )));
        }
        for i in 0..n {
            if values[(i, i)] != 0.0 {
                return Err(Error::Domain(format!("Ω diagonal entry {i} is not 0")));
            }
            let row = values.row(i);
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Domain(format!("Ω row {i} has entries outside [0,1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Domain(format!("Ω row {i} sums to {sum}")));
            }
        }
        Ok(OmegaMatrix { class_id, values })
    }

    pub fn class_id(&self) -> u64 {
        self.class_id
    }

    pub fn size(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.values.row(i).iter().copied().collect()
    }

    /// Friends' weighted average of `z`: Ω z.
    pub fn weighted_mean(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.size() {
            return Err(Error::Dimension(format!(
                "z has length {}, Ω is {}×{}",
                z.len(),
                self.size(),
                self.size()
            )));
        }
        let v = &self.values * DVector::from_column_slice(z);
        Ok(v.iter().copied().collect())
    }
}

/// Row-wise softmax over the off-diagonal entries; the diagonal is exactly 0.
pub fn masked_row_softmax(upsilon: &DMatrix<f64>, class_id: u64) -> Result<OmegaMatrix> {
    let n = upsilon.nrows();
    if n != upsilon.ncols() {
        return Err(Error::Dimension("Υ must be square".into()));
    }
    if n < 2 {
        return Err(Error::Domain(format!("softmax needs N >= 2, got {n}")));
    }
    let mut omega = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut max = f64::NEG_INFINITY;
        for j in (0..n).filter(|&j| j != i) {
            let u = upsilon[(i, j)];
            if !u.is_finite() {
                return Err(Error::NonFinite { stage: "upsilon" });
            }
            max = max.max(u);
        }
        let mut sum = 0.0;
        for j in (0..n).filter(|&j| j != i) {
            let e = (upsilon[(i, j)] - max).exp();
            omega[(i, j)] = e;
            sum += e;
        }
        for j in 0..n {
            omega[(i, j)] /= sum;
        }
    }
    Ok(OmegaMatrix {
        class_id,
        values: omega,
    })
}

/// Covariance of the friend-count vector for `b` with-replacement draws from
/// `row`: `b·(diag(ω) − ωωᵀ)`.
pub fn multinomial_covariance(row: &[f64], b: usize) -> Result<DMatrix<f64>> {
    if row.iter().any(|&p| !(p.is_finite() && p >= 0.0)) {
        return Err(Error::Domain("probability vector has negative or non-finite entries".into()));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOL {
        return Err(Error::Domain(format!("probability vector sums to {sum}")));
    }
    let n = row.len();
    let b = b as f64;
    Ok(DMatrix::from_fn(n, n, |j, k| {
        if j == k {
            b * row[j] * (1.0 - row[j])
        } else {
            -b * (row[j] * row[k])
        }
    }))
}

fn check_loss_dims(omega: &OmegaMatrix, a_s: &DMatrix<f64>, b: &[usize]) -> Result<()> {
    let n = omega.size();
    if a_s.nrows() != n || b.len() != n {
        return Err(Error::Dimension(format!(
            "Ω is {n}×{n}, A_s has {} rows, B has {} entries",
            a_s.nrows(),
            b.len()
        )));
    }
    b.iter().try_for_each(|&bi| check_b(bi))
}

/// Mean squared bias of the expected linear response over (student, question)
/// cells. Student i's expected friend count for a question is `B_i·(ΩA_s)_iq`,
/// so the prediction is `a_B·B_i·(ΩA_s)_iq + b_B`.
pub fn loss_bias_sq(
    omega: &OmegaMatrix,
    a_s: &DMatrix<f64>,
    a_f: &DMatrix<f64>,
    b: &[usize],
) -> Result<f64> {
    check_loss_dims(omega, a_s, b)?;
    if a_f.shape() != a_s.shape() {
        return Err(Error::Dimension("A_s and A_f shapes differ".into()));
    }
    let (n, q) = a_s.shape();
    let m = omega.values() * a_s;
    let mut acc = 0.0;
    for i in 0..n {
        let (slope, icpt) = (G_SLOPES[b[i] - 1] * b[i] as f64, G_INTERCEPTS[b[i] - 1]);
        for k in 0..q {
            let r = slope * m[(i, k)] + icpt - a_f[(i, k)];
            acc += r * r;
        }
    }
    Ok(acc / (n * q) as f64)
}

/// Mean trace of the response covariance, `1/(NQ)·Σ_i a²·tr(Aᵀ Var_Ω_i A)`.
pub fn loss_variance(omega: &OmegaMatrix, a_s: &DMatrix<f64>, b: &[usize]) -> Result<f64> {
    check_loss_dims(omega, a_s, b)?;
    let (n, q) = a_s.shape();
    let m = omega.values() * a_s;
    let m2 = omega.values() * a_s.component_mul(a_s);
    let mut acc = 0.0;
    for i in 0..n {
        let c = G_SLOPES[b[i] - 1].powi(2) * b[i] as f64;
        let tr: f64 = (0..q).map(|k| m2[(i, k)] - m[(i, k)].powi(2)).sum();
        acc += c * tr;
    }
    Ok(acc / (n * q) as f64)
}

/// `‖Ωσ − σ‖²_F`.
pub fn homophily_penalty(omega: &OmegaMatrix, sigma: &DMatrix<f64>) -> Result<f64> {
    if sigma.nrows() != omega.size() {
        return Err(Error::Dimension(format!(
            "σ has {} rows, Ω is {}×{}",
            sigma.nrows(),
            omega.size(),
            omega.size()
        )));
    }
    let e = omega.values() * sigma - sigma;
    Ok(e.norm_squared())
}

/// ΩΩ with its diagonal removed and rows renormalised.
fn two_step_renormalised(omega: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = omega.nrows();
    let p = omega * omega;
    let mut r = DMatrix::zeros(n, n);
    for i in 0..n {
        let d = p[(i, i)];
        if d >= 1.0 - SINGULAR_TOL {
            return Err(Error::Singular { row: i, value: d });
        }
        let scale = 1.0 / (1.0 - d);
        for j in (0..n).filter(|&j| j != i) {
            r[(i, j)] = p[(i, j)] * scale;
        }
    }
    Ok((p, r))
}

/// `‖Ω − (I − diag(ΩΩ))⁻¹(ΩΩ − diag(ΩΩ))‖²_F`.
pub fn transitivity_penalty(omega: &OmegaMatrix) -> Result<f64> {
    let (_, r) = two_step_renormalised(omega.values())?;
    Ok((omega.values() - r).norm_squared())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub mu: f64,
    pub kappa: f64,
    pub lambda: f64,
}

/// Weights that keep the fitted Ω clustered on the default synthetic
/// cohorts, where the unnormalised homophily penalty outweighs the per-cell
/// bias at the default κ.
pub const SYNTHETIC_HYPER: Hyper = Hyper {
    mu: 0.2,
    kappa: 0.001,
    lambda: 0.3,
};

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            mu: 0.2,
            kappa: 0.3,
            lambda: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub bias_sq: f64,
    pub var: f64,
    pub homophily: f64,
    pub transitivity: f64,
    pub total: f64,
    pub hyper: Hyper,
}

impl LossReport {
    fn zero(hyper: Hyper) -> Self {
        LossReport {
            bias_sq: 0.0,
            var: 0.0,
            homophily: 0.0,
            transitivity: 0.0,
            total: 0.0,
            hyper,
        }
    }

    fn add(&mut self, bias_sq: f64, var: f64, homophily: f64, transitivity: f64) {
        self.bias_sq += bias_sq;
        self.var += var;
        self.homophily += homophily;
        self.transitivity += transitivity;
        let h = self.hyper;
        self.total = self.bias_sq + h.mu * self.var + h.kappa * self.homophily
            + h.lambda * self.transitivity;
    }
}

/// Weights of the friendship network.
#[derive(Debug, Clone, PartialEq)]
pub struct PeerNNParams {
    /// D×K
    pub w0: DMatrix<f64>,
    /// K×H
    pub w1: DMatrix<f64>,
    /// H×K
    pub w2: DMatrix<f64>,
}

impl PeerNNParams {
    pub fn zeros(dim: usize) -> Self {
        PeerNNParams {
            w0: DMatrix::zeros(dim, LATENT),
            w1: DMatrix::zeros(LATENT, HIDDEN),
            w2: DMatrix::zeros(HIDDEN, LATENT),
        }
    }

    /// Entries uniform in `[-scale, scale]`, drawn W0, W1, W2 in row-major
    /// order.
    pub fn random(dim: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |r: usize, c: usize| {
            let mut m = DMatrix::zeros(r, c);
            for i in 0..r {
                for j in 0..c {
                    m[(i, j)] = if scale > 0.0 {
                        rng.random_range(-scale..=scale)
                    } else {
                        0.0
                    };
                }
            }
            m
        };
        let w0 = draw(dim, LATENT);
        let w1 = draw(LATENT, HIDDEN);
        let w2 = draw(HIDDEN, LATENT);
        PeerNNParams { w0, w1, w2 }
    }

    pub fn feature_dim(&self) -> usize {
        self.w0.nrows()
    }

    fn validate(&self) -> Result<()> {
        let k = self.w0.ncols();
        if self.w1.nrows() != k || self.w2.ncols() != k || self.w1.ncols() != self.w2.nrows() {
            return Err(Error::Dimension("inconsistent weight shapes".into()));
        }
        let finite = self
            .w0
            .iter()
            .chain(self.w1.iter())
            .chain(self.w2.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite { stage: "parameters" });
        }
        Ok(())
    }

    fn axpy(&mut self, alpha: f64, g: &PeerNNParams) {
        self.w0 += &g.w0 * alpha;
        self.w1 += &g.w1 * alpha;
        self.w2 += &g.w2 * alpha;
    }

    /// Largest absolute entry across all three matrices.
    pub fn max_abs(&self) -> f64 {
        self.w0
            .iter()
            .chain(self.w1.iter())
            .chain(self.w2.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Serialize, Deserialize)]
struct ParamsFile {
    #[serde(rename = "D")]
    d: usize,
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "H")]
    h: usize,
    #[serde(rename = "W0")]
    w0: Vec<Vec<f64>>,
    #[serde(rename = "W1")]
    w1: Vec<Vec<f64>>,
    #[serde(rename = "W2")]
    w2: Vec<Vec<f64>>,
    hyper: Hyper,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<serde_json::Value>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], r: usize, c: usize, name: &str) -> Result<DMatrix<f64>> {
    if rows.len() != r || rows.iter().any(|row| row.len() != c) {
        return Err(Error::Dimension(format!("{name} is not {r}×{c}")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

/// Trained weights together with the settings that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedParams {
    pub params: PeerNNParams,
    pub hyper: Hyper,
    pub seed: u64,
    pub meta: Option<serde_json::Value>,
}

impl SavedParams {
    pub fn to_json(&self) -> Result<String> {
        let p = &self.params;
        let file = ParamsFile {
            d: p.w0.nrows(),
            k: p.w0.ncols(),
            h: p.w1.ncols(),
            w0: rows_of(&p.w0),
            w1: rows_of(&p.w1),
            w2: rows_of(&p.w2),
            hyper: self.hyper,
            seed: self.seed,
            meta: self.meta.clone(),
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: ParamsFile = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        let params = PeerNNParams {
            w0: from_rows(&f.w0, f.d, f.k, "W0")?,
            w1: from_rows(&f.w1, f.k, f.h, "W1")?,
            w2: from_rows(&f.w2, f.h, f.k, "W2")?,
        };
        params.validate()?;
        Ok(SavedParams {
            params,
            hyper: f.hyper,
            seed: f.seed,
            meta: f.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub sigma: DMatrix<f64>,
    pub delta: DMatrix<f64>,
    pub upsilon: DMatrix<f64>,
    pub omega: OmegaMatrix,
    pre0: DMatrix<f64>,
    pre1: DMatrix<f64>,
    hidden: DMatrix<f64>,
    pre2: DMatrix<f64>,
}

fn relu(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Zeroes entries of `grad` where the pre-activation is not positive.
fn relu_back(grad: &mut DMatrix<f64>, pre: &DMatrix<f64>) {
    grad.zip_apply(pre, |g, p| {
        if p <= 0.0 {
            *g = 0.0
        }
    });
}

fn ensure_finite(m: &DMatrix<f64>, stage: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { stage })
    }
}

pub fn forward(params: &PeerNNParams, x: &DMatrix<f64>, class_id: u64) -> Result<Forward> {
    if x.ncols() != params.feature_dim() {
        return Err(Error::Dimension(format!(
            "features have {} columns, parameters expect {}",
            x.ncols(),
            params.feature_dim()
        )));
    }
    ensure_finite(x, "features")?;
    let pre0 = x * &params.w0;
    let sigma = relu(&pre0);
    let pre1 = &sigma * &params.w1;
    let hidden = relu(&pre1);
    let pre2 = &hidden * &params.w2;
    let delta = relu(&pre2);
    let upsilon = &delta * sigma.transpose();
    ensure_finite(&upsilon, "upsilon")?;
    let omega = masked_row_softmax(&upsilon, class_id)?;
    Ok(Forward {
        sigma,
        delta,
        upsilon,
        omega,
        pre0,
        pre1,
        hidden,
        pre2,
    })
}

/// Ω for an arbitrary group of students (the group need not have been seen
/// during training).
pub fn predict_omega(params: &PeerNNParams, x: &DMatrix<f64>, class_id: u64) -> Result<OmegaMatrix> {
    Ok(forward(params, x, class_id)?.omega)
}

/// Per-classroom training inputs.
#[derive(Debug, Clone)]
pub struct ClassroomData {
    pub class_id: u64,
    pub features: DMatrix<f64>,
    pub traits: DMatrix<f64>,
    pub ard: DMatrix<f64>,
    pub num_friends: Vec<usize>,
}

impl ClassroomData {
    pub fn from_cohort(cohort: &Cohort, split: Option<Split>) -> Vec<ClassroomData> {
        cohort
            .classrooms()
            .iter()
            .filter(|c| split.is_none_or(|s| c.split == s))
            .map(|c| {
                let members = cohort.members(c);
                ClassroomData {
                    class_id: c.class_id,
                    features: cohort::feature_matrix(&members),
                    traits: cohort::trait_matrix(&members),
                    ard: cohort::ard_matrix(&members),
                    num_friends: cohort::friend_counts(&members),
                }
            })
            .collect()
    }

    pub fn size(&self) -> usize {
        self.features.nrows()
    }
}

fn classroom_terms(fwd: &Forward, data: &ClassroomData) -> Result<[f64; 4]> {
    let omega = &fwd.omega;
    Ok([
        loss_bias_sq(omega, &data.traits, &data.ard, &data.num_friends)?,
        loss_variance(omega, &data.traits, &data.num_friends)?,
        homophily_penalty(omega, &fwd.sigma)?,
        transitivity_penalty(omega)?,
    ])
}

fn check_training_class(data: &ClassroomData) -> Result<()> {
    if data.size() < 3 {
        return Err(Error::Domain(format!(
            "class {} has {} students; the loss needs N >= 3",
            data.class_id,
            data.size()
        )));
    }
    if data.traits.ncols() != NUM_TRAITS && data.traits.ncols() == 0 {
        return Err(Error::Dimension("no trait columns".into()));
    }
    Ok(())
}

/// Loss summed over classrooms, in the given order.
pub fn total_loss(params: &PeerNNParams, data: &[ClassroomData], hyper: Hyper) -> Result<LossReport> {
    let mut report = LossReport::zero(hyper);
    for class in data {
        check_training_class(class)?;
        let fwd = forward(params, &class.features, class.class_id)?;
        let [b, v, h, t] = classroom_terms(&fwd, class)?;
        report.add(b, v, h, t);
    }
    Ok(report)
}

/// dL/dΩ for one classroom, plus the direct dL/dσ from the homophily term.
fn omega_adjoint(
    fwd: &Forward,
    data: &ClassroomData,
    hyper: Hyper,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let omega = fwd.omega.values();
    let sigma = &fwd.sigma;
    let a = &data.traits;
    let f = &data.ard;
    let (n, q) = a.shape();
    let nq = (n * q) as f64;
    let m = omega * a;

    // bias²: residual r_iq = a_i B_i (ΩA)_iq + b_i − F_iq
    let mut resid = DMatrix::zeros(n, q);
    // var: c_i = a_i² B_i
    let mut coef = vec![0.0; n];
    for i in 0..n {
        let bi = data.num_friends[i];
        let (slope, icpt) = (G_SLOPES[bi - 1], G_INTERCEPTS[bi - 1]);
        let mean_slope = slope * bi as f64;
        for k in 0..q {
            resid[(i, k)] = mean_slope * m[(i, k)] + icpt - f[(i, k)];
        }
        resid.row_mut(i).scale_mut(2.0 * mean_slope / nq);
        coef[i] = slope * slope * bi as f64 / nq;
    }
    let mut d_omega = &resid * a.transpose();

    let sq_rowsum: Vec<f64> = a.row_iter().map(|r| r.iter().map(|v| v * v).sum()).collect();
    let m_at = &m * a.transpose();
    for i in 0..n {
        for j in 0..n {
            d_omega[(i, j)] += hyper.mu * coef[i] * (sq_rowsum[j] - 2.0 * m_at[(i, j)]);
        }
    }

    // H = ‖Ωσ − σ‖²
    let e = omega * sigma - sigma;
    d_omega += (&e * sigma.transpose()) * (2.0 * hyper.kappa);
    let d_sigma = (omega.transpose() * &e - &e) * (2.0 * hyper.kappa);

    // T = ‖Ω − R‖², R = renormalised ΩΩ without diagonal
    let (p, r) = two_step_renormalised(omega)?;
    let diff = omega - &r;
    d_omega += &diff * (2.0 * hyper.lambda);
    let mut d_p = DMatrix::zeros(n, n);
    for i in 0..n {
        let inv = 1.0 / (1.0 - p[(i, i)]);
        let mut d_diag = 0.0;
        for j in (0..n).filter(|&j| j != i) {
            let g_r = -2.0 * hyper.lambda * diff[(i, j)];
            d_p[(i, j)] = g_r * inv;
            d_diag += g_r * p[(i, j)] * inv * inv;
        }
        d_p[(i, i)] = d_diag;
    }
    d_omega += &d_p * omega.transpose() + omega.transpose() * &d_p;

    Ok((d_omega, d_sigma))
}

/// Analytic gradient of [`total_loss`] with respect to W0, W1, W2.
pub fn gradient(
    params: &PeerNNParams,
    data: &[ClassroomData],
    hyper: Hyper,
) -> Result<(LossReport, PeerNNParams)> {
    let mut report = LossReport::zero(hyper);
    let mut grad = PeerNNParams {
        w0: DMatrix::zeros(params.w0.nrows(), params.w0.ncols()),
        w1: DMatrix::zeros(params.w1.nrows(), params.w1.ncols()),
        w2: DMatrix::zeros(params.w2.nrows(), params.w2.ncols()),
    };
    for class in data {
        check_training_class(class)?;
        let fwd = forward(params, &class.features, class.class_id)?;
        let [b, v, h, t] = classroom_terms(&fwd, class)?;
        report.add(b, v, h, t);

        let (d_omega, mut d_sigma) = omega_adjoint(&fwd, class, hyper)?;
        ensure_finite(&d_omega, "omega adjoint")?;

        // masked softmax
        let omega = fwd.omega.values();
        let n = omega.nrows();
        let mut d_ups = DMatrix::zeros(n, n);
        for i in 0..n {
            let dot: f64 = (0..n).map(|k| omega[(i, k)] * d_omega[(i, k)]).sum();
            for j in 0..n {
                d_ups[(i, j)] = omega[(i, j)] * (d_omega[(i, j)] - dot);
            }
        }

        // Υ = δσᵀ
        let mut d_pre2 = &d_ups * &fwd.sigma;
        d_sigma += d_ups.transpose() * &fwd.delta;

        relu_back(&mut d_pre2, &fwd.pre2);
        grad.w2 += fwd.hidden.transpose() * &d_pre2;
        let mut d_pre1 = &d_pre2 * params.w2.transpose();
        relu_back(&mut d_pre1, &fwd.pre1);
        grad.w1 += fwd.sigma.transpose() * &d_pre1;
        d_sigma += &d_pre1 * params.w1.transpose();
        let mut d_pre0 = d_sigma;
        relu_back(&mut d_pre0, &fwd.pre0);
        grad.w0 += class.features.transpose() * &d_pre0;
    }
    for (m, stage) in [(&grad.w0, "dW0"), (&grad.w1, "dW1"), (&grad.w2, "dW2")] {
        ensure_finite(m, stage)?;
    }
    Ok((report, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptConfig {
    pub step_size: f64,
    pub epochs: usize,
    pub seed: u64,
    pub init_scale: f64,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            step_size: 0.01,
            epochs: 1000,
            seed: 17,
            init_scale: 0.3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: PeerNNParams,
    /// Loss before each update; the last entry is the loss of the returned
    /// parameters, so the history has `epochs + 1` entries.
    pub history: Vec<LossReport>,
}

/// Full-batch gradient descent with a fixed step.
pub fn train_data(
    data: &[ClassroomData],
    hyper: Hyper,
    opt: &OptConfig,
) -> Result<TrainResult> {
    let dim = data
        .first()
        .map(|c| c.features.ncols())
        .ok_or_else(|| Error::Domain("no classrooms to train on".into()))?;
    if !(opt.step_size.is_finite() && opt.step_size >= 0.0 && opt.init_scale >= 0.0) {
        return Err(Error::Config("step size and init scale must be >= 0".into()));
    }
    let mut params = PeerNNParams::random(dim, opt.init_scale, opt.seed);
    let mut history = Vec::with_capacity(opt.epochs + 1);
    for epoch in 0..opt.epochs {
        let (report, grad) = gradient(&params, data, hyper).map_err(|e| match e {
            Error::NonFinite { .. } => Error::Divergence { epoch },
            other => other,
        })?;
        if !report.total.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        history.push(report);
        params.axpy(-opt.step_size, &grad);
    }
    let last = total_loss(&params, data, hyper).map_err(|e| match e {
        Error::NonFinite { .. } => Error::Divergence { epoch: opt.epochs },
        other => other,
    })?;
    if !last.total.is_finite() {
        return Err(Error::Divergence { epoch: opt.epochs });
    }
    history.push(last);
    Ok(TrainResult { params, history })
}

/// Trains on the randomly-assigned classrooms of a cohort.
pub fn train(cohort: &Cohort, hyper: Hyper, opt: &OptConfig) -> Result<TrainResult> {
    let data = ClassroomData::from_cohort(cohort, Some(Split::Train));
    train_data(&data, hyper, opt)
}
