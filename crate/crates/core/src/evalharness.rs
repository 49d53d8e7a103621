//! Out-of-sample evaluation of predicted networks and exported artifacts.
//!
//! Prediction error replays the survey: for each student, `B` friends are
//! drawn from the Ω row without replacement, the implied response to each
//! trait question is looked up in the correspondence `G`, and the squared gap
//! to the recorded response is accumulated.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assign::{score_assignment, Assignment, SchoolPool};
use crate::cohort::{self, Classroom, Cohort, MAX_FRIENDS, NUM_TRAITS};
use crate::error::{Error, Result};
use crate::peernn::{OmegaMatrix, PeerNNParams};

/// Reports recorded when the friend count is ambiguous take the mean of the
/// admissible responses.
pub fn correspondence_g(count: usize, b: usize) -> Result<f64> {
    if b == 0 || b > MAX_FRIENDS || count > b {
        return Err(Error::Domain(format!(
            "G requires 0 <= count <= B and 1 <= B <= 5, got count={count}, B={b}"
        )));
    }
    Ok(match (count, b) {
        (0, _) => 1.0,
        (1, 1) | (2, 2) | (2, 3) => 2.5,
        (1, _) | (2, _) => 2.0,
        _ => 3.0,
    })
}

/// Removes the drawn index from `xi` and rescales the rest to sum to one.
pub fn renormalize(xi: &[f64], drawn: usize) -> Vec<f64> {
    let keep = 1.0 - xi[drawn];
    xi.iter()
        .enumerate()
        .map(|(k, &p)| if k == drawn { 0.0 } else { p / keep })
        .collect()
}

fn draw_in_order<R: Rng>(row: &[f64], b: usize, order: &[usize], rng: &mut R) -> Result<Vec<usize>> {
    if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::Sampling("probability row has invalid entries".into()));
    }
    let support = row.iter().filter(|&&p| p > 0.0).count();
    if b > support {
        return Err(Error::Sampling(format!(
            "cannot draw {b} distinct friends from {support} candidates"
        )));
    }
    let mut xi = row.to_vec();
    let mut drawn = Vec::with_capacity(b);
    for _ in 0..b {
        let total: f64 = xi.iter().sum();
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for &k in order {
            if xi[k] <= 0.0 {
                continue;
            }
            acc += xi[k];
            pick = Some(k);
            if u < acc {
                break;
            }
        }
        let k = pick.expect("positive support remains");
        drawn.push(k);
        xi = renormalize(&xi, k);
    }
    Ok(drawn)
}

/// Draws `b` distinct indices; returns the indicator vector.
pub fn sample_without_replacement<R: Rng>(row: &[f64], b: usize, rng: &mut R) -> Result<Vec<u8>> {
    let order: Vec<usize> = (0..row.len()).collect();
    let mut v = vec![0u8; row.len()];
    for k in draw_in_order(row, b, &order, rng)? {
        v[k] = 1;
    }
    Ok(v)
}

fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent stream per (seed, replicate, student).
pub fn derive_seed(seed: u64, replicate: u64, student: u64) -> u64 {
    mix(mix(mix(seed) ^ replicate) ^ student)
}

/// Inputs for replaying one classroom's survey.
#[derive(Debug, Clone)]
pub struct SurveyData {
    pub ids: Vec<u64>,
    /// N×Q own traits.
    pub traits: DMatrix<f64>,
    /// N×Q recorded responses.
    pub ard: DMatrix<f64>,
    pub num_friends: Vec<usize>,
}

impl SurveyData {
    pub fn from_classroom(cohort: &Cohort, class: &Classroom) -> Self {
        let members = cohort.members(class);
        SurveyData {
            ids: members.iter().map(|s| s.id).collect(),
            traits: cohort::trait_matrix(&members),
            ard: cohort::ard_matrix(&members),
            num_friends: cohort::friend_counts(&members),
        }
    }
}

/// Squared-error totals, one row per replicate and one column per trait,
/// summed over students.
pub fn survey_errors(omega: &OmegaMatrix, data: &SurveyData, reps: usize, seed: u64) -> Result<DMatrix<f64>> {
    let n = data.ids.len();
    if omega.size() != n || data.traits.nrows() != n || data.ard.nrows() != n || data.num_friends.len() != n {
        return Err(Error::Dimension(format!(
            "Ω is {0}×{0} but survey data has {n} students",
            omega.size()
        )));
    }
    let q = data.traits.ncols();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&k| data.ids[k]);
    let mut totals = DMatrix::zeros(reps, q);
    for r in 0..reps {
        for i in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, r as u64, data.ids[i]));
            let b = data.num_friends[i];
            let friends = draw_in_order(&omega.row(i), b, &order, &mut rng)?;
            for t in 0..q {
                let count = friends.iter().filter(|&&j| data.traits[(j, t)] > 0.5).count();
                let d = correspondence_g(count, b)? - data.ard[(i, t)];
                totals[(r, t)] += d * d;
            }
        }
    }
    Ok(totals)
}

/// Replicate totals for one trait question (`trait_index` counts from 0).
pub fn prediction_error(
    omega: &OmegaMatrix,
    data: &SurveyData,
    trait_index: usize,
    reps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if trait_index >= data.traits.ncols() {
        return Err(Error::Domain(format!("no trait question {trait_index}")));
    }
    Ok(survey_errors(omega, data, reps, seed)?.column(trait_index).iter().copied().collect())
}

/// Uniform off-diagonal Ω, the network implied by linear-in-means.
pub fn uniform_baseline_omega(n: usize, class_id: u64) -> Result<OmegaMatrix> {
    if n < 2 {
        return Err(Error::Domain("uniform Ω needs N >= 2".into()));
    }
    let w = 1.0 / (n - 1) as f64;
    OmegaMatrix::new(class_id, DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { w }))
}

/// Linear interpolation between order statistics (type 7).
pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let h = (v.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitErrors {
    /// 1-based question number.
    pub question: usize,
    pub peernn: Vec<f64>,
    pub uniform: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub question: usize,
    pub model: String,
    pub mean: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    /// Share of replicates where PeerNN's total is below the baseline's.
    pub win_rate: f64,
}

/// Per-question replicate totals, summed over the evaluated classrooms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitErrorReport {
    pub replicates: usize,
    pub seed: u64,
    pub class_ids: Vec<u64>,
    pub traits: Vec<TraitErrors>,
}

/// Replays the survey under each predicted Ω and under the uniform
/// baseline, with the same random draws for both.
pub fn trait_error_report(cohort: &Cohort, omegas: &[OmegaMatrix], reps: usize, seed: u64) -> Result<TraitErrorReport> {
    if reps == 0 {
        return Err(Error::Config("need at least one replicate".into()));
    }
    let mut nn = DMatrix::zeros(reps, NUM_TRAITS);
    let mut uni = DMatrix::zeros(reps, NUM_TRAITS);
    let mut class_ids = Vec::new();
    for omega in omegas {
        let class = cohort
            .classroom(omega.class_id())
            .ok_or_else(|| Error::Domain(format!("class {} not in cohort", omega.class_id())))?;
        let data = SurveyData::from_classroom(cohort, class);
        nn += survey_errors(omega, &data, reps, seed)?;
        let base = uniform_baseline_omega(class.size(), class.class_id)?;
        uni += survey_errors(&base, &data, reps, seed)?;
        class_ids.push(class.class_id);
    }
    let traits = (0..NUM_TRAITS)
        .map(|t| TraitErrors {
            question: t + 1,
            peernn: nn.column(t).iter().copied().collect(),
            uniform: uni.column(t).iter().copied().collect(),
        })
        .collect();
    Ok(TraitErrorReport {
        replicates: reps,
        seed,
        class_ids,
        traits,
    })
}

impl TraitErrors {
    pub fn win_rate(&self) -> f64 {
        let wins = self.peernn.iter().zip(&self.uniform).filter(|(a, b)| a < b).count();
        wins as f64 / self.peernn.len() as f64
    }
}

impl TraitErrorReport {
    pub fn summary(&self) -> Vec<ErrorSummary> {
        let mut out = Vec::new();
        for t in &self.traits {
            for (model, v) in [("peernn", &t.peernn), ("uniform", &t.uniform)] {
                out.push(ErrorSummary {
                    question: t.question,
                    model: model.to_string(),
                    mean: v.iter().sum::<f64>() / v.len() as f64,
                    q25: quantile(v, 0.25),
                    q50: quantile(v, 0.5),
                    q75: quantile(v, 0.75),
                    win_rate: t.win_rate(),
                });
            }
        }
        out
    }

    /// Long format: `trait,replicate,model,pe`.
    pub fn write_csv(&self, path: &Path, preamble: &[String]) -> Result<()> {
        let mut w = CommentedWriter::create(path, preamble)?;
        w.line("trait,replicate,model,pe")?;
        for t in &self.traits {
            for (model, v) in [("peernn", &t.peernn), ("uniform", &t.uniform)] {
                for (r, pe) in v.iter().enumerate() {
                    w.line(&format!("{},{},{},{}", t.question, r + 1, model, pe))?;
                }
            }
        }
        w.finish()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmegaDiagnostics {
    pub class_id: u64,
    /// Mean friendship mass a student places on their own gender; absent
    /// for single-gender classrooms.
    pub homophily: Option<f64>,
    /// Largest column sum over the mean column sum.
    pub centrality: f64,
    /// Coefficient of variation of column sums.
    pub dispersion: f64,
    /// Largest entry of each row.
    pub row_max: Vec<f64>,
}

pub fn omega_diagnostics(omega: &OmegaMatrix, genders: &[u8]) -> Result<OmegaDiagnostics> {
    let n = omega.size();
    if genders.len() != n {
        return Err(Error::Dimension(format!("{} genders for {n} students", genders.len())));
    }
    let m = omega.values();
    let single_gender = genders.iter().all(|&g| g == genders[0]);
    let homophily = (!single_gender).then(|| {
        (0..n)
            .map(|i| (0..n).filter(|&j| genders[j] == genders[i]).map(|j| m[(i, j)]).sum::<f64>())
            .sum::<f64>()
            / n as f64
    });
    let cols: Vec<f64> = (0..n).map(|j| m.column(j).sum()).collect();
    let mean = cols.iter().sum::<f64>() / n as f64;
    let max = cols.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let var = cols.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n as f64;
    Ok(OmegaDiagnostics {
        class_id: omega.class_id(),
        homophily,
        centrality: max / mean,
        dispersion: var.sqrt() / mean,
        row_max: (0..n).map(|i| m.row(i).max()).collect(),
    })
}

/// Pairwise demeaned peer effects `q_ij = Ω_ij z̃_j + Ω_ji z̃_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct QMatrix {
    pub class_id: u64,
    pub values: DMatrix<f64>,
}

pub fn q_matrix(omega: &OmegaMatrix, z: &[f64]) -> Result<QMatrix> {
    let n = omega.size();
    if z.len() != n {
        return Err(Error::Dimension(format!("z has length {}, Ω is {n}×{n}", z.len())));
    }
    let mean = z.iter().sum::<f64>() / n as f64;
    let zt: Vec<f64> = z.iter().map(|v| v - mean).collect();
    let m = omega.values();
    let values = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            m[(i, j)] * zt[j] + m[(j, i)] * zt[i]
        }
    });
    Ok(QMatrix {
        class_id: omega.class_id(),
        values,
    })
}

struct CommentedWriter {
    path: PathBuf,
    inner: BufWriter<File>,
}

impl CommentedWriter {
    fn create(path: &Path, preamble: &[String]) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = CommentedWriter {
            path: path.to_path_buf(),
            inner: BufWriter::new(file),
        };
        for line in preamble {
            w.line(&format!("# {line}"))?;
        }
        Ok(w)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.inner, "{s}").map_err(|e| Error::io(&self.path, e))
    }

    fn finish(mut self) -> Result<()> {
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Writes the matrix as plain CSV (no header); values use the shortest
/// representation that parses back to the same `f64`.
pub fn write_matrix_csv(m: &DMatrix<f64>, path: &Path, preamble: &[String]) -> Result<()> {
    let mut w = CommentedWriter::create(path, preamble)?;
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
        w.line(&row.join(","))?;
    }
    w.finish()
}

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .enumerate()
            .map(|(c, s)| {
                s.trim().parse::<f64>().map_err(|e| Error::Parse {
                    row: k + 1,
                    column: (c + 1).to_string(),
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if rows.first().is_some_and(|r| r.len() != row.len()) {
            return Err(Error::Format(format!("ragged matrix at line {}", k + 1)));
        }
        rows.push(row);
    }
    let ncols = rows.first().map_or(0, Vec::len);
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// Ω as CSV: a header of student ids, then one row per student.
pub fn write_omega_csv(omega: &OmegaMatrix, ids: &[u64], path: &Path, preamble: &[String]) -> Result<()> {
    if ids.len() != omega.size() {
        return Err(Error::Dimension(format!("{} ids for a {}-student Ω", ids.len(), omega.size())));
    }
    let mut w = CommentedWriter::create(path, preamble)?;
    let header: Vec<String> = ids.iter().map(u64::to_string).collect();
    w.line(&header.join(","))?;
    for i in 0..omega.size() {
        let row: Vec<String> = omega.row(i).iter().map(f64::to_string).collect();
        w.line(&row.join(","))?;
    }
    w.finish()
}

/// Reads a file written by [`write_omega_csv`]; returns the ids and Ω.
pub fn read_omega_csv(path: &Path, class_id: u64) -> Result<(Vec<u64>, OmegaMatrix)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut ids: Option<Vec<u64>> = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let parse_err = |c: usize, m: String| Error::Parse {
            row: k + 1,
            column: (c + 1).to_string(),
            message: m,
        };
        if ids.is_none() {
            ids = Some(
                line.split(',')
                    .enumerate()
                    .map(|(c, s)| s.trim().parse::<u64>().map_err(|e| parse_err(c, e.to_string())))
                    .collect::<Result<_>>()?,
            );
            continue;
        }
        rows.push(
            line.split(',')
                .enumerate()
                .map(|(c, s)| s.trim().parse::<f64>().map_err(|e| parse_err(c, e.to_string())))
                .collect::<Result<_>>()?,
        );
    }
    let ids = ids.ok_or_else(|| Error::Format(format!("{} has no header", path.display())))?;
    let n = ids.len();
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(Error::Format(format!("{} is not a {n}×{n} matrix", path.display())));
    }
    let omega = OmegaMatrix::new(class_id, DMatrix::from_fn(n, n, |i, j| rows[i][j]))?;
    Ok((ids, omega))
}

/// Gray level of each cell: 0 (black) at the maximum, 255 at the minimum;
/// a constant matrix maps to 128.
pub fn gray_levels(m: &DMatrix<f64>) -> DMatrix<u8> {
    let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m.map(|v| {
        if hi > lo {
            255 - (255.0 * (v - lo) / (hi - lo)).round() as u8
        } else {
            128
        }
    })
}

/// Writes `<stem>.csv` and `<stem>.pgm` (ASCII graymap, each cell drawn as a
/// `scale`×`scale` block, darker = larger).
pub fn export_heatmap(m: &DMatrix<f64>, stem: &Path, scale: usize, preamble: &[String]) -> Result<(PathBuf, PathBuf)> {
    if scale == 0 {
        return Err(Error::Config("heatmap scale must be >= 1".into()));
    }
    let csv_path = stem.with_extension("csv");
    let pgm_path = stem.with_extension("pgm");
    write_matrix_csv(m, &csv_path, preamble)?;

    let gray = gray_levels(m);
    let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let file = File::create(&pgm_path).map_err(|e| Error::io(&pgm_path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(&pgm_path, e);
    writeln!(w, "P2").map_err(io)?;
    for line in preamble {
        writeln!(w, "# {line}").map_err(io)?;
    }
    writeln!(w, "# darker = larger; black = {hi}, white = {lo}").map_err(io)?;
    writeln!(w, "{} {}", m.ncols() * scale, m.nrows() * scale).map_err(io)?;
    writeln!(w, "255").map_err(io)?;
    for i in 0..m.nrows() {
        let mut row = Vec::with_capacity(m.ncols() * scale);
        for j in 0..m.ncols() {
            for _ in 0..scale {
                row.push(gray[(i, j)].to_string());
            }
        }
        let line = row.join(" ");
        for _ in 0..scale {
            writeln!(w, "{line}").map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    Ok((csv_path, pgm_path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDistribution {
    pub policy: String,
    pub student_ids: Vec<u64>,
    /// 1 or 2 for each student.
    pub classroom: Vec<u8>,
    pub peer_effects: Vec<f64>,
    pub mean: f64,
    pub min: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
}

/// Predicted peer effects under each named policy.
pub fn peer_effect_distribution(
    policies: &[(&str, &Assignment)],
    pool: &SchoolPool,
    params: &PeerNNParams,
    beta: f64,
) -> Result<Vec<PolicyDistribution>> {
    policies
        .iter()
        .map(|&(name, a)| {
            let score = score_assignment(pool, a, params, beta)?;
            let ids: Vec<u64> = a.c1.iter().chain(&a.c2).copied().collect();
            let classroom: Vec<u8> = a.c1.iter().map(|_| 1).chain(a.c2.iter().map(|_| 2)).collect();
            let pe: Vec<f64> = score.pe1.iter().chain(&score.pe2).copied().collect();
            Ok(PolicyDistribution {
                policy: name.to_string(),
                student_ids: ids,
                classroom,
                mean: score.mean,
                min: score.min(),
                q25: quantile(&pe, 0.25),
                q50: quantile(&pe, 0.5),
                q75: quantile(&pe, 0.75),
                peer_effects: pe,
            })
        })
        .collect()
}

/// Long format `policy,student_id,classroom,peer_effect`, followed by one
/// summary comment per policy.
pub fn write_distribution_csv(dists: &[PolicyDistribution], path: &Path, preamble: &[String]) -> Result<()> {
    let mut w = CommentedWriter::create(path, preamble)?;
    for d in dists {
        w.line(&format!(
            "# {}: mean={} q25={} q50={} q75={} min={}",
            d.policy, d.mean, d.q25, d.q50, d.q75, d.min
        ))?;
    }
    w.line("policy,student_id,classroom,peer_effect")?;
    for d in dists {
        for k in 0..d.peer_effects.len() {
            w.line(&format!("{},{},{},{}", d.policy, d.student_ids[k], d.classroom[k], d.peer_effects[k]))?;
        }
    }
    w.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assign::{brute_force_optimal, random_assignment, standard_disruptive_instance, Objective};
    use crate::peernn::masked_row_softmax;
    use approx::assert_abs_diff_eq;

    fn random_omega(n: usize, seed: u64) -> OmegaMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ups = DMatrix::from_fn(n, n, |_, _| rng.random_range(-2.0..2.0));
        masked_row_softmax(&ups, 9).unwrap()
    }

    #[test]
    fn g_table() {
        assert_eq!(correspondence_g(0, 4).unwrap(), 1.0);
        assert_eq!(correspondence_g(1, 1).unwrap(), 2.5);
        assert_eq!(correspondence_g(4, 5).unwrap(), 3.0);
        assert_eq!(correspondence_g(2, 5).unwrap(), 2.0);
        assert!(correspondence_g(3, 2).is_err());
        assert!(correspondence_g(0, 0).is_err());
        assert!(correspondence_g(0, 6).is_err());
    }

    #[test]
    fn g_is_mean_of_admissible_encodings() {
        // every G value lies in [1,3] and equals the encoder wherever the cell
        // is unambiguous
        for b in 1..=5 {
            for c in 0..=b {
                let g = correspondence_g(c, b).unwrap();
                let e = f64::from(cohort::ard_encode(c, b).unwrap());
                if g.fract() == 0.0 {
                    assert_eq!(g, e);
                } else {
                    assert_eq!(e, 3.0);
                    assert_eq!(g, 2.5);
                }
            }
        }
    }

    #[test]
    fn renormalization_example() {
        let xi = [0.0, 0.5, 0.5];
        assert_eq!(renormalize(&xi, 1), vec![0.0, 0.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = sample_without_replacement(&xi, 2, &mut rng).unwrap();
        assert_eq!(v, vec![0, 1, 1]);
    }

    #[test]
    fn exhaustive_draw_selects_all_classmates() {
        let omega = random_omega(6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..6 {
            let v = sample_without_replacement(&omega.row(i), 5, &mut rng).unwrap();
            let expected: Vec<u8> = (0..6).map(|j| u8::from(j != i)).collect();
            assert_eq!(v, expected);
        }
    }

    #[test]
    fn insufficient_support_is_sampling_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(matches!(
            sample_without_replacement(&[0.0, 1.0, 0.0], 2, &mut rng),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn first_draw_frequencies_match_row() {
        let row = [0.0, 0.1, 0.2, 0.3, 0.4];
        let draws = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 5];
        for _ in 0..draws {
            let first = draw_in_order(&row, 1, &[0, 1, 2, 3, 4], &mut rng).unwrap()[0];
            counts[first] += 1;
        }
        for k in 0..5 {
            let p = row[k];
            let se = (p * (1.0 - p) / draws as f64).sqrt();
            let freq = counts[k] as f64 / draws as f64;
            assert!((freq - p).abs() <= 3.0 * se.max(1e-12), "index {k}: {freq} vs {p}");
        }
    }

    fn survey(n: usize, seed: u64) -> SurveyData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SurveyData {
            ids: (0..n as u64).map(|k| 100 + 7 * k).collect(),
            traits: DMatrix::from_fn(n, 3, |_, _| f64::from(u8::from(rng.random_bool(0.5)))),
            ard: DMatrix::from_fn(n, 3, |_, _| rng.random_range(1..=3) as f64),
            num_friends: (0..n).map(|_| rng.random_range(1..=3)).collect(),
        }
    }

    #[test]
    fn perfect_predictor_has_zero_error() {
        // degenerate Ω on the true friend, responses built with G
        let n = 5;
        let mut data = survey(n, 6);
        data.num_friends = vec![1; n];
        let friend = |i: usize| (i + 1) % n;
        let m = DMatrix::from_fn(n, n, |i, j| f64::from(u8::from(j == friend(i))));
        let omega = OmegaMatrix::new(1, m).unwrap();
        for i in 0..n {
            for t in 0..3 {
                let count = usize::from(data.traits[(friend(i), t)] > 0.5);
                data.ard[(i, t)] = correspondence_g(count, 1).unwrap();
            }
        }
        let e = survey_errors(&omega, &data, 4, 7).unwrap();
        assert!(e.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn replicates_are_seeded() {
        let data = survey(6, 8);
        let omega = random_omega(6, 9);
        let a = prediction_error(&omega, &data, 1, 1, 10).unwrap();
        let b = prediction_error(&omega, &data, 1, 1, 10).unwrap();
        assert_eq!(a, b);
        let many = prediction_error(&omega, &data, 1, 50, 10).unwrap();
        assert_eq!(many[0], a[0]);
        assert!(many.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn totals_invariant_to_student_order() {
        let n = 7;
        let data = survey(n, 11);
        let omega = random_omega(n, 12);
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let pm = DMatrix::from_fn(n, n, |i, j| omega.values()[(perm[i], perm[j])]);
        let permuted = SurveyData {
            ids: perm.iter().map(|&k| data.ids[k]).collect(),
            traits: data.traits.select_rows(perm.iter()),
            ard: data.ard.select_rows(perm.iter()),
            num_friends: perm.iter().map(|&k| data.num_friends[k]).collect(),
        };
        let a = survey_errors(&omega, &data, 20, 13).unwrap();
        let b = survey_errors(&OmegaMatrix::new(9, pm).unwrap(), &permuted, 20, 13).unwrap();
        assert!((a - b).amax() < 1e-12);
    }

    #[test]
    fn uniform_baseline_matches_zero_softmax() {
        let u = uniform_baseline_omega(3, 0).unwrap();
        assert_eq!(u.row(0), vec![0.0, 0.5, 0.5]);
        for n in 2..8 {
            let u = uniform_baseline_omega(n, 0).unwrap();
            let s = masked_row_softmax(&DMatrix::zeros(n, n), 0).unwrap();
            assert!((u.values() - s.values()).amax() < 1e-15);
        }
        assert!(uniform_baseline_omega(1, 0).is_err());
    }

    #[test]
    fn diagnostics_cases() {
        let u = uniform_baseline_omega(6, 1).unwrap();
        let d = omega_diagnostics(&u, &[0, 0, 0, 1, 1, 1]).unwrap();
        assert_abs_diff_eq!(d.centrality, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.dispersion, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.homophily.unwrap(), 0.4, epsilon = 1e-12);
        let block = DMatrix::from_fn(4, 4, |i, j| if i != j && i / 2 == j / 2 { 1.0 } else { 0.0 });
        let d = omega_diagnostics(&OmegaMatrix::new(2, block).unwrap(), &[1, 1, 0, 0]).unwrap();
        assert_eq!(d.homophily, Some(1.0));
        assert_eq!(d.row_max, vec![1.0; 4]);
        assert_eq!(omega_diagnostics(&u, &[1; 6]).unwrap().homophily, None);
    }

    #[test]
    fn q_matrix_cases() {
        let swap = OmegaMatrix::new(0, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        let q = q_matrix(&swap, &[0.2, 0.8]).unwrap();
        assert_abs_diff_eq!(q.values[(0, 1)], 0.0, epsilon = 1e-15);
        let omega = random_omega(6, 14);
        assert!(q_matrix(&omega, &[0.4; 6]).unwrap().values.amax() < 1e-15);
        let z = [0.1, 0.9, 0.3, 0.5, 0.7, 0.2];
        let q = q_matrix(&omega, &z).unwrap();
        assert!((&q.values - q.values.transpose()).amax() < 1e-12);
        assert!(q_matrix(&omega, &z[..5]).is_err());
    }

    #[test]
    fn quantiles_type7() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert_abs_diff_eq!(quantile(&v, 0.5), 2.5);
        assert_abs_diff_eq!(quantile(&v, 0.25), 1.75);
    }

    #[test]
    fn heatmap_extrema_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = DMatrix::from_row_slice(2, 2, &[0.1, 0.7, 0.3, 1.0 / 3.0]);
        let (csv, pgm) = export_heatmap(&m, &dir.path().join("h"), 1, &["test".into()]).unwrap();
        assert_eq!(read_matrix_csv(&csv).unwrap(), m);
        let text = std::fs::read_to_string(&pgm).unwrap();
        let body: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(body[0], "P2");
        assert_eq!(body[1], "2 2");
        assert_eq!(body[2], "255");
        assert_eq!(body[3], "255 0");
        let scaled = gray_levels(&m);
        assert_eq!(scaled[(1, 0)], 255 - (255.0f64 * 0.2 / 0.6).round() as u8);

        let (_, pgm) = export_heatmap(&DMatrix::from_element(3, 3, 0.5), &dir.path().join("c"), 2, &[]).unwrap();
        let text = std::fs::read_to_string(&pgm).unwrap();
        let pixels: Vec<&str> = text.lines().skip(4).flat_map(|l| l.split(' ')).collect();
        assert_eq!(pixels.len(), 36);
        assert!(pixels.iter().all(|&p| p == "128"));
    }

    #[test]
    fn heatmap_to_missing_directory_is_io_error() {
        let m = DMatrix::from_element(2, 2, 0.5);
        let r = export_heatmap(&m, Path::new("/nonexistent/dir/h"), 1, &[]);
        assert!(matches!(r, Err(Error::Io { .. })));
    }

    #[test]
    fn distributions_on_disruptive_instance() {
        let inst = standard_disruptive_instance();
        let (ga, _) = brute_force_optimal(&inst.pool, &inst.params, Objective::ga(1.0)).unwrap();
        let (afga, _) = brute_force_optimal(&inst.pool, &inst.params, Objective::afga(1.0, 0.2, 0.2)).unwrap();
        let raw = random_assignment(&inst.pool, 0).unwrap();
        let d = peer_effect_distribution(
            &[("raw", &raw), ("GA", &ga), ("AFGA", &afga), ("GA again", &ga)],
            &inst.pool,
            &inst.params,
            1.0,
        )
        .unwrap();
        assert_eq!(d[1].peer_effects, d[3].peer_effects);
        assert!(d[1].min < d[2].min);
        assert!(d[1].mean >= d[2].mean);
        let raw_mean = (0..100)
            .map(|s| {
                let a = random_assignment(&inst.pool, s).unwrap();
                score_assignment(&inst.pool, &a, &inst.params, 1.0).unwrap().mean
            })
            .sum::<f64>()
            / 100.0;
        assert!(d[2].mean >= raw_mean, "AFGA {} vs raw {}", d[2].mean, raw_mean);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dist.csv");
        write_distribution_csv(&d, &path, &[]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 1 + 4 * 12);
    }

    #[test]
    fn omega_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("omega.csv");
        let omega = random_omega(5, 12);
        write_omega_csv(&omega, &[4, 8, 15, 16, 23], &path, &["seed=1".into()]).unwrap();
        let (ids, back) = read_omega_csv(&path, 9).unwrap();
        assert_eq!(ids, vec![4, 8, 15, 16, 23]);
        assert_eq!(back, omega);
        assert!(write_omega_csv(&omega, &[1, 2], &path, &[]).is_err());
    }
}
