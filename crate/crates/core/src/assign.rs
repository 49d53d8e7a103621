//! Two-classroom assignment search.
//!
//! A school's students are split into classrooms `C1` and `C2` whose sizes
//! differ by at most one and whose minority-gender share in `C1` lies in
//! `[0.35, 0.65]`. The fitness of a split is the mean predicted peer effect
//! `β·Ω̃`, with Ω re-predicted for each candidate classroom; the fair variant
//! subtracts within- and across-classroom dispersion.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, BOY, GIRL};
use crate::error::{Error, Result};
use crate::peernn::{predict_omega, OmegaMatrix, PeerNNParams};

pub const GENDER_BAND: (f64, f64) = (0.35, 0.65);
pub const BRUTE_FORCE_LIMIT: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitnessKind {
    Ga,
    Afga,
}

impl std::str::FromStr for FitnessKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ga" => Ok(FitnessKind::Ga),
            "afga" => Ok(FitnessKind::Afga),
            other => Err(Error::Config(format!("unknown fitness `{other}` (ga | afga)"))),
        }
    }
}

/// The students of one school with what the fitness needs.
#[derive(Debug, Clone)]
pub struct SchoolPool {
    school_id: u64,
    ids: Vec<u64>,
    genders: Vec<u8>,
    z: Vec<f64>,
    features: DMatrix<f64>,
}

impl SchoolPool {
    /// Rows are reordered by ascending id.
    pub fn new(
        school_id: u64,
        ids: Vec<u64>,
        genders: Vec<u8>,
        z: Vec<f64>,
        features: DMatrix<f64>,
    ) -> Result<Self> {
        let n = ids.len();
        if genders.len() != n || z.len() != n || features.nrows() != n {
            return Err(Error::Dimension("pool fields have different lengths".into()));
        }
        if n < 4 {
            return Err(Error::Domain(format!(
                "school {school_id} has {n} students; two classrooms need at least 4"
            )));
        }
        if genders.iter().any(|&g| g != BOY && g != GIRL) {
            return Err(Error::Domain("gender must be 0 or 1".into()));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&k| ids[k]);
        if order.windows(2).any(|w| ids[w[0]] == ids[w[1]]) {
            return Err(Error::Domain("duplicate student id in pool".into()));
        }
        Ok(SchoolPool {
            school_id,
            ids: order.iter().map(|&k| ids[k]).collect(),
            genders: order.iter().map(|&k| genders[k]).collect(),
            z: order.iter().map(|&k| z[k]).collect(),
            features: features.select_rows(order.iter()),
        })
    }

    pub fn from_cohort(cohort: &Cohort, school_id: u64) -> Result<Self> {
        let members = cohort.school_members(school_id);
        if members.is_empty() {
            return Err(Error::Domain(format!("no students in school {school_id}")));
        }
        let dim = cohort.feature_dim();
        let features = DMatrix::from_fn(members.len(), dim, |i, k| members[i].features[k]);
        SchoolPool::new(
            school_id,
            members.iter().map(|s| s.id).collect(),
            members.iter().map(|s| s.gender).collect(),
            members.iter().map(|s| s.z).collect(),
            features,
        )
    }

    pub fn school_id(&self) -> u64 {
        self.school_id
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    /// The less numerous gender; girls on a tie.
    pub fn minority_gender(&self) -> u8 {
        let boys = self.genders.iter().filter(|&&g| g == BOY).count();
        minority_gender(boys, self.len() - boys)
    }

    fn index_of(&self, id: u64) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }

    fn indices(&self, ids: &[u64]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|&id| {
                self.index_of(id)
                    .ok_or_else(|| Error::Domain(format!("student {id} is not in school {}", self.school_id)))
            })
            .collect()
    }

    fn minority_count(&self, idx: &[usize]) -> usize {
        let j = self.minority_gender();
        idx.iter().filter(|&&k| self.genders[k] == j).count()
    }

    fn band_ok(&self, c1: &[usize]) -> bool {
        let j = self.minority_gender();
        let total = self.genders.iter().filter(|&&g| g == j).count();
        check(self.minority_count(c1), total)
    }

    fn complement(&self, c1: &[usize]) -> Vec<usize> {
        let mut inside = vec![false; self.len()];
        for &k in c1 {
            inside[k] = true;
        }
        (0..self.len()).filter(|&k| !inside[k]).collect()
    }

    fn assignment(&self, c1: &[usize]) -> Assignment {
        let c2 = self.complement(c1);
        let mut a = Assignment {
            c1: c1.iter().map(|&k| self.ids[k]).collect(),
            c2: c2.iter().map(|&k| self.ids[k]).collect(),
            feasible: false,
        };
        a.c1.sort_unstable();
        a.c2.sort_unstable();
        a.feasible = self.is_feasible(&a);
        a
    }

    /// Partition, size parity and gender band.
    pub fn is_feasible(&self, a: &Assignment) -> bool {
        let all: HashSet<u64> = a.c1.iter().chain(&a.c2).copied().collect();
        if all.len() != self.len() || a.c1.len() + a.c2.len() != self.len() {
            return false;
        }
        if a.c1.len().abs_diff(a.c2.len()) > 1 {
            return false;
        }
        match self.indices(&a.c1) {
            Ok(c1) => self.band_ok(&c1),
            Err(_) => false,
        }
    }
}

pub fn minority_gender(boys: usize, girls: usize) -> u8 {
    if boys < girls {
        BOY
    } else {
        GIRL
    }
}

/// Gender-band test: `0.35·N_j ≤ count ≤ 0.65·N_j` for the minority gender.
pub fn check(minority_in_c1: usize, minority_total: usize) -> bool {
    let c = minority_in_c1 as f64;
    let n = minority_total as f64;
    GENDER_BAND.0 * n <= c && c <= GENDER_BAND.1 * n
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub c1: Vec<u64>,
    pub c2: Vec<u64>,
    pub feasible: bool,
}

/// Exchanges `cp.0 ∈ C1` with `cp.1 ∈ C2`; `None` leaves both unchanged.
pub fn swap(c1: &[u64], c2: &[u64], cp: Option<(u64, u64)>) -> Result<(Vec<u64>, Vec<u64>)> {
    let Some((a, b)) = cp else {
        return Ok((c1.to_vec(), c2.to_vec()));
    };
    let pa = c1
        .iter()
        .position(|&x| x == a)
        .ok_or_else(|| Error::Domain(format!("student {a} is not in C1")))?;
    let pb = c2
        .iter()
        .position(|&x| x == b)
        .ok_or_else(|| Error::Domain(format!("student {b} is not in C2")))?;
    let mut n1 = c1.to_vec();
    let mut n2 = c2.to_vec();
    n1[pa] = b;
    n2[pb] = a;
    n1.sort_unstable();
    n2.sort_unstable();
    Ok((n1, n2))
}

/// Predicted peer effects `β·Ω z` for one group.
pub fn peer_effects(omega: &OmegaMatrix, z: &[f64], beta: f64) -> Result<Vec<f64>> {
    Ok(omega.weighted_mean(z)?.into_iter().map(|v| beta * v).collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (n − 1 denominator).
pub fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Peer-effect summary of one two-classroom split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionScore {
    pub pe1: Vec<f64>,
    pub pe2: Vec<f64>,
    pub mean: f64,
    pub sd1: f64,
    pub sd2: f64,
    pub sd_all: f64,
}

impl PartitionScore {
    pub fn from_peer_effects(pe1: Vec<f64>, pe2: Vec<f64>) -> Result<Self> {
        if pe1.len() < 2 || pe2.len() < 2 {
            return Err(Error::Domain("each classroom needs at least 2 students".into()));
        }
        let all: Vec<f64> = pe1.iter().chain(&pe2).copied().collect();
        Ok(PartitionScore {
            mean: mean(&all),
            sd1: sample_sd(&pe1),
            sd2: sample_sd(&pe2),
            sd_all: sample_sd(&all),
            pe1,
            pe2,
        })
    }

    pub fn dispersion(&self, phi: f64, rho: f64) -> f64 {
        phi * (self.sd1 + self.sd2) + rho * self.sd_all
    }

    pub fn fitness(&self, kind: FitnessKind, phi: f64, rho: f64) -> f64 {
        match kind {
            FitnessKind::Ga => self.mean,
            FitnessKind::Afga => self.mean - self.dispersion(phi, rho),
        }
    }

    pub fn min(&self) -> f64 {
        self.pe1.iter().chain(&self.pe2).copied().fold(f64::INFINITY, f64::min)
    }
}

/// What the search maximises.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub kind: FitnessKind,
    pub beta: f64,
    pub phi: f64,
    pub rho: f64,
}

impl Objective {
    pub fn ga(beta: f64) -> Self {
        Objective {
            kind: FitnessKind::Ga,
            beta,
            phi: 0.0,
            rho: 0.0,
        }
    }

    pub fn afga(beta: f64, phi: f64, rho: f64) -> Self {
        Objective {
            kind: FitnessKind::Afga,
            beta,
            phi,
            rho,
        }
    }

    pub fn value(&self, score: &PartitionScore) -> f64 {
        score.fitness(self.kind, self.phi, self.rho)
    }
}

fn score_indices(
    pool: &SchoolPool,
    c1: &[usize],
    c2: &[usize],
    params: &PeerNNParams,
    beta: f64,
) -> Result<PartitionScore> {
    let group = |idx: &[usize], class_id: u64| -> Result<Vec<f64>> {
        let x = pool.features.select_rows(idx.iter());
        let omega = predict_omega(params, &x, class_id)?;
        let z: Vec<f64> = idx.iter().map(|&k| pool.z[k]).collect();
        peer_effects(&omega, &z, beta)
    };
    PartitionScore::from_peer_effects(group(c1, 1)?, group(c2, 2)?)
}

/// Scores a split, re-predicting Ω for each classroom.
pub fn score_assignment(
    pool: &SchoolPool,
    a: &Assignment,
    params: &PeerNNParams,
    beta: f64,
) -> Result<PartitionScore> {
    score_indices(pool, &pool.indices(&a.c1)?, &pool.indices(&a.c2)?, params, beta)
}

pub fn fitness_ga(pool: &SchoolPool, a: &Assignment, params: &PeerNNParams, beta: f64) -> Result<f64> {
    Ok(score_assignment(pool, a, params, beta)?.mean)
}

pub fn fitness_afga(
    pool: &SchoolPool,
    a: &Assignment,
    params: &PeerNNParams,
    beta: f64,
    phi: f64,
    rho: f64,
) -> Result<f64> {
    Ok(score_assignment(pool, a, params, beta)?.fitness(FitnessKind::Afga, phi, rho))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GAConfig {
    pub iterations: usize,
    pub swaps: usize,
    pub mutation_prob: f64,
    pub phi: f64,
    pub rho: f64,
    pub seed: u64,
    pub fitness: FitnessKind,
}

impl Default for GAConfig {
    fn default() -> Self {
        GAConfig {
            iterations: 150,
            swaps: 100,
            mutation_prob: 0.05,
            phi: 1.0,
            rho: 1.0,
            seed: 1,
            fitness: FitnessKind::Afga,
        }
    }
}

impl GAConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.swaps == 0 {
            return Err(Error::Config("iterations and swaps must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mutation_prob) {
            return Err(Error::Config("mutation probability must lie in [0,1]".into()));
        }
        if !(self.phi >= 0.0 && self.rho >= 0.0 && self.phi.is_finite() && self.rho.is_finite()) {
            return Err(Error::Config("phi and rho must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn objective(&self, beta: f64) -> Objective {
        match self.fitness {
            FitnessKind::Ga => Objective::ga(beta),
            FitnessKind::Afga => Objective::afga(beta, self.phi, self.rho),
        }
    }
}

/// Search trace. Entry 0 is the initial random split; entry `l` is the
/// policy held after iteration `l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GARun {
    pub school_id: u64,
    pub beta: f64,
    pub config: GAConfig,
    pub policies: Vec<Assignment>,
    pub fitness: Vec<f64>,
    pub best: Assignment,
    pub best_fitness: f64,
    pub best_iteration: usize,
}

impl GARun {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Format(e.to_string()))
    }
}

fn initial_split(pool: &SchoolPool, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let n = pool.len();
    for _ in 0..10 * n {
        let mut c1 = sample_indices(rng, n, n / 2).into_vec();
        c1.sort_unstable();
        if pool.band_ok(&c1) {
            return Ok(c1);
        }
    }
    Err(Error::Infeasible(format!(
        "no split of school {} met the gender band after {} draws",
        pool.school_id,
        10 * n
    )))
}

/// One feasible uniform draw of `⌊N/2⌋` students into `C1`.
pub fn random_assignment(pool: &SchoolPool, seed: u64) -> Result<Assignment> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(pool.assignment(&initial_split(pool, &mut rng)?))
}

struct Chain<'a> {
    pool: &'a SchoolPool,
    params: &'a PeerNNParams,
    objective: Objective,
}

impl Chain<'_> {
    fn value(&self, c1: &[usize], c2: &[usize]) -> Result<f64> {
        let score = score_indices(self.pool, c1, c2, self.params, self.objective.beta)?;
        Ok(self.objective.value(&score))
    }

    fn swapped(&self, c1: &[usize], c2: &[usize], a: usize, b: usize) -> (Vec<usize>, Vec<usize>) {
        let mut n1 = c1.to_vec();
        let mut n2 = c2.to_vec();
        n1[a] = c2[b];
        n2[b] = c1[a];
        (n1, n2)
    }
}

/// Single-chain search: random feasible start, then per iteration either a
/// random feasible swap (probability `mutation_prob`, always kept) or the best
/// of `swaps` sampled swaps, kept only if it beats the current fitness.
pub fn run_ga(pool: &SchoolPool, params: &PeerNNParams, beta: f64, config: &GAConfig) -> Result<GARun> {
    config.validate()?;
    let chain = Chain {
        pool,
        params,
        objective: config.objective(beta),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut c1 = initial_split(pool, &mut rng)?;
    let mut c2 = pool.complement(&c1);
    let mut current = chain.value(&c1, &c2)?;
    let mut policies = vec![pool.assignment(&c1)];
    let mut fitness = vec![current];
    let n = pool.len();

    for _ in 0..config.iterations {
        if rng.random_bool(config.mutation_prob) {
            for _ in 0..10 * n {
                let a = rng.random_range(0..c1.len());
                let b = rng.random_range(0..c2.len());
                let (n1, n2) = chain.swapped(&c1, &c2, a, b);
                if pool.band_ok(&n1) {
                    current = chain.value(&n1, &n2)?;
                    c1 = n1;
                    c2 = n2;
                    break;
                }
            }
        } else {
            let mut best: Option<(f64, usize, usize)> = None;
            for _ in 0..config.swaps {
                let a = rng.random_range(0..c1.len());
                let b = rng.random_range(0..c2.len());
                let (n1, n2) = chain.swapped(&c1, &c2, a, b);
                if !pool.band_ok(&n1) {
                    continue;
                }
                let v = chain.value(&n1, &n2)?;
                if best.is_none_or(|(bv, _, _)| v > bv) {
                    best = Some((v, a, b));
                }
            }
            if let Some((v, a, b)) = best {
                if v > current {
                    let (n1, n2) = chain.swapped(&c1, &c2, a, b);
                    c1 = n1;
                    c2 = n2;
                    current = v;
                }
            }
        }
        policies.push(pool.assignment(&c1));
        fitness.push(current);
    }

    let best_iteration = (0..fitness.len()).fold(0, |b, k| if fitness[k] > fitness[b] { k } else { b });
    Ok(GARun {
        school_id: pool.school_id,
        beta,
        config: *config,
        best: policies[best_iteration].clone(),
        best_fitness: fitness[best_iteration],
        best_iteration,
        policies,
        fitness,
    })
}

/// Every feasible split once, as sorted `C1` index sets. Each unordered pair
/// is listed with the first student in `C1`.
pub fn feasible_splits(pool: &SchoolPool) -> Result<Vec<Vec<usize>>> {
    let n = pool.len();
    if n > BRUTE_FORCE_LIMIT {
        return Err(Error::Size(format!(
            "exhaustive search supports at most {BRUTE_FORCE_LIMIT} students, got {n}"
        )));
    }
    let sizes = [n / 2, n.div_ceil(2)];
    let mut out = Vec::new();
    for mask in 0u32..(1u32 << n) {
        if mask & 1 == 0 || !sizes.contains(&(mask.count_ones() as usize)) {
            continue;
        }
        let c1: Vec<usize> = (0..n).filter(|&k| mask >> k & 1 == 1).collect();
        if pool.band_ok(&c1) {
            out.push(c1);
        }
    }
    Ok(out)
}

/// Exact optimum over all feasible splits; ties go to the lexicographically
/// smallest `C1` id list.
pub fn brute_force_optimal(
    pool: &SchoolPool,
    params: &PeerNNParams,
    objective: Objective,
) -> Result<(Assignment, PartitionScore)> {
    let splits = feasible_splits(pool)?;
    let mut best: Option<(f64, Assignment, PartitionScore)> = None;
    for c1 in splits {
        let c2 = pool.complement(&c1);
        let score = score_indices(pool, &c1, &c2, params, objective.beta)?;
        let v = objective.value(&score);
        let a = pool.assignment(&c1);
        let better = match &best {
            None => true,
            Some((bv, ba, _)) => {
                let tol = 1e-12 * bv.abs().max(1.0);
                v > bv + tol || ((v - bv).abs() <= tol && a.c1 < ba.c1)
            }
        };
        if better {
            best = Some((v, a, score));
        }
    }
    best.map(|(_, a, s)| (a, s))
        .ok_or_else(|| Error::Infeasible(format!("school {} has no feasible split", pool.school_id)))
}

/// A school with one low-`z` student who draws friendship mass from
/// susceptible classmates.
#[derive(Debug, Clone)]
pub struct DisruptiveInstance {
    pub pool: SchoolPool,
    pub params: PeerNNParams,
    pub magnet: u64,
}

/// Features are `(gender, z, 1, magnet flag, susceptibility)`. The hand-set
/// network gives susceptible student `i` the utility `pull` towards the
/// magnet and 0 towards everyone else.
pub fn disruptive_instance(
    genders: &[u8],
    z: &[f64],
    susceptibility: &[f64],
    magnet: usize,
    pull: f64,
) -> Result<DisruptiveInstance> {
    let n = genders.len();
    if z.len() != n || susceptibility.len() != n || magnet >= n {
        return Err(Error::Dimension("instance fields have different lengths".into()));
    }
    let features = DMatrix::from_fn(n, 5, |i, k| match k {
        0 => f64::from(genders[i]),
        1 => z[i],
        2 => 1.0,
        3 => f64::from(u8::from(i == magnet)),
        _ => susceptibility[i],
    });
    let mut params = PeerNNParams::zeros(5);
    params.w0[(3, 0)] = 1.0;
    params.w0[(2, 1)] = 1.0;
    params.w0[(4, 2)] = 1.0;
    params.w1[(2, 0)] = 1.0;
    params.w2[(0, 0)] = pull;
    let ids: Vec<u64> = (1..=n as u64).collect();
    let pool = SchoolPool::new(1, ids, genders.to_vec(), z.to_vec(), features)?;
    Ok(DisruptiveInstance {
        pool,
        params,
        magnet: magnet as u64 + 1,
    })
}

/// Twelve students, alternating gender, one magnet with `z = 0.02`, and
/// classmates with `z` spread over `[0.1, 1.0]`, all susceptible.
pub fn standard_disruptive_instance() -> DisruptiveInstance {
    let n = 12;
    let genders: Vec<u8> = (0..n).map(|k| (k % 2) as u8).collect();
    let z: Vec<f64> = (0..n)
        .map(|k| if k == 0 { 0.02 } else { 0.1 + 0.9 * (k - 1) as f64 / (n - 2) as f64 })
        .collect();
    let susceptibility: Vec<f64> = (0..n).map(|k| if k == 0 { 0.0 } else { 1.0 }).collect();
    disruptive_instance(&genders, &z, &susceptibility, 0, 1.0).expect("valid fixture")
}
