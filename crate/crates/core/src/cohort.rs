//! Students, classrooms and schools: the in-memory cohort, its CSV form, and
//! a seeded synthetic data-generating process with known ground truth.
//!
//! The synthetic generator draws a latent ability per student that drives
//! both friendship choice (ability homophily) and the outcome, so the
//! friendship-weighted peer regressor is endogenous whenever the confounder
//! loading is non-zero.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};

use crate::error::{Error, Result};
use crate::peernn::OmegaMatrix;

/// Number of ARD questions / self-reported traits.
pub const NUM_TRAITS: usize = 10;
/// Largest number of best friends a student may report.
pub const MAX_FRIENDS: usize = 5;

/// Gender coding: 1 = boy, 0 = girl.
pub const BOY: u8 = 1;
pub const GIRL: u8 = 0;

/// Control variables entering the outcome equation besides own rank and sex.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Controls {
    pub age: f64,
    pub father_edu: f64,
    pub mother_edu: f64,
    pub ethnic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Student {
    pub id: u64,
    pub school_id: u64,
    pub class_id: u64,
    /// 1 = boy, 0 = girl.
    pub gender: u8,
    /// 6th-grade class quantile.
    pub z: f64,
    /// Number of best friends reported (B).
    pub num_friends: u8,
    /// 8th-grade cognitive score.
    pub y: f64,
    pub controls: Controls,
    /// Predetermined features fed to the friendship model.
    pub features: Vec<f64>,
    /// Own traits A_s, each 0 or 1.
    pub traits: [u8; NUM_TRAITS],
    /// ARD responses A_f, each in {1, 2, 3}.
    pub ard: [u8; NUM_TRAITS],
}

impl Student {
    fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.gender > 1 {
            v.push(format!("gender {} not in {{0,1}}", self.gender));
        }
        if !(0.0..=1.0).contains(&self.z) {
            v.push(format!("z {} outside [0,1]", self.z));
        }
        if !(1..=MAX_FRIENDS as u8).contains(&self.num_friends) {
            v.push(format!("B {} outside 1..=5", self.num_friends));
        }
        if let Some(a) = self.ard.iter().find(|&&a| !(1..=3).contains(&a)) {
            v.push(format!("ARD response {a} not in {{1,2,3}}"));
        }
        if let Some(t) = self.traits.iter().find(|&&t| t > 1) {
            v.push(format!("trait {t} not in {{0,1}}"));
        }
        let c = &self.controls;
        let finite = self.y.is_finite()
            && [c.age, c.father_edu, c.mother_edu, c.ethnic]
                .iter()
                .chain(self.features.iter())
                .all(|x| x.is_finite());
        if !finite {
            v.push("non-finite numeric field".to_string());
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    /// Randomly assigned classroom.
    Train,
    /// Non-randomly (ability-sorted) assigned classroom.
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classroom {
    pub class_id: u64,
    pub school_id: u64,
    pub student_ids: Vec<u64>,
    pub split: Split,
}

impl Classroom {
    pub fn size(&self) -> usize {
        self.student_ids.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct School {
    pub school_id: u64,
    pub class_ids: Vec<u64>,
}

/// A validated collection of students grouped into classrooms and schools.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    students: Vec<Student>,
    classrooms: Vec<Classroom>,
    schools: Vec<School>,
    index: HashMap<u64, usize>,
}

impl Cohort {
    /// Builds a cohort from students (in order) and the split tag of each
    /// classroom. Classrooms and schools are ordered by first appearance.
    pub fn new(students: Vec<Student>, splits: &BTreeMap<u64, Split>) -> Result<Self> {
        if students.is_empty() {
            return Err(Error::Format("no records".into()));
        }
        let mut bad = Vec::new();
        let mut messages = Vec::new();
        let dim = students[0].features.len();
        let mut index = HashMap::with_capacity(students.len());
        for (pos, s) in students.iter().enumerate() {
            let mut v = s.violations();
            if s.features.len() != dim {
                v.push(format!(
                    "feature length {} differs from {dim}",
                    s.features.len()
                ));
            }
            if index.insert(s.id, pos).is_some() {
                v.push("duplicate id".to_string());
            }
            if !v.is_empty() {
                bad.push(s.id);
                messages.push(format!("{}: {}", s.id, v.join(", ")));
            }
        }
        if !bad.is_empty() {
            return Err(Error::Validation {
                ids: bad,
                message: messages.join("; "),
            });
        }

        let mut classrooms: Vec<Classroom> = Vec::new();
        let mut class_pos: HashMap<u64, usize> = HashMap::new();
        for s in &students {
            let pos = *class_pos.entry(s.class_id).or_insert_with(|| {
                classrooms.push(Classroom {
                    class_id: s.class_id,
                    school_id: s.school_id,
                    student_ids: Vec::new(),
                    split: Split::Train,
                });
                classrooms.len() - 1
            });
            let class = &mut classrooms[pos];
            if class.school_id != s.school_id {
                return Err(Error::Validation {
                    ids: vec![s.id],
                    message: format!(
                        "class {} appears in schools {} and {}",
                        s.class_id, class.school_id, s.school_id
                    ),
                });
            }
            class.student_ids.push(s.id);
        }
        for class in &mut classrooms {
            class.split = *splits.get(&class.class_id).ok_or_else(|| {
                Error::Config(format!("no split tag for class {}", class.class_id))
            })?;
            if class.size() < 3 {
                return Err(Error::Validation {
                    ids: class.student_ids.clone(),
                    message: format!("class {} has fewer than 3 students", class.class_id),
                });
            }
        }

        let mut schools: Vec<School> = Vec::new();
        for class in &classrooms {
            match schools.iter_mut().find(|s| s.school_id == class.school_id) {
                Some(s) => s.class_ids.push(class.class_id),
                None => schools.push(School {
                    school_id: class.school_id,
                    class_ids: vec![class.class_id],
                }),
            }
        }

        Ok(Cohort {
            students,
            classrooms,
            schools,
            index,
        })
    }

    pub fn students(&self) -> &[Student] {
        &self.students
    }

    pub fn classrooms(&self) -> &[Classroom] {
        &self.classrooms
    }

    pub fn schools(&self) -> &[School] {
        &self.schools
    }

    pub fn feature_dim(&self) -> usize {
        self.students[0].features.len()
    }

    pub fn student(&self, id: u64) -> Option<&Student> {
        self.index.get(&id).map(|&i| &self.students[i])
    }

    pub fn classroom(&self, class_id: u64) -> Option<&Classroom> {
        self.classrooms.iter().find(|c| c.class_id == class_id)
    }

    /// Students of a classroom, in classroom order.
    pub fn members(&self, class: &Classroom) -> Vec<&Student> {
        class
            .student_ids
            .iter()
            .map(|id| &self.students[self.index[id]])
            .collect()
    }

    /// All students of a school, classroom by classroom.
    pub fn school_members(&self, school_id: u64) -> Vec<&Student> {
        self.classrooms
            .iter()
            .filter(|c| c.school_id == school_id)
            .flat_map(|c| self.members(c))
            .collect()
    }

    pub fn split_classrooms(&self, split: Split) -> impl Iterator<Item = &Classroom> {
        self.classrooms.iter().filter(move |c| c.split == split)
    }

    /// Cohort restricted to classrooms of one split.
    pub fn subset(&self, split: Split) -> Result<Cohort> {
        let keep: HashSet<u64> = self
            .split_classrooms(split)
            .map(|c| c.class_id)
            .collect();
        let students = self
            .students
            .iter()
            .filter(|s| keep.contains(&s.class_id))
            .cloned()
            .collect();
        Cohort::new(students, &self.split_tags())
    }

    pub fn split_tags(&self) -> BTreeMap<u64, Split> {
        self.classrooms
            .iter()
            .map(|c| (c.class_id, c.split))
            .collect()
    }
}

/// Row-major feature matrix (N×D) for a list of students.
pub fn feature_matrix(students: &[&Student]) -> DMatrix<f64> {
    let d = students.first().map_or(0, |s| s.features.len());
    DMatrix::from_fn(students.len(), d, |i, j| students[i].features[j])
}

/// A_s as an N×Q real matrix.
pub fn trait_matrix(students: &[&Student]) -> DMatrix<f64> {
    DMatrix::from_fn(students.len(), NUM_TRAITS, |i, q| {
        f64::from(students[i].traits[q])
    })
}

/// A_f as an N×Q real matrix.
pub fn ard_matrix(students: &[&Student]) -> DMatrix<f64> {
    DMatrix::from_fn(students.len(), NUM_TRAITS, |i, q| f64::from(students[i].ard[q]))
}

pub fn friend_counts(students: &[&Student]) -> Vec<usize> {
    students.iter().map(|s| s.num_friends as usize).collect()
}

/// Encodes how many of a student's `b` friends have a trait as an ARD
/// response: 1 = none, 2 = one or two, 3 = most. Ambiguous cells resolve to
/// 3 when the count is a strict majority of `b`.
pub fn ard_encode(count: usize, b: usize) -> Result<u8> {
    if b > MAX_FRIENDS || count > b {
        return Err(Error::Domain(format!(
            "ard_encode requires 0 <= count <= B <= 5, got count={count}, B={b}"
        )));
    }
    Ok(match count {
        0 => 1,
        1 | 2 if 2 * count <= b => 2,
        _ => 3,
    })
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

const LEADING: [&str; 11] = [
    "id",
    "school_id",
    "class_id",
    "gender",
    "z",
    "B",
    "y",
    "age",
    "f_edu",
    "m_edu",
    "ethnic",
];

fn header(dim: usize) -> Vec<String> {
    let mut h: Vec<String> = LEADING.iter().map(|s| s.to_string()).collect();
    h.extend((1..=dim).map(|k| format!("x{k}")));
    h.extend((1..=NUM_TRAITS).map(|k| format!("as{k}")));
    h.extend((1..=NUM_TRAITS).map(|k| format!("af{k}")));
    h.push("split".to_string());
    h
}

/// Writes the cohort as CSV. Lines in `preamble` are emitted first as `#`
/// comments.
pub fn save_cohort_with(cohort: &Cohort, path: &Path, preamble: &[String]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for line in preamble {
        writeln!(out, "# {line}").map_err(|e| Error::io(path, e))?;
    }
    let mut w = csv::Writer::from_writer(out);
    let io_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    w.write_record(header(cohort.feature_dim())).map_err(io_err)?;
    let splits = cohort.split_tags();
    for s in cohort.students() {
        let mut rec: Vec<String> = vec![
            s.id.to_string(),
            s.school_id.to_string(),
            s.class_id.to_string(),
            s.gender.to_string(),
            s.z.to_string(),
            s.num_friends.to_string(),
            s.y.to_string(),
            s.controls.age.to_string(),
            s.controls.father_edu.to_string(),
            s.controls.mother_edu.to_string(),
            s.controls.ethnic.to_string(),
        ];
        rec.extend(s.features.iter().map(|x| x.to_string()));
        rec.extend(s.traits.iter().map(|x| x.to_string()));
        rec.extend(s.ard.iter().map(|x| x.to_string()));
        rec.push(splits[&s.class_id].to_string());
        w.write_record(&rec).map_err(io_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn save_cohort(cohort: &Cohort, path: &Path) -> Result<()> {
    save_cohort_with(cohort, path, &[])
}

fn parse_field<T: FromStr>(rec: &csv::StringRecord, hdr: &[String], col: usize, row: usize) -> Result<T>
where
    T::Err: fmt::Display,
{
    let raw = rec.get(col).unwrap_or("");
    raw.trim().parse::<T>().map_err(|e| Error::Parse {
        row,
        column: hdr[col].clone(),
        message: format!("`{raw}`: {e}"),
    })
}

/// Reads and validates a cohort CSV. Lines starting with `#` are ignored.
pub fn load_cohort(path: &Path) -> Result<Cohort> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(true)
        .from_reader(BufReader::new(file));
    let hdr: Vec<String> = match rdr.headers() {
        Ok(h) => h.iter().map(|s| s.trim().to_string()).collect(),
        Err(e) => return Err(Error::Format(e.to_string())),
    };
    if hdr.is_empty() || hdr.iter().all(|h| h.is_empty()) {
        return Err(Error::Format("no records".into()));
    }
    let fixed = LEADING.len() + 2 * NUM_TRAITS + 1;
    if hdr.len() < fixed {
        return Err(Error::Format(format!(
            "header has {} columns, expected at least {fixed}",
            hdr.len()
        )));
    }
    let dim = hdr.len() - fixed;
    let expected = header(dim);
    if hdr != expected {
        let col = hdr
            .iter()
            .zip(&expected)
            .position(|(a, b)| a != b)
            .unwrap_or(0);
        return Err(Error::Parse {
            row: 0,
            column: hdr[col].clone(),
            message: format!("expected header column `{}`", expected[col]),
        });
    }

    let mut students = Vec::new();
    let mut splits: BTreeMap<u64, Split> = BTreeMap::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 1;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            column: String::new(),
            message: e.to_string(),
        })?;
        if rec.len() != hdr.len() {
            return Err(Error::Parse {
                row,
                column: String::new(),
                message: format!("{} fields, expected {}", rec.len(), hdr.len()),
            });
        }
        let f = |c: usize| parse_field::<f64>(&rec, &hdr, c, row);
        let mut traits = [0u8; NUM_TRAITS];
        let mut ard = [0u8; NUM_TRAITS];
        let t0 = LEADING.len() + dim;
        for q in 0..NUM_TRAITS {
            traits[q] = parse_field(&rec, &hdr, t0 + q, row)?;
            ard[q] = parse_field(&rec, &hdr, t0 + NUM_TRAITS + q, row)?;
        }
        let student = Student {
            id: parse_field(&rec, &hdr, 0, row)?,
            school_id: parse_field(&rec, &hdr, 1, row)?,
            class_id: parse_field(&rec, &hdr, 2, row)?,
            gender: parse_field(&rec, &hdr, 3, row)?,
            z: f(4)?,
            num_friends: parse_field(&rec, &hdr, 5, row)?,
            y: f(6)?,
            controls: Controls {
                age: f(7)?,
                father_edu: f(8)?,
                mother_edu: f(9)?,
                ethnic: f(10)?,
            },
            features: (0..dim)
                .map(|k| f(LEADING.len() + k))
                .collect::<Result<_>>()?,
            traits,
            ard,
        };
        let split_col = hdr.len() - 1;
        let split: Split = parse_field(&rec, &hdr, split_col, row)?;
        if let Some(prev) = splits.insert(student.class_id, split) {
            if prev != split {
                return Err(Error::Validation {
                    ids: vec![student.id],
                    message: format!("class {} has mixed split tags", student.class_id),
                });
            }
        }
        students.push(student);
    }
    Cohort::new(students, &splits)
}

// ---------------------------------------------------------------------------
// Synthetic data-generating process
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_schools: usize,
    pub classes_per_school: usize,
    pub class_size_min: usize,
    pub class_size_max: usize,
    /// Feature dimension D (gender, z, then auxiliary features).
    pub feature_dim: usize,
    pub beta_true: f64,
    /// Loading of latent ability on the outcome.
    pub confounder: f64,
    pub homophily_gender: f64,
    pub homophily_ability: f64,
    pub popularity_scale: f64,
    pub sigma_eps: f64,
    pub sigma_mu: f64,
    pub school_effect_scale: f64,
    /// Correlation between latent ability and the probit of z.
    pub z_reliability: f64,
    /// Fraction of schools whose classrooms are ability-sorted (test split).
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_schools: 60,
            classes_per_school: 2,
            class_size_min: 20,
            class_size_max: 30,
            feature_dim: 8,
            beta_true: 1.0,
            confounder: 0.5,
            homophily_gender: 2.0,
            homophily_ability: 1.0,
            popularity_scale: 0.5,
            sigma_eps: 0.3,
            sigma_mu: 0.1,
            school_effect_scale: 0.3,
            z_reliability: 0.6,
            test_fraction: 0.25,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let scales = [
            self.confounder,
            self.homophily_gender,
            self.homophily_ability,
            self.popularity_scale,
            self.sigma_eps,
            self.sigma_mu,
            self.school_effect_scale,
        ];
        if scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Config("all scales must be finite and >= 0".into()));
        }
        if self.class_size_min < 3 || self.class_size_max < self.class_size_min {
            return Err(Error::Config(format!(
                "class size range {}..={} invalid (minimum 3)",
                self.class_size_min, self.class_size_max
            )));
        }
        if self.num_schools == 0 || self.classes_per_school == 0 {
            return Err(Error::Config("need at least one school and classroom".into()));
        }
        if self.feature_dim < 2 {
            return Err(Error::Config("feature_dim must include gender and z".into()));
        }
        if !(0.0..=1.0).contains(&self.z_reliability) || !(0.0..=1.0).contains(&self.test_fraction)
        {
            return Err(Error::Config(
                "z_reliability and test_fraction must lie in [0,1]".into(),
            ));
        }
        if !self.beta_true.is_finite() {
            return Err(Error::Config("beta_true must be finite".into()));
        }
        Ok(())
    }
}

/// Outcome-equation coefficients on the controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlCoefficients {
    pub own_z: f64,
    pub age: f64,
    pub gender: f64,
    pub father_edu: f64,
    pub mother_edu: f64,
    pub ethnic: f64,
}

impl Default for ControlCoefficients {
    fn default() -> Self {
        ControlCoefficients {
            own_z: 1.0,
            age: -0.05,
            gender: -0.01,
            father_edu: 0.02,
            mother_edu: 0.01,
            ethnic: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub beta_true: f64,
    pub gamma: ControlCoefficients,
    /// True best-friend lists, keyed by student id.
    pub friends: BTreeMap<u64, Vec<u64>>,
    pub ability: BTreeMap<u64, f64>,
    pub popularity: BTreeMap<u64, f64>,
    pub class_effects: BTreeMap<u64, f64>,
    pub school_effects: BTreeMap<u64, f64>,
    pub config: SynthConfig,
}

impl GroundTruth {
    /// Ω built from the realised friendships: each row spreads mass 1/B
    /// over the student's true friends.
    pub fn friend_omega(&self, cohort: &Cohort, class: &Classroom) -> Result<OmegaMatrix> {
        let pos: HashMap<u64, usize> = class
            .student_ids
            .iter()
            .enumerate()
            .map(|(k, &id)| (id, k))
            .collect();
        let n = class.size();
        let mut m = DMatrix::zeros(n, n);
        for (i, id) in class.student_ids.iter().enumerate() {
            let friends = self.friends.get(id).ok_or_else(|| {
                Error::Domain(format!("student {id} missing from ground truth"))
            })?;
            if friends.is_empty() {
                return Err(Error::Domain(format!("student {id} has no friends")));
            }
            let w = 1.0 / friends.len() as f64;
            for f in friends {
                let j = *pos.get(f).ok_or_else(|| {
                    Error::Domain(format!("friend {f} of {id} not in class {}", class.class_id))
                })?;
                m[(i, j)] = w;
            }
        }
        debug_assert!(cohort.classroom(class.class_id).is_some());
        OmegaMatrix::new(class.class_id, m)
    }

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

struct Draft {
    id: u64,
    gender: u8,
    ability: f64,
    z: f64,
    controls: Controls,
    features: Vec<f64>,
    traits: [u8; NUM_TRAITS],
}

fn draft_student(id: u64, gender: u8, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Draft {
    let std_normal = StdNormal::standard();
    let ability: f64 = rng.sample(rand_distr::StandardNormal);
    let e: f64 = rng.sample(rand_distr::StandardNormal);
    let r = cfg.z_reliability;
    let z = std_normal.cdf(r * ability + (1.0 - r * r).sqrt() * e);

    let controls = Controls {
        age: 14.0 + 0.5 * rng.sample::<f64, _>(rand_distr::StandardNormal),
        father_edu: rng.random_range(1..=6) as f64,
        mother_edu: rng.random_range(1..=6) as f64,
        ethnic: if rng.random_bool(0.1) { 1.0 } else { 0.0 },
    };

    // x1 = gender, x2 = z, then alternating binary / uniform auxiliaries.
    let mut features = vec![f64::from(gender), z];
    for k in 2..cfg.feature_dim {
        let x = if k < 5 {
            if rng.random_bool(0.5) { 1.0 } else { 0.0 }
        } else {
            rng.random::<f64>()
        };
        features.push(x);
    }

    let mut traits = [0u8; NUM_TRAITS];
    traits[0] = gender;
    traits[1] = u8::from(z > 0.5);
    for (q, t) in traits.iter_mut().enumerate().skip(2) {
        *t = match features.get(q) {
            Some(&x) if q < 8 => u8::from(x > 0.5),
            _ => u8::from(rng.random_bool(0.5)),
        };
    }

    Draft {
        id,
        gender,
        ability,
        z,
        controls,
        features,
        traits,
    }
}

/// Generates a cohort with known friendships and peer effect.
pub fn synth_cohort(cfg: &SynthConfig) -> Result<(Cohort, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gumbel = Gumbel::new(0.0, 1.0).expect("valid gumbel");
    let gamma = ControlCoefficients::default();

    let n_test = (cfg.test_fraction * cfg.num_schools as f64).round() as usize;
    let mut school_order: Vec<usize> = (0..cfg.num_schools).collect();
    school_order.shuffle(&mut rng);
    let test_schools: HashSet<usize> = school_order.into_iter().take(n_test).collect();

    let mut students = Vec::new();
    let mut splits = BTreeMap::new();
    let mut truth = GroundTruth {
        beta_true: cfg.beta_true,
        gamma,
        friends: BTreeMap::new(),
        ability: BTreeMap::new(),
        popularity: BTreeMap::new(),
        class_effects: BTreeMap::new(),
        school_effects: BTreeMap::new(),
        config: cfg.clone(),
    };
    let mut next_id = 1u64;
    let mut next_class = 1u64;

    for s in 0..cfg.num_schools {
        let school_id = s as u64 + 1;
        let sizes: Vec<usize> = (0..cfg.classes_per_school)
            .map(|_| rng.random_range(cfg.class_size_min..=cfg.class_size_max))
            .collect();
        let total: usize = sizes.iter().sum();
        let share = rng.random_range(0.45..=0.55);
        let boys = ((total as f64 * share).round() as usize).clamp(1, total - 1);
        let mut genders: Vec<u8> = (0..total).map(|k| u8::from(k < boys)).collect();
        genders.shuffle(&mut rng);

        let mut drafts: Vec<Draft> = genders
            .into_iter()
            .map(|g| {
                let d = draft_student(next_id, g, cfg, &mut rng);
                next_id += 1;
                d
            })
            .collect();

        let split = if test_schools.contains(&s) {
            drafts.sort_by(|a, b| b.ability.total_cmp(&a.ability));
            Split::Test
        } else {
            drafts.shuffle(&mut rng);
            Split::Train
        };

        let school_effect = cfg.school_effect_scale * rng.sample::<f64, _>(rand_distr::StandardNormal);
        truth.school_effects.insert(school_id, school_effect);

        let mut drafts = drafts.into_iter();
        for &size in &sizes {
            let class_id = next_class;
            next_class += 1;
            splits.insert(class_id, split);
            let members: Vec<Draft> = drafts.by_ref().take(size).collect();
            let class_effect = cfg.sigma_mu * rng.sample::<f64, _>(rand_distr::StandardNormal);
            truth.class_effects.insert(class_id, class_effect);

            let popularity: Vec<f64> = members
                .iter()
                .map(|_| {
                    cfg.popularity_scale * rng.sample::<f64, _>(rand_distr::StandardNormal)
                })
                .collect();

            for (i, me) in members.iter().enumerate() {
                let b = rng.random_range(3..=MAX_FRIENDS).min(size - 1);
                // Top-B of perturbed utilities = sequential softmax draws
                // without replacement.
                let mut utilities: Vec<(f64, usize)> = members
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(j, other)| {
                        let u = cfg.homophily_gender * f64::from(u8::from(other.gender == me.gender))
                            - cfg.homophily_ability * (other.ability - me.ability).abs()
                            + popularity[j]
                            + gumbel.sample(&mut rng);
                        (u, j)
                    })
                    .collect();
                utilities.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                let friends: Vec<usize> = utilities.iter().take(b).map(|&(_, j)| j).collect();

                let mut ard = [0u8; NUM_TRAITS];
                for (q, slot) in ard.iter_mut().enumerate() {
                    let count = friends
                        .iter()
                        .filter(|&&j| members[j].traits[q] == 1)
                        .count();
                    *slot = ard_encode(count, b)?;
                }
                let peer_z = friends.iter().map(|&j| members[j].z).sum::<f64>() / b as f64;
                let c = &me.controls;
                let noise = cfg.sigma_eps * rng.sample::<f64, _>(rand_distr::StandardNormal);
                let y = cfg.beta_true * peer_z
                    + gamma.own_z * me.z
                    + gamma.age * c.age
                    + gamma.gender * f64::from(me.gender)
                    + gamma.father_edu * c.father_edu
                    + gamma.mother_edu * c.mother_edu
                    + gamma.ethnic * c.ethnic
                    + school_effect
                    + class_effect
                    + cfg.confounder * me.ability
                    + noise;

                truth
                    .friends
                    .insert(me.id, friends.iter().map(|&j| members[j].id).collect());
                truth.ability.insert(me.id, me.ability);
                truth.popularity.insert(me.id, popularity[i]);

                students.push(Student {
                    id: me.id,
                    school_id,
                    class_id,
                    gender: me.gender,
                    z: me.z,
                    num_friends: b as u8,
                    y,
                    controls: me.controls,
                    features: me.features.clone(),
                    traits: me.traits,
                    ard,
                });
            }
        }
    }

    let cohort = Cohort::new(students, &splits)?;
    Ok((cohort, truth))
}

/// Gender share of boys per school.
pub fn school_boy_shares(cohort: &Cohort) -> Vec<(u64, f64)> {
    cohort
        .schools()
        .iter()
        .map(|s| {
            let members = cohort.school_members(s.school_id);
            let boys = members.iter().filter(|m| m.gender == BOY).count();
            (s.school_id, boys as f64 / members.len() as f64)
        })
        .collect()
}
