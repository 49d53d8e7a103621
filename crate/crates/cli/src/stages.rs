//! One function per subcommand.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use peerassign::assign::{
    run_ga, score_assignment, Assignment, FitnessKind, GARun, PartitionScore, SchoolPool,
};
use peerassign::cohort::{self, feature_matrix, Cohort, Split, Student, GIRL};
use peerassign::evalharness::{
    export_heatmap, omega_diagnostics, peer_effect_distribution, q_matrix, read_omega_csv,
    trait_error_report, write_distribution_csv, write_omega_csv, ErrorSummary, OmegaDiagnostics,
};
use peerassign::peereffect::{
    build_design, linear_in_means, naive_ols, two_stage_iv, EstimationReport, IVEstimate, Method,
};
use peerassign::peernn::{self, predict_omega, LossReport, OmegaMatrix, PeerNNParams, SavedParams};
use serde::{Deserialize, Serialize};

use crate::artifacts::{check_fresh, read_json, require, write_json, write_text, Layout, Meta};
use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult, StageContext};

const COHORT: &str = "cohort.csv";
const TRUTH: &str = "ground_truth.json";
const PARAMS: &str = "params.json";
const LOSS: &str = "loss_history.csv";
const TRAIN_SUMMARY: &str = "training_summary.json";
const DIAGNOSTICS: &str = "omega_diagnostics.json";
const TRAIT_ERRORS: &str = "trait_errors.csv";
const TRAIT_SUMMARY: &str = "trait_error_summary.csv";
const PREDICT_SUMMARY: &str = "prediction_summary.json";
const ESTIMATION: &str = "estimation.json";
const ESTIMATION_TABLE: &str = "estimation_table.txt";
const POLICY: &str = "policy.json";
const DISTRIBUTION: &str = "peer_effect_distribution.csv";
const SUMMARY: &str = "summary.json";
const SUMMARY_TEXT: &str = "summary.txt";

pub struct Ctx {
    pub cfg: PipelineConfig,
    pub layout: Layout,
    pub hash: String,
}

impl Ctx {
    pub fn new(cfg: PipelineConfig) -> CliResult<Self> {
        let layout = Layout::new(&cfg);
        Layout::ensure_dir(&layout.out)?;
        let hash = cfg.hash();
        Ok(Ctx { cfg, layout, hash })
    }

    fn meta(&self, stage: &str, seed: u64) -> Meta {
        Meta::new(&self.cfg, stage, seed)
    }

    /// Checks presence and freshness of an upstream file.
    fn upstream(&self, path: &Path, stage: &'static str, needs: &'static str) -> CliResult<()> {
        require(path, stage, needs)?;
        check_fresh(path, &self.hash);
        Ok(())
    }

    fn cohort(&self, stage: &'static str) -> CliResult<Cohort> {
        let path = self.layout.cohort_in();
        self.upstream(&path, stage, "synth")?;
        cohort::load_cohort(&path).stage(stage)
    }

    fn params(&self, stage: &'static str) -> CliResult<SavedParams> {
        let path = self.layout.file(PARAMS);
        self.upstream(&path, stage, "train")?;
        SavedParams::load(&path).stage(stage)
    }
}

fn omega_file(layout: &Layout, class_id: u64) -> PathBuf {
    layout.omega_dir().join(format!("class_{class_id}.csv"))
}

pub fn synth(ctx: &Ctx) -> CliResult<()> {
    let cfg = &ctx.cfg.synth;
    let (cohort, truth) = cohort::synth_cohort(cfg).stage("synth")?;
    let meta = ctx.meta("synth", cfg.seed);
    cohort::save_cohort_with(&cohort, &ctx.layout.file(COHORT), &meta.preamble()).stage("synth")?;
    write_json(&ctx.layout.file(TRUTH), &meta, &truth)?;
    println!(
        "synth: {} students in {} classrooms across {} schools",
        cohort.students().len(),
        cohort.classrooms().len(),
        cohort.schools().len()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub epochs: usize,
    pub train_classrooms: usize,
    pub initial: LossReport,
    pub last: LossReport,
}

pub fn train(ctx: &Ctx) -> CliResult<()> {
    let cohort = ctx.cohort("train")?;
    let t = &ctx.cfg.training;
    let result = peernn::train(&cohort, t.hyper, &t.opt).stage("train")?;
    let meta = ctx.meta("train", t.opt.seed);
    let saved = SavedParams {
        params: result.params,
        hyper: t.hyper,
        seed: t.opt.seed,
        meta: Some(serde_json::to_value(&meta).expect("meta serializes")),
    };
    saved.save(&ctx.layout.file(PARAMS)).stage("train")?;

    let mut body = String::from("epoch,bias_sq,var,homophily,transitivity,total\n");
    for (e, r) in result.history.iter().enumerate() {
        let _ = writeln!(body, "{e},{},{},{},{},{}", r.bias_sq, r.var, r.homophily, r.transitivity, r.total);
    }
    write_text(&ctx.layout.file(LOSS), &meta, &body)?;

    let summary = TrainingSummary {
        epochs: t.opt.epochs,
        train_classrooms: cohort.split_classrooms(Split::Train).count(),
        initial: result.history[0],
        last: *result.history.last().expect("history has epochs + 1 entries"),
    };
    write_json(&ctx.layout.file(TRAIN_SUMMARY), &meta, &summary)?;
    println!(
        "train: loss {:.4} -> {:.4} over {} epochs",
        summary.initial.total, summary.last.total, summary.epochs
    );
    Ok(())
}

/// Row order that groups girls then boys, for block-structured heatmaps.
fn gender_order(members: &[&Student]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..members.len()).collect();
    order.sort_by_key(|&k| (members[k].gender != GIRL, members[k].id));
    order
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClassDiagnostics {
    pub split: Split,
    #[serde(flatten)]
    pub diagnostics: OmegaDiagnostics,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PredictionSummary {
    pub evaluated_classrooms: Vec<u64>,
    pub replicates: usize,
    pub mean_homophily: Option<f64>,
    pub min_homophily: Option<f64>,
    pub traits: Vec<ErrorSummary>,
}

pub fn predict(ctx: &Ctx) -> CliResult<()> {
    let cohort = ctx.cohort("predict")?;
    let saved = ctx.params("predict")?;
    let p = &ctx.cfg.prediction;
    let meta = ctx.meta("predict", p.seed);
    let preamble = meta.preamble();
    Layout::ensure_dir(&ctx.layout.omega_dir())?;
    Layout::ensure_dir(&ctx.layout.heatmap_dir())?;

    let has_test = cohort.split_classrooms(Split::Test).next().is_some();
    let mut diagnostics = Vec::new();
    let mut evaluated = Vec::new();
    for class in cohort.classrooms() {
        let members = cohort.members(class);
        let omega = predict_omega(&saved.params, &feature_matrix(&members), class.class_id).stage("predict")?;
        let ids: Vec<u64> = members.iter().map(|s| s.id).collect();
        write_omega_csv(&omega, &ids, &omega_file(&ctx.layout, class.class_id), &preamble).stage("predict")?;
        let genders: Vec<u8> = members.iter().map(|s| s.gender).collect();
        diagnostics.push(ClassDiagnostics {
            split: class.split,
            diagnostics: omega_diagnostics(&omega, &genders).stage("predict")?,
        });
        if class.split == Split::Test || !has_test {
            let order = gender_order(&members);
            let m = omega.values();
            let sorted = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(order[i], order[j])]);
            let stem = ctx.layout.heatmap_dir().join(format!("omega_class_{}", class.class_id));
            export_heatmap(&sorted, &stem, p.heatmap_scale, &preamble).stage("predict")?;
            evaluated.push(omega);
        }
    }
    write_json(&ctx.layout.file(DIAGNOSTICS), &meta, &diagnostics)?;

    let report = trait_error_report(&cohort, &evaluated, p.replicates, p.seed).stage("predict")?;
    report.write_csv(&ctx.layout.file(TRAIT_ERRORS), &preamble).stage("predict")?;
    let traits = report.summary();
    let mut body = String::from("trait,model,mean,q25,q50,q75,win_rate\n");
    for s in &traits {
        let _ = writeln!(body, "{},{},{},{},{},{},{}", s.question, s.model, s.mean, s.q25, s.q50, s.q75, s.win_rate);
    }
    write_text(&ctx.layout.file(TRAIT_SUMMARY), &meta, &body)?;

    let homophily: Vec<f64> = diagnostics
        .iter()
        .filter(|d| d.split == Split::Test || !has_test)
        .filter_map(|d| d.diagnostics.homophily)
        .collect();
    let summary = PredictionSummary {
        evaluated_classrooms: report.class_ids.clone(),
        replicates: p.replicates,
        mean_homophily: (!homophily.is_empty()).then(|| homophily.iter().sum::<f64>() / homophily.len() as f64),
        min_homophily: homophily.iter().copied().reduce(f64::min),
        traits,
    };
    write_json(&ctx.layout.file(PREDICT_SUMMARY), &meta, &summary)?;
    let gender = &report.traits[0];
    println!(
        "predict: {} classrooms evaluated, min homophily {}, gender-trait win rate {:.3}",
        report.class_ids.len(),
        summary.min_homophily.map_or("n/a".into(), |h| format!("{h:.3}")),
        gender.win_rate()
    );
    Ok(())
}

fn load_train_omegas(ctx: &Ctx, train: &Cohort) -> CliResult<Vec<OmegaMatrix>> {
    train
        .classrooms()
        .iter()
        .enumerate()
        .map(|(k, class)| {
            let path = omega_file(&ctx.layout, class.class_id);
            if k == 0 {
                ctx.upstream(&path, "estimate", "predict")?;
            } else {
                require(&path, "estimate", "predict")?;
            }
            let (ids, omega) = read_omega_csv(&path, class.class_id).stage("estimate")?;
            if ids != class.student_ids {
                return Err(CliError::Config(format!(
                    "{}: student ids do not match classroom {} of the cohort",
                    path.display(),
                    class.class_id
                )));
            }
            Ok(omega)
        })
        .collect()
}

pub fn estimate(ctx: &Ctx) -> CliResult<()> {
    let cohort = ctx.cohort("estimate")?;
    let train = cohort.subset(Split::Train).stage("estimate")?;
    let omegas = load_train_omegas(ctx, &train)?;
    let design = build_design(&train, &omegas).stage("estimate")?;
    let e = &ctx.cfg.estimation;

    let mut columns = vec![linear_in_means(&design, false).stage("estimate")?];
    if e.random_effect {
        columns.push(linear_in_means(&design, true).stage("estimate")?);
    }
    columns.push(two_stage_iv(&design, false).stage("estimate")?);
    if e.random_effect {
        columns.push(two_stage_iv(&design, true).stage("estimate")?);
    }
    let mut naive = Vec::new();
    if e.naive {
        naive.push(naive_ols(&design, false).stage("estimate")?);
        if e.random_effect {
            naive.push(naive_ols(&design, true).stage("estimate")?);
        }
    }
    let report = EstimationReport { columns, naive };
    let meta = ctx.meta("estimate", ctx.cfg.seed);
    write_json(&ctx.layout.file(ESTIMATION), &meta, &report)?;
    write_text(&ctx.layout.file(ESTIMATION_TABLE), &meta, &report.to_table())?;
    let iv = preferred_iv(&report).expect("2SLS column always present");
    println!(
        "estimate: {} beta = {:.3} (se {:.3}), n = {}",
        iv.method.label(),
        iv.beta,
        iv.se_beta,
        iv.n_obs
    );
    Ok(())
}

fn preferred_iv(report: &EstimationReport) -> Option<&IVEstimate> {
    let find = |m: Method| report.columns.iter().find(|c| c.method == m);
    find(Method::TwoStageRe).or_else(|| find(Method::TwoStage))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PolicyScore {
    pub policy: String,
    pub c1: Vec<u64>,
    pub c2: Vec<u64>,
    pub feasible: bool,
    pub mean: f64,
    pub min: f64,
    pub sd_c1: f64,
    pub sd_c2: f64,
    pub sd_all: f64,
}

impl PolicyScore {
    fn new(policy: &str, a: &Assignment, s: &PartitionScore) -> Self {
        PolicyScore {
            policy: policy.into(),
            c1: a.c1.clone(),
            c2: a.c2.clone(),
            feasible: a.feasible,
            mean: s.mean,
            min: s.min(),
            sd_c1: s.sd1,
            sd_c2: s.sd2,
            sd_all: s.sd_all,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PolicyReport {
    pub school_id: u64,
    pub beta: f64,
    pub beta_source: String,
    pub recommended: FitnessKind,
    pub policies: Vec<PolicyScore>,
}

fn resolve_beta(ctx: &Ctx) -> CliResult<(f64, String)> {
    if let Some(b) = ctx.cfg.assignment.beta {
        return Ok((b, "config".into()));
    }
    let path = ctx.layout.file(ESTIMATION);
    ctx.upstream(&path, "assign", "estimate")?;
    let report: EstimationReport = read_json(&path)?.data;
    let iv = preferred_iv(&report)
        .ok_or_else(|| CliError::Config(format!("{} has no 2SLS column", path.display())))?;
    Ok((iv.beta, iv.method.label().to_string()))
}

/// The school's current two-classroom split.
fn observed_assignment(cohort: &Cohort, pool: &SchoolPool) -> CliResult<Assignment> {
    let school = cohort
        .schools()
        .iter()
        .find(|s| s.school_id == pool.school_id())
        .expect("pool built from this cohort");
    let first = school.class_ids[0];
    let (mut c1, mut c2): (Vec<u64>, Vec<u64>) = cohort
        .school_members(school.school_id)
        .iter()
        .map(|s| (s.id, s.class_id == first))
        .fold((Vec::new(), Vec::new()), |(mut a, mut b), (id, in_first)| {
            if in_first { a.push(id) } else { b.push(id) }
            (a, b)
        });
    c1.sort_unstable();
    c2.sort_unstable();
    let mut a = Assignment { c1, c2, feasible: false };
    a.feasible = pool.is_feasible(&a);
    Ok(a)
}

/// Block-diagonal Q over `C1` then `C2`.
fn q_blocks(cohort: &Cohort, a: &Assignment, params: &PeerNNParams) -> CliResult<DMatrix<f64>> {
    let n = a.c1.len() + a.c2.len();
    let mut q = DMatrix::zeros(n, n);
    let mut offset = 0;
    for group in [&a.c1, &a.c2] {
        let members: Vec<&Student> = group
            .iter()
            .map(|id| cohort.student(*id).expect("assignment ids come from the cohort"))
            .collect();
        let omega = predict_omega(params, &feature_matrix(&members), 0).stage("assign")?;
        let z: Vec<f64> = members.iter().map(|s| s.z).collect();
        let block = q_matrix(&omega, &z).stage("assign")?.values;
        q.view_mut((offset, offset), (group.len(), group.len())).copy_from(&block);
        offset += group.len();
    }
    Ok(q)
}

pub fn assign(ctx: &Ctx) -> CliResult<()> {
    let cohort = ctx.cohort("assign")?;
    let saved = ctx.params("assign")?;
    let (beta, beta_source) = resolve_beta(ctx)?;
    let a = &ctx.cfg.assignment;
    let school_id = match a.school {
        Some(s) => s,
        None => cohort
            .schools()
            .first()
            .map(|s| s.school_id)
            .ok_or_else(|| CliError::Config("cohort has no schools".into()))?,
    };
    let pool = SchoolPool::from_cohort(&cohort, school_id).stage("assign")?;
    let meta = ctx.meta("assign", a.ga.seed);
    let preamble = meta.preamble();
    Layout::ensure_dir(&ctx.layout.heatmap_dir())?;

    let mut runs: Vec<(FitnessKind, GARun)> = Vec::new();
    for kind in [FitnessKind::Ga, FitnessKind::Afga] {
        let config = peerassign::assign::GAConfig { fitness: kind, ..a.ga };
        let run = run_ga(&pool, &saved.params, beta, &config).stage("assign")?;
        let name = format!("garun_{}.json", kind_name(kind));
        write_json(&ctx.layout.file(&name), &meta, &run)?;
        runs.push((kind, run));
    }

    let observed = observed_assignment(&cohort, &pool)?;
    let named: Vec<(&str, &Assignment)> = std::iter::once(("raw", &observed))
        .chain(runs.iter().map(|(k, r)| (kind_name(*k), &r.best)))
        .collect();
    let mut policies = Vec::new();
    for (name, assignment) in &named {
        let score = score_assignment(&pool, assignment, &saved.params, beta).stage("assign")?;
        policies.push(PolicyScore::new(name, assignment, &score));
        let stem = ctx.layout.heatmap_dir().join(format!("q_{name}"));
        export_heatmap(&q_blocks(&cohort, assignment, &saved.params)?, &stem, ctx.cfg.prediction.heatmap_scale, &preamble)
            .stage("assign")?;
    }
    let dists = peer_effect_distribution(&named, &pool, &saved.params, beta).stage("assign")?;
    write_distribution_csv(&dists, &ctx.layout.file(DISTRIBUTION), &preamble).stage("assign")?;

    let report = PolicyReport {
        school_id,
        beta,
        beta_source,
        recommended: a.ga.fitness,
        policies,
    };
    write_json(&ctx.layout.file(POLICY), &meta, &report)?;
    for p in &report.policies {
        println!("assign: school {school_id} {:<4} mean {:.4} min {:.4} sd {:.4}", p.policy, p.mean, p.min, p.sd_all);
    }
    Ok(())
}

fn kind_name(kind: FitnessKind) -> &'static str {
    match kind {
        FitnessKind::Ga => "ga",
        FitnessKind::Afga => "afga",
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub training: TrainingSummary,
    pub prediction: PredictionSummary,
    pub estimation: EstimationReport,
    pub assignment: PolicyReport,
}

pub fn report(ctx: &Ctx) -> CliResult<()> {
    let load = |name: &str, needs: &'static str| -> CliResult<PathBuf> {
        let path = ctx.layout.file(name);
        ctx.upstream(&path, "report", needs)?;
        Ok(path)
    };
    let summary = RunSummary {
        training: read_json(&load(TRAIN_SUMMARY, "train")?)?.data,
        prediction: read_json(&load(PREDICT_SUMMARY, "predict")?)?.data,
        estimation: read_json(&load(ESTIMATION, "estimate")?)?.data,
        assignment: read_json(&load(POLICY, "assign")?)?.data,
    };
    let meta = ctx.meta("report", ctx.cfg.seed);
    write_json(&ctx.layout.file(SUMMARY), &meta, &summary)?;
    let text = render_summary(&summary);
    write_text(&ctx.layout.file(SUMMARY_TEXT), &meta, &text)?;
    print!("{text}");
    Ok(())
}

fn render_summary(s: &RunSummary) -> String {
    let mut out = String::new();
    let t = &s.training;
    let _ = writeln!(out, "Friendship model");
    let _ = writeln!(
        out,
        "  {} epochs on {} classrooms; loss {:.4} -> {:.4}",
        t.epochs, t.train_classrooms, t.initial.total, t.last.total
    );
    let p = &s.prediction;
    if let (Some(mean), Some(min)) = (p.mean_homophily, p.min_homophily) {
        let _ = writeln!(out, "  same-gender friendship mass: mean {mean:.3}, min {min:.3}");
    }
    let _ = writeln!(out, "  survey replay ({} replicates), median squared error:", p.replicates);
    for pair in p.traits.chunks(2) {
        if let [nn, uni] = pair {
            let _ = writeln!(
                out,
                "    question {:>2}: model {:>8.2}  uniform {:>8.2}  win rate {:.3}",
                nn.question, nn.q50, uni.q50, nn.win_rate
            );
        }
    }
    let _ = writeln!(out, "\nPeer-effect estimation\n{}", s.estimation.to_table());
    let a = &s.assignment;
    let _ = writeln!(out, "Assignment, school {} (beta {:.3} from {})", a.school_id, a.beta, a.beta_source);
    for p in &a.policies {
        let _ = writeln!(
            out,
            "  {:<5} mean {:.4}  min {:.4}  sd {:.4}{}",
            p.policy,
            p.mean,
            p.min,
            p.sd_all,
            if p.feasible { "" } else { "  (outside constraints)" }
        );
    }
    let _ = writeln!(out, "  recommended policy: {}", kind_name(a.recommended));
    out
}
