#![allow(dead_code)]

use peerassign::cohort::{synth_cohort, Split, SynthConfig};
use peerassign::peereffect::{build_design, naive_ols, two_stage_iv, RegressionDesign};
use peerassign::peernn::OmegaMatrix;
use rayon::prelude::*;

/// Train-split design on the true friendship Ω of a synthetic cohort.
pub fn true_friend_design(cfg: &SynthConfig) -> RegressionDesign {
    let (cohort, truth) = synth_cohort(cfg).unwrap();
    let train = cohort.subset(Split::Train).unwrap();
    let omegas: Vec<OmegaMatrix> = train
        .classrooms()
        .iter()
        .map(|c| truth.friend_omega(&train, c).unwrap())
        .collect();
    build_design(&train, &omegas).unwrap()
}

#[derive(Debug, Clone, Copy)]
pub struct Replicate {
    pub iv: f64,
    pub iv_re: f64,
    pub ols: f64,
}

pub fn iv_replicate(cfg: &SynthConfig, with_re: bool) -> Replicate {
    let design = true_friend_design(cfg);
    let iv = two_stage_iv(&design, false).unwrap().beta;
    let iv_re = if with_re {
        two_stage_iv(&design, true).unwrap().beta
    } else {
        f64::NAN
    };
    let ols = naive_ols(&design, false).unwrap().beta;
    Replicate { iv, iv_re, ols }
}

/// Replications with seeds `base_seed + r`, reduced in replication order.
pub fn monte_carlo(cfg: &SynthConfig, reps: u64, base_seed: u64, with_re: bool) -> Vec<Replicate> {
    (0..reps)
        .into_par_iter()
        .map(|r| {
            let cfg = SynthConfig {
                seed: base_seed + r,
                ..cfg.clone()
            };
            iv_replicate(&cfg, with_re)
        })
        .collect()
}

pub fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

pub fn sd(v: &[f64]) -> f64 {
    let m = mean(v.iter().copied());
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}
