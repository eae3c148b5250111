//! Leave-one-out PSNR evaluation and λ sweeps.

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::project_volume;
use crate::solver::{compound_baseline, compound_logeuclidean, SolveConfig};
use crate::volume::{ScalarVolume, View};

/// How the PSNR peak is chosen when none is given.
pub const PEAK_CONVENTION: &str = "maximum valid intensity of the reference volume";

/// Decibel values with `+∞` written as the string `"inf"`.
mod decibels {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Db {
            Num(f64),
            Text(String),
        }
        match Db::deserialize(d)? {
            Db::Num(v) => Ok(v),
            Db::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Db::Text(t) => Err(serde::de::Error::custom(format!("invalid decibel value {t:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsnrResult {
    #[serde(with = "decibels")]
    pub db: f64,
    pub mse: f64,
    pub valid_voxels: usize,
    pub peak: f64,
}

/// `10·log10(peak² / MSE)` over voxels valid in both volumes. `peak`
/// defaults to the largest valid value of `reference`; identical inputs give
/// `+∞`.
pub fn psnr(estimate: &ScalarVolume, reference: &ScalarVolume, peak: Option<f64>) -> Result<PsnrResult> {
    if !estimate.grid().matches(reference.grid()) {
        return Err(Error::GridMismatch(format!(
            "cannot compare volumes on grids {:?} and {:?}",
            estimate.grid(),
            reference.grid()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut ref_max = f64::NEG_INFINITY;
    for j in 0..reference.grid().len() {
        if estimate.is_valid(j) && reference.is_valid(j) {
            let (a, b) = (estimate.data()[j] as f64, reference.data()[j] as f64);
            sum += (a - b) * (a - b);
            count += 1;
            ref_max = ref_max.max(b);
        }
    }
    if count == 0 {
        return Err(Error::EmptyInput("no voxel is valid in both volumes".into()));
    }
    let peak = match peak {
        Some(p) if p.is_finite() && p > 0.0 => p,
        Some(p) => return Err(Error::InvalidConfig(format!("PSNR peak must be positive, got {p}"))),
        None => reference.valid_range().map_or(ref_max, |(_, hi)| hi as f64),
    };
    let mse = sum / count as f64;
    let db = if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    };
    Ok(PsnrResult {
        db,
        mse,
        valid_voxels: count,
        peak,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[serde(rename = "logeuclid")]
    LogEuclidean,
    Baseline,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::LogEuclidean => "logeuclid",
            Method::Baseline => "baseline",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LooRound {
    pub held_out: usize,
    pub source_id: String,
    #[serde(flatten)]
    pub psnr: PsnrResult,
    /// Voxels whose predicted intensity was negative and clamped to zero.
    pub clamped_voxels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LooResult {
    pub method: Method,
    pub lambda: Option<f64>,
    pub delta: Option<f64>,
    pub views: usize,
    pub rounds: Vec<LooRound>,
    #[serde(with = "decibels")]
    pub mean_psnr_db: f64,
    pub peak_convention: String,
}

fn assemble(method: Method, cfg: Option<&SolveConfig>, views: usize, rounds: Vec<LooRound>) -> LooResult {
    let mean = rounds.iter().map(|r| r.psnr.db).sum::<f64>() / rounds.len() as f64;
    LooResult {
        method,
        lambda: cfg.map(|c| c.lambda),
        delta: cfg.map(|c| c.delta),
        views,
        rounds,
        mean_psnr_db: mean,
        peak_convention: PEAK_CONVENTION.into(),
    }
}

fn without(views: &[View], k: usize) -> Vec<View> {
    views
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != k)
        .map(|(_, v)| v.clone())
        .collect()
}

fn check_count(views: &[View]) -> Result<()> {
    if views.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "leave-one-out needs at least 2 views, got {}",
            views.len()
        )));
    }
    Ok(())
}

/// Fits on all views but one, renders the held-out direction and scores it,
/// for every view in turn.
pub fn leave_one_out(views: &[View], cfg: &SolveConfig) -> Result<LooResult> {
    check_count(views)?;
    let rounds: Vec<Result<LooRound>> = (0..views.len())
        .into_par_iter()
        .map(|k| {
            let (fit, _) = compound_logeuclidean(&without(views, k), cfg)?;
            let held = &views[k];
            let predicted = project_volume(&fit, held.geometry.direction())?;
            Ok(LooRound {
                held_out: k,
                source_id: held.geometry.source_id.clone(),
                psnr: psnr(&predicted, &held.volume, None)?,
                clamped_voxels: 0,
            })
        })
        .collect();
    Ok(assemble(
        Method::LogEuclidean,
        Some(cfg),
        views.len(),
        rounds.into_iter().collect::<Result<_>>()?,
    ))
}

/// [`leave_one_out`] with the unconstrained per-voxel fit.
pub fn leave_one_out_baseline(views: &[View]) -> Result<LooResult> {
    check_count(views)?;
    let rounds: Vec<Result<LooRound>> = (0..views.len())
        .into_par_iter()
        .map(|k| {
            let fit = compound_baseline(&without(views, k))?;
            let held = &views[k];
            let (predicted, clamped) = fit.project(held.geometry.direction())?;
            Ok(LooRound {
                held_out: k,
                source_id: held.geometry.source_id.clone(),
                psnr: psnr(&predicted, &held.volume, None)?,
                clamped_voxels: clamped,
            })
        })
        .collect();
    Ok(assemble(
        Method::Baseline,
        None,
        views.len(),
        rounds.into_iter().collect::<Result<_>>()?,
    ))
}

/// One dataset's row of the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub dataset: String,
    pub lambdas: Vec<f64>,
    pub results: Vec<LooResult>,
    pub baseline: Option<LooResult>,
}

/// Runs [`leave_one_out`] once per λ, and optionally the baseline.
pub fn lambda_sweep(
    dataset: &str,
    views: &[View],
    lambdas: &[f64],
    cfg: &SolveConfig,
    with_baseline: bool,
) -> Result<SweepTable> {
    if lambdas.is_empty() {
        return Err(Error::EmptyInput("no lambda values to sweep".into()));
    }
    let results = lambdas
        .iter()
        .map(|&lambda| leave_one_out(views, &SolveConfig { lambda, ..*cfg }))
        .collect::<Result<_>>()?;
    let baseline = with_baseline.then(|| leave_one_out_baseline(views)).transpose()?;
    Ok(SweepTable {
        dataset: dataset.into(),
        lambdas: lambdas.to_vec(),
        results,
        baseline,
    })
}

impl SweepTable {
    /// Result with the highest mean PSNR.
    pub fn best(&self) -> &LooResult {
        self.results
            .iter()
            .max_by(|a, b| a.mean_psnr_db.total_cmp(&b.mean_psnr_db))
            .expect("sweep has at least one lambda")
    }

    /// Mean PSNR per λ, in sweep order.
    pub fn means(&self) -> Vec<f64> {
        self.results.iter().map(|r| r.mean_psnr_db).collect()
    }

    /// One row per method, λ and held-out round:
    /// `dataset,method,lambda,round,psnr_db,valid_voxels,clamped_voxels`.
    /// Baseline rows leave `lambda` empty.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::format("<csv>", e.to_string());
        w.write_record(["dataset", "method", "lambda", "round", "psnr_db", "valid_voxels", "clamped_voxels"])
            .map_err(csv_err)?;
        for res in self.results.iter().chain(&self.baseline) {
            let lambda = res.lambda.map(|l| l.to_string()).unwrap_or_default();
            for r in &res.rounds {
                w.write_record([
                    self.dataset.clone(),
                    res.method.name().to_string(),
                    lambda.clone(),
                    r.held_out.to_string(),
                    r.psnr.db.to_string(),
                    r.psnr.valid_voxels.to_string(),
                    r.clamped_voxels.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::format("<csv>", e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}
