//! The estimation pipeline: validate, split, cross-fit, score, trim,
//! normalize and infer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::contrast::{validate_contrast, ContrastSpec, Estimand, EstimationConfig, KernelSpec, MediatorKind};
use crate::crossfit::{default_strata, fit_predict_nuisances, make_folds, Level, NuisanceRequest, NuisanceSet};
use crate::data::{Dataset, Design};
use crate::error::EstimationError;
use crate::scores::{self, GroupRole, ScoreVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub name: String,
    pub value: f64,
    pub std_error: f64,
    pub t_stat: f64,
    pub p_value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_used: usize,
    /// Rows removed by trimming, keyed by the group whose propensity was small.
    pub n_trimmed: BTreeMap<String, usize>,
    /// Rows dropped because a per-row nuisance lookup was unavailable.
    pub n_excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MediationReport {
    pub total: EffectEstimate,
    pub nde: EffectEstimate,
    pub nie: EffectEstimate,
    /// total - nde - nie
    pub decomposition_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Estimate {
    Effect(EffectEstimate),
    Mediation(MediationReport),
}

impl Estimate {
    /// The named effects in reporting order.
    pub fn effects(&self) -> Vec<&EffectEstimate> {
        match self {
            Estimate::Effect(e) => vec![e],
            Estimate::Mediation(r) => vec![&r.total, &r.nde, &r.nie],
        }
    }
}

/// Normal-approximation inference for one estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Inference {
    pub std_error: f64,
    pub t_stat: f64,
    pub p_value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Standard error sd(φ)/√n of the influence contributions `phi` (whose mean is
/// `value`), with the two-sided p-value and symmetric confidence interval.
pub fn infer(value: f64, phi: &[f64], level: f64) -> Result<Inference, EstimationError> {
    let n = phi.len();
    if n < 2 {
        return Err(EstimationError::TooFewUntrimmed("score".into()));
    }
    let mean = phi.iter().sum::<f64>() / n as f64;
    let var = phi.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if !(var > 0.0) {
        return Err(EstimationError::DegenerateVariance);
    }
    let std_error = (var / n as f64).sqrt();
    Ok(inference_from_se(value, std_error, level))
}

/// t statistic, p-value and confidence interval for a value and its standard error.
pub fn inference_from_se(value: f64, std_error: f64, level: f64) -> Inference {
    let normal = Normal::standard();
    let t_stat = value / std_error;
    let p_value = (2.0 * (1.0 - normal.cdf(t_stat.abs()))).clamp(0.0, 1.0);
    let z = normal.inverse_cdf(0.5 + level / 2.0);
    Inference { std_error, t_stat, p_value, ci_low: value - z * std_error, ci_high: value + z * std_error }
}

/// Rows to drop for small denominators, with per-group counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrimReport {
    pub mask: Vec<bool>,
    pub per_group: BTreeMap<String, usize>,
}

impl TrimReport {
    fn union(mut self, other: &TrimReport) -> TrimReport {
        for (a, b) in self.mask.iter_mut().zip(&other.mask) {
            *a |= *b;
        }
        for (k, v) in &other.per_group {
            *self.per_group.entry(k.clone()).or_insert(0) += v;
        }
        self
    }
}

/// Marks every row of an inverse-weighted group whose denominator propensity
/// is below `tau`. Rows that only appear in lead groups are never marked.
pub fn trim(score: &ScoreVector, tau: f64) -> TrimReport {
    let mut mask = vec![false; score.n];
    let mut per_group = BTreeMap::new();
    for g in score.groups.iter().filter(|g| g.role == GroupRole::InverseWeighted) {
        let mut count = 0;
        for (&i, &p) in g.rows.iter().zip(&g.denominators) {
            if p < tau {
                if !mask[i] {
                    count += 1;
                }
                mask[i] = true;
            }
        }
        if count > 0 {
            *per_group.entry(g.tag.clone()).or_insert(0) += count;
        }
    }
    TrimReport { mask, per_group }
}

fn apply(score: &mut ScoreVector, trimmed: &[bool], excluded: &[bool]) {
    for i in 0..score.n {
        score.trimmed[i] = trimmed[i];
        score.excluded[i] |= excluded[i];
    }
}

fn check_groups(score: &ScoreVector) -> Result<(), EstimationError> {
    let kept = score.kept();
    for g in &score.groups {
        if g.kept_rows(&kept) < 2 {
            return Err(EstimationError::TooFewUntrimmed(g.tag.clone()));
        }
    }
    Ok(())
}

fn effect(name: String, score: &ScoreVector, trims: &TrimReport, level: f64) -> Result<EffectEstimate, EstimationError> {
    check_groups(score)?;
    let value = score.value();
    let phi = score.influence();
    let inf = infer(value, &phi, level)?;
    Ok(EffectEstimate {
        name,
        value,
        std_error: inf.std_error,
        t_stat: inf.t_stat,
        p_value: inf.p_value,
        ci_low: inf.ci_low,
        ci_high: inf.ci_high,
        n_used: phi.len(),
        n_trimmed: trims.per_group.clone(),
        n_excluded: score.excluded.iter().filter(|&&e| e).count(),
    })
}

fn fmt_level(v: f64) -> String {
    Level(v).to_string()
}

/// Report name of a contrast's single effect.
pub fn effect_name(c: &ContrastSpec) -> String {
    let (d, dp) = (fmt_level(c.d), fmt_level(c.d_prime));
    let m = |v: Option<f64>| v.map_or_else(|| "?".to_string(), fmt_level);
    match c.estimand {
        Estimand::AtetJoint => format!("atet({d},{},{dp},{})", m(c.m), m(c.m_prime)),
        Estimand::Ate => format!("ate({d},{},{dp},{})", m(c.m), m(c.m_prime)),
        Estimand::CounterfactualDMd => format!("E[Y1({dp},M({d}))|D={d}]"),
        Estimand::CounterfactualDprimeMdprime => format!("E[Y1({dp},M({dp}))|D={d}]"),
        Estimand::NaturalDecomposition | Estimand::CounterfactualDoubleTrend => "total".into(),
    }
}

/// Cross-fitted nuisances for a set of contrasts sharing one fold split.
pub fn fit_nuisances(ds: &Dataset, contrasts: &[ContrastSpec], cfg: &EstimationConfig) -> Result<NuisanceSet, EstimationError> {
    cfg.check()?;
    let first = contrasts.first().ok_or_else(|| EstimationError::InvalidContrast("no contrasts given".into()))?;
    let mut request = NuisanceRequest { treatment_kernel: first.treatment_kernel, mediator: first.mediator, ..Default::default() };
    for c in contrasts {
        validate_contrast(ds, c)?;
        if c.treatment_kernel != first.treatment_kernel || c.mediator != first.mediator {
            return Err(EstimationError::InvalidContrast(
                "contrasts estimated together must share the kernel and mediator kind".into(),
            ));
        }
        request.merge(&scores::nuisance_request(ds, c));
    }
    let strata = default_strata(ds, first.treatment_kernel.as_ref(), first.mediator);
    let folds = make_folds(ds.n(), cfg.n_folds, cfg.seed, &strata);
    fit_predict_nuisances(ds, &folds, &request, cfg)
}

/// Runs the full pipeline for one contrast.
pub fn estimate(ds: &Dataset, c: &ContrastSpec, cfg: &EstimationConfig) -> Result<Estimate, EstimationError> {
    let nu = fit_nuisances(ds, std::slice::from_ref(c), cfg)?;
    estimate_with_nuisances(ds, c, &nu, cfg)
}

/// Runs several contrasts on one fold split and one set of nuisance fits.
pub fn estimate_many(ds: &Dataset, contrasts: &[ContrastSpec], cfg: &EstimationConfig) -> Result<Vec<Estimate>, EstimationError> {
    let nu = fit_nuisances(ds, contrasts, cfg)?;
    contrasts.iter().map(|c| estimate_with_nuisances(ds, c, &nu, cfg)).collect()
}

/// Scores, trims and infers given already fitted nuisances.
pub fn estimate_with_nuisances(
    ds: &Dataset,
    c: &ContrastSpec,
    nu: &NuisanceSet,
    cfg: &EstimationConfig,
) -> Result<Estimate, EstimationError> {
    cfg.check()?;
    validate_contrast(ds, c)?;
    let (tau, level) = (cfg.trim_threshold, cfg.confidence_level);
    let kernel = c.treatment_kernel;
    let single = |mut score: ScoreVector| -> Result<Estimate, EstimationError> {
        let trims = trim(&score, tau);
        let excluded = score.excluded.clone();
        apply(&mut score, &trims.mask, &excluded);
        Ok(Estimate::Effect(effect(effect_name(c), &score, &trims, level)?))
    };
    match (c.design, c.estimand) {
        (Design::RepeatedCrossSection, Estimand::AtetJoint) => single(scores::score_atet_rcs(ds, nu, c)?),
        (Design::RepeatedCrossSection, Estimand::Ate) => single(scores::score_ate_rcs(ds, nu, c)?),
        (Design::Panel, Estimand::AtetJoint) => single(scores::score_atet_panel(ds, nu, c)?),
        (Design::Panel, Estimand::Ate) => single(scores::score_ate_panel(ds, nu, c)?),
        (_, Estimand::CounterfactualDMd) => single(mediated(ds, nu, c.d, c.d_prime, kernel, c.mediator)?.score),
        (_, Estimand::CounterfactualDprimeMdprime) => single(standard(ds, nu, c.d, c.d_prime, kernel)?.score),
        (_, Estimand::NaturalDecomposition) => {
            let md = mediated(ds, nu, c.d, c.d_prime, kernel, c.mediator)?.score;
            let reference = standard(ds, nu, c.d, c.d_prime, kernel)?.score;
            decompose(ds, c, md, reference, cfg).map(Estimate::Mediation)
        }
        (_, Estimand::CounterfactualDoubleTrend) => {
            let md = mediated(ds, nu, c.d, c.d_prime, kernel, c.mediator)?.score;
            let reference = match c.design {
                Design::RepeatedCrossSection => scores::score_counterfactual_doubletrend_rcs(ds, nu, c.d, c.d_prime, kernel)?,
                Design::Panel => scores::score_counterfactual_doubletrend_panel(ds, nu, c.d, c.d_prime, kernel)?,
            }
            .score;
            decompose(ds, c, md, reference, cfg).map(Estimate::Mediation)
        }
    }
}

fn mediated(
    ds: &Dataset,
    nu: &NuisanceSet,
    d: f64,
    dp: f64,
    kernel: Option<KernelSpec>,
    mediator: MediatorKind,
) -> Result<scores::CounterfactualEstimate, EstimationError> {
    Ok(match ds.design() {
        Design::RepeatedCrossSection => scores::score_counterfactual_md_rcs(ds, nu, d, dp, kernel, mediator)?,
        Design::Panel => scores::score_counterfactual_md_panel(ds, nu, d, dp, kernel, mediator)?,
    })
}

fn standard(
    ds: &Dataset,
    nu: &NuisanceSet,
    d: f64,
    dp: f64,
    kernel: Option<KernelSpec>,
) -> Result<scores::CounterfactualEstimate, EstimationError> {
    Ok(match ds.design() {
        Design::RepeatedCrossSection => scores::score_counterfactual_standard_rcs(ds, nu, d, dp, kernel)?,
        Design::Panel => scores::score_counterfactual_standard_panel(ds, nu, d, dp, kernel)?,
    })
}

/// total = observed − reference, NDE = observed − mediated, NIE = mediated − reference,
/// all on one common set of rows so the identity is exact and covariances
/// enter through differenced influence contributions.
fn decompose(
    ds: &Dataset,
    c: &ContrastSpec,
    mut md: ScoreVector,
    mut reference: ScoreVector,
    cfg: &EstimationConfig,
) -> Result<MediationReport, EstimationError> {
    let mut observed = scores::score_observed(ds, c.d, c.treatment_kernel)?.score;
    let trims = trim(&md, cfg.trim_threshold).union(&trim(&reference, cfg.trim_threshold));
    let excluded: Vec<bool> = md.excluded.iter().zip(&reference.excluded).map(|(a, b)| *a || *b).collect();
    for s in [&mut observed, &mut md, &mut reference] {
        apply(s, &trims.mask, &excluded);
    }
    for s in [&observed, &md, &reference] {
        check_groups(s)?;
    }
    let (o, m, r) = (observed.value(), md.value(), reference.value());
    let (phi_o, phi_m, phi_r) = (observed.influence(), md.influence(), reference.influence());
    let level = cfg.confidence_level;
    let n_excluded = excluded.iter().filter(|&&e| e).count();
    let make = |name: &str, value: f64, a: &[f64], b: &[f64]| -> Result<EffectEstimate, EstimationError> {
        let phi: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        let inf = infer(value, &phi, level)?;
        Ok(EffectEstimate {
            name: name.into(),
            value,
            std_error: inf.std_error,
            t_stat: inf.t_stat,
            p_value: inf.p_value,
            ci_low: inf.ci_low,
            ci_high: inf.ci_high,
            n_used: phi.len(),
            n_trimmed: trims.per_group.clone(),
            n_excluded,
        })
    };
    let total = make("total", o - r, &phi_o, &phi_r)?;
    let nde = make("nde", o - m, &phi_o, &phi_m)?;
    let nie = make("nie", m - r, &phi_m, &phi_r)?;
    let decomposition_residual = total.value - nde.value - nie.value;
    Ok(MediationReport { total, nde, nie, decomposition_residual })
}
