//! Per-observation score contributions for the doubly robust expressions.
//!
//! Every expression is a signed combination of Hájek-normalized group means:
//! within a group the estimate is Σ wᵢzᵢ / Σ wᵢ, and the expression's value is
//! Σ_g c_g · mean_g. Groups share rows freely (the ATE lead group contains the
//! T=1 cell groups, for instance), so a [`ScoreVector`] stores groups rather
//! than a single tag per row.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::contrast::{ContrastSpec, Estimand, KernelSpec, MediatorKind};
use crate::crossfit::{mediator_in_period, Level, NuisanceId, NuisanceRequest, NuisanceSet};
use crate::data::{Dataset, Design};
use crate::error::ScoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupRole {
    /// Plain (possibly kernel-weighted) cell average; never trimmed.
    Lead,
    /// Debiasing term with a propensity in the weight's denominator.
    InverseWeighted,
}

/// One Hájek-normalized group of a score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreGroup {
    pub tag: String,
    pub role: GroupRole,
    /// Multiplier of the group mean in the expression (±1 for most builders).
    pub coef: f64,
    pub rows: Vec<usize>,
    pub weights: Vec<f64>,
    pub terms: Vec<f64>,
    /// Denominator propensity of each row's weight; empty for lead groups.
    pub denominators: Vec<f64>,
}

impl ScoreGroup {
    fn new(tag: String, role: GroupRole, coef: f64) -> Self {
        Self { tag, role, coef, rows: vec![], weights: vec![], terms: vec![], denominators: vec![] }
    }

    fn push(&mut self, i: usize, weight: f64, term: f64, denominator: Option<f64>) -> Result<(), ScoreError> {
        if weight == 0.0 {
            return Ok(());
        }
        if !weight.is_finite() || weight < 0.0 || !term.is_finite() {
            return Err(ScoreError::NonFiniteTerm(i));
        }
        self.rows.push(i);
        self.weights.push(weight);
        self.terms.push(term);
        if let Some(p) = denominator {
            self.denominators.push(p);
        }
        Ok(())
    }

    /// (Σ w z, Σ w) over the kept rows.
    fn sums(&self, kept: &[bool]) -> (f64, f64) {
        let mut num = 0.0;
        let mut den = 0.0;
        for ((&i, &w), &z) in self.rows.iter().zip(&self.weights).zip(&self.terms) {
            if kept[i] {
                num += w * z;
                den += w;
            }
        }
        (num, den)
    }

    pub fn kept_rows(&self, kept: &[bool]) -> usize {
        self.rows.iter().filter(|&&i| kept[i]).count()
    }
}

/// Score of one expression on a dataset of `n` rows.
///
/// `trimmed` rows were removed for small propensity denominators and
/// `excluded` rows lacked a per-row nuisance lookup; both are dropped from
/// every group and from the sample size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub n: usize,
    pub groups: Vec<ScoreGroup>,
    pub trimmed: Vec<bool>,
    pub excluded: Vec<bool>,
}

impl ScoreVector {
    fn new(n: usize) -> Self {
        Self { n, groups: vec![], trimmed: vec![false; n], excluded: vec![false; n] }
    }

    pub fn kept(&self) -> Vec<bool> {
        self.trimmed.iter().zip(&self.excluded).map(|(t, e)| !t && !e).collect()
    }

    pub fn n_used(&self) -> usize {
        self.kept().iter().filter(|&&k| k).count()
    }

    /// Hájek mean of every group (NaN for a group with no kept weight).
    pub fn group_means(&self) -> Vec<f64> {
        let kept = self.kept();
        self.groups
            .iter()
            .map(|g| {
                let (num, den) = g.sums(&kept);
                if den > 0.0 {
                    num / den
                } else {
                    f64::NAN
                }
            })
            .collect()
    }

    pub fn value(&self) -> f64 {
        self.groups.iter().zip(self.group_means()).map(|(g, mean)| g.coef * mean).sum()
    }

    /// Influence contributions of the kept rows in row order; their mean is
    /// the value and their dispersion gives the standard error.
    pub fn influence(&self) -> Vec<f64> {
        let kept = self.kept();
        let n_used = kept.iter().filter(|&&k| k).count() as f64;
        let value = self.value();
        let mut phi = vec![value; self.n];
        for g in &self.groups {
            let (num, den) = g.sums(&kept);
            if den <= 0.0 {
                continue;
            }
            let mean = num / den;
            for ((&i, &w), &z) in g.rows.iter().zip(&g.weights).zip(&g.terms) {
                if kept[i] {
                    phi[i] += g.coef * n_used * w * (z - mean) / den;
                }
            }
        }
        phi.into_iter().zip(kept).filter_map(|(v, k)| k.then_some(v)).collect()
    }

    /// Signed raw contributions Σ_g c_g wᵢ zᵢ of every row, before normalization.
    pub fn contributions(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for g in &self.groups {
            for ((&i, &w), &z) in g.rows.iter().zip(&g.weights).zip(&g.terms) {
                out[i] += g.coef * w * z;
            }
        }
        out
    }

    /// Tags of the groups that row `i` belongs to.
    pub fn group_tags(&self, i: usize) -> Vec<&str> {
        self.groups.iter().filter(|g| g.rows.contains(&i)).map(|g| g.tag.as_str()).collect()
    }

    /// `a·self + b·other`, with the union of both removal masks.
    pub fn combine(&self, a: f64, other: &ScoreVector, b: f64) -> ScoreVector {
        assert_eq!(self.n, other.n);
        fn scaled(s: &ScoreVector, c: f64) -> impl Iterator<Item = ScoreGroup> + '_ {
            s.groups.iter().cloned().map(move |mut g| {
                g.coef *= c;
                g
            })
        }
        ScoreVector {
            n: self.n,
            groups: scaled(self, a).chain(scaled(other, b)).collect(),
            trimmed: self.trimmed.iter().zip(&other.trimmed).map(|(x, y)| *x || *y).collect(),
            excluded: self.excluded.iter().zip(&other.excluded).map(|(x, y)| *x || *y).collect(),
        }
    }
}

/// Which counterfactual mean an estimate refers to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum CounterfactualLabel {
    /// E[Y₁ | D=d (, T=1)], observed directly.
    Observed { d: f64 },
    /// E[μ_{d',m'}(t,X) | D=d, M=m, T=1].
    CellOutcome { d: f64, m: f64, d_prime: f64, m_prime: f64, t: u8 },
    /// E[Y₁(d', M(d)) | D=d (, T=1)].
    TreatedMediator { d: f64, d_prime: f64 },
    /// E[Y₁(d', M(d')) | D=d (, T=1)] from parallel trends across treatments.
    ControlMediator { d: f64, d_prime: f64 },
    /// E[Y₁(d', M(d')) | D=d (, T=1)] from parallel trends in outcome and mediator.
    DoubleTrend { d: f64, d_prime: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualEstimate {
    pub value: f64,
    pub score: ScoreVector,
    pub label: CounterfactualLabel,
}

impl CounterfactualEstimate {
    fn from_score(score: ScoreVector, label: CounterfactualLabel) -> Self {
        Self { value: score.value(), score, label }
    }
}

/// ω_i = K((D_i - d_ref)/h)/h for every entry of `d_col`.
pub fn kernel_weights(d_col: &[f64], d_ref: f64, k: KernelSpec) -> Result<Vec<f64>, ScoreError> {
    if !(k.bandwidth > 0.0) {
        return Err(ScoreError::NonpositiveBandwidth(k.bandwidth));
    }
    Ok(d_col.iter().map(|&v| k.weight(v, d_ref)).collect())
}

fn cell_tag(d: f64, m: Option<f64>, t: Option<u8>) -> String {
    let mut parts = vec![Level(d).to_string()];
    if let Some(m) = m {
        parts.push(Level(m).to_string());
    }
    if let Some(t) = t {
        parts.push(t.to_string());
    }
    format!("({})", parts.join(","))
}

/// Shared accessors for the builders.
struct Ctx<'a> {
    ds: &'a Dataset,
    nu: &'a NuisanceSet,
    kernel: Option<KernelSpec>,
}

impl<'a> Ctx<'a> {
    fn new(ds: &'a Dataset, nu: &'a NuisanceSet, kernel: Option<KernelSpec>) -> Result<Self, ScoreError> {
        if let Some(k) = kernel {
            if !(k.bandwidth > 0.0) {
                return Err(ScoreError::NonpositiveBandwidth(k.bandwidth));
            }
        }
        Ok(Self { ds, nu, kernel })
    }

    fn n(&self) -> usize {
        self.ds.n()
    }

    fn treat(&self, i: usize, d: f64) -> f64 {
        let v = self.ds.d()[i];
        match &self.kernel {
            Some(k) => k.weight(v, d),
            None => f64::from(u8::from(Level(v) == Level(d))),
        }
    }

    fn is_m(&self, i: usize, m: f64) -> bool {
        Level(self.ds.m()[i]) == Level(m)
    }

    fn t(&self, i: usize) -> u8 {
        self.ds.t().map_or(1, |t| t[i])
    }

    fn y(&self, i: usize) -> f64 {
        self.ds.y()[i]
    }

    fn y_pre(&self, i: usize) -> f64 {
        self.ds.y_pre().map_or(f64::NAN, |v| v[i])
    }

    fn delta_y(&self, i: usize) -> f64 {
        self.y(i) - self.y_pre(i)
    }

    fn get(&self, id: NuisanceId) -> Result<&'a [f64], ScoreError> {
        self.nu.get(id)
    }

    fn require_design(&self, design: Design, what: &str) -> Result<(), ScoreError> {
        if self.ds.design() == design {
            Ok(())
        } else {
            Err(ScoreError::Unsupported(format!("{what} needs {design:?} data")))
        }
    }

    /// Per-row μ lookups at each row's own mediator value: cell fits for
    /// discrete mediators, the mediator-regressor fit otherwise. `None` when
    /// the row's cell has no fitted model.
    fn mediator_lookup(&self, kind: MediatorKind, cell: impl Fn(Level) -> NuisanceId, pooled: NuisanceId) -> Result<Vec<Option<f64>>, ScoreError> {
        match kind {
            MediatorKind::Continuous => Ok(self.get(pooled)?.iter().map(|&v| Some(v)).collect()),
            MediatorKind::Discrete => {
                let mut cache: BTreeMap<Level, Option<&[f64]>> = BTreeMap::new();
                Ok((0..self.n())
                    .map(|i| {
                        let m = Level(self.ds.m()[i]);
                        let v = *cache.entry(m).or_insert_with(|| self.nu.try_get(cell(m)));
                        v.map(|v| v[i])
                    })
                    .collect())
            }
        }
    }
}

fn l(v: f64) -> Level {
    Level(v)
}

fn finite_check(i: usize, v: f64) -> Result<f64, ScoreError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(ScoreError::NonFiniteTerm(i))
    }
}

fn joint_values(c: &ContrastSpec) -> Result<(f64, f64), ScoreError> {
    match (c.m, c.m_prime) {
        (Some(m), Some(mp)) => Ok((m, mp)),
        _ => Err(ScoreError::Unsupported("joint contrasts need m and m_prime".into())),
    }
}

// ---------------------------------------------------------------------------
// Repeated cross-sections
// ---------------------------------------------------------------------------

/// ATET of (d, m) against (d', m') among D=d, M=m, T=1.
pub fn score_atet_rcs(ds: &Dataset, nu: &NuisanceSet, c: &ContrastSpec) -> Result<ScoreVector, ScoreError> {
    let cx = Ctx::new(ds, nu, c.treatment_kernel)?;
    cx.require_design(Design::RepeatedCrossSection, "score_atet_rcs")?;
    let (d, dp) = (c.d, c.d_prime);
    let (m, mp) = joint_values(c)?;
    let mu_dm0 = cx.get(NuisanceId::MuCell { d: l(d), m: l(m), t: 0 })?;
    let mu_p1 = cx.get(NuisanceId::MuCell { d: l(dp), m: l(mp), t: 1 })?;
    let mu_p0 = cx.get(NuisanceId::MuCell { d: l(dp), m: l(mp), t: 0 })?;
    let rho_dm1 = cx.get(NuisanceId::RhoCell { d: l(d), m: l(m), t: 1 })?;
    let rho_dm0 = cx.get(NuisanceId::RhoCell { d: l(d), m: l(m), t: 0 })?;
    let rho_p1 = cx.get(NuisanceId::RhoCell { d: l(dp), m: l(mp), t: 1 })?;
    let rho_p0 = cx.get(NuisanceId::RhoCell { d: l(dp), m: l(mp), t: 0 })?;

    let mut lead = ScoreGroup::new(cell_tag(d, Some(m), Some(1)), GroupRole::Lead, 1.0);
    let mut g_dm0 = ScoreGroup::new(cell_tag(d, Some(m), Some(0)), GroupRole::InverseWeighted, -1.0);
    let mut g_p1 = ScoreGroup::new(cell_tag(dp, Some(mp), Some(1)), GroupRole::InverseWeighted, -1.0);
    let mut g_p0 = ScoreGroup::new(cell_tag(dp, Some(mp), Some(0)), GroupRole::InverseWeighted, 1.0);
    for i in 0..cx.n() {
        let y = cx.y(i);
        let t = cx.t(i);
        if cx.is_m(i, m) {
            let w = cx.treat(i, d);
            if t == 1 {
                lead.push(i, w, y - (mu_dm0[i] + mu_p1[i] - mu_p0[i]), None)?;
            } else {
                g_dm0.push(i, w * rho_dm1[i] / rho_dm0[i], y - mu_dm0[i], Some(rho_dm0[i]))?;
            }
        }
        if cx.is_m(i, mp) {
            let w = cx.treat(i, dp);
            if t == 1 {
                g_p1.push(i, w * rho_dm1[i] / rho_p1[i], y - mu_p1[i], Some(rho_p1[i]))?;
            } else {
                g_p0.push(i, w * rho_dm1[i] / rho_p0[i], y - mu_p0[i], Some(rho_p0[i]))?;
            }
        }
    }
    let mut s = ScoreVector::new(cx.n());
    s.groups = vec![lead, g_dm0, g_p1, g_p0];
    Ok(s)
}

/// ATE of (d, m) against (d', m') in the post-period population.
pub fn score_ate_rcs(ds: &Dataset, nu: &NuisanceSet, c: &ContrastSpec) -> Result<ScoreVector, ScoreError> {
    let cx = Ctx::new(ds, nu, c.treatment_kernel)?;
    cx.require_design(Design::RepeatedCrossSection, "score_ate_rcs")?;
    let (d, dp) = (c.d, c.d_prime);
    let (m, mp) = joint_values(c)?;
    let mu = |dd: f64, mm: f64, t: u8| cx.get(NuisanceId::MuCell { d: l(dd), m: l(mm), t });
    let rho = |dd: f64, mm: f64, t: u8| cx.get(NuisanceId::RhoCell { d: l(dd), m: l(mm), t });
    let (mu_d1, mu_d0, mu_p1, mu_p0) = (mu(d, m, 1)?, mu(d, m, 0)?, mu(dp, mp, 1)?, mu(dp, mp, 0)?);
    let (rho_d1, rho_d0, rho_p1, rho_p0) = (rho(d, m, 1)?, rho(d, m, 0)?, rho(dp, mp, 1)?, rho(dp, mp, 0)?);
    let p1 = cx.get(NuisanceId::PeriodProb { t: 1 })?;

    let mut lead = ScoreGroup::new("(T=1)".into(), GroupRole::Lead, 1.0);
    let mut groups = [
        ScoreGroup::new(cell_tag(d, Some(m), Some(1)), GroupRole::InverseWeighted, 1.0),
        ScoreGroup::new(cell_tag(d, Some(m), Some(0)), GroupRole::InverseWeighted, -1.0),
        ScoreGroup::new(cell_tag(dp, Some(mp), Some(1)), GroupRole::InverseWeighted, -1.0),
        ScoreGroup::new(cell_tag(dp, Some(mp), Some(0)), GroupRole::InverseWeighted, 1.0),
    ];
    for i in 0..cx.n() {
        let y = cx.y(i);
        let t = cx.t(i);
        if t == 1 {
            lead.push(i, 1.0, mu_d1[i] - mu_d0[i] - (mu_p1[i] - mu_p0[i]), None)?;
        }
        if cx.is_m(i, m) {
            let w = cx.treat(i, d);
            let (g, muv, r) = if t == 1 { (0, mu_d1, rho_d1) } else { (1, mu_d0, rho_d0) };
            groups[g].push(i, w * p1[i] / r[i], y - muv[i], Some(r[i]))?;
        }
        if cx.is_m(i, mp) {
            let w = cx.treat(i, dp);
            let (g, muv, r) = if t == 1 { (2, mu_p1, rho_p1) } else { (3, mu_p0, rho_p0) };
            groups[g].push(i, w * p1[i] / r[i], y - muv[i], Some(r[i]))?;
        }
    }
    let mut s = ScoreVector::new(cx.n());
    s.groups = std::iter::once(lead).chain(groups).collect();
    Ok(s)
}

/// E[μ_{d',m'}(t,X) | D=d, M=m, T=1], the building block of the joint-contrast expressions.
pub fn score_counterfactual_d_prime_m_t_rcs(
    ds: &Dataset,
    nu: &NuisanceSet,
    d: f64,
    m: f64,
    d_prime: f64,
    m_prime: f64,
    t: u8,
) -> Result<CounterfactualEstimate, ScoreError> {
    score_counterfactual_d_prime_m_t_rcs_kernel(ds, nu, d, m, d_prime, m_prime, t, None)
}

/// Kernel-weighted variant of [`score_counterfactual_d_prime_m_t_rcs`].
#[allow(clippy::too_many_arguments)]
pub fn score_counterfactual_d_prime_m_t_rcs_kernel(
    ds: &Dataset,
    nu: &NuisanceSet,
    d: f64,
    m: f64,
    d_prime: f64,
    m_prime: f64,
    t: u8,
    kernel: Option<KernelSpec>,
) -> Result<CounterfactualEstimate, ScoreError> {
    let cx = Ctx::new(ds, nu, kernel)?;
    cx.require_design(Design::RepeatedCrossSection, "score_counterfactual_d_prime_m_t_rcs")?;
    let mu = cx.get(NuisanceId::MuCell { d: l(d_prime), m: l(m_prime), t })?;
    let rho_dm1 = cx.get(NuisanceId::RhoCell { d: l(d), m: l(m), t: 1 })?;
    let rho_g = cx.get(NuisanceId::RhoCell { d: l(d_prime), m: l(m_prime), t })?;
    let mut lead = ScoreGroup::new(cell_tag(d, Some(m), Some(1)), GroupRole::Lead, 1.0);
    let mut g = ScoreGroup::new(cell_tag(d_prime, Some(m_prime), Some(t)), GroupRole::InverseWeighted, 1.0);
    for i in 0..cx.n() {
        if cx.t(i) == 1 && cx.is_m(i, m) {
            lead.push(i, cx.treat(i, d), mu[i], None)?;
        }
        if cx.t(i) == t && cx.is_m(i, m_prime) {
            g.push(i, cx.treat(i, d_prime) * rho_dm1[i] / rho_g[i], cx.y(i) - mu[i], Some(rho_g[i]))?;
        }
    }
    let mut s = ScoreVector::new(cx.n());
    s.groups = vec![lead, g];
    Ok(CounterfactualEstimate::from_score(s, CounterfactualLabel::CellOutcome { d, m, d_prime, m_prime: m_prime, t }))
}

/// E[Y | D=d, T=1] (cross-sections) or E[Y₁ | D=d] (panel) as a one-group score.
pub fn score_observed(ds: &Dataset, d: f64, kernel: Option<KernelSpec>) -> Result<CounterfactualEstimate, ScoreError> {
    let nu = NuisanceSet::new(ds.n());
    let cx = Ctx::new(ds, &nu, kernel)?;
    let tag = match ds.design() {
        Design::RepeatedCrossSection => cell_tag(d, None, Some(1)),
        Design::Panel => cell_tag(d, None, None),
    };
    let mut lead = ScoreGroup::new(tag, GroupRole::Lead, 1.0);
    for i in 0..cx.n() {
        if cx.t(i) == 1 {
            lead.push(i, cx.treat(i, d), cx.y(i), None)?;
        }
    }
    let mut s = ScoreVector::new(cx.n());
    s.groups = vec![lead];
    Ok(CounterfactualEstimate::from_score(s, CounterfactualLabel::Observed { d }))
}

/// E[Y₁(d', M(d)) | D=d, T=1] averaging over the realized mediator, with
/// mediator-conditioned treatment-period propensities.
pub fn score_counterfactual_md_rcs(
    ds: &Dataset,
    nu: &NuisanceSet,
    d: f64,
    d_prime: f64,
    kernel: Option<KernelSpec>,
    mediator: MediatorKind,
) -> Result<CounterfactualEstimate, ScoreError> {
    let cx = Ctx::new(ds, nu, kernel)?;
    cx.require_design(Design::RepeatedCrossSection, "score_counterfactual_md_rcs")?;
    let (dp, ld, ldp) = (d_prime, l(d), l(d_prime));
    let look = |dd: Level, t: u8| {
        cx.mediator_lookup(mediator, |m| NuisanceId::MuCell { d: dd, m, t }, NuisanceId::MuTreatMed { d: dd, t })
    };
    let (mu_d0, mu_p1, mu_p0) = (look(ld, 0)?, look(ldp, 1)?, look(ldp, 0)?);
    let pi = |dd: Level, t: u8| cx.get(NuisanceId::PiTreatMed { d: dd, t });
    let (pi_d1, pi_d0, pi_p1, pi_p0) = (pi(ld, 1)?, pi(ld, 0)?, pi(ldp, 1)?, pi(ldp, 0)?);

    let mut s = ScoreVector::new(cx.n());
    let mut lead = ScoreGroup::new(cell_tag(d, None, Some(1)), GroupRole::Lead, 1.0);
    let mut g_d0 = ScoreGroup::new(cell_tag(d, None, Some(0)), GroupRole::InverseWeighted, 1.0);
    let mut g_p1 = ScoreGroup::new(cell_tag(dp, None, Some(1)), GroupRole::InverseWeighted, 1.0);
    let mut g_p0 = ScoreGroup::new(cell_tag(dp, None, Some(0)), GroupRole::InverseWeighted, -1.0);
    for i in 0..cx.n() {
        let y = cx.y(i);
        let (wd, wp) = (cx.treat(i, d), cx.treat(i, dp));
        if cx.t(i) == 1 {
            if wd > 0.0 {
                match (mu_d0[i], mu_p1[i], mu_p0[i]) {
                    (Some(a), Some(b), Some(c)) => lead.push(i, wd, a + b - c, None)?,
                    _ => s.excluded[i] = true,
                }
            }
            if wp > 0.0 {
                match mu_p1[i] {
                    Some(mu) => g_p1.push(i, wp * pi_d1[i] / pi_p1[i], y - mu, Some(pi_p1[i]))?,
                    None => s.excluded[i] = true,
                }
            }
        } else {
            if wd > 0.0 {
                match mu_d0[i] {
                    Some(mu) => g_d0.push(i, wd * pi_d1[i] / pi_d0[i], y - mu, Some(pi_d0[i]))?,
                    None => s.excluded[i] = true,
                }
            }
            if wp > 0.0 {
                match mu_p0[i] {
                    Some(mu) => g_p0.push(i, wp * pi_d1[i] / pi_p0[i], y - mu, Some(pi_p0[i]))?,
                    None => s.excluded[i] = true,
                }
            }
        }
    }
    s.groups = vec![lead, g_d0, g_p1, g_p0];
    Ok(CounterfactualEstimate::from_score(s, CounterfactualLabel::TreatedMediator { d, d_prime }))
}

/// Sorted distinct mediator values among rows with positive weight under `filter`.
fn support(ds: &Dataset, values: impl Fn(usize) -> Option<f64>) -> Vec<f64> {
    let set: BTreeSet<Level> = (0..ds.n()).filter_map(|i| values(i).map(Level)).collect();
    set.into_iter().map(|v| v.0).collect()
}

/// Sum-over-mediator-values form of [`score_counterfactual_md_rcs`] using
/// cell propensities ρ and Pr(M=m | D=d, T=1) weights (discrete mediators).
pub fn score_counterfactual_md_sum_rcs(
    ds: &Dataset,
    nu: &NuisanceSet,
    d: f64,
    d_prime: f64,
    kernel: Option<KernelSpec>,
) -> Result<CounterfactualEstimate, ScoreError> {
    let cx = Ctx::new(ds, nu, kernel)?;
    cx.require_design(Design::RepeatedCrossSection, "score_counterfactual_md_sum_rcs")?;
    let dp = d_prime;
    let lead_w: Vec<f64> = (0..cx.n()).map(|i| if cx.t(i) == 1 { cx.treat(i, d) } else { 0.0 }).collect();
    let values = support(ds, |i| (lead_w[i] > 0.0).then(|| ds.m()[i]));
    let total_w: f64 = lead_w.iter().sum();

    let mut s = ScoreVector::new(cx.n());
    let mut lead = ScoreGroup::new(cell_tag(d, None, Some(1)), GroupRole::Lead, 1.0);
    let mut lead_terms: Vec<Option<f64>> = vec![None; cx.n()];
    for &m in &values {
        let share = (0..cx.n()).filter(|&i| cx.is_m(i, m)).map(|i| lead_w[i]).sum::<f64>() / total_w;
        let mu = |dd: f64, t: u8| cx.get(NuisanceId::MuCell { d: l(dd), m: l(m), t });
        let rho = |dd: f64, t: u8| cx.get(NuisanceId::RhoCell { d: l(dd), m: l(m), t });
        let (mu_d0, mu_p1, mu_p0) = (mu(d, 0)?, mu(dp, 1)?, mu(dp, 0)?);
        let (rho_d1, rho_d0, rho_p1, rho_p0) = (rho(d, 1)?, rho(d, 0)?, rho(dp, 1)?, rho(dp, 0)?);
        let mut g_d0 = ScoreGroup::new(cell_tag(d, Some(m), Some(0)), GroupRole::InverseWeighted, share);
        let mut g_p1 = ScoreGroup::new(cell_tag(dp, Some(m), Some(1)), GroupRole::InverseWeighted, share);
        let mut g_p0 = ScoreGroup::new(cell_tag(dp, Some(m), Some(0)), GroupRole::InverseWeighted, -share);
        for i in 0..cx.n() {
            if !cx.is_m(i, m) {
                continue;
            }
            let y = cx.y(i);
            if cx.t(i) == 1 {
                if lead_w[i] > 0.0 {
                    lead_terms[i] = Some(mu_d0[i] + mu_p1[i] - mu_p0[i]);
                }
                g_p1.push(i, cx.treat(i, dp) * rho_d1[i] / rho_p1[i], y - mu_p1[i], Some(rho_p1[i]))?;
            } else {
                g_d0.push(i, cx.treat(i, d) * rho_d1[i] / rho_d0[i], y - mu_d0[i], Some(rho_d0[i]))?;
                g_p0.push(i, cx.treat(i, dp) * rho_d1[i] / rho_p0[i], y - mu_p0[i], Some(rho_p0[i]))?;
            }
        }
        s.groups.extend([g_d0, g_p1, g_p0]);
    }
    for (i, term) in lead_terms.into_iter().enumerate() {
        if let Some(z) = term {
            lead.push(i, lead_w[i], z, None)?;
        }
    }
    s.groups.insert(0, lead);
    Ok(CounterfactualEstimate::from_score(s, CounterfactualLabel::TreatedMediator { d, d_prime }))
}

/// E[Y₁(d', M(d')) | D=d, T=1] under parallel trends across treatments.
pub fn score_counterfactual_standard_rcs(
    ds: &Dataset,
    nu: &NuisanceSet,
    d: f64,
    d_prime: f64,
    kernel: Option<KernelSpec>,
) -> Result<CounterfactualEstimate, ScoreError> {
    let cx = Ctx::new(ds, nu, kernel)?;
    cx.require_design(Design::RepeatedCrossSection, "score_counterfactual_standard_rcs")?;
    let (dp, ld, ldp) = (d_prime, l(d), l(d_prime));
    let mu = |dd: Level, t: u8| cx.get(NuisanceId::MuTreat { d: dd, t });
    let pi = |dd: Level, t: u8| cx.get(NuisanceId::PiTreat { d: dd, t });
    let (mu_d0, mu_p1, mu_p0) = (mu(ld, 0)?, mu(ldp, 1)?, mu(ldp, 0)?);
    let (pi_d1, pi_d0, pi_p1, pi_p0) = (pi(ld, 1)?, pi(ld, 0)?, pi(ldp, 1)?, pi(ldp, 0)?);
    let mut lead = ScoreGroup::new(cell_tag(d, None, Some(1)), GroupRole::Lead, 1.0);
    let mut g_d0 = ScoreGroup::new(cell_tag(d, None, Some(0)), GroupRole::InverseWeighted, 1.0);
    let mut g_p1 = ScoreGroup::new(cell_tag(dp, None, Some(1)), GroupRole::InverseWeighted, 1.0);
    let mut g_p0 = ScoreGroup::new(cell_tag(dp, None, Some(0)), GroupRole::InverseWeighted, -1.0);
    for i in 0..cx.n() {
        let y = cx.y(i);
        let (wd, wp) = (cx.treat(i, d), cx.treat(i, dp));
        if cx.t(i) == 1 {
            lead.push(i, wd, mu_d0[i] + mu_p1[i] - mu_p0[i], None)?;
            g_p1.push(i, wp * pi_d1[i] / pi_p1[i], y - mu_p1[i], Some(pi_p1[i]))?;
        } else {
            g_d0.push(i, wd * pi_d1[i] / pi_d0[i], y - mu_d0[i], Some(pi_d0[i]))?;
            g_p0.push(i, wp * pi_d1[i] / pi_p0[i], y - mu_p0[i], Some(pi_p0[i]))?;
        }
    }
    let mut s = ScoreVector::new(cx.n());
    s.groups = vec![lead, g_d0, g_p1, g_p0];
    Ok(CounterfactualEstimate::from_score(s, CounterfactualLabel::ControlMediator { d, d_prime }))
}

/// Mediator support used by the double-trend expressions: every value the
/// mediator takes in either period.
pub fn double_trend_support(ds: &Dataset) -> Vec<f64> {
    let mut set: BTreeSet<Level> = ds.m().iter().map(|&v| Level(v)).collect();
    match ds.design() {
        Design::RepeatedCrossSection => set.extend((0..ds.n()).map(|i| Level(mediator_in_period(ds, i)))),
        Design::Panel => {
            if let Some(m0) = ds.m0() {
                set.extend(m0.iter().flatten().map(|&v| Level(v)));
            }
        }
    }
    set.into_iter().map(|v| v.0).collect()
}

/// Per-m outcome block g_m(X) = μ_{d,m}(0,X) + μ_{d',m}(1,X) − μ_{d',m}(0,X)
/// and mediator block h_m(X) = ν_{d,m}(0,X) + ν_{d',m}(1,X) − ν_{d',m}(0,X).
struct TrendBlocks<'a> {
    m: f64,
    g: Vec<f64>,
    h: Vec<f64>,
    mu_d0: &'a [f64],
    mu_p1: &'a [f64],
    mu_p0: &'a [f64],
    nu_d0: &'a [f64],
    nu_p1: &'a [f64],
    nu_p0: &'a [f64],
}

fn trend_blocks<'a>(cx: &Ctx<'a>, d: f64, dp: f64) -> Result<Vec<TrendBlocks<'a>>, ScoreError> {
    double_trend_support(cx.ds)
        .into_iter()
        .map(|m| {
            let mu = |dd: f64, t: u8| cx.get(NuisanceId::MuCell { d: l(dd), m: l(m), t });
            let nv = |dd: f64, t: u8| cx.get(NuisanceId::NuCell { d: l(dd), m: l(m), t });
            let (mu_d0, mu_p1, mu_p0) = (mu(d, 0)?, mu(dp, 1)?, mu(dp, 0)?);
            let (nu_d0, nu_p1, nu_p0) = (nv(d, 0)?, nv(dp, 1)?, nv(dp, 0)?);
            let g = (0..cx.n()).map(|i| mu_d0[i] + mu_p1[i] - mu_p0[i]).collect();
            let h = (0..cx.n()).map(|i| nu_d0[i] + nu_p1[i] - nu_p0[i]).collect();
            Ok(TrendBlocks { m, g, h, mu_d0, mu_p1, mu_p0, nu_d0, nu_p1, nu_p0 })
        })
        .collect()
}

/// E[Y₁(d', M(d')) | D=d, T=1] under parallel trends in the outcome and in
/// the mediator distribution (discrete mediators; requires the pre-period
/// mediator on T=0 rows, taken from `m0` when present and `m` otherwise).
pub fn score_counterfactual_doubletrend_rcs(
    ds: &Dataset,
    nu: &NuisanceSet,
    d: f64,
    d_prime: f64,
    kernel: Option<KernelSpec>,
) -> Result<CounterfactualEstimate, ScoreError> {
    let cx = Ctx::new(ds, nu, kernel)?;
    cx.require_design(Design::RepeatedCrossSection, "score_counterfactual_doubletrend_rcs")?;
    let dp = d_prime;
    let blocks = trend_blocks(&cx, d, dp)?;
    let pi = |dd: f64, t: u8| cx.get(NuisanceId::PiTreat { d: l(dd), t });
    let (pi_d1, pi_d0, pi_p1, pi_p0) = (pi(d, 1)?, pi(d, 0)?, pi(dp, 1)?, pi(dp, 0)?);

    let mut s = ScoreVector::new(cx.n());
    let mut lead = ScoreGroup::new(cell_tag(d, None, Some(1)), GroupRole::Lead, 1.0);
    let mut med_d0 = ScoreGroup::new(format!("{}:mediator", cell_tag(d, None, Some(0))), GroupRole::InverseWeighted, 1.0);
    let mut med_p1 = ScoreGroup::new(format!("{}:mediator", cell_tag(dp, None, Some(1))), GroupRole::InverseWeighted, 1.0);
    let mut med_p0 = ScoreGroup::new(format!("{}:mediator", cell_tag(dp, None, Some(0))), GroupRole::InverseWeighted, -1.0);
    for i in 0..cx.n() {
        let mt = Level(mediator_in_period(ds, i));
        let (wd, wp) = (cx.treat(i, d), cx.treat(i, dp));
        if cx.t(i) == 1 {
            let z: f64 = blocks.iter().map(|b| b.g[i] * b.h[i]).sum();
            lead.push(i, wd, z, None)?;
            let z: f64 = blocks.iter().map(|b| b.g[i] * (f64::from(u8::from(mt == l(b.m))) - b.nu_p1[i])).sum();
            med_p1.push(i, wp * pi_d1[i] / pi_p1[i], z, Some(pi_p1[i]))?;
        } else {
            let z: f64 = blocks.iter().map(|b| b.g[i] * (f64::from(u8::from(mt == l(b.m))) - b.nu_d0[i])).sum();
            med_d0.push(i, wd * pi_d1[i] / pi_d0[i], z, Some(pi_d0[i]))?;
            let z: f64 = blocks.iter().map(|b| b.g[i] * (f64::from(u8::from(mt == l(b.m))) - b.nu_p0[i])).sum();
            med_p0.push(i, wp * pi_d1[i] / pi_p0[i], z, Some(pi_p0[i]))?;
        }
    }
    s.groups.push(lead);
    for b in &blocks {
        let rho = |dd: f64, t: u8| cx.get(NuisanceId::RhoCell { d: l(dd), m: l(b.m), t });
        let (rho_d0, rho_p1, rho_p0) = (rho(d, 0)?, rho(dp, 1)?, rho(dp, 0)?);
        let mut g_d0 = ScoreGroup::new(cell_tag(d, Some(b.m), Some(0)), GroupRole::InverseWeighted, 1.0);
        let mut g_p1 = ScoreGroup::new(cell_tag(dp, Some(b.m), Some(1)), GroupRole::InverseWeighted, 1.0);
        let mut g_p0 = ScoreGroup::new(cell_tag(dp, Some(b.m), Some(0)), GroupRole::InverseWeighted, -1.0);
        for i in 0..cx.n() {
            if !cx.is_m(i, b.m) {
                continue;
            }
            let y = cx.y(i);
            let (wd, wp) = (cx.treat(i, d), cx.treat(i, dp));
            if cx.t(i) == 1 {
                g_p1.push(i, wp * pi_d1[i] / rho_p1[i], b.h[i] * (y - b.mu_p1[i]), Some(rho_p1[i]))?;
            } else {
                g_d0.push(i, wd * pi_d1[i] / rho_d0[i], b.h[i] * (y - b.mu_d0[i]), Some(rho_d0[i]))?;
                g_p0.push(i, wp * pi_d1[i] / rho_p0[i], b.h[i] * (y - b.mu_p0[i]), Some(rho_p0[i]))?;
            }
        }
        s.groups.extend([g_d0, g_p1, g_p0]);
    }
    s.groups.extend([med_d0, med_p1, med_p0]);
    Ok(CounterfactualEstimate::from_score(s, CounterfactualLabel::DoubleTrend { d, d_prime }))
}

/// Per-m mediator blocks Pr(M(d')=m | D=d, T=1) of the double-trend
/// expression, each as its own score. Over the full support they sum to one
/// when the ν entries of every (d, t) form a probability partition.
pub fn mediator_blocks_rcs(
    ds: &Dataset,
    nu: &NuisanceSet,
    d: f64,
    d_prime: f64,
    kernel: Option<KernelSpec>,
) -> Result<Vec<(f64, ScoreVector)>, ScoreError> {
    let cx = Ctx::new(ds, nu, kernel)?;
    cx.require_design(Design::RepeatedCrossSection, "mediator_blocks_rcs")?;
    let dp = d_prime;
    let pi = |dd: f64, t: u8| cx.get(NuisanceId::PiTreat { d: l(dd), t });
    let (pi_d1, pi_d0, pi_p1, pi_p0) = (pi(d, 1)?, pi(d, 0)?, pi(dp, 1)?, pi(dp, 0)?);
    double_trend_support(ds)
        .into_iter()
        .map(|m| {
            let nv = |dd: f64, t: u8| cx.get(NuisanceId::NuCell { d: l(dd), m: l(m), t });
            let (nu_d0, nu_p1, nu_p0) = (nv(d, 0)?, nv(dp, 1)?, nv(dp, 0)?);
            let mut lead = ScoreGroup::new(cell_tag(d, None, Some(1)), GroupRole::Lead, 1.0);
            let mut g_d0 = ScoreGroup::new(cell_tag(d, None, Some(0)), GroupRole::InverseWeighted, 1.0);
            let mut g_p1 = ScoreGroup::new(cell_tag(dp, None, Some(1)), GroupRole::InverseWeighted, 1.0);
            let mut g_p0 = ScoreGroup::new(cell_tag(dp, None, Some(0)), GroupRole::InverseWeighted, -1.0);
            for i in 0..cx.n() {
                let hit = f64::from(u8::from(Level(mediator_in_period(ds, i)) == l(m)));
                let (wd, wp) = (cx.treat(i, d), cx.treat(i, dp));
                if cx.t(i) == 1 {
                    lead.push(i, wd, nu_d0[i] + nu_p1[i] - nu_p0[i], None)?;
                    g_p1.push(i, wp * pi_d1[i] / pi_p1[i], hit - nu_p1[i], Some(pi_p1[i]))?;
                } else {
                    g_d0.push(i, wd * pi_d1[i] / pi_d0[i], hit - nu_d0[i], Some(pi_d0[i]))?;
                    g_p0.push(i, wp * pi_d1[i] / pi_p0[i], hit - nu_p0[i], Some(pi_p0[i]))?;
                }
            }
            let mut s = ScoreVector::new(cx.n());
            s.groups = vec![lead, g_d0, g_p1, g_p0];
            Ok((m, s))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Panel data
// ---------------------------------------------------------------------------

/// ATET of (d, m) against (d', m') among D=d, M=m from within-unit changes.
pub fn score_atet_panel(ds: &Dataset, nu: &NuisanceSet, c: &ContrastSpec) -> Result<ScoreVector, ScoreError> {
    let cx = Ctx::new(ds, nu, c.treatment_kernel)?;
    cx.require_design(Design::Panel, "score_atet_panel")?;
    let (d, dp) = (c.d, c.d_prime);
    let (m, mp) = joint_values(c)?;
    let mu_p = cx.get(NuisanceId::PanelMuCell { d: l(dp), m: l(mp) })?;
    let rho_d = cx.get(NuisanceId::PanelRhoCell { d: l(d), m: l(m) })?;
    let rho_p = cx.get(NuisanceId::PanelRhoCell { d: l(dp), m: l(mp) })?;
    let mut lead = ScoreGroup::new(cell_tag(d, Some(m), None), GroupRole::Lead, 1.0);
    let mut g = ScoreGroup::new(cell_tag(dp, Some(mp), None), GroupRole::InverseWeighted, -1.0);
    for i in 0..cx.n() {
        let dy = finite_check(i, cx.delta_y(i))?;
        if cx.is_m(i, m) {
            lead.push(i, cx.treat(i, d), dy - mu_p[i], None)?;
        }
        if cx.is_m(i, mp) {
            g.push(i, cx.treat(i, dp) * rho_d[i] / rho_p[i], dy - mu_p[i], Some(rho_p[i]))?;
        }
    }
    let mut s = ScoreVector::new(cx.n());
    s.groups = vec![lead, g];
    Ok(s)
}

/// ATE of (d, m) against (d', m') from within-unit changes.
pub fn score_ate_panel(ds: &Dataset, nu: &NuisanceSet, c: &ContrastSpec) -> Result<ScoreVector, ScoreError> {
    let cx = Ctx::new(ds, nu, c.treatment_kernel)?;
    cx.require_design(Design::Panel, "score_ate_panel")?;
    let (d, dp) = (c.d, c.d_prime);
    let (m, mp) = joint_values(c)?;
    let mu_d = cx.get(NuisanceId::PanelMuCell { d: l(d), m: l(m) })?;
    let mu_p = cx.get(NuisanceId::PanelMuCell { d: l(dp), m: l(mp) })?;
    let rho_d = cx.get(NuisanceId::PanelRhoCell { d: l(d), m: l(m) })?;
    let rho_p = cx.get(NuisanceId::PanelRhoCell { d: l(dp), m: l(mp) })?;
    let mut lead = ScoreGroup::new("(all)".into(), GroupRole::Lead, 1.0);
    let mut g_d = ScoreGroup::new(cell_tag(d, Some(m), None), GroupRole::InverseWeighted, 1.0);
    let mut g_p = ScoreGroup::new(cell_tag(dp, Some(mp), None), GroupRole::InverseWeighted, -1.0);
    for i in 0..cx.n() {
        let dy = finite_check(i, cx.delta_y(i))?;
        lead.push(i, 1.0, mu_d[i] - mu_p[i], None)?;
        if cx.is_m(i, m) {
            g_d.push(i, cx.treat(i, d) / rho_d[i], dy - mu_d[i], Some(rho_d[i]))?;
        }
        if cx.is_m(i, mp) {
            g_p.push(i, cx.treat(i, dp) / rho_p[i], dy - mu_p[i], Some(rho_p[i]))?;
        }
    }
    let mut s = ScoreVector::new(cx.n());
    s.groups = vec![lead, g_d, g_p];
    Ok(s)
}

/// E[Y₁(d', M(d)) | D=d] averaging over the realized mediator, with
/// mediator-conditioned treatment propensities.
pub fn score_counterfactual_md_panel(
    ds: &Dataset,
    nu: &NuisanceSet,
    d: f64,
    d_prime: f64,
    kernel: Option<KernelSpec>,
    mediator: MediatorKind,
) -> Result<CounterfactualEstimate, ScoreError> {
    let cx = Ctx::new(ds, nu, kernel)?;
    cx.require_design(Design::Panel, "score_counterfactual_md_panel")?;
    let ldp = l(d_prime);
    let mu = cx.mediator_lookup(mediator, |m| NuisanceId::PanelMuCell { d: ldp, m }, NuisanceId::PanelMuTreatMed { d: ldp })?;
    let pi_d = cx.get(NuisanceId::PanelPiTreatMed { d: l(d) })?;
    let pi_p = cx.get(NuisanceId::PanelPiTreatMed { d: ldp })?;
    let mut s = ScoreVector::new(cx.n());
    let mut lead = ScoreGroup::new(cell_tag(d, None, None), GroupRole::Lead, 1.0);
    let mut g = ScoreGroup::new(cell_tag(d_prime, None, None), GroupRole::InverseWeighted, 1.0);
    for i in 0..cx.n() {
        let (wd, wp) = (cx.treat(i, d), cx.treat(i, d_prime));
        if wd > 0.0 {
            match mu[i] {
                Some(v) => lead.push(i, wd, cx.y_pre(i) + v, None)?,
                None => s.excluded[i] = true,
            }
        }
        if wp > 0.0 {
            match mu[i] {
                Some(v) => g.push(i, wp * pi_d[i] / pi_p[i], cx.delta_y(i) - v, Some(pi_p[i]))?,
                None => s.excluded[i] = true,
            }
        }
    }
    s.groups = vec![lead, g];
    Ok(CounterfactualEstimate::from_score(s, CounterfactualLabel::TreatedMediator { d, d_prime }))
}

/// Sum-over-mediator-values form of [`score_counterfactual_md_panel`] using
/// cell propensities and Pr(M=m | D=d) weights (discrete mediators).
pub fn score_counterfactual_md_sum_panel(
    ds: &Dataset,
    nu: &NuisanceSet,
    d: f64,
    d_prime: f64,
    kernel: Option<KernelSpec>,
) -> Result<CounterfactualEstimate, ScoreError> {
    let cx = Ctx::new(ds, nu, kernel)?;
    cx.require_design(Design::Panel, "score_counterfactual_md_sum_panel")?;
    let lead_w: Vec<f64> = (0..cx.n()).map(|i| cx.treat(i, d)).collect();
    let values = support(ds, |i| (lead_w[i] > 0.0).then(|| ds.m()[i]));
    let total_w: f64 = lead_w.iter().sum();
    let mut s = ScoreVector::new(cx.n());
    let mut lead = ScoreGroup::new(cell_tag(d, None, None), GroupRole::Lead, 1.0);
    let mut lead_terms: Vec<Option<f64>> = vec![None; cx.n()];
    for &m in &values {
        let share = (0..cx.n()).filter(|&i| cx.is_m(i, m)).map(|i| lead_w[i]).sum::<f64>() / total_w;
        let mu = cx.get(NuisanceId::PanelMuCell { d: l(d_prime), m: l(m) })?;
        let rho_d = cx.get(NuisanceId::PanelRhoCell { d: l(d), m: l(m) })?;
        let rho_p = cx.get(NuisanceId::PanelRhoCell { d: l(d_prime), m: l(m) })?;
        let mut g = ScoreGroup::new(cell_tag(d_prime, Some(m), None), GroupRole::InverseWeighted, share);
        for i in 0..cx.n() {
            if !cx.is_m(i, m) {
                continue;
            }
            if lead_w[i] > 0.0 {
                lead_terms[i] = Some(cx.y_pre(i) + mu[i]);
            }
            g.push(i, cx.treat(i, d_prime) * rho_d[i] / rho_p[i], cx.delta_y(i) - mu[i], Some(rho_p[i]))?;
        }
        s.groups.push(g);
    }
    for (i, term) in lead_terms.into_iter().enumerate() {
        if let Some(z) = term {
            lead.push(i, lead_w[i], z, None)?;
        }
    }
    s.groups.insert(0, lead);
    Ok(CounterfactualEstimate::from_score(s, CounterfactualLabel::TreatedMediator { d, d_prime }))
}

/// E[Y₁(d', M(d')) | D=d] under parallel trends across treatments.
pub fn score_counterfactual_standard_panel(
    ds: &Dataset,
    nu: &NuisanceSet,
    d: f64,
    d_prime: f64,
    kernel: Option<KernelSpec>,
) -> Result<CounterfactualEstimate, ScoreError> {
    let cx = Ctx::new(ds, nu, kernel)?;
    cx.require_design(Design::Panel, "score_counterfactual_standard_panel")?;
    let mu = cx.get(NuisanceId::PanelMuTreat { d: l(d_prime) })?;
    let pi_d = cx.get(NuisanceId::PanelPiTreat { d: l(d) })?;
    let pi_p = cx.get(NuisanceId::PanelPiTreat { d: l(d_prime) })?;
    let mut lead = ScoreGroup::new(cell_tag(d, None, None), GroupRole::Lead, 1.0);
    let mut g = ScoreGroup::new(cell_tag(d_prime, None, None), GroupRole::InverseWeighted, 1.0);
    for i in 0..cx.n() {
        lead.push(i, cx.treat(i, d), cx.y_pre(i) + mu[i], None)?;
        g.push(i, cx.treat(i, d_prime) * pi_d[i] / pi_p[i], cx.delta_y(i) - mu[i], Some(pi_p[i]))?;
    }
    let mut s = ScoreVector::new(cx.n());
    s.groups = vec![lead, g];
    Ok(CounterfactualEstimate::from_score(s, CounterfactualLabel::ControlMediator { d, d_prime }))
}

/// E[Y₁(d', M(d')) | D=d] under parallel trends in the outcome change and in
/// the mediator distribution (discrete mediators, pre-period mediator required).
pub fn score_counterfactual_doubletrend_panel(
    ds: &Dataset,
    nu: &NuisanceSet,
    d: f64,
    d_prime: f64,
    kernel: Option<KernelSpec>,
) -> Result<CounterfactualEstimate, ScoreError> {
    let cx = Ctx::new(ds, nu, kernel)?;
    cx.require_design(Design::Panel, "score_counterfactual_doubletrend_panel")?;
    let m0 = ds
        .m0()
        .ok_or_else(|| ScoreError::Unsupported("the double-trend counterfactual needs the pre-period mediator".into()))?;
    let dp = d_prime;
    let values = double_trend_support(ds);
    let pi_d = cx.get(NuisanceId::PanelPiTreat { d: l(d) })?;
    let pi_p = cx.get(NuisanceId::PanelPiTreat { d: l(dp) })?;

    struct Block<'a> {
        m: f64,
        g: Vec<f64>,
        h: Vec<f64>,
        mu_pre: &'a [f64],
        mu_change: &'a [f64],
        nu_change: &'a [f64],
    }
    let blocks = values
        .iter()
        .map(|&m| {
            let mu_pre = cx.get(NuisanceId::PanelMuPre { d: l(d), m: l(m) })?;
            let mu_change = cx.get(NuisanceId::PanelMuCell { d: l(dp), m: l(m) })?;
            let med_pre = cx.get(NuisanceId::PanelMedPre { d: l(d), m: l(m) })?;
            let nu_change = cx.get(NuisanceId::PanelNuChange { d: l(dp), m: l(m) })?;
            Ok(Block {
                m,
                g: (0..cx.n()).map(|i| mu_pre[i] + mu_change[i]).collect(),
                h: (0..cx.n()).map(|i| med_pre[i] + nu_change[i]).collect(),
                mu_pre,
                mu_change,
                nu_change,
            })
        })
        .collect::<Result<Vec<_>, ScoreError>>()?;

    let mut s = ScoreVector::new(cx.n());
    let mut lead = ScoreGroup::new(cell_tag(d, None, None), GroupRole::Lead, 1.0);
    let mut med = ScoreGroup::new(format!("{}:mediator", cell_tag(dp, None, None)), GroupRole::InverseWeighted, 1.0);
    for i in 0..cx.n() {
        let (wd, wp) = (cx.treat(i, d), cx.treat(i, dp));
        let Some(pre) = m0[i] else {
            if wd > 0.0 || wp > 0.0 {
                s.excluded[i] = true;
            }
            continue;
        };
        let hit = |v: f64, m: f64| f64::from(u8::from(Level(v) == Level(m)));
        let z: f64 = blocks.iter().map(|b| b.g[i] * (hit(pre, b.m) + b.nu_change[i])).sum();
        lead.push(i, wd, z, None)?;
        let z: f64 = blocks.iter().map(|b| b.g[i] * (hit(ds.m()[i], b.m) - hit(pre, b.m) - b.nu_change[i])).sum();
        med.push(i, wp * pi_d[i] / pi_p[i], z, Some(pi_p[i]))?;
    }
    s.groups.push(lead);
    for b in &blocks {
        let rho_d = cx.get(NuisanceId::PanelRhoCell { d: l(d), m: l(b.m) })?;
        let rho_p = cx.get(NuisanceId::PanelRhoCell { d: l(dp), m: l(b.m) })?;
        let mut g_d = ScoreGroup::new(cell_tag(d, Some(b.m), None), GroupRole::InverseWeighted, 1.0);
        let mut g_p = ScoreGroup::new(cell_tag(dp, Some(b.m), None), GroupRole::InverseWeighted, 1.0);
        for i in 0..cx.n() {
            if !cx.is_m(i, b.m) || s.excluded[i] {
                continue;
            }
            g_d.push(i, cx.treat(i, d) * pi_d[i] / rho_d[i], b.h[i] * (cx.y_pre(i) - b.mu_pre[i]), Some(rho_d[i]))?;
            g_p.push(i, cx.treat(i, dp) * pi_d[i] / rho_p[i], b.h[i] * (cx.delta_y(i) - b.mu_change[i]), Some(rho_p[i]))?;
        }
        s.groups.extend([g_d, g_p]);
    }
    s.groups.push(med);
    Ok(CounterfactualEstimate::from_score(s, CounterfactualLabel::DoubleTrend { d, d_prime }))
}

/// Per-m mediator blocks Pr(M(d')=m | D=d) of the panel double-trend expression.
pub fn mediator_blocks_panel(
    ds: &Dataset,
    nu: &NuisanceSet,
    d: f64,
    d_prime: f64,
    kernel: Option<KernelSpec>,
) -> Result<Vec<(f64, ScoreVector)>, ScoreError> {
    let cx = Ctx::new(ds, nu, kernel)?;
    cx.require_design(Design::Panel, "mediator_blocks_panel")?;
    let m0 = ds
        .m0()
        .ok_or_else(|| ScoreError::Unsupported("mediator blocks need the pre-period mediator".into()))?;
    let pi_d = cx.get(NuisanceId::PanelPiTreat { d: l(d) })?;
    let pi_p = cx.get(NuisanceId::PanelPiTreat { d: l(d_prime) })?;
    double_trend_support(ds)
        .into_iter()
        .map(|m| {
            let nu_change = cx.get(NuisanceId::PanelNuChange { d: l(d_prime), m: l(m) })?;
            let hit = |v: f64| f64::from(u8::from(Level(v) == Level(m)));
            let mut s = ScoreVector::new(cx.n());
            let mut lead = ScoreGroup::new(cell_tag(d, None, None), GroupRole::Lead, 1.0);
            let mut g = ScoreGroup::new(cell_tag(d_prime, None, None), GroupRole::InverseWeighted, 1.0);
            for i in 0..cx.n() {
                let Some(pre) = m0[i] else {
                    s.excluded[i] = true;
                    continue;
                };
                lead.push(i, cx.treat(i, d), hit(pre) + nu_change[i], None)?;
                g.push(
                    i,
                    cx.treat(i, d_prime) * pi_d[i] / pi_p[i],
                    hit(ds.m()[i]) - hit(pre) - nu_change[i],
                    Some(pi_p[i]),
                )?;
            }
            s.groups = vec![lead, g];
            Ok((m, s))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Nuisance requirements
// ---------------------------------------------------------------------------

fn observed_support(ds: &Dataset) -> Vec<f64> {
    support(ds, |i| Some(ds.m()[i]))
}

/// Every nuisance the estimand's score builders read.
pub fn nuisance_request(ds: &Dataset, c: &ContrastSpec) -> NuisanceRequest {
    use NuisanceId::*;
    let mut r = NuisanceRequest { treatment_kernel: c.treatment_kernel, mediator: c.mediator, ..Default::default() };
    let (d, dp) = (l(c.d), l(c.d_prime));
    let req = &mut r.required;
    match c.design {
        Design::RepeatedCrossSection => {
            let joint = |req: &mut BTreeSet<NuisanceId>, both_sides: bool| {
                let (m, mp) = (l(c.m.unwrap_or(0.0)), l(c.m_prime.unwrap_or(0.0)));
                for t in 0..2 {
                    req.insert(RhoCell { d, m, t });
                    req.insert(RhoCell { d: dp, m: mp, t });
                    req.insert(MuCell { d: dp, m: mp, t });
                }
                req.insert(MuCell { d, m, t: 0 });
                if both_sides {
                    req.insert(MuCell { d, m, t: 1 });
                    req.insert(PeriodProb { t: 1 });
                }
            };
            let standard = |req: &mut BTreeSet<NuisanceId>| {
                for t in 0..2 {
                    req.insert(PiTreat { d, t });
                    req.insert(PiTreat { d: dp, t });
                    req.insert(MuTreat { d: dp, t });
                }
                req.insert(MuTreat { d, t: 0 });
            };
            let mediated = |r: &mut NuisanceRequest| {
                for t in 0..2 {
                    r.required.insert(PiTreatMed { d, t });
                    r.required.insert(PiTreatMed { d: dp, t });
                }
                match c.mediator {
                    MediatorKind::Continuous => {
                        r.required.extend([MuTreatMed { d, t: 0 }, MuTreatMed { d: dp, t: 1 }, MuTreatMed { d: dp, t: 0 }]);
                    }
                    MediatorKind::Discrete => {
                        for m in observed_support(ds).into_iter().map(l) {
                            r.optional.extend([MuCell { d, m, t: 0 }, MuCell { d: dp, m, t: 1 }, MuCell { d: dp, m, t: 0 }]);
                        }
                    }
                }
            };
            match c.estimand {
                Estimand::AtetJoint => joint(req, false),
                Estimand::Ate => joint(req, true),
                Estimand::CounterfactualDprimeMdprime => standard(req),
                Estimand::CounterfactualDMd => mediated(&mut r),
                Estimand::NaturalDecomposition => {
                    standard(req);
                    mediated(&mut r);
                }
                Estimand::CounterfactualDoubleTrend => {
                    for t in 0..2 {
                        req.insert(PiTreat { d, t });
                        req.insert(PiTreat { d: dp, t });
                    }
                    for m in double_trend_support(ds).into_iter().map(l) {
                        req.extend([
                            MuCell { d, m, t: 0 },
                            MuCell { d: dp, m, t: 1 },
                            MuCell { d: dp, m, t: 0 },
                            RhoCell { d, m, t: 0 },
                            RhoCell { d: dp, m, t: 1 },
                            RhoCell { d: dp, m, t: 0 },
                            NuCell { d, m, t: 0 },
                            NuCell { d: dp, m, t: 1 },
                            NuCell { d: dp, m, t: 0 },
                        ]);
                    }
                    mediated(&mut r);
                }
            }
        }
        Design::Panel => {
            let (m, mp) = (l(c.m.unwrap_or(0.0)), l(c.m_prime.unwrap_or(0.0)));
            let standard = |req: &mut BTreeSet<NuisanceId>| {
                req.extend([PanelMuTreat { d: dp }, PanelPiTreat { d }, PanelPiTreat { d: dp }]);
            };
            let mediated = |r: &mut NuisanceRequest| {
                r.required.extend([PanelPiTreatMed { d }, PanelPiTreatMed { d: dp }]);
                match c.mediator {
                    MediatorKind::Continuous => {
                        r.required.insert(PanelMuTreatMed { d: dp });
                    }
                    MediatorKind::Discrete => {
                        r.optional.extend(observed_support(ds).into_iter().map(|m| PanelMuCell { d: dp, m: l(m) }));
                    }
                }
            };
            match c.estimand {
                Estimand::AtetJoint => {
                    req.extend([PanelMuCell { d: dp, m: mp }, PanelRhoCell { d, m }, PanelRhoCell { d: dp, m: mp }]);
                }
                Estimand::Ate => {
                    req.extend([
                        PanelMuCell { d, m },
                        PanelMuCell { d: dp, m: mp },
                        PanelRhoCell { d, m },
                        PanelRhoCell { d: dp, m: mp },
                    ]);
                }
                Estimand::CounterfactualDprimeMdprime => standard(req),
                Estimand::CounterfactualDMd => mediated(&mut r),
                Estimand::NaturalDecomposition => {
                    standard(req);
                    mediated(&mut r);
                }
                Estimand::CounterfactualDoubleTrend => {
                    req.extend([PanelPiTreat { d }, PanelPiTreat { d: dp }]);
                    for m in double_trend_support(ds).into_iter().map(l) {
                        req.extend([
                            PanelMuPre { d, m },
                            PanelMuCell { d: dp, m },
                            PanelMedPre { d, m },
                            PanelNuChange { d: dp, m },
                            PanelRhoCell { d, m },
                            PanelRhoCell { d: dp, m },
                        ]);
                    }
                    mediated(&mut r);
                }
            }
        }
    }
    let required = r.required.clone();
    r.optional.retain(|id| !required.contains(id));
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrast::KernelKind;

    #[test]
    fn gaussian_kernel_at_reference() {
        let k = KernelSpec::new(KernelKind::Gaussian, 0.5);
        let w = kernel_weights(&[2.0], 2.0, k).unwrap();
        assert!((w[0] - 1.0 / (0.5 * (2.0 * std::f64::consts::PI).sqrt())).abs() < 1e-15);
    }

    #[test]
    fn epanechnikov_compact_support() {
        let k = KernelSpec::new(KernelKind::Epanechnikov, 0.3);
        let w = kernel_weights(&[1.3, 0.7, 1.31, 1.29], 1.0, k).unwrap();
        assert_eq!(w[0], 0.0);
        assert_eq!(w[1], 0.0);
        assert_eq!(w[2], 0.0);
        assert!(w[3] > 0.0);
    }

    #[test]
    fn kernel_integrates_to_one() {
        for kind in [KernelKind::Epanechnikov, KernelKind::Gaussian] {
            let k = KernelSpec::new(kind, 0.37);
            let step = 1e-4;
            let grid: Vec<f64> = (0..100_000).map(|j| -5.0 + step * (j as f64 + 0.5)).collect();
            let total: f64 = grid.iter().map(|&r| k.weight(0.2, r) * step).sum();
            assert!((total - 1.0).abs() < 1e-4, "{kind:?}: {total}");
        }
    }

    #[test]
    fn nonpositive_bandwidth_rejected() {
        let k = KernelSpec::new(KernelKind::Gaussian, 0.0);
        assert_eq!(kernel_weights(&[1.0], 1.0, k), Err(ScoreError::NonpositiveBandwidth(0.0)));
    }

    #[test]
    fn influence_mean_is_value() {
        let mut s = ScoreVector::new(5);
        let mut a = ScoreGroup::new("a".into(), GroupRole::Lead, 1.0);
        let mut b = ScoreGroup::new("b".into(), GroupRole::InverseWeighted, -1.0);
        for (i, z) in [(0, 1.0), (1, 2.0), (2, 4.0)] {
            a.push(i, 1.0, z, None).unwrap();
        }
        for (i, w, z) in [(2, 0.5, 1.0), (3, 2.0, -1.0), (4, 1.5, 3.0)] {
            b.push(i, w, z, Some(0.4)).unwrap();
        }
        s.groups = vec![a, b];
        let phi = s.influence();
        let mean = phi.iter().sum::<f64>() / phi.len() as f64;
        assert!((mean - s.value()).abs() < 1e-12);
        let expect = 7.0 / 3.0 - (0.5 - 2.0 + 4.5) / 4.0;
        assert!((s.value() - expect).abs() < 1e-12);
    }

    #[test]
    fn non_finite_term_is_reported() {
        let mut g = ScoreGroup::new("a".into(), GroupRole::Lead, 1.0);
        assert_eq!(g.push(7, 1.0, f64::NAN, None), Err(ScoreError::NonFiniteTerm(7)));
    }
}
