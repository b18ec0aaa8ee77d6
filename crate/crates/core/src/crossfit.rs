//! Fold assignment and out-of-fold nuisance prediction.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrast::{EstimationConfig, KernelSpec, MediatorKind};
use crate::data::{Dataset, FeatureMatrix};
use crate::error::{EstimationError, ScoreError};
use crate::exec::map_ordered;
use crate::nuisance::{fit_lasso_linear_weighted, fit_lasso_logistic_with, LassoSettings, PROB_FLOOR};

/// A treatment or mediator value usable as a map key (compared bitwise,
/// with -0.0 folded into 0.0).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Level(pub f64);

impl Level {
    fn key(self) -> u64 {
        if self.0 == 0.0 {
            0
        } else {
            self.0.to_bits()
        }
    }
}

impl PartialEq for Level {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl Eq for Level {}
impl std::hash::Hash for Level {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.key().hash(state);
    }
}
impl PartialOrd for Level {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Level {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0).then(self.key().cmp(&other.key()))
    }
}
impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}
impl From<f64> for Level {
    fn from(v: f64) -> Self {
        Level(v)
    }
}

/// Every conditional object a score can consume. Cross-section objects
/// carry the period `t`; panel objects refer to the unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NuisanceId {
    /// E[Y | D=d, M=m, T=t, X]
    MuCell { d: Level, m: Level, t: u8 },
    /// E[Y | D=d, T=t, X]
    MuTreat { d: Level, t: u8 },
    /// E[Y | D=d, T=t, M, X] with M as a regressor
    MuTreatMed { d: Level, t: u8 },
    /// Pr(D=d, M=m, T=t | X)
    RhoCell { d: Level, m: Level, t: u8 },
    /// Pr(D=d, T=t | X)
    PiTreat { d: Level, t: u8 },
    /// Pr(D=d, T=t | M, X)
    PiTreatMed { d: Level, t: u8 },
    /// Pr(T=t | X)
    PeriodProb { t: u8 },
    /// Pr(M_T=m | D=d, X) estimated on period-t rows
    NuCell { d: Level, m: Level, t: u8 },
    /// E[Y1 - Y0 | D=d, M=m, X]
    PanelMuCell { d: Level, m: Level },
    /// E[Y1 - Y0 | D=d, X]
    PanelMuTreat { d: Level },
    /// E[Y1 - Y0 | D=d, M, X] with M as a regressor
    PanelMuTreatMed { d: Level },
    /// E[Y0 | D=d, M=m, X]
    PanelMuPre { d: Level, m: Level },
    /// Pr(D=d, M=m | X)
    PanelRhoCell { d: Level, m: Level },
    /// Pr(D=d | X)
    PanelPiTreat { d: Level },
    /// Pr(D=d | M, X)
    PanelPiTreatMed { d: Level },
    /// E[I{M=m} - I{M0=m} | D=d, X]
    PanelNuChange { d: Level, m: Level },
    /// Pr(M0=m | D=d, X)
    PanelMedPre { d: Level, m: Level },
}

impl fmt::Display for NuisanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use NuisanceId::*;
        match self {
            MuCell { d, m, t } => write!(f, "mu({d},{m},{t}|X)"),
            MuTreat { d, t } => write!(f, "mu({d},{t}|X)"),
            MuTreatMed { d, t } => write!(f, "mu({d},{t}|M,X)"),
            RhoCell { d, m, t } => write!(f, "rho({d},{m},{t}|X)"),
            PiTreat { d, t } => write!(f, "pi({d},{t}|X)"),
            PiTreatMed { d, t } => write!(f, "pi({d},{t}|M,X)"),
            PeriodProb { t } => write!(f, "p({t}|X)"),
            NuCell { d, m, t } => write!(f, "nu({d},{m},{t}|X)"),
            PanelMuCell { d, m } => write!(f, "mu({d},{m}|X)"),
            PanelMuTreat { d } => write!(f, "mu({d}|X)"),
            PanelMuTreatMed { d } => write!(f, "mu({d}|M,X)"),
            PanelMuPre { d, m } => write!(f, "mu0({d},{m}|X)"),
            PanelRhoCell { d, m } => write!(f, "rho({d},{m}|X)"),
            PanelPiTreat { d } => write!(f, "pi({d}|X)"),
            PanelPiTreatMed { d } => write!(f, "pi({d}|M,X)"),
            PanelNuChange { d, m } => write!(f, "nu({d},{m}|X)"),
            PanelMedPre { d, m } => write!(f, "nu0({d},{m}|X)"),
        }
    }
}

impl NuisanceId {
    fn stable_key(&self) -> u64 {
        self.to_string()
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
    }

    /// True for conditional probabilities and densities.
    pub fn is_probability(&self) -> bool {
        use NuisanceId::*;
        matches!(
            self,
            RhoCell { .. }
                | PiTreat { .. }
                | PiTreatMed { .. }
                | PeriodProb { .. }
                | NuCell { .. }
                | PanelRhoCell { .. }
                | PanelPiTreat { .. }
                | PanelPiTreatMed { .. }
                | PanelMedPre { .. }
        )
    }
}

/// Full-sample shares (never cross-fitted).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScalarId {
    /// Pr(D=d, M=m, T=t); `m` or `t` may be left unrestricted.
    CellShare { d: Level, m: Option<Level>, t: Option<u8> },
    /// Pr(T=t)
    PeriodShare { t: u8 },
    /// Pr(M=m | D=d, T=t) (cross-sections) or Pr(M=m | D=d) (panel, `t` unset)
    MediatorShare { m: Level, d: Level, t: Option<u8> },
}

impl fmt::Display for ScalarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScalarId::CellShare { d, m, t } => write!(f, "Pi({d},{m:?},{t:?})"),
            ScalarId::PeriodShare { t } => write!(f, "Pr(T={t})"),
            ScalarId::MediatorShare { m, d, t } => write!(f, "Pr(M={m}|D={d},T={t:?})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub fold_of: Vec<usize>,
    pub k: usize,
    pub seed: u64,
}

impl FoldAssignment {
    pub fn rows_in(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    pub fn rows_outside(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] != fold).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &f in &self.fold_of {
            s[f] += 1;
        }
        s
    }
}

/// Stratum labels from (D, M, T) cells. The treatment is left out when it is
/// kernel-smoothed and the mediator when it is continuous.
pub fn default_strata(ds: &Dataset, kernel: Option<&KernelSpec>, mediator: MediatorKind) -> Vec<u64> {
    (0..ds.n())
        .map(|i| {
            let mut h = 0x9E37_79B9_7F4A_7C15u64;
            let mut push = |v: u64| h = (h ^ v).wrapping_mul(0x0100_0000_01b3).rotate_left(17);
            if kernel.is_none() {
                push(Level(ds.d()[i]).key());
            }
            if mediator == MediatorKind::Discrete {
                push(Level(ds.m()[i]).key());
            }
            if let Some(t) = ds.t() {
                push(t[i] as u64 + 1);
            }
            h
        })
        .collect()
}

/// Stratified K-fold assignment: rows are shuffled within each stratum and
/// dealt round-robin, with the deal continuing across strata so overall fold
/// sizes differ by at most one.
pub fn make_folds(n: usize, k: usize, seed: u64, strata: &[u64]) -> FoldAssignment {
    assert!(k >= 2, "need at least two folds");
    assert_eq!(strata.len(), n);
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, &s) in strata.iter().enumerate() {
        groups.entry(s).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![0; n];
    let mut next = 0usize;
    for rows in groups.values_mut() {
        if rows.len() < k {
            log::warn!("stratum with {} rows is smaller than the {} folds", rows.len(), k);
        }
        rows.shuffle(&mut rng);
        for &i in rows.iter() {
            fold_of[i] = next % k;
            next += 1;
        }
    }
    FoldAssignment { fold_of, k, seed }
}

/// What a score needs from cross-fitting.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NuisanceRequest {
    /// Objects that must be available for every row.
    pub required: BTreeSet<NuisanceId>,
    /// Per-row lookups that may be unavailable (rows needing them are dropped).
    pub optional: BTreeSet<NuisanceId>,
    pub scalars: BTreeSet<ScalarId>,
    pub treatment_kernel: Option<KernelSpec>,
    pub mediator: MediatorKind,
}

impl NuisanceRequest {
    pub fn merge(&mut self, other: &NuisanceRequest) {
        self.required.extend(other.required.iter().copied());
        self.optional.extend(other.optional.iter().copied());
        self.scalars.extend(other.scalars.iter().copied());
        let required = self.required.clone();
        self.optional.retain(|id| !required.contains(id));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FitKind {
    /// Cross-validated lasso.
    Lasso,
    /// Too few rows for cross-validation: (weighted) training mean.
    InterceptOnly,
    /// One-class training labels: constant share.
    SingleClass,
}

/// One learner fit, recorded for the out-of-fold audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub ids: Vec<NuisanceId>,
    pub predicted_fold: usize,
    pub training_folds: Vec<usize>,
    pub n_train: usize,
    pub kind: FitKind,
}

/// Out-of-fold predictions keyed by nuisance identifier.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NuisanceSet {
    n: usize,
    values: BTreeMap<NuisanceId, Vec<f64>>,
    scalars: BTreeMap<ScalarId, f64>,
    audit: Vec<FitRecord>,
    warnings: Vec<String>,
}

impl NuisanceSet {
    pub fn new(n: usize) -> Self {
        Self { n, ..Self::default() }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn insert(&mut self, id: NuisanceId, values: Vec<f64>) {
        assert_eq!(values.len(), self.n, "prediction length mismatch for {id}");
        self.values.insert(id, values);
    }

    pub fn insert_scalar(&mut self, id: ScalarId, value: f64) {
        self.scalars.insert(id, value);
    }

    pub fn get(&self, id: NuisanceId) -> Result<&[f64], ScoreError> {
        self.values.get(&id).map(Vec::as_slice).ok_or(ScoreError::MissingNuisance(id))
    }

    pub fn try_get(&self, id: NuisanceId) -> Option<&[f64]> {
        self.values.get(&id).map(Vec::as_slice)
    }

    pub fn get_mut(&mut self, id: NuisanceId) -> Option<&mut Vec<f64>> {
        self.values.get_mut(&id)
    }

    pub fn scalar(&self, id: ScalarId) -> Result<f64, ScoreError> {
        self.scalars.get(&id).copied().ok_or_else(|| ScoreError::MissingShare(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &NuisanceId> {
        self.values.keys()
    }

    pub fn audit(&self) -> &[FitRecord] {
        &self.audit
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn warn(&mut self, msg: String) {
        log::warn!("{msg}");
        self.warnings.push(msg);
    }
}

/// Features for mediator-conditioned learners: the mediator (raw or
/// one-hot over its observed support) followed by X.
pub fn mediator_features(ds: &Dataset, kind: MediatorKind) -> FeatureMatrix {
    match kind {
        MediatorKind::Continuous => ds.x().with_leading_column(ds.m()),
        MediatorKind::Discrete => {
            let support: BTreeSet<Level> = ds.m().iter().map(|&v| Level(v)).collect();
            let mut x = ds.x().clone();
            for level in support.iter().skip(1).rev() {
                let dummy: Vec<f64> = ds.m().iter().map(|&v| if Level(v) == *level { 1.0 } else { 0.0 }).collect();
                x = x.with_leading_column(&dummy);
            }
            x
        }
    }
}

/// Mediator in the row's own period: M for post-period rows, the recorded
/// pre-period mediator (or the row's M) for pre-period rows.
pub fn mediator_in_period(ds: &Dataset, i: usize) -> f64 {
    match ds.t() {
        Some(t) if t[i] == 0 => ds.m0().and_then(|m0| m0[i]).unwrap_or(ds.m()[i]),
        _ => ds.m()[i],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Features {
    X,
    MediatorX,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Family {
    Rho,
    Pi,
    PiMed,
    Period,
    Nu { d: Level, t: u8 },
    PanelRho,
    PanelPi,
    PanelPiMed,
    PanelMedPre { d: Level },
}

impl Family {
    fn features(self) -> Features {
        match self {
            Family::PiMed | Family::PanelPiMed => Features::MediatorX,
            _ => Features::X,
        }
    }
}

type CellKey = (Level, Level, u8);

/// A regression learner: weighted rows, a target, and whether predictions are probabilities.
struct RegressionTask {
    id: NuisanceId,
    weights: Vec<f64>,
    target: Vec<f64>,
    features: Features,
    probability: bool,
}

/// One-vs-rest logistic fits over a cell partition of a row domain.
struct PartitionTask {
    family: Family,
    domain: Vec<bool>,
    keys: Vec<Option<CellKey>>,
    cells: Vec<CellKey>,
    requested: Vec<(NuisanceId, CellKey)>,
}

enum Task {
    Regression(RegressionTask),
    Partition(PartitionTask),
}

impl Task {
    fn ids(&self) -> Vec<NuisanceId> {
        match self {
            Task::Regression(r) => vec![r.id],
            Task::Partition(p) => p.requested.iter().map(|(id, _)| *id).collect(),
        }
    }
}

struct Context<'a> {
    ds: &'a Dataset,
    kernel: Option<KernelSpec>,
}

impl Context<'_> {
    fn treat(&self, i: usize, d: Level) -> f64 {
        let v = self.ds.d()[i];
        match &self.kernel {
            Some(k) => k.weight(v, d.0),
            None => {
                if Level(v) == d {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn is_m(&self, i: usize, m: Level) -> f64 {
        if Level(self.ds.m()[i]) == m {
            1.0
        } else {
            0.0
        }
    }

    fn is_t(&self, i: usize, t: u8) -> f64 {
        match self.ds.t() {
            Some(ts) if ts[i] == t => 1.0,
            Some(_) => 0.0,
            None => 1.0,
        }
    }

    fn rows<F: Fn(usize) -> f64>(&self, f: F) -> Vec<f64> {
        (0..self.ds.n()).map(f).collect()
    }

    fn delta_y(&self) -> Vec<f64> {
        let pre = self.ds.y_pre().expect("panel outcome");
        self.ds.y().iter().zip(pre).map(|(a, b)| a - b).collect()
    }

    fn regression(&self, id: NuisanceId, features: Features, weights: Vec<f64>, target: Vec<f64>, probability: bool) -> Task {
        Task::Regression(RegressionTask { id, weights, target, features, probability })
    }

    /// Learner specification for an identifier fitted by regression, or the
    /// partition family and cell it belongs to.
    fn classify(&self, id: NuisanceId) -> Result<Task, (Family, CellKey)> {
        use NuisanceId::*;
        let ds = self.ds;
        let y = ds.y();
        let z = Level(0.0);
        let kernel = self.kernel.is_some();
        Ok(match id {
            MuCell { d, m, t } => self.regression(
                id,
                Features::X,
                self.rows(|i| self.treat(i, d) * self.is_m(i, m) * self.is_t(i, t)),
                y.to_vec(),
                false,
            ),
            MuTreat { d, t } => {
                self.regression(id, Features::X, self.rows(|i| self.treat(i, d) * self.is_t(i, t)), y.to_vec(), false)
            }
            MuTreatMed { d, t } => self.regression(
                id,
                Features::MediatorX,
                self.rows(|i| self.treat(i, d) * self.is_t(i, t)),
                y.to_vec(),
                false,
            ),
            PanelMuCell { d, m } => self.regression(
                id,
                Features::X,
                self.rows(|i| self.treat(i, d) * self.is_m(i, m)),
                self.delta_y(),
                false,
            ),
            PanelMuTreat { d } => self.regression(id, Features::X, self.rows(|i| self.treat(i, d)), self.delta_y(), false),
            PanelMuTreatMed { d } => {
                self.regression(id, Features::MediatorX, self.rows(|i| self.treat(i, d)), self.delta_y(), false)
            }
            PanelMuPre { d, m } => self.regression(
                id,
                Features::X,
                self.rows(|i| self.treat(i, d) * self.is_m(i, m)),
                ds.y_pre().expect("panel outcome").to_vec(),
                false,
            ),
            PanelNuChange { d, m } => {
                let m0 = ds.m0();
                let has_m0 = |i: usize| m0.is_some_and(|v| v[i].is_some());
                let target = self.rows(|i| {
                    let pre = m0.and_then(|v| v[i]).map_or(0.0, |v| if Level(v) == m { 1.0 } else { 0.0 });
                    self.is_m(i, m) - pre
                });
                self.regression(
                    id,
                    Features::X,
                    self.rows(|i| if has_m0(i) { self.treat(i, d) } else { 0.0 }),
                    target,
                    false,
                )
            }
            RhoCell { d, m, t } if kernel => self.regression(
                id,
                Features::X,
                vec![1.0; ds.n()],
                self.rows(|i| self.treat(i, d) * self.is_m(i, m) * self.is_t(i, t)),
                true,
            ),
            PiTreat { d, t } if kernel => self.regression(
                id,
                Features::X,
                vec![1.0; ds.n()],
                self.rows(|i| self.treat(i, d) * self.is_t(i, t)),
                true,
            ),
            PiTreatMed { d, t } if kernel => self.regression(
                id,
                Features::MediatorX,
                vec![1.0; ds.n()],
                self.rows(|i| self.treat(i, d) * self.is_t(i, t)),
                true,
            ),
            PanelRhoCell { d, m } if kernel => self.regression(
                id,
                Features::X,
                vec![1.0; ds.n()],
                self.rows(|i| self.treat(i, d) * self.is_m(i, m)),
                true,
            ),
            PanelPiTreat { d } if kernel => {
                self.regression(id, Features::X, vec![1.0; ds.n()], self.rows(|i| self.treat(i, d)), true)
            }
            PanelPiTreatMed { d } if kernel => {
                self.regression(id, Features::MediatorX, vec![1.0; ds.n()], self.rows(|i| self.treat(i, d)), true)
            }
            NuCell { d, m, t } if kernel => self.regression(
                id,
                Features::X,
                self.rows(|i| self.treat(i, d) * self.is_t(i, t)),
                self.rows(|i| if Level(mediator_in_period(ds, i)) == m { 1.0 } else { 0.0 }),
                true,
            ),
            PanelMedPre { d, m } if kernel => {
                let m0 = ds.m0();
                self.regression(
                    id,
                    Features::X,
                    self.rows(|i| if m0.is_some_and(|v| v[i].is_some()) { self.treat(i, d) } else { 0.0 }),
                    self.rows(|i| match m0.and_then(|v| v[i]) {
                        Some(v) if Level(v) == m => 1.0,
                        _ => 0.0,
                    }),
                    true,
                )
            }
            RhoCell { d, m, t } => return Err((Family::Rho, (d, m, t))),
            PiTreat { d, t } => return Err((Family::Pi, (d, z, t))),
            PiTreatMed { d, t } => return Err((Family::PiMed, (d, z, t))),
            PeriodProb { t } => return Err((Family::Period, (z, z, t))),
            NuCell { d, m, t } => return Err((Family::Nu { d, t }, (z, m, 0))),
            PanelRhoCell { d, m } => return Err((Family::PanelRho, (d, m, 0))),
            PanelPiTreat { d } => return Err((Family::PanelPi, (d, z, 0))),
            PanelPiTreatMed { d } => return Err((Family::PanelPiMed, (d, z, 0))),
            PanelMedPre { d, m } => return Err((Family::PanelMedPre { d }, (z, m, 0))),
        })
    }

    /// Domain and per-row cell key for a partition family.
    fn partition(&self, family: Family) -> (Vec<bool>, Vec<Option<CellKey>>) {
        let ds = self.ds;
        let z = Level(0.0);
        let t_of = |i: usize| ds.t().map_or(0, |t| t[i]);
        let mut domain = vec![true; ds.n()];
        let keys = (0..ds.n())
            .map(|i| {
                let d = Level(ds.d()[i]);
                let m = Level(ds.m()[i]);
                let key = match family {
                    Family::Rho => Some((d, m, t_of(i))),
                    Family::Pi | Family::PiMed => Some((d, z, t_of(i))),
                    Family::Period => Some((z, z, t_of(i))),
                    Family::Nu { d: dd, t } => {
                        (d == dd && t_of(i) == t).then(|| (z, Level(mediator_in_period(ds, i)), 0))
                    }
                    Family::PanelRho => Some((d, m, 0)),
                    Family::PanelPi | Family::PanelPiMed => Some((d, z, 0)),
                    Family::PanelMedPre { d: dd } => match ds.m0().and_then(|v| v[i]) {
                        Some(m0) if d == dd => Some((z, Level(m0), 0)),
                        _ => None,
                    },
                };
                domain[i] = key.is_some();
                key
            })
            .collect();
        (domain, keys)
    }
}

struct FoldOutput {
    /// Predictions for the fold's rows, one vector per identifier of the task.
    values: Vec<Vec<f64>>,
    record: FitRecord,
    warning: Option<String>,
}

fn fit_seed(cfg_seed: u64, ids: &[NuisanceId], fold: usize) -> u64 {
    let key = ids.iter().fold(0u64, |h, id| h.rotate_left(5) ^ id.stable_key());
    cfg_seed ^ key ^ (fold as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn training_folds(folds: &FoldAssignment, rows: &[usize]) -> Vec<usize> {
    let set: BTreeSet<usize> = rows.iter().map(|&i| folds.fold_of[i]).collect();
    set.into_iter().collect()
}

/// Sum in a fixed order so the result does not depend on row order.
fn canonical_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

fn run_regression(
    task: &RegressionTask,
    feats: &FeatureMatrix,
    folds: &FoldAssignment,
    fold: usize,
    settings: &LassoSettings,
) -> Result<Option<FoldOutput>, EstimationError> {
    let train: Vec<usize> = folds.rows_outside(fold).into_iter().filter(|&i| task.weights[i] > 0.0).collect();
    let test = folds.rows_in(fold);
    if train.is_empty() {
        return Ok(None);
    }
    let ids = vec![task.id];
    let x_train = feats.select_rows(&train);
    let y_train: Vec<f64> = train.iter().map(|&i| task.target[i]).collect();
    let w_train: Vec<f64> = train.iter().map(|&i| task.weights[i]).collect();
    let unit_weights = w_train.iter().all(|&w| w == 1.0);
    let x_test = feats.select_rows(&test);
    let (mut pred, kind, warning) = if train.len() < settings.cv_folds.max(2) {
        let wsum = canonical_sum(w_train.clone());
        let mean = canonical_sum(y_train.iter().zip(&w_train).map(|(y, w)| y * w).collect()) / wsum;
        let msg = format!("{}: {} training rows in fold {fold}; using the training mean", task.id, train.len());
        (vec![mean; test.len()], FitKind::InterceptOnly, Some(msg))
    } else {
        let s = settings.with_seed(fit_seed(settings.seed, &ids, fold));
        let model = fit_lasso_linear_weighted(&x_train, &y_train, (!unit_weights).then_some(&w_train[..]), &s)?;
        (model.predict(&x_test)?, FitKind::Lasso, None)
    };
    if task.probability {
        let cap = if task.id_is_density() { f64::INFINITY } else { 1.0 - PROB_FLOOR };
        for v in &mut pred {
            *v = v.clamp(PROB_FLOOR, cap);
        }
    }
    Ok(Some(FoldOutput {
        values: vec![pred],
        record: FitRecord {
            ids,
            predicted_fold: fold,
            training_folds: training_folds(folds, &train),
            n_train: train.len(),
            kind,
        },
        warning,
    }))
}

impl RegressionTask {
    /// Kernel-smoothed propensities are densities and are not capped at one.
    fn id_is_density(&self) -> bool {
        use NuisanceId::*;
        matches!(
            self.id,
            RhoCell { .. } | PiTreat { .. } | PiTreatMed { .. } | PanelRhoCell { .. } | PanelPiTreat { .. } | PanelPiTreatMed { .. }
        )
    }
}

fn run_partition(
    task: &PartitionTask,
    feats: &FeatureMatrix,
    folds: &FoldAssignment,
    fold: usize,
    settings: &LassoSettings,
) -> Result<Option<FoldOutput>, EstimationError> {
    let train: Vec<usize> = folds.rows_outside(fold).into_iter().filter(|&i| task.domain[i]).collect();
    let test = folds.rows_in(fold);
    if train.is_empty() {
        return Ok(None);
    }
    let ids: Vec<NuisanceId> = task.requested.iter().map(|(id, _)| *id).collect();
    let x_train = feats.select_rows(&train);
    let x_test = feats.select_rows(&test);
    let fitted_cells = if task.cells.len() == 2 { &task.cells[..1] } else { &task.cells[..] };
    let mut probs: Vec<Vec<f64>> = Vec::with_capacity(task.cells.len());
    let mut kind = FitKind::Lasso;
    let mut warning = None;
    for (c, cell) in fitted_cells.iter().enumerate() {
        let labels: Vec<f64> = train.iter().map(|&i| if task.keys[i] == Some(*cell) { 1.0 } else { 0.0 }).collect();
        let positives = labels.iter().filter(|&&v| v == 1.0).count();
        let pred = if positives == 0 || positives == labels.len() || train.len() < settings.cv_folds.max(2) {
            if positives == 0 || positives == labels.len() {
                kind = FitKind::SingleClass;
            } else {
                kind = FitKind::InterceptOnly;
            }
            let share = (positives as f64 / labels.len() as f64).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            warning = Some(format!("{:?} cell {c}: constant share in fold {fold}", task.family));
            vec![share; test.len()]
        } else {
            let s = settings.with_seed(fit_seed(settings.seed, &ids, fold) ^ (c as u64 + 1));
            let model = fit_lasso_logistic_with(&x_train, &labels, &s)?;
            model.predict(&x_test)?
        };
        probs.push(pred);
    }
    if task.cells.len() == 2 {
        let other: Vec<f64> = probs[0].iter().map(|p| 1.0 - p).collect();
        probs.push(other);
    } else if task.cells.len() > 2 {
        for r in 0..test.len() {
            let total: f64 = probs.iter().map(|p| p[r]).sum();
            for p in probs.iter_mut() {
                p[r] /= total;
            }
        }
    }
    let values = task
        .requested
        .iter()
        .map(|(_, key)| match task.cells.iter().position(|c| c == key) {
            Some(c) => probs[c].clone(),
            None => vec![PROB_FLOOR; test.len()],
        })
        .collect();
    Ok(Some(FoldOutput {
        values,
        record: FitRecord {
            ids,
            predicted_fold: fold,
            training_folds: training_folds(folds, &train),
            n_train: train.len(),
            kind,
        },
        warning,
    }))
}

/// Fits every requested nuisance on each fold complement and stacks the
/// held-out predictions; scalar shares use the full sample.
pub fn fit_predict_nuisances(
    ds: &Dataset,
    folds: &FoldAssignment,
    request: &NuisanceRequest,
    cfg: &EstimationConfig,
) -> Result<NuisanceSet, EstimationError> {
    let n = ds.n();
    assert_eq!(folds.fold_of.len(), n);
    let ctx = Context { ds, kernel: request.treatment_kernel };
    let mut out = NuisanceSet::new(n);
    for &s in &request.scalars {
        out.insert_scalar(s, scalar_share(ds, &ctx, s));
    }

    let mut tasks: Vec<Task> = Vec::new();
    let mut families: BTreeMap<Family, Vec<(NuisanceId, CellKey)>> = BTreeMap::new();
    for &id in request.required.iter().chain(&request.optional) {
        match ctx.classify(id) {
            Ok(task) => tasks.push(task),
            Err((family, key)) => families.entry(family).or_default().push((id, key)),
        }
    }
    for (family, requested) in families {
        let (domain, keys) = ctx.partition(family);
        let cells: BTreeSet<CellKey> = keys.iter().flatten().copied().collect();
        tasks.push(Task::Partition(PartitionTask {
            family,
            domain,
            keys,
            cells: cells.into_iter().collect(),
            requested,
        }));
    }

    let needs_mx = tasks.iter().any(|t| match t {
        Task::Regression(r) => r.features == Features::MediatorX,
        Task::Partition(p) => p.family.features() == Features::MediatorX,
    });
    let mx = needs_mx.then(|| mediator_features(ds, request.mediator));
    let settings = LassoSettings::from_config(cfg);

    let units: Vec<(usize, usize)> = (0..tasks.len()).flat_map(|t| (0..folds.k).map(move |f| (t, f))).collect();
    let results = map_ordered(cfg.execution, &units, |&(t, fold)| match &tasks[t] {
        Task::Regression(r) => {
            let feats = if r.features == Features::MediatorX { mx.as_ref().unwrap() } else { ds.x() };
            run_regression(r, feats, folds, fold, &settings)
        }
        Task::Partition(p) => {
            let feats = if p.family.features() == Features::MediatorX { mx.as_ref().unwrap() } else { ds.x() };
            run_partition(p, feats, folds, fold, &settings)
        }
    });

    let mut stacked: Vec<Vec<Vec<f64>>> = tasks.iter().map(|t| vec![vec![f64::NAN; n]; t.ids().len()]).collect();
    let mut available: Vec<bool> = vec![true; tasks.len()];
    for (&(t, fold), res) in units.iter().zip(results) {
        match res? {
            Some(o) => {
                let rows = folds.rows_in(fold);
                for (slot, vals) in stacked[t].iter_mut().zip(&o.values) {
                    for (&i, v) in rows.iter().zip(vals) {
                        slot[i] = *v;
                    }
                }
                out.audit.push(o.record);
                if let Some(w) = o.warning {
                    out.warn(w);
                }
            }
            None => {
                let ids = tasks[t].ids();
                if let Some(id) = ids.iter().find(|id| request.required.contains(id)) {
                    return Err(EstimationError::EmptyTrainingCell { id: *id, fold });
                }
                available[t] = false;
            }
        }
    }
    for ((task, values), ok) in tasks.iter().zip(stacked).zip(available) {
        let ids = task.ids();
        if !ok {
            for id in &ids {
                out.warn(format!("{id} has an empty training cell in some fold; rows that need it are dropped"));
            }
            continue;
        }
        for (id, v) in ids.into_iter().zip(values) {
            out.insert(id, v);
        }
    }
    Ok(out)
}

fn scalar_share(ds: &Dataset, ctx: &Context<'_>, s: ScalarId) -> f64 {
    let n = ds.n() as f64;
    match s {
        ScalarId::CellShare { d, m, t } => {
            canonical_sum(
                (0..ds.n())
                    .map(|i| ctx.treat(i, d) * m.map_or(1.0, |m| ctx.is_m(i, m)) * t.map_or(1.0, |t| ctx.is_t(i, t)))
                    .collect(),
            ) / n
        }
        ScalarId::PeriodShare { t } => canonical_sum((0..ds.n()).map(|i| ctx.is_t(i, t)).collect()) / n,
        ScalarId::MediatorShare { m, d, t } => {
            let w: Vec<f64> = (0..ds.n()).map(|i| ctx.treat(i, d) * t.map_or(1.0, |t| ctx.is_t(i, t))).collect();
            let num = canonical_sum(w.iter().enumerate().map(|(i, w)| w * ctx.is_m(i, m)).collect());
            let den = canonical_sum(w);
            if den > 0.0 {
                num / den
            } else {
                0.0
            }
        }
    }
}
