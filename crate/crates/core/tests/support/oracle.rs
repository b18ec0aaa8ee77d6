//! Finite populations with a binary covariate, exact nuisances obtained by
//! enumeration, and closed-form regression expressions computed as sums over
//! covariate cells.

#![allow(dead_code)]

use std::collections::BTreeSet;

use didmed::contrast::{ContrastSpec, MediatorKind};
use didmed::crossfit::{mediator_in_period, Level, NuisanceId, NuisanceSet};
use didmed::data::{Dataset, Design, FeatureMatrix};
use didmed::scores;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BIN: [f64; 2] = [0.0, 1.0];

/// Repeated cross-section population covering every (x, d, m, t) cell with
/// two to four rows each.
pub fn rcs_population(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut y, mut d, mut m, mut t, mut x) = (vec![], vec![], vec![], vec![], vec![]);
    for xv in BIN {
        for dv in BIN {
            for mv in BIN {
                for tv in [0u8, 1] {
                    for _ in 0..rng.random_range(2..=4) {
                        let base = 1.0 + 0.5 * xv + dv + 0.7 * mv + 0.3 * f64::from(tv) + 1.2 * dv * f64::from(tv);
                        y.push(base + rng.random_range(-1.0..1.0));
                        d.push(dv);
                        m.push(mv);
                        t.push(tv);
                        x.push(vec![xv]);
                    }
                }
            }
        }
    }
    Dataset::cross_section(y, d, m, t, FeatureMatrix::from_rows(&x)).expect("valid population")
}

/// Panel population covering every (x, d, m0, m) cell with two to four units each.
pub fn panel_population(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut y0, mut y1, mut d, mut m, mut m0, mut x) = (vec![], vec![], vec![], vec![], vec![], vec![]);
    for xv in BIN {
        for dv in BIN {
            for pre in BIN {
                for mv in BIN {
                    for _ in 0..rng.random_range(2..=4) {
                        let a = 0.4 * xv + 0.6 * pre + rng.random_range(-1.0..1.0);
                        y0.push(a);
                        y1.push(a + 0.5 + 0.8 * dv + 0.9 * mv + 0.3 * xv + rng.random_range(-1.0..1.0));
                        d.push(dv);
                        m.push(mv);
                        m0.push(Some(pre));
                        x.push(vec![xv]);
                    }
                }
            }
        }
    }
    Dataset::panel(y0, y1, d, m, FeatureMatrix::from_rows(&x))
        .and_then(|ds| ds.with_pre_mediator(m0))
        .expect("valid population")
}

fn eq(a: f64, b: f64) -> bool {
    Level(a) == Level(b)
}

fn ind(b: bool) -> f64 {
    f64::from(u8::from(b))
}

fn period(ds: &Dataset, i: usize) -> u8 {
    ds.t().map_or(1, |t| t[i])
}

fn xv(ds: &Dataset, i: usize) -> f64 {
    ds.x().get(i, 0)
}

fn pre_mediator(ds: &Dataset, i: usize) -> f64 {
    ds.m0().and_then(|m0| m0[i]).expect("pre-period mediator")
}

fn change(ds: &Dataset, i: usize) -> f64 {
    ds.y()[i] - ds.y_pre().expect("panel")[i]
}

/// What a nuisance conditions on besides the covariate.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Key {
    X,
    MediatorX,
}

/// Enumeration recipe: among rows sharing the key with row i, either the
/// share satisfying `event` or the mean of `target` over rows satisfying it.
struct Recipe<'a> {
    key: Key,
    event: Box<dyn Fn(usize) -> bool + 'a>,
    target: Option<Box<dyn Fn(usize) -> f64 + 'a>>,
}

fn recipe<'a>(ds: &'a Dataset, id: NuisanceId) -> Recipe<'a> {
    use NuisanceId::*;
    let d_is = move |i: usize, d: Level| Level(ds.d()[i]) == d;
    let m_is = move |i: usize, m: Level| Level(ds.m()[i]) == m;
    let y = move |i: usize| ds.y()[i];
    let mean = |key, event: Box<dyn Fn(usize) -> bool + 'a>, target: Box<dyn Fn(usize) -> f64 + 'a>| Recipe {
        key,
        event,
        target: Some(target),
    };
    let share = |key, event: Box<dyn Fn(usize) -> bool + 'a>| Recipe { key, event, target: None };
    match id {
        MuCell { d, m, t } => mean(Key::X, Box::new(move |i| d_is(i, d) && m_is(i, m) && period(ds, i) == t), Box::new(y)),
        MuTreat { d, t } => mean(Key::X, Box::new(move |i| d_is(i, d) && period(ds, i) == t), Box::new(y)),
        MuTreatMed { d, t } => mean(Key::MediatorX, Box::new(move |i| d_is(i, d) && period(ds, i) == t), Box::new(y)),
        RhoCell { d, m, t } => share(Key::X, Box::new(move |i| d_is(i, d) && m_is(i, m) && period(ds, i) == t)),
        PiTreat { d, t } => share(Key::X, Box::new(move |i| d_is(i, d) && period(ds, i) == t)),
        PiTreatMed { d, t } => share(Key::MediatorX, Box::new(move |i| d_is(i, d) && period(ds, i) == t)),
        PeriodProb { t } => share(Key::X, Box::new(move |i| period(ds, i) == t)),
        NuCell { d, m, t } => mean(
            Key::X,
            Box::new(move |i| d_is(i, d) && period(ds, i) == t),
            Box::new(move |i| ind(Level(mediator_in_period(ds, i)) == m)),
        ),
        PanelMuCell { d, m } => mean(Key::X, Box::new(move |i| d_is(i, d) && m_is(i, m)), Box::new(move |i| change(ds, i))),
        PanelMuTreat { d } => mean(Key::X, Box::new(move |i| d_is(i, d)), Box::new(move |i| change(ds, i))),
        PanelMuTreatMed { d } => mean(Key::MediatorX, Box::new(move |i| d_is(i, d)), Box::new(move |i| change(ds, i))),
        PanelMuPre { d, m } => mean(
            Key::X,
            Box::new(move |i| d_is(i, d) && m_is(i, m)),
            Box::new(move |i| ds.y_pre().expect("panel")[i]),
        ),
        PanelRhoCell { d, m } => share(Key::X, Box::new(move |i| d_is(i, d) && m_is(i, m))),
        PanelPiTreat { d } => share(Key::X, Box::new(move |i| d_is(i, d))),
        PanelPiTreatMed { d } => share(Key::MediatorX, Box::new(move |i| d_is(i, d))),
        PanelNuChange { d, m } => mean(
            Key::X,
            Box::new(move |i| d_is(i, d)),
            Box::new(move |i| ind(m_is(i, m)) - ind(Level(pre_mediator(ds, i)) == m)),
        ),
        PanelMedPre { d, m } => mean(
            Key::X,
            Box::new(move |i| d_is(i, d)),
            Box::new(move |i| ind(Level(pre_mediator(ds, i)) == m)),
        ),
    }
}

fn key_of(ds: &Dataset, key: Key, i: usize) -> (u64, u64) {
    let x = Level(xv(ds, i)).0.to_bits();
    match key {
        Key::X => (x, 0),
        Key::MediatorX => (x, ds.m()[i].to_bits()),
    }
}

/// Exact conditional object `id` evaluated at every row.
pub fn exact(ds: &Dataset, id: NuisanceId) -> Vec<f64> {
    let r = recipe(ds, id);
    (0..ds.n())
        .map(|i| {
            let k = key_of(ds, r.key, i);
            let same: Vec<usize> = (0..ds.n()).filter(|&j| key_of(ds, r.key, j) == k).collect();
            let hits: Vec<usize> = same.iter().copied().filter(|&j| (r.event)(j)).collect();
            match &r.target {
                None => hits.len() as f64 / same.len() as f64,
                Some(z) => {
                    assert!(!hits.is_empty(), "{id} undefined at row {i}");
                    hits.iter().map(|&j| z(j)).sum::<f64>() / hits.len() as f64
                }
            }
        })
        .collect()
}

/// Which nuisances a modification touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    /// Conditional means (including mediator-distribution objects).
    Outcome,
    /// Treatment, cell and period propensities.
    Propensity,
    All,
}

fn in_part(id: NuisanceId, part: Part) -> bool {
    use NuisanceId::*;
    let propensity = matches!(
        id,
        RhoCell { .. } | PiTreat { .. } | PiTreatMed { .. } | PeriodProb { .. } | PanelRhoCell { .. } | PanelPiTreat { .. } | PanelPiTreatMed { .. }
    );
    match part {
        Part::Outcome => !propensity,
        Part::Propensity => propensity,
        Part::All => true,
    }
}

/// A bounded direction h(key) ∈ [-1, 1] for every nuisance, drawn per key cell.
pub struct Direction {
    seed: u64,
}

impl Direction {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn values(&self, ds: &Dataset, id: NuisanceId) -> Vec<f64> {
        let r = recipe(ds, id);
        let tag = id.to_string().bytes().fold(self.seed, |h, b| h.wrapping_mul(31).wrapping_add(u64::from(b)));
        (0..ds.n())
            .map(|i| {
                let (a, b) = key_of(ds, r.key, i);
                let mut rng = ChaCha8Rng::seed_from_u64(tag ^ a.rotate_left(17) ^ b.rotate_left(41));
                rng.random_range(-1.0..1.0)
            })
            .collect()
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn expit(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Exact nuisances moved by `eps` along `dir` on the selected part: additive
/// for conditional means, on the logit scale for probabilities.
pub fn shifted(ds: &Dataset, ids: &BTreeSet<NuisanceId>, dir: &Direction, eps: f64, part: Part) -> NuisanceSet {
    let mut nu = NuisanceSet::new(ds.n());
    for &id in ids {
        let mut v = exact(ds, id);
        if in_part(id, part) && eps != 0.0 {
            let h = dir.values(ds, id);
            for (vi, hi) in v.iter_mut().zip(h) {
                *vi = if id.is_probability() { expit(logit(*vi) + eps * hi) } else { *vi + eps * hi };
            }
        }
        nu.insert(id, v);
    }
    nu
}

/// Exact nuisances.
pub fn exact_set(ds: &Dataset, ids: &BTreeSet<NuisanceId>) -> NuisanceSet {
    shifted(ds, ids, &Direction::new(0), 0.0, Part::All)
}

/// Exact nuisances with the selected part replaced by a clearly wrong model.
pub fn misspecified(ds: &Dataset, ids: &BTreeSet<NuisanceId>, part: Part, seed: u64) -> NuisanceSet {
    shifted(ds, ids, &Direction::new(seed), 1.5, part)
}

// ---------------------------------------------------------------------------
// Regression expressions as sums over covariate cells
// ---------------------------------------------------------------------------

fn count(ds: &Dataset, pred: impl Fn(usize) -> bool) -> f64 {
    (0..ds.n()).filter(|&i| pred(i)).count() as f64
}

fn avg(ds: &Dataset, pred: impl Fn(usize) -> bool, z: impl Fn(usize) -> f64) -> f64 {
    let rows: Vec<usize> = (0..ds.n()).filter(|&i| pred(i)).collect();
    rows.iter().map(|&i| z(i)).sum::<f64>() / rows.len() as f64
}

fn rcs_cell(ds: &Dataset, x: f64, d: f64, m: Option<f64>, t: Option<u8>) -> impl Fn(usize) -> bool + '_ {
    move |i| {
        eq(xv(ds, i), x)
            && eq(ds.d()[i], d)
            && m.is_none_or(|m| eq(ds.m()[i], m))
            && t.is_none_or(|t| period(ds, i) == t)
    }
}

/// Mean outcome in cell (x, d, m, t); `m` may be unrestricted.
fn ybar(ds: &Dataset, x: f64, d: f64, m: Option<f64>, t: u8) -> f64 {
    avg(ds, rcs_cell(ds, x, d, m, Some(t)), |i| ds.y()[i])
}

/// E[Y|D=d,M=m,T=1] − E[μ_{d,m}(0,X) + μ_{d',m'}(1,X) − μ_{d',m'}(0,X) | D=d,M=m,T=1].
pub fn rcs_atet(ds: &Dataset, d: f64, m: f64, dp: f64, mp: f64) -> f64 {
    let lead = count(ds, |i| eq(ds.d()[i], d) && eq(ds.m()[i], m) && period(ds, i) == 1);
    BIN.iter()
        .map(|&x| {
            let w = count(ds, rcs_cell(ds, x, d, Some(m), Some(1))) / lead;
            w * (ybar(ds, x, d, Some(m), 1) - ybar(ds, x, d, Some(m), 0) - ybar(ds, x, dp, Some(mp), 1) + ybar(ds, x, dp, Some(mp), 0))
        })
        .sum()
}

/// E[μ_{d,m}(1,X) − μ_{d,m}(0,X) − μ_{d',m'}(1,X) + μ_{d',m'}(0,X) | T=1].
pub fn rcs_ate(ds: &Dataset, d: f64, m: f64, dp: f64, mp: f64) -> f64 {
    let post = count(ds, |i| period(ds, i) == 1);
    BIN.iter()
        .map(|&x| {
            let w = count(ds, |i| eq(xv(ds, i), x) && period(ds, i) == 1) / post;
            w * (ybar(ds, x, d, Some(m), 1) - ybar(ds, x, d, Some(m), 0) - ybar(ds, x, dp, Some(mp), 1) + ybar(ds, x, dp, Some(mp), 0))
        })
        .sum()
}

/// E[μ_{d',m'}(t,X) | D=d, M=m, T=1].
pub fn rcs_cell_outcome(ds: &Dataset, d: f64, m: f64, dp: f64, mp: f64, t: u8) -> f64 {
    let lead = count(ds, |i| eq(ds.d()[i], d) && eq(ds.m()[i], m) && period(ds, i) == 1);
    BIN.iter()
        .map(|&x| count(ds, rcs_cell(ds, x, d, Some(m), Some(1))) / lead * ybar(ds, x, dp, Some(mp), t))
        .sum()
}

/// E[μ_{d,M}(0,X) + μ_{d',M}(1,X) − μ_{d',M}(0,X) | D=d, T=1].
pub fn rcs_treated_mediator(ds: &Dataset, d: f64, dp: f64) -> f64 {
    let lead = count(ds, |i| eq(ds.d()[i], d) && period(ds, i) == 1);
    let mut total = 0.0;
    for x in BIN {
        for m in BIN {
            let w = count(ds, rcs_cell(ds, x, d, Some(m), Some(1))) / lead;
            total += w * (ybar(ds, x, d, Some(m), 0) + ybar(ds, x, dp, Some(m), 1) - ybar(ds, x, dp, Some(m), 0));
        }
    }
    total
}

/// E[μ_d(0,X) + μ_{d'}(1,X) − μ_{d'}(0,X) | D=d, T=1].
pub fn rcs_standard(ds: &Dataset, d: f64, dp: f64) -> f64 {
    let lead = count(ds, |i| eq(ds.d()[i], d) && period(ds, i) == 1);
    BIN.iter()
        .map(|&x| {
            let w = count(ds, rcs_cell(ds, x, d, None, Some(1))) / lead;
            w * (ybar(ds, x, d, None, 0) + ybar(ds, x, dp, None, 1) - ybar(ds, x, dp, None, 0))
        })
        .sum()
}

/// Pr(M=m | D=d, T=t, X=x).
fn nu_rcs(ds: &Dataset, x: f64, d: f64, m: f64, t: u8) -> f64 {
    count(ds, rcs_cell(ds, x, d, Some(m), Some(t))) / count(ds, rcs_cell(ds, x, d, None, Some(t)))
}

/// ν_{d,m}(0,X) + ν_{d',m}(1,X) − ν_{d',m}(0,X) averaged over D=d, T=1.
pub fn rcs_mediator_block(ds: &Dataset, d: f64, dp: f64, m: f64) -> f64 {
    let lead = count(ds, |i| eq(ds.d()[i], d) && period(ds, i) == 1);
    BIN.iter()
        .map(|&x| {
            let w = count(ds, rcs_cell(ds, x, d, None, Some(1))) / lead;
            w * (nu_rcs(ds, x, d, m, 0) + nu_rcs(ds, x, dp, m, 1) - nu_rcs(ds, x, dp, m, 0))
        })
        .sum()
}

/// Σ_m E[g_m(X) h_m(X) | D=d, T=1] with outcome and mediator trend blocks.
pub fn rcs_double_trend(ds: &Dataset, d: f64, dp: f64) -> f64 {
    let lead = count(ds, |i| eq(ds.d()[i], d) && period(ds, i) == 1);
    let mut total = 0.0;
    for x in BIN {
        let w = count(ds, rcs_cell(ds, x, d, None, Some(1))) / lead;
        for m in BIN {
            let g = ybar(ds, x, d, Some(m), 0) + ybar(ds, x, dp, Some(m), 1) - ybar(ds, x, dp, Some(m), 0);
            let h = nu_rcs(ds, x, d, m, 0) + nu_rcs(ds, x, dp, m, 1) - nu_rcs(ds, x, dp, m, 0);
            total += w * g * h;
        }
    }
    total
}

fn panel_cell(ds: &Dataset, x: f64, d: f64, m: Option<f64>) -> impl Fn(usize) -> bool + '_ {
    move |i| eq(xv(ds, i), x) && eq(ds.d()[i], d) && m.is_none_or(|m| eq(ds.m()[i], m))
}

fn dbar(ds: &Dataset, x: f64, d: f64, m: Option<f64>) -> f64 {
    avg(ds, panel_cell(ds, x, d, m), |i| change(ds, i))
}

fn y0bar(ds: &Dataset, x: f64, d: f64, m: Option<f64>) -> f64 {
    avg(ds, panel_cell(ds, x, d, m), |i| ds.y_pre().expect("panel")[i])
}

/// E[ΔY − μ_{d',m'}(X) | D=d, M=m].
pub fn panel_atet(ds: &Dataset, d: f64, m: f64, dp: f64, mp: f64) -> f64 {
    let lead = count(ds, |i| eq(ds.d()[i], d) && eq(ds.m()[i], m));
    BIN.iter()
        .map(|&x| count(ds, panel_cell(ds, x, d, Some(m))) / lead * (dbar(ds, x, d, Some(m)) - dbar(ds, x, dp, Some(mp))))
        .sum()
}

/// E[μ_{d,m}(X) − μ_{d',m'}(X)].
pub fn panel_ate(ds: &Dataset, d: f64, m: f64, dp: f64, mp: f64) -> f64 {
    BIN.iter()
        .map(|&x| count(ds, |i| eq(xv(ds, i), x)) / ds.n() as f64 * (dbar(ds, x, d, Some(m)) - dbar(ds, x, dp, Some(mp))))
        .sum()
}

/// E[Y0 + μ_{d',M}(X) | D=d].
pub fn panel_treated_mediator(ds: &Dataset, d: f64, dp: f64) -> f64 {
    let lead = count(ds, |i| eq(ds.d()[i], d));
    let mut total = 0.0;
    for x in BIN {
        for m in BIN {
            let w = count(ds, panel_cell(ds, x, d, Some(m))) / lead;
            total += w * (y0bar(ds, x, d, Some(m)) + dbar(ds, x, dp, Some(m)));
        }
    }
    total
}

/// E[Y0 + μ_{d'}(X) | D=d].
pub fn panel_standard(ds: &Dataset, d: f64, dp: f64) -> f64 {
    let lead = count(ds, |i| eq(ds.d()[i], d));
    BIN.iter()
        .map(|&x| count(ds, panel_cell(ds, x, d, None)) / lead * (y0bar(ds, x, d, None) + dbar(ds, x, dp, None)))
        .sum()
}

/// Pr(M0=m | D=d, X=x) and E[I{M=m} − I{M0=m} | D=d, X=x].
fn nu_panel(ds: &Dataset, x: f64, d: f64, m: f64) -> (f64, f64) {
    let pre = avg(ds, panel_cell(ds, x, d, None), |i| ind(eq(pre_mediator(ds, i), m)));
    let delta = avg(ds, panel_cell(ds, x, d, None), |i| ind(eq(ds.m()[i], m)) - ind(eq(pre_mediator(ds, i), m)));
    (pre, delta)
}

/// ν⁰_{d,m}(X) + ν^Δ_{d',m}(X) averaged over D=d.
pub fn panel_mediator_block(ds: &Dataset, d: f64, dp: f64, m: f64) -> f64 {
    let lead = count(ds, |i| eq(ds.d()[i], d));
    BIN.iter()
        .map(|&x| count(ds, panel_cell(ds, x, d, None)) / lead * (nu_panel(ds, x, d, m).0 + nu_panel(ds, x, dp, m).1))
        .sum()
}

/// Σ_m E[(μ⁰_{d,m}(X) + μ_{d',m}(X)) (ν⁰_{d,m}(X) + ν^Δ_{d',m}(X)) | D=d].
pub fn panel_double_trend(ds: &Dataset, d: f64, dp: f64) -> f64 {
    let lead = count(ds, |i| eq(ds.d()[i], d));
    let mut total = 0.0;
    for x in BIN {
        let w = count(ds, panel_cell(ds, x, d, None)) / lead;
        for m in BIN {
            let g = y0bar(ds, x, d, Some(m)) + dbar(ds, x, dp, Some(m));
            let h = nu_panel(ds, x, d, m).0 + nu_panel(ds, x, dp, m).1;
            total += w * g * h;
        }
    }
    total
}

// ---------------------------------------------------------------------------
// Builder catalogue
// ---------------------------------------------------------------------------

/// Every nuisance object over binary treatment, mediator and period.
pub fn all_ids(design: Design) -> BTreeSet<NuisanceId> {
    use NuisanceId::*;
    let mut ids = BTreeSet::new();
    for d in BIN.map(Level) {
        for t in [0u8, 1] {
            ids.extend([MuTreat { d, t }, MuTreatMed { d, t }, PiTreat { d, t }, PiTreatMed { d, t }, PeriodProb { t }]);
            for m in BIN.map(Level) {
                ids.extend([MuCell { d, m, t }, RhoCell { d, m, t }, NuCell { d, m, t }]);
            }
        }
    }
    let mut panel = BTreeSet::new();
    for d in BIN.map(Level) {
        panel.extend([PanelMuTreat { d }, PanelMuTreatMed { d }, PanelPiTreat { d }, PanelPiTreatMed { d }]);
        for m in BIN.map(Level) {
            panel.extend([PanelMuCell { d, m }, PanelMuPre { d, m }, PanelRhoCell { d, m }, PanelNuChange { d, m }, PanelMedPre { d, m }]);
        }
    }
    match design {
        Design::RepeatedCrossSection => ids,
        Design::Panel => panel,
    }
}

type Eval = Box<dyn Fn(&Dataset, &NuisanceSet) -> f64>;
type Closed = Box<dyn Fn(&Dataset) -> f64>;

/// A score builder together with its regression counterpart.
pub struct Builder {
    pub name: String,
    pub design: Design,
    pub eval: Eval,
    pub regression: Closed,
    /// Covered by the double-robustness check.
    pub doubly_robust: bool,
}

fn builder(name: String, design: Design, eval: Eval, regression: Closed, doubly_robust: bool) -> Builder {
    Builder { name, design, eval, regression, doubly_robust }
}

pub fn catalogue() -> Vec<Builder> {
    use Design::{Panel, RepeatedCrossSection as Rcs};
    let mut out = vec![];
    for (d, m, dp, mp) in [(1.0, 1.0, 0.0, 0.0), (1.0, 0.0, 0.0, 0.0), (1.0, 1.0, 0.0, 1.0), (0.0, 1.0, 1.0, 0.0)] {
        let tag = format!("({d},{m},{dp},{mp})");
        out.push(builder(
            format!("atet cross-section {tag}"),
            Rcs,
            Box::new(move |ds, nu| scores::score_atet_rcs(ds, nu, &ContrastSpec::atet_joint(Rcs, d, m, dp, mp)).unwrap().value()),
            Box::new(move |ds| rcs_atet(ds, d, m, dp, mp)),
            true,
        ));
        out.push(builder(
            format!("ate cross-section {tag}"),
            Rcs,
            Box::new(move |ds, nu| scores::score_ate_rcs(ds, nu, &ContrastSpec::ate(Rcs, d, m, dp, mp)).unwrap().value()),
            Box::new(move |ds| rcs_ate(ds, d, m, dp, mp)),
            false,
        ));
        out.push(builder(
            format!("atet panel {tag}"),
            Panel,
            Box::new(move |ds, nu| scores::score_atet_panel(ds, nu, &ContrastSpec::atet_joint(Panel, d, m, dp, mp)).unwrap().value()),
            Box::new(move |ds| panel_atet(ds, d, m, dp, mp)),
            true,
        ));
        out.push(builder(
            format!("ate panel {tag}"),
            Panel,
            Box::new(move |ds, nu| scores::score_ate_panel(ds, nu, &ContrastSpec::ate(Panel, d, m, dp, mp)).unwrap().value()),
            Box::new(move |ds| panel_ate(ds, d, m, dp, mp)),
            false,
        ));
        for t in [0u8, 1] {
            out.push(builder(
                format!("cell outcome {tag} t={t}"),
                Rcs,
                Box::new(move |ds, nu| scores::score_counterfactual_d_prime_m_t_rcs(ds, nu, d, m, dp, mp, t).unwrap().value),
                Box::new(move |ds| rcs_cell_outcome(ds, d, m, dp, mp, t)),
                false,
            ));
        }
    }
    for (d, dp) in [(1.0, 0.0), (0.0, 1.0)] {
        let tag = format!("({d},{dp})");
        for kind in [MediatorKind::Discrete, MediatorKind::Continuous] {
            out.push(builder(
                format!("treated-mediator cross-section {kind:?} {tag}"),
                Rcs,
                Box::new(move |ds, nu| scores::score_counterfactual_md_rcs(ds, nu, d, dp, None, kind).unwrap().value),
                Box::new(move |ds| rcs_treated_mediator(ds, d, dp)),
                false,
            ));
            out.push(builder(
                format!("treated-mediator panel {kind:?} {tag}"),
                Panel,
                Box::new(move |ds, nu| scores::score_counterfactual_md_panel(ds, nu, d, dp, None, kind).unwrap().value),
                Box::new(move |ds| panel_treated_mediator(ds, d, dp)),
                false,
            ));
        }
        out.push(builder(
            format!("treated-mediator sum cross-section {tag}"),
            Rcs,
            Box::new(move |ds, nu| scores::score_counterfactual_md_sum_rcs(ds, nu, d, dp, None).unwrap().value),
            Box::new(move |ds| rcs_treated_mediator(ds, d, dp)),
            false,
        ));
        out.push(builder(
            format!("treated-mediator sum panel {tag}"),
            Panel,
            Box::new(move |ds, nu| scores::score_counterfactual_md_sum_panel(ds, nu, d, dp, None).unwrap().value),
            Box::new(move |ds| panel_treated_mediator(ds, d, dp)),
            false,
        ));
        out.push(builder(
            format!("standard cross-section {tag}"),
            Rcs,
            Box::new(move |ds, nu| scores::score_counterfactual_standard_rcs(ds, nu, d, dp, None).unwrap().value),
            Box::new(move |ds| rcs_standard(ds, d, dp)),
            true,
        ));
        out.push(builder(
            format!("standard panel {tag}"),
            Panel,
            Box::new(move |ds, nu| scores::score_counterfactual_standard_panel(ds, nu, d, dp, None).unwrap().value),
            Box::new(move |ds| panel_standard(ds, d, dp)),
            true,
        ));
        out.push(builder(
            format!("double trend cross-section {tag}"),
            Rcs,
            Box::new(move |ds, nu| scores::score_counterfactual_doubletrend_rcs(ds, nu, d, dp, None).unwrap().value),
            Box::new(move |ds| rcs_double_trend(ds, d, dp)),
            false,
        ));
        out.push(builder(
            format!("double trend panel {tag}"),
            Panel,
            Box::new(move |ds, nu| scores::score_counterfactual_doubletrend_panel(ds, nu, d, dp, None).unwrap().value),
            Box::new(move |ds| panel_double_trend(ds, d, dp)),
            false,
        ));
        for (j, m) in BIN.into_iter().enumerate() {
            out.push(builder(
                format!("mediator block cross-section {tag} m={m}"),
                Rcs,
                Box::new(move |ds, nu| scores::mediator_blocks_rcs(ds, nu, d, dp, None).unwrap()[j].1.value()),
                Box::new(move |ds| rcs_mediator_block(ds, d, dp, m)),
                false,
            ));
            out.push(builder(
                format!("mediator block panel {tag} m={m}"),
                Panel,
                Box::new(move |ds, nu| scores::mediator_blocks_panel(ds, nu, d, dp, None).unwrap()[j].1.value()),
                Box::new(move |ds| panel_mediator_block(ds, d, dp, m)),
                false,
            ));
        }
    }
    out
}

/// The population of a design for a seed.
pub fn population(design: Design, seed: u64) -> Dataset {
    match design {
        Design::RepeatedCrossSection => rcs_population(seed),
        Design::Panel => panel_population(seed),
    }
}

/// Central-difference slope of a builder along `dir` at the exact nuisances.
pub fn slope(b: &Builder, ds: &Dataset, dir: &Direction, eps: f64) -> f64 {
    let ids = all_ids(b.design);
    let up = (b.eval)(ds, &shifted(ds, &ids, dir, eps, Part::All));
    let down = (b.eval)(ds, &shifted(ds, &ids, dir, -eps, Part::All));
    (up - down) / (2.0 * eps)
}
