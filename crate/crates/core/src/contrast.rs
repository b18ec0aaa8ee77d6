//! Estimand specifications, engine configuration and the cell census check.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Design};
use crate::error::EstimationError;

/// Smoothing kernel used in place of treatment indicators for continuous D.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    Epanechnikov,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub bandwidth: f64,
}

impl KernelSpec {
    pub fn new(kind: KernelKind, bandwidth: f64) -> Self {
        Self { kind, bandwidth }
    }

    /// Kernel density K(u); symmetric and integrating to one.
    pub fn density(&self, u: f64) -> f64 {
        match self.kind {
            KernelKind::Epanechnikov => {
                if u.abs() < 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
            KernelKind::Gaussian => (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt(),
        }
    }

    /// ω(D; d, h) = K((D - d)/h)/h.
    pub fn weight(&self, value: f64, reference: f64) -> f64 {
        self.density((value - reference) / self.bandwidth) / self.bandwidth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimand {
    /// Effect of (d, m) against (d', m') among units with D=d, M=m.
    AtetJoint,
    /// Same contrast averaged over the whole (post-period) population.
    Ate,
    /// Total, natural direct and natural indirect effects of d against d'.
    NaturalDecomposition,
    /// Counterfactual E[Y1(d', M(d)) | D=d].
    CounterfactualDMd,
    /// Counterfactual E[Y1(d', M(d')) | D=d] under parallel trends across treatments.
    CounterfactualDprimeMdprime,
    /// Decomposition with E[Y1(d', M(d')) | D=d] identified through parallel
    /// trends in both the outcome and the mediator distribution.
    CounterfactualDoubleTrend,
}

/// How the mediator enters the mediator-conditioned nuisances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MediatorKind {
    /// Finite support; conditional means are looked up per mediator value.
    #[default]
    Discrete,
    /// Real-valued; the mediator enters the learners as a regressor.
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastSpec {
    pub design: Design,
    pub estimand: Estimand,
    pub d: f64,
    pub m: Option<f64>,
    pub d_prime: f64,
    pub m_prime: Option<f64>,
    pub treatment_kernel: Option<KernelSpec>,
    #[serde(default)]
    pub mediator: MediatorKind,
}

impl ContrastSpec {
    pub fn atet_joint(design: Design, d: f64, m: f64, d_prime: f64, m_prime: f64) -> Self {
        Self::joint(design, Estimand::AtetJoint, d, m, d_prime, m_prime)
    }

    pub fn ate(design: Design, d: f64, m: f64, d_prime: f64, m_prime: f64) -> Self {
        Self::joint(design, Estimand::Ate, d, m, d_prime, m_prime)
    }

    fn joint(design: Design, estimand: Estimand, d: f64, m: f64, d_prime: f64, m_prime: f64) -> Self {
        Self {
            design,
            estimand,
            d,
            m: Some(m),
            d_prime,
            m_prime: Some(m_prime),
            treatment_kernel: None,
            mediator: MediatorKind::Discrete,
        }
    }

    /// Treatment-only contrast (decomposition or a single counterfactual).
    pub fn treatment(design: Design, estimand: Estimand, d: f64, d_prime: f64) -> Self {
        Self {
            design,
            estimand,
            d,
            m: None,
            d_prime,
            m_prime: None,
            treatment_kernel: None,
            mediator: MediatorKind::Discrete,
        }
    }

    pub fn natural_decomposition(design: Design, d: f64, d_prime: f64) -> Self {
        Self::treatment(design, Estimand::NaturalDecomposition, d, d_prime)
    }

    pub fn with_kernel(mut self, kernel: KernelSpec) -> Self {
        self.treatment_kernel = Some(kernel);
        self
    }

    pub fn with_mediator(mut self, kind: MediatorKind) -> Self {
        self.mediator = kind;
        self
    }

    pub fn needs_mediator_values(&self) -> bool {
        matches!(self.estimand, Estimand::AtetJoint | Estimand::Ate)
    }

    /// Checks that the specification is internally consistent.
    pub fn check(&self) -> Result<(), EstimationError> {
        let bad = |msg: &str| Err(EstimationError::InvalidContrast(msg.to_string()));
        if !self.d.is_finite() || !self.d_prime.is_finite() {
            return bad("treatment values must be finite");
        }
        if let Some(k) = &self.treatment_kernel {
            if !(k.bandwidth > 0.0 && k.bandwidth.is_finite()) {
                return bad("kernel bandwidth must be positive");
            }
        }
        if self.needs_mediator_values() {
            if self.m.is_none() || self.m_prime.is_none() {
                return bad("joint contrasts require m and m_prime");
            }
            if self.mediator == MediatorKind::Continuous {
                return bad("joint contrasts require a discrete mediator");
            }
        } else if self.m.is_some() || self.m_prime.is_some() {
            return bad("treatment-only contrasts take no mediator values");
        }
        if self.estimand == Estimand::CounterfactualDoubleTrend && self.mediator == MediatorKind::Continuous {
            return bad("the double-trend counterfactual requires a discrete mediator");
        }
        Ok(())
    }
}

/// Nuisance learner settings for the regularization path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaGrid {
    /// Log-spaced from the smallest penalty that zeroes every coefficient
    /// down to `min_ratio` times that value.
    Auto { points: usize, min_ratio: f64 },
    /// Explicit penalties on the standardized-feature scale.
    Fixed(Vec<f64>),
}

impl Default for LambdaGrid {
    fn default() -> Self {
        LambdaGrid::Auto { points: 100, min_ratio: 1e-4 }
    }
}

/// Runtime execution strategy for fold fits and Monte Carlo replications.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Execution {
    #[default]
    Parallel,
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationConfig {
    pub n_folds: usize,
    pub trim_threshold: f64,
    pub seed: u64,
    pub lambda_grid: LambdaGrid,
    pub cv_folds_nuisance: usize,
    pub confidence_level: f64,
    /// Runtime strategy; omitted from serialized configurations.
    #[serde(default, skip_serializing)]
    pub execution: Execution,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            n_folds: 4,
            trim_threshold: 0.05,
            seed: 0,
            lambda_grid: LambdaGrid::default(),
            cv_folds_nuisance: 5,
            confidence_level: 0.95,
            execution: Execution::Parallel,
        }
    }
}

impl EstimationConfig {
    pub fn check(&self) -> Result<(), EstimationError> {
        let bad = |msg: &str| Err(EstimationError::InvalidConfig(msg.to_string()));
        if self.n_folds < 2 {
            return bad("n_folds must be at least 2");
        }
        if !(0.0..0.5).contains(&self.trim_threshold) {
            return bad("trim_threshold must lie in [0, 0.5)");
        }
        if self.cv_folds_nuisance < 2 {
            return bad("cv_folds_nuisance must be at least 2");
        }
        if !(self.confidence_level > 0.0 && self.confidence_level < 1.0) {
            return bad("confidence_level must lie in (0, 1)");
        }
        match &self.lambda_grid {
            LambdaGrid::Auto { points, min_ratio } => {
                if *points == 0 || !(*min_ratio > 0.0 && *min_ratio < 1.0) {
                    return bad("automatic lambda grid needs points >= 1 and min_ratio in (0, 1)");
                }
            }
            LambdaGrid::Fixed(grid) => {
                if grid.is_empty() || grid.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
                    return bad("fixed lambda grid must be non-empty and nonnegative");
                }
            }
        }
        Ok(())
    }
}

/// Role of a cell in the score: the leading (target) group or an
/// inverse-propensity weighted group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellRole {
    Lead,
    InverseWeighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellCount {
    pub d: f64,
    pub m: Option<f64>,
    pub t: Option<u8>,
    pub role: CellRole,
    /// Number of observations in the cell (rows with positive kernel weight
    /// when the treatment is smoothed).
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellCensus {
    pub cells: Vec<CellCount>,
}

impl CellCensus {
    pub fn first_empty(&self) -> Option<&CellCount> {
        self.cells.iter().find(|c| c.count == 0)
    }
}

/// The cells whose observations a contrast's score averages over, as
/// (d, m, t, role) tuples.
pub fn required_cells(c: &ContrastSpec) -> Vec<(f64, Option<f64>, Option<u8>, CellRole)> {
    use CellRole::*;
    let (m, mp) = if c.needs_mediator_values() { (c.m, c.m_prime) } else { (None, None) };
    match c.design {
        Design::RepeatedCrossSection => vec![
            (c.d, m, Some(1), Lead),
            (c.d, m, Some(0), InverseWeighted),
            (c.d_prime, mp, Some(1), InverseWeighted),
            (c.d_prime, mp, Some(0), InverseWeighted),
        ],
        Design::Panel => vec![(c.d, m, None, Lead), (c.d_prime, mp, None, InverseWeighted)],
    }
}

/// Counts the observations in every cell the contrast's score needs.
pub fn cell_census(ds: &Dataset, c: &ContrastSpec) -> CellCensus {
    let cells = required_cells(c)
        .into_iter()
        .map(|(d, m, t, role)| {
            let count = (0..ds.n())
                .filter(|&i| {
                    let d_ok = match &c.treatment_kernel {
                        Some(k) => k.weight(ds.d()[i], d) > 0.0,
                        None => ds.d()[i] == d,
                    };
                    d_ok && m.is_none_or(|m| ds.m()[i] == m)
                        && match (t, ds.t()) {
                            (Some(t), Some(ts)) => ts[i] == t,
                            _ => true,
                        }
                })
                .count();
            CellCount { d, m, t, role, count }
        })
        .collect();
    CellCensus { cells }
}

/// Validates a contrast against a dataset and returns its cell census.
pub fn validate_contrast(ds: &Dataset, c: &ContrastSpec) -> Result<CellCensus, EstimationError> {
    c.check()?;
    if ds.design() != c.design {
        return Err(EstimationError::InvalidContrast(format!(
            "contrast design {:?} does not match dataset design {:?}",
            c.design,
            ds.design()
        )));
    }
    if c.estimand == Estimand::CounterfactualDoubleTrend && c.design == Design::Panel && ds.m0().is_none() {
        return Err(EstimationError::InvalidContrast(
            "the double-trend counterfactual requires the pre-period mediator m0".into(),
        ));
    }
    let census = cell_census(ds, c);
    if let Some(cell) = census.first_empty() {
        return Err(EstimationError::EmptyRequiredCell { d: cell.d, m: cell.m, t: cell.t });
    }
    Ok(census)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FeatureMatrix;

    fn eight_cells(skip_000: bool) -> Dataset {
        let mut y = vec![];
        let mut d = vec![];
        let mut m = vec![];
        let mut t = vec![];
        for dv in 0..2 {
            for mv in 0..2 {
                for tv in 0..2u8 {
                    if skip_000 && dv == 0 && mv == 0 && tv == 0 {
                        continue;
                    }
                    for _ in 0..3 {
                        y.push(1.0);
                        d.push(dv as f64);
                        m.push(mv as f64);
                        t.push(tv);
                    }
                }
            }
        }
        let n = y.len();
        Dataset::cross_section(y, d, m, t, FeatureMatrix::zeros(n, 1)).unwrap()
    }

    #[test]
    fn census_of_full_binary_table() {
        let ds = eight_cells(false);
        let c = ContrastSpec::atet_joint(Design::RepeatedCrossSection, 1.0, 1.0, 0.0, 0.0);
        let census = validate_contrast(&ds, &c).unwrap();
        assert_eq!(census.cells.len(), 4);
        assert!(census.cells.iter().all(|c| c.count == 3));
    }

    #[test]
    fn empty_control_cell_is_reported() {
        let ds = eight_cells(true);
        let c = ContrastSpec::atet_joint(Design::RepeatedCrossSection, 1.0, 1.0, 0.0, 0.0);
        let err = validate_contrast(&ds, &c).unwrap_err();
        assert_eq!(err, EstimationError::EmptyRequiredCell { d: 0.0, m: Some(0.0), t: Some(0) });
    }

    #[test]
    fn census_is_pure() {
        let ds = eight_cells(false);
        let c = ContrastSpec::natural_decomposition(Design::RepeatedCrossSection, 1.0, 0.0);
        assert_eq!(cell_census(&ds, &c), cell_census(&ds, &c));
    }

    #[test]
    fn joint_contrast_needs_mediator_values() {
        let mut c = ContrastSpec::atet_joint(Design::Panel, 1.0, 1.0, 0.0, 0.0);
        c.m_prime = None;
        assert!(matches!(c.check(), Err(EstimationError::InvalidContrast(_))));
    }

    #[test]
    fn panel_double_trend_needs_pre_mediator() {
        let n = 12;
        let d: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let m: Vec<f64> = (0..n).map(|i| ((i / 2) % 2) as f64).collect();
        let ds = Dataset::panel(vec![0.0; n], vec![1.0; n], d, m, FeatureMatrix::zeros(n, 1)).unwrap();
        let c = ContrastSpec::treatment(Design::Panel, Estimand::CounterfactualDoubleTrend, 1.0, 0.0);
        assert!(matches!(validate_contrast(&ds, &c), Err(EstimationError::InvalidContrast(_))));
        let m0 = ds.m().iter().map(|&v| Some(v)).collect();
        let ds = ds.with_pre_mediator(m0).unwrap();
        assert!(validate_contrast(&ds, &c).is_ok());
    }

    #[test]
    fn kernel_densities() {
        let g = KernelSpec::new(KernelKind::Gaussian, 0.5);
        assert!((g.weight(1.0, 1.0) - 1.0 / (0.5 * (2.0 * std::f64::consts::PI).sqrt())).abs() < 1e-15);
        let e = KernelSpec::new(KernelKind::Epanechnikov, 0.5);
        assert_eq!(e.weight(1.5, 1.0), 0.0);
        assert_eq!(e.weight(0.2, 1.0), 0.0);
    }

    #[test]
    fn config_defaults_validate() {
        let cfg = EstimationConfig::default();
        assert_eq!(cfg.n_folds, 4);
        assert_eq!(cfg.trim_threshold, 0.05);
        cfg.check().unwrap();
        let bad = EstimationConfig { trim_threshold: 0.5, ..cfg };
        assert!(bad.check().is_err());
    }
}
