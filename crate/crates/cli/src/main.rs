//! `didmed` command-line tool: doubly robust difference-in-differences
//! mediation estimates from CSV files, and the Monte Carlo harness.

mod report;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use didmed::contrast::{ContrastSpec, Estimand, EstimationConfig, Execution, KernelKind, KernelSpec, MediatorKind};
use didmed::data::{load_dataset, write_dataset, Dataset, Design, Schema};
use didmed::error::{DataError, EstimationError};
use didmed::estimators::estimate;
use didmed::simulation::{generate, run_monte_carlo, DgpKind, DgpSpec};

use report::{CliError, EstimateReport};

#[derive(Debug, Parser)]
#[command(name = "didmed", version, about = "Doubly robust DiD estimation of direct and indirect effects")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate one effect family on a CSV dataset.
    Estimate(EstimateArgs),
    /// Run Monte Carlo replications of a simulation design.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DesignArg {
    /// Repeated cross-sections with a period column.
    Rcs,
    /// Two-period panel (wide or long form).
    Panel,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EstimandArg {
    AtetJoint,
    Ate,
    NaturalDecomposition,
    CounterfactualDMd,
    CounterfactualDprimeMdprime,
    CounterfactualDoubleTrend,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KernelArg {
    Epanechnikov,
    Gaussian,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MediatorArg {
    Discrete,
    Continuous,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DgpArg {
    RcsContinuous,
    RcsBinary,
    PanelContinuous,
    PanelBinary,
}

#[derive(Debug, Args)]
struct EngineArgs {
    /// Number of cross-fitting folds.
    #[arg(long, default_value_t = 4)]
    folds: usize,
    /// Propensity trimming threshold.
    #[arg(long, default_value_t = 0.05)]
    trim: f64,
    /// Seed for fold assignment and learner cross-validation.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Confidence level of the reported intervals.
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Folds used to choose the lasso penalty of each nuisance learner.
    #[arg(long, default_value_t = 5)]
    cv_folds: usize,
    /// Worker threads; 0 uses every available core and 1 runs sequentially.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Write the JSON report here instead of standard output.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

impl EngineArgs {
    fn config(&self, seed: u64) -> EstimationConfig {
        EstimationConfig {
            n_folds: self.folds,
            trim_threshold: self.trim,
            seed,
            cv_folds_nuisance: self.cv_folds,
            confidence_level: self.level,
            execution: if self.workers == 1 { Execution::Sequential } else { Execution::Parallel },
            ..EstimationConfig::default()
        }
    }
}

#[derive(Debug, Args)]
struct EstimateArgs {
    /// Input CSV file with a header row.
    #[arg(long, short)]
    input: PathBuf,
    #[arg(long, value_enum)]
    design: DesignArg,
    #[arg(long, value_enum)]
    estimand: EstimandArg,
    /// Treatment value d of the target group.
    #[arg(long = "d", default_value_t = 1.0)]
    d: f64,
    /// Comparison treatment value d'.
    #[arg(long = "d-prime", default_value_t = 0.0)]
    d_prime: f64,
    /// Mediator value m (joint contrasts only).
    #[arg(long = "m")]
    m: Option<f64>,
    /// Comparison mediator value m' (joint contrasts only).
    #[arg(long = "m-prime")]
    m_prime: Option<f64>,
    /// Kernel replacing treatment indicators for a continuous treatment.
    #[arg(long, value_enum, requires = "bandwidth")]
    kernel: Option<KernelArg>,
    /// Kernel bandwidth.
    #[arg(long, requires = "kernel")]
    bandwidth: Option<f64>,
    /// How the mediator enters mediator-conditioned nuisances.
    #[arg(long, value_enum, default_value = "discrete")]
    mediator: MediatorArg,
    #[command(flatten)]
    columns: ColumnArgs,
    #[command(flatten)]
    engine: EngineArgs,
}

/// Column-name mapping for the input file.
#[derive(Debug, Args)]
struct ColumnArgs {
    /// Outcome column (repeated cross-sections and long panels).
    #[arg(long, default_value = "y")]
    y_col: String,
    #[arg(long, default_value = "d")]
    d_col: String,
    #[arg(long, default_value = "m")]
    m_col: String,
    /// Period column holding 0 (pre) or 1 (post).
    #[arg(long, default_value = "t")]
    t_col: String,
    /// Covariates are all columns whose name starts with this prefix.
    #[arg(long, default_value = "x")]
    x_prefix: String,
    /// Unit identifier column (panels).
    #[arg(long)]
    unit_col: Option<String>,
    /// Pre-period mediator column.
    #[arg(long)]
    m0_col: Option<String>,
    /// Pre-period outcome column of a wide panel.
    #[arg(long)]
    y_pre_col: Option<String>,
    /// Post-period outcome column of a wide panel.
    #[arg(long)]
    y_post_col: Option<String>,
}

impl ColumnArgs {
    fn schema(&self, design: Design) -> Schema {
        let base = match design {
            Design::Panel => Schema::panel_wide(),
            Design::RepeatedCrossSection => Schema::default(),
        };
        Schema {
            y: self.y_col.clone(),
            d: self.d_col.clone(),
            m: self.m_col.clone(),
            t: self.t_col.clone(),
            x_prefix: self.x_prefix.clone(),
            unit_id: self.unit_col.clone().or(base.unit_id),
            m0: self.m0_col.clone().or(base.m0),
            y_pre: self.y_pre_col.clone().or(base.y_pre),
            y_post: self.y_post_col.clone().or(base.y_post),
        }
    }
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    dgp: DgpArg,
    /// Observations per replication.
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// Number of covariates.
    #[arg(long, default_value_t = 100)]
    p: usize,
    /// Number of replications.
    #[arg(long, default_value_t = 200)]
    reps: usize,
    /// Also write replication 0 as CSV; `estimate` with the same --seed
    /// reproduces that replication's estimates.
    #[arg(long)]
    emit_data: Option<PathBuf>,
    /// Include wall-clock runtime in the report.
    #[arg(long)]
    timing: bool,
    #[command(flatten)]
    engine: EngineArgs,
}

fn design_of(d: DesignArg) -> Design {
    match d {
        DesignArg::Rcs => Design::RepeatedCrossSection,
        DesignArg::Panel => Design::Panel,
    }
}

fn contrast_of(a: &EstimateArgs) -> ContrastSpec {
    let design = design_of(a.design);
    let estimand = match a.estimand {
        EstimandArg::AtetJoint => Estimand::AtetJoint,
        EstimandArg::Ate => Estimand::Ate,
        EstimandArg::NaturalDecomposition => Estimand::NaturalDecomposition,
        EstimandArg::CounterfactualDMd => Estimand::CounterfactualDMd,
        EstimandArg::CounterfactualDprimeMdprime => Estimand::CounterfactualDprimeMdprime,
        EstimandArg::CounterfactualDoubleTrend => Estimand::CounterfactualDoubleTrend,
    };
    let mut c = ContrastSpec::treatment(design, estimand, a.d, a.d_prime);
    c.m = a.m;
    c.m_prime = a.m_prime;
    c.mediator = match a.mediator {
        MediatorArg::Discrete => MediatorKind::Discrete,
        MediatorArg::Continuous => MediatorKind::Continuous,
    };
    if let (Some(k), Some(h)) = (a.kernel, a.bandwidth) {
        let kind = match k {
            KernelArg::Epanechnikov => KernelKind::Epanechnikov,
            KernelArg::Gaussian => KernelKind::Gaussian,
        };
        c = c.with_kernel(KernelSpec::new(kind, h));
    }
    c
}

fn dgp_of(d: DgpArg) -> DgpKind {
    match d {
        DgpArg::RcsContinuous => DgpKind::RcsContinuousMediator,
        DgpArg::RcsBinary => DgpKind::RcsBinaryMediator,
        DgpArg::PanelContinuous => DgpKind::PanelContinuousMediator,
        DgpArg::PanelBinary => DgpKind::PanelBinaryMediator,
    }
}

fn configure_workers(workers: usize) -> Result<(), CliError> {
    if workers > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| CliError::usage(format!("cannot start {workers} workers: {e}")))?;
    }
    Ok(())
}

fn read_input(path: &Path, schema: &Schema, design: Design) -> Result<Dataset, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, &e))?;
    load_dataset(BufReader::new(file), schema, design).map_err(CliError::from)
}

fn emit(value: &serde_json::Value, output: Option<&Path>) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    match output {
        Some(path) => {
            let mut f = File::create(path).map_err(|e| CliError::io(path, &e))?;
            writeln!(f, "{text}").map_err(|e| CliError::io(path, &e))
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn cmd_estimate(a: &EstimateArgs) -> Result<(), CliError> {
    let cfg = a.engine.config(a.engine.seed);
    cfg.check().map_err(CliError::usage_from)?;
    let contrast = contrast_of(a);
    contrast.check().map_err(CliError::usage_from)?;
    configure_workers(a.engine.workers)?;
    let design = design_of(a.design);
    let ds = read_input(&a.input, &a.columns.schema(design), design)?;
    let est = estimate(&ds, &contrast, &cfg).map_err(CliError::from)?;
    let report = EstimateReport::new(&a.input, &contrast, &cfg, &est);
    emit(&serde_json::to_value(&report).expect("report serializes"), a.engine.output.as_deref())
}

fn cmd_simulate(a: &SimulateArgs) -> Result<(), CliError> {
    if a.reps == 0 {
        return Err(CliError::usage("--reps must be at least 1".into()));
    }
    if a.n < 2 || a.p == 0 {
        return Err(CliError::usage("--n must be at least 2 and --p at least 1".into()));
    }
    let cfg = a.engine.config(a.engine.seed);
    cfg.check().map_err(CliError::usage_from)?;
    configure_workers(a.engine.workers)?;
    let kind = dgp_of(a.dgp);
    let spec = DgpSpec::new(kind, a.n, a.engine.seed).with_p(a.p);
    if let Some(path) = &a.emit_data {
        let ds = generate(&spec);
        let f = File::create(path).map_err(|e| CliError::io(path, &e))?;
        let schema = match kind.design() {
            Design::Panel => Schema::panel_wide(),
            Design::RepeatedCrossSection => Schema::default(),
        };
        write_dataset(&ds, &schema, BufWriter::new(f)).map_err(CliError::from)?;
    }
    let mut report = run_monte_carlo(&spec, &kind.default_estimands(), &cfg, a.reps).map_err(CliError::from)?;
    if !a.timing {
        report.runtime_secs = None;
    }
    emit(&serde_json::to_value(&report).expect("report serializes"), a.engine.output.as_deref())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Estimate(a) => cmd_estimate(a),
        Command::Simulate(a) => cmd_simulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            println!("{}", serde_json::to_string_pretty(&e.to_json()).expect("error serializes"));
            ExitCode::from(e.exit_code())
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::data(e)
    }
}

impl From<EstimationError> for CliError {
    fn from(e: EstimationError) -> Self {
        match e {
            EstimationError::Data(d) => CliError::data(d),
            other => CliError::estimation(other),
        }
    }
}
