//! `sqfam`: batch front end for squared family models.
//!
//! Exit status is 0 on success, 1 on usage errors (bad flags, malformed or
//! unreadable inputs) and 2 on numerical failures.

mod io;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use sqfam::estimation::{
    experiment_approximation, experiment_asymptotic_normality, experiment_misspecified_rate, fit_mle, ApproxConfig,
    FamilySpec, FitConfig, MisspecConfig, NormalityConfig,
};
use sqfam::experiments::{run_suite, AcceptanceConfig, Suite};
use sqfam::geometry::{
    divergence_chain_slacks, divergence_grid, fisher_augmented, fisher_g_family, fisher_squared,
    reverse_pinsker_bound, smooth_density, Divergence, FisherMatrix, ReversePinsker,
};
use sqfam::gfamily::{GFamilyModel, GSpec};
use sqfam::kernel::{compute_kernel, SquaredKernel};
use sqfam::measure::IntegrationScheme;
use sqfam::model::{ModelBundle, SquaredFamilyModel};
use sqfam::sampling::{inverse_cdf_sample_1d, rejection_sample, DEFAULT_CDF_NODES, DEFAULT_SAFETY};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Numerical(#[from] sqfam::Error),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Usage(format!("{}: {e}", path.display()))
    }

    fn exit_code(&self) -> u8 {
        use sqfam::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Numerical(
                E::DimensionMismatch { .. }
                | E::InvalidArgument(_)
                | E::QuadratureDimension(_)
                | E::EntryBudget { .. }
                | E::NotFactorizable(_)
                | E::OutOfGrid(_),
            ) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "sqfam", version, about = "Squared family density models")]
struct Cli {
    /// Worker threads for parallel sections; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ModelArgs {
    /// Model file: features, measure, optional kernel, theta or theta_matrix, optional g.
    #[arg(long)]
    model: PathBuf,
    /// Kernel file from `sqfam kernel`; overrides any kernel in the model file.
    #[arg(long)]
    kernel: Option<PathBuf>,
    /// Integration scheme, `quad:<nodes>` or `mc:<samples>[:<seed>]`.
    #[arg(long, default_value = "quad:64", value_parser = parse_scheme)]
    scheme: IntegrationScheme,
}

fn parse_scheme(s: &str) -> Result<IntegrationScheme, String> {
    s.parse().map_err(|e: sqfam::Error| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Compute the kernel K = int psi psi^T dmu of a model's features.
    Kernel {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Augmented maximum likelihood fit to data.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        /// Fit configuration; defaults apply to omitted keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the density at each row of a CSV file.
    Density {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Divergences between two models on a shared base measure.
    Divergence {
        #[arg(long)]
        p: PathBuf,
        #[arg(long)]
        q: PathBuf,
        #[arg(long, default_value = "quad:256", value_parser = parse_scheme)]
        scheme: IntegrationScheme,
        /// Also report the reverse Pinsker bound for KL(q:p_eps), p smoothed with weight eps.
        #[arg(long)]
        smoothing: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fisher information matrix.
    Fisher {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_enum, default_value_t = FisherKind::Augmented)]
        variant: FisherKind,
        /// Standard deviation of the augmentation coordinate.
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw samples to CSV.
    Sample {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Method::Rejection)]
        method: Method,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulation experiments and acceptance suites.
    Simulate {
        #[command(subcommand)]
        which: Simulation,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FisherKind {
    /// 4K/z - grad z grad z^T / z^2, singular along theta.
    Singular,
    /// Singular form plus the augmentation term.
    Augmented,
    /// g-family form using the model's `g`; augmented unless --sigma is 0.
    G,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Rejection,
    InverseCdf,
}

#[derive(Subcommand)]
enum Simulation {
    Normality {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Misspec {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Approx {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One acceptance suite with the pinned tolerances.
    Suite {
        name: String,
        /// Defaults to the pinned acceptance seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_bundle(args: &ModelArgs) -> CliResult<ModelBundle> {
    let mut bundle: ModelBundle = io::read_json(&args.model)?;
    if let Some(k) = &args.kernel {
        bundle.kernel = Some(io::read_json::<SquaredKernel>(k)?);
    }
    Ok(bundle)
}

fn load_model(args: &ModelArgs) -> CliResult<SquaredFamilyModel> {
    Ok(load_bundle(args)?.into_model(&args.scheme)?)
}

fn family_of(bundle: ModelBundle, scheme: &IntegrationScheme) -> CliResult<FamilySpec> {
    Ok(match bundle.kernel {
        Some(k) => FamilySpec::from_parts(bundle.features, bundle.measure, k)?,
        None => FamilySpec::new(bundle.features, bundle.measure, scheme)?,
    })
}

/// Density of a bundle: squared family, or g-family when `g` is not `a^2`.
enum Density {
    Squared(SquaredFamilyModel),
    G(GFamilyModel),
}

impl Density {
    fn load(args: &ModelArgs) -> CliResult<Self> {
        let bundle = load_bundle(args)?;
        match bundle.g {
            Some(g) if g != (GSpec::Monomial { k: 2 }) => {
                let theta = bundle
                    .theta
                    .ok_or_else(|| CliError::Usage("g-family models need `theta`".into()))?;
                Ok(Density::G(GFamilyModel::new(
                    g,
                    bundle.features,
                    bundle.measure,
                    theta.into(),
                    &args.scheme,
                )?))
            }
            _ => Ok(Density::Squared(bundle.into_model(&args.scheme)?)),
        }
    }

    fn eval(&self, x: &[f64]) -> CliResult<f64> {
        Ok(match self {
            Density::Squared(m) => m.density(x)?,
            Density::G(m) => m.density(x)?,
        })
    }

    fn input_dim(&self) -> usize {
        match self {
            Density::Squared(m) => m.features().input_dim(),
            Density::G(m) => m.features.input_dim(),
        }
    }
}

#[derive(Serialize)]
struct FisherOut {
    variant: sqfam::geometry::FisherVariant,
    matrix: Vec<Vec<f64>>,
    min_eigenvalue: f64,
    norm2: f64,
}

impl From<FisherMatrix> for FisherOut {
    fn from(f: FisherMatrix) -> Self {
        let n = f.matrix.nrows();
        FisherOut {
            min_eigenvalue: f.min_eigenvalue(),
            norm2: f.norm2(),
            matrix: (0..n).map(|i| (0..n).map(|j| f.matrix[(i, j)]).collect()).collect(),
            variant: f.variant,
        }
    }
}

#[derive(Serialize)]
struct DivergenceOut {
    kl_pq: f64,
    kl_qp: f64,
    tv: f64,
    sh: f64,
    /// `TV - SH`, `sqrt(2 SH) - TV`, `sqrt(KL(p:q)) - sqrt(2 SH)`.
    chain_slacks: [f64; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    reverse_pinsker: Option<ReversePinskerOut>,
}

#[derive(Serialize)]
struct ReversePinskerOut {
    smoothing: f64,
    r0: f64,
    tv: f64,
    kl: f64,
    bound: f64,
    holds: bool,
}

impl ReversePinskerOut {
    fn new(smoothing: f64, r: ReversePinsker) -> Self {
        ReversePinskerOut {
            smoothing,
            holds: r.holds(),
            r0: r.r0,
            tv: r.tv,
            kl: r.kl,
            bound: r.bound,
        }
    }
}

fn divergence(p: &Path, q: &Path, scheme: &IntegrationScheme, smoothing: Option<f64>) -> CliResult<DivergenceOut> {
    let load = |path: &Path| {
        Density::load(&ModelArgs {
            model: path.to_path_buf(),
            kernel: None,
            scheme: *scheme,
        })
    };
    let (dp, dq) = (load(p)?, load(q)?);
    let measure = match (&dp, &dq) {
        (Density::Squared(a), Density::Squared(b)) if a.measure() == b.measure() => a.measure().clone(),
        (Density::Squared(a), Density::G(b)) if *a.measure() == b.measure => a.measure().clone(),
        (Density::G(a), Density::Squared(b)) if a.measure == *b.measure() => a.measure.clone(),
        (Density::G(a), Density::G(b)) if a.measure == b.measure => a.measure.clone(),
        _ => return Err(CliError::Usage("p and q must share a base measure".into())),
    };
    let rule = measure.cubature(scheme)?;
    let tab = |d: &Density| rule.points().map(|x| d.eval(x)).collect::<CliResult<Vec<f64>>>();
    let (vp, vq) = (tab(&dp)?, tab(&dq)?);
    let w = rule.weights();
    let reverse_pinsker = match smoothing {
        Some(eps) => {
            let ps = smooth_density(&vp, eps, measure.total_mass());
            Some(ReversePinskerOut::new(eps, reverse_pinsker_bound(&ps, &vq, w)?))
        }
        None => None,
    };
    Ok(DivergenceOut {
        kl_pq: divergence_grid(&vp, &vq, w, Divergence::Kl)?,
        kl_qp: divergence_grid(&vq, &vp, w, Divergence::Kl)?,
        tv: divergence_grid(&vp, &vq, w, Divergence::Tv)?,
        sh: divergence_grid(&vp, &vq, w, Divergence::Sh)?,
        chain_slacks: divergence_chain_slacks(&vp, &vq, w)?,
        reverse_pinsker,
    })
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Kernel { model, out } => {
            let b = load_bundle(&model)?;
            let k = compute_kernel(&b.features, &b.measure, &model.scheme)?;
            let (ok, min) = k.psd_check(k.default_tolerance());
            if !ok {
                eprintln!("warning: kernel has eigenvalue {min:e} below tolerance");
            }
            io::write_json(&k, out.as_deref())
        }
        Command::Fit {
            data,
            model,
            config,
            out,
        } => {
            let family = family_of(load_bundle(&model)?, &model.scheme)?;
            let cfg: FitConfig = match config {
                Some(p) => io::read_json(&p)?,
                None => FitConfig::default(),
            };
            cfg.validate()?;
            let x = io::read_csv(&data)?;
            let res = fit_mle(&x, &family, &cfg)?;
            if !res.converged {
                eprintln!(
                    "warning: stopped after {} iterations with projected gradient {:e}",
                    res.iterations, res.grad_norm
                );
            }
            io::write_json(&res, out.as_deref())
        }
        Command::Density { model, data, out } => {
            let d = Density::load(&model)?;
            let x = io::read_csv(&data)?;
            let dim = d.input_dim();
            let rows = x
                .into_iter()
                .map(|mut r| {
                    if r.len() != dim {
                        return Err(CliError::Usage(format!("data rows need {dim} columns, got {}", r.len())));
                    }
                    let v = d.eval(&r)?;
                    r.push(v);
                    Ok(r)
                })
                .collect::<CliResult<Vec<_>>>()?;
            let mut header: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
            header.push("density".into());
            io::write_csv(&header, &rows, out.as_deref())
        }
        Command::Divergence {
            p,
            q,
            scheme,
            smoothing,
            out,
        } => io::write_json(&divergence(&p, &q, &scheme, smoothing)?, out.as_deref()),
        Command::Fisher {
            model,
            variant,
            sigma,
            out,
        } => {
            let f = match variant {
                FisherKind::Singular => fisher_squared(&load_model(&model)?)?,
                FisherKind::Augmented => fisher_augmented(&load_model(&model)?, sigma)?,
                FisherKind::G => {
                    let b = load_bundle(&model)?;
                    let g = b.g.unwrap_or(GSpec::Monomial { k: 2 });
                    let theta = b
                        .theta
                        .ok_or_else(|| CliError::Usage("g-family Fisher needs `theta`".into()))?;
                    let sigma = (sigma > 0.0).then_some(sigma);
                    fisher_g_family(&g, &b.features, &b.measure, &theta.into(), &model.scheme, sigma)?
                }
            };
            io::write_json(&FisherOut::from(f), out.as_deref())
        }
        Command::Sample {
            model,
            count,
            seed,
            method,
            out,
        } => {
            let m = load_model(&model)?;
            let rows: Vec<Vec<f64>> = match method {
                Method::Rejection => {
                    let r = rejection_sample(&m, count, seed, DEFAULT_SAFETY)?;
                    if r.envelope_violation {
                        eprintln!("warning: rejection envelope was exceeded; samples may be biased");
                    }
                    r.samples
                }
                Method::InverseCdf => inverse_cdf_sample_1d(&m, count, seed, DEFAULT_CDF_NODES)?
                    .into_iter()
                    .map(|x| vec![x])
                    .collect(),
            };
            let header: Vec<String> = (0..m.features().input_dim()).map(|i| format!("x{i}")).collect();
            io::write_csv(&header, &rows, out.as_deref())
        }
        Command::Simulate { which } => match which {
            Simulation::Normality { config, out } => {
                let c: NormalityConfig = io::read_json(&config)?;
                io::write_json(&experiment_asymptotic_normality(&c)?, out.as_deref())
            }
            Simulation::Misspec { config, out } => {
                let c: MisspecConfig = io::read_json(&config)?;
                io::write_json(&experiment_misspecified_rate(&c)?, out.as_deref())
            }
            Simulation::Approx { config, out } => {
                let c: ApproxConfig = io::read_json(&config)?;
                io::write_json(&experiment_approximation(&c)?, out.as_deref())
            }
            Simulation::Suite { name, seed, out } => {
                let suite: Suite = name.parse().map_err(|e: sqfam::Error| CliError::Usage(e.to_string()))?;
                let seed = seed.unwrap_or_else(|| AcceptanceConfig::pinned().seed);
                let report = run_suite(suite, seed)?;
                eprintln!("{} {}: {}", if report.passed { "PASS" } else { "FAIL" }, suite, report.summary());
                io::write_json(&report, out.as_deref())
            }
        },
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
