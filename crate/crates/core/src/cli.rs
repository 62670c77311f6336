//! Command-line front end: `simulate`, `estimate`, `mc` and `verify`.
//!
//! Exit codes are 0 on success, 1 on runtime or data failures and 2 on
//! usage errors.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::data::{FeatureMap, WeightKind};
use crate::error::{Error, Result};
use crate::estimator::{estimate_auto, EffectPair, EstimandConfig};
use crate::io::{load_csv, save_csv};
use crate::nuisance::fit::{ColumnPropensity, ConstantPropensity};
use crate::nuisance::{FitMode, HistoryFeatureSpec, Learner, NuisanceSpec, Propensity};
use crate::oracle::{
    random_dgps, route_agreement, theta_all, verify_estimator_on_dgp, DiscreteDgp,
    RandomDgpOptions, Route, AGREEMENT_TOL,
};
use crate::simulation::{
    gm1_generate, gm2_generate, run_experiment, write_metrics, ExperimentPlan,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "medexc",
    version,
    about = "Natural direct and indirect excursion effects"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a dataset from a simulation model.
    Simulate(SimulateArgs),
    /// Estimate direct and indirect excursion effects from a CSV file.
    Estimate(EstimateArgs),
    /// Run a Monte Carlo plan and write the metrics table.
    Mc(McArgs),
    /// Check identification on discrete models.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GeneratorArg {
    Gm1,
    Gm2,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long = "gm", value_enum)]
    pub generator: GeneratorArg,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EffectsArg {
    Primary,
    Swapped,
    Total,
}

impl From<EffectsArg> for EffectPair {
    fn from(e: EffectsArg) -> Self {
        match e {
            EffectsArg::Primary => EffectPair::Primary,
            EffectsArg::Swapped => EffectPair::Swapped,
            EffectsArg::Total => EffectPair::TotalOnly,
        }
    }
}

#[derive(Args, Debug)]
pub struct EstimateArgs {
    /// Long-format CSV with header `id,t,I,A,M,Y,X1,...`.
    #[arg(long)]
    pub data: PathBuf,
    /// JSON nuisance specification. When absent every model uses time, the
    /// current covariates, the mediator (for `q` and `μ`) and first lags.
    #[arg(long)]
    pub nuisance: Option<PathBuf>,
    /// `constant`, `linear`, `affine`, `poly:K` or `bspline:DF`.
    #[arg(long = "f", default_value = "constant", value_parser = parse_feature_map)]
    pub feature_map: FeatureMap,
    /// `uniform`, `point:T` or `custom:w1,w2,...`.
    #[arg(long, default_value = "uniform", value_parser = parse_weights)]
    pub omega: WeightKind,
    #[arg(long, value_enum, default_value = "primary")]
    pub effects: EffectsArg,
    /// Number of cross-fitting folds; 0 fits once on the full sample.
    #[arg(long, default_value_t = 0)]
    pub crossfit: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `const:P` or `column:J` (1-based covariate column).
    #[arg(long = "known-propensity", value_parser = parse_propensity)]
    pub known_propensity: Option<PropensityArg>,
    #[arg(long, default_value_t = 0.95)]
    pub confidence: f64,
    /// Output JSON path; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PropensityArg {
    Constant(f64),
    Column(usize),
}

#[derive(Args, Debug)]
pub struct McArgs {
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, env = "MEDEXC_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["dgp", "random"])))]
pub struct VerifyArgs {
    /// JSON discrete model.
    #[arg(long)]
    pub dgp: Option<PathBuf>,
    /// Number of random models to check.
    #[arg(long)]
    pub random: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also sample this many trajectories and compare the estimator with
    /// the oracle truths.
    #[arg(long, requires = "dgp")]
    pub sample: Option<usize>,
}

fn parse_feature_map(s: &str) -> std::result::Result<FeatureMap, String> {
    let (kind, arg) = s.split_once(':').map_or((s, None), |(k, a)| (k, Some(a)));
    let number = |a: Option<&str>| -> std::result::Result<usize, String> {
        a.ok_or_else(|| format!("`{kind}` needs a size, e.g. `{kind}:3`"))?
            .parse()
            .map_err(|e| format!("bad size in `{s}`: {e}"))
    };
    let fm = match kind {
        "constant" => FeatureMap::Constant,
        "linear" => FeatureMap::Linear,
        "affine" => FeatureMap::Affine,
        "poly" | "polynomial" => FeatureMap::Polynomial {
            degree: number(arg)?,
        },
        "bspline" => FeatureMap::Bspline { df: number(arg)? },
        _ => return Err(format!("unknown feature map `{s}`")),
    };
    Ok(fm)
}

fn parse_weights(s: &str) -> std::result::Result<WeightKind, String> {
    match s.split_once(':') {
        None if s == "uniform" => Ok(WeightKind::Uniform),
        Some(("point", t)) => t
            .parse()
            .map(WeightKind::PointMass)
            .map_err(|e| format!("bad decision point `{t}`: {e}")),
        Some(("custom", list)) => list
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|e| format!("bad weight `{v}`: {e}"))
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(WeightKind::Custom),
        _ => Err(format!("unknown weights `{s}`")),
    }
}

fn parse_propensity(s: &str) -> std::result::Result<PropensityArg, String> {
    match s.split_once(':') {
        Some(("const", v)) => {
            let p: f64 = v
                .parse()
                .map_err(|e| format!("bad probability `{v}`: {e}"))?;
            if p > 0.0 && p < 1.0 {
                Ok(PropensityArg::Constant(p))
            } else {
                Err(format!("propensity {p} must lie in (0, 1)"))
            }
        }
        Some(("column", j)) => match j.parse::<usize>() {
            Ok(j) if j >= 1 => Ok(PropensityArg::Column(j)),
            _ => Err(format!("bad column `{j}`; columns are 1-based")),
        },
        _ => Err(format!(
            "unknown propensity `{s}`; use `const:P` or `column:J`"
        )),
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            if code == 0 {
                let _ = write!(stdout, "{}", e.render());
                return EXIT_OK;
            }
            let _ = write!(stderr, "{}", e.render());
            return EXIT_USAGE;
        }
    };
    if let Some(problem) = usage_problem(&cli.command) {
        let _ = writeln!(stderr, "error: {problem}");
        return EXIT_USAGE;
    }
    let outcome = match cli.command {
        Command::Simulate(a) => cmd_simulate(&a, stdout),
        Command::Estimate(a) => cmd_estimate(&a, stdout),
        Command::Mc(a) => cmd_mc(&a, stdout),
        Command::Verify(a) => cmd_verify(&a, stdout),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            EXIT_FAILURE
        }
    }
}

/// Flag combinations clap cannot express.
fn usage_problem(command: &Command) -> Option<String> {
    match command {
        Command::Estimate(a) if a.crossfit == 1 => {
            Some("--crossfit must be 0 or at least 2".into())
        }
        Command::Estimate(a) if a.crossfit > 1 && a.seed.is_none() => {
            Some("--crossfit needs --seed".into())
        }
        Command::Estimate(a) if !(a.confidence > 0.0 && a.confidence < 1.0) => {
            Some("--confidence must lie in (0, 1)".into())
        }
        Command::Verify(a) if a.random.is_some() && a.seed.is_none() => {
            Some("--random needs --seed".into())
        }
        Command::Mc(McArgs {
            threads: Some(0), ..
        }) => Some("--threads must be positive".into()),
        _ => None,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

pub fn cmd_simulate(args: &SimulateArgs, stdout: &mut dyn Write) -> Result<i32> {
    let ds = match args.generator {
        GeneratorArg::Gm1 => gm1_generate(args.n, args.seed),
        GeneratorArg::Gm2 => gm2_generate(args.n, args.seed),
    };
    save_csv(&ds, &args.out)?;
    writeln!(
        stdout,
        "n={} T={} eligibility={:.4} out={}",
        ds.len(),
        ds.horizon(),
        ds.eligibility_rate(),
        args.out.display()
    )?;
    Ok(EXIT_OK)
}

pub fn cmd_estimate(args: &EstimateArgs, stdout: &mut dyn Write) -> Result<i32> {
    let seed = args.seed.unwrap_or(0);
    let ds = load_csv(&args.data)?;
    let spec = match &args.nuisance {
        Some(path) => NuisanceSpec::from_json(&fs::read_to_string(path)?)?,
        None => NuisanceSpec::shared(HistoryFeatureSpec::standard(
            ds.covariate_dim(),
            ds.horizon(),
        )),
    };
    let mode = match args.known_propensity {
        None => FitMode::Fitted,
        Some(p) => {
            let prop: Arc<dyn Propensity> = match p {
                PropensityArg::Constant(v) => Arc::new(ConstantPropensity(v)),
                PropensityArg::Column(j) => {
                    if ds.covariate_dim() < j {
                        return Err(Error::InvalidInput(format!(
                            "propensity column X{j} not present"
                        )));
                    }
                    Arc::new(ColumnPropensity(j))
                }
            };
            FitMode::KnownPropensity(prop)
        }
    };
    let config = EstimandConfig {
        feature_map: args.feature_map,
        weights: args.omega.clone(),
        effect_pair: args.effects.into(),
        folds: args.crossfit,
        level: args.confidence,
    };
    let learner = Learner::new(spec, mode);
    let result = estimate_auto(&ds, &learner, &config, seed)?;
    let json = serde_json::to_string_pretty(&result)?;
    match &args.out {
        Some(path) => {
            write_text(path, &json)?;
            for (name, (g, se)) in result
                .names
                .iter()
                .zip(result.gamma_hat.iter().zip(&result.se))
            {
                writeln!(stdout, "{name:>10} {g:>10.4} (se {se:.4})")?;
            }
        }
        None => writeln!(stdout, "{json}")?,
    }
    Ok(EXIT_OK)
}

pub fn cmd_mc(args: &McArgs, stdout: &mut dyn Write) -> Result<i32> {
    let plan: ExperimentPlan = serde_json::from_str(&fs::read_to_string(&args.plan)?)?;
    let run = || run_experiment(&plan);
    let rows = match args.threads {
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?
            .install(run)?,
        None => run()?,
    };
    let file = fs::File::create(&args.out)?;
    write_metrics(&rows, std::io::BufWriter::new(file))?;
    writeln!(
        stdout,
        "{} metric rows from {} cells -> {}",
        rows.len(),
        plan.cells.len(),
        args.out.display()
    )?;
    Ok(EXIT_OK)
}

pub fn cmd_verify(args: &VerifyArgs, stdout: &mut dyn Write) -> Result<i32> {
    if let Some(path) = &args.dgp {
        return verify_file(path, args, stdout);
    }
    let count = args.random.unwrap_or(0);
    let seed = args
        .seed
        .ok_or_else(|| Error::InvalidInput("--random needs --seed".into()))?;
    let dgps = random_dgps(count, seed, &RandomDgpOptions::default());
    let results: Vec<_> = dgps.par_iter().map(route_agreement).collect();
    let mut agree = 0;
    for (i, r) in results.iter().enumerate() {
        match r {
            Ok(a) if a.within(AGREEMENT_TOL) => agree += 1,
            Ok(a) => writeln!(
                stdout,
                "FAIL model {i}: definition/gformula {:.3e}, gformula/weighting {:.3e}",
                a.definition_gformula, a.gformula_weighting
            )?,
            Err(e) => writeln!(stdout, "FAIL model {i}: {e}")?,
        }
    }
    writeln!(stdout, "{agree}/{count} agree")?;
    Ok(if agree == count {
        EXIT_OK
    } else {
        EXIT_FAILURE
    })
}

fn verify_file(path: &Path, args: &VerifyArgs, stdout: &mut dyn Write) -> Result<i32> {
    let dgp = DiscreteDgp::from_json(&fs::read_to_string(path)?)?;
    let routes = Route::ALL.map(|r| theta_all(&dgp, r));
    let [d, g, w] = match routes {
        [Ok(d), Ok(g), Ok(w)] => [d, g, w],
        [d, g, w] => {
            for (route, r) in Route::ALL.iter().zip([d, g, w]) {
                if let Err(e) = r {
                    writeln!(stdout, "{route:?}: {e}")?;
                }
            }
            return Ok(EXIT_FAILURE);
        }
    };
    writeln!(
        stdout,
        "{:>3} {:>2} {:>14} {:>14} {:>14}  status",
        "t", "ab", "definition", "gformula", "weighting"
    )?;
    let mut all = true;
    for t in 0..dgp.horizon {
        for (a, b) in [(1, 1), (0, 0), (1, 0), (0, 1)] {
            let (x, y, z) = (d[t][a][b], g[t][a][b], w[t][a][b]);
            let ok = (x - y).abs() < AGREEMENT_TOL && (y - z).abs() < AGREEMENT_TOL;
            all &= ok;
            let status = if ok { "PASS" } else { "FAIL" };
            writeln!(
                stdout,
                "{:>3} {a}{b} {x:>14.10} {y:>14.10} {z:>14.10}  {status}",
                t + 1
            )?;
        }
    }
    if let Some(n) = args.sample {
        let seed = args.seed.unwrap_or(0);
        let report = verify_estimator_on_dgp(&dgp, n, seed, &EstimandConfig::default())?;
        for r in &report.rows {
            writeln!(
                stdout,
                "{:>10} estimate {:.4} truth {:.4} se {:.4} z {:+.2}",
                r.name, r.estimate, r.truth, r.se, r.z
            )?;
        }
    }
    Ok(if all { EXIT_OK } else { EXIT_FAILURE })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_map_and_weight_parsing() {
        assert_eq!(
            parse_feature_map("bspline:4").unwrap(),
            FeatureMap::Bspline { df: 4 }
        );
        assert_eq!(
            parse_feature_map("poly:2").unwrap(),
            FeatureMap::Polynomial { degree: 2 }
        );
        assert!(parse_feature_map("bspline").is_err());
        assert!(parse_feature_map("quadratic").is_err());
        assert_eq!(parse_weights("point:3").unwrap(), WeightKind::PointMass(3));
        assert_eq!(
            parse_weights("custom:1, 2").unwrap(),
            WeightKind::Custom(vec![1.0, 2.0])
        );
        assert!(parse_weights("pointy").is_err());
    }

    #[test]
    fn propensity_parsing() {
        assert_eq!(
            parse_propensity("const:0.5").unwrap(),
            PropensityArg::Constant(0.5)
        );
        assert_eq!(
            parse_propensity("column:2").unwrap(),
            PropensityArg::Column(2)
        );
        assert!(parse_propensity("const:1.5").is_err());
        assert!(parse_propensity("column:0").is_err());
    }

    #[test]
    fn usage_errors_exit_two() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run(
            [
                "medexc", "simulate", "--gm", "gm3", "--n", "5", "--seed", "1", "--out", "x.csv",
            ],
            &mut out,
            &mut err,
        );
        assert_eq!(code, EXIT_USAGE);
        assert!(String::from_utf8(err).unwrap().contains("gm3"));
        let code = run(
            ["medexc", "verify", "--random", "3"],
            &mut out,
            &mut Vec::new(),
        );
        assert_eq!(code, EXIT_USAGE);
    }

    #[test]
    fn verify_random_reports_agreement() {
        let mut out = Vec::new();
        let code = run(
            ["medexc", "verify", "--random", "5", "--seed", "3"],
            &mut out,
            &mut Vec::new(),
        );
        assert_eq!(code, EXIT_OK);
        assert!(String::from_utf8(out).unwrap().contains("5/5 agree"));
    }
}
