use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use surface_change::calibration::{calibrate_stage, fit_plane, fit_sphere_matrix, Baseline, CalibrationOptions};
use surface_change::decision::{decide, DecisionConfig, DecisionRecord, Overall, DEFAULT_ALPHA};
use surface_change::io::{load_report, load_stage, report_to_string, save_stage, StageRecord};
use surface_change::permutation::{PermutationConfig, DEFAULT_PERMUTATIONS, DEFAULT_SEED};
use surface_change::roughness::{
    build_stage_sample, compute_sa, median, QuantileGrid, DEFAULT_GRID_SIZE, DEFAULT_S_MAX, DEFAULT_TAU,
};
use surface_change::simulation::{type2_table, SimConfig, SimResult, DEFAULT_SIM_PERMUTATIONS};
use surface_change::stats::{student_t_isf, MeanStatistic};

const EXIT_DETECTED: u8 = 0;
const EXIT_MARGINAL: u8 = 10;
const EXIT_NONE: u8 = 20;
const EXIT_ERROR: u8 = 101;
const EXIT_USAGE: u8 = 102;

/// Detect surface-quality change between polishing stages.
///
/// `decide` and `report` exit with 0 when improvement is detected, 10 when
/// it is marginal, 20 when there is none, and above 100 on errors.
#[derive(Parser, Debug)]
#[command(name = "surface-change", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Level every location of a stage and write the residual heights.
    Calibrate {
        stage: PathBuf,
        #[command(flatten)]
        level: LevelArgs,
        /// Output directory for the calibrated stage.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the Sa of every location and the stage median.
    Sa {
        #[arg(required = true)]
        stages: Vec<PathBuf>,
        #[command(flatten)]
        level: LevelArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print grid-evaluated bearing area curves as columns for plotting.
    Bac {
        stage: PathBuf,
        #[command(flatten)]
        level: LevelArgs,
        #[command(flatten)]
        grid: GridArgs,
        /// Confidence level of the pointwise mean bands.
        #[arg(long, default_value_t = 0.967)]
        confidence: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare two consecutive stages and write a decision report.
    Decide {
        prev: PathBuf,
        curr: PathBuf,
        #[command(flatten)]
        level: LevelArgs,
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        test: TestArgs,
        /// Overall significance level shared by the three families.
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
        /// Count a marginal outcome as a reason to keep polishing (default).
        #[arg(long, overrides_with = "strict")]
        marginal_continues: bool,
        /// Treat a marginal outcome like no improvement.
        #[arg(long, overrides_with = "marginal_continues")]
        strict: bool,
        /// The current tool is already the finest available.
        #[arg(long)]
        finest_tool: bool,
        /// Report path; the report is printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate type II errors of the tail tests on simulated curves.
    Simulate {
        /// Curves per group; repeat for a table.
        #[arg(long = "n", default_values_t = [9usize])]
        n: Vec<usize>,
        #[arg(long, default_value_t = 1000)]
        runs: usize,
        #[arg(long, default_value_t = 0.25)]
        tau: f64,
        /// Per-test rejection level.
        #[arg(long, default_value_t = 0.03)]
        alpha: f64,
        #[arg(long, default_value_t = DEFAULT_SIM_PERMUTATIONS)]
        permutations: usize,
        /// Integer seed or "random".
        #[arg(long, default_value = "7")]
        seed: String,
        #[arg(long, default_value_t = 100)]
        input_points: usize,
        /// Multiplier on the perturbation; 0 simulates the null.
        #[arg(long, default_value_t = 1.0)]
        delta_scale: f64,
        #[arg(long, conflicts_with = "pooled")]
        welch: bool,
        #[arg(long)]
        pooled: bool,
        /// JSON output path for the table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a saved decision report; exits with its decision code.
    Report { path: PathBuf },
}

#[derive(Args, Debug)]
struct LevelArgs {
    /// Remove a least-squares plane instead of a sphere.
    #[arg(long)]
    flat: bool,
}

impl LevelArgs {
    fn options(&self) -> CalibrationOptions {
        CalibrationOptions {
            baseline: if self.flat { Baseline::Plane } else { Baseline::Sphere },
        }
    }
}

#[derive(Args, Debug)]
struct GridArgs {
    /// Tail fraction for the peak and valley domains.
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    #[arg(long, default_value_t = DEFAULT_GRID_SIZE)]
    grid_size: usize,
    /// Deepest quantile on the grid.
    #[arg(long, default_value_t = DEFAULT_S_MAX)]
    s_max: f64,
}

impl GridArgs {
    fn grid(&self) -> anyhow::Result<QuantileGrid> {
        Ok(QuantileGrid::uniform(self.grid_size, self.s_max, self.tau)?)
    }
}

#[derive(Args, Debug)]
struct TestArgs {
    #[arg(long, default_value_t = DEFAULT_PERMUTATIONS)]
    permutations: usize,
    /// Integer seed or "random".
    #[arg(long, default_value_t = DEFAULT_SEED.to_string())]
    seed: String,
    /// Enumerate all relabelings instead of sampling.
    #[arg(long)]
    exhaustive: bool,
    /// Welch mean statistic (default).
    #[arg(long, conflicts_with = "pooled")]
    welch: bool,
    /// Pooled-variance mean statistic.
    #[arg(long)]
    pooled: bool,
}

fn parse_seed(raw: &str) -> anyhow::Result<u64> {
    if raw.eq_ignore_ascii_case("random") {
        return Ok(rand::random());
    }
    raw.parse().with_context(|| format!("seed must be an integer or \"random\", got {raw:?}"))
}

fn mean_statistic(pooled: bool) -> MeanStatistic {
    if pooled {
        MeanStatistic::Pooled
    } else {
        MeanStatistic::Welch
    }
}

fn load_levelled(path: &Path, level: &LevelArgs) -> anyhow::Result<StageRecord> {
    let rec = load_stage(path, None)?;
    Ok(calibrate_stage(&rec, &level.options())?)
}

fn emit(text: &str, out: Option<&Path>) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn overall_code(o: Overall) -> u8 {
    match o {
        Overall::ImprovementDetected => EXIT_DETECTED,
        Overall::ImprovementMarginal => EXIT_MARGINAL,
        Overall::NoImprovement => EXIT_NONE,
    }
}

fn cmd_calibrate(stage: &Path, level: &LevelArgs, out: &Path) -> anyhow::Result<u8> {
    let rec = load_stage(stage, None)?;
    for m in &rec.locations {
        match level.options().baseline {
            Baseline::Sphere => {
                let f = fit_sphere_matrix(m)?;
                eprintln!(
                    "{}: center ({:.4}, {:.4}, {:.4}) radius {:.4} rms {:.3e}",
                    m.location_id, f.center[0], f.center[1], f.center[2], f.radius, f.rms_residual
                );
            }
            Baseline::Plane => {
                let p = fit_plane(m)?;
                eprintln!(
                    "{}: plane {:.6} + {:.3e} X + {:.3e} Y",
                    m.location_id, p.intercept, p.slope_x, p.slope_y
                );
            }
        }
    }
    let levelled = calibrate_stage(&rec, &level.options())?;
    save_stage(&levelled, out)?;
    Ok(0)
}

fn cmd_sa(stages: &[PathBuf], level: &LevelArgs, out: Option<&Path>) -> anyhow::Result<u8> {
    let mut text = String::from("stage\tlocation\tsa\n");
    for path in stages {
        let rec = load_levelled(path, level)?;
        let sas = rec.locations.iter().map(compute_sa).collect::<Result<Vec<_>, _>>()?;
        for (m, sa) in rec.locations.iter().zip(&sas) {
            writeln!(text, "{}\t{}\t{sa:.6e}", rec.stage_label, m.location_id)?;
        }
        let med = median(&sas).context("stage has no locations")?;
        writeln!(text, "{}\tmedian\t{med:.6e}", rec.stage_label)?;
    }
    emit(&text, out)?;
    Ok(0)
}

fn cmd_bac(stage: &Path, level: &LevelArgs, grid: &GridArgs, confidence: f64, out: Option<&Path>) -> anyhow::Result<u8> {
    if !(confidence > 0.0 && confidence < 1.0) {
        bail!("confidence must lie in (0, 1), got {confidence}");
    }
    let rec = load_levelled(stage, level)?;
    let sample = build_stage_sample(&rec, &grid.grid()?)?;
    let j = sample.len() as f64;
    let t = student_t_isf((1.0 - confidence) / 2.0, j - 1.0)?;
    let mean = sample.mean_curve();
    let var = sample.variance_curve();
    let mut text = String::from("s\tmean\tvariance\tlower\tupper\n");
    for ((s, m), v) in sample.grid().points().iter().zip(&mean).zip(&var) {
        let half = t * (v / j).sqrt();
        writeln!(text, "{s:.6}\t{m:.9e}\t{v:.9e}\t{:.9e}\t{:.9e}", m - half, m + half)?;
    }
    emit(&text, out)?;
    Ok(0)
}

fn summary(rec: &DecisionRecord) -> String {
    let mut s = format!("{} -> {}\n", rec.stages.prev, rec.stages.curr);
    for (name, f) in [
        ("upper tail", &rec.families.upper_tail),
        ("lower tail", &rec.families.lower_tail),
        ("variance", &rec.families.variance),
    ] {
        let _ = writeln!(s, "  {name:<11} {:>5}  p = {:<9}  {:?}", f.statistic_kind.name(), f.corrected_p, f.verdict);
    }
    let _ = writeln!(s, "  overall: {:?}\n  recommendation: {:?}", rec.overall, rec.recommendation);
    s
}

struct DecideArgs<'a> {
    prev: &'a Path,
    curr: &'a Path,
    level: &'a LevelArgs,
    grid: &'a GridArgs,
    test: &'a TestArgs,
    alpha: f64,
    strict: bool,
    finest_tool: bool,
    out: Option<&'a Path>,
}

fn cmd_decide(a: DecideArgs) -> anyhow::Result<u8> {
    let cfg = DecisionConfig {
        alpha: a.alpha,
        perm: PermutationConfig {
            n_permutations: a.test.permutations,
            seed: parse_seed(&a.test.seed)?,
            exhaustive: a.test.exhaustive,
        },
        grid: a.grid.grid()?,
        mean_statistic: mean_statistic(a.test.pooled),
        marginal_continues: !a.strict,
        finest_tool: a.finest_tool,
    };
    cfg.validate()?;
    let prev = load_levelled(a.prev, a.level)?;
    let curr = load_levelled(a.curr, a.level)?;
    let ps = build_stage_sample(&prev, &cfg.grid)?;
    let cs = build_stage_sample(&curr, &cfg.grid)?;
    let rec = decide(&ps, &cs, &prev.stage_label, &curr.stage_label, &cfg)?;
    let json = report_to_string(&rec);
    match a.out {
        Some(p) => {
            fs::write(p, &json).with_context(|| format!("writing {}", p.display()))?;
            print!("{}", summary(&rec));
        }
        None => print!("{json}"),
    }
    Ok(overall_code(rec.overall))
}

#[derive(Serialize)]
struct SimulationReport<'a> {
    config: &'a SimConfig,
    results: &'a [SimResult],
    tool: surface_change::decision::ToolInfo,
}

fn cmd_simulate(cfg: SimConfig, sizes: &[usize], out: Option<&Path>) -> anyhow::Result<u8> {
    let rows = type2_table(&cfg, sizes)?;
    println!("{:>4}  {:>11}  {:>11}  {:>7}  {:>5}", "N", "type2_upper", "type2_lower", "L2%", "runs");
    for r in &rows {
        println!(
            "{:>4}  {:>11.3}  {:>11.3}  {:>7.3}  {:>5}",
            r.n_curves_per_group, r.type2_upper, r.type2_lower, r.avg_l2_pct, r.runs_used
        );
    }
    if let Some(p) = out {
        let report = SimulationReport {
            config: &cfg,
            results: &rows,
            tool: Default::default(),
        };
        let json = serde_json::to_string_pretty(&report)? + "\n";
        fs::write(p, json).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(0)
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Calibrate { stage, level, out } => cmd_calibrate(&stage, &level, &out),
        Command::Sa { stages, level, out } => cmd_sa(&stages, &level, out.as_deref()),
        Command::Bac {
            stage,
            level,
            grid,
            confidence,
            out,
        } => cmd_bac(&stage, &level, &grid, confidence, out.as_deref()),
        Command::Decide {
            prev,
            curr,
            level,
            grid,
            test,
            alpha,
            marginal_continues: _,
            strict,
            finest_tool,
            out,
        } => cmd_decide(DecideArgs {
            prev: &prev,
            curr: &curr,
            level: &level,
            grid: &grid,
            test: &test,
            alpha,
            strict,
            finest_tool,
            out: out.as_deref(),
        }),
        Command::Simulate {
            n,
            runs,
            tau,
            alpha,
            permutations,
            seed,
            input_points,
            delta_scale,
            welch: _,
            pooled,
            out,
        } => {
            let seed = parse_seed(&seed)?;
            let cfg = SimConfig {
                n_input_points: input_points,
                alpha,
                tau,
                runs,
                delta_scale,
                mean_statistic: mean_statistic(pooled),
                perm: PermutationConfig::sampled(permutations, seed),
                seed,
                ..Default::default()
            };
            cmd_simulate(cfg, &n, out.as_deref())
        }
        Command::Report { path } => {
            let rec = load_report(&path)?;
            print!("{}", summary(&rec));
            Ok(overall_code(rec.overall))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
