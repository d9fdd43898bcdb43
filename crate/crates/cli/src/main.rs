use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use plasthom::cell::{whom, CellProblemConfig};
use plasthom::finsler::{finsler_length, geodesic, group_interp, DiscretePath, InterpMode};
use plasthom::gamma::{convergence_table, ExperimentConfig};
use plasthom::gluing::{run_gluecheck, GlueCheckConfig};
use plasthom::io::{config_hash, write_json, RunManifest};
use plasthom::materials::{validate_assumptions, MaterialModel};
use plasthom::tensor::DetPolicy;
use plasthom::{Error, Mat3, SL3Element};
use rand::SeedableRng;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "plasthom", version, about = "Homogenized energies of periodic elastoplastic composites")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct GlobalArgs {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Overrides the seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Path interpolation: geodesic-exact or group-exp.
    #[arg(long, global = true)]
    mode: Option<InterpMode>,
}

#[derive(Subcommand)]
enum Command {
    /// Homogenized elastic density W_hom(F, G) on a ladder of cells.
    Whom {
        /// F as 9 comma-separated reals, row-major.
        #[arg(long, allow_hyphen_values = true)]
        f: String,
        /// G as 9 comma-separated reals; retracted onto SL(3).
        #[arg(long, allow_hyphen_values = true)]
        g: String,
    },
    /// Shortest path between two points of SL(3).
    Geodesic {
        #[arg(long, allow_hyphen_values = true)]
        f0: String,
        #[arg(long, allow_hyphen_values = true)]
        f1: String,
        /// Number of segments.
        #[arg(long, default_value_t = 16)]
        n: usize,
    },
    /// Randomized checks of the gluing energy estimate.
    Gluecheck,
    /// Minimum values of F_eps along the eps ladder against the homogenized problem.
    Gamma,
    /// Monte-Carlo check of the growth, continuity and K assumptions.
    Validate {
        #[arg(long, default_value_t = 2000)]
        samples: usize,
    },
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_numerical() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

type CmdResult = Result<u8, Failure>;

struct Run {
    global: GlobalArgs,
    manifest: RunManifest,
}

impl Run {
    fn config_text(&mut self) -> Result<String, Failure> {
        let path = self.global.config.clone().ok_or_else(|| Failure {
            code: 1,
            message: "missing --config".into(),
        })?;
        let text = std::fs::read_to_string(&path).map_err(|e| Failure {
            code: 1,
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        self.manifest.config_hash = Some(config_hash(&text).map_err(|e| Failure {
            code: 1,
            message: format!("{}: {e}", path.display()),
        })?);
        self.manifest.input_paths.push(path);
        Ok(text)
    }

    fn section<T: serde::de::DeserializeOwned + Default>(&mut self, text: &str, key: &str) -> Result<T, Failure> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(Error::from)?;
        match value.get(key) {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| Failure {
                code: 1,
                message: format!("section {key:?}: {e}"),
            }),
            None => Ok(T::default()),
        }
    }

    fn model(&mut self, text: &str) -> Result<MaterialModel, Failure> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(Error::from)?;
        let model = value.get("model").ok_or_else(|| Failure {
            code: 1,
            message: "configuration has no \"model\" section".into(),
        })?;
        let model: MaterialModel = serde_json::from_value(model.clone()).map_err(|e| Failure {
            code: 1,
            message: format!("section \"model\": {e}"),
        })?;
        model.validate()?;
        Ok(model)
    }

    fn output(&mut self, name: &str) -> PathBuf {
        let p = self.global.out.join(name);
        self.manifest.output_paths.push(p.clone());
        p
    }

    fn write<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), Failure> {
        let p = self.output(name);
        write_json(p, value)?;
        Ok(())
    }
}

fn parse_matrix(s: &str, name: &str) -> Result<Mat3, Failure> {
    let vals: Vec<f64> = s
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| Failure {
            code: 1,
            message: format!("{name}: {e}"),
        })?;
    if vals.len() != 9 {
        return Err(Failure {
            code: 1,
            message: format!("{name}: expected 9 comma-separated reals, got {}", vals.len()),
        });
    }
    Ok(Mat3::from_row_slice(&vals)?)
}

fn parse_sl3(s: &str, name: &str) -> Result<SL3Element, Failure> {
    let m = parse_matrix(s, name)?;
    SL3Element::new(m, DetPolicy::Retract).map_err(|e| Failure {
        code: 1,
        message: format!("{name}: {e}"),
    })
}

fn cmd_whom(run: &mut Run, f: &str, g: &str) -> CmdResult {
    let text = run.config_text()?;
    let model = run.model(&text)?;
    let cfg: CellProblemConfig = run.section(&text, "cell")?;
    cfg.validate()?;
    let f = parse_matrix(f, "F")?;
    let g = parse_sl3(g, "G")?;
    let result = whom(&model, &f, &g, &cfg)?;
    run.write("whom.json", &result)?;
    let csv = run.output("whom.csv");
    if csv.exists() {
        std::fs::remove_file(&csv)?;
    }
    result.append_csv(&csv)?;
    println!("W_hom = {:.12e} (spread {:.3e})", result.value, result.spread);
    if let Err(e) = result.ensure_converged() {
        eprintln!("error: {e}");
        return Ok(2);
    }
    Ok(0)
}

#[derive(Serialize)]
struct GeodesicReport {
    mode: InterpMode,
    segments: usize,
    length: f64,
    converged: bool,
    iterations: usize,
    max_det_drift: f64,
    nodes: Vec<Vec<f64>>,
}

fn cmd_geodesic(run: &mut Run, f0: &str, f1: &str, n: usize) -> CmdResult {
    let norm = match run.global.config.clone() {
        Some(_) => {
            let text = run.config_text()?;
            run.model(&text)?.norm
        }
        None => Default::default(),
    };
    let f0 = parse_sl3(f0, "F0")?;
    let f1 = parse_sl3(f1, "F1")?;
    let mode = run.global.mode.unwrap_or(InterpMode::GeodesicExact);
    let (path, converged, iterations) = match mode {
        InterpMode::GeodesicExact => {
            let r = geodesic(&norm, &f0, &f1, n)?;
            (r.path, r.converged, r.iterations)
        }
        InterpMode::GroupExp => {
            let nodes = (0..=n)
                .map(|k| group_interp(k as f64 / n as f64, &f0, &f1))
                .collect::<Result<Vec<_>, _>>()?;
            (DiscretePath::new(nodes)?, true, 0)
        }
    };
    let length = finsler_length(&norm, &path)?;
    let report = GeodesicReport {
        mode,
        segments: path.segments(),
        length,
        converged,
        iterations,
        max_det_drift: path.max_det_drift(),
        nodes: path.nodes().iter().map(|p| p.value().to_row_vec()).collect(),
    };
    run.write("geodesic.json", &report)?;
    let mut w = csv::Writer::from_path(run.output("geodesic.csv")).map_err(Error::from)?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=3).flat_map(|i| (1..=3).map(move |j| format!("P{i}{j}"))));
    w.write_record(&header).map_err(Error::from)?;
    for (k, node) in report.nodes.iter().enumerate() {
        let mut rec = vec![format!("{:e}", k as f64 / report.segments as f64)];
        rec.extend(node.iter().map(|v| format!("{v:e}")));
        w.write_record(&rec).map_err(Error::from)?;
    }
    w.flush()?;
    println!("length = {length:.12e}");
    Ok(if converged { 0 } else { 2 })
}

fn cmd_gluecheck(run: &mut Run) -> CmdResult {
    let text = run.config_text()?;
    let model = run.model(&text)?;
    let mut cfg: GlueCheckConfig = run.section(&text, "gluecheck")?;
    if let Some(s) = run.global.seed {
        cfg.seed = s;
    }
    if let Some(m) = run.global.mode {
        cfg.mode = m;
    }
    run.manifest.seeds.push(cfg.seed);
    let trials = run_gluecheck(&model, &cfg)?;
    run.write("gluecheck.json", &trials)?;
    let mut w = csv::Writer::from_path(run.output("gluecheck.csv")).map_err(Error::from)?;
    w.write_record([
        "trial", "sigma", "difference", "lhs", "rhs", "satisfied", "pigeonhole_ok", "layer", "n_layers", "n_proof",
    ])
    .map_err(Error::from)?;
    for t in &trials {
        let r = &t.report;
        w.write_record([
            t.trial.to_string(),
            format!("{:e}", r.sigma),
            format!("{:e}", t.difference),
            format!("{:e}", r.lhs.total),
            format!("{:e}", r.rhs),
            r.satisfied.to_string(),
            r.pigeonhole_ok.to_string(),
            r.layer.to_string(),
            r.n_layers.to_string(),
            r.n_proof.to_string(),
        ])
        .map_err(Error::from)?;
    }
    w.flush()?;
    let failed = trials.iter().filter(|t| !(t.report.satisfied && t.report.pigeonhole_ok)).count();
    println!("{} of {} checks satisfied", trials.len() - failed, trials.len());
    if failed > 0 {
        eprintln!("error: {failed} checks violate the estimate or the layer selection");
        return Ok(2);
    }
    Ok(0)
}

fn cmd_gamma(run: &mut Run) -> CmdResult {
    let text = run.config_text()?;
    let mut cfg = ExperimentConfig::from_json_str(&text)?;
    if let Some(s) = run.global.seed {
        cfg.seed = s;
    }
    run.manifest.seeds.push(cfg.seed);
    let report = convergence_table(&cfg)?;
    run.write("convergence.json", &report)?;
    report.write_csv(run.output("convergence.csv"))?;
    report.write_gap_csv(run.output("gaps.csv"))?;
    for r in &report.rows {
        println!("eps = {:<8} min F_eps = {:.8e} gap = {:.3e}", r.eps, r.min_f_eps, r.gap);
    }
    println!("min F_hom = {:.8e}", report.min_f_hom);
    if report.rows.iter().any(|r| !r.converged) || !report.hom_converged {
        eprintln!("error: some minimizations did not converge");
        return Ok(2);
    }
    Ok(0)
}

#[derive(Serialize)]
struct ValidateOutput {
    passed: bool,
    report: Option<plasthom::materials::ValidationReport>,
    error: Option<String>,
}

fn cmd_validate(run: &mut Run, samples: usize) -> CmdResult {
    let text = run.config_text()?;
    let model = run.model(&text)?;
    let seed = run.global.seed.unwrap_or(0);
    run.manifest.seeds.push(seed);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    match validate_assumptions(&model, samples, &mut rng) {
        Ok(report) => {
            println!(
                "observed c1 = {:.6}, c2 = {:.6}, c3 = {:.6}, H Lipschitz = {:.6}",
                report.observed_c1, report.observed_c2, report.observed_c3, report.observed_h_lipschitz
            );
            run.write("validation.json", &ValidateOutput { passed: true, report: Some(report), error: None })?;
            Ok(0)
        }
        Err(e) => {
            run.write(
                "validation.json",
                &ValidateOutput { passed: false, report: None, error: Some(e.to_string()) },
            )?;
            Err(e.into())
        }
    }
}

fn execute(run: &mut Run, command: &Command) -> CmdResult {
    std::fs::create_dir_all(&run.global.out)?;
    match command {
        Command::Whom { f, g } => cmd_whom(run, f, g),
        Command::Geodesic { f0, f1, n } => cmd_geodesic(run, f0, f1, *n),
        Command::Gluecheck => cmd_gluecheck(run),
        Command::Gamma => cmd_gamma(run),
        Command::Validate { samples } => cmd_validate(run, *samples),
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Whom { .. } => "whom",
        Command::Geodesic { .. } => "geodesic",
        Command::Gluecheck => "gluecheck",
        Command::Gamma => "gamma",
        Command::Validate { .. } => "validate",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PLASTHOM_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Some(j) = cli.global.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global() {
            eprintln!("error: cannot size the thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let mut run = Run {
        manifest: RunManifest::new(command_name(&cli.command)),
        global: cli.global.clone(),
    };
    let code = match execute(&mut run, &cli.command) {
        Ok(c) => c,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    };
    run.manifest.exit_code = code as i32;
    if Path::new(&run.global.out).is_dir() {
        if let Err(e) = run.manifest.write(&run.global.out) {
            eprintln!("error: cannot write manifest: {e}");
        }
    }
    ExitCode::from(code)
}
