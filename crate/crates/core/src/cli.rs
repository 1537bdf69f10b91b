//! Command-line interface.
//!
//! Exit codes: 0 on success, 1 on usage or validation errors, 2 on runtime
//! failures. Training flags are generated from [`FIELDS`], so `--help` lists
//! exactly the keys a config file accepts.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};

use crate::data::{generate_synthetic, load_csv, split, Dataset, SyntheticSpec};
use crate::error::Error;
use crate::eval::{
    evaluate_excluding, export_ranking_strips, tradeoff_sweep, EvalProtocol, SweepData,
};
use crate::gradcheck;
use crate::model::{FactorizationScorer, ScoringModel};
use crate::optimizer::{train_new_model, TrainConfig, FIELDS};

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn seed_arg() -> Arg {
    Arg::new("seed")
        .long("seed")
        .value_name("INT")
        .help("seed for every stochastic component")
}

fn split_args(cmd: Command) -> Command {
    cmd.arg(
        Arg::new("data")
            .long("data")
            .value_name("CSV")
            .required(true)
            .help("dataset CSV (query_id,item_id,relevance,group)"),
    )
    .arg(
        Arg::new("fractions")
            .long("fractions")
            .value_name("TRAIN,VALID,TEST")
            .default_value("0.8,0.1,0.1")
            .help("per-query split fractions"),
    )
    .arg(
        Arg::new("split-seed")
            .long("split-seed")
            .value_name("INT")
            .default_value("0")
            .help("seed of the per-query split"),
    )
    .arg(
        Arg::new("no-split")
            .long("no-split")
            .action(ArgAction::SetTrue)
            .help("use the whole file for every role instead of splitting"),
    )
}

fn field_args(mut cmd: Command) -> Command {
    let defaults = TrainConfig::default();
    for f in FIELDS {
        let mut arg = Arg::new(f.name)
            .long(f.name)
            .value_name("VALUE")
            .help(format!("{} [default: {}]", f.help, defaults.get(f.name).expect("known field")));
        if f.name == "seed" {
            arg = arg.help("seed for initialization, sampling and evaluation [default: 0]");
        }
        cmd = cmd.arg(arg);
    }
    cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("key = value training config; flags override it"),
    )
}

fn eval_args(cmd: Command) -> Command {
    cmd.arg(
        Arg::new("k-list")
            .long("k-list")
            .value_name("K,...")
            .default_value("50,100,200")
            .help("evaluation cutoffs"),
    )
    .arg(
        Arg::new("relevant")
            .long("relevant")
            .value_name("N")
            .default_value("5")
            .help("relevant items sampled per query"),
    )
    .arg(
        Arg::new("irrelevant")
            .long("irrelevant")
            .value_name("N")
            .default_value("300")
            .help("unrated items sampled per query"),
    )
}

pub fn command() -> Command {
    Command::new("fairrank")
        .about("Learning to rank with top-K exposure fairness")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("strict-repro")
                .long("strict-repro")
                .global(true)
                .action(ArgAction::SetTrue)
                .help("require an explicit --seed for randomized subcommands"),
        )
        .subcommand(
            Command::new("gen-data")
                .about("generate a synthetic biased dataset")
                .arg(Arg::new("queries").long("queries").value_name("N").default_value("200"))
                .arg(Arg::new("items").long("items").value_name("N").default_value("305"))
                .arg(
                    Arg::new("minority")
                        .long("minority")
                        .value_name("FRACTION")
                        .default_value("0.3")
                        .help("fraction of each query's items in group A"),
                )
                .arg(
                    Arg::new("bias")
                        .long("bias")
                        .value_name("REAL")
                        .default_value("2.0")
                        .help("downward quality shift of group A"),
                )
                .arg(seed_arg())
                .arg(Arg::new("out").long("out").value_name("CSV").required(true)),
        )
        .subcommand(
            field_args(split_args(Command::new("train").about("train a model")))
                .arg(
                    Arg::new("out")
                        .long("out")
                        .value_name("DIR")
                        .default_value("run")
                        .help("output directory for checkpoints, trace and config"),
                ),
        )
        .subcommand(
            eval_args(split_args(
                Command::new("eval").about("evaluate a checkpoint on the test split"),
            ))
            .arg(Arg::new("model").long("model").value_name("CKPT").required(true))
            .arg(seed_arg())
            .arg(
                Arg::new("out")
                    .long("out")
                    .value_name("PREFIX")
                    .help("write <PREFIX>.csv and <PREFIX>.json"),
            ),
        )
        .subcommand(
            eval_args(field_args(split_args(
                Command::new("sweep").about("train over a grid of fairness weights C"),
            )))
            .arg(
                Arg::new("c-grid")
                    .long("c-grid")
                    .value_name("C,...")
                    .default_value("0,10,100,1000,10000"),
            )
            .arg(
                Arg::new("parallel")
                    .long("parallel")
                    .action(ArgAction::SetTrue)
                    .help("train the grid points on separate threads"),
            )
            .arg(
                Arg::new("out")
                    .long("out")
                    .value_name("PREFIX")
                    .default_value("tradeoff")
                    .help("write <PREFIX>.csv and <PREFIX>.json"),
            ),
        )
        .subcommand(
            split_args(Command::new("export-strips").about("export ranking strips of the most unfair queries"))
                .arg(Arg::new("model").long("model").value_name("CKPT").required(true))
                .arg(Arg::new("queries").long("queries").value_name("N").default_value("20"))
                .arg(
                    Arg::new("K")
                        .long("K")
                        .value_name("K")
                        .default_value("50")
                        .help("cutoff used to rank queries by disparity"),
                )
                .arg(seed_arg())
                .arg(
                    Arg::new("out")
                        .long("out")
                        .value_name("PREFIX")
                        .default_value("strips")
                        .help("write <PREFIX>.csv and <PREFIX>.ppm"),
                ),
        )
        .subcommand(
            Command::new("grad-check")
                .about("run the finite-difference gradient suites")
                .arg(seed_arg())
                .arg(
                    Arg::new("tolerance")
                        .long("tolerance")
                        .value_name("REAL")
                        .default_value("1e-3"),
                ),
        )
}

fn value<T: std::str::FromStr>(m: &ArgMatches, name: &str) -> CliResult<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match m.get_one::<String>(name) {
        None => Ok(None),
        Some(s) => s
            .parse()
            .map(Some)
            .map_err(|e| CliError::Usage(format!("--{name}: cannot parse `{s}`: {e}"))),
    }
}

fn required<T: std::str::FromStr>(m: &ArgMatches, name: &str) -> CliResult<T>
where
    T::Err: std::fmt::Display,
{
    value(m, name)?.ok_or_else(|| CliError::Usage(format!("--{name} is required")))
}

fn list<T: std::str::FromStr>(m: &ArgMatches, name: &str) -> CliResult<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let raw: String = required(m, name)?;
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|e| CliError::Usage(format!("--{name}: cannot parse `{s}`: {e}")))
        })
        .collect()
}

fn seed(m: &ArgMatches, strict: bool) -> CliResult<u64> {
    match value::<u64>(m, "seed")? {
        Some(s) => Ok(s),
        None if strict => Err(CliError::Usage("--strict-repro requires an explicit --seed".into())),
        None => Ok(0),
    }
}

fn build_config(m: &ArgMatches, strict: bool) -> CliResult<TrainConfig> {
    if strict && m.get_one::<String>("seed").is_none() {
        return Err(CliError::Usage("--strict-repro requires an explicit --seed".into()));
    }
    let mut cfg = match m.get_one::<String>("config") {
        Some(path) => TrainConfig::load(path).map_err(|e| CliError::Usage(e.to_string()))?,
        None => TrainConfig::default(),
    };
    for f in FIELDS {
        if let Some(v) = m.get_one::<String>(f.name) {
            cfg.set(f.name, v).map_err(|e| CliError::Usage(e.to_string()))?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Splits {
    train: Dataset,
    valid: Option<Dataset>,
    test: Dataset,
}

fn load_splits(m: &ArgMatches) -> CliResult<Splits> {
    let path: String = required(m, "data")?;
    let d = load_csv(&path)?;
    if m.get_flag("no-split") {
        return Ok(Splits {
            train: d.clone(),
            valid: None,
            test: d,
        });
    }
    let f: Vec<f64> = list(m, "fractions")?;
    if f.len() != 3 {
        return Err(CliError::Usage("--fractions needs three values".into()));
    }
    let s = split(&d, (f[0], f[1], f[2]), required(m, "split-seed")?)?;
    if s.warnings > 0 {
        eprintln!("warning: {} queries too small to split were kept in train", s.warnings);
    }
    Ok(Splits {
        train: s.train,
        valid: Some(s.valid),
        test: s.test,
    })
}

fn load_model(m: &ArgMatches, d: &Dataset) -> CliResult<FactorizationScorer> {
    let path: String = required(m, "model")?;
    let model = FactorizationScorer::load(&path)?;
    if model.num_queries() < d.query_slots() || model.num_items() < d.num_items() {
        return Err(CliError::Usage(format!(
            "checkpoint covers {} queries and {} items but the dataset needs {} and {}",
            model.num_queries(),
            model.num_items(),
            d.query_slots(),
            d.num_items()
        )));
    }
    Ok(model)
}

fn protocol(m: &ArgMatches, seed: u64) -> CliResult<EvalProtocol> {
    Ok(EvalProtocol {
        relevant_per_query: required(m, "relevant")?,
        irrelevant_per_query: required(m, "irrelevant")?,
        k_list: list(m, "k-list")?,
        seed,
    })
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: &[u8]) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn gen_data(m: &ArgMatches, strict: bool, out: &mut dyn Write) -> CliResult<()> {
    let spec = SyntheticSpec {
        num_queries: required(m, "queries")?,
        items_per_query: required(m, "items")?,
        minority_fraction: required(m, "minority")?,
        bias: required(m, "bias")?,
        seed: seed(m, strict)?,
    };
    let d = generate_synthetic(&spec)?;
    let path: String = required(m, "out")?;
    d.save_csv(&path)?;
    let _ = writeln!(
        out,
        "wrote {} queries, {} pairs to {path}",
        d.num_queries(),
        d.total_pairs()
    );
    Ok(())
}

fn train_cmd(m: &ArgMatches, strict: bool, out: &mut dyn Write) -> CliResult<()> {
    let cfg = build_config(m, strict)?;
    let s = load_splits(m)?;
    let dir = PathBuf::from(required::<String>(m, "out")?);
    create_dir(&dir)?;
    let outcome = train_new_model(&s.train, s.valid.as_ref(), &cfg)?;
    outcome.final_model.save(dir.join("model.ckpt"))?;
    outcome.best_model.save(dir.join("best.ckpt"))?;
    outcome.trace.save_csv(dir.join("trace.csv"))?;
    write_file(&dir.join("trace.meta.json"), outcome.trace.metadata_json().as_bytes())?;
    write_file(&dir.join("config.txt"), cfg.to_text().as_bytes())?;
    for r in &outcome.trace.records {
        let _ = writeln!(
            out,
            "step {:>7} epoch {:>4} |z| {:.3e} loss {:.5} valid ndcg@{} {:.4} mae {:.3e}",
            r.step, r.epoch, r.z_norm, r.train_loss, cfg.k, r.valid_ndcg, r.valid_mae
        );
    }
    let _ = writeln!(
        out,
        "wrote {} (best step {})",
        dir.display(),
        outcome.best_step
    );
    Ok(())
}

fn eval_cmd(m: &ArgMatches, strict: bool, out: &mut dyn Write) -> CliResult<()> {
    let s = load_splits(m)?;
    let model = load_model(m, &s.test)?;
    let proto = protocol(m, seed(m, strict)?)?;
    let mut exclude = Vec::new();
    if s.valid.is_some() {
        exclude.push(&s.train);
        exclude.extend(s.valid.as_ref());
    }
    let metrics = evaluate_excluding(&model, &s.test, &proto, &exclude)?;
    let _ = writeln!(out, "K,ndcg_mean,ndcg_std,mae,mse,ndcg_skipped,fairness_skipped");
    for k in &metrics {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            k.k, k.ndcg_mean, k.ndcg_std, k.mae, k.mse, k.ndcg_skipped, k.fairness_skipped
        );
    }
    if let Some(prefix) = m.get_one::<String>("out") {
        let report = crate::eval::TradeoffReport {
            rows: metrics
                .iter()
                .map(|k| crate::eval::TradeoffRow {
                    c: f64::NAN,
                    k: k.k,
                    ndcg_mean: k.ndcg_mean,
                    ndcg_std: k.ndcg_std,
                    mae: k.mae,
                    mse: k.mse,
                    ndcg_skipped: k.ndcg_skipped,
                    fairness_skipped: k.fairness_skipped,
                    status: "ok".into(),
                })
                .collect(),
        };
        report.save(prefix)?;
    }
    Ok(())
}

fn sweep_cmd(m: &ArgMatches, strict: bool, out: &mut dyn Write) -> CliResult<()> {
    let cfg = build_config(m, strict)?;
    let s = load_splits(m)?;
    let grid: Vec<f64> = list(m, "c-grid")?;
    let proto = protocol(m, cfg.seed)?;
    let sweep = tradeoff_sweep(
        SweepData {
            train: &s.train,
            valid: s.valid.as_ref(),
            test: &s.test,
        },
        &cfg,
        &grid,
        &proto,
        m.get_flag("parallel"),
    )?;
    let mut buf = Vec::new();
    sweep
        .report
        .write_csv(&mut buf)
        .expect("write to memory");
    let _ = out.write_all(&buf);
    sweep.report.save(required::<String>(m, "out")?)?;
    Ok(())
}

fn strips_cmd(m: &ArgMatches, strict: bool, out: &mut dyn Write) -> CliResult<()> {
    // The seed only matters for reproducibility bookkeeping here.
    seed(m, strict)?;
    let s = load_splits(m)?;
    let model = load_model(m, &s.test)?;
    let strips = export_ranking_strips(
        &model,
        &s.test,
        required(m, "queries")?,
        required(m, "K")?,
        required::<String>(m, "out")?,
    )?;
    let _ = writeln!(out, "exported {} ranking strips", strips.rows.len());
    Ok(())
}

fn grad_check_cmd(m: &ArgMatches, strict: bool, out: &mut dyn Write) -> CliResult<()> {
    let seed = seed(m, strict)?;
    let tol: f64 = required(m, "tolerance")?;
    let suites = gradcheck::run_all(seed)?;
    let mut worst = 0.0f64;
    for s in &suites {
        let _ = writeln!(out, "{:<14} max relative error {:.3e}", s.suite, s.max_error());
        worst = worst.max(s.max_error());
    }
    if worst > tol {
        return Err(CliError::Runtime(format!(
            "gradient check failed: {worst:.3e} exceeds {tol:.1e}"
        )));
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the subcommand,
/// writing normal output to `out` and diagnostics to `err`.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    let strict = matches.get_flag("strict-repro");
    let result = match matches.subcommand() {
        Some(("gen-data", m)) => gen_data(m, strict, out),
        Some(("train", m)) => train_cmd(m, strict, out),
        Some(("eval", m)) => eval_cmd(m, strict, out),
        Some(("sweep", m)) => sweep_cmd(m, strict, out),
        Some(("export-strips", m)) => strips_cmd(m, strict, out),
        Some(("grad-check", m)) => grad_check_cmd(m, strict, out),
        _ => Err(CliError::Usage("unknown subcommand".into())),
    };
    match result {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            let name = matches.subcommand_name().unwrap_or_default();
            let usage = command()
                .find_subcommand_mut(name)
                .map(|c| c.render_usage().to_string())
                .unwrap_or_default();
            let _ = writeln!(err, "error: {msg}\n\n{usage}\n\nFor more information, try '--help'.");
            1
        }
        Err(e @ CliError::Runtime(_)) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(args, &mut std::io::stdout(), &mut std::io::stderr())
}
