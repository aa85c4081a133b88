use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use kkt_core::attack::{reconstruct, AttackConfig, InitGeometry};
use kkt_core::forge::{self, SplitPlan, WeightedSet};
use kkt_core::formats::{self, AttackReport, CertificateFile};
use kkt_core::kkt::{certify, certify_points, fit_multipliers, margin_value};
use kkt_core::lab::{self, ExperimentConfig};
use kkt_core::trainer::{train_to_kkt, LossKind, LrSchedule, TrainConfig};
use kkt_core::{KktLossWeights, Multipliers, NetworkParams};

#[derive(Debug, Parser)]
#[command(name = "kktlab", version, about = "Train, certify, attack and forge KKT sets of 2-layer ReLU networks")]
struct Cli {
    /// Seed for data generation, training and the attack; overrides config files.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory that relative output paths are resolved against.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Print nothing on success.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a labeled dataset on the unit sphere.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        d: usize,
        #[arg(long, default_value = "data.csv")]
        out: PathBuf,
    },
    /// Train a network by full-batch gradient descent.
    Train(TrainArgs),
    /// Fit multipliers and write an (ε, δ)-KKT certificate.
    Certify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Margin value to certify against; measured from the network if omitted.
        #[arg(long)]
        p: Option<f64>,
        #[arg(long, default_value = "cert.json")]
        out: PathBuf,
    },
    /// Reconstruct training points from a trained network.
    Attack(AttackArgs),
    /// Build alternative KKT sets.
    Forge {
        #[command(subcommand)]
        op: ForgeOp,
    },
    /// Attack one trained network from spheres of several radii.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.5,1,2,4")]
        radii: Vec<f64>,
        /// JSON with optional "train" and "attack" sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "sweep")]
        name: String,
    },
    /// Compare attacks on a network before and after the bias-shift defense.
    Defend {
        #[arg(long)]
        data: PathBuf,
        /// Shift every coordinate by this amount.
        #[arg(long, conflicts_with = "u_file")]
        shift: Option<f64>,
        /// Shift vector, comma or whitespace separated.
        #[arg(long)]
        u_file: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "defense")]
        name: String,
    },
    /// Re-emit the CSV table and SVG plot of a saved report.
    Report {
        #[arg(long)]
        report: PathBuf,
        /// Check the report's model hash against this file.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Check the report's data hash against this file.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        name: Option<String>,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    schedule: Option<ScheduleArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    target_loss: Option<f64>,
    #[arg(long)]
    init_scale: Option<f64>,
    #[arg(long, default_value = "model.json")]
    out: PathBuf,
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LossArg {
    Logistic,
    Exponential,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScheduleArg {
    Constant,
    LossNormalized,
}

#[derive(Debug, Args)]
struct AttackArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    m: Option<usize>,
    /// sphere:<r> or box:<lo>,<hi>
    #[arg(long)]
    init: Option<InitGeometry>,
    #[arg(long)]
    gamma1: Option<f64>,
    #[arg(long)]
    gamma2: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    /// Training data, for nearest-neighbor metrics.
    #[arg(long)]
    true_data: Option<PathBuf>,
    #[arg(long, default_value_t = lab::DEFAULT_TOP_K)]
    topk: usize,
    #[arg(long, default_value = "recon.csv")]
    out: PathBuf,
    #[arg(long, default_value = "attack.json")]
    report: PathBuf,
}

#[derive(Debug, Args)]
struct ForgeInputs {
    #[arg(long)]
    model: PathBuf,
    /// Set CSV; without a lambda column the certificate multipliers are used.
    #[arg(long)]
    set: PathBuf,
    /// Certificate for the model and set; checked by hash.
    #[arg(long)]
    cert: PathBuf,
}

#[derive(Debug, Subcommand)]
enum ForgeOp {
    /// Merge two points with equal label and activation pattern.
    Merge {
        #[command(flatten)]
        inputs: ForgeInputs,
        #[arg(long)]
        index: usize,
        #[arg(long)]
        with: usize,
        #[arg(long, default_value = "newset.csv")]
        out: PathBuf,
    },
    /// Split one point along ν.
    Split {
        #[command(flatten)]
        inputs: ForgeInputs,
        #[arg(long)]
        index: usize,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        beta: f64,
        /// Unit direction; the smallest singular direction of the set if omitted.
        #[arg(long)]
        nu_file: Option<PathBuf>,
        #[arg(long, default_value = "newset.csv")]
        out: PathBuf,
        #[arg(long, default_value = "split.json")]
        report: PathBuf,
    },
    /// Split every point along a direction orthogonal to the set.
    Distant {
        #[command(flatten)]
        inputs: ForgeInputs,
        #[arg(long)]
        radius: f64,
        #[arg(long, default_value = "newset.csv")]
        out: PathBuf,
    },
    /// Certified splitting budgets for one point.
    Budget {
        #[command(flatten)]
        inputs: ForgeInputs,
        #[arg(long)]
        index: usize,
        #[arg(long)]
        nu_file: Option<PathBuf>,
        /// Residual bound; the certificate's ε if omitted.
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long, default_value = "budget.json")]
        report: PathBuf,
    },
}

struct Ctx {
    seed: Option<u64>,
    out_dir: PathBuf,
    quiet: bool,
}

impl Ctx {
    fn out(&self, path: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out_dir).with_context(|| format!("creating {}", self.out_dir.display()))?;
        Ok(if path.is_absolute() { path.to_path_buf() } else { self.out_dir.join(path) })
    }

    fn write(&self, path: &Path, text: &str) -> Result<PathBuf> {
        let p = self.out(path)?;
        formats::write_text(&p, text)?;
        Ok(p)
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable")
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => Ok(formats::parse_config(&formats::read_text(p)?).with_context(|| p.display().to_string())?),
        None => Ok(T::default()),
    }
}

fn read_vector(path: &Path) -> Result<Vec<f64>> {
    let text = formats::read_text(path)?;
    let values = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().ok().filter(|v| v.is_finite()))
        .collect::<Option<Vec<_>>>();
    match values {
        Some(v) if !v.is_empty() => Ok(v),
        _ => Err(kkt_core::Error::Parse(format!("{}: expected a list of finite numbers", path.display())).into()),
    }
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx { seed: cli.seed, out_dir: cli.out_dir, quiet: cli.quiet };
    match cli.command {
        Command::GenData { n, d, out } => {
            let ds = lab::gen_sphere_dataset(n, d, ctx.seed.unwrap_or(0))?;
            let p = ctx.write(&out, &formats::dataset_to_csv(&ds))?;
            ctx.say(format!("wrote {} points in {} dimensions to {}", n, d, p.display()));
        }
        Command::Train(args) => train(&ctx, args)?,
        Command::Certify { model, data, p, out } => {
            let params = formats::read_model(&model)?;
            let ds = formats::read_dataset(&data)?;
            let lambda = fit_multipliers(&params, &ds)?;
            let p = match p {
                Some(p) => p,
                None => margin_value(&params, &ds)?,
            };
            let cert = certify(&params, &ds, &lambda, p)?;
            let file = CertificateFile::new(&cert, formats::model_hash(&params), formats::dataset_hash(&ds));
            let path = ctx.write(&out, &json(&file))?;
            ctx.say(format!("epsilon={} delta={} p={} margin_ok={} -> {}", cert.epsilon, cert.delta, cert.p, cert.satisfied_margin, path.display()));
        }
        Command::Attack(args) => attack(&ctx, args)?,
        Command::Forge { op } => forge_op(&ctx, op)?,
        Command::Sweep { data, radii, config, name } => {
            let ds = formats::read_dataset(&data)?;
            let cfg = seeded(read_config::<ExperimentConfig>(config.as_deref())?, ctx.seed);
            let report = lab::run_radius_sweep(&ds, &cfg.train, &cfg.attack, &radii)?;
            emit(&ctx, &report, &name)?;
        }
        Command::Defend { data, shift, u_file, config, name } => {
            let ds = formats::read_dataset(&data)?;
            let u = match (shift, u_file) {
                (Some(c), None) => vec![c; ds.dim()],
                (None, Some(p)) => read_vector(&p)?,
                _ => bail!(kkt_core::Error::Invalid("give exactly one of --shift and --u-file".into())),
            };
            let cfg = seeded(read_config::<ExperimentConfig>(config.as_deref())?, ctx.seed);
            let report = lab::run_defense_eval(&ds, &u, &cfg.train, &cfg.attack)?;
            emit(&ctx, &report, &name)?;
        }
        Command::Report { report, model, data, name } => {
            let rep = lab::read_report(&report)?;
            if let Some(m) = model {
                formats::check_hash("model", &rep.model_hash, &formats::model_hash(&formats::read_model(&m)?))?;
            }
            if let Some(d) = data {
                formats::check_hash("data", &rep.data_hash, &formats::dataset_hash(&formats::read_dataset(&d)?))?;
            }
            let name = name.unwrap_or_else(|| rep.experiment.clone());
            emit(&ctx, &rep, &name)?;
        }
    }
    Ok(())
}

fn seeded(mut cfg: ExperimentConfig, seed: Option<u64>) -> ExperimentConfig {
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.attack.seed = s;
    }
    cfg
}

fn emit(ctx: &Ctx, report: &lab::ExperimentReport, name: &str) -> Result<()> {
    let csv = ctx.out(Path::new(&format!("{name}.csv")))?;
    let svg = ctx.out(Path::new(&format!("{name}.svg")))?;
    let json = ctx.out(Path::new(&format!("{name}.json")))?;
    lab::emit_report(report, &csv, &svg, Some(&json))?;
    ctx.say(lab::report_to_csv(report).trim_end());
    Ok(())
}

fn train(ctx: &Ctx, args: TrainArgs) -> Result<()> {
    let ds = formats::read_dataset(&args.data)?;
    let mut cfg: TrainConfig = read_config(args.config.as_deref())?;
    if let Some(w) = args.width {
        cfg.width = w;
    }
    if let Some(l) = args.loss {
        cfg.loss_kind = match l {
            LossArg::Logistic => LossKind::Logistic,
            LossArg::Exponential => LossKind::Exponential,
        };
    }
    if let Some(s) = args.schedule {
        cfg.lr_schedule = match s {
            ScheduleArg::Constant => LrSchedule::Constant,
            ScheduleArg::LossNormalized => LrSchedule::LossNormalized,
        };
    }
    cfg.learning_rate = args.lr.unwrap_or(cfg.learning_rate);
    cfg.max_epochs = args.epochs.unwrap_or(cfg.max_epochs);
    cfg.target_loss = args.target_loss.unwrap_or(cfg.target_loss);
    cfg.init_scale = args.init_scale.or(cfg.init_scale);
    cfg.seed = ctx.seed.unwrap_or(cfg.seed);
    let (params, trace) = train_to_kkt(&ds, &cfg)?;
    let last = trace.last().expect("trace has the final epoch");
    let mut meta = serde_json::Map::new();
    meta.insert("train".into(), serde_json::to_value(&cfg)?);
    meta.insert("epochs_run".into(), last.epoch.into());
    meta.insert("final_loss".into(), last.loss.into());
    meta.insert("data_hash".into(), formats::dataset_hash(&ds).into());
    let out = ctx.write(&args.out, &formats::model_to_json(&params, meta))?;
    if let Some(t) = &args.trace {
        ctx.write(t, &formats::trace_to_csv(&trace))?;
    }
    ctx.say(format!(
        "epochs={} loss={} normalized_margin={} residual={} -> {}",
        last.epoch,
        last.loss,
        last.normalized_margin,
        last.residual,
        out.display()
    ));
    Ok(())
}

fn attack(ctx: &Ctx, args: AttackArgs) -> Result<()> {
    let params = formats::read_model(&args.model)?;
    let mut cfg: AttackConfig = read_config(args.config.as_deref())?;
    cfg.m = args.m.unwrap_or(cfg.m);
    cfg.init = args.init.unwrap_or(cfg.init);
    cfg.weights = KktLossWeights::new(args.gamma1.unwrap_or(cfg.weights.gamma1), args.gamma2.unwrap_or(cfg.weights.gamma2))?;
    cfg.learning_rate = args.lr.unwrap_or(cfg.learning_rate);
    cfg.iterations = args.iters.unwrap_or(cfg.iterations);
    cfg.restarts = args.restarts.unwrap_or(cfg.restarts);
    cfg.seed = ctx.seed.unwrap_or(cfg.seed);
    let truth = args.true_data.as_deref().map(formats::read_dataset).transpose()?;
    let res = reconstruct(&params, &cfg, truth.as_ref(), args.topk)?;
    let out = ctx.write(&args.out, &formats::table_to_csv(&res.candidates, &res.labels, Some(&res.multipliers)))?;
    let report = AttackReport::new(
        &res,
        Some(args.topk.clamp(1, cfg.m)),
        formats::model_hash(&params),
        truth.as_ref().map(formats::dataset_hash),
    );
    ctx.write(&args.report, &json(&report))?;
    let nn = res.topk_mean_nn_distance.map_or(String::new(), |d| format!(" top{}_nn={}", args.topk.clamp(1, cfg.m), d));
    ctx.say(format!("kkt_loss={} best_restart={}{} -> {}", res.final_kkt_loss, res.best_restart, nn, out.display()));
    Ok(())
}

struct ForgeData {
    params: NetworkParams,
    set: WeightedSet,
    cert: CertificateFile,
}

fn load_forge(inputs: &ForgeInputs) -> Result<ForgeData> {
    let params = formats::read_model(&inputs.model)?;
    let table = formats::read_table(&inputs.set)?;
    let cert = formats::parse_certificate(&formats::read_text(&inputs.cert)?).with_context(|| inputs.cert.display().to_string())?;
    cert.verify(&params, &table.points, &table.labels)?;
    let set = match table.lambda {
        Some(_) => table.weighted_set()?,
        None => WeightedSet::new(table.points, table.labels, Multipliers(cert.lambda.clone()))?,
    };
    Ok(ForgeData { params, set, cert })
}

fn direction(set: &WeightedSet, nu_file: Option<&Path>) -> Result<Vec<f64>> {
    Ok(match nu_file {
        Some(p) => read_vector(p)?,
        None => forge::svd_direction(set).0,
    })
}

fn forge_op(ctx: &Ctx, op: ForgeOp) -> Result<()> {
    match op {
        ForgeOp::Merge { inputs, index, with, out } => {
            let f = load_forge(&inputs)?;
            let new = forge::merge(&f.set, index, with, &f.params)?;
            write_set(ctx, &f, &new, &out)?;
        }
        ForgeOp::Split { inputs, index, alpha, beta, nu_file, out, report } => {
            let f = load_forge(&inputs)?;
            let nu = direction(&f.set, nu_file.as_deref())?;
            let plan = SplitPlan::new(&f.set, index, nu, alpha, beta)?;
            let new = forge::split(&f.set, &plan, &f.params)?;
            let (delta, admissible) = forge::delta_degradation(&f.params, &f.set, &plan, f.cert.epsilon)?;
            ctx.write(&report, &json(&serde_json::json!({ "plan": plan, "delta_degradation": delta, "admissible": admissible })))?;
            write_set(ctx, &f, &new, &out)?;
        }
        ForgeOp::Distant { inputs, radius, out } => {
            let f = load_forge(&inputs)?;
            let new = forge::construct_distant_kkt_set(&f.params, &f.set, radius)?;
            write_set(ctx, &f, &new, &out)?;
        }
        ForgeOp::Budget { inputs, index, nu_file, epsilon, report } => {
            let f = load_forge(&inputs)?;
            let nu = direction(&f.set, nu_file.as_deref())?;
            let gamma = forge::direction_bound(&f.set, &nu)?;
            let rep = forge::budget_report(&f.params, &f.set, index, &nu, gamma, epsilon.unwrap_or(f.cert.epsilon))?;
            let path = ctx.write(&report, &json(&rep))?;
            ctx.say(format!("safe={} oracle={} -> {}", json(&rep.safe_budget), json(&rep.oracle_budget), path.display()));
        }
    }
    Ok(())
}

fn write_set(ctx: &Ctx, f: &ForgeData, new: &WeightedSet, out: &Path) -> Result<()> {
    let before = certify_points(&f.params, f.set.points(), f.set.labels(), f.set.multipliers(), f.cert.p)?;
    let after = certify_points(&f.params, new.points(), new.labels(), new.multipliers(), f.cert.p)?;
    let path = ctx.write(out, &formats::set_to_csv(new))?;
    ctx.say(format!(
        "{} -> {} points; epsilon {} -> {}, delta {} -> {} -> {}",
        f.set.len(),
        new.len(),
        before.epsilon,
        after.epsilon,
        before.delta,
        after.delta,
        path.display()
    ));
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err.chain().any(|e| e.downcast_ref::<kkt_core::Error>().is_some_and(kkt_core::Error::is_numeric));
    if numeric {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
