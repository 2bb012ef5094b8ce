use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::sweep::run_sweep;
use super::{
    ablation_from_checkpoint, check_run, features_csv, fit_g, fit_predictor, g_checkpoint, predictor_checkpoint, split, Checkpoint,
    ExperimentConfig, HarnessError, RunSpec,
};
use crate::datagen::{domain_counts, make_benchmark_traced, read_dataset, spurious_agreement, write_dataset, DataError};
use crate::detect::{evaluate, results_csv};
use crate::numcore::gradcheck::{run_suite, Tolerance};
use crate::training::Ablation;

#[derive(Parser, Debug)]
#[command(name = "sodium", version, about = "Semantic OOD detection under covariate shift")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Experiment config (`key = value` lines); built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for data generation and training; overrides the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: Common,
    /// Class held out as OOD; defaults to the first configured choice.
    #[arg(long)]
    pub ood_class: Option<u32>,
    /// Held-out test domain; defaults to the first configured choice.
    #[arg(long)]
    pub test_domain: Option<u32>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the benchmark into OUT/data.sodd.
    GenData(Common),
    /// Train the transformation model into OUT/g.sodm.
    TrainG(RunArgs),
    /// Train a predictor into OUT/predictor-<ablation>.sodm.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "full", value_parser = parse_ablation)]
        ablation: Ablation,
    },
    /// Score a trained predictor on the test domain into OUT/results-<ablation>.csv.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "full", value_parser = parse_ablation)]
        ablation: Ablation,
        /// Also write per-instance features and labels as CSV.
        #[arg(long)]
        export_features: Option<PathBuf>,
    },
    /// Run the seed x OOD-class x test-domain x ablation grid.
    Sweep(Common),
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse()
}

pub fn init_logging() {
    let level = match std::env::var("SODIUM_LOG").as_deref() {
        Ok("quiet") => log::LevelFilter::Off,
        Ok("debug") => log::LevelFilter::Debug,
        _ => log::LevelFilter::Info,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
}

fn load_config(c: &Common) -> Result<ExperimentConfig, HarnessError> {
    let cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    Ok(match c.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn spec(cfg: &ExperimentConfig, r: &RunArgs) -> RunSpec {
    RunSpec {
        seed: r.common.seed.unwrap_or(cfg.train.seed),
        ood_class: r.ood_class.unwrap_or(cfg.ood_classes[0]),
        test_domain: r.test_domain.unwrap_or(cfg.test_domains[0]),
    }
}

fn io(p: &Path) -> impl Fn(std::io::Error) -> HarnessError + '_ {
    move |e| HarnessError::Io { path: p.display().to_string(), source: e }
}

fn require(path: &Path, command: &'static str) -> Result<(), HarnessError> {
    if path.exists() {
        Ok(())
    } else {
        Err(HarnessError::Missing { missing: path.display().to_string(), command })
    }
}

fn ensure_dir(d: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(d).map_err(io(d))
}

fn load_data(out: &Path) -> Result<crate::datagen::MultiDomainDataset, HarnessError> {
    let p = out.join("data.sodd");
    require(&p, "gen-data")?;
    let f = fs::File::open(&p).map_err(io(&p))?;
    Ok(read_dataset(std::io::BufReader::new(f))?)
}

fn gen_data(c: &Common) -> Result<(), HarnessError> {
    let cfg = load_config(c)?;
    let (ds, prov) = make_benchmark_traced(&cfg.benchmark)?;
    ensure_dir(&c.out)?;
    let p = c.out.join("data.sodd");
    let f = fs::File::create(&p).map_err(io(&p))?;
    let mut w = std::io::BufWriter::new(f);
    write_dataset(&ds, &mut w)?;
    std::io::Write::flush(&mut w).map_err(|e| HarnessError::Data(DataError::Io(e)))?;
    let agree = spurious_agreement(&ds, &prov);
    println!("wrote {} ({} instances)", p.display(), ds.instances.len());
    for d in domain_counts(&ds) {
        let target = cfg.benchmark.domains.iter().find(|s| s.id == d.domain).map(|s| s.spurious_corr);
        println!(
            "domain {}: {} instances, per class {:?}, spurious agreement {:.3} (target {})",
            d.domain,
            d.total,
            d.per_class,
            agree.get(&d.domain).copied().unwrap_or(f64::NAN),
            target.map_or_else(|| "?".into(), |t| t.to_string())
        );
    }
    Ok(())
}

fn train_g_cmd(r: &RunArgs) -> Result<(), HarnessError> {
    let cfg = load_config(&r.common)?;
    let s = spec(&cfg, r);
    let sp = split(load_data(&r.common.out)?, &s)?;
    let (g, report) = fit_g(&cfg, &s, &sp.train)?;
    let p = r.common.out.join("g.sodm");
    g_checkpoint(&cfg, &s, &g).save(&p)?;
    let mut log = String::from("epoch,loss,rec,prior,cls\n");
    for e in &report.epochs {
        log.push_str(&format!("{},{},{},{},{}\n", e.epoch, e.loss, e.rec, e.prior, e.cls));
    }
    let lp = r.common.out.join("g-log.csv");
    fs::write(&lp, log).map_err(io(&lp))?;
    let rel = g.relative_mse(&sp.train.x).map_err(crate::gmodel::GError::from)?;
    println!("wrote {}; reconstruction relative MSE {rel:.4}", p.display());
    Ok(())
}

fn load_g(out: &Path, s: &RunSpec) -> Result<crate::gmodel::TransformParams, HarnessError> {
    let p = out.join("g.sodm");
    require(&p, "train-g")?;
    let c = Checkpoint::load(&p)?;
    check_run(&c, s, "g.sodm")?;
    Ok(c.transform()?)
}

fn train_cmd(r: &RunArgs, ablation: Ablation) -> Result<(), HarnessError> {
    let cfg = load_config(&r.common)?;
    let s = spec(&cfg, r);
    let sp = split(load_data(&r.common.out)?, &s)?;
    let g = load_g(&r.common.out, &s)?;
    let t = fit_predictor(&cfg, &s, &sp.train, &g, ablation)?;
    let p = r.common.out.join(format!("predictor-{ablation}.sodm"));
    predictor_checkpoint(&cfg, &s, ablation, &t).save(&p)?;
    let lp = r.common.out.join(format!("train-log-{ablation}.csv"));
    fs::write(&lp, t.outcome.log_csv()).map_err(io(&lp))?;
    let last = t.outcome.epochs.last();
    println!(
        "wrote {} after {} epochs (beta1 {:.4}, beta2 {:.4})",
        p.display(),
        t.outcome.epochs.len(),
        last.map_or(0.0, |e| e.beta1),
        last.map_or(0.0, |e| e.beta2)
    );
    Ok(())
}

fn eval_cmd(r: &RunArgs, ablation: Ablation, export: Option<&Path>) -> Result<(), HarnessError> {
    let cfg = load_config(&r.common)?;
    let s = spec(&cfg, r);
    let sp = split(load_data(&r.common.out)?, &s)?;
    let p = r.common.out.join(format!("predictor-{ablation}.sodm"));
    require(&p, "train")?;
    let c = Checkpoint::load(&p)?;
    check_run(&c, &s, &p.display().to_string())?;
    if ablation_from_checkpoint(&c)? != ablation {
        return Err(HarnessError::Mismatch(format!("{} holds another ablation", p.display())));
    }
    let state = c.train_state()?;
    let fgda = c.gda("fgda")?;
    let ev = evaluate(&state.predictor, Some(&fgda), &sp.test, &cfg.detectors, cfg.train.temperature)?;
    let rows = ev.rows(&cfg.benchmark.name, s.seed, &s.ood_class.to_string());
    let rp = r.common.out.join(format!("results-{ablation}.csv"));
    fs::write(&rp, results_csv(&rows)).map_err(io(&rp))?;
    for d in &cfg.detectors {
        println!("{d}: mean AUROC {}", ev.mean_auroc(*d).map_or("NA".into(), |v| format!("{v:.4}")));
    }
    println!("InD accuracy {}", ev.mean_accuracy().map_or("NA".into(), |v| format!("{v:.4}")));
    if let Some(fp) = export {
        fs::write(fp, features_csv(&state.predictor, &sp.test)?).map_err(io(fp))?;
        println!("wrote {}", fp.display());
    }
    Ok(())
}

fn sweep_cmd(c: &Common) -> Result<(), HarnessError> {
    let mut cfg = load_config(c)?;
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    ensure_dir(&c.out)?;
    let summary = run_sweep(&cfg, Some(&c.out))?;
    println!(
        "{} runs, {} failures; aggregate in {}",
        summary.runs.len(),
        summary.failures.len(),
        c.out.join("aggregate.csv").display()
    );
    for a in summary.aggregate.iter().filter(|a| a.test_domain == "avg") {
        println!(
            "{:12} {:6} auroc {} acc {}",
            a.ablation.name(),
            a.detector.name(),
            a.auroc_mean.map_or("NA".into(), |v| format!("{v:.4}")),
            a.accuracy_mean.map_or("NA".into(), |v| format!("{v:.4}"))
        );
    }
    Ok(())
}

fn gradcheck_cmd(seed: u64, instances: usize) -> i32 {
    let report = match run_suite(seed, instances, Tolerance::default()) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    for c in &report.cases {
        println!(
            "{:<16} {} entries={} mismatches={} max_abs_err={:.2e}",
            c.name,
            if c.stats.mismatches == 0 { "ok  " } else { "FAIL" },
            c.stats.entries,
            c.stats.mismatches,
            c.stats.max_abs_err
        );
    }
    if report.passed() {
        0
    } else {
        1
    }
}

/// Runs the CLI and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::TrainG(r) => train_g_cmd(r),
        Command::Train { run, ablation } => train_cmd(run, *ablation),
        Command::Eval { run, ablation, export_features } => eval_cmd(run, *ablation, export_features.as_deref()),
        Command::Sweep(c) => sweep_cmd(c),
        Command::Gradcheck { seed, instances } => return gradcheck_cmd(*seed, *instances),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
