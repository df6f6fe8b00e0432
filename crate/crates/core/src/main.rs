use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use moralis::config::{ArmSize, BetweenConfig, EstimateMode, Manifest, PopulationConfig, RunConfig, RunInfo};
use moralis::error::{DataError, Error};
use moralis::estimate::{classify_subjects, compare_frames, fit_mixture, fit_representative, Param};
use moralis::io;
use moralis::model::{thresholds_table, Frame, PayoffTable};
use moralis::power::power_simulation;
use moralis::regress::{run_lpm, two_sample_tests, Clustering, FeMethod, FixedEffect, Regressor};
use moralis::simulate::{
    core_sample_filter, descriptive_summary, sequence_counts, simulate_between_subjects, simulate_experiment, Arm,
    ChoiceDataset, CoreLevel, Grouping, SequenceLabel, TreatmentPlan,
};

#[derive(Debug, Parser)]
#[command(name = "moralis", version, about = "Simulate, estimate and test moral choice models")]
struct Cli {
    /// Master seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML run configuration, or a manifest from a previous run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory receiving outputs and the manifest.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Selling thresholds z and kappa_bar(beta) for each payoff configuration.
    Thresholds(PayoffArgs),
    /// Simulate an experiment from a population.
    Simulate(SimulateArgs),
    /// Fit a representative agent or a finite mixture.
    Estimate(EstimateArgs),
    /// Fit a finite mixture (same as `estimate --mode mixture`).
    Mixture(EstimateArgs),
    /// Linear probability model with fixed effects and clustered errors.
    Regress(RegressArgs),
    /// Monte Carlo power of the VOI effect.
    Power(PowerArgs),
    /// Keep the core sample and/or a set of sequences.
    Filter(FilterArgs),
    /// Descriptive statistics of selfish counts and two-sample tests.
    Summary(SummaryArgs),
}

#[derive(Debug, Args)]
struct PayoffArgs {
    /// Payoff CSV with header id,e1,e2,g,l (built-in table if omitted).
    #[arg(long)]
    payoffs: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Choice dataset CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    payoffs: PayoffArgs,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    payoffs: PayoffArgs,
    /// Population preset (representative, two-type, selfish).
    #[arg(long)]
    population: Option<String>,
    /// Arm and size, e.g. `N:100`; repeatable.
    #[arg(long = "arm", value_parser = parse_arm_size)]
    arms: Vec<ArmSize>,
    /// Between-subject design `n_voi:n_nonvoi`.
    #[arg(long, value_parser = parse_between)]
    between: Option<(usize, usize)>,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_parser = ["rep", "mixture"])]
    mode: Option<String>,
    /// Number of mixture types.
    #[arg(long)]
    k: Option<usize>,
    /// Restrict to one frame.
    #[arg(long)]
    frame: Option<Frame>,
    /// Sample: full, core1 or core2.
    #[arg(long)]
    core: Option<CoreLevel>,
    /// Number of random starts.
    #[arg(long)]
    starts: Option<usize>,
    /// Fit each frame separately and test equality of parameters.
    #[arg(long)]
    compare_frames: bool,
}

#[derive(Debug, Args)]
struct RegressArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Comma-separated: intercept, z, market, voi, voi_market.
    #[arg(long, value_delimiter = ',')]
    regressors: Vec<Regressor>,
    /// Comma-separated: payoff, subject, subject_payoff.
    #[arg(long = "fe", value_delimiter = ',')]
    fixed_effects: Vec<FixedEffect>,
    /// none, hc1, subject, payoff or two_way.
    #[arg(long)]
    cluster: Option<Clustering>,
    /// Comma-separated sequences, e.g. N1,M1.
    #[arg(long, value_delimiter = ',')]
    sample: Vec<SequenceLabel>,
    /// Comma-separated control columns.
    #[arg(long, value_delimiter = ',')]
    controls: Vec<String>,
    /// Absorb fixed effects with explicit dummies instead of demeaning.
    #[arg(long)]
    dummies: bool,
}

#[derive(Debug, Args)]
struct PowerArgs {
    #[command(flatten)]
    payoffs: PayoffArgs,
    #[arg(long)]
    population: Option<String>,
    #[arg(long)]
    n_sims: Option<usize>,
    #[arg(long)]
    n_voi: Option<usize>,
    #[arg(long)]
    n_nonvoi: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Debug, Args)]
struct FilterArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    core: Option<CoreLevel>,
    #[arg(long, value_delimiter = ',')]
    sample: Vec<SequenceLabel>,
}

#[derive(Debug, Args)]
struct SummaryArgs {
    #[command(flatten)]
    data: DataArgs,
    /// frame, voi or frame-voi.
    #[arg(long, default_value = "frame-voi")]
    grouping: Grouping,
}

fn parse_arm_size(s: &str) -> Result<ArmSize, String> {
    let (arm, n) = s.split_once(':').ok_or("expected ARM:SUBJECTS")?;
    Ok(ArmSize {
        arm: arm.parse::<Arm>().map_err(|e| e.to_string())?,
        subjects: n.parse().map_err(|e| format!("{e}"))?,
    })
}

fn parse_between(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or("expected N_VOI:N_NONVOI")?;
    Ok((
        a.parse().map_err(|e| format!("{e}"))?,
        b.parse().map_err(|e| format!("{e}"))?,
    ))
}

/// Output directory plus the files written so far.
struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self, Error> {
        fs::create_dir_all(dir).map_err(DataError::from)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>, Error> {
        let f = File::create(self.dir.join(name)).map_err(DataError::from)?;
        self.written.push(name.to_string());
        Ok(BufWriter::new(f))
    }

    fn text(&mut self, name: &str, body: &str) -> Result<(), Error> {
        fs::write(self.dir.join(name), body).map_err(DataError::from)?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn manifest(self, command: &str, config: &RunConfig) -> Result<(), Error> {
        let m = Manifest {
            run: RunInfo {
                tool: "moralis".into(),
                version: env!("CARGO_PKG_VERSION").into(),
                command: command.into(),
                args: std::env::args().skip(1).collect(),
                seed: config.seed(),
                outputs: self.written,
            },
            config: config.clone(),
        };
        fs::write(self.dir.join("manifest.toml"), m.to_toml()?).map_err(DataError::from)?;
        Ok(())
    }
}

fn load_payoffs(cfg: &RunConfig) -> Result<PayoffTable, Error> {
    match &cfg.payoffs {
        Some(p) => Ok(io::read_payoffs(p)?),
        None => Ok(PayoffTable::builtin()),
    }
}

fn load_data(cfg: &RunConfig) -> Result<ChoiceDataset, Error> {
    let path = cfg
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("no input dataset (use --data or `data` in the config)".into()))?;
    Ok(io::read_dataset(path, load_payoffs(cfg)?)?)
}

fn apply_data_args(cfg: &mut RunConfig, a: &DataArgs) {
    if let Some(d) = &a.data {
        cfg.data = Some(d.clone());
    }
    if let Some(p) = &a.payoffs.payoffs {
        cfg.payoffs = Some(p.clone());
    }
}

fn set_population(cfg: &mut RunConfig, preset: &Option<String>) {
    if let Some(name) = preset {
        cfg.population = Some(PopulationConfig {
            preset: Some(name.clone()),
            components: vec![],
        });
    }
}

/// Records the population in resolved form so the manifest stands alone.
fn resolve_population(cfg: &mut RunConfig) -> Result<(), Error> {
    let resolved = cfg
        .population
        .as_ref()
        .ok_or_else(|| Error::Config("no population (use --population or a [population] section)".into()))?
        .resolved()?;
    cfg.population = Some(resolved);
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = Some(s);
    }
    cfg.seed = Some(cfg.seed());
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let mut out = Outputs::new(&cli.out_dir)?;

    match cli.command {
        Command::Thresholds(a) => {
            if let Some(p) = a.payoffs {
                cfg.payoffs = Some(p);
            }
            let table = load_payoffs(&cfg)?;
            let rows = thresholds_table(table.as_slice());
            io::write_thresholds(out.create("thresholds.csv")?, &rows)?;
            let text = io::thresholds_text(&rows);
            out.text("thresholds.txt", &text)?;
            print!("{text}");
            out.manifest("thresholds", &cfg)
        }
        Command::Simulate(a) => {
            if let Some(p) = a.payoffs.payoffs {
                cfg.payoffs = Some(p);
            }
            set_population(&mut cfg, &a.population);
            if !a.arms.is_empty() {
                cfg.simulate.arms = a.arms;
                cfg.simulate.between = None;
            }
            if let Some((v, n)) = a.between {
                cfg.simulate.between = Some(BetweenConfig {
                    n_voi: v,
                    n_nonvoi: n,
                    frame: cfg.simulate.between.map_or(Frame::Neutral, |b| b.frame),
                });
            }
            resolve_population(&mut cfg)?;
            let pop = cfg.population()?;
            let table = load_payoffs(&cfg)?;
            let ds = match cfg.simulate.between {
                Some(b) => simulate_between_subjects(&pop, b.n_voi, b.n_nonvoi, b.frame, &table, cfg.seed())?,
                None => {
                    let plans: Vec<(TreatmentPlan, usize)> = cfg
                        .simulate
                        .arms
                        .iter()
                        .map(|a| (TreatmentPlan::for_table(a.arm, &table), a.subjects))
                        .collect();
                    simulate_experiment(&pop, &plans, &table, cfg.seed())?
                }
            };
            io::write_dataset(out.create("data.csv")?, &ds)?;
            io::write_truth(out.create("truth.csv")?, &ds.truth)?;
            io::write_payoffs(out.create("payoffs.csv")?, &table)?;
            println!(
                "simulated {} decisions from {} subjects -> {}",
                ds.len(),
                ds.truth.len(),
                out.dir.join("data.csv").display()
            );
            out.manifest("simulate", &cfg)
        }
        Command::Estimate(a) => estimate(&mut cfg, a, false, out),
        Command::Mixture(a) => estimate(&mut cfg, a, true, out),
        Command::Regress(a) => {
            apply_data_args(&mut cfg, &a.data);
            let spec = &mut cfg.regress;
            if !a.regressors.is_empty() {
                spec.regressors = a.regressors;
            }
            if !a.fixed_effects.is_empty() {
                spec.fixed_effects = a.fixed_effects;
            }
            if let Some(c) = a.cluster {
                spec.clustering = c;
            }
            if !a.sample.is_empty() {
                spec.sample = a.sample;
            }
            if !a.controls.is_empty() {
                spec.controls = a.controls;
            }
            if a.dummies {
                spec.method = FeMethod::Dummies;
            }
            let ds = load_data(&cfg)?;
            let r = run_lpm(&ds, &cfg.regress)?;
            io::write_regression(out.create("regression.csv")?, &r)?;
            let text = r.to_text();
            out.text("regression.txt", &text)?;
            print!("{text}");
            out.manifest("regress", &cfg)
        }
        Command::Power(a) => {
            if let Some(p) = a.payoffs.payoffs {
                cfg.payoffs = Some(p);
            }
            set_population(&mut cfg, &a.population);
            if let Some(n) = a.n_sims {
                cfg.power.n_sims = n;
            }
            if let Some(n) = a.n_voi {
                cfg.power.n_voi = n;
            }
            if let Some(n) = a.n_nonvoi {
                cfg.power.n_nonvoi = n;
            }
            if let Some(x) = a.alpha {
                cfg.power.alpha = x;
            }
            resolve_population(&mut cfg)?;
            let spec = cfg.power_spec()?;
            let r = power_simulation(&spec, &load_payoffs(&cfg)?)?;
            io::write_power(out.create("power.csv")?, &r)?;
            let line = r.summary_line(spec.alpha);
            out.text("power.txt", &format!("{line}\n"))?;
            println!("{line}");
            out.manifest("power", &cfg)
        }
        Command::Filter(a) => {
            apply_data_args(&mut cfg, &a.data);
            if let Some(c) = a.core {
                cfg.estimate.core = c;
            }
            if !a.sample.is_empty() {
                cfg.sample = a.sample;
            }
            let mut ds = load_data(&cfg)?;
            if cfg.estimate.core != CoreLevel::Full {
                ds = core_sample_filter(&ds, cfg.estimate.core)?;
            }
            if !cfg.sample.is_empty() {
                ds = ds.sequences(&cfg.sample);
            }
            io::write_dataset(out.create("data.csv")?, &ds)?;
            println!("kept {} decisions from {} subjects", ds.len(), ds.subject_ids().len());
            out.manifest("filter", &cfg)
        }
        Command::Summary(a) => {
            apply_data_args(&mut cfg, &a.data);
            let ds = load_data(&cfg)?;
            let summary = descriptive_summary(&ds, a.grouping)?;
            io::write_rows(out.create("summary.csv")?, &summary.rows)?;
            let counts: Vec<_> = sequence_counts(&ds)
                .into_iter()
                .map(|c| {
                    (
                        c.subject_id,
                        c.label.to_string(),
                        c.frame.to_string(),
                        u8::from(c.voi),
                        c.selfish,
                    )
                })
                .collect();
            let mut w = csv::Writer::from_writer(out.create("sequence_counts.csv")?);
            w.write_record(["subject_id", "sequence", "frame", "voi", "selfish"])
                .and_then(|_| counts.iter().try_for_each(|c| w.serialize(c)))
                .and_then(|_| w.flush().map_err(csv::Error::from))
                .map_err(|e| DataError::Io(std::io::Error::other(e)))?;

            let mut text = format!(
                "{:<16} {:>6} {:>7} {:>7} {:>5} {:>5} {:>6} {:>6}\n",
                "group", "n", "mean", "median", "min", "max", "q1", "q3"
            );
            for r in &summary.rows {
                text.push_str(&format!(
                    "{:<16} {:>6} {:>7.3} {:>7.2} {:>5} {:>5} {:>6.2} {:>6.2}\n",
                    r.group, r.n_sequences, r.mean, r.median, r.min, r.max, r.q1, r.q3
                ));
            }
            for g in &summary.omitted {
                text.push_str(&format!("{g}: no sequences\n"));
            }
            // pairwise tests between consecutive groups
            let mut tests = Vec::new();
            for pair in summary.rows.chunks(2) {
                if let [a, b] = pair {
                    match two_sample_tests(&a.counts, &b.counts) {
                        Ok(t) => {
                            text.push_str(&format!(
                                "{} vs {}: welch p = {:.4}, wilcoxon p = {:.4}, KS D = {:.4} (p = {:.4})\n",
                                a.group, b.group, t.welch_p, t.wilcoxon_p, t.ks_statistic, t.ks_p
                            ));
                            tests.push((a.group.clone(), b.group.clone(), t));
                        }
                        Err(e) => text.push_str(&format!("{} vs {}: {e}\n", a.group, b.group)),
                    }
                }
            }
            let mut w = csv::Writer::from_writer(out.create("tests.csv")?);
            w.write_record([
                "group_a",
                "group_b",
                "n_a",
                "n_b",
                "mean_a",
                "mean_b",
                "welch_t",
                "welch_df",
                "welch_p",
                "wilcoxon_u",
                "wilcoxon_p",
                "ks_statistic",
                "ks_p",
            ])
            .and_then(|_| {
                tests.iter().try_for_each(|(a, b, t)| {
                    w.serialize((
                        a,
                        b,
                        t.n_a,
                        t.n_b,
                        t.mean_a,
                        t.mean_b,
                        t.welch_t,
                        t.welch_df,
                        t.welch_p,
                        t.wilcoxon_u,
                        t.wilcoxon_p,
                        t.ks_statistic,
                        t.ks_p,
                    ))
                })
            })
            .and_then(|_| w.flush().map_err(csv::Error::from))
            .map_err(|e| DataError::Io(std::io::Error::other(e)))?;
            out.text("summary.txt", &text)?;
            print!("{text}");
            out.manifest("summary", &cfg)
        }
    }
}

fn estimate(cfg: &mut RunConfig, a: EstimateArgs, force_mixture: bool, mut out: Outputs) -> Result<(), Error> {
    apply_data_args(cfg, &a.data);
    let e = &mut cfg.estimate;
    if let Some(m) = &a.mode {
        e.mode = if m == "mixture" {
            EstimateMode::Mixture
        } else {
            EstimateMode::Rep
        };
    }
    if force_mixture {
        e.mode = EstimateMode::Mixture;
    }
    if let Some(k) = a.k {
        e.k = k;
    }
    if let Some(f) = a.frame {
        e.frame = Some(f);
    }
    if let Some(c) = a.core {
        e.core = c;
    }
    if let Some(s) = a.starts {
        e.fit.starts = s;
        e.mixture.starts = s;
    }
    if a.compare_frames {
        e.compare_frames = true;
    }
    if e.compare_frames && e.frame.is_some() {
        return Err(Error::Config("--compare-frames needs both frames; drop --frame".into()));
    }
    let seed = cfg.seed();
    cfg.estimate.fit.seed = seed;
    cfg.estimate.mixture.seed = seed;
    let e = cfg.estimate.clone();

    let mut ds = load_data(cfg)?;
    if e.core != CoreLevel::Full {
        ds = core_sample_filter(&ds, e.core)?;
    }
    if let Some(f) = e.frame {
        ds = ds.frame_partition(f);
    }

    let mut text = String::new();
    match e.mode {
        EstimateMode::Rep => {
            let est = fit_representative(&ds, &e.fit)?;
            io::write_representative(out.create("estimate.csv")?, &est)?;
            text.push_str(&format!(
                "representative agent: {} decisions, {} subjects, log-likelihood {:.3}\n",
                est.n_obs, est.n_subjects, est.loglik
            ));
            for p in Param::ALL {
                text.push_str(&format!(
                    "  {:<6} {:>9.4}  ({:.4}) [{:.4}]\n",
                    p.name(),
                    p.value(&est.params),
                    est.se_clustered(p).unwrap_or(f64::NAN),
                    est.se_plain(p)
                ));
            }
            text.push_str("  clustered s.e. in parentheses, plain in brackets\n");
            if e.compare_frames {
                let neutral = fit_representative(&ds.frame_partition(Frame::Neutral), &e.fit)?;
                let market = fit_representative(&ds.frame_partition(Frame::Market), &e.fit)?;
                let mut rows = Vec::new();
                text.push_str("neutral vs market (clustered z-test):\n");
                for p in Param::ALL {
                    let (z, pv) = compare_frames(&neutral, &market, p)?;
                    text.push_str(&format!(
                        "  {:<6} neutral {:>8.4} market {:>8.4}  z = {:>7.3}  p = {:.4}\n",
                        p.name(),
                        p.value(&neutral.params),
                        p.value(&market.params),
                        z,
                        pv
                    ));
                    rows.push((p.name(), p.value(&neutral.params), p.value(&market.params), z, pv));
                }
                let mut w = csv::Writer::from_writer(out.create("compare_frames.csv")?);
                w.write_record(["parameter", "neutral", "market", "z", "p_value"])
                    .and_then(|_| rows.iter().try_for_each(|r| w.serialize(r)))
                    .and_then(|_| w.flush().map_err(csv::Error::from))
                    .map_err(|e| DataError::Io(std::io::Error::other(e)))?;
            }
        }
        EstimateMode::Mixture => {
            let est = fit_mixture(&ds, e.k, &e.mixture)?;
            io::write_mixture(out.create("estimate.csv")?, &est)?;
            io::write_posteriors(out.create("posteriors.csv")?, &est)?;
            text.push_str(&format!(
                "{}-type mixture: {} decisions, {} subjects, log-likelihood {:.3}, {} EM iterations\n",
                est.k(),
                est.n_obs,
                est.n_subjects(),
                est.loglik,
                est.n_em_iterations
            ));
            let labels = classify_subjects(&est.posteriors, e.classify_cut);
            for (k, t) in est.types.iter().enumerate() {
                let classified = labels.iter().filter(|l| **l == Some(k)).count();
                text.push_str(&format!(
                    "  type {}: share {:.3}, {} subjects with posterior >= {}\n",
                    k + 1,
                    t.share,
                    classified,
                    e.classify_cut
                ));
                for p in Param::ALL {
                    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
                    text.push_str(&format!(
                        "    {:<6} {:>9.4}  ({}) [{}]\n",
                        p.name(),
                        p.value(&t.params),
                        fmt(est.se_clustered(k, p)),
                        fmt(est.se_plain(k, p))
                    ));
                }
            }
        }
    }
    out.text("estimate.txt", &text)?;
    print!("{text}");
    out.manifest("estimate", cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli).context("moralis") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.downcast_ref::<Error>().map_or(1, Error::exit_code);
            eprintln!("error: {:#}", e);
            ExitCode::from(code as u8)
        }
    }
}
