use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use pqflex::annopf::{
    baseline_optimize, generate_samples, new_opf_model, train_stage1, train_stage2,
    write_telemetry, AugLossConfig, BaselineMode, GridStatus, N1Screen, NoScreen, OpfEnv,
    PpfScreen, PqRequirement, SampleSet,
};
use pqflex::approximators::{
    build_datasets, load_approximator, save_approximator, save_dataset, split_indices, train_n1,
    train_ppf, ApproxMetrics, DatasetSidecar, N1Approximator, PpfApproximator, SampleMode,
};
use pqflex::contingency::n1_analysis;
use pqflex::estimation::{predict_area, requirement_grid, verify_area, write_area_csv, AreaSummary, PqArea};
use pqflex::grid::{aggregate_injections, build_admittances, Network};
use pqflex::io::{hash_file, hash_grid_dir, load_grid, save_grid, GridBundle, Manifest, ProfileStep, RunConfig};
use pqflex::neural::{load_model, save_model, Activation, Mlp, Standardizer};
use pqflex::powerflow::{solve, Scenario};
use pqflex::ppf::run_mcs;
use pqflex::synth::{synthetic_grid, SynthSpec};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] pqflex::Error),
    #[error("{0}")]
    Usage(String),
}

impl From<pqflex::error::NumericError> for CliError {
    fn from(e: pqflex::error::NumericError) -> Self {
        CliError::Core(e.into())
    }
}

impl From<pqflex::error::GridError> for CliError {
    fn from(e: pqflex::error::GridError) -> Self {
        CliError::Core(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "pqflex", version, about = "PQ flexibility estimation at TSO-DSO interfaces")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Grid bundle directory.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides every seed of the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct StepArg {
    /// Profile time step defining the grid status; the bundle's base case
    /// when omitted.
    #[arg(long)]
    pub step: Option<usize>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum Preset {
    Hv30,
    Hv100,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeArg {
    OnSample,
    OffSample,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineArg {
    MaxP,
    MaxQ,
    MinQ,
    Requirement,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Writes a synthetic HV grid bundle.
    GenGrid {
        #[arg(long, value_enum)]
        preset: Preset,
        #[command(flatten)]
        common: Common,
    },
    /// Single power flow; prints bus and branch tables.
    Pf {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        step: StepArg,
    },
    /// Exact N-1 contingency analysis.
    N1 {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        step: StepArg,
    },
    /// Monte-Carlo probabilistic power flow.
    Ppf {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        step: StepArg,
    },
    /// Training samples from the profile time series.
    GenSamples {
        #[command(flatten)]
        common: Common,
    },
    /// Stage-1 agent training against hard constraints.
    TrainStage1 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: PathBuf,
        /// Trains without constraint penalties.
        #[arg(long)]
        unpenalized: bool,
    },
    /// Builds labelled datasets and trains the N-1 and PPF approximators.
    TrainApprox {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: PathBuf,
        /// Stage-1 model; required for on-sample datasets.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "on-sample")]
        mode: ModeArg,
    },
    /// Stage-2 agent training with approximator soft-constraint marks.
    TrainStage2 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        n1: PathBuf,
        #[arg(long)]
        ppf: PathBuf,
    },
    /// Predicts and classifies the PQ area over an n × n requirement grid.
    EstimateArea {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        step: StepArg,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        n1: Option<PathBuf>,
        #[arg(long)]
        ppf: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Audits an estimated area with the exact N-1 and PPF oracles.
    VerifyArea {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        step: StepArg,
        /// `area.json` written by estimate-area.
        #[arg(long)]
        area: PathBuf,
    },
    /// Gradient-based reference optimization of DER setpoints.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        step: StepArg,
        #[arg(long, value_enum)]
        mode: BaselineArg,
        #[arg(long)]
        r_p: Option<f64>,
        #[arg(long)]
        r_q: Option<f64>,
    },
    /// Times an area sweep and the per-point baseline.
    Bench {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        step: StepArg,
        /// Agent model; an untrained one of the configured size otherwise.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        n1: Option<PathBuf>,
        #[arg(long)]
        ppf: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        /// Requirement points timed with the baseline optimizer.
        #[arg(long, default_value_t = 3)]
        baseline_points: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenGrid { .. } => "gen-grid",
            Command::Pf { .. } => "pf",
            Command::N1 { .. } => "n1",
            Command::Ppf { .. } => "ppf",
            Command::GenSamples { .. } => "gen-samples",
            Command::TrainStage1 { .. } => "train-stage1",
            Command::TrainApprox { .. } => "train-approx",
            Command::TrainStage2 { .. } => "train-stage2",
            Command::EstimateArea { .. } => "estimate-area",
            Command::VerifyArea { .. } => "verify-area",
            Command::Baseline { .. } => "baseline",
            Command::Bench { .. } => "bench",
        }
    }
}

/// Shared state of one run: configuration, grid and manifest.
struct Ctx {
    cfg: RunConfig,
    config_hash: String,
    bundle: GridBundle,
    out: Option<PathBuf>,
    manifest: Manifest,
}

impl Ctx {
    fn new(common: &Common, command: &str, args: &[String]) -> Result<Self> {
        let grid = common
            .grid
            .as_ref()
            .ok_or_else(|| CliError::Usage(format!("{command} requires --grid")))?;
        let mut cfg = match &common.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = common.seed {
            cfg.reseed(seed);
        }
        let config_hash = cfg.hash();
        let bundle = load_grid(grid)?;
        let mut manifest = Manifest::new(command, args.to_vec(), config_hash.clone());
        manifest.grid_hash = Some(hash_grid_dir(grid)?);
        manifest.seed = Some(cfg.training.seed);
        if let Some(p) = &common.config {
            manifest.add_input(p)?;
        }
        if let Some(out) = &common.out {
            std::fs::create_dir_all(out).map_err(|source| pqflex::Error::Io {
                path: out.display().to_string(),
                source,
            })?;
        }
        Ok(Self {
            cfg,
            config_hash,
            bundle,
            out: common.out.clone(),
            manifest,
        })
    }

    fn env(&self) -> Result<OpfEnv> {
        let mut env = OpfEnv::new(self.bundle.network.clone())?;
        self.cfg.apply_limits(&mut env);
        Ok(env)
    }

    fn profile_step(&self, step: Option<usize>) -> Result<Option<ProfileStep>> {
        let Some(k) = step else { return Ok(None) };
        let prof = self
            .bundle
            .profiles
            .as_ref()
            .ok_or_else(|| CliError::Usage("--step given but the grid has no profiles.csv".into()))?;
        prof.get(k)
            .copied()
            .map(Some)
            .ok_or_else(|| CliError::Usage(format!("--step {k} out of range (profile has {} steps)", prof.len())))
    }

    fn status(&self, env: &OpfEnv, step: Option<usize>) -> Result<GridStatus> {
        Ok(match self.profile_step(step)? {
            Some(s) => GridStatus::from_profile(&env.network, &s),
            None => GridStatus::from_network(&env.network),
        })
    }

    /// The bundle's network at a profile step, DERs at availability.
    fn network_at(&self, step: Option<usize>) -> Result<Network> {
        let mut net = self.bundle.network.clone();
        if let Some(s) = self.profile_step(step)? {
            for l in &mut net.loads {
                l.p_mw *= s.load_p_scale;
                l.q_mvar *= s.load_q_scale;
            }
            for d in &mut net.ders {
                d.p_avail_mw = (s.der_avail_scale * d.p_inst_mw).clamp(0.0, d.p_inst_mw);
                d.p_set_mw = d.p_avail_mw;
            }
        }
        Ok(net)
    }

    fn out_path(&self, name: &str) -> Option<PathBuf> {
        self.out.as_ref().map(|d| d.join(name))
    }

    fn require_out(&self, name: &str) -> Result<PathBuf> {
        self.out_path(name)
            .ok_or_else(|| CliError::Usage(format!("{} requires --out", self.manifest.command)))
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<Option<PathBuf>> {
        let Some(path) = self.out_path(name) else { return Ok(None) };
        let text = serde_json::to_string_pretty(value).map_err(pqflex::Error::from)?;
        std::fs::write(&path, text).map_err(|source| pqflex::Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.manifest.add_output(&path)?;
        Ok(Some(path))
    }

    fn record(&mut self, path: &Path) -> Result<()> {
        Ok(self.manifest.add_output(path)?)
    }

    fn finish(self) -> Result<()> {
        if let Some(out) = &self.out {
            self.manifest
                .write(&out.join(format!("manifest-{}.json", self.manifest.command)))?;
        }
        Ok(())
    }

    fn load_samples(&mut self, path: &Path) -> Result<SampleSet> {
        let text = std::fs::read_to_string(path).map_err(|source| pqflex::Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let set: SampleSet = serde_json::from_str(&text).map_err(pqflex::Error::from)?;
        self.manifest.add_input(path)?;
        Ok(set)
    }

    fn load_agent(&mut self, path: &Path) -> Result<Mlp> {
        let file = load_model(path)?;
        self.check_hash(path, file.config_hash.as_deref());
        self.manifest.add_input(path)?;
        Ok(file.model)
    }

    fn load_n1(&mut self, path: &Path) -> Result<N1Approximator> {
        let file = load_approximator::<N1Approximator>(path)?;
        self.check_hash(path, file.config_hash.as_deref());
        self.manifest.add_input(path)?;
        Ok(file.approximator)
    }

    fn load_ppf(&mut self, path: &Path) -> Result<PpfApproximator> {
        let file = load_approximator::<PpfApproximator>(path)?;
        self.check_hash(path, file.config_hash.as_deref());
        self.manifest.add_input(path)?;
        Ok(file.approximator)
    }

    fn check_hash(&self, path: &Path, hash: Option<&str>) {
        if hash.is_some_and(|h| h != self.config_hash) {
            log::warn!("{} was trained under a different configuration", path.display());
        }
    }
}

pub fn run(cli: Cli, args: &[String]) -> Result<()> {
    let name = cli.command.name();
    match cli.command {
        Command::GenGrid { preset, common } => gen_grid(preset, &common),
        Command::Pf { common, step } => pf(Ctx::new(&common, name, args)?, step.step),
        Command::N1 { common, step } => n1(Ctx::new(&common, name, args)?, step.step),
        Command::Ppf { common, step } => ppf(Ctx::new(&common, name, args)?, step.step),
        Command::GenSamples { common } => gen_samples(Ctx::new(&common, name, args)?),
        Command::TrainStage1 {
            common,
            samples,
            unpenalized,
        } => stage1(Ctx::new(&common, name, args)?, &samples, unpenalized),
        Command::TrainApprox {
            common,
            samples,
            model,
            mode,
        } => approx(Ctx::new(&common, name, args)?, &samples, model.as_deref(), mode),
        Command::TrainStage2 {
            common,
            samples,
            model,
            n1,
            ppf,
        } => stage2(Ctx::new(&common, name, args)?, &samples, &model, &n1, &ppf),
        Command::EstimateArea {
            common,
            step,
            model,
            n1,
            ppf,
            n,
        } => estimate(Ctx::new(&common, name, args)?, step.step, &model, n1.as_deref(), ppf.as_deref(), n),
        Command::VerifyArea { common, step, area } => verify(Ctx::new(&common, name, args)?, step.step, &area),
        Command::Baseline {
            common,
            step,
            mode,
            r_p,
            r_q,
        } => baseline(Ctx::new(&common, name, args)?, step.step, mode, r_p, r_q),
        Command::Bench {
            common,
            step,
            model,
            n1,
            ppf,
            n,
            baseline_points,
        } => bench(
            Ctx::new(&common, name, args)?,
            step.step,
            model.as_deref(),
            n1.as_deref(),
            ppf.as_deref(),
            n,
            baseline_points,
        ),
    }
}

fn gen_grid(preset: Preset, common: &Common) -> Result<()> {
    let out = common
        .out
        .as_ref()
        .ok_or_else(|| CliError::Usage("gen-grid requires --out".into()))?;
    let mut spec = match preset {
        Preset::Hv30 => SynthSpec::hv30(),
        Preset::Hv100 => SynthSpec::hv100(),
    };
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    let (network, profiles) = synthetic_grid(&spec);
    save_grid(
        out,
        &GridBundle {
            network,
            profiles: Some(profiles),
        },
    )?;
    println!("wrote {}", out.display());
    Ok(())
}

fn base_scenario(net: &Network) -> Result<Scenario> {
    let (p, q) = aggregate_injections(net);
    Ok(Scenario {
        p_inj: p,
        q_inj: q,
        slack_v_pu: net.ext_grid.v_pu,
        admittances: Arc::new(build_admittances(net, None)?),
    })
}

#[derive(Serialize)]
struct PfOutput {
    converged: bool,
    iterations: usize,
    max_mismatch: f64,
    vm_pu: Vec<f64>,
    va_deg: Vec<f64>,
    lp: Vec<f64>,
    interface_p_mw: f64,
    interface_q_mvar: f64,
}

fn pf(mut ctx: Ctx, step: Option<usize>) -> Result<()> {
    let net = ctx.network_at(step)?;
    let sc = base_scenario(&net)?;
    let r = solve(&sc, None)?;
    println!(
        "converged: {}  iterations: {}  max mismatch: {:.3e} pu",
        r.converged, r.iterations, r.max_mismatch
    );
    println!("{:>5} {:>10} {:>10} {:>10} {:>10}", "bus", "vm_pu", "va_deg", "p_mw", "q_mvar");
    for (i, v) in r.v.iter().enumerate() {
        println!(
            "{i:>5} {:>10.5} {:>10.4} {:>10.3} {:>10.3}",
            v.norm(),
            v.arg().to_degrees(),
            sc.p_inj[i] * net.base_mva,
            sc.q_inj[i] * net.base_mva
        );
    }
    println!("{:>6} {:>10} {:>5} {:>5} {:>8}", "branch", "element", "from", "to", "lp_%");
    for (k, lp) in r.lp.iter().enumerate() {
        println!(
            "{k:>6} {:>10} {:>5} {:>5} {:>8.2}",
            net.branch_ref(k).to_string(),
            sc.admittances.branch_from[k],
            sc.admittances.branch_to[k],
            lp
        );
    }
    println!(
        "interface: P = {:.3} MW, Q = {:.3} Mvar",
        r.interface_p_mw, r.interface_q_mvar
    );
    let out = PfOutput {
        converged: r.converged,
        iterations: r.iterations,
        max_mismatch: r.max_mismatch,
        vm_pu: r.vm(),
        va_deg: r.v.iter().map(|v| v.arg().to_degrees()).collect(),
        lp: r.lp.clone(),
        interface_p_mw: r.interface_p_mw,
        interface_q_mvar: r.interface_q_mvar,
    };
    ctx.write_json("pf.json", &out)?;
    ctx.finish()?;
    if !r.converged {
        return Err(pqflex::error::NumericError::NonConvergence(r.diagnostic.unwrap_or_default()).into());
    }
    Ok(())
}

fn n1(mut ctx: Ctx, step: Option<usize>) -> Result<()> {
    let net = ctx.network_at(step)?;
    let sc = base_scenario(&net)?;
    let report = n1_analysis(&net, &sc, ctx.cfg.limits.lp_max)?;
    println!(
        "{} contingency cases, {} non-converged, violation: {}",
        report.cases.len(),
        report.nonconverged_cases.len(),
        report.any_violation
    );
    println!("{:>5} {:>8} {:>8} {:>8}", "line", "lp_n0", "lp_n1", "worst");
    for (k, &l) in report.line_ids.iter().enumerate() {
        let worst = report.worst_case[k].map_or("-".to_string(), |c| c.to_string());
        println!("{l:>5} {:>8.2} {:>8.2} {worst:>8}", report.lp_n0[k], report.lp_n1[k]);
    }
    ctx.write_json("n1_report.json", &report)?;
    ctx.finish()
}

fn ppf(mut ctx: Ctx, step: Option<usize>) -> Result<()> {
    let net = ctx.network_at(step)?;
    let report = run_mcs(&net, &ctx.cfg.uncertainty)?;
    println!(
        "{} samples ({} non-converged), aggregate violation probability {:.4}",
        report.n_samples, report.n_nonconverged, report.aggregate_prob
    );
    println!("{:>5} {:>8} {:>8} {:>8}", "bus", "prob", "mean_v", "std_v");
    for (i, p) in report.viol_prob.iter().enumerate() {
        println!("{i:>5} {p:>8.4} {:>8.5} {:>8.5}", report.mean_v[i], report.std_v[i]);
    }
    ctx.write_json("ppf_report.json", &report)?;
    ctx.finish()
}

fn gen_samples(mut ctx: Ctx) -> Result<()> {
    let env = ctx.env()?;
    let profiles = ctx
        .bundle
        .profiles
        .clone()
        .ok_or_else(|| CliError::Usage("gen-samples needs a grid with profiles.csv".into()))?;
    let set = generate_samples(
        &env,
        &profiles,
        ctx.cfg.samples.n_req_per_step,
        ctx.cfg.samples.noise,
        ctx.cfg.training.seed,
    )?;
    println!("{} samples, {} dropped", set.samples.len(), set.dropped);
    ctx.require_out("samples.json")?;
    ctx.write_json("samples.json", &set)?;
    ctx.finish()
}

fn stage1(mut ctx: Ctx, samples: &Path, unpenalized: bool) -> Result<()> {
    let env = ctx.env()?;
    let set = ctx.load_samples(samples)?;
    let name = if unpenalized { "unpenalized" } else { "stage1" };
    let out = ctx.require_out(&format!("{name}.json"))?;
    let cfg = if unpenalized {
        AugLossConfig::unpenalized()
    } else {
        ctx.cfg.loss_config()
    };
    let mut model = new_opf_model(&env, &set.samples, &ctx.cfg.annopf.hidden, ctx.cfg.training.seed)?;
    let stats = train_stage1(&mut model, &env, &set.samples, &cfg, &ctx.cfg.stage1_train())?;
    if let Some(last) = stats.last() {
        println!(
            "epoch {}: loss {:.4}, objective {:.4}, l_v {:.4}, l_lp {:.3}",
            last.epoch, last.mean_loss, last.mean_objective, last.mean_l_v, last.mean_l_lp
        );
    }
    save_model(&out, &model, Some(&ctx.config_hash))?;
    ctx.record(&out)?;
    let tel = ctx.require_out(&format!("telemetry_{name}.csv"))?;
    let _ = std::fs::remove_file(&tel);
    write_telemetry(&tel, &stats)?;
    ctx.record(&tel)?;
    ctx.finish()
}

#[derive(Serialize)]
struct ApproxReport {
    mode: SampleMode,
    n1_train_rows: usize,
    n1_test_rows: usize,
    ppf_train_rows: usize,
    ppf_test_rows: usize,
    dropped_nonconverged: usize,
    dropped_n1_infinite: usize,
    n1_test: ApproxMetrics,
    ppf_test: ApproxMetrics,
    n1_loss_history: Vec<f64>,
    ppf_loss_history: Vec<f64>,
}

fn approx(mut ctx: Ctx, samples: &Path, model: Option<&Path>, mode: ModeArg) -> Result<()> {
    let env = ctx.env()?;
    let set = ctx.load_samples(samples)?;
    let mode = match mode {
        ModeArg::OnSample => SampleMode::OnSample,
        ModeArg::OffSample => SampleMode::OffSample,
    };
    let agent = model.map(|p| ctx.load_agent(p)).transpose()?;
    if mode == SampleMode::OnSample && agent.is_none() {
        return Err(CliError::Usage("on-sample datasets require --model".into()));
    }
    ctx.require_out("n1.json")?;
    let cfg = ctx.cfg.clone();
    let ac = &cfg.approximators;
    let ds = build_datasets(
        &env,
        &set.samples,
        agent.as_ref(),
        mode,
        &cfg.uncertainty,
        cfg.limits.lp_max,
        ac.n1_feature,
        ac.ppf_feature,
    )?;
    let seed = ac.train.seed;
    let (n1_tr, n1_te) = split_indices(ds.n1.inputs.len(), ac.train_frac, seed);
    let (ppf_tr, ppf_te) = split_indices(ds.ppf.inputs.len(), ac.train_frac, seed);
    let (n1_model, n1_hist) = train_n1(&ds.n1.subset(&n1_tr), ac)?;
    let (ppf_model, ppf_hist) = train_ppf(&ds.ppf.subset(&ppf_tr), ac)?;
    let report = ApproxReport {
        mode,
        n1_train_rows: n1_tr.len(),
        n1_test_rows: n1_te.len(),
        ppf_train_rows: ppf_tr.len(),
        ppf_test_rows: ppf_te.len(),
        dropped_nonconverged: ds.dropped_nonconverged,
        dropped_n1_infinite: ds.n1.dropped_infinite,
        n1_test: n1_model.evaluate(&ds.n1.subset(&n1_te), cfg.limits.lp_max)?,
        ppf_test: ppf_model.evaluate(&ds.ppf.subset(&ppf_te), cfg.penalties.prob_threshold)?,
        n1_loss_history: n1_hist,
        ppf_loss_history: ppf_hist,
    };
    println!(
        "N-1: MAE {:.3} pp, classification {:.4}; PPF: MAE {:.3} pp, classification {:.4}",
        report.n1_test.mae, report.n1_test.class_success, report.ppf_test.mae, report.ppf_test.class_success
    );
    for (name, a) in [("n1.json", true), ("ppf.json", false)] {
        let path = ctx.require_out(name)?;
        if a {
            save_approximator(&path, &n1_model, Some(&ctx.config_hash))?;
        } else {
            save_approximator(&path, &ppf_model, Some(&ctx.config_hash))?;
        }
        ctx.record(&path)?;
    }
    let n1_csv = ctx.require_out("n1_dataset.csv")?;
    save_dataset(
        &n1_csv,
        &ds.n1.inputs,
        &ds.n1.labels,
        &DatasetSidecar {
            kind: "n1".into(),
            feature: format!("{:?}", ds.n1.feature).to_lowercase(),
            mode,
            n_rows: ds.n1.inputs.len(),
            n_inputs: ds.n1.inputs.first().map_or(0, Vec::len),
            n_labels: ds.n1.line_ids.len(),
            seed: cfg.uncertainty.seed,
            dropped: ds.dropped_nonconverged + ds.n1.dropped_infinite,
            line_ids: Some(ds.n1.line_ids.clone()),
            sample_index: ds.n1.sample_index.clone(),
        },
    )?;
    let ppf_csv = ctx.require_out("ppf_dataset.csv")?;
    save_dataset(
        &ppf_csv,
        &ds.ppf.inputs,
        &ds.ppf.labels,
        &DatasetSidecar {
            kind: "ppf".into(),
            feature: format!("{:?}", ds.ppf.feature).to_lowercase(),
            mode,
            n_rows: ds.ppf.inputs.len(),
            n_inputs: ds.ppf.inputs.first().map_or(0, Vec::len),
            n_labels: env.network.n_bus(),
            seed: cfg.uncertainty.seed,
            dropped: ds.dropped_nonconverged,
            line_ids: None,
            sample_index: ds.ppf.sample_index.clone(),
        },
    )?;
    for p in [&n1_csv, &ppf_csv] {
        ctx.record(p)?;
        ctx.record(&p.with_extension("json"))?;
    }
    ctx.write_json("approx_metrics.json", &report)?;
    ctx.finish()
}

fn stage2(mut ctx: Ctx, samples: &Path, model: &Path, n1: &Path, ppf: &Path) -> Result<()> {
    let env = ctx.env()?;
    let set = ctx.load_samples(samples)?;
    let mut agent = ctx.load_agent(model)?;
    let n1 = ctx.load_n1(n1)?;
    let ppf = ctx.load_ppf(ppf)?;
    let out = ctx.require_out("stage2.json")?;
    let stats = train_stage2(
        &mut agent,
        &env,
        &set.samples,
        &n1,
        &ppf,
        &ctx.cfg.loss_config(),
        &ctx.cfg.stage2_train(),
    )?;
    if let Some(last) = stats.last() {
        println!(
            "epoch {}: loss {:.4}, marked lines {}, marked buses {}",
            last.epoch, last.mean_loss, last.marked_lines, last.marked_buses
        );
    }
    save_model(&out, &agent, Some(&ctx.config_hash))?;
    ctx.record(&out)?;
    let tel = ctx.require_out("telemetry_stage2.csv")?;
    let _ = std::fs::remove_file(&tel);
    write_telemetry(&tel, &stats)?;
    ctx.record(&tel)?;
    ctx.finish()
}

fn screens(
    ctx: &mut Ctx,
    n1: Option<&Path>,
    ppf: Option<&Path>,
) -> Result<(Box<dyn N1Screen>, Box<dyn PpfScreen>)> {
    let n1: Box<dyn N1Screen> = match n1 {
        Some(p) => Box::new(ctx.load_n1(p)?),
        None => {
            log::warn!("no N-1 approximator given; N-1 screening disabled");
            Box::new(NoScreen)
        }
    };
    let ppf: Box<dyn PpfScreen> = match ppf {
        Some(p) => Box::new(ctx.load_ppf(p)?),
        None => {
            log::warn!("no PPF approximator given; probabilistic screening disabled");
            Box::new(NoScreen)
        }
    };
    Ok((n1, ppf))
}

fn model_hashes(paths: &[Option<&Path>]) -> Result<BTreeMap<String, String>> {
    let mut m = BTreeMap::new();
    for p in paths.iter().flatten() {
        m.insert(p.display().to_string(), hash_file(p)?);
    }
    Ok(m)
}

fn estimate(
    mut ctx: Ctx,
    step: Option<usize>,
    model: &Path,
    n1: Option<&Path>,
    ppf: Option<&Path>,
    n: Option<usize>,
) -> Result<()> {
    let env = ctx.env()?;
    let status = ctx.status(&env, step)?;
    let agent = ctx.load_agent(model)?;
    let (n1s, ppfs) = screens(&mut ctx, n1, ppf)?;
    let n = n.unwrap_or(ctx.cfg.estimation.n);
    let area = predict_area(&env, &status, &agent, n, n1s.as_ref(), ppfs.as_ref(), &ctx.cfg.loss_config())?;
    let mut summary = AreaSummary::new(&area);
    summary.seed = Some(ctx.cfg.training.seed);
    summary.model_hashes = model_hashes(&[Some(model), n1, ppf])?;
    let c = summary.counts;
    println!(
        "{} points: {} feasible, {} hard, {} soft, {} non-convergent; prediction {:.2} ms, postprocessing {:.2} ms",
        summary.n_points,
        c.feasible,
        c.hard_violation,
        c.soft_violation,
        c.non_convergent,
        summary.prediction_ms,
        summary.postprocessing_ms
    );
    let csv = ctx.require_out("area.csv")?;
    write_area_csv(&csv, &area)?;
    ctx.record(&csv)?;
    ctx.write_json("area.json", &area)?;
    ctx.write_json("area_summary.json", &summary)?;
    ctx.finish()
}

fn verify(mut ctx: Ctx, step: Option<usize>, area: &Path) -> Result<()> {
    let env = ctx.env()?;
    let status = ctx.status(&env, step)?;
    let text = std::fs::read_to_string(area).map_err(|source| pqflex::Error::Io {
        path: area.display().to_string(),
        source,
    })?;
    let area_v: PqArea = serde_json::from_str(&text).map_err(pqflex::Error::from)?;
    ctx.manifest.add_input(area)?;
    let report = verify_area(&env, &status, &area_v, &ctx.cfg.uncertainty, &ctx.cfg.loss_config())?;
    println!(
        "{} hard-feasible points checked: false-feasible rate {:.4} ({}/{}), false-infeasible rate {:.4} ({}/{})",
        report.n_hard_feasible,
        report.false_feasible_rate,
        report.false_feasible,
        report.n_feasible,
        report.false_infeasible_rate,
        report.false_infeasible,
        report.n_soft
    );
    ctx.write_json("verify.json", &report)?;
    ctx.finish()
}

fn baseline(mut ctx: Ctx, step: Option<usize>, mode: BaselineArg, r_p: Option<f64>, r_q: Option<f64>) -> Result<()> {
    let env = ctx.env()?;
    let status = ctx.status(&env, step)?;
    let bounds = env.flex_bounds(&status)?;
    let mode = match mode {
        BaselineArg::MaxP => BaselineMode::MaxP,
        BaselineArg::MaxQ => BaselineMode::MaxQ,
        BaselineArg::MinQ => BaselineMode::MinQ,
        BaselineArg::Requirement => {
            let (Some(p), Some(q)) = (r_p, r_q) else {
                return Err(CliError::Usage("requirement mode needs --r-p and --r-q".into()));
            };
            if !((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&q)) {
                return Err(CliError::Usage("--r-p and --r-q must lie in [0, 1]".into()));
            }
            BaselineMode::Requirement(PqRequirement::resolve(p, q, &bounds))
        }
    };
    let r = baseline_optimize(&env, &status, &bounds, mode, &ctx.cfg.loss_config(), &ctx.cfg.baseline)?;
    println!(
        "interface P = {:.3} MW, Q = {:.3} Mvar, feasible: {}, loss {:.5}",
        r.interface_p_mw, r.interface_q_mvar, r.feasible, r.loss.total
    );
    for (k, &i) in env.controllable.iter().enumerate() {
        println!(
            "der {i:>3}: P = {:>8.3} MW (avail {:>8.3}), Q = {:>8.3} Mvar",
            r.setpoints.p_mw[k], status.der_p_avail_mw[i], r.setpoints.q_mvar[k]
        );
    }
    ctx.write_json("baseline.json", &r)?;
    ctx.finish()
}

#[derive(Serialize)]
struct BenchReport {
    n: usize,
    n_points: usize,
    prediction_ms: f64,
    postprocessing_ms: f64,
    total_ms: f64,
    /// Batch prediction time per requirement point.
    prediction_ms_per_point: f64,
    /// Single forward pass plus action scaling, averaged.
    single_prediction_ms: f64,
    baseline_points: usize,
    baseline_ms_per_point: f64,
    /// Baseline per point over ANN prediction per point.
    speedup: f64,
    /// Baseline per point over prediction plus postprocessing per point.
    speedup_with_postprocessing: f64,
    threads: usize,
}

#[allow(clippy::too_many_arguments)]
fn bench(
    mut ctx: Ctx,
    step: Option<usize>,
    model: Option<&Path>,
    n1: Option<&Path>,
    ppf: Option<&Path>,
    n: Option<usize>,
    baseline_points: usize,
) -> Result<()> {
    let env = ctx.env()?;
    let status = ctx.status(&env, step)?;
    let cfg = ctx.cfg.clone();
    let agent = match model {
        Some(p) => ctx.load_agent(p)?,
        None => untrained_agent(&env, &cfg)?,
    };
    let (n1s, ppfs): (Box<dyn N1Screen>, Box<dyn PpfScreen>) = match (n1, ppf) {
        (None, None) => untrained_screens(&env, &status, &cfg)?,
        _ => screens(&mut ctx, n1, ppf)?,
    };
    let n = n.unwrap_or(cfg.estimation.n);
    let loss = cfg.loss_config();
    let area = predict_area(&env, &status, &agent, n, n1s.as_ref(), ppfs.as_ref(), &loss)?;

    let reps = 200;
    let t = Instant::now();
    for k in 0..reps {
        let r = (k as f64) / reps as f64;
        let a = agent.predict(&status.features(r, 1.0 - r))?;
        std::hint::black_box(env.scale_actions(&a, &status)?);
    }
    let single_prediction_ms = t.elapsed().as_secs_f64() * 1e3 / reps as f64;

    let grid = requirement_grid(n)?;
    let stride = (grid.len() / baseline_points.max(1)).max(1);
    let t = Instant::now();
    let mut timed = 0;
    for &(r_p, r_q) in grid.iter().step_by(stride).take(baseline_points) {
        let req = PqRequirement::resolve(r_p, r_q, &area.bounds);
        baseline_optimize(&env, &status, &area.bounds, BaselineMode::Requirement(req), &loss, &cfg.baseline)?;
        timed += 1;
    }
    let baseline_ms_per_point = if timed > 0 {
        t.elapsed().as_secs_f64() * 1e3 / timed as f64
    } else {
        f64::NAN
    };
    let n_points = area.points.len();
    let per_point = area.prediction_ms / n_points as f64;
    let report = BenchReport {
        n,
        n_points,
        prediction_ms: area.prediction_ms,
        postprocessing_ms: area.postprocessing_ms,
        total_ms: area.prediction_ms + area.postprocessing_ms,
        prediction_ms_per_point: per_point,
        single_prediction_ms,
        baseline_points: timed,
        baseline_ms_per_point,
        speedup: baseline_ms_per_point / per_point,
        speedup_with_postprocessing: baseline_ms_per_point * n_points as f64
            / (area.prediction_ms + area.postprocessing_ms),
        threads: rayon::current_num_threads(),
    };
    println!("{}", serde_json::to_string_pretty(&report).map_err(pqflex::Error::from)?);
    ctx.write_json("bench.json", &report)?;
    ctx.finish()
}

/// An agent of the configured architecture with fresh weights; timing does
/// not depend on the weights.
fn untrained_agent(env: &OpfEnv, cfg: &RunConfig) -> Result<Mlp> {
    let mut sizes = vec![env.n_features()];
    sizes.extend_from_slice(&cfg.annopf.hidden);
    sizes.push(env.n_actions());
    let mut m = Mlp::new(&sizes, Activation::Relu, Activation::Tanh, cfg.training.seed)?;
    m.standardizer = Standardizer::identity(env.n_features());
    Ok(m)
}

fn untrained_screens(
    env: &OpfEnv,
    status: &GridStatus,
    cfg: &RunConfig,
) -> Result<(Box<dyn N1Screen>, Box<dyn PpfScreen>)> {
    use pqflex::approximators::{n1_features, ppf_features};
    use pqflex::contingency::ContingencySet;
    let cases = ContingencySet::new(&env.network).map_err(CliError::Core)?;
    let sc = env.scenario(status, &env.natural_setpoints(status))?;
    let r = solve(&sc, None)?;
    let ac = &cfg.approximators;
    let n1_in = n1_features(ac.n1_feature, &cases.line_ids, &sc, &r).len();
    let ppf_in = ppf_features(ac.ppf_feature, &sc, &r).len();
    let seed = cfg.training.seed;
    let mut n1 = Mlp::new(&[n1_in, ac.hidden, cases.line_ids.len()], Activation::Relu, Activation::Identity, seed)?;
    n1.standardizer = Standardizer::identity(n1_in);
    let mut ppf = Mlp::new(&[ppf_in, ac.hidden, env.network.n_bus()], Activation::Relu, Activation::Sigmoid, seed)?;
    ppf.standardizer = Standardizer::identity(ppf_in);
    Ok((
        Box::new(N1Approximator {
            model: n1,
            feature: ac.n1_feature,
            line_ids: cases.line_ids,
        }),
        Box::new(PpfApproximator {
            model: ppf,
            feature: ac.ppf_feature,
        }),
    ))
}
