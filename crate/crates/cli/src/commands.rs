//! One function per subcommand. Each writes only inside the context's output
//! directory and returns what it wrote.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde_json::json;
use tclab_core::exec::{init_workers, Exec};
use tclab_core::learn::{self, HeldoutMetrics, LossRow};
use tclab_core::nets::{CriticModel, GeneratorModel, TransformerConfig};
use tclab_core::rng::stream;
use tclab_core::sampler::{self, candidates_for_rate, Predictor, Sampler, SamplerConfig, Selector};
use tclab_core::tokenspace::{ClassLabel, TokenGrid};
use tclab_core::worlds::{MetricsRecord, SyntheticWorld};

use crate::artifacts::{self, fmt_f64, Meta, Table};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::stats::{median, SignTest};

pub const GENERATOR_FILE: &str = "generator.tclw";
pub const CRITIC_FILE: &str = "critic.tclw";

/// Resolved configuration for one invocation.
pub struct Context {
    pub config: RunConfig,
    pub world: SyntheticWorld,
    pub seed: u64,
    pub out: PathBuf,
    pub exec: Exec,
    pub hash: String,
}

impl Context {
    /// Applies flag overrides, validates, and sizes the worker pool
    /// (`workers == 0` keeps the default).
    pub fn new(mut config: RunConfig, seed: Option<u64>, out: Option<PathBuf>, workers: usize) -> CliResult<Self> {
        if let Some(s) = seed {
            config.seed = s;
        }
        if let Some(o) = out {
            config.output_dir = o;
        }
        let world = config.validate()?;
        init_workers(workers);
        Ok(Context {
            seed: config.seed,
            out: config.output_dir.clone(),
            hash: config.hash(),
            exec: Exec::with_workers(workers),
            world,
            config,
        })
    }

    pub fn meta(&self) -> Meta {
        Meta::new(&self.hash, self.seed)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        artifacts::artifact(&self.out, name)
    }

    fn provenance(&self, command: &str, extra: serde_json::Value) -> serde_json::Value {
        let mut v = json!({
            "command": command,
            "format_version": artifacts::FORMAT_VERSION,
            "config_hash": self.hash,
            "seed": self.seed,
        });
        if let (Some(map), serde_json::Value::Object(more)) = (v.as_object_mut(), extra) {
            map.extend(more);
        }
        v
    }

    fn sampler_config(&self, selector: Selector, steps: Option<usize>, seed: u64) -> SamplerConfig {
        let mut cfg = self.config.sampler.clone();
        cfg.selector = selector;
        cfg.seed = seed;
        if let Some(t) = steps {
            cfg.schedule = cfg.schedule.with_steps(t);
        }
        cfg
    }

    fn class(&self, c: usize) -> CliResult<ClassLabel> {
        if c >= self.world.num_classes() {
            return Err(CliError::Config(format!("class {c} is not below {}", self.world.num_classes())));
        }
        Ok(ClassLabel(c))
    }

    /// A fixed class, or classes drawn from the prior with stream "class".
    fn classes(&self, n: usize, class: Option<usize>) -> CliResult<Vec<ClassLabel>> {
        match class {
            Some(c) => Ok(vec![self.class(c)?; n]),
            None => {
                let prior = self.world.class_prior();
                Ok((0..n as u64)
                    .map(|i| {
                        let u: f64 = stream(self.seed, "class", i).gen();
                        let mut acc = 0.0;
                        let c = prior.iter().position(|&p| {
                            acc += p;
                            u < acc
                        });
                        ClassLabel(c.unwrap_or(prior.len() - 1))
                    })
                    .collect())
            }
        }
    }
}

fn check_dims(cfg: &TransformerConfig, world: &SyntheticWorld, path: &Path) -> CliResult<()> {
    let want = (world.positions(), world.vocab().size(), world.num_classes());
    let got = (cfg.positions, cfg.codebook, cfg.num_classes);
    if want != got {
        return Err(CliError::Config(format!(
            "{}: model has (positions, codebook, classes) = {got:?}, world has {want:?}",
            path.display()
        )));
    }
    Ok(())
}

pub fn load_generator(path: &Path, world: &SyntheticWorld) -> CliResult<GeneratorModel> {
    let model = GeneratorModel::load(path).map_err(|source| CliError::Checkpoint {
        path: path.to_path_buf(),
        source,
    })?;
    check_dims(model.config(), world, path)?;
    Ok(model)
}

pub fn load_critic(path: &Path, world: &SyntheticWorld) -> CliResult<CriticModel> {
    let model = CriticModel::load(path).map_err(|source| CliError::Checkpoint {
        path: path.to_path_buf(),
        source,
    })?;
    check_dims(model.config(), world, path)?;
    Ok(model)
}

fn loss_table(rows: &[LossRow]) -> Table {
    let mut t = Table::new(&["step", "split", "metric", "value"]);
    for r in rows {
        t.push(vec![r.step.to_string(), r.split.clone(), r.metric.clone(), fmt_f64(r.value)]);
    }
    t
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub steps_run: usize,
    pub best_step: usize,
    pub heldout: HeldoutMetrics,
    /// Class-marginal masked entropy on the same held-out set (generators).
    pub baseline: Option<f64>,
}

pub fn train_generator(ctx: &Context) -> CliResult<TrainReport> {
    artifacts::ensure_dir(&ctx.out)?;
    let mut cfg = ctx.config.train_generator.clone();
    cfg.seed = ctx.seed;
    let outcome = learn::train_generator(&ctx.world, &ctx.config.generator, &cfg, ctx.exec, |_, _, _| Ok(()))?;
    let heldout = learn::evaluate_generator(&outcome.model, &ctx.world, &cfg, ctx.exec)?;
    let baseline = learn::factorized_baseline(&ctx.world, &cfg)?;
    let checkpoint = ctx.path(GENERATOR_FILE);
    let provenance = ctx.provenance(
        "train-generator",
        json!({
            "steps_run": outcome.steps_run,
            "best_step": outcome.best_step,
            "skipped_steps": outcome.skipped_steps,
            "heldout_masked_ce": heldout.loss,
            "factorized_baseline": baseline,
        }),
    );
    outcome.model.save(&checkpoint, provenance)?;
    artifacts::write_csv(&ctx.path("generator_loss.csv"), &ctx.meta(), &loss_table(&outcome.trace))?;
    Ok(TrainReport {
        checkpoint,
        steps_run: outcome.steps_run,
        best_step: outcome.best_step,
        heldout,
        baseline: Some(baseline),
    })
}

pub fn train_critic(ctx: &Context, generator: &Path) -> CliResult<TrainReport> {
    let gen = load_generator(generator, &ctx.world)?;
    artifacts::ensure_dir(&ctx.out)?;
    let mut cfg = ctx.config.train_critic.clone();
    cfg.seed = ctx.seed;
    let predictor = Predictor::Model(&gen);
    let outcome = learn::train_critic(predictor, &ctx.world, &ctx.config.critic, &cfg, ctx.exec, |_, _, _| Ok(()))?;
    let heldout = learn::evaluate_critic(&outcome.model, predictor, &ctx.world, &cfg, ctx.exec)?;
    let checkpoint = ctx.path(CRITIC_FILE);
    let provenance = ctx.provenance(
        "train-critic",
        json!({
            "generator_checksum": gen.net().params().checksum(),
            "steps_run": outcome.steps_run,
            "best_step": outcome.best_step,
            "heldout_bce": heldout.loss,
            "heldout_auc": heldout.auc,
        }),
    );
    outcome.model.save(&checkpoint, provenance)?;
    artifacts::write_csv(&ctx.path("critic_loss.csv"), &ctx.meta(), &loss_table(&outcome.trace))?;
    Ok(TrainReport {
        checkpoint,
        steps_run: outcome.steps_run,
        best_step: outcome.best_step,
        heldout,
        baseline: None,
    })
}

/// Where predictions come from when sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictorKind {
    Model,
    /// Exact per-position conditionals of the world.
    Oracle,
}

impl std::str::FromStr for PredictorKind {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "model" => Ok(PredictorKind::Model),
            "oracle" => Ok(PredictorKind::Oracle),
            other => Err(CliError::Config(format!("unknown predictor `{other}`"))),
        }
    }
}

/// Checkpoint paths; missing entries default to the output directory.
#[derive(Clone, Debug, Default)]
pub struct ModelPaths {
    pub generator: Option<PathBuf>,
    pub critic: Option<PathBuf>,
}

/// Models loaded for a sampling command.
pub struct Models {
    pub generator: Option<GeneratorModel>,
    pub critic: Option<CriticModel>,
}

impl Models {
    /// Loads what `selectors` need under `predictor`.
    pub fn load(ctx: &Context, paths: &ModelPaths, predictor: PredictorKind, selectors: &[Selector]) -> CliResult<Self> {
        let needs_model = predictor == PredictorKind::Model && selectors.iter().any(|&s| s != Selector::OracleConditional);
        let needs_critic = selectors.contains(&Selector::Critic);
        let generator = match needs_model {
            true => Some(load_generator(&paths.generator.clone().unwrap_or_else(|| ctx.path(GENERATOR_FILE)), &ctx.world)?),
            false => None,
        };
        let critic = match needs_critic {
            true => Some(load_critic(&paths.critic.clone().unwrap_or_else(|| ctx.path(CRITIC_FILE)), &ctx.world)?),
            false => None,
        };
        Ok(Models { generator, critic })
    }

    pub fn sampler<'a>(&'a self, world: &'a SyntheticWorld, selector: Selector) -> CliResult<Sampler<'a>> {
        let predictor = match (&self.generator, selector) {
            (_, Selector::OracleConditional) | (None, _) => Predictor::Oracle(world),
            (Some(g), _) => Predictor::Model(g),
        };
        Ok(Sampler::new(predictor, self.critic.as_ref(), selector)?.with_shape(world.shape())?)
    }
}

#[derive(Clone, Debug)]
pub struct SampleArgs {
    pub models: ModelPaths,
    pub predictor: PredictorKind,
    pub selector: Selector,
    pub n: usize,
    pub class: Option<usize>,
    pub steps: Option<usize>,
    pub trace: bool,
}

/// Writes `samples.jsonl` (and `traces.jsonl` with `trace`).
pub fn sample(ctx: &Context, args: &SampleArgs) -> CliResult<PathBuf> {
    let models = Models::load(ctx, &args.models, args.predictor, &[args.selector])?;
    let sampler = models.sampler(&ctx.world, args.selector)?;
    let classes = ctx.classes(args.n, args.class)?;
    let cfg = ctx.sampler_config(args.selector, args.steps, ctx.seed);
    let runs = sampler::generate_runs(&sampler, &classes, &cfg, ctx.exec, args.trace)?;
    artifacts::ensure_dir(&ctx.out)?;
    if args.trace {
        let steps: Vec<serde_json::Value> = runs
            .iter()
            .enumerate()
            .flat_map(|(i, (_, tr))| tr.steps.iter().map(move |s| s.to_json(i as u64)))
            .collect();
        artifacts::write_jsonl(&ctx.path("traces.jsonl"), &ctx.meta(), &steps)?;
    }
    let samples: Vec<(TokenGrid, ClassLabel)> = runs.into_iter().map(|(g, _)| g).zip(classes).collect();
    let path = ctx.path("samples.jsonl");
    artifacts::write_samples(&path, &ctx.meta(), &samples)?;
    Ok(path)
}

const METRIC_COLUMNS: [&str; 7] = [
    "joint_tv",
    "forward_cross_entropy",
    "plugin_kl",
    "marginal_tv",
    "distinct_ratio",
    "class_consistency",
    "samples",
];

fn metric_cells(m: &MetricsRecord) -> Vec<String> {
    vec![
        fmt_f64(m.joint_tv),
        fmt_f64(m.forward_cross_entropy),
        fmt_f64(m.plugin_kl),
        fmt_f64(m.marginal_tv),
        fmt_f64(m.distinct_ratio),
        fmt_f64(m.class_consistency),
        m.samples.to_string(),
    ]
}

fn with_metrics(lead: &[&str]) -> Table {
    let header: Vec<&str> = lead.iter().copied().chain(METRIC_COLUMNS).collect();
    Table::new(&header)
}

/// The single class of `samples`; mixed input is a config error.
fn single_class(samples: &[(TokenGrid, ClassLabel)], expected: Option<usize>) -> CliResult<ClassLabel> {
    let first = samples.first().map(|s| s.1).ok_or_else(|| CliError::Config("samples file holds no grids".into()))?;
    if let Some(other) = samples.iter().map(|s| s.1).find(|&c| c != first) {
        return Err(CliError::Config(format!("samples mix classes {} and {}", first.0, other.0)));
    }
    if let Some(c) = expected {
        if c != first.0 {
            return Err(CliError::Config(format!("samples are class {}, not {c}", first.0)));
        }
    }
    Ok(first)
}

/// Compares a samples file with the exact joint; writes `metrics.csv`.
pub fn eval(ctx: &Context, samples: &Path, class: Option<usize>) -> CliResult<(PathBuf, MetricsRecord)> {
    let records = artifacts::read_samples(samples, ctx.world.vocab())?;
    let c = single_class(&records, class)?;
    let grids: Vec<TokenGrid> = records.into_iter().map(|r| r.0).collect();
    let m = ctx.world.compare_to_truth(&grids, c)?;
    let mut t = with_metrics(&["class"]);
    let mut row = vec![c.0.to_string()];
    row.extend(metric_cells(&m));
    t.push(row);
    artifacts::ensure_dir(&ctx.out)?;
    let path = ctx.path("metrics.csv");
    artifacts::write_csv(&path, &ctx.meta(), &t)?;
    Ok((path, m))
}

/// Samples `n` grids of class `c` and scores them against the truth.
fn run_metrics(ctx: &Context, models: &Models, selector: Selector, cfg: &SamplerConfig, c: ClassLabel, n: usize, exec: Exec) -> CliResult<MetricsRecord> {
    let sampler = models.sampler(&ctx.world, selector)?;
    let grids: Vec<TokenGrid> = sampler::generate_runs(&sampler, &vec![c; n], cfg, exec, false)?
        .into_iter()
        .map(|r| r.0)
        .collect();
    Ok(ctx.world.compare_to_truth(&grids, c)?)
}

#[derive(Clone, Debug)]
pub struct CompareRow {
    pub seed: u64,
    pub sampler: Selector,
    pub steps: usize,
    pub metrics: MetricsRecord,
}

#[derive(Clone, Debug)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    pub critic_median_tv: f64,
    pub baseline_median_tv: f64,
    pub sign: SignTest,
}

/// Critic sampler at `T` against the confidence baseline at `2T` over the
/// seed grid; writes `compare.csv` and `compare_summary.csv`.
pub fn compare(ctx: &Context, paths: &ModelPaths) -> CliResult<CompareReport> {
    let cc = &ctx.config.compare;
    let models = Models::load(ctx, paths, PredictorKind::Model, &[Selector::Critic, Selector::Confidence])?;
    let c = ctx.class(cc.class)?;
    let mut plan = Vec::new();
    for s in 0..cc.seeds as u64 {
        let seed = ctx.seed.wrapping_add(s);
        plan.push((seed, Selector::Critic, cc.steps));
        plan.push((seed, Selector::Confidence, 2 * cc.steps));
        if cc.oracle_row {
            plan.push((seed, Selector::OracleConditional, ctx.world.positions()));
        }
    }
    let metrics = ctx.exec.try_map(plan.len(), |i| {
        let (seed, selector, steps) = plan[i];
        let cfg = ctx.sampler_config(selector, Some(steps), seed);
        run_metrics(ctx, &models, selector, &cfg, c, cc.samples, Exec::Sequential)
    })?;
    let rows: Vec<CompareRow> = plan
        .into_iter()
        .zip(metrics)
        .map(|((seed, sampler, steps), metrics)| CompareRow {
            seed,
            sampler,
            steps,
            metrics,
        })
        .collect();

    let tv = |sel: Selector| -> Vec<f64> { rows.iter().filter(|r| r.sampler == sel).map(|r| r.metrics.joint_tv).collect() };
    let (critic, baseline) = (tv(Selector::Critic), tv(Selector::Confidence));
    let sign = SignTest::lower(&critic, &baseline);
    let report = CompareReport {
        critic_median_tv: median(&critic),
        baseline_median_tv: median(&baseline),
        sign,
        rows,
    };

    let mut t = with_metrics(&["seed", "sampler", "steps"]);
    for r in &report.rows {
        let mut row = vec![r.seed.to_string(), r.sampler.to_string(), r.steps.to_string()];
        row.extend(metric_cells(&r.metrics));
        t.push(row);
    }
    let mut s = Table::new(&[
        "seeds",
        "critic_median_joint_tv",
        "baseline_median_joint_tv",
        "critic_wins",
        "critic_losses",
        "ties",
        "sign_test_p",
        "unanimous",
    ]);
    s.push(vec![
        cc.seeds.to_string(),
        fmt_f64(report.critic_median_tv),
        fmt_f64(report.baseline_median_tv),
        report.sign.wins.to_string(),
        report.sign.losses.to_string(),
        report.sign.ties.to_string(),
        report.sign.p_value.map(fmt_f64).unwrap_or_else(|| "N/A".into()),
        report.sign.unanimous().to_string(),
    ]);
    artifacts::ensure_dir(&ctx.out)?;
    artifacts::write_csv(&ctx.path("compare.csv"), &ctx.meta(), &t)?;
    artifacts::write_csv(&ctx.path("compare_summary.csv"), &ctx.meta(), &s)?;
    Ok(report)
}

/// Quality/diversity grid over `(b, noise_scale)`, steps and selectors;
/// writes `sweep.csv`.
pub fn sweep(ctx: &Context, paths: &ModelPaths) -> CliResult<Table> {
    let g = &ctx.config.sweep;
    let models = Models::load(ctx, paths, PredictorKind::Model, &g.selectors)?;
    let c = ctx.class(g.class)?;
    let mut plan = Vec::new();
    for &selector in &g.selectors {
        for &steps in &g.steps {
            for &b in &g.temperature_intercepts {
                for &noise in &g.noise_scales {
                    plan.push((selector, steps, b, noise));
                }
            }
        }
    }
    let metrics = ctx.exec.try_map(plan.len(), |i| {
        let (selector, steps, b, noise) = plan[i];
        let mut cfg = ctx.sampler_config(selector, Some(steps), ctx.seed);
        cfg.schedule.temp_intercept = b;
        cfg.schedule.noise_scale = noise;
        run_metrics(ctx, &models, selector, &cfg, c, g.samples, Exec::Sequential)
    })?;
    let mut t = Table::new(&[
        "selector",
        "steps",
        "temperature_intercept",
        "noise_scale",
        "cross_entropy",
        "distinct_ratio",
        "joint_tv",
        "plugin_kl",
    ]);
    for ((selector, steps, b, noise), m) in plan.into_iter().zip(metrics) {
        t.push(vec![
            selector.to_string(),
            steps.to_string(),
            fmt_f64(b),
            fmt_f64(noise),
            fmt_f64(m.forward_cross_entropy),
            fmt_f64(m.distinct_ratio),
            fmt_f64(m.joint_tv),
            fmt_f64(m.plugin_kl),
        ]);
    }
    artifacts::ensure_dir(&ctx.out)?;
    artifacts::write_csv(&ctx.path("sweep.csv"), &ctx.meta(), &t)?;
    Ok(t)
}

/// Mean of `-ln q(x | c)`.
pub fn mean_nll(world: &SyntheticWorld, samples: &[(TokenGrid, ClassLabel)]) -> CliResult<f64> {
    let mut total = 0.0;
    for (g, c) in samples {
        total -= world.prob(g, *c)?.ln();
    }
    Ok(total / samples.len().max(1) as f64)
}

#[derive(Clone, Debug)]
pub struct RefineReport {
    pub path: PathBuf,
    pub nll_before: f64,
    pub nll_after: f64,
}

#[derive(Clone, Debug)]
pub struct RefineArgs {
    pub models: ModelPaths,
    pub ratio: f64,
    pub steps: usize,
    /// Selection noise during refinement; 0 ranks by critic score alone.
    pub noise_scale: f64,
}

/// Refines a samples file; writes `refined.jsonl` and `refine.csv`.
pub fn refine(ctx: &Context, samples: &Path, args: &RefineArgs) -> CliResult<RefineReport> {
    let (ratio, steps) = (args.ratio, args.steps);
    let input = artifacts::read_samples(samples, ctx.world.vocab())?;
    let models = Models::load(ctx, &args.models, PredictorKind::Model, &[Selector::Critic])?;
    let sampler = models.sampler(&ctx.world, Selector::Critic)?;
    let mut cfg = ctx.sampler_config(Selector::Critic, Some(steps), ctx.seed);
    cfg.schedule.noise_scale = args.noise_scale;
    let (grids, classes): (Vec<TokenGrid>, Vec<ClassLabel>) = input.iter().cloned().unzip();
    let refined = sampler::refine_runs(&sampler, &grids, &classes, ratio, &cfg, ctx.exec)?;
    let output: Vec<(TokenGrid, ClassLabel)> = refined.into_iter().zip(classes).collect();
    let report = RefineReport {
        path: ctx.path("refined.jsonl"),
        nll_before: mean_nll(&ctx.world, &input)?,
        nll_after: mean_nll(&ctx.world, &output)?,
    };
    let mut t = Table::new(&["samples", "ratio", "steps", "noise_scale", "mean_nll_before", "mean_nll_after", "delta"]);
    t.push(vec![
        output.len().to_string(),
        fmt_f64(ratio),
        steps.to_string(),
        fmt_f64(args.noise_scale),
        fmt_f64(report.nll_before),
        fmt_f64(report.nll_after),
        fmt_f64(report.nll_after - report.nll_before),
    ]);
    artifacts::ensure_dir(&ctx.out)?;
    artifacts::write_samples(&report.path, &ctx.meta(), &output)?;
    artifacts::write_csv(&ctx.path("refine.csv"), &ctx.meta(), &t)?;
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct RejectArgs {
    pub models: ModelPaths,
    pub selector: Selector,
    pub accept_rate: f64,
    pub n: usize,
    pub class: Option<usize>,
}

/// Keeps the best of `round(1/rate)` candidates per output under the exact
/// class posterior; writes `rejected.jsonl` and `reject.csv`.
pub fn reject(ctx: &Context, args: &RejectArgs) -> CliResult<PathBuf> {
    let candidates = candidates_for_rate(args.accept_rate)?;
    let models = Models::load(ctx, &args.models, PredictorKind::Model, &[args.selector])?;
    let sampler = models.sampler(&ctx.world, args.selector)?;
    let classes = ctx.classes(args.n, args.class)?;
    let cfg = ctx.sampler_config(args.selector, None, ctx.seed);
    let kept = sampler::reject_runs(&sampler, &ctx.world, &classes, candidates, &cfg, ctx.exec)?;
    let mean_score = kept.iter().map(|k| k.1).sum::<f64>() / kept.len().max(1) as f64;
    let samples: Vec<(TokenGrid, ClassLabel)> = kept.into_iter().map(|k| k.0).zip(classes).collect();
    let mut t = Table::new(&["selector", "accept_rate", "candidates", "samples", "mean_class_posterior"]);
    t.push(vec![
        args.selector.to_string(),
        fmt_f64(args.accept_rate),
        candidates.to_string(),
        samples.len().to_string(),
        fmt_f64(mean_score),
    ]);
    artifacts::ensure_dir(&ctx.out)?;
    let path = ctx.path("rejected.jsonl");
    artifacts::write_samples(&path, &ctx.meta(), &samples)?;
    artifacts::write_csv(&ctx.path("reject.csv"), &ctx.meta(), &t)?;
    Ok(path)
}
