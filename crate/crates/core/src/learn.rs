//! Training of the masked generator and of the token critic.
//!
//! A step draws a batch of `(x₀, c)` from the world, a continuous time
//! `t ~ U(0,1)` per example, and a uniform mask hiding `⌈γ(t)·N⌉` positions.
//! The generator is fit with cross-entropy on the hidden positions; the
//! critic sees the generator's merged prediction and is fit with BCE to
//! recover which positions were originally visible.
//!
//! A batch is split into fixed-size shards, each with its own graph and
//! dropout stream; shard gradients are summed in shard order, so results do
//! not depend on the worker count.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::exec::Exec;
use crate::nets::{ArchConfig, CriticModel, GeneratorModel};
use crate::numerics::{Adam, Graph, OptimizerConfig, ParamStore, Tensor};
use crate::rng::{stream, StreamRng};
use crate::sampler::Predictor;
use crate::schedule::{ceil_count, GammaKind};
use crate::tokenspace::{apply_mask, merge, random_mask, ClassLabel, MaskVector, TokenGrid};
use crate::worlds::SyntheticWorld;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Steps between held-out evaluations (and checkpoints).
    pub eval_interval: usize,
    pub eval_batches: usize,
    /// Evaluations without improvement before stopping; 0 never stops.
    pub patience: usize,
    pub seed: u64,
    /// Examples per gradient shard.
    pub shard_size: usize,
    pub gamma: GammaKind,
    /// Temperature of the generator fill while training the critic.
    pub fill_temperature: f64,
    /// Hide exactly this many positions instead of `⌈γ(t)·N⌉`.
    pub fixed_masked: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            steps_per_epoch: 100,
            batch_size: 64,
            optimizer: OptimizerConfig::default(),
            eval_interval: 100,
            eval_batches: 8,
            patience: 10,
            seed: 0,
            shard_size: 16,
            gamma: GammaKind::Cosine,
            fill_temperature: 1.0,
            fixed_masked: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be at least 1"));
        }
        if self.shard_size == 0 {
            return Err(invalid("shard_size", "must be at least 1"));
        }
        if self.eval_interval == 0 || self.eval_batches == 0 {
            return Err(invalid("eval_interval", "evaluation interval and batches must be positive"));
        }
        if !(self.fill_temperature > 0.0) {
            return Err(invalid("fill_temperature", "must be positive"));
        }
        self.optimizer.validate()
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }
}

/// One training or evaluation example.
#[derive(Clone, Debug)]
pub struct Example {
    pub x0: TokenGrid,
    pub class: ClassLabel,
    pub mask: MaskVector,
    pub x_t: TokenGrid,
}

/// Draws `(x₀, c)`, a time, and the corresponding random mask.
pub fn draw_example<R: Rng + ?Sized>(world: &SyntheticWorld, gamma: GammaKind, fixed_masked: Option<usize>, rng: &mut R) -> Result<Example> {
    let (x0, class) = world.sample_world(rng);
    let n = x0.len();
    let r = match fixed_masked {
        Some(r) => r,
        None => masked_for_time(gamma, rng.gen(), n)?,
    };
    let mask = random_mask(n, r, rng)?;
    let x_t = apply_mask(&x0, &mask)?;
    Ok(Example { x0, class, mask, x_t })
}

/// `⌈γ(t)·N⌉`.
pub fn masked_for_time(gamma: GammaKind, t: f64, n: usize) -> Result<usize> {
    Ok(ceil_count(gamma.gamma(t)? * n as f64, n))
}

/// Closed-form law of `⌈γ(t)·N⌉` under `t ~ U(0,1)`.
pub fn masked_count_law(gamma: GammaKind, n: usize) -> Vec<f64> {
    // r ≤ m exactly when γ(t)·N ≤ m + slack, i.e. t ≤ γ⁻¹((m + slack)/N).
    let cdf = |m: usize| gamma.inverse((m as f64 + 1e-9) / n as f64);
    (0..=n)
        .map(|r| if r == 0 { cdf(0) } else { cdf(r) - cdf(r - 1) })
        .collect()
}

fn batch_examples(world: &SyntheticWorld, config: &TrainConfig, domain: &str, index: u64) -> Result<Vec<Example>> {
    let mut rng = stream(config.seed, domain, index);
    (0..config.batch_size)
        .map(|_| draw_example(world, config.gamma, config.fixed_masked, &mut rng))
        .collect()
}

/// One row of a loss trace: `step, split, metric, value`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

/// Held-out metrics; `auc` only for critics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldoutMetrics {
    pub loss: f64,
    pub auc: Option<f64>,
    pub positions: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub trace: Vec<LossRow>,
    pub steps_run: usize,
    pub best_step: usize,
    pub best_heldout: f64,
    /// Steps skipped because no position was masked.
    pub skipped_steps: usize,
}

/// Gradients of one batch, summed over shards in order.
fn sharded_gradients<F>(store: &ParamStore, shards: usize, exec: Exec, shard: F) -> Result<(f64, Vec<Option<Tensor>>)>
where
    F: Fn(usize, &mut Graph) -> Result<Option<crate::numerics::Var>> + Sync + Send,
{
    let n_params = store.len();
    let parts = exec.try_map(shards, |i| -> Result<Option<(f64, Vec<Option<Tensor>>)>> {
        let mut g = Graph::new();
        let Some(loss) = shard(i, &mut g)? else { return Ok(None) };
        let value = g.value(loss).data()[0];
        let grads = g.backward(loss)?;
        Ok(Some((value, g.param_grads(&grads, n_params))))
    })?;
    let mut total = 0.0;
    let mut sum: Vec<Option<Tensor>> = (0..n_params).map(|_| None).collect();
    for (value, grads) in parts.into_iter().flatten() {
        total += value;
        for (acc, g) in sum.iter_mut().zip(grads) {
            match (acc.as_mut(), g) {
                (Some(a), Some(g)) => a.add_assign(&g),
                (None, Some(g)) => *acc = Some(g),
                _ => {}
            }
        }
    }
    Ok((total, sum))
}

fn apply_gradients(store: &mut ParamStore, grads: Vec<Option<Tensor>>) {
    for (idx, g) in grads.into_iter().enumerate() {
        if let Some(g) = g {
            store.accumulate(idx, &g);
        }
    }
}

/// Early-stopping bookkeeping shared by both loops.
struct Stopper {
    patience: usize,
    best: f64,
    best_step: usize,
    best_params: Option<ParamStore>,
    stale: usize,
}

impl Stopper {
    fn new(patience: usize) -> Self {
        Stopper {
            patience,
            best: f64::INFINITY,
            best_step: 0,
            best_params: None,
            stale: 0,
        }
    }

    /// Records an evaluation; returns true when training should stop.
    fn observe(&mut self, step: usize, loss: f64, params: &ParamStore) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_step = step;
            self.best_params = Some(params.clone());
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.patience > 0 && self.stale >= self.patience
    }
}

fn row(step: usize, split: &str, metric: &str, value: f64) -> LossRow {
    LossRow {
        step,
        split: split.to_string(),
        metric: metric.to_string(),
        value,
    }
}

/// Masked cross-entropy of a generator on `examples`, as a graph loss with
/// the given denominator. `None` when no position is masked.
fn generator_loss(
    model: &GeneratorModel,
    g: &mut Graph,
    examples: &[Example],
    denom: f64,
    dropout: Option<&mut dyn rand::RngCore>,
) -> Result<Option<crate::numerics::Var>> {
    let weights: Vec<f64> = examples
        .iter()
        .flat_map(|e| e.mask.bits().iter().map(|&keep| if keep { 0.0 } else { 1.0 }))
        .collect();
    if weights.iter().all(|&w| w == 0.0) {
        return Ok(None);
    }
    let grids: Vec<TokenGrid> = examples.iter().map(|e| e.x_t.clone()).collect();
    let classes: Vec<ClassLabel> = examples.iter().map(|e| e.class).collect();
    let targets: Vec<usize> = examples.iter().flat_map(|e| e.x0.tokens().to_vec()).collect();
    let logits = model.forward(g, &grids, &classes, dropout)?;
    Ok(Some(g.cross_entropy_with_denominator(logits, &targets, &weights, denom)?))
}

/// Trains a generator; `on_eval(step, model, heldout)` runs after every
/// evaluation (for checkpoints).
pub fn train_generator<F>(
    world: &SyntheticWorld,
    arch: &ArchConfig,
    config: &TrainConfig,
    exec: Exec,
    mut on_eval: F,
) -> Result<TrainOutcome<GeneratorModel>>
where
    F: FnMut(usize, &GeneratorModel, &HeldoutMetrics) -> Result<()>,
{
    config.validate()?;
    let mut init = stream(config.seed, "generator-init", 0);
    let mut model = GeneratorModel::new(
        arch.clone(),
        world.positions(),
        world.vocab().size(),
        world.num_classes(),
        &mut init,
    )?;
    let mut adam = Adam::new(config.optimizer.clone(), model.net().params())?;
    let mut stopper = Stopper::new(config.patience);
    let mut trace = Vec::new();
    let mut skipped = 0;
    let mut steps_run = 0;
    for step in 1..=config.total_steps() {
        steps_run = step;
        let examples = batch_examples(world, config, "generator-data", step as u64)?;
        let denom = examples.iter().map(|e| e.mask.masked_count()).sum::<usize>() as f64;
        if denom == 0.0 {
            skipped += 1;
        } else {
            let shards: Vec<&[Example]> = examples.chunks(config.shard_size).collect();
            let (loss, grads) = sharded_gradients(model.net().params(), shards.len(), exec, |i, g| {
                let mut drop = stream(config.seed, "generator-dropout", ((step as u64) << 20) | i as u64);
                generator_loss(&model, g, shards[i], denom, Some(&mut drop))
            })?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            let store = model.net_mut().params_mut();
            apply_gradients(store, grads);
            adam.step(store)?;
            trace.push(row(step, "train", "masked_ce", loss));
        }
        if step % config.eval_interval == 0 || step == config.total_steps() {
            let m = evaluate_generator(&model, world, config, exec)?;
            trace.push(row(step, "heldout", "masked_ce", m.loss));
            on_eval(step, &model, &m)?;
            if stopper.observe(step, m.loss, model.net().params()) {
                break;
            }
        }
    }
    if let Some(best) = stopper.best_params.take() {
        *model.net_mut().params_mut() = best;
    }
    Ok(TrainOutcome {
        model,
        trace,
        steps_run,
        best_step: stopper.best_step,
        best_heldout: stopper.best,
        skipped_steps: skipped,
    })
}

/// Fixed held-out examples: `config.eval_batches` batches drawn from a
/// stream disjoint from training.
pub fn heldout_examples(world: &SyntheticWorld, config: &TrainConfig) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for b in 0..config.eval_batches {
        out.extend(batch_examples(world, config, "heldout", b as u64)?);
    }
    Ok(out)
}

/// Token-weighted masked cross-entropy on the held-out set.
pub fn evaluate_generator(model: &GeneratorModel, world: &SyntheticWorld, config: &TrainConfig, exec: Exec) -> Result<HeldoutMetrics> {
    let examples = heldout_examples(world, config)?;
    let denom = examples.iter().map(|e| e.mask.masked_count()).sum::<usize>();
    if denom == 0 {
        return Err(Error::NoSupervision);
    }
    let shards: Vec<&[Example]> = examples.chunks(config.shard_size.max(64)).collect();
    let losses = exec.try_map(shards.len(), |i| -> Result<f64> {
        let mut g = Graph::new();
        Ok(match generator_loss(model, &mut g, shards[i], denom as f64, None)? {
            Some(v) => g.value(v).data()[0],
            None => 0.0,
        })
    })?;
    Ok(HeldoutMetrics {
        loss: losses.iter().sum(),
        auc: None,
        positions: denom,
    })
}

/// Best cross-entropy a factorized predictor without the class can reach on
/// the held-out set: `H(q(x_j | o))` averaged over every masked position,
/// weighted exactly like [`evaluate_generator`].
pub fn factorized_baseline(world: &SyntheticWorld, config: &TrainConfig) -> Result<f64> {
    let examples = heldout_examples(world, config)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for e in &examples {
        for j in (0..e.x_t.len()).filter(|&j| e.x_t.is_masked(j)) {
            let q = world.class_marginal_conditional(&e.x_t, j)?;
            total += q.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum::<f64>();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::NoSupervision);
    }
    Ok(total / count as f64)
}

/// Critic inputs for a batch: generator fills of the masked positions
/// merged with the visible ones. Example `b` of batch `index` draws from
/// stream `(seed, "critic-fill", index·2¹⁶ + b)`.
fn critic_inputs(predictor: Predictor<'_>, examples: &[Example], temperature: f64, seed: u64, index: u64) -> Result<Vec<TokenGrid>> {
    let grids: Vec<TokenGrid> = examples.iter().map(|e| e.x_t.clone()).collect();
    let classes: Vec<ClassLabel> = examples.iter().map(|e| e.class).collect();
    let mut rngs: Vec<StreamRng> = (0..examples.len())
        .map(|b| stream(seed, "critic-fill", (index << 16) | b as u64))
        .collect();
    let fills = predictor.fill(&grids, &classes, temperature, &mut rngs)?;
    examples
        .iter()
        .zip(fills)
        .map(|(e, f)| merge(&f.grid, &e.x_t, &e.mask))
        .collect()
}

fn mask_targets(examples: &[Example]) -> Vec<f64> {
    examples
        .iter()
        .flat_map(|e| e.mask.bits().iter().map(|&keep| if keep { 1.0 } else { 0.0 }))
        .collect()
}

/// Trains a critic against a frozen predictor (normally the generator).
/// Fails with [`Error::GeneratorModified`] if the generator's weights change.
pub fn train_critic<F>(
    predictor: Predictor<'_>,
    world: &SyntheticWorld,
    arch: &ArchConfig,
    config: &TrainConfig,
    exec: Exec,
    mut on_eval: F,
) -> Result<TrainOutcome<CriticModel>>
where
    F: FnMut(usize, &CriticModel, &HeldoutMetrics) -> Result<()>,
{
    config.validate()?;
    let checksum = |p: Predictor<'_>| match p {
        Predictor::Model(g) => Some(g.net().params().checksum()),
        Predictor::Oracle(_) => None,
    };
    let before = checksum(predictor);
    let mut init = stream(config.seed, "critic-init", 0);
    let mut model = CriticModel::new(
        arch.clone(),
        world.positions(),
        world.vocab().size(),
        world.num_classes(),
        &mut init,
    )?;
    let mut adam = Adam::new(config.optimizer.clone(), model.net().params())?;
    let mut stopper = Stopper::new(config.patience);
    let mut trace = Vec::new();
    let mut steps_run = 0;
    for step in 1..=config.total_steps() {
        steps_run = step;
        let examples = batch_examples(world, config, "critic-data", step as u64)?;
        let inputs = critic_inputs(predictor, &examples, config.fill_temperature, config.seed, step as u64)?;
        let denom = (examples.len() * world.positions()) as f64;
        let shards: Vec<usize> = (0..examples.len()).step_by(config.shard_size).collect();
        let (loss, grads) = sharded_gradients(model.net().params(), shards.len(), exec, |i, g| {
            let range = shards[i]..(shards[i] + config.shard_size).min(examples.len());
            let classes: Vec<ClassLabel> = examples[range.clone()].iter().map(|e| e.class).collect();
            let mut drop = stream(config.seed, "critic-dropout", ((step as u64) << 20) | i as u64);
            let logits = model.forward(g, &inputs[range.clone()], &classes, Some(&mut drop))?;
            Ok(Some(g.bce_with_logits_with_denominator(logits, &mask_targets(&examples[range]), denom)?))
        })?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let store = model.net_mut().params_mut();
        apply_gradients(store, grads);
        adam.step(store)?;
        trace.push(row(step, "train", "bce", loss));
        if step % config.eval_interval == 0 || step == config.total_steps() {
            let m = evaluate_critic(&model, predictor, world, config, exec)?;
            trace.push(row(step, "heldout", "bce", m.loss));
            trace.push(row(step, "heldout", "auc", m.auc.unwrap_or(f64::NAN)));
            on_eval(step, &model, &m)?;
            if stopper.observe(step, m.loss, model.net().params()) {
                break;
            }
        }
    }
    if checksum(predictor) != before {
        return Err(Error::GeneratorModified);
    }
    if let Some(best) = stopper.best_params.take() {
        *model.net_mut().params_mut() = best;
    }
    Ok(TrainOutcome {
        model,
        trace,
        steps_run,
        best_step: stopper.best_step,
        best_heldout: stopper.best,
        skipped_steps: 0,
    })
}

/// Held-out BCE and AUC of separating original (visible) from filled
/// (masked) positions.
pub fn evaluate_critic(
    critic: &CriticModel,
    predictor: Predictor<'_>,
    world: &SyntheticWorld,
    config: &TrainConfig,
    exec: Exec,
) -> Result<HeldoutMetrics> {
    let examples = heldout_examples(world, config)?;
    let chunk = config.batch_size;
    let chunks = examples.len().div_ceil(chunk);
    let parts = exec.try_map(chunks, |i| -> Result<(Vec<f64>, Vec<f64>)> {
        let ex = &examples[i * chunk..((i + 1) * chunk).min(examples.len())];
        let inputs = critic_inputs(predictor, ex, config.fill_temperature, config.seed ^ 0x5eed, i as u64)?;
        let classes: Vec<ClassLabel> = ex.iter().map(|e| e.class).collect();
        Ok((critic.logits(&inputs, &classes)?, mask_targets(ex)))
    })?;
    let (mut logits, mut labels) = (Vec::new(), Vec::new());
    for (l, y) in parts {
        logits.extend(l);
        labels.extend(y);
    }
    let loss = logits
        .iter()
        .zip(&labels)
        .map(|(&x, &y)| crate::numerics::softplus(x) - x * y)
        .sum::<f64>()
        / logits.len() as f64;
    Ok(HeldoutMetrics {
        loss,
        auc: Some(auc(&logits, &labels)),
        positions: logits.len(),
    })
}

/// Area under the ROC curve for scores against 0/1 labels (Mann–Whitney,
/// average ranks for ties). 0.5 when either class is empty.
pub fn auc(scores: &[f64], labels: &[f64]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    let pos = labels.iter().filter(|&&y| y == 1.0).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return 0.5;
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y == 1.0).map(|(r, _)| r).sum();
    (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg)
}

/// Loss trace as CSV (`step,split,metric,value`).
pub fn trace_csv(rows: &[LossRow]) -> String {
    let mut out = String::from("step,split,metric,value\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{:.16e}\n", r.step, r.split, r.metric, r.value));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worlds::WorldSpec;

    fn tiny() -> ArchConfig {
        ArchConfig {
            layers: 1,
            heads: 2,
            embed_dim: 16,
            hidden_dim: 32,
            dropout: 0.0,
        }
    }

    fn quick(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 1,
            steps_per_epoch: 150,
            batch_size: 32,
            eval_interval: 50,
            eval_batches: 4,
            seed,
            optimizer: OptimizerConfig {
                learning_rate: 3e-3,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn mask_count_distribution_matches_pushforward() {
        let n = 9;
        let law = masked_count_law(GammaKind::Cosine, n);
        assert!((law.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let world = SyntheticWorld::new(WorldSpec::potts()).unwrap();
        let mut rng = stream(1, "pushforward", 0);
        let mut hist = vec![0u64; n + 1];
        let draws = 100_000;
        for _ in 0..draws {
            hist[draw_example(&world, GammaKind::Cosine, None, &mut rng).unwrap().mask.masked_count()] += 1;
        }
        let tv: f64 = 0.5 * hist.iter().zip(&law).map(|(&h, &p)| (h as f64 / draws as f64 - p).abs()).sum::<f64>();
        assert!(tv < 0.02, "{tv}");
    }

    #[test]
    fn visible_logits_get_zero_gradient() {
        let world = SyntheticWorld::new(WorldSpec::potts()).unwrap();
        let mut rng = stream(2, "t", 0);
        let model = GeneratorModel::new(tiny(), 9, 4, 2, &mut rng).unwrap();
        let ex: Vec<Example> = (0..3).map(|_| draw_example(&world, GammaKind::Cosine, Some(4), &mut rng).unwrap()).collect();
        let mut g = Graph::new();
        let grids: Vec<TokenGrid> = ex.iter().map(|e| e.x_t.clone()).collect();
        let classes: Vec<ClassLabel> = ex.iter().map(|e| e.class).collect();
        let logits = model.forward(&mut g, &grids, &classes, None).unwrap();
        let targets: Vec<usize> = ex.iter().flat_map(|e| e.x0.tokens().to_vec()).collect();
        let weights: Vec<f64> = ex.iter().flat_map(|e| e.mask.bits().iter().map(|&k| if k { 0.0 } else { 1.0 })).collect();
        let loss = g.cross_entropy(logits, &targets, &weights).unwrap();
        let grads = g.backward(loss).unwrap();
        let gl = grads.get(logits).unwrap();
        for (r, w) in weights.iter().enumerate() {
            let row = gl.row(r);
            if *w == 0.0 {
                assert!(row.iter().all(|&v| v == 0.0));
            } else {
                assert!(row.iter().any(|&v| v != 0.0));
            }
        }
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&[0.3; 6], &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]), 0.5);
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0.0, 0.0, 1.0, 1.0]), 1.0);
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[1.0, 1.0, 0.0, 0.0]), 0.0);
        assert_eq!(auc(&[0.1, 0.5, 0.5, 0.9], &[0.0, 1.0, 0.0, 1.0]), 0.875);
    }

    #[test]
    fn uniform_world_converges_to_ln_k() {
        let world = SyntheticWorld::new(WorldSpec::uniform(2, 2, 5, 2)).unwrap();
        let out = train_generator(&world, &tiny(), &quick(3), Exec::Sequential, |_, _, _| Ok(())).unwrap();
        let m = evaluate_generator(&out.model, &world, &quick(3), Exec::Sequential).unwrap();
        assert!((m.loss - 5f64.ln()).abs() < 0.05, "{}", m.loss);
    }

    #[test]
    fn training_is_deterministic_and_worker_independent() {
        let world = SyntheticWorld::new(WorldSpec::potts()).unwrap();
        let mut cfg = quick(4);
        cfg.steps_per_epoch = 20;
        cfg.eval_interval = 10;
        let arch = ArchConfig { dropout: 0.1, ..tiny() };
        let a = train_generator(&world, &arch, &cfg, Exec::Sequential, |_, _, _| Ok(())).unwrap();
        let b = train_generator(&world, &arch, &cfg, Exec::Parallel, |_, _, _| Ok(())).unwrap();
        assert_eq!(a.model.net().params().checksum(), b.model.net().params().checksum());
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn critic_beats_chance_against_untrained_generator() {
        let world = SyntheticWorld::new(WorldSpec::patterns()).unwrap();
        let mut rng = stream(5, "gen", 0);
        let gen = GeneratorModel::new(tiny(), 9, 5, 4, &mut rng).unwrap();
        let before = gen.net().params().checksum();
        let cfg = quick(5);
        let out = train_critic(Predictor::Model(&gen), &world, &tiny(), &cfg, Exec::default(), |_, _, _| Ok(())).unwrap();
        assert_eq!(gen.net().params().checksum(), before);
        let m = evaluate_critic(&out.model, Predictor::Model(&gen), &world, &cfg, Exec::default()).unwrap();
        assert!(m.loss < 2f64.ln(), "{}", m.loss);
        assert!(m.auc.unwrap() > 0.6);
    }

    #[test]
    fn zero_masked_batches_are_skipped() {
        let world = SyntheticWorld::new(WorldSpec::potts()).unwrap();
        let mut cfg = quick(6);
        cfg.fixed_masked = Some(0);
        cfg.steps_per_epoch = 3;
        cfg.eval_interval = 100;
        assert!(matches!(
            train_generator(&world, &tiny(), &cfg, Exec::Sequential, |_, _, _| Ok(())),
            Err(Error::NoSupervision)
        ));
        // The critic still trains: every target is 1.
        let mut rng = stream(5, "gen", 0);
        let gen = GeneratorModel::new(tiny(), 9, 4, 2, &mut rng).unwrap();
        let out = train_critic(Predictor::Model(&gen), &world, &tiny(), &cfg, Exec::Sequential, |_, _, _| Ok(())).unwrap();
        assert_eq!(out.steps_run, 3);
    }
}
