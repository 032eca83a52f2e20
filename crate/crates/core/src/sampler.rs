//! Iterative decoding: critic-guided sampling, the confidence baseline,
//! refinement of finished grids, and classifier-based rejection.
//!
//! Every run owns one RNG stream and draws from it in a fixed order per
//! step: one categorical draw per masked position (ascending), then `N`
//! uniforms for selection. Runs are decoded in lockstep batches so the
//! networks see many grids per forward pass; the output of a run does not
//! depend on which batch it landed in.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::exec::Exec;
use crate::nets::{draw_categorical, tempered_probs, CriticModel, GeneratorModel};
use crate::rng::{stream, StreamRng};
use crate::schedule::Schedule;
use crate::tokenspace::{merge, ClassLabel, GridShape, MaskVector, TokenGrid, Vocabulary};
use crate::worlds::SyntheticWorld;

pub const DEFAULT_REFINE_RATIO: f64 = 0.6;
pub const DEFAULT_REFINE_STEPS: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    /// Critic scores over all positions; kept tokens may be re-masked.
    Critic,
    /// Probability of each sampled token; kept tokens are locked.
    Confidence,
    /// Uniform scores over masked positions; kept tokens are locked.
    Random,
    /// Exact ancestral sampling from the world, one position per step.
    OracleConditional,
}

impl std::str::FromStr for Selector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "critic" => Ok(Selector::Critic),
            "confidence" => Ok(Selector::Confidence),
            "random" => Ok(Selector::Random),
            "oracle_conditional" | "oracle" => Ok(Selector::OracleConditional),
            other => Err(invalid("selector", format!("unknown selector `{other}`"))),
        }
    }
}

impl std::fmt::Display for Selector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Selector::Critic => "critic",
            Selector::Confidence => "confidence",
            Selector::Random => "random",
            Selector::OracleConditional => "oracle_conditional",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub schedule: Schedule,
    pub selector: Selector,
    pub seed: u64,
    /// Runs decoded together in one forward pass.
    pub batch_size: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            schedule: Schedule::default(),
            selector: Selector::Critic,
            seed: 0,
            batch_size: 256,
        }
    }
}

/// Revelation order of the exact ancestral sampler.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderPolicy {
    Raster,
    /// A uniform permutation, drawn before any token.
    Shuffled,
}

/// Source of token predictions for masked positions.
#[derive(Clone, Copy, Debug)]
pub enum Predictor<'a> {
    Model(&'a GeneratorModel),
    /// Per-position exact conditionals `q(x_j | visible, c)`, drawn
    /// independently like a perfectly trained generator.
    Oracle(&'a SyntheticWorld),
}

/// A filled grid plus the probability of each sampled token (1 at
/// positions that were already visible).
#[derive(Clone, Debug)]
pub struct Fill {
    pub grid: TokenGrid,
    pub probs: Vec<f64>,
}

impl Predictor<'_> {
    /// Draws every masked position of each grid from the tempered
    /// prediction; grid `b` uses `rngs[b]`.
    pub fn fill<R: Rng>(&self, grids: &[TokenGrid], classes: &[ClassLabel], temperature: f64, rngs: &mut [R]) -> Result<Vec<Fill>> {
        if !(temperature > 0.0) {
            return Err(invalid("temperature", format!("{temperature} is not positive")));
        }
        if grids.is_empty() {
            return Ok(Vec::new());
        }
        let logits = match self {
            Predictor::Model(gen) => Some(gen.logits(grids, classes)?),
            Predictor::Oracle(_) => None,
        };
        let mut out = Vec::with_capacity(grids.len());
        for (b, (grid, rng)) in grids.iter().zip(rngs.iter_mut()).enumerate() {
            let n = grid.len();
            let mut tokens = grid.tokens().to_vec();
            let mut probs = vec![1.0; n];
            for j in (0..n).filter(|&j| grid.is_masked(j)) {
                let p = match (self, &logits) {
                    (_, Some(l)) => tempered_probs(l.row(b * n + j), temperature),
                    (Predictor::Oracle(world), None) => temper(world.exact_conditional(classes[b], grid, j)?, temperature),
                    _ => unreachable!(),
                };
                let code = draw_categorical(&p, rng);
                tokens[j] = code;
                probs[j] = p[code];
            }
            out.push(Fill {
                grid: TokenGrid::new(grid.shape(), grid.vocab(), tokens)?,
                probs,
            });
        }
        Ok(out)
    }
}

fn temper(p: Vec<f64>, temperature: f64) -> Vec<f64> {
    if temperature == 1.0 {
        return p;
    }
    let logits: Vec<f64> = p.iter().map(|&v| if v > 0.0 { v.ln() } else { f64::NEG_INFINITY }).collect();
    tempered_probs(&logits, temperature)
}

/// One iteration of a decoding loop.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionStep {
    pub t: usize,
    /// Positions left masked after this step.
    pub k: usize,
    pub temperature: f64,
    /// Noisy scores used for ranking; `+∞` marks positions that were not
    /// candidates. Empty when `k = 0`.
    pub scores: Vec<f64>,
    /// Largest score among masked positions.
    pub threshold: Option<f64>,
    /// `m_{t-1}`.
    pub mask: MaskVector,
    /// `x_t`.
    pub pre: TokenGrid,
    /// Merged prediction `x̂₀`.
    pub filled: TokenGrid,
    /// `x_{t-1}`.
    pub post: TokenGrid,
}

impl SelectionStep {
    pub fn to_json(&self, run: u64) -> serde_json::Value {
        let finite = |v: &f64| if v.is_finite() { serde_json::json!(v) } else { serde_json::Value::Null };
        serde_json::json!({
            "run": run,
            "t": self.t,
            "k": self.k,
            "temperature": self.temperature,
            "threshold": self.threshold,
            "scores": self.scores.iter().map(finite).collect::<Vec<_>>(),
            "mask": self.mask.bits().iter().map(|&b| u8::from(b)).collect::<Vec<_>>(),
            "pre": self.pre.tokens(),
            "filled": self.filled.tokens(),
            "post": self.post.tokens(),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub steps: Vec<SelectionStep>,
}

impl Trace {
    /// `x_t` as seen by the loop: the input of the step at `t`, or the final
    /// grid for `t = 0`.
    pub fn state_at(&self, t: usize) -> Option<&TokenGrid> {
        if t == 0 {
            return self.steps.last().map(|s| &s.post);
        }
        self.steps.iter().find(|s| s.t == t).map(|s| &s.pre)
    }

    /// Positions that were visible before a step and masked after it.
    pub fn remask_events(&self) -> usize {
        self.steps
            .iter()
            .map(|s| (0..s.pre.len()).filter(|&j| !s.pre.is_masked(j) && s.post.is_masked(j)).count())
            .sum()
    }

    /// Visible tokens that changed value from one step to the next.
    pub fn lock_violations(&self) -> usize {
        self.steps
            .iter()
            .map(|s| (0..s.pre.len()).filter(|&j| !s.pre.is_masked(j) && s.post.tokens()[j] != s.pre.tokens()[j]).count())
            .sum()
    }
}

/// Masks the `k` lowest `(score, index)` candidates; returns the mask and
/// the largest masked score.
pub fn rank_select(scores: &[f64], candidates: &[bool], k: usize) -> Result<(MaskVector, Option<f64>)> {
    let mut order: Vec<usize> = (0..scores.len()).filter(|&j| candidates[j]).collect();
    if k > order.len() {
        return Err(Error::Invariant(format!("cannot mask {k} of {} candidates", order.len())));
    }
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut bits = vec![true; scores.len()];
    for &j in &order[..k] {
        bits[j] = false;
    }
    let threshold = k.checked_sub(1).map(|i| scores[order[i]]);
    Ok((MaskVector::from_bits(bits), threshold))
}

fn mask_grid(grid: &TokenGrid, m: &MaskVector) -> Result<TokenGrid> {
    crate::tokenspace::apply_mask(grid, m)
}

/// Models and policy for a decoding loop.
#[derive(Clone, Copy, Debug)]
pub struct Sampler<'a> {
    pub predictor: Predictor<'a>,
    pub critic: Option<&'a CriticModel>,
    pub selector: Selector,
    shape: GridShape,
    vocab: Vocabulary,
}

impl<'a> Sampler<'a> {
    pub fn new(predictor: Predictor<'a>, critic: Option<&'a CriticModel>, selector: Selector) -> Result<Self> {
        if selector == Selector::Critic && critic.is_none() {
            return Err(invalid("selector", "the critic selector needs a critic model"));
        }
        if selector == Selector::OracleConditional && !matches!(predictor, Predictor::Oracle(_)) {
            return Err(invalid("selector", "oracle_conditional needs a world"));
        }
        let (shape, vocab) = match predictor {
            Predictor::Model(g) => (GridShape::new(1, g.config().positions)?, Vocabulary::new(g.config().codebook)?),
            Predictor::Oracle(w) => (w.shape(), w.vocab()),
        };
        Ok(Sampler {
            predictor,
            critic,
            selector,
            shape,
            vocab,
        })
    }

    /// Grid layout of generated samples (a single row by default for
    /// model-backed samplers).
    pub fn with_shape(mut self, shape: GridShape) -> Result<Self> {
        if shape.len() != self.shape.len() {
            return Err(invalid("grid shape", format!("{} positions, model has {}", shape.len(), self.shape.len())));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Runs the loop from `t_start` down to 1 for a batch of grids. `count`
    /// gives the number of positions left masked after each step.
    pub fn decode<R: Rng>(
        &self,
        starts: Vec<TokenGrid>,
        classes: &[ClassLabel],
        schedule: &Schedule,
        t_start: usize,
        count: &dyn Fn(usize) -> usize,
        rngs: &mut [R],
        keep_trace: bool,
    ) -> Result<Vec<(TokenGrid, Trace)>> {
        if self.selector == Selector::OracleConditional {
            return Err(invalid("selector", "oracle_conditional does not run the masked loop"));
        }
        let batch = starts.len();
        let mut xs = starts;
        let mut traces = vec![Trace::default(); batch];
        for t in (1..=t_start).rev() {
            let temperature = schedule.temperature(t)?;
            let fills = self.predictor.fill(&xs, classes, temperature, rngs)?;
            let mut merged = Vec::with_capacity(batch);
            for (x, f) in xs.iter().zip(&fills) {
                merged.push(merge(&f.grid, x, &x.visibility())?);
            }
            let k = count(t - 1);
            let critic_scores = match (k, self.selector) {
                (0, _) => None,
                (_, Selector::Critic) => Some(self.critic.expect("checked").scores(&merged, classes)?),
                _ => None,
            };
            let mut next = Vec::with_capacity(batch);
            for b in 0..batch {
                let n = xs[b].len();
                let (mask, scores, threshold) = if k == 0 {
                    (MaskVector::all_visible(n), Vec::new(), None)
                } else {
                    let rng = &mut rngs[b];
                    let (mut scores, candidates): (Vec<f64>, Vec<bool>) = match self.selector {
                        Selector::Critic => (critic_scores.as_ref().expect("critic pass")[b * n..(b + 1) * n].to_vec(), vec![true; n]),
                        Selector::Confidence => (fills[b].probs.clone(), (0..n).map(|j| xs[b].is_masked(j)).collect()),
                        Selector::Random => (vec![0.0; n], (0..n).map(|j| xs[b].is_masked(j)).collect()),
                        Selector::OracleConditional => unreachable!(),
                    };
                    if self.selector == Selector::Random {
                        scores.iter_mut().for_each(|s| *s = rng.gen());
                    } else {
                        let noise = schedule.selection_noise(t, n, rng);
                        scores.iter_mut().zip(noise).for_each(|(s, e)| *s += e);
                    }
                    let (mask, threshold) = rank_select(&scores, &candidates, k)?;
                    for (s, &c) in scores.iter_mut().zip(&candidates) {
                        if !c {
                            *s = f64::INFINITY;
                        }
                    }
                    (mask, scores, threshold)
                };
                let post = mask_grid(&merged[b], &mask)?;
                if keep_trace {
                    traces[b].steps.push(SelectionStep {
                        t,
                        k,
                        temperature,
                        scores,
                        threshold,
                        mask,
                        pre: xs[b].clone(),
                        filled: merged[b].clone(),
                        post: post.clone(),
                    });
                }
                next.push(post);
            }
            xs = next;
        }
        xs.into_iter()
            .zip(traces)
            .map(|(x, tr)| {
                if let Some(j) = (0..x.len()).find(|&j| x.is_masked(j)) {
                    return Err(Error::Invariant(format!("decoding ended with position {j} masked")));
                }
                Ok((x, tr))
            })
            .collect()
    }

    /// Full generation from the all-mask grid over `schedule.total_steps`.
    pub fn generate<R: Rng>(
        &self,
        classes: &[ClassLabel],
        schedule: &Schedule,
        rngs: &mut [R],
        keep_trace: bool,
    ) -> Result<Vec<(TokenGrid, Trace)>> {
        schedule.validate()?;
        if self.selector == Selector::OracleConditional {
            let Predictor::Oracle(world) = self.predictor else { unreachable!() };
            return classes
                .iter()
                .zip(rngs.iter_mut())
                .map(|(&c, rng)| sample_oracle_conditional(world, c, OrderPolicy::Raster, rng).map(|g| (g, Trace::default())))
                .collect();
        }
        let n = self.shape.len();
        let starts = vec![TokenGrid::fully_masked(self.shape, self.vocab); classes.len()];
        let t = schedule.total_steps;
        self.decode(starts, classes, schedule, t, &|s| schedule.mask_count(s, n), rngs, keep_trace)
    }

    /// Re-masks the `⌈ratio·N⌉` lowest-scoring positions of finished grids
    /// and decodes them again over `schedule.total_steps` steps, the masked
    /// count decaying as `⌈γ(t/steps)·ratio·N⌉`.
    pub fn refine<R: Rng>(
        &self,
        grids: &[TokenGrid],
        classes: &[ClassLabel],
        ratio: f64,
        schedule: &Schedule,
        rngs: &mut [R],
        keep_trace: bool,
    ) -> Result<Vec<(TokenGrid, Trace)>> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(invalid("ratio", format!("{ratio} is outside (0, 1]")));
        }
        schedule.validate()?;
        let critic = self
            .critic
            .ok_or_else(|| invalid("refine", "refinement needs a critic model"))?;
        if grids.is_empty() {
            return Ok(Vec::new());
        }
        let steps = schedule.total_steps;
        let n = grids[0].len();
        let scores = critic.scores(grids, classes)?;
        let first = schedule.refine_count(steps, ratio, n);
        let mut starts = Vec::with_capacity(grids.len());
        for (b, g) in grids.iter().enumerate() {
            let (mask, _) = rank_select(&scores[b * n..(b + 1) * n], &vec![true; n], first)?;
            starts.push(mask_grid(g, &mask)?);
        }
        let repair = Sampler {
            selector: Selector::Critic,
            ..*self
        };
        repair.decode(starts, classes, schedule, steps, &|s| schedule.refine_count(s, ratio, n), rngs, keep_trace)
    }
}

/// Reveals one position per step from `q(x_j | revealed, c)`.
pub fn sample_oracle_conditional<R: Rng + ?Sized>(world: &SyntheticWorld, c: ClassLabel, order: OrderPolicy, rng: &mut R) -> Result<TokenGrid> {
    let n = world.positions();
    let mut positions: Vec<usize> = (0..n).collect();
    if order == OrderPolicy::Shuffled {
        rand::seq::SliceRandom::shuffle(positions.as_mut_slice(), rng);
    }
    let mut grid = TokenGrid::fully_masked(world.shape(), world.vocab());
    for j in positions {
        let p = world.exact_conditional(c, &grid, j)?;
        let mut tokens = grid.tokens().to_vec();
        tokens[j] = draw_categorical(&p, rng);
        grid = TokenGrid::new(grid.shape(), grid.vocab(), tokens)?;
    }
    Ok(grid)
}

/// Candidates needed for an acceptance rate: `round(1 / rate)`.
pub fn candidates_for_rate(rate: f64) -> Result<usize> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(invalid("accept_rate", format!("{rate} is outside (0, 1]")));
    }
    Ok((1.0 / rate).round() as usize)
}

/// Draws `n` candidates and keeps the one the classifier scores highest for
/// class `c` (the first on ties). Returns the winner and its score.
pub fn reject_sample<S, C>(mut sample: S, classifier: C, c: ClassLabel, n: usize) -> Result<(TokenGrid, f64)>
where
    S: FnMut(usize) -> Result<TokenGrid>,
    C: Fn(&TokenGrid) -> Result<Vec<f64>>,
{
    if n == 0 {
        return Err(invalid("candidates", "need at least one candidate"));
    }
    let mut best: Option<(TokenGrid, f64)> = None;
    for i in 0..n {
        let cand = sample(i)?;
        let score = classifier(&cand)?
            .get(c.0)
            .copied()
            .ok_or_else(|| invalid("class", format!("{} has no classifier score", c.0)))?;
        if best.as_ref().is_none_or(|(_, s)| score > *s) {
            best = Some((cand, score));
        }
    }
    Ok(best.expect("n >= 1"))
}

/// Stream of run `index` under `seed`.
pub fn run_stream(seed: u64, index: u64) -> StreamRng {
    stream(seed, "sample", index)
}

/// Generates runs `0..classes.len()` with independent streams, in lockstep
/// batches fanned out over `exec`. Output is in run order and identical for
/// any batch size or worker count.
pub fn generate_runs(
    sampler: &Sampler<'_>,
    classes: &[ClassLabel],
    config: &SamplerConfig,
    exec: Exec,
    keep_trace: bool,
) -> Result<Vec<(TokenGrid, Trace)>> {
    let ids: Vec<u64> = (0..classes.len() as u64).collect();
    generate_ids(sampler, classes, &ids, config, exec, keep_trace)
}

/// As [`generate_runs`] with explicit run ids (the stream index of each run).
pub fn generate_ids(
    sampler: &Sampler<'_>,
    classes: &[ClassLabel],
    ids: &[u64],
    config: &SamplerConfig,
    exec: Exec,
    keep_trace: bool,
) -> Result<Vec<(TokenGrid, Trace)>> {
    if classes.len() != ids.len() {
        return Err(invalid("runs", "class and id counts differ"));
    }
    let batch = config.batch_size.max(1);
    let chunks = classes.len().div_ceil(batch);
    let parts = exec.try_map(chunks, |i| {
        let range = i * batch..((i + 1) * batch).min(classes.len());
        let mut rngs: Vec<StreamRng> = ids[range.clone()].iter().map(|&r| run_stream(config.seed, r)).collect();
        sampler.generate(&classes[range], &config.schedule, &mut rngs, keep_trace)
    })?;
    Ok(parts.into_iter().flatten().collect())
}

/// Refines `grids` with per-run streams `(seed, "refine", id)`.
pub fn refine_runs(
    sampler: &Sampler<'_>,
    grids: &[TokenGrid],
    classes: &[ClassLabel],
    ratio: f64,
    config: &SamplerConfig,
    exec: Exec,
) -> Result<Vec<TokenGrid>> {
    let batch = config.batch_size.max(1);
    let chunks = grids.len().div_ceil(batch);
    let parts = exec.try_map(chunks, |i| {
        let range = i * batch..((i + 1) * batch).min(grids.len());
        let mut rngs: Vec<StreamRng> = range.clone().map(|r| stream(config.seed, "refine", r as u64)).collect();
        sampler.refine(&grids[range.clone()], &classes[range], ratio, &config.schedule, &mut rngs, false)
    })?;
    Ok(parts.into_iter().flatten().map(|(g, _)| g).collect())
}

/// Rejection sampling for `runs` outputs: run `i` draws candidates with
/// stream ids `(i << 16) | j`, so the candidate sets of smaller `n` are
/// prefixes of those of larger `n`.
pub fn reject_runs(
    sampler: &Sampler<'_>,
    world: &SyntheticWorld,
    classes: &[ClassLabel],
    candidates: usize,
    config: &SamplerConfig,
    exec: Exec,
) -> Result<Vec<(TokenGrid, f64)>> {
    if candidates == 0 || candidates >= 1 << 16 {
        return Err(invalid("candidates", "must lie in 1..65536"));
    }
    let ids: Vec<u64> = (0..classes.len() as u64)
        .flat_map(|i| (0..candidates as u64).map(move |j| (i << 16) | j))
        .collect();
    let expanded: Vec<ClassLabel> = classes.iter().flat_map(|&c| std::iter::repeat_n(c, candidates)).collect();
    let pool = generate_ids(sampler, &expanded, &ids, config, exec, false)?;
    classes
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let group = &pool[i * candidates..(i + 1) * candidates];
            reject_sample(|j| Ok(group[j].0.clone()), |g| world.class_posterior(g).map(|p| p.probs), c, candidates)
        })
        .collect()
}
