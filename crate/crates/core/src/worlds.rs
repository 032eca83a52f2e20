//! Class-conditional ground-truth distributions over small token grids.
//!
//! Every world is enumerable: the joint of each class is held as a dense
//! table indexed by the mixed-radix value of the grid (position 0 is the
//! most significant digit). Conditionals, posteriors and divergences are
//! exact sums over these tables.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::schedule::Schedule;
use crate::tokenspace::{ClassLabel, GridShape, TokenGrid, Vocabulary};

/// Largest number of states per class a world may have.
pub const ENUMERATION_LIMIT: u128 = 10_000_000;
pub const MIN_COMPARE_SAMPLES: usize = 100;
pub const MIN_DIVERGENCE_TRACES: usize = 10_000;
/// Additive smoothing of the empirical distribution in plug-in KL.
pub const KL_SMOOTHING: f64 = 1e-9;
const SUM_TOLERANCE: f64 = 1e-9;
/// Below this many states a range is summed directly instead of via the CDF.
const DIRECT_SUM_LIMIT: usize = 4096;

/// Neumaier-compensated sum, independent of how the terms were sharded as
/// long as they arrive in the same order.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(terms: I) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for x in terms {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WorldKind {
    /// One base pattern per class; each cell is independently replaced by a
    /// uniform random code with probability `corruption`.
    Pattern { patterns: Vec<Vec<usize>>, corruption: f64 },
    /// Potts model with one coupling per class over 4-neighbour edges
    /// (open boundary): `q(x|c) ∝ exp(J_c · #agreeing edges)`.
    Potts { couplings: Vec<f64> },
    /// Explicit joint per class, indexed by state.
    Table { joints: Vec<Vec<f64>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub height: usize,
    pub width: usize,
    pub codebook: usize,
    /// Uniform when absent.
    #[serde(default)]
    pub class_prior: Option<Vec<f64>>,
    #[serde(flatten)]
    pub kind: WorldKind,
}

impl WorldSpec {
    /// 3×3 grid, five codes, four classes: horizontal stripes, vertical
    /// stripes, checkerboard, diagonal; 10% corruption.
    pub fn patterns() -> Self {
        let cell = |f: fn(usize, usize) -> usize| (0..9).map(|i| f(i / 3, i % 3)).collect::<Vec<_>>();
        WorldSpec {
            height: 3,
            width: 3,
            codebook: 5,
            class_prior: None,
            kind: WorldKind::Pattern {
                patterns: vec![
                    cell(|r, _| r),
                    cell(|_, c| c),
                    cell(|r, c| 3 + (r + c) % 2),
                    cell(|r, c| (r + c) % 3 + 2),
                ],
                corruption: 0.1,
            },
        }
    }

    /// 3×3 grid, four codes, a ferromagnetic and an antiferromagnetic class.
    pub fn potts() -> Self {
        WorldSpec {
            height: 3,
            width: 3,
            codebook: 4,
            class_prior: None,
            kind: WorldKind::Potts {
                couplings: vec![0.8, -0.8],
            },
        }
    }

    /// Independent uniform tokens for every class.
    pub fn uniform(height: usize, width: usize, codebook: usize, classes: usize) -> Self {
        WorldSpec {
            height,
            width,
            codebook,
            class_prior: None,
            kind: WorldKind::Potts {
                couplings: vec![0.0; classes],
            },
        }
    }

    /// Looks up a built-in world by name.
    pub fn named(name: &str) -> Option<Self> {
        match name {
            "patterns" | "a" | "world_a" => Some(Self::patterns()),
            "potts" | "b" | "world_b" => Some(Self::potts()),
            _ => None,
        }
    }

    pub fn num_classes(&self) -> usize {
        match &self.kind {
            WorldKind::Pattern { patterns, .. } => patterns.len(),
            WorldKind::Potts { couplings } => couplings.len(),
            WorldKind::Table { joints } => joints.len(),
        }
    }
}

/// Exact joint of one class.
#[derive(Clone, Debug)]
pub struct JointTable {
    class: ClassLabel,
    probs: Vec<f64>,
    cdf: Vec<f64>,
}

impl JointTable {
    fn new(class: ClassLabel, probs: Vec<f64>) -> Self {
        let mut acc = 0.0;
        let cdf = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        JointTable { class, probs, cdf }
    }

    pub fn class(&self) -> ClassLabel {
        self.class
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, state: usize) -> f64 {
        self.probs[state]
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn total(&self) -> f64 {
        compensated_sum(self.probs.iter().copied())
    }

    /// Probability of states `start..start + len`.
    pub fn range_sum(&self, start: usize, len: usize) -> f64 {
        if len <= DIRECT_SUM_LIMIT {
            return compensated_sum(self.probs[start..start + len].iter().copied());
        }
        let hi = self.cdf[start + len - 1];
        let lo = if start == 0 { 0.0 } else { self.cdf[start - 1] };
        (hi - lo).max(0.0)
    }

    /// Inverse-CDF draw of a state index.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total = *self.cdf.last().expect("non-empty table");
        let u = rng.gen::<f64>() * total;
        self.cdf.partition_point(|&c| c <= u).min(self.probs.len() - 1)
    }
}

/// Mixed-radix index of `tokens` (position 0 most significant).
pub fn state_index(tokens: &[usize], radix: usize) -> usize {
    tokens.iter().fold(0, |acc, &t| acc * radix + t)
}

pub fn state_tokens(mut index: usize, positions: usize, radix: usize) -> Vec<usize> {
    let mut out = vec![0; positions];
    for slot in out.iter_mut().rev() {
        *slot = index % radix;
        index /= radix;
    }
    out
}

/// Horizontal and vertical neighbour pairs of a grid, open boundary.
pub fn grid_edges(shape: GridShape) -> Vec<(usize, usize)> {
    let (h, w) = (shape.height, shape.width);
    let mut edges = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if c + 1 < w {
                edges.push((i, i + 1));
            }
            if r + 1 < h {
                edges.push((i, i + w));
            }
        }
    }
    edges
}

/// Calls `f(state, digits)` for every state in index order.
fn for_each_state(positions: usize, radix: usize, states: usize, mut f: impl FnMut(usize, &[usize])) {
    let mut digits = vec![0usize; positions];
    for s in 0..states {
        f(s, &digits);
        for d in digits.iter_mut().rev() {
            *d += 1;
            if *d < radix {
                break;
            }
            *d = 0;
        }
    }
}

/// Class posterior of a complete grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub probs: Vec<f64>,
    /// The grid has zero probability under every class; `probs` is uniform.
    pub degenerate: bool,
}

/// Distribution-level comparison of samples against one class joint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub samples: usize,
    pub joint_tv: f64,
    pub forward_cross_entropy: f64,
    pub plugin_kl: f64,
    /// Mean over positions of the single-position marginal TV.
    pub marginal_tv: f64,
    pub distinct_ratio: f64,
    pub class_consistency: f64,
}

/// `KL(q ‖ p̂)` with `p̂` the add-λ smoothed empirical distribution over the
/// union of both supports.
pub fn plugin_kl(q: &[f64], counts: &[u64], total: u64) -> f64 {
    let n = total as f64;
    let support = q.iter().zip(counts).filter(|(&p, &c)| p > 0.0 || c > 0).count();
    let z = 1.0 + KL_SMOOTHING * support as f64;
    compensated_sum(q.iter().zip(counts).filter(|(&p, _)| p > 0.0).map(|(&p, &c)| {
        let phat = (c as f64 / n + KL_SMOOTHING) / z;
        p * (p / phat).ln()
    }))
    .max(0.0)
}

/// `½ Σ |p̂ − q|`.
pub fn joint_tv(q: &[f64], counts: &[u64], total: u64) -> f64 {
    let n = total as f64;
    (0.5 * compensated_sum(q.iter().zip(counts).map(|(&p, &c)| (c as f64 / n - p).abs()))).clamp(0.0, 1.0)
}

#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    spec: WorldSpec,
    shape: GridShape,
    vocab: Vocabulary,
    prior: Vec<f64>,
    tables: Vec<JointTable>,
}

impl SyntheticWorld {
    pub fn new(spec: WorldSpec) -> Result<Self> {
        let shape = GridShape::new(spec.height, spec.width)?;
        let vocab = Vocabulary::new(spec.codebook)?;
        let n = shape.len();
        let k = spec.codebook;
        let classes = spec.num_classes();
        if classes == 0 {
            return Err(invalid("classes", "a world needs at least one class"));
        }
        let states = (k as u128).checked_pow(n as u32).unwrap_or(u128::MAX);
        if states > ENUMERATION_LIMIT {
            return Err(Error::TooLarge {
                states,
                bytes: states.saturating_mul(16).saturating_mul(classes as u128),
            });
        }
        let states = states as usize;
        let prior = match &spec.class_prior {
            None => vec![1.0 / classes as f64; classes],
            Some(p) => {
                if p.len() != classes || p.iter().any(|v| !(*v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > SUM_TOLERANCE {
                    return Err(invalid("class_prior", format!("must be {classes} nonnegative numbers summing to 1")));
                }
                p.clone()
            }
        };
        let joints: Vec<Vec<f64>> = match &spec.kind {
            WorldKind::Pattern { patterns, corruption } => {
                if !(0.0..=1.0).contains(corruption) {
                    return Err(invalid("corruption", "must lie in [0, 1]"));
                }
                for p in patterns {
                    if p.len() != n || p.iter().any(|&t| t >= k) {
                        return Err(invalid("patterns", format!("each pattern needs {n} codes below {k}")));
                    }
                }
                patterns
                    .iter()
                    .map(|base| {
                        let mut probs = vec![0.0; states];
                        for_each_state(n, k, states, |s, d| {
                            probs[s] = d.iter().zip(base).map(|(&x, &b)| cell_prob(x, b, *corruption, k)).product();
                        });
                        probs
                    })
                    .collect()
            }
            WorldKind::Potts { couplings } => {
                if couplings.iter().any(|j| !j.is_finite()) {
                    return Err(invalid("couplings", "must be finite"));
                }
                let edges = grid_edges(shape);
                couplings
                    .iter()
                    .map(|&j| {
                        let mut w = vec![0.0; states];
                        for_each_state(n, k, states, |s, d| {
                            let agree = edges.iter().filter(|&&(a, b)| d[a] == d[b]).count();
                            w[s] = (j * agree as f64).exp();
                        });
                        let z = compensated_sum(w.iter().copied());
                        w.iter_mut().for_each(|v| *v /= z);
                        w
                    })
                    .collect()
            }
            WorldKind::Table { joints } => {
                for t in joints {
                    if t.len() != states || t.iter().any(|v| !(*v >= 0.0)) {
                        return Err(invalid("joints", format!("each table needs {states} nonnegative entries")));
                    }
                    if (compensated_sum(t.iter().copied()) - 1.0).abs() > SUM_TOLERANCE {
                        return Err(invalid("joints", "each table must sum to 1"));
                    }
                }
                joints.clone()
            }
        };
        let tables = joints
            .into_iter()
            .enumerate()
            .map(|(c, p)| JointTable::new(ClassLabel(c), p))
            .collect();
        Ok(SyntheticWorld {
            spec,
            shape,
            vocab,
            prior,
            tables,
        })
    }

    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    pub fn positions(&self) -> usize {
        self.shape.len()
    }

    pub fn num_classes(&self) -> usize {
        self.tables.len()
    }

    pub fn class_prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn num_states(&self) -> usize {
        self.tables[0].len()
    }

    fn class_index(&self, c: ClassLabel) -> Result<usize> {
        ClassLabel::checked(c.0, self.num_classes()).map(|c| c.0)
    }

    /// Exact joint of class `c`.
    pub fn enumerate_joint(&self, c: ClassLabel) -> Result<&JointTable> {
        Ok(&self.tables[self.class_index(c)?])
    }

    pub fn grid(&self, state: usize) -> TokenGrid {
        TokenGrid::new(self.shape, self.vocab, state_tokens(state, self.positions(), self.vocab.size())).expect("state in range")
    }

    fn index_of(&self, grid: &TokenGrid) -> Result<usize> {
        self.check_grid(grid)?;
        grid.ensure_complete()?;
        Ok(state_index(grid.tokens(), self.vocab.size()))
    }

    fn check_grid(&self, grid: &TokenGrid) -> Result<()> {
        if grid.len() != self.positions() || grid.vocab() != self.vocab {
            return Err(invalid("grid", "does not match the world's shape or codebook"));
        }
        Ok(())
    }

    /// `q(x | c)` of a complete grid.
    pub fn prob(&self, grid: &TokenGrid, c: ClassLabel) -> Result<f64> {
        let s = self.index_of(grid)?;
        Ok(self.tables[self.class_index(c)?].prob(s))
    }

    pub fn sample_class<R: Rng + ?Sized>(&self, c: ClassLabel, rng: &mut R) -> Result<TokenGrid> {
        let table = &self.tables[self.class_index(c)?];
        Ok(self.grid(table.sample(rng)))
    }

    /// Draws `c` from the prior, then a grid from its joint.
    pub fn sample_world<R: Rng + ?Sized>(&self, rng: &mut R) -> (TokenGrid, ClassLabel) {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut c = self.prior.len() - 1;
        for (i, p) in self.prior.iter().enumerate() {
            acc += p;
            if u < acc {
                c = i;
                break;
            }
        }
        let grid = self.grid(self.tables[c].sample(rng));
        (grid, ClassLabel(c))
    }

    /// `q(o, x_j = k | c)` for every `k`, where `o` is the visible part of
    /// `evidence`. Their sum is `q(o | c)`.
    pub fn joint_weights(&self, c: ClassLabel, evidence: &TokenGrid, j: usize) -> Result<Vec<f64>> {
        self.check_grid(evidence)?;
        let c = self.class_index(c)?;
        let (n, k) = (self.positions(), self.vocab.size());
        if j >= n || !evidence.is_masked(j) {
            return Err(invalid("position", format!("{j} is not a hidden position")));
        }
        let toks = evidence.tokens();
        if let WorldKind::Pattern { patterns, corruption } = &self.spec.kind {
            let base = &patterns[c];
            let ev: f64 = (0..n)
                .filter(|&i| !evidence.is_masked(i))
                .map(|i| cell_prob(toks[i], base[i], *corruption, k))
                .product();
            return Ok((0..k).map(|x| ev * cell_prob(x, base[j], *corruption, k)).collect());
        }
        let table = &self.tables[c];
        let visible = (0..n).filter(|&i| !evidence.is_masked(i)).count();
        if j == visible && (0..visible).all(|i| !evidence.is_masked(i)) {
            // Revealed prefix: each value of x_j owns a contiguous block.
            let block = k.pow((n - j - 1) as u32);
            let start = state_index(&toks[..j], k) * block * k;
            return Ok((0..k).map(|x| table.range_sum(start + x * block, block)).collect());
        }
        let hidden: Vec<usize> = (0..n).filter(|&i| i != j && evidence.is_masked(i)).collect();
        let place = |i: usize| k.pow((n - 1 - i) as u32);
        let fixed: usize = (0..n).filter(|&i| !evidence.is_masked(i)).map(|i| toks[i] * place(i)).sum();
        let combos = k.pow(hidden.len() as u32);
        let mut out = Vec::with_capacity(k);
        for x in 0..k {
            let base = fixed + x * place(j);
            let mut digits = vec![0usize; hidden.len()];
            out.push(compensated_sum((0..combos).map(|_| {
                let idx = base + hidden.iter().zip(&digits).map(|(&i, &d)| d * place(i)).sum::<usize>();
                for d in digits.iter_mut().rev() {
                    *d += 1;
                    if *d < k {
                        break;
                    }
                    *d = 0;
                }
                table.prob(idx)
            })));
        }
        Ok(out)
    }

    /// `q(x_j | o, c)`.
    pub fn exact_conditional(&self, c: ClassLabel, evidence: &TokenGrid, j: usize) -> Result<Vec<f64>> {
        normalize(self.joint_weights(c, evidence, j)?)
    }

    /// `q(x_j | o)` with the class summed out under the prior.
    pub fn class_marginal_conditional(&self, evidence: &TokenGrid, j: usize) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.vocab.size()];
        for (c, &pi) in self.prior.iter().enumerate() {
            for (a, w) in acc.iter_mut().zip(self.joint_weights(ClassLabel(c), evidence, j)?) {
                *a += pi * w;
            }
        }
        normalize(acc)
    }

    /// `q(o | c)`.
    pub fn evidence_probability(&self, c: ClassLabel, evidence: &TokenGrid) -> Result<f64> {
        self.check_grid(evidence)?;
        match (0..self.positions()).find(|&i| evidence.is_masked(i)) {
            None => self.prob(evidence, c),
            Some(j) => Ok(compensated_sum(self.joint_weights(c, evidence, j)?)),
        }
    }

    pub fn class_posterior(&self, x0: &TokenGrid) -> Result<Posterior> {
        let s = self.index_of(x0)?;
        let joint: Vec<f64> = self.tables.iter().zip(&self.prior).map(|(t, pi)| pi * t.prob(s)).collect();
        let total = compensated_sum(joint.iter().copied());
        if !(total > 0.0) {
            let c = self.num_classes();
            return Ok(Posterior {
                probs: vec![1.0 / c as f64; c],
                degenerate: true,
            });
        }
        Ok(Posterior {
            probs: joint.iter().map(|v| v / total).collect(),
            degenerate: false,
        })
    }

    fn state_counts(&self, samples: &[TokenGrid]) -> Result<Vec<u64>> {
        let mut counts = vec![0u64; self.num_states()];
        for g in samples {
            counts[self.index_of(g)?] += 1;
        }
        Ok(counts)
    }

    /// Metrics of `samples`, all meant to come from class `c`.
    pub fn compare_to_truth(&self, samples: &[TokenGrid], c: ClassLabel) -> Result<MetricsRecord> {
        if samples.len() < MIN_COMPARE_SAMPLES {
            return Err(Error::TooFewSamples {
                got: samples.len(),
                need: MIN_COMPARE_SAMPLES,
            });
        }
        let ci = self.class_index(c)?;
        let q = self.tables[ci].probs();
        let counts = self.state_counts(samples)?;
        let total = samples.len() as u64;
        let n = samples.len() as f64;
        let (positions, k) = (self.positions(), self.vocab.size());

        let forward_cross_entropy = compensated_sum(
            counts
                .iter()
                .zip(q)
                .filter(|(&m, _)| m > 0)
                .map(|(&m, &p)| -(m as f64) * p.ln()),
        ) / n;

        let mut q_marg = vec![0.0; positions * k];
        let mut p_marg = vec![0.0; positions * k];
        for_each_state(positions, k, q.len(), |s, d| {
            for (j, &x) in d.iter().enumerate() {
                q_marg[j * k + x] += q[s];
                p_marg[j * k + x] += counts[s] as f64 / n;
            }
        });
        let marginal_tv = (0..positions)
            .map(|j| 0.5 * (0..k).map(|x| (q_marg[j * k + x] - p_marg[j * k + x]).abs()).sum::<f64>())
            .sum::<f64>()
            / positions as f64;

        let distinct = counts.iter().filter(|&&m| m > 0).count();
        let consistency = compensated_sum(counts.iter().enumerate().filter(|(_, &m)| m > 0).map(|(s, &m)| {
            let post = self.class_posterior(&self.grid(s)).expect("complete grid");
            m as f64 * post.probs[ci]
        })) / n;

        Ok(MetricsRecord {
            samples: samples.len(),
            joint_tv: joint_tv(q, &counts, total),
            forward_cross_entropy,
            plugin_kl: plugin_kl(q, &counts, total),
            marginal_tv,
            distinct_ratio: distinct as f64 / n,
            class_consistency: consistency,
        })
    }

    /// Exact law of `x_t` for class `c`: a grid from the joint with `masked`
    /// positions, chosen uniformly, replaced by the mask token. Indexed in
    /// radix `K + 1`.
    pub fn masked_state_law(&self, c: ClassLabel, masked: usize) -> Result<Vec<f64>> {
        let (n, k) = (self.positions(), self.vocab.size());
        if masked > n {
            return Err(invalid("masked", format!("{masked} exceeds {n} positions")));
        }
        let size = ((k + 1) as u128).pow(n as u32);
        if size > ENUMERATION_LIMIT {
            return Err(Error::TooLarge {
                states: size,
                bytes: size.saturating_mul(16),
            });
        }
        let q = self.tables[self.class_index(c)?].probs();
        let masks = combinations(n, masked);
        let weight = 1.0 / masks.len() as f64;
        let place: Vec<usize> = (0..n).map(|i| (k + 1).pow((n - 1 - i) as u32)).collect();
        let mut law = vec![0.0; size as usize];
        for hidden in &masks {
            let mut is_hidden = vec![false; n];
            hidden.iter().for_each(|&i| is_hidden[i] = true);
            let mask_part: usize = hidden.iter().map(|&i| k * place[i]).sum();
            for_each_state(n, k, q.len(), |s, d| {
                if q[s] > 0.0 {
                    let idx = mask_part + (0..n).filter(|&i| !is_hidden[i]).map(|i| d[i] * place[i]).sum::<usize>();
                    law[idx] += weight * q[s];
                }
            });
        }
        Ok(law)
    }

    /// Plug-in `KL(q(x_t) ‖ p(x_t))` between the exact law of step-`t` states
    /// and the states `x_t` observed in sampler traces.
    pub fn intermediate_state_divergence(&self, c: ClassLabel, states: &[TokenGrid], t: usize, schedule: &Schedule) -> Result<f64> {
        if states.len() < MIN_DIVERGENCE_TRACES {
            return Err(Error::TooFewSamples {
                got: states.len(),
                need: MIN_DIVERGENCE_TRACES,
            });
        }
        let n = self.positions();
        let q = self.masked_state_law(c, schedule.mask_count(t, n))?;
        let mut counts = vec![0u64; q.len()];
        for g in states {
            self.check_grid(g)?;
            counts[state_index(g.tokens(), self.vocab.size() + 1)] += 1;
        }
        Ok(plugin_kl(&q, &counts, states.len() as u64))
    }
}

fn cell_prob(x: usize, base: usize, corruption: f64, k: usize) -> f64 {
    let hit = if x == base { 1.0 - corruption } else { 0.0 };
    hit + corruption / k as f64
}

fn normalize(mut w: Vec<f64>) -> Result<Vec<f64>> {
    let total = compensated_sum(w.iter().copied());
    if !(total > 0.0) {
        return Err(Error::ImpossibleEvidence);
    }
    w.iter_mut().for_each(|v| *v /= total);
    Ok(w)
}

/// All `r`-subsets of `0..n` in lexicographic order.
fn combinations(n: usize, r: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, r: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == r {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            go(i + 1, n, r, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, r, &mut Vec::new(), &mut out);
    out
}

/// Distinct states among `samples` (complete grids of one world).
pub fn distinct_count(samples: &[TokenGrid]) -> usize {
    samples.iter().map(TokenGrid::tokens).collect::<HashSet<_>>().len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn potts(h: usize, w: usize, k: usize, j: &[f64]) -> SyntheticWorld {
        SyntheticWorld::new(WorldSpec {
            height: h,
            width: w,
            codebook: k,
            class_prior: None,
            kind: WorldKind::Potts { couplings: j.to_vec() },
        })
        .unwrap()
    }

    fn evidence(world: &SyntheticWorld, tokens: &[Option<usize>]) -> TokenGrid {
        let m = world.vocab().mask_id();
        TokenGrid::new(world.shape(), world.vocab(), tokens.iter().map(|t| t.unwrap_or(m)).collect()).unwrap()
    }

    #[test]
    fn default_tables_sum_to_one() {
        for spec in [WorldSpec::patterns(), WorldSpec::potts()] {
            let world = SyntheticWorld::new(spec).unwrap();
            for c in 0..world.num_classes() {
                let t = world.enumerate_joint(ClassLabel(c)).unwrap();
                assert!((t.total() - 1.0).abs() < 1e-9);
            }
        }
        assert_eq!(SyntheticWorld::new(WorldSpec::potts()).unwrap().num_states(), 262_144);
    }

    #[test]
    fn enumeration_bound() {
        let err = SyntheticWorld::new(WorldSpec::uniform(4, 4, 5, 1)).unwrap_err();
        assert!(matches!(err, Error::TooLarge { states, .. } if states == 152_587_890_625));
    }

    #[test]
    fn uncorrupted_pattern_is_a_point_mass() {
        let mut spec = WorldSpec::patterns();
        if let WorldKind::Pattern { corruption, .. } = &mut spec.kind {
            *corruption = 0.0;
        }
        let world = SyntheticWorld::new(spec).unwrap();
        let table = world.enumerate_joint(ClassLabel(2)).unwrap();
        let mode = state_index(&[3, 4, 3, 4, 3, 4, 3, 4, 3], 5);
        assert_eq!(table.prob(mode), 1.0);
        assert_eq!(table.probs().iter().filter(|&&p| p > 0.0).count(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert_eq!(world.sample_class(ClassLabel(2), &mut rng).unwrap().tokens(), &[3, 4, 3, 4, 3, 4, 3, 4, 3]);
        }
        // All but one visible: the hidden cell is the pattern's.
        let mut ev: Vec<Option<usize>> = [3, 4, 3, 4, 3, 4, 3, 4, 3].iter().map(|&t| Some(t)).collect();
        ev[4] = None;
        let cond = world.exact_conditional(ClassLabel(2), &evidence(&world, &ev), 4).unwrap();
        assert_eq!(cond, vec![0.0, 0.0, 0.0, 1.0, 0.0]);
        ev[0] = Some(0);
        assert!(matches!(
            world.exact_conditional(ClassLabel(2), &evidence(&world, &ev), 4),
            Err(Error::ImpossibleEvidence)
        ));
    }

    #[test]
    fn zero_coupling_is_uniform() {
        let world = potts(2, 2, 3, &[0.0]);
        let table = world.enumerate_joint(ClassLabel(0)).unwrap();
        assert!(table.probs().iter().all(|&p| (p - 1.0 / 81.0).abs() < 1e-15));
        let cond = world.exact_conditional(ClassLabel(0), &evidence(&world, &[None; 4]), 2).unwrap();
        assert!(cond.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
    }

    // Hand enumeration of the 2×2, K=2, J=1 model: a 4-cycle whose states
    // have 4 (×2), 2 (×12) or 0 (×2) agreeing edges.
    const E2: f64 = 7.38905609893065;
    const E4: f64 = 54.598150033144236;

    #[test]
    fn small_potts_matches_hand_enumeration() {
        let world = potts(2, 2, 2, &[1.0]);
        let z = 2.0 * E4 + 12.0 * E2 + 2.0;
        let t = world.enumerate_joint(ClassLabel(0)).unwrap();
        let expect = |s: usize| {
            let d = state_tokens(s, 4, 2);
            let agree = [(0, 1), (2, 3), (0, 2), (1, 3)].iter().filter(|&&(a, b)| d[a] == d[b]).count();
            [1.0, 0.0, E2, 0.0, E4][agree] / z
        };
        for s in 0..16 {
            assert!((t.prob(s) - expect(s)).abs() < 1e-15, "state {s}");
        }
        assert!((t.prob(0b0000) - 0.273_175_179_944_643_3).abs() < 1e-12);
        assert!((t.prob(0b0110) - 1.0 / z).abs() < 1e-15);

        // x0 = 0 visible, x3 = 1 visible; distribution of x1.
        let ev = evidence(&world, &[Some(0), None, None, Some(1)]);
        let w = |x1: usize| (0..2).map(|x2| expect(x1 * 4 + x2 * 2 + 1)).sum::<f64>();
        let want = [w(0) / (w(0) + w(1)), w(1) / (w(0) + w(1))];
        let got = world.exact_conditional(ClassLabel(0), &ev, 1).unwrap();
        assert!((got[0] - want[0]).abs() < 1e-12 && (got[1] - want[1]).abs() < 1e-12);
        // By symmetry of the cycle, x1 given (0, ·, ·, 1) is fair.
        assert!((got[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn chain_rule_reconstructs_joint_in_every_order() {
        let world = potts(2, 2, 3, &[0.7, -1.3]);
        let orders = permutations(4);
        for c in 0..2 {
            let table = world.enumerate_joint(ClassLabel(c)).unwrap();
            let mut worst = 0.0f64;
            for order in &orders {
                for s in 0..81 {
                    let x = state_tokens(s, 4, 3);
                    let mut ev = vec![None; 4];
                    let mut p = 1.0;
                    for &j in order {
                        let cond = world.exact_conditional(ClassLabel(c), &evidence(&world, &ev), j).unwrap();
                        p *= cond[x[j]];
                        ev[j] = Some(x[j]);
                    }
                    worst = worst.max((p - table.prob(s)).abs());
                }
            }
            assert!(worst < 1e-10, "{worst:e}");
        }
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for i in 0..=p.len() {
                let mut q = p.clone();
                q.insert(i, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn sampler_matches_table() {
        let world = potts(2, 2, 3, &[1.2, -0.4]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = vec![vec![0u64; 81]; 2];
        let n = 1_000_000;
        for _ in 0..n {
            let (g, c) = world.sample_world(&mut rng);
            counts[c.0][state_index(g.tokens(), 3)] += 1;
        }
        for c in 0..2 {
            let total: u64 = counts[c].iter().sum();
            assert!((total as f64 / n as f64 - 0.5).abs() < 0.005);
            let tv = joint_tv(world.enumerate_joint(ClassLabel(c)).unwrap().probs(), &counts[c], total);
            assert!(tv < 0.01, "{tv}");
        }
    }

    #[test]
    fn posterior_cases() {
        let world = SyntheticWorld::new(WorldSpec::patterns()).unwrap();
        let spec = WorldSpec::patterns();
        let WorldKind::Pattern { patterns, .. } = &spec.kind else { unreachable!() };
        for (c, p) in patterns.iter().enumerate() {
            let g = TokenGrid::new(world.shape(), world.vocab(), p.clone()).unwrap();
            let post = world.class_posterior(&g).unwrap();
            let best = (0..4).max_by(|&a, &b| post.probs[a].total_cmp(&post.probs[b])).unwrap();
            assert_eq!(best, c);
            assert!((post.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // Horizontal stripes with one corrupted cell, by Bayes rule.
        let x = vec![0, 0, 0, 1, 1, 4, 2, 2, 2];
        let g = TokenGrid::new(world.shape(), world.vocab(), x.clone()).unwrap();
        let lik: Vec<f64> = patterns
            .iter()
            .map(|b| x.iter().zip(b).map(|(&a, &b)| if a == b { 0.92 } else { 0.02 }).product())
            .collect();
        let z: f64 = lik.iter().sum();
        let post = world.class_posterior(&g).unwrap();
        for c in 0..4 {
            assert!((post.probs[c] - lik[c] / z).abs() < 1e-12);
        }

        let same = SyntheticWorld::new(WorldSpec {
            class_prior: Some(vec![0.3, 0.7]),
            ..WorldSpec::uniform(2, 2, 2, 2)
        })
        .unwrap();
        let post = same.class_posterior(&same.grid(5)).unwrap();
        assert!((post.probs[0] - 0.3).abs() < 1e-12 && !post.degenerate);
    }

    #[test]
    fn degenerate_posterior_is_flagged() {
        let mut joint = vec![0.0; 4];
        joint[0] = 1.0;
        let world = SyntheticWorld::new(WorldSpec {
            height: 1,
            width: 2,
            codebook: 2,
            class_prior: None,
            kind: WorldKind::Table {
                joints: vec![joint.clone(), joint],
            },
        })
        .unwrap();
        let post = world.class_posterior(&world.grid(3)).unwrap();
        assert!(post.degenerate);
        assert_eq!(post.probs, vec![0.5, 0.5]);
    }

    #[test]
    fn compare_to_truth_cases() {
        let world = potts(2, 2, 3, &[1.0]);
        let c = ClassLabel(0);
        let q = world.enumerate_joint(c).unwrap();
        assert!(matches!(
            world.compare_to_truth(&vec![world.grid(0); 99], c),
            Err(Error::TooFewSamples { got: 99, need: 100 })
        ));

        let mode = world.grid(0);
        let m = world.compare_to_truth(&vec![mode.clone(); 500], c).unwrap();
        assert_eq!(m.distinct_ratio, 1.0 / 500.0);
        assert!((m.forward_cross_entropy + q.prob(0).ln()).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let oracle: Vec<TokenGrid> = (0..200_000).map(|_| world.sample_class(c, &mut rng).unwrap()).collect();
        let uniform: Vec<TokenGrid> = (0..200_000).map(|_| world.grid(rng.gen_range(0..81))).collect();
        let mo = world.compare_to_truth(&oracle, c).unwrap();
        let mu = world.compare_to_truth(&uniform, c).unwrap();
        assert!(mo.joint_tv < 0.02);
        assert!(mu.forward_cross_entropy > mo.forward_cross_entropy);
        assert!(mo.plugin_kl >= 0.0 && mo.plugin_kl < 0.01);
        assert!(mo.marginal_tv < mo.joint_tv + 1e-12);
        assert_eq!(mo.class_consistency, 1.0);
    }

    #[test]
    fn intermediate_divergence_boundaries() {
        let world = potts(2, 2, 3, &[0.9]);
        let c = ClassLabel(0);
        let schedule = Schedule::default().with_steps(4);
        let all_masked = vec![TokenGrid::fully_masked(world.shape(), world.vocab()); 10_000];
        assert_eq!(world.intermediate_state_divergence(c, &all_masked, 4, &schedule).unwrap(), 0.0);
        assert!(world.intermediate_state_divergence(c, &all_masked[..9_999], 4, &schedule).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let finals: Vec<TokenGrid> = (0..20_000).map(|_| world.sample_class(c, &mut rng).unwrap()).collect();
        let at_zero = world.intermediate_state_divergence(c, &finals, 0, &schedule).unwrap();
        let joint = world.compare_to_truth(&finals, c).unwrap().plugin_kl;
        assert!((at_zero - joint).abs() < 1e-12);

        let law = world.masked_state_law(c, 2).unwrap();
        assert!((compensated_sum(law.iter().copied()) - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn prefix_fast_path_matches_enumeration(
            x in proptest::collection::vec(0usize..3, 6),
            p in 0usize..5,
        ) {
            let world = potts(2, 3, 3, &[0.6]);
            let c = ClassLabel(0);
            let ev: Vec<Option<usize>> = (0..6).map(|i| (i < p).then_some(x[i])).collect();
            let fast = world.joint_weights(c, &evidence(&world, &ev), p).unwrap();
            // Same evidence, asked about a later position first, forces the
            // general path; summing out gives the same q(o).
            let slow = world.joint_weights(c, &evidence(&world, &ev), 5).unwrap();
            let (a, b) = (compensated_sum(fast.iter().copied()), compensated_sum(slow.iter().copied()));
            prop_assert!((a - b).abs() < 1e-14);
            if p < 5 {
                let mut hidden = ev.clone();
                hidden[p] = None;
                let ordered = world.exact_conditional(c, &evidence(&world, &hidden), p).unwrap();
                let total: f64 = fast.iter().sum();
                for k in 0..3 {
                    prop_assert!((ordered[k] - fast[k] / total).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn conditionals_and_posteriors_normalize(s in 0usize..81, hide in proptest::collection::vec(any::<bool>(), 4), j in 0usize..4) {
            let world = potts(2, 2, 3, &[0.5, -0.9]);
            let x = state_tokens(s, 4, 3);
            let mut ev: Vec<Option<usize>> = x.iter().zip(&hide).map(|(&t, &h)| (!h).then_some(t)).collect();
            ev[j] = None;
            let cond = world.class_marginal_conditional(&evidence(&world, &ev), j).unwrap();
            prop_assert!((cond.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let post = world.class_posterior(&world.grid(s)).unwrap();
            prop_assert!((post.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
