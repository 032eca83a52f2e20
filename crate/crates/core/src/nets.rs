//! The masked generator and the token critic.
//!
//! Both share one bidirectional pre-LayerNorm transformer. A class token is
//! prepended to the flattened grid; positional embeddings are learned. The
//! generator reads grids that may contain the mask token and emits `K`
//! logits per position; the critic reads complete grids and emits one logit
//! per position.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{self, sigmoid, softmax_rows, truncated_normal, Graph, ParamStore, Tensor, Var, INIT_STDDEV};
use crate::tokenspace::{ClassLabel, TokenGrid};

/// Below this temperature sampling is an argmax.
pub const ARGMAX_TEMPERATURE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// `K` logits per position.
    Categorical,
    /// One logit per position.
    Binary,
}

/// Size of a transformer, independent of the data it models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
}

impl ArchConfig {
    pub fn generator_default() -> Self {
        ArchConfig {
            layers: 4,
            heads: 4,
            embed_dim: 128,
            hidden_dim: 512,
            dropout: 0.1,
        }
    }

    pub fn critic_default() -> Self {
        ArchConfig {
            layers: 3,
            heads: 4,
            embed_dim: 96,
            hidden_dim: 384,
            dropout: 0.1,
        }
    }
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::generator_default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub arch: ArchConfig,
    /// Grid positions `N`; the sequence length is `N + 1`.
    pub positions: usize,
    /// Codebook size `K`.
    pub codebook: usize,
    pub num_classes: usize,
    pub head: HeadKind,
}

impl TransformerConfig {
    pub fn generator(arch: ArchConfig, positions: usize, codebook: usize, num_classes: usize) -> Self {
        TransformerConfig {
            arch,
            positions,
            codebook,
            num_classes,
            head: HeadKind::Categorical,
        }
    }

    pub fn critic(arch: ArchConfig, positions: usize, codebook: usize, num_classes: usize) -> Self {
        TransformerConfig {
            arch,
            positions,
            codebook,
            num_classes,
            head: HeadKind::Binary,
        }
    }

    /// Input vocabulary: the generator also embeds the mask token.
    pub fn vocab_in(&self) -> usize {
        match self.head {
            HeadKind::Categorical => self.codebook + 1,
            HeadKind::Binary => self.codebook,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self.head {
            HeadKind::Categorical => self.codebook,
            HeadKind::Binary => 1,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.positions + 1
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.arch;
        if a.layers == 0 {
            return Err(invalid("layers", "must be at least 1"));
        }
        if a.heads == 0 || a.embed_dim == 0 || !a.embed_dim.is_multiple_of(a.heads) {
            return Err(invalid("embed_dim", format!("{} is not divisible by {} heads", a.embed_dim, a.heads)));
        }
        if a.hidden_dim == 0 {
            return Err(invalid("hidden_dim", "must be positive"));
        }
        if !(0.0..1.0).contains(&a.dropout) {
            return Err(invalid("dropout", "must lie in [0, 1)"));
        }
        if self.positions == 0 || self.codebook == 0 || self.num_classes == 0 {
            return Err(invalid("model dimensions", "positions, codebook and classes must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    ln1: (usize, usize),
    q: (usize, usize),
    k: (usize, usize),
    v: (usize, usize),
    o: (usize, usize),
    ln2: (usize, usize),
    up: (usize, usize),
    down: (usize, usize),
}

#[derive(Clone, Debug)]
struct ParamIds {
    tokens: usize,
    classes: usize,
    positions: usize,
    layers: Vec<LayerIds>,
    ln_final: (usize, usize),
    head: (usize, usize),
}

/// Parameter names and shapes, in store order.
fn layout(cfg: &TransformerConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.arch.embed_dim;
    let h = cfg.arch.hidden_dim;
    let mut out = vec![
        ("embed.tokens".to_string(), vec![cfg.vocab_in(), d]),
        ("embed.classes".to_string(), vec![cfg.num_classes, d]),
        ("embed.positions".to_string(), vec![cfg.seq_len(), d]),
    ];
    for l in 0..cfg.arch.layers {
        let p = |s: &str| format!("layer{l}.{s}");
        out.extend([
            (p("ln1.gamma"), vec![d]),
            (p("ln1.beta"), vec![d]),
            (p("attn.q.w"), vec![d, d]),
            (p("attn.q.b"), vec![d]),
            (p("attn.k.w"), vec![d, d]),
            (p("attn.k.b"), vec![d]),
            (p("attn.v.w"), vec![d, d]),
            (p("attn.v.b"), vec![d]),
            (p("attn.out.w"), vec![d, d]),
            (p("attn.out.b"), vec![d]),
            (p("ln2.gamma"), vec![d]),
            (p("ln2.beta"), vec![d]),
            (p("mlp.up.w"), vec![d, h]),
            (p("mlp.up.b"), vec![h]),
            (p("mlp.down.w"), vec![h, d]),
            (p("mlp.down.b"), vec![d]),
        ]);
    }
    out.extend([
        ("ln_final.gamma".to_string(), vec![d]),
        ("ln_final.beta".to_string(), vec![d]),
        ("head.w".to_string(), vec![d, cfg.out_dim()]),
        ("head.b".to_string(), vec![cfg.out_dim()]),
    ]);
    out
}

fn resolve_ids(cfg: &TransformerConfig, store: &ParamStore) -> Result<ParamIds> {
    let expected = layout(cfg);
    if store.len() != expected.len() {
        return Err(Error::Format(format!(
            "expected {} parameters, found {}",
            expected.len(),
            store.len()
        )));
    }
    for (name, shape) in &expected {
        let idx = store.find(name).ok_or_else(|| Error::Format(format!("missing parameter `{name}`")))?;
        if store.get(idx).value.shape() != shape.as_slice() {
            return Err(Error::Shape {
                op: "load parameter",
                lhs: shape.clone(),
                rhs: store.get(idx).value.shape().to_vec(),
            });
        }
    }
    let id = |n: &str| store.find(n).unwrap();
    let pair = |n: &str| (id(&format!("{n}.gamma")), id(&format!("{n}.beta")));
    let lin = |n: &str| (id(&format!("{n}.w")), id(&format!("{n}.b")));
    Ok(ParamIds {
        tokens: id("embed.tokens"),
        classes: id("embed.classes"),
        positions: id("embed.positions"),
        layers: (0..cfg.arch.layers)
            .map(|l| LayerIds {
                ln1: pair(&format!("layer{l}.ln1")),
                q: lin(&format!("layer{l}.attn.q")),
                k: lin(&format!("layer{l}.attn.k")),
                v: lin(&format!("layer{l}.attn.v")),
                o: lin(&format!("layer{l}.attn.out")),
                ln2: pair(&format!("layer{l}.ln2")),
                up: lin(&format!("layer{l}.mlp.up")),
                down: lin(&format!("layer{l}.mlp.down")),
            })
            .collect(),
        ln_final: pair("ln_final"),
        head: lin("head"),
    })
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    model: TransformerConfig,
    #[serde(default)]
    provenance: serde_json::Value,
}

/// Path of the JSON metadata stored next to a weights file.
pub fn sidecar_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

/// Shared backbone of both networks.
#[derive(Clone, Debug)]
pub struct Transformer {
    config: TransformerConfig,
    params: ParamStore,
    ids: ParamIds,
}

impl Transformer {
    pub fn new<R: Rng + ?Sized>(config: TransformerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape) in layout(&config) {
            let value = if name.ends_with(".gamma") {
                Tensor::filled(&shape, 1.0)
            } else if name.ends_with(".b") || name.ends_with(".beta") {
                Tensor::zeros(&shape)
            } else {
                truncated_normal(&shape, INIT_STDDEV, rng)
            };
            params.add(&name, value)?;
        }
        let ids = resolve_ids(&config, &params)?;
        Ok(Transformer { config, params, ids })
    }

    pub fn from_params(config: TransformerConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let ids = resolve_ids(&config, &params)?;
        Ok(Transformer { config, params, ids })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Records a forward pass; returns `[batch·N, out_dim]` logits.
    /// Dropout is active only when an RNG is supplied.
    pub fn forward(
        &self,
        g: &mut Graph,
        tokens: &[&[usize]],
        classes: &[usize],
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        self.forward_with(&self.params, g, tokens, classes, dropout)
    }

    /// [`Transformer::forward`] reading weights from `store`, which must
    /// share this model's layout.
    pub fn forward_with(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        tokens: &[&[usize]],
        classes: &[usize],
        mut dropout: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (n, seq) = (cfg.positions, cfg.seq_len());
        if tokens.len() != classes.len() {
            return Err(invalid("batch", "token and class counts differ"));
        }
        let batch = tokens.len();
        let mut ids = Vec::with_capacity(batch * seq);
        for (t, &c) in tokens.iter().zip(classes) {
            if t.len() != n {
                return Err(Error::Shape {
                    op: "transformer input",
                    lhs: vec![n],
                    rhs: vec![t.len()],
                });
            }
            if c >= cfg.num_classes {
                return Err(invalid("class", format!("{c} is not below {}", cfg.num_classes)));
            }
            ids.push(cfg.vocab_in() + c);
            ids.extend_from_slice(t);
        }
        let p = |g: &mut Graph, i: usize| g.param(store, i);
        let tok_table = p(g, self.ids.tokens);
        let cls_table = p(g, self.ids.classes);
        let table = g.concat(&[tok_table, cls_table], 0)?;
        let x = g.embedding(table, &ids)?;
        let pos_table = p(g, self.ids.positions);
        let pos_ids: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let pos = g.embedding(pos_table, &pos_ids)?;
        let mut x = g.add(x, pos)?;
        let rate = cfg.arch.dropout;
        if let Some(rng) = dropout.as_deref_mut() {
            x = g.dropout(x, rate, rng)?;
        }
        for layer in &self.ids.layers {
            let (gm, bt) = (p(g, layer.ln1.0), p(g, layer.ln1.1));
            let h = g.layer_norm(x, gm, bt)?;
            let proj = |g: &mut Graph, (w, b): (usize, usize), input: Var| {
                let (w, b) = (p(g, w), p(g, b));
                g.linear(input, w, b)
            };
            let q = proj(g, layer.q, h)?;
            let k = proj(g, layer.k, h)?;
            let v = proj(g, layer.v, h)?;
            let a = g.attention(q, k, v, seq, cfg.arch.heads)?;
            let mut o = proj(g, layer.o, a)?;
            if let Some(rng) = dropout.as_deref_mut() {
                o = g.dropout(o, rate, rng)?;
            }
            x = g.add(x, o)?;
            let (gm, bt) = (p(g, layer.ln2.0), p(g, layer.ln2.1));
            let h = g.layer_norm(x, gm, bt)?;
            let up = proj(g, layer.up, h)?;
            let act = g.gelu(up);
            let mut down = proj(g, layer.down, act)?;
            if let Some(rng) = dropout.as_deref_mut() {
                down = g.dropout(down, rate, rng)?;
            }
            x = g.add(x, down)?;
        }
        let (gm, bt) = (p(g, self.ids.ln_final.0), p(g, self.ids.ln_final.1));
        let x = g.layer_norm(x, gm, bt)?;
        let grid_rows: Vec<usize> = (0..batch).flat_map(|b| (1..seq).map(move |j| b * seq + j)).collect();
        let x = g.embedding(x, &grid_rows)?;
        let (w, b) = (p(g, self.ids.head.0), p(g, self.ids.head.1));
        g.linear(x, w, b)
    }

    /// Weights plus a JSON sidecar holding the config and `provenance`.
    pub fn save(&self, weights: &Path, provenance: serde_json::Value) -> Result<()> {
        numerics::weights::save(&self.params, weights)?;
        let sidecar = Sidecar {
            model: self.config.clone(),
            provenance,
        };
        let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(sidecar_path(weights), text + "\n")?;
        Ok(())
    }

    pub fn load(weights: &Path) -> Result<Self> {
        let text = fs::read_to_string(sidecar_path(weights))?;
        let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        let params = numerics::weights::load(weights)?;
        Transformer::from_params(sidecar.model, params)
    }
}

fn check_grids(cfg: &TransformerConfig, grids: &[TokenGrid], classes: &[ClassLabel], complete: bool) -> Result<()> {
    if grids.len() != classes.len() {
        return Err(invalid("batch", "grid and class counts differ"));
    }
    for grid in grids {
        if grid.len() != cfg.positions {
            return Err(Error::Shape {
                op: "grid length",
                lhs: vec![cfg.positions],
                rhs: vec![grid.len()],
            });
        }
        if grid.vocab().size() != cfg.codebook {
            return Err(invalid("vocab", format!("grid uses {} codes, model {}", grid.vocab().size(), cfg.codebook)));
        }
        if complete {
            grid.ensure_complete()?;
        }
    }
    Ok(())
}

/// Masked-token predictor.
#[derive(Clone, Debug)]
pub struct GeneratorModel {
    net: Transformer,
}

impl GeneratorModel {
    pub fn new<R: Rng + ?Sized>(arch: ArchConfig, positions: usize, codebook: usize, classes: usize, rng: &mut R) -> Result<Self> {
        let cfg = TransformerConfig::generator(arch, positions, codebook, classes);
        Ok(GeneratorModel {
            net: Transformer::new(cfg, rng)?,
        })
    }

    pub fn from_transformer(net: Transformer) -> Result<Self> {
        if net.config.head != HeadKind::Categorical {
            return Err(invalid("model", "a generator needs a categorical head"));
        }
        Ok(GeneratorModel { net })
    }

    pub fn net(&self) -> &Transformer {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Transformer {
        &mut self.net
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.net.config
    }

    /// Records a forward pass for a batch; grids may hold mask tokens.
    pub fn forward(&self, g: &mut Graph, grids: &[TokenGrid], classes: &[ClassLabel], dropout: Option<&mut dyn RngCore>) -> Result<Var> {
        check_grids(&self.net.config, grids, classes, false)?;
        let toks: Vec<&[usize]> = grids.iter().map(TokenGrid::tokens).collect();
        let cls: Vec<usize> = classes.iter().map(|c| c.0).collect();
        self.net.forward(g, &toks, &cls, dropout)
    }

    /// Evaluation-mode logits, `[batch·N, K]`.
    pub fn logits(&self, grids: &[TokenGrid], classes: &[ClassLabel]) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, grids, classes, None)?;
        Ok(g.value(out).clone())
    }

    pub fn save(&self, weights: &Path, provenance: serde_json::Value) -> Result<()> {
        self.net.save(weights, provenance)
    }

    pub fn load(weights: &Path) -> Result<Self> {
        Self::from_transformer(Transformer::load(weights)?)
    }
}

/// Per-position originality scorer over complete grids.
#[derive(Clone, Debug)]
pub struct CriticModel {
    net: Transformer,
}

impl CriticModel {
    pub fn new<R: Rng + ?Sized>(arch: ArchConfig, positions: usize, codebook: usize, classes: usize, rng: &mut R) -> Result<Self> {
        let cfg = TransformerConfig::critic(arch, positions, codebook, classes);
        Ok(CriticModel {
            net: Transformer::new(cfg, rng)?,
        })
    }

    pub fn from_transformer(net: Transformer) -> Result<Self> {
        if net.config.head != HeadKind::Binary {
            return Err(invalid("model", "a critic needs a binary head"));
        }
        Ok(CriticModel { net })
    }

    pub fn net(&self) -> &Transformer {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Transformer {
        &mut self.net
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.net.config
    }

    pub fn forward(&self, g: &mut Graph, grids: &[TokenGrid], classes: &[ClassLabel], dropout: Option<&mut dyn RngCore>) -> Result<Var> {
        check_grids(&self.net.config, grids, classes, true)?;
        let toks: Vec<&[usize]> = grids.iter().map(TokenGrid::tokens).collect();
        let cls: Vec<usize> = classes.iter().map(|c| c.0).collect();
        self.net.forward(g, &toks, &cls, dropout)
    }

    /// Evaluation-mode logits, one per position (`batch·N`).
    pub fn logits(&self, grids: &[TokenGrid], classes: &[ClassLabel]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, grids, classes, None)?;
        Ok(g.value(out).data().to_vec())
    }

    /// Sigmoid of [`CriticModel::logits`].
    pub fn scores(&self, grids: &[TokenGrid], classes: &[ClassLabel]) -> Result<Vec<f64>> {
        Ok(self.logits(grids, classes)?.into_iter().map(sigmoid).collect())
    }

    pub fn save(&self, weights: &Path, provenance: serde_json::Value) -> Result<()> {
        self.net.save(weights, provenance)
    }

    pub fn load(weights: &Path) -> Result<Self> {
        Self::from_transformer(Transformer::load(weights)?)
    }
}

/// Probabilities of `softmax(logits / temperature)`; one-hot on the first
/// maximum when the temperature is below [`ARGMAX_TEMPERATURE`].
pub fn tempered_probs(logits: &[f64], temperature: f64) -> Vec<f64> {
    if temperature < ARGMAX_TEMPERATURE {
        let best = logits
            .iter()
            .enumerate()
            .fold(0, |b, (i, &v)| if v > logits[b] { i } else { b });
        let mut p = vec![0.0; logits.len()];
        p[best] = 1.0;
        return p;
    }
    let scaled: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
    softmax_rows(&Tensor::new(vec![1, scaled.len()], scaled).expect("row shape")).into_data()
}

/// Inverse-CDF draw from a probability vector; consumes one uniform.
pub fn draw_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Draws one code per listed position from tempered softmax rows of
/// `logits` (`[N, K]`). Returns `(position, code, probability)` triples.
pub fn sample_tokens<R: Rng + ?Sized>(
    logits: &Tensor,
    temperature: f64,
    rng: &mut R,
    positions: &[usize],
) -> Result<Vec<(usize, usize, f64)>> {
    if !(temperature > 0.0) {
        return Err(invalid("temperature", format!("{temperature} is not positive")));
    }
    let (rows, _) = logits.dims2();
    positions
        .iter()
        .map(|&j| {
            if j >= rows {
                return Err(invalid("position", format!("{j} is not below {rows}")));
            }
            let probs = tempered_probs(logits.row(j), temperature);
            let code = draw_categorical(&probs, rng);
            Ok((j, code, probs[code]))
        })
        .collect()
}

/// Worst finite-difference relative error of the full training loss with
/// respect to every parameter, over `instances` random miniature networks
/// and batches. Weights are perturbed away from their initial values so
/// biases and norms are exercised too.
pub fn gradient_check(arch: &ArchConfig, head: HeadKind, instances: usize, seed: u64) -> Result<f64> {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    let (positions, codebook, classes, batch) = (4, 3, 2, 2);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let cfg = TransformerConfig {
            arch: arch.clone(),
            positions,
            codebook,
            num_classes: classes,
            head,
        };
        let mut net = Transformer::new(cfg.clone(), &mut rng)?;
        for p in net.params_mut().iter_mut() {
            for v in p.value.data_mut() {
                *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let vocab_in = cfg.vocab_in();
        let tokens: Vec<Vec<usize>> = (0..batch)
            .map(|_| (0..positions).map(|_| rng.gen_range(0..vocab_in)).collect())
            .collect();
        let cls: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..classes)).collect();
        let targets: Vec<usize> = (0..batch * positions).map(|_| rng.gen_range(0..codebook)).collect();
        let mut weights: Vec<f64> = tokens.iter().flatten().map(|&t| f64::from(u8::from(t == codebook))).collect();
        weights[0] = 1.0;
        let bits: Vec<f64> = (0..batch * positions).map(|_| f64::from(rng.gen_range(0..2u8))).collect();
        let drop_seed: u64 = rng.gen();
        let err = numerics::gradcheck::check_params(net.params(), |g, store| {
            let toks: Vec<&[usize]> = tokens.iter().map(Vec::as_slice).collect();
            let mut drng = ChaCha8Rng::seed_from_u64(drop_seed);
            let logits = net.forward_with(store, g, &toks, &cls, Some(&mut drng))?;
            match head {
                HeadKind::Categorical => g.cross_entropy(logits, &targets, &weights),
                HeadKind::Binary => g.bce_with_logits(logits, &bits),
            }
        })?;
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenspace::{GridShape, Vocabulary};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ArchConfig {
        ArchConfig {
            layers: 2,
            heads: 2,
            embed_dim: 8,
            hidden_dim: 16,
            dropout: 0.1,
        }
    }

    fn grid(tokens: &[usize], k: usize) -> TokenGrid {
        TokenGrid::new(GridShape::new(2, 2).unwrap(), Vocabulary::new(k).unwrap(), tokens.to_vec()).unwrap()
    }

    #[test]
    fn full_networks_match_finite_differences() {
        for head in [HeadKind::Categorical, HeadKind::Binary] {
            let err = gradient_check(&tiny(), head, 3, 11).unwrap();
            assert!(err < 1e-4, "{head:?}: {err:e}");
        }
    }

    #[test]
    fn generator_logit_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = GeneratorModel::new(tiny(), 4, 3, 2, &mut rng).unwrap();
        let out = g.logits(&[grid(&[0, 3, 1, 3], 3)], &[ClassLabel(1)]).unwrap();
        assert_eq!(out.shape(), &[4, 3]);
        assert!(out.is_finite());
    }

    #[test]
    fn generator_rejects_wrong_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = GeneratorModel::new(tiny(), 9, 3, 2, &mut rng).unwrap();
        assert!(g.logits(&[grid(&[0, 3, 1, 3], 3)], &[ClassLabel(0)]).is_err());
    }

    #[test]
    fn tied_class_embeddings_give_identical_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = GeneratorModel::new(tiny(), 4, 3, 2, &mut rng).unwrap();
        let store = g.net_mut().params_mut();
        let idx = store.find("embed.classes").unwrap();
        let row0 = store.get(idx).value.row(0).to_vec();
        store.get_mut(idx).value.data_mut()[8..16].copy_from_slice(&row0);
        let x = grid(&[2, 3, 3, 0], 3);
        let a = g.logits(std::slice::from_ref(&x), &[ClassLabel(0)]).unwrap();
        let b = g.logits(&[x], &[ClassLabel(1)]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn critic_rejects_masked_input_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = CriticModel::new(tiny(), 4, 3, 2, &mut rng).unwrap();
        assert!(matches!(
            c.logits(&[grid(&[0, 3, 1, 2], 3)], &[ClassLabel(0)]),
            Err(Error::IncompleteGrid(1))
        ));
        let x = grid(&[0, 1, 2, 2], 3);
        let out = c.logits(&[x.clone(), x], &[ClassLabel(1), ClassLabel(1)]).unwrap();
        assert_eq!(out.len(), 8);
        assert_eq!(out[..4], out[4..]);
    }

    #[test]
    fn batch_composition_does_not_change_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = GeneratorModel::new(tiny(), 4, 3, 2, &mut rng).unwrap();
        let a = grid(&[0, 3, 1, 3], 3);
        let b = grid(&[3, 3, 3, 2], 3);
        let alone = g.logits(std::slice::from_ref(&a), &[ClassLabel(0)]).unwrap();
        let batched = g.logits(&[b, a], &[ClassLabel(1), ClassLabel(0)]).unwrap();
        assert_eq!(alone.data(), &batched.data()[12..]);
    }

    #[test]
    fn sample_tokens_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let uniform = Tensor::zeros(&[1, 5]);
        let n = 100_000;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            counts[sample_tokens(&uniform, 1.0, &mut rng, &[0]).unwrap()[0].1] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.2).abs() < 0.01);
        }
        let peaked = Tensor::new(vec![1, 5], vec![10.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let hits = (0..10_000)
            .filter(|_| sample_tokens(&peaked, 1.0, &mut rng, &[0]).unwrap()[0].1 == 0)
            .count();
        assert!(hits as f64 / 10_000.0 > 0.99);
        let cold = Tensor::new(vec![1, 3], vec![0.1, 0.3, 0.2]).unwrap();
        for _ in 0..100 {
            assert_eq!(sample_tokens(&cold, 1e-7, &mut rng, &[0]).unwrap()[0].1, 1);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = CriticModel::new(tiny(), 4, 3, 2, &mut rng).unwrap();
        let path = dir.path().join("critic.tclw");
        c.save(&path, serde_json::json!({"seed": 6})).unwrap();
        let back = CriticModel::load(&path).unwrap();
        assert_eq!(back.net().params().checksum(), c.net().params().checksum());
        assert!(GeneratorModel::load(&path).is_err());
    }
}
