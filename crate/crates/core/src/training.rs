//! Forward pass, straight-through backward pass and the optimisation loop.
//!
//! Pipeline per slide: segment -> group rates / patch scores -> budgets ->
//! top-k (+ optional cap) -> hard gate -> mean pool -> proxy head -> NLL,
//! plus the two Bernoulli-KL compression terms.
//!
//! Gradients follow the straight-through contract: the mask, budgets and the
//! pooling count are constants; a selected gate differentiates like
//! `s_i * r_j(i)`; priors are constants.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{affine, dot, sigmoid};
use crate::objective::{
    bernoulli_kl_grad, beta_at, group_loss, group_prior, patch_loss, patch_prior, total_loss,
    BetaSchedule, LossBreakdown,
};
use crate::segmentation::{segment, TissuePartition};
use crate::selector::{
    concat, gate_backward, group_budgets, rank_order, select, ParamGradients,
    SelectionResult, SelectorParams, DEFAULT_HIDDEN,
};
use crate::wsi_data::{EmbeddingBundle, PromptBank, QuestionRecord};

/// Global token budget applied after the per-group top-k.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cap {
    Absolute(usize),
    /// Fraction of `N` in `(0, 1]`, resolved as `ceil(f * N)`.
    Fraction(f64),
}

impl Cap {
    pub fn resolve(&self, n: usize) -> Result<usize> {
        match *self {
            Cap::Absolute(k) => Ok(k),
            Cap::Fraction(f) if f > 0.0 && f <= 1.0 => Ok((f * n as f64).ceil() as usize),
            Cap::Fraction(f) => Err(Error::validation(format!(
                "cap fraction {f} outside (0, 1]"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iters: u64,
    pub optimizer: Optimizer,
    pub schedule: BetaSchedule,
    pub cap: Option<Cap>,
    pub seed: u64,
    pub hidden: usize,
    pub dim: usize,
    pub classes: usize,
}

impl TrainConfig {
    pub fn new(dim: usize, classes: usize) -> Self {
        Self {
            learning_rate: 1e-3,
            iters: 1000,
            optimizer: Optimizer::adam(),
            schedule: BetaSchedule::default(),
            cap: None,
            seed: 0,
            hidden: DEFAULT_HIDDEN,
            dim,
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::validation("learning rate must be finite and >= 0"));
        }
        if self.hidden == 0 || self.dim == 0 || self.classes == 0 {
            return Err(Error::validation("hidden, dim and classes must be >= 1"));
        }
        self.schedule.validate()
    }
}

/// Xavier-uniform weights, zero biases. Draw order: group W1, group W2,
/// patch W1, patch W2, head W.
pub fn init_params(dim: usize, hidden: usize, classes: usize, seed: u64) -> SelectorParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = SelectorParams::zeros(dim, hidden, classes);
    p.seed = seed;
    let mut fill = |w: &mut [f64], fan_in: usize, fan_out: usize| {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for v in w.iter_mut() {
            *v = rng.random_range(-bound..=bound);
        }
    };
    fill(&mut p.group_net.w1, 2 * dim, hidden);
    fill(&mut p.group_net.w2, hidden, 1);
    fill(&mut p.patch_net.w1, 2 * dim, hidden);
    fill(&mut p.patch_net.w2, hidden, 1);
    fill(&mut p.proxy_head.w, 2 * dim, classes);
    p
}

fn log_softmax_nll(logits: &[f64], label: usize) -> (Vec<f64>, f64) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let log_z = max + sum.ln();
    let probs = logits.iter().map(|z| (z - log_z).exp()).collect();
    let nll = if logits[label] == max {
        // ln(1 + sum of the other terms) keeps precision when the label dominates
        let rest: f64 = logits
            .iter()
            .enumerate()
            .filter(|&(c, _)| c != label)
            .map(|(_, z)| (z - max).exp())
            .sum();
        rest.ln_1p()
    } else {
        log_z - logits[label]
    };
    (probs, nll.max(0.0))
}

/// Logits of the proxy head and the single-token NLL of the true answer.
pub fn proxy_decode(
    pooled: &[f64],
    question: &QuestionRecord,
    params: &SelectorParams,
) -> Result<(Vec<f64>, f64)> {
    if question.answer_label() >= params.classes {
        return Err(Error::validation(format!(
            "answer label {} out of range for {} classes",
            question.answer_label(),
            params.classes
        )));
    }
    if pooled.len() != params.dim || question.dim() != params.dim {
        return Err(Error::validation("pooled/question dims differ from params"));
    }
    let input = concat(pooled, question.embedding());
    let mut logits = vec![0.0; params.classes];
    affine(&params.proxy_head.w, &params.proxy_head.b, &input, &mut logits);
    let (_, nll) = log_softmax_nll(&logits, question.answer_label());
    Ok((logits, nll))
}

/// Argmax of the proxy head for a given selected set (ties to the lower class).
pub fn proxy_predict(
    bundle: &EmbeddingBundle,
    question: &QuestionRecord,
    params: &SelectorParams,
    selected: &[usize],
) -> Result<usize> {
    let d = bundle.dim();
    let mut pooled = vec![0.0; d];
    for &i in selected {
        for (p, v) in pooled.iter_mut().zip(bundle.feature(i)) {
            *p += v;
        }
    }
    let denom = selected.len().max(1) as f64;
    pooled.iter_mut().for_each(|p| *p /= denom);
    let (logits, _) = proxy_decode(&pooled, question, params)?;
    let mut best = 0;
    for (c, &z) in logits.iter().enumerate() {
        if z > logits[best] {
            best = c;
        }
    }
    Ok(best)
}

/// A slide with its segmentation and pseudo-priors computed once.
#[derive(Debug, Clone)]
pub struct PreparedSlide<'a> {
    pub bundle: &'a EmbeddingBundle,
    pub question: &'a QuestionRecord,
    pub partition: TissuePartition,
    pub group_priors: Vec<Option<f64>>,
    pub patch_priors: Vec<f64>,
}

impl<'a> PreparedSlide<'a> {
    pub fn new(
        bundle: &'a EmbeddingBundle,
        prompts: &PromptBank,
        question: &'a QuestionRecord,
    ) -> Result<Self> {
        let partition = segment(bundle, prompts)?;
        Self::with_partition(bundle, question, partition)
    }

    pub fn with_partition(
        bundle: &'a EmbeddingBundle,
        question: &'a QuestionRecord,
        partition: TissuePartition,
    ) -> Result<Self> {
        let group_priors = group_prior(&partition, question)?;
        let patch_priors = patch_prior(bundle, question)?;
        Ok(Self {
            bundle,
            question,
            partition,
            group_priors,
            patch_priors,
        })
    }
}

/// Anchor of a straight-through probe: the hard selection, ReLU activation
/// pattern and gate products `s_i r_j` at the anchor parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SteAnchor {
    selected: Vec<usize>,
    gate_products: Vec<f64>,
    activation_pattern: Vec<bool>,
}

struct Trace {
    group_inputs: Vec<Option<Vec<f64>>>,
    group_pre: Vec<Vec<f64>>,
    patch_inputs: Vec<Vec<f64>>,
    patch_pre: Vec<Vec<f64>>,
    result: SelectionResult,
    head_input: Vec<f64>,
    probs: Vec<f64>,
    breakdown: LossBreakdown,
}

impl Trace {
    fn activation_pattern(&self) -> Vec<bool> {
        self.group_pre
            .iter()
            .chain(&self.patch_pre)
            .flat_map(|pre| pre.iter().map(|&z| z > 0.0))
            .collect()
    }

    fn gate_products(&self, partition: &TissuePartition) -> Vec<f64> {
        self.result
            .selected
            .iter()
            .map(|&i| {
                let r = self.result.rates[partition.labels()[i]].unwrap_or(0.0);
                self.result.scores[i] * r
            })
            .collect()
    }
}

fn run_forward(
    slide: &PreparedSlide<'_>,
    params: &SelectorParams,
    cap: Option<Cap>,
    betas: (f64, f64),
    probe: Option<&SteAnchor>,
) -> Result<Trace> {
    let bundle = slide.bundle;
    let question = slide.question;
    let partition = &slide.partition;
    if bundle.dim() != params.dim || question.dim() != params.dim {
        return Err(Error::validation(format!(
            "dimension mismatch: features {}, question {}, params {}",
            bundle.dim(),
            question.dim(),
            params.dim
        )));
    }
    let q = question.embedding();
    let h = params.hidden;

    let mut group_inputs = Vec::with_capacity(partition.n_groups());
    let mut group_pre = Vec::with_capacity(partition.n_groups());
    let mut rates = Vec::with_capacity(partition.n_groups());
    for j in 0..partition.n_groups() {
        let mut pre = vec![0.0; h];
        match partition.prototype(j) {
            Some(g) => {
                let input = concat(g, q);
                rates.push(Some(sigmoid(params.group_net.forward(&input, &mut pre))));
                group_inputs.push(Some(input));
            }
            None => {
                rates.push(None);
                group_inputs.push(None);
            }
        }
        group_pre.push(pre);
    }

    let n = bundle.n_patches();
    let mut patch_inputs = Vec::with_capacity(n);
    let mut patch_pre = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let input = concat(bundle.feature(i), q);
        let mut pre = vec![0.0; h];
        scores.push(sigmoid(params.patch_net.forward(&input, &mut pre)));
        patch_inputs.push(input);
        patch_pre.push(pre);
    }

    let budgets = group_budgets(&rates, &partition.group_sizes())?;
    let cap = cap.map(|c| c.resolve(n)).transpose()?;
    let result = select(partition, &rates, &scores, &budgets, cap)?;

    let d = bundle.dim();
    let mut pooled = vec![0.0; d];
    for (slot, &i) in result.selected.iter().enumerate() {
        let gate = match probe {
            None => 1.0,
            Some(anchor) => {
                let r = rates[partition.labels()[i]].unwrap_or(0.0);
                1.0 + (scores[i] * r - anchor.gate_products[slot])
            }
        };
        for (p, v) in pooled.iter_mut().zip(bundle.feature(i)) {
            *p += gate * v;
        }
    }
    let denominator = result.selected.len().max(1) as f64;
    pooled.iter_mut().for_each(|p| *p /= denominator);

    if question.answer_label() >= params.classes {
        return Err(Error::validation(format!(
            "answer label {} out of range for {} classes",
            question.answer_label(),
            params.classes
        )));
    }
    let head_input = concat(&pooled, q);
    let mut logits = vec![0.0; params.classes];
    affine(&params.proxy_head.w, &params.proxy_head.b, &head_input, &mut logits);
    let (probs, l_vqa) = log_softmax_nll(&logits, question.answer_label());

    let l_group = group_loss(&rates, &slide.group_priors)?;
    let l_patch = patch_loss(&scores, &slide.patch_priors)?;
    let breakdown = total_loss(l_vqa, l_group, l_patch, betas);

    Ok(Trace {
        group_inputs,
        group_pre,
        patch_inputs,
        patch_pre,
        result,
        head_input,
        probs,
        breakdown,
    })
}

fn run_backward(
    slide: &PreparedSlide<'_>,
    params: &SelectorParams,
    trace: &Trace,
) -> Result<ParamGradients> {
    let bundle = slide.bundle;
    let partition = &slide.partition;
    let d = params.dim;
    let d2 = 2 * d;
    let mut grad = params.zeros_like();

    // proxy head
    let mut d_logits = trace.probs.clone();
    d_logits[slide.question.answer_label()] -= 1.0;
    let mut d_pooled = vec![0.0; d];
    for (c, &dl) in d_logits.iter().enumerate() {
        grad.proxy_head.b[c] += dl;
        let w_row = &params.proxy_head.w[c * d2..(c + 1) * d2];
        let g_row = &mut grad.proxy_head.w[c * d2..(c + 1) * d2];
        for (g, x) in g_row.iter_mut().zip(&trace.head_input) {
            *g += dl * x;
        }
        for (dp, w) in d_pooled.iter_mut().zip(&w_row[..d]) {
            *dp += dl * w;
        }
    }

    // straight-through gate
    let gates = gate_backward(bundle, &trace.result, partition, &d_pooled)?;
    let mut d_scores = gates.d_scores;
    let mut d_rates = gates.d_rates;

    // compression terms
    let bd = &trace.breakdown;
    let n = bundle.n_patches() as f64;
    for (i, ds) in d_scores.iter_mut().enumerate() {
        *ds += bd.beta_p / n * bernoulli_kl_grad(trace.result.scores[i], slide.patch_priors[i]);
    }
    let nonempty = partition.nonempty_groups().count() as f64;
    for (j, dr) in d_rates.iter_mut().enumerate() {
        if let (Some(r), Some(p)) = (trace.result.rates[j], slide.group_priors[j]) {
            *dr += bd.beta_g / nonempty * bernoulli_kl_grad(r, p);
        }
    }

    // through the sigmoids and the two scorers
    for (i, &ds) in d_scores.iter().enumerate() {
        let s = trace.result.scores[i];
        let d_out = ds * s * (1.0 - s);
        params
            .patch_net
            .backward(&trace.patch_inputs[i], &trace.patch_pre[i], d_out, &mut grad.patch_net);
    }
    for (j, input) in trace.group_inputs.iter().enumerate() {
        if let (Some(input), Some(r)) = (input, trace.result.rates[j]) {
            let d_out = d_rates[j] * r * (1.0 - r);
            params
                .group_net
                .backward(input, &trace.group_pre[j], d_out, &mut grad.group_net);
        }
    }
    grad.check_finite()?;
    Ok(grad)
}

/// Forward pass with `beta = beta_at(iter)`.
pub fn forward(
    bundle: &EmbeddingBundle,
    prompts: &PromptBank,
    question: &QuestionRecord,
    params: &SelectorParams,
    cfg: &TrainConfig,
    iter: u64,
) -> Result<(SelectionResult, LossBreakdown)> {
    let slide = PreparedSlide::new(bundle, prompts, question)?;
    forward_prepared(&slide, params, cfg, iter)
}

pub fn forward_prepared(
    slide: &PreparedSlide<'_>,
    params: &SelectorParams,
    cfg: &TrainConfig,
    iter: u64,
) -> Result<(SelectionResult, LossBreakdown)> {
    let t = run_forward(slide, params, cfg.cap, beta_at(iter, &cfg.schedule), None)?;
    Ok((t.result, t.breakdown))
}

/// Straight-through gradient of the total loss for every parameter.
pub fn backward(
    bundle: &EmbeddingBundle,
    prompts: &PromptBank,
    question: &QuestionRecord,
    params: &SelectorParams,
    cfg: &TrainConfig,
    iter: u64,
) -> Result<ParamGradients> {
    let slide = PreparedSlide::new(bundle, prompts, question)?;
    Ok(forward_backward(&slide, params, cfg, iter)?.2)
}

pub fn forward_backward(
    slide: &PreparedSlide<'_>,
    params: &SelectorParams,
    cfg: &TrainConfig,
    iter: u64,
) -> Result<(SelectionResult, LossBreakdown, ParamGradients)> {
    let t = run_forward(slide, params, cfg.cap, beta_at(iter, &cfg.schedule), None)?;
    let grad = run_backward(slide, params, &t)?;
    Ok((t.result, t.breakdown, grad))
}

/// Records the hard selection and gate products at `params`.
pub fn ste_anchor(
    slide: &PreparedSlide<'_>,
    params: &SelectorParams,
    cfg: &TrainConfig,
    iter: u64,
) -> Result<SteAnchor> {
    let t = run_forward(slide, params, cfg.cap, beta_at(iter, &cfg.schedule), None)?;
    Ok(SteAnchor {
        gate_products: t.gate_products(&slide.partition),
        activation_pattern: t.activation_pattern(),
        selected: t.result.selected,
    })
}

/// Total loss with the straight-through identity made explicit.
///
/// Each selected gate is `1 + (s_i r_j - anchor_i)`: equal to the hard mask at
/// the anchor, differentiating like `s_i r_j` around it. Returns `None` when
/// `params` has left the anchor's smooth piece (selection or ReLU pattern
/// changed), so finite differences taken here are meaningful only while it
/// returns `Some`.
pub fn ste_probe_total(
    slide: &PreparedSlide<'_>,
    params: &SelectorParams,
    cfg: &TrainConfig,
    iter: u64,
    anchor: &SteAnchor,
) -> Result<Option<f64>> {
    let plain = run_forward(slide, params, cfg.cap, beta_at(iter, &cfg.schedule), None)?;
    if plain.result.selected != anchor.selected
        || plain.activation_pattern() != anchor.activation_pattern
    {
        return Ok(None);
    }
    let t = run_forward(slide, params, cfg.cap, beta_at(iter, &cfg.schedule), Some(anchor))?;
    Ok(Some(t.breakdown.total))
}

/// Smallest distance from any non-smooth point of the forward pass: top-k and
/// cap boundaries, ceil jumps of the budgets, and ReLU kinks.
pub fn smoothness_margin(
    slide: &PreparedSlide<'_>,
    params: &SelectorParams,
    cfg: &TrainConfig,
    iter: u64,
) -> Result<f64> {
    let t = run_forward(slide, params, cfg.cap, beta_at(iter, &cfg.schedule), None)?;
    let scores = &t.result.scores;
    let partition = &slide.partition;
    let mut margin = f64::INFINITY;
    let mut union = Vec::new();
    for (j, members) in partition.group_indices().iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let k = t.result.budgets[j];
        let mut order = members.clone();
        order.sort_by(|&a, &b| rank_order(scores, a, b));
        if k < order.len() {
            margin = margin.min(scores[order[k - 1]] - scores[order[k]]);
        }
        union.extend_from_slice(&order[..k]);
        let y = t.result.rates[j].unwrap_or(0.0) * members.len() as f64;
        margin = margin.min((y - y.round()).abs());
    }
    if let Some(cap) = cfg.cap {
        let cap = cap.resolve(partition.n_patches())?;
        if cap < union.len() {
            union.sort_by(|&a, &b| rank_order(scores, a, b));
            margin = margin.min(scores[union[cap - 1]] - scores[union[cap]]);
        }
    }
    for pre in t.group_pre.iter().zip(&t.group_inputs).filter(|(_, i)| i.is_some()) {
        margin = margin.min(pre.0.iter().fold(f64::INFINITY, |m, z| m.min(z.abs())));
    }
    for pre in &t.patch_pre {
        margin = margin.min(pre.iter().fold(f64::INFINITY, |m, z| m.min(z.abs())));
    }
    Ok(margin)
}

struct AdamState {
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

fn apply_update(
    params: &mut SelectorParams,
    grad: &ParamGradients,
    cfg: &TrainConfig,
    adam: &mut Option<AdamState>,
) {
    let lr = cfg.learning_rate;
    match cfg.optimizer {
        Optimizer::Sgd => {
            for (p, g) in params.blocks_mut().into_iter().zip(grad.blocks()) {
                for (w, dw) in p.iter_mut().zip(g) {
                    *w -= lr * dw;
                }
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            let state = adam.get_or_insert_with(|| AdamState {
                t: 0,
                m: grad.blocks().iter().map(|b| vec![0.0; b.len()]).collect(),
                v: grad.blocks().iter().map(|b| vec![0.0; b.len()]).collect(),
            });
            state.t += 1;
            let c1 = 1.0 - beta1.powi(state.t);
            let c2 = 1.0 - beta2.powi(state.t);
            for (((p, g), m), v) in params
                .blocks_mut()
                .into_iter()
                .zip(grad.blocks())
                .zip(state.m.iter_mut())
                .zip(state.v.iter_mut())
            {
                for k in 0..p.len() {
                    m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                    v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                    let m_hat = m[k] / c1;
                    let v_hat = v[k] / c2;
                    p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

/// One gradient step. A zero learning rate leaves `params` bit-identical.
pub fn sgd_step(params: &mut SelectorParams, grad: &ParamGradients, learning_rate: f64) {
    let cfg = TrainConfig {
        learning_rate,
        optimizer: Optimizer::Sgd,
        ..TrainConfig::new(params.dim, params.classes)
    };
    apply_update(params, grad, &cfg, &mut None);
}

/// One training example: a slide, its prompt bank and a question.
#[derive(Debug, Clone)]
pub struct SlideExample {
    pub bundle: EmbeddingBundle,
    pub prompts: PromptBank,
    pub question: QuestionRecord,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: SelectorParams,
    /// `(iteration, slide index, losses before the update)`.
    pub history: Vec<(u64, usize, LossBreakdown)>,
}

impl TrainOutcome {
    pub fn history_csv(&self) -> String {
        let mut out = String::from(LossBreakdown::CSV_HEADER);
        out.push('\n');
        for (iter, _, b) in &self.history {
            out.push_str(&b.csv_row(*iter));
            out.push('\n');
        }
        out
    }
}

/// Per-slide SGD/Adam over a seeded shuffle of the dataset, reshuffled every
/// epoch. Deterministic in `(dataset, cfg)`.
pub fn train(dataset: &[SlideExample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::validation("training dataset is empty"));
    }
    cfg.validate()?;
    let prepared = dataset
        .iter()
        .map(|ex| PreparedSlide::new(&ex.bundle, &ex.prompts, &ex.question))
        .collect::<Result<Vec<_>>>()?;
    train_prepared(&prepared, cfg)
}

pub fn train_prepared(prepared: &[PreparedSlide<'_>], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if prepared.is_empty() {
        return Err(Error::validation("training dataset is empty"));
    }
    cfg.validate()?;
    let mut params = init_params(cfg.dim, cfg.hidden, cfg.classes, cfg.seed);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5EED));
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut adam = None;
    let mut history = Vec::with_capacity(cfg.iters as usize);
    for iter in 0..cfg.iters {
        let pos = (iter % prepared.len() as u64) as usize;
        if pos == 0 {
            order.shuffle(&mut order_rng);
        }
        let idx = order[pos];
        let (_, losses, grad) = forward_backward(&prepared[idx], &params, cfg, iter)?;
        apply_update(&mut params, &grad, cfg, &mut adam);
        history.push((iter, idx, losses));
    }
    Ok(TrainOutcome { params, history })
}

/// Group rate vector of every slide under `params`.
pub fn rates_per_slide(
    prepared: &[PreparedSlide<'_>],
    params: &SelectorParams,
) -> Result<Vec<Vec<Option<f64>>>> {
    prepared
        .iter()
        .map(|s| crate::selector::group_rates(&s.partition, s.question, params))
        .collect()
}

/// Convenience for tests: squared gradient norm.
pub fn grad_norm_sq(grad: &ParamGradients) -> f64 {
    grad.blocks().iter().map(|b| dot(b, b)).sum()
}
