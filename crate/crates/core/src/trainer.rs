//! Training stages: supervised stand-in pretraining, LoRA probing warmup,
//! and hybrid final training under a supervised or GRPO objective.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::allocator::{validate_plan, AllocationPlan};
use crate::error::{Error, Result};
use crate::lora::{attach_lora, branch_params};
use crate::model::Model;
use crate::optim::Adam;
use crate::tape::{Tape, Var};
use crate::tasks::{Batch, Problem, TaskKind, VerifiableTask, EOS, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    #[default]
    Supervised,
    Grpo,
}

impl std::str::FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "supervised" => Ok(Self::Supervised),
            "grpo" => Ok(Self::Grpo),
            _ => Err(format!("unknown objective `{s}` (expected supervised or grpo)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_fft: f64,
    pub lr_lora: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub eval_every: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_fft: 4e-5,
            lr_lora: 1e-3,
            warmup_steps: 500,
            total_steps: 500,
            eval_every: 50,
            batch_size: 16,
            seed: 0,
            objective: Objective::Supervised,
        }
    }
}

fn positive_real(field: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig {
            field,
            reason: format!("must be positive and finite, got {v}"),
        })
    }
}

fn positive_int(field: &'static str, v: usize) -> Result<()> {
    if v == 0 {
        Err(Error::InvalidConfig {
            field,
            reason: "must be at least 1".into(),
        })
    } else {
        Ok(())
    }
}

impl TrainConfig {
    /// `warmup_steps` may be zero; everything else must be positive.
    pub fn validate(&self) -> Result<()> {
        positive_real("lr_fft", self.lr_fft)?;
        positive_real("lr_lora", self.lr_lora)?;
        positive_int("total_steps", self.total_steps)?;
        positive_int("eval_every", self.eval_every)?;
        positive_int("batch_size", self.batch_size)?;
        if self.eval_every > self.total_steps {
            return Err(Error::InvalidConfig {
                field: "eval_every",
                reason: format!("{} exceeds total_steps {}", self.eval_every, self.total_steps),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip: f64,
    pub beta: f64,
    /// Added to the reward variance before the square root.
    pub eps: f64,
    /// Zero selects greedy decoding.
    pub temperature: f64,
    pub max_gen_len: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 4,
            clip: 0.2,
            beta: 0.01,
            eps: 1e-8,
            temperature: 1.0,
            max_gen_len: 4,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::InvalidConfig {
                field: "group_size",
                reason: format!("must be at least 2, got {}", self.group_size),
            });
        }
        positive_real("clip", self.clip)?;
        positive_real("eps", self.eps)?;
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfig {
                field: "beta",
                reason: format!("must be non-negative, got {}", self.beta),
            });
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig {
                field: "temperature",
                reason: format!("must be non-negative, got {}", self.temperature),
            });
        }
        positive_int("max_gen_len", self.max_gen_len)
    }
}

/// One prompt with `G` sampled responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSample {
    pub prompt: Vec<usize>,
    pub responses: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    /// Per-token log-probabilities under the sampling policy.
    pub old_logprobs: Vec<Vec<f64>>,
    /// Per-token log-probabilities under the reference policy.
    pub ref_logprobs: Vec<Vec<f64>>,
}

impl GroupSample {
    pub fn group_size(&self) -> usize {
        self.responses.len()
    }

    pub fn mean_reward(&self) -> f64 {
        self.rewards.iter().sum::<f64>() / self.rewards.len().max(1) as f64
    }
}

/// One gradient update on the supervised loss. Gradients are cleared first.
pub fn supervised_step(model: &mut Model, batch: &Batch, opt: &mut Adam) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    model.store.zero_grad();
    let mut tape = Tape::new();
    let loss = model.supervised_loss(&mut tape, batch)?;
    let value = tape.value(loss).item();
    tape.backward(loss)?.accumulate_into(&mut model.store);
    opt.step(&mut model.store);
    Ok(value)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_TRAIN: u64 = 0;
const STREAM_SAMPLING: u64 = 1;
const STREAM_EVAL: u64 = 2;
const STREAM_PROBE: u64 = 3;
const STREAM_VALIDATION: u64 = 4;
const STREAM_SCORING: u64 = 5;

/// Trains every parameter on the supervised objective. Stands in for a
/// pretrained checkpoint.
pub fn pretrain(
    model: &mut Model,
    task: &VerifiableTask,
    steps: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    task.validate()?;
    positive_int("batch_size", batch_size)?;
    model.store.set_all_requires_grad(true);
    let mut opt = Adam::new();
    opt.add_group(&model.store, &model.store.ids(), lr)?;
    let mut rng = stream_rng(seed, STREAM_TRAIN);
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let batch = Batch::from_problems(&task.sample(batch_size, &mut rng))?;
        losses.push(supervised_step(model, &batch, &mut opt)?);
    }
    model.store.zero_grad();
    Ok(losses)
}

/// Trains only the branch parameters for `warmup_steps` supervised steps at
/// `lr_lora`. Every candidate module must carry a branch.
pub fn probing_warmup(model: &mut Model, task: &VerifiableTask, cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    task.validate()?;
    if let Some(m) = model.modules().find(|m| m.branch.is_none()) {
        return Err(Error::NoBranch(m.id));
    }
    model.freeze_all();
    let params = branch_params(model);
    for &p in &params {
        model.store.set_requires_grad(p, true);
    }
    let mut opt = Adam::new();
    opt.add_group(&model.store, &params, cfg.lr_lora)?;
    let mut rng = stream_rng(cfg.seed, STREAM_PROBE);
    let mut losses = Vec::with_capacity(cfg.warmup_steps);
    for _ in 0..cfg.warmup_steps {
        let batch = Batch::from_problems(&task.sample(cfg.batch_size, &mut rng))?;
        losses.push(supervised_step(model, &batch, &mut opt)?);
    }
    model.store.zero_grad();
    Ok(losses)
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

fn draw_token(row: &[f64], temperature: f64, rng: &mut impl Rng) -> usize {
    if temperature == 0.0 {
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        return best;
    }
    let scaled: Vec<f64> = row.iter().map(|x| x / temperature).collect();
    let probs: Vec<f64> = log_softmax_row(&scaled).into_iter().map(f64::exp).collect();
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Draws `g` responses by ancestral sampling at `temperature`, each ending
/// at `EOS`, `max_len` tokens, or the model's context limit. Rewards,
/// advantages and reference log-probabilities are left empty.
pub fn sample_group(
    model: &Model,
    prompt: &[usize],
    g: usize,
    temperature: f64,
    max_len: usize,
    seed: u64,
) -> Result<GroupSample> {
    if g < 2 {
        return Err(Error::InvalidConfig {
            field: "group_size",
            reason: format!("must be at least 2, got {g}"),
        });
    }
    if prompt.is_empty() {
        return Err(Error::EmptyInput("prompt"));
    }
    let limit = max_len.min(model.config.max_seq_len.saturating_sub(prompt.len() - 1));
    if limit == 0 {
        return Err(Error::SequenceTooLong {
            len: prompt.len(),
            max: model.config.max_seq_len,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seqs: Vec<Vec<usize>> = vec![prompt.to_vec(); g];
    let mut responses: Vec<Vec<usize>> = vec![Vec::new(); g];
    let mut logps: Vec<Vec<f64>> = vec![Vec::new(); g];
    let mut done = vec![false; g];
    let vocab = model.config.vocab_size;
    for _ in 0..limit {
        let mut tape = Tape::inference();
        let out = model.forward(&mut tape, &seqs)?;
        let logits = tape.value(out).data();
        let len = seqs[0].len();
        for i in 0..g {
            let row = &logits[(i * len + len - 1) * vocab..(i * len + len) * vocab];
            let tok = if done[i] { PAD } else { draw_token(row, temperature, &mut rng) };
            if !done[i] {
                logps[i].push(log_softmax_row(row)[tok]);
                responses[i].push(tok);
                done[i] = tok == EOS;
            }
            seqs[i].push(tok);
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    Ok(GroupSample {
        prompt: prompt.to_vec(),
        responses,
        rewards: Vec::new(),
        advantages: Vec::new(),
        old_logprobs: logps,
        ref_logprobs: Vec::new(),
    })
}

/// `(r_i - mean) / sqrt(var + eps)` with the population variance.
pub fn compute_advantages(rewards: &[f64], eps: f64) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let n = rewards.len() as f64;
    let mu = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mu) * (r - mu)).sum::<f64>() / n;
    let sd = (var + eps).sqrt();
    rewards
        .iter()
        .map(|r| if r == &mu { 0.0 } else { (r - mu) / sd })
        .collect()
}

/// Padded inputs and the logit rows that predict each response token.
struct Layout {
    inputs: Vec<Vec<usize>>,
    rows: Vec<usize>,
    tokens: Vec<usize>,
}

fn layout(pairs: &[(&[usize], &[usize])]) -> Result<Layout> {
    let mut seqs = Vec::with_capacity(pairs.len());
    for (prompt, response) in pairs {
        if prompt.is_empty() {
            return Err(Error::EmptyInput("prompt"));
        }
        if response.is_empty() {
            return Err(Error::EmptyInput("response"));
        }
        let mut s = prompt.to_vec();
        s.extend_from_slice(&response[..response.len() - 1]);
        seqs.push(s);
    }
    let width = seqs.iter().map(Vec::len).max().ok_or(Error::EmptyInput("responses"))?;
    let mut rows = Vec::new();
    let mut tokens = Vec::new();
    for (b, (prompt, response)) in pairs.iter().enumerate() {
        for (j, &t) in response.iter().enumerate() {
            rows.push(b * width + prompt.len() - 1 + j);
            tokens.push(t);
        }
    }
    for s in seqs.iter_mut() {
        s.resize(width, PAD);
    }
    Ok(Layout {
        inputs: seqs,
        rows,
        tokens,
    })
}

fn group_pairs(groups: &[GroupSample]) -> Vec<(&[usize], &[usize])> {
    groups
        .iter()
        .flat_map(|g| g.responses.iter().map(move |r| (g.prompt.as_slice(), r.as_slice())))
        .collect()
}

/// Log next-token distributions `[N, V]` at every response position, with
/// the generated tokens, stacked in group then response order.
pub fn response_log_dist(tape: &mut Tape, model: &Model, groups: &[GroupSample]) -> Result<(Var, Vec<usize>)> {
    let lay = layout(&group_pairs(groups))?;
    let logits = model.forward(tape, &lay.inputs)?;
    let picked = tape.gather_rows(logits, lay.rows)?;
    let lp = tape.log_softmax(picked)?;
    Ok((lp, lay.tokens))
}

/// Per-token log-probabilities of each response under `model`.
pub fn token_log_probs(model: &Model, prompt: &[usize], responses: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
    let pairs: Vec<(&[usize], &[usize])> = responses.iter().map(|r| (prompt, r.as_slice())).collect();
    let lay = layout(&pairs)?;
    let mut tape = Tape::inference();
    let logits = model.forward(&mut tape, &lay.inputs)?;
    let picked = tape.gather_rows(logits, lay.rows)?;
    let lp = tape.log_softmax(picked)?;
    let v = model.config.vocab_size;
    let data = tape.value(lp).data();
    let mut out = Vec::with_capacity(responses.len());
    let mut k = 0;
    for r in responses {
        out.push((0..r.len()).map(|j| data[(k + j) * v + lay.tokens[k + j]]).collect());
        k += r.len();
    }
    Ok(out)
}

/// Fills rewards, advantages and reference log-probabilities.
pub fn score_group(task: &VerifiableTask, reference: &Model, group: &mut GroupSample, eps: f64) -> Result<()> {
    group.rewards = group.responses.iter().map(|r| task.reward(&group.prompt, r)).collect();
    group.advantages = compute_advantages(&group.rewards, eps);
    group.ref_logprobs = token_log_probs(reference, &group.prompt, &group.responses)?;
    Ok(())
}

/// Per-token clipped surrogate `min(ρA, clip(ρ, 1-c, 1+c)A)` with
/// `ρ = exp(new - old)`.
pub fn clipped_surrogate(tape: &mut Tape, new_logp: Var, old_logp: &[f64], advantages: &[f64], clip: f64) -> Result<Var> {
    let n = tape.value(new_logp).numel();
    for (what, len) in [("old log-probabilities", old_logp.len()), ("token advantages", advantages.len())] {
        if len != n {
            return Err(Error::LengthMismatch {
                what,
                expected: n,
                got: len,
            });
        }
    }
    let neg_old: Vec<f64> = old_logp.iter().map(|x| -x).collect();
    let diff = tape.add_const(new_logp, &neg_old)?;
    let ratio = tape.exp(diff)?;
    let unclipped = tape.mul_const(ratio, advantages.to_vec())?;
    let bounded = tape.clamp(ratio, 1.0 - clip, 1.0 + clip)?;
    let clipped = tape.mul_const(bounded, advantages.to_vec())?;
    tape.minimum(unclipped, clipped)
}

/// `Σ_t w_t KL(p_t ‖ q_t)` between the rows of `log_p` and the constant
/// reference rows `log_q`, both `[N, V]`.
pub fn exact_kl(tape: &mut Tape, log_p: Var, log_q: &[f64], weights: &[f64]) -> Result<Var> {
    let shape = tape.value(log_p).shape().to_vec();
    let (n, v) = match shape[..] {
        [n, v] => (n, v),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "exact_kl expects [N, V] log-probabilities, got {shape:?}"
            )))
        }
    };
    if weights.len() != n {
        return Err(Error::LengthMismatch {
            what: "KL token weights",
            expected: n,
            got: weights.len(),
        });
    }
    let neg_q: Vec<f64> = log_q.iter().map(|x| -x).collect();
    let diff = tape.add_const(log_p, &neg_q)?;
    let p = tape.exp(log_p)?;
    let terms = tape.mul(p, diff)?;
    let w: Vec<f64> = weights.iter().flat_map(|&w| std::iter::repeat_n(w, v)).collect();
    tape.weighted_sum(terms, w)
}

/// Loss terms of one GRPO update.
#[derive(Debug, Clone, Copy)]
pub struct GrpoTerms {
    pub loss: Var,
    /// Doubly averaged clipped surrogate.
    pub surrogate: f64,
    pub kl: f64,
}

/// `-(1/P)Σ_groups (1/G)Σ_i (1/|y_i|)Σ_t ℓ_{i,t} + β·KL`, with the KL
/// averaged the same way. `log_dist` holds the current policy's log
/// distributions at every generated position (see [`response_log_dist`]);
/// `reference` holds the reference policy's, flattened.
pub fn grpo_loss(
    tape: &mut Tape,
    log_dist: Var,
    groups: &[GroupSample],
    reference: &[f64],
    clip: f64,
    beta: f64,
) -> Result<GrpoTerms> {
    if groups.is_empty() {
        return Err(Error::EmptyInput("groups"));
    }
    let p = groups.len() as f64;
    let mut tokens = Vec::new();
    let mut old = Vec::new();
    let mut adv = Vec::new();
    let mut weights = Vec::new();
    for g in groups {
        let n = g.group_size();
        for (what, len) in [
            ("advantages", g.advantages.len()),
            ("old log-probability sequences", g.old_logprobs.len()),
        ] {
            if len != n {
                return Err(Error::LengthMismatch {
                    what,
                    expected: n,
                    got: len,
                });
            }
        }
        for i in 0..n {
            let y = &g.responses[i];
            if g.old_logprobs[i].len() != y.len() {
                return Err(Error::LengthMismatch {
                    what: "old log-probabilities of a response",
                    expected: y.len(),
                    got: g.old_logprobs[i].len(),
                });
            }
            if y.is_empty() {
                return Err(Error::EmptyInput("response"));
            }
            let w = 1.0 / (p * n as f64 * y.len() as f64);
            tokens.extend_from_slice(y);
            old.extend_from_slice(&g.old_logprobs[i]);
            adv.extend(std::iter::repeat_n(g.advantages[i], y.len()));
            weights.extend(std::iter::repeat_n(w, y.len()));
        }
    }
    let shape = tape.value(log_dist).shape().to_vec();
    if shape.len() != 2 || shape[0] != tokens.len() {
        return Err(Error::LengthMismatch {
            what: "log-distribution rows",
            expected: tokens.len(),
            got: shape.first().copied().unwrap_or(0),
        });
    }
    if reference.len() != shape[0] * shape[1] {
        return Err(Error::LengthMismatch {
            what: "reference log-distribution entries",
            expected: shape[0] * shape[1],
            got: reference.len(),
        });
    }
    let new_logp = tape.pick_per_row(log_dist, tokens)?;
    let ell = clipped_surrogate(tape, new_logp, &old, &adv, clip)?;
    let objective = tape.weighted_sum(ell, weights.clone())?;
    let kl = exact_kl(tape, log_dist, reference, &weights)?;
    let penalty = tape.scale(kl, beta)?;
    let loss = tape.sub(penalty, objective)?;
    Ok(GrpoTerms {
        loss,
        surrogate: tape.value(objective).item(),
        kl: tape.value(kl).item(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrpoStepStats {
    pub loss: f64,
    pub mean_reward: f64,
    pub kl: f64,
}

/// Samples one group per prompt from the current policy, then applies a
/// single update on the GRPO loss against `reference`.
pub fn grpo_step(
    model: &mut Model,
    reference: &Model,
    task: &VerifiableTask,
    prompts: &[Vec<usize>],
    grpo: &GrpoConfig,
    opt: &mut Adam,
    seed: u64,
) -> Result<GrpoStepStats> {
    if prompts.is_empty() {
        return Err(Error::EmptyInput("prompts"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = Vec::with_capacity(prompts.len());
    for prompt in prompts {
        let mut g = sample_group(model, prompt, grpo.group_size, grpo.temperature, grpo.max_gen_len, rng.next_u64())?;
        score_group(task, reference, &mut g, grpo.eps)?;
        groups.push(g);
    }
    let mean_reward = groups.iter().map(GroupSample::mean_reward).sum::<f64>() / groups.len() as f64;

    let ref_dist = {
        let mut t = Tape::inference();
        let (lp, _) = response_log_dist(&mut t, reference, &groups)?;
        t.value(lp).data().to_vec()
    };
    model.store.zero_grad();
    let mut tape = Tape::new();
    let (lp, _) = response_log_dist(&mut tape, model, &groups)?;
    let terms = grpo_loss(&mut tape, lp, &groups, &ref_dist, grpo.clip, grpo.beta)?;
    tape.backward(terms.loss)?.accumulate_into(&mut model.store);
    opt.step(&mut model.store);
    Ok(GrpoStepStats {
        loss: tape.value(terms.loss).item(),
        mean_reward,
        kl: terms.kl,
    })
}

/// Mean group reward over `prompts`, sampling with per-prompt seeds drawn
/// from `seed`.
pub fn evaluate_reward(
    model: &Model,
    task: &VerifiableTask,
    prompts: &[Vec<usize>],
    grpo: &GrpoConfig,
    seed: u64,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::EmptyInput("prompts"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for prompt in prompts {
        let g = sample_group(model, prompt, grpo.group_size, grpo.temperature, grpo.max_gen_len, rng.next_u64())?;
        let r: f64 = g.responses.iter().map(|y| task.reward(prompt, y)).sum();
        total += r / g.group_size() as f64;
    }
    Ok(total / prompts.len() as f64)
}

/// Held-out problems: every modular-addition pair, or 64 samples of the
/// sequence tasks drawn from the task seed.
pub fn validation_problems(task: &VerifiableTask) -> Vec<Problem> {
    match task.kind {
        TaskKind::ModularAddition => task.all_addition_problems(),
        _ => task.sample(64, &mut stream_rng(task.seed, STREAM_VALIDATION)),
    }
}

/// `count` supervised batches for scoring and the perturbation oracle,
/// drawn from the task seed.
pub fn probe_batches(task: &VerifiableTask, count: usize, batch_size: usize) -> Result<Vec<Batch>> {
    positive_int("partitions", count)?;
    positive_int("batch_size", batch_size)?;
    let mut rng = stream_rng(task.seed, STREAM_SCORING);
    (0..count)
        .map(|_| Batch::from_problems(&task.sample(batch_size, &mut rng)))
        .collect()
}

fn validation_batches(problems: &[Problem], batch_size: usize) -> Result<Vec<Batch>> {
    problems.chunks(batch_size).map(Batch::from_problems).collect()
}

/// Seed used for every reward evaluation of a run.
pub fn eval_seed(cfg: &TrainConfig) -> u64 {
    stream_rng(cfg.seed, STREAM_EVAL).next_u64()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub stage: String,
    pub objective: Objective,
    /// `validation_loss` or `mean_reward`.
    pub metric: String,
    pub value: f64,
    /// Mean training loss since the previous evaluation.
    pub train_loss: f64,
    /// Mean sampled reward since the previous evaluation (GRPO only).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub train_reward: Option<f64>,
    /// Whether this evaluation became the retained checkpoint.
    pub best: bool,
    pub fft_modules: usize,
    pub lora_modules: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The best checkpoint by validation metric.
    pub model: Model,
    pub metrics: Vec<MetricRecord>,
    pub best_step: usize,
    pub best_value: f64,
}

/// Builds the hybrid model from `m0`: `fft_set` modules fully trainable,
/// fresh branches on `lora_set`, everything else frozen.
pub fn prepare_hybrid(m0: &Model, plan: &AllocationPlan, rank: usize, adapter_seed: u64) -> Result<Model> {
    validate_plan(plan, &m0.candidate_modules()).map_err(|v| Error::InvalidArgument(format!("plan does not match the model universe: {v}")))?;
    if let Some(m) = m0.modules().find(|m| m.branch.is_some()) {
        return Err(Error::DuplicateBranch(m.id));
    }
    let mut model = m0.clone();
    model.freeze_all();
    for &id in &plan.fft_set {
        model.set_module_trainable(id, true)?;
    }
    if !plan.lora_set.is_empty() {
        attach_lora(&mut model, &plan.lora_set, rank, adapter_seed)?;
    }
    Ok(model)
}

/// Final training from `m0` under `plan`. Every `eval_every` steps the
/// validation metric is logged; the best checkpoint (lowest loss or highest
/// mean reward, earliest on ties) is returned.
pub fn hybrid_train(
    m0: &Model,
    plan: &AllocationPlan,
    rank: usize,
    adapter_seed: u64,
    task: &VerifiableTask,
    cfg: &TrainConfig,
    grpo: &GrpoConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    task.validate()?;
    if cfg.objective == Objective::Grpo {
        grpo.validate()?;
    }
    let mut model = prepare_hybrid(m0, plan, rank, adapter_seed)?;
    let mut opt = Adam::new();
    let fft_params: Vec<_> = plan
        .fft_set
        .iter()
        .map(|&id| model.module(id).map(|m| [m.weight, m.bias]))
        .collect::<Result<Vec<_>>>()?
        .concat();
    opt.add_group(&model.store, &fft_params, cfg.lr_fft)?;
    opt.add_group(&model.store, &branch_params(&model), cfg.lr_lora)?;

    let val = validation_problems(task);
    let val_batches = validation_batches(&val, cfg.batch_size)?;
    let val_prompts: Vec<Vec<usize>> = val.iter().map(|p| p.prompt.clone()).collect();
    let eval_seed = eval_seed(cfg);
    let mut train_rng = stream_rng(cfg.seed, STREAM_TRAIN);
    let mut sample_rng = stream_rng(cfg.seed, STREAM_SAMPLING);

    let mut metrics = Vec::new();
    let mut best: Option<(Model, usize, f64)> = None;
    let mut loss_acc = 0.0;
    let mut reward_acc = 0.0;
    let mut since = 0;
    for step in 1..=cfg.total_steps {
        let problems = task.sample(cfg.batch_size, &mut train_rng);
        match cfg.objective {
            Objective::Supervised => {
                loss_acc += supervised_step(&mut model, &Batch::from_problems(&problems)?, &mut opt)?;
            }
            Objective::Grpo => {
                let prompts: Vec<Vec<usize>> = problems.into_iter().map(|p| p.prompt).collect();
                let s = grpo_step(&mut model, m0, task, &prompts, grpo, &mut opt, sample_rng.next_u64())?;
                loss_acc += s.loss;
                reward_acc += s.mean_reward;
            }
        }
        since += 1;
        if step % cfg.eval_every != 0 {
            continue;
        }
        let (metric, value, better) = match cfg.objective {
            Objective::Supervised => {
                let v = crate::scoring::validation_loss(&model, &val_batches)?;
                ("validation_loss", v, best.as_ref().is_none_or(|b| v < b.2))
            }
            Objective::Grpo => {
                let v = evaluate_reward(&model, task, &val_prompts, grpo, eval_seed)?;
                ("mean_reward", v, best.as_ref().is_none_or(|b| v > b.2))
            }
        };
        if better {
            best = Some((model.clone(), step, value));
        }
        metrics.push(MetricRecord {
            step,
            stage: "final".into(),
            objective: cfg.objective,
            metric: metric.into(),
            value,
            train_loss: loss_acc / since as f64,
            train_reward: (cfg.objective == Objective::Grpo).then(|| reward_acc / since as f64),
            best: better,
            fft_modules: plan.fft_set.len(),
            lora_modules: plan.lora_set.len(),
        });
        loss_acc = 0.0;
        reward_acc = 0.0;
        since = 0;
    }
    let (mut model, best_step, best_value) = best.ok_or(Error::EmptyInput("evaluations"))?;
    model.store.zero_grad();
    Ok(TrainOutcome {
        model,
        metrics,
        best_step,
        best_value,
    })
}

/// Validation metric of `model` as [`hybrid_train`] computes it.
pub fn validation_metric(model: &Model, task: &VerifiableTask, cfg: &TrainConfig, grpo: &GrpoConfig) -> Result<f64> {
    let val = validation_problems(task);
    match cfg.objective {
        Objective::Supervised => crate::scoring::validation_loss(model, &validation_batches(&val, cfg.batch_size)?),
        Objective::Grpo => {
            let prompts: Vec<Vec<usize>> = val.into_iter().map(|p| p.prompt).collect();
            evaluate_reward(model, task, &prompts, grpo, eval_seed(cfg))
        }
    }
}
