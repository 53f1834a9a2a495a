//! Decoder-only mini-transformer whose seven per-layer projections are the
//! candidate modules for hybrid allocation.
//!
//! Each layer is pre-norm: `x += O(attn(Q(ln x), K(ln x), V(ln x)))`
//! followed by `x += Down(silu(Gate(ln x)) * Up(ln x))`. Layer norms carry no
//! affine parameters. Embeddings, positional embeddings and the unembedding
//! are not candidates.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lora::LoraBranch;
use crate::tape::{Tape, Var};
use crate::tensor::{ParamId, ParamStore, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            d_model: 32,
            num_heads: 4,
            d_ff: 64,
            vocab_size: crate::tasks::VOCAB_SIZE,
            max_seq_len: 32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig {
                    field,
                    reason: "must be at least 1".into(),
                });
            }
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidConfig {
                field: "num_heads",
                reason: format!("must divide d_model = {}", self.d_model),
            });
        }
        Ok(())
    }
}

/// The seven candidate projection types, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModuleKind {
    Query,
    Key,
    Value,
    Output,
    Gate,
    Up,
    Down,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 7] = [
        ModuleKind::Query,
        ModuleKind::Key,
        ModuleKind::Value,
        ModuleKind::Output,
        ModuleKind::Gate,
        ModuleKind::Up,
        ModuleKind::Down,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ModuleKind::Query => "query",
            ModuleKind::Key => "key",
            ModuleKind::Value => "value",
            ModuleKind::Output => "output",
            ModuleKind::Gate => "gate",
            ModuleKind::Up => "up",
            ModuleKind::Down => "down",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// `(d_in, d_out)` of this projection.
    pub fn dims(self, d_model: usize, d_ff: usize) -> (usize, usize) {
        match self {
            ModuleKind::Gate | ModuleKind::Up => (d_model, d_ff),
            ModuleKind::Down => (d_ff, d_model),
            _ => (d_model, d_model),
        }
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One candidate module `(layer, kind)`; layers are 1-based. The derived
/// ordering is the canonical order: layer ascending, then kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModuleId {
    pub layer: usize,
    pub kind: ModuleKind,
}

impl ModuleId {
    pub fn new(layer: usize, kind: ModuleKind) -> Self {
        Self { layer, kind }
    }
}

impl fmt::Display for ModuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.layer, self.kind)
    }
}

/// A projection `x W + b` with an optional low-rank branch.
#[derive(Debug, Clone)]
pub struct LinearModule {
    pub id: ModuleId,
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
    pub branch: Option<LoraBranch>,
}

impl LinearModule {
    pub fn param_count(&self) -> usize {
        self.d_in * self.d_out + self.d_out
    }

    /// `x W + b + z · α · (x A) diag(e) B`, or `x W + b` without a branch.
    ///
    /// The masked branch stays on the tape and is multiplied by `z`, so a
    /// disabled branch contributes exactly zero value and zero gradient.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let xw = tape.matmul(x, w)?;
        let base = tape.add_row(xw, b)?;
        let Some(branch) = &self.branch else {
            return Ok(base);
        };
        let a = tape.param(store, branch.a);
        let e = tape.param(store, branch.e);
        let bm = tape.param(store, branch.b);
        let alpha = tape.param(store, branch.alpha);
        let xa = tape.matmul(x, a)?;
        let xae = tape.mul_row(xa, e)?;
        let low = tape.matmul(xae, bm)?;
        let scaled = tape.scale_by(low, alpha)?;
        let z = if branch.enabled { 1.0 } else { 0.0 };
        let masked = tape.scale(scaled, z)?;
        tape.add(base, masked)
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embed: ParamId,
    pub pos: ParamId,
    pub unembed: ParamId,
    layers: Vec<Vec<LinearModule>>,
    /// `(rank, seed)` of the most recent adapter attachment.
    pub(crate) adapter_meta: Option<(usize, u64)>,
}

pub(crate) fn param_name(id: ModuleId, leaf: &str) -> String {
    format!("layers.{}.{}.{}", id.layer, id.kind, leaf)
}

impl Model {
    /// Builds a model with Gaussian weights (std `1/sqrt(d_in)`), zero
    /// biases, drawn from `config.seed`. All parameters start trainable.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let embed = store.insert(
            "embed",
            Tensor::randn(vec![config.vocab_size, d], 1.0, &mut rng),
        );
        let pos = store.insert(
            "pos",
            Tensor::randn(vec![config.max_seq_len, d], 0.1, &mut rng),
        );
        let mut layers = Vec::with_capacity(config.num_layers);
        for layer in 1..=config.num_layers {
            let mut modules = Vec::with_capacity(7);
            for kind in ModuleKind::ALL {
                let id = ModuleId::new(layer, kind);
                let (d_in, d_out) = kind.dims(d, config.d_ff);
                let weight = store.insert(
                    param_name(id, "weight"),
                    Tensor::randn(vec![d_in, d_out], inv(d_in), &mut rng),
                );
                let bias = store.insert(param_name(id, "bias"), Tensor::zeros(vec![d_out]));
                modules.push(LinearModule {
                    id,
                    weight,
                    bias,
                    d_in,
                    d_out,
                    branch: None,
                });
            }
            layers.push(modules);
        }
        let unembed = store.insert(
            "unembed",
            Tensor::randn(vec![d, config.vocab_size], inv(d), &mut rng),
        );
        store.set_all_requires_grad(true);
        Ok(Self {
            config,
            store,
            embed,
            pos,
            unembed,
            layers,
            adapter_meta: None,
        })
    }

    pub fn module(&self, id: ModuleId) -> Result<&LinearModule> {
        if id.layer == 0 || id.layer > self.layers.len() {
            return Err(Error::UnknownModule(id));
        }
        Ok(&self.layers[id.layer - 1][id.kind.index()])
    }

    pub fn module_mut(&mut self, id: ModuleId) -> Result<&mut LinearModule> {
        if id.layer == 0 || id.layer > self.layers.len() {
            return Err(Error::UnknownModule(id));
        }
        Ok(&mut self.layers[id.layer - 1][id.kind.index()])
    }

    pub fn modules(&self) -> impl Iterator<Item = &LinearModule> {
        self.layers.iter().flatten()
    }

    pub(crate) fn modules_mut(&mut self) -> impl Iterator<Item = &mut LinearModule> {
        self.layers.iter_mut().flatten()
    }

    /// Candidate universe in canonical order with per-module parameter counts.
    pub fn candidate_modules(&self) -> Vec<(ModuleId, usize)> {
        self.modules().map(|m| (m.id, m.param_count())).collect()
    }

    pub fn universe(&self) -> Vec<ModuleId> {
        self.modules().map(|m| m.id).collect()
    }

    /// Weight plus bias elements of one candidate module.
    pub fn param_count(&self, id: ModuleId) -> Result<usize> {
        Ok(self.module(id)?.param_count())
    }

    pub fn total_candidate_params(&self) -> usize {
        self.modules().map(LinearModule::param_count).sum()
    }

    /// Freezes every parameter, including branch parameters.
    pub fn freeze_all(&mut self) {
        self.store.set_all_requires_grad(false);
    }

    /// Sets trainability of a module's weight and bias.
    pub fn set_module_trainable(&mut self, id: ModuleId, flag: bool) -> Result<()> {
        let (w, b) = {
            let m = self.module(id)?;
            (m.weight, m.bias)
        };
        self.store.set_requires_grad(w, flag);
        self.store.set_requires_grad(b, flag);
        Ok(())
    }

    pub fn is_module_trainable(&self, id: ModuleId) -> Result<bool> {
        Ok(self.store.get(self.module(id)?.weight).requires_grad)
    }

    /// Parameters currently marked trainable.
    pub fn trainable_params(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, _, t)| t.requires_grad)
            .map(|(id, _, _)| id)
            .collect()
    }

    /// SHA-256 over the values of the given parameters, in the given order.
    pub fn digest(&self, ids: &[ParamId]) -> String {
        let mut h = Sha256::new();
        for &id in ids {
            h.update(self.store.name(id).as_bytes());
            for v in self.store.get(id).data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Digest of a module's base weight and bias.
    pub fn module_digest(&self, id: ModuleId) -> Result<String> {
        let m = self.module(id)?;
        Ok(self.digest(&[m.weight, m.bias]))
    }

    /// Digest of every non-branch parameter.
    pub fn base_digest(&self) -> String {
        let mut ids = vec![self.embed, self.pos];
        for m in self.modules() {
            ids.push(m.weight);
            ids.push(m.bias);
        }
        ids.push(self.unembed);
        self.digest(&ids)
    }

    /// Digest of all live parameters.
    pub fn full_digest(&self) -> String {
        self.digest(&self.store.ids())
    }

    fn check_tokens(&self, seq: &[usize]) -> Result<()> {
        if seq.is_empty() {
            return Err(Error::EmptyInput("token sequence"));
        }
        if seq.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: seq.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&t) = seq.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Logits `[batch*len, vocab]` for equal-length sequences, stacked in
    /// batch order.
    pub fn forward(&self, tape: &mut Tape, batch: &[Vec<usize>]) -> Result<Var> {
        let first = batch.first().ok_or(Error::EmptyInput("batch"))?;
        let seq = first.len();
        for s in batch {
            self.check_tokens(s)?;
            if s.len() != seq {
                return Err(Error::LengthMismatch {
                    what: "batch sequence",
                    expected: seq,
                    got: s.len(),
                });
            }
        }
        let flat: Vec<usize> = batch.iter().flatten().copied().collect();
        let positions: Vec<usize> = (0..batch.len()).flat_map(|_| 0..seq).collect();

        let store = &self.store;
        let embed = tape.param(store, self.embed);
        let pos = tape.param(store, self.pos);
        let tok = tape.gather_rows(embed, flat)?;
        let p = tape.gather_rows(pos, positions)?;
        let mut x = tape.add(tok, p)?;

        for layer in &self.layers {
            let [q, k, v, o, gate, up, down] = [0, 1, 2, 3, 4, 5, 6].map(|i| &layer[i]);
            let h = tape.layer_norm(x, LN_EPS)?;
            let qv = q.forward(tape, store, h)?;
            let kv = k.forward(tape, store, h)?;
            let vv = v.forward(tape, store, h)?;
            let att = tape.causal_attention(qv, kv, vv, batch.len(), seq, self.config.num_heads)?;
            let ov = o.forward(tape, store, att)?;
            x = tape.add(x, ov)?;

            let h2 = tape.layer_norm(x, LN_EPS)?;
            let g = gate.forward(tape, store, h2)?;
            let u = up.forward(tape, store, h2)?;
            let act = tape.silu(g)?;
            let f = tape.mul(act, u)?;
            let dn = down.forward(tape, store, f)?;
            x = tape.add(x, dn)?;
        }
        let hf = tape.layer_norm(x, LN_EPS)?;
        let un = tape.param(store, self.unembed);
        tape.matmul(hf, un)
    }

    /// Mean next-token cross-entropy of a supervised batch.
    pub fn supervised_loss(&self, tape: &mut Tape, batch: &crate::tasks::Batch) -> Result<Var> {
        let logits = self.forward(tape, &batch.inputs)?;
        tape.cross_entropy(logits, batch.targets.clone())
    }

    /// Supervised loss without recording gradients.
    pub fn eval_loss(&self, batch: &crate::tasks::Batch) -> Result<f64> {
        let mut tape = Tape::inference();
        let l = self.supervised_loss(&mut tape, batch)?;
        Ok(tape.value(l).item())
    }

    /// Inference-only logits `[len, vocab]` for one sequence.
    pub fn logits(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, &[tokens.to_vec()])?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(layers: usize) -> ModelConfig {
        ModelConfig {
            num_layers: layers,
            d_model: 32,
            num_heads: 4,
            d_ff: 64,
            vocab_size: 17,
            max_seq_len: 16,
            seed: 7,
        }
    }

    #[test]
    fn universe_has_seven_modules_per_layer() {
        let m = Model::new(cfg(2)).unwrap();
        let c = m.candidate_modules();
        assert_eq!(c.len(), 14);
        assert_eq!(c[0].0, ModuleId::new(1, ModuleKind::Query));
        let mut ids: Vec<_> = c.iter().map(|x| x.0).collect();
        ids.dedup();
        assert_eq!(ids.len(), 14);
        assert!(c.windows(2).all(|w| w[0].0 < w[1].0));
        assert_eq!(Model::new(cfg(1)).unwrap().candidate_modules().len(), 7);
    }

    #[test]
    fn param_counts_enumerate_weight_and_bias() {
        let m = Model::new(cfg(1)).unwrap();
        for (id, p) in m.candidate_modules() {
            let md = m.module(id).unwrap();
            let enumerated = m.store.get(md.weight).numel() + m.store.get(md.bias).numel();
            assert_eq!(p, enumerated);
        }
        assert_eq!(m.param_count(ModuleId::new(1, ModuleKind::Query)).unwrap(), 1056);
        assert_eq!(m.param_count(ModuleId::new(1, ModuleKind::Gate)).unwrap(), 2112);
        let sum: usize = m.candidate_modules().iter().map(|x| x.1).sum();
        assert_eq!(sum, m.total_candidate_params());
        assert!(matches!(
            m.param_count(ModuleId::new(2, ModuleKind::Query)),
            Err(Error::UnknownModule(_))
        ));
    }

    #[test]
    fn config_validation_names_field() {
        let mut c = cfg(1);
        c.num_heads = 5;
        let err = Model::new(c).unwrap_err().to_string();
        assert!(err.contains("num_heads"), "{err}");
        let mut c = cfg(1);
        c.d_ff = 0;
        assert!(Model::new(c).unwrap_err().to_string().contains("d_ff"));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::new(cfg(2)).unwrap();
        let b = Model::new(cfg(2)).unwrap();
        assert_eq!(a.full_digest(), b.full_digest());
        let mut c2 = cfg(2);
        c2.seed = 8;
        assert_ne!(a.full_digest(), Model::new(c2).unwrap().full_digest());
    }

    #[test]
    fn logits_shape() {
        let mut c = cfg(4);
        c.vocab_size = 20;
        let m = Model::new(c).unwrap();
        let l = m.logits(&[1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
        assert_eq!(l.shape(), &[8, 20]);
        assert!(l.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn forward_rejects_bad_input() {
        let m = Model::new(cfg(1)).unwrap();
        assert!(matches!(m.logits(&[]), Err(Error::EmptyInput(_))));
        assert!(matches!(
            m.logits(&[1, 17]),
            Err(Error::TokenOutOfRange { token: 17, .. })
        ));
        assert!(matches!(m.logits(&[1; 17]), Err(Error::SequenceTooLong { .. })));
    }

    #[test]
    fn causal_and_deterministic() {
        let m = Model::new(cfg(2)).unwrap();
        let a = m.logits(&[1, 5, 9, 3, 2]).unwrap();
        let b = m.logits(&[1, 5, 9, 3, 11]).unwrap();
        let v = 17;
        assert_eq!(&a.data()[..4 * v], &b.data()[..4 * v]);
        assert_ne!(&a.data()[4 * v..], &b.data()[4 * v..]);
        assert_eq!(a, m.logits(&[1, 5, 9, 3, 2]).unwrap());
    }
}
