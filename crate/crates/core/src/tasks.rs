//! Programmatically verifiable tasks over a fixed symbol vocabulary.
//!
//! Prompts are `BOS <marker> ... SEP`; the completion is the answer followed
//! by `EOS`. Rewards compare the answer span (everything before the first
//! `EOS`) against the generator's unique answer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const PLUS: usize = 4;
pub const COPY: usize = 5;
pub const REVERSE: usize = 6;
pub const DIGIT_BASE: usize = 7;
pub const VOCAB_SIZE: usize = DIGIT_BASE + 10;

pub fn digit(d: usize) -> usize {
    DIGIT_BASE + d
}

fn token_digit(t: usize) -> Option<usize> {
    (DIGIT_BASE..DIGIT_BASE + 10).contains(&t).then(|| t - DIGIT_BASE)
}

fn encode_number(n: usize) -> Vec<usize> {
    n.to_string()
        .bytes()
        .map(|b| digit((b - b'0') as usize))
        .collect()
}

fn decode_number(tokens: &[usize]) -> Option<usize> {
    if tokens.is_empty() || tokens.len() > 18 {
        return None;
    }
    tokens
        .iter()
        .try_fold(0usize, |acc, &t| token_digit(t).map(|d| acc * 10 + d))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    ModularAddition,
    SequenceCopy,
    SequenceReverse,
}

/// Optional shaping terms added to the exact-match reward.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardShaping {
    /// Added when the response terminates with `EOS`.
    #[serde(default)]
    pub format_bonus: f64,
    /// Subtracted per response token beyond the answer length.
    #[serde(default)]
    pub length_penalty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifiableTask {
    pub kind: TaskKind,
    pub seed: u64,
    /// Modulus for modular addition.
    pub modulus: usize,
    /// Inclusive length range of copy/reverse payloads.
    pub min_len: usize,
    pub max_len: usize,
    #[serde(default)]
    pub shaping: RewardShaping,
}

impl Default for VerifiableTask {
    fn default() -> Self {
        Self {
            kind: TaskKind::ModularAddition,
            seed: 0,
            modulus: 7,
            min_len: 2,
            max_len: 4,
            shaping: RewardShaping::default(),
        }
    }
}

/// A prompt and its unique answer (without `EOS`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Problem {
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
}

impl Problem {
    /// Prompt, answer and `EOS` concatenated.
    pub fn full_sequence(&self) -> Vec<usize> {
        let mut s = self.prompt.clone();
        s.extend_from_slice(&self.answer);
        s.push(EOS);
        s
    }
}

impl VerifiableTask {
    pub fn modular_addition(modulus: usize) -> Self {
        Self {
            kind: TaskKind::ModularAddition,
            modulus,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            TaskKind::ModularAddition if self.modulus < 2 => Err(Error::InvalidConfig {
                field: "modulus",
                reason: "must be at least 2".into(),
            }),
            TaskKind::SequenceCopy | TaskKind::SequenceReverse
                if self.min_len == 0 || self.min_len > self.max_len =>
            {
                Err(Error::InvalidConfig {
                    field: "min_len",
                    reason: format!("need 1 <= min_len <= max_len, got {}..={}", self.min_len, self.max_len),
                })
            }
            _ => Ok(()),
        }
    }

    /// Longest full sequence (prompt + answer + EOS) the task can produce.
    pub fn max_sequence_len(&self) -> usize {
        match self.kind {
            TaskKind::ModularAddition => {
                let w = encode_number(self.modulus - 1).len();
                1 + w + 1 + w + 1 + w + 1
            }
            TaskKind::SequenceCopy | TaskKind::SequenceReverse => 3 + 2 * self.max_len + 1,
        }
    }

    /// Answer tokens plus room for `EOS`.
    pub fn max_answer_len(&self) -> usize {
        match self.kind {
            TaskKind::ModularAddition => encode_number(self.modulus - 1).len() + 1,
            _ => self.max_len + 1,
        }
    }

    pub fn prompt_for_addition(&self, a: usize, b: usize) -> Vec<usize> {
        let mut p = vec![BOS];
        p.extend(encode_number(a));
        p.push(PLUS);
        p.extend(encode_number(b));
        p.push(SEP);
        p
    }

    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> Problem {
        match self.kind {
            TaskKind::ModularAddition => {
                let a = rng.random_range(0..self.modulus);
                let b = rng.random_range(0..self.modulus);
                Problem {
                    prompt: self.prompt_for_addition(a, b),
                    answer: encode_number((a + b) % self.modulus),
                }
            }
            TaskKind::SequenceCopy | TaskKind::SequenceReverse => {
                let n = rng.random_range(self.min_len..=self.max_len);
                let payload: Vec<usize> = (0..n).map(|_| digit(rng.random_range(0..10))).collect();
                let marker = if self.kind == TaskKind::SequenceCopy { COPY } else { REVERSE };
                let mut prompt = vec![BOS, marker];
                prompt.extend_from_slice(&payload);
                prompt.push(SEP);
                let mut answer = payload;
                if self.kind == TaskKind::SequenceReverse {
                    answer.reverse();
                }
                Problem { prompt, answer }
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Problem> {
        (0..n).map(|_| self.generate(rng)).collect()
    }

    /// Every distinct modular-addition prompt, in `(a, b)` order.
    pub fn all_addition_problems(&self) -> Vec<Problem> {
        let m = self.modulus;
        (0..m)
            .flat_map(|a| (0..m).map(move |b| (a, b)))
            .map(|(a, b)| Problem {
                prompt: self.prompt_for_addition(a, b),
                answer: encode_number((a + b) % m),
            })
            .collect()
    }

    /// Recomputes the answer from a prompt; `None` if the prompt is not one
    /// this task generates.
    pub fn answer_for(&self, prompt: &[usize]) -> Option<Vec<usize>> {
        let body = prompt.strip_prefix(&[BOS])?.strip_suffix(&[SEP])?;
        match self.kind {
            TaskKind::ModularAddition => {
                let plus = body.iter().position(|&t| t == PLUS)?;
                let a = decode_number(&body[..plus])?;
                let b = decode_number(&body[plus + 1..])?;
                Some(encode_number((a + b) % self.modulus))
            }
            TaskKind::SequenceCopy | TaskKind::SequenceReverse => {
                let marker = if self.kind == TaskKind::SequenceCopy { COPY } else { REVERSE };
                let payload = body.strip_prefix(&[marker])?;
                if payload.is_empty() || payload.iter().any(|&t| token_digit(t).is_none()) {
                    return None;
                }
                let mut ans = payload.to_vec();
                if self.kind == TaskKind::SequenceReverse {
                    ans.reverse();
                }
                Some(ans)
            }
        }
    }

    /// Exact-match reward of `response` for `prompt`, plus any configured
    /// shaping. Never fails: unparseable prompts or responses score 0.
    pub fn reward(&self, prompt: &[usize], response: &[usize]) -> f64 {
        let Some(answer) = self.answer_for(prompt) else {
            return 0.0;
        };
        let eos = response.iter().position(|&t| t == EOS);
        let span = &response[..eos.unwrap_or(response.len())];
        let mut r = if !span.is_empty() && span == answer.as_slice() { 1.0 } else { 0.0 };
        if eos.is_some() {
            r += self.shaping.format_bonus;
        }
        let extra = response.len().saturating_sub(answer.len() + 1);
        r - self.shaping.length_penalty * extra as f64
    }
}

/// Next-token training batch of equal-length, `PAD`-padded sequences.
/// Targets are `None` at prompt and padding positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Option<usize>>,
}

impl Batch {
    /// Supervised batch: the loss covers the answer tokens and `EOS`.
    pub fn from_problems(problems: &[Problem]) -> Result<Self> {
        if problems.is_empty() {
            return Err(Error::EmptyInput("batch"));
        }
        let seqs: Vec<Vec<usize>> = problems.iter().map(Problem::full_sequence).collect();
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0) - 1;
        let mut inputs = Vec::with_capacity(seqs.len());
        let mut targets = Vec::with_capacity(seqs.len() * len);
        for (p, s) in problems.iter().zip(&seqs) {
            let mut inp = s[..s.len() - 1].to_vec();
            inp.resize(len, PAD);
            inputs.push(inp);
            for pos in 0..len {
                let t = s.get(pos + 1).copied();
                targets.push(t.filter(|_| pos + 1 >= p.prompt.len()));
            }
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}
