//! Pre-training and instruction post-training.
//!
//! Both stages share one AdamW loop ([`Trainer`]); they differ only in the
//! examples fed to it. Pre-training windows supervise every next token,
//! post-training pairs supervise the response after `<INSTRUCT-DX>`.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{batch_loss, gradients, ModelError, ModelState, TrainExample};
use crate::seed::{labeled_seed, rng_for};
use crate::tokenizer::{att_boundary, tail_window_start, windows};
use crate::vocab::{Category, Vocabulary};
use crate::Scalar;

/// Tokens of the fixed sequence header (`<sos> <SEX> <DOBYR> <AGE>`), kept
/// when a prompt is clipped to the context.
pub const HEADER_LEN: usize = 4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train spec: {0}")]
    Spec(String),
    #[error("no training examples")]
    NoData,
    #[error("post-training pair {index}: {reason}")]
    BadPair { index: usize, reason: String },
    #[error("training diverged at step {step}: {source}")]
    Diverged {
        step: usize,
        source: ModelError,
        /// Checkpoint bytes of the last finite state.
        checkpoint: Vec<u8>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("malformed pair file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub batch_size: usize,
    pub window: usize,
    pub peak_lr: f64,
    /// Floor of the cosine decay as a fraction of `peak_lr`.
    pub min_lr_ratio: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub z_lambda: f64,
    pub seed: u64,
    /// Validation cadence in steps.
    pub eval_every: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            batch_size: 8,
            window: 256,
            peak_lr: 3e-4,
            min_lr_ratio: 0.1,
            warmup_steps: 100,
            total_steps: 2000,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: 1.0,
            z_lambda: crate::model::Z_LOSS_LAMBDA,
            seed: 0,
            eval_every: 100,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Spec(m.to_string()));
        if self.batch_size == 0 || self.total_steps == 0 || self.eval_every == 0 {
            return bad("batch_size, total_steps and eval_every must be positive");
        }
        if self.window < 2 {
            return bad("window must be at least 2");
        }
        if self.warmup_steps > self.total_steps {
            return bad("warmup_steps exceeds total_steps");
        }
        if !(self.peak_lr > 0.0) || !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return bad("peak_lr must be positive and min_lr_ratio in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("moment coefficients must lie in [0, 1) and adam_eps be positive");
        }
        if !(self.clip_norm > 0.0) || self.weight_decay < 0.0 || self.z_lambda < 0.0 {
            return bad("clip_norm must be positive, weight_decay and z_lambda non-negative");
        }
        Ok(())
    }

    /// Linear warmup to `peak_lr`, then cosine decay to `min_lr_ratio·peak_lr`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let frac = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let floor = self.peak_lr * self.min_lr_ratio;
        floor + (self.peak_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub ce: f64,
    pub z: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub loss: LossRecord,
    pub lr: f64,
    pub grad_norm: f64,
}

/// AdamW over the flat parameter buffer. Weight decay applies to matrices
/// only; norm gains are left alone.
#[derive(Clone, Debug)]
pub struct Trainer<T: Scalar> {
    state: ModelState<T>,
    spec: TrainSpec,
    m: Vec<f64>,
    v: Vec<f64>,
    decay: Vec<bool>,
    step: usize,
    history: Vec<LossRecord>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(state: ModelState<T>, spec: TrainSpec) -> Result<Self, TrainError> {
        spec.validate()?;
        let n = state.param_count();
        let mut decay = vec![false; n];
        for t in state.layout().tensors() {
            if t.shape.len() == 2 {
                decay[t.range()].fill(true);
            }
        }
        Ok(Trainer { state, spec, m: vec![0.0; n], v: vec![0.0; n], decay, step: 0, history: Vec::new() })
    }

    pub fn state(&self) -> &ModelState<T> {
        &self.state
    }

    pub fn into_state(self) -> ModelState<T> {
        self.state
    }

    pub fn spec(&self) -> &TrainSpec {
        &self.spec
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn history(&self) -> &[LossRecord] {
        &self.history
    }

    /// One optimizer step. On a non-finite loss or gradient the parameters
    /// are left untouched and the error carries a checkpoint of them.
    pub fn step(&mut self, batch: &[TrainExample]) -> Result<StepReport, TrainError> {
        let (g, loss) = match gradients(&self.state, batch, self.spec.z_lambda) {
            Ok(x) => x,
            Err(e @ ModelError::NonFinite { .. }) => {
                let mut checkpoint = Vec::new();
                self.state.save(&mut checkpoint, &BTreeMap::from([("step".into(), self.step.to_string())]))?;
                return Err(TrainError::Diverged { step: self.step, source: e, checkpoint });
            }
            Err(e) => return Err(e.into()),
        };
        let s = &self.spec;
        let norm = g.global_norm();
        let clip = if norm > s.clip_norm { s.clip_norm / norm } else { 1.0 };
        let lr = s.lr_at(self.step);
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - s.beta1.powi(t);
        let bc2 = 1.0 - s.beta2.powi(t);
        let params = self.state.params_mut();
        for i in 0..params.len() {
            let gi = g.data[i].f64() * clip;
            self.m[i] = s.beta1 * self.m[i] + (1.0 - s.beta1) * gi;
            self.v[i] = s.beta2 * self.v[i] + (1.0 - s.beta2) * gi * gi;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            let mut p = params[i].f64();
            if self.decay[i] {
                p -= lr * s.weight_decay * p;
            }
            p -= lr * mhat / (vhat.sqrt() + s.adam_eps);
            params[i] = T::of(p);
        }
        let (ce, z) = (loss.ce.f64(), loss.z.f64());
        let rec = LossRecord { step: self.step, ce, z, total: ce + z };
        self.history.push(rec);
        self.step += 1;
        Ok(StepReport { loss: rec, lr, grad_norm: norm })
    }
}

/// Held-out examples checked every `TrainSpec::eval_every` steps.
#[derive(Clone, Debug, Default)]
pub struct Validation {
    pub examples: Vec<TrainExample>,
    /// Stop as soon as validation CE drops below this value.
    pub stop_below: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub step: usize,
    pub ce: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Scalar> {
    pub state: ModelState<T>,
    pub curve: Vec<LossRecord>,
    pub validation: Vec<ValRecord>,
    pub steps_run: usize,
    pub stopped_early: bool,
}

fn sample_batch(examples: &[TrainExample], size: usize, seed: u64, step: usize) -> Vec<TrainExample> {
    let mut rng = rng_for(seed, step as u64);
    (0..size).map(|_| examples[rng.random_range(0..examples.len())].clone()).collect()
}

fn run_loop<T: Scalar>(
    state: ModelState<T>,
    examples: &[TrainExample],
    spec: &TrainSpec,
    label: &str,
    validation: Option<&Validation>,
    mut on_step: impl FnMut(&StepReport),
) -> Result<TrainOutcome<T>, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::NoData);
    }
    let mut tr = Trainer::new(state, spec.clone())?;
    let seed = labeled_seed(spec.seed, label);
    let mut vals = Vec::new();
    let mut stopped_early = false;
    let check = |st: &ModelState<T>, step: usize, vals: &mut Vec<ValRecord>| -> Result<bool, TrainError> {
        let Some(v) = validation.filter(|v| !v.examples.is_empty()) else { return Ok(false) };
        let ce = batch_loss(st, &v.examples, spec.z_lambda)?.ce.f64();
        vals.push(ValRecord { step, ce });
        Ok(v.stop_below.is_some_and(|b| ce < b))
    };
    for step in 0..spec.total_steps {
        let batch = sample_batch(examples, spec.batch_size, seed, step);
        let rep = tr.step(&batch)?;
        on_step(&rep);
        let done = step + 1;
        if (done % spec.eval_every == 0 || done == spec.total_steps) && check(tr.state(), done, &mut vals)? {
            stopped_early = done < spec.total_steps;
            break;
        }
    }
    let steps_run = tr.steps_done();
    let curve = tr.history().to_vec();
    Ok(TrainOutcome { state: tr.into_state(), curve, validation: vals, steps_run, stopped_early })
}

/// Splits sequences into overlapping windows that start at group boundaries.
pub fn pretrain_examples(seqs: &[Vec<u32>], window: usize, vocab: &Vocabulary) -> Vec<TrainExample> {
    seqs.iter()
        .flat_map(|s| {
            let b = att_boundary(s, vocab);
            windows(s.len(), window, b).into_iter().map(|r| s[r].to_vec()).collect::<Vec<_>>()
        })
        .filter(|w| w.len() >= 2)
        .map(TrainExample::full)
        .collect()
}

/// Next-token pre-training on pre-built examples.
pub fn pretrain<T: Scalar>(
    state: ModelState<T>,
    examples: &[TrainExample],
    spec: &TrainSpec,
    validation: Option<&Validation>,
    on_step: impl FnMut(&StepReport),
) -> Result<TrainOutcome<T>, TrainError> {
    run_loop(state, examples, spec, "pretrain", validation, on_step)
}

/// Entropy in nats of the supervised target tokens, the cross-entropy of the
/// best context-free predictor on the same tokens.
pub fn unigram_entropy(examples: &[TrainExample]) -> f64 {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for ex in examples {
        for t in 1..ex.ids.len() {
            if ex.loss_mask[t] {
                *counts.entry(ex.ids[t]).or_default() += 1;
            }
        }
    }
    let n: usize = counts.values().sum();
    counts.values().map(|&c| c as f64 / n as f64).map(|p| -p * p.ln()).sum()
}

// ---------------------------------------------------------------------------
// post-training

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostTrainPair {
    /// History followed by a single trailing `<INSTRUCT-DX>`.
    pub prompt: Vec<u32>,
    /// Incident `<DX-MAJOR_*>` tokens, then `<eos>`.
    pub response: Vec<u32>,
}

impl PostTrainPair {
    pub fn example(&self) -> TrainExample {
        let mut ids = self.prompt.clone();
        ids.extend_from_slice(&self.response);
        TrainExample::masked_from(ids, self.prompt.len())
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<(), String> {
        let ins = vocab.instruct_dx();
        if self.prompt.last() != Some(&ins) {
            return Err("prompt does not end with <INSTRUCT-DX>".into());
        }
        if self.prompt.iter().filter(|&&t| t == ins).count() != 1 {
            return Err("prompt holds more than one <INSTRUCT-DX>".into());
        }
        let majors: HashSet<u32> = vocab.dx_major_ids().into_iter().collect();
        let Some((&last, body)) = self.response.split_last() else {
            return Err("empty response".into());
        };
        if last != vocab.eos() {
            return Err("response does not end with <eos>".into());
        }
        if let Some(&t) = body.iter().find(|t| !majors.contains(t)) {
            return Err(format!("response token {} is not a major diagnosis", vocab.text(t).unwrap_or("?")));
        }
        Ok(())
    }
}

/// Positions where `<INSTRUCT-DX>` may be inserted: starts of groups in a new
/// month (and the final `<eos>`) with at least two calendar months of
/// history before them.
pub fn eligible_insertions(ids: &[u32], vocab: &Vocabulary) -> Vec<usize> {
    let eos = vocab.eos();
    let mut out = Vec::new();
    let mut elapsed = 0u32;
    let mut seen_group = false;
    for (p, &id) in ids.iter().enumerate() {
        let att = vocab.att_value(id);
        let new_month = att.is_some_and(|n| n > 0) || id == eos;
        if new_month && seen_group && elapsed >= 1 {
            out.push(p);
        }
        if let Some(n) = att {
            if seen_group {
                elapsed += n;
            }
            seen_group = true;
        }
    }
    out
}

/// The pair obtained by inserting the instruction at position `p`.
pub fn pair_at(ids: &[u32], vocab: &Vocabulary, p: usize) -> PostTrainPair {
    let majors = vocab.range(Category::Dx);
    let is_major = |t: &u32| majors.contains(t) && vocab.text(*t).is_ok_and(|s| s.starts_with("<DX-MAJOR_"));
    let before: HashSet<u32> = ids[..p].iter().copied().filter(is_major).collect();
    let mut seen = HashSet::new();
    let mut response: Vec<u32> =
        ids[p..].iter().copied().filter(is_major).filter(|t| !before.contains(t) && seen.insert(*t)).collect();
    response.push(vocab.eos());
    let mut prompt = ids[..p].to_vec();
    prompt.push(vocab.instruct_dx());
    PostTrainPair { prompt, response }
}

/// Uniform draw among [`eligible_insertions`]; `None` when there are none.
pub fn build_posttrain_pair<R: Rng + ?Sized>(ids: &[u32], vocab: &Vocabulary, rng: &mut R) -> Option<PostTrainPair> {
    let pos = eligible_insertions(ids, vocab);
    if pos.is_empty() {
        return None;
    }
    Some(pair_at(ids, vocab, pos[rng.random_range(0..pos.len())]))
}

/// Post-training pair count for a pre-training corpus of `n` sequences.
pub fn default_pair_count(n: usize) -> usize {
    n.div_ceil(20)
}

/// `count` pairs drawn from randomly chosen sequences, each clipped to
/// `max_len` tokens. Draw `i` uses its own generator, so the result does not
/// depend on scheduling.
pub fn build_posttrain_pairs(seqs: &[Vec<u32>], vocab: &Vocabulary, count: usize, max_len: usize, seed: u64) -> Vec<PostTrainPair> {
    if seqs.is_empty() {
        return Vec::new();
    }
    let base = labeled_seed(seed, "pairs");
    (0..count as u64)
        .into_par_iter()
        .filter_map(|i| {
            let mut rng = rng_for(base, i);
            for _ in 0..16 {
                let s = &seqs[rng.random_range(0..seqs.len())];
                if let Some(p) = build_posttrain_pair(s, vocab, &mut rng).and_then(|p| clip_pair(p, max_len, vocab)) {
                    return Some(p);
                }
            }
            None
        })
        .collect()
}

/// Drops the oldest history after the header so the prompt plus response
/// fit in `max_len`. Responses are never cut; a pair whose response alone
/// does not fit is dropped.
pub fn clip_pair(pair: PostTrainPair, max_len: usize, vocab: &Vocabulary) -> Option<PostTrainPair> {
    if pair.prompt.len() + pair.response.len() <= max_len {
        return Some(pair);
    }
    let budget = max_len.checked_sub(pair.response.len() + HEADER_LEN + 1)?;
    if budget == 0 {
        return None;
    }
    let hist = &pair.prompt[..pair.prompt.len() - 1];
    let prompt = clip_history(hist, budget + HEADER_LEN, vocab).into_iter().chain([vocab.instruct_dx()]).collect();
    Some(PostTrainPair { prompt, response: pair.response })
}

/// Keeps the header and the most recent tokens, starting at a group
/// boundary, within `max_len` tokens.
pub fn clip_history(ids: &[u32], max_len: usize, vocab: &Vocabulary) -> Vec<u32> {
    if ids.len() <= max_len {
        return ids.to_vec();
    }
    let head = HEADER_LEN.min(ids.len());
    let tail = &ids[head..];
    let b = att_boundary(tail, vocab);
    let start = tail_window_start(tail.len(), max_len.saturating_sub(head), b);
    ids[..head].iter().chain(&tail[start..]).copied().collect()
}

/// Prompt-masked training on validated pairs.
pub fn posttrain<T: Scalar>(
    state: ModelState<T>,
    pairs: &[PostTrainPair],
    vocab: &Vocabulary,
    spec: &TrainSpec,
    on_step: impl FnMut(&StepReport),
) -> Result<TrainOutcome<T>, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::NoData);
    }
    let max = state.config().max_positions;
    for (index, p) in pairs.iter().enumerate() {
        p.validate(vocab).map_err(|reason| TrainError::BadPair { index, reason })?;
        if p.prompt.len() + p.response.len() > max {
            return Err(TrainError::BadPair { index, reason: format!("longer than {max} positions") });
        }
    }
    let examples: Vec<TrainExample> = pairs.iter().map(PostTrainPair::example).collect();
    run_loop(state, &examples, spec, "posttrain", None, on_step)
}

pub fn write_pairs_text<W: Write>(mut w: W, pairs: &[PostTrainPair], vocab: &Vocabulary) -> Result<(), TrainError> {
    for p in pairs {
        let a = vocab.decode(&p.prompt).map_err(|e| TrainError::Spec(e.to_string()))?;
        let b = vocab.decode(&p.response).map_err(|e| TrainError::Spec(e.to_string()))?;
        writeln!(w, "{}\t{}", a.join(" "), b.join(" "))?;
    }
    Ok(())
}

pub fn read_pairs_text<R: BufRead>(r: R, vocab: &Vocabulary) -> Result<Vec<PostTrainPair>, TrainError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |s: &str| -> Result<Vec<u32>, TrainError> {
            let texts: Vec<String> = s.split_whitespace().map(str::to_string).collect();
            vocab.encode(&texts).map_err(|e| TrainError::Parse { line: i + 1, reason: e.to_string() })
        };
        let (a, b) = line.split_once('\t').ok_or(TrainError::Parse { line: i + 1, reason: "missing tab".into() })?;
        out.push(PostTrainPair { prompt: parse(a)?, response: parse(b)? });
    }
    Ok(out)
}

pub fn write_loss_csv<W: Write>(mut w: W, rows: &[LossRecord]) -> std::io::Result<()> {
    writeln!(w, "step,ce,z,total")?;
    for r in rows {
        writeln!(w, "{},{:.8},{:.8},{:.8}", r.step, r.ce, r.z, r.total)?;
    }
    Ok(())
}
