//! Trace-driven stand-in for a continuously batched LLM engine.
//!
//! Each request's output is described by a [`GenerationScript`]; the engine
//! only tracks token progress and bills step latency from a
//! [`GenLatencyModel`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::raggraph::SubNodeId;
use crate::vector_index::Embedding;

/// What a generation stage produces: its length, its text and the
/// embeddings of its final output and of partial prefixes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationScript {
    pub total_tokens: usize,
    #[serde(default)]
    pub prompt_tokens: usize,
    pub output_text: String,
    pub final_embedding: Embedding,
    /// `(ratio, embedding)` with strictly increasing ratios ending at 1.0.
    pub prefix_checkpoints: Vec<(f64, Embedding)>,
}

impl GenerationScript {
    /// A script whose only checkpoint is the final embedding.
    pub fn simple(total_tokens: usize, output_text: impl Into<String>, final_embedding: Embedding) -> Self {
        Self {
            total_tokens,
            prompt_tokens: 0,
            output_text: output_text.into(),
            prefix_checkpoints: vec![(1.0, final_embedding.clone())],
            final_embedding,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_tokens == 0 {
            return Err(invalid("generation script must have total_tokens >= 1"));
        }
        let cps = &self.prefix_checkpoints;
        if cps.is_empty() {
            return Err(invalid("generation script has no prefix checkpoints"));
        }
        if cps.iter().any(|(r, _)| !(*r > 0.0 && *r <= 1.0)) {
            return Err(invalid("checkpoint ratios must lie in (0, 1]"));
        }
        if cps.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(invalid("checkpoint ratios must be strictly increasing"));
        }
        let (last_ratio, last_emb) = cps.last().expect("non-empty");
        if *last_ratio != 1.0 || *last_emb != self.final_embedding {
            return Err(invalid("last checkpoint must be ratio 1.0 with the final embedding"));
        }
        if cps.iter().any(|(_, e)| e.dim() != self.final_embedding.dim()) {
            return Err(invalid("checkpoint embeddings must share one dimension"));
        }
        Ok(())
    }
}

/// Embedding of the checkpoint with the largest ratio not above `ratio`,
/// or the first checkpoint if every ratio is larger.
pub fn partial_embedding(script: &GenerationScript, ratio: f64) -> Result<Embedding> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(invalid(format!("prefix ratio {ratio} outside (0, 1]")));
    }
    let cps = &script.prefix_checkpoints;
    let first = cps.first().ok_or_else(|| invalid("generation script has no prefix checkpoints"))?;
    Ok(cps
        .iter()
        .rev()
        .find(|(r, _)| *r <= ratio)
        .unwrap_or(first)
        .1
        .clone())
}

/// Step latency: `(base_ms + per_seq_ms · batch) · jitter`, where jitter is
/// lognormal with unit mean. Joining sequences add
/// `prompt_tokens · per_seq_ms` once.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenLatencyModel {
    pub base_ms: f64,
    pub per_seq_ms: f64,
    pub jitter_sigma: f64,
    pub seed: u64,
}

impl Default for GenLatencyModel {
    fn default() -> Self {
        Self {
            base_ms: 2.0,
            per_seq_ms: 0.2,
            jitter_sigma: 0.3,
            seed: 0,
        }
    }
}

impl GenLatencyModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_ms >= 0.0 && self.per_seq_ms >= 0.0 && self.jitter_sigma >= 0.0) {
            return Err(invalid("latency model parameters must be non-negative"));
        }
        Ok(())
    }

    /// Mean step latency for a batch, excluding prefill.
    pub fn expected_step_ms(&self, batch: usize) -> f64 {
        self.base_ms + self.per_seq_ms * batch as f64
    }

    pub fn prefill_ms(&self, prompt_tokens: usize) -> f64 {
        self.per_seq_ms * prompt_tokens as f64
    }
}

/// A token window of one generation stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenTask {
    pub request: u64,
    pub subnode: SubNodeId,
    pub node: u32,
    pub visit: u32,
    pub start: usize,
    pub end: usize,
    /// Prompt tokens billed when the sequence joins; normally non-zero only
    /// for a stage's first window.
    pub prefill_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveSeq {
    pub request: u64,
    pub subnode: SubNodeId,
    pub node: u32,
    pub visit: u32,
    pub start: usize,
    pub end: usize,
    pub tokens_done: usize,
    prefill_pending: usize,
}

impl ActiveSeq {
    pub fn total_tokens(&self) -> usize {
        self.end - self.start
    }

    /// Absolute position within the stage.
    pub fn position(&self) -> usize {
        self.start + self.tokens_done
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GenStepReport {
    pub step: u64,
    pub batch_size: usize,
    /// Every sequence that advanced one token this step.
    pub advanced: Vec<(u64, SubNodeId)>,
    pub completed: Vec<(u64, SubNodeId)>,
    pub tokens_advanced: usize,
    pub prefill_tokens: usize,
    pub latency_ms: f64,
}

#[derive(Debug, Clone)]
pub struct GenEngine {
    model: GenLatencyModel,
    jitter: Option<LogNormal<f64>>,
    rng: ChaCha8Rng,
    active: Vec<ActiveSeq>,
    step_count: u64,
}

impl GenEngine {
    pub fn new(model: GenLatencyModel) -> Result<Self> {
        model.validate()?;
        let sigma = model.jitter_sigma;
        let jitter = if sigma > 0.0 {
            Some(LogNormal::new(-sigma * sigma / 2.0, sigma).map_err(|e| invalid(e.to_string()))?)
        } else {
            None
        };
        Ok(Self {
            model,
            jitter,
            rng: ChaCha8Rng::seed_from_u64(model.seed),
            active: Vec::new(),
            step_count: 0,
        })
    }

    pub fn model(&self) -> &GenLatencyModel {
        &self.model
    }

    pub fn active(&self) -> &[ActiveSeq] {
        &self.active
    }

    pub fn is_idle(&self) -> bool {
        self.active.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Adds a token window; it advances from the next step on.
    pub fn submit(&mut self, task: GenTask, script_tokens: usize) -> Result<()> {
        if task.start >= task.end || task.end > script_tokens {
            return Err(invalid(format!(
                "token span [{}, {}) outside script of {script_tokens} tokens",
                task.start, task.end
            )));
        }
        let overlaps = self.active.iter().any(|a| {
            a.request == task.request
                && (a.subnode == task.subnode
                    || (a.node == task.node && a.visit == task.visit && a.start < task.end && task.start < a.end))
        });
        if overlaps {
            return Err(invalid(format!(
                "request {} already has an overlapping active sub-node",
                task.request
            )));
        }
        self.active.push(ActiveSeq {
            request: task.request,
            subnode: task.subnode,
            node: task.node,
            visit: task.visit,
            start: task.start,
            end: task.end,
            tokens_done: 0,
            prefill_pending: task.prefill_tokens,
        });
        Ok(())
    }

    /// Drops every sequence of a request and returns how many were removed.
    pub fn cancel_request(&mut self, request: u64) -> usize {
        let before = self.active.len();
        self.active.retain(|a| a.request != request);
        before - self.active.len()
    }

    pub fn cancel_subnode(&mut self, request: u64, subnode: SubNodeId) -> bool {
        let before = self.active.len();
        self.active.retain(|a| !(a.request == request && a.subnode == subnode));
        before != self.active.len()
    }

    pub fn progress(&self, request: u64, subnode: SubNodeId) -> Option<&ActiveSeq> {
        self.active
            .iter()
            .find(|a| a.request == request && a.subnode == subnode)
    }

    /// Advances every active sequence by one token.
    pub fn gen_step(&mut self) -> GenStepReport {
        if self.active.is_empty() {
            return GenStepReport {
                step: self.step_count,
                ..GenStepReport::default()
            };
        }
        self.step_count += 1;
        let batch = self.active.len();
        let prefill: usize = self.active.iter_mut().map(|a| std::mem::take(&mut a.prefill_pending)).sum();
        let jitter = self.jitter.map_or(1.0, |d| d.sample(&mut self.rng));
        let latency_ms = self.model.expected_step_ms(batch) * jitter + self.model.prefill_ms(prefill);

        let mut completed = Vec::new();
        let mut advanced = Vec::with_capacity(batch);
        for a in &mut self.active {
            a.tokens_done += 1;
            advanced.push((a.request, a.subnode));
            if a.tokens_done == a.total_tokens() {
                completed.push((a.request, a.subnode));
            }
        }
        self.active.retain(|a| a.tokens_done < a.total_tokens());
        GenStepReport {
            step: self.step_count,
            batch_size: batch,
            advanced,
            completed,
            tokens_advanced: batch,
            prefill_tokens: prefill,
            latency_ms,
        }
    }
}
