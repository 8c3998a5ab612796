use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Zipf};
use serde::{Deserialize, Serialize};

use super::corpus::{jitter, unit_vector};
use crate::error::{invalid, Error, Result};
use crate::generation::GenerationScript;
use crate::raggraph::{template, Condition, Endpoint, RAGraph, RequestState, Value};
use crate::vector_index::Embedding;

/// Checkpoint ratios recorded for every generated output.
pub const CHECKPOINT_RATIOS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageScript {
    pub node: u32,
    /// Which entry into the node, starting at 1.
    pub visit: u32,
    pub script: GenerationScript,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestSpec {
    pub id: u64,
    pub arrival_ms: f64,
    /// Template name or path to a workflow file.
    pub workflow: String,
    pub input: String,
    pub query_embedding: Embedding,
    /// Overrides the scheduler's nprobe for this request.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nprobe: Option<usize>,
    pub scripts: Vec<StageScript>,
}

impl RequestSpec {
    pub fn script(&self, node: u32, visit: u32) -> Option<&GenerationScript> {
        self.scripts
            .iter()
            .find(|s| s.node == node && s.visit == visit)
            .map(|s| &s.script)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Workload {
    pub requests: Vec<RequestSpec>,
}

impl Workload {
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for r in &self.requests {
            if !ids.insert(r.id) {
                return Err(invalid(format!("duplicate request id {}", r.id)));
            }
            if !(r.arrival_ms.is_finite() && r.arrival_ms >= 0.0) {
                return Err(invalid(format!("request {} has a bad arrival time", r.id)));
            }
            if r.nprobe == Some(0) {
                return Err(invalid(format!("request {} has nprobe 0", r.id)));
            }
            for s in &r.scripts {
                s.script.validate()?;
            }
        }
        Ok(())
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for r in &self.requests {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let mut requests = Vec::new();
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            requests.push(
                serde_json::from_str(&line).map_err(|e| Error::Format(format!("workload line {}: {e}", i + 1)))?,
            );
        }
        let w = Self { requests };
        w.validate()?;
        Ok(w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum Arrival {
    Poisson { rate_rps: f64 },
    /// Offsets are reused cyclically, each cycle continuing from the last
    /// arrival.
    Fixed { offsets_ms: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub requests: usize,
    pub arrival: Arrival,
    /// Workflow name to sampling weight; weights sum to 1.
    pub workflow_mix: BTreeMap<String, f64>,
    /// Zipf exponent of topic popularity.
    pub zipf_s: f64,
    /// Per-dimension noise of a request's first query around its topic.
    pub query_noise: f64,
    /// Distance between successive generated query embeddings.
    pub drift_delta: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub min_prompt_tokens: usize,
    pub max_prompt_tokens: usize,
    /// Loop iterations are drawn uniformly from `1..=max_iterations`.
    pub max_iterations: u32,
    pub nprobe: Option<usize>,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            requests: 200,
            arrival: Arrival::Poisson { rate_rps: 20.0 },
            workflow_mix: ["oneshot", "hyde", "multistep", "irg", "recomp"]
                .iter()
                .map(|n| (n.to_string(), 0.2))
                .collect(),
            zipf_s: 1.0,
            query_noise: 0.05,
            drift_delta: 0.1,
            min_tokens: 16,
            max_tokens: 64,
            min_prompt_tokens: 32,
            max_prompt_tokens: 128,
            max_iterations: 3,
            nprobe: None,
            seed: 0,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        match &self.arrival {
            Arrival::Poisson { rate_rps } => {
                if !(*rate_rps > 0.0 && rate_rps.is_finite()) {
                    return Err(invalid("arrival rate must be positive and finite"));
                }
            }
            Arrival::Fixed { offsets_ms } => {
                if offsets_ms.is_empty() || offsets_ms.iter().any(|o| !(*o >= 0.0 && o.is_finite())) {
                    return Err(invalid("fixed arrival offsets must be non-empty, finite and non-negative"));
                }
            }
        }
        if self.workflow_mix.is_empty() || self.workflow_mix.values().any(|w| !(*w >= 0.0)) {
            return Err(invalid("workflow_mix needs non-negative weights"));
        }
        let total: f64 = self.workflow_mix.values().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(invalid(format!("workflow_mix weights sum to {total}, expected 1")));
        }
        if !(self.zipf_s >= 0.0) {
            return Err(invalid("zipf_s must be non-negative"));
        }
        if !(self.query_noise >= 0.0 && self.drift_delta >= 0.0) {
            return Err(invalid("query_noise and drift_delta must be non-negative"));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(invalid("token range must satisfy 1 <= min <= max"));
        }
        if self.min_prompt_tokens > self.max_prompt_tokens {
            return Err(invalid("prompt token range must satisfy min <= max"));
        }
        if self.max_iterations == 0 {
            return Err(invalid("max_iterations must be at least 1"));
        }
        if self.nprobe == Some(0) {
            return Err(invalid("nprobe must be at least 1"));
        }
        Ok(())
    }
}

/// Embedding at prefix ratio `r`, moving from `start` to `end` along
/// `end + (1 − r)²·(start − end)`.
pub fn interpolate_checkpoint(start: &[f32], end: &[f32], r: f64) -> Vec<f32> {
    let w = (1.0 - r) * (1.0 - r);
    start
        .iter()
        .zip(end)
        .map(|(&s, &e)| (e as f64 + w * (s as f64 - e as f64)) as f32)
        .collect()
}

fn offset(rng: &mut impl Rng, from: &[f32], distance: f64) -> Vec<f32> {
    let dir = unit_vector(rng, from.len());
    from.iter()
        .zip(dir)
        .map(|(&f, d)| (f as f64 + distance * d as f64) as f32)
        .collect()
}

/// Samples requests against `topics`. Each request walks its workflow
/// once to script every generation stage it will enter: each output lies
/// `drift_delta` from the previous one, and an output tested by a
/// `nonempty` edge is empty once the request's drawn iteration count is
/// reached.
pub fn generate_workload(spec: &WorkloadSpec, topics: &[Embedding]) -> Result<Workload> {
    spec.validate()?;
    if topics.is_empty() {
        return Err(invalid("at least one topic is required"));
    }
    let names: Vec<&String> = spec.workflow_mix.keys().collect();
    let graphs: Vec<RAGraph> = names.iter().map(|n| template(n)).collect::<Result<_>>()?;
    let pick = WeightedIndex::new(spec.workflow_mix.values().copied())
        .map_err(|e| invalid(format!("workflow weights: {e}")))?;
    let zipf = Zipf::new(topics.len() as f64, spec.zipf_s).map_err(|e| invalid(format!("zipf: {e}")))?;
    let gap = match &spec.arrival {
        Arrival::Poisson { rate_rps } => {
            Some(Exp::new(rate_rps / 1000.0).map_err(|e| invalid(format!("arrival rate: {e}")))?)
        }
        Arrival::Fixed { .. } => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut t = 0.0;
    let mut requests = Vec::with_capacity(spec.requests);
    for id in 0..spec.requests as u64 {
        t = match (&gap, &spec.arrival) {
            (Some(g), _) => t + g.sample(&mut rng),
            (None, Arrival::Fixed { offsets_ms }) => {
                let n = offsets_ms.len() as u64;
                let cycle_start = if id >= n { requests_end(&requests, id - id % n) } else { 0.0 };
                cycle_start + offsets_ms[(id % n) as usize]
            }
            (None, Arrival::Poisson { .. }) => unreachable!("Poisson arrivals always have a gap distribution"),
        };
        let w = pick.sample(&mut rng);
        let topic = (zipf.sample(&mut rng) as usize).clamp(1, topics.len()) - 1;
        let iterations = rng.random_range(1..=spec.max_iterations);
        let query = Embedding::new(jitter(&mut rng, topics[topic].as_slice(), spec.query_noise))?;
        let input = format!("request {id} on topic {topic}");
        let scripts = script_walk(spec, &graphs[w], &mut rng, id, &input, &query, iterations)?;
        requests.push(RequestSpec {
            id,
            arrival_ms: t,
            workflow: names[w].clone(),
            input,
            query_embedding: query,
            nprobe: spec.nprobe,
            scripts,
        });
    }
    let w = Workload { requests };
    w.validate()?;
    Ok(w)
}

fn requests_end(requests: &[RequestSpec], upto: u64) -> f64 {
    requests
        .iter()
        .take(upto as usize)
        .map(|r| r.arrival_ms)
        .fold(0.0, f64::max)
}

fn script_walk(
    spec: &WorkloadSpec,
    graph: &RAGraph,
    rng: &mut impl Rng,
    id: u64,
    input: &str,
    query: &Embedding,
    iterations: u32,
) -> Result<Vec<StageScript>> {
    let mut state = RequestState::new(Value {
        text: input.to_string(),
        embedding: Some(query.clone()),
        ..Value::default()
    });
    let mut prev = query.as_slice().to_vec();
    let mut scripts = Vec::new();
    loop {
        let n = match graph.advance(&mut state) {
            Ok(Endpoint::Node(n)) => n,
            Ok(_) | Err(Error::LoopGuard { .. }) => break,
            Err(e) => return Err(e),
        };
        let node = graph.node(n).expect("advance only returns known nodes");
        let out = node.output_var().to_string();
        if node.is_retrieval() {
            state.bindings.insert(
                out,
                Value {
                    docs: Some(vec![0]),
                    ..Value::default()
                },
            );
            continue;
        }
        let visit = state.visits(n);
        let tested = graph.edges().iter().any(|e| {
            e.from == Endpoint::Node(n) && matches!(&e.cond, Condition::NonEmpty(v) if *v == out)
        });
        let text = if tested && visit >= iterations {
            String::new()
        } else {
            format!("r{id}-n{n}-v{visit}")
        };
        let end = offset(rng, &prev, spec.drift_delta);
        let checkpoints = CHECKPOINT_RATIOS
            .iter()
            .map(|&r| Ok((r, Embedding::new(interpolate_checkpoint(&prev, &end, r))?)))
            .collect::<Result<Vec<_>>>()?;
        let final_embedding = Embedding::new(end.clone())?;
        let script = GenerationScript {
            total_tokens: rng.random_range(spec.min_tokens..=spec.max_tokens),
            prompt_tokens: rng.random_range(spec.min_prompt_tokens..=spec.max_prompt_tokens),
            output_text: text.clone(),
            final_embedding: final_embedding.clone(),
            prefix_checkpoints: checkpoints,
        };
        state.bindings.insert(
            out,
            Value {
                text,
                embedding: Some(final_embedding),
                ..Value::default()
            },
        );
        scripts.push(StageScript { node: n, visit, script });
        prev = end;
    }
    Ok(scripts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::corpus::{topic_centers, CorpusSpec};
    use crate::vector_index::l2_distance;

    fn topics() -> Vec<Embedding> {
        topic_centers(&CorpusSpec {
            dim: 8,
            n_topics: 6,
            ..CorpusSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn deterministic_and_sorted_arrivals() {
        let spec = WorkloadSpec {
            requests: 40,
            ..WorkloadSpec::default()
        };
        let a = generate_workload(&spec, &topics()).unwrap();
        let b = generate_workload(&spec, &topics()).unwrap();
        assert_eq!(a, b);
        assert!(a.requests.windows(2).all(|w| w[0].arrival_ms <= w[1].arrival_ms));
    }

    #[test]
    fn scripts_cover_every_generation_visit() {
        let spec = WorkloadSpec {
            requests: 60,
            ..WorkloadSpec::default()
        };
        for r in generate_workload(&spec, &topics()).unwrap().requests {
            let g = template(&r.workflow).unwrap();
            let mut state = RequestState::new(Value {
                text: r.input.clone(),
                embedding: Some(r.query_embedding.clone()),
                ..Value::default()
            });
            let mut steps = 0;
            while let Endpoint::Node(n) = g.advance(&mut state).unwrap() {
                steps += 1;
                assert!(steps < 64);
                let node = g.node(n).unwrap();
                let v = if node.is_generation() {
                    let s = r.script(n, state.visits(n)).expect("script for every visit");
                    Value {
                        text: s.output_text.clone(),
                        embedding: Some(s.final_embedding.clone()),
                        ..Value::default()
                    }
                } else {
                    Value {
                        docs: Some(vec![1]),
                        ..Value::default()
                    }
                };
                state.bindings.insert(node.output_var().to_string(), v);
            }
        }
    }

    #[test]
    fn successive_outputs_drift_by_delta() {
        let spec = WorkloadSpec {
            requests: 20,
            drift_delta: 0.2,
            workflow_mix: [("multistep".to_string(), 1.0)].into_iter().collect(),
            ..WorkloadSpec::default()
        };
        for r in generate_workload(&spec, &topics()).unwrap().requests {
            let mut prev = r.query_embedding.as_slice().to_vec();
            for s in &r.scripts {
                let d = l2_distance(&prev, s.script.final_embedding.as_slice());
                assert!((d - 0.2).abs() < 1e-4, "{d}");
                prev = s.script.final_embedding.as_slice().to_vec();
            }
        }
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.jsonl");
        let w = generate_workload(
            &WorkloadSpec {
                requests: 5,
                ..WorkloadSpec::default()
            },
            &topics(),
        )
        .unwrap();
        w.write_jsonl(&path).unwrap();
        assert_eq!(Workload::read_jsonl(&path).unwrap(), w);
    }

    #[test]
    fn checkpoint_path_endpoints() {
        let a = [0.0f32, 0.0];
        let b = [1.0f32, 2.0];
        assert_eq!(interpolate_checkpoint(&a, &b, 1.0), b.to_vec());
        let mid = interpolate_checkpoint(&a, &b, 0.5);
        assert!((mid[0] - 0.75).abs() < 1e-6 && (mid[1] - 1.5).abs() < 1e-6);
    }
}
