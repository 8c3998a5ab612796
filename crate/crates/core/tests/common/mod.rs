#![allow(dead_code)]

use hedra_core::generation::{GenLatencyModel, GenerationScript};
use hedra_core::harness::corpus::{generate_corpus, topic_centers, CorpusSpec};
use hedra_core::harness::workload::{generate_workload, Arrival, RequestSpec, StageScript, Workload, WorkloadSpec};
use hedra_core::retrieval::RetrievalCostModel;
use hedra_core::scheduler::{SchedulerConfig, Strategy};
use hedra_core::vector_index::{train_kmeans, Centroids, Corpus, Embedding, IvfIndex, Metric};

pub fn emb(x: f32) -> Embedding {
    Embedding::new(vec![x]).unwrap()
}

/// 16 one-vector clusters on a line; each scan costs 1 ms.
pub fn line_index() -> IvfIndex {
    let data: Vec<f32> = (0..16).map(|i| i as f32).collect();
    let corpus = Corpus::new(1, Metric::L2, (0..16).collect(), data.clone()).unwrap();
    IvfIndex::build(&corpus, Centroids::new(1, data).unwrap()).unwrap()
}

pub fn hyde_request(id: u64, arrival: f64, nprobe: usize, gen0: usize, gen2: usize) -> RequestSpec {
    RequestSpec {
        id,
        arrival_ms: arrival,
        workflow: "hyde".into(),
        input: format!("q{id}"),
        query_embedding: emb(0.0),
        nprobe: Some(nprobe),
        scripts: vec![
            StageScript {
                node: 0,
                visit: 1,
                script: GenerationScript::simple(gen0, format!("h{id}"), emb(0.0)),
            },
            StageScript {
                node: 2,
                visit: 1,
                script: GenerationScript::simple(gen2, format!("a{id}"), emb(0.0)),
            },
        ],
    }
}

/// Deterministic costs: 2 ms per decode step, 1 ms per cluster, 2 ms budget.
pub fn gantt_config(strategy: Strategy) -> SchedulerConfig {
    SchedulerConfig {
        strategy,
        mb_override_ms: Some(2.0),
        speculation: false,
        cache: false,
        gen_model: GenLatencyModel {
            base_ms: 2.0,
            per_seq_ms: 0.0,
            jitter_sigma: 0.0,
            seed: 0,
        },
        ret_cost: RetrievalCostModel {
            per_vector_ns: 1e6,
            fast_speedup: 8.0,
            fixed_call_us: 0.0,
        },
        ..SchedulerConfig::default()
    }
}

/// One long retrieval followed by two short ones with long answers.
pub fn gantt_workload() -> Workload {
    Workload {
        requests: vec![
            hyde_request(1, 0.0, 16, 1, 1),
            hyde_request(2, 2.0, 4, 1, 4),
            hyde_request(3, 4.0, 4, 1, 4),
        ],
    }
}

pub struct Setup {
    pub corpus_spec: CorpusSpec,
    pub corpus: Corpus,
    pub index: IvfIndex,
}

pub fn mixture(n_vectors: usize, dim: usize, n_topics: usize, k_clusters: usize, seed: u64) -> Setup {
    let corpus_spec = CorpusSpec {
        n_vectors,
        dim,
        n_topics,
        topic_spread: 0.05,
        seed,
        ..CorpusSpec::default()
    };
    let corpus = generate_corpus(&corpus_spec).unwrap();
    let centroids = train_kmeans(&corpus.prepared_data(), dim, k_clusters, 10, seed).unwrap();
    let index = IvfIndex::build(&corpus, centroids).unwrap();
    Setup {
        corpus_spec,
        corpus,
        index,
    }
}

pub fn workload_for(setup: &Setup, mix: &[(&str, f64)], requests: usize, rate_rps: f64, seed: u64) -> Workload {
    let spec = WorkloadSpec {
        requests,
        arrival: Arrival::Poisson { rate_rps },
        workflow_mix: mix.iter().map(|(n, w)| (n.to_string(), *w)).collect(),
        seed,
        ..WorkloadSpec::default()
    };
    generate_workload(&spec, &topic_centers(&setup.corpus_spec).unwrap()).unwrap()
}
