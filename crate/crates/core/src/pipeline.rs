//! Stage functions behind the command-line subcommands. Every stage reads
//! and writes fixed file names inside the output directory and leaves a
//! manifest next to its outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::client::{ClientError, HttpClient, MockClient, ModelClient};
use crate::config::{ConfigError, GenMode, MockReplay, RunConfig};
use crate::dataset::{
    assemble_instance, build_preference_pair, read_dataset, read_preferences, write_dataset, write_jsonl,
    write_preferences, DatasetError, TaskInstance,
};
use crate::dpo::{self, DpoError, ToyPolicy};
use crate::eval::{build_prompt, run_eval, EvalConfig, EvalError, MetricsOptions, MetricsReport, PromptStyle};
use crate::kg::{load_graph, GraphError, KnowledgeGraph};
use crate::manifest::{sha256_hex, Manifest, ManifestError, SeedSource};
use crate::parallel::parallel_map;
use crate::sampler::{
    counterfact_mc, counterfact_mr, counterfact_qa, hops_for, mix_seed, pick_path, valid_paths, FactualPath,
    SamplerError, Task, MAX_HOPS,
};
use crate::textgen::{TextGenError, TextGenOptions, TextGenerator};
use crate::tokencap::{aggregate_captures, capture_for_instance, CaptureAggregate, CaptureResult, TokenCapError};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const PREFERENCES_FILE: &str = "preferences.jsonl";
pub const INGEST_FILE: &str = "ingest_check.json";
pub const EVAL_RECORDS_FILE: &str = "eval_records.jsonl";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const DPO_TRACE_FILE: &str = "dpo_trace.jsonl";
pub const DPO_POLICY_FILE: &str = "dpo_policy.json";
pub const DPO_SUMMARY_FILE: &str = "dpo_summary.json";
pub const CAPTURE_FILE: &str = "capture_report.json";
pub const REPORT_FILE: &str = "report.md";

/// Sampling attempts per instance before the stage gives up.
const MAX_ATTEMPTS: u64 = 64;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stage input missing: {0}")]
    StageInputMissing(PathBuf),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("instance {index}: {reason}")]
    Generation { index: usize, reason: String },
    #[error(transparent)]
    TextGen(#[from] TextGenError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Dpo(#[from] DpoError),
    #[error(transparent)]
    TokenCap(#[from] TokenCapError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl PipelineError {
    /// 1 for validation problems, 2 for client and I/O failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Client(_)
            | PipelineError::Io { .. }
            | PipelineError::Config(ConfigError::Io { .. })
            | PipelineError::Graph(GraphError::Io { .. })
            | PipelineError::TextGen(TextGenError::Client(_))
            | PipelineError::Dataset(DatasetError::IoError { .. })
            | PipelineError::Eval(EvalError::TooManyFailures { .. })
            | PipelineError::TokenCap(TokenCapError::Client(_))
            | PipelineError::Manifest(ManifestError::Io { .. }) => 2,
            _ => 1,
        }
    }
}

/// A validated config with its seed fixed.
#[derive(Debug, Clone)]
pub struct Run {
    pub cfg: RunConfig,
    pub seed: u64,
    pub seed_source: SeedSource,
}

impl Run {
    pub fn new(mut cfg: RunConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let (seed, seed_source) = match cfg.seed {
            Some(s) => (s, SeedSource::Explicit),
            None => (rand::random::<u64>(), SeedSource::Random),
        };
        cfg.seed = Some(seed);
        cfg.dpo.seed = seed;
        Ok(Self { cfg, seed, seed_source })
    }

    pub fn out(&self) -> &Path {
        &self.cfg.out
    }

    pub fn out_file(&self, name: &str) -> PathBuf {
        self.cfg.out.join(name)
    }

    /// SHA-256 of the effective config as JSON.
    pub fn config_hash(&self) -> String {
        sha256_hex(serde_json::to_string(&self.cfg).expect("config serializes").as_bytes())
    }

    fn ensure_out(&self) -> Result<(), PipelineError> {
        std::fs::create_dir_all(&self.cfg.out).map_err(|source| PipelineError::Io {
            path: self.cfg.out.clone(),
            source,
        })
    }

    fn input(&self, name: &str) -> Result<PathBuf, PipelineError> {
        let p = self.out_file(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(PipelineError::StageInputMissing(p))
        }
    }

    fn manifest(&self, stage: &str, inputs: &[&Path], outputs: &[&Path]) -> Result<PathBuf, PipelineError> {
        let m = Manifest::build(stage, self.seed, self.seed_source, self.config_hash(), inputs, outputs)?;
        Ok(m.write(self.out())?)
    }

    fn graph(&self) -> Result<KnowledgeGraph, PipelineError> {
        let g = &self.cfg.graph;
        for p in g.all() {
            if !p.is_file() {
                return Err(PipelineError::StageInputMissing(p.to_path_buf()));
            }
        }
        Ok(load_graph(&g.entities, &g.relations, &g.triples)?)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf, PipelineError> {
        let path = self.out_file(name);
        let text = serde_json::to_string_pretty(value).expect("report serializes") + "\n";
        std::fs::write(&path, text).map_err(|source| PipelineError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }

    fn http_client(&self) -> Result<Box<dyn ModelClient>, PipelineError> {
        Ok(Box::new(HttpClient::new(self.cfg.client.clone())?))
    }

    /// The configured client for querying `instances` under `style`. The
    /// offline client replays each instance's stored response.
    pub fn query_client(
        &self,
        instances: &[TaskInstance],
        style: PromptStyle,
    ) -> Result<Box<dyn ModelClient>, PipelineError> {
        if !self.cfg.mock {
            return self.http_client();
        }
        let replay = self.cfg.mock_replay;
        if replay == MockReplay::Hashed {
            return Ok(Box::new(MockClient::hashed()));
        }
        let mut map = BTreeMap::new();
        for inst in instances {
            let prompt = build_prompt(style, inst, &self.cfg.eval.scaffold)?;
            let reply = match replay {
                MockReplay::Stubborn => inst.response_stubborn.clone(),
                _ => inst.response_faithful.clone(),
            };
            map.insert(prompt, reply);
        }
        Ok(Box::new(MockClient::from_map(map)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub entities: usize,
    pub relations: usize,
    pub triples: usize,
    /// Number of valid chains per hop count 1..=4.
    pub paths_by_hops: BTreeMap<usize, usize>,
}

pub fn ingest_check(run: &Run) -> Result<IngestSummary, PipelineError> {
    let g = run.graph()?;
    let summary = IngestSummary {
        entities: g.entity_count(),
        relations: g.relations().count(),
        triples: g.triples().len(),
        paths_by_hops: (1..=MAX_HOPS).map(|n| (n, valid_paths(&g, n).len())).collect(),
    };
    run.ensure_out()?;
    let out = run.write_json(INGEST_FILE, &summary)?;
    run.manifest("ingest-check", &run.cfg.graph.all(), &[&out])?;
    Ok(summary)
}

fn recoverable(e: &SamplerError) -> bool {
    matches!(
        e,
        SamplerError::NoCandidate(_) | SamplerError::NoContinuation(_) | SamplerError::MissingFact(_)
    )
}

/// One instance for index `index`. Seeds derive from the run seed and the
/// index only, so instances do not depend on each other or on scheduling.
fn generate_one(
    g: &KnowledgeGraph,
    paths: &BTreeMap<usize, Vec<FactualPath>>,
    tg: &TextGenerator<'_>,
    task: Task,
    n: usize,
    seed: u64,
    index: usize,
) -> Result<TaskInstance, PipelineError> {
    let base = mix_seed(seed, index as u64);
    let mut last = String::from("no attempt made");
    for attempt in 0..MAX_ATTEMPTS {
        let s = mix_seed(base, attempt);
        let path = pick_path(&paths[&n], n, s)?;
        let cf_seed = mix_seed(s, u64::MAX);
        let inst = match task {
            Task::Qa => counterfact_qa(g, &path.hops[0], cf_seed),
            Task::Mr => counterfact_mr(g, &path, cf_seed),
            Task::Mc => counterfact_mc(g, &path, cf_seed),
        };
        let inst = match inst {
            Ok(i) => i,
            Err(e) if recoverable(&e) => {
                last = e.to_string();
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let doc = match tg.compose_context(g, &inst) {
            Ok(d) => d,
            Err(e @ (TextGenError::Graph(_) | TextGenError::Client(_))) => return Err(e.into()),
            Err(e) => {
                last = e.to_string();
                continue;
            }
        };
        let question = match tg.question(g, &inst.factual) {
            Ok(q) => q,
            Err(e @ (TextGenError::Graph(_) | TextGenError::Client(_))) => return Err(e.into()),
            Err(e) => {
                last = e.to_string();
                continue;
            }
        };
        let id = format!("{}-{index:05}", task.to_string().to_lowercase());
        match assemble_instance(g, id, &inst, &doc, &question) {
            Ok(x) => return Ok(x),
            Err(DatasetError::InconsistentInputs(reason)) => last = reason,
            Err(e) => return Err(e.into()),
        }
    }
    Err(PipelineError::Generation {
        index,
        reason: format!("no viable instance after {MAX_ATTEMPTS} attempts; last: {last}"),
    })
}

pub fn generate_instances(
    run: &Run,
    g: &KnowledgeGraph,
    tg: &TextGenerator<'_>,
) -> Result<Vec<TaskInstance>, PipelineError> {
    let cfg = &run.cfg;
    let hops: Vec<usize> = (0..cfg.count)
        .map(|i| cfg.hops.unwrap_or_else(|| hops_for(cfg.task, i)))
        .collect();
    let mut paths = BTreeMap::new();
    for &n in &hops {
        paths.entry(n).or_insert_with(|| valid_paths(g, n));
    }
    let results = parallel_map(&hops, cfg.workers, |i, &n| {
        generate_one(g, &paths, tg, cfg.task, n, run.seed, i)
    });
    results.into_iter().collect()
}

pub fn build_dataset(run: &Run) -> Result<Vec<TaskInstance>, PipelineError> {
    let g = run.graph()?;
    let instances = match run.cfg.mode {
        GenMode::Fallback => generate_instances(run, &g, &TextGenerator::fallback())?,
        GenMode::Llm => {
            let client: Box<dyn ModelClient> = if run.cfg.mock {
                Box::new(MockClient::hashed())
            } else {
                run.http_client()?
            };
            let opts = TextGenOptions {
                model: run.cfg.client.model.clone(),
                ..TextGenOptions::default()
            };
            generate_instances(run, &g, &TextGenerator::with_client(client.as_ref(), opts))?
        }
    };
    run.ensure_out()?;
    let out = run.out_file(DATASET_FILE);
    write_dataset(&instances, &out)?;
    run.manifest("build-dataset", &run.cfg.graph.all(), &[&out])?;
    Ok(instances)
}

pub fn build_preferences(run: &Run) -> Result<usize, PipelineError> {
    let input = run.input(DATASET_FILE)?;
    let instances = read_dataset(&input)?;
    let pairs: Vec<_> = instances
        .iter()
        .map(|x| build_preference_pair(x, &run.cfg.eval.scaffold))
        .collect();
    let out = run.out_file(PREFERENCES_FILE);
    write_preferences(&pairs, &out)?;
    run.manifest("build-preferences", &[&input], &[&out])?;
    Ok(pairs.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoSummary {
    pub pairs: usize,
    pub vocabulary: usize,
    pub steps: usize,
    pub beta: f64,
    pub learning_rate: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_mean_margin: f64,
    pub preference_accuracy: f64,
    pub reference_unchanged: bool,
}

pub fn dpo_train_toy(run: &Run) -> Result<DpoSummary, PipelineError> {
    let input = run.input(PREFERENCES_FILE)?;
    let pairs = read_preferences(&input)?;
    let (vocab, encoded) = dpo::prepare_pairs(&pairs)?;
    let dcfg = &run.cfg.dpo;
    let mut policy = ToyPolicy::new(vocab, dcfg.init_scale, dcfg.seed);
    let reference = policy.reference_params().to_vec();
    let trace = dpo::train_toy(&mut policy, &encoded, dcfg)?;
    let first = trace.first().expect("trace has the initial entry");
    let last = trace.last().expect("trace has the initial entry");
    let summary = DpoSummary {
        pairs: encoded.len(),
        vocabulary: policy.vocab().len(),
        steps: dcfg.steps,
        beta: dcfg.beta,
        learning_rate: dcfg.learning_rate,
        initial_loss: first.loss,
        final_loss: last.loss,
        final_mean_margin: last.mean_margin,
        preference_accuracy: dpo::preference_accuracy(&policy, &encoded, dcfg.beta),
        reference_unchanged: policy.reference_params() == &reference[..],
    };
    let trace_path = run.out_file(DPO_TRACE_FILE);
    write_jsonl(&trace_path, "dpo_trace", &trace)?;
    let policy_path = run.out_file(DPO_POLICY_FILE);
    std::fs::write(&policy_path, policy.dump() + "\n").map_err(|source| PipelineError::Io {
        path: policy_path.clone(),
        source,
    })?;
    let summary_path = run.write_json(DPO_SUMMARY_FILE, &summary)?;
    run.manifest("dpo-train-toy", &[&input], &[&trace_path, &policy_path, &summary_path])?;
    Ok(summary)
}

pub fn evaluate(run: &Run) -> Result<MetricsReport, PipelineError> {
    let input = run.input(DATASET_FILE)?;
    let instances = read_dataset(&input)?;
    let style = run.cfg.eval.prompt_style()?;
    let client = run.query_client(&instances, style)?;
    let ecfg = EvalConfig {
        style,
        model: run.cfg.client.model.clone(),
        metrics: MetricsOptions {
            strict_only: run.cfg.eval.strict_only,
            ..MetricsOptions::default()
        },
        workers: run.cfg.workers,
        max_error_rate: run.cfg.eval.max_error_rate,
        max_tokens: 256,
        scaffold: run.cfg.eval.scaffold.clone(),
    };
    let outcome = run_eval(client.as_ref(), &instances, &ecfg)?;
    let records = run.out_file(EVAL_RECORDS_FILE);
    write_jsonl(&records, "eval_records", &outcome.records)?;
    let report = run.write_json(EVAL_REPORT_FILE, &outcome.report)?;
    run.manifest("evaluate", &[&input], &[&records, &report])?;
    Ok(outcome.report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureRecord {
    pub instance_id: String,
    pub captured: bool,
    pub position: Option<usize>,
    pub token: Option<String>,
    pub score: Option<f64>,
    pub rank: Option<usize>,
    pub prob: Option<f64>,
}

impl CaptureRecord {
    fn new(id: &str, r: &CaptureResult) -> Self {
        let c = r.captured.as_ref();
        Self {
            instance_id: id.to_string(),
            captured: c.is_some(),
            position: c.map(|c| c.position),
            token: c.map(|c| c.token.clone()),
            score: c.map(|c| c.score),
            rank: c.map(|c| c.rank),
            prob: c.map(|c| c.softmax_prob),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureReport {
    pub style: String,
    pub top_k: u32,
    /// Common words are taken between the new and the original answer.
    pub common_parts_against: String,
    pub records: Vec<CaptureRecord>,
    pub aggregate: CaptureAggregate,
}

pub fn capture_tokens(run: &Run) -> Result<CaptureReport, PipelineError> {
    let input = run.input(DATASET_FILE)?;
    let instances = read_dataset(&input)?;
    let style = run.cfg.eval.prompt_style()?;
    let client = run.query_client(&instances, style)?;
    let model = run.cfg.client.model.as_str();
    let results = parallel_map(&instances, run.cfg.workers, |_, inst| {
        capture_for_instance(
            client.as_ref(),
            inst,
            style,
            &run.cfg.eval.scaffold,
            model,
            run.cfg.top_k,
        )
    });
    let results: Vec<CaptureResult> = results.into_iter().collect::<Result<_, _>>()?;
    let report = CaptureReport {
        style: style.to_string(),
        top_k: run.cfg.top_k,
        common_parts_against: "orig_answer".into(),
        records: instances
            .iter()
            .zip(&results)
            .map(|(i, r)| CaptureRecord::new(&i.id, r))
            .collect(),
        aggregate: aggregate_captures(&results),
    };
    let out = run.write_json(CAPTURE_FILE, &report)?;
    run.manifest("capture-tokens", &[&input], &[&out])?;
    Ok(report)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".to_string(), |v| format!("{v:.1}"))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| {
        PipelineError::Dataset(DatasetError::MalformedRecord {
            line: e.line(),
            reason: format!("{}: {e}", path.display()),
        })
    })
}

/// Markdown summary of whichever stage outputs exist.
pub fn report(run: &Run) -> Result<String, PipelineError> {
    let mut md = String::from("# Run report\n");
    let mut inputs = Vec::new();
    let eval_path = run.out_file(EVAL_REPORT_FILE);
    if eval_path.is_file() {
        let r: MetricsReport = read_json(&eval_path)?;
        md += &format!(
            "\n## Evaluation\n\n| P_c | P_s | P_o | M_R | EM | n |\n|---|---|---|---|---|---|\n| {:.1} | {:.1} | {:.1} | {} | {:.1} | {} |\n",
            r.p_c,
            r.p_s,
            r.p_o,
            fmt_opt(r.m_r),
            r.em,
            r.counts.total
        );
        if r.strict_only {
            md += "\nP_s is reported as P_c (strict-only mode).\n";
        }
        inputs.push(eval_path.clone());
    }
    let dpo_path = run.out_file(DPO_SUMMARY_FILE);
    if dpo_path.is_file() {
        let s: DpoSummary = read_json(&dpo_path)?;
        md += &format!(
            "\n## Toy preference training\n\n{} pairs, {} steps, beta {}, lr {}\n\nloss {:.4} -> {:.4}, mean margin {:.4}, preference accuracy {:.1}%\n",
            s.pairs,
            s.steps,
            s.beta,
            s.learning_rate,
            s.initial_loss,
            s.final_loss,
            s.final_mean_margin,
            100.0 * s.preference_accuracy
        );
        inputs.push(dpo_path);
    }
    let cap_path = run.out_file(CAPTURE_FILE);
    if cap_path.is_file() {
        let c: CaptureReport = read_json(&cap_path)?;
        let a = &c.aggregate;
        let r = &a.ranks;
        md += &format!(
            "\n## Token capture ({}, top {})\n\ncaptured {}/{}, mean score {}, mean exp(score) {}%, mean frame prob {}\n\n| 1 | 2 | 3-5 | 6-10 | >10 | none |\n|---|---|---|---|---|---|\n| {} | {} | {} | {} | {} | {} |\n",
            c.style,
            c.top_k,
            a.captured,
            a.results,
            fmt_opt(a.mean_score),
            fmt_opt(a.mean_score_percent),
            fmt_opt(a.mean_softmax_prob),
            r.rank_1,
            r.rank_2,
            r.rank_3_5,
            r.rank_6_10,
            r.rank_over_10,
            r.not_captured
        );
        inputs.push(cap_path);
    }
    if inputs.is_empty() {
        return Err(PipelineError::StageInputMissing(eval_path));
    }
    let out = run.out_file(REPORT_FILE);
    std::fs::write(&out, &md).map_err(|source| PipelineError::Io {
        path: out.clone(),
        source,
    })?;
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    run.manifest("report", &refs, &[&out])?;
    Ok(md)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::bundled_sample_dir;

    fn run_in(dir: &Path, task: Task, count: usize) -> Run {
        Run::new(RunConfig {
            task,
            count,
            seed: Some(7),
            out: dir.to_path_buf(),
            mock: true,
            ..RunConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn bundled_graph_loads() {
        let dir = tempfile::tempdir().unwrap();
        let s = ingest_check(&run_in(dir.path(), Task::Qa, 1)).unwrap();
        assert!(s.triples >= 150, "{s:?}");
        assert!(s.paths_by_hops[&4] > 0);
        assert!(bundled_sample_dir().join("entities.tsv").is_file());
    }

    #[test]
    fn every_task_generates() {
        for task in [Task::Qa, Task::Mr, Task::Mc] {
            let dir = tempfile::tempdir().unwrap();
            let xs = build_dataset(&run_in(dir.path(), task, 6)).unwrap();
            assert_eq!(xs.len(), 6);
            for (i, x) in xs.iter().enumerate() {
                assert_eq!(x.hops, hops_for(task, i));
                x.paths.check().unwrap();
            }
        }
    }

    #[test]
    fn missing_input_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let e = evaluate(&run_in(dir.path(), Task::Qa, 1)).unwrap_err();
        assert!(matches!(e, PipelineError::StageInputMissing(_)));
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn random_seed_is_recorded() {
        let run = Run::new(RunConfig::default()).unwrap();
        assert_eq!(run.seed_source, SeedSource::Random);
        assert_eq!(run.cfg.seed, Some(run.seed));
    }
}
