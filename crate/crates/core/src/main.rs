use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use confiforge::config::{ConfigError, GenMode, GraphPaths, MockReplay, RunConfig};
use confiforge::pipeline::{self, PipelineError, Run};
use confiforge::sampler::Task;

#[derive(Parser, Debug)]
#[command(
    name = "confiforge",
    version,
    about = "Counterfactual faithfulness datasets, evaluation and toy preference training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Load and validate the graph, count valid paths.
    IngestCheck,
    /// Sample paths, substitute facts, write dataset.jsonl.
    BuildDataset,
    /// Turn dataset.jsonl into chosen/rejected pairs.
    BuildPreferences,
    /// Query a model over dataset.jsonl and score the responses.
    Evaluate,
    /// Train the bigram toy policy on preferences.jsonl.
    DpoTrainToy,
    /// Locate the first new-answer token among the top alternatives.
    CaptureTokens,
    /// Summarize the outputs found in the output directory.
    Report,
}

#[derive(Args, Debug)]
struct Opts {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// qa, mr or mc.
    #[arg(long, global = true)]
    task: Option<Task>,
    #[arg(long, global = true)]
    count: Option<usize>,
    /// Fixed hop count instead of the per-task policy.
    #[arg(long, global = true)]
    hops: Option<usize>,
    /// llm or fallback.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Directory holding entities.tsv, relations.tsv and triples.tsv.
    #[arg(long, global = true)]
    graph_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    endpoint: Option<String>,
    #[arg(long, global = true)]
    model: Option<String>,
    /// Use the offline client.
    #[arg(long, global = true)]
    mock: bool,
    /// Offline replies: faithful, stubborn or hashed.
    #[arg(long, global = true)]
    mock_replay: Option<String>,
    /// base, attr, oi or ice.
    #[arg(long, global = true)]
    style: Option<String>,
    #[arg(long, global = true)]
    shots: Option<usize>,
    /// Report P_c in place of P_s (the default).
    #[arg(long, global = true, conflicts_with = "loose")]
    strict_only: bool,
    /// Report the containment rate P_s separately.
    #[arg(long, global = true)]
    loose: bool,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    top_k: Option<u32>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

fn resolve(opts: Opts) -> Result<RunConfig, ConfigError> {
    let mut cfg = match &opts.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = opts.graph_dir {
        cfg.graph = GraphPaths::in_dir(&d);
    }
    if opts.seed.is_some() {
        cfg.seed = opts.seed;
    }
    if let Some(t) = opts.task {
        cfg.task = t;
    }
    if let Some(c) = opts.count {
        cfg.count = c;
    }
    if opts.hops.is_some() {
        cfg.hops = opts.hops;
    }
    if let Some(m) = opts.mode {
        cfg.mode = m.parse::<GenMode>()?;
    }
    if let Some(e) = opts.endpoint {
        cfg.client.endpoint_url = e;
    }
    if let Some(m) = opts.model {
        cfg.client.model = m;
    }
    cfg.mock |= opts.mock;
    if let Some(r) = opts.mock_replay {
        cfg.mock_replay = r.parse::<MockReplay>()?;
    }
    if let Some(s) = opts.style {
        cfg.eval.style = s;
    }
    if opts.shots.is_some() {
        cfg.eval.shots = opts.shots;
    }
    if opts.strict_only {
        cfg.eval.strict_only = true;
    }
    if opts.loose {
        cfg.eval.strict_only = false;
    }
    if let Some(b) = opts.beta {
        cfg.dpo.beta = b;
    }
    if let Some(l) = opts.lr {
        cfg.dpo.learning_rate = l;
    }
    if let Some(s) = opts.steps {
        cfg.dpo.steps = s;
    }
    if let Some(k) = opts.top_k {
        cfg.top_k = k;
    }
    if let Some(w) = opts.workers {
        cfg.workers = w;
    }
    if let Some(o) = opts.out {
        cfg.out = o;
    }
    Ok(cfg)
}

fn execute(command: Command, run: &Run) -> Result<String, PipelineError> {
    Ok(match command {
        Command::IngestCheck => {
            let s = pipeline::ingest_check(run)?;
            let paths: Vec<String> = s.paths_by_hops.iter().map(|(n, c)| format!("{n}-hop {c}")).collect();
            format!(
                "{} entities, {} relations, {} triples; paths: {}",
                s.entities,
                s.relations,
                s.triples,
                paths.join(", ")
            )
        }
        Command::BuildDataset => {
            let xs = pipeline::build_dataset(run)?;
            format!(
                "wrote {} instances to {}",
                xs.len(),
                run.out_file(pipeline::DATASET_FILE).display()
            )
        }
        Command::BuildPreferences => {
            let n = pipeline::build_preferences(run)?;
            format!(
                "wrote {n} pairs to {}",
                run.out_file(pipeline::PREFERENCES_FILE).display()
            )
        }
        Command::Evaluate => {
            let r = pipeline::evaluate(run)?;
            let mr = r.m_r.map_or_else(|| "n/a".into(), |m| format!("{m:.1}"));
            format!(
                "P_c {:.1}  P_s {:.1}  P_o {:.1}  M_R {mr}  EM {:.1}  (n={})",
                r.p_c, r.p_s, r.p_o, r.em, r.counts.total
            )
        }
        Command::DpoTrainToy => {
            let s = pipeline::dpo_train_toy(run)?;
            format!(
                "loss {:.4} -> {:.4}, preference accuracy {:.1}%",
                s.initial_loss,
                s.final_loss,
                100.0 * s.preference_accuracy
            )
        }
        Command::CaptureTokens => {
            let r = pipeline::capture_tokens(run)?;
            format!("captured {}/{}", r.aggregate.captured, r.aggregate.results)
        }
        Command::Report => pipeline::report(run)?,
    })
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
fn run_cli<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return u8::from(e.use_stderr());
        }
    };
    let run = match resolve(cli.opts).map_err(PipelineError::from).and_then(Run::new) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code() as u8;
        }
    };
    log::info!(
        "seed {} ({:?}), config {}",
        run.seed,
        run.seed_source,
        run.config_hash()
    );
    match execute(cli.command, &run) {
        Ok(msg) => {
            println!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code() as u8
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    ExitCode::from(run_cli(std::env::args_os()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use confiforge::manifest::{read_manifest, trace_chain, SeedSource};

    fn cli(out: &std::path::Path, args: &[&str]) -> u8 {
        let mut argv = vec!["confiforge".to_string(), "--out".into(), out.display().to_string()];
        argv.extend(args.iter().map(|a| a.to_string()));
        run_cli(argv)
    }

    #[test]
    fn usage_errors_and_help() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(run_cli(["confiforge", "--help"]), 0);
        assert_eq!(run_cli(["confiforge", "no-such-command"]), 1);
        assert_eq!(cli(dir.path(), &["--task", "xx", "build-dataset"]), 1);
        assert_eq!(cli(dir.path(), &["--count", "0", "build-dataset"]), 1);
        assert_eq!(cli(dir.path(), &["--mode", "sometimes", "build-dataset"]), 1);
        assert_eq!(cli(dir.path(), &["--strict-only", "--loose", "evaluate"]), 1);
    }

    #[test]
    fn missing_stage_input_exits_one() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(cli(dir.path(), &["--seed", "1", "evaluate"]), 1);
        assert_eq!(cli(dir.path(), &["--seed", "1", "dpo-train-toy"]), 1);
        assert_eq!(cli(dir.path(), &["--seed", "1", "report"]), 1);
        let missing = dir.path().join("nowhere.toml");
        assert_eq!(
            cli(dir.path(), &["--config", missing.to_str().unwrap(), "build-dataset"]),
            2
        );
    }

    #[test]
    fn stages_chain_through_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let common = ["--seed", "5", "--task", "mr", "--count", "12", "--mock"];
        for stage in [
            "ingest-check",
            "build-dataset",
            "build-preferences",
            "dpo-train-toy",
            "evaluate",
            "capture-tokens",
            "report",
        ] {
            let mut args = common.to_vec();
            args.push(stage);
            assert_eq!(cli(dir.path(), &args), 0, "{stage}");
        }
        let chain = trace_chain(dir.path(), "dpo-train-toy").unwrap();
        assert_eq!(chain, ["dpo-train-toy", "build-preferences", "build-dataset"]);
        let report = std::fs::read_to_string(dir.path().join(pipeline::REPORT_FILE)).unwrap();
        assert!(report.contains("P_c"), "{report}");
    }

    #[test]
    fn unseeded_run_records_its_seed() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(cli(dir.path(), &["--count", "3", "build-dataset"]), 0);
        let m = read_manifest(&dir.path().join("build-dataset.manifest.json")).unwrap();
        assert_eq!(m.seed_source, SeedSource::Random);
        let again = tempfile::tempdir().unwrap();
        let seed = m.seed.to_string();
        assert_eq!(
            cli(again.path(), &["--count", "3", "--seed", &seed, "build-dataset"]),
            0
        );
        let a = std::fs::read(dir.path().join(pipeline::DATASET_FILE)).unwrap();
        let b = std::fs::read(again.path().join(pipeline::DATASET_FILE)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn client_failure_exits_two() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.toml");
        std::fs::write(
            &cfg,
            "seed = 3\ncount = 2\n[client]\nendpoint_url = \"http://127.0.0.1:9/v1/chat/completions\"\napi_key_env = \"CONFIFORGE_UNSET_TEST_KEY\"\nbackoff_ms = 1\n",
        )
        .unwrap();
        let cfg = cfg.to_str().unwrap();
        assert_eq!(cli(dir.path(), &["--config", cfg, "build-dataset"]), 0);
        assert_eq!(cli(dir.path(), &["--config", cfg, "evaluate"]), 2);
    }
}
