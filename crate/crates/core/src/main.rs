use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};

use lbmcts::engine::{self, EngineError, ProposerMode, RunConfig};
use lbmcts::llm_client::{ChatClient, HttpChatClient, LlmConfig, MockChatClient};
use lbmcts::objective::{self, Evaluator, ExternalWorker, Synth3};
use lbmcts::proposer_llm::TaskContext;
use lbmcts::report;
use lbmcts::space::{parse_space, SearchSpace};

const EXIT_CONFIG: u8 = 1;
const EXIT_EVALUATOR: u8 = 2;
const EXIT_LLM: u8 = 3;

#[derive(Parser)]
#[command(name = "lbmcts", version, about = "Joint algorithm selection and hyperparameter optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum LlmKind {
    Mock,
    Http,
}

#[derive(Subcommand)]
enum Command {
    /// Run an optimization and write history.jsonl, summary.json, tree.jsonl
    /// and space.json into the output directory.
    Run {
        /// `synth3` or a search-space JSON file.
        #[arg(long)]
        space: String,
        /// `synth3` or `external:<shell command>`.
        #[arg(long, default_value = "synth3")]
        objective: String,
        #[arg(long, value_enum, default_value = "mock")]
        llm: LlmKind,
        #[arg(long, default_value = "gpt-4o-mini")]
        model: String,
        #[arg(long, default_value = "https://api.openai.com/v1")]
        endpoint: String,
        /// Environment variable holding the API key.
        #[arg(long, default_value = "OPENAI_API_KEY")]
        api_key_env: String,
        #[arg(long, default_value_t = 300)]
        budget: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// hybrid, bo, llm, or fixed:<p>.
        #[arg(long, default_value = "hybrid")]
        mode: ProposerMode,
        #[arg(long)]
        out: PathBuf,
        /// Free-text dataset description shown to the LLM.
        #[arg(long, default_value = "")]
        description: String,
        /// Seconds allowed per external evaluation.
        #[arg(long, default_value_t = 300.0)]
        eval_timeout: f64,
        /// Record wall-clock fields (history is then not reproducible).
        #[arg(long)]
        timing: bool,
        /// Stop early once the best score reaches this value.
        #[arg(long)]
        stop_at: Option<f64>,
    },
    /// Summarize one or more history files.
    Report {
        #[arg(required = true)]
        histories: Vec<PathBuf>,
        /// Search space for the diversity table; defaults to space.json next
        /// to the first history file.
        #[arg(long)]
        space: Option<PathBuf>,
        /// Row stride of the best-so-far table.
        #[arg(long, default_value_t = 10)]
        every: usize,
    },
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn load_space(arg: &str) -> Result<SearchSpace, String> {
    if arg == "synth3" {
        return Ok(objective::synth3_space());
    }
    let text = fs::read_to_string(arg).map_err(|e| format!("cannot read {arg}: {e}"))?;
    parse_space(&text).map_err(|e| format!("{arg}: {e}"))
}

fn write_file(path: &Path, contents: &str) -> Result<(), String> {
    fs::write(path, contents).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    space_arg: &str,
    objective_arg: &str,
    llm_kind: LlmKind,
    llm_config: LlmConfig,
    cfg: RunConfig,
    out: &Path,
    description: &str,
    eval_timeout: f64,
) -> ExitCode {
    let space = match load_space(space_arg) {
        Ok(s) => s,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    if !(eval_timeout > 0.0) {
        return fail(EXIT_CONFIG, "--eval-timeout must be positive");
    }
    let mut evaluator: Box<dyn Evaluator> = if objective_arg == "synth3" {
        if space.digest() != objective::synth3_space().digest() {
            return fail(EXIT_CONFIG, "the synth3 objective needs --space synth3");
        }
        Box::new(Synth3)
    } else if let Some(cmd) = objective_arg.strip_prefix("external:") {
        match ExternalWorker::spawn(cmd, &space, Duration::from_secs_f64(eval_timeout)) {
            Ok(w) => Box::new(w),
            Err(e) => return fail(EXIT_EVALUATOR, e),
        }
    } else {
        return fail(EXIT_CONFIG, format!("unknown objective `{objective_arg}`"));
    };
    let llm: Box<dyn ChatClient> = match llm_kind {
        LlmKind::Mock => Box::new(MockChatClient::new(cfg.seed)),
        LlmKind::Http => match HttpChatClient::new(llm_config) {
            Ok(c) => Box::new(c),
            Err(e) => return fail(EXIT_CONFIG, e),
        },
    };
    if let Err(e) = fs::create_dir_all(out) {
        return fail(EXIT_CONFIG, format!("cannot create {}: {e}", out.display()));
    }
    if let Err(e) = write_file(&out.join("space.json"), &space.to_json()) {
        return fail(EXIT_CONFIG, e);
    }
    let history_path = out.join("history.jsonl");
    let mut history = match File::create(&history_path) {
        Ok(f) => BufWriter::new(f),
        Err(e) => return fail(EXIT_CONFIG, format!("cannot create {}: {e}", history_path.display())),
    };
    let ctx = TaskContext::for_space(&space, description);
    let mut observer = |r: &engine::TrialRecord| -> Result<(), String> {
        let line = serde_json::to_string(r).map_err(|e| e.to_string())?;
        writeln!(history, "{line}").and_then(|_| history.flush()).map_err(|e| e.to_string())
    };
    let outcome = engine::run(&space, evaluator.as_mut(), Some(llm.as_ref()), &ctx, &cfg, &mut observer);
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            let code = match e {
                EngineError::Evaluator(_) => EXIT_EVALUATOR,
                EngineError::Llm(_) => EXIT_LLM,
                _ => EXIT_CONFIG,
            };
            return fail(code, e);
        }
    };
    let summary = serde_json::to_string_pretty(&outcome.summary).expect("summary serializes");
    if let Err(e) = write_file(&out.join("summary.json"), &format!("{summary}\n"))
        .and_then(|_| write_file(&out.join("tree.jsonl"), &outcome.tree.to_jsonl()))
    {
        return fail(EXIT_CONFIG, e);
    }
    match &outcome.summary.best {
        Some(b) => println!(
            "best {} y={} at iteration {} ({} evaluations, {} failed)",
            b.algorithm, b.y, b.iteration, outcome.summary.evaluations, outcome.summary.failed_evaluations
        ),
        None => println!("no successful evaluation ({} failed)", outcome.summary.failed_evaluations),
    }
    ExitCode::SUCCESS
}

fn cmd_report(histories: &[PathBuf], space: Option<&Path>, every: usize) -> ExitCode {
    let mut runs = Vec::new();
    for p in histories {
        match report::load_history(p) {
            Ok(h) => runs.push(h),
            Err(e) => return fail(EXIT_CONFIG, e),
        }
    }
    let space_path = space.map(Path::to_path_buf).or_else(|| {
        let sibling = histories[0].parent()?.join("space.json");
        sibling.exists().then_some(sibling)
    });
    let space = match space_path {
        Some(p) => match fs::read_to_string(&p).map_err(|e| e.to_string()).and_then(|t| parse_space(&t).map_err(|e| e.to_string())) {
            Ok(s) => Some(s),
            Err(e) => return fail(EXIT_CONFIG, format!("{}: {e}", p.display())),
        },
        None => None,
    };
    match report::render(&runs, space.as_ref(), every) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(EXIT_CONFIG, e),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    match cli.command {
        Command::Run {
            space,
            objective,
            llm,
            model,
            endpoint,
            api_key_env,
            budget,
            seed,
            mode,
            out,
            description,
            eval_timeout,
            timing,
            stop_at,
        } => {
            let llm_config = LlmConfig { model, endpoint, api_key_env, ..LlmConfig::default() };
            let cfg = RunConfig { budget, seed, mode, record_timing: timing, stop_at, ..RunConfig::default() };
            cmd_run(&space, &objective, llm, llm_config, cfg, &out, &description, eval_timeout)
        }
        Command::Report { histories, space, every } => cmd_report(&histories, space.as_deref(), every),
    }
}
