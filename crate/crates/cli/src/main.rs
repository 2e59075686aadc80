use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use tdgen_core::eval::{
    config_digest, load_configs, load_manifests, render_csv, render_grid_table, render_table, run_grid, solved_overlap,
    ExperimentConfig, MetricsReport, TaskArtifacts, TaskManifest,
};
use tdgen_core::harness::{select, Budget, ProbeMode, ProbeReport, SelectionPlan, SelectionStrategy, StrategyKind};
use tdgen_core::index::{build_index, resolve_target, TargetLocator, DEFAULT_INCLUDE};
use tdgen_core::llm::{extract_tool_requests, from_config, ApiSpec, ArgType, ArgValue, ProviderConfig};
use tdgen_core::orchestrator::{rejection_message, run_task, RunConfig, StagePolicy, ToolContext};
use tdgen_core::retrieval::{RetrievalConfig, Retriever};
use tdgen_core::sandbox::{ProbeOptions, TestEnv, Workspace, DEFAULT_EVAL_TIMEOUT_S, DEFAULT_PER_TEST_TIMEOUT_S};

/// Test-driven function generation for Python repositories.
#[derive(Parser)]
#[command(name = "tdgen", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Index a repository and write the index as JSON.
    Index {
        #[arg(long)]
        repo: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Glob of files to index (repeatable).
        #[arg(long = "include", default_value = DEFAULT_INCLUDE)]
        include: Vec<String>,
    },
    /// Run the probe plugin over a stubbed (or, for coverage, pristine) copy
    /// of the repository.
    Probe {
        #[command(flatten)]
        task: TaskArgs,
        /// Path of the pytest plugin file.
        #[arg(long)]
        plugin: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `stub` or `coverage`.
        #[arg(long, default_value = "stub")]
        mode: String,
        /// Extra runner argument restricting the suite (repeatable).
        #[arg(long = "selector", allow_hyphen_values = true)]
        selector: Vec<String>,
        #[arg(long, default_value_t = DEFAULT_PER_TEST_TIMEOUT_S)]
        per_test_timeout: u64,
        #[arg(long, default_value_t = DEFAULT_EVAL_TIMEOUT_S)]
        suite_timeout: u64,
    },
    /// Select tests from a probe report.
    SelectTests {
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "THM")]
        strategy: String,
        /// Number of tests or `ALL`.
        #[arg(long, default_value = "3")]
        t: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the agent on one task.
    Generate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        task: String,
        /// Run configuration (JSON). Without it, `--replay` must be given.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Scripted replay file; overrides the configured provider.
        #[arg(long)]
        replay: Option<PathBuf>,
        #[arg(long)]
        policy: Option<StagePolicy>,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        t: Option<String>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run an experiment grid over a manifest.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// A grid, a list of configurations or a single configuration.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        /// Print the expanded grid and exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Call one retrieval or test API against a repository.
    Tools {
        #[command(flatten)]
        task: TaskArgs,
        /// Selection plan (JSON) enabling the test APIs.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Query the unmodified tree instead of the stubbed one.
        #[arg(long)]
        no_stub: bool,
        /// Print the text the model would see instead of JSON.
        #[arg(long)]
        text: bool,
        /// API name.
        api: String,
        /// Positional arguments, in declaration order.
        args: Vec<String>,
    },
    /// Render metrics reports as a table and CSV.
    Report {
        /// One or more report.json files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        table: Option<PathBuf>,
        /// Print which configurations solved which tasks.
        #[arg(long)]
        overlap: bool,
    },
}

/// A task given either by manifest entry or by repository and target.
#[derive(Args)]
struct TaskArgs {
    #[arg(long, requires = "task", conflicts_with_all = ["repo", "file", "qualname"])]
    manifest: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long, requires_all = ["file", "qualname"])]
    repo: Option<PathBuf>,
    /// Target file, relative to the repository root.
    #[arg(long)]
    file: Option<String>,
    /// Target qualified name.
    #[arg(long)]
    qualname: Option<String>,
}

struct CliError {
    code: &'static str,
    message: String,
}

fn fail(code: &'static str) -> impl Fn(String) -> CliError {
    move |message| CliError { code, message }
}

fn err<E: std::fmt::Display>(code: &'static str) -> impl Fn(E) -> CliError {
    move |e| CliError {
        code,
        message: e.to_string(),
    }
}

type CliResult<T> = Result<T, CliError>;

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError {
            code: "IO",
            message: format!("{}: {e}", dir.display()),
        })?;
    }
    std::fs::write(path, text).map_err(|e| CliError {
        code: "IO",
        message: format!("{}: {e}", path.display()),
    })
}

fn read_file(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError {
        code: "IO",
        message: format!("{}: {e}", path.display()),
    })
}

fn find_task(manifest: &Path, id: &str) -> CliResult<TaskManifest> {
    load_manifests(manifest)
        .map_err(err("MANIFEST"))?
        .into_iter()
        .find(|t| t.task_id == id)
        .ok_or_else(|| fail("MANIFEST")(format!("no task `{id}` in {}", manifest.display())))
}

/// Repository, target and test environment named by `args`.
fn task_target(args: &TaskArgs) -> CliResult<(PathBuf, TargetLocator, TestEnv)> {
    if let (Some(m), Some(id)) = (&args.manifest, &args.task) {
        let t = find_task(m, id)?;
        let loc = TargetLocator {
            file_path: t.target.file_path,
            qualified_name: Some(t.target.qualified_name),
            line: None,
        };
        return Ok((t.repo_root, loc, t.env));
    }
    match (&args.repo, &args.file, &args.qualname) {
        (Some(repo), Some(file), Some(qn)) => Ok((
            repo.clone(),
            TargetLocator {
                file_path: file.clone(),
                qualified_name: Some(qn.clone()),
                line: None,
            },
            TestEnv::default(),
        )),
        _ => Err(fail("USAGE")(
            "give --manifest and --task, or --repo, --file and --qualname".into(),
        )),
    }
}

fn open_workspace(args: &TaskArgs) -> CliResult<Workspace> {
    let (repo, loc, env) = task_target(args)?;
    let index = build_index(&repo, &[DEFAULT_INCLUDE.to_string()]).map_err(err("INDEX"))?;
    let target = resolve_target(&index, &loc).map_err(err("TARGET"))?;
    Workspace::create(&repo, target, env, None).map_err(err("SANDBOX"))
}

fn strategy_from(kind: &str, t: &str, seed: u64) -> CliResult<SelectionStrategy> {
    Ok(SelectionStrategy {
        kind: kind.parse::<StrategyKind>().map_err(err("USAGE"))?,
        budget_t: t.parse::<Budget>().map_err(err("USAGE"))?,
        rng_seed: seed,
    })
}

fn cmd_index(repo: &Path, out: &Path, include: &[String]) -> CliResult<()> {
    let index = build_index(repo, include).map_err(err("INDEX"))?;
    write_file(out, &index.to_json())?;
    println!(
        "indexed {} file(s), {} entities, {} skipped",
        index.file_digests.len(),
        index.entities.len(),
        index.skipped.len()
    );
    Ok(())
}

fn cmd_probe(task: &TaskArgs, plugin: &Path, out: &Path, mode: &str, opts: ProbeOptions) -> CliResult<()> {
    let mode = match mode {
        "stub" => ProbeMode::Stub,
        "coverage" => ProbeMode::Coverage,
        other => return Err(fail("USAGE")(format!("unknown probe mode `{other}` (stub, coverage)"))),
    };
    let mut ws = open_workspace(task)?;
    if mode == ProbeMode::Stub {
        ws.install_stub().map_err(err("SANDBOX"))?;
    }
    let report = ws
        .run_probe(plugin, &ProbeOptions { mode, ..opts })
        .map_err(err("PROBE"))?;
    write_file(out, &report.to_json())?;
    let failing = report.stub_failures().count();
    println!("{} record(s), {failing} stub failure(s)", report.records.len());
    Ok(())
}

fn cmd_select(report: &Path, strategy: SelectionStrategy, out: Option<&Path>) -> CliResult<()> {
    let report = ProbeReport::load(report).map_err(err("REPORT"))?;
    let plan = select(&report, &strategy);
    plan.check(&report).map_err(fail("SELECT"))?;
    match out {
        Some(p) => {
            write_file(p, &plan.to_json())?;
            for id in plan.node_ids() {
                println!("{id}");
            }
        }
        None => println!("{}", plan.to_json()),
    }
    Ok(())
}

fn run_config_from(config: Option<&Path>, replay: Option<&Path>) -> CliResult<(RunConfig, PathBuf)> {
    match config {
        Some(p) => {
            let text = read_file(p)?;
            let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
            let exp: ExperimentConfig =
                serde_json::from_str(&text).map_err(|e| fail("CONFIG")(format!("{}: {e}", p.display())))?;
            let mut run = exp.effective_run();
            if let Some(r) = replay {
                run.provider = ProviderConfig::scripted(std::path::absolute(r).map_err(err("IO"))?);
            }
            Ok((run, base))
        }
        None => match replay {
            Some(r) => Ok((RunConfig::new(ProviderConfig::scripted(r)), PathBuf::from("."))),
            None => Err(fail("USAGE")("give --config or --replay".into())),
        },
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_generate(
    manifest: &Path,
    task_id: &str,
    config: Option<&Path>,
    replay: Option<&Path>,
    policy: Option<StagePolicy>,
    strategy: Option<&str>,
    t: Option<&str>,
    out_dir: &Path,
) -> CliResult<()> {
    let task = find_task(manifest, task_id)?;
    let (mut run, base) = run_config_from(config, replay)?;
    if let Some(p) = policy {
        run.policy = p;
    }
    if let Some(s) = strategy {
        run.strategy.kind = s.parse().map_err(err("USAGE"))?;
    }
    if let Some(t) = t {
        run.strategy.budget_t = t.parse().map_err(err("USAGE"))?;
    }
    let mut provider = from_config(&run.provider, &base).map_err(err("PROVIDER"))?;
    let outcome = run_task(&task, &run, provider.as_mut(), None);
    let art = TaskArtifacts {
        dir: out_dir.to_path_buf(),
    };
    write_file(&art.trajectory(), &outcome.trajectory.to_jsonl())?;
    write_file(&art.patch(), &outcome.patch)?;
    if let Some(plan) = &outcome.plan {
        write_file(&art.plan(), &plan.to_json())?;
    }
    if let Some(report) = &outcome.probe_report {
        write_file(&art.probe(), &report.to_json())?;
    }
    let tr = &outcome.trajectory;
    let rounds = tr.rounds_to_pass.map(|r| r.to_string()).unwrap_or_else(|| "-".into());
    println!(
        "{} verdict={} rounds_to_pass={rounds} api_calls={} input_tokens={} output_tokens={}",
        tr.task_id,
        tr.verdict.as_str(),
        tr.api_call_count,
        tr.usage.input_tokens,
        tr.usage.output_tokens
    );
    Ok(())
}

fn cmd_evaluate(manifest: &Path, config: &Path, run_dir: &Path, dry_run: bool) -> CliResult<()> {
    let manifests = load_manifests(manifest).map_err(err("MANIFEST"))?;
    let configs = load_configs(config).map_err(err("CONFIG"))?;
    if dry_run {
        for c in &configs {
            let run = c.effective_run();
            println!(
                "{} strategy={} T={} policy={} seed={} parallelism={} tasks={}",
                config_digest(c),
                run.strategy.kind,
                run.strategy.budget_t,
                run.policy,
                run.strategy.rng_seed,
                c.parallelism,
                manifests.len()
            );
        }
        return Ok(());
    }
    let base = std::path::absolute(config.parent().unwrap_or(Path::new("."))).map_err(err("IO"))?;
    let reports = run_grid(&manifests, &configs, run_dir, &base).map_err(err("EVALUATE"))?;
    let labelled: Vec<(&ExperimentConfig, &MetricsReport)> = configs.iter().zip(&reports).collect();
    print!("{}", render_grid_table(&labelled));
    Ok(())
}

fn call_string(api: &ApiSpec, args: &[String]) -> CliResult<String> {
    if args.len() != api.params.len() {
        let sig = api.signature();
        return Err(fail("USAGE")(format!(
            "{sig} takes {} argument(s), got {}",
            api.params.len(),
            args.len()
        )));
    }
    let mut rendered = Vec::new();
    for ((name, ty), raw) in api.params.iter().zip(args) {
        let value = match ty {
            ArgType::Str => ArgValue::Str(raw.clone()),
            ArgType::Int => ArgValue::Int(
                raw.parse()
                    .map_err(|_| fail("USAGE")(format!("argument `{name}` must be an integer, got `{raw}`")))?,
            ),
        };
        rendered.push(value.to_string());
    }
    Ok(format!("{}({})", api.name, rendered.join(", ")))
}

fn cmd_tools(
    task: &TaskArgs,
    plan: Option<&Path>,
    no_stub: bool,
    text: bool,
    api: &str,
    args: &[String],
) -> CliResult<()> {
    let spec = ApiSpec::lookup(api).ok_or_else(|| fail("USAGE")(format!("unknown API `{api}`")))?;
    let call = call_string(spec, args)?;
    let mut ws = open_workspace(task)?;
    if !no_stub {
        ws.install_stub().map_err(err("SANDBOX"))?;
    }
    let plan: SelectionPlan = match plan {
        Some(p) => serde_json::from_str(&read_file(p)?).map_err(|e| fail("REPORT")(format!("{}: {e}", p.display())))?,
        None => SelectionPlan {
            strategy: SelectionStrategy::default(),
            chosen: Vec::new(),
            clusters: Vec::new(),
            rationale: Vec::new(),
            no_failing_tests: false,
        },
    };
    let index = Arc::new(build_index(ws.work_root(), &[DEFAULT_INCLUDE.to_string()]).map_err(err("INDEX"))?);
    let cfg = RetrievalConfig::default();
    let retriever = Retriever::new(index.clone(), cfg).map_err(err("RETRIEVAL"))?;
    let blind = Retriever::without_tests(index, cfg).map_err(err("RETRIEVAL"))?;
    let visible = !plan.is_empty();
    let mut ctx = ToolContext::new(retriever, blind, ws.target().clone(), plan, Duration::from_secs(60));
    ctx.tests_visible = visible;
    let ex = extract_tool_requests(&call);
    if let Some(r) = ex.rejected.first() {
        return Err(fail("USAGE")(rejection_message(r)));
    }
    let req = ex
        .requests
        .first()
        .ok_or_else(|| fail("USAGE")(format!("could not parse `{call}`")))?;
    if !text {
        if let Some(result) = ctx.query(req) {
            println!("{}", serde_json::to_string_pretty(&result).expect("result serializes"));
            return Ok(());
        }
    }
    let out = ctx.dispatch(req, &mut ws).map_err(err("SANDBOX"))?;
    if text {
        println!("{}", out.payload);
    } else {
        println!("{}", serde_json::json!({"kind": "text", "data": out.payload}));
    }
    Ok(())
}

fn cmd_report(inputs: &[PathBuf], csv: Option<&Path>, table: Option<&Path>, overlap: bool) -> CliResult<()> {
    let mut reports = Vec::new();
    for p in inputs {
        let r: MetricsReport =
            serde_json::from_str(&read_file(p)?).map_err(|e| fail("REPORT")(format!("{}: {e}", p.display())))?;
        r.check().map_err(err("REPORT"))?;
        reports.push(r);
    }
    let tables: Vec<String> = reports.iter().map(render_table).collect();
    let text = tables.join("\n");
    print!("{text}");
    if let Some(p) = table {
        write_file(p, &text)?;
    }
    if let Some(p) = csv {
        let parts = reports
            .iter()
            .map(render_csv)
            .collect::<Result<Vec<_>, _>>()
            .map_err(err("REPORT"))?;
        write_file(p, &merge_csv(&parts))?;
    }
    if overlap {
        println!();
        for region in solved_overlap(&reports) {
            println!(
                "{{{}}}: {} task(s): {}",
                region.members.join(", "),
                region.tasks.len(),
                region.tasks.join(" ")
            );
        }
    }
    Ok(())
}

/// Concatenate CSV documents sharing one header.
fn merge_csv(parts: &[String]) -> String {
    let mut out = String::new();
    for (i, part) in parts.iter().enumerate() {
        let skip = if i == 0 { 0 } else { 1 };
        for line in part.lines().skip(skip) {
            out.push_str(line);
            out.push('\n');
        }
    }
    out
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Index { repo, out, include } => cmd_index(&repo, &out, &include),
        Command::Probe {
            task,
            plugin,
            out,
            mode,
            selector,
            per_test_timeout,
            suite_timeout,
        } => cmd_probe(
            &task,
            &plugin,
            &out,
            &mode,
            ProbeOptions {
                mode: ProbeMode::Stub,
                selector,
                per_test_timeout_s: per_test_timeout,
                suite_timeout_s: suite_timeout,
            },
        ),
        Command::SelectTests {
            report,
            strategy,
            t,
            seed,
            out,
        } => cmd_select(&report, strategy_from(&strategy, &t, seed)?, out.as_deref()),
        Command::Generate {
            manifest,
            task,
            config,
            replay,
            policy,
            strategy,
            t,
            out_dir,
        } => cmd_generate(
            &manifest,
            &task,
            config.as_deref(),
            replay.as_deref(),
            policy,
            strategy.as_deref(),
            t.as_deref(),
            &out_dir,
        ),
        Command::Evaluate {
            manifest,
            config,
            run_dir,
            dry_run,
        } => cmd_evaluate(&manifest, &config, &run_dir, dry_run),
        Command::Tools {
            task,
            plan,
            no_stub,
            text,
            api,
            args,
        } => cmd_tools(&task, plan.as_deref(), no_stub, text, &api, &args),
        Command::Report {
            inputs,
            csv,
            table,
            overlap,
        } => cmd_report(&inputs, csv.as_deref(), table.as_deref(), overlap),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = serde_json::to_string(&e.message).unwrap_or_else(|_| "\"\"".into());
            eprintln!("tdgen-error code={} message={message}", e.code);
            ExitCode::FAILURE
        }
    }
}
