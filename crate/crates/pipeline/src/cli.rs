//! `orch` command line.

use std::ffi::OsString;
use std::io::Write;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use orch_core::fusion::{fuse, CandidateSet, FusionMethod, SimpleParams};
use orch_core::geometry::{inverse_warp_image_to_native, inverse_warp_to_native, resample_image, resample_mask, GridSpec, Space, TransformSidecar};
use orch_core::mask::SegmentationMask;
use orch_core::nifti;
use orch_core::registry::{task_spec, TaskId, TaskKind};
use orch_core::validation::{validate_subject, SubjectInputs};
use serde_json::{json, Map, Value};

use crate::{load_catalog, EngineBackend, Pipeline, PipelineConfig, PipelineError, FUSION_FILE};

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

fn parse_task(s: &str) -> Result<TaskId, String> {
    s.parse().map_err(|e: orch_core::registry::RegistryError| e.to_string())
}

fn parse_method(s: &str) -> Result<FusionMethod, String> {
    s.parse().map_err(|_| format!("unknown fusion method {s:?}; valid methods: majority, simple"))
}

#[derive(Parser, Debug)]
#[command(name = "orch", version, about = "Run, fuse and evaluate brain tumor segmentation containers")]
struct Cli {
    /// Print a machine-readable summary on standard output.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Segment one subject with one or more catalog algorithms.
    Segment(RunArgs),
    /// Synthesize an image (inpainting or a missing sequence).
    Synthesize(RunArgs),
    /// Fuse existing mask files.
    Fuse(FuseArgs),
    /// Resample a mask or image through a transform sidecar.
    Warp(WarpArgs),
    /// Check a subject directory against a task's input contract.
    Validate(ValidateArgs),
    /// Inspect the algorithm catalog.
    Catalog {
        #[command(subcommand)]
        command: CatalogCommand,
    },
}

#[derive(Subcommand, Debug)]
enum CatalogCommand {
    List(ListArgs),
}

#[derive(Args, Debug, Default)]
struct SimpleArgs {
    /// SIMPLE drop threshold factor.
    #[arg(long)]
    drop_factor: Option<f64>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    convergence_epsilon: Option<f64>,
}

impl SimpleArgs {
    fn overrides(&self) -> Map<String, Value> {
        let mut m = Map::new();
        if let Some(v) = self.drop_factor {
            m.insert("drop_factor".into(), json!(v));
        }
        if let Some(v) = self.max_iterations {
            m.insert("max_iterations".into(), json!(v));
        }
        if let Some(v) = self.convergence_epsilon {
            m.insert("convergence_epsilon".into(), json!(v));
        }
        m
    }
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long, value_parser = parse_task)]
    task: Option<TaskId>,
    /// Catalog id or `latest-winner`; repeatable.
    #[arg(long = "algo")]
    algos: Vec<String>,
    /// Subject input directory.
    #[arg(short, long)]
    input: PathBuf,
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Subject id when the input directory holds several subjects.
    #[arg(long)]
    subject: Option<String>,
    #[arg(long, value_parser = parse_method)]
    method: Option<FusionMethod>,
    #[command(flatten)]
    simple: SimpleArgs,
    /// Containers allowed to run at once.
    #[arg(long)]
    parallel: Option<usize>,
    /// Also write native-space outputs.
    #[arg(long)]
    native: bool,
    /// Keep container logs in the bundle.
    #[arg(long)]
    keep_intermediate: bool,
    /// Replace an existing bundle.
    #[arg(long)]
    force: bool,
    /// Ground-truth mask; enables metrics.json.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// JSON config file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the mock engine with this behavior table.
    #[arg(long, conflicts_with = "engine_endpoint")]
    mock_engine: Option<PathBuf>,
    #[arg(long)]
    engine_endpoint: Option<String>,
    /// Catalog override file.
    #[arg(long)]
    catalog: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FuseArgs {
    #[arg(long, value_parser = parse_method, default_value = "majority")]
    method: FusionMethod,
    #[command(flatten)]
    simple: SimpleArgs,
    /// Task whose label set applies; inferred from the masks when omitted.
    #[arg(long, value_parser = parse_task)]
    task: Option<TaskId>,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long)]
    force: bool,
    #[arg(required = true)]
    masks: Vec<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    /// Atlas to native.
    Inverse,
    /// Native to atlas.
    Forward,
}

#[derive(Args, Debug)]
struct WarpArgs {
    /// Native-to-atlas transform sidecar.
    #[arg(long)]
    transform: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    /// Treat the input as an intensity image (trilinear).
    #[arg(long)]
    image: bool,
    /// Volume defining the target grid.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "inverse")]
    direction: Direction,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(long, value_parser = parse_task)]
    task: TaskId,
    #[arg(short, long)]
    input: PathBuf,
    #[arg(long)]
    subject: Option<String>,
}

#[derive(Args, Debug)]
struct ListArgs {
    #[arg(long, value_parser = parse_task)]
    task: Option<TaskId>,
    #[arg(long)]
    year: Option<u16>,
    #[arg(long)]
    catalog: Option<PathBuf>,
}

/// Result of a subcommand: exit status plus summary fields.
struct Outcome {
    code: i32,
    fields: Map<String, Value>,
}

impl Outcome {
    fn ok(fields: Value) -> Self {
        Outcome {
            code: 0,
            fields: fields.as_object().cloned().unwrap_or_default(),
        }
    }
}

fn usage(msg: impl Into<String>) -> PipelineError {
    PipelineError::InvalidConfig(msg.into())
}

fn init_logging() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .format_timestamp(None)
        .try_init();
}

/// Runs `orch` with `args` (including the program name) and returns the exit status.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return 0;
            }
            if !e.to_string().contains("Usage:") {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            return 2;
        }
    };
    init_logging();
    let name = command_name(&cli.command);
    let json = cli.json;
    let result = panic::catch_unwind(AssertUnwindSafe(|| dispatch(cli.command, json)));
    let (code, mut fields) = match result {
        Ok(Ok(o)) => (o.code, o.fields),
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            let mut f = Map::new();
            f.insert("error".into(), error_json(&e));
            (e.exit_code(), f)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            eprintln!("internal error: {msg}");
            let mut f = Map::new();
            f.insert("error".into(), json!({"kind": "InternalError", "message": msg}));
            (3, f)
        }
    };
    if json {
        fields.insert("schema_version".into(), json!(SUMMARY_SCHEMA_VERSION));
        fields.insert("command".into(), json!(name));
        fields.insert("exit_code".into(), json!(code));
        fields.insert("status".into(), json!(if code == 0 { "ok" } else { "error" }));
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "{}", serde_json::to_string_pretty(&Value::Object(fields)).expect("json"));
    }
    code
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Segment(_) => "segment",
        Command::Synthesize(_) => "synthesize",
        Command::Fuse(_) => "fuse",
        Command::Warp(_) => "warp",
        Command::Validate(_) => "validate",
        Command::Catalog { .. } => "catalog list",
    }
}

fn error_json(e: &PipelineError) -> Value {
    let mut v = json!({"kind": e.kind(), "message": e.to_string()});
    match e {
        PipelineError::ValidationFailed(r) => v["report"] = serde_json::to_value(r).expect("json"),
        PipelineError::AllJobsFailed(f) => v["failures"] = serde_json::to_value(f).expect("json"),
        _ => {}
    }
    v
}

fn dispatch(cmd: Command, json: bool) -> Result<Outcome, PipelineError> {
    match cmd {
        Command::Segment(a) => run(a, TaskKind::Segmentation),
        Command::Synthesize(a) => run(a, TaskKind::Synthesis),
        Command::Fuse(a) => fuse_files(a),
        Command::Warp(a) => warp(a),
        Command::Validate(a) => validate(a),
        Command::Catalog {
            command: CatalogCommand::List(a),
        } => list(a, json),
    }
}

/// Config file values overlaid with explicit flags.
fn build_config(a: &RunArgs) -> Result<PipelineConfig, PipelineError> {
    let mut base = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(PipelineError::io(p))?;
            match serde_json::from_str::<Value>(&text) {
                Ok(Value::Object(m)) => m,
                Ok(_) => return Err(usage(format!("{}: config must be a JSON object", p.display()))),
                Err(e) => return Err(usage(format!("{}: {e}", p.display()))),
            }
        }
        None => Map::new(),
    };
    let mut set = |k: &str, v: Value| {
        base.insert(k.to_string(), v);
    };
    if let Some(t) = a.task {
        set("task_id", json!(t));
    }
    if !a.algos.is_empty() {
        set("algorithm_selectors", json!(a.algos));
    }
    if let Some(m) = a.method {
        set("fusion_method", json!(m));
    }
    if let Some(o) = &a.output {
        set("output_dir", json!(o));
    }
    if let Some(n) = a.parallel {
        set("parallel_jobs", json!(n));
    }
    if a.native {
        set("native_space_output", json!(true));
    }
    if a.keep_intermediate {
        set("keep_intermediate", json!(true));
    }
    if a.force {
        set("force", json!(true));
    }
    if let Some(r) = &a.reference {
        set("reference_mask", json!(r));
    }
    if let Some(t) = &a.mock_engine {
        set("engine_backend", serde_json::to_value(EngineBackend::Mock { behavior_table: t.clone() }).expect("json"));
    } else if let Some(e) = &a.engine_endpoint {
        set("engine_backend", serde_json::to_value(EngineBackend::RealEngine { endpoint: Some(e.clone()) }).expect("json"));
    }
    let simple = a.simple.overrides();
    if !simple.is_empty() {
        let entry = base.entry("fusion_params").or_insert_with(|| json!({}));
        match entry.as_object_mut() {
            Some(p) => p.extend(simple),
            None => return Err(usage("fusion_params must be an object")),
        }
    }
    if !base.contains_key("task_id") {
        return Err(usage("no task given; pass --task"));
    }
    if !base.contains_key("output_dir") {
        return Err(usage("no output directory given; pass -o"));
    }
    let config: PipelineConfig = serde_json::from_value(Value::Object(base)).map_err(|e| usage(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

fn run(a: RunArgs, kind: TaskKind) -> Result<Outcome, PipelineError> {
    let config = build_config(&a)?;
    let inputs = SubjectInputs::discover(&a.input, a.subject.as_deref())?;
    let pipeline = Pipeline::from_config(&config, a.catalog.as_deref())?;
    let bundle = match kind {
        TaskKind::Segmentation => pipeline.run_inference(&inputs, &config)?,
        TaskKind::Synthesis => pipeline.run_synthesis(&inputs, &config)?,
    };
    for w in bundle.warnings() {
        log::warn!("{w}");
    }
    eprintln!("bundle written to {}", bundle.root.display());
    Ok(Outcome::ok(json!({ "bundle": bundle })))
}

fn mask_space(task: Option<TaskId>) -> Space {
    task.map(|t| task_spec(t).spatial_space).unwrap_or(Space::Sri24)
}

fn fuse_files(a: FuseArgs) -> Result<Outcome, PipelineError> {
    let space = mask_space(a.task);
    let mut masks = Vec::new();
    let mut ids = Vec::new();
    for p in &a.masks {
        let vol = nifti::read_volume(p)?;
        let mask = SegmentationMask::from_volume(&vol, space).map_err(|e| usage(format!("{}: {e}", p.display())))?;
        let id = nifti::nifti_stem(p).unwrap_or("mask").to_string();
        if ids.contains(&id) {
            return Err(usage(format!("two masks named {id}")));
        }
        ids.push(id);
        masks.push(mask);
    }
    let task = match a.task {
        Some(t) => t,
        None => {
            let present: Vec<u16> = masks.iter().flat_map(|m| m.label_set()).filter(|c| *c != 0).collect();
            TaskId::SEGMENTATION
                .into_iter()
                .find(|t| present.iter().all(|c| task_spec(*t).label_codes().contains(c)))
                .ok_or_else(|| usage("no segmentation task covers the labels present; pass --task"))?
        }
    };
    let mut params = SimpleParams::default();
    params.drop_factor = a.simple.drop_factor.unwrap_or(params.drop_factor);
    params.max_iterations = a.simple.max_iterations.unwrap_or(params.max_iterations);
    params.convergence_epsilon = a.simple.convergence_epsilon.unwrap_or(params.convergence_epsilon);
    params.validate().map_err(|e| usage(e.to_string()))?;

    let consensus_path = a.output.join(crate::CONSENSUS_FILE);
    let fusion_path = a.output.join(FUSION_FILE);
    if !a.force && (consensus_path.exists() || fusion_path.exists()) {
        return Err(PipelineError::OutputCollision(a.output.clone()));
    }
    let set = CandidateSet::new(masks, ids, task_spec(task).labels)?;
    let result = fuse(&set, a.method, &params)?;
    let summary = result.summary((a.method == FusionMethod::Simple).then_some(&params));
    std::fs::create_dir_all(&a.output).map_err(PipelineError::io(&a.output))?;
    nifti::write_volume(&result.consensus.to_volume()?, &consensus_path, true)?;
    let mut text = serde_json::to_string_pretty(&summary).expect("json");
    text.push('\n');
    std::fs::write(&fusion_path, text).map_err(PipelineError::io(&fusion_path))?;
    eprintln!("fused {} masks into {}", set.len(), consensus_path.display());
    Ok(Outcome::ok(json!({
        "task_id": task,
        "consensus": consensus_path,
        "fusion_metadata": fusion_path,
        "fusion": summary,
    })))
}

fn reference_grid(path: &Path, space: Space) -> Result<GridSpec, PipelineError> {
    Ok(GridSpec::from_volume(&nifti::read_volume(path)?, space))
}

fn warp(a: WarpArgs) -> Result<Outcome, PipelineError> {
    let sidecar = TransformSidecar::read(&a.transform)?;
    let forward = sidecar.transform()?;
    let atlas = forward.target_space();
    let gz = a.output.to_string_lossy().ends_with(".gz");
    let vol = nifti::read_volume(&a.input)?;
    let out = match a.direction {
        Direction::Inverse => {
            let grid = match &a.reference {
                Some(r) => reference_grid(r, Space::Native)?,
                None => sidecar
                    .native_grid()?
                    .ok_or_else(|| usage("sidecar has no native grid; pass --reference"))?,
            };
            if a.image {
                inverse_warp_image_to_native(&vol, atlas, &forward, &grid)?
            } else {
                let mask = SegmentationMask::from_volume(&vol, atlas).map_err(|e| usage(e.to_string()))?;
                inverse_warp_to_native(&mask, &forward, &grid)?.to_volume()?
            }
        }
        Direction::Forward => {
            let r = a.reference.as_ref().ok_or_else(|| usage("forward warps need --reference"))?;
            let grid = reference_grid(r, atlas)?;
            if a.image {
                resample_image(&vol, Space::Native, &forward, &grid)?
            } else {
                let mask = SegmentationMask::from_volume(&vol, Space::Native).map_err(|e| usage(e.to_string()))?;
                resample_mask(&mask, &forward, &grid)?.to_volume()?
            }
        }
    };
    if let Some(parent) = a.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(PipelineError::io(parent))?;
    }
    nifti::write_volume(&out, &a.output, gz)?;
    eprintln!("wrote {}", a.output.display());
    Ok(Outcome::ok(json!({ "output": a.output })))
}

fn validate(a: ValidateArgs) -> Result<Outcome, PipelineError> {
    let inputs = SubjectInputs::discover(&a.input, a.subject.as_deref())?;
    let report = validate_subject(&inputs, &task_spec(a.task));
    for f in &report.findings {
        eprintln!("{:?} {}: {}", f.severity, f.code, f.message);
    }
    let passed = report.passed();
    eprintln!("{} {}: {}", report.subject_id, a.task, if passed { "valid" } else { "invalid" });
    Ok(Outcome {
        code: if passed { 0 } else { 1 },
        fields: json!({ "report": report }).as_object().cloned().expect("object"),
    })
}

fn list(a: ListArgs, json: bool) -> Result<Outcome, PipelineError> {
    let catalog = load_catalog(a.catalog.as_deref())?;
    let entries: Vec<_> = match a.task {
        Some(t) => catalog.list_algorithms(t, a.year),
        None => catalog
            .entries()
            .iter()
            .filter(|e| a.year.is_none_or(|y| e.year == y))
            .cloned()
            .collect(),
    };
    if !json {
        let mut out = std::io::stdout().lock();
        for e in &entries {
            let line = writeln!(out, "{:<24} {:<12} {} #{} {}", e.id, e.task_id.as_str(), e.year, e.rank, e.image_reference.name);
            // a closed pipe (`orch catalog list | head`) is not an error
            if line.is_err() {
                break;
            }
        }
    }
    Ok(Outcome::ok(json!({ "algorithms": entries })))
}
