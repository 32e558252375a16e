use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use orch_core::fusion::{fuse, CandidateSet, FusionMethod, FusionSummary};
use orch_core::geometry::{inverse_warp_image_to_native, inverse_warp_to_native, AffineTransform, GridSpec, Space, TransformSidecar};
use orch_core::mask::SegmentationMask;
use orch_core::metrics::{evaluate, MetricReport};
use orch_core::nifti::{self, Volume};
use orch_core::registry::{task_spec, AlgorithmEntry, Catalog, InputTag, TaskKind, TaskSpec};
use orch_core::validation::{validate_subject, Severity, SubjectInputs, ValidationReport, AFFINE_TOLERANCE, SPACING_TOLERANCE_MM};
use orch_runtime::{ContainerEngine, JobResult, JobSpec, JobStatus, Runtime, RuntimeError};
use serde::Serialize;

use crate::manifest::{AlgorithmRecord, InputRecord, Manifest, ToolInfo, MANIFEST_FILE, MANIFEST_SCHEMA_VERSION, TOOL_NAME, TOOL_VERSION};
use crate::{JobFailure, PipelineConfig, PipelineError};

pub const CONSENSUS_FILE: &str = "consensus.nii.gz";
pub const FUSION_FILE: &str = "fusion.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const IDENTITY_METHOD: &str = "identity";

/// Paths of a published bundle plus its manifest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputBundle {
    pub root: PathBuf,
    /// Consensus mask, or the synthesized image for synthesis tasks.
    pub consensus_path: PathBuf,
    pub per_algorithm_paths: BTreeMap<String, PathBuf>,
    pub fusion_metadata_path: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
    pub native_space_paths: BTreeMap<String, PathBuf>,
    pub manifest_path: PathBuf,
    pub manifest: Manifest,
}

impl OutputBundle {
    pub fn warnings(&self) -> &[String] {
        &self.manifest.warnings
    }
}

type Clock = Arc<dyn Fn() -> String + Send + Sync>;

pub struct Pipeline {
    catalog: Catalog,
    engine: Arc<dyn ContainerEngine>,
    clock: Clock,
}

struct Prepared {
    spec: TaskSpec,
    report: ValidationReport,
    entries: Vec<AlgorithmEntry>,
    native: Option<(AffineTransform, GridSpec)>,
    bundle_dir: PathBuf,
}

struct JobOutcome {
    entry: AlgorithmEntry,
    out_dir: PathBuf,
    result: Result<JobResult, String>,
}

fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(PipelineError::io(path))
}

fn create_dir(path: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(path).map_err(PipelineError::io(path))
}

fn write_mask(path: &Path, mask: &SegmentationMask) -> Result<(), PipelineError> {
    nifti::write_volume(&mask.to_volume()?, path, true)?;
    Ok(())
}

fn status_reason(r: &JobResult) -> String {
    match r.status {
        JobStatus::Succeeded => "succeeded".into(),
        JobStatus::NonzeroExit => format!("nonzero_exit (exit code {})", r.exit_code.unwrap_or(-1)),
        JobStatus::TimedOut => format!("timed_out after {:.0} s", r.duration_seconds),
        JobStatus::EngineError => format!("engine_error: {}", r.log_excerpt.lines().next().unwrap_or("")),
    }
}

/// Loads the `native → atlas` sidecar matching the task space.
fn native_transform(inputs: &SubjectInputs, space: Space) -> Result<(AffineTransform, GridSpec), PipelineError> {
    for p in &inputs.transform_sidecars {
        let sc = TransformSidecar::read(p)?;
        if sc.source_space == Space::Native && sc.target_space == space {
            let grid = sc.native_grid()?.ok_or_else(|| {
                PipelineError::InvalidConfig(format!("{} has no native_grid record", p.display()))
            })?;
            return Ok((sc.transform()?, grid));
        }
    }
    Err(PipelineError::InvalidConfig(format!(
        "native-space output needs a native-to-{space} transform sidecar next to the inputs"
    )))
}

fn is_empty_dir(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_none()).unwrap_or(false)
}

impl Pipeline {
    pub fn new(catalog: Catalog, engine: Arc<dyn ContainerEngine>) -> Self {
        Pipeline {
            catalog,
            engine,
            clock: Arc::new(now_rfc3339),
        }
    }

    /// Engine from the configured backend; catalog from `catalog_override` or the environment.
    pub fn from_config(config: &PipelineConfig, catalog_override: Option<&Path>) -> Result<Self, PipelineError> {
        Ok(Self::new(crate::load_catalog(catalog_override)?, config.engine_backend.connect()?))
    }

    /// Replaces the source of manifest timestamps.
    pub fn with_clock(mut self, clock: impl Fn() -> String + Send + Sync + 'static) -> Self {
        self.clock = Arc::new(clock);
        self
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn engine(&self) -> &Arc<dyn ContainerEngine> {
        &self.engine
    }

    /// Catalog entries for the configured selectors, in selector order.
    pub fn resolve(&self, config: &PipelineConfig) -> Result<Vec<AlgorithmEntry>, PipelineError> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for sel in config.selectors() {
            let entry = self.catalog.resolve_algorithm(config.task_id, &sel)?;
            if !seen.insert(entry.id.clone()) {
                return Err(PipelineError::InvalidConfig(format!("algorithm {} selected twice", entry.id)));
            }
            out.push(entry);
        }
        Ok(out)
    }

    fn prepare(&self, inputs: &SubjectInputs, config: &PipelineConfig, kind: TaskKind) -> Result<Prepared, PipelineError> {
        config.validate()?;
        let spec = task_spec(config.task_id);
        if spec.kind != kind {
            let (want, cmd) = match spec.kind {
                TaskKind::Segmentation => ("segmentation", "segment"),
                TaskKind::Synthesis => ("synthesis", "synthesize"),
            };
            return Err(PipelineError::InvalidConfig(format!("{} is a {want} task; use `{cmd}`", spec.task_id)));
        }
        log::info!("validating {} inputs for {}", inputs.subject_id, spec.task_id);
        let report = validate_subject(inputs, &spec);
        for f in report.warnings() {
            log::warn!("{}: {}", f.code, f.message);
        }
        if !report.passed() {
            return Err(PipelineError::ValidationFailed(Box::new(report)));
        }
        let entries = self.resolve(config)?;
        if kind == TaskKind::Synthesis && entries.len() != 1 {
            return Err(PipelineError::InvalidConfig(format!(
                "synthesis runs exactly one algorithm, {} selected",
                entries.len()
            )));
        }
        let native = if config.native_space_output && spec.is_atlas_space() {
            Some(native_transform(inputs, spec.spatial_space)?)
        } else {
            None
        };
        let bundle_dir = config.output_dir.join(&inputs.subject_id).join(spec.task_id.as_str());
        if bundle_dir.exists() && !is_empty_dir(&bundle_dir) && !config.force {
            return Err(PipelineError::OutputCollision(bundle_dir));
        }
        self.engine.ping()?;
        Ok(Prepared {
            spec,
            report,
            entries,
            native,
            bundle_dir,
        })
    }

    /// Copies the consumed inputs under the container naming contract.
    fn stage_inputs(inputs: &SubjectInputs, spec: &TaskSpec, dir: &Path) -> Result<BTreeMap<String, InputRecord>, PipelineError> {
        create_dir(dir)?;
        let mut records = BTreeMap::new();
        for (tag, src) in &inputs.files {
            if !spec.required_inputs.contains(tag) {
                continue;
            }
            let gz = src.to_string_lossy().ends_with(".gz");
            let name = format!("{}-{}.nii{}", inputs.subject_id, tag.file_token(), if gz { ".gz" } else { "" });
            let bytes = fs::read(src).map_err(PipelineError::io(src))?;
            fs::write(dir.join(&name), &bytes).map_err(PipelineError::io(dir.join(&name)))?;
            records.insert(
                tag.as_str().to_string(),
                InputRecord {
                    file: name,
                    sha256: crate::manifest::sha256_hex(&bytes),
                },
            );
        }
        Ok(records)
    }

    fn run_jobs(&self, p: &Prepared, subject: &str, config: &PipelineConfig, staging: &Path) -> Result<Vec<JobOutcome>, PipelineError> {
        let input_dir = staging.join("input");
        let runtime = Runtime::new(self.engine.clone(), config.parallel_jobs)?;
        let mut pending = Vec::new();
        let mut outcomes: Vec<Option<JobOutcome>> = Vec::new();
        for (idx, entry) in p.entries.iter().enumerate() {
            let out_dir = staging.join("jobs").join(&entry.id);
            create_dir(&out_dir)?;
            log::info!("pulling {}", entry.image_reference);
            match runtime.pull_image(&entry.image_reference) {
                Ok(()) => {}
                Err(RuntimeError::EngineUnreachable(m)) => return Err(PipelineError::EngineUnreachable(m)),
                Err(e) => {
                    outcomes.push(Some(JobOutcome {
                        entry: entry.clone(),
                        out_dir,
                        result: Err(format!("pull failed: {e}")),
                    }));
                    continue;
                }
            }
            let mut job = JobSpec::new(format!("{subject}-{}", entry.id), entry.image_reference.clone(), &input_dir, &out_dir)
                .with_env("SUBJECT_ID", subject)
                .with_timeout(entry.timeout_seconds);
            job.io_contract = entry.io_contract.clone();
            job.gpu = entry.requires_gpu;
            job.shm_bytes = entry.shm_bytes;
            pending.push((outcomes.len(), idx, job));
            outcomes.push(None);
        }
        let results: Vec<(usize, Result<JobResult, RuntimeError>)> = std::thread::scope(|s| {
            let handles: Vec<_> = pending
                .iter()
                .map(|(slot, _, job)| {
                    let rt = &runtime;
                    (*slot, s.spawn(move || rt.run_job(job)))
                })
                .collect();
            handles
                .into_iter()
                .map(|(slot, h)| {
                    let r = h
                        .join()
                        .unwrap_or_else(|_| Err(RuntimeError::Engine("job thread panicked".into())));
                    (slot, r)
                })
                .collect()
        });
        for ((slot, r), (_, idx, job)) in results.into_iter().zip(&pending) {
            let entry = p.entries[*idx].clone();
            let result = match r {
                Ok(r) => {
                    log::info!("{}: {}", entry.id, status_reason(&r));
                    Ok(r)
                }
                Err(RuntimeError::EngineUnreachable(m)) => return Err(PipelineError::EngineUnreachable(m)),
                Err(e) => Err(e.to_string()),
            };
            outcomes[slot] = Some(JobOutcome {
                entry,
                out_dir: job.output_mount.clone(),
                result,
            });
        }
        Ok(outcomes.into_iter().map(|o| o.expect("every slot filled")).collect())
    }

    fn reference_volume(inputs: &SubjectInputs, spec: &TaskSpec) -> Result<Volume, PipelineError> {
        let path = InputTag::MODALITIES
            .iter()
            .chain([InputTag::InpaintMask].iter())
            .find_map(|t| inputs.files.get(t).filter(|_| spec.required_inputs.contains(t)))
            .ok_or_else(|| PipelineError::InvalidConfig("no imaging input".into()))?;
        Ok(nifti::read_volume(path)?)
    }

    /// Picks `preferred` among the produced files, else the only NIfTI file.
    fn pick_output(r: &JobResult, preferred: &[String]) -> Result<String, String> {
        if let Some(p) = preferred.iter().find(|p| r.produced_files.contains(p)) {
            return Ok(p.clone());
        }
        let niftis: Vec<&String> = r.produced_files.iter().filter(|f| nifti::is_nifti_path(Path::new(f.as_str()))).collect();
        match niftis.as_slice() {
            [one] => Ok((*one).clone()),
            [] => Err("no NIfTI output produced".into()),
            many => Err(format!("{} NIfTI outputs and none named {}", many.len(), preferred.join(" or "))),
        }
    }

    fn load_candidate(o: &JobOutcome, subject: &str, grid: &GridSpec, spec: &TaskSpec) -> Result<SegmentationMask, String> {
        let r = o.result.as_ref().map_err(Clone::clone)?;
        if !r.succeeded() {
            return Err(status_reason(r));
        }
        let file = Self::pick_output(r, &[format!("{subject}.nii.gz"), format!("{subject}.nii")])?;
        let vol = nifti::read_volume(o.out_dir.join(&file)).map_err(|e| format!("unreadable output {file}: {e}"))?;
        let mask = SegmentationMask::from_volume(&vol, spec.spatial_space).map_err(|e| format!("output {file}: {e}"))?;
        if !mask.grid().same_geometry(grid, SPACING_TOLERANCE_MM, AFFINE_TOLERANCE) {
            return Err(format!("output {file} does not match the input grid"));
        }
        let allowed = spec.label_codes();
        let stray: Vec<u16> = mask.label_set().into_iter().filter(|c| *c != 0 && !allowed.contains(c)).collect();
        if !stray.is_empty() {
            return Err(format!("output {file} has labels {stray:?} outside the task label set"));
        }
        SegmentationMask::new(*grid, mask.into_labels()).map_err(|e| e.to_string())
    }

    fn base_manifest(&self, inputs: &SubjectInputs, p: &Prepared, staged: BTreeMap<String, InputRecord>) -> Manifest {
        let warnings = p
            .report
            .findings
            .iter()
            .filter(|f| f.severity == Severity::Warning)
            .map(|f| format!("{}: {}", f.code, f.message))
            .collect();
        Manifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            tool: ToolInfo {
                name: TOOL_NAME.into(),
                version: TOOL_VERSION.into(),
            },
            created_at: (self.clock)(),
            subject_id: inputs.subject_id.clone(),
            task_id: p.spec.task_id,
            kind: p.spec.kind,
            inputs: staged,
            algorithms: Vec::new(),
            fusion_method: None,
            synthesized_modality: None,
            warnings,
            files: BTreeMap::new(),
            digest: String::new(),
        }
    }

    fn record(o: &JobOutcome, included: bool, failure: Option<String>) -> AlgorithmRecord {
        let r = o.result.as_ref().ok();
        AlgorithmRecord {
            id: o.entry.id.clone(),
            image: o.entry.image_reference.name.clone(),
            digest: o.entry.image_reference.digest.clone(),
            status: r.map(|r| r.status),
            exit_code: r.and_then(|r| r.exit_code),
            duration_seconds: r.map(|r| r.duration_seconds),
            included,
            failure,
        }
    }

    fn write_logs(outcomes: &[JobOutcome], bundle: &Path) -> Result<(), PipelineError> {
        let dir = bundle.join("logs");
        create_dir(&dir)?;
        for o in outcomes {
            let text = match &o.result {
                Ok(r) => r.log_excerpt.clone(),
                Err(e) => e.clone(),
            };
            let path = dir.join(format!("{}.log", o.entry.id));
            fs::write(&path, text).map_err(PipelineError::io(&path))?;
        }
        Ok(())
    }

    /// Seals the manifest and moves the staged bundle into place.
    fn publish(&self, mut manifest: Manifest, staged: &Path, p: &Prepared, config: &PipelineConfig, staging: &Path) -> Result<Manifest, PipelineError> {
        manifest.files = Manifest::index_files(staged)?;
        manifest.seal();
        write_json(&staged.join(MANIFEST_FILE), &manifest)?;
        let parent = p.bundle_dir.parent().expect("bundle has a parent");
        create_dir(parent)?;
        if p.bundle_dir.exists() {
            if !is_empty_dir(&p.bundle_dir) && !config.force {
                return Err(PipelineError::OutputCollision(p.bundle_dir.clone()));
            }
            let old = staging.join("replaced");
            fs::rename(&p.bundle_dir, &old).map_err(PipelineError::io(&p.bundle_dir))?;
        }
        fs::rename(staged, &p.bundle_dir).map_err(PipelineError::io(&p.bundle_dir))?;
        log::info!("wrote bundle {}", p.bundle_dir.display());
        Ok(manifest)
    }

    fn staging_dir(config: &PipelineConfig) -> Result<tempfile::TempDir, PipelineError> {
        create_dir(&config.output_dir)?;
        tempfile::Builder::new()
            .prefix(".orch-staging-")
            .tempdir_in(&config.output_dir)
            .map_err(PipelineError::io(&config.output_dir))
    }

    /// Validate, run every selected algorithm, fuse the survivors and publish the bundle.
    pub fn run_inference(&self, inputs: &SubjectInputs, config: &PipelineConfig) -> Result<OutputBundle, PipelineError> {
        let p = self.prepare(inputs, config, TaskKind::Segmentation)?;
        let subject = inputs.subject_id.as_str();
        let staging = Self::staging_dir(config)?;
        let staged_inputs = Self::stage_inputs(inputs, &p.spec, &staging.path().join("input"))?;
        let grid = GridSpec::from_volume(&Self::reference_volume(inputs, &p.spec)?, p.spec.spatial_space);
        let outcomes = self.run_jobs(&p, subject, config, staging.path())?;

        let mut manifest = self.base_manifest(inputs, &p, staged_inputs);
        let mut candidates = Vec::new();
        let mut failures = Vec::new();
        for o in &outcomes {
            match Self::load_candidate(o, subject, &grid, &p.spec) {
                Ok(mask) => {
                    manifest.algorithms.push(Self::record(o, true, None));
                    candidates.push((o.entry.id.clone(), mask));
                }
                Err(reason) => {
                    log::warn!("algorithm {} failed: {reason}", o.entry.id);
                    manifest.algorithms.push(Self::record(o, false, Some(reason.clone())));
                    failures.push(JobFailure {
                        algorithm_id: o.entry.id.clone(),
                        reason,
                    });
                }
            }
        }
        if candidates.is_empty() {
            return Err(PipelineError::AllJobsFailed(failures));
        }
        for f in &failures {
            manifest.warnings.push(format!(
                "algorithm {} failed ({}); fused {} surviving candidate(s)",
                f.algorithm_id,
                f.reason,
                candidates.len()
            ));
        }

        let (consensus, summary) = if candidates.len() == 1 {
            let (id, mask) = &candidates[0];
            let summary = FusionSummary {
                method: IDENTITY_METHOD.into(),
                params: None,
                source_ids: vec![id.clone()],
                iterations_run: 0,
                per_label: BTreeMap::new(),
            };
            (mask.clone(), summary)
        } else {
            let set = CandidateSet::new(
                candidates.iter().map(|(_, m)| m.clone()).collect(),
                candidates.iter().map(|(id, _)| id.clone()).collect(),
                p.spec.labels.clone(),
            )?;
            log::info!("fusing {} candidates ({})", set.len(), config.fusion_method.as_str());
            let result = fuse(&set, config.fusion_method, &config.fusion_params)?;
            let params = (config.fusion_method == FusionMethod::Simple).then_some(&config.fusion_params);
            let summary = result.summary(params);
            (result.consensus, summary)
        };
        manifest.fusion_method = Some(summary.method.clone());

        let bundle = staging.path().join("bundle");
        create_dir(&bundle.join("candidates"))?;
        let mut per_algorithm = BTreeMap::new();
        for (id, mask) in &candidates {
            let rel = format!("candidates/{id}.nii.gz");
            write_mask(&bundle.join(&rel), mask)?;
            per_algorithm.insert(id.clone(), rel);
        }
        write_mask(&bundle.join(CONSENSUS_FILE), &consensus)?;
        write_json(&bundle.join(FUSION_FILE), &summary)?;

        let metrics = match &config.reference_mask {
            Some(path) => {
                let reference = SegmentationMask::from_volume(&nifti::read_volume(path)?, p.spec.spatial_space)
                    .map_err(|e| PipelineError::InvalidConfig(format!("reference mask {}: {e}", path.display())))?;
                #[derive(Serialize)]
                struct Metrics {
                    consensus: MetricReport,
                    candidates: BTreeMap<String, MetricReport>,
                }
                let m = Metrics {
                    consensus: evaluate(&reference, &consensus, &p.spec.labels, &config.metric_params)?,
                    candidates: candidates
                        .iter()
                        .map(|(id, c)| Ok((id.clone(), evaluate(&reference, c, &p.spec.labels, &config.metric_params)?)))
                        .collect::<Result<_, PipelineError>>()?,
                };
                write_json(&bundle.join(METRICS_FILE), &m)?;
                true
            }
            None => false,
        };

        let mut native_paths = BTreeMap::new();
        if let Some((fwd, native_grid)) = &p.native {
            create_dir(&bundle.join("native"))?;
            let rel = "native/consensus.nii.gz".to_string();
            write_mask(&bundle.join(&rel), &inverse_warp_to_native(&consensus, fwd, native_grid)?)?;
            native_paths.insert("consensus".to_string(), rel);
        } else if config.native_space_output {
            manifest.warnings.push(format!("{} already works in native space; no native/ outputs", p.spec.task_id));
        }
        if config.keep_intermediate {
            Self::write_logs(&outcomes, &bundle)?;
        }

        let manifest = self.publish(manifest, &bundle, &p, config, staging.path())?;
        let root = p.bundle_dir.clone();
        Ok(OutputBundle {
            consensus_path: root.join(CONSENSUS_FILE),
            per_algorithm_paths: per_algorithm.into_iter().map(|(k, v)| (k, root.join(v))).collect(),
            fusion_metadata_path: Some(root.join(FUSION_FILE)),
            metrics_path: metrics.then(|| root.join(METRICS_FILE)),
            native_space_paths: native_paths.into_iter().map(|(k, v)| (k, root.join(v))).collect(),
            manifest_path: root.join(MANIFEST_FILE),
            manifest,
            root,
        })
    }

    /// Single-algorithm image synthesis; the bundle holds `synthesized-<token>.nii.gz`.
    pub fn run_synthesis(&self, inputs: &SubjectInputs, config: &PipelineConfig) -> Result<OutputBundle, PipelineError> {
        let p = self.prepare(inputs, config, TaskKind::Synthesis)?;
        let subject = inputs.subject_id.as_str();
        let target = p
            .spec
            .synthesized_output(&inputs.present())
            .ok_or_else(|| PipelineError::InvalidConfig("inputs do not determine the synthesized image".into()))?;
        let staging = Self::staging_dir(config)?;
        let staged_inputs = Self::stage_inputs(inputs, &p.spec, &staging.path().join("input"))?;
        let grid = GridSpec::from_volume(&Self::reference_volume(inputs, &p.spec)?, p.spec.spatial_space);
        let outcomes = self.run_jobs(&p, subject, config, staging.path())?;
        let o = &outcomes[0];

        let mut manifest = self.base_manifest(inputs, &p, staged_inputs);
        manifest.synthesized_modality = Some(target);
        let token = target.file_token();
        let loaded = o.result.clone().and_then(|r| {
            if !r.succeeded() {
                return Err(status_reason(&r));
            }
            let file = Self::pick_output(&r, &[format!("{subject}-{token}.nii.gz"), format!("{subject}-{token}.nii")])?;
            let vol = nifti::read_volume(o.out_dir.join(&file)).map_err(|e| format!("unreadable output {file}: {e}"))?;
            if !GridSpec::from_volume(&vol, p.spec.spatial_space).same_geometry(&grid, SPACING_TOLERANCE_MM, AFFINE_TOLERANCE) {
                return Err(format!("output {file} does not match the input grid"));
            }
            Ok(vol)
        });
        let vol = match loaded {
            Ok(v) => v,
            Err(reason) => {
                return Err(PipelineError::AllJobsFailed(vec![JobFailure {
                    algorithm_id: o.entry.id.clone(),
                    reason,
                }]))
            }
        };
        manifest.algorithms.push(Self::record(o, true, None));
        if config.reference_mask.is_some() {
            manifest.warnings.push("reference mask ignored: synthesis produces an image".into());
        }

        let bundle = staging.path().join("bundle");
        create_dir(&bundle)?;
        let name = format!("synthesized-{token}.nii.gz");
        nifti::write_volume(&vol, bundle.join(&name), true)?;
        let mut native_paths = BTreeMap::new();
        if let Some((fwd, native_grid)) = &p.native {
            create_dir(&bundle.join("native"))?;
            let rel = format!("native/{name}");
            let warped = inverse_warp_image_to_native(&vol, p.spec.spatial_space, fwd, native_grid)?;
            nifti::write_volume(&warped, bundle.join(&rel), true)?;
            native_paths.insert(format!("synthesized-{token}"), rel);
        }
        if config.keep_intermediate {
            Self::write_logs(&outcomes, &bundle)?;
        }

        let manifest = self.publish(manifest, &bundle, &p, config, staging.path())?;
        let root = p.bundle_dir.clone();
        Ok(OutputBundle {
            consensus_path: root.join(&name),
            per_algorithm_paths: BTreeMap::from([(o.entry.id.clone(), root.join(&name))]),
            fusion_metadata_path: None,
            metrics_path: None,
            native_space_paths: native_paths.into_iter().map(|(k, v)| (k, root.join(v))).collect(),
            manifest_path: root.join(MANIFEST_FILE),
            manifest,
            root,
        })
    }
}
