//! Scripted in-process engine.
//!
//! Containers never run. Each image maps to an [`ImageBehavior`] whose outputs are
//! produced from the mounted input directory when the container is waited on.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Mutex, MutexGuard};
use std::time::Duration;

use orch_core::nifti::{self, VoxelData};
use orch_core::registry::{ImageReference, InputTag};
use orch_core::validation::SubjectInputs;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::{BackendKind, ContainerConfig, ContainerEngine, WaitOutcome, OWNER_LABEL};
use crate::RuntimeError;

fn default_true() -> bool {
    true
}

fn default_repeat() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviorTable {
    #[serde(default = "default_true")]
    pub gpu: bool,
    #[serde(default)]
    pub images: BTreeMap<String, ImageBehavior>,
}

impl Default for BehaviorTable {
    fn default() -> Self {
        BehaviorTable {
            gpu: true,
            images: BTreeMap::new(),
        }
    }
}

impl BehaviorTable {
    pub fn from_json(text: &str) -> Result<Self, RuntimeError> {
        serde_json::from_str(text).map_err(|e| RuntimeError::InvalidJob(format!("behavior table: {e}")))
    }

    /// Loads a table; relative `file` generator sources resolve against its directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, RuntimeError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| RuntimeError::Io(format!("{}: {e}", path.display())))?;
        let mut table = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for b in table.images.values_mut() {
            for o in &mut b.outputs {
                if let Generator::File { source } = &mut o.generator {
                    if source.is_relative() {
                        *source = base.join(&*source);
                    }
                }
            }
        }
        Ok(table)
    }

    pub fn with_image(mut self, name: impl Into<String>, behavior: ImageBehavior) -> Self {
        self.images.insert(name.into(), behavior);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PanicPoint {
    Create,
    Start,
    Wait,
    Logs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageBehavior {
    /// Defaults to `sha256:` + hash of the image name.
    #[serde(default)]
    pub digest: Option<String>,
    #[serde(default)]
    pub exit_code: i64,
    /// Virtual run time compared against the job timeout.
    #[serde(default)]
    pub sleep_s: f64,
    /// Real time spent inside `wait`.
    #[serde(default)]
    pub wall_ms: u64,
    #[serde(default)]
    pub stdout: String,
    #[serde(default)]
    pub stderr: String,
    /// Times `stdout` is repeated in the log stream.
    #[serde(default = "default_repeat")]
    pub log_repeat: usize,
    #[serde(default)]
    pub outputs: Vec<OutputSpec>,
    #[serde(default)]
    pub panic_at: Option<PanicPoint>,
}

impl Default for ImageBehavior {
    fn default() -> Self {
        ImageBehavior {
            digest: None,
            exit_code: 0,
            sleep_s: 0.0,
            wall_ms: 0,
            stdout: String::new(),
            stderr: String::new(),
            log_repeat: 1,
            outputs: Vec::new(),
            panic_at: None,
        }
    }
}

impl ImageBehavior {
    pub fn succeed_with(outputs: Vec<OutputSpec>) -> Self {
        ImageBehavior {
            outputs,
            ..Default::default()
        }
    }
}

/// One file written under the output mount. `path` may contain `{subject}` and `{missing}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub path: String,
    pub generator: Generator,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdLevel {
    pub above: f64,
    pub label: u16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Generator {
    /// Copy a host file.
    File { source: PathBuf },
    /// Copy `<subject>-<input>.nii[.gz]` from the input mount.
    CopyInput { input: String },
    /// Label map of one input: each voxel gets the label of the highest level it exceeds.
    Threshold { input: String, levels: Vec<ThresholdLevel> },
    /// `image` with voxels inside `mask` replaced by the mean of the whole image.
    MeanFill { image: String, mask: String },
    /// Voxelwise mean of the modalities present.
    SynthesizeMissing,
    Text { content: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MockEvent {
    Pull(String),
    Create { id: String, image: String },
    Start(String),
    Stop(String),
    Remove(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Created,
    Running,
    Exited(i64),
}

#[derive(Debug, Clone)]
struct MockContainer {
    config: ContainerConfig,
    behavior: ImageBehavior,
    phase: Phase,
    logs: Vec<u8>,
}

#[derive(Debug, Default)]
struct State {
    pulled: BTreeSet<String>,
    containers: BTreeMap<String, MockContainer>,
    next_id: u64,
    high_water: usize,
    started: usize,
    events: Vec<MockEvent>,
}

#[derive(Debug)]
pub struct MockEngine {
    table: BehaviorTable,
    reachable: AtomicBool,
    state: Mutex<State>,
}

impl MockEngine {
    pub fn new(table: BehaviorTable) -> Self {
        MockEngine {
            table,
            reachable: AtomicBool::new(true),
            state: Mutex::new(State::default()),
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, RuntimeError> {
        Ok(Self::new(BehaviorTable::from_file(path)?))
    }

    pub fn table(&self) -> &BehaviorTable {
        &self.table
    }

    pub fn set_reachable(&self, reachable: bool) {
        self.reachable.store(reachable, Ordering::SeqCst);
    }

    /// Digest the mock reports for a registered image.
    pub fn digest_of(&self, name: &str) -> Option<String> {
        let b = self.table.images.get(name)?;
        Some(b.digest.clone().unwrap_or_else(|| format!("sha256:{}", hex::encode(Sha256::digest(name.as_bytes())))))
    }

    pub fn events(&self) -> Vec<MockEvent> {
        self.lock().events.clone()
    }

    pub fn live_containers(&self) -> usize {
        self.lock().containers.len()
    }

    /// Most containers alive at once since construction.
    pub fn high_water_mark(&self) -> usize {
        self.lock().high_water
    }

    pub fn containers_started(&self) -> usize {
        self.lock().started
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        // injected panics never hold the lock, but stay usable regardless
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn check_reachable(&self) -> Result<(), RuntimeError> {
        if self.reachable.load(Ordering::SeqCst) {
            Ok(())
        } else {
            Err(RuntimeError::EngineUnreachable("mock engine switched off".into()))
        }
    }

    fn container(&self, id: &str) -> Result<MockContainer, RuntimeError> {
        self.lock()
            .containers
            .get(id)
            .cloned()
            .ok_or_else(|| RuntimeError::Engine(format!("no such container: {id}")))
    }

    fn set_phase(&self, id: &str, phase: Phase) {
        if let Some(c) = self.lock().containers.get_mut(id) {
            c.phase = phase;
        }
    }
}

fn maybe_panic(b: &ImageBehavior, at: PanicPoint) {
    if b.panic_at == Some(at) {
        panic!("mock engine: injected panic at {at:?}");
    }
}

impl ContainerEngine for MockEngine {
    fn kind(&self) -> BackendKind {
        BackendKind::Mock
    }

    fn ping(&self) -> Result<(), RuntimeError> {
        self.check_reachable()
    }

    fn image_digests(&self, image: &ImageReference) -> Result<Option<Vec<String>>, RuntimeError> {
        self.check_reachable()?;
        if !self.lock().pulled.contains(&image.name) {
            return Ok(None);
        }
        Ok(self.digest_of(&image.name).map(|d| vec![d]))
    }

    fn pull(&self, image: &ImageReference) -> Result<(), RuntimeError> {
        self.check_reachable()?;
        if !self.table.images.contains_key(&image.name) {
            return Err(RuntimeError::ImageNotFound(image.name.clone()));
        }
        let mut st = self.lock();
        st.pulled.insert(image.name.clone());
        st.events.push(MockEvent::Pull(image.name.clone()));
        Ok(())
    }

    fn create(&self, config: &ContainerConfig) -> Result<String, RuntimeError> {
        self.check_reachable()?;
        let behavior = self
            .table
            .images
            .get(&config.image.name)
            .cloned()
            .ok_or_else(|| RuntimeError::ImageNotFound(config.image.name.clone()))?;
        for m in &config.mounts {
            if !m.host.is_dir() {
                return Err(RuntimeError::MountFailure(format!("{} does not exist", m.host.display())));
            }
        }
        maybe_panic(&behavior, PanicPoint::Create);
        let mut st = self.lock();
        if !st.pulled.contains(&config.image.name) {
            return Err(RuntimeError::ImageNotFound(format!("{} is not pulled", config.image.name)));
        }
        st.next_id += 1;
        let id = format!("mock-{:06}", st.next_id);
        let mut logs = behavior.stdout.repeat(behavior.log_repeat).into_bytes();
        logs.extend_from_slice(behavior.stderr.as_bytes());
        st.containers.insert(
            id.clone(),
            MockContainer {
                config: config.clone(),
                behavior,
                phase: Phase::Created,
                logs,
            },
        );
        st.high_water = st.high_water.max(st.containers.len());
        st.events.push(MockEvent::Create {
            id: id.clone(),
            image: config.image.name.clone(),
        });
        Ok(id)
    }

    fn start(&self, id: &str) -> Result<(), RuntimeError> {
        self.check_reachable()?;
        let c = self.container(id)?;
        maybe_panic(&c.behavior, PanicPoint::Start);
        if c.phase != Phase::Created {
            return Err(RuntimeError::Engine(format!("container {id} already started")));
        }
        self.set_phase(id, Phase::Running);
        let mut st = self.lock();
        st.started += 1;
        st.events.push(MockEvent::Start(id.to_string()));
        Ok(())
    }

    fn wait(&self, id: &str, timeout: Duration) -> Result<WaitOutcome, RuntimeError> {
        self.check_reachable()?;
        let c = self.container(id)?;
        match c.phase {
            Phase::Created => return Err(RuntimeError::Engine(format!("container {id} not started"))),
            Phase::Exited(code) => return Ok(WaitOutcome::Exited { code, elapsed: None }),
            Phase::Running => {}
        }
        let b = &c.behavior;
        let wall = Duration::from_millis(b.wall_ms);
        if b.sleep_s > timeout.as_secs_f64() {
            std::thread::sleep(wall.min(timeout));
            return Ok(WaitOutcome::TimedOut { elapsed: Some(timeout) });
        }
        std::thread::sleep(wall);
        maybe_panic(b, PanicPoint::Wait);
        let code = match write_outputs(b, &c.config) {
            Ok(()) => b.exit_code,
            Err(msg) => {
                if let Some(c) = self.lock().containers.get_mut(id) {
                    c.logs.extend_from_slice(format!("mock generator failed: {msg}\n").as_bytes());
                }
                1
            }
        };
        self.set_phase(id, Phase::Exited(code));
        Ok(WaitOutcome::Exited {
            code,
            elapsed: Some(Duration::from_secs_f64(b.sleep_s.max(0.0))),
        })
    }

    fn stop(&self, id: &str) -> Result<(), RuntimeError> {
        self.check_reachable()?;
        let c = self.container(id)?;
        if c.phase == Phase::Running {
            self.set_phase(id, Phase::Exited(137));
        }
        self.lock().events.push(MockEvent::Stop(id.to_string()));
        Ok(())
    }

    fn logs(&self, id: &str) -> Result<Vec<u8>, RuntimeError> {
        self.check_reachable()?;
        let c = self.container(id)?;
        maybe_panic(&c.behavior, PanicPoint::Logs);
        Ok(c.logs)
    }

    fn remove(&self, id: &str) -> Result<(), RuntimeError> {
        self.check_reachable()?;
        let mut st = self.lock();
        if st.containers.remove(id).is_some() {
            st.events.push(MockEvent::Remove(id.to_string()));
        }
        Ok(())
    }

    fn list_owned(&self, owner: &str) -> Result<Vec<String>, RuntimeError> {
        self.check_reachable()?;
        Ok(self
            .lock()
            .containers
            .iter()
            .filter(|(_, c)| c.config.labels.get(OWNER_LABEL).map(String::as_str) == Some(owner))
            .map(|(id, _)| id.clone())
            .collect())
    }

    fn supports_gpu(&self) -> Result<bool, RuntimeError> {
        self.check_reachable()?;
        Ok(self.table.gpu)
    }
}

struct IoDirs<'a> {
    input: &'a Path,
    output: &'a Path,
    subject: String,
}

fn io_dirs(config: &ContainerConfig) -> Result<IoDirs<'_>, String> {
    let input = config.mounts.iter().find(|m| m.read_only).ok_or("no read-only input mount")?;
    let output = config.mounts.iter().find(|m| !m.read_only).ok_or("no writable output mount")?;
    let subject = match config.env.get("SUBJECT_ID") {
        Some(s) => s.clone(),
        None => SubjectInputs::discover(&input.host, None).map_err(|e| e.to_string())?.subject_id,
    };
    Ok(IoDirs {
        input: &input.host,
        output: &output.host,
        subject,
    })
}

impl IoDirs<'_> {
    fn inputs(&self) -> Result<SubjectInputs, String> {
        SubjectInputs::discover(self.input, Some(&self.subject)).map_err(|e| e.to_string())
    }

    fn input_path(&self, token: &str) -> Result<PathBuf, String> {
        let tag = InputTag::from_token(token).ok_or_else(|| format!("unknown input token {token}"))?;
        self.inputs()?
            .files
            .get(&tag)
            .cloned()
            .ok_or_else(|| format!("input {token} not mounted for {}", self.subject))
    }

    fn missing_modalities(&self) -> Result<Vec<InputTag>, String> {
        let present = self.inputs()?.files;
        Ok(InputTag::MODALITIES.into_iter().filter(|t| !present.contains_key(t)).collect())
    }

    fn render(&self, template: &str) -> Result<String, String> {
        let mut out = template.replace("{subject}", &self.subject);
        if out.contains("{missing}") {
            let missing = self.missing_modalities()?;
            let [one] = missing.as_slice() else {
                return Err(format!("{{missing}} needs exactly one absent modality, found {}", missing.len()));
            };
            out = out.replace("{missing}", one.file_token());
        }
        Ok(out)
    }
}

fn write_outputs(b: &ImageBehavior, config: &ContainerConfig) -> Result<(), String> {
    let dirs = io_dirs(config)?;
    for o in &b.outputs {
        let rel = dirs.render(&o.path)?;
        if Path::new(&rel).is_absolute() || rel.split('/').any(|p| p == "..") {
            return Err(format!("output path {rel} escapes the output mount"));
        }
        let bytes = generate(&o.generator, &dirs)?;
        let dest = dirs.output.join(&rel);
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent).map_err(|e| e.to_string())?;
        }
        fs::write(&dest, bytes).map_err(|e| format!("{}: {e}", dest.display()))?;
    }
    Ok(())
}

fn read_input(dirs: &IoDirs<'_>, token: &str) -> Result<nifti::Volume, String> {
    nifti::read_volume(dirs.input_path(token)?).map_err(|e| e.to_string())
}

fn encode(vol: &nifti::Volume) -> Result<Vec<u8>, String> {
    nifti::encode_volume(vol, true).map_err(|e| e.to_string())
}

fn generate(g: &Generator, dirs: &IoDirs<'_>) -> Result<Vec<u8>, String> {
    match g {
        Generator::File { source } => fs::read(source).map_err(|e| format!("{}: {e}", source.display())),
        Generator::CopyInput { input } => {
            let p = dirs.input_path(input)?;
            fs::read(&p).map_err(|e| format!("{}: {e}", p.display()))
        }
        Generator::Threshold { input, levels } => {
            let vol = read_input(dirs, input)?;
            let mut levels = levels.clone();
            levels.sort_by(|a, b| a.above.total_cmp(&b.above));
            let labels: Vec<u8> = vol
                .data()
                .to_f64()
                .into_iter()
                .map(|v| levels.iter().rev().find(|l| v > l.above).map_or(0, |l| l.label))
                .map(|l| u8::try_from(l).map_err(|_| format!("label {l} does not fit uint8")))
                .collect::<Result<_, _>>()?;
            encode(&vol.with_data(VoxelData::UInt8(labels)).map_err(|e| e.to_string())?)
        }
        Generator::MeanFill { image, mask } => {
            let vol = read_input(dirs, image)?;
            let m = read_input(dirs, mask)?;
            if m.shape() != vol.shape() {
                return Err("mask and image shapes differ".into());
            }
            let values = vol.data().to_f64();
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let filled: Vec<f32> = values
                .iter()
                .zip(m.data().to_f64())
                .map(|(&v, k)| if k != 0.0 { mean as f32 } else { v as f32 })
                .collect();
            encode(&vol.with_data(VoxelData::Float32(filled)).map_err(|e| e.to_string())?)
        }
        Generator::SynthesizeMissing => {
            let present = dirs.inputs()?.files;
            let vols: Vec<nifti::Volume> = InputTag::MODALITIES
                .iter()
                .filter_map(|t| present.get(t))
                .map(|p| nifti::read_volume(p).map_err(|e| e.to_string()))
                .collect::<Result<_, _>>()?;
            let first = vols.first().ok_or("no modalities to synthesize from")?;
            let n = first.voxel_count();
            let mut acc = vec![0.0f64; n];
            for v in &vols {
                if v.shape() != first.shape() {
                    return Err("modalities differ in shape".into());
                }
                for (a, x) in acc.iter_mut().zip(v.data().to_f64()) {
                    *a += x;
                }
            }
            let k = vols.len() as f64;
            let out: Vec<f32> = acc.into_iter().map(|a| (a / k) as f32).collect();
            encode(&first.with_data(VoxelData::Float32(out)).map_err(|e| e.to_string())?)
        }
        Generator::Text { content } => Ok(content.clone().into_bytes()),
    }
}
