#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use orch_core::geometry::Space;
use orch_core::nifti::{self, Volume};
use orch_core::registry::{task_spec, AlgorithmEntry, Catalog, InputTag, TaskId};
use orch_core::testkit::{golden_grid, write_golden_subject};
use orch_core::validation::SubjectInputs;
use orch_pipeline::{manifest::relative_files, Pipeline};
use orch_runtime::mock::ThresholdLevel;
use orch_runtime::{BehaviorTable, Generator, ImageBehavior, MockEngine, OutputSpec};

pub const SUBJECT: &str = "BraTS-GLI-00001-000";
pub const FIXED_TIME: &str = "2000-01-01T00:00:00Z";

pub type Levels = [(f64, u16); 3];

/// Catalog id, input token and `(above, label)` levels of each stub.
pub const STUBS: [(&str, &str, Levels); 3] = [
    ("gli-pre-2023-1", "t1c", [(230.0, 2), (260.0, 1), (290.0, 3)]),
    ("gli-pre-2023-2", "t2w", [(225.0, 2), (255.0, 1), (285.0, 3)]),
    ("gli-pre-2023-3", "fla", [(235.0, 2), (265.0, 1), (295.0, 3)]),
];

pub fn entry(id: &str) -> AlgorithmEntry {
    Catalog::embedded().get(id).cloned().expect("catalog id")
}

pub fn with_digest(e: &AlgorithmEntry, b: ImageBehavior) -> ImageBehavior {
    ImageBehavior {
        digest: e.image_reference.digest.clone(),
        ..b
    }
}

pub fn threshold_stub(id: &str, input: &str, levels: &Levels) -> ImageBehavior {
    let e = entry(id);
    with_digest(
        &e,
        ImageBehavior::succeed_with(vec![OutputSpec {
            path: "{subject}.nii.gz".into(),
            generator: Generator::Threshold {
                input: input.into(),
                levels: levels.iter().map(|&(above, label)| ThresholdLevel { above, label }).collect(),
            },
        }]),
    )
}

pub fn failing_stub(id: &str) -> ImageBehavior {
    with_digest(
        &entry(id),
        ImageBehavior {
            exit_code: 137,
            stderr: "RuntimeError: CUDA out of memory\n".into(),
            ..Default::default()
        },
    )
}

/// The three stubs; ids in `fail` exit nonzero instead.
pub fn gli_table(fail: &[&str]) -> BehaviorTable {
    let mut t = BehaviorTable::default();
    for (id, input, levels) in &STUBS {
        let b = if fail.contains(id) { failing_stub(id) } else { threshold_stub(id, input, levels) };
        t = t.with_image(entry(id).image_reference.name, b);
    }
    t
}

pub fn write_gli_subject(dir: &Path) -> SubjectInputs {
    write_golden_subject(dir, SUBJECT, &task_spec(TaskId::GliPre), &golden_grid(Space::Sri24))
}

pub fn pipeline(engine: Arc<MockEngine>) -> Pipeline {
    Pipeline::new(Catalog::embedded(), engine).with_clock(|| FIXED_TIME.to_string())
}

pub fn stub_ids() -> Vec<&'static str> {
    STUBS.iter().map(|s| s.0).collect()
}

/// Label of the highest level strictly exceeded.
pub fn oracle_threshold(vol: &Volume, levels: &Levels) -> Vec<u16> {
    vol.data()
        .to_f64()
        .into_iter()
        .map(|v| {
            let mut label = 0;
            let mut best = f64::NEG_INFINITY;
            for &(above, l) in levels {
                if v > above && above > best {
                    best = above;
                    label = l;
                }
            }
            label
        })
        .collect()
}

/// Per-code strict majority, ties between winning codes broken by `priority` order.
pub fn oracle_majority(cands: &[Vec<u16>], priority: &[u16]) -> Vec<u16> {
    let n = cands[0].len();
    (0..n)
        .map(|i| {
            priority
                .iter()
                .copied()
                .find(|&code| 2 * cands.iter().filter(|c| c[i] == code).count() > cands.len())
                .unwrap_or(0)
        })
        .collect()
}

/// GLI_PRE codes from most to least specific: ET, NETC, SNFH.
pub const GLI_PRIORITY: [u16; 3] = [3, 1, 2];

pub fn stub_oracle(inputs: &SubjectInputs, which: &[&str]) -> Vec<Vec<u16>> {
    STUBS
        .iter()
        .filter(|s| which.contains(&s.0))
        .map(|(_, token, levels)| {
            let tag = InputTag::from_token(token).unwrap();
            oracle_threshold(&nifti::read_volume(&inputs.files[&tag]).unwrap(), levels)
        })
        .collect()
}

pub fn read_labels(path: &Path) -> Vec<u16> {
    nifti::read_volume(path).unwrap().data().to_f64().into_iter().map(|v| v as u16).collect()
}

/// Relative path to contents for every file under `root`.
pub fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    if !root.exists() {
        return BTreeMap::new();
    }
    relative_files(root)
        .unwrap()
        .into_iter()
        .map(|r| {
            let bytes = std::fs::read(root.join(&r)).unwrap();
            (r, bytes)
        })
        .collect()
}
