use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::codes::{CC, ED, ET, GTV, NETC, RC, SNFH};
use super::{InputTag, Label, Preprocessing, RegistryError, TaskId};
use crate::geometry::Space;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Segmentation,
    Synthesis,
}

/// Which inputs satisfy a task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputRule {
    /// Every listed input is required.
    AllOf(Vec<InputTag>),
    /// Exactly `count` of the listed inputs must be present.
    ExactlyOf { count: usize, of: Vec<InputTag> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: TaskId,
    pub years: BTreeSet<u16>,
    /// Inputs the task reads, in canonical order.
    pub required_inputs: Vec<InputTag>,
    pub input_rule: InputRule,
    pub preprocessing: Vec<Preprocessing>,
    pub spatial_space: Space,
    pub labels: Vec<Label>,
    pub kind: TaskKind,
}

impl TaskSpec {
    pub fn label_codes(&self) -> BTreeSet<u16> {
        self.labels.iter().map(|l| l.code).collect()
    }

    pub fn label_by_code(&self, code: u16) -> Option<Label> {
        self.labels.iter().copied().find(|l| l.code == code)
    }

    pub fn is_atlas_space(&self) -> bool {
        self.spatial_space.is_atlas()
    }

    /// The image a synthesis task produces, given the inputs supplied.
    /// `None` for segmentation tasks, or when the inputs do not determine it.
    pub fn synthesized_output(&self, present: &BTreeSet<InputTag>) -> Option<InputTag> {
        match self.task_id {
            TaskId::Inpaint => Some(InputTag::T1n),
            TaskId::MissingMri => {
                let missing: Vec<_> = InputTag::MODALITIES.into_iter().filter(|m| !present.contains(m)).collect();
                (missing.len() == 1).then(|| missing[0])
            }
            _ => None,
        }
    }
}

/// Standard grid of atlas-space releases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AtlasGrid {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
}

pub fn atlas_grid(space: Space) -> Option<AtlasGrid> {
    match space {
        Space::Sri24 | Space::Mni152 => Some(AtlasGrid {
            shape: [240, 240, 155],
            spacing: [1.0, 1.0, 1.0],
        }),
        Space::Native => None,
    }
}

const MPMRI: [InputTag; 4] = InputTag::MODALITIES;

fn atlas_prep() -> Vec<Preprocessing> {
    vec![
        Preprocessing::CoRegistration,
        Preprocessing::SkullStripping,
        Preprocessing::AtlasRegistration,
    ]
}

fn seg(task_id: TaskId, years: &[u16], prep: Vec<Preprocessing>, space: Space, labels: Vec<Label>) -> TaskSpec {
    TaskSpec {
        task_id,
        years: years.iter().copied().collect(),
        required_inputs: MPMRI.to_vec(),
        input_rule: InputRule::AllOf(MPMRI.to_vec()),
        preprocessing: prep,
        spatial_space: space,
        labels,
        kind: TaskKind::Segmentation,
    }
}

/// The constant definition of `task_id`.
pub fn task_spec(task_id: TaskId) -> TaskSpec {
    let std_labels = || vec![ET, NETC, SNFH];
    match task_id {
        TaskId::GliPre => seg(task_id, &[2023], atlas_prep(), Space::Sri24, std_labels()),
        TaskId::GliPost => seg(task_id, &[2024], atlas_prep(), Space::Mni152, vec![ET, NETC, SNFH, RC]),
        TaskId::Ssa => seg(task_id, &[2023, 2024], atlas_prep(), Space::Sri24, std_labels()),
        TaskId::MenPre => seg(task_id, &[2023], atlas_prep(), Space::Sri24, std_labels()),
        TaskId::Mets => seg(task_id, &[2023], atlas_prep(), Space::Sri24, std_labels()),
        TaskId::Ped => seg(
            task_id,
            &[2023, 2024],
            vec![Preprocessing::CoRegistration, Preprocessing::Defacing],
            Space::Native,
            vec![ET, NETC, CC, ED],
        ),
        TaskId::Goat => seg(task_id, &[2024], atlas_prep(), Space::Sri24, std_labels()),
        TaskId::MenRt => TaskSpec {
            task_id,
            years: [2024].into_iter().collect(),
            required_inputs: vec![InputTag::T1c],
            input_rule: InputRule::AllOf(vec![InputTag::T1c]),
            preprocessing: vec![Preprocessing::Defacing],
            spatial_space: Space::Native,
            labels: vec![GTV],
            kind: TaskKind::Segmentation,
        },
        TaskId::Inpaint => TaskSpec {
            task_id,
            years: [2023, 2024].into_iter().collect(),
            required_inputs: vec![InputTag::T1n, InputTag::InpaintMask],
            input_rule: InputRule::AllOf(vec![InputTag::T1n, InputTag::InpaintMask]),
            preprocessing: atlas_prep(),
            spatial_space: Space::Sri24,
            labels: vec![],
            kind: TaskKind::Synthesis,
        },
        TaskId::MissingMri => TaskSpec {
            task_id,
            years: [2023, 2024].into_iter().collect(),
            required_inputs: MPMRI.to_vec(),
            input_rule: InputRule::ExactlyOf {
                count: 3,
                of: MPMRI.to_vec(),
            },
            preprocessing: atlas_prep(),
            spatial_space: Space::Sri24,
            labels: vec![],
            kind: TaskKind::Synthesis,
        },
    }
}

/// Looks up a task by any accepted spelling of its identifier.
pub fn get_task_spec(task_id: &str) -> Result<TaskSpec, RegistryError> {
    Ok(task_spec(task_id.parse()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gli_post_row() {
        let s = get_task_spec("GLI_POST").unwrap();
        assert_eq!(s.required_inputs, MPMRI.to_vec());
        assert_eq!(s.spatial_space, Space::Mni152);
        assert_eq!(s.labels, vec![ET, NETC, SNFH, RC]);
    }

    #[test]
    fn men_rt_row() {
        let s = get_task_spec("MEN_RT").unwrap();
        assert_eq!(s.required_inputs, vec![InputTag::T1c]);
        assert_eq!(s.preprocessing, vec![Preprocessing::Defacing]);
        assert_eq!(s.spatial_space, Space::Native);
        assert_eq!(s.labels, vec![GTV]);
    }

    #[test]
    fn unknown_task() {
        assert!(matches!(get_task_spec("GLI-2019"), Err(RegistryError::UnknownTask(_))));
    }

    #[test]
    fn repeated_lookups_agree() {
        for t in TaskId::ALL {
            assert_eq!(task_spec(t), task_spec(t));
        }
    }

    #[test]
    fn label_codes_unique_within_task() {
        for t in TaskId::ALL {
            let s = task_spec(t);
            assert_eq!(s.label_codes().len(), s.labels.len(), "{t}");
            assert!(!s.label_codes().contains(&0));
        }
    }

    #[test]
    fn synthesized_modality_is_complement() {
        let s = task_spec(TaskId::MissingMri);
        let present: BTreeSet<_> = [InputTag::T1c, InputTag::T1n, InputTag::T2w].into_iter().collect();
        assert_eq!(s.synthesized_output(&present), Some(InputTag::Fla));
        let all: BTreeSet<_> = MPMRI.into_iter().collect();
        assert_eq!(s.synthesized_output(&all), None);
        assert_eq!(task_spec(TaskId::Inpaint).synthesized_output(&BTreeSet::new()), Some(InputTag::T1n));
    }
}
