//! Deterministic fixtures shared by the test suites: small co-registered
//! subjects, concentric-shell tumor masks and random blob masks.

use std::path::Path;

use nalgebra::Matrix4;
use rand::Rng;

use crate::geometry::{GridSpec, Space};
use crate::mask::SegmentationMask;
use crate::nifti::{self, Volume, VoxelData};
use crate::registry::{InputRule, InputTag, TaskSpec};
use crate::validation::SubjectInputs;

pub const GOLDEN_SHAPE: [usize; 3] = [20, 18, 14];

/// Unit-spaced grid of `shape` centered on the world origin.
pub fn centered_grid(shape: [usize; 3], space: Space) -> GridSpec {
    let mut affine = Matrix4::identity();
    for a in 0..3 {
        affine[(a, 3)] = -((shape[a] / 2) as f64);
    }
    GridSpec::new(shape, [1.0; 3], affine, space)
}

pub fn golden_grid(space: Space) -> GridSpec {
    centered_grid(GOLDEN_SHAPE, space)
}

/// Smooth positive float32 image; `seed` shifts the pattern per modality.
pub fn golden_image(grid: &GridSpec, seed: u32) -> Volume {
    let [nx, ny, nz] = grid.shape;
    let s = seed as f64;
    let mut data = Vec::with_capacity(grid.voxel_count());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let v = 200.0
                    + 60.0 * ((x as f64 + s) * 0.37).sin()
                    + 40.0 * ((y as f64 - s) * 0.29).cos()
                    + 25.0 * ((z as f64) * 0.51 + s).sin();
                data.push(v as f32);
            }
        }
    }
    Volume::new(VoxelData::Float32(data), grid.shape, grid.spacing, grid.affine).expect("valid grid")
}

/// Concentric shells around `center` (voxel coordinates). `codes[0]` fills
/// the core, later codes the successive shells out to `radius` voxels.
pub fn tumor_mask(grid: &GridSpec, codes: &[u16], center: [f64; 3], radius: f64) -> SegmentationMask {
    let [nx, ny, nz] = grid.shape;
    let mut labels = vec![0u16; grid.voxel_count()];
    let mut i = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let d = ((x as f64 - center[0]).powi(2) + (y as f64 - center[1]).powi(2) + (z as f64 - center[2]).powi(2)).sqrt();
                if d <= radius && !codes.is_empty() {
                    let shell = ((d / radius) * codes.len() as f64).floor() as usize;
                    labels[i] = codes[shell.min(codes.len() - 1)];
                }
                i += 1;
            }
        }
    }
    SegmentationMask::new(*grid, labels).expect("sized from grid")
}

/// Union of `blobs` random ellipsoids, each labeled with a random code from
/// `codes`; later blobs overwrite earlier ones.
pub fn random_blob_mask(grid: &GridSpec, codes: &[u16], blobs: usize, rng: &mut impl Rng) -> SegmentationMask {
    let [nx, ny, nz] = grid.shape;
    let mut labels = vec![0u16; grid.voxel_count()];
    let max_r = (*grid.shape.iter().min().unwrap() as f64 / 4.0).max(1.5);
    for _ in 0..blobs {
        let r = [rng.gen_range(1.5..=max_r), rng.gen_range(1.5..=max_r), rng.gen_range(1.5..=max_r)];
        let c = [
            rng.gen_range(r[0]..=(nx as f64 - 1.0 - r[0]).max(r[0])),
            rng.gen_range(r[1]..=(ny as f64 - 1.0 - r[1]).max(r[1])),
            rng.gen_range(r[2]..=(nz as f64 - 1.0 - r[2]).max(r[2])),
        ];
        let code = codes[rng.gen_range(0..codes.len())];
        let mut i = 0;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let q = ((x as f64 - c[0]) / r[0]).powi(2) + ((y as f64 - c[1]) / r[1]).powi(2) + ((z as f64 - c[2]) / r[2]).powi(2);
                    if q <= 1.0 {
                        labels[i] = code;
                    }
                    i += 1;
                }
            }
        }
    }
    SegmentationMask::new(*grid, labels).expect("sized from grid")
}

/// The inputs `spec` expects: all of them for `AllOf`, the first `count`
/// for `ExactlyOf`.
pub fn golden_tags(spec: &TaskSpec) -> Vec<InputTag> {
    match &spec.input_rule {
        InputRule::AllOf(tags) => tags.clone(),
        InputRule::ExactlyOf { count, of } => of[..*count].to_vec(),
    }
}

/// Writes a valid subject for `spec` into `dir` as
/// `<subject>-<token>.nii.gz` files on `grid`.
pub fn write_golden_subject(dir: &Path, subject: &str, spec: &TaskSpec, grid: &GridSpec) -> SubjectInputs {
    write_subject_with(dir, subject, &golden_tags(spec), grid)
}

/// Writes the listed inputs. The inpainting mask is a small centered cube.
pub fn write_subject_with(dir: &Path, subject: &str, tags: &[InputTag], grid: &GridSpec) -> SubjectInputs {
    std::fs::create_dir_all(dir).expect("fixture dir");
    let mut inputs = SubjectInputs::new(subject);
    for (k, &tag) in tags.iter().enumerate() {
        let vol = if tag == InputTag::InpaintMask {
            let c = grid.shape.map(|s| s as f64 / 2.0);
            tumor_mask(grid, &[1], c, 3.0).to_volume().expect("u8 labels")
        } else {
            golden_image(grid, k as u32 + 1)
        };
        let path = dir.join(format!("{subject}-{}.nii.gz", tag.file_token()));
        nifti::write_volume(&vol, &path, true).expect("fixture write");
        inputs.files.insert(tag, path);
    }
    inputs
}
