use nalgebra::{Matrix4, Vector4};

use super::{invert_affine, AffineTransform, GeometryError, GridSpec, Space};
use crate::mask::SegmentationMask;
use crate::nifti::{Volume, VoxelData};

/// Affine from target voxel indices to source voxel indices.
fn index_map(source: &GridSpec, world_map: &AffineTransform, target: &GridSpec) -> Result<Matrix4<f64>, GeometryError> {
    if world_map.source_space() != source.space {
        return Err(GeometryError::SpaceMismatch(format!(
            "transform reads from {} but the source lives in {}",
            world_map.source_space(),
            source.space
        )));
    }
    if world_map.target_space() != target.space {
        return Err(GeometryError::SpaceMismatch(format!(
            "transform writes to {} but the target grid is in {}",
            world_map.target_space(),
            target.space
        )));
    }
    target.validate()?;
    let src_inv = source
        .affine
        .try_inverse()
        .ok_or_else(|| GeometryError::SingularTransform("source grid affine".into()))?;
    let back = invert_affine(world_map)?;
    Ok(src_inv * back.matrix() * target.affine)
}

fn for_each_target<F: FnMut(usize, [f64; 3])>(shape: [usize; 3], m: &Matrix4<f64>, mut f: F) {
    let origin = m * Vector4::new(0.0, 0.0, 0.0, 1.0);
    let dx = m.column(0);
    let dy = m.column(1);
    let dz = m.column(2);
    let mut i = 0;
    for z in 0..shape[2] {
        for y in 0..shape[1] {
            let row = origin + dy * y as f64 + dz * z as f64;
            for x in 0..shape[0] {
                let p = row + dx * x as f64;
                f(i, [p[0], p[1], p[2]]);
                i += 1;
            }
        }
    }
}

/// Nearest-neighbor resampling of `mask` onto `target`. `world_map` carries
/// world coordinates of the mask's space into the target's space. Target
/// voxels that map outside the source grid are background.
pub fn resample_mask(
    mask: &SegmentationMask,
    world_map: &AffineTransform,
    target: &GridSpec,
) -> Result<SegmentationMask, GeometryError> {
    let src = mask.grid();
    let m = index_map(src, world_map, target)?;
    let [nx, ny, nz] = src.shape;
    let labels = mask.labels();
    let mut out = vec![0u16; target.voxel_count()];
    for_each_target(target.shape, &m, |i, p| {
        let (x, y, z) = (p[0].round(), p[1].round(), p[2].round());
        if x >= 0.0 && y >= 0.0 && z >= 0.0 && x < nx as f64 && y < ny as f64 && z < nz as f64 {
            out[i] = labels[x as usize + nx * (y as usize + ny * z as usize)];
        }
    });
    Ok(SegmentationMask::new(*target, out).expect("output sized from target grid"))
}

/// Trilinear resampling of an intensity volume living in `source_space`.
/// Returns a float32 volume on `target`; outside samples are 0.
pub fn resample_image(
    image: &Volume,
    source_space: Space,
    world_map: &AffineTransform,
    target: &GridSpec,
) -> Result<Volume, GeometryError> {
    let src = GridSpec::from_volume(image, source_space);
    let m = index_map(&src, world_map, target)?;
    let [nx, ny, nz] = src.shape;
    let data = image.data();
    let at = |x: usize, y: usize, z: usize| data.get(x + nx * (y + ny * z));
    let mut out = vec![0f32; target.voxel_count()];
    const EDGE: f64 = 1e-9;
    for_each_target(target.shape, &m, |i, p| {
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        let dims = [nx, ny, nz];
        for a in 0..3 {
            let v = p[a];
            let hi = (dims[a] - 1) as f64;
            if v < -EDGE || v > hi + EDGE {
                return;
            }
            let v = v.clamp(0.0, hi);
            let f = v.floor();
            base[a] = (f as usize).min(dims[a].saturating_sub(2));
            frac[a] = v - base[a] as f64;
            if dims[a] == 1 {
                base[a] = 0;
                frac[a] = 0.0;
            }
        }
        let step = |a: usize| if dims[a] > 1 { 1 } else { 0 };
        let (x0, y0, z0) = (base[0], base[1], base[2]);
        let (x1, y1, z1) = (x0 + step(0), y0 + step(1), z0 + step(2));
        let (fx, fy, fz) = (frac[0], frac[1], frac[2]);
        let c00 = at(x0, y0, z0) * (1.0 - fx) + at(x1, y0, z0) * fx;
        let c10 = at(x0, y1, z0) * (1.0 - fx) + at(x1, y1, z0) * fx;
        let c01 = at(x0, y0, z1) * (1.0 - fx) + at(x1, y0, z1) * fx;
        let c11 = at(x0, y1, z1) * (1.0 - fx) + at(x1, y1, z1) * fx;
        let c0 = c00 * (1.0 - fy) + c10 * fy;
        let c1 = c01 * (1.0 - fy) + c11 * fy;
        out[i] = (c0 * (1.0 - fz) + c1 * fz) as f32;
    });
    Volume::with_header(
        VoxelData::Float32(out),
        target.shape,
        target.spacing,
        target.affine,
        image.header().clone(),
        image.extension().to_vec(),
    )
    .map_err(|e| GeometryError::DegenerateGrid(e.to_string()))
}

fn check_forward(forward: &AffineTransform, native_grid: &GridSpec, atlas_space: Space) -> Result<(), GeometryError> {
    if forward.source_space() != Space::Native {
        return Err(GeometryError::SpaceMismatch(format!(
            "forward transform must map native→atlas, got {}→{}",
            forward.source_space(),
            forward.target_space()
        )));
    }
    if forward.target_space() != atlas_space {
        return Err(GeometryError::SpaceMismatch(format!(
            "input lives in {atlas_space} but the forward transform targets {}",
            forward.target_space()
        )));
    }
    if native_grid.space != Space::Native {
        return Err(GeometryError::SpaceMismatch(format!(
            "native grid is tagged {}",
            native_grid.space
        )));
    }
    Ok(())
}

/// Brings an atlas-space mask back to the subject's native grid using the
/// stored native→atlas transform.
pub fn inverse_warp_to_native(
    mask_atlas: &SegmentationMask,
    forward: &AffineTransform,
    native_grid: &GridSpec,
) -> Result<SegmentationMask, GeometryError> {
    check_forward(forward, native_grid, mask_atlas.grid().space)?;
    resample_mask(mask_atlas, &invert_affine(forward)?, native_grid)
}

/// Image counterpart of [`inverse_warp_to_native`], trilinear.
pub fn inverse_warp_image_to_native(
    image_atlas: &Volume,
    atlas_space: Space,
    forward: &AffineTransform,
    native_grid: &GridSpec,
) -> Result<Volume, GeometryError> {
    check_forward(forward, native_grid, atlas_space)?;
    resample_image(image_atlas, atlas_space, &invert_affine(forward)?, native_grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::linear_index;

    fn cube_mask(shape: [usize; 3], space: Space, lo: usize, hi: usize, label: u16) -> SegmentationMask {
        let grid = GridSpec::identity(shape, space);
        let mut labels = vec![0u16; grid.voxel_count()];
        for z in lo..hi {
            for y in lo..hi {
                for x in lo..hi {
                    labels[linear_index(shape, x, y, z)] = label;
                }
            }
        }
        SegmentationMask::new(grid, labels).unwrap()
    }

    #[test]
    fn identity_is_noop() {
        let m = cube_mask([8, 8, 8], Space::Native, 2, 5, 3);
        let t = AffineTransform::identity(Space::Native, Space::Native);
        let out = resample_mask(&m, &t, m.grid()).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn integer_translation_shifts_indices() {
        let shape = [16, 16, 16];
        let grid = GridSpec::identity(shape, Space::Native);
        let mut labels = vec![0u16; grid.voxel_count()];
        // foreground touching the +x boundary so the shift pushes some out
        for (i, l) in labels.iter_mut().enumerate() {
            if i % 7 == 0 {
                *l = 1 + (i % 3) as u16;
            }
        }
        let m = SegmentationMask::new(grid, labels).unwrap();
        let t = AffineTransform::translation([2.0, 0.0, 0.0], Space::Native, Space::Native);
        let out = resample_mask(&m, &t, &grid).unwrap();
        for z in 0..16 {
            for y in 0..16 {
                for x in 0..16 {
                    let expected = if x >= 2 { m.get(x - 2, y, z) } else { 0 };
                    assert_eq!(out.get(x, y, z), expected, "at {x},{y},{z}");
                }
            }
        }
    }

    #[test]
    fn rotation_about_z_moves_single_voxel() {
        // 90 degrees about z maps world (x, y, z) to (-y, x, z); with the grid
        // origin at the center (7, 7, 0) the voxel (10, 7, 3) lands on (7, 10, 3).
        let shape = [15, 15, 8];
        let mut affine = Matrix4::identity();
        affine[(0, 3)] = -7.0;
        affine[(1, 3)] = -7.0;
        let grid = GridSpec::new(shape, [1.0; 3], affine, Space::Native);
        let mut labels = vec![0u16; grid.voxel_count()];
        labels[linear_index(shape, 10, 7, 3)] = 2;
        let m = SegmentationMask::new(grid, labels).unwrap();
        let rot = Matrix4::new(
            0.0, -1.0, 0.0, 0.0, //
            1.0, 0.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        );
        let t = AffineTransform::new(rot, Space::Native, Space::Native).unwrap();
        let out = resample_mask(&m, &t, &grid).unwrap();
        assert_eq!(out.get(7, 10, 3), 2);
        assert_eq!(out.labels().iter().filter(|&&v| v != 0).count(), 1);
    }

    #[test]
    fn wrong_tags_are_space_mismatch() {
        let m = cube_mask([4, 4, 4], Space::Sri24, 1, 2, 1);
        let grid = GridSpec::identity([4, 4, 4], Space::Native);
        let t = AffineTransform::identity(Space::Native, Space::Sri24);
        assert!(matches!(resample_mask(&m, &t, &grid), Err(GeometryError::SpaceMismatch(_))));
        let backwards = AffineTransform::identity(Space::Sri24, Space::Native);
        assert!(matches!(
            inverse_warp_to_native(&m, &backwards, &grid),
            Err(GeometryError::SpaceMismatch(_))
        ));
    }

    #[test]
    fn degenerate_target() {
        let m = cube_mask([4, 4, 4], Space::Native, 1, 2, 1);
        let mut grid = GridSpec::identity([4, 4, 4], Space::Native);
        grid.shape[1] = 0;
        let t = AffineTransform::identity(Space::Native, Space::Native);
        assert!(matches!(resample_mask(&m, &t, &grid), Err(GeometryError::DegenerateGrid(_))));
    }

    #[test]
    fn inverse_warp_identity_keeps_mask() {
        let atlas = cube_mask([6, 6, 6], Space::Sri24, 1, 4, 1);
        let native = GridSpec::identity([6, 6, 6], Space::Native);
        let fwd = AffineTransform::identity(Space::Native, Space::Sri24);
        let out = inverse_warp_to_native(&atlas, &fwd, &native).unwrap();
        assert_eq!(out.labels(), atlas.labels());
        assert_eq!(out.grid().space, Space::Native);
    }

    #[test]
    fn trilinear_midpoint_and_outside() {
        let grid = GridSpec::identity([2, 1, 1], Space::Native);
        let img = Volume::new(VoxelData::Float32(vec![0.0, 10.0]), grid.shape, grid.spacing, grid.affine).unwrap();
        let t = AffineTransform::translation([-0.5, 0.0, 0.0], Space::Native, Space::Native);
        let out = resample_image(&img, Space::Native, &t, &grid).unwrap();
        // target x=0 samples source x=0.5, target x=1 samples 1.5 (outside)
        assert_eq!(out.data().to_f64(), vec![5.0, 0.0]);
    }

    #[test]
    fn trilinear_reproduces_linear_field() {
        let shape = [5, 4, 3];
        let grid = GridSpec::identity(shape, Space::Sri24);
        let mut values = Vec::new();
        for z in 0..3 {
            for y in 0..4 {
                for x in 0..5 {
                    values.push((x as f64 * 2.0 + y as f64 - z as f64 * 0.5) as f32);
                }
            }
        }
        let img = Volume::new(VoxelData::Float32(values), shape, grid.spacing, grid.affine).unwrap();
        let native = GridSpec::identity([3, 3, 2], Space::Native);
        let fwd = AffineTransform::translation([0.25, 0.5, 0.75], Space::Native, Space::Sri24);
        let out = inverse_warp_image_to_native(&img, Space::Sri24, &fwd, &native).unwrap();
        for z in 0..2 {
            for y in 0..3 {
                for x in 0..3 {
                    let (sx, sy, sz) = (x as f64 + 0.25, y as f64 + 0.5, z as f64 + 0.75);
                    let expected = sx * 2.0 + sy - sz * 0.5;
                    let got = out.data().get(linear_index([3, 3, 2], x, y, z));
                    assert!((got - expected).abs() < 1e-5, "{got} vs {expected}");
                }
            }
        }
    }
}
