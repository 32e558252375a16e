use nalgebra::{Matrix4, Rotation3, Vector3};
use orch_core::geometry::{
    compose, invert_affine, inverse_warp_image_to_native, inverse_warp_to_native, resample_image, resample_mask, AffineTransform,
    GeometryError, GridSpec, Space,
};
use orch_core::mask::SegmentationMask;
use orch_core::nifti::{Volume, VoxelData};
use proptest::prelude::*;

fn rigid(angles: [f64; 3], t: [f64; 3]) -> Matrix4<f64> {
    let r = Rotation3::from_euler_angles(angles[0], angles[1], angles[2]);
    let mut m = r.to_homogeneous();
    for a in 0..3 {
        m[(a, 3)] = t[a];
    }
    m
}

fn labels(n: usize) -> impl Strategy<Value = Vec<u16>> {
    prop::collection::vec(prop::sample::select(vec![0u16, 0, 1, 2, 3]), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inverse_and_compose(angles in prop::array::uniform3(-3.0f64..3.0), t in prop::array::uniform3(-50.0f64..50.0), s in prop::array::uniform3(0.5f64..2.0)) {
        let mut m = rigid(angles, t);
        for c in 0..3 {
            for r in 0..3 {
                m[(r, c)] *= s[c];
            }
        }
        let fwd = AffineTransform::new(m, Space::Native, Space::Sri24).unwrap();
        let inv = invert_affine(&fwd).unwrap();
        prop_assert_eq!(inv.source_space(), Space::Sri24);
        let round = compose(&inv, &fwd).unwrap();
        prop_assert!((round.matrix() - Matrix4::identity()).abs().max() < 1e-9);
        let back = invert_affine(&inv).unwrap();
        prop_assert!((back.matrix() - fwd.matrix()).abs().max() < 1e-9);
        let p = [1.0, -2.0, 3.5];
        let q = inv.apply(fwd.apply(p));
        for a in 0..3 {
            prop_assert!((q[a] - p[a]).abs() < 1e-9);
        }
    }

    #[test]
    fn integer_translation_round_trip_is_exact(mask in labels(8 * 7 * 6), t in prop::array::uniform3(-20i32..20)) {
        let shape = [8, 7, 6];
        let native = GridSpec::identity(shape, Space::Native);
        let fwd = AffineTransform::translation(t.map(f64::from), Space::Native, Space::Sri24);
        // atlas grid covering the translated native grid
        let atlas = GridSpec::new(shape, [1.0; 3], *fwd.matrix(), Space::Sri24);
        let m = SegmentationMask::new(native, mask.clone()).unwrap();
        let in_atlas = resample_mask(&m, &fwd, &atlas).unwrap();
        prop_assert_eq!(in_atlas.labels(), mask.as_slice());
        let back = inverse_warp_to_native(&in_atlas, &fwd, &native).unwrap();
        prop_assert_eq!(back.into_labels(), mask);
    }

    #[test]
    fn axis_permuting_rotation_round_trip_is_exact(mask in labels(5 * 5 * 5), quarter in 0u8..4) {
        let shape = [5, 5, 5];
        let angle = f64::from(quarter) * std::f64::consts::FRAC_PI_2;
        let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), angle).to_homogeneous();
        let native = GridSpec::new(shape, [1.0; 3], rigid([0.0; 3], [-2.0, -2.0, -2.0]), Space::Native);
        let fwd = AffineTransform::new(rot, Space::Native, Space::Mni152).unwrap();
        let atlas = GridSpec::new(shape, [1.0; 3], rigid([0.0; 3], [-2.0, -2.0, -2.0]), Space::Mni152);
        let m = SegmentationMask::new(native, mask.clone()).unwrap();
        let in_atlas = resample_mask(&m, &fwd, &atlas).unwrap();
        let back = inverse_warp_to_native(&in_atlas, &fwd, &native).unwrap();
        prop_assert_eq!(back.into_labels(), mask);
    }
}

#[test]
fn warp_rejects_bad_inputs() {
    let native = GridSpec::identity([4, 4, 4], Space::Native);
    let atlas = GridSpec::identity([4, 4, 4], Space::Sri24);
    let m = SegmentationMask::empty(atlas);
    let wrong_target = AffineTransform::identity(Space::Native, Space::Mni152);
    assert!(matches!(inverse_warp_to_native(&m, &wrong_target, &native), Err(GeometryError::SpaceMismatch(_))));
    let wrong_source = AffineTransform::identity(Space::Mni152, Space::Sri24);
    assert!(matches!(inverse_warp_to_native(&m, &wrong_source, &native), Err(GeometryError::SpaceMismatch(_))));
    let mut singular = Matrix4::identity();
    singular[(2, 2)] = 0.0;
    assert!(matches!(
        AffineTransform::new(singular, Space::Native, Space::Sri24),
        Err(GeometryError::SingularTransform(_))
    ));
    let mut flat = native;
    flat.shape = [4, 0, 4];
    let fwd = AffineTransform::identity(Space::Native, Space::Sri24);
    assert!(matches!(inverse_warp_to_native(&m, &fwd, &flat), Err(GeometryError::DegenerateGrid(_))));
}

#[test]
fn image_inverse_warp_reproduces_linear_field() {
    let shape = [6, 6, 6];
    let n = 216;
    let atlas = GridSpec::identity(shape, Space::Sri24);
    let field: Vec<f32> = (0..n).map(|i| (i % 6) as f32 * 2.0 + ((i / 6) % 6) as f32).collect();
    let img = Volume::new(VoxelData::Float32(field), shape, [1.0; 3], atlas.affine).unwrap();
    // native voxels sit half a voxel off the atlas lattice
    let fwd = AffineTransform::translation([0.5, 0.0, 0.0], Space::Native, Space::Sri24);
    let native = GridSpec::new([5, 6, 6], [1.0; 3], Matrix4::identity(), Space::Native);
    let out = inverse_warp_image_to_native(&img, Space::Sri24, &fwd, &native).unwrap();
    for x in 0..5 {
        let v = out.data().get(x);
        assert!((v - (2.0 * x as f64 + 1.0)).abs() < 1e-5, "x={x} v={v}");
    }
    let same = resample_image(&img, Space::Sri24, &AffineTransform::identity(Space::Sri24, Space::Sri24), &atlas).unwrap();
    assert_eq!(same.data().to_f64(), img.data().to_f64());
}
