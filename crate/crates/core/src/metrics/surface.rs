//! Surface extraction, exact Euclidean distance transform, Hausdorff distance
//! and normalized surface distance.

use super::{check_grids, MetricsError};
use crate::mask::BinaryMask;

/// Foreground voxels with at least one background 6-neighbor. Neighbors
/// outside the grid count as background.
pub fn surface(mask: &BinaryMask) -> BinaryMask {
    let [nx, ny, nz] = mask.shape();
    let mut out = BinaryMask::zeros(mask.shape());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !mask.get(x, y, z) {
                    continue;
                }
                let boundary = x == 0
                    || y == 0
                    || z == 0
                    || x + 1 == nx
                    || y + 1 == ny
                    || z + 1 == nz
                    || !mask.get(x - 1, y, z)
                    || !mask.get(x + 1, y, z)
                    || !mask.get(x, y - 1, z)
                    || !mask.get(x, y + 1, z)
                    || !mask.get(x, y, z - 1)
                    || !mask.get(x, y, z + 1);
                if boundary {
                    out.set(x, y, z, true);
                }
            }
        }
    }
    out
}

/// Lower envelope of parabolas: `out[p] = min_q f[q] + w2 (p - q)^2`.
fn distance_1d(f: &[f64], w2: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    let mut any = false;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        if !any {
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            k = 0;
            any = true;
            continue;
        }
        let qf = q as f64;
        loop {
            let r = v[k];
            let rf = r as f64;
            let s = ((f[q] + w2 * qf * qf) - (f[r] + w2 * rf * rf)) / (2.0 * w2 * (qf - rf));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates everywhere
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
            }
            break;
        }
    }
    if !any {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0;
    for (p, o) in out.iter_mut().enumerate() {
        let pf = p as f64;
        while z[j + 1] < pf {
            j += 1;
        }
        let d = pf - v[j] as f64;
        *o = w2 * d * d + f[v[j]];
    }
}

/// Squared distance (mm²) from every voxel center to the nearest set voxel
/// of `features`; infinite everywhere when `features` is empty.
pub fn squared_distance_transform(features: &BinaryMask, spacing: [f64; 3]) -> Vec<f64> {
    let shape = features.shape();
    let mut grid: Vec<f64> = features
        .voxels()
        .iter()
        .map(|&b| if b { 0.0 } else { f64::INFINITY })
        .collect();
    let longest = *shape.iter().max().unwrap_or(&0);
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let mut v = vec![0usize; longest];
    let mut z = vec![0.0; longest + 1];
    let strides = [1, shape[0], shape[0] * shape[1]];
    for axis in 0..3 {
        let n = shape[axis];
        let w2 = spacing[axis] * spacing[axis];
        let (a, b) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for j in 0..shape[b] {
            for i in 0..shape[a] {
                let base = i * strides[a] + j * strides[b];
                for t in 0..n {
                    line[t] = grid[base + t * strides[axis]];
                }
                distance_1d(&line[..n], w2, &mut out[..n], &mut v[..n], &mut z[..n + 1]);
                for t in 0..n {
                    grid[base + t * strides[axis]] = out[t];
                }
            }
        }
    }
    grid
}

/// Distances (mm) from each surface voxel of `from` to the surface of `to`.
fn directed_surface_distances(from_surface: &BinaryMask, to_surface: &BinaryMask, spacing: [f64; 3]) -> Vec<f64> {
    let dt = squared_distance_transform(to_surface, spacing);
    from_surface
        .voxels()
        .iter()
        .zip(&dt)
        .filter(|(&s, _)| s)
        .map(|(_, &d)| d.sqrt())
        .collect()
}

/// Linear-interpolated percentile of unsorted `values`, `p` in (0, 100].
fn percentile(values: &mut [f64], p: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n == 1 {
        return values[0];
    }
    let rank = p / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    values[lo] + (values[hi] - values[lo]) * frac
}

/// Symmetric percentile Hausdorff distance between the surfaces of `a` and
/// `b` in millimeters: the larger of the two directed percentiles. `None` when
/// either mask is empty; `percentile = 100` gives the classic Hausdorff
/// distance.
pub fn hausdorff(a: &BinaryMask, b: &BinaryMask, spacing: [f64; 3], percentile_rank: f64) -> Result<Option<f64>, MetricsError> {
    check_grids(a, b)?;
    if !(percentile_rank > 0.0 && percentile_rank <= 100.0) {
        return Err(MetricsError::InvalidParameter(format!(
            "percentile {percentile_rank} outside (0, 100]"
        )));
    }
    if !a.any() || !b.any() {
        return Ok(None);
    }
    let sa = surface(a);
    let sb = surface(b);
    let mut ab = directed_surface_distances(&sa, &sb, spacing);
    let mut ba = directed_surface_distances(&sb, &sa, spacing);
    Ok(Some(percentile(&mut ab, percentile_rank).max(percentile(&mut ba, percentile_rank))))
}

/// Fraction of both surfaces lying within `tolerance_mm` of the other
/// surface, pooled over the two surfaces. Both empty is 1, one empty is 0.
pub fn nsd(a: &BinaryMask, b: &BinaryMask, spacing: [f64; 3], tolerance_mm: f64) -> Result<f64, MetricsError> {
    check_grids(a, b)?;
    if !(tolerance_mm >= 0.0) {
        return Err(MetricsError::InvalidParameter(format!("tolerance {tolerance_mm} mm is negative")));
    }
    match (a.any(), b.any()) {
        (false, false) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let sa = surface(a);
    let sb = surface(b);
    let ab = directed_surface_distances(&sa, &sb, spacing);
    let ba = directed_surface_distances(&sb, &sa, spacing);
    let within = ab.iter().chain(&ba).filter(|&&d| d <= tolerance_mm).count();
    Ok(within as f64 / (ab.len() + ba.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_sq(features: &BinaryMask, spacing: [f64; 3]) -> Vec<f64> {
        let pts = features.foreground_coords();
        (0..features.len())
            .map(|i| {
                let p = features.coords(i);
                pts.iter()
                    .map(|q| {
                        (0..3)
                            .map(|a| {
                                let d = (p[a] as f64 - q[a] as f64) * spacing[a];
                                d * d
                            })
                            .sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for trial in 0..20 {
            let shape = [rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..7)];
            let n: usize = shape.iter().product();
            let density = rng.gen_range(0.0..0.3);
            let voxels = (0..n).map(|_| rng.gen_bool(density)).collect();
            let m = BinaryMask::new(shape, voxels).unwrap();
            let spacing = [rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0), rng.gen_range(0.5..3.0)];
            let fast = squared_distance_transform(&m, spacing);
            let slow = brute_force_sq(&m, spacing);
            for (i, (f, s)) in fast.iter().zip(&slow).enumerate() {
                if s.is_infinite() {
                    assert!(f.is_infinite(), "trial {trial} voxel {i}");
                } else {
                    assert!((f - s).abs() < 1e-9, "trial {trial} voxel {i}: {f} vs {s}");
                }
            }
        }
    }

    #[test]
    fn hausdorff_single_voxels_three_apart() {
        let a = BinaryMask::from_indices([8, 3, 3], [[1, 1, 1]]);
        let b = BinaryMask::from_indices([8, 3, 3], [[4, 1, 1]]);
        assert_eq!(hausdorff(&a, &b, [1.0; 3], 100.0).unwrap(), Some(3.0));
        assert_eq!(hausdorff(&a, &b, [1.0; 3], 95.0).unwrap(), Some(3.0));
        assert_eq!(hausdorff(&a, &b, [2.0, 1.0, 1.0], 95.0).unwrap(), Some(6.0));
    }

    #[test]
    fn hausdorff_conventions() {
        let a = BinaryMask::from_indices([4, 4, 4], [[1, 1, 1], [2, 2, 2]]);
        let empty = BinaryMask::zeros([4, 4, 4]);
        assert_eq!(hausdorff(&a, &a, [1.0; 3], 95.0).unwrap(), Some(0.0));
        assert_eq!(hausdorff(&empty, &a, [1.0; 3], 95.0).unwrap(), None);
        assert!(hausdorff(&a, &a, [1.0; 3], 0.0).is_err());
        assert!(hausdorff(&a, &BinaryMask::zeros([4, 4, 5]), [1.0; 3], 95.0).is_err());
    }

    #[test]
    fn nsd_examples() {
        let shape = [12, 8, 8];
        let cube = |x0: usize| {
            let mut m = BinaryMask::zeros(shape);
            for z in 2..6 {
                for y in 2..6 {
                    for x in x0..x0 + 4 {
                        m.set(x, y, z, true);
                    }
                }
            }
            m
        };
        let a = cube(1);
        assert_eq!(nsd(&a, &a, [1.0; 3], 0.0).unwrap(), 1.0);
        assert_eq!(nsd(&a, &cube(2), [1.0; 3], 2.0).unwrap(), 1.0);
        // single voxels 10 mm apart
        let p = BinaryMask::from_indices([12, 1, 1], [[0, 0, 0]]);
        let q = BinaryMask::from_indices([12, 1, 1], [[10, 0, 0]]);
        assert_eq!(nsd(&p, &q, [1.0; 3], 1.0).unwrap(), 0.0);
        let empty = BinaryMask::zeros(shape);
        assert_eq!(nsd(&empty, &empty, [1.0; 3], 1.0).unwrap(), 1.0);
        assert_eq!(nsd(&a, &empty, [1.0; 3], 1.0).unwrap(), 0.0);
    }

    #[test]
    fn surface_of_solid_cube_is_its_shell() {
        let mut m = BinaryMask::zeros([5, 5, 5]);
        for z in 1..4 {
            for y in 1..4 {
                for x in 1..4 {
                    m.set(x, y, z, true);
                }
            }
        }
        let s = surface(&m);
        assert_eq!(s.count(), 26);
        assert!(!s.get(2, 2, 2));
    }
}
