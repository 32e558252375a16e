use orch_core::mask::BinaryMask;
use orch_core::metrics::{connected_components, dice, hausdorff, lesionwise_dice, nsd, squared_distance_transform, Connectivity};
use proptest::prelude::*;

fn mask_from_bits(shape: [usize; 3], bits: u32) -> BinaryMask {
    let n: usize = shape.iter().product();
    BinaryMask::new(shape, (0..n).map(|i| (bits >> i) & 1 == 1).collect()).unwrap()
}

fn adjacent(a: [usize; 3], b: [usize; 3], conn: Connectivity) -> bool {
    let d: Vec<usize> = (0..3).map(|k| a[k].abs_diff(b[k])).collect();
    if d.iter().any(|&x| x > 1) || d.iter().all(|&x| x == 0) {
        return false;
    }
    let l1: usize = d.iter().sum();
    match conn {
        Connectivity::Six => l1 == 1,
        Connectivity::Eighteen => l1 <= 2,
        Connectivity::TwentySix => true,
    }
}

/// Union-find over all foreground pairs.
fn component_count_oracle(m: &BinaryMask, conn: Connectivity) -> usize {
    let pts = m.foreground_coords();
    let mut parent: Vec<usize> = (0..pts.len()).collect();
    fn find(p: &mut Vec<usize>, i: usize) -> usize {
        if p[i] != i {
            let r = find(p, p[i]);
            p[i] = r;
        }
        p[i]
    }
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            if adjacent(pts[i], pts[j], conn) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a] = b;
            }
        }
    }
    (0..pts.len()).filter(|&i| find(&mut parent, i) == i).count()
}

const CONNS: [Connectivity; 3] = [Connectivity::Six, Connectivity::Eighteen, Connectivity::TwentySix];

#[test]
fn exhaustive_two_cubed_oracles() {
    let shape = [2, 2, 2];
    for a in 0u32..256 {
        let ma = mask_from_bits(shape, a);
        for conn in CONNS {
            let l = connected_components(&ma, conn);
            assert_eq!(l.component_count, component_count_oracle(&ma, conn), "mask {a:08b} conn {conn}");
            assert_eq!(l.sizes.iter().sum::<usize>(), ma.count());
        }
        for b in 0u32..256 {
            let mb = mask_from_bits(shape, b);
            let inter = (a & b).count_ones() as f64;
            let total = (a.count_ones() + b.count_ones()) as f64;
            let expected = if total == 0.0 { 1.0 } else { 2.0 * inter / total };
            assert_eq!(dice(&ma, &mb).unwrap(), expected);
        }
    }
}

fn binary(shape: [usize; 3]) -> impl Strategy<Value = BinaryMask> {
    let n: usize = shape.iter().product();
    prop::collection::vec(prop::bool::weighted(0.3), n).prop_map(move |v| BinaryMask::new(shape, v).unwrap())
}

fn spacing() -> impl Strategy<Value = [f64; 3]> {
    [0.5f64..2.5, 0.5f64..2.5, 0.5f64..3.0]
}

const S: [usize; 3] = [6, 5, 4];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn dice_symmetry(a in binary(S), b in binary(S)) {
        prop_assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
        let d = dice(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        if a.any() {
            prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
        }
    }

    #[test]
    fn hausdorff_symmetric_and_ordered_in_percentile(a in binary(S), b in binary(S), sp in spacing()) {
        prop_assert_eq!(hausdorff(&a, &b, sp, 95.0).unwrap(), hausdorff(&b, &a, sp, 95.0).unwrap());
        let ranks = [10.0, 50.0, 90.0, 95.0, 100.0];
        let values: Vec<_> = ranks.iter().map(|&p| hausdorff(&a, &b, sp, p).unwrap()).collect();
        if a.any() && b.any() {
            for w in values.windows(2) {
                prop_assert!(w[0].unwrap() <= w[1].unwrap() + 1e-12);
            }
        } else {
            prop_assert!(values.iter().all(Option::is_none));
        }
    }

    #[test]
    fn nsd_nondecreasing_in_tolerance(a in binary(S), b in binary(S), sp in spacing()) {
        let mut prev = 0.0;
        for tol in [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 5.0, 10.0] {
            let v = nsd(&a, &b, sp, tol).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!(v >= prev);
            prev = v;
        }
        prop_assert_eq!(nsd(&a, &b, sp, 1.0).unwrap(), nsd(&b, &a, sp, 1.0).unwrap());
    }

    #[test]
    fn components_partition_foreground(a in binary(S), b in binary(S)) {
        for conn in CONNS {
            let la = connected_components(&a, conn);
            prop_assert_eq!(la.sizes.iter().sum::<usize>(), a.count());
            prop_assert_eq!(la.component_count, component_count_oracle(&a, conn));
            let ids: std::collections::BTreeSet<u32> = la.component_map.iter().copied().filter(|&c| c != 0).collect();
            prop_assert_eq!(ids.len(), la.component_count);
            prop_assert!(ids.iter().copied().eq(1..=la.component_count as u32));
            let lb = connected_components(&b, conn);
            let lu = connected_components(&a.union(&b), conn);
            prop_assert!(lu.component_count <= la.component_count + lb.component_count);
        }
    }

    #[test]
    fn distance_transform_oracle(a in binary(S), sp in spacing()) {
        let dt = squared_distance_transform(&a, sp);
        let pts = a.foreground_coords();
        for (i, &d) in dt.iter().enumerate() {
            let p = a.coords(i);
            let best = pts.iter().map(|q| (0..3).map(|k| ((p[k] as f64 - q[k] as f64) * sp[k]).powi(2)).sum::<f64>()).fold(f64::INFINITY, f64::min);
            if best.is_infinite() {
                prop_assert!(d.is_infinite());
            } else {
                prop_assert!((d - best).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn lesionwise_counts(r in binary(S), p in binary(S)) {
        let rep = lesionwise_dice(&r, &p, Connectivity::TwentySix, 0).unwrap();
        prop_assert_eq!(rep.lesions.len(), connected_components(&r, Connectivity::TwentySix).component_count);
        for l in &rep.lesions {
            prop_assert!((0.0..=1.0).contains(&l.dsc));
            prop_assert_eq!(l.matched, l.dsc > 0.0);
        }
    }
}
