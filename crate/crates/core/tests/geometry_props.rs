use std::sync::Arc;

use jumpflow::geometry::{
    adjoint_distribution, check_transversality, split_field, subspace_distance, ComplementaryPair,
    ConstantDistribution, DegeneracyThresholds, Distribution, IdentityDiffeo, LinearDiffeo,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

const TOL: f64 = 1e-10;

fn vector(n: usize) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(-3.0..3.0f64, n).prop_map(DVector::from_vec)
}

fn matrix(r: usize, c: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-2.0..2.0f64, r * c).prop_map(move |v| DMatrix::from_vec(r, c, v))
}

fn well_conditioned(m: &DMatrix<f64>, cap: f64) -> bool {
    let sv = m.clone().svd(false, false).singular_values;
    sv.min() > 0.0 && sv.max() / sv.min() < cap
}

/// A random complementary pair: either spheres/rays or two constant
/// subspaces of `R^3`.
fn pair_and_point() -> impl Strategy<Value = (ComplementaryPair, DVector<f64>)> {
    prop_oneof![
        (2usize..=3).prop_flat_map(|n| (Just(n), vector(n))).prop_filter_map("near origin", |(n, x)| {
            (x.norm() > 0.1).then(|| (ComplementaryPair::spherical_radial(n), x))
        }),
        (1usize..=2, matrix(3, 3), vector(3)).prop_filter_map("ill-conditioned", |(k, m, x)| {
            well_conditioned(&m, 1e4).then(|| {
                let h = ConstantDistribution::new(m.columns(0, k).into_owned()).unwrap();
                let v = ConstantDistribution::new(m.columns(k, 3 - k).into_owned()).unwrap();
                (ComplementaryPair::new(Arc::new(h), Arc::new(v)).unwrap(), x)
            })
        }),
    ]
}

fn scale(v: &DVector<f64>) -> f64 {
    v.amax().max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, ..ProptestConfig::default() })]

    #[test]
    fn split_is_exact_and_idempotent((pair, x) in pair_and_point(), seed in vector(3)) {
        let thr = DegeneracyThresholds::default();
        let n = x.len();
        let value = seed.rows(0, n).into_owned();
        let (h, d) = (&*pair.horizontal, &*pair.vertical);
        let (hp, vp) = split_field(&value, h, d, &x, &thr).unwrap();
        prop_assert!((&hp + &vp - &value).amax() <= TOL * scale(&value));

        let (hh, hv) = split_field(&hp, h, d, &x, &thr).unwrap();
        prop_assert!((&hh - &hp).amax() <= TOL * scale(&value));
        prop_assert!(hv.amax() <= TOL * scale(&value));
        let (vh, vv) = split_field(&vp, h, d, &x, &thr).unwrap();
        prop_assert!(vh.amax() <= TOL * scale(&value));
        prop_assert!((&vv - &vp).amax() <= TOL * scale(&value));

        // The parts lie in their subspaces.
        let ph = jumpflow::geometry::projector(&h.basis(&x).unwrap());
        prop_assert!((&ph * &hp - &hp).amax() <= TOL * scale(&value));
    }

    #[test]
    fn split_is_basis_invariant(
        (pair, x) in pair_and_point(),
        seed in vector(3),
        mix_h in matrix(2, 2),
        mix_v in matrix(2, 2),
    ) {
        let thr = DegeneracyThresholds::default();
        let n = x.len();
        let value = seed.rows(0, n).into_owned();
        let bh = pair.horizontal.basis(&x).unwrap();
        let bv = pair.vertical.basis(&x).unwrap();
        let mh = mix_h.view((0, 0), (bh.ncols(), bh.ncols())).into_owned();
        let mv = mix_v.view((0, 0), (bv.ncols(), bv.ncols())).into_owned();
        prop_assume!(well_conditioned(&mh, 100.0) && well_conditioned(&mv, 100.0));
        let h2 = ConstantDistribution::new(&bh * mh).unwrap();
        let v2 = ConstantDistribution::new(&bv * mv).unwrap();
        prop_assert!(subspace_distance(&h2.basis(&x).unwrap(), &bh) <= TOL);
        prop_assert!(subspace_distance(&v2.basis(&x).unwrap(), &bv) <= TOL);

        let (hp, vp) = split_field(&value, &*pair.horizontal, &*pair.vertical, &x, &thr).unwrap();
        let (hq, vq) = split_field(&value, &h2, &v2, &x, &thr).unwrap();
        prop_assert!((hp - hq).amax() <= TOL * scale(&value));
        prop_assert!((vp - vq).amax() <= TOL * scale(&value));

        let t1 = check_transversality(&*pair.horizontal, &*pair.vertical, &x, &thr).unwrap();
        let t2 = check_transversality(&h2, &v2, &x, &thr).unwrap();
        prop_assert!((t1.det - t2.det).abs() <= TOL);
        prop_assert!((t1.condition / t2.condition - 1.0).abs() <= 1e-8);
    }

    #[test]
    fn adjoint_of_identity_is_identity((pair, x) in pair_and_point()) {
        let n = x.len();
        for delta in [pair.horizontal.clone(), pair.vertical.clone()] {
            let ad = adjoint_distribution(Arc::new(IdentityDiffeo { n }), delta.clone()).unwrap();
            prop_assert!(subspace_distance(&ad.basis(&x).unwrap(), &delta.basis(&x).unwrap()) <= TOL);
        }
    }

    #[test]
    fn adjoint_of_linear_map_is_pushforward(m in matrix(3, 3), x in vector(3)) {
        prop_assume!(well_conditioned(&m, 1e3));
        let delta: Arc<dyn Distribution> = Arc::new(ConstantDistribution::vertical(3, 1));
        let ad = adjoint_distribution(Arc::new(LinearDiffeo::new(m.clone()).unwrap()), delta).unwrap();
        let want = m.columns(1, 2).into_owned();
        prop_assert!(subspace_distance(&ad.basis(&x).unwrap(), &want) <= TOL);
    }
}
