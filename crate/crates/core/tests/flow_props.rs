use std::sync::Arc;

use jumpflow::marcus::{solve_point, MarcusConfig};
use jumpflow::odeflow::{central_difference_jacobian, flow, flow_with_jacobian, FnFields, LinearFields, OdeConfig, VectorFieldSet};
use jumpflow::reference::matrix_exp;
use jumpflow::semimartingale::{deterministic_path, sample_levy_jump_diffusion, JumpLaw, JumpPath, PathParams};
use jumpflow::stratjump::{marcus_integral, pushforward_integral, FieldIntegrand};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

fn vector(n: usize, r: f64) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(-r..r, n).prop_map(DVector::from_vec)
}

fn matrix(n: usize, r: f64) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-r..r, n * n).prop_map(move |v| DMatrix::from_vec(n, n, v))
}

fn path_params() -> impl Strategy<Value = PathParams> {
    (1usize..=2, any::<u64>(), 0.0..8.0f64, prop::sample::select(vec![0.01, 0.005, 0.004]), 0.5..2.0f64).prop_map(
        |(m, seed, intensity, step, horizon)| PathParams {
            horizon,
            step,
            brownian_scale: vec![0.7; m],
            drift: vec![0.1; m],
            jump_intensity: intensity,
            jump_law: JumpLaw::Gaussian { mean: vec![0.0; m], std_dev: vec![1.0; m] },
            seed,
        },
    )
}

/// A smooth scalar driver with a few jumps on a 1e-2 grid.
fn driver() -> impl Strategy<Value = JumpPath> {
    (0.2..1.5f64, 1.0..4.0f64, prop::collection::vec((0.05..0.95f64, -1.5..1.5f64), 0..4)).prop_map(|(a, f, jumps)| {
        let times: Vec<f64> = (0..=100).map(|k| k as f64 / 100.0).collect();
        let values: Vec<_> = times.iter().map(|t| v(&[a * (f * t).sin()])).collect();
        let mut jumps: Vec<(f64, DVector<f64>)> = jumps.into_iter().map(|(t, s)| (t, v(&[s]))).collect();
        jumps.sort_by(|x, y| x.0.total_cmp(&y.0));
        jumps.dedup_by(|x, y| (x.0 - y.0).abs() < 1e-3);
        deterministic_path(&times, &values, &jumps).unwrap()
    })
}

fn nonlinear_fields(c: [f64; 4]) -> FnFields {
    FnFields::new(2)
        .with_field(
            move |p| v(&[c[0] * p[1] * p[1] - p[1], p[0] + c[1] * (p[0] * p[1]).sin()]),
            move |p| {
                let cs = (p[0] * p[1]).cos() * c[1];
                DMatrix::from_row_slice(2, 2, &[0.0, 2.0 * c[0] * p[1] - 1.0, 1.0 + cs * p[1], cs * p[0]])
            },
        )
        .with_field(
            move |p| v(&[c[2] * p[0], c[3] * p[0] * p[0] + 0.1]),
            move |p| DMatrix::from_row_slice(2, 2, &[c[2], 0.0, 2.0 * c[3] * p[0], 0.0]),
        )
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn sampled_paths_are_seed_determined(params in path_params()) {
        let a = sample_levy_jump_diffusion(&params).unwrap();
        let b = sample_levy_jump_diffusion(&params).unwrap();
        prop_assert_eq!(&a, &b);
        for j in a.jumps() {
            prop_assert!(j.time > 0.0 && j.time <= a.horizon());
            prop_assert!(a.index_of(j.time).is_some());
            prop_assert!(j.size.iter().all(|s| s.is_finite()));
        }
        prop_assert_eq!(a.times().iter().enumerate().filter(|(k, _)| a.is_jump(*k)).count(), a.jumps().len());
    }

    #[test]
    fn csv_and_regrid_preserve_the_path(params in path_params()) {
        let path = sample_levy_jump_diffusion(&params).unwrap();
        let back = JumpPath::from_csv(&path.to_csv()).unwrap();
        prop_assert_eq!(back.times(), path.times());
        prop_assert_eq!(back.jumps(), path.jumps());
        for k in 0..path.len() {
            prop_assert!((back.value_at_index(k) - path.value_at_index(k)).amax() <= 1e-12);
        }

        let coarse = path.regrid(params.step * 2.0).unwrap();
        prop_assert_eq!(coarse.jumps(), path.jumps());
        for (k, &t) in coarse.times().iter().enumerate() {
            prop_assert!((coarse.value_at_index(k) - path.value(t).unwrap()).amax() <= 1e-12);
        }
    }

    #[test]
    fn flow_jacobian_matches_differences(
        c in prop::array::uniform4(-0.5..0.5f64),
        w in vector(2, 1.0),
        x0 in vector(2, 1.0),
    ) {
        let fields = nonlinear_fields(c);
        let cfg = OdeConfig::with_substeps(128);
        let (x1, jac) = flow_with_jacobian(&fields, &w, &x0, 1.0, &cfg).unwrap();
        prop_assert_eq!(&x1, &flow(&fields, &w, &x0, 1.0, &cfg).unwrap());
        let fd = central_difference_jacobian(&|y| flow(&fields, &w, y, 1.0, &cfg).unwrap(), &x0);
        prop_assert!((&jac - &fd).amax() <= 1e-4 * fd.amax().max(1.0));
    }

    #[test]
    fn linear_fast_path_matches_stepper(
        a in matrix(3, 1.0),
        b in matrix(3, 1.0),
        w in vector(2, 1.0),
        x0 in vector(3, 2.0),
        u in -1.0..1.0f64,
    ) {
        let fields = LinearFields::new(vec![a, b]).unwrap();
        let fast = flow(&fields, &w, &x0, u, &OdeConfig::default()).unwrap();
        let slow = flow(&fields, &w, &x0, u, &OdeConfig { linear_fast_path: false, ..OdeConfig::default() }).unwrap();
        prop_assert!((&fast - &slow).amax() <= 1e-8 * x0.amax().max(1.0));
    }

    #[test]
    fn marcus_jumps_are_unit_time_flows(z in driver(), a in matrix(2, 1.0), x0 in vector(2, 1.0)) {
        let fields = LinearFields::new(vec![a.clone()]).unwrap();
        let cfg = MarcusConfig::default();
        let traj = solve_point(&fields, &z, &x0, &cfg).unwrap();
        for k in 0..traj.len() {
            match z.jump_at_index(k) {
                Some(dz) => {
                    let again = flow(&fields, dz, traj.pre(k), 1.0, &cfg.ode).unwrap();
                    prop_assert_eq!(&again, traj.post(k));
                    let exact = matrix_exp(&a, dz[0]).value * traj.pre(k);
                    prop_assert!((traj.post(k) - exact).amax() <= 1e-9 * traj.pre(k).amax().max(1.0));
                }
                None => prop_assert_eq!(traj.pre(k), traj.post(k)),
            }
        }
    }

    #[test]
    fn integral_accumulators_add_up(z in driver(), a in matrix(2, 0.8), x0 in vector(2, 1.0)) {
        let y: Arc<dyn VectorFieldSet> = Arc::new(LinearFields::new(vec![a]).unwrap());
        let cfg = MarcusConfig::default();
        let m = marcus_integral(&FieldIntegrand(y.clone()), &*y, &z, &x0, &cfg).unwrap();
        prop_assert_eq!(&m.value, &(&m.ito + &m.qv + &m.jump));
        if z.jumps().is_empty() {
            prop_assert!(m.jump.iter().all(|j| *j == 0.0));
        }

        let p = pushforward_integral(&LinearFields::zero(2, 1), &*y, &z, &x0, &cfg).unwrap();
        prop_assert!((&p.value - &m.value).amax() <= 1e-8);
    }
}
