//! Registered systems. Nonlinear fields live here in code; linear systems
//! can also be given as matrix literals through `custom-linear`.

use std::sync::Arc;

use anyhow::{anyhow, bail, ensure, Result};
use jumpflow::decompose::Chart;
use jumpflow::geometry::ComplementaryPair;
use jumpflow::odeflow::{FnFields, LinearFields, VectorFieldSet};
use jumpflow::semimartingale::JumpPath;
use nalgebra::{DMatrix, DVector};

use crate::config::ScenarioSpec;

/// A scalar the flow should conserve; its drift is reported.
#[derive(Clone, Copy)]
pub struct Invariant {
    pub name: &'static str,
    pub eval: fn(&DVector<f64>) -> f64,
}

pub struct Model {
    pub fields: Arc<dyn VectorFieldSet>,
    pub x0: DVector<f64>,
    /// Present for linear scenarios.
    pub generators: Option<Vec<DMatrix<f64>>>,
    /// Horizontal block size for block-adapted decompositions.
    pub split: usize,
    pub pair: ComplementaryPair,
    /// Coordinates for the determinant criterion.
    pub chart: Chart,
    pub invariant: Option<Invariant>,
    /// Closed-form stopping time read off the driver, where one is known.
    pub stopping_oracle: Option<fn(&JumpPath) -> Option<f64>>,
}

impl Model {
    pub fn dim(&self) -> usize {
        self.x0.len()
    }

    /// The single generator of a one-channel linear scenario.
    pub fn single_generator(&self) -> Option<&DMatrix<f64>> {
        match self.generators.as_deref() {
            Some([a]) => Some(a),
            _ => None,
        }
    }
}

pub trait Scenario: Send + Sync {
    fn name(&self) -> &'static str;
    fn summary(&self) -> &'static str;
    /// Builds the system for a driver with `channels` components.
    fn build(&self, spec: &ScenarioSpec, channels: usize) -> Result<Model>;
}

const NORM: Invariant = Invariant { name: "norm", eval: |x| x.norm() };

pub fn registry() -> &'static [&'static dyn Scenario] {
    &[&Rotation, &RadialLinear, &SphereTangent, &CustomLinear, &Zero]
}

pub fn lookup(name: &str) -> Result<&'static dyn Scenario> {
    registry().iter().copied().find(|s| s.name() == name).ok_or_else(|| {
        let known: Vec<_> = registry().iter().map(|s| s.name()).collect();
        anyhow!("unknown scenario {name:?} (known: {})", known.join(", "))
    })
}

pub fn build(spec: &ScenarioSpec, channels: usize) -> Result<Model> {
    lookup(&spec.name)?.build(spec, channels)
}

fn initial_state(spec: &ScenarioSpec, default: &[f64]) -> Result<DVector<f64>> {
    let x0 = spec.initial_state.as_deref().unwrap_or(default);
    ensure!(x0.len() == default.len(), "scenario.initial_state needs {} entries, got {}", default.len(), x0.len());
    Ok(DVector::from_column_slice(x0))
}

fn one_channel(name: &str, channels: usize) -> Result<()> {
    ensure!(channels == 1, "scenario {name} is driven by one channel, the path has {channels}");
    Ok(())
}

fn linear_model(
    matrices: Vec<DMatrix<f64>>,
    x0: DVector<f64>,
    split: usize,
    pair: ComplementaryPair,
    chart: Chart,
    invariant: Option<Invariant>,
) -> Result<Model> {
    Ok(Model {
        fields: Arc::new(LinearFields::new(matrices.clone())?),
        x0,
        generators: Some(matrices),
        split,
        pair,
        chart,
        invariant,
        stopping_oracle: None,
    })
}

/// First grid time at which `cos(Z_t - Z_0)` vanishes or changes sign,
/// checking left limits at jumps.
fn rotation_first_passage(z: &JumpPath) -> Option<f64> {
    let z0 = z.value_at_index(0)[0];
    let mut last = 1.0f64;
    for k in 1..z.len() {
        for c in [(z.left_limit_at_index(k)[0] - z0).cos(), (z.value_at_index(k)[0] - z0).cos()] {
            if c.abs() <= 1e-12 || c.signum() != last.signum() {
                return Some(z.times()[k]);
            }
            last = c;
        }
    }
    None
}

struct Rotation;

impl Scenario for Rotation {
    fn name(&self) -> &'static str {
        "rotation"
    }

    fn summary(&self) -> &'static str {
        "planar rotation generator, first coordinate horizontal"
    }

    fn build(&self, spec: &ScenarioSpec, channels: usize) -> Result<Model> {
        one_channel(self.name(), channels)?;
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let x0 = initial_state(spec, &[1.0, 0.0])?;
        let mut model =
            linear_model(vec![a], x0, 1, ComplementaryPair::coordinate(2, 1), Chart::Block { p: 1 }, Some(NORM))?;
        model.stopping_oracle = Some(rotation_first_passage);
        Ok(model)
    }
}

struct RadialLinear;

impl Scenario for RadialLinear {
    fn name(&self) -> &'static str {
        "radial-linear"
    }

    fn summary(&self) -> &'static str {
        "linear planar field split into spheres and rays"
    }

    fn build(&self, spec: &ScenarioSpec, channels: usize) -> Result<Model> {
        let matrices = if spec.matrices.is_empty() {
            one_channel(self.name(), channels)?;
            vec![DMatrix::from_row_slice(2, 2, &[0.3, -0.8, 0.5, -0.1])]
        } else {
            parse_matrices(&spec.matrices, channels)?
        };
        ensure!(matrices[0].nrows() == 2, "radial-linear is planar");
        let x0 = initial_state(spec, &[1.0, 0.5])?;
        let pair = ComplementaryPair::spherical_radial(2);
        linear_model(matrices, x0, 1, pair.clone(), Chart::Adapted(pair), None)
    }
}

struct SphereTangent;

impl Scenario for SphereTangent {
    fn name(&self) -> &'static str {
        "sphere-tangent"
    }

    fn summary(&self) -> &'static str {
        "nonlinear fields tangent to the unit circle or sphere"
    }

    fn build(&self, spec: &ScenarioSpec, channels: usize) -> Result<Model> {
        let n = spec.dim.unwrap_or(2);
        let mut fields = FnFields::new(n);
        match n {
            2 => {
                for i in 0..channels {
                    let c = 0.5 / (i + 1) as f64;
                    let k = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
                    fields = speed_scaled(fields, k, 0, c);
                }
            }
            3 => {
                ensure!(channels <= 3, "sphere-tangent in 3-D takes at most 3 channels");
                for i in 0..channels {
                    let axis = nalgebra::Vector3::from_fn(|j, _| if j == i { 1.0 } else { 0.0 });
                    let k = DMatrix::from_iterator(3, 3, axis.cross_matrix().iter().copied());
                    fields = speed_scaled(fields, k, i, 0.3);
                }
            }
            _ => bail!("sphere-tangent supports dim 2 or 3, got {n}"),
        }
        let default: Vec<f64> = if n == 2 { vec![0.6, 0.8] } else { vec![0.0, 0.6, 0.8] };
        let x0 = initial_state(spec, &default)?;
        Ok(Model {
            fields: Arc::new(fields),
            x0,
            generators: None,
            split: spec.split.unwrap_or(n - 1),
            pair: ComplementaryPair::spherical_radial(n),
            chart: Chart::Adapted(ComplementaryPair::spherical_radial(n)),
            invariant: Some(NORM),
            stopping_oracle: None,
        })
    }
}

/// `x ↦ (1 + c x_i) K x` with `K` skew.
fn speed_scaled(fields: FnFields, k: DMatrix<f64>, i: usize, c: f64) -> FnFields {
    let kk = k.clone();
    fields.with_field(
        move |x| &k * x * (1.0 + c * x[i]),
        move |x| {
            let kx = &kk * x;
            let mut jac = &kk * (1.0 + c * x[i]);
            for r in 0..x.len() {
                jac[(r, i)] += c * kx[r];
            }
            jac
        },
    )
}

struct CustomLinear;

impl Scenario for CustomLinear {
    fn name(&self) -> &'static str {
        "custom-linear"
    }

    fn summary(&self) -> &'static str {
        "linear fields from matrix literals"
    }

    fn build(&self, spec: &ScenarioSpec, channels: usize) -> Result<Model> {
        let matrices = parse_matrices(&spec.matrices, channels)?;
        let n = matrices[0].nrows();
        let default: Vec<f64> = (0..n).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
        let x0 = initial_state(spec, &default)?;
        let split = spec.split.unwrap_or(1);
        ensure!(split >= 1 && split < n, "scenario.split must lie in 1..{n}");
        linear_model(matrices, x0, split, ComplementaryPair::coordinate(n, split), Chart::Block { p: split }, None)
    }
}

struct Zero;

impl Scenario for Zero {
    fn name(&self) -> &'static str {
        "zero"
    }

    fn summary(&self) -> &'static str {
        "vanishing fields"
    }

    fn build(&self, spec: &ScenarioSpec, channels: usize) -> Result<Model> {
        let n = spec.dim.unwrap_or(2);
        ensure!(n >= 2, "zero scenario needs dim >= 2");
        let x0 = initial_state(spec, &vec![1.0; n])?;
        let split = spec.split.unwrap_or(1);
        ensure!(split >= 1 && split < n, "scenario.split must lie in 1..{n}");
        let pair = ComplementaryPair::coordinate(n, split);
        linear_model(vec![DMatrix::zeros(n, n); channels], x0, split, pair, Chart::Block { p: split }, None)
    }
}

fn parse_matrices(literals: &[Vec<Vec<f64>>], channels: usize) -> Result<Vec<DMatrix<f64>>> {
    ensure!(!literals.is_empty(), "scenario.matrices is required");
    ensure!(
        literals.len() == channels,
        "scenario.matrices has {} matrices, the path has {channels} channels",
        literals.len()
    );
    let n = literals[0].len();
    ensure!(n >= 2, "scenario.matrices must be at least 2x2");
    literals
        .iter()
        .enumerate()
        .map(|(i, rows)| {
            ensure!(
                rows.len() == n && rows.iter().all(|r| r.len() == n),
                "scenario.matrices[{i}] must be {n}x{n}"
            );
            Ok(DMatrix::from_row_iterator(n, n, rows.iter().flatten().copied()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use jumpflow::odeflow::central_difference_jacobian;

    #[test]
    fn every_scenario_builds_with_defaults() {
        for s in registry() {
            let mut spec = ScenarioSpec::named(s.name());
            if s.name() == "custom-linear" {
                spec.matrices = vec![vec![vec![0.0, 1.0, 0.0], vec![-1.0, 0.0, 0.0], vec![0.0, 0.0, 0.5]]];
            }
            let model = s.build(&spec, 1).unwrap();
            assert_eq!(model.fields.dim(), model.dim(), "{}", s.name());
            assert_eq!(model.fields.count(), 1);
            assert!(lookup(s.name()).is_ok());
        }
        assert!(lookup("nope").is_err());
    }

    #[test]
    fn sphere_fields_are_tangent_with_exact_jacobians() {
        for dim in [2, 3] {
            let spec = ScenarioSpec { dim: Some(dim), ..ScenarioSpec::named("sphere-tangent") };
            let model = SphereTangent.build(&spec, dim - 1).unwrap();
            let x = DVector::from_fn(dim, |i, _| 0.3 + 0.2 * i as f64);
            for i in 0..dim - 1 {
                let f = model.fields.eval(i, &x);
                assert!(f.dot(&x).abs() < 1e-14);
                let fd = central_difference_jacobian(&|y| model.fields.eval(i, y), &x);
                assert!((model.fields.jacobian(i, &x) - fd).amax() < 1e-7);
            }
        }
    }

    #[test]
    fn matrix_literals_are_row_major() {
        let spec = ScenarioSpec {
            matrices: vec![vec![vec![1.0, 2.0], vec![3.0, 4.0]]],
            ..ScenarioSpec::named("custom-linear")
        };
        let model = CustomLinear.build(&spec, 1).unwrap();
        assert_eq!(model.single_generator().unwrap()[(0, 1)], 2.0);
        assert!(CustomLinear.build(&spec, 2).is_err());
    }

    #[test]
    fn rotation_first_passage_reads_the_driver() {
        use jumpflow::semimartingale::deterministic_path;
        let v = |x: f64| DVector::from_element(1, x);
        let times = [0.0, 0.5, 1.0];
        let z = deterministic_path(&times, &[v(0.0), v(0.0), v(0.0)], &[(0.5, v(std::f64::consts::FRAC_PI_2))]).unwrap();
        assert_eq!(rotation_first_passage(&z), Some(0.5));
        let z = deterministic_path(&times, &[v(0.0), v(1.0), v(1.2)], &[]).unwrap();
        assert_eq!(rotation_first_passage(&z), None);
        let z = deterministic_path(&times, &[v(0.0), v(1.0), v(2.0)], &[]).unwrap();
        assert_eq!(rotation_first_passage(&z), Some(1.0));
    }
}
