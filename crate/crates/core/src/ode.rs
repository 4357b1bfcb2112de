//! Fixed-step Euler solver for ODE blocks.
//!
//! One block evaluates `z(t_{j+1}) = z(t_j) + h * f(z(t_j), t_j)` for
//! `j = 0..C` with `h = 1/C`, reusing a single parameter set for `f`.
//! Time is carried in `f64` on both numeric paths and only converted to the
//! activation format when written into an Add-time plane.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::fixed::FixedFormat;
use crate::layers::{add, add_time, batchnorm, dsc, relu, scale_by, DscSpec, NormParams};
use crate::tensor::Tensor;

/// Right-hand side `f(z, t)` of an ODE block.
pub trait OdeRhs {
    fn eval(&self, z: &Tensor, t: f64) -> Result<Tensor>;

    /// Parameter tensors read by `eval`.
    fn parameters(&self) -> Vec<&Tensor> {
        Vec::new()
    }
}

impl<F> OdeRhs for F
where
    F: Fn(&Tensor, f64) -> Result<Tensor>,
{
    fn eval(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        self(z, t)
    }
}

#[derive(Debug, Clone)]
pub struct OdeBlockSpec<F> {
    pub rhs: F,
    iterations: usize,
}

impl<F: OdeRhs> OdeBlockSpec<F> {
    pub fn new(rhs: F, iterations: usize) -> Result<Self> {
        if iterations == 0 {
            return Err(Error::InvalidConfig("ODE iterations must be >= 1".into()));
        }
        Ok(Self { rhs, iterations })
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// `h = 1 / C`.
    pub fn step_size(&self) -> f64 {
        1.0 / self.iterations as f64
    }

    /// `t_j = j / C`, computed directly rather than by accumulating `h`.
    pub fn time_at(&self, j: usize) -> f64 {
        j as f64 / self.iterations as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdeState {
    pub z: Tensor,
    pub t: f64,
    pub j: usize,
}

impl OdeState {
    pub fn initial(z: Tensor) -> Self {
        Self { z, t: 0.0, j: 0 }
    }
}

/// `z + h * f`. On the fixed path `h` is rounded into the step format
/// (Q2.16) and the product rounded once into `z`'s format.
pub fn euler_update(z: &Tensor, f: &Tensor, h: f64) -> Result<Tensor> {
    if z.shape() != f.shape() {
        return Err(Error::shape("euler_update", z.shape(), f.shape()));
    }
    add(z, &scale_by(f, h, FixedFormat::STEP)?)
}

pub fn ode_step<F: OdeRhs>(state: &OdeState, spec: &OdeBlockSpec<F>) -> Result<OdeState> {
    if state.j >= spec.iterations {
        return Err(Error::InvalidConfig(format!(
            "ode_step past the last iteration ({} of {})",
            state.j, spec.iterations
        )));
    }
    let t = spec.time_at(state.j);
    let f = spec.rhs.eval(&state.z, t)?;
    Ok(OdeState {
        z: euler_update(&state.z, &f, spec.step_size())?,
        t: spec.time_at(state.j + 1),
        j: state.j + 1,
    })
}

pub fn ode_solve<F: OdeRhs>(z0: &Tensor, spec: &OdeBlockSpec<F>) -> Result<Tensor> {
    Ok(ode_solve_traced(z0, spec)?.0)
}

/// What one solve touched: number of `f` evaluations and the distinct
/// parameter buffers (by address) those evaluations read.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveTrace {
    pub evaluations: usize,
    pub parameter_buffers: BTreeSet<usize>,
    pub final_time: f64,
}

pub fn ode_solve_traced<F: OdeRhs>(
    z0: &Tensor,
    spec: &OdeBlockSpec<F>,
) -> Result<(Tensor, SolveTrace)> {
    let mut trace = SolveTrace::default();
    let mut state = OdeState::initial(z0.clone());
    while state.j < spec.iterations {
        trace.evaluations += 1;
        trace
            .parameter_buffers
            .extend(spec.rhs.parameters().into_iter().map(buffer_address));
        state = ode_step(&state, spec)?;
    }
    trace.final_time = state.t;
    Ok((state.z, trace))
}

fn buffer_address(t: &Tensor) -> usize {
    match t.f32_data() {
        Ok(d) => d.as_ptr() as usize,
        Err(_) => t.raw_data().map_or(0, |d| d.as_ptr() as usize),
    }
}

/// The ODE body used by the model:
/// Add time, DSC, BatchNorm, ReLU, Add time, DSC, BatchNorm.
#[derive(Debug, Clone, PartialEq)]
pub struct DscOdeFunc {
    pub dsc1: DscSpec,
    pub bn1: NormParams,
    pub dsc2: DscSpec,
    pub bn2: NormParams,
}

impl DscOdeFunc {
    pub fn param_count(&self) -> usize {
        self.dsc1.param_count()
            + self.bn1.param_count()
            + self.dsc2.param_count()
            + self.bn2.param_count()
    }
}

impl OdeRhs for DscOdeFunc {
    fn eval(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        let y = batchnorm(&dsc(&add_time(z, t)?, &self.dsc1)?, &self.bn1)?;
        let y = relu(&y)?;
        batchnorm(&dsc(&add_time(&y, t)?, &self.dsc2)?, &self.bn2)
    }

    fn parameters(&self) -> Vec<&Tensor> {
        vec![
            &self.dsc1.depthwise.weight,
            &self.dsc1.pointwise.weight,
            &self.bn1.scale,
            &self.bn1.shift,
            &self.dsc2.depthwise.weight,
            &self.dsc2.pointwise.weight,
            &self.bn2.scale,
            &self.bn2.shift,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity(z: &Tensor, _t: f64) -> Result<Tensor> {
        Ok(z.clone())
    }

    fn scalar(v: f32) -> Tensor {
        Tensor::from_f32(&[1], vec![v]).unwrap()
    }

    #[test]
    fn toy_exponential_with_ten_steps() {
        let spec = OdeBlockSpec::new(identity, 10).unwrap();
        let z = ode_solve(&scalar(1.0), &spec).unwrap();
        let got = z.f32_data().unwrap()[0] as f64;
        assert!((got - 1.1f64.powi(10)).abs() <= 1e-6, "{got}");
        assert!((1.1f64.powi(10) - 2.59374246).abs() < 1e-8);
    }

    #[test]
    fn toy_error_shrinks_as_c_doubles() {
        let err = |c| {
            let spec = OdeBlockSpec::new(identity, c).unwrap();
            let z = ode_solve(&scalar(1.0), &spec).unwrap().f32_data().unwrap()[0] as f64;
            (z - std::f64::consts::E).abs()
        };
        let errs: Vec<f64> = [10, 20, 40, 80].into_iter().map(err).collect();
        assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
    }

    #[test]
    fn zero_rhs_is_identity() {
        let zero = |z: &Tensor, _t: f64| Ok(Tensor::zeros(z.shape(), z.path()));
        let z0 = Tensor::from_f32(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let spec = OdeBlockSpec::new(zero, 1).unwrap();
        let s = ode_step(&OdeState::initial(z0.clone()), &spec).unwrap();
        assert!(s.z.bit_eq(&z0));
        assert_eq!((s.t, s.j), (1.0, 1));
    }

    #[test]
    fn single_step_is_a_residual_update() {
        let f = |z: &Tensor, _t: f64| {
            Tensor::from_f32(
                z.shape(),
                z.f32_data()?.iter().map(|v| v * v - 0.3).collect(),
            )
        };
        let z0 = Tensor::from_f32(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let spec = OdeBlockSpec::new(f, 1).unwrap();
        assert_eq!(spec.step_size(), 1.0);
        let z = ode_solve(&z0, &spec).unwrap();
        let expected = add(&z0, &f(&z0, 0.0).unwrap()).unwrap();
        assert!(z.bit_eq(&expected));

        let fx = z0.to_fixed(FixedFormat::ACTIVATION).unwrap();
        let g = |z: &Tensor, _t: f64| scale_by(z, -0.75, FixedFormat::WEIGHT);
        let spec = OdeBlockSpec::new(g, 1).unwrap();
        let z = ode_solve(&fx, &spec).unwrap();
        assert!(z.bit_eq(&add(&fx, &g(&fx, 0.0).unwrap()).unwrap()));
    }

    #[test]
    fn rhs_sees_each_grid_time_once() {
        let seen = std::cell::RefCell::new(Vec::new());
        let f = |z: &Tensor, t: f64| {
            seen.borrow_mut().push(t);
            Ok(Tensor::zeros(z.shape(), z.path()))
        };
        let spec = OdeBlockSpec::new(f, 4).unwrap();
        let (_, trace) = ode_solve_traced(&scalar(0.0), &spec).unwrap();
        assert_eq!(*seen.borrow(), vec![0.0, 0.25, 0.5, 0.75]);
        assert_eq!(trace.evaluations, 4);
        assert_eq!(trace.final_time, 1.0);
    }

    #[test]
    fn final_time_is_one_for_any_c() {
        for c in 1..=100 {
            let spec = OdeBlockSpec::new(identity, c).unwrap();
            let (_, trace) = ode_solve_traced(&scalar(0.0), &spec).unwrap();
            assert_eq!(trace.final_time, 1.0);
        }
    }

    #[test]
    fn unrolled_loop_matches_on_fixed_path() {
        let f = |z: &Tensor, t: f64| {
            let y = scale_by(z, -0.5, FixedFormat::WEIGHT)?;
            add(
                &y,
                &Tensor::from_f32(z.shape(), vec![t as f32; z.len()])?
                    .to_fixed(FixedFormat::ACTIVATION)?,
            )
        };
        let z0 = Tensor::from_f32(&[4], vec![0.3, -1.2, 2.5, 0.0])
            .unwrap()
            .to_fixed(FixedFormat::ACTIVATION)
            .unwrap();
        for c in [1, 2, 5, 10] {
            let spec = OdeBlockSpec::new(f, c).unwrap();
            let solved = ode_solve(&z0, &spec).unwrap();
            let mut z = z0.clone();
            for j in 0..c {
                let fz = f(&z, j as f64 / c as f64).unwrap();
                z = euler_update(&z, &fz, 1.0 / c as f64).unwrap();
            }
            assert!(solved.bit_eq(&z), "C = {c}");
        }
    }

    #[test]
    fn zero_iterations_rejected() {
        assert!(OdeBlockSpec::new(identity, 0).is_err());
    }

    #[test]
    fn stepping_past_the_end_is_an_error() {
        let spec = OdeBlockSpec::new(identity, 1).unwrap();
        let s = OdeState {
            z: scalar(1.0),
            t: 1.0,
            j: 1,
        };
        assert!(ode_step(&s, &spec).is_err());
    }
}
