//! One step of the linearized activity dynamics `a' = σ(K ∗ ((a + O)/2))`.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::LiftedField3D;
use crate::kernels::{group_convolve, StationaryKernel};
use crate::registry::Registry;

/// Activation applied to the modulus of each complex value; phase is kept.
pub trait Nonlinearity: Send + Sync {
    fn name(&self) -> &'static str;
    fn apply(&self, x: f64) -> f64;
}

pub struct Identity;

impl Nonlinearity for Identity {
    fn name(&self) -> &'static str {
        "identity"
    }

    fn apply(&self, x: f64) -> f64 {
        x
    }
}

pub struct Tanh;

impl Nonlinearity for Tanh {
    fn name(&self) -> &'static str {
        "tanh"
    }

    fn apply(&self, x: f64) -> f64 {
        x.tanh()
    }
}

pub static NONLINEARITIES: Registry<dyn Nonlinearity> =
    Registry::new("nonlinearity", &[("identity", || Box::new(Identity)), ("tanh", || Box::new(Tanh))]);

pub fn nonlinearity(name: &str) -> Result<Box<dyn Nonlinearity>> {
    NONLINEARITIES.create(name)
}

pub fn mean_field_step(
    a: &LiftedField3D,
    input: &LiftedField3D,
    kernel: &StationaryKernel,
    sigma: &dyn Nonlinearity,
) -> Result<LiftedField3D> {
    if !a.same_shape(input) {
        return Err(Error::Size("activity and input differ in shape".into()));
    }
    let mid = LiftedField3D::new(
        a.width(),
        a.height(),
        a.n_theta(),
        a.data().iter().zip(input.data()).map(|(p, q)| (p + q) * 0.5).collect(),
    )?
    .with_spacing(a.spacing());
    let mut out = group_convolve(kernel, &mid)?;
    if sigma.name() != "identity" {
        out.data_mut().iter_mut().for_each(|z| {
            let m = z.norm();
            *z = if m == 0.0 {
                Complex64::new(0.0, 0.0)
            } else {
                *z * (sigma.apply(m) / m)
            };
        });
    }
    Ok(out)
}
