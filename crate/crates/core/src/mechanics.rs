//! Contact loads on the mounted finger, and the elastic response of the
//! PDMS layer between the plates.

use crate::geometry::Displacement6;
use nalgebra::{Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use thiserror::Error;

/// Relaxation time used when hysteresis is switched on without an explicit value, s.
pub const DEFAULT_TAU_RELAX: f64 = 0.15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MechanicsError {
    #[error("invalid compliance model: {0}")]
    InvalidCompliance(String),
    #[error("invalid contact: {0}")]
    InvalidContact(String),
    #[error("invalid finger config: {0}")]
    InvalidFinger(String),
    #[error("non-finite wrench")]
    NonFiniteWrench,
    #[error("overload: {0}")]
    Overload(String),
}

/// Force (N) and torque (N·mm) about the sensor origin.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Wrench {
    pub force: Vector3<f64>,
    pub torque: Vector3<f64>,
}

impl Wrench {
    pub fn new(force: Vector3<f64>, torque: Vector3<f64>) -> Self {
        Self { force, torque }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    /// `[fx, fy, fz, tx, ty, tz]`
    pub fn as_array(&self) -> [f64; 6] {
        let (f, t) = (&self.force, &self.torque);
        [f.x, f.y, f.z, t.x, t.y, t.z]
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self::new(Vector3::new(v[0], v[1], v[2]), Vector3::new(v[3], v[4], v[5]))
    }

    pub fn as_vector(&self) -> Vector6<f64> {
        Vector6::from(self.as_array())
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }
}

impl std::ops::Add for Wrench {
    type Output = Wrench;
    fn add(self, rhs: Wrench) -> Wrench {
        Wrench::new(self.force + rhs.force, self.torque + rhs.torque)
    }
}

impl std::ops::Mul<f64> for Wrench {
    type Output = Wrench;
    fn mul(self, s: f64) -> Wrench {
        Wrench::new(self.force * s, self.torque * s)
    }
}

impl std::iter::Sum for Wrench {
    fn sum<I: Iterator<Item = Wrench>>(iter: I) -> Wrench {
        iter.fold(Wrench::zero(), |a, b| a + b)
    }
}

/// Linear map from wrench to plate displacement, plus optional relaxation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComplianceModel {
    /// Row-major 6×6; rows are (tx, ty, tz mm; rx, ry, rz rad), columns (fx, fy, fz N; tx, ty, tz N·mm).
    pub matrix: [[f64; 6]; 6],
    /// First-order relaxation time, s. Zero disables relaxation.
    pub tau_relax: f64,
}

impl Default for ComplianceModel {
    fn default() -> Self {
        Self::diagonal([0.2, 0.2, 0.1, 2e-4, 2e-4, 2e-4], 0.0)
    }
}

impl ComplianceModel {
    pub fn diagonal(diag: [f64; 6], tau_relax: f64) -> Self {
        let mut matrix = [[0.0; 6]; 6];
        for (i, d) in diag.into_iter().enumerate() {
            matrix[i][i] = d;
        }
        Self { matrix, tau_relax }
    }

    pub fn matrix6(&self) -> Matrix6<f64> {
        Matrix6::from_fn(|i, j| self.matrix[i][j])
    }

    /// Checks symmetry, positive definiteness and conditioning (< 1e6).
    pub fn validate(&self) -> Result<(), MechanicsError> {
        let bad = |m: String| Err(MechanicsError::InvalidCompliance(m));
        let c = self.matrix6();
        if c.iter().any(|v| !v.is_finite()) {
            return bad("non-finite entry".into());
        }
        let scale = c.amax();
        for i in 0..6 {
            for j in (i + 1)..6 {
                if (c[(i, j)] - c[(j, i)]).abs() > 1e-12 * scale {
                    return bad(format!("not symmetric at ({i},{j})"));
                }
            }
        }
        if c.cholesky().is_none() {
            return bad("not positive definite".into());
        }
        let eig = c.symmetric_eigenvalues();
        let cond = eig.max() / eig.min();
        if !(cond < 1e6) {
            return bad(format!("condition number {cond:e} exceeds 1e6"));
        }
        if !(self.tau_relax >= 0.0 && self.tau_relax.is_finite()) {
            return bad(format!("tau_relax must be >= 0, got {}", self.tau_relax));
        }
        Ok(())
    }

    /// Elastic equilibrium displacement `C·w`.
    ///
    /// Fails with `Overload` if translation exceeds `max_translation` (mm)
    /// or the rotation leaves the small-angle regime.
    pub fn displacement_from_wrench(
        &self,
        w: &Wrench,
        max_translation: f64,
    ) -> Result<Displacement6, MechanicsError> {
        if !w.is_finite() {
            return Err(MechanicsError::NonFiniteWrench);
        }
        let x = w.as_array();
        let mut d = [0.0; 6];
        for (out, row) in d.iter_mut().zip(&self.matrix) {
            *out = row.iter().zip(&x).map(|(c, v)| c * v).sum();
        }
        let disp = Displacement6::from_array(d);
        let tn = disp.translation.norm();
        if tn > max_translation {
            return Err(MechanicsError::Overload(format!(
                "translation {tn:.3} mm exceeds {max_translation:.3} mm"
            )));
        }
        if disp.validate().is_err() {
            return Err(MechanicsError::Overload(format!(
                "rotation {:.3} rad leaves the small-angle regime",
                disp.rotation.norm()
            )));
        }
        Ok(disp)
    }

    /// One step of first-order relaxation of `state` toward `target`.
    pub fn relax_step(&self, state: &Displacement6, target: &Displacement6, dt: f64) -> Displacement6 {
        if self.tau_relax == 0.0 {
            return *target;
        }
        let decay = (-dt / self.tau_relax).exp();
        Displacement6::new(
            target.translation + (state.translation - target.translation) * decay,
            target.rotation + (state.rotation - target.rotation) * decay,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContactHeight {
    Top,
    Middle,
    Bottom,
}

impl ContactHeight {
    pub const ALL: [ContactHeight; 3] = [Self::Top, Self::Middle, Self::Bottom];

    pub fn index(self) -> usize {
        match self {
            Self::Top => 0,
            Self::Middle => 1,
            Self::Bottom => 2,
        }
    }
}

/// Rigid cylindrical finger mounted on the top plate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FingerConfig {
    /// mm
    pub radius: f64,
    /// mm
    pub length: f64,
    /// Contact heights above the top plate for top, middle, bottom, mm.
    pub heights: [f64; 3],
    /// Force magnitude beyond which a simulated load is rejected, N.
    pub overload_force: f64,
}

impl Default for FingerConfig {
    fn default() -> Self {
        Self {
            radius: 8.0,
            length: 100.0,
            heights: [85.0, 50.0, 15.0],
            overload_force: 15.0,
        }
    }
}

impl FingerConfig {
    pub fn height(&self, h: ContactHeight) -> f64 {
        self.heights[h.index()]
    }

    pub fn validate(&self) -> Result<(), MechanicsError> {
        let bad = |m: String| Err(MechanicsError::InvalidFinger(m));
        if !(self.radius > 0.0 && self.length > 0.0) {
            return bad("radius and length must be > 0".into());
        }
        if self.heights.iter().any(|&h| !(h >= 0.0 && h <= self.length)) {
            return bad(format!("heights {:?} must lie on the finger", self.heights));
        }
        if !(self.overload_force > 0.0) {
            return bad("overload_force must be > 0".into());
        }
        Ok(())
    }
}

/// A horizontal push on the finger with a trapezoidal force profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactEvent {
    /// rad, in [0, 2π)
    pub azimuth: f64,
    /// mm above the top plate
    pub height: f64,
    /// N
    pub peak_force: f64,
    /// s
    pub t_start: f64,
    /// s
    pub ramp: f64,
    /// s, in [2, 5]
    pub hold: f64,
    /// mm
    pub finger_radius: f64,
}

impl ContactEvent {
    pub fn validate(&self) -> Result<(), MechanicsError> {
        let bad = |m: String| Err(MechanicsError::InvalidContact(m));
        if !(self.peak_force > 0.0 && self.peak_force.is_finite()) {
            return bad(format!("peak_force must be > 0, got {}", self.peak_force));
        }
        if !(2.0..=5.0).contains(&self.hold) {
            return bad(format!("hold {} s outside [2, 5] s", self.hold));
        }
        if !(0.0..TAU).contains(&self.azimuth) {
            return bad(format!("azimuth {} outside [0, 2π)", self.azimuth));
        }
        if !(self.ramp >= 0.0 && self.t_start >= 0.0) {
            return bad("ramp and t_start must be >= 0".into());
        }
        Ok(())
    }

    /// Time at which the force returns to zero.
    pub fn t_end(&self) -> f64 {
        self.t_start + 2.0 * self.ramp + self.hold
    }

    /// Trapezoidal force magnitude at time `t`.
    pub fn force_magnitude(&self, t: f64) -> f64 {
        let s = t - self.t_start;
        let up = self.ramp;
        let down = self.ramp + self.hold;
        if s < 0.0 || s > down + self.ramp {
            0.0
        } else if s < up {
            self.peak_force * s / self.ramp
        } else if s <= down {
            self.peak_force
        } else {
            self.peak_force * (down + self.ramp - s) / self.ramp
        }
    }

    /// Lever arm from the sensor origin to the contact point, mm.
    pub fn lever_arm(&self) -> Vector3<f64> {
        let (s, c) = self.azimuth.sin_cos();
        Vector3::new(self.finger_radius * c, self.finger_radius * s, self.height)
    }

    /// Wrench at the sensor frame: radially inward horizontal force, torque `r × f`.
    pub fn wrench_at(&self, t: f64) -> Wrench {
        let mag = self.force_magnitude(t);
        if mag == 0.0 {
            return Wrench::zero();
        }
        let (s, c) = self.azimuth.sin_cos();
        let f = Vector3::new(-mag * c, -mag * s, 0.0);
        Wrench::new(f, self.lever_arm().cross(&f))
    }
}

/// Free-function form of [`ContactEvent::wrench_at`].
pub fn wrench_from_contact(c: &ContactEvent, t: f64) -> Wrench {
    c.wrench_at(t)
}
