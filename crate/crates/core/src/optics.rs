//! Radiometric forward model for LED emitter/receiver pairs.
//!
//! Each emitter is a generalized-Lambertian source (`cos^m` about its axis),
//! each receiver has a `cos^k` angular acceptance, and light decays with
//! inverse-square spreading times Beer-Lambert attenuation in the medium.

use crate::geometry::{small_rotation, Displacement6, SensorLayout, NUM_RECEIVERS};
use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

/// Below this emitter-receiver distance (mm) the pair geometry is degenerate.
pub const MIN_PAIR_DISTANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpticsError {
    #[error("degenerate pose: emitter-receiver distance {0:e} mm")]
    DegeneratePose(f64),
    #[error("invalid medium: {0}")]
    InvalidMedium(String),
    #[error("invalid noise model: {0}")]
    InvalidNoise(String),
    #[error("invalid sweep range: {0}")]
    InvalidRange(String),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum MediumKind {
    Air,
    Pdms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MediumModel {
    pub name: MediumKind,
    /// Emission cone sharpness `m`; larger is narrower.
    pub cone_exponent: f64,
    /// Receiver angular sensitivity `k`.
    pub acceptance_exponent: f64,
    /// Attenuation coefficient, 1/mm.
    pub attenuation: f64,
    /// ADC counts · mm².
    pub intensity_scale: f64,
    /// Optional constant per-channel offset (counts) from emitters reflecting
    /// back onto their own board. Off when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub back_reflection: Option<Vec<f64>>,
}

impl MediumModel {
    /// Narrow-cone LED in air: half-power half-angle of 10°.
    pub fn air() -> Self {
        Self {
            name: MediumKind::Air,
            cone_exponent: 45.0,
            acceptance_exponent: 4.0,
            attenuation: 0.0,
            intensity_scale: 2.0e5,
            back_reflection: None,
        }
    }

    /// Same LEDs cast in PDMS: wider cone, weak attenuation.
    pub fn pdms() -> Self {
        Self {
            name: MediumKind::Pdms,
            cone_exponent: 18.0,
            acceptance_exponent: 4.0,
            attenuation: 0.02,
            intensity_scale: 2.0e5,
            back_reflection: None,
        }
    }

    pub fn preset(kind: MediumKind) -> Self {
        match kind {
            MediumKind::Air => Self::air(),
            MediumKind::Pdms => Self::pdms(),
        }
    }

    pub fn validate(&self) -> Result<(), OpticsError> {
        let bad = |m: String| Err(OpticsError::InvalidMedium(m));
        if !(self.cone_exponent >= 1.0) {
            return bad(format!("cone_exponent must be >= 1, got {}", self.cone_exponent));
        }
        if !(self.acceptance_exponent >= 1.0) {
            return bad(format!(
                "acceptance_exponent must be >= 1, got {}",
                self.acceptance_exponent
            ));
        }
        if !(self.attenuation >= 0.0 && self.attenuation.is_finite()) {
            return bad(format!("attenuation must be >= 0, got {}", self.attenuation));
        }
        if !(self.intensity_scale > 0.0 && self.intensity_scale.is_finite()) {
            return bad(format!("intensity_scale must be > 0, got {}", self.intensity_scale));
        }
        if let Some(offsets) = &self.back_reflection {
            if offsets.len() != NUM_RECEIVERS {
                return bad(format!(
                    "back_reflection needs {NUM_RECEIVERS} offsets, got {}",
                    offsets.len()
                ));
            }
            if offsets.iter().any(|v| !v.is_finite()) {
                return bad("back_reflection offsets must be finite".into());
            }
        }
        Ok(())
    }
}

impl Default for MediumModel {
    fn default() -> Self {
        Self::pdms()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    /// Gaussian noise std on ordinary channels, counts.
    pub base_std: f64,
    pub noisy_channels: Vec<usize>,
    /// Gaussian noise std on the noisy channels, counts.
    pub noisy_std: f64,
    pub adc_bits: u32,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            base_std: 2.0,
            noisy_channels: vec![3, 9, 14, 20],
            noisy_std: 10.0,
            adc_bits: 12,
        }
    }
}

impl NoiseModel {
    /// Default channel assignment with both std values set to zero.
    pub fn noiseless() -> Self {
        Self {
            base_std: 0.0,
            noisy_std: 0.0,
            ..Self::default()
        }
    }

    pub fn full_scale(&self) -> u16 {
        ((1u32 << self.adc_bits) - 1) as u16
    }

    pub fn std_for(&self, channel: usize) -> f64 {
        if self.noisy_channels.contains(&channel) {
            self.noisy_std
        } else {
            self.base_std
        }
    }

    /// Zero-noise models are allowed; otherwise the noisy channels must be noisier.
    pub fn validate(&self) -> Result<(), OpticsError> {
        let bad = |m: String| Err(OpticsError::InvalidNoise(m));
        if !(1..=16).contains(&self.adc_bits) {
            return bad(format!("adc_bits must be in 1..=16, got {}", self.adc_bits));
        }
        if !(self.base_std >= 0.0 && self.noisy_std >= 0.0) {
            return bad("noise std values must be >= 0".into());
        }
        let silent = self.base_std == 0.0 && self.noisy_std == 0.0;
        if !silent && self.noisy_std <= self.base_std {
            return bad(format!(
                "noisy_std ({}) must exceed base_std ({})",
                self.noisy_std, self.base_std
            ));
        }
        let mut ids = self.noisy_channels.clone();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != 4 || self.noisy_channels.len() != 4 {
            return bad(format!(
                "exactly 4 distinct noisy channels required, got {:?}",
                self.noisy_channels
            ));
        }
        if let Some(&c) = ids.iter().find(|&&c| c >= NUM_RECEIVERS) {
            return bad(format!("noisy channel {c} is not a receiver id"));
        }
        Ok(())
    }
}

/// One timestamped ADC snapshot of all receivers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalFrame {
    pub t: f64,
    pub signals: [u16; NUM_RECEIVERS],
}

/// Noise-free received intensity for one emitter/receiver pair, in counts.
pub fn pair_irradiance(
    emitter: (&Vector3<f64>, &Vector3<f64>),
    receiver: (&Vector3<f64>, &Vector3<f64>),
    medium: &MediumModel,
) -> Result<f64, OpticsError> {
    let (e_pos, e_axis) = emitter;
    let (r_pos, r_axis) = receiver;
    let d = r_pos - e_pos;
    let r2 = d.norm_squared();
    let r = r2.sqrt();
    if !(r >= MIN_PAIR_DISTANCE) {
        return Err(OpticsError::DegeneratePose(r));
    }
    let cos_e = e_axis.dot(&d) / r;
    let cos_r = -r_axis.dot(&d) / r;
    if cos_e <= 0.0 || cos_r <= 0.0 {
        return Ok(0.0);
    }
    Ok(medium.intensity_scale
        * cos_e.powf(medium.cone_exponent)
        * cos_r.powf(medium.acceptance_exponent)
        * (-medium.attenuation * r).exp()
        / r2)
}

/// Noise-free, unquantized signal on every receiver.
///
/// Each receiver integrates every emitter on the opposite board, so light
/// bleeding into neighbouring clusters is included.
pub fn irradiance_vector(
    layout: &SensorLayout,
    disp: &Displacement6,
    medium: &MediumModel,
) -> Result<[f64; NUM_RECEIVERS], OpticsError> {
    disp.validate()?;
    let rot = small_rotation(&disp.rotation);
    let emitters: Vec<_> = layout
        .emitters()
        .map(|e| (e.board, layout.pose_of(e, &rot, &disp.translation)))
        .collect();
    let mut out = [0.0; NUM_RECEIVERS];
    for rx in layout.receivers() {
        let (rp, ra) = layout.pose_of(rx, &rot, &disp.translation);
        let mut sum = 0.0;
        for (board, (ep, ea)) in &emitters {
            if *board != rx.board {
                sum += pair_irradiance((ep, ea), (&rp, &ra), medium)?;
            }
        }
        if let Some(offsets) = &medium.back_reflection {
            sum += offsets[rx.id];
        }
        out[rx.id] = sum;
    }
    Ok(out)
}

/// Clamps to the ADC range and rounds half-to-even.
pub fn adc_quantize(value: f64, noise: &NoiseModel) -> u16 {
    let fs = f64::from(noise.full_scale());
    if value.is_nan() {
        return 0;
    }
    value.clamp(0.0, fs).round_ties_even() as u16
}

/// Synthesizes one noisy, quantized frame.
///
/// Exactly one standard-normal draw is consumed per channel regardless of
/// the noise level, so the stream position depends only on the frame count.
pub fn frame_signals<R: Rng + ?Sized>(
    layout: &SensorLayout,
    disp: &Displacement6,
    medium: &MediumModel,
    noise: &NoiseModel,
    rng: &mut R,
    t: f64,
) -> Result<SignalFrame, OpticsError> {
    let clean = irradiance_vector(layout, disp, medium)?;
    let mut signals = [0u16; NUM_RECEIVERS];
    for (ch, (out, v)) in signals.iter_mut().zip(clean).enumerate() {
        let z: f64 = rng.sample(StandardNormal);
        *out = adc_quantize(v + noise.std_for(ch) * z, noise);
    }
    Ok(SignalFrame { t, signals })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    /// Receiver offset perpendicular to the pair axis.
    Horizontal,
    /// Receiver offset along the pair axis (changes separation).
    Vertical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub start: f64,
    pub stop: f64,
    pub step: f64,
    /// Nominal emitter-receiver separation, mm.
    pub separation: f64,
}

/// Irradiance profile of a single coaxial pair while the receiver moves.
///
/// Sample offsets lie on the grid `k * step` (anchored at zero) inside
/// `[start, stop]`, so symmetric ranges give exactly mirrored offsets.
pub fn sweep_pair(medium: &MediumModel, spec: &SweepSpec) -> Result<Vec<(f64, f64)>, OpticsError> {
    medium.validate()?;
    let SweepSpec {
        axis,
        start,
        stop,
        step,
        separation,
    } = *spec;
    if !(step > 0.0 && step.is_finite()) {
        return Err(OpticsError::InvalidRange(format!("step must be > 0, got {step}")));
    }
    if !(start.is_finite() && stop.is_finite() && start < stop) {
        return Err(OpticsError::InvalidRange(format!(
            "range [{start}, {stop}] is empty"
        )));
    }
    if !(separation > 0.0) {
        return Err(OpticsError::InvalidRange(format!(
            "separation must be > 0, got {separation}"
        )));
    }
    let first = (start / step - 1e-9).ceil() as i64;
    let last = (stop / step + 1e-9).floor() as i64;
    if last < first {
        return Err(OpticsError::InvalidRange(format!(
            "no grid point of step {step} inside [{start}, {stop}]"
        )));
    }
    if last - first > 10_000_000 {
        return Err(OpticsError::InvalidRange("too many sweep points".into()));
    }
    let e_pos = Vector3::zeros();
    let e_axis = Vector3::z();
    let r_axis = -Vector3::z();
    (first..=last)
        .map(|k| {
            let offset = k as f64 * step;
            let r_pos = match axis {
                SweepAxis::Horizontal => Vector3::new(offset, 0.0, separation),
                SweepAxis::Vertical => {
                    let g = separation + offset;
                    if g < MIN_PAIR_DISTANCE {
                        return Err(OpticsError::InvalidRange(format!(
                            "offset {offset} mm collapses the pair separation"
                        )));
                    }
                    Vector3::new(0.0, 0.0, g)
                }
            };
            let v = pair_irradiance((&e_pos, &e_axis), (&r_pos, &r_axis), medium)?;
            Ok((offset, v))
        })
        .collect()
}

/// Full width at half maximum of a sampled profile, with linear
/// interpolation of the half-power crossings. `None` if the profile never
/// drops below half its peak on one side.
pub fn fwhm(profile: &[(f64, f64)]) -> Option<f64> {
    let (peak_idx, &(_, peak)) = profile
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1))?;
    if peak <= 0.0 {
        return None;
    }
    let half = peak / 2.0;
    let cross = |i: usize, j: usize| {
        let (x0, y0) = profile[i];
        let (x1, y1) = profile[j];
        x0 + (half - y0) * (x1 - x0) / (y1 - y0)
    };
    let right = (peak_idx + 1..profile.len())
        .find(|&j| profile[j].1 < half)
        .map(|j| cross(j - 1, j))?;
    let left = (0..peak_idx)
        .rev()
        .find(|&j| profile[j].1 < half)
        .map(|j| cross(j + 1, j))?;
    Some(right - left)
}

pub fn write_sweep_csv<W: Write>(mut w: W, profile: &[(f64, f64)]) -> std::io::Result<()> {
    writeln!(w, "offset_mm,irradiance")?;
    for (x, v) in profile {
        writeln!(w, "{x},{v}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_layout, LayoutConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn coaxial(g: f64, medium: &MediumModel) -> f64 {
        let z = Vector3::z();
        pair_irradiance(
            (&Vector3::zeros(), &z),
            (&Vector3::new(0.0, 0.0, g), &(-z)),
            medium,
        )
        .unwrap()
    }

    #[test]
    fn coaxial_air_is_inverse_square() {
        let air = MediumModel::air();
        assert!((coaxial(6.0, &air) - 2.0e5 / 36.0).abs() < 1e-9);
    }

    #[test]
    fn ninety_degrees_off_axis_is_dark() {
        let z = Vector3::z();
        let v = pair_irradiance(
            (&Vector3::zeros(), &z),
            (&Vector3::new(3.0, 0.0, 0.0), &(-z)),
            &MediumModel::air(),
        )
        .unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn pdms_vs_air_coaxial() {
        let g = 6.0;
        let air = MediumModel::air();
        let pdms = MediumModel::pdms();
        let expected = coaxial(g, &air) * (-pdms.attenuation * g).exp() * pdms.intensity_scale
            / air.intensity_scale;
        assert!((coaxial(g, &pdms) - expected).abs() < 1e-9);
    }

    #[test]
    fn degenerate_pair() {
        let z = Vector3::z();
        let p = Vector3::new(1.0, 1.0, 1.0);
        assert!(matches!(
            pair_irradiance((&p, &z), (&p, &z), &MediumModel::air()),
            Err(OpticsError::DegeneratePose(_))
        ));
    }

    #[test]
    fn quantize_edges() {
        let n = NoiseModel::default();
        assert_eq!(adc_quantize(-3.2, &n), 0);
        assert_eq!(adc_quantize(4095.0 + 10.0, &n), 4095);
        assert_eq!(adc_quantize(2.5, &n), 2);
        assert_eq!(adc_quantize(3.5, &n), 4);
        assert_eq!(adc_quantize(f64::NAN, &n), 0);
    }

    #[test]
    fn noise_model_validation() {
        assert!(NoiseModel::default().validate().is_ok());
        assert!(NoiseModel::noiseless().validate().is_ok());
        let mut n = NoiseModel::default();
        n.noisy_channels = vec![1, 2, 3];
        assert!(n.validate().is_err());
        n = NoiseModel::default();
        n.noisy_std = 1.0;
        assert!(n.validate().is_err());
        n = NoiseModel::default();
        n.noisy_channels = vec![1, 2, 3, 24];
        assert!(n.validate().is_err());
    }

    #[test]
    fn medium_ordering() {
        let air = MediumModel::air();
        let pdms = MediumModel::pdms();
        assert!(pdms.cone_exponent < air.cone_exponent);
        assert!(pdms.attenuation > air.attenuation);
        assert_eq!(air.attenuation, 0.0);
        // 10° half-power half-angle in air.
        let half = (10f64.to_radians().cos()).powf(air.cone_exponent);
        assert!((half - 0.5).abs() < 0.01);
    }

    #[test]
    fn noiseless_frame_is_deterministic() {
        let layout = build_layout(&LayoutConfig::default()).unwrap();
        let medium = MediumModel::pdms();
        let noise = NoiseModel::noiseless();
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let a = frame_signals(&layout, &Displacement6::zero(), &medium, &noise, &mut r1, 0.0).unwrap();
        let b = frame_signals(&layout, &Displacement6::zero(), &medium, &noise, &mut r2, 0.0).unwrap();
        assert_eq!(a, b);
        // Rest signals should sit well inside the ADC range.
        for &s in &a.signals {
            assert!(s > 200 && s < 4000, "rest signal {s}");
        }
    }

    #[test]
    fn seeded_noisy_frame_reproducible() {
        let layout = build_layout(&LayoutConfig::default()).unwrap();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            frame_signals(
                &layout,
                &Displacement6::zero(),
                &MediumModel::pdms(),
                &NoiseModel::default(),
                &mut rng,
                0.0,
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn back_reflection_offsets_baseline() {
        let layout = build_layout(&LayoutConfig::default()).unwrap();
        let plain = irradiance_vector(&layout, &Displacement6::zero(), &MediumModel::pdms()).unwrap();
        let mut m = MediumModel::pdms();
        m.back_reflection = Some(vec![25.0; NUM_RECEIVERS]);
        let shifted = irradiance_vector(&layout, &Displacement6::zero(), &m).unwrap();
        for (a, b) in plain.iter().zip(shifted) {
            assert!((b - a - 25.0).abs() < 1e-9);
        }
    }

    #[test]
    fn tenth_mm_is_resolvable() {
        let layout = build_layout(&LayoutConfig::default()).unwrap();
        let medium = MediumModel::pdms();
        let rest = irradiance_vector(&layout, &Displacement6::zero(), &medium).unwrap();
        let moved =
            irradiance_vector(&layout, &Displacement6::from_translation(0.1, 0.0, 0.0), &medium).unwrap();
        let max_change = rest
            .iter()
            .zip(moved)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_change > 5.0 * NoiseModel::default().base_std);
    }

    #[test]
    fn sweep_errors() {
        let air = MediumModel::air();
        let spec = |start, stop, step| SweepSpec {
            axis: SweepAxis::Horizontal,
            start,
            stop,
            step,
            separation: 6.0,
        };
        assert!(sweep_pair(&air, &spec(1.0, 1.0, 0.1)).is_err());
        assert!(sweep_pair(&air, &spec(0.0, 1.0, 0.0)).is_err());
        assert!(sweep_pair(&air, &spec(2.0, -2.0, 0.1)).is_err());
        let vert = SweepSpec {
            axis: SweepAxis::Vertical,
            ..spec(-7.0, 1.0, 0.5)
        };
        assert!(sweep_pair(&air, &vert).is_err());
    }

    #[test]
    fn tenth_mm_sweep_grid() {
        let spec = SweepSpec {
            axis: SweepAxis::Horizontal,
            start: -1.0,
            stop: 1.0,
            step: 0.1,
            separation: 6.0,
        };
        let p = sweep_pair(&MediumModel::air(), &spec).unwrap();
        assert_eq!(p.len(), 21);
        assert_eq!(p[10].0, 0.0);
    }

    #[test]
    fn fwhm_of_triangle() {
        let p: Vec<(f64, f64)> = (-10..=10).map(|i| (i as f64, 10.0 - (i as f64).abs())).collect();
        assert!((fwhm(&p).unwrap() - 10.0).abs() < 1e-12);
        let flat = vec![(0.0, 1.0), (1.0, 1.0)];
        assert_eq!(fwhm(&flat), None);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn quantize_monotone(a in -1e4f64..1e4, b in -1e4f64..1e4) {
                let n = NoiseModel::default();
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                prop_assert!(adc_quantize(lo, &n) <= adc_quantize(hi, &n));
            }

            #[test]
            fn irradiance_nonnegative(
                ex in -5.0f64..5.0, ey in -5.0f64..5.0, ez in -5.0f64..5.0,
                rx in -5.0f64..5.0, ry in -5.0f64..5.0, rz in 0.5f64..10.0,
                ax in -1.0f64..1.0, ay in -1.0f64..1.0,
            ) {
                let ea = Vector3::new(ax, ay, 1.0).normalize();
                let ra = Vector3::new(-ay, ax, -1.0).normalize();
                let v = pair_irradiance(
                    (&Vector3::new(ex, ey, ez), &ea),
                    (&Vector3::new(rx, ry, ez + rz), &ra),
                    &MediumModel::pdms(),
                ).unwrap();
                prop_assert!(v >= 0.0);
            }

            #[test]
            fn coaxial_decreasing(g in 0.5f64..20.0, dg in 0.01f64..5.0) {
                for m in [MediumModel::air(), MediumModel::pdms()] {
                    prop_assert!(coaxial(g + dg, &m) < coaxial(g, &m));
                }
            }
        }
    }
}
