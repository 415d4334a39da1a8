//! Two-plate LED layout and world-frame LED poses.
//!
//! The bottom board is fixed and its frame is the world frame (z up, plate
//! axis along z). The top board frame is the world frame lifted by
//! `plate_gap`; top-board LEDs store axes pointing down (-z) in that frame.
//!
//! Channel ids: receivers occupy `0..24` (they index the signal vector),
//! emitters occupy `24..30`.

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

pub const EMITTERS_PER_BOARD: usize = 3;
pub const RECEIVERS_PER_CLUSTER: usize = 4;
pub const NUM_EMITTERS: usize = 2 * EMITTERS_PER_BOARD;
pub const NUM_RECEIVERS: usize = NUM_EMITTERS * RECEIVERS_PER_CLUSTER;
pub const NUM_LEDS: usize = NUM_EMITTERS + NUM_RECEIVERS;

/// Largest rotation magnitude accepted by [`Displacement6`], in rad.
pub const MAX_ROTATION: f64 = 0.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid layout config: {0}")]
    InvalidConfig(String),
    #[error("unknown LED id {0}")]
    UnknownId(usize),
    #[error("invalid displacement: {0}")]
    InvalidDisplacement(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Board {
    Top,
    Bottom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Emitter,
    Receiver,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedSpec {
    pub id: usize,
    pub board: Board,
    pub role: Role,
    /// Position in the board frame, mm.
    pub position: Vector3<f64>,
    /// Unit emission/acceptance direction in the board frame.
    pub axis: Vector3<f64>,
    /// For receivers, the cluster they belong to; for emitters, the cluster they face.
    pub cluster: usize,
}

/// Parameters of the default three-fold symmetric layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutConfig {
    /// Separation between the two boards at rest, mm.
    pub plate_gap: f64,
    /// Board radius, mm. Must fit inside the 27 mm sensor diameter.
    pub board_radius: f64,
    /// Radial position of emitters and cluster centers as a fraction of `board_radius`.
    pub emitter_radial_fraction: f64,
    /// Side length of the square formed by a cluster's 4 receivers, mm.
    pub cluster_pitch: f64,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self {
            plate_gap: 6.0,
            board_radius: 12.7,
            emitter_radial_fraction: 0.6,
            cluster_pitch: 2.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorLayout {
    pub plate_gap: f64,
    pub board_radius: f64,
    /// Indexed by id.
    pub leds: Vec<LedSpec>,
    /// `pairing[e]` lists the 4 receiver ids facing emitter `NUM_RECEIVERS + e`.
    pub pairing: Vec<[usize; RECEIVERS_PER_CLUSTER]>,
}

/// Pose of the top plate relative to the bottom plate.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Displacement6 {
    /// mm
    pub translation: Vector3<f64>,
    /// Axis-angle, rad.
    pub rotation: Vector3<f64>,
}

impl Displacement6 {
    pub fn new(translation: Vector3<f64>, rotation: Vector3<f64>) -> Self {
        Self {
            translation,
            rotation,
        }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::new(Vector3::new(x, y, z), Vector3::zeros())
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !self.translation.iter().chain(self.rotation.iter()).all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidDisplacement("non-finite component".into()));
        }
        if self.rotation.norm() >= MAX_ROTATION {
            return Err(GeometryError::InvalidDisplacement(format!(
                "rotation magnitude {} rad exceeds small-angle bound {MAX_ROTATION}",
                self.rotation.norm()
            )));
        }
        Ok(())
    }

    /// Rotates both parts of the displacement about the plate axis.
    pub fn rotated_about_z(&self, angle: f64) -> Self {
        let q = Rotation3::from_axis_angle(&Vector3::z_axis(), angle);
        Self::new(q * self.translation, q * self.rotation)
    }

    pub fn as_array(&self) -> [f64; 6] {
        let t = &self.translation;
        let r = &self.rotation;
        [t.x, t.y, t.z, r.x, r.y, r.z]
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self::new(Vector3::new(v[0], v[1], v[2]), Vector3::new(v[3], v[4], v[5]))
    }
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// First-order rotation `I + [r]x` used for the top plate.
pub fn small_rotation(rotation: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::identity() + skew(rotation)
}

/// Builds the three-fold symmetric layout.
///
/// Bottom-board emitters sit at azimuths 0°, 120°, 240° and face top-board
/// clusters; top-board emitters sit at 60°, 180°, 300° and face bottom-board
/// clusters. Every emitter is coaxial with the center of its facing cluster.
pub fn build_layout(config: &LayoutConfig) -> Result<SensorLayout, GeometryError> {
    let invalid = |m: String| Err(GeometryError::InvalidConfig(m));
    let LayoutConfig {
        plate_gap,
        board_radius,
        emitter_radial_fraction,
        cluster_pitch,
    } = *config;
    if !(plate_gap.is_finite() && plate_gap > 0.0) {
        return invalid(format!("plate_gap must be > 0, got {plate_gap}"));
    }
    if !(board_radius.is_finite() && board_radius > 0.0) {
        return invalid(format!("board_radius must be > 0, got {board_radius}"));
    }
    if board_radius > 13.5 {
        return invalid(format!("board_radius {board_radius} mm exceeds 13.5 mm"));
    }
    if !(cluster_pitch.is_finite() && cluster_pitch > 0.0) {
        return invalid(format!("cluster_pitch must be > 0, got {cluster_pitch}"));
    }
    let radial = emitter_radial_fraction * board_radius;
    if !(radial > 0.0 && radial < board_radius) {
        return invalid(format!(
            "cluster radial offset {radial} mm must lie in (0, board_radius)"
        ));
    }
    // Farthest receiver corner must stay on the board.
    let corner = radial + cluster_pitch / 2.0 * std::f64::consts::SQRT_2;
    if corner > board_radius {
        return invalid(format!(
            "cluster corner at {corner:.3} mm falls outside board radius {board_radius} mm"
        ));
    }

    let half = cluster_pitch / 2.0;
    let mut receivers = Vec::with_capacity(NUM_RECEIVERS);
    let mut emitters = Vec::with_capacity(NUM_EMITTERS);
    let mut pairing = Vec::with_capacity(NUM_EMITTERS);

    // Cluster c: clusters 0..3 on the bottom board, 3..6 on the top board.
    for cluster in 0..NUM_EMITTERS {
        let (rx_board, tx_board, azimuth) = if cluster < EMITTERS_PER_BOARD {
            // Bottom cluster faces a top emitter at 60° + k·120°.
            (Board::Bottom, Board::Top, PI / 3.0 + cluster as f64 * 2.0 * PI / 3.0)
        } else {
            let k = cluster - EMITTERS_PER_BOARD;
            (Board::Top, Board::Bottom, k as f64 * 2.0 * PI / 3.0)
        };
        let (s, c) = azimuth.sin_cos();
        let radial_dir = Vector3::new(c, s, 0.0);
        let tangential_dir = Vector3::new(-s, c, 0.0);
        let center = radial_dir * radial;
        let facing = |b: Board| match b {
            Board::Bottom => Vector3::z(),
            Board::Top => -Vector3::z(),
        };

        let mut ids = [0usize; RECEIVERS_PER_CLUSTER];
        let corners = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];
        for (j, (a, b)) in corners.iter().enumerate() {
            let id = receivers.len();
            ids[j] = id;
            receivers.push(LedSpec {
                id,
                board: rx_board,
                role: Role::Receiver,
                position: center + radial_dir * (a * half) + tangential_dir * (b * half),
                axis: facing(rx_board),
                cluster,
            });
        }
        emitters.push(LedSpec {
            id: NUM_RECEIVERS + cluster,
            board: tx_board,
            role: Role::Emitter,
            position: center,
            axis: facing(tx_board),
            cluster,
        });
        pairing.push(ids);
    }

    let mut leds = receivers;
    leds.extend(emitters);
    Ok(SensorLayout {
        plate_gap,
        board_radius,
        leds,
        pairing,
    })
}

impl SensorLayout {
    pub fn led(&self, id: usize) -> Result<&LedSpec, GeometryError> {
        self.leds.get(id).ok_or(GeometryError::UnknownId(id))
    }

    pub fn receivers(&self) -> impl Iterator<Item = &LedSpec> {
        self.leds.iter().filter(|l| l.role == Role::Receiver)
    }

    pub fn emitters(&self) -> impl Iterator<Item = &LedSpec> {
        self.leds.iter().filter(|l| l.role == Role::Emitter)
    }

    pub fn num_clusters(&self) -> usize {
        self.pairing.len()
    }

    /// World-frame pose of LED `id` under `disp`.
    pub fn led_world_pose(
        &self,
        disp: &Displacement6,
        id: usize,
    ) -> Result<(Vector3<f64>, Vector3<f64>), GeometryError> {
        let led = self.led(id)?;
        disp.validate()?;
        Ok(self.pose_of(led, &small_rotation(&disp.rotation), &disp.translation))
    }

    /// Unchecked pose transform for the hot path; `rot` is the first-order rotation.
    pub(crate) fn pose_of(
        &self,
        led: &LedSpec,
        rot: &Matrix3<f64>,
        translation: &Vector3<f64>,
    ) -> (Vector3<f64>, Vector3<f64>) {
        match led.board {
            Board::Bottom => (led.position, led.axis),
            Board::Top => {
                let p = rot * led.position
                    + translation
                    + Vector3::new(0.0, 0.0, self.plate_gap);
                let a = (rot * led.axis).normalize();
                (p, a)
            }
        }
    }

    /// Permutation `perm` such that rotating LED `i` by `angle` about z lands on LED `perm[i]`.
    pub fn rotation_permutation(&self, angle: f64, tol: f64) -> Option<Vec<usize>> {
        let q = Rotation3::from_axis_angle(&Vector3::z_axis(), angle);
        self.leds
            .iter()
            .map(|led| {
                let p = q * led.position;
                let a = q * led.axis;
                self.leds
                    .iter()
                    .find(|o| {
                        o.board == led.board
                            && o.role == led.role
                            && (o.position - p).norm() <= tol
                            && (o.axis - a).norm() <= tol
                    })
                    .map(|o| o.id)
            })
            .collect()
    }
}
