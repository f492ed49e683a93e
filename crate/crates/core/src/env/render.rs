use serde::{Deserialize, Serialize};

use super::{Point, WorldState, FEATURE_WIDTH};

pub const PIXEL_SIDE: usize = 16;

const BLOB_SIGMA: f64 = 0.045;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObservationMode {
    /// Effector, R, G, W positions and the gripper flag.
    #[default]
    Feature,
    /// Grayscale top-down image, row-major.
    Pixel,
}

impl ObservationMode {
    pub fn width(self) -> usize {
        match self {
            ObservationMode::Feature => FEATURE_WIDTH,
            ObservationMode::Pixel => PIXEL_SIDE * PIXEL_SIDE,
        }
    }
}

/// Observation in `[0, 1]`, a deterministic function of the state.
pub fn render(state: &WorldState, mode: ObservationMode) -> Vec<f64> {
    match mode {
        ObservationMode::Feature => {
            let flag = if state.gripper_closed { 1.0 } else { 0.0 };
            let mut v = Vec::with_capacity(FEATURE_WIDTH);
            for p in [state.effector, state.red, state.green, state.white] {
                v.extend_from_slice(&p);
            }
            v.push(flag);
            v
        }
        ObservationMode::Pixel => {
            let effector = if state.gripper_closed { 1.0 } else { 0.9 };
            let blobs: [(Point, f64); 4] = [
                (state.white, 0.25),
                (state.green, 0.5),
                (state.red, 0.7),
                (state.effector, effector),
            ];
            let mut img = vec![0.0; PIXEL_SIDE * PIXEL_SIDE];
            for (row, chunk) in img.chunks_mut(PIXEL_SIDE).enumerate() {
                let y = (row as f64 + 0.5) / PIXEL_SIDE as f64;
                for (col, px) in chunk.iter_mut().enumerate() {
                    let x = (col as f64 + 0.5) / PIXEL_SIDE as f64;
                    for &(p, intensity) in &blobs {
                        let d2 = (x - p[0]).powi(2) + (y - p[1]).powi(2);
                        *px = f64::max(*px, intensity * (-d2 / (2.0 * BLOB_SIGMA * BLOB_SIGMA)).exp());
                    }
                }
            }
            img
        }
    }
}
