use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PATCH: usize = 14;
pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sensor {
    #[serde(rename = "gelsight")]
    GelSight,
    #[serde(rename = "gelsight-mini")]
    GelSightMini,
}

impl Sensor {
    pub fn as_str(self) -> &'static str {
        match self {
            Sensor::GelSight => "gelsight",
            Sensor::GelSightMini => "gelsight-mini",
        }
    }
}

/// `N × H × W × 3` tactile frames, row-major. A still image is a clip with
/// one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TactileClip {
    frames: Vec<f64>,
    n: usize,
    height: usize,
    width: usize,
    pub sensor: Sensor,
}

impl TactileClip {
    pub fn new(frames: Vec<f64>, n: usize, height: usize, width: usize, sensor: Sensor) -> Result<Self> {
        if n == 0 {
            return Err(Error::Parameter("a clip needs at least one frame".into()));
        }
        if height == 0 || width == 0 || height % PATCH != 0 || width % PATCH != 0 {
            return Err(Error::shape("tactile clip (H, W must be multiples of 14)", &[height, width], &[PATCH, PATCH]));
        }
        if frames.len() != n * height * width * CHANNELS {
            return Err(Error::shape("tactile clip", &[n, height, width, CHANNELS], &[frames.len()]));
        }
        Ok(TactileClip { frames, n, height, width, sensor })
    }

    pub fn from_image(image: Vec<f64>, height: usize, width: usize, sensor: Sensor) -> Result<Self> {
        Self::new(image, 1, height, width, sensor)
    }

    pub fn num_frames(&self) -> usize {
        self.n
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.height, self.width, CHANNELS]
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        let len = self.height * self.width * CHANNELS;
        &self.frames[i * len..(i + 1) * len]
    }

    pub fn data(&self) -> &[f64] {
        &self.frames
    }

    /// Tactile tokens per frame: `H·W / 14²`.
    pub fn num_patches(&self) -> usize {
        num_patches(self.height, self.width)
    }
}

pub fn num_patches(height: usize, width: usize) -> usize {
    (height * width) / (PATCH * PATCH)
}
