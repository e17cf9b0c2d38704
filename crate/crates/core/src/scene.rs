//! Sample, label and detection types shared by the generator, the
//! simulators, the model and the metrics.

use alloc::vec::Vec;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum Class {
    Car,
    Cyclist,
    Pedestrian,
}

impl Class {
    pub const ALL: [Class; 3] = [Class::Car, Class::Cyclist, Class::Pedestrian];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Car => "car",
            Class::Cyclist => "cyclist",
            Class::Pedestrian => "pedestrian",
        }
    }
}

/// Ground-truth box: center and full extent in world units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Label {
    pub center: [f32; 2],
    pub size: [f32; 2],
    pub class: Class,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub center: [f32; 2],
    pub size: [f32; 2],
    pub class: Class,
    pub score: f32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LidarPoint {
    pub x: f32,
    pub y: f32,
    /// Distance from the sensor origin.
    pub range: f32,
    pub intensity: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Presence {
    pub camera: bool,
    pub lidar: bool,
}

impl Presence {
    pub const ALL: Presence = Presence { camera: true, lidar: true };
}

impl Default for Presence {
    fn default() -> Self {
        Self::ALL
    }
}

/// Paired camera image (`[H, W]`, values in `[0, 1]`) and lidar sweep with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSample {
    pub image: Tensor<f32>,
    pub points: Vec<LidarPoint>,
    pub labels: Vec<Label>,
    pub present: Presence,
}

impl MultimodalSample {
    pub fn image_size(&self) -> usize {
        self.image.shape()[0]
    }
}

pub fn distance(a: [f32; 2], b: [f32; 2]) -> f32 {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    libm::sqrtf(dx * dx + dy * dy)
}

/// Derive an independent stream seed from a base seed (splitmix64 finaliser).
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
