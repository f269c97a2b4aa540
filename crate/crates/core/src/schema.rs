//! Label schema: the ten semantic classes, the Ignore sentinel, scene
//! attribute enumerations and the color codec used for mask files.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mask value for pixels that carry no label.
pub const IGNORE_INDEX: u8 = 255;
/// Color of [`IGNORE_INDEX`] pixels in encoded masks.
pub const IGNORE_COLOR: [u8; 3] = [0, 0, 0];
pub const NUM_CLASSES: usize = 10;
pub const NUM_WEATHER: usize = 4;
pub const NUM_TIMES: usize = 2;

pub type Rgb = [u8; 3];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchemaError {
    #[error("invalid class index {value} at pixel {pixel}")]
    InvalidIndex { pixel: usize, value: u8 },
    #[error("unknown color {rgb:?} at pixel (row {row}, col {col})")]
    UnknownColor { row: usize, col: usize, rgb: Rgb },
    #[error("buffer of length {len} does not hold a {height}x{width} image")]
    BadBuffer { len: usize, height: usize, width: usize },
    #[error("unknown {kind} name {name:?}")]
    UnknownName { kind: &'static str, name: String },
}

/// The ten evaluated classes, in their canonical index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum SemanticClass {
    Road = 0,
    Sidewalk = 1,
    Building = 2,
    Pole = 3,
    TrafficLight = 4,
    TrafficSign = 5,
    Vegetation = 6,
    Sky = 7,
    Person = 8,
    Car = 9,
}

impl SemanticClass {
    pub const ALL: [SemanticClass; NUM_CLASSES] = [
        SemanticClass::Road,
        SemanticClass::Sidewalk,
        SemanticClass::Building,
        SemanticClass::Pole,
        SemanticClass::TrafficLight,
        SemanticClass::TrafficSign,
        SemanticClass::Vegetation,
        SemanticClass::Sky,
        SemanticClass::Person,
        SemanticClass::Car,
    ];

    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn from_index(index: u8) -> Option<Self> {
        Self::ALL.get(index as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SemanticClass::Road => "Road",
            SemanticClass::Sidewalk => "Sidewalk",
            SemanticClass::Building => "Building",
            SemanticClass::Pole => "Pole",
            SemanticClass::TrafficLight => "TrafficLight",
            SemanticClass::TrafficSign => "TrafficSign",
            SemanticClass::Vegetation => "Vegetation",
            SemanticClass::Sky => "Sky",
            SemanticClass::Person => "Person",
            SemanticClass::Car => "Car",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|c| c.name() == name)
    }

    /// Cityscapes label-table color for this class.
    pub fn color(self) -> Rgb {
        match self {
            SemanticClass::Road => [128, 64, 128],
            SemanticClass::Sidewalk => [244, 35, 232],
            SemanticClass::Building => [70, 70, 70],
            SemanticClass::Pole => [153, 153, 153],
            SemanticClass::TrafficLight => [250, 170, 30],
            SemanticClass::TrafficSign => [220, 220, 0],
            SemanticClass::Vegetation => [107, 142, 35],
            SemanticClass::Sky => [70, 130, 180],
            SemanticClass::Person => [220, 20, 60],
            SemanticClass::Car => [0, 0, 142],
        }
    }

    pub fn from_color(rgb: Rgb) -> Option<Self> {
        Self::ALL.iter().copied().find(|c| c.color() == rgb)
    }
}

impl fmt::Display for SemanticClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Color for a raw mask value; `None` when the value is neither a class nor Ignore.
pub fn index_color(index: u8) -> Option<Rgb> {
    if index == IGNORE_INDEX {
        Some(IGNORE_COLOR)
    } else {
        SemanticClass::from_index(index).map(SemanticClass::color)
    }
}

pub fn is_valid_label(index: u8) -> bool {
    index == IGNORE_INDEX || (index as usize) < NUM_CLASSES
}

macro_rules! named_enum {
    ($ty:ident, $kind:literal, [$($variant:ident => $name:literal),+ $(,)?]) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($ty::$variant => $name),+
                }
            }

            pub fn index(self) -> usize {
                Self::ALL.iter().position(|v| *v == self).unwrap()
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = SchemaError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    other => Err(SchemaError::UnknownName { kind: $kind, name: other.to_string() }),
                }
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeatherCondition {
    Normal,
    Rain,
    Fog,
    Snow,
}

named_enum!(WeatherCondition, "weather", [Normal => "normal", Rain => "rain", Fog => "fog", Snow => "snow"]);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeOfDay {
    Day,
    Night,
}

named_enum!(TimeOfDay, "time", [Day => "day", Night => "night"]);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    StandardReal,
    AdverseSynthetic,
}

named_enum!(DomainTag, "domain", [StandardReal => "standard_real", AdverseSynthetic => "adverse_synthetic"]);

/// Replaces each mask value with its class color. `mask` is row-major `H×W`;
/// the result is row-major `H×W×3`.
pub fn encode_mask(mask: &[u8]) -> Result<Vec<u8>, SchemaError> {
    let mut out = Vec::with_capacity(mask.len() * 3);
    for (pixel, &value) in mask.iter().enumerate() {
        let rgb = index_color(value).ok_or(SchemaError::InvalidIndex { pixel, value })?;
        out.extend_from_slice(&rgb);
    }
    Ok(out)
}

/// Inverse of [`encode_mask`]. Fails on the first pixel whose color is not in
/// the palette.
pub fn decode_mask(rgb: &[u8], height: usize, width: usize) -> Result<Vec<u8>, SchemaError> {
    if rgb.len() != height * width * 3 {
        return Err(SchemaError::BadBuffer { len: rgb.len(), height, width });
    }
    rgb.chunks_exact(3)
        .enumerate()
        .map(|(i, px)| {
            let color = [px[0], px[1], px[2]];
            if color == IGNORE_COLOR {
                Ok(IGNORE_INDEX)
            } else {
                SemanticClass::from_color(color).map(SemanticClass::index).ok_or(SchemaError::UnknownColor {
                    row: i / width,
                    col: i % width,
                    rgb: color,
                })
            }
        })
        .collect()
}
