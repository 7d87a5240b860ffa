use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::SignalError;

/// The nine recognition classes, indexed in the order used by the
/// dataset's published split table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShipType {
    Dredger,
    FishBoat,
    Motorboat,
    MusselBoat,
    NaturalNoise,
    OceanLiner,
    PassengerShip,
    RoRoShip,
    Sailboat,
}

impl ShipType {
    pub const ALL: [ShipType; 9] = [
        ShipType::Dredger,
        ShipType::FishBoat,
        ShipType::Motorboat,
        ShipType::MusselBoat,
        ShipType::NaturalNoise,
        ShipType::OceanLiner,
        ShipType::PassengerShip,
        ShipType::RoRoShip,
        ShipType::Sailboat,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ShipType::Dredger => "dredger",
            ShipType::FishBoat => "fish_boat",
            ShipType::Motorboat => "motorboat",
            ShipType::MusselBoat => "mussel_boat",
            ShipType::NaturalNoise => "natural_noise",
            ShipType::OceanLiner => "ocean_liner",
            ShipType::PassengerShip => "passenger_ship",
            ShipType::RoRoShip => "roro_ship",
            ShipType::Sailboat => "sailboat",
        }
    }
}

impl fmt::Display for ShipType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn normalize(s: &str) -> String {
    s.trim()
        .to_ascii_lowercase()
        .chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .collect()
}

impl FromStr for ShipType {
    type Err = SignalError;

    /// Accepts the canonical snake_case names as well as spaced or hyphenated
    /// spellings ("natural noise", "RO-RO ship").
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = normalize(s);
        ShipType::ALL
            .into_iter()
            .find(|t| normalize(t.name()) == key)
            .ok_or_else(|| SignalError::UnknownLabel(s.to_string()))
    }
}

/// Target size categories for the auxiliary task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeClass {
    None,
    Tiny,
    Small,
    Medium,
    Large,
}

impl SizeClass {
    pub const ALL: [SizeClass; 5] = [
        SizeClass::None,
        SizeClass::Tiny,
        SizeClass::Small,
        SizeClass::Medium,
        SizeClass::Large,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SizeClass::None => "none",
            SizeClass::Tiny => "tiny",
            SizeClass::Small => "small",
            SizeClass::Medium => "medium",
            SizeClass::Large => "large",
        }
    }
}

impl fmt::Display for SizeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SizeClass {
    type Err = SignalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = normalize(s);
        SizeClass::ALL
            .into_iter()
            .find(|c| c.name() == key)
            .ok_or_else(|| SignalError::UnknownLabel(s.to_string()))
    }
}

pub const NUM_TYPES: usize = 9;
pub const NUM_SIZES: usize = 5;

/// Size category of a vessel type. Dredgers count as medium-sized.
pub fn label_size(t: ShipType) -> SizeClass {
    match t {
        ShipType::NaturalNoise => SizeClass::None,
        ShipType::Motorboat | ShipType::Sailboat => SizeClass::Tiny,
        ShipType::FishBoat | ShipType::MusselBoat => SizeClass::Small,
        ShipType::PassengerShip | ShipType::Dredger => SizeClass::Medium,
        ShipType::RoRoShip | ShipType::OceanLiner => SizeClass::Large,
    }
}

/// String-keyed variant of [`label_size`].
pub fn label_size_str(type_label: &str) -> Result<SizeClass, SignalError> {
    Ok(label_size(type_label.parse()?))
}
