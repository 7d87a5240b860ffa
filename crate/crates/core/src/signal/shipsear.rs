//! Recording-level train/test split of the ShipsEar subset used for the
//! nine-class task. Ids are the numeric prefixes of the dataset's WAV files.

use std::collections::BTreeMap;

use super::{ShipType, SplitTag};

/// `(type, training ids, test ids)`
pub const SPLIT: [(ShipType, &[u32], &[u32]); 9] = [
    (ShipType::Dredger, &[80, 93, 94, 96], &[95]),
    (ShipType::FishBoat, &[73, 74, 76], &[75]),
    (
        ShipType::Motorboat,
        &[21, 26, 33, 39, 45, 51, 52, 70, 77, 79],
        &[27, 50, 72],
    ),
    (ShipType::MusselBoat, &[46, 47, 49, 66], &[48]),
    (
        ShipType::NaturalNoise,
        &[81, 82, 84, 85, 86, 88, 89, 90, 91],
        &[83, 87, 92],
    ),
    (ShipType::OceanLiner, &[16, 22, 23, 25, 69], &[24, 71]),
    (
        ShipType::PassengerShip,
        &[
            6, 7, 8, 10, 11, 12, 14, 17, 32, 34, 36, 38, 40, 41, 43, 53, 54, 59, 60, 61, 63, 64, 67,
        ],
        &[9, 13, 35, 42, 55, 62, 65],
    ),
    (ShipType::RoRoShip, &[18, 19, 58], &[20, 78]),
    (ShipType::Sailboat, &[37, 56, 68], &[57]),
];

/// The same table as shipped CSV (`recording_id,split`).
pub const SPLIT_CSV: &str = include_str!("../../data/shipsear_split.csv");

pub fn type_of(id: u32) -> Option<ShipType> {
    SPLIT
        .iter()
        .find(|(_, train, test)| train.contains(&id) || test.contains(&id))
        .map(|(t, _, _)| *t)
}

pub fn split_table() -> BTreeMap<u32, SplitTag> {
    let mut m = BTreeMap::new();
    for (_, train, test) in SPLIT {
        for &id in train {
            m.insert(id, SplitTag::Train);
        }
        for &id in test {
            m.insert(id, SplitTag::Test);
        }
    }
    m
}
