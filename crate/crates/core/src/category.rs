use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The seven annotated object classes of the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    Ambulance,
    Bicycle,
    Bus,
    Car,
    Human,
    Motorcycle,
    Truck,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::Ambulance,
        Category::Bicycle,
        Category::Bus,
        Category::Car,
        Category::Human,
        Category::Motorcycle,
        Category::Truck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Ambulance => "Ambulance",
            Category::Bicycle => "Bicycle",
            Category::Bus => "Bus",
            Category::Car => "Car",
            Category::Human => "Human",
            Category::Motorcycle => "Motorcycle",
            Category::Truck => "Truck",
        }
    }

    /// Typical box extent as (length, width, height) in meters.
    pub fn nominal_size(self) -> [f64; 3] {
        match self {
            Category::Ambulance => [5.6, 2.2, 2.6],
            Category::Bicycle => [1.8, 0.6, 1.5],
            Category::Bus => [11.0, 2.8, 3.2],
            Category::Car => [4.5, 1.9, 1.6],
            Category::Human => [0.6, 0.6, 1.75],
            Category::Motorcycle => [2.1, 0.8, 1.5],
            Category::Truck => [7.0, 2.5, 3.0],
        }
    }

    /// Nominal cruising speed in m/s used by the world generator.
    pub fn nominal_speed(self) -> f64 {
        match self {
            Category::Human => 1.2,
            Category::Bicycle => 3.5,
            Category::Bus | Category::Truck => 4.0,
            _ => 5.0,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown category `{0}`")]
pub struct UnknownCategory(pub String);

impl FromStr for Category {
    type Err = UnknownCategory;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| UnknownCategory(s.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for c in Category::ALL {
            assert_eq!(c.name().parse::<Category>().unwrap(), c);
        }
        assert!("Trailer".parse::<Category>().is_err());
        assert!("car".parse::<Category>().is_err());
    }
}
