use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

/// ISO-3166 alpha-2 style country code: two ASCII uppercase letters.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CountryCode([u8; 2]);

impl CountryCode {
    pub fn new(code: &str) -> Option<Self> {
        let bytes = code.trim().as_bytes();
        if bytes.len() != 2 || !bytes.iter().all(|b| b.is_ascii_alphabetic()) {
            return None;
        }
        Some(CountryCode([bytes[0].to_ascii_uppercase(), bytes[1].to_ascii_uppercase()]))
    }

    /// Code number `index` in the sequence AA, AB, ..., AZ, BA, ...
    pub fn from_index(index: usize) -> Self {
        assert!(index < 26 * 26, "country index out of range");
        CountryCode([b'A' + (index / 26) as u8, b'A' + (index % 26) as u8])
    }

    pub fn as_str(&self) -> &str {
        std::str::from_utf8(&self.0).expect("country codes are ascii")
    }
}

impl fmt::Display for CountryCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Debug for CountryCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_str())
    }
}

impl FromStr for CountryCode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CountryCode::new(s).ok_or_else(|| Error::UnknownCountry(format!("`{s}` is not a two-letter code")))
    }
}

impl Serialize for CountryCode {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for CountryCode {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        CountryCode::new(&s).ok_or_else(|| serde::de::Error::custom(format!("invalid country code `{s}`")))
    }
}

/// The eight civilizational blocks used to label countries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Civilization {
    African,
    Buddhist,
    Hindu,
    Islamic,
    LatinAmerican,
    Orthodox,
    Sinic,
    Western,
}

impl Civilization {
    pub const ALL: [Civilization; 8] = [
        Civilization::African,
        Civilization::Buddhist,
        Civilization::Hindu,
        Civilization::Islamic,
        Civilization::LatinAmerican,
        Civilization::Orthodox,
        Civilization::Sinic,
        Civilization::Western,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Civilization::African => "African",
            Civilization::Buddhist => "Buddhist",
            Civilization::Hindu => "Hindu",
            Civilization::Islamic => "Islamic",
            Civilization::LatinAmerican => "Latin American",
            Civilization::Orthodox => "Orthodox",
            Civilization::Sinic => "Sinic",
            Civilization::Western => "Western",
        }
    }
}

impl fmt::Display for Civilization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Civilization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        let civ = match key.as_str() {
            "african" | "africa" => Civilization::African,
            "buddhist" => Civilization::Buddhist,
            "hindu" => Civilization::Hindu,
            "islamic" => Civilization::Islamic,
            "latinamerican" | "latinam" | "latam" => Civilization::LatinAmerican,
            "orthodox" => Civilization::Orthodox,
            "sinic" => Civilization::Sinic,
            "western" => Civilization::Western,
            _ => return Err(Error::UnknownCivilization(s.to_string())),
        };
        Ok(civ)
    }
}
