//! The 14 output classes and the label vector that carries them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 14;

/// Fixed class order used by bitstrings, logits and reports.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Effusion",
    "Fibrosis",
    "Hernia",
    "Infiltration",
    "Mass",
    "No Finding",
    "Nodule",
    "Pleural Thickening",
    "Pneumonia",
    "Pneumothorax",
];

pub const NO_FINDING: usize = 9;

pub fn class_index(name: &str) -> Option<usize> {
    CLASS_NAMES
        .iter()
        .position(|c| c.eq_ignore_ascii_case(name.trim()))
}

/// Indices of the 13 findings (everything except No Finding).
pub fn finding_indices() -> impl Iterator<Item = usize> {
    (0..NUM_CLASSES).filter(|&i| i != NO_FINDING)
}

/// One boolean per canonical class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct LabelVector(pub [bool; NUM_CLASSES]);

impl LabelVector {
    /// Sets the given findings and derives No Finding from them.
    pub fn from_findings(findings: impl IntoIterator<Item = usize>) -> Self {
        let mut v = [false; NUM_CLASSES];
        for i in findings {
            assert!(
                i < NUM_CLASSES && i != NO_FINDING,
                "not a finding index: {i}"
            );
            v[i] = true;
        }
        v[NO_FINDING] = !v.iter().any(|&b| b);
        LabelVector(v)
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        (0..NUM_CLASSES).filter(|&i| self.0[i])
    }

    /// No Finding is set exactly when no finding is.
    pub fn is_consistent(&self) -> bool {
        let any = finding_indices().any(|i| self.0[i]);
        self.0[NO_FINDING] != any
    }

    pub fn to_bitstring(&self) -> String {
        self.0.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn as_f64(&self) -> [f64; NUM_CLASSES] {
        self.0.map(|b| if b { 1.0 } else { 0.0 })
    }
}

impl fmt::Display for LabelVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_bitstring())
    }
}

impl FromStr for LabelVector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.chars().count() != NUM_CLASSES {
            return Err(Error::Validation(format!(
                "label bitstring must have {NUM_CLASSES} characters, got {s:?}"
            )));
        }
        let mut v = [false; NUM_CLASSES];
        for (i, ch) in s.chars().enumerate() {
            v[i] = match ch {
                '0' => false,
                '1' => true,
                _ => {
                    return Err(Error::Validation(format!(
                        "label bitstring {s:?} has non-binary character {ch:?}"
                    )))
                }
            };
        }
        Ok(LabelVector(v))
    }
}

impl Serialize for LabelVector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_bitstring())
    }
}

impl<'de> Deserialize<'de> for LabelVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Radiograph projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum View {
    #[serde(rename = "PA")]
    Pa,
    #[serde(rename = "AP")]
    Ap,
    #[serde(rename = "LATERAL")]
    Lateral,
}

impl View {
    pub fn is_frontal(self) -> bool {
        matches!(self, View::Pa | View::Ap)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            View::Pa => "PA",
            View::Ap => "AP",
            View::Lateral => "LATERAL",
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "PA" => Ok(View::Pa),
            "AP" => Ok(View::Ap),
            "LATERAL" | "LAT" | "LL" => Ok(View::Lateral),
            other => Err(Error::Validation(format!("unknown view {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_matches_reporting_order() {
        assert_eq!(CLASS_NAMES[NO_FINDING], "No Finding");
        assert_eq!(class_index("pneumothorax"), Some(13));
        assert_eq!(finding_indices().count(), 13);
    }

    #[test]
    fn no_finding_is_derived() {
        let empty = LabelVector::from_findings([]);
        assert!(empty.get(NO_FINDING));
        assert!(empty.is_consistent());
        let one = LabelVector::from_findings([4]);
        assert!(!one.get(NO_FINDING));
        assert_eq!(one.to_bitstring(), "00001000000000");
    }

    #[test]
    fn bitstring_parse() {
        let v: LabelVector = "01000000010000".parse().unwrap();
        assert!(v.get(1) && v.get(9));
        assert!("0100".parse::<LabelVector>().is_err());
        assert!("0100000001000x".parse::<LabelVector>().is_err());
    }
}
