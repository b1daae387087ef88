use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Ground truth for one utterance. Class index 1 is the deepfake class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Bonafide,
    Deepfake,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Bonafide => 0,
            Label::Deepfake => 1,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Label::Bonafide => Label::Deepfake,
            Label::Deepfake => Label::Bonafide,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Bonafide => "bonafide",
            Label::Deepfake => "deepfake",
        }
    }
}

impl TryFrom<i64> for Label {
    type Error = Error;

    fn try_from(v: i64) -> Result<Self, Error> {
        match v {
            0 => Ok(Label::Bonafide),
            1 => Ok(Label::Deepfake),
            _ => Err(Error::Data(format!("label {v} outside {{0, 1}}"))),
        }
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "bonafide" => Ok(Label::Bonafide),
            "deepfake" => Ok(Label::Deepfake),
            _ => Err(Error::Data(format!("unknown label {s:?}"))),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}
