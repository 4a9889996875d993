use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Ground-truth class of a presentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    BonaFide,
    Attack,
}

impl Label {
    pub fn is_attack(self) -> bool {
        matches!(self, Label::Attack)
    }

    pub fn other(self) -> Label {
        match self {
            Label::BonaFide => Label::Attack,
            Label::Attack => Label::BonaFide,
        }
    }

    /// Token used in score files.
    pub fn as_score_token(self) -> &'static str {
        match self {
            Label::BonaFide => "bonafide",
            Label::Attack => "attack",
        }
    }

    /// Token used in dataset sample files.
    pub fn as_sample_token(self) -> &'static str {
        match self {
            Label::BonaFide => "bonafide",
            Label::Attack => "morph",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_score_token())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bonafide" => Ok(Label::BonaFide),
            "attack" | "morph" => Ok(Label::Attack),
            other => Err(format!("unknown label '{other}'")),
        }
    }
}
