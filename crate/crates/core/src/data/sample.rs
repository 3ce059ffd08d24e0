use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::TactileClip;

/// Benchmark task tier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    /// Fundamental property understanding.
    #[serde(rename = "FPU")]
    Fpu,
    /// Tactile interaction perception.
    #[serde(rename = "TIP")]
    Tip,
    /// Commonsense-driven reasoning.
    #[serde(rename = "CDR")]
    Cdr,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Fpu, Task::Tip, Task::Cdr];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Fpu => "FPU",
            Task::Tip => "TIP",
            Task::Cdr => "CDR",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "FPU" => Ok(Task::Fpu),
            "TIP" => Ok(Task::Tip),
            "CDR" => Ok(Task::Cdr),
            other => Err(Error::Parameter(format!("invalid task `{other}` (allowed: FPU, TIP, CDR)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Synthetic,
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConversationSample {
    pub id: String,
    pub tactile: TactileClip,
    pub question: String,
    /// One to five reference answers.
    pub answers: Vec<String>,
    pub task: Task,
    pub properties: Vec<String>,
    pub provenance: Provenance,
    /// Generator latents for synthetic samples, keyed by property name.
    pub latents: BTreeMap<String, f64>,
}

impl ConversationSample {
    pub fn validate(&self) -> Result<()> {
        if self.answers.is_empty() || self.answers.len() > 5 {
            return Err(Error::Parameter(format!(
                "sample {} has {} answers (expected 1..=5)",
                self.id,
                self.answers.len()
            )));
        }
        if self.id.is_empty() {
            return Err(Error::Parameter("sample id is empty".into()));
        }
        Ok(())
    }
}
