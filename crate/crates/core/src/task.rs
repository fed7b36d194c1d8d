use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Dense prediction problem a run is set up for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Semseg,
    Refseg,
    Depth,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Semseg, TaskKind::Refseg, TaskKind::Depth];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Semseg => "semseg",
            TaskKind::Refseg => "refseg",
            TaskKind::Depth => "depth",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "task",
                name: s.to_string(),
                known: "semseg, refseg, depth".into(),
            })
    }
}
