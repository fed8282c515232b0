//! The five prediction tasks and validated subsets of them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    /// Object detection.
    #[serde(rename = "od")]
    Od,
    /// Semantic segmentation.
    #[serde(rename = "ss")]
    Ss,
    /// Instance segmentation.
    #[serde(rename = "is")]
    Is,
    /// Dense depth.
    #[serde(rename = "d")]
    D,
    /// Instance depth.
    #[serde(rename = "id")]
    Id,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Od, Task::Ss, Task::Is, Task::D, Task::Id];

    pub fn short(self) -> &'static str {
        match self {
            Task::Od => "od",
            Task::Ss => "ss",
            Task::Is => "is",
            Task::D => "d",
            Task::Id => "id",
        }
    }

    /// Semantic tasks are OD, SS and IS; geometric tasks are D and ID.
    pub fn is_semantic(self) -> bool {
        matches!(self, Task::Od | Task::Ss | Task::Is)
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.short().to_uppercase())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "od" => Ok(Task::Od),
            "ss" => Ok(Task::Ss),
            "is" => Ok(Task::Is),
            "d" => Ok(Task::D),
            "id" => Ok(Task::Id),
            other => Err(Error::Config(format!("unknown task '{other}'"))),
        }
    }
}

/// Non-empty set of tasks in which IS and ID only appear together with OD.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Task>", into = "Vec<Task>")]
pub struct TaskSet(u8);

impl TaskSet {
    pub fn all() -> Self {
        TaskSet(0b1_1111)
    }

    pub fn new(tasks: &[Task]) -> Result<Self> {
        let set = TaskSet(tasks.iter().fold(0, |acc, t| acc | t.bit()));
        set.validate()?;
        Ok(set)
    }

    fn validate(self) -> Result<()> {
        if self.0 == 0 {
            return Err(Error::Config("task set is empty".into()));
        }
        for dependent in [Task::Is, Task::Id] {
            if self.contains(dependent) && !self.contains(Task::Od) {
                return Err(Error::Config(format!(
                    "{dependent} cannot be trained without object detection (add od)"
                )));
            }
        }
        Ok(())
    }

    pub fn contains(self, task: Task) -> bool {
        self.0 & task.bit() != 0
    }

    pub fn is_subset(self, other: TaskSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Task> {
        Task::ALL.into_iter().filter(move |t| self.contains(*t))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Whether the shared decoder is needed.
    pub fn needs_decoder(self) -> bool {
        self.contains(Task::Ss) || self.contains(Task::D)
    }

    pub fn needs_instance_head(self) -> bool {
        self.contains(Task::Od)
    }

    /// Parses a comma-separated list such as `od,ss,d`.
    pub fn parse_list(s: &str) -> Result<Self> {
        let tasks = s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(Task::from_str)
            .collect::<Result<Vec<_>>>()?;
        TaskSet::new(&tasks)
    }
}

impl fmt::Debug for TaskSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TaskSet({self})")
    }
}

impl fmt::Display for TaskSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.iter().map(Task::short).collect();
        f.write_str(&names.join(","))
    }
}

impl TryFrom<Vec<Task>> for TaskSet {
    type Error = Error;

    fn try_from(v: Vec<Task>) -> Result<Self> {
        TaskSet::new(&v)
    }
}

impl From<TaskSet> for Vec<Task> {
    fn from(s: TaskSet) -> Self {
        s.iter().collect()
    }
}

impl FromStr for TaskSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskSet::parse_list(s)
    }
}
