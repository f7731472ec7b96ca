//! Append-only JSON-lines metrics.
//!
//! Training writes one `EpochRecord` per epoch to `<out_dir>/metrics.jsonl`:
//!
//! ```text
//! {"epoch":3,"loss":0.41,"loss_act":0.52,"loss_think":0.38,"loss_follow":0.33,
//!  "samples_act":936,"samples_think":1870,"samples_follow":938,"wall_time":31.2}
//! ```
//!
//! A modality that received no samples in an epoch has a null loss.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use hyt_core::codec::Modality;
use hyt_core::hyt::ModalityLosses;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{LabError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub loss: Option<f64>,
    pub loss_act: Option<f64>,
    pub loss_think: Option<f64>,
    pub loss_follow: Option<f64>,
    pub samples_act: u64,
    pub samples_think: u64,
    pub samples_follow: u64,
    /// Seconds spent in this epoch.
    pub wall_time: f64,
}

impl EpochRecord {
    pub fn new(epoch: u32, l: &ModalityLosses, wall_time: f64) -> Self {
        Self {
            epoch,
            loss: l.overall(),
            loss_act: l.mean(Modality::Act),
            loss_think: l.mean(Modality::Think),
            loss_follow: l.mean(Modality::Follow),
            samples_act: l.count[0],
            samples_think: l.count[1],
            samples_follow: l.count[2],
            wall_time,
        }
    }
}

pub fn append<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| LabError::io(path, e))?;
    let mut line = serde_json::to_string(record).map_err(|e| LabError::Format(e.to_string()))?;
    line.push('\n');
    f.write_all(line.as_bytes()).map_err(|e| LabError::io(path, e))
}

pub fn read_all<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| LabError::Format(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}
