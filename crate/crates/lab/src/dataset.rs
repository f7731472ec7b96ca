//! Demonstration corpora as JSON lines.
//!
//! The first line is a header record; every following line is one
//! demonstration with full per-step observations.
//!
//! ```text
//! {"format":"hyt-demos","version":1,"grid_size":8,"thought_format":"short"}
//! {"task":{...},"steps":[{"observation":{...},"action":{...},"thought":{...},"subtask_index":0},...],"success":true,"seed":0}
//! ```
//!
//! Scene objects follow the simulator's state schema: `grid` is a list of
//! non-empty stacks (`pos`, bottom-first `objects`), `held` is an object id or
//! null. `y` grows away from the viewer, so "in front of" is `y - 1`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use hyt_core::oracle::{self, Demonstration, OracleConfig, ThoughtFormat};
use hyt_core::world::{TaskFamily, WorldConfig};
use serde::{Deserialize, Serialize};

use crate::{LabError, Result};

pub const FORMAT: &str = "hyt-demos";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub grid_size: u8,
    pub thought_format: ThoughtFormat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoFile {
    pub grid_size: u8,
    pub thought_format: ThoughtFormat,
    pub demos: Vec<Demonstration>,
}

pub fn to_string(file: &DemoFile) -> Result<String> {
    let mut out = String::new();
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        grid_size: file.grid_size,
        thought_format: file.thought_format,
    };
    out.push_str(&serde_json::to_string(&header).map_err(|e| LabError::Format(e.to_string()))?);
    out.push('\n');
    for d in &file.demos {
        out.push_str(&serde_json::to_string(d).map_err(|e| LabError::Format(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write(path: &Path, file: &DemoFile) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    let f = fs::File::create(path).map_err(|e| LabError::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(to_string(file)?.as_bytes()).map_err(|e| LabError::io(path, e))?;
    w.flush().map_err(|e| LabError::io(path, e))
}

pub fn parse(text: &str) -> Result<DemoFile> {
    read_lines(text.lines().map(|l| Ok(l.to_string())))
}

pub fn read(path: &Path) -> Result<DemoFile> {
    let f = fs::File::open(path).map_err(|e| LabError::io(path, e))?;
    read_lines(BufReader::new(f).lines().map(|l| l.map_err(|e| LabError::io(path, e))))
}

fn read_lines(mut lines: impl Iterator<Item = Result<String>>) -> Result<DemoFile> {
    let first = lines.next().ok_or_else(|| LabError::Format("empty dataset file".into()))??;
    let header: Header =
        serde_json::from_str(&first).map_err(|e| LabError::Format(format!("dataset header: {e}")))?;
    if header.format != FORMAT {
        return Err(LabError::Format(format!("not a demonstration file (format `{}`)", header.format)));
    }
    if header.version != VERSION {
        return Err(LabError::Format(format!("dataset version {} unsupported (expected {VERSION})", header.version)));
    }
    let mut demos = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let d: Demonstration =
            serde_json::from_str(&line).map_err(|e| LabError::Format(format!("dataset line {}: {e}", i + 2)))?;
        demos.push(d);
    }
    Ok(DemoFile { grid_size: header.grid_size, thought_format: header.thought_format, demos })
}

/// Splits `total` demos over the 2/3/4-object variants in a 1:2:1 ratio
/// (250/500/250 at the 1000-demo scale); rounding remainders go to the
/// 3-object variant.
pub fn composition(total: usize) -> [(usize, usize); 3] {
    let two = total / 4;
    let four = total / 4;
    [(2, two), (3, total - two - four), (4, four)]
}

/// What to generate: per family, either a fixed variant or the 1:2:1 mix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub family: TaskFamily,
    /// `None` spreads `count` over 2/3/4 objects.
    pub n_objects: Option<usize>,
    pub count: usize,
}

/// Generates demonstrations with seeds `seed_base + i` per variant. When
/// `annotate_fraction < 1`, the first `floor(f * count)` demos of a variant
/// are annotated and the rest carry no thoughts.
pub fn generate(
    world: &WorldConfig,
    oracle_cfg: &OracleConfig,
    specs: &[GenSpec],
    seed_base: u64,
    annotate_fraction: f64,
) -> Result<Vec<Demonstration>> {
    let mut jobs = Vec::new();
    for s in specs {
        let variants: Vec<(usize, usize)> = match s.n_objects {
            Some(n) => vec![(n, s.count)],
            None => composition(s.count).to_vec(),
        };
        for (n, count) in variants {
            let annotated = (annotate_fraction.clamp(0.0, 1.0) * count as f64).floor() as usize;
            for i in 0..count {
                jobs.push((s.family, n, seed_base + i as u64, i < annotated));
            }
        }
    }
    use rayon::prelude::*;
    jobs.par_iter()
        .map(|&(family, n, seed, ann)| Ok(oracle::demo(world, oracle_cfg, family, n, seed, ann)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composition_ratio() {
        assert_eq!(composition(1000), [(2, 250), (3, 500), (4, 250)]);
        assert_eq!(composition(10), [(2, 2), (3, 6), (4, 2)]);
        for t in 0..50 {
            assert_eq!(composition(t).iter().map(|c| c.1).sum::<usize>(), t);
        }
    }
}
