//! External data: Hare-Lynx CSV ingestion and the generated-task cache.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Task;
use crate::error::{Error, Result};
use crate::numkit::Tensor;

/// How to split the Hare-Lynx series into context and target. Every
/// `context_every`-th point (starting at `offset`) becomes context.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HareLynxSplit {
    pub context_every: usize,
    pub offset: usize,
}

impl Default for HareLynxSplit {
    fn default() -> Self {
        HareLynxSplit { context_every: 2, offset: 0 }
    }
}

fn zscore_checked(v: &[f64], name: &str) -> Result<Vec<f64>> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    if var <= 0.0 {
        return Err(Error::Ingestion { row: 0, msg: format!("column '{name}' has zero variance") });
    }
    let std = var.sqrt();
    Ok(v.iter().map(|x| (x - mean) / std).collect())
}

/// Load `year,hare,lynx` CSV; x = z-scored year, y = z-scored lynx count.
pub fn load_hare_lynx(path: &Path, split: HareLynxSplit) -> Result<Task> {
    if split.context_every < 2 {
        return Err(Error::Config("hare-lynx split needs context_every >= 2".into()));
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    {
        let headers = rdr.headers()?;
        let expected = ["year", "hare", "lynx"];
        let got: Vec<&str> = headers.iter().collect();
        if got != expected {
            return Err(Error::Ingestion {
                row: 0,
                msg: format!("expected header year,hare,lynx, got {}", got.join(",")),
            });
        }
    }
    let mut years = Vec::new();
    let mut lynx = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2; // 1-based, after the header
        let rec = rec?;
        if rec.len() != 3 {
            return Err(Error::Ingestion { row, msg: format!("expected 3 fields, got {}", rec.len()) });
        }
        let parse = |s: &str, col: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| Error::Ingestion {
                row,
                msg: format!("non-numeric {col} value '{s}'"),
            })
        };
        years.push(parse(&rec[0], "year")?);
        parse(&rec[1], "hare")?; // validated but unused: the protocol models the lynx series
        lynx.push(parse(&rec[2], "lynx")?);
    }
    if years.len() < 2 {
        return Err(Error::Ingestion { row: years.len() + 1, msg: "need at least 2 rows".into() });
    }

    let xs = zscore_checked(&years, "year")?;
    let ys = zscore_checked(&lynx, "lynx")?;

    let mut xc = Vec::new();
    let mut yc = Vec::new();
    let mut xt = Vec::new();
    let mut yt = Vec::new();
    for i in 0..xs.len() {
        if i % split.context_every == split.offset % split.context_every {
            xc.push(xs[i]);
            yc.push(ys[i]);
        } else {
            xt.push(xs[i]);
            yt.push(ys[i]);
        }
    }
    let task = Task {
        x_ctx: Tensor::new(xc.len(), 1, xc),
        y_ctx: Tensor::new(yc.len(), 1, yc),
        x_tgt: Tensor::new(xt.len(), 1, xt),
        y_tgt: Tensor::new(yt.len(), 1, yt),
    };
    task.validate()?;
    Ok(task)
}

/// Manifest written next to each cached split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub description: String,
    pub seed: u64,
    pub n_tasks: usize,
    pub spec: serde_json::Value,
}

/// Write tasks as JSON-lines plus a manifest; one pair of files per split.
pub fn save_tasks(dir: &Path, split_name: &str, tasks: &[Task], manifest: &DatasetManifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut f = fs::File::create(dir.join(format!("{split_name}.jsonl")))?;
    for t in tasks {
        serde_json::to_writer(&mut f, t)?;
        f.write_all(b"\n")?;
    }
    fs::write(
        dir.join(format!("{split_name}.manifest.json")),
        serde_json::to_string_pretty(manifest)?,
    )?;
    Ok(())
}

pub fn load_tasks(dir: &Path, split_name: &str) -> Result<(Vec<Task>, DatasetManifest)> {
    let manifest: DatasetManifest =
        serde_json::from_str(&fs::read_to_string(dir.join(format!("{split_name}.manifest.json")))?)?;
    let f = fs::File::open(dir.join(format!("{split_name}.jsonl")))?;
    let mut tasks = Vec::new();
    for line in BufReader::new(f).lines() {
        let task: Task = serde_json::from_str(&line?)?;
        task.validate()?;
        tasks.push(task);
    }
    if tasks.len() != manifest.n_tasks {
        return Err(Error::Integrity(format!(
            "manifest promises {} tasks, file holds {}",
            manifest.n_tasks,
            tasks.len()
        )));
    }
    Ok((tasks, manifest))
}
