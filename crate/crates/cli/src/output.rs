//! Output files. Every file starts with a provenance block naming the plan
//! hash, the base seed and the tool version; nothing time-dependent goes in,
//! so identical inputs give byte-identical files.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use crate::plan::ExperimentPlan;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub plan_hash: String,
    pub seed: u64,
    pub tool_version: String,
}

impl Provenance {
    pub fn of(plan: &ExperimentPlan) -> Self {
        Self {
            plan_hash: plan.hash(),
            seed: plan.seed,
            tool_version: narrec_core::TOOL_VERSION.to_string(),
        }
    }

    /// `#`-prefixed header lines for CSV and text outputs.
    pub fn comment_block(&self) -> String {
        format!(
            "# plan_hash: {}\n# seed: {}\n# tool_version: {}\n",
            self.plan_hash, self.seed, self.tool_version
        )
    }
}

fn create(path: &Path) -> Result<fs::File> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::File::create(path).with_context(|| format!("creating {}", path.display()))
}

/// Writes `rows` as CSV below the provenance block.
pub fn write_csv<T: Serialize>(path: &Path, provenance: &Provenance, rows: &[T]) -> Result<()> {
    let mut file = create(path)?;
    file.write_all(provenance.comment_block().as_bytes())?;
    let mut writer = csv::Writer::from_writer(file);
    for row in rows {
        writer.serialize(row).with_context(|| format!("writing {}", path.display()))?;
    }
    writer.flush().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Writes JSONL whose first line is `{"output_header": {...}}`.
pub fn write_jsonl<T: Serialize>(path: &Path, provenance: &Provenance, rows: &[T]) -> Result<()> {
    let mut out = std::io::BufWriter::new(create(path)?);
    serde_json::to_writer(&mut out, &serde_json::json!({ "output_header": provenance }))?;
    out.write_all(b"\n")?;
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    out.flush().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Pretty JSON document with the provenance under `header`.
pub fn write_json<T: Serialize>(path: &Path, provenance: &Provenance, body: &T) -> Result<()> {
    let doc = serde_json::json!({ "header": provenance, "body": body });
    let mut file = create(path)?;
    serde_json::to_writer_pretty(&mut file, &doc)?;
    file.write_all(b"\n")?;
    Ok(())
}

pub fn write_text(path: &Path, provenance: &Provenance, text: &str) -> Result<()> {
    let mut file = create(path)?;
    file.write_all(provenance.comment_block().as_bytes())?;
    file.write_all(text.as_bytes())?;
    Ok(())
}

/// Reads a CSV written by [`write_csv`], skipping the provenance block.
pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let body: String = text.lines().skip_while(|l| l.starts_with('#')).map(|l| format!("{l}\n")).collect();
    csv::Reader::from_reader(body.as_bytes())
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .with_context(|| format!("parsing {}", path.display()))
}
