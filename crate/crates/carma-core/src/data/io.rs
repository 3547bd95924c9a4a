//! Dataset files: TSV + manifest JSON.
//!
//! The manifest records `(task, seed, n_items)` plus a SHA-256 of the TSV;
//! loading regenerates the dataset from those inputs and verifies both the
//! hash and the on-disk bytes, so a dataset directory is self-validating.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::{Dataset, Example, SplitName, Task};

pub const DATASET_FILE: &str = "dataset.tsv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes via a temp file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().ok_or_else(|| {
        Error::contract(format!("path {} has no parent directory", path.display()))
    })?;
    std::fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::contract(format!("path {} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub task: Task,
    pub seed: u64,
    pub n_items: usize,
    pub generator_hash: String,
}

fn tsv_row(split: SplitName, ex: &Example) -> String {
    let slots = serde_json::to_string(&ex.synonym_slots).expect("slot list serializes");
    format!(
        "{split}\t{}\t{}\t{}\t{slots}",
        ex.prompt, ex.target_text, ex.task
    )
}

/// Canonical TSV rendering: header row, then train/validation/test in order.
pub fn dataset_tsv(ds: &Dataset) -> String {
    let mut out = String::from("split\tprompt\ttarget\ttask\tsynonym_slots\n");
    for (name, exs) in [
        (SplitName::Train, &ds.split.train),
        (SplitName::Validation, &ds.split.validation),
        (SplitName::Test, &ds.split.test),
    ] {
        for ex in exs {
            out.push_str(&tsv_row(name, ex));
            out.push('\n');
        }
    }
    out
}

/// Writes `dataset.tsv` and `manifest.json` into `dir`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let tsv = dataset_tsv(ds);
    let manifest = DatasetManifest {
        task: ds.task,
        seed: ds.generator_seed,
        n_items: ds.n_items,
        generator_hash: sha256_hex(tsv.as_bytes()),
    };
    write_atomic(&dir.join(DATASET_FILE), tsv.as_bytes())?;
    let mut manifest_json = serde_json::to_string_pretty(&manifest)?;
    manifest_json.push('\n');
    write_atomic(&dir.join(MANIFEST_FILE), manifest_json.as_bytes())?;
    Ok(())
}

/// Regenerates the dataset named by `dir`'s manifest and verifies it against
/// the stored hash and TSV bytes.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: DatasetManifest = serde_json::from_str(&manifest_text)?;
    let ds = Dataset::regenerate(manifest.task, manifest.seed, manifest.n_items)?;
    let tsv = dataset_tsv(&ds);
    if sha256_hex(tsv.as_bytes()) != manifest.generator_hash {
        return Err(Error::Generation(format!(
            "regenerated dataset does not match manifest hash in {}",
            dir.display()
        )));
    }
    let on_disk = std::fs::read_to_string(dir.join(DATASET_FILE))?;
    if on_disk != tsv {
        return Err(Error::Generation(format!(
            "dataset.tsv in {} differs from its manifest",
            dir.display()
        )));
    }
    Ok(ds)
}
