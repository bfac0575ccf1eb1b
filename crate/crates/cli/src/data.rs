use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use tsnode::systems::{make_dataset, SystemSpec};
use tsnode::Dataset;

use crate::manifest::ExperimentManifest;
use crate::write_file;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShortFile {
    pub file: String,
    pub source: usize,
    pub start: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFiles {
    pub train: String,
    pub test: Vec<String>,
    pub short: Vec<ShortFile>,
}

/// Contents of `dataset.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: SystemSpec,
    pub seed: u64,
    pub files: DatasetFiles,
}

pub fn build_dataset(manifest: &ExperimentManifest) -> Result<Dataset> {
    make_dataset(&manifest.system, manifest.data_seed).context("generating dataset")
}

/// Writes the dataset as CSV trajectories plus `dataset.json` under `dir`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(dir.join("test"))?;
    fs::create_dir_all(dir.join("short"))?;
    write_file(&dir.join("train.csv"), &ds.train.to_csv())?;
    let mut test = Vec::with_capacity(ds.test_full.len());
    for (i, t) in ds.test_full.iter().enumerate() {
        let name = format!("test/test_{i:02}.csv");
        write_file(&dir.join(&name), &t.to_csv())?;
        test.push(name);
    }
    let mut short = Vec::with_capacity(ds.test_short.len());
    for (i, w) in ds.test_short.iter().enumerate() {
        let name = format!("short/short_{i:04}.csv");
        write_file(&dir.join(&name), &w.traj.to_csv())?;
        short.push(ShortFile { file: name, source: w.source, start: w.start });
    }
    let manifest = DatasetManifest {
        spec: ds.spec.clone(),
        seed: ds.seed,
        files: DatasetFiles { train: "train.csv".into(), test, short },
    };
    write_file(&dir.join("dataset.json"), &serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn generate_data(manifest: &ExperimentManifest) -> Result<PathBuf> {
    let ds = build_dataset(manifest)?;
    let dir = manifest.data_dir();
    let written = write_dataset(&ds, &dir)?;
    log::info!(
        "{}: wrote {} test and {} short trajectories to {}",
        ds.spec.system.name(),
        written.files.test.len(),
        written.files.short.len(),
        dir.display()
    );
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::Overrides;

    #[test]
    fn layout_and_cardinality() {
        let tmp = tempfile::tempdir().unwrap();
        let ov = Overrides { out: Some(tmp.path().to_path_buf()), ..Overrides::default() };
        let m = ExperimentManifest::from_json(r#"{"system": "pendulum"}"#, &ov).unwrap();
        let dir = generate_data(&m).unwrap();
        let dm: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join("dataset.json")).unwrap()).unwrap();
        assert_eq!(dm.files.test.len(), 20);
        assert_eq!(dm.files.short.len(), 1000);
        let train = fs::read_to_string(dir.join("train.csv")).unwrap();
        assert_eq!(train.lines().nth(1), Some("0,2,0"));
        let w = &dm.files.short[17];
        let short = tsnode::Trajectory::from_csv(&fs::read_to_string(dir.join(&w.file)).unwrap()).unwrap();
        let src = tsnode::Trajectory::from_csv(&fs::read_to_string(dir.join(&dm.files.test[w.source])).unwrap()).unwrap();
        assert_eq!(short, src.window(w.start, 10).unwrap());
    }
}
