//! On-disk dataset layout: `manifest.json` plus `images/*.kdep` and
//! `annotations/*.json`, paths stored relative to the manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::kdep::{read_depth_image, write_depth_image, DepthImage};
use super::pose::{pose_from_json, pose_to_json, PoseConfig};
use super::synth::SynthConfig;
use crate::binio;
use crate::error::{Error, FormatError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub name: String,
    pub image: DepthImage,
    pub pose: PoseConfig,
    pub split: Split,
    pub subject: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub annotation: String,
    pub split: Split,
    #[serde(default)]
    pub subject: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub k: usize,
    pub width: u32,
    pub height: u32,
    pub entries: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
}

impl DatasetManifest {
    pub fn from_json(bytes: &[u8]) -> Result<Self, FormatError> {
        let m: DatasetManifest = serde_json::from_slice(bytes)?;
        if m.k == 0 {
            return Err(FormatError::invalid("k", "must be >= 1"));
        }
        if m.width == 0 || m.height == 0 {
            return Err(FormatError::ZeroDimension("manifest image size"));
        }
        for e in &m.entries {
            for p in [&e.image, &e.annotation] {
                let path = Path::new(p);
                if path.is_absolute() || path.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
                    return Err(FormatError::invalid("entries", format!("path {p:?} escapes the dataset")));
                }
            }
        }
        Ok(m)
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub k: usize,
    pub samples: Vec<Sample>,
    pub synth: Option<SynthConfig>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> + '_ {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn split_vec(&self, split: Split) -> Vec<Sample> {
        self.split(split).cloned().collect()
    }

    /// Writes images, annotations and the manifest under `dir`.
    pub fn save(&self, dir: &Path) -> Result<DatasetManifest> {
        let first = self
            .samples
            .first()
            .ok_or_else(|| Error::contract("cannot save an empty dataset"))?;
        for sub in ["images", "annotations"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let mut entries = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            let image = format!("images/{}.kdep", s.name);
            let annotation = format!("annotations/{}.json", s.name);
            write_depth_image(&s.image, &dir.join(&image))?;
            binio::write_file(&dir.join(&annotation), pose_to_json(&s.pose).as_bytes())?;
            entries.push(ManifestEntry {
                image,
                annotation,
                split: s.split,
                subject: s.subject,
            });
        }
        let manifest = DatasetManifest {
            k: self.k,
            width: first.image.width(),
            height: first.image.height(),
            entries,
            synth: self.synth.clone(),
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        binio::write_file(&dir.join(MANIFEST_FILE), json.as_bytes())?;
        Ok(manifest)
    }

    /// Loads and validates every entry referenced by `dir/manifest.json`.
    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest = binio::decode_file(&dir.join(MANIFEST_FILE), DatasetManifest::from_json)?;
        let mut samples = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let image = read_depth_image(&dir.join(&e.image))?;
            let ann_path = dir.join(&e.annotation);
            let pose = binio::decode_file(&ann_path, pose_from_json)?;
            if pose.k() != manifest.k {
                return Err(Error::parse(
                    &ann_path,
                    FormatError::invalid("k", format!("{} joints, manifest declares {}", pose.k(), manifest.k)),
                ));
            }
            if image.width() != manifest.width || image.height() != manifest.height {
                return Err(Error::contract(format!(
                    "{} is {}x{}, manifest declares {}x{}",
                    e.image,
                    image.width(),
                    image.height(),
                    manifest.width,
                    manifest.height
                )));
            }
            pose.validate(image.width(), image.height())
                .map_err(|err| Error::contract(format!("{}: {err}", e.annotation)))?;
            let name = Path::new(&e.image)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            samples.push(Sample {
                name,
                image,
                pose,
                split: e.split,
                subject: e.subject,
            });
        }
        Ok(Dataset {
            k: manifest.k,
            samples,
            synth: manifest.synth,
        })
    }
}
