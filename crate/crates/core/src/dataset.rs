//! Annotation manifests and their backbone feature files.
//!
//! A manifest is JSON Lines with one scene per line:
//!
//! ```text
//! {"id": "s000001", "feature": "features/s000001.cten", "objects": [{"category": 3, "bbox": [x, y, w, h]}]}
//! ```
//!
//! An optional first line `{"manifest_header": {...}}` records how the corpus
//! was produced. Feature paths are relative to the manifest's directory.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::composition::{SceneAnnotation, SceneObject, DEFAULT_GRID, MAX_OBJECTS};
use crate::cten;
use crate::error::{Error, Result};
use crate::model::SPATIAL;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub feature: Option<String>,
    pub objects: Vec<SceneObject>,
}

impl ManifestEntry {
    pub fn annotation(&self) -> SceneAnnotation {
        SceneAnnotation::new(self.id.clone(), self.objects.clone())
    }
}

/// Provenance of a manifest, stored as its first line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub categories: usize,
    pub grid: usize,
    pub max_objects: usize,
    /// Rule used when a source scene has more than `max_objects` objects.
    pub object_selection: String,
    pub seed: Option<u64>,
    pub generator: String,
}

impl ManifestHeader {
    pub fn new(categories: usize, seed: Option<u64>, generator: impl Into<String>) -> Self {
        Self {
            categories,
            grid: DEFAULT_GRID,
            max_objects: MAX_OBJECTS,
            object_selection: "largest-area-first".into(),
            seed,
            generator: generator.into(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    manifest_header: ManifestHeader,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub header: Option<ManifestHeader>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut header = None;
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            if n == 0 && line.contains("\"manifest_header\"") {
                header = Some(serde_json::from_str::<HeaderLine>(&line)?.manifest_header);
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
            entries.push(entry);
        }
        Ok(Self { header, entries })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        if let Some(h) = &self.header {
            serde_json::to_writer(
                &mut out,
                &HeaderLine {
                    manifest_header: h.clone(),
                },
            )?;
            out.push(b'\n');
        }
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }
}

/// Behaviour when a manifest entry's feature file is absent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MissingFeature {
    #[default]
    Abort,
    Skip,
}

/// Scenes paired with their `[7, 7, Din]` backbone features.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<SceneAnnotation>,
    pub features: Vec<Tensor<f32>>,
}

impl Dataset {
    pub fn new(scenes: Vec<SceneAnnotation>, features: Vec<Tensor<f32>>) -> Result<Self> {
        if scenes.len() != features.len() {
            return Err(Error::InvalidArgument(format!(
                "{} scenes but {} feature maps",
                scenes.len(),
                features.len()
            )));
        }
        if let Some(f) = features.first() {
            let want = f.dims();
            if want.len() != 3 || want[0] != SPATIAL || want[1] != SPATIAL {
                return Err(Error::shape(
                    "dataset",
                    format!("feature dims {want:?}, expected [7,7,Din]"),
                ));
            }
            if let Some((i, bad)) = features.iter().enumerate().find(|(_, t)| t.dims() != want) {
                return Err(Error::shape(
                    "dataset",
                    format!("{}: {:?} vs {want:?}", scenes[i].id, bad.dims()),
                ));
            }
        }
        Ok(Self { scenes, features })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn feature_channels(&self) -> Option<usize> {
        self.features.first().map(|t| t.dims()[2])
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            scenes: indices.iter().map(|&i| self.scenes[i].clone()).collect(),
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
        }
    }

    /// Reads a manifest and every referenced feature file, validating each
    /// annotation against `categories`.
    pub fn load(
        manifest: impl AsRef<Path>,
        categories: usize,
        missing: MissingFeature,
    ) -> Result<Self> {
        let manifest = manifest.as_ref();
        let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Manifest::read(manifest)?;
        let mut scenes = Vec::with_capacity(m.entries.len());
        let mut features = Vec::with_capacity(m.entries.len());
        for e in &m.entries {
            let scene = e.annotation();
            scene.validate(categories)?;
            let Some(rel) = &e.feature else {
                match missing {
                    MissingFeature::Abort => {
                        return Err(Error::InvalidAnnotation {
                            id: e.id.clone(),
                            reason: "no feature file".into(),
                        })
                    }
                    MissingFeature::Skip => {
                        warn!("{}: no feature file, skipped", e.id);
                        continue;
                    }
                }
            };
            let path = base.join(rel);
            match cten::read_tensor_file(&path) {
                Ok(t) => {
                    scenes.push(scene);
                    features.push(t);
                }
                Err(Error::Io { .. }) if missing == MissingFeature::Skip => {
                    warn!("{}: cannot read {}, skipped", e.id, path.display());
                }
                Err(err) => return Err(err),
            }
        }
        Self::new(scenes, features)
    }

    /// Writes `dir/<name>.jsonl` plus one CTEN file per scene under
    /// `dir/features/`.
    pub fn save(
        &self,
        dir: impl AsRef<Path>,
        name: &str,
        header: Option<ManifestHeader>,
    ) -> Result<PathBuf> {
        let dir = dir.as_ref();
        let feat_dir = dir.join("features");
        fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
        let mut entries = Vec::with_capacity(self.len());
        for (s, f) in self.scenes.iter().zip(&self.features) {
            let rel = format!("features/{}.cten", s.id);
            cten::write_tensor_file(dir.join(&rel), f)?;
            entries.push(ManifestEntry {
                id: s.id.clone(),
                feature: Some(rel),
                objects: s.objects.clone(),
            });
        }
        let path = dir.join(format!("{name}.jsonl"));
        Manifest { header, entries }.write(&path)?;
        Ok(path)
    }
}

/// Category names file: a JSON array of `C` strings.
pub fn read_categories(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let names: Vec<String> = serde_json::from_str(&text)?;
    if names.is_empty() {
        return Err(Error::Format(format!(
            "{}: empty category list",
            path.display()
        )));
    }
    Ok(names)
}

pub fn write_categories(path: impl AsRef<Path>, names: &[String]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, serde_json::to_string(names)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composition::BBox;

    fn scene(id: &str, cat: usize) -> SceneAnnotation {
        SceneAnnotation::new(
            id,
            vec![SceneObject {
                category: cat,
                bbox: BBox::new(0.1, 0.2, 0.3, 0.4),
            }],
        )
    }

    #[test]
    fn manifest_line_format() {
        let e = ManifestEntry {
            id: "a".into(),
            feature: None,
            objects: scene("a", 2).objects,
        };
        let line = serde_json::to_string(&e).unwrap();
        assert_eq!(
            line,
            r#"{"id":"a","feature":null,"objects":[{"category":2,"bbox":[0.1,0.2,0.3,0.4]}]}"#
        );
    }

    #[test]
    fn dataset_roundtrip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let feats = vec![
            Tensor::from_fn(vec![7, 7, 3], |i| i as f32),
            Tensor::full(vec![7, 7, 3], -1.0),
        ];
        let ds = Dataset::new(vec![scene("a", 0), scene("b", 1)], feats).unwrap();
        let header = ManifestHeader::new(2, Some(4), "test");
        let path = ds.save(dir.path(), "train", Some(header.clone())).unwrap();
        let m = Manifest::read(&path).unwrap();
        assert_eq!(m.header, Some(header));
        assert_eq!(m.entries.len(), 2);
        let back = Dataset::load(&path, 2, MissingFeature::Abort).unwrap();
        assert_eq!(back, ds);
        assert!(Dataset::load(&path, 1, MissingFeature::Abort).is_err());
    }

    #[test]
    fn missing_features_abort_or_skip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::new(
            vec![scene("a", 0), scene("b", 1)],
            vec![Tensor::zeros(vec![7, 7, 2]); 2],
        )
        .unwrap();
        let path = ds.save(dir.path(), "m", None).unwrap();
        fs::remove_file(dir.path().join("features/a.cten")).unwrap();
        assert!(matches!(
            Dataset::load(&path, 2, MissingFeature::Abort),
            Err(Error::Io { .. })
        ));
        let kept = Dataset::load(&path, 2, MissingFeature::Skip).unwrap();
        assert_eq!(
            kept.scenes
                .iter()
                .map(|s| s.id.as_str())
                .collect::<Vec<_>>(),
            vec!["b"]
        );
    }

    #[test]
    fn inconsistent_feature_dims_rejected() {
        let r = Dataset::new(
            vec![scene("a", 0), scene("b", 0)],
            vec![Tensor::zeros(vec![7, 7, 2]), Tensor::zeros(vec![7, 7, 3])],
        );
        assert!(r.is_err());
        assert!(Dataset::new(vec![scene("a", 0)], vec![Tensor::zeros(vec![5, 5, 2])]).is_err());
    }
}
