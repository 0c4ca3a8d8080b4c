use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image_io::{load_image, load_label, LabelMap};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";

/// One image domain on disk. Paths are relative to `root`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub domain: String,
    pub width: usize,
    pub height: usize,
    pub images: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<PathBuf>>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.images[i])
    }

    pub fn label_path(&self, i: usize) -> Option<PathBuf> {
        self.labels.as_ref().map(|l| self.root.join(&l[i]))
    }

    /// Writes `manifest.json` into `root`, recording the root as `.` so the
    /// directory can be moved.
    pub fn save(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_FILE);
        std::fs::create_dir_all(&self.root).map_err(|e| Error::io(self.root.display().to_string(), e))?;
        let portable = DatasetManifest {
            root: PathBuf::from("."),
            ..self.clone()
        };
        let text = serde_json::to_string_pretty(&portable)?;
        std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(path)
    }

    /// Reads a manifest file, or `manifest.json` inside a directory. A
    /// relative `root` is resolved against the manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = std::fs::read_to_string(&file).map_err(|e| Error::io(file.display().to_string(), e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        if m.root.is_relative() {
            let base = file.parent().unwrap_or(Path::new("."));
            m.root = base.join(&m.root);
        }
        Ok(m)
    }

    /// Builds a manifest from the PNG files directly inside `dir`, sorted by
    /// name; sizes come from the first image.
    pub fn from_dir(dir: &Path, domain: &str) -> Result<Self> {
        let mut images: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir.display().to_string(), e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .filter_map(|p| p.file_name().map(PathBuf::from))
            .collect();
        images.sort();
        let first = images
            .first()
            .ok_or_else(|| Error::arg(format!("no PNG images in {}", dir.display())))?;
        let (_, _, height, width) = load_image(&dir.join(first))?.dims4()?;
        Ok(Self {
            root: dir.to_path_buf(),
            domain: domain.to_string(),
            width,
            height,
            images,
            labels: None,
        })
    }

    /// Opens a manifest file or directory with a manifest, falling back to
    /// scanning the directory for images.
    pub fn open(path: &Path) -> Result<Self> {
        if path.is_file() || path.join(MANIFEST_FILE).is_file() {
            Self::load(path)
        } else {
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            Self::from_dir(path, &name)
        }
    }

    /// Checks that the list is non-empty and every file decodes to the
    /// declared size.
    pub fn validate(&self) -> Result<()> {
        if self.images.is_empty() {
            return Err(Error::arg(format!("domain '{}' lists no images", self.domain)));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.images.len() {
                return Err(Error::arg(format!(
                    "{} labels for {} images",
                    labels.len(),
                    self.images.len()
                )));
            }
        }
        for i in 0..self.len() {
            self.load_image(i)?;
            if self.labels.is_some() {
                self.load_label(i)?;
            }
        }
        Ok(())
    }

    pub fn load_image(&self, i: usize) -> Result<Tensor> {
        let path = self.image_path(i);
        let img = load_image(&path)?;
        let (_, _, h, w) = img.dims4()?;
        if (h, w) != (self.height, self.width) {
            return Err(Error::Image {
                path,
                message: format!("decoded {w}x{h}, manifest declares {}x{}", self.width, self.height),
            });
        }
        Ok(img)
    }

    pub fn load_label(&self, i: usize) -> Result<LabelMap> {
        let path = self
            .label_path(i)
            .ok_or_else(|| Error::arg(format!("domain '{}' has no labels", self.domain)))?;
        let label = load_label(&path)?;
        if (label.height, label.width) != (self.height, self.width) {
            return Err(Error::Image {
                path,
                message: "label size differs from the declared image size".into(),
            });
        }
        Ok(label)
    }

    pub fn load_all(&self) -> Result<Vec<Tensor>> {
        (0..self.len()).map(|i| self.load_image(i)).collect()
    }

    pub fn load_all_labels(&self) -> Result<Vec<LabelMap>> {
        (0..self.len()).map(|i| self.load_label(i)).collect()
    }
}
