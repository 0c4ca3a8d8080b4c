//! Export of a translated source dataset with per-sample domainness.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image_io::{ensure_parent, save_image};
use super::manifest::DatasetManifest;
use crate::domainness::DomainnessValue;
use crate::error::{Error, Result};
use crate::translation::Generator;

pub const INDEX_FILE: &str = "index.csv";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ZMode {
    /// `z_i ~ U(0, 1)` drawn per image in manifest order.
    Uniform,
    Fixed(DomainnessValue),
}

impl std::str::FromStr for ZMode {
    type Err = Error;

    /// `uniform` or `fixed:<v>`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "uniform" {
            return Ok(ZMode::Uniform);
        }
        if let Some(v) = s.strip_prefix("fixed:") {
            let v: f64 = v.parse().map_err(|_| Error::arg(format!("bad z value in '{s}'")))?;
            return Ok(ZMode::Fixed(DomainnessValue::new(v)?));
        }
        Err(Error::arg(format!("z mode '{s}' is neither 'uniform' nor 'fixed:<v>'")))
    }
}

/// One row of the sidecar index; paths are relative to the index directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexRow {
    pub image: PathBuf,
    pub label: Option<PathBuf>,
    pub z: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TranslatedSample {
    pub image: PathBuf,
    pub label: Option<PathBuf>,
    pub z: DomainnessValue,
}

#[derive(Debug, Default)]
pub struct TranslateReport {
    pub written: usize,
    pub failures: Vec<(PathBuf, String)>,
    pub index: PathBuf,
}

fn format_z(z: f64) -> String {
    format!("{z:.6}")
}

/// Translates every image of `manifest` with `G_ST(x, z_i)` into `out_dir`,
/// copies labels through and writes the sidecar index. Files that fail to
/// decode or translate are reported and skipped; the run continues.
pub fn translate_dataset(
    manifest: &DatasetManifest,
    generator: &Generator,
    z_mode: ZMode,
    seed: u64,
    out_dir: &Path,
) -> Result<TranslateReport> {
    if manifest.is_empty() {
        return Err(Error::arg("manifest lists no images"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = TranslateReport {
        index: out_dir.join(INDEX_FILE),
        ..Default::default()
    };
    let mut rows = Vec::with_capacity(manifest.len());
    let mut dims = None;
    for i in 0..manifest.len() {
        // draw before any failure so z assignments do not depend on it
        let z = match z_mode {
            ZMode::Uniform => DomainnessValue::new(rng.random())?,
            ZMode::Fixed(z) => z,
        };
        let rel = manifest.images[i].clone();
        let result = (|| -> Result<IndexRow> {
            let img = manifest.load_image(i)?;
            let out = generator.translate(&img, &z.into())?;
            let image = Path::new("images").join(under("images", &rel)).with_extension("png");
            save_image(&out_dir.join(&image), &out)?;
            let label = match manifest.label_path(i) {
                Some(src) => {
                    let rel_label = &manifest.labels.as_ref().expect("label path exists")[i];
                    let dst = Path::new("labels")
                        .join(under("labels", rel_label))
                        .with_extension("png");
                    let full = out_dir.join(&dst);
                    ensure_parent(&full)?;
                    std::fs::copy(&src, &full).map_err(|e| Error::io(src.display().to_string(), e))?;
                    Some(dst)
                }
                None => None,
            };
            dims.get_or_insert((img.shape()[3], img.shape()[2]));
            Ok(IndexRow {
                image,
                label,
                z: z.get(),
            })
        })();
        match result {
            Ok(row) => rows.push(row),
            Err(e) => report.failures.push((manifest.image_path(i), e.to_string())),
        }
    }
    write_index(&report.index, &rows)?;
    report.written = rows.len();
    if let Some((width, height)) = dims {
        let labelled = rows.iter().all(|r| r.label.is_some());
        DatasetManifest {
            root: out_dir.to_path_buf(),
            domain: format!("{}-translated", manifest.domain),
            width,
            height,
            images: rows.iter().map(|r| r.image.clone()).collect(),
            labels: labelled.then(|| rows.iter().filter_map(|r| r.label.clone()).collect()),
        }
        .save()?;
    }
    Ok(report)
}

/// `rel` without a leading `dir` component, so exports do not nest
/// `images/images/`.
fn under<'a>(dir: &str, rel: &'a Path) -> &'a Path {
    rel.strip_prefix(dir).unwrap_or(rel)
}

pub fn write_index(path: &Path, rows: &[IndexRow]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["image", "label", "z"])?;
    for r in rows {
        let label = r.label.as_ref().map(|l| l.display().to_string()).unwrap_or_default();
        w.write_record([r.image.display().to_string(), label, format_z(r.z)])?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Reads an index, resolving paths against its directory.
pub fn read_index(path: &Path) -> Result<Vec<TranslatedSample>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 3 {
            return Err(Error::arg(format!("index row has {} fields, expected 3", rec.len())));
        }
        let z: f64 = rec[2]
            .parse()
            .map_err(|_| Error::arg(format!("bad z '{}' in {}", &rec[2], path.display())))?;
        out.push(TranslatedSample {
            image: base.join(&rec[0]),
            label: (!rec[1].is_empty()).then(|| base.join(&rec[1])),
            z: DomainnessValue::new(z)?,
        });
    }
    Ok(out)
}
