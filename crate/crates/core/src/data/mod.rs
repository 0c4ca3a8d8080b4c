//! Image I/O, dataset manifests, synthetic domains, style statistics and
//! translated-dataset export.

pub mod image_io;
pub mod manifest;
pub mod style;
pub mod synthetic;
pub mod translate;

pub use image_io::{decode_png, encode_png, load_image, save_image, LabelMap};
pub use manifest::DatasetManifest;
pub use style::{measure_style_statistic, StatisticKind};
pub use synthetic::{generate_synthetic_domains, StyleKind, SyntheticStyleSpec};
pub use translate::{read_index, translate_dataset, TranslatedSample, ZMode};
