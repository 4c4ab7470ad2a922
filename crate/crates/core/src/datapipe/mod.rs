//! Dataset layout, image and tensor I/O, synthetic textures.

pub mod adtn;
pub mod pnm;
pub mod synth;

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::evalkit::Label;
use crate::fsutil;
use crate::tensor::Tensor;

pub use adtn::{read_tensor, write_tensor};
pub use synth::{synth_dataset, SynthOptions};

pub const IMAGE_EXTENSIONS: [&str; 3] = ["ppm", "pgm", "adtn"];

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: Option<Label>,
    pub anomaly_type: Option<String>,
}

/// Reads a P6/P5 image or an ADTN tensor (`[3, H, W]` or `[1, H, W]`, values
/// in `[0, 1]`). The id is the file stem; labels are left to the caller.
pub fn decode_image(path: &Path) -> Result<Sample> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ctx = |e: Error| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    };
    let image = if bytes.starts_with(adtn::MAGIC) {
        let t = adtn::decode(&bytes).map_err(ctx)?;
        let t = match t.shape() {
            [3, _, _] => t,
            [1, h, w] => {
                let (h, w) = (*h, *w);
                let plane = t.into_data();
                Tensor::new(vec![3, h, w], plane.repeat(3))?
            }
            s => return Err(Error::Format(format!("{}: image tensor shape {s:?}", path.display()))),
        };
        if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Format(format!("{}: pixel value {v} outside [0, 1]", path.display())));
        }
        t
    } else {
        pnm::decode(&bytes).map_err(ctx)?
    };
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Sample {
        id,
        image,
        label: None,
        anomaly_type: None,
    })
}

/// Writes `[3, H, W]` as P6 (or P5 for one channel), or ADTN when the path ends
/// in `.adtn`.
pub fn write_image(image: &Tensor, path: &Path) -> Result<()> {
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some("adtn") => adtn::encode(image),
        Some("pgm") => pnm::encode_pgm(image)?,
        _ => pnm::encode_ppm(image)?,
    };
    fsutil::write_atomic(path, &bytes)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPath {
    pub path: PathBuf,
    /// `"good"` or the defect subfolder.
    pub folder: String,
}

impl LabeledPath {
    pub fn id(&self) -> String {
        let stem = self.path.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default();
        format!("{}/{stem}", self.folder)
    }

    pub fn label(&self) -> Label {
        if self.folder == "good" {
            Label::Flawless
        } else {
            Label::Anomalous
        }
    }

    pub fn load(&self) -> Result<Sample> {
        let mut s = decode_image(&self.path)?;
        s.id = self.id();
        s.label = Some(self.label());
        s.anomaly_type = (self.folder != "good").then(|| self.folder.clone());
        Ok(s)
    }
}

/// An MVTec-style category: `{root}/{category}/train/good`,
/// `{root}/{category}/test/good`, `{root}/{category}/test/{defect_type}`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetLayout {
    pub root: PathBuf,
    pub category: String,
    pub train_flawless: Vec<LabeledPath>,
    pub test_flawless: Vec<LabeledPath>,
    pub test_anomalous: Vec<LabeledPath>,
}

impl DatasetLayout {
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.train_flawless.len(), self.test_flawless.len(), self.test_anomalous.len())
    }

    /// Test flawless then test anomalous, each in enumeration order.
    pub fn test_paths(&self) -> impl Iterator<Item = &LabeledPath> {
        self.test_flawless.iter().chain(&self.test_anomalous)
    }

    pub fn load_train(&self) -> Result<Vec<Sample>> {
        self.train_flawless.iter().map(LabeledPath::load).collect()
    }

    pub fn load_test(&self) -> Result<Vec<Sample>> {
        self.test_paths().map(LabeledPath::load).collect()
    }
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<(String, PathBuf, bool)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let is_dir = path.is_dir();
        out.push((entry.file_name().to_string_lossy().into_owned(), path, is_dir));
    }
    out.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
    Ok(out)
}

/// Image files in `dir`, byte-lexicographic by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(read_dir_sorted(dir)?
        .into_iter()
        .filter(|(_, p, is_dir)| {
            !is_dir
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e))
        })
        .map(|(_, p, _)| p)
        .collect())
}

pub fn load_dataset(root: &Path, category: &str) -> Result<DatasetLayout> {
    let base = root.join(category);
    let train_dir = base.join("train").join("good");
    if !train_dir.is_dir() {
        return Err(Error::Layout(format!("missing directory {}", train_dir.display())));
    }
    let tag = |folder: &str, paths: Vec<PathBuf>| {
        paths
            .into_iter()
            .map(|path| LabeledPath {
                path,
                folder: folder.to_string(),
            })
            .collect::<Vec<_>>()
    };
    let train_flawless = tag("good", list_images(&train_dir)?);
    if train_flawless.is_empty() {
        return Err(Error::Layout(format!("no images in {}", train_dir.display())));
    }
    let test_dir = base.join("test");
    if !test_dir.is_dir() {
        return Err(Error::Layout(format!("missing directory {}", test_dir.display())));
    }
    let mut test_flawless = Vec::new();
    let mut test_anomalous = Vec::new();
    for (name, path, is_dir) in read_dir_sorted(&test_dir)? {
        if !is_dir {
            continue;
        }
        let images = tag(&name, list_images(&path)?);
        if name == "good" {
            test_flawless = images;
        } else {
            test_anomalous.extend(images);
        }
    }
    if test_flawless.is_empty() && test_anomalous.is_empty() {
        return Err(Error::Layout(format!("no test images under {}", test_dir.display())));
    }
    Ok(DatasetLayout {
        root: root.to_path_buf(),
        category: category.to_string(),
        train_flawless,
        test_flawless,
        test_anomalous,
    })
}
