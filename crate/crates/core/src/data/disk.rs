//! Directory datasets: `<dir>/images/*.png` (RGB), optional
//! `<dir>/labels/*.png` (8-bit single channel, 255 = ignore), matched by
//! filename stem, plus a `domain.json` manifest written beside the splits.

use std::fs;
use std::path::{Path, PathBuf};

use super::{DataError, DataResult, DomainDataset, DomainRole, Split};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainManifest {
    pub name: String,
    pub role: DomainRole,
    pub class_count: usize,
    /// (height, width)
    pub image_size: [usize; 2],
    pub train_samples: usize,
    pub val_samples: usize,
}

impl DomainManifest {
    pub fn save(&self, dir: &Path) -> DataResult<()> {
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| DataError::BadManifest(e.to_string()))?;
        write_file(&dir.join("domain.json"), body.as_bytes())
    }

    pub fn load(path: &Path) -> DataResult<Self> {
        let body = fs::read_to_string(path).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        serde_json::from_str(&body)
            .map_err(|e| DataError::BadManifest(format!("{}: {e}", path.display())))
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> DataResult<()> {
    fs::write(path, bytes).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn ensure_dir(path: &Path) -> DataResult<()> {
    fs::create_dir_all(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write one split as PNGs under `dir/images` (and `dir/labels` when labeled).
pub fn save_dataset_split(ds: &DomainDataset, dir: &Path) -> DataResult<()> {
    let images_dir = dir.join("images");
    ensure_dir(&images_dir)?;
    let labels_dir = ds.has_labels().then(|| dir.join("labels"));
    if let Some(d) = &labels_dir {
        ensure_dir(d)?;
    }
    let (h, w) = (ds.height, ds.width);
    let px = h * w;
    for i in 0..ds.len() {
        let data = ds.image(i);
        let mut rgb = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                rgb.put_pixel(
                    x as u32,
                    y as u32,
                    image::Rgb([
                        quantize(data[p]),
                        quantize(data[px + p]),
                        quantize(data[2 * px + p]),
                    ]),
                );
            }
        }
        let img_path = images_dir.join(format!("{i:05}.png"));
        rgb.save(&img_path).map_err(|e| DataError::Unreadable {
            file: img_path.display().to_string(),
            reason: e.to_string(),
        })?;
        if let (Some(dir), Some(lbl)) = (&labels_dir, ds.label(i)) {
            let gray =
                image::GrayImage::from_raw(w as u32, h as u32, lbl.to_vec()).expect("sized buffer");
            let lbl_path = dir.join(format!("{i:05}.png"));
            gray.save(&lbl_path).map_err(|e| DataError::Unreadable {
                file: lbl_path.display().to_string(),
                reason: e.to_string(),
            })?;
        }
    }
    Ok(())
}

/// Write a whole domain: `dir/train`, `dir/val`, and the manifest.
pub fn save_domain(train: &DomainDataset, val: &DomainDataset, dir: &Path) -> DataResult<()> {
    ensure_dir(dir)?;
    save_dataset_split(train, &dir.join("train"))?;
    save_dataset_split(val, &dir.join("val"))?;
    DomainManifest {
        name: train.name.clone(),
        role: train.role,
        class_count: train.class_count,
        image_size: [train.height, train.width],
        train_samples: train.len(),
        val_samples: val.len(),
    }
    .save(dir)
}

fn list_pngs(dir: &Path) -> DataResult<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| DataError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    files.sort();
    Ok(files)
}

/// Load one split directory. The manifest is searched in the directory and
/// its parent; without one, the name comes from the path, the role defaults
/// to target, and the class count is inferred from the labels.
pub fn load_directory_dataset(path: &Path) -> DataResult<DomainDataset> {
    let images_dir = path.join("images");
    if !images_dir.is_dir() {
        return Err(DataError::NoImages(path.display().to_string()));
    }
    let files = list_pngs(&images_dir)?;
    if files.is_empty() {
        return Err(DataError::NoImages(images_dir.display().to_string()));
    }
    let labels_dir = path.join("labels");
    let has_labels = labels_dir.is_dir();

    let manifest = [path.join("domain.json"), path.join("../domain.json")]
        .iter()
        .find(|p| p.is_file())
        .map(|p| DomainManifest::load(p))
        .transpose()?;

    let mut height = 0usize;
    let mut width = 0usize;
    let mut images: Vec<f32> = Vec::new();
    let mut labels: Vec<u8> = Vec::new();
    for file in &files {
        let img = image::open(file)
            .map_err(|e| DataError::Unreadable {
                file: file.display().to_string(),
                reason: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        if height == 0 {
            height = h;
            width = w;
        } else if h != height || w != width {
            return Err(DataError::SizeMismatch {
                file: file.display().to_string(),
                image: format!("{w}x{h}"),
                label: format!("expected {width}x{height}"),
            });
        }
        let px = height * width;
        let base = images.len();
        images.resize(base + 3 * px, 0.0);
        for y in 0..height {
            for x in 0..width {
                let p = img.get_pixel(x as u32, y as u32);
                for ch in 0..3 {
                    images[base + ch * px + y * width + x] = p.0[ch] as f32 / 255.0;
                }
            }
        }
        if has_labels {
            let stem = file.file_name().expect("listed file");
            let lbl_path = labels_dir.join(stem);
            let lbl = image::open(&lbl_path)
                .map_err(|e| DataError::Unreadable {
                    file: lbl_path.display().to_string(),
                    reason: e.to_string(),
                })?
                .to_luma8();
            if lbl.width() as usize != width || lbl.height() as usize != height {
                return Err(DataError::SizeMismatch {
                    file: lbl_path.display().to_string(),
                    image: format!("{width}x{height}"),
                    label: format!("{}x{}", lbl.width(), lbl.height()),
                });
            }
            labels.extend(lbl.into_raw());
        }
    }

    let split = if path.file_name().map(|n| n == "val").unwrap_or(false) {
        Split::Val
    } else {
        Split::Train
    };
    let inferred_classes = || {
        labels
            .iter()
            .filter(|&&l| l != super::IGNORE_LABEL)
            .map(|&l| l as usize + 1)
            .max()
            .unwrap_or(0)
    };
    let (name, role, class_count) = match &manifest {
        Some(m) => (m.name.clone(), m.role, m.class_count),
        None => (
            path.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into()),
            DomainRole::Target,
            inferred_classes(),
        ),
    };
    DomainDataset::from_parts(
        name,
        role,
        split,
        class_count,
        height,
        width,
        images,
        has_labels.then_some(labels),
    )
}
