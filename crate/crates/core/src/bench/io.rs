//! On-disk dataset layout: `images/<sample_id>.ppm` plus `labels.csv`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dataset::{DatasetSplit, SyntheticDataset};
use super::face::{PIXELS, SIZE};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRow {
    pub sample_id: usize,
    pub binary_label: usize,
    pub source_label: usize,
    pub split: String,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            what: "labels csv",
            reason: format!("{}: {other:?}", path.display()),
        },
    }
}

/// Quantizes `[3, 32, 32]` values in `[0, 1]` to an 8-bit binary PPM.
pub(crate) fn write_ppm(path: &Path, chw: &[f64]) -> Result<()> {
    let mut rgb = Vec::with_capacity(3 * PIXELS);
    for p in 0..PIXELS {
        for c in 0..3 {
            rgb.push((chw[c * PIXELS + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    write_pnm(path, &rgb, SIZE, SIZE, true)
}

/// Binary PPM (`P6`) when `rgb`, binary PGM (`P5`) otherwise.
pub(crate) fn write_pnm(path: &Path, pixels: &[u8], width: usize, height: usize, rgb: bool) -> Result<()> {
    use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
    use image::{ExtendedColorType, ImageEncoder};

    let (subtype, color) = if rgb {
        (PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
    } else {
        (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
    };
    let mut buf = Vec::new();
    PnmEncoder::new(&mut buf)
        .with_subtype(subtype)
        .write_image(pixels, width as u32, height as u32, color)
        .map_err(|e| Error::Format {
            what: "image",
            reason: format!("{}: {e}", path.display()),
        })?;
    crate::nn::write_file(path, &buf)
}

/// Writes every sample, labelled with its split membership. Returns the
/// written paths, `labels.csv` last.
pub fn write_dataset(ds: &SyntheticDataset, split: &DatasetSplit, dir: &Path) -> Result<Vec<PathBuf>> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut which = vec!["unused"; ds.len()];
    for (name, idx) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        for &i in idx {
            which[i] = name;
        }
    }
    let mut written = Vec::with_capacity(ds.len() + 1);
    let labels = dir.join("labels.csv");
    let mut w = csv::Writer::from_path(&labels).map_err(|e| csv_err(&labels, e))?;
    for (i, s) in ds.samples.iter().enumerate() {
        let path = img_dir.join(format!("{}.ppm", s.sample_id));
        write_ppm(&path, ds.image(i))?;
        written.push(path);
        w.serialize(LabelRow {
            sample_id: s.sample_id,
            binary_label: s.binary_label,
            source_label: s.source_label,
            split: which[i].into(),
        })
        .map_err(|e| csv_err(&labels, e))?;
    }
    w.flush().map_err(|e| Error::io(&labels, e))?;
    written.push(labels);
    Ok(written)
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}
