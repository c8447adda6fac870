//! Paired clean/rainy image directories.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::fourier::Field;
use crate::image_io::load_png;

/// One aligned clean/rainy pair.
#[derive(Clone, Debug)]
pub struct ImagePair {
    pub name: String,
    pub clean: Field,
    pub rainy: Field,
}

/// How loaded images are cropped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Crop {
    /// Keep full images.
    None,
    /// Centre crop to `height x width`.
    Center { height: usize, width: usize },
}

/// A list of pairs sorted by file name.
#[derive(Clone, Debug, Default)]
pub struct PairedDataset {
    pub pairs: Vec<ImagePair>,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Splits off the last `n` pairs.
    pub fn split_tail(mut self, n: usize) -> (PairedDataset, PairedDataset) {
        let tail = self.pairs.split_off(self.pairs.len().saturating_sub(n));
        (self, PairedDataset { pairs: tail })
    }
}

pub(crate) fn png_names(dir: &Path) -> Result<BTreeSet<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = BTreeSet::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let is_png = path
            .extension()
            .map(|e| e.eq_ignore_ascii_case("png"))
            .unwrap_or(false);
        if is_png && path.is_file() {
            names.insert(entry.file_name().to_string_lossy().into_owned());
        }
    }
    Ok(names)
}

/// Loads `dir/clean/*.png` and `dir/rainy/*.png`, matched by file name.
pub fn load_paired_dataset(dir: impl AsRef<Path>, crop: Crop) -> Result<PairedDataset> {
    let dir = dir.as_ref();
    let clean_dir = dir.join("clean");
    let rainy_dir = dir.join("rainy");
    let clean = png_names(&clean_dir)?;
    let rainy = png_names(&rainy_dir)?;
    let orphans: Vec<PathBuf> = clean
        .difference(&rainy)
        .map(|n| clean_dir.join(n))
        .chain(rainy.difference(&clean).map(|n| rainy_dir.join(n)))
        .collect();
    if !orphans.is_empty() {
        let list: Vec<String> = orphans.iter().map(|p| p.display().to_string()).collect();
        return Err(Error::Dataset(format!("unpaired files: {}", list.join(", "))));
    }
    if clean.is_empty() {
        return Err(Error::Dataset(format!("no PNG pairs under {}", dir.display())));
    }
    let mut pairs = Vec::with_capacity(clean.len());
    for name in clean {
        let c = load_png(clean_dir.join(&name))?;
        let r = load_png(rainy_dir.join(&name))?;
        if c.shape() != r.shape() {
            return Err(Error::Dataset(format!(
                "{name}: clean {:?} vs rainy {:?}",
                c.shape(),
                r.shape()
            )));
        }
        let (c, r) = match crop {
            Crop::None => (c, r),
            Crop::Center { height, width } => {
                let y0 = c.height().checked_sub(height);
                let x0 = c.width().checked_sub(width);
                let (Some(y0), Some(x0)) = (y0, x0) else {
                    return Err(Error::Dataset(format!(
                        "{name}: {}x{} is smaller than crop {height}x{width}",
                        c.height(),
                        c.width()
                    )));
                };
                (
                    crop_field(&c, y0 / 2, x0 / 2, height, width)?,
                    crop_field(&r, y0 / 2, x0 / 2, height, width)?,
                )
            }
        };
        pairs.push(ImagePair {
            name,
            clean: c,
            rainy: r,
        });
    }
    Ok(PairedDataset { pairs })
}

/// Copies the `height x width` window at `(y0, x0)`.
pub fn crop_field(f: &Field, y0: usize, x0: usize, height: usize, width: usize) -> Result<Field> {
    if y0 + height > f.height() || x0 + width > f.width() || height == 0 || width == 0 {
        return Err(Error::Shape(format!(
            "crop {height}x{width} at ({y0}, {x0}) outside {}x{}",
            f.height(),
            f.width()
        )));
    }
    Field::from_fn(height, width, f.channels(), |y, x, c| f.get(y0 + y, x0 + x, c))
}

/// Aligned random crop of a pair, or the pair itself when already that size.
pub fn random_crop<R: Rng + ?Sized>(
    pair: &ImagePair,
    height: usize,
    width: usize,
    rng: &mut R,
) -> Result<(Field, Field)> {
    let (h, w, _) = pair.clean.shape();
    if h == height && w == width {
        return Ok((pair.clean.clone(), pair.rainy.clone()));
    }
    if h < height || w < width {
        return Err(Error::Dataset(format!(
            "{}: {h}x{w} is smaller than crop {height}x{width}",
            pair.name
        )));
    }
    let y0 = rng.random_range(0..=h - height);
    let x0 = rng.random_range(0..=w - width);
    Ok((
        crop_field(&pair.clean, y0, x0, height, width)?,
        crop_field(&pair.rainy, y0, x0, height, width)?,
    ))
}
