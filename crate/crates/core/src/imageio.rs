//! Grayscale image and raw grid file I/O.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{GrayImage, ImageBuffer, Luma};

use crate::datamodel::{DatasetManifest, ImageSize};
use crate::error::{Error, Result};
use crate::grid::Grid;

const GRID_MAGIC: &[u8; 4] = b"VSGR";

fn image_err(path: &Path, e: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Loads a single-channel image as intensities in [0, 1], resized to `size` when needed.
pub fn load_gray(path: impl AsRef<Path>, size: ImageSize) -> Result<Grid> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let img = if img.height() as usize != size.height || img.width() as usize != size.width {
        image::imageops::resize(
            &img,
            size.width as u32,
            size.height as u32,
            FilterType::Triangle,
        )
    } else {
        img
    };
    Ok(Grid::from_fn(size.height, size.width, |r, c| {
        img.get_pixel(c as u32, r as u32).0[0] as f64 / 255.0
    }))
}

/// Loads a 0/255 mask as a {0,1} grid; any pixel ≥ 128 counts as set.
pub fn load_mask(path: impl AsRef<Path>, size: ImageSize) -> Result<Grid> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let img = if img.height() as usize != size.height || img.width() as usize != size.width {
        image::imageops::resize(
            &img,
            size.width as u32,
            size.height as u32,
            FilterType::Nearest,
        )
    } else {
        img
    };
    Ok(Grid::from_fn(size.height, size.width, |r, c| {
        if img.get_pixel(c as u32, r as u32).0[0] >= 128 {
            1.0
        } else {
            0.0
        }
    }))
}

fn to_gray8(grid: &Grid) -> GrayImage {
    ImageBuffer::from_fn(grid.width() as u32, grid.height() as u32, |x, y| {
        let v = grid.get(y as usize, x as usize).clamp(0.0, 1.0);
        Luma([(v * 255.0).round() as u8])
    })
}

/// Writes a grid with values in [0, 1] as an 8-bit grayscale PNG.
pub fn save_gray_png(path: impl AsRef<Path>, grid: &Grid) -> Result<()> {
    let path = path.as_ref();
    to_gray8(grid).save(path).map_err(|e| image_err(path, e))
}

/// 8-bit grayscale PNG bytes of a grid with values in [0, 1].
pub fn encode_gray_png(grid: &Grid) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    to_gray8(grid)
        .write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| image_err(Path::new("<memory>"), e))?;
    Ok(buf.into_inner())
}

/// Writes a grid with values in [0, 1] as a 16-bit grayscale PNG.
pub fn save_gray16_png(path: impl AsRef<Path>, grid: &Grid) -> Result<()> {
    let path = path.as_ref();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(grid.width() as u32, grid.height() as u32, |x, y| {
            let v = grid.get(y as usize, x as usize).clamp(0.0, 1.0);
            Luma([(v * 65535.0).round() as u16])
        });
    img.save(path).map_err(|e| image_err(path, e))
}

/// Raw grid file: magic, u32 height, u32 width, then f64 values, little-endian.
pub fn write_grid(path: impl AsRef<Path>, grid: &Grid) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(12 + grid.len() * 8);
    buf.extend_from_slice(GRID_MAGIC);
    buf.extend_from_slice(&(grid.height() as u32).to_le_bytes());
    buf.extend_from_slice(&(grid.width() as u32).to_le_bytes());
    for v in grid.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &buf)
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<Grid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != GRID_MAGIC {
        return Err(image_err(path, "not a grid file"));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != h * w * 8 {
        return Err(image_err(path, "truncated grid file"));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Grid::from_vec(h, w, data)
}

/// Writes to a sibling temp file then renames over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = tmp_path(path);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

/// Decoded manifest images keyed by sample_id; unreadable files are recorded, not fatal.
#[derive(Debug, Clone, Default)]
pub struct ImageStore {
    pub images: BTreeMap<String, Grid>,
    pub failures: BTreeMap<String, String>,
}

impl ImageStore {
    pub fn load(manifest: &DatasetManifest) -> Self {
        let mut store = ImageStore::default();
        for s in &manifest.samples {
            match load_gray(&s.image_path, manifest.image_size) {
                Ok(g) => {
                    store.images.insert(s.sample_id.clone(), g);
                }
                Err(e) => {
                    tracing::warn!(sample_id = %s.sample_id, error = %e, "image unreadable");
                    store.failures.insert(s.sample_id.clone(), e.to_string());
                }
            }
        }
        store
    }

    pub fn get(&self, sample_id: &str) -> Option<&Grid> {
        self.images.get(sample_id)
    }
}
