//! Images to ordered patch sequences.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

pub const CHANNELS: usize = 3;
pub const DEFAULT_SIDE: usize = 32;
pub const DEFAULT_PATCH: usize = 8;

/// RGB image, row-major `[height][width][channel]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * CHANNELS {
            return Err(Error::shape("image", format!("{height}x{width} with {} values", data.len())));
        }
        Ok(ImageTensor { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(y, x));
            }
        }
        ImageTensor { height, width, data }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn mse(&self, other: &ImageTensor) -> Result<f64> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::shape("image mse", format!("{}x{} vs {}x{}", self.height, self.width, other.height, other.width)));
        }
        let n = self.data.len() as f64;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
    }

    /// Binary PPM (P6), 8 bits per channel.
    pub fn write_ppm<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        out.write_all(&bytes)?;
        Ok(())
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        self.write_ppm(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    /// Bilinear resampling with half-pixel centres.
    pub fn resize(&self, height: usize, width: usize) -> ImageTensor {
        let map = |dst: usize, src_len: usize, dst_len: usize| -> (usize, usize, f64) {
            let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).max(0.0);
            let lo = (s.floor() as usize).min(src_len - 1);
            let hi = (lo + 1).min(src_len - 1);
            (lo, hi, s - lo as f64)
        };
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            let (y0, y1, fy) = map(y, self.height, height);
            for x in 0..width {
                let (x0, x1, fx) = map(x, self.width, width);
                let (p00, p01, p10, p11) = (self.pixel(y0, x0), self.pixel(y0, x1), self.pixel(y1, x0), self.pixel(y1, x1));
                for c in 0..CHANNELS {
                    let top = if fx == 0.0 { p00[c] } else { p00[c] * (1.0 - fx) + p01[c] * fx };
                    let bottom = if fx == 0.0 { p10[c] } else { p10[c] * (1.0 - fx) + p11[c] * fx };
                    data.push(if fy == 0.0 { top } else { top * (1.0 - fy) + bottom * fy });
                }
            }
        }
        ImageTensor { height, width, data }
    }
}

/// Decode a PNG or PPM file, resize to `side x side` and scale to `[0, 1]`.
pub fn load_and_resize(path: &Path, side: usize) -> Result<ImageTensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    let img = ImageTensor::new(h as usize, w as usize, data)?;
    Ok(if img.height == side && img.width == side { img } else { img.resize(side, side) })
}

/// Flattened square patches in row-major grid order; each patch is its
/// pixels in `[y][x][channel]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPatches {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl RawPatches {
    pub fn empty(dim: usize) -> Self {
        RawPatches { rows: 0, cols: 0, dim, data: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn split_patches(img: &ImageTensor, patch: usize) -> Result<RawPatches> {
    if patch == 0 || !img.height.is_multiple_of(patch) || !img.width.is_multiple_of(patch) {
        return Err(Error::shape("split_patches", format!("{}x{} image, patch {patch}", img.height, img.width)));
    }
    let (rows, cols) = (img.height / patch, img.width / patch);
    let dim = patch * patch * CHANNELS;
    let mut data = Vec::with_capacity(rows * cols * dim);
    for pr in 0..rows {
        for pc in 0..cols {
            for y in pr * patch..(pr + 1) * patch {
                let start = (y * img.width + pc * patch) * CHANNELS;
                data.extend_from_slice(&img.data[start..start + patch * CHANNELS]);
            }
        }
    }
    Ok(RawPatches { rows, cols, dim, data })
}

/// Inverse of [`split_patches`].
pub fn assemble_patches(patches: &RawPatches, patch: usize) -> Result<ImageTensor> {
    if patches.dim != patch * patch * CHANNELS || patches.data.len() != patches.len() * patches.dim {
        return Err(Error::shape("assemble_patches", format!("dim {} for patch {patch}", patches.dim)));
    }
    let (h, w) = (patches.rows * patch, patches.cols * patch);
    let mut data = vec![0.0; h * w * CHANNELS];
    for pr in 0..patches.rows {
        for pc in 0..patches.cols {
            let src = patches.patch(pr * patches.cols + pc);
            for dy in 0..patch {
                let y = pr * patch + dy;
                let dst = (y * w + pc * patch) * CHANNELS;
                data[dst..dst + patch * CHANNELS].copy_from_slice(&src[dy * patch * CHANNELS..(dy + 1) * patch * CHANNELS]);
            }
        }
    }
    ImageTensor::new(h, w, data)
}

/// Projected patch features with their grid geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence<S> {
    pub features: Tensor<S>,
    pub grid: (usize, usize),
}

/// Linear projection of every patch: `[n, dim] · [dim, d_model]`, on the tape.
pub fn embed_patches_on<S: Scalar>(tape: &mut Tape<'_, S>, raw: &RawPatches, weight: Var) -> Result<Var> {
    let x = tape.constant(vec![raw.len(), raw.dim], raw.data.iter().map(|&v| S::of(v)).collect())?;
    tape.matmul(x, weight)
}

pub fn embed_patches<S: Scalar>(raw: &RawPatches, weight: &Tensor<S>) -> Result<PatchSequence<S>> {
    let mut tape = Tape::new();
    let w = tape.leaf(weight.clone());
    let out = embed_patches_on(&mut tape, raw, w)?;
    Ok(PatchSequence { features: tape.tensor(out), grid: (raw.rows, raw.cols) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index_image(side: usize) -> ImageTensor {
        ImageTensor::from_fn(side, side, |y, x| [y as f64 / 100.0, x as f64 / 100.0, 0.5])
    }

    #[test]
    fn solid_white_downscales_to_ones() {
        let white = ImageTensor::from_fn(64, 64, |_, _| [1.0; 3]);
        let small = white.resize(32, 32);
        assert_eq!(small.data.len(), 32 * 32 * 3);
        assert!(small.data.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn same_size_resize_is_identity() {
        let img = index_image(32);
        assert_eq!(img.resize(32, 32), img);
    }

    #[test]
    fn checkerboard_upsampling_keeps_corners() {
        let board = ImageTensor::from_fn(2, 2, |y, x| if (y + x) % 2 == 0 { [1.0; 3] } else { [0.0; 3] });
        let big = board.resize(32, 32);
        assert_eq!(big.pixel(0, 0), [1.0; 3]);
        assert_eq!(big.pixel(0, 31), [0.0; 3]);
        assert_eq!(big.pixel(31, 0), [0.0; 3]);
        assert_eq!(big.pixel(31, 31), [1.0; 3]);
        // first interior sample past the corner plateau: s = 8.5 * 2/32 - 0.5
        let fx = 8.5 * 2.0 / 32.0 - 0.5;
        assert!((big.pixel(0, 8)[0] - (1.0 - fx)).abs() < 1e-12);
    }

    #[test]
    fn patch_geometry() {
        let p = split_patches(&index_image(32), 8).unwrap();
        assert_eq!((p.len(), p.dim), (16, 192));
        let whole = index_image(8);
        let one = split_patches(&whole, 8).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.data, whole.data);
        assert!(split_patches(&index_image(30), 8).is_err());
    }

    #[test]
    fn patch_zero_one_covers_columns_8_to_15() {
        let img = index_image(32);
        let p = split_patches(&img, 8).unwrap();
        let patch = p.patch(1);
        for dy in 0..8 {
            for dx in 0..8 {
                let i = (dy * 8 + dx) * 3;
                assert_eq!(&patch[i..i + 3], &img.pixel(dy, 8 + dx));
            }
        }
    }

    #[test]
    fn assemble_inverts_split() {
        let img = index_image(32);
        let p = split_patches(&img, 8).unwrap();
        assert_eq!(assemble_patches(&p, 8).unwrap(), img);
    }

    #[test]
    fn embedding_with_zero_and_selector_weights() {
        let img = index_image(8);
        let raw = split_patches(&img, 4).unwrap();
        let zero = Tensor::<f64>::zeros(vec![raw.dim, 5]);
        let seq = embed_patches(&raw, &zero).unwrap();
        assert_eq!(seq.grid, (2, 2));
        assert!(seq.features.data().iter().all(|&v| v == 0.0));

        let onehot = RawPatches { rows: 1, cols: 1, dim: 3, data: vec![0.0, 1.0, 0.0] };
        let w = Tensor::<f64>::from_f64(vec![3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(embed_patches(&onehot, &w).unwrap().features.data(), &[3.0, 4.0]);
    }

    #[test]
    fn ppm_roundtrip_through_loader() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        let img = ImageTensor::from_fn(32, 32, |y, x| [(y % 2) as f64, (x % 2) as f64, 1.0]);
        img.save_ppm(&path).unwrap();
        let back = load_and_resize(&path, 32).unwrap();
        assert!(img.mse(&back).unwrap() < 1e-12);
        assert!(matches!(load_and_resize(&dir.path().join("missing.png"), 32), Err(Error::Image(_) | Error::Io(_))));
    }

    #[test]
    fn ascii_ppm_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        std::fs::write(&path, "P3\n2 1\n255\n255 0 0  0 0 255\n").unwrap();
        let img = load_and_resize(&path, 2).unwrap();
        assert_eq!(img.pixel(0, 0), [1.0, 0.0, 0.0]);
    }
}
