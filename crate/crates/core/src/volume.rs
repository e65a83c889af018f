//! Binary mask volumes and their orthographic projections.
//!
//! Axis convention: a volume is indexed `(depth, height, width)` with width
//! fastest. Depth is the axial (A-scan) direction, height the B-scan index
//! and width the lateral position along a B-scan.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::nn::Tensor;
use crate::{Error, Result};

/// Dense binary voxel grid, `voxels[(d * H + h) * W + w] ∈ {0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskVolume {
    dims: [usize; 3],
    voxels: Vec<u8>,
    /// Free-form provenance, e.g. scan geometry. Not stored in VMK1 files.
    pub meta: Option<String>,
}

impl MaskVolume {
    pub fn empty(dims: [usize; 3]) -> Result<Self> {
        check_dims(dims)?;
        Ok(MaskVolume {
            dims,
            voxels: vec![0; dims.iter().product()],
            meta: None,
        })
    }

    pub fn from_voxels(dims: [usize; 3], voxels: Vec<u8>) -> Result<Self> {
        check_dims(dims)?;
        let n: usize = dims.iter().product();
        if voxels.len() != n {
            return Err(Error::shape(
                "mask volume",
                format!("{dims:?} needs {n} voxels, got {}", voxels.len()),
            ));
        }
        if let Some(i) = voxels.iter().position(|&v| v > 1) {
            return Err(Error::invalid(
                "mask volume",
                format!("voxel {i} has value {} (must be 0 or 1)", voxels[i]),
            ));
        }
        Ok(MaskVolume {
            dims,
            voxels,
            meta: None,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxels(&self) -> &[u8] {
        &self.voxels
    }

    #[inline]
    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims[1] + h) * self.dims[2] + w
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> bool {
        self.voxels[self.index(d, h, w)] != 0
    }

    pub fn set(&mut self, d: usize, h: usize, w: usize, on: bool) {
        let i = self.index(d, h, w);
        self.voxels[i] = on as u8;
    }

    pub(crate) fn voxels_mut(&mut self) -> &mut [u8] {
        &mut self.voxels
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.iter().all(|&v| v == 0)
    }

    /// `[1, D, H, W]` tensor of 0.0 / 1.0, the single-channel network input.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let mut shape = vec![1];
        shape.extend_from_slice(&self.dims);
        Tensor::from_vec(&shape, self.voxels.iter().map(|&v| v as f32).collect())
            .expect("dims are nonzero")
    }
}

fn check_dims(dims: [usize; 3]) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::invalid("volume dims", format!("{dims:?} has a zero extent")));
    }
    Ok(())
}

/// Reduction applied over each output cell's preimage when shrinking.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    /// Any set voxel sets the output; thin structures survive.
    Max,
    /// Fraction of set voxels, for grayscale use.
    Mean,
}

/// Source index range feeding output index `o` along one axis.
///
/// Shrinking partitions the source proportionally; growing (or equal size)
/// picks the nearest source cell.
fn preimage(o: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    if n_out >= n_in {
        let s = o * n_in / n_out;
        (s, s + 1)
    } else {
        let lo = o * n_in / n_out;
        let hi = ((o + 1) * n_in).div_ceil(n_out);
        (lo, hi.min(n_in))
    }
}

/// Resamples one axis of a row-major 3D grid.
fn resample_axis(data: &[f32], dims: [usize; 3], axis: usize, n_out: usize, reduce: Reduce) -> Vec<f32> {
    let mut out_dims = dims;
    out_dims[axis] = n_out;
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut out = vec![0.0f32; out_dims.iter().product()];
    let ranges: Vec<(usize, usize)> = (0..n_out).map(|o| preimage(o, dims[axis], n_out)).collect();
    let mut i = 0;
    for a in 0..out_dims[0] {
        for b in 0..out_dims[1] {
            for c in 0..out_dims[2] {
                let idx = [a, b, c];
                let (lo, hi) = ranges[idx[axis]];
                let mut base = [a, b, c];
                base[axis] = 0;
                let base = base[0] * strides[0] + base[1] * strides[1] + base[2];
                let vals = (lo..hi).map(|s| data[base + s * strides[axis]]);
                out[i] = match reduce {
                    Reduce::Max => vals.fold(0.0, f32::max),
                    Reduce::Mean => vals.sum::<f32>() / (hi - lo) as f32,
                };
                i += 1;
            }
        }
    }
    out
}

/// Resamples a volume to `target` dims, returning per-voxel values in `[0, 1]`.
pub fn downsample(v: &MaskVolume, target: [usize; 3], reduce: Reduce) -> Result<Vec<f32>> {
    check_dims(target)?;
    let mut dims = v.dims;
    let mut data: Vec<f32> = v.voxels.iter().map(|&x| x as f32).collect();
    for axis in 0..3 {
        if dims[axis] != target[axis] {
            data = resample_axis(&data, dims, axis, target[axis], reduce);
            dims[axis] = target[axis];
        }
    }
    Ok(data)
}

/// Max-rule downsampling of a binary mask; larger targets upsample by
/// nearest neighbour.
pub fn downsample_mask(v: &MaskVolume, target: [usize; 3]) -> Result<MaskVolume> {
    let data = downsample(v, target, Reduce::Max)?;
    MaskVolume::from_voxels(target, data.into_iter().map(|x| (x > 0.0) as u8).collect())
}

/// Grayscale image, row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    rows: usize,
    cols: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("image size", format!("{rows}x{cols}")));
        }
        Ok(Image {
            rows,
            cols,
            pixels: vec![0.0; rows * cols],
        })
    }

    pub fn from_pixels(rows: usize, cols: usize, pixels: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 || pixels.len() != rows * cols {
            return Err(Error::shape(
                "image",
                format!("{rows}x{cols} with {} pixels", pixels.len()),
            ));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("image", "pixel outside [0, 1]"));
        }
        Ok(Image { rows, cols, pixels })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.pixels[r * self.cols + c]
    }

    /// Number of nonzero pixels.
    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p > 0.0).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resize {
    Nearest,
    Bilinear,
}

/// Resamples an image; nearest keeps binary images binary.
pub fn resize_image(img: &Image, rows: usize, cols: usize, method: Resize) -> Result<Image> {
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("resize target", format!("{rows}x{cols}")));
    }
    if rows == img.rows && cols == img.cols {
        return Ok(img.clone());
    }
    let mut out = Vec::with_capacity(rows * cols);
    match method {
        Resize::Nearest => {
            for r in 0..rows {
                let sr = r * img.rows / rows;
                for c in 0..cols {
                    out.push(img.get(sr, c * img.cols / cols));
                }
            }
        }
        Resize::Bilinear => {
            // half-pixel centres, clamped at the borders
            let src = |o: usize, n_in: usize, n_out: usize| {
                let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
                let i0 = (x as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (x - i0 as f64).min(1.0) as f32)
            };
            for r in 0..rows {
                let (r0, r1, fr) = src(r, img.rows, rows);
                for c in 0..cols {
                    let (c0, c1, fc) = src(c, img.cols, cols);
                    let top = img.get(r0, c0) * (1.0 - fc) + img.get(r0, c1) * fc;
                    let bot = img.get(r1, c0) * (1.0 - fc) + img.get(r1, c1) * fc;
                    out.push((top * (1.0 - fr) + bot * fr).clamp(0.0, 1.0));
                }
            }
        }
    }
    Image::from_pixels(rows, cols, out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum View {
    /// Collapses depth: enface `H x W`.
    Frontal,
    /// Collapses height: `D x W`.
    Transverse,
    /// Collapses width: `D x H`.
    Sagittal,
}

impl View {
    pub const ALL: [View; 3] = [View::Frontal, View::Transverse, View::Sagittal];

    pub fn name(self) -> &'static str {
        match self {
            View::Frontal => "frontal",
            View::Transverse => "transverse",
            View::Sagittal => "sagittal",
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frontal" => Ok(View::Frontal),
            "transverse" => Ok(View::Transverse),
            "sagittal" => Ok(View::Sagittal),
            other => Err(Error::UnknownView(other.into())),
        }
    }
}

/// The three orthographic projections of one volume.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewTriplet {
    pub frontal: Image,
    pub transverse: Image,
    pub sagittal: Image,
}

impl ViewTriplet {
    pub fn get(&self, view: View) -> &Image {
        match view {
            View::Frontal => &self.frontal,
            View::Transverse => &self.transverse,
            View::Sagittal => &self.sagittal,
        }
    }

    pub fn images(&self) -> [&Image; 3] {
        [&self.frontal, &self.transverse, &self.sagittal]
    }

    /// All three views resized to one common extent.
    pub fn resized(&self, rows: usize, cols: usize, method: Resize) -> Result<ViewTriplet> {
        Ok(ViewTriplet {
            frontal: resize_image(&self.frontal, rows, cols, method)?,
            transverse: resize_image(&self.transverse, rows, cols, method)?,
            sagittal: resize_image(&self.sagittal, rows, cols, method)?,
        })
    }

    /// `[3, rows, cols]` network input (frontal, transverse, sagittal).
    pub fn to_tensor(&self) -> Result<Tensor<f32>> {
        let (r, c) = (self.frontal.rows, self.frontal.cols);
        if self.images().iter().any(|i| i.rows != r || i.cols != c) {
            return Err(Error::shape("view triplet", "views differ in size; resize first"));
        }
        let mut data = Vec::with_capacity(3 * r * c);
        for img in self.images() {
            data.extend_from_slice(&img.pixels);
        }
        Tensor::from_vec(&[3, r, c], data)
    }
}

/// Logical OR along each axis: frontal over depth, transverse over height,
/// sagittal over width.
pub fn orthographic_project(v: &MaskVolume) -> ViewTriplet {
    let [dn, hn, wn] = v.dims;
    let mut frontal = vec![0.0f32; hn * wn];
    let mut transverse = vec![0.0f32; dn * wn];
    let mut sagittal = vec![0.0f32; dn * hn];
    for d in 0..dn {
        for h in 0..hn {
            let row = &v.voxels[(d * hn + h) * wn..][..wn];
            for (w, &x) in row.iter().enumerate() {
                if x != 0 {
                    frontal[h * wn + w] = 1.0;
                    transverse[d * wn + w] = 1.0;
                    sagittal[d * hn + h] = 1.0;
                }
            }
        }
    }
    ViewTriplet {
        frontal: Image::from_pixels(hn, wn, frontal).expect("dims checked"),
        transverse: Image::from_pixels(dn, wn, transverse).expect("dims checked"),
        sagittal: Image::from_pixels(dn, hn, sagittal).expect("dims checked"),
    }
}

/// Puts three copies of one view into all slots.
pub fn replicate_view(view: View, t: &ViewTriplet) -> ViewTriplet {
    let img = t.get(view).clone();
    ViewTriplet {
        frontal: img.clone(),
        transverse: img.clone(),
        sagittal: img,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn or_oracle(v: &MaskVolume, view: View, r: usize, c: usize) -> bool {
        let [dn, hn, wn] = v.dims();
        match view {
            View::Frontal => (0..dn).any(|d| v.get(d, r, c)),
            View::Transverse => (0..hn).any(|h| v.get(r, h, c)),
            View::Sagittal => (0..wn).any(|w| v.get(r, c, w)),
        }
    }

    #[test]
    fn single_voxel_projection() {
        let mut v = MaskVolume::empty([8, 8, 8]).unwrap();
        v.set(5, 3, 2, true);
        let t = orthographic_project(&v);
        let on = |img: &Image| -> Vec<(usize, usize)> {
            (0..img.rows())
                .flat_map(|r| (0..img.cols()).map(move |c| (r, c)))
                .filter(|&(r, c)| img.get(r, c) > 0.0)
                .collect()
        };
        assert_eq!(on(&t.frontal), vec![(3, 2)]);
        assert_eq!(on(&t.transverse), vec![(5, 2)]);
        assert_eq!(on(&t.sagittal), vec![(5, 3)]);
    }

    #[test]
    fn empty_and_full_projections() {
        let v = MaskVolume::empty([3, 4, 5]).unwrap();
        let t = orthographic_project(&v);
        assert!(t.images().iter().all(|i| i.count() == 0));
        assert_eq!((t.frontal.rows(), t.frontal.cols()), (4, 5));
        assert_eq!((t.transverse.rows(), t.transverse.cols()), (3, 5));
        assert_eq!((t.sagittal.rows(), t.sagittal.cols()), (3, 4));
        let full = MaskVolume::from_voxels([3, 4, 5], vec![1; 60]).unwrap();
        let t = orthographic_project(&full);
        assert!(t.images().iter().all(|i| i.pixels().iter().all(|&p| p == 1.0)));
    }

    #[test]
    fn downsample_all_ones_and_empty() {
        let full = MaskVolume::from_voxels([256, 128, 256], vec![1; 256 * 128 * 256]).unwrap();
        let d = downsample_mask(&full, [128, 64, 128]).unwrap();
        assert_eq!(d.dims(), [128, 64, 128]);
        assert_eq!(d.count(), 128 * 64 * 128);
        let empty = MaskVolume::empty([20, 10, 20]).unwrap();
        assert!(downsample_mask(&empty, [7, 3, 9]).unwrap().is_empty());
    }

    #[test]
    fn downsample_upsamples_by_nearest() {
        let mut v = MaskVolume::empty([2, 1, 2]).unwrap();
        v.set(0, 0, 1, true);
        let up = downsample_mask(&v, [4, 2, 4]).unwrap();
        for d in 0..4 {
            for h in 0..2 {
                for w in 0..4 {
                    assert_eq!(up.get(d, h, w), d < 2 && w >= 2);
                }
            }
        }
    }

    #[test]
    fn mean_reduce_is_fraction() {
        let v = MaskVolume::from_voxels([1, 2, 2], vec![1, 0, 1, 1]).unwrap();
        let g = downsample(&v, [1, 1, 1], Reduce::Mean).unwrap();
        assert_eq!(g, vec![0.75]);
    }

    #[test]
    fn invalid_voxel_value_rejected() {
        assert!(MaskVolume::from_voxels([1, 1, 2], vec![0, 2]).is_err());
        assert!(MaskVolume::empty([0, 1, 1]).is_err());
    }

    #[test]
    fn resize_cases() {
        let ones = Image::from_pixels(100, 200, vec![1.0; 20_000]).unwrap();
        for m in [Resize::Nearest, Resize::Bilinear] {
            let r = resize_image(&ones, 200, 400, m).unwrap();
            assert!(r.pixels().iter().all(|&p| p == 1.0));
            assert_eq!(resize_image(&ones, 100, 200, m).unwrap(), ones);
        }
        let checker: Vec<f32> = (0..12).map(|i| ((i / 4 + i % 4) % 2) as f32).collect();
        let img = Image::from_pixels(3, 4, checker).unwrap();
        let up = resize_image(&img, 6, 8, Resize::Nearest).unwrap();
        for r in 0..6 {
            for c in 0..8 {
                assert_eq!(up.get(r, c), img.get(r / 2, c / 2));
            }
        }
    }

    #[test]
    fn replicate_is_idempotent() {
        let mut v = MaskVolume::empty([4, 3, 5]).unwrap();
        v.set(1, 2, 3, true);
        v.set(3, 0, 0, true);
        let t = orthographic_project(&v).resized(4, 4, Resize::Nearest).unwrap();
        let once = replicate_view(View::Frontal, &t);
        assert_eq!(once.frontal, t.frontal);
        assert_eq!(once.transverse, t.frontal);
        assert_eq!(once.sagittal, t.frontal);
        assert_eq!(replicate_view(View::Frontal, &once), once);
        assert_eq!(replicate_view(View::Sagittal, &once), once);
        assert!("coronal".parse::<View>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn projection_equals_or_oracle(bits in proptest::collection::vec(0u8..2, 512)) {
            let v = MaskVolume::from_voxels([8, 8, 8], bits).unwrap();
            let t = orthographic_project(&v);
            for view in View::ALL {
                let img = t.get(view);
                for r in 0..img.rows() {
                    for c in 0..img.cols() {
                        prop_assert_eq!(img.get(r, c) > 0.0, or_oracle(&v, view, r, c));
                    }
                }
            }
        }

        #[test]
        fn projection_is_monotone(bits in proptest::collection::vec(0u8..2, 512), extra in 0usize..512) {
            let v = MaskVolume::from_voxels([8, 8, 8], bits.clone()).unwrap();
            let mut more = bits;
            more[extra] = 1;
            let w = MaskVolume::from_voxels([8, 8, 8], more).unwrap();
            let (a, b) = (orthographic_project(&v), orthographic_project(&w));
            for view in View::ALL {
                for (p, q) in a.get(view).pixels().iter().zip(b.get(view).pixels()) {
                    prop_assert!(q >= p);
                }
            }
        }

        #[test]
        fn downsample_keeps_any_voxel(
            d in 1usize..12, h in 1usize..12, w in 1usize..12,
            td in 1usize..12, th in 1usize..12, tw in 1usize..12,
            seed in any::<u64>(),
        ) {
            let mut v = MaskVolume::empty([d, h, w]).unwrap();
            let i = (seed as usize) % (d * h * w);
            v.voxels_mut()[i] = 1;
            let out = downsample_mask(&v, [td, th, tw]).unwrap();
            prop_assert!(out.count() >= 1);
        }
    }
}
