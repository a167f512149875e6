//! Stage-1 to stage-2 glue: heart detection, bbox expansion, cropping, paste-back.

use serde::{Deserialize, Serialize};

use crate::error::{cfg_err, dim_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BG: u8 = 0;
pub const LV: u8 = 1;
pub const RV: u8 = 2;
pub const MYO: u8 = 3;
pub const NUM_CLASSES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Four,
    Eight,
}

impl TryFrom<u8> for Connectivity {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            4 => Ok(Self::Four),
            8 => Ok(Self::Eight),
            _ => Err(cfg_err!("connectivity must be 4 or 8, got {v}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }
}

/// Inclusive pixel bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bbox {
    pub row_min: usize,
    pub row_max: usize,
    pub col_min: usize,
    pub col_max: usize,
}

impl Bbox {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            row_min: 0,
            row_max: height - 1,
            col_min: 0,
            col_max: width - 1,
        }
    }

    pub fn height(&self) -> usize {
        self.row_max - self.row_min + 1
    }

    pub fn width(&self) -> usize {
        self.col_max - self.col_min + 1
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.row_min..=self.row_max).contains(&r) && (self.col_min..=self.col_max).contains(&c)
    }

    pub fn encloses(&self, other: &Bbox) -> bool {
        self.row_min <= other.row_min && self.row_max >= other.row_max && self.col_min <= other.col_min && self.col_max >= other.col_max
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.row_min, self.row_max, self.col_min, self.col_max]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropConfig {
    pub shift: usize,
    pub connectivity: Connectivity,
    pub pad_to_multiple: usize,
    pub threshold: f64,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            shift: 15,
            connectivity: Connectivity::Eight,
            pad_to_multiple: 16,
            threshold: 0.5,
        }
    }
}

impl CropConfig {
    pub fn validate(&self) -> Result<()> {
        if ![8, 16, 32].contains(&self.pad_to_multiple) {
            return Err(cfg_err!("pad_to_multiple must be 8, 16 or 32, got {}", self.pad_to_multiple));
        }
        Ok(())
    }
}

/// Per-pixel class map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
    /// Millimetres per pixel along rows and columns.
    pub spacing: Option<[f64; 2]>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(dim_err!("label map {height}x{width} given {} values", data.len()));
        }
        if let Some(v) = data.iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(Error::Validation(format!("label {v} is not a class")));
        }
        Ok(Self {
            height,
            width,
            data,
            spacing: None,
        })
    }

    pub fn background(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![BG; height * width],
            spacing: None,
        }
    }

    pub fn with_spacing(mut self, spacing: [f64; 2]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Validation(format!("spacing must be positive, got {spacing:?}")));
        }
        self.spacing = Some(spacing);
        Ok(self)
    }

    /// Accepts `[H, W]`, `[1, H, W]` or `[1, 1, H, W]` tensors holding class indices.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let (h, w) = plane_dims(t.shape())?;
        let mut data = Vec::with_capacity(h * w);
        for &v in t.data() {
            let f = v.as_f64();
            if f.fract() != 0.0 || !(0.0..NUM_CLASSES as f64).contains(&f) {
                return Err(Error::Validation(format!("label value {f} is not a class")));
            }
            data.push(f as u8);
        }
        Self::new(h, w, data)
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.height, self.width], |i| T::from_f64_lossy(self.data[i] as f64))
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.data[r * self.width + c]
    }

    pub fn class_mask(&self, class: u8) -> Vec<bool> {
        self.data.iter().map(|&v| v == class).collect()
    }

    /// One-vs-rest `[1, 4, H, W]` targets in channel order BG, LV, RV, MYO.
    pub fn one_hot<T: Scalar>(&self) -> Tensor<T> {
        let plane = self.height * self.width;
        Tensor::from_fn(&[1, NUM_CLASSES, self.height, self.width], |i| {
            if self.data[i % plane] as usize == i / plane {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn crop(&self, b: &Bbox) -> LabelMap {
        let mut data = Vec::with_capacity(b.height() * b.width());
        for r in b.row_min..=b.row_max {
            data.extend_from_slice(&self.data[r * self.width + b.col_min..=r * self.width + b.col_max]);
        }
        LabelMap {
            height: b.height(),
            width: b.width(),
            data,
            spacing: self.spacing,
        }
    }

    /// Tightest box around all non-background pixels.
    pub fn foreground_bbox(&self) -> Option<Bbox> {
        let mut b: Option<Bbox> = None;
        for (i, &v) in self.data.iter().enumerate() {
            if v == BG {
                continue;
            }
            let (r, c) = (i / self.width, i % self.width);
            b = Some(match b {
                None => Bbox {
                    row_min: r,
                    row_max: r,
                    col_min: c,
                    col_max: c,
                },
                Some(b) => Bbox {
                    row_min: b.row_min.min(r),
                    row_max: b.row_max.max(r),
                    col_min: b.col_min.min(c),
                    col_max: b.col_max.max(c),
                },
            });
        }
        b
    }
}

fn plane_dims(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [h, w] | [1, h, w] | [1, 1, h, w] => Ok((*h, *w)),
        _ => Err(dim_err!("expected a single-plane tensor, got {shape:?}")),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Components {
    pub height: usize,
    pub width: usize,
    /// 0 for background, regions numbered from 1 in row-major discovery order.
    pub labels: Vec<u32>,
    /// `sizes[k]` is the pixel count of region `k + 1`.
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    pub fn bbox(&self, label: u32) -> Option<Bbox> {
        let mut out: Option<Bbox> = None;
        for (i, &l) in self.labels.iter().enumerate() {
            if l != label {
                continue;
            }
            let (r, c) = (i / self.width, i % self.width);
            let b = out.get_or_insert(Bbox {
                row_min: r,
                row_max: r,
                col_min: c,
                col_max: c,
            });
            b.row_min = b.row_min.min(r);
            b.row_max = b.row_max.max(r);
            b.col_min = b.col_min.min(c);
            b.col_max = b.col_max.max(c);
        }
        out
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        parent[x as usize] = parent[parent[x as usize] as usize];
        x = parent[x as usize];
    }
    x
}

/// Two-pass union-find labelling.
pub fn connected_components(mask: &[bool], height: usize, width: usize, connectivity: Connectivity) -> Result<Components> {
    if mask.len() != height * width {
        return Err(dim_err!("mask of {} pixels for a {height}x{width} grid", mask.len()));
    }
    let mut provisional = vec![0u32; mask.len()];
    let mut parent: Vec<u32> = vec![0];
    let mut neighbours = Vec::with_capacity(4);
    for r in 0..height {
        for c in 0..width {
            let i = r * width + c;
            if !mask[i] {
                continue;
            }
            neighbours.clear();
            if c > 0 {
                neighbours.push(provisional[i - 1]);
            }
            if r > 0 {
                neighbours.push(provisional[i - width]);
                if connectivity == Connectivity::Eight {
                    if c > 0 {
                        neighbours.push(provisional[i - width - 1]);
                    }
                    if c + 1 < width {
                        neighbours.push(provisional[i - width + 1]);
                    }
                }
            }
            neighbours.retain(|&l| l != 0);
            let label = match neighbours.iter().map(|&l| find(&mut parent, l)).min() {
                Some(root) => {
                    for k in 0..neighbours.len() {
                        let other = find(&mut parent, neighbours[k]);
                        parent[other as usize] = root;
                    }
                    root
                }
                None => {
                    let l = parent.len() as u32;
                    parent.push(l);
                    l
                }
            };
            provisional[i] = label;
        }
    }
    let mut remap = vec![0u32; parent.len()];
    let mut sizes = Vec::new();
    let mut labels = vec![0u32; mask.len()];
    for i in 0..mask.len() {
        if provisional[i] == 0 {
            continue;
        }
        let root = find(&mut parent, provisional[i]) as usize;
        if remap[root] == 0 {
            sizes.push(0);
            remap[root] = sizes.len() as u32;
        }
        labels[i] = remap[root];
        sizes[remap[root] as usize - 1] += 1;
    }
    Ok(Components {
        height,
        width,
        labels,
        sizes,
    })
}

/// Bbox of the largest region of `bg < threshold`; ties go to the first-discovered region.
pub fn largest_region_bbox<T: Scalar>(bg_pred: &Tensor<T>, cfg: &CropConfig) -> Result<Bbox> {
    let (h, w) = plane_dims(bg_pred.shape())?;
    let mask: Vec<bool> = bg_pred.data().iter().map(|v| v.as_f64() < cfg.threshold).collect();
    let cc = connected_components(&mask, h, w, cfg.connectivity)?;
    let mut best: Option<(usize, usize)> = None;
    for (k, &size) in cc.sizes.iter().enumerate() {
        if best.is_none_or(|(_, s)| size > s) {
            best = Some((k, size));
        }
    }
    let (k, _) = best.ok_or(Error::NoHeartDetected)?;
    Ok(cc.bbox(k as u32 + 1).expect("region has pixels"))
}

fn expand_axis(lo: usize, hi: usize, n: usize, shift: usize, multiple: usize) -> (usize, usize) {
    let mut lo = lo.saturating_sub(shift) as isize;
    let mut hi = (hi + shift).min(n - 1) as isize;
    let extent = (hi - lo + 1) as usize;
    let target = extent.div_ceil(multiple) * multiple;
    let target = target.min(n);
    let need = (target - extent) as isize;
    let before = need / 2;
    lo -= before;
    hi += need - before;
    if lo < 0 {
        hi -= lo;
        lo = 0;
    }
    let last = n as isize - 1;
    if hi > last {
        lo -= hi - last;
        hi = last;
    }
    (lo as usize, hi as usize)
}

/// Grow by `shift`, clamp, then pad symmetrically to multiples of `pad_to_multiple`.
///
/// An odd padding remainder goes to the max side; padding that would cross an
/// image edge moves to the opposite side. When the image extent is itself not
/// a multiple, the box stops at the full extent.
pub fn expand_clamp(b: Bbox, cfg: &CropConfig, height: usize, width: usize) -> Bbox {
    let (row_min, row_max) = expand_axis(b.row_min, b.row_max, height, cfg.shift, cfg.pad_to_multiple);
    let (col_min, col_max) = expand_axis(b.col_min, b.col_max, width, cfg.shift, cfg.pad_to_multiple);
    Bbox {
        row_min,
        row_max,
        col_min,
        col_max,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: Bbox,
    pub fallback: bool,
}

/// Detect and expand, falling back to the full frame when nothing is found.
pub fn detect_heart<T: Scalar>(bg_pred: &Tensor<T>, cfg: &CropConfig) -> Result<Detection> {
    cfg.validate()?;
    let (h, w) = plane_dims(bg_pred.shape())?;
    match largest_region_bbox(bg_pred, cfg) {
        Ok(b) => Ok(Detection {
            bbox: expand_clamp(b, cfg, h, w),
            fallback: false,
        }),
        Err(Error::NoHeartDetected) => {
            log::warn!("no foreground region found, using the full frame");
            Ok(Detection {
                bbox: Bbox::full(h, w),
                fallback: true,
            })
        }
        Err(e) => Err(e),
    }
}

fn check_bbox(b: &Bbox, h: usize, w: usize) -> Result<()> {
    if b.row_min > b.row_max || b.col_min > b.col_max || b.row_max >= h || b.col_max >= w {
        return Err(dim_err!("bbox {:?} invalid for a {h}x{w} frame", b.as_array()));
    }
    Ok(())
}

fn crop_plane<T: Scalar>(plane: &[T], width: usize, b: &Bbox) -> Vec<T> {
    let mut out = Vec::with_capacity(b.height() * b.width());
    for r in b.row_min..=b.row_max {
        out.extend_from_slice(&plane[r * width + b.col_min..=r * width + b.col_max]);
    }
    out
}

/// Cropped intensity plus one binary initial mask per anatomy, each `[1, 1, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Crop<T> {
    pub image: Tensor<T>,
    /// LV, RV, MYO.
    pub masks: [Tensor<T>; 3],
}

/// Per-pixel argmax over the four stage-1 channels (lowest channel wins ties).
pub fn argmax_labels<T: Scalar>(pred: &Tensor<T>) -> Result<LabelMap> {
    let (n, c, h, w) = pred.nchw()?;
    if n != 1 || c != NUM_CLASSES {
        return Err(dim_err!("expected [1, 4, H, W] predictions, got {:?}", pred.shape()));
    }
    let plane = h * w;
    let p = pred.data();
    let data = (0..plane)
        .map(|i| {
            let mut best = 0;
            for k in 1..NUM_CLASSES {
                if p[k * plane + i] > p[best * plane + i] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(h, w, data)
}

pub fn crop_and_binarize<T: Scalar>(image: &Tensor<T>, stage1_pred: &Tensor<T>, b: &Bbox) -> Result<Crop<T>> {
    let (h, w) = plane_dims(image.shape())?;
    let labels = argmax_labels(stage1_pred)?;
    if (labels.height, labels.width) != (h, w) {
        return Err(dim_err!("image {h}x{w} and predictions {}x{} differ", labels.height, labels.width));
    }
    check_bbox(b, h, w)?;
    let shape = [1, 1, b.height(), b.width()];
    let cropped = labels.crop(b);
    let mask = |class: u8| Tensor::from_fn(&shape, |i| if cropped.data[i] == class { T::one() } else { T::zero() });
    Ok(Crop {
        image: Tensor::new(&shape, crop_plane(image.data(), w, b))?,
        masks: [mask(LV), mask(RV), mask(MYO)],
    })
}

/// Full-frame label map from the three specialist outputs for box `b`.
pub fn paste_back<T: Scalar>(masks: [&Tensor<T>; 3], b: &Bbox, height: usize, width: usize) -> Result<LabelMap> {
    check_bbox(b, height, width)?;
    for m in masks {
        if plane_dims(m.shape())? != (b.height(), b.width()) {
            return Err(dim_err!("mask {:?} does not match bbox {}x{}", m.shape(), b.height(), b.width()));
        }
    }
    let mut out = LabelMap::background(height, width);
    let bw = b.width();
    for r in 0..b.height() {
        for c in 0..bw {
            let mut best = BG;
            let mut best_p = f64::NEG_INFINITY;
            for (k, m) in masks.iter().enumerate() {
                let p = m.data()[r * bw + c].as_f64();
                if p >= 0.5 && p > best_p {
                    best = k as u8 + 1;
                    best_p = p;
                }
            }
            out.data[(r + b.row_min) * width + c + b.col_min] = best;
        }
    }
    Ok(out)
}

/// One line of the bbox log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BboxRecord {
    pub id: String,
    pub bbox: [usize; 4],
    pub fallback: bool,
}

impl BboxRecord {
    pub fn new(id: &str, d: &Detection) -> Self {
        Self {
            id: id.to_string(),
            bbox: d.bbox.as_array(),
            fallback: d.fallback,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square_bg(h: usize, w: usize, r0: usize, r1: usize, c0: usize, c1: usize) -> Tensor<f64> {
        Tensor::from_fn(&[1, 1, h, w], |i| {
            let (r, c) = (i / w, i % w);
            if (r0..=r1).contains(&r) && (c0..=c1).contains(&c) {
                0.1
            } else {
                0.9
            }
        })
    }

    #[test]
    fn empty_and_diagonal() {
        let cc = connected_components(&[false; 16], 4, 4, Connectivity::Eight).unwrap();
        assert_eq!(cc.count(), 0);
        let diag = [true, false, false, true];
        assert_eq!(connected_components(&diag, 2, 2, Connectivity::Eight).unwrap().count(), 1);
        assert_eq!(connected_components(&diag, 2, 2, Connectivity::Four).unwrap().count(), 2);
    }

    #[test]
    fn merges_u_shape_and_numbers_by_discovery() {
        #[rustfmt::skip]
        let m = [
            true, false, true, false, true,
            true, false, true, false, false,
            true, true,  true, false, true,
        ];
        let cc = connected_components(&m, 3, 5, Connectivity::Four).unwrap();
        assert_eq!(cc.sizes, vec![7, 1, 1]);
        assert_eq!(cc.labels[2], 1);
        assert_eq!(cc.labels[4], 2);
        assert_eq!(cc.labels[14], 3);
    }

    #[test]
    fn square_bbox() {
        let b = largest_region_bbox(&square_bg(64, 64, 20, 29, 20, 29), &CropConfig::default()).unwrap();
        assert_eq!(b.as_array(), [20, 29, 20, 29]);
    }

    #[test]
    fn larger_region_wins_and_ties_go_first() {
        let mut bg = vec![0.9; 32 * 32];
        for i in 0..50 {
            bg[(20 + i / 10) * 32 + i % 10] = 0.2;
        }
        for i in 0..49 {
            bg[(i / 7) * 32 + 20 + i % 7] = 0.2;
        }
        let t = Tensor::new(&[1, 1, 32, 32], bg.clone()).unwrap();
        let b = largest_region_bbox(&t, &CropConfig::default()).unwrap();
        assert_eq!(b.as_array(), [20, 24, 0, 9]);
        bg[(20 + 4) * 32 + 9] = 0.9;
        let t = Tensor::new(&[1, 1, 32, 32], bg).unwrap();
        let b = largest_region_bbox(&t, &CropConfig::default()).unwrap();
        assert_eq!(b.as_array(), [0, 6, 20, 26]);
    }

    #[test]
    fn no_heart() {
        let t = Tensor::<f64>::full(&[1, 1, 16, 16], 0.8);
        assert!(matches!(largest_region_bbox(&t, &CropConfig::default()), Err(Error::NoHeartDetected)));
        let d = detect_heart(&t, &CropConfig::default()).unwrap();
        assert!(d.fallback);
        assert_eq!(d.bbox, Bbox::full(16, 16));
    }

    #[test]
    fn expand_examples() {
        let cfg = CropConfig::default();
        let b = Bbox {
            row_min: 20,
            row_max: 29,
            col_min: 20,
            col_max: 29,
        };
        let e = expand_clamp(b, &cfg, 128, 128);
        assert_eq!(e.as_array(), [1, 48, 1, 48]);
        assert_eq!((e.height(), e.width()), (48, 48));
        let corner = Bbox {
            row_min: 0,
            row_max: 3,
            col_min: 0,
            col_max: 3,
        };
        assert_eq!(expand_clamp(corner, &cfg, 128, 128).as_array(), [0, 31, 0, 31]);
        let aligned = Bbox {
            row_min: 16,
            row_max: 47,
            col_min: 0,
            col_max: 15,
        };
        let zero = CropConfig { shift: 0, ..cfg };
        assert_eq!(expand_clamp(aligned, &zero, 64, 64), aligned);
    }

    #[test]
    fn expand_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let h = 16 * rng.random_range(1..9);
            let w = 16 * rng.random_range(1..9);
            let (r0, c0) = (rng.random_range(0..h), rng.random_range(0..w));
            let b = Bbox {
                row_min: r0,
                row_max: rng.random_range(r0..h),
                col_min: c0,
                col_max: rng.random_range(c0..w),
            };
            let cfg = CropConfig {
                shift: rng.random_range(0..20),
                pad_to_multiple: [8, 16, 32][rng.random_range(0..3)],
                ..CropConfig::default()
            };
            let e = expand_clamp(b, &cfg, h, w);
            assert!(e.encloses(&b));
            assert!(e.row_max < h && e.col_max < w);
            assert!(e.height() % cfg.pad_to_multiple == 0 || e.height() == h);
            assert!(e.width() % cfg.pad_to_multiple == 0 || e.width() == w);
            if cfg.pad_to_multiple == 16 {
                assert_eq!(e.height() % 16, 0);
                assert_eq!(e.width() % 16, 0);
            }
            let zero = CropConfig { shift: 0, ..cfg };
            let once = expand_clamp(b, &zero, h, w);
            assert_eq!(expand_clamp(once, &zero, h, w), once);
        }
    }

    fn one_hot_pred(labels: &LabelMap) -> Tensor<f64> {
        labels.one_hot()
    }

    #[test]
    fn crop_ties_and_one_hot() {
        let img = Tensor::from_fn(&[1, 1, 8, 8], |i| i as f64);
        let pred = Tensor::full(&[1, 4, 8, 8], 0.3);
        let b = Bbox {
            row_min: 2,
            row_max: 5,
            col_min: 1,
            col_max: 6,
        };
        let crop = crop_and_binarize(&img, &pred, &b).unwrap();
        assert_eq!(crop.image.shape(), &[1, 1, 4, 6]);
        assert_eq!(crop.image.data()[0], 17.0);
        assert!(crop.masks.iter().all(|m| m.sum() == 0.0));
    }

    #[test]
    fn paste_rules() {
        let b = Bbox {
            row_min: 1,
            row_max: 1,
            col_min: 1,
            col_max: 4,
        };
        let lv = Tensor::from_f64(&[1, 1, 1, 4], &[0.9, 0.2, 0.6, 0.1]).unwrap();
        let rv = Tensor::from_f64(&[1, 1, 1, 4], &[0.1, 0.7, 0.6, 0.4]).unwrap();
        let myo = Tensor::from_f64(&[1, 1, 1, 4], &[0.8, 0.1, 0.6, 0.3]).unwrap();
        let out = paste_back([&lv, &rv, &myo], &b, 3, 6).unwrap();
        assert_eq!(&out.data[7..11], &[LV, RV, LV, BG]);
        assert_eq!(out.data.iter().filter(|&&v| v != BG).count(), 3);
        let bad = Tensor::<f64>::zeros(&[1, 1, 2, 4]);
        assert!(matches!(paste_back([&bad, &rv, &myo], &b, 3, 6), Err(Error::Dimension(_))));
    }

    #[test]
    fn round_trip_and_argmax_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let (h, w) = (24, 20);
            let labels = LabelMap::new(h, w, (0..h * w).map(|_| rng.random_range(0..4u8)).collect()).unwrap();
            let img = Tensor::from_fn(&[1, 1, h, w], |_| rng.random::<f64>());
            let r0 = rng.random_range(0..h);
            let c0 = rng.random_range(0..w);
            let b = Bbox {
                row_min: r0,
                row_max: rng.random_range(r0..h),
                col_min: c0,
                col_max: rng.random_range(c0..w),
            };
            let crop = crop_and_binarize(&img, &one_hot_pred(&labels), &b).unwrap();
            let pasted = paste_back([&crop.masks[0], &crop.masks[1], &crop.masks[2]], &b, h, w).unwrap();
            for r in 0..h {
                for c in 0..w {
                    let want = if b.contains(r, c) { labels.get(r, c) } else { BG };
                    assert_eq!(pasted.get(r, c), want);
                }
            }

            let soft = Tensor::from_fn(&[1, 4, h, w], |_| (rng.random_range(0..5) as f64) / 4.0);
            let crop = crop_and_binarize(&img, &soft, &b).unwrap();
            for r in 0..b.height() {
                for c in 0..b.width() {
                    let px = (r + b.row_min) * w + c + b.col_min;
                    let vals: Vec<f64> = (0..4).map(|k| soft.data()[k * h * w + px]).collect();
                    let max = vals.iter().cloned().fold(f64::MIN, f64::max);
                    let class = vals.iter().position(|&v| v == max).unwrap();
                    for k in 0..3 {
                        let want = if class == k + 1 { 1.0 } else { 0.0 };
                        assert_eq!(crop.masks[k].data()[r * b.width() + c], want);
                    }
                }
            }
        }
    }

    #[test]
    fn connectivity_json() {
        let cfg: CropConfig = serde_json::from_str(r#"{"shift":15,"connectivity":4,"pad_to_multiple":16,"threshold":0.5}"#).unwrap();
        assert_eq!(cfg.connectivity, Connectivity::Four);
        assert!(serde_json::from_str::<CropConfig>(r#"{"shift":15,"connectivity":6,"pad_to_multiple":16,"threshold":0.5}"#).is_err());
        let rec = BboxRecord {
            id: "case_000".into(),
            bbox: [1, 2, 3, 4],
            fallback: false,
        };
        assert_eq!(serde_json::to_string(&rec).unwrap(), r#"{"id":"case_000","bbox":[1,2,3,4],"fallback":false}"#);
    }
}
