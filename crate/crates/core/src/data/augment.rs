//! Spatial and intensity augmentation for an image/label pair.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::pipeline::LabelMap;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AffineSpec {
    pub p: f64,
    /// Rotation drawn from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    pub scale: (f64, f64),
    /// Translation drawn from `[-translation_px, translation_px]` per axis.
    pub translation_px: f64,
}

impl Default for AffineSpec {
    fn default() -> Self {
        Self {
            p: 0.5,
            rotation_deg: 15.0,
            scale: (0.9, 1.1),
            translation_px: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ElasticSpec {
    pub p: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub grid: usize,
}

impl Default for ElasticSpec {
    fn default() -> Self {
        Self {
            p: 0.3,
            alpha: 10.0,
            sigma: 4.0,
            grid: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentSpec {
    pub hflip_p: f64,
    pub vflip_p: f64,
    pub affine: AffineSpec,
    pub elastic: ElasticSpec,
    pub blur_p: f64,
    pub blur_sigma: (f64, f64),
    pub gamma_p: f64,
    pub gamma: (f64, f64),
    pub noise_p: f64,
    pub noise_sigma: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            hflip_p: 0.5,
            vflip_p: 0.5,
            affine: AffineSpec::default(),
            elastic: ElasticSpec::default(),
            blur_p: 0.2,
            blur_sigma: (0.5, 1.0),
            gamma_p: 0.3,
            gamma: (0.8, 1.25),
            noise_p: 0.3,
            noise_sigma: 0.03,
        }
    }
}

impl AugmentSpec {
    /// Every transform off.
    pub fn none() -> Self {
        Self {
            hflip_p: 0.0,
            vflip_p: 0.0,
            affine: AffineSpec { p: 0.0, ..AffineSpec::default() },
            elastic: ElasticSpec { p: 0.0, ..ElasticSpec::default() },
            blur_p: 0.0,
            gamma_p: 0.0,
            noise_p: 0.0,
            ..Self::default()
        }
    }
}

struct Plane {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Plane {
    fn bilinear(&self, r: f64, c: f64) -> f64 {
        let r = r.clamp(0.0, (self.h - 1) as f64);
        let c = c.clamp(0.0, (self.w - 1) as f64);
        let (r0, c0) = (r.floor() as usize, c.floor() as usize);
        let (r1, c1) = ((r0 + 1).min(self.h - 1), (c0 + 1).min(self.w - 1));
        let (fr, fc) = (r - r0 as f64, c - c0 as f64);
        let at = |r: usize, c: usize| self.data[r * self.w + c];
        (1.0 - fr) * ((1.0 - fc) * at(r0, c0) + fc * at(r0, c1)) + fr * ((1.0 - fc) * at(r1, c0) + fc * at(r1, c1))
    }
}

fn flip<T: Copy>(data: &mut [T], h: usize, w: usize, horizontal: bool) {
    if horizontal {
        for row in data.chunks_exact_mut(w) {
            row.reverse();
        }
    } else {
        for r in 0..h / 2 {
            for c in 0..w {
                data.swap(r * w + c, (h - 1 - r) * w + c);
            }
        }
    }
}

fn plane_of<T: Scalar>(image: &Tensor<T>, label: &LabelMap) -> Result<()> {
    if image.numel() != label.height * label.width {
        return Err(dim_err!(
            "image {:?} and labels {}x{} differ",
            image.shape(),
            label.height,
            label.width
        ));
    }
    Ok(())
}

/// Mirror left-right.
pub fn hflip<T: Scalar>(image: &Tensor<T>, label: &LabelMap) -> Result<(Tensor<T>, LabelMap)> {
    plane_of(image, label)?;
    let (mut img, mut lab) = (image.clone(), label.clone());
    flip(img.data_mut(), label.height, label.width, true);
    flip(&mut lab.data, label.height, label.width, true);
    Ok((img, lab))
}

/// Mirror top-bottom.
pub fn vflip<T: Scalar>(image: &Tensor<T>, label: &LabelMap) -> Result<(Tensor<T>, LabelMap)> {
    plane_of(image, label)?;
    let (mut img, mut lab) = (image.clone(), label.clone());
    flip(img.data_mut(), label.height, label.width, false);
    flip(&mut lab.data, label.height, label.width, false);
    Ok((img, lab))
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-radius..=radius).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with edge replication.
fn blur(data: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * data[r * w + (c as isize + j as isize - radius).clamp(0, w as isize - 1) as usize])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[(r as isize + j as isize - radius).clamp(0, h as isize - 1) as usize * w + c])
                .sum();
        }
    }
    out
}

/// Dense displacement: uniform control-point offsets, bilinear upsampling, Gaussian smoothing.
fn elastic_field(h: usize, w: usize, spec: &ElasticSpec, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let g = spec.grid.max(2);
    let field = |rng: &mut ChaCha8Rng| {
        let ctrl = Plane {
            h: g,
            w: g,
            data: (0..g * g).map(|_| rng.random_range(-1.0..=1.0)).collect(),
        };
        let dense: Vec<f64> = (0..h * w)
            .map(|i| {
                let r = (i / w) as f64 * (g - 1) as f64 / (h.max(2) - 1) as f64;
                let c = (i % w) as f64 * (g - 1) as f64 / (w.max(2) - 1) as f64;
                ctrl.bilinear(r, c)
            })
            .collect();
        blur(&dense, h, w, spec.sigma).into_iter().map(|v| v * spec.alpha).collect::<Vec<f64>>()
    };
    let dr = field(rng);
    let dc = field(rng);
    (dr, dc)
}

/// Random augmentation, deterministic in `seed`. Labels are resampled nearest-neighbour.
pub fn augment<T: Scalar>(image: &Tensor<T>, label: &LabelMap, spec: &AugmentSpec, seed: u64) -> Result<(Tensor<T>, LabelMap)> {
    plane_of(image, label)?;
    let (h, w) = (label.height, label.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut img, mut lab) = (image.clone(), label.clone());
    if rng.random_bool(spec.hflip_p.clamp(0.0, 1.0)) {
        (img, lab) = hflip(&img, &lab)?;
    }
    if rng.random_bool(spec.vflip_p.clamp(0.0, 1.0)) {
        (img, lab) = vflip(&img, &lab)?;
    }

    let affine = rng.random_bool(spec.affine.p.clamp(0.0, 1.0)).then(|| {
        let a = &spec.affine;
        let angle = rng.random_range(-a.rotation_deg..=a.rotation_deg).to_radians();
        let scale = rng.random_range(a.scale.0..=a.scale.1);
        let tr = rng.random_range(-a.translation_px..=a.translation_px);
        let tc = rng.random_range(-a.translation_px..=a.translation_px);
        (angle, scale, tr, tc)
    });
    let elastic = rng.random_bool(spec.elastic.p.clamp(0.0, 1.0)).then(|| elastic_field(h, w, &spec.elastic, &mut rng));
    if affine.is_some() || elastic.is_some() {
        let (cr, cc) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let src = Plane {
            h,
            w,
            data: img.data().iter().map(|v| v.as_f64()).collect(),
        };
        let mut out_img = Vec::with_capacity(h * w);
        let mut out_lab = Vec::with_capacity(h * w);
        for i in 0..h * w {
            let (mut r, mut c) = ((i / w) as f64, (i % w) as f64);
            if let Some((dr, dc)) = &elastic {
                r += dr[i];
                c += dc[i];
            }
            if let Some((angle, scale, tr, tc)) = affine {
                // inverse map: output -> source
                let (y, x) = ((r - cr - tr) / scale, (c - cc - tc) / scale);
                let (cos, sin) = (angle.cos(), angle.sin());
                r = cos * y + sin * x + cr;
                c = -sin * y + cos * x + cc;
            }
            out_img.push(T::from_f64_lossy(src.bilinear(r, c)));
            let (nr, nc) = (r.round().clamp(0.0, (h - 1) as f64) as usize, c.round().clamp(0.0, (w - 1) as f64) as usize);
            out_lab.push(lab.data[nr * w + nc]);
        }
        img = Tensor::new(img.shape(), out_img)?;
        lab.data = out_lab;
    }

    if rng.random_bool(spec.blur_p.clamp(0.0, 1.0)) {
        let sigma = rng.random_range(spec.blur_sigma.0..=spec.blur_sigma.1);
        let data: Vec<f64> = img.data().iter().map(|v| v.as_f64()).collect();
        let out = blur(&data, h, w, sigma);
        img = Tensor::new(img.shape(), out.into_iter().map(T::from_f64_lossy).collect())?;
    }
    if rng.random_bool(spec.gamma_p.clamp(0.0, 1.0)) {
        let gamma = rng.random_range(spec.gamma.0..=spec.gamma.1);
        let (lo, hi) = img
            .data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v.as_f64()), hi.max(v.as_f64())));
        let span = (hi - lo).max(1e-12);
        img = img.map(|v| T::from_f64_lossy(lo + span * ((v.as_f64() - lo) / span).powf(gamma)));
    }
    if rng.random_bool(spec.noise_p.clamp(0.0, 1.0)) {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("finite sigma");
        let data = img.data().iter().map(|v| T::from_f64_lossy(v.as_f64() + noise.sample(&mut rng))).collect();
        img = Tensor::new(img.shape(), data)?;
    }
    Ok((img, lab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_case, SynthConfig};
    use std::collections::BTreeSet;

    fn case() -> (Tensor<f32>, LabelMap) {
        let c = synth_case(&SynthConfig::default(), 3, 0).unwrap();
        (c.image, c.label)
    }

    #[test]
    fn double_flip_is_identity() {
        let (img, lab) = case();
        let (a, b) = hflip(&img, &lab).unwrap();
        assert_ne!(a, img);
        let (a, b) = hflip(&a, &b).unwrap();
        assert_eq!((a, b), (img.clone(), lab.clone()));
        let forced = AugmentSpec {
            hflip_p: 1.0,
            ..AugmentSpec::none()
        };
        let (a, b) = augment(&img, &lab, &forced, 1).unwrap();
        let (a, b) = augment(&a, &b, &forced, 2).unwrap();
        assert_eq!((a, b), (img, lab));
    }

    #[test]
    fn identity_affine_is_unchanged() {
        let (img, lab) = case();
        let spec = AugmentSpec {
            affine: AffineSpec {
                p: 1.0,
                rotation_deg: 0.0,
                scale: (1.0, 1.0),
                translation_px: 0.0,
            },
            ..AugmentSpec::none()
        };
        assert_eq!(augment(&img, &lab, &spec, 5).unwrap(), (img, lab));
    }

    #[test]
    fn deterministic_and_label_preserving() {
        let (img, lab) = case();
        let before: BTreeSet<u8> = lab.data.iter().copied().collect();
        let spec = AugmentSpec {
            hflip_p: 0.5,
            vflip_p: 0.5,
            affine: AffineSpec { p: 0.8, ..AffineSpec::default() },
            elastic: ElasticSpec { p: 0.8, ..ElasticSpec::default() },
            ..AugmentSpec::default()
        };
        for seed in 0..200 {
            let (a, b) = augment(&img, &lab, &spec, seed).unwrap();
            assert_eq!(a.shape(), img.shape());
            assert_eq!(b.data.len(), lab.data.len());
            let after: BTreeSet<u8> = b.data.iter().copied().collect();
            assert!(after.is_subset(&before), "seed {seed}");
            if seed < 5 {
                assert_eq!(augment(&img, &lab, &spec, seed).unwrap(), (a, b));
            }
        }
    }

    #[test]
    fn intensity_only_leaves_labels() {
        let (img, lab) = case();
        let spec = AugmentSpec {
            blur_p: 1.0,
            gamma_p: 1.0,
            noise_p: 1.0,
            ..AugmentSpec::none()
        };
        let (a, b) = augment(&img, &lab, &spec, 9).unwrap();
        assert_eq!(b, lab);
        assert_ne!(a, img);
    }
}
