//! Toy short-axis anatomy: elliptical LV, myocardial ring, RV crescent.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{write_label_map, write_tensor, DatasetIndex, IndexEntry, Phase, TensorData};
use crate::error::{cfg_err, Result};
use crate::networks::SIDE_MULTIPLE;
use crate::pipeline::{LabelMap, BG, LV, MYO, RV};
use crate::tensor::Tensor;

/// Generator ranges, in pixels. Anatomy sizes do not scale with `side`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub side: usize,
    pub lv_radius: (f64, f64),
    pub myo_width: (f64, f64),
    /// RV ellipse radii relative to the outer myocardial radius.
    pub rv_scale: (f64, f64),
    pub es_shrink: f64,
    pub center_jitter: f64,
    /// Mean intensity for BG, LV, RV, MYO.
    pub class_means: [f64; 4],
    pub body_mean: f64,
    pub noise_sigma: f64,
    pub spacing: [f64; 2],
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            side: 64,
            lv_radius: (5.0, 6.0),
            myo_width: (6.0, 8.0),
            rv_scale: (0.7, 0.9),
            es_shrink: 0.8,
            center_jitter: 2.0,
            class_means: [0.0, 0.95, 0.75, 0.5],
            body_mean: 0.1,
            noise_sigma: 0.05,
            spacing: [1.0, 1.0],
        }
    }
}

/// Inclusive pixel-count ranges per class, derived from the configured shape ranges.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SynthBounds {
    pub lv: (usize, usize),
    pub rv: (usize, usize),
    pub myo: (usize, usize),
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.side == 0 || self.side % SIDE_MULTIPLE != 0 {
            return Err(cfg_err!("side {} must be a positive multiple of {SIDE_MULTIPLE}", self.side));
        }
        if self.myo_width.0 < 2.0 {
            return Err(cfg_err!("myocardial width must be at least 2 px"));
        }
        let outer = self.lv_radius.1 * 1.15 + self.myo_width.1;
        let reach = outer * (1.0 + self.rv_scale.1) + self.center_jitter;
        if 2.0 * reach + 2.0 > self.side as f64 {
            return Err(cfg_err!("anatomy does not fit a {0}x{0} image", self.side));
        }
        Ok(())
    }

    /// Area ranges of the continuous shapes, widened by one perimeter of
    /// pixels for rasterisation.
    pub fn bounds(&self) -> SynthBounds {
        let (rmin, rmax) = (self.lv_radius.0 * self.es_shrink, self.lv_radius.1);
        let (wmin, wmax) = self.myo_width;
        // radii are drawn per axis within +-15% of a base radius
        let (amin, amax) = (rmin * 0.85, rmax * 1.15);
        let perim = |r: f64| 2.0 * PI * r + 4.0;
        let lv = (PI * amin * amin - perim(amin), PI * amax * amax + perim(amax));
        let myo = (
            PI * ((amin + wmin).powi(2) - amin * amin) - perim(amin) - perim(amin + wmin),
            PI * ((amax + wmax).powi(2) - amax * amax) + perim(amax) + perim(amax + wmax),
        );
        let omax = amax + wmax;
        let rv_max = 0.9 * PI * (omax * self.rv_scale.1).powi(2) + perim(omax * self.rv_scale.1);
        // the RV ellipse is centred on the outer myocardial radius, so its outer
        // half lies beyond the ring
        let rv_min_radius = (amin + wmin) * self.rv_scale.0;
        let rv_min = 0.5 * 0.7 * PI * rv_min_radius.powi(2) - perim(rv_min_radius);
        let clamp = |lo: f64, hi: f64| (lo.max(1.0).floor() as usize, hi.ceil() as usize);
        SynthBounds {
            lv: clamp(lv.0, lv.1),
            rv: clamp(rv_min, rv_max),
            myo: clamp(myo.0, myo.1),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCase {
    pub id: String,
    pub image: Tensor<f32>,
    pub label: LabelMap,
    pub phase: Phase,
}

fn case_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn inside(dr: f64, dc: f64, cos: f64, sin: f64, ra: f64, rb: f64) -> bool {
    let u = dr * cos + dc * sin;
    let v = -dr * sin + dc * cos;
    (u / ra).powi(2) + (v / rb).powi(2) <= 1.0
}

/// Case `id` of the dataset for `seed`; identical inputs give identical bytes.
pub fn synth_case(cfg: &SynthConfig, seed: u64, id: u64) -> Result<SynthCase> {
    cfg.validate()?;
    let mut rng = case_rng(seed, id);
    let side = cfg.side;
    let phase = if id % 2 == 0 { Phase::ED } else { Phase::ES };
    let shrink = if phase == Phase::ES { cfg.es_shrink } else { 1.0 };
    let mid = (side as f64 - 1.0) / 2.0;
    let cr = mid + rng.random_range(-cfg.center_jitter..=cfg.center_jitter);
    let cc = mid + rng.random_range(-cfg.center_jitter..=cfg.center_jitter);
    let base = rng.random_range(cfg.lv_radius.0..=cfg.lv_radius.1) * shrink;
    let ra = base * rng.random_range(0.85..=1.15);
    let rb = base * rng.random_range(0.85..=1.15);
    let w = rng.random_range(cfg.myo_width.0..=cfg.myo_width.1);
    let theta = rng.random_range(0.0..PI);
    let (cos, sin) = (theta.cos(), theta.sin());
    let (oa, ob) = (ra + w, rb + w);
    let outer = oa.max(ob);

    let s = rng.random_range(cfg.rv_scale.0..=cfg.rv_scale.1);
    let (rva, rvb) = (outer * s, outer * s * rng.random_range(0.7..=0.9));
    let phi = PI + rng.random_range(-0.4..=0.4);
    let (rcr, rcc) = (cr + outer * phi.sin(), cc + outer * phi.cos());
    let (rcos, rsin) = ((phi + PI / 2.0).cos(), (phi + PI / 2.0).sin());

    let body = (side as f64 * 0.42, side as f64 * 0.36);
    let mut labels = vec![BG; side * side];
    let mut body_mask = vec![false; side * side];
    for r in 0..side {
        for c in 0..side {
            let (dr, dc) = (r as f64 - cr, c as f64 - cc);
            let i = r * side + c;
            body_mask[i] = inside(r as f64 - mid, c as f64 - mid, 1.0, 0.0, body.0, body.1);
            labels[i] = if inside(dr, dc, cos, sin, ra, rb) {
                LV
            } else if inside(dr, dc, cos, sin, oa, ob) {
                MYO
            } else if inside(r as f64 - rcr, c as f64 - rcc, rcos, rsin, rva, rvb) {
                RV
            } else {
                BG
            };
        }
    }

    let noise = Normal::new(0.0, cfg.noise_sigma).expect("finite sigma");
    let pixels: Vec<f32> = labels
        .iter()
        .zip(&body_mask)
        .map(|(&l, &in_body)| {
            let mean = if l == BG && in_body { cfg.body_mean } else { cfg.class_means[l as usize] };
            (mean + noise.sample(&mut rng)) as f32
        })
        .collect();
    Ok(SynthCase {
        id: format!("case_{id:03}"),
        image: Tensor::new(&[1, 1, side, side], pixels)?,
        label: LabelMap::new(side, side, labels)?.with_spacing(cfg.spacing)?,
        phase,
    })
}

/// Write `n_cases` cases plus `index.json` under `out_dir`.
pub fn synth_generate(cfg: &SynthConfig, n_cases: usize, seed: u64, out_dir: impl AsRef<Path>) -> Result<DatasetIndex> {
    let out = out_dir.as_ref();
    fs::create_dir_all(out.join("images"))?;
    fs::create_dir_all(out.join("labels"))?;
    let mut entries = Vec::with_capacity(n_cases);
    for id in 0..n_cases as u64 {
        let case = synth_case(cfg, seed, id)?;
        let image_path = Path::new("images").join(format!("{}.ctf", case.id));
        let label_path = Path::new("labels").join(format!("{}.ctf", case.id));
        write_tensor(&TensorData::F32(case.image.reshape(&[1, cfg.side, cfg.side])?), out.join(&image_path))?;
        write_label_map(&case.label, out.join(&label_path))?;
        entries.push(IndexEntry {
            id: case.id,
            image_path,
            label_path,
            spacing: cfg.spacing,
            phase: case.phase,
        });
    }
    let index = DatasetIndex {
        entries,
        root: out.to_path_buf(),
    };
    index.save(out.join("index.json"))?;
    Ok(index)
}
