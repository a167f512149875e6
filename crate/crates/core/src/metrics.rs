//! Dice, Dice loss, Hausdorff distance and evaluation reports.

use std::fmt::{self, Write as _};

use serde::Serialize;

use crate::autograd::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::pipeline::{LabelMap, LV, MYO, RV};
use crate::tensor::Scalar;

pub const DICE_SMOOTHING: f64 = 1.0;

/// `2|A∩B| / (|A|+|B|)`, with two empty masks scoring 1.
pub fn dice_score(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(dim_err!("masks of {} and {} pixels", a.len(), b.len()));
    }
    let (mut inter, mut sa, mut sb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        sa += x as usize;
        sb += y as usize;
    }
    if sa + sb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (sa + sb) as f64)
}

/// `1 - mean_{n,c} (2Σpt + ε) / (Σp + Σt + ε)` over `[N, C, H, W]` maps.
pub fn dice_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var, smoothing: f64) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(dim_err!(
            "prediction {:?} and target {:?} differ",
            tape.shape(pred),
            tape.shape(target)
        ));
    }
    let eps = T::from_f64_lossy(smoothing);
    let pt = tape.mul(pred, target)?;
    let inter = tape.sum_spatial(pt)?;
    let ps = tape.sum_spatial(pred)?;
    let ts = tape.sum_spatial(target)?;
    let num = tape.scale(inter, T::from_f64_lossy(2.0));
    let num = tape.add_scalar(num, eps);
    let den = tape.add(ps, ts)?;
    let den = tape.add_scalar(den, eps);
    let ratio = tape.div(num, den)?;
    let mean = tape.mean(ratio);
    let neg = tape.scale(mean, -T::one());
    Ok(tape.add_scalar(neg, T::one()))
}

fn boundary(mask: &[bool], height: usize, width: usize) -> Vec<bool> {
    let at = |r: isize, c: isize| r >= 0 && c >= 0 && (r as usize) < height && (c as usize) < width && mask[r as usize * width + c as usize];
    (0..height * width)
        .map(|i| {
            let (r, c) = ((i / width) as isize, (i % width) as isize);
            mask[i] && !(at(r - 1, c) && at(r + 1, c) && at(r, c - 1) && at(r, c + 1))
        })
        .collect()
}

/// Lower envelope of parabolas, one dimension, samples at `step` spacing.
fn edt_1d(f: &[f64], step: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let pos = |q: usize| q as f64 * step;
    let mut k = 0usize;
    let first = f.iter().position(|x| x.is_finite());
    let Some(first) = first else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < pos(q) {
            k += 1;
        }
        let d = (q as f64 - v[k] as f64) * step;
        out[q] = d * d + f[v[k]];
    }
}

/// Squared distance from every pixel to the nearest site, scaled by `spacing`.
fn squared_distance_map(sites: &[bool], height: usize, width: usize, spacing: [f64; 2]) -> Vec<f64> {
    let n = height.max(width);
    let (mut v, mut z) = (vec![0usize; n], vec![0f64; n + 1]);
    let mut cols = vec![0f64; height * width];
    let mut f = vec![0f64; n];
    let mut out = vec![0f64; n];
    for c in 0..width {
        for r in 0..height {
            f[r] = if sites[r * width + c] { 0.0 } else { f64::INFINITY };
        }
        edt_1d(&f[..height], spacing[0], &mut out[..height], &mut v, &mut z);
        for r in 0..height {
            cols[r * width + c] = out[r];
        }
    }
    let mut result = vec![0f64; height * width];
    for r in 0..height {
        edt_1d(&cols[r * width..(r + 1) * width], spacing[1], &mut out[..width], &mut v, &mut z);
        result[r * width..(r + 1) * width].copy_from_slice(&out[..width]);
    }
    result
}

fn directed(from: &[bool], to_map: &[f64]) -> f64 {
    from.iter()
        .zip(to_map)
        .filter(|(&b, _)| b)
        .map(|(_, &d)| d)
        .fold(0.0, f64::max)
}

/// Symmetric Hausdorff distance between the boundary pixels of two masks.
pub fn hausdorff(a: &[bool], b: &[bool], height: usize, width: usize, spacing: [f64; 2]) -> Result<f64> {
    if a.len() != height * width || b.len() != height * width {
        return Err(dim_err!("masks do not match a {height}x{width} grid"));
    }
    if !a.iter().any(|&x| x) || !b.iter().any(|&x| x) {
        return Err(Error::Undefined("Hausdorff distance of an empty mask".into()));
    }
    let ba = boundary(a, height, width);
    let bb = boundary(b, height, width);
    let da = squared_distance_map(&ba, height, width, spacing);
    let db = squared_distance_map(&bb, height, width, spacing);
    Ok(directed(&ba, &db).max(directed(&bb, &da)).sqrt())
}

pub const CLASS_NAMES: [&str; 3] = ["LV", "RV", "Myo"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassSummary {
    pub name: String,
    pub dice_pct: f64,
    /// `None` when no case had both masks nonempty.
    pub hd: Option<f64>,
    pub cases: usize,
    pub hd_cases: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    /// LV, RV, Myo, Avg.
    pub rows: Vec<ClassSummary>,
    pub cases: usize,
    pub unit: String,
}

pub struct CaseScores {
    pub dice: [f64; 3],
    pub hd: [Option<f64>; 3],
}

pub fn score_case(pred: &LabelMap, gt: &LabelMap) -> Result<CaseScores> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(dim_err!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height,
            pred.width,
            gt.height,
            gt.width
        ));
    }
    let spacing = gt.spacing.or(pred.spacing).unwrap_or([1.0, 1.0]);
    let mut dice = [0.0; 3];
    let mut hd = [None; 3];
    for (k, class) in [LV, RV, MYO].into_iter().enumerate() {
        let (p, g) = (pred.class_mask(class), gt.class_mask(class));
        dice[k] = dice_score(&p, &g)?;
        hd[k] = match hausdorff(&p, &g, gt.height, gt.width, spacing) {
            Ok(v) => Some(v),
            Err(Error::Undefined(_)) => None,
            Err(e) => return Err(e),
        };
    }
    Ok(CaseScores { dice, hd })
}

pub fn eval_report(cases: &[(LabelMap, LabelMap)]) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::Usage("evaluation needs at least one case".into()));
    }
    let unit = if cases.iter().all(|(_, g)| g.spacing.is_some()) { "mm" } else { "px" };
    let mut dice_sum = [0.0; 3];
    let mut hd_sum = [0.0; 3];
    let mut hd_n = [0usize; 3];
    for (i, (pred, gt)) in cases.iter().enumerate() {
        let s = score_case(pred, gt)?;
        for k in 0..3 {
            dice_sum[k] += s.dice[k];
            match s.hd[k] {
                Some(v) => {
                    hd_sum[k] += v;
                    hd_n[k] += 1;
                }
                None => log::warn!("case {i}: {} mask empty, HD excluded", CLASS_NAMES[k]),
            }
        }
    }
    let n = cases.len();
    let mut rows: Vec<ClassSummary> = (0..3)
        .map(|k| ClassSummary {
            name: CLASS_NAMES[k].to_string(),
            dice_pct: 100.0 * dice_sum[k] / n as f64,
            hd: (hd_n[k] > 0).then(|| hd_sum[k] / hd_n[k] as f64),
            cases: n,
            hd_cases: hd_n[k],
        })
        .collect();
    let hds: Vec<f64> = rows.iter().filter_map(|r| r.hd).collect();
    rows.push(ClassSummary {
        name: "Avg".into(),
        dice_pct: rows.iter().map(|r| r.dice_pct).sum::<f64>() / 3.0,
        hd: (!hds.is_empty()).then(|| hds.iter().sum::<f64>() / hds.len() as f64),
        cases: n,
        hd_cases: hd_n.iter().copied().min().unwrap_or(0),
    });
    Ok(EvalReport {
        rows,
        cases: n,
        unit: unit.into(),
    })
}

fn fmt_hd(hd: Option<f64>) -> String {
    hd.map_or_else(|| "n/a".into(), |v| format!("{v:.2}"))
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,dice_pct,hd,cases\n");
        for r in &self.rows {
            let hd = r.hd.map_or_else(String::new, |v| format!("{v:.4}"));
            let _ = writeln!(s, "{},{:.4},{},{}", r.name, r.dice_pct, hd, r.cases);
        }
        s
    }

    pub fn dice(&self, name: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.name == name).map(|r| r.dice_pct)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: String = self.rows.iter().map(|r| format!("{:>8}", r.name)).collect();
        writeln!(f, "{:<16}{head}", "")?;
        let dice: String = self.rows.iter().map(|r| format!("{:>8.2}", r.dice_pct)).collect();
        writeln!(f, "{:<16}{dice}", "Dice (%)")?;
        let hd: String = self.rows.iter().map(|r| format!("{:>8}", fmt_hd(r.hd))).collect();
        writeln!(f, "{:<16}{hd}", format!("HD ({})", self.unit))?;
        write!(f, "cases: {}", self.cases)
    }
}
