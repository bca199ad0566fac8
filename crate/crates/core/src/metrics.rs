//! Volume quality metrics: PSNR, SSIM and NMSE.
//!
//! The target defines the peak (`max(target)`) and the SSIM dynamic range
//! (`max(target) - min(target)`), so PSNR and SSIM are not symmetric in their
//! arguments.

use crate::error::{Error, Result};
use crate::pointspace::Volume;

/// Reported in place of `+inf` when estimate and target coincide.
pub const PSNR_CAP: f64 = 99.0;
/// Edge of the uniform SSIM window.
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn mse(estimate: &Volume, target: &Volume) -> f64 {
    let sum: f64 = estimate
        .voxels()
        .iter()
        .zip(target.voxels())
        .map(|(e, t)| (t - e) * (t - e))
        .sum();
    sum / target.len() as f64
}

/// `10 log10(max(target)^2 / MSE)`; `+inf` for identical volumes.
pub fn psnr(estimate: &Volume, target: &Volume) -> Result<f64> {
    estimate.same_shape(target, "psnr")?;
    let err = mse(estimate, target);
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    let peak = target.max();
    Ok(10.0 * (peak * peak / err).log10())
}

/// PSNR clipped to [`PSNR_CAP`] for logs and reports.
pub fn capped_psnr(value: f64) -> f64 {
    value.min(PSNR_CAP)
}

/// `||target - estimate||^2 / ||target||^2`.
pub fn nmse(estimate: &Volume, target: &Volume) -> Result<f64> {
    estimate.same_shape(target, "nmse")?;
    let energy: f64 = target.voxels().iter().map(|t| t * t).sum();
    if energy == 0.0 {
        return Err(Error::contract("nmse of an all-zero target is undefined"));
    }
    let err: f64 = estimate
        .voxels()
        .iter()
        .zip(target.voxels())
        .map(|(e, t)| (t - e) * (t - e))
        .sum();
    Ok(err / energy)
}

/// Sums of `values` over every valid `w`-wide window along one axis.
fn window_sums(values: &[f64], shape: [usize; 3], axis: usize, w: usize) -> (Vec<f64>, [usize; 3]) {
    let mut out_shape = shape;
    out_shape[axis] = shape[axis] + 1 - w;
    let [h, wd, _] = shape;
    let [oh, ow, od] = out_shape;
    let stride = [1, h, h * wd][axis];
    let mut out = Vec::with_capacity(oh * ow * od);
    for z in 0..od {
        for y in 0..ow {
            for x in 0..oh {
                let base = (z * wd + y) * h + x;
                let mut s = 0.0;
                for t in 0..w {
                    s += values[base + t * stride];
                }
                out.push(s);
            }
        }
    }
    (out, out_shape)
}

fn box_sums(values: &[f64], shape: [usize; 3], w: usize) -> Vec<f64> {
    let (a, s) = window_sums(values, shape, 0, w);
    let (b, s) = window_sums(&a, s, 1, w);
    window_sums(&b, s, 2, w).0
}

/// Mean local SSIM over every valid position of a uniform 7^3 window, with
/// population statistics and `L = max(target) - min(target)`.
pub fn ssim(estimate: &Volume, target: &Volume) -> Result<f64> {
    estimate.same_shape(target, "ssim")?;
    let shape = target.shape();
    let w = SSIM_WINDOW;
    if shape.iter().any(|&e| e < w) {
        return Err(Error::contract(format!(
            "ssim needs every extent >= {w}, volume is {shape:?}"
        )));
    }
    let range = target.max() - target.min();
    if range <= 0.0 {
        return Err(Error::contract("ssim of a constant target has no dynamic range"));
    }
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let x = estimate.voxels();
    let y = target.voxels();
    let sq = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p * q).collect() };
    let sx = box_sums(x, shape, w);
    let sy = box_sums(y, shape, w);
    let sxx = box_sums(&sq(x, x), shape, w);
    let syy = box_sums(&sq(y, y), shape, w);
    let sxy = box_sums(&sq(x, y), shape, w);
    let n = (w * w * w) as f64;
    let mut total = 0.0;
    for i in 0..sx.len() {
        let mx = sx[i] / n;
        let my = sy[i] / n;
        let vx = sxx[i] / n - mx * mx;
        let vy = syy[i] / n - my * my;
        let cxy = sxy[i] / n - mx * my;
        let num = (2.0 * mx * my + c1) * (2.0 * cxy + c2);
        let den = (mx * mx + my * my + c1) * (vx + vy + c2);
        total += num / den;
    }
    Ok(total / sx.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub nmse: f64,
}

impl MetricReport {
    pub fn evaluate(estimate: &Volume, target: &Volume) -> Result<Self> {
        Ok(MetricReport {
            psnr: psnr(estimate, target)?,
            ssim: ssim(estimate, target)?,
            nmse: nmse(estimate, target)?,
        })
    }

    /// Component-wise mean, PSNR capped first.
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let sum = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(MetricReport {
            psnr: sum(|r| capped_psnr(r.psnr)),
            ssim: sum(|r| r.ssim),
            nmse: sum(|r| r.nmse),
        })
    }
}

/// Tab-separated `subject psnr ssim nmse` table with a final `mean` row.
pub fn format_report(rows: &[(String, MetricReport)]) -> String {
    let mut out = String::from("subject\tpsnr\tssim\tnmse\n");
    let line = |name: &str, r: &MetricReport| format!("{name}\t{}\t{}\t{}\n", capped_psnr(r.psnr), r.ssim, r.nmse);
    for (name, r) in rows {
        out.push_str(&line(name, r));
    }
    let reports: Vec<MetricReport> = rows.iter().map(|(_, r)| *r).collect();
    if let Some(mean) = MetricReport::mean(&reports) {
        out.push_str(&line("mean", &mean));
    }
    out
}
