//! PSNR, SSIM, standard-error aggregation and timed evaluation.

use std::time::Instant;

use crate::image::{bicubic_resample, GrayImage};
use crate::{Error, Result, Scalar};

/// `10 log10(1 / MSE)` on the `[0,1]` intensity scale. Identical images
/// give `+inf`; callers exclude the sentinel from aggregates.
pub fn psnr<S: Scalar>(a: &GrayImage<S>, b: &GrayImage<S>) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::ShapeMismatch(format!(
            "psnr extents {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let mut mse = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data().iter()) {
        let d = x.as_f64() - y.as_f64();
        mse += d * d;
    }
    mse /= (a.height() * a.width()) as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    let c = (SSIM_WINDOW / 2) as f64;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dy = y as f64 - c;
            let dx = x as f64 - c;
            w.push((-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, dynamic range 1, averaged over valid window positions.
pub fn ssim<S: Scalar>(a: &GrayImage<S>, b: &GrayImage<S>) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::ShapeMismatch(format!(
            "ssim extents {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Contract(format!(
            "ssim needs extents >= {SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let ad = a.data();
    let bd = b.data();
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for ty in 0..=h - SSIM_WINDOW {
        for tx in 0..=w - SSIM_WINDOW {
            let mut mu_x = 0.0;
            let mut mu_y = 0.0;
            for wy in 0..SSIM_WINDOW {
                let row = (ty + wy) * w + tx;
                for wx in 0..SSIM_WINDOW {
                    let wt = win[wy * SSIM_WINDOW + wx];
                    mu_x += wt * ad[row + wx].as_f64();
                    mu_y += wt * bd[row + wx].as_f64();
                }
            }
            let mut var_x = 0.0;
            let mut var_y = 0.0;
            let mut cov = 0.0;
            for wy in 0..SSIM_WINDOW {
                let row = (ty + wy) * w + tx;
                for wx in 0..SSIM_WINDOW {
                    let wt = win[wy * SSIM_WINDOW + wx];
                    let dx = ad[row + wx].as_f64() - mu_x;
                    let dy = bd[row + wx].as_f64() - mu_y;
                    var_x += wt * dx * dx;
                    var_y += wt * dy * dy;
                    cov += wt * dx * dy;
                }
            }
            let num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2);
            let den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2);
            acc += num / den;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

#[derive(Clone, Debug)]
pub struct ImageMetrics {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct MetricReport {
    pub per_image: Vec<ImageMetrics>,
    pub psnr_mean: f64,
    /// Population-stddev / sqrt(n) over the finite per-image PSNR values.
    pub psnr_sem: f64,
    pub ssim_mean: f64,
    pub mean_seconds: f64,
}

/// Population standard deviation.
pub fn population_stddev(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
    var.sqrt()
}

/// Aggregate per-image rows; infinite PSNR values are excluded from the
/// mean and SEM with a warning.
pub fn aggregate(per_image: Vec<ImageMetrics>) -> MetricReport {
    let finite: Vec<f64> = per_image
        .iter()
        .map(|m| m.psnr_db)
        .filter(|p| p.is_finite())
        .collect();
    let excluded = per_image.len() - finite.len();
    if excluded > 0 {
        eprintln!("warning: {excluded} image(s) with infinite PSNR excluded from mean/SEM");
    }
    let psnr_mean = if finite.is_empty() {
        f64::NAN
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    let psnr_sem = if finite.is_empty() {
        f64::NAN
    } else {
        population_stddev(&finite) / (finite.len() as f64).sqrt()
    };
    let n = per_image.len().max(1) as f64;
    let ssim_mean = per_image.iter().map(|m| m.ssim).sum::<f64>() / n;
    let mean_seconds = per_image.iter().map(|m| m.seconds).sum::<f64>() / n;
    MetricReport {
        per_image,
        psnr_mean,
        psnr_sem,
        ssim_mean,
        mean_seconds,
    }
}

/// Evaluate a super-resolver over HR images: degrade each by `r` with
/// bicubic downsampling, run `sr` (timed, forward only), and score the
/// clamped result against the original. Images whose extents are not
/// divisible by `r` are skipped with a warning.
pub fn evaluate<S: Scalar>(
    images: &[(String, GrayImage<S>)],
    r: usize,
    sr: &mut dyn FnMut(&GrayImage<S>) -> Result<GrayImage<S>>,
) -> Result<MetricReport> {
    let mut rows = Vec::new();
    for (id, hr) in images {
        if hr.height() % r != 0 || hr.width() % r != 0 {
            eprintln!(
                "warning: skipping {id}: extents {}x{} not divisible by {r}",
                hr.height(),
                hr.width()
            );
            continue;
        }
        let lr = bicubic_resample(hr, hr.height() / r, hr.width() / r)?;
        let t0 = Instant::now();
        let sr_img = sr(&lr)?;
        let seconds = t0.elapsed().as_secs_f64();
        if sr_img.height() != hr.height() || sr_img.width() != hr.width() {
            return Err(Error::ShapeMismatch(format!(
                "super-resolved {id} is {}x{}, expected {}x{}",
                sr_img.height(),
                sr_img.width(),
                hr.height(),
                hr.width()
            )));
        }
        rows.push(ImageMetrics {
            id: id.clone(),
            psnr_db: psnr(&sr_img, hr)?,
            ssim: ssim(&sr_img, hr)?,
            seconds,
        });
    }
    Ok(aggregate(rows))
}

/// Tab-separated report with a mean +- SEM footer.
pub fn format_report(report: &MetricReport) -> String {
    let mut out = String::from("image_id\tpsnr_db\tssim\tseconds\n");
    for m in &report.per_image {
        out.push_str(&format!(
            "{}\t{:.4}\t{:.4}\t{:.4}\n",
            m.id, m.psnr_db, m.ssim, m.seconds
        ));
    }
    out.push_str(&format!(
        "mean\t{:.4}±{:.4}\t{:.4}\t{:.4}\n",
        report.psnr_mean, report.psnr_sem, report.ssim_mean, report.mean_seconds
    ));
    out
}
