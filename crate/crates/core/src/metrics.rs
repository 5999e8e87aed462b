//! Alpha matte evaluation metrics. All values are raw; scaling for
//! presentation happens only in [`format_table`].

use std::collections::VecDeque;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{DcamError, Result};

pub const GRAD_SIGMA: f64 = 1.4;
pub const CONN_STEP: f64 = 0.1;
pub const CONN_THETA: f64 = 0.15;

/// Pixels a metric is accumulated over.
#[derive(Debug, Clone, Copy)]
pub enum Region<'a> {
    Whole,
    /// Typically the trimap's unknown band.
    Unknown(ArrayView2<'a, bool>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionKind {
    Unknown,
    Whole,
}

impl Region<'_> {
    pub fn kind(&self) -> RegionKind {
        match self {
            Region::Whole => RegionKind::Whole,
            Region::Unknown(_) => RegionKind::Unknown,
        }
    }

    fn mask(&self, dim: (usize, usize)) -> Result<Array2<bool>> {
        match self {
            Region::Whole => Ok(Array2::from_elem(dim, true)),
            Region::Unknown(m) if m.dim() == dim => Ok(m.to_owned()),
            Region::Unknown(m) => Err(DcamError::Metric(format!("region mask {:?} does not match {dim:?}", m.dim()))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sad: f64,
    pub mse: f64,
    pub mad: f64,
    pub grad: f64,
    pub conn: f64,
    pub region: RegionKind,
}

fn check_shapes(pred: ArrayView2<f64>, gt: ArrayView2<f64>) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(DcamError::Metric(format!("prediction {:?} and ground truth {:?} differ in shape", pred.dim(), gt.dim())));
    }
    Ok(())
}

/// `(sad, mse, mad)` over the region.
pub fn pixel_metrics(pred: ArrayView2<f64>, gt: ArrayView2<f64>, region: Region) -> Result<(f64, f64, f64)> {
    check_shapes(pred, gt)?;
    let mask = region.mask(pred.dim())?;
    let mut n = 0usize;
    let (mut sad, mut sq) = (0.0, 0.0);
    Zip::from(&pred).and(&gt).and(&mask).for_each(|&p, &g, &m| {
        if m {
            let d = p - g;
            sad += d.abs();
            sq += d * d;
            n += 1;
        }
    });
    if n == 0 {
        return Err(DcamError::Metric("evaluation region is empty".into()));
    }
    Ok((sad, sq / n as f64, sad / n as f64))
}

fn gauss(x: f64, sigma: f64) -> f64 {
    (-x * x / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

fn dgauss(x: f64, sigma: f64) -> f64 {
    -x * gauss(x, sigma) / (sigma * sigma)
}

/// 1-D factors of the derivative-of-Gaussian filter: the smoothing profile
/// and the derivative profile, jointly scaled so the 2-D kernel has unit
/// Frobenius norm.
pub fn gaussian_gradient_kernels(sigma: f64) -> (Vec<f64>, Vec<f64>) {
    let half = (sigma * (-2.0 * ((2.0 * std::f64::consts::PI).sqrt() * sigma * 1e-2).ln()).sqrt()).ceil() as isize;
    let g: Vec<f64> = (-half..=half).map(|u| gauss(u as f64, sigma)).collect();
    let d: Vec<f64> = (-half..=half).map(|u| dgauss(u as f64, sigma)).collect();
    let norm = (g.iter().map(|v| v * v).sum::<f64>() * d.iter().map(|v| v * v).sum::<f64>()).sqrt();
    let s = norm.sqrt();
    (g.into_iter().map(|v| v / s).collect(), d.into_iter().map(|v| v / s).collect())
}

/// True 1-D convolution along `axis` with replicated borders.
fn convolve_axis(x: &Array2<f64>, k: &[f64], axis: usize) -> Array2<f64> {
    let (h, w) = x.dim();
    let half = (k.len() / 2) as isize;
    let n = if axis == 0 { h } else { w } as isize;
    Array2::from_shape_fn((h, w), |(y, xx)| {
        let mut acc = 0.0;
        for (t, &kv) in k.iter().enumerate() {
            // convolution flips the kernel
            let off = half - t as isize;
            if axis == 0 {
                let yy = (y as isize + off).clamp(0, n - 1) as usize;
                acc += kv * x[[yy, xx]];
            } else {
                let xs = (xx as isize + off).clamp(0, n - 1) as usize;
                acc += kv * x[[y, xs]];
            }
        }
        acc
    })
}

/// Gradient magnitude under derivative-of-Gaussian filtering.
pub fn gradient_magnitude(x: ArrayView2<f64>, sigma: f64) -> Array2<f64> {
    let (g, d) = gaussian_gradient_kernels(sigma);
    let x = x.to_owned();
    // hx[i][j] = g[i] d[j]: smooth along rows, differentiate along columns.
    let gx = convolve_axis(&convolve_axis(&x, &g, 0), &d, 1);
    let gy = convolve_axis(&convolve_axis(&x, &d, 0), &g, 1);
    Zip::from(&gx).and(&gy).map_collect(|a, b| (a * a + b * b).sqrt())
}

/// Sum over the region of the squared difference in gradient magnitude.
pub fn grad_metric(pred: ArrayView2<f64>, gt: ArrayView2<f64>, region: Region, sigma: f64) -> Result<f64> {
    check_shapes(pred, gt)?;
    if !(sigma > 0.0) {
        return Err(DcamError::Metric("sigma must be positive".into()));
    }
    let mask = region.mask(pred.dim())?;
    let (mp, mg) = (gradient_magnitude(pred, sigma), gradient_magnitude(gt, sigma));
    let mut total = 0.0;
    Zip::from(&mp).and(&mg).and(&mask).for_each(|&a, &b, &m| {
        if m {
            total += (a - b) * (a - b);
        }
    });
    Ok(total)
}

/// Largest 8-connected component of `mask`.
pub fn largest_component(mask: &Array2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    let mut label = Array2::<u32>::zeros((h, w));
    let mut sizes = vec![0usize];
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] || label[[y, x]] != 0 {
                continue;
            }
            let id = sizes.len() as u32;
            let mut size = 0;
            label[[y, x]] = id;
            queue.push_back((y, x));
            while let Some((cy, cx)) = queue.pop_front() {
                size += 1;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (ny, nx) = (cy as isize + dy, cx as isize + dx);
                        if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask[[ny, nx]] && label[[ny, nx]] == 0 {
                            label[[ny, nx]] = id;
                            queue.push_back((ny, nx));
                        }
                    }
                }
            }
            sizes.push(size);
        }
    }
    // first label wins ties
    let best = (1..sizes.len()).fold(0, |b, i| if b == 0 || sizes[i] > sizes[b] { i } else { b });
    label.mapv(|l| best != 0 && l as usize == best)
}

/// Connectivity error with threshold step `step`.
pub fn conn_metric(pred: ArrayView2<f64>, gt: ArrayView2<f64>, region: Region, step: f64) -> Result<f64> {
    check_shapes(pred, gt)?;
    if !(step > 0.0 && step < 1.0) {
        return Err(DcamError::Metric(format!("threshold step must lie in (0, 1), got {step}")));
    }
    let mask = region.mask(pred.dim())?;
    let steps = (1.0 / step).round() as usize;
    let mut l_map = Array2::from_elem(pred.dim(), -1.0);
    for i in 1..=steps {
        let t = i as f64 * step;
        let both = Zip::from(&pred).and(&gt).map_collect(|&p, &g| p >= t && g >= t);
        let omega = largest_component(&both);
        let prev = (i - 1) as f64 * step;
        Zip::from(&mut l_map).and(&omega).for_each(|l, &o| {
            if *l == -1.0 && !o {
                *l = prev;
            }
        });
    }
    l_map.mapv_inplace(|l| if l == -1.0 { 1.0 } else { l });
    let phi = |a: f64, l: f64| {
        let d = a - l;
        if d >= CONN_THETA {
            1.0 - d
        } else {
            1.0
        }
    };
    let mut total = 0.0;
    Zip::from(&pred).and(&gt).and(&l_map).and(&mask).for_each(|&p, &g, &l, &m| {
        if m {
            total += (phi(p, l) - phi(g, l)).abs();
        }
    });
    Ok(total)
}

/// Every metric with default constants.
pub fn evaluate(pred: ArrayView2<f64>, gt: ArrayView2<f64>, region: Region) -> Result<MetricReport> {
    let (sad, mse, mad) = pixel_metrics(pred, gt, region)?;
    Ok(MetricReport {
        sad,
        mse,
        mad,
        grad: grad_metric(pred, gt, region, GRAD_SIGMA)?,
        conn: conn_metric(pred, gt, region, CONN_STEP)?,
        region: region.kind(),
    })
}

/// Arithmetic mean of several reports over the same region kind.
pub fn mean_report(reports: &[MetricReport]) -> Option<MetricReport> {
    let first = reports.first()?;
    let n = reports.len() as f64;
    let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Some(MetricReport {
        sad: avg(|r| r.sad),
        mse: avg(|r| r.mse),
        mad: avg(|r| r.mad),
        grad: avg(|r| r.grad),
        conn: avg(|r| r.conn),
        region: first.region,
    })
}

/// Presentation conventions for tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableStyle {
    /// SAD/1000, MSE x 1e3, Grad/1000, Conn/1000.
    Composition,
    /// Raw values.
    Raw,
}

/// Plain-text table of named reports.
pub fn format_table(rows: &[(String, MetricReport)], style: TableStyle) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<24} {:>12} {:>12} {:>12} {:>12} {:>12}", "name", "SAD", "MSE", "MAD", "Grad", "Conn");
    for (name, r) in rows {
        let (sad, mse, grad, conn) = match style {
            TableStyle::Composition => (r.sad / 1000.0, r.mse * 1e3, r.grad / 1000.0, r.conn / 1000.0),
            TableStyle::Raw => (r.sad, r.mse, r.grad, r.conn),
        };
        let _ = writeln!(out, "{name:<24} {sad:>12.6} {mse:>12.6} {:>12.6} {grad:>12.6} {conn:>12.6}", r.mad);
    }
    out
}

/// Machine-readable `key=value` lines, one block per report.
pub fn format_key_values(rows: &[(String, MetricReport)]) -> String {
    let mut out = String::new();
    for (name, r) in rows {
        let region = match r.region {
            RegionKind::Unknown => "unknown",
            RegionKind::Whole => "whole",
        };
        let _ = writeln!(
            out,
            "name={name} region={region} sad={:e} mse={:e} mad={:e} grad={:e} conn={:e}",
            r.sad, r.mse, r.mad, r.grad, r.conn
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(h: usize, w: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((h, w), || rng.random_range(0.0..1.0))
    }

    #[test]
    fn pixel_metrics_identity_saturation_and_loop_oracle() {
        let a = random(16, 16, 1);
        assert_eq!(pixel_metrics(a.view(), a.view(), Region::Whole).unwrap(), (0.0, 0.0, 0.0));
        let (ones, zeros) = (Array2::ones((100, 100)), Array2::zeros((100, 100)));
        assert_eq!(pixel_metrics(ones.view(), zeros.view(), Region::Whole).unwrap(), (10000.0, 1.0, 1.0));

        let b = random(16, 16, 2);
        let mask = random(16, 16, 3).mapv(|v| v > 0.4);
        let (mut sad, mut sq, mut n) = (0.0, 0.0, 0.0);
        for y in 0..16 {
            for x in 0..16 {
                if mask[[y, x]] {
                    let d = a[[y, x]] - b[[y, x]];
                    sad += d.abs();
                    sq += d * d;
                    n += 1.0;
                }
            }
        }
        let (s, m, d) = pixel_metrics(a.view(), b.view(), Region::Unknown(mask.view())).unwrap();
        assert!((s - sad).abs() < 1e-9 && (m - sq / n).abs() < 1e-9 && (d - sad / n).abs() < 1e-9);
    }

    #[test]
    fn pixel_metric_errors() {
        let a = random(4, 4, 0);
        let none = Array2::from_elem((4, 4), false);
        assert!(pixel_metrics(a.view(), a.view(), Region::Unknown(none.view())).is_err());
        let b = random(4, 5, 0);
        assert!(pixel_metrics(a.view(), b.view(), Region::Whole).is_err());
        let small = Array2::from_elem((2, 2), true);
        assert!(pixel_metrics(a.view(), a.view(), Region::Unknown(small.view())).is_err());
    }

    /// Direct 2-D convolution with the full derivative-of-Gaussian kernels
    /// and replicated borders.
    fn dense_gradient(x: &Array2<f64>, sigma: f64) -> Array2<f64> {
        let (g, d) = gaussian_gradient_kernels(sigma);
        let half = (g.len() / 2) as isize;
        let (h, w) = x.dim();
        let at = |y: isize, xx: isize| x[[y.clamp(0, h as isize - 1) as usize, xx.clamp(0, w as isize - 1) as usize]];
        Array2::from_shape_fn((h, w), |(y, xx)| {
            let (mut gx, mut gy) = (0.0, 0.0);
            for i in 0..g.len() {
                for j in 0..g.len() {
                    let v = at(y as isize + half - i as isize, xx as isize + half - j as isize);
                    gx += g[i] * d[j] * v;
                    gy += d[i] * g[j] * v;
                }
            }
            (gx * gx + gy * gy).sqrt()
        })
    }

    #[test]
    fn grad_metric_matches_dense_convolution() {
        let step = Array2::from_shape_fn((32, 32), |(_, x)| (x >= 16) as u8 as f64);
        let blurred = Array2::from_shape_fn((32, 32), |(_, x)| 1.0 / (1.0 + (-(x as f64 - 15.5) / 1.5).exp()));
        let expected: f64 = (&dense_gradient(&step, GRAD_SIGMA) - &dense_gradient(&blurred, GRAD_SIGMA))
            .mapv(|v| v * v)
            .sum();
        let got = grad_metric(step.view(), blurred.view(), Region::Whole, GRAD_SIGMA).unwrap();
        assert!(got > 0.0);
        assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
    }

    #[test]
    fn grad_kernel_is_unit_norm_and_flat_fields_vanish() {
        let (g, d) = gaussian_gradient_kernels(GRAD_SIGMA);
        let frob: f64 = g.iter().flat_map(|a| d.iter().map(move |b| (a * b).powi(2))).sum();
        assert!((frob - 1.0).abs() < 1e-12);
        let a = Array2::from_elem((20, 20), 0.3);
        let b = Array2::from_elem((20, 20), 0.9);
        assert!(grad_metric(a.view(), b.view(), Region::Whole, GRAD_SIGMA).unwrap() < 1e-20);
        let r = random(20, 20, 4);
        assert_eq!(grad_metric(r.view(), r.view(), Region::Whole, GRAD_SIGMA).unwrap(), 0.0);
    }

    fn disk(n: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, n), |(y, x)| (((y as f64 - 12.0).powi(2) + (x as f64 - 12.0).powi(2)) <= 49.0) as u8 as f64)
    }

    /// Connectivity error by depth-first flood fill, written independently.
    fn conn_reference(pred: &Array2<f64>, gt: &Array2<f64>, step: f64) -> f64 {
        let (h, w) = pred.dim();
        let mut level = vec![None::<f64>; h * w];
        let n_steps = (1.0 / step).round() as usize;
        for i in 1..=n_steps {
            let t = i as f64 * step;
            let on: Vec<bool> = (0..h * w).map(|p| pred[[p / w, p % w]] >= t && gt[[p / w, p % w]] >= t).collect();
            let mut comp = vec![usize::MAX; h * w];
            let mut best: (usize, usize) = (usize::MAX, 0);
            let mut next = 0;
            for start in 0..h * w {
                if !on[start] || comp[start] != usize::MAX {
                    continue;
                }
                let mut stack = vec![start];
                comp[start] = next;
                let mut size = 0;
                while let Some(p) = stack.pop() {
                    size += 1;
                    let (y, x) = ((p / w) as isize, (p % w) as isize);
                    for (dy, dx) in [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)] {
                        let (ny, nx) = (y + dy, x + dx);
                        if ny >= 0 && nx >= 0 && ny < h as isize && nx < w as isize {
                            let q = ny as usize * w + nx as usize;
                            if on[q] && comp[q] == usize::MAX {
                                comp[q] = next;
                                stack.push(q);
                            }
                        }
                    }
                }
                if size > best.1 {
                    best = (next, size);
                }
                next += 1;
            }
            for p in 0..h * w {
                if level[p].is_none() && comp[p] != best.0 {
                    level[p] = Some((i - 1) as f64 * step);
                }
            }
        }
        let phi = |a: f64, l: f64| if a - l >= 0.15 { 1.0 - (a - l) } else { 1.0 };
        (0..h * w)
            .map(|p| {
                let l = level[p].unwrap_or(1.0);
                (phi(pred[[p / w, p % w]], l) - phi(gt[[p / w, p % w]], l)).abs()
            })
            .sum()
    }

    #[test]
    fn conn_detached_blob_matches_flood_fill_reference() {
        let gt = disk(32);
        let mut pred = gt.clone();
        for y in 26..29 {
            for x in 26..29 {
                pred[[y, x]] = 1.0;
            }
        }
        let got = conn_metric(pred.view(), gt.view(), Region::Whole, CONN_STEP).unwrap();
        assert!((got - conn_reference(&pred, &gt, CONN_STEP)).abs() < 1e-6);
        // every blob pixel has phi 0 in the prediction and 1 in the ground truth
        assert!((got - 9.0).abs() < 1e-9);

        let soft = random(32, 32, 5);
        let soft_gt = random(32, 32, 6);
        let got = conn_metric(soft.view(), soft_gt.view(), Region::Whole, CONN_STEP).unwrap();
        assert!((got - conn_reference(&soft, &soft_gt, CONN_STEP)).abs() < 1e-6);
    }

    #[test]
    fn conn_vanishes_on_equal_inputs() {
        let gt = disk(32);
        assert_eq!(conn_metric(gt.view(), gt.view(), Region::Whole, CONN_STEP).unwrap(), 0.0);
        let r = random(16, 16, 7);
        assert_eq!(conn_metric(r.view(), r.view(), Region::Whole, CONN_STEP).unwrap(), 0.0);
        assert!(conn_metric(r.view(), r.view(), Region::Whole, 1.5).is_err());
    }

    #[test]
    fn largest_component_uses_diagonal_neighbours() {
        let mut m = Array2::from_elem((5, 5), false);
        for i in 0..3 {
            m[[i, i]] = true;
        }
        m[[4, 0]] = true;
        let c = largest_component(&m);
        assert_eq!(c.iter().filter(|&&v| v).count(), 3);
        assert!(!c[[4, 0]]);
    }

    #[test]
    fn reporting_scales_only_in_tables() {
        let r = MetricReport {
            sad: 2000.0,
            mse: 0.004,
            mad: 0.01,
            grad: 3000.0,
            conn: 1000.0,
            region: RegionKind::Unknown,
        };
        let table = format_table(&[("x".into(), r)], TableStyle::Composition);
        assert!(table.contains("2.000000") && table.contains("4.000000") && table.contains("3.000000"));
        let kv = format_key_values(&[("x".into(), r)]);
        assert!(kv.contains("region=unknown") && kv.contains("sad=2e3"));
        assert_eq!(mean_report(&[r, r]).unwrap(), r);
        assert!(mean_report(&[]).is_none());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn pixel_metrics_symmetric_monotone_and_region_consistent(seed in 0u64..10_000, y in 0usize..8, x in 0usize..8, bump in 0.0f64..1.0) {
            let a = random(8, 8, seed);
            let b = random(8, 8, seed + 1);
            let ab = pixel_metrics(a.view(), b.view(), Region::Whole).unwrap();
            prop_assert_eq!(ab, pixel_metrics(b.view(), a.view(), Region::Whole).unwrap());
            let all = Array2::from_elem((8, 8), true);
            prop_assert_eq!(ab, pixel_metrics(a.view(), b.view(), Region::Unknown(all.view())).unwrap());
            let mut worse = a.clone();
            let d = a[[y, x]] - b[[y, x]];
            worse[[y, x]] += bump * if d >= 0.0 { 1.0 } else { -1.0 };
            let w = pixel_metrics(worse.view(), b.view(), Region::Whole).unwrap();
            prop_assert!(w.0 >= ab.0 && w.1 >= ab.1 && w.2 >= ab.2);
            let e = evaluate(a.view(), a.view(), Region::Whole).unwrap();
            prop_assert!(e.sad == 0.0 && e.mse == 0.0 && e.mad == 0.0 && e.grad == 0.0 && e.conn == 0.0);
        }
    }
}
