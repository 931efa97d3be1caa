//! Binary-mask metrics: Dice, Hausdorff distance (max or 95th percentile)
//! and the deterministic single-point prompt rule.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sam_head::Point;

/// Row-major binary mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape("mask data", width * height, data.len()));
        }
        Ok(Self { width, height, data })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self { width, height, data }
    }

    /// Pixels where the `(H, W)` tensor is strictly above `threshold`.
    pub fn from_tensor(t: &Tensor, threshold: f64) -> Result<Self> {
        let (h, w) = t.dims2()?;
        let v = t.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Ok(Self {
            width: w,
            height: h,
            data: v.into_iter().map(|x| x > threshold).collect(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Foreground pixel coordinates `(x, y)` in row-major order.
    pub fn points(&self) -> Vec<(usize, usize)> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| (i % self.width, i / self.width))
            .collect()
    }

    /// `0.0`/`1.0` values, row-major.
    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    fn same_shape(&self, other: &BinaryMask, context: &str) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::shape(context, (self.width, self.height), (other.width, other.height)));
        }
        Ok(())
    }
}

/// Dice overlap in percent. Two empty masks score 100.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.same_shape(gt, "dice")?;
    let inter = pred.data.iter().zip(&gt.data).filter(|(a, b)| **a && **b).count();
    let total = pred.count() + gt.count();
    if total == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * inter as f64 / total as f64)
}

/// Which Hausdorff statistic is reported.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HdVariant {
    /// Maximum of the two directed distances.
    #[default]
    Max,
    /// 95th percentile of the pooled directed point distances.
    P95,
}

impl HdVariant {
    /// Column label used in reports.
    pub fn label(&self) -> &'static str {
        match self {
            HdVariant::Max => "hd",
            HdVariant::P95 => "hd95",
        }
    }
}

impl fmt::Display for HdVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for HdVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hd" | "max" => Ok(HdVariant::Max),
            "hd95" | "p95" => Ok(HdVariant::P95),
            other => Err(Error::RunConfig(format!("unknown HD variant `{other}`"))),
        }
    }
}

const FAR: f64 = 1e30;

/// Exact squared Euclidean distance transform of one row/column
/// (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let parabola = |q: usize| f[q] + (q * q) as f64;
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..f.len() {
        let mut s;
        loop {
            let p = v[k];
            s = (parabola(q) - parabola(p)) / (2.0 * (q - p) as f64);
            // z[0] is -inf, so k never underflows
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared distance from every pixel to the nearest foreground pixel.
pub fn squared_distance_to(mask: &BinaryMask) -> Vec<f64> {
    let (w, h) = (mask.width, mask.height);
    let n = w.max(h);
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut col_in = vec![0f64; h];
    let mut col_out = vec![0f64; h];
    let mut grid: Vec<f64> = mask.data.iter().map(|&b| if b { 0.0 } else { FAR }).collect();
    for x in 0..w {
        for y in 0..h {
            col_in[y] = grid[y * w + x];
        }
        edt_1d(&col_in, &mut col_out, &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = col_out[y];
        }
    }
    let mut row_out = vec![0f64; w];
    for y in 0..h {
        let row = &grid[y * w..(y + 1) * w];
        edt_1d(row, &mut row_out, &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&row_out);
    }
    grid
}

/// Distances from each foreground pixel of `from` to the set `to`.
fn directed_distances(from: &BinaryMask, to: &BinaryMask) -> Vec<f64> {
    let dt = squared_distance_to(to);
    from.data
        .iter()
        .zip(&dt)
        .filter(|(b, _)| **b)
        .map(|(_, d)| d.sqrt())
        .collect()
}

fn check_hd_inputs(pred: &BinaryMask, gt: &BinaryMask) -> Result<()> {
    pred.same_shape(gt, "hausdorff")?;
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "Hausdorff distance with an empty mask (pred {} px, gt {} px)",
            pred.count(),
            gt.count()
        )));
    }
    Ok(())
}

/// Symmetric Hausdorff distance in pixels between the foreground sets.
pub fn hausdorff(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_hd_inputs(pred, gt)?;
    let ab = directed_distances(pred, gt).into_iter().fold(0.0, f64::max);
    let ba = directed_distances(gt, pred).into_iter().fold(0.0, f64::max);
    Ok(ab.max(ba))
}

/// 95th percentile (nearest rank) of both directed distance sets pooled.
pub fn hausdorff95(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_hd_inputs(pred, gt)?;
    let mut all = directed_distances(pred, gt);
    all.extend(directed_distances(gt, pred));
    all.sort_by(f64::total_cmp);
    let rank = ((0.95 * all.len() as f64).ceil() as usize).clamp(1, all.len());
    Ok(all[rank - 1])
}

pub fn hausdorff_variant(pred: &BinaryMask, gt: &BinaryMask, variant: HdVariant) -> Result<f64> {
    match variant {
        HdVariant::Max => hausdorff(pred, gt),
        HdVariant::P95 => hausdorff95(pred, gt),
    }
}

/// Single foreground point prompt: the centroid when it falls on the mask,
/// else the foreground pixel nearest to it (ties → smallest `(y, x)`).
pub fn sample_point_prompt(gt: &BinaryMask) -> Result<Point> {
    let pts = gt.points();
    if pts.is_empty() {
        return Err(Error::UndefinedMetric("point prompt from an empty mask".into()));
    }
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.1 as f64).sum::<f64>() / n;
    let (rx, ry) = (cx.round() as usize, cy.round() as usize);
    if rx < gt.width && ry < gt.height && gt.get(rx, ry) {
        return Ok(Point::foreground(rx as f64, ry as f64));
    }
    let mut best = pts[0];
    let mut best_d = f64::INFINITY;
    // points() is row-major, so strict < keeps the smallest (y, x) on ties
    for &(x, y) in &pts {
        let d = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
        if d < best_d {
            best_d = d;
            best = (x, y);
        }
    }
    Ok(Point::foreground(best.0 as f64, best.1 as f64))
}

/// Aggregated metrics of one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub dataset: String,
    /// Mean Dice in percent.
    pub dice: f64,
    /// Mean HD over samples where it is defined; `None` if it never was.
    pub hd: Option<f64>,
    pub count: usize,
    /// Samples excluded from the HD mean because a mask was empty.
    pub hd_undefined: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub hd_variant: HdVariant,
    pub rows: Vec<DatasetMetrics>,
}

impl MetricReport {
    /// Columns `dataset,dice,<hd label>,count`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["dataset", "dice", self.hd_variant.label(), "count"])?;
        for r in &self.rows {
            wr.write_record([
                r.dataset.clone(),
                format!("{:.4}", r.dice),
                r.hd.map_or_else(|| "nan".to_string(), |v| format!("{v:.4}")),
                r.count.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
    }
}

/// Running per-dataset averages.
#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    dataset: String,
    variant: HdVariant,
    dice_sum: f64,
    hd_sum: f64,
    hd_count: usize,
    count: usize,
}

impl MetricAccumulator {
    pub fn new(dataset: impl Into<String>, variant: HdVariant) -> Self {
        Self {
            dataset: dataset.into(),
            variant,
            dice_sum: 0.0,
            hd_sum: 0.0,
            hd_count: 0,
            count: 0,
        }
    }

    pub fn add(&mut self, pred: &BinaryMask, gt: &BinaryMask) -> Result<()> {
        self.dice_sum += dice(pred, gt)?;
        match hausdorff_variant(pred, gt, self.variant) {
            Ok(hd) => {
                self.hd_sum += hd;
                self.hd_count += 1;
            }
            Err(Error::UndefinedMetric(_)) => {}
            Err(e) => return Err(e),
        }
        self.count += 1;
        Ok(())
    }

    pub fn finish(&self) -> DatasetMetrics {
        DatasetMetrics {
            dataset: self.dataset.clone(),
            dice: if self.count == 0 { 0.0 } else { self.dice_sum / self.count as f64 },
            hd: (self.hd_count > 0).then(|| self.hd_sum / self.hd_count as f64),
            count: self.count,
            hd_undefined: self.count - self.hd_count,
        }
    }
}
