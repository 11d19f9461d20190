//! Overlap and boundary metrics, per-case reports and ranking statistics.

mod plots;
mod stats;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volio::SegmentationMask;

pub use plots::{emit_plots, PlotOptions, PLOT_SCHEMAS};
pub use stats::{
    average_ranks, bootstrap_rank, case_scores, upper_percentile, pairwise_significance, percentile, wilcoxon_signed_rank, Outcome, RankSummary,
    Resampling, SignificanceMatrix, Wilcoxon, MIN_PAIRED_CASES,
};

/// Foreground classes scored in every report.
pub const FOREGROUND: std::ops::RangeInclusive<u8> = 1..=6;

fn check_aligned(a: &SegmentationMask, b: &SegmentationMask) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::Shape(format!("mask dims {:?} vs {:?}", a.dims, b.dims)));
    }
    Ok(())
}

/// Dice overlap of one class. Both sets empty scores 1.
pub fn dice(pred: &SegmentationMask, gt: &SegmentationMask, class: u8) -> Result<f64> {
    check_aligned(pred, gt)?;
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.labels.iter().zip(&gt.labels) {
        let (a, b) = (a == class, b == class);
        p += a as usize;
        g += b as usize;
        inter += (a && b) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// Foreground voxels with a background 6-neighbour or on the volume edge.
pub fn boundary(fg: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let [d, h, w] = dims;
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    let mut out = vec![false; fg.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = idx(z, y, x);
                if !fg[i] {
                    continue;
                }
                out[i] = z == 0
                    || y == 0
                    || x == 0
                    || z + 1 == d
                    || y + 1 == h
                    || x + 1 == w
                    || !fg[idx(z - 1, y, x)]
                    || !fg[idx(z + 1, y, x)]
                    || !fg[idx(z, y - 1, x)]
                    || !fg[idx(z, y + 1, x)]
                    || !fg[idx(z, y, x - 1)]
                    || !fg[idx(z, y, x + 1)];
            }
        }
    }
    out
}

/// 1-D lower envelope of parabolas `f[q] + (s (p - q))^2`.
fn edt_1d(f: &[f64], s2: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let qf = q as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let pf = p as f64;
                    let sx = ((f[q] + s2 * qf * qf) - (f[p] + s2 * pf * pf)) / (2.0 * s2 * (qf - pf));
                    if sx <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(sx);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        let pf = p as f64;
        while k + 1 < v.len() && z[k + 1] < pf {
            k += 1;
        }
        let q = v[k] as f64;
        *o = f[v[k]] + s2 * (pf - q) * (pf - q);
    }
}

/// Squared Euclidean distance (mm²) from every voxel to the nearest site.
pub fn squared_edt(sites: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [d, h, w] = dims;
    let mut g: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let strides = [h * w, w, 1];
    for axis in 0..3 {
        let len = dims[axis];
        let s2 = spacing[axis] * spacing[axis];
        let mut line = vec![0.0; len];
        let mut out = vec![0.0; len];
        for start in 0..d * h * w {
            // visit each line once, from its first element
            let coord = (start / strides[axis]) % len;
            if coord != 0 {
                continue;
            }
            for (i, l) in line.iter_mut().enumerate() {
                *l = g[start + i * strides[axis]];
            }
            edt_1d(&line, s2, &mut out);
            for (i, o) in out.iter().enumerate() {
                g[start + i * strides[axis]] = *o;
            }
        }
    }
    g
}

fn directed(from: &[bool], to_edt: &[f64]) -> Vec<f64> {
    from.iter().zip(to_edt).filter(|(b, _)| **b).map(|(_, d)| d.sqrt()).collect()
}

/// Symmetric 95th-percentile surface distance in mm, taking the
/// upper percentile of each directed set. `None` when either set is
/// empty.
pub fn hd95(pred: &SegmentationMask, gt: &SegmentationMask, class: u8, spacing: [f32; 3]) -> Result<Option<f64>> {
    check_aligned(pred, gt)?;
    let fp: Vec<bool> = pred.labels.iter().map(|&l| l == class).collect();
    let fg: Vec<bool> = gt.labels.iter().map(|&l| l == class).collect();
    if !fp.contains(&true) || !fg.contains(&true) {
        return Ok(None);
    }
    let sp = spacing.map(f64::from);
    let (bp, bg) = (boundary(&fp, pred.dims), boundary(&fg, gt.dims));
    let mut pg = directed(&bp, &squared_edt(&bg, gt.dims, sp));
    let mut gp = directed(&bg, &squared_edt(&bp, pred.dims, sp));
    Ok(Some(upper_percentile(&mut pg, 95.0).max(upper_percentile(&mut gp, 95.0))))
}

/// Class volume in millilitres.
pub fn structure_volume(mask: &SegmentationMask, class: u8) -> f64 {
    let voxel_mm3: f64 = mask.spacing.iter().map(|&s| s as f64).product();
    mask.count(class) as f64 * voxel_mm3 / 1000.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub case_id: String,
    pub model_id: String,
    pub class: u8,
    pub dice: f64,
    /// `None` when either mask lacks the class.
    pub hd95: Option<f64>,
    pub gt_ml: f64,
    pub pred_ml: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Dice,
    Hd95,
}

impl Metric {
    pub fn higher_is_better(self) -> bool {
        self == Metric::Dice
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Dice => "dice",
            Metric::Hd95 => "hd95",
        }
    }

    pub fn of(self, row: &MetricRow) -> Option<f64> {
        match self {
            Metric::Dice => Some(row.dice),
            Metric::Hd95 => row.hd95,
        }
    }
}

pub const REPORT_HEADER: &str = "case_id,model_id,class,dice,hd95,gt_ml,pred_ml";
/// Written in the hd95 column for undefined distances.
pub const UNDEFINED: &str = "undefined";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
}

/// One row per foreground class for a prediction against its ground truth.
pub fn evaluate_case(case_id: &str, model_id: &str, pred: &SegmentationMask, gt: &SegmentationMask) -> Result<Vec<MetricRow>> {
    FOREGROUND
        .map(|c| {
            Ok(MetricRow {
                case_id: case_id.to_string(),
                model_id: model_id.to_string(),
                class: c,
                dice: dice(pred, gt, c)?,
                hd95: hd95(pred, gt, c, gt.spacing)?,
                gt_ml: structure_volume(gt, c),
                pred_ml: structure_volume(pred, c),
            })
        })
        .collect()
}

impl MetricsReport {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn extend(&mut self, rows: impl IntoIterator<Item = MetricRow>) {
        self.rows.extend(rows);
    }

    /// Rows sorted by (model, case, class), rejecting duplicates.
    pub fn normalized(&self) -> Result<MetricsReport> {
        let mut rows = self.rows.clone();
        rows.sort_by(|a, b| (&a.model_id, &a.case_id, a.class).cmp(&(&b.model_id, &b.case_id, b.class)));
        for w in rows.windows(2) {
            if (&w[0].model_id, &w[0].case_id, w[0].class) == (&w[1].model_id, &w[1].case_id, w[1].class) {
                return Err(Error::Data(format!("duplicate row {}/{}/{}", w[0].model_id, w[0].case_id, w[0].class)));
            }
        }
        Ok(MetricsReport { rows })
    }

    pub fn model_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.rows.iter().map(|r| r.model_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Mean of a metric over rows passing `keep`, skipping undefined values.
    pub fn mean(&self, metric: Metric, keep: impl Fn(&MetricRow) -> bool) -> Option<f64> {
        let vals: Vec<f64> = self.rows.iter().filter(|r| keep(r)).filter_map(|r| metric.of(r)).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Rows whose hd95 is undefined.
    pub fn undefined_count(&self, keep: impl Fn(&MetricRow) -> bool) -> usize {
        self.rows.iter().filter(|r| keep(r) && r.hd95.is_none()).count()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.rows {
            let hd = r.hd95.map_or(UNDEFINED.to_string(), |h| format!("{h}"));
            out.push_str(&format!("{},{},{},{},{},{},{}\n", r.case_id, r.model_id, r.class, r.dice, hd, r.gt_ml, r.pred_ml));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<MetricsReport> {
        let path = path.as_ref();
        let mut rd = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let header: Vec<String> = rd.headers().map_err(|e| Error::Format(e.to_string()))?.iter().map(str::to_string).collect();
        if header.join(",") != REPORT_HEADER {
            return Err(Error::Format(format!("{}: unexpected header {}", path.display(), header.join(","))));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("{}: {s}: {e}", path.display())));
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
            rows.push(MetricRow {
                case_id: rec[0].to_string(),
                model_id: rec[1].to_string(),
                class: rec[2].parse().map_err(|e| Error::Format(format!("class {}: {e}", &rec[2])))?,
                dice: num(&rec[3])?,
                hd95: if &rec[4] == UNDEFINED { None } else { Some(num(&rec[4])?) },
                gt_ml: num(&rec[5])?,
                pred_ml: num(&rec[6])?,
            });
        }
        Ok(MetricsReport { rows })
    }
}

/// Compute-profile record, one per model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub model_id: String,
    pub params: u64,
    pub flops: u64,
    pub act_mem: u64,
    pub mean_dice: Option<f64>,
}

pub const PROFILE_HEADER: &str = "model_id,params,flops,act_mem,mean_dice";

impl ProfileRecord {
    pub fn csv_line(&self) -> String {
        let d = self.mean_dice.map_or(String::new(), |d| format!("{d}"));
        format!("{},{},{},{},{}", self.model_id, self.params, self.flops, self.act_mem, d)
    }
}
