//! Plot data (CSV) and simple SVG renderings. The CSVs are the contract.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::stats::{bootstrap_rank, pairwise_significance, percentile, Resampling};
use super::{Metric, MetricsReport, ProfileRecord, FOREGROUND, PROFILE_HEADER};
use crate::error::{Error, Result};

/// File name and header of every emitted CSV.
pub const PLOT_SCHEMAS: &[(&str, &str)] = &[
    ("ranks_dice.csv", RANK_HEADER),
    ("ranks_hd95.csv", RANK_HEADER),
    ("significance_dice.csv", SIG_HEADER),
    ("significance_hd95.csv", SIG_HEADER),
    ("class_box.csv", "model_id,class,n,min,q1,median,q3,max"),
    ("volume_scatter.csv", "case_id,model_id,class,gt_ml,pred_ml"),
    ("volume_identity.csv", "min,max"),
    ("compute_bubble.csv", PROFILE_HEADER),
];

const RANK_HEADER: &str = "model_id,median,lo,hi,mean";
const SIG_HEADER: &str = "model_a,model_b,outcome,p_value,n_cases,insufficient";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlotOptions {
    pub n_boot: usize,
    pub seed: u64,
    pub alpha: f64,
}

impl Default for PlotOptions {
    fn default() -> Self {
        PlotOptions { n_boot: 1000, seed: 0, alpha: 0.05 }
    }
}

fn write(path: &Path, body: &str) -> Result<PathBuf> {
    fs::write(path, body).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

fn csv_body(header: &str, lines: &[String]) -> String {
    let mut s = format!("{header}\n");
    for l in lines {
        s.push_str(l);
        s.push('\n');
    }
    s
}

struct Svg {
    body: String,
    w: f64,
    h: f64,
}

impl Svg {
    fn new(w: f64, h: f64, title: &str) -> Svg {
        let mut s = Svg { body: String::new(), w, h };
        s.text(w / 2.0, 18.0, title, "middle", 14.0);
        s
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, style: &str) {
        let _ = writeln!(self.body, r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" style="{style}"/>"#);
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        let _ = writeln!(self.body, r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{fill}" stroke="black" stroke-width="0.5"/>"#);
    }

    fn circle(&mut self, x: f64, y: f64, r: f64, fill: &str) {
        let _ = writeln!(self.body, r#"<circle cx="{x:.2}" cy="{y:.2}" r="{r:.2}" fill="{fill}" fill-opacity="0.7"/>"#);
    }

    fn text(&mut self, x: f64, y: f64, s: &str, anchor: &str, size: f64) {
        let s = s.replace('&', "&amp;").replace('<', "&lt;");
        let _ = writeln!(self.body, r#"<text x="{x:.2}" y="{y:.2}" text-anchor="{anchor}" font-size="{size}" font-family="sans-serif">{s}</text>"#);
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.w, self.h, self.w, self.h, self.body
        )
    }
}

/// Linear map from `[lo, hi]` into `[a, b]`, safe for a degenerate range.
fn scale(v: f64, lo: f64, hi: f64, a: f64, b: f64) -> f64 {
    if hi > lo {
        a + (v - lo) / (hi - lo) * (b - a)
    } else {
        (a + b) / 2.0
    }
}

const PALETTE: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"];

/// Writes every plot CSV and its SVG view into `out_dir`.
pub fn emit_plots(report: &MetricsReport, profile: &[ProfileRecord], opts: &PlotOptions, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    if report.is_empty() {
        return Err(Error::Config("cannot plot an empty report".into()));
    }
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let models = report.model_ids();
    let mut out = Vec::new();

    for metric in [Metric::Dice, Metric::Hd95] {
        let ranks = if models.len() >= 2 {
            bootstrap_rank(report, metric, opts.n_boot, opts.seed, Resampling::Random).ok()
        } else {
            None
        };
        let lines: Vec<String> = ranks
            .iter()
            .flatten()
            .map(|r| format!("{},{},{},{},{}", r.model_id, r.median, r.lo, r.hi, r.mean))
            .collect();
        out.push(write(&dir.join(format!("ranks_{}.csv", metric.name())), &csv_body(RANK_HEADER, &lines))?);
        let k = models.len().max(1) as f64;
        let mut svg = Svg::new(480.0, 80.0 + 40.0 * k, &format!("Bootstrap rank ({})", metric.name()));
        for (i, r) in ranks.iter().flatten().enumerate() {
            let y = 60.0 + 40.0 * i as f64;
            let x = |v: f64| scale(v, 1.0, k, 160.0, 440.0);
            svg.text(150.0, y + 4.0, &r.model_id, "end", 11.0);
            svg.line(x(r.lo), y, x(r.hi), y, "stroke:black;stroke-width:2");
            svg.circle(x(r.median), y, 7.0, PALETTE[i % PALETTE.len()]);
        }
        out.push(write(&dir.join(format!("blob_{}.svg", metric.name())), &svg.finish())?);

        let sig = if models.len() >= 2 { pairwise_significance(report, metric, opts.alpha).ok() } else { None };
        let mut lines = Vec::new();
        let mut svg = Svg::new(120.0 + 50.0 * k, 120.0 + 50.0 * k, &format!("Pairwise significance ({})", metric.name()));
        if let Some(s) = &sig {
            for (i, a) in s.models.iter().enumerate() {
                svg.text(105.0, 104.0 + 50.0 * i as f64, a, "end", 10.0);
                svg.text(125.0 + 50.0 * i as f64, 70.0, a, "middle", 10.0);
                for (j, b) in s.models.iter().enumerate() {
                    let o = s.outcome[i][j];
                    lines.push(format!("{a},{b},{},{},{},{}", o.label(), s.p_value[i][j], s.n_cases, s.insufficient));
                    let fill = match o {
                        super::Outcome::Better => "#2ca02c",
                        super::Outcome::Worse => "#d62728",
                        super::Outcome::NotSignificant => "#dddddd",
                    };
                    svg.rect(100.0 + 50.0 * j as f64, 80.0 + 50.0 * i as f64, 50.0, 50.0, fill);
                }
            }
        }
        out.push(write(&dir.join(format!("significance_{}.csv", metric.name())), &csv_body(SIG_HEADER, &lines))?);
        out.push(write(&dir.join(format!("matrix_{}.svg", metric.name())), &svg.finish())?);
    }

    // per-class dice boxes
    let mut lines = Vec::new();
    let classes: Vec<u8> = FOREGROUND.collect();
    let mut svg = Svg::new(120.0 + 60.0 * classes.len() as f64 * models.len() as f64, 320.0, "Dice per class");
    for (mi, m) in models.iter().enumerate() {
        for (ci, &c) in classes.iter().enumerate() {
            let mut v: Vec<f64> = report.rows.iter().filter(|r| &r.model_id == m && r.class == c).map(|r| r.dice).collect();
            if v.is_empty() {
                continue;
            }
            let q: Vec<f64> = [0.0, 25.0, 50.0, 75.0, 100.0].iter().map(|&p| percentile(&mut v, p)).collect();
            lines.push(format!("{m},{c},{},{},{},{},{},{}", v.len(), q[0], q[1], q[2], q[3], q[4]));
            let x = 80.0 + 60.0 * (ci * models.len() + mi) as f64;
            let y = |d: f64| scale(d, 0.0, 1.0, 290.0, 40.0);
            svg.line(x + 20.0, y(q[0]), x + 20.0, y(q[4]), "stroke:black");
            svg.rect(x + 5.0, y(q[3]), 30.0, (y(q[1]) - y(q[3])).max(0.5), PALETTE[mi % PALETTE.len()]);
            svg.line(x + 5.0, y(q[2]), x + 35.0, y(q[2]), "stroke:black;stroke-width:2");
            svg.text(x + 20.0, 308.0, &format!("{m}:{c}"), "middle", 8.0);
        }
    }
    out.push(write(&dir.join("class_box.csv"), &csv_body(PLOT_SCHEMAS[4].1, &lines))?);
    out.push(write(&dir.join("class_box.svg"), &svg.finish())?);

    // volume agreement
    let lines: Vec<String> =
        report.rows.iter().map(|r| format!("{},{},{},{},{}", r.case_id, r.model_id, r.class, r.gt_ml, r.pred_ml)).collect();
    out.push(write(&dir.join("volume_scatter.csv"), &csv_body(PLOT_SCHEMAS[5].1, &lines))?);
    let pooled = report.rows.iter().flat_map(|r| [r.gt_ml, r.pred_ml]);
    let (lo, hi) = pooled.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    out.push(write(&dir.join("volume_identity.csv"), &csv_body(PLOT_SCHEMAS[6].1, &[format!("{lo},{hi}")]))?);
    let mut svg = Svg::new(400.0, 400.0, "Predicted vs ground-truth volume (mL)");
    let px = |v: f64| scale(v, lo, hi, 50.0, 370.0);
    let py = |v: f64| scale(v, lo, hi, 370.0, 50.0);
    svg.line(px(lo), py(lo), px(hi), py(hi), "stroke:black;stroke-dasharray:5,4");
    for r in &report.rows {
        let mi = models.iter().position(|m| m == &r.model_id).unwrap_or(0);
        svg.circle(px(r.gt_ml), py(r.pred_ml), 3.0, PALETTE[mi % PALETTE.len()]);
    }
    out.push(write(&dir.join("volume_scatter.svg"), &svg.finish())?);

    // compute bubbles
    let lines: Vec<String> = profile.iter().map(ProfileRecord::csv_line).collect();
    out.push(write(&dir.join("compute_bubble.csv"), &csv_body(PROFILE_HEADER, &lines))?);
    let mut svg = Svg::new(420.0, 320.0, "Dice vs FLOPs (bubble: params)");
    let fl: Vec<f64> = profile.iter().map(|p| p.flops as f64).collect();
    let (flo, fhi) = fl.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let pmax = profile.iter().map(|p| p.params).max().unwrap_or(1).max(1) as f64;
    for (i, p) in profile.iter().enumerate() {
        let d = p.mean_dice.unwrap_or(0.0);
        let (x, y) = (scale(p.flops as f64, flo, fhi, 60.0, 380.0), scale(d, 0.0, 1.0, 290.0, 40.0));
        svg.circle(x, y, 6.0 + 24.0 * (p.params as f64 / pmax).sqrt(), PALETTE[i % PALETTE.len()]);
        svg.text(x, y - 10.0, &p.model_id, "middle", 10.0);
    }
    out.push(write(&dir.join("compute_bubble.svg"), &svg.finish())?);
    Ok(out)
}
