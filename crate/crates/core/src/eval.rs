//! Percentage of detected joints (PDJ), threshold curves and plots.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::binio;
use crate::dataio::{joint_name, PoseConfig, Sample, DOWN_SPINE, UPPER_SPINE};
use crate::error::{Error, FormatError, Result};
use crate::pipeline::Model;

/// Joint pair whose 2D distance defines the torso diameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Torso {
    pub a: usize,
    pub b: usize,
}

impl Default for Torso {
    fn default() -> Self {
        Torso { a: UPPER_SPINE, b: DOWN_SPINE }
    }
}

impl Torso {
    pub fn diameter(&self, truth: &PoseConfig) -> Result<f64> {
        if self.a >= truth.k() || self.b >= truth.k() {
            return Err(Error::contract(format!(
                "torso joints {} and {} not in a {}-joint pose",
                self.a,
                self.b,
                truth.k()
            )));
        }
        let d = truth.joints[self.a].dist2d(&truth.joints[self.b]);
        if !(d > 0.0) {
            return Err(Error::contract("degenerate torso: endpoints coincide"));
        }
        Ok(d)
    }
}

pub fn torso_diameter(truth: &PoseConfig) -> Result<f64> {
    Torso::default().diameter(truth)
}

/// The 21 thresholds 0.00, 0.01, ..., 0.20.
pub fn default_thresholds() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdjReport {
    pub thresholds: Vec<f64>,
    /// `correct[t][k]`: samples whose joint `k` lies within threshold `t`.
    pub correct: Vec<Vec<usize>>,
    pub samples: usize,
}

impl PdjReport {
    pub fn k(&self) -> usize {
        self.correct.first().map_or(0, Vec::len)
    }

    pub fn part_accuracy(&self, t: usize, k: usize) -> f64 {
        self.correct[t][k] as f64 / self.samples as f64
    }

    pub fn overall(&self, t: usize) -> f64 {
        let total: usize = self.correct[t].iter().sum();
        total as f64 / (self.samples * self.k()) as f64
    }

    pub fn overall_curve(&self) -> Vec<f64> {
        (0..self.thresholds.len()).map(|t| self.overall(t)).collect()
    }

    /// Overall accuracy at the threshold closest to `threshold`.
    pub fn at(&self, threshold: f64) -> Option<f64> {
        let t = self
            .thresholds
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - threshold).abs().total_cmp(&(b.1 - threshold).abs()))?
            .0;
        Some(self.overall(t))
    }

    /// CSV `threshold,overall,part_0..part_{K-1}`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,overall");
        for k in 0..self.k() {
            let _ = write!(s, ",part_{k}");
        }
        s.push('\n');
        for (t, th) in self.thresholds.iter().enumerate() {
            let _ = write!(s, "{th},{}", self.overall(t));
            for k in 0..self.k() {
                let _ = write!(s, ",{}", self.part_accuracy(t, k));
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        binio::write_file(path, self.to_csv().as_bytes())
    }
}

/// Accuracy table parsed back from a PDJ CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct PdjTable {
    pub thresholds: Vec<f64>,
    pub overall: Vec<f64>,
    pub parts: Vec<Vec<f64>>,
}

impl PdjTable {
    pub fn from_report(r: &PdjReport) -> Self {
        PdjTable {
            thresholds: r.thresholds.clone(),
            overall: r.overall_curve(),
            parts: (0..r.thresholds.len())
                .map(|t| (0..r.k()).map(|k| r.part_accuracy(t, k)).collect())
                .collect(),
        }
    }

    pub fn parse_csv(text: &str) -> Result<Self, FormatError> {
        let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let headers = rdr.headers().map_err(|e| FormatError::invalid("header", e.to_string()))?.clone();
        if headers.len() < 2 || &headers[0] != "threshold" || &headers[1] != "overall" {
            return Err(FormatError::invalid("header", "expected `threshold,overall,...`"));
        }
        let mut out = PdjTable {
            thresholds: Vec::new(),
            overall: Vec::new(),
            parts: Vec::new(),
        };
        for rec in rdr.records() {
            let rec = rec.map_err(|e| FormatError::invalid("row", e.to_string()))?;
            let vals = rec
                .iter()
                .map(|v| v.parse::<f64>().map_err(|_| FormatError::invalid("value", v.to_string())))
                .collect::<Result<Vec<_>, _>>()?;
            out.thresholds.push(vals[0]);
            out.overall.push(vals[1]);
            out.parts.push(vals[2..].to_vec());
        }
        Ok(out)
    }
}

fn check_aligned(preds: &[PoseConfig], truths: &[PoseConfig]) -> Result<()> {
    if preds.len() != truths.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} ground-truth poses",
            preds.len(),
            truths.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::contract("no samples to evaluate"));
    }
    let k = truths[0].k();
    if preds.iter().chain(truths).any(|p| p.k() != k) {
        return Err(Error::contract("poses disagree on joint count"));
    }
    Ok(())
}

/// PDJ at every threshold. A joint is correct when its 2D distance is at
/// most `threshold * torso diameter`.
pub fn pdj_curve_with(preds: &[PoseConfig], truths: &[PoseConfig], thresholds: &[f64], torso: &Torso) -> Result<PdjReport> {
    check_aligned(preds, truths)?;
    let k = truths[0].k();
    let mut correct = vec![vec![0usize; k]; thresholds.len()];
    for (p, g) in preds.iter().zip(truths) {
        let d = torso.diameter(g)?;
        for j in 0..k {
            let dist = p.joints[j].dist2d(&g.joints[j]);
            for (t, th) in thresholds.iter().enumerate() {
                if dist <= th * d {
                    correct[t][j] += 1;
                }
            }
        }
    }
    Ok(PdjReport {
        thresholds: thresholds.to_vec(),
        correct,
        samples: preds.len(),
    })
}

pub fn pdj_curve(preds: &[PoseConfig], truths: &[PoseConfig]) -> Result<PdjReport> {
    pdj_curve_with(preds, truths, &default_thresholds(), &Torso::default())
}

pub fn pdj(preds: &[PoseConfig], truths: &[PoseConfig], threshold: f64) -> Result<PdjReport> {
    pdj_curve_with(preds, truths, &[threshold], &Torso::default())
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Line plot of overall accuracy against threshold, one line per series.
pub fn curves_svg(series: &[(&str, &PdjTable)]) -> String {
    let (w, h, m) = (480.0, 360.0, 50.0);
    let x_max = series
        .iter()
        .flat_map(|(_, t)| t.thresholds.iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let px = |t: f64| m + (w - 2.0 * m) * t / x_max;
    let py = |a: f64| h - m - (h - 2.0 * m) * a;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{m} {m} V{} H{}" fill="none" stroke="black"/>"#,
        h - m,
        w - m
    );
    for i in 0..=4 {
        let a = i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{a:.2}</text>"#, m - 6.0, py(a) + 4.0);
        let t = x_max * a;
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">{t:.2}</text>"#, px(t), h - m + 16.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">threshold (fraction of torso)</text>"#, w / 2.0, h - 10.0);
    let _ = writeln!(s, r#"<text x="14" y="{}" font-size="12" transform="rotate(-90 14 {})" text-anchor="middle">PDJ</text>"#, h / 2.0, h / 2.0);
    for (i, (name, t)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = t
            .thresholds
            .iter()
            .zip(&t.overall)
            .map(|(&x, &a)| format!("{:.2},{:.2}", px(x), py(a)))
            .collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" fill="{color}">{name}</text>"#,
            m + 10.0,
            m + 16.0 * (i as f64 + 1.0)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `pdj.csv` and `pdj.svg` into `dir`.
pub fn write_pdj(report: &PdjReport, dir: &Path) -> Result<()> {
    report.write_csv(&dir.join("pdj.csv"))?;
    let table = PdjTable::from_report(report);
    binio::write_file(&dir.join("pdj.svg"), curves_svg(&[("PDJ", &table)]).as_bytes())
}

/// Per-part accuracy summary lines, mainly for logs.
pub fn part_summary(report: &PdjReport, t: usize) -> String {
    let k = report.k();
    (0..k)
        .map(|j| format!("{}={:.3}", joint_name(j, k), report.part_accuracy(t, j)))
        .collect::<Vec<_>>()
        .join(" ")
}

/// PDJ curves of the heat-map argmax, the matcher reranking and the full
/// model on the same images.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentReport {
    pub fcn: PdjReport,
    pub matcher: PdjReport,
    pub full: PdjReport,
}

impl ComponentReport {
    pub fn names() -> [&'static str; 3] {
        ["fcn", "fcn_matchnet", "full"]
    }

    pub fn reports(&self) -> [&PdjReport; 3] {
        [&self.fcn, &self.matcher, &self.full]
    }

    /// CSV `threshold,fcn,fcn_matchnet,full` of overall accuracies.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,");
        s.push_str(&Self::names().join(","));
        s.push('\n');
        for (t, th) in self.fcn.thresholds.iter().enumerate() {
            let _ = write!(s, "{th}");
            for r in self.reports() {
                let _ = write!(s, ",{}", r.overall(t));
            }
            s.push('\n');
        }
        s
    }

    pub fn to_svg(&self) -> String {
        let tables: Vec<PdjTable> = self.reports().iter().map(|r| PdjTable::from_report(r)).collect();
        let series: Vec<(&str, &PdjTable)> = Self::names().iter().copied().zip(tables.iter()).collect();
        curves_svg(&series)
    }

    /// Writes `components.csv` and `components.svg` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        binio::write_file(&dir.join("components.csv"), self.to_csv().as_bytes())?;
        binio::write_file(&dir.join("components.svg"), self.to_svg().as_bytes())
    }
}

pub fn component_analysis(samples: &[Sample], model: &Model) -> Result<ComponentReport> {
    component_analysis_with(samples, model, &default_thresholds())
}

pub fn component_analysis_with(samples: &[Sample], model: &Model, thresholds: &[f64]) -> Result<ComponentReport> {
    let variants = samples
        .par_iter()
        .map(|s| model.variants(&model.evidence(&s.image)?))
        .collect::<Result<Vec<_>>>()?;
    let truths: Vec<PoseConfig> = samples.iter().map(|s| s.pose.clone()).collect();
    let curve = |pick: fn(&crate::pipeline::Variants) -> &PoseConfig| {
        let preds: Vec<PoseConfig> = variants.iter().map(|v| pick(v).clone()).collect();
        pdj_curve_with(&preds, &truths, thresholds, &Torso::default())
    };
    Ok(ComponentReport {
        fcn: curve(|v| &v.fcn)?,
        matcher: curve(|v| &v.matcher)?,
        full: curve(|v| &v.full)?,
    })
}
