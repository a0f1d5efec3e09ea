//! Generated-versus-reference comparisons: least-squares fits, per-stage
//! growth statistics and the report bundle (JSON summary, SVG plots, CSV
//! sidecars).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::Treatment;
use crate::error::{Error, Result};
use crate::fid::FidReport;
use crate::traits::TraitRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedObservation {
    pub reference_area_px: f64,
    pub generated_area_px: f64,
    pub stage: u32,
    pub treatment: Treatment,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionResult {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub n: usize,
}

/// Ordinary least squares `y = slope * x + intercept`. R² is zero when `y`
/// has no variance.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<RegressionResult> {
    let n = xs.len();
    if n != ys.len() {
        return Err(Error::Shape(format!("{n} x values, {} y values", ys.len())));
    }
    if n < 2 {
        return Err(Error::Validation(format!(
            "regression needs at least 2 points, got {n}"
        )));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("regression input is not finite".into()));
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let scale: f64 = xs.iter().map(|x| x * x).sum();
    if sxx <= 1e-12 * scale || sxx == 0.0 {
        return Err(Error::Validation(
            "regression is degenerate: all reference values are equal".into(),
        ));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 {
        0.0
    } else {
        let ss_res: f64 = xs
            .iter()
            .zip(ys)
            .map(|(x, y)| (y - slope * x - intercept).powi(2))
            .sum();
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    };
    Ok(RegressionResult {
        slope,
        intercept,
        r_squared,
        n,
    })
}

/// Regression of generated area (y) on reference area (x).
pub fn fit_regression(observations: &[PairedObservation]) -> Result<RegressionResult> {
    let xs: Vec<f64> = observations.iter().map(|o| o.reference_area_px).collect();
    let ys: Vec<f64> = observations.iter().map(|o| o.generated_area_px).collect();
    fit_line(&xs, &ys)
}

/// Annotation text in the form `y = 0.98x + 1.23, R² = 0.95`.
pub fn format_equation(r: &RegressionResult) -> String {
    let sign = if r.intercept < 0.0 { '-' } else { '+' };
    format!(
        "y = {:.2}x {} {:.2}, R² = {:.2}",
        r.slope,
        sign,
        r.intercept.abs(),
        r.r_squared
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub stage: u32,
    /// `None` when treatments are pooled.
    pub treatment: Option<Treatment>,
    pub mean_area_px: f64,
    /// Population standard deviation (divisor n).
    pub std_area_px: f64,
    pub n: usize,
}

/// Mean and population standard deviation of area per stage, optionally per
/// treatment, sorted by stage then treatment.
pub fn stage_statistics(records: &[TraitRecord], group_by_treatment: bool) -> Result<Vec<StageStats>> {
    if records.is_empty() {
        return Err(Error::Validation("no trait records to aggregate".into()));
    }
    let mut groups: BTreeMap<(u32, Option<Treatment>), Vec<f64>> = BTreeMap::new();
    for r in records {
        let key = (r.stage, group_by_treatment.then_some(r.treatment));
        groups.entry(key).or_default().push(r.area_px as f64);
    }
    Ok(groups
        .into_iter()
        .map(|((stage, treatment), areas)| {
            let n = areas.len() as f64;
            let mean = areas.iter().sum::<f64>() / n;
            let var = areas.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
            StageStats {
                stage,
                treatment,
                mean_area_px: mean,
                std_area_px: var.sqrt(),
                n: areas.len(),
            }
        })
        .collect())
}

/// Everything the report bundle is rendered from.
#[derive(Debug, Clone, Default)]
pub struct ReportInput {
    pub observations: Vec<PairedObservation>,
    pub reference_stats: Vec<StageStats>,
    pub generated_stats: Vec<StageStats>,
    pub fid: Option<FidReport>,
    /// FID between test references and the unchanged input images.
    pub wrong_stage_fid: Option<f64>,
    /// Training pairs per reference stage; stages listed with 0 are flagged.
    pub training_pairs_per_stage: BTreeMap<u32, usize>,
    pub center_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidSummary {
    #[serde(flatten)]
    pub report: FidReport,
    pub verdict: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub std_divisor: String,
    pub overall: Option<RegressionResult>,
    pub regressions: BTreeMap<String, RegressionResult>,
    pub annotations: BTreeMap<String, String>,
    /// Treatments without a usable regression, with the reason.
    pub skipped: BTreeMap<String, String>,
    pub reference_stats: Vec<StageStats>,
    pub generated_stats: Vec<StageStats>,
    pub stages_without_training_pairs: Vec<u32>,
    pub fid: Option<FidSummary>,
    pub wrong_stage_fid: Option<f64>,
    pub center_fraction: Option<f64>,
}

pub const SUMMARY_FILE: &str = "summary.json";
pub const GROWTH_CURVES: &str = "growth_curves";

fn treatment_color(t: Option<Treatment>) -> &'static str {
    match t {
        Some(Treatment::IrrigatedFertilized) => "#1b9e77",
        Some(Treatment::IrrigatedUnfertilized) => "#d95f02",
        Some(Treatment::DryFertilized) => "#7570b3",
        Some(Treatment::DryUnfertilized) => "#e7298a",
        Some(Treatment::Unspecified) => "#666666",
        None => "#000000",
    }
}

fn treatment_label(t: Option<Treatment>) -> String {
    t.map(|t| t.code().to_string()).unwrap_or_else(|| "all".into())
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `summary.json`, one scatter plot per treatment with at least two
/// usable observations, and the growth-curve plot, each SVG with a CSV of its
/// data. Output depends only on `input`.
pub fn render_report(dir: &Path, input: &ReportInput) -> Result<ReportSummary> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let present: BTreeSet<Treatment> = input.observations.iter().map(|o| o.treatment).collect();
    let treatments: BTreeSet<Treatment> =
        Treatment::DESIGNED.iter().copied().chain(present).collect();

    let mut regressions = BTreeMap::new();
    let mut annotations = BTreeMap::new();
    let mut skipped = BTreeMap::new();
    for t in treatments {
        let obs: Vec<PairedObservation> = input
            .observations
            .iter()
            .filter(|o| o.treatment == t)
            .copied()
            .collect();
        if obs.is_empty() {
            if t != Treatment::Unspecified {
                skipped.insert(t.code().to_string(), "no observations".to_string());
            }
            continue;
        }
        match fit_regression(&obs) {
            Ok(r) => {
                let text = format_equation(&r);
                write_file(&dir.join(format!("scatter_{}.svg", t.code())), &scatter_svg(t, &obs, &r, &text))?;
                write_file(&dir.join(format!("scatter_{}.csv", t.code())), &scatter_csv(&obs))?;
                regressions.insert(t.code().to_string(), r);
                annotations.insert(t.code().to_string(), text);
            }
            Err(e) => {
                skipped.insert(t.code().to_string(), e.to_string());
            }
        }
    }
    let overall = fit_regression(&input.observations).ok();

    write_file(
        &dir.join(format!("{GROWTH_CURVES}.svg")),
        &growth_svg(&input.reference_stats, &input.generated_stats),
    )?;
    write_file(
        &dir.join(format!("{GROWTH_CURVES}.csv")),
        &growth_csv(&input.reference_stats, &input.generated_stats),
    )?;

    let summary = ReportSummary {
        std_divisor: "n".into(),
        overall,
        regressions,
        annotations,
        skipped,
        reference_stats: input.reference_stats.clone(),
        generated_stats: input.generated_stats.clone(),
        stages_without_training_pairs: input
            .training_pairs_per_stage
            .iter()
            .filter(|(_, n)| **n == 0)
            .map(|(s, _)| *s)
            .collect(),
        fid: input.fid.clone().map(|report| FidSummary {
            verdict: report.verdict().to_string(),
            report,
        }),
        wrong_stage_fid: input.wrong_stage_fid,
        center_fraction: input.center_fraction,
    };
    let mut json = serde_json::to_string_pretty(&summary)?;
    json.push('\n');
    write_file(&dir.join(SUMMARY_FILE), &json)?;
    Ok(summary)
}

fn scatter_csv(obs: &[PairedObservation]) -> String {
    let mut s = String::from("stage,treatment,reference_area_px,generated_area_px\n");
    for o in obs {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            o.stage,
            o.treatment.code(),
            o.reference_area_px,
            o.generated_area_px
        );
    }
    s
}

fn growth_csv(reference: &[StageStats], generated: &[StageStats]) -> String {
    let mut s = String::from("source,stage,treatment,mean_area_px,std_area_px,n\n");
    for (source, stats) in [("reference", reference), ("generated", generated)] {
        for st in stats {
            let _ = writeln!(
                s,
                "{source},{},{},{},{},{}",
                st.stage,
                treatment_label(st.treatment),
                st.mean_area_px,
                st.std_area_px,
                st.n
            );
        }
    }
    s
}

const W: f64 = 480.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;

fn svg_open(width: f64, height: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

/// Linear map from data range to pixel range.
#[derive(Clone, Copy)]
struct Axis {
    lo: f64,
    hi: f64,
    p0: f64,
    p1: f64,
}

impl Axis {
    fn map(&self, v: f64) -> f64 {
        let span = if self.hi > self.lo { self.hi - self.lo } else { 1.0 };
        self.p0 + (v - self.lo) / span * (self.p1 - self.p0)
    }
}

fn axes(s: &mut String, x: Axis, y: Axis, xlabel: &str, ylabel: &str) {
    let _ = writeln!(
        s,
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>",
        x.p0, y.p0, x.p1, y.p0
    );
    let _ = writeln!(
        s,
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>",
        x.p0, y.p0, x.p0, y.p1
    );
    for i in 0..=4 {
        let fx = x.lo + (x.hi - x.lo) * i as f64 / 4.0;
        let fy = y.lo + (y.hi - y.lo) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{:.0}</text>",
            x.map(fx),
            y.p0 + 16.0,
            fx
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{:.0}</text>",
            x.p0 - 4.0,
            y.map(fy) + 4.0,
            fy
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{xlabel}</text>",
        (x.p0 + x.p1) / 2.0,
        y.p0 + 34.0
    );
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.2})\">{ylabel}</text>",
        (y.p0 + y.p1) / 2.0,
        (y.p0 + y.p1) / 2.0
    );
}

fn scatter_svg(t: Treatment, obs: &[PairedObservation], r: &RegressionResult, text: &str) -> String {
    let max = obs
        .iter()
        .flat_map(|o| [o.reference_area_px, o.generated_area_px])
        .fold(1.0f64, f64::max)
        * 1.05;
    let x = Axis { lo: 0.0, hi: max, p0: MARGIN, p1: W - 16.0 };
    let y = Axis { lo: 0.0, hi: max, p0: H - MARGIN, p1: 24.0 };
    let mut s = svg_open(W, H);
    axes(&mut s, x, y, "reference area [px]", "generated area [px]");
    let _ = writeln!(
        s,
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"grey\" stroke-dasharray=\"4 3\"/>",
        x.map(0.0),
        y.map(0.0),
        x.map(max),
        y.map(max)
    );
    let _ = writeln!(
        s,
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"{}\"/>",
        x.map(0.0),
        y.map(r.intercept),
        x.map(max),
        y.map(r.intercept + r.slope * max),
        treatment_color(Some(t))
    );
    for o in obs {
        let _ = writeln!(
            s,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{}\" fill-opacity=\"0.7\"/>",
            x.map(o.reference_area_px),
            y.map(o.generated_area_px),
            treatment_color(Some(t))
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.2}\" y=\"40\">{} ({})</text>",
        MARGIN + 8.0,
        text,
        t.code()
    );
    s.push_str("</svg>\n");
    s
}

fn growth_svg(reference: &[StageStats], generated: &[StageStats]) -> String {
    let all = reference.iter().chain(generated);
    let stage_lo = all.clone().map(|s| s.stage).min().unwrap_or(0) as f64;
    let stage_hi = all.clone().map(|s| s.stage).max().unwrap_or(1) as f64;
    let top = all
        .map(|s| s.mean_area_px + s.std_area_px)
        .fold(1.0f64, f64::max)
        * 1.05;
    let panel = W;
    let mut s = svg_open(2.0 * panel, H);
    for (i, (title, stats)) in [("reference", reference), ("generated", generated)]
        .into_iter()
        .enumerate()
    {
        let off = i as f64 * panel;
        let x = Axis { lo: stage_lo, hi: stage_hi.max(stage_lo + 1.0), p0: off + MARGIN, p1: off + panel - 16.0 };
        let y = Axis { lo: 0.0, hi: top, p0: H - MARGIN, p1: 24.0 };
        axes(&mut s, x, y, "stage", "mean area [px]");
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"16\" text-anchor=\"middle\">{title}</text>",
            off + panel / 2.0
        );
        let mut lines: BTreeMap<Option<Treatment>, Vec<&StageStats>> = BTreeMap::new();
        for st in stats {
            lines.entry(st.treatment).or_default().push(st);
        }
        for (k, (t, pts)) in lines.iter().enumerate() {
            let color = treatment_color(*t);
            let path: Vec<String> = pts
                .iter()
                .map(|p| format!("{:.2},{:.2}", x.map(p.stage as f64), y.map(p.mean_area_px)))
                .collect();
            let _ = writeln!(
                s,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\"/>",
                path.join(" ")
            );
            for p in pts {
                let cx = x.map(p.stage as f64);
                let _ = writeln!(
                    s,
                    "<line x1=\"{cx:.2}\" y1=\"{:.2}\" x2=\"{cx:.2}\" y2=\"{:.2}\" stroke=\"{color}\"/>",
                    y.map((p.mean_area_px - p.std_area_px).max(0.0)),
                    y.map(p.mean_area_px + p.std_area_px)
                );
                let _ = writeln!(
                    s,
                    "<circle cx=\"{cx:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"{color}\"/>",
                    y.map(p.mean_area_px)
                );
            }
            let _ = writeln!(
                s,
                "<text x=\"{:.2}\" y=\"{:.2}\" fill=\"{color}\">{}</text>",
                off + MARGIN + 8.0,
                40.0 + 14.0 * k as f64,
                treatment_label(*t)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}
