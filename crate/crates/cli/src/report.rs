//! Figures from the evaluation CSVs. SVG is written by hand with fixed
//! number formatting so identical inputs give identical bytes.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};

use crate::pipeline::{csv_records, read_csv_section};

const W: f64 = 640.0;
const H: f64 = 480.0;
const M: f64 = 60.0;
const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn n(x: f64) -> String {
    let s = format!("{x:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

pub struct Svg {
    body: String,
}

impl Svg {
    pub fn new(title: &str, source: &str) -> Svg {
        let mut body = String::new();
        let _ = writeln!(body, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}" font-family="sans-serif" font-size="11">"#, W, H, W, H);
        let _ = writeln!(body, "<title>{}</title>", esc(title));
        let _ = writeln!(body, "<desc>source: {}</desc>", esc(source));
        let _ = writeln!(body, r##"<rect x="0" y="0" width="{W}" height="{H}" fill="#ffffff"/>"##);
        let _ = writeln!(body, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, n(W / 2.0), esc(title));
        let _ = writeln!(body, r##"<text x="{}" y="{}" text-anchor="end" font-size="9" fill="#666666">data: {}</text>"##, n(W - 8.0), n(H - 6.0), esc(source));
        Svg { body }
    }

    pub fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, dash: bool) {
        let d = if dash { r#" stroke-dasharray="4 3""# } else { "" };
        let _ = writeln!(self.body, r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="{stroke}"{d}/>"#, n(x1), n(y1), n(x2), n(y2));
    }

    pub fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str, opacity: f64) {
        let _ = writeln!(self.body, r#"<rect x="{}" y="{}" width="{}" height="{}" fill="{fill}" fill-opacity="{}" stroke="{fill}"/>"#, n(x), n(y), n(w.max(0.0)), n(h.max(0.0)), n(opacity));
    }

    pub fn circle(&mut self, x: f64, y: f64, r: f64, fill: &str, label: &str) {
        let _ = writeln!(self.body, r#"<circle cx="{}" cy="{}" r="{}" fill="{fill}" fill-opacity="0.8"><title>{}</title></circle>"#, n(x), n(y), n(r), esc(label));
    }

    pub fn text(&mut self, x: f64, y: f64, anchor: &str, s: &str) {
        let _ = writeln!(self.body, r#"<text x="{}" y="{}" text-anchor="{anchor}">{}</text>"#, n(x), n(y), esc(s));
    }

    pub fn vtext(&mut self, x: f64, y: f64, s: &str) {
        let _ = writeln!(self.body, r#"<text x="{}" y="{}" text-anchor="middle" transform="rotate(-90 {} {})">{}</text>"#, n(x), n(y), n(x), n(y), esc(s));
    }

    pub fn polygon(&mut self, pts: &[(f64, f64)], stroke: &str, fill: Option<&str>) {
        let p: Vec<String> = pts.iter().map(|(x, y)| format!("{},{}", n(*x), n(*y))).collect();
        let f = fill.map_or(r#"fill="none""#.to_string(), |c| format!(r#"fill="{c}" fill-opacity="0.15""#));
        let _ = writeln!(self.body, r#"<polygon points="{}" stroke="{stroke}" stroke-width="2" {f}/>"#, p.join(" "));
    }

    pub fn legend(&mut self, entries: &[(&str, &str)]) {
        for (i, (label, color)) in entries.iter().enumerate() {
            let y = 44.0 + 16.0 * i as f64;
            self.rect(W - 150.0, y - 9.0, 10.0, 10.0, color, 0.8);
            self.text(W - 135.0, y, "start", label);
        }
    }

    pub fn finish(mut self) -> String {
        self.body.push_str("</svg>\n");
        self.body
    }
}

/// Linear map from `[lo, hi]` onto `[a, b]`.
#[derive(Clone, Copy)]
struct Scale {
    lo: f64,
    hi: f64,
    a: f64,
    b: f64,
}

impl Scale {
    fn at(&self, v: f64) -> f64 {
        let span = if self.hi > self.lo { self.hi - self.lo } else { 1.0 };
        self.a + (v - self.lo) / span * (self.b - self.a)
    }

    fn ticks(&self, k: usize) -> Vec<f64> {
        (0..=k).map(|i| self.lo + (self.hi - self.lo) * i as f64 / k as f64).collect()
    }
}

fn axes(svg: &mut Svg, x: Scale, y: Scale, xlabel: &str, ylabel: &str, fmt: fn(f64) -> String) {
    svg.line(M, H - M, W - M, H - M, "#000000", false);
    svg.line(M, M, M, H - M, "#000000", false);
    for t in x.ticks(5) {
        svg.line(x.at(t), H - M, x.at(t), H - M + 4.0, "#000000", false);
        svg.text(x.at(t), H - M + 16.0, "middle", &fmt(t));
    }
    for t in y.ticks(5) {
        svg.line(M - 4.0, y.at(t), M, y.at(t), "#000000", false);
        svg.text(M - 6.0, y.at(t) + 4.0, "end", &fmt(t));
    }
    svg.text(W / 2.0, H - 18.0, "middle", xlabel);
    svg.vtext(16.0, H / 2.0, ylabel);
}

fn f2(v: f64) -> String {
    format!("{v:.2}")
}

fn num(r: &HashMap<String, String>, k: &str) -> Option<f64> {
    r.get(k).and_then(|v| v.parse::<f64>().ok()).filter(|v| v.is_finite())
}

fn load(work: &Path, key: &str) -> Result<Vec<Vec<String>>> {
    let p = work.join(key);
    if !p.is_file() {
        bail!("missing artifact {key}; run the stage that produces it first");
    }
    read_csv_section(&p).with_context(|| format!("reading {key}"))
}

/// Paired per-endpoint AUCs with the identity line.
pub fn onset_scatter(rows: &[Vec<String>], source: &str) -> Result<String> {
    let head = rows.first().ok_or_else(|| anyhow!("{source} is empty"))?;
    if head.len() < 3 {
        bail!("{source} needs two model columns");
    }
    let pts: Vec<(String, f64, f64)> =
        rows[1..].iter().filter_map(|r| Some((r[0].clone(), r.get(1)?.parse().ok()?, r.get(2)?.parse().ok()?))).collect();
    if pts.is_empty() {
        bail!(
            "{source} lists no endpoints, so there is nothing to plot; list onset.endpoints explicitly, lower onset.min_count, or generate a larger cohort, then re-run eval-onset"
        );
    }
    let mut svg = Svg::new(&format!("Onset AUC per endpoint ({} endpoints)", pts.len()), source);
    let s = |a, b| Scale { lo: 0.0, hi: 1.0, a, b };
    let (x, y) = (s(M, W - M), s(H - M, M));
    axes(&mut svg, x, y, &format!("AUC, {}", head[1]), &format!("AUC, {}", head[2]), f2);
    svg.line(x.at(0.0), y.at(0.0), x.at(1.0), y.at(1.0), "#888888", true);
    for (label, a, b) in &pts {
        svg.circle(x.at(*a), y.at(*b), 4.0, PALETTE[0], &format!("{label}: {a:.3} vs {b:.3}"));
    }
    Ok(svg.finish())
}

/// Distribution of aggregate AUCs per horizon, one box per model.
pub fn onset_box(models: &[(String, Vec<Vec<String>>)], source: &str) -> Result<String> {
    let mut groups: BTreeMap<(u64, usize), Vec<f64>> = BTreeMap::new();
    for (mi, (_, rows)) in models.iter().enumerate() {
        for r in csv_records(rows) {
            if r.get("stratum").map(String::as_str) != Some("all") {
                continue;
            }
            if let (Some(d), Some(a)) = (num(&r, "delta_days"), num(&r, "auc")) {
                groups.entry((d.to_bits(), mi)).or_default().push(a);
            }
        }
    }
    let mut horizons: Vec<f64> = groups.keys().map(|(d, _)| f64::from_bits(*d)).collect();
    horizons.sort_by(f64::total_cmp);
    horizons.dedup();
    let mut svg = Svg::new("Onset AUC by horizon", source);
    let x = Scale { lo: 0.0, hi: horizons.len().max(1) as f64, a: M, b: W - M };
    let y = Scale { lo: 0.0, hi: 1.0, a: H - M, b: M };
    svg.line(M, H - M, W - M, H - M, "#000000", false);
    svg.line(M, M, M, H - M, "#000000", false);
    for t in y.ticks(5) {
        svg.text(M - 6.0, y.at(t) + 4.0, "end", &f2(t));
    }
    svg.vtext(16.0, H / 2.0, "AUC");
    svg.text(W / 2.0, H - 18.0, "middle", "prediction horizon (days)");
    let slot = (x.at(1.0) - x.at(0.0)) / (models.len() as f64 + 1.0);
    for (hi, h) in horizons.iter().enumerate() {
        svg.text(x.at(hi as f64 + 0.5), H - M + 16.0, "middle", &format!("{h}"));
        for mi in 0..models.len() {
            let Some(v) = groups.get(&(h.to_bits(), mi)) else { continue };
            let mut v = v.clone();
            v.sort_by(f64::total_cmp);
            let q = |p: f64| claimcraft_core::stats::quantile_sorted(&v, p);
            let cx = x.at(hi as f64) + slot * (mi as f64 + 1.0);
            let c = PALETTE[mi % PALETTE.len()];
            svg.line(cx, y.at(q(0.0)), cx, y.at(q(1.0)), c, false);
            svg.rect(cx - slot * 0.35, y.at(q(0.75)), slot * 0.7, y.at(q(0.25)) - y.at(q(0.75)), c, 0.3);
            svg.line(cx - slot * 0.35, y.at(q(0.5)), cx + slot * 0.35, y.at(q(0.5)), c, false);
        }
    }
    let legend: Vec<(&str, &str)> = models.iter().enumerate().map(|(i, (m, _))| (m.as_str(), PALETTE[i % PALETTE.len()])).collect();
    svg.legend(&legend);
    Ok(svg.finish())
}

const RADAR_AXES: [&str; 8] = ["accuracy", "macro_precision", "macro_recall", "macro_f1", "hnhc_precision", "hnhc_recall", "hnhc_f1", "r2"];

fn metrics_by_model(rows: &[Vec<String>]) -> BTreeMap<String, BTreeMap<String, f64>> {
    let mut out: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for r in csv_records(rows) {
        if let (Some(m), Some(k), Some(v)) = (r.get("model"), r.get("metric"), r.get("value")) {
            out.entry(m.clone()).or_default().insert(k.clone(), v.parse().unwrap_or(f64::NAN));
        }
    }
    out
}

/// Classification metrics and R² (clamped to [0, 1]) per model.
pub fn cost_radar(rows: &[Vec<String>], source: &str) -> Result<String> {
    let by = metrics_by_model(rows);
    if by.is_empty() {
        bail!("{source} holds no metrics");
    }
    let mut svg = Svg::new("Expenditure metrics", source);
    let (cx, cy, r) = (W / 2.0, H / 2.0 + 10.0, 160.0);
    let k = RADAR_AXES.len();
    let pt = |i: usize, v: f64| {
        let a = std::f64::consts::TAU * i as f64 / k as f64 - std::f64::consts::FRAC_PI_2;
        (cx + r * v * a.cos(), cy + r * v * a.sin())
    };
    for ring in [0.25, 0.5, 0.75, 1.0] {
        let pts: Vec<(f64, f64)> = (0..k).map(|i| pt(i, ring)).collect();
        svg.polygon(&pts, "#cccccc", None);
    }
    for (i, name) in RADAR_AXES.iter().enumerate() {
        let (x, y) = pt(i, 1.0);
        svg.line(cx, cy, x, y, "#cccccc", false);
        let (lx, ly) = pt(i, 1.12);
        svg.text(lx, ly + 4.0, "middle", name);
    }
    let mut legend = Vec::new();
    for (mi, (model, m)) in by.iter().enumerate() {
        let c = PALETTE[mi % PALETTE.len()];
        let pts: Vec<(f64, f64)> = RADAR_AXES.iter().enumerate().map(|(i, a)| pt(i, m.get(*a).copied().filter(|v| v.is_finite()).unwrap_or(0.0).clamp(0.0, 1.0))).collect();
        svg.polygon(&pts, c, Some(c));
        legend.push((model.as_str(), c));
    }
    svg.legend(&legend);
    Ok(svg.finish())
}

/// Mean absolute error per model.
pub fn cost_bar(rows: &[Vec<String>], source: &str) -> Result<String> {
    let by = metrics_by_model(rows);
    let bars: Vec<(&str, f64)> = by.iter().filter_map(|(m, v)| Some((m.as_str(), *v.get("mae")?))).filter(|(_, v)| v.is_finite()).collect();
    if bars.is_empty() {
        bail!("{source} holds no mae rows");
    }
    let top = bars.iter().map(|b| b.1).fold(0.0, f64::max).max(1.0) * 1.1;
    let mut svg = Svg::new("Next-year expenditure, mean absolute error", source);
    let y = Scale { lo: 0.0, hi: top, a: H - M, b: M };
    let x = Scale { lo: 0.0, hi: bars.len() as f64, a: M, b: W - M };
    axes(&mut svg, x, y, "model", "MAE (USD)", |v| format!("{v:.0}"));
    for (i, (m, v)) in bars.iter().enumerate() {
        let (x0, x1) = (x.at(i as f64 + 0.2), x.at(i as f64 + 0.8));
        svg.rect(x0, y.at(*v), x1 - x0, y.at(0.0) - y.at(*v), PALETTE[i % PALETTE.len()], 0.7);
        svg.text((x0 + x1) / 2.0, y.at(*v) - 4.0, "middle", &format!("{v:.0}"));
        svg.text((x0 + x1) / 2.0, H - M + 30.0, "middle", m);
    }
    Ok(svg.finish())
}

struct ForestRow {
    label: String,
    analysis: usize,
    rr: f64,
    lo: f64,
    hi: f64,
}

/// Rate ratios with calibrated intervals (plain ones when no null was fit),
/// primary outcomes first, on a log axis.
pub fn rwe_forest(analyses: &[(String, Vec<Vec<String>>)], source: &str) -> Result<String> {
    let mut rows = Vec::new();
    for (ai, (_, csv)) in analyses.iter().enumerate() {
        for r in csv_records(csv) {
            if r.get("status").map(String::as_str) != Some("ok") {
                continue;
            }
            let (Some(rr), Some(lo), Some(hi)) = (num(&r, "rr"), num(&r, "cal_lo").or(num(&r, "ci_lo")), num(&r, "cal_hi").or(num(&r, "ci_hi"))) else { continue };
            let role = r.get("role").cloned().unwrap_or_default();
            rows.push((role != "primary", ForestRow { label: format!("{} ({role})", r.get("outcome").cloned().unwrap_or_default()), analysis: ai, rr, lo, hi }));
        }
    }
    if rows.is_empty() {
        bail!("{source} has no estimated outcomes");
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.label.cmp(&b.1.label)).then(a.1.analysis.cmp(&b.1.analysis)));
    let rows: Vec<ForestRow> = rows.into_iter().map(|(_, r)| r).take(60).collect();
    let lo = rows.iter().map(|r| r.lo.ln()).fold(0.0, f64::min).max(-4.0) - 0.1;
    let hi = rows.iter().map(|r| r.hi.ln()).fold(0.0, f64::max).min(4.0) + 0.1;
    let mut svg = Svg::new("Rate ratios with calibrated intervals", source);
    let x = Scale { lo, hi, a: M + 140.0, b: W - M };
    let step = (H - 2.0 * M) / rows.len() as f64;
    svg.line(x.at(0.0), M, x.at(0.0), H - M, "#888888", true);
    svg.line(x.a, H - M, x.b, H - M, "#000000", false);
    for t in x.ticks(4) {
        svg.text(x.at(t), H - M + 16.0, "middle", &format!("{:.2}", t.exp()));
    }
    svg.text((x.a + x.b) / 2.0, H - 18.0, "middle", "rate ratio (log scale)");
    for (i, r) in rows.iter().enumerate() {
        let yy = M + step * (i as f64 + 0.5);
        let c = PALETTE[r.analysis % PALETTE.len()];
        svg.line(x.at(r.lo.ln().clamp(lo, hi)), yy, x.at(r.hi.ln().clamp(lo, hi)), yy, c, false);
        svg.circle(x.at(r.rr.ln().clamp(lo, hi)), yy, 3.0, c, &format!("{}: {:.3} [{:.3}, {:.3}]", r.label, r.rr, r.lo, r.hi));
        if r.analysis == 0 {
            svg.text(M + 132.0, yy + 4.0, "end", &r.label);
        }
    }
    let legend: Vec<(&str, &str)> = analyses.iter().enumerate().map(|(i, (m, _))| (m.as_str(), PALETTE[i % PALETTE.len()])).collect();
    svg.legend(&legend);
    Ok(svg.finish())
}

/// Expected absolute systematic error per analysis.
pub fn rwe_ease(rows: &[Vec<String>], source: &str) -> Result<String> {
    let bars: Vec<(String, f64)> = csv_records(rows).iter().filter_map(|r| Some((r.get("analysis")?.clone(), num(r, "ease")?))).collect();
    if bars.is_empty() {
        bail!("{source} has no EASE values; too few negative controls were estimable");
    }
    let top = bars.iter().map(|b| b.1).fold(0.0, f64::max).max(0.05) * 1.2;
    let mut svg = Svg::new("Expected absolute systematic error", source);
    let y = Scale { lo: 0.0, hi: top, a: H - M, b: M };
    let x = Scale { lo: 0.0, hi: bars.len() as f64, a: M, b: W - M };
    axes(&mut svg, x, y, "propensity model", "EASE", |v| format!("{v:.3}"));
    for (i, (m, v)) in bars.iter().enumerate() {
        let (x0, x1) = (x.at(i as f64 + 0.2), x.at(i as f64 + 0.8));
        svg.rect(x0, y.at(*v), x1 - x0, y.at(0.0) - y.at(*v), PALETTE[i % PALETTE.len()], 0.7);
        svg.text((x0 + x1) / 2.0, y.at(*v) - 4.0, "middle", &format!("{v:.4}"));
        svg.text((x0 + x1) / 2.0, H - M + 30.0, "middle", m);
    }
    Ok(svg.finish())
}

/// Writes every figure and `index.csv` (figure, source CSV) into `out`.
pub fn render(work: &Path, out: &Path) -> Result<()> {
    let mut index = vec![];
    let mut emit = |name: &str, sources: &str, svg: String| -> Result<()> {
        fs::write(out.join(name), svg).with_context(|| format!("writing {name}"))?;
        index.push(format!("{name},{sources}"));
        Ok(())
    };
    let cmp = "onset/comparison.csv";
    emit("onset_scatter.svg", cmp, onset_scatter(&load(work, cmp)?, cmp)?)?;
    let models = ["pretrained", "posttrained"];
    let box_src: Vec<String> = models.iter().map(|m| format!("onset/endpoints_{m}.csv")).collect();
    let box_data = models.iter().zip(&box_src).map(|(m, k)| Ok((m.to_string(), load(work, k)?))).collect::<Result<Vec<_>>>()?;
    let src = box_src.join(";");
    emit("onset_box.svg", &src, onset_box(&box_data, &src)?)?;
    let met = "cost/metrics.csv";
    let rows = load(work, met)?;
    emit("cost_radar.svg", met, cost_radar(&rows, met)?)?;
    emit("cost_bar.svg", met, cost_bar(&rows, met)?)?;
    let an = ["covariates", "embeddings"];
    let f_src: Vec<String> = an.iter().map(|a| format!("rwe/results_{a}.csv")).collect();
    let f_data = an.iter().zip(&f_src).map(|(a, k)| Ok((a.to_string(), load(work, k)?))).collect::<Result<Vec<_>>>()?;
    let src = f_src.join(";");
    emit("rwe_forest.svg", &src, rwe_forest(&f_data, &src)?)?;
    let sum = "rwe/summary.csv";
    emit("rwe_ease.svg", sum, rwe_ease(&load(work, sum)?, sum)?)?;
    let mut text = String::from("figure,sources\n");
    for l in index {
        text.push_str(&l);
        text.push('\n');
    }
    fs::write(out.join("index.csv"), text).context("writing index.csv")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(s: &str) -> Vec<Vec<String>> {
        s.lines().map(|l| l.split(',').map(str::to_string).collect()).collect()
    }

    #[test]
    fn scatter_has_one_point_per_endpoint_and_a_diagonal() {
        let svg = onset_scatter(&rows("endpoint,pretrained,posttrained\n<A>,0.6,0.7\n<B>,0.5,0.9\n<C>,0.8,0.8"), "onset/comparison.csv").unwrap();
        assert_eq!(svg.matches("<circle").count(), 3);
        assert!(svg.contains("stroke-dasharray"));
        assert!(svg.contains("<desc>source: onset/comparison.csv</desc>"));
        assert!(svg.contains("&lt;A&gt;"));
    }

    #[test]
    fn empty_endpoint_set_is_refused_with_guidance() {
        let e = onset_scatter(&rows("endpoint,pretrained,posttrained"), "onset/comparison.csv").unwrap_err().to_string();
        assert!(e.contains("no endpoints") && e.contains("onset.min_count"));
    }

    #[test]
    fn rendering_is_byte_stable() {
        let r = rows("cohort,model,metric,value\nholdout,a,mae,100.0\nholdout,a,accuracy,0.5\nholdout,b,mae,80.0\nholdout,b,r2,-0.2");
        assert_eq!(cost_radar(&r, "m.csv").unwrap(), cost_radar(&r, "m.csv").unwrap());
        assert_eq!(cost_bar(&r, "m.csv").unwrap().matches("<rect").count(), 1 + 2);
    }

    #[test]
    fn number_format_has_no_negative_zero() {
        assert_eq!(n(-0.0001), "0.00");
        assert_eq!(n(1.005), "1.00");
    }
}
