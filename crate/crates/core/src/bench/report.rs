//! Per-strategy summary tables, accuracy-versus-fraction plots and the
//! bottom-minus-top directional finding.
//!
//! The independent-model reference is read from fraction 1.0 rows: at that
//! fraction every strategy selects every filter, so the joint model is a set
//! of independent per-domain models.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::bench::results::{ResultRow, ResultsTable};
use crate::error::{Error, Result};
use crate::planner::Strategy;

pub const INDEPENDENT_LABEL: &str = "independent";

/// One line of the summary table.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub architecture: String,
    pub domain_set: String,
    /// Mean total parameter count over seeds, in millions.
    pub params_m: f64,
    /// A hyphenated strategy label or `independent`.
    pub strategy: String,
    pub fraction: f64,
    /// Mean validation accuracy over seeds.
    pub accuracy: BTreeMap<String, f64>,
    /// Domains on which this row holds the best strategy accuracy at its
    /// fraction. Independent rows never carry the flag.
    pub best: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub domains: Vec<String>,
    pub rows: Vec<SummaryRow>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

/// Four-decimal rounding used for display and for best-flag ties.
fn display_units(acc: f64) -> i64 {
    (acc * 1e4).round() as i64
}

type Group<'a> = BTreeMap<(String, String), Vec<&'a ResultRow>>;

fn groups(table: &ResultsTable) -> Group<'_> {
    let mut g: Group<'_> = BTreeMap::new();
    for r in &table.rows {
        g.entry((r.architecture.clone(), r.domain_set.clone())).or_default().push(r);
    }
    g
}

fn aggregate(rows: &[&ResultRow], label: String, fraction: f64) -> SummaryRow {
    let mut per_domain: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut params: BTreeMap<(Strategy, u64), u64> = BTreeMap::new();
    for r in rows {
        per_domain.entry(r.domain.clone()).or_default().push(r.val_accuracy);
        params.insert((r.strategy, r.seed), r.params_total);
    }
    SummaryRow {
        architecture: rows[0].architecture.clone(),
        domain_set: rows[0].domain_set.clone(),
        params_m: mean(params.values().map(|&p| p as f64)) / 1e6,
        strategy: label,
        fraction,
        accuracy: per_domain.into_iter().map(|(d, v)| (d, mean(v))).collect(),
        best: BTreeSet::new(),
    }
}

/// Groups by architecture and domain set. Within a group, strategy rows
/// come per fraction below 1.0 in top, random, bottom order, followed by
/// one independent row when fraction 1.0 results exist.
pub fn summarize(table: &ResultsTable) -> Summary {
    let domains: Vec<String> = table
        .rows
        .iter()
        .map(|r| r.domain.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut out = Vec::new();
    for (_, rows) in groups(table) {
        let fractions: BTreeSet<u64> = rows.iter().filter(|r| r.fraction < 1.0).map(|r| r.fraction.to_bits()).collect();
        let mut fractions: Vec<f64> = fractions.into_iter().map(f64::from_bits).collect();
        fractions.sort_by(f64::total_cmp);
        for fraction in fractions {
            let start = out.len();
            for strategy in Strategy::ALL {
                let cell: Vec<&ResultRow> = rows
                    .iter()
                    .copied()
                    .filter(|r| r.strategy == strategy && r.fraction == fraction)
                    .collect();
                if !cell.is_empty() {
                    out.push(aggregate(&cell, strategy.display_label().to_string(), fraction));
                }
            }
            mark_best(&mut out[start..]);
        }
        let full: Vec<&ResultRow> = rows.iter().copied().filter(|r| r.fraction == 1.0).collect();
        if !full.is_empty() {
            out.push(aggregate(&full, INDEPENDENT_LABEL.to_string(), 1.0));
        }
    }
    Summary { domains, rows: out }
}

fn mark_best(rows: &mut [SummaryRow]) {
    let domains: BTreeSet<String> = rows.iter().flat_map(|r| r.accuracy.keys().cloned()).collect();
    for d in domains {
        let best = rows.iter().filter_map(|r| r.accuracy.get(&d)).map(|&a| display_units(a)).max();
        for r in rows.iter_mut() {
            if r.accuracy.get(&d).map(|&a| display_units(a)) == best {
                r.best.insert(d.clone());
            }
        }
    }
}

/// Summary as delimiter-separated text: `Architectures, Domains,
/// # Params (M), Params, Sharing Strategy, Fraction`, one accuracy column per
/// domain, then one `best_<domain>` flag column per domain.
pub fn summary_csv(summary: &Summary) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["Architectures", "Domains", "# Params (M)", "Params", "Sharing Strategy", "Fraction"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(summary.domains.iter().cloned());
    header.extend(summary.domains.iter().map(|d| format!("best_{d}")));
    w.write_record(&header).expect("in-memory csv");
    for r in &summary.rows {
        let mut rec = vec![
            r.architecture.clone(),
            r.domain_set.clone(),
            format!("{:.2}", r.params_m),
            format!("{:.0}", r.params_m * 1e6),
            r.strategy.clone(),
            format!("{}", r.fraction),
        ];
        for d in &summary.domains {
            rec.push(r.accuracy.get(d).map(|a| format!("{a:.4}")).unwrap_or_default());
        }
        for d in &summary.domains {
            rec.push(match r.accuracy.get(d) {
                Some(_) if r.strategy != INDEPENDENT_LABEL => r.best.contains(d).to_string(),
                _ => String::new(),
            });
        }
        w.write_record(&rec).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8 csv")
}

/// Mean over domains of `bottom_specific − top_specific` accuracy per
/// `(architecture, domain_set, fraction)` where both strategies have rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionalGap {
    pub architecture: String,
    pub domain_set: String,
    pub fraction: f64,
    pub bottom_minus_top: f64,
}

pub fn directional_finding(table: &ResultsTable) -> Vec<DirectionalGap> {
    let mut out = Vec::new();
    for ((arch, set), rows) in groups(table) {
        let mut by_fraction: BTreeMap<u64, BTreeMap<(Strategy, String), Vec<f64>>> = BTreeMap::new();
        for r in rows {
            by_fraction
                .entry(r.fraction.to_bits())
                .or_default()
                .entry((r.strategy, r.domain.clone()))
                .or_default()
                .push(r.val_accuracy);
        }
        let mut entries: Vec<(f64, f64)> = Vec::new();
        for (bits, cells) in by_fraction {
            let diffs: Vec<f64> = cells
                .iter()
                .filter(|((s, _), _)| *s == Strategy::BottomSpecific)
                .filter_map(|((_, d), bottom)| {
                    cells
                        .get(&(Strategy::TopSpecific, d.clone()))
                        .map(|top| mean(bottom.iter().copied()) - mean(top.iter().copied()))
                })
                .collect();
            if !diffs.is_empty() {
                entries.push((f64::from_bits(bits), mean(diffs)));
            }
        }
        entries.sort_by(|a, b| a.0.total_cmp(&b.0));
        out.extend(entries.into_iter().map(|(fraction, gap)| DirectionalGap {
            architecture: arch.clone(),
            domain_set: set.clone(),
            fraction,
            bottom_minus_top: gap,
        }));
    }
    out
}

pub fn directional_csv(gaps: &[DirectionalGap]) -> String {
    let mut s = String::from("architecture,domain_set,fraction,bottom_minus_top\n");
    for g in gaps {
        let _ = writeln!(s, "{},{},{},{:.6}", g.architecture, g.domain_set, g.fraction, g.bottom_minus_top);
    }
    s
}

/// One plotted series: label and `(fraction, accuracy)` points.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Series for one domain of one group: one per strategy (mean over seeds
/// at each fraction) and the independent reference when fraction 1.0 rows
/// exist alongside other fractions.
pub fn domain_series(rows: &[&ResultRow], domain: &str) -> (Vec<Series>, Option<f64>) {
    let rows: Vec<&ResultRow> = rows.iter().copied().filter(|r| r.domain == domain).collect();
    let mut series = Vec::new();
    for strategy in Strategy::ALL {
        let mut by_fraction: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for r in rows.iter().filter(|r| r.strategy == strategy) {
            by_fraction.entry(r.fraction.to_bits()).or_default().push(r.val_accuracy);
        }
        if by_fraction.is_empty() {
            continue;
        }
        let mut points: Vec<(f64, f64)> = by_fraction.into_iter().map(|(b, v)| (f64::from_bits(b), mean(v))).collect();
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        series.push(Series {
            label: strategy.display_label().to_string(),
            points,
        });
    }
    let has_partial = rows.iter().any(|r| r.fraction < 1.0);
    let full: Vec<f64> = rows.iter().filter(|r| r.fraction == 1.0).map(|r| r.val_accuracy).collect();
    let reference = (has_partial && !full.is_empty()).then(|| mean(full));
    (series, reference)
}

const COLORS: [&str; 3] = ["#d62728", "#2ca02c", "#1f77b4"];

/// Accuracy-versus-fraction chart as a standalone SVG document.
pub fn render_svg(title: &str, series: &[Series], reference: Option<f64>) -> String {
    let (w, h, left, right, top, bottom) = (560.0, 360.0, 60.0, 150.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let x = |f: f64| left + f * pw;
    let y = |a: f64| top + (1.0 - a) * ph;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, left + pw / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{:.0}%</text>"#, x(v), top + ph + 18.0, v * 100.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.1}</text>"#, left - 6.0, y(v) + 4.0);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" x2="{:.2}" y1="{:.2}" y2="{:.2}" stroke="#dddddd"/>"##,
            left + pw,
            y(v),
            y(v)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">domain-specific fraction of conv parameters</text>"#,
        left + pw / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">validation accuracy</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (i, sr) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = sr.points.iter().map(|&(f, a)| format!("{:.2},{:.2}", x(f), y(a))).collect();
        let _ = writeln!(
            s,
            r#"<polyline class="series" data-series="{}" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            escape(&sr.label),
            pts.join(" ")
        );
        for &(f, a) in &sr.points {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, x(f), y(a));
        }
        legend(&mut s, left + pw + 12.0, top + 16.0 + 18.0 * i as f64, color, &sr.label, false);
    }
    if let Some(a) = reference {
        let _ = writeln!(
            s,
            r#"<line class="series" data-series="{INDEPENDENT_LABEL}" x1="{left}" x2="{:.2}" y1="{:.2}" y2="{:.2}" stroke="black" stroke-dasharray="6 4"/>"#,
            left + pw,
            y(a),
            y(a)
        );
        legend(&mut s, left + pw + 12.0, top + 16.0 + 18.0 * series.len() as f64, "black", INDEPENDENT_LABEL, true);
    }
    s.push_str("</svg>\n");
    s
}

fn legend(s: &mut String, x: f64, y: f64, color: &str, label: &str, dashed: bool) {
    let dash = if dashed { r#" stroke-dasharray="6 4""# } else { "" };
    let _ = writeln!(
        s,
        r#"<line x1="{x:.2}" x2="{:.2}" y1="{:.2}" y2="{:.2}" stroke="{color}" stroke-width="2"{dash}/>"#,
        x + 20.0,
        y - 4.0,
        y - 4.0
    );
    let _ = writeln!(s, r#"<text x="{:.2}" y="{y:.2}">{}</text>"#, x + 26.0, escape(label));
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '+' { c } else { '_' })
        .collect()
}

/// Files written by [`emit_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub summary: PathBuf,
    pub directional: PathBuf,
    pub plots: Vec<PathBuf>,
}

pub const SUMMARY_FILE: &str = "summary.csv";
pub const DIRECTIONAL_FILE: &str = "directional.csv";
pub const PLOTS_DIR: &str = "plots";

/// Writes the summary table, the directional finding and one plot per
/// `(architecture, domain)` (per domain set too when an architecture has
/// several) under `out_dir`.
pub fn emit_report(table: &ResultsTable, out_dir: &Path) -> Result<ReportFiles> {
    if table.is_empty() {
        return Err(Error::format("results table", "no rows to report"));
    }
    let plots_dir = out_dir.join(PLOTS_DIR);
    std::fs::create_dir_all(&plots_dir).map_err(|e| Error::io(&plots_dir, e))?;
    let summary = out_dir.join(SUMMARY_FILE);
    std::fs::write(&summary, summary_csv(&summarize(table))).map_err(|e| Error::io(&summary, e))?;
    let directional = out_dir.join(DIRECTIONAL_FILE);
    std::fs::write(&directional, directional_csv(&directional_finding(table))).map_err(|e| Error::io(&directional, e))?;

    let groups = groups(table);
    let mut sets_per_arch: BTreeMap<&str, usize> = BTreeMap::new();
    for (arch, _) in groups.keys() {
        *sets_per_arch.entry(arch.as_str()).or_default() += 1;
    }
    let mut plots = Vec::new();
    for ((arch, set), rows) in &groups {
        let domains: BTreeSet<&str> = rows.iter().map(|r| r.domain.as_str()).collect();
        for domain in domains {
            let (series, reference) = domain_series(rows, domain);
            let stem = if sets_per_arch[arch.as_str()] > 1 {
                format!("{}_{}_{}", file_safe(arch), file_safe(set), file_safe(domain))
            } else {
                format!("{}_{}", file_safe(arch), file_safe(domain))
            };
            let path = plots_dir.join(format!("{stem}.svg"));
            let svg = render_svg(&format!("{arch}: {domain}"), &series, reference);
            std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
            plots.push(path);
        }
    }
    Ok(ReportFiles {
        summary,
        directional,
        plots,
    })
}
