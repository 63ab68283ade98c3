//! Text, CSV and SVG emitters.

use std::fmt::Write as _;

use crate::eval::{GateRow, Metrics, ReliabilityBin, StepRow};

pub fn bins_csv(bins: &[ReliabilityBin]) -> String {
    let mut out = String::from("bin_index,mean_confidence,accuracy,count\n");
    for b in bins {
        let _ = writeln!(out, "{},{},{},{}", b.bin_index, b.mean_confidence, b.empirical_accuracy, b.count);
    }
    out
}

pub fn gate_csv(rows: &[GateRow]) -> String {
    let mut out = String::from("gate_threshold,adoption_rate,pg_rate,brier,ece\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.gate_threshold, r.adoption_rate, r.pg_rate, r.brier, r.ece);
    }
    out
}

pub fn steps_csv(rows: &[StepRow]) -> String {
    let mut out = String::from("t_max,brier,ece,avg_steps\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.t_max, r.brier, r.ece, r.avg_steps);
    }
    out
}

/// Variant x {Brier, ECE, P&G Rate, Adpt Rate, WallMS}.
pub fn summary_table(rows: &[(String, Metrics)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max("Variant".len());
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>7}  {:>7}  {:>8}  {:>9}  {:>9}",
        "Variant", "Brier", "ECE", "P&G Rate", "Adpt Rate", "WallMS"
    );
    for (name, m) in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>7.3}  {:>7.3}  {:>8.3}  {:>9.3}  {:>9.3}",
            name, m.brier, m.ece, m.pg_rate, m.adoption_rate, m.mean_wall_ms
        );
    }
    out
}

const PALETTE: [&str; 6] = ["#888888", "#1f77b4", "#2ca02c", "#d62728", "#9467bd", "#ff7f0e"];

/// Bubble reliability diagram: one circle per non-empty bin at (confidence, accuracy),
/// radius proportional to sqrt(count), with a dashed identity diagonal.
pub fn reliability_svg(series: &[(&str, &[ReliabilityBin])]) -> String {
    const SIZE: f64 = 400.0;
    const MARGIN: f64 = 50.0;
    const MAX_RADIUS: f64 = 28.0;
    let max_count = series
        .iter()
        .flat_map(|(_, bins)| bins.iter().map(|b| b.count))
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let px = |v: f64| MARGIN + v * SIZE;
    let py = |v: f64| MARGIN + (1.0 - v) * SIZE;

    let total = SIZE + 2.0 * MARGIN;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{total}" viewBox="0 0 {total} {total}">"#
    );
    let _ = writeln!(
        out,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        out,
        r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="black" stroke-dasharray="6,4"/>"#,
        px(0.0),
        py(0.0),
        px(1.0),
        py(1.0)
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="14">Confidence</text>"#,
        px(0.5),
        total - 12.0
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" text-anchor="middle" font-size="14" transform="rotate(-90 14 {})">Accuracy</text>"#,
        py(0.5),
        py(0.5)
    );
    for (i, (name, bins)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="12" fill="{color}">{}</text>"#,
            MARGIN + 8.0,
            MARGIN + 16.0 + 14.0 * i as f64,
            escape(name)
        );
        for b in bins.iter().filter(|b| b.count > 0) {
            let r = MAX_RADIUS * (b.count as f64 / max_count).sqrt();
            let _ = writeln!(
                out,
                r#"<circle cx="{:.3}" cy="{:.3}" r="{:.3}" fill="{color}" fill-opacity="0.5" stroke="{color}"><title>{} bin {}: n={}</title></circle>"#,
                px(b.mean_confidence),
                py(b.empirical_accuracy),
                r,
                escape(name),
                b.bin_index,
                b.count
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
