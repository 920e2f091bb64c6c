//! CSV reports and a dependency-free SVG plot of the PCK curve.

use std::fmt::Write as _;

use super::detect_eval::SweepRow;
use super::manifest::DatasetManifest;
use crate::detect::DetectionDecision;
use crate::error::{invalid, Error, Result};
use crate::metrics::PckCurve;

fn csv_text(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn pck_csv(curve: &PckCurve) -> Result<String> {
    csv_text(
        &["threshold", "fraction"],
        curve.thresholds.iter().zip(&curve.fractions).map(|(t, f)| vec![t.to_string(), f.to_string()]),
    )
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    csv_text(
        &["presence_count", "auc", "accuracy", "precision", "recall", "f1"],
        rows.iter().map(|r| {
            let m = r.metrics;
            vec![r.presence_count.to_string(), r.auc.to_string(), m.accuracy.to_string(), m.precision.to_string(), m.recall.to_string(), m.f1.to_string()]
        }),
    )
}

pub fn decisions_csv(manifest: &DatasetManifest, decisions: &[DetectionDecision]) -> Result<String> {
    if manifest.records.len() != decisions.len() {
        return Err(invalid(format!("{} decisions for {} records", decisions.len(), manifest.records.len())));
    }
    let header = ["image_path", "hand_present", "predicted", "foreground_pixels", "x_min", "y_min", "x_max", "y_max"];
    csv_text(
        &header,
        manifest.records.iter().zip(decisions).map(|(r, d)| {
            let b = d.bbox.map(|b| [b.x_min, b.y_min, b.x_max, b.y_max].map(|v| v.to_string()));
            let mut row = vec![r.image_path.clone(), r.hand_present.to_string(), d.hand_present.to_string(), d.foreground_pixels.to_string()];
            row.extend(b.map_or_else(|| vec![String::new(); 4], |b| b.to_vec()));
            row
        }),
    )
}

/// Per-sample MJPE table.
pub fn mjpe_csv(names: &[String], errors: &[f64]) -> Result<String> {
    if names.len() != errors.len() {
        return Err(invalid("one name per error"));
    }
    csv_text(&["sample", "mjpe"], names.iter().zip(errors).map(|(n, e)| vec![n.clone(), e.to_string()]))
}

/// PCK against threshold on a 400x300 canvas, axes included.
pub fn pck_svg(curve: &PckCurve, title: &str) -> Result<String> {
    if curve.thresholds.is_empty() || curve.thresholds.len() != curve.fractions.len() {
        return Err(invalid("PCK curve needs matching, non-empty columns"));
    }
    let (w, h, pad) = (400.0, 300.0, 40.0);
    let max_t = curve.thresholds.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let x = |t: f64| pad + t / max_t * (w - 2.0 * pad);
    let y = |f: f64| h - pad - f * (h - 2.0 * pad);
    let points: Vec<String> =
        curve.thresholds.iter().zip(&curve.fractions).map(|(t, f)| format!("{:.2},{:.2}", x(*t), y(*f))).collect();
    let title: String = title.chars().filter(|c| !matches!(c, '<' | '>' | '&' | '"')).collect();
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#).unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<line x1="{pad}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - pad, w - pad, h - pad).unwrap();
    writeln!(s, r#"<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{}" stroke="black"/>"#, h - pad).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">normalised threshold (max {max_t})</text>"#, w / 2.0, h - 10.0).unwrap();
    writeln!(s, r#"<text x="{}" y="20" font-size="14" text-anchor="middle">{title}</text>"#, w / 2.0).unwrap();
    writeln!(s, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, points.join(" ")).unwrap();
    s.push_str("</svg>\n");
    Ok(s)
}
