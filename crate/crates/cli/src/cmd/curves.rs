use std::fs;
use std::path::PathBuf;

use spanset_core::train::{PhaseReport, StepLog};
use spanset_core::{Error, Result};

use crate::manifest;
use crate::svg::Svg;

#[derive(clap::Args)]
pub struct Args {
    /// Run directory holding curves.csv (phase.json overlays when present),
    /// or a curves.csv itself
    pub run: PathBuf,
    /// Destination SVG
    #[arg(short, long)]
    pub out: PathBuf,
}

const ML: f64 = 54.0;
const MR: f64 = 130.0;
const MT: f64 = 24.0;
const MB: f64 = 40.0;
const PLOT_W: f64 = 520.0;
const PLOT_H: f64 = 260.0;

/// (csv column index, label, stroke color); column 0 is the step.
const SERIES: [(usize, &str, &str); 4] = [
    (5, "total", "#333333"),
    (4, "set guidance", "#1f77b4"),
    (2, "l1", "#ff7f0e"),
    (3, "giou", "#2ca02c"),
];

pub fn run(args: Args) -> Result<()> {
    let (csv_path, phase_path) = if args.run.is_dir() {
        (args.run.join("curves.csv"), Some(args.run.join("phase.json")))
    } else {
        (args.run.clone(), None)
    };
    let rows = parse(&fs::read_to_string(&csv_path)?)?;
    let phase = match phase_path {
        Some(p) if p.exists() => serde_json::from_str::<Option<PhaseReport>>(
            &fs::read_to_string(&p)?,
        )
        .map_err(|e| Error::Artifact(format!("{}: {e}", p.display())))?,
        _ => None,
    };

    let doc = chart(&rows, phase.as_ref());
    fs::write(&args.out, doc)?;

    let m = manifest::Builder::new("curves", 0)
        .input(&csv_path)?
        .finish(&[&args.out]);
    manifest::write(&manifest::sidecar(&args.out), &m)?;
    println!("plotted {} steps to {}", rows.len(), args.out.display());
    Ok(())
}

fn parse(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Artifact("empty curve file".into()))?;
    if header != StepLog::csv_header() {
        return Err(Error::Artifact(format!("unexpected curve header: {header}")));
    }
    let width = header.split(',').count();
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        let row: Vec<f64> = line
            .split(',')
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| Error::Artifact(format!("row {ln}: {f:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        if row.len() != width {
            return Err(Error::Artifact(format!(
                "row {ln}: {} fields, expected {width}",
                row.len()
            )));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Artifact("curve file has no rows".into()));
    }
    Ok(rows)
}

fn chart(rows: &[Vec<f64>], phase: Option<&PhaseReport>) -> String {
    let max_step = rows.last().expect("nonempty").first().copied().unwrap_or(1.0);
    let x_span = max_step.max(1.0);
    let y_max = rows
        .iter()
        .flat_map(|r| SERIES.iter().map(|&(c, _, _)| r[c]))
        .filter(|v| v.is_finite())
        .fold(f64::MIN, f64::max)
        .max(1e-9)
        * 1.05;
    let x = |step: f64| ML + step / x_span * PLOT_W;
    let y = |v: f64| MT + (1.0 - v / y_max) * PLOT_H;

    let mut doc = Svg::new(ML + PLOT_W + MR, MT + PLOT_H + MB);
    for i in 0..=5 {
        let v = y_max * i as f64 / 5.0;
        doc.line(ML, y(v), ML + PLOT_W, y(v), r##"stroke="#eeeeee""##);
        doc.text(ML - 6.0, y(v) + 3.0, 9.0, "end", &format!("{v:.2}"));
        let s = x_span * i as f64 / 5.0;
        doc.line(x(s), MT, x(s), MT + PLOT_H, r##"stroke="#eeeeee""##);
        doc.text(x(s), MT + PLOT_H + 14.0, 9.0, "middle", &format!("{}", s.round()));
    }
    doc.rect(
        ML,
        MT,
        PLOT_W,
        PLOT_H,
        r##"fill="none" stroke="#999999""##,
        &[],
    );
    doc.text(ML + PLOT_W / 2.0, MT + PLOT_H + 30.0, 10.0, "middle", "step");

    if let Some(p) = phase {
        let px = x(p.sg_drop_step as f64);
        doc.line(
            px,
            MT,
            px,
            MT + PLOT_H,
            r##"stroke="#888888" stroke-dasharray="4 3""##,
        );
        doc.text(
            px + 4.0,
            MT + 12.0,
            9.0,
            "start",
            &format!("guidance drop ({:.0}%)", p.sg_drop_fraction * 100.0),
        );
    }

    for (li, &(col, label, color)) in SERIES.iter().enumerate() {
        // Skipped steps log NaN; break the line there instead of bridging.
        let mut segment: Vec<(f64, f64)> = Vec::new();
        for r in rows {
            if r[col].is_finite() {
                segment.push((x(r[0]), y(r[col])));
            } else if segment.len() > 1 {
                doc.polyline(&segment, &format!(r#"stroke="{color}" stroke-width="1.3""#));
                segment = Vec::new();
            } else {
                segment.clear();
            }
        }
        doc.polyline(&segment, &format!(r#"stroke="{color}" stroke-width="1.3""#));

        let ly = MT + 14.0 + li as f64 * 16.0;
        doc.line(
            ML + PLOT_W + 12.0,
            ly - 3.0,
            ML + PLOT_W + 30.0,
            ly - 3.0,
            &format!(r#"stroke="{color}" stroke-width="2""#),
        );
        doc.text(ML + PLOT_W + 35.0, ly, 10.0, "start", label);
    }
    doc.finish()
}
