use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use spanset_core::corpus;
use spanset_core::model::{GroundingModel, ModelOutput};
use spanset_core::train::load_model;
use spanset_core::{Error, Result};

use crate::manifest;
use crate::svg::{self, Svg};

#[derive(clap::Args)]
pub struct Args {
    /// Checkpoint produced by `train`
    pub checkpoint: PathBuf,
    /// Corpus file holding the sample
    pub corpus: PathBuf,
    /// Sample to render
    #[arg(long)]
    pub sample: u64,
    /// Destination SVG (a .attention.csv sidecar lands next to it)
    #[arg(short, long)]
    pub out: PathBuf,
}

const X0: f64 = 40.0;
const PANEL_W: f64 = 560.0;
const BAR_H: f64 = 12.0;
const BAR_GAP: f64 = 3.0;
const CELL_H: f64 = 10.0;
const SCATTER_H: f64 = 240.0;

pub fn run(args: Args) -> Result<()> {
    let (_, model) = load_model(&args.checkpoint)?;
    let (spec, samples) = corpus::load(&args.corpus)?;
    let sample = samples
        .iter()
        .find(|s| s.sample_id == args.sample)
        .ok_or_else(|| Error::Corpus(format!("no sample {} in the corpus", args.sample)))?;

    let out = model.infer(&sample.frames, &sample.queries, sample.k())?;
    let (n, k, t) = (out.n_proposals, out.n_queries, out.frame_count);

    let spans_h = (k + n) as f64 * (BAR_H + BAR_GAP) + 8.0;
    let att_h = n as f64 * CELL_H;
    let height = 30.0 + spans_h + 40.0 + att_h + 40.0 + SCATTER_H + 30.0;
    let mut doc = Svg::new(X0 * 2.0 + PANEL_W, height);

    let mut y = 20.0;
    doc.text(
        X0,
        y,
        12.0,
        "start",
        &format!(
            "sample {}: truth (outline) and predictions (filled by linked query)",
            sample.sample_id
        ),
    );
    y += 10.0;
    y = draw_spans(&mut doc, &out, sample, y);

    y += 26.0;
    doc.text(X0, y, 12.0, "start", "proposal-frame attention (row-normalized)");
    y += 8.0;
    y = draw_attention(&mut doc, &out, y);

    y += 26.0;
    doc.text(
        X0,
        y,
        12.0,
        "start",
        &format!("proposal (center, width) across {} samples", samples.len()),
    );
    y += 8.0;
    draw_scatter(&mut doc, &model, &samples, y)?;

    fs::write(&args.out, doc.finish())?;
    let att_path = attention_sidecar(&args.out);
    fs::write(&att_path, attention_csv(&out, t, k))?;

    let m = manifest::Builder::new("render", spec.seed)
        .corpus(spec)
        .model(model.config().clone())
        .input(&args.checkpoint)?
        .input(&args.corpus)?
        .finish(&[&args.out, &att_path]);
    manifest::write(&manifest::sidecar(&args.out), &m)?;

    println!(
        "rendered sample {} ({k} queries, {n} proposals) to {}",
        sample.sample_id,
        args.out.display()
    );
    Ok(())
}

pub fn attention_sidecar(out: &PathBuf) -> PathBuf {
    let mut os = out.as_os_str().to_owned();
    os.push(".attention.csv");
    os.into()
}

fn x_of(v: f64) -> f64 {
    X0 + v * PANEL_W
}

/// Ground-truth bars first (one row per query, outline only), then one row
/// per proposal filled with its linked query's color. `data-start/-end`
/// carry full-precision endpoints for machine readback.
fn draw_spans(doc: &mut Svg, out: &ModelOutput, sample: &corpus::GroundingSample, y0: f64) -> f64 {
    let k = out.n_queries;
    let mut y = y0;
    for (j, span) in sample.spans.iter().enumerate() {
        doc.rect(
            x_of(span.start()),
            y,
            (span.length()).max(0.002) * PANEL_W,
            BAR_H,
            &format!(
                r#"fill="none" stroke="{}" stroke-width="1.5""#,
                svg::query_color(j)
            ),
            &[
                ("kind", "gt".into()),
                ("query", j.to_string()),
                ("start", span.start().to_string()),
                ("end", span.end().to_string()),
            ],
        );
        y += BAR_H + BAR_GAP;
    }
    for (i, span) in out.spans.iter().enumerate() {
        let row = &out.correspondence[i * k..(i + 1) * k];
        let linked = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(j, _)| j)
            .unwrap_or(0);
        doc.rect(
            x_of(span.start()),
            y,
            (span.length()).max(0.002) * PANEL_W,
            BAR_H,
            &format!(
                r#"fill="{}" fill-opacity="0.8""#,
                svg::query_color(linked)
            ),
            &[
                ("kind", "pred".into()),
                ("slot", i.to_string()),
                ("query", linked.to_string()),
                ("link-prob", format!("{:.4}", row[linked])),
                ("start", span.start().to_string()),
                ("end", span.end().to_string()),
            ],
        );
        y += BAR_H + BAR_GAP;
    }
    time_axis(doc, y + 2.0);
    y + 8.0
}

fn time_axis(doc: &mut Svg, y: f64) {
    doc.line(x_of(0.0), y, x_of(1.0), y, r##"stroke="#999999""##);
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        doc.line(x_of(tick), y, x_of(tick), y + 3.0, r##"stroke="#999999""##);
        doc.text(x_of(tick), y + 13.0, 9.0, "middle", &format!("{tick}"));
    }
}

/// N x T heat grid of the last decoder layer's attention over frames; each
/// row is scaled by its own maximum so specialization stays visible.
fn draw_attention(doc: &mut Svg, out: &ModelOutput, y0: f64) -> f64 {
    let (n, k, t) = (out.n_proposals, out.n_queries, out.frame_count);
    let cell_w = PANEL_W / t as f64;
    for i in 0..n {
        let row = &out.cross_attention[i * (t + k)..i * (t + k) + t];
        let mx = row.iter().cloned().fold(f64::MIN, f64::max).max(1e-12);
        for (c, &w) in row.iter().enumerate() {
            doc.rect(
                X0 + c as f64 * cell_w,
                y0 + i as f64 * CELL_H,
                cell_w,
                CELL_H,
                &format!(r#"fill="{}""#, svg::heat_color(w / mx)),
                &[],
            );
        }
    }
    y0 + n as f64 * CELL_H
}

/// One point per proposal slot per corpus sample, colored by slot.
fn draw_scatter(
    doc: &mut Svg,
    model: &GroundingModel,
    samples: &[corpus::GroundingSample],
    y0: f64,
) -> Result<()> {
    doc.rect(
        X0,
        y0,
        PANEL_W,
        SCATTER_H,
        r##"fill="none" stroke="#cccccc""##,
        &[],
    );
    doc.text(x_of(0.5), y0 + SCATTER_H + 14.0, 9.0, "middle", "center");
    doc.text(X0 - 18.0, y0 + SCATTER_H / 2.0, 9.0, "middle", "width");
    for s in samples {
        let out = model.infer(&s.frames, &s.queries, s.k())?;
        for (i, span) in out.spans.iter().enumerate() {
            let cx = x_of(span.center());
            let cy = y0 + (1.0 - span.length()) * SCATTER_H;
            doc.circle(
                cx,
                cy,
                2.5,
                &format!(r#"fill="{}" fill-opacity="0.55""#, svg::slot_color(i)),
                &[("kind", "slot-point".into()), ("slot", i.to_string())],
            );
        }
    }
    Ok(())
}

/// Raw (un-normalized) attention rows over frames then query positions;
/// every row sums to 1.
fn attention_csv(out: &ModelOutput, t: usize, k: usize) -> String {
    let mut csv = String::new();
    let cols: Vec<String> = (0..t)
        .map(|c| format!("f{c}"))
        .chain((0..k).map(|q| format!("q{q}")))
        .collect();
    csv.push_str(&cols.join(","));
    csv.push('\n');
    for row in out.cross_attention.chunks_exact(t + k) {
        let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(csv, "{}", vals.join(",")).expect("writing to string");
    }
    csv
}
