//! Hand-written SVG: token-importance heat grids and training curves.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use scar_core::corpus::{EvidenceKind, SignalRecord};
use scar_core::inference::{masker_logits, selector_weights};
use scar_core::model::Pooling;
use scar_core::tokenizer::{patchify, CANONICAL_LEADS};
use scar_core::{Error, Result};

use crate::commands::{LoadedRun, Outcome, METRICS_FILE};

const CELL_W: f64 = 24.0;
const CELL_H: f64 = 18.0;
const MARGIN_LEFT: f64 = 44.0;
const MARGIN_TOP: f64 = 40.0;
const PANEL_GAP: f64 = 36.0;

/// One `leads × patches` panel.
pub struct Panel {
    pub title: String,
    pub values: Vec<f64>,
    /// Values are mapped to colour relative to this maximum.
    pub scale_max: f64,
    pub note: String,
}

/// Ground-truth evidence cell `(lead, patch, is_primary)`.
pub type Overlay = (usize, usize, bool);

fn colour(t: f64) -> String {
    // white → deep blue
    let t = t.clamp(0.0, 1.0);
    let r = (255.0 * (1.0 - 0.9 * t)).round() as u8;
    let g = (255.0 * (1.0 - 0.7 * t)).round() as u8;
    let b = (255.0 * (1.0 - 0.35 * t)).round() as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn panel_width(patches: usize) -> f64 {
    MARGIN_LEFT + CELL_W * patches as f64
}

fn draw_panel(svg: &mut String, x0: f64, panel: &Panel, leads: usize, patches: usize, overlay: &[Overlay]) {
    let _ = writeln!(svg, r##"<g transform="translate({x0},0)">"##);
    let _ = writeln!(
        svg,
        r##"<text x="{}" y="16" font-size="12" font-weight="bold">{}</text>"##,
        MARGIN_LEFT,
        escape(&panel.title)
    );
    let _ = writeln!(
        svg,
        r##"<text x="{}" y="30" font-size="10" fill="#444">{}</text>"##,
        MARGIN_LEFT,
        escape(&panel.note)
    );
    for l in 0..leads {
        let y = MARGIN_TOP + CELL_H * l as f64;
        let name = CANONICAL_LEADS.get(l).copied().unwrap_or("?");
        let _ = writeln!(
            svg,
            r##"<text x="{}" y="{}" font-size="9" text-anchor="end">{name}</text>"##,
            MARGIN_LEFT - 4.0,
            y + CELL_H * 0.7
        );
        for p in 0..patches {
            let v = panel.values[l * patches + p];
            let t = if panel.scale_max > 0.0 { v / panel.scale_max } else { 0.0 };
            let _ = writeln!(
                svg,
                r##"<rect x="{}" y="{y}" width="{CELL_W}" height="{CELL_H}" fill="{}" stroke="#ddd" stroke-width="0.5"><title>{name} patch {p}: {v:.4}</title></rect>"##,
                MARGIN_LEFT + CELL_W * p as f64,
                colour(t)
            );
        }
    }
    for &(l, p, primary) in overlay {
        let (stroke, dash, width) = if primary {
            ("#d62728", "", 2.5)
        } else {
            ("#ff7f0e", r##" stroke-dasharray="3,2""##, 1.5)
        };
        let _ = writeln!(
            svg,
            r##"<rect x="{}" y="{}" width="{CELL_W}" height="{CELL_H}" fill="none" stroke="{stroke}" stroke-width="{width}"{dash}/>"##,
            MARGIN_LEFT + CELL_W * p as f64,
            MARGIN_TOP + CELL_H * l as f64
        );
    }
    for p in 0..patches {
        let _ = writeln!(
            svg,
            r##"<text x="{}" y="{}" font-size="9" text-anchor="middle">{p}</text>"##,
            MARGIN_LEFT + CELL_W * (p as f64 + 0.5),
            MARGIN_TOP + CELL_H * leads as f64 + 12.0
        );
    }
    let _ = writeln!(svg, "</g>");
}

/// Side-by-side heat grids with a shared evidence overlay.
pub fn heat_grids_svg(title: &str, panels: &[Panel], leads: usize, patches: usize, overlay: &[Overlay]) -> String {
    let width = panels.len() as f64 * (panel_width(patches) + PANEL_GAP);
    let height = MARGIN_TOP + CELL_H * leads as f64 + 56.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif">"##
    );
    let _ = writeln!(svg, r##"<rect width="100%" height="100%" fill="white"/>"##);
    for (i, panel) in panels.iter().enumerate() {
        draw_panel(&mut svg, i as f64 * (panel_width(patches) + PANEL_GAP), panel, leads, patches, overlay);
    }
    let _ = writeln!(
        svg,
        r##"<text x="{MARGIN_LEFT}" y="{}" font-size="10">{}. Red: primary evidence; dashed orange: secondary cues.</text>"##,
        height - 10.0,
        escape(title)
    );
    svg.push_str("</svg>\n");
    svg
}

/// The three panels for one record and one of its positive classes.
pub fn record_panels(run: &LoadedRun, record: &SignalRecord, class: usize) -> Result<(Vec<Panel>, Vec<Overlay>)> {
    let params = &run.model.params;
    let grid = patchify(&record.signal, run.cfg.corpus.patch_length)?;
    let evidence = record
        .evidence_for(class)
        .ok_or_else(|| Error::Input(format!("record {} has no evidence for class {class}", record.id)))?;
    let overlay: Vec<Overlay> = evidence
        .cells
        .iter()
        .map(|c| (c.lead, c.patch, c.kind == EvidenceKind::Primary))
        .collect();

    let full = selector_weights(params, &grid, &grid.cell_valid)?;
    let full_sum: f64 = full.iter().sum();
    let logits = masker_logits(params, &grid)?;
    let tau = run.cfg.model.mask_temperature_end;
    let gates: Vec<f64> = logits
        .iter()
        .zip(&grid.cell_valid)
        .map(|(&l, &v)| if v { 1.0 / (1.0 + (-l / tau).exp()) } else { 1.0 })
        .collect();
    let primary = evidence.primary();
    let mut visible = grid.cell_valid.clone();
    visible[grid.cell_index(primary.lead, primary.patch)] = false;
    let removed = selector_weights(params, &grid, &visible)?;
    let secondary_mass = |a: &[f64]| -> f64 {
        evidence
            .secondary()
            .map(|c| a[grid.cell_index(c.lead, c.patch)])
            .sum()
    };
    let scale = full.iter().chain(&removed).copied().fold(0.0, f64::max);
    let pooling_note = match run.cfg.model.pooling {
        Pooling::Selector => "",
        Pooling::Mean => " (selector unused by this variant)",
    };
    let panels = vec![
        Panel {
            title: format!("Selector weight, full view{pooling_note}"),
            values: full.clone(),
            scale_max: scale,
            note: format!("Σα = {full_sum:.3}; secondary mass {:.3}", secondary_mass(&full)),
        },
        Panel {
            title: "Masker gate".into(),
            values: gates.clone(),
            scale_max: 1.0,
            note: format!(
                "τ = {tau}; {} of {} valid cells gated ≥ 0.5",
                gates.iter().zip(&grid.cell_valid).filter(|(&g, &v)| v && g >= 0.5).count(),
                grid.valid_count()
            ),
        },
        Panel {
            title: "Selector weight, primary cell removed".into(),
            values: removed.clone(),
            scale_max: scale,
            note: format!(
                "Σα = {:.3}; secondary mass {:.3}",
                removed.iter().sum::<f64>(),
                secondary_mass(&removed)
            ),
        },
    ];
    Ok((panels, overlay))
}

#[derive(Clone, Debug)]
struct Series {
    name: String,
    points: Vec<(f64, f64)>,
}

fn parse_metrics(text: &str) -> Result<Vec<Series>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Format("empty metrics file".into()))?
        .split(',')
        .collect();
    let mut series: Vec<Series> = header[1..]
        .iter()
        .map(|h| Series {
            name: h.to_string(),
            points: Vec::new(),
        })
        .collect();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            return Err(Error::Format(format!("metrics row {line:?} has {} fields", fields.len())));
        }
        let x: f64 = fields[0]
            .parse()
            .map_err(|_| Error::Format(format!("bad epoch {:?}", fields[0])))?;
        for (s, f) in series.iter_mut().zip(&fields[1..]) {
            if let Ok(y) = f.parse::<f64>() {
                s.points.push((x, y));
            }
        }
    }
    Ok(series.into_iter().filter(|s| !s.points.is_empty()).collect())
}

/// One small line chart per metrics column, stacked vertically.
pub fn loss_curves_svg(metrics: &str) -> Result<String> {
    let series = parse_metrics(metrics)?;
    let (w, h, gap, left) = (420.0, 110.0, 30.0, 60.0);
    let height = series.len() as f64 * (h + gap) + 20.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{height}" font-family="sans-serif">"##,
        w + left + 20.0
    );
    let _ = writeln!(svg, r##"<rect width="100%" height="100%" fill="white"/>"##);
    for (i, s) in series.iter().enumerate() {
        let y0 = 20.0 + i as f64 * (h + gap);
        let (xmin, xmax) = s.points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
        let (ymin, ymax) = s.points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
        let xr = if xmax > xmin { xmax - xmin } else { 1.0 };
        let yr = if ymax > ymin { ymax - ymin } else { 1.0 };
        let _ = writeln!(
            svg,
            r##"<rect x="{left}" y="{y0}" width="{w}" height="{h}" fill="none" stroke="#999"/>"##
        );
        let _ = writeln!(svg, r##"<text x="{}" y="{}" font-size="11">{}</text>"##, left + 4.0, y0 + 12.0, escape(&s.name));
        let _ = writeln!(svg, r##"<text x="{}" y="{}" font-size="9" text-anchor="end">{ymax:.4}</text>"##, left - 4.0, y0 + 8.0);
        let _ = writeln!(svg, r##"<text x="{}" y="{}" font-size="9" text-anchor="end">{ymin:.4}</text>"##, left - 4.0, y0 + h);
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", left + w * (x - xmin) / xr, y0 + h - h * (y - ymin) / yr))
            .collect();
        let _ = writeln!(
            svg,
            r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>"##,
            pts.join(" ")
        );
    }
    let _ = writeln!(svg, r##"<text x="{left}" y="{}" font-size="10">epoch</text>"##, height - 4.0);
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Heat grids for the first `count` positive test records plus loss curves.
pub fn cmd_plot(run: &LoadedRun, out_dir: &Path, count: usize) -> Result<Outcome> {
    fs::create_dir_all(out_dir)?;
    let mut out = Outcome::default();
    let (leads, patches) = (run.cfg.corpus.num_leads, run.cfg.corpus.num_patches());
    let mut written: Vec<PathBuf> = Vec::new();
    for record in run.corpus.test.iter().filter(|r| r.positives().next().is_some()).take(count) {
        let class = record.positives().next().expect("filtered on positives");
        let (panels, overlay) = record_panels(run, record, class)?;
        let svg = heat_grids_svg(&format!("{} class {class}", record.id), &panels, leads, patches, &overlay);
        let path = out_dir.join(format!("tokens_{}.svg", record.id));
        fs::write(&path, svg)?;
        written.push(path);
    }
    let metrics_path = run.dir.join(METRICS_FILE);
    let metrics = fs::read_to_string(&metrics_path)
        .map_err(|e| Error::Dependency(format!("{}: {e}", metrics_path.display())))?;
    let path = out_dir.join("loss.svg");
    fs::write(&path, loss_curves_svg(&metrics)?)?;
    written.push(path);
    out.summary = format!("{} SVG files in {}\n", written.len(), out_dir.display());
    out.files = written;
    Ok(out)
}
