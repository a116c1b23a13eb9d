//! Plots and summary for a finished (or interrupted) training run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::metrics::Metrics;
use crate::model::checkpoint::write_atomic;
use crate::train::{read_history, HistoryRecord, TrainError};

pub const HISTORY_FILE: &str = "history.jsonl";

/// Paths written by [`write_report`].
#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub lr_plot: PathBuf,
    pub loss_plot: PathBuf,
    pub plot_data: PathBuf,
    pub summary: PathBuf,
}

struct Series<'a> {
    label: &'a str,
    color: &'a str,
    points: Vec<(f64, f64)>,
    markers: bool,
}

fn nice_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if hi.is_nan() || lo.is_nan() || hi <= lo {
        return vec![lo];
    }
    let raw = (hi - lo) / n as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut ticks = Vec::new();
    while t <= hi + step * 1e-9 {
        ticks.push(t);
        t += step;
    }
    ticks
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() < 1e-2 || v.abs() >= 1e5 {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series<'_>]) -> String {
    const W: f64 = 720.0;
    const H: f64 = 420.0;
    const L: f64 = 80.0;
    const R: f64 = 20.0;
    const T: f64 = 40.0;
    const B: f64 = 50.0;
    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + y0.abs().max(1e-12);
    }
    y0 = y0.min(0.0);
    let px = |x: f64| L + (x - x0) / (x1 - x0) * (W - L - R);
    let py = |y: f64| H - B - (y - y0) / (y1 - y0) * (H - T - B);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{title}</text>"#,
        W / 2.0
    );
    for t in nice_ticks(y0, y1, 6) {
        let y = py(t);
        let _ = writeln!(
            svg,
            r##"<line x1="{L}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#e0e0e0"/>"##,
            W - R
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            L - 6.0,
            y + 4.0,
            fmt_tick(t)
        );
    }
    for t in nice_ticks(x0, x1, 8) {
        let x = px(t);
        let _ = writeln!(
            svg,
            r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#,
            H - B,
            H - B + 5.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            H - B + 18.0,
            fmt_tick(t)
        );
    }
    let _ = writeln!(
        svg,
        r#"<polyline points="{L},{T} {L},{} {},{}" fill="none" stroke="black"/>"#,
        H - B,
        W - R,
        H - B
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#,
        (L + W - R) / 2.0,
        H - 10.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{0}" text-anchor="middle" transform="rotate(-90 18 {0})">{y_label}</text>"#,
        (T + H - B) / 2.0
    );
    for (i, s) in series.iter().enumerate() {
        if s.markers {
            for &(x, y) in &s.points {
                let _ = writeln!(
                    svg,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}"/>"#,
                    px(x),
                    py(y),
                    s.color
                );
            }
        } else if !s.points.is_empty() {
            let pts: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
                pts.join(" "),
                s.color
            );
        }
        let ly = T + 8.0 + 16.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{}" y="{:.2}" width="12" height="3" fill="{}"/>"#,
            W - R - 150.0,
            ly - 4.0,
            s.color
        );
        let _ = writeln!(svg, r#"<text x="{}" y="{ly:.2}">{}</text>"#, W - R - 132.0, s.label);
    }
    svg.push_str("</svg>\n");
    svg
}

fn metrics_line(m: &Metrics) -> String {
    format!(
        "Jaccard {:.4}  DSC {:.4}  Recall {:.4}  Prec. {:.4}  Acc. {:.4}  F2 {:.4}",
        m.jaccard, m.dsc, m.recall, m.precision, m.accuracy, m.f2
    )
}

/// Read `<run_dir>/history.jsonl` and write `lr.svg`, `loss.svg`,
/// `plot_data.csv` and `summary.txt` into `<run_dir>/report/`.
pub fn write_report(run_dir: &Path) -> Result<ReportFiles, TrainError> {
    let history_path = run_dir.join(HISTORY_FILE);
    if !history_path.is_file() {
        return Err(TrainError::Io {
            path: history_path,
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no training history in run directory"),
        });
    }
    let records = read_history(&history_path)?;
    let mut lr = Vec::new();
    let mut loss = Vec::new();
    let mut csv = String::from("step,epoch,lr,momentum,loss\n");
    let mut val_loss = Vec::new();
    let mut epochs = Vec::new();
    for r in &records {
        match r {
            HistoryRecord::Step {
                step,
                epoch,
                lr: l,
                momentum,
                loss: v,
            } => {
                lr.push((*step as f64, *l));
                loss.push((*step as f64, *v));
                let _ = writeln!(csv, "{step},{epoch},{l},{momentum},{v}");
            }
            HistoryRecord::Epoch {
                epoch,
                step,
                train_loss,
                val_loss: vl,
                val_metrics,
            } => {
                if let Some(v) = vl {
                    val_loss.push((*step as f64, *v));
                }
                epochs.push((*epoch, *train_loss, *vl, *val_metrics));
            }
        }
    }
    let out = run_dir.join("report");
    std::fs::create_dir_all(&out).map_err(|e| TrainError::io(&out, e))?;
    let files = ReportFiles {
        lr_plot: out.join("lr.svg"),
        loss_plot: out.join("loss.svg"),
        plot_data: out.join("plot_data.csv"),
        summary: out.join("summary.txt"),
    };

    let lr_svg = line_chart(
        "Learning rate",
        "step",
        "learning rate",
        &[Series {
            label: "lr",
            color: "#1f77b4",
            points: lr,
            markers: false,
        }],
    );
    let loss_svg = line_chart(
        "Loss",
        "step",
        "binary cross-entropy",
        &[
            Series {
                label: "train (per step)",
                color: "#1f77b4",
                points: loss,
                markers: false,
            },
            Series {
                label: "validation",
                color: "#d62728",
                points: val_loss,
                markers: true,
            },
        ],
    );

    let mut summary = String::new();
    let steps = records
        .iter()
        .filter(|r| matches!(r, HistoryRecord::Step { .. }))
        .count();
    let _ = writeln!(summary, "run: {}", run_dir.display());
    let _ = writeln!(summary, "steps: {steps}");
    let _ = writeln!(summary, "epochs: {}", epochs.len());
    if let Some((epoch, train_loss, vl, vm)) = epochs.last() {
        let _ = writeln!(summary, "final epoch: {}", epoch + 1);
        let _ = writeln!(summary, "final train loss: {train_loss:.6}");
        if let Some(v) = vl {
            let _ = writeln!(summary, "final validation loss: {v:.6}");
        }
        if let Some(m) = vm {
            let _ = writeln!(summary, "final validation: {}", metrics_line(m));
        }
    }
    let mut best: Option<(usize, Metrics)> = None;
    for (epoch, _, _, vm) in &epochs {
        if let Some(m) = vm {
            if best.is_none_or(|(_, b)| m.dsc > b.dsc) {
                best = Some((*epoch, *m));
            }
        }
    }
    match best {
        Some((epoch, m)) => {
            let _ = writeln!(summary, "best validation epoch: {}", epoch + 1);
            let _ = writeln!(summary, "best validation: {}", metrics_line(&m));
        }
        None => summary.push_str("no validation metrics recorded\n"),
    }

    for (path, text) in [
        (&files.lr_plot, lr_svg),
        (&files.loss_plot, loss_svg),
        (&files.plot_data, csv),
        (&files.summary, summary),
    ] {
        write_atomic(path, text.as_bytes()).map_err(|e| TrainError::io(path, e))?;
    }
    Ok(files)
}
