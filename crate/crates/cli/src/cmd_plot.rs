use std::fs;
use std::path::PathBuf;

use clap::Args;

use quadstep::error::{Error, Result};
use quadstep::io::{read_csv, Csv};

use crate::svg::{five_numbers, heat_color, Canvas};

/// Render the campaign report CSVs as self-contained SVG plots.
#[derive(Args, Debug)]
pub struct PlotArgs {
    /// Campaign output directory (the one eval wrote).
    #[arg(long)]
    pub dir: PathBuf,
    /// Plot output directory; defaults to <dir>/plots.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training-curve CSV (from train-policy); defaults to
    /// <dir>/training_curve.csv when present.
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

const W: f64 = 640.0;
const H: f64 = 360.0;
const MARGIN: f64 = 56.0;

fn empty_plot(title: &str) -> String {
    let mut c = Canvas::new(W, H);
    c.text(W / 2.0, 24.0, 14.0, "middle", title);
    c.line(MARGIN, H - MARGIN, W - MARGIN, H - MARGIN, "#333333");
    c.line(MARGIN, MARGIN, MARGIN, H - MARGIN, "#333333");
    c.text(
        W / 2.0,
        H / 2.0,
        12.0,
        "middle",
        "warning: empty campaign, nothing to aggregate",
    );
    c.finish()
}

/// Distinct values of a column, in first-appearance order.
fn distinct(csv: &Csv, col: usize) -> Vec<String> {
    let mut seen = Vec::new();
    for row in &csv.rows {
        let v = &row.fields[col];
        if !seen.contains(v) {
            seen.push(v.clone());
        }
    }
    seen
}

fn plot_tracking(csv: &Csv) -> Result<String> {
    let planner_col = csv.column("planner")?;
    let err_col = csv.column("mean_err_vx")?;
    if csv.rows.is_empty() {
        return Ok(empty_plot("x-velocity tracking error by planner"));
    }
    let planners = distinct(csv, planner_col);
    let mut groups: Vec<(String, Vec<f64>)> = Vec::new();
    for p in &planners {
        let mut vals = Vec::new();
        for row in csv.rows.iter().filter(|r| &r.fields[planner_col] == p) {
            vals.push(csv.f64(row, err_col)?);
        }
        groups.push((p.clone(), vals));
    }
    let top = groups
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .fold(0.0_f64, f64::max)
        .max(1e-6)
        * 1.15;

    let mut c = Canvas::new(W, H);
    c.text(W / 2.0, 24.0, 14.0, "middle", "x-velocity tracking error by planner");
    c.line(MARGIN, H - MARGIN, W - MARGIN, H - MARGIN, "#333333");
    c.line(MARGIN, MARGIN, MARGIN, H - MARGIN, "#333333");
    let y_of = |v: f64| H - MARGIN - (v / top) * (H - 2.0 * MARGIN);
    for frac in [0.0, 0.5, 1.0] {
        let v = top * frac;
        c.text(MARGIN - 6.0, y_of(v) + 4.0, 10.0, "end", &format!("{v:.3}"));
        c.line(MARGIN - 3.0, y_of(v), MARGIN, y_of(v), "#333333");
    }
    c.text(16.0, H / 2.0, 11.0, "middle", "m/s");

    let slot = (W - 2.0 * MARGIN) / groups.len() as f64;
    for (k, (name, vals)) in groups.iter().enumerate() {
        let cx = MARGIN + slot * (k as f64 + 0.5);
        let bw = (slot * 0.4).min(60.0);
        let (min, q1, med, q3, max) = five_numbers(vals);
        c.line(cx, y_of(min), cx, y_of(q1), "#333333");
        c.line(cx, y_of(q3), cx, y_of(max), "#333333");
        c.line(cx - bw / 4.0, y_of(min), cx + bw / 4.0, y_of(min), "#333333");
        c.line(cx - bw / 4.0, y_of(max), cx + bw / 4.0, y_of(max), "#333333");
        c.rect(cx - bw / 2.0, y_of(q3), bw, (y_of(q1) - y_of(q3)).max(0.5), "#9fc5e8");
        c.line(cx - bw / 2.0, y_of(med), cx + bw / 2.0, y_of(med), "#c00000");
        c.text(cx, H - MARGIN + 16.0, 10.0, "middle", name);
        c.text(cx, y_of(med) - 4.0, 9.0, "middle", &format!("{med:.4}"));
    }
    Ok(c.finish())
}

fn plot_disturbance(csv: &Csv) -> Result<String> {
    let planner_col = csv.column("planner")?;
    let mag_col = csv.column("magnitude")?;
    let rate_col = csv.column("success_rate")?;
    if csv.rows.is_empty() {
        return Ok(empty_plot("success rate under lateral pushes"));
    }
    let planners = distinct(csv, planner_col);
    let mags = distinct(csv, mag_col);
    let mut c = Canvas::new(W, H);
    c.text(W / 2.0, 24.0, 14.0, "middle", "success rate under lateral pushes");
    let grid_w = W - 2.0 * MARGIN - 60.0;
    let grid_h = H - 2.0 * MARGIN;
    let cw = grid_w / mags.len() as f64;
    let ch = grid_h / planners.len() as f64;
    let x0 = MARGIN + 60.0;
    for (i, p) in planners.iter().enumerate() {
        let y = MARGIN + ch * i as f64;
        c.text(x0 - 8.0, y + ch / 2.0 + 4.0, 10.0, "end", p);
        for (j, m) in mags.iter().enumerate() {
            let x = x0 + cw * j as f64;
            let row = csv
                .rows
                .iter()
                .find(|r| &r.fields[planner_col] == p && &r.fields[mag_col] == m);
            match row {
                Some(row) => {
                    let rate = csv.f64(row, rate_col)?;
                    c.rect(x, y, cw, ch, &heat_color(rate));
                    // the raw CSV field, so the plot is auditable against it
                    c.text(
                        x + cw / 2.0,
                        y + ch / 2.0 + 4.0,
                        10.0,
                        "middle",
                        &row.fields[rate_col],
                    );
                }
                None => c.rect(x, y, cw, ch, "#dddddd"),
            }
        }
    }
    for (j, m) in mags.iter().enumerate() {
        let x = x0 + cw * (j as f64 + 0.5);
        c.text(x, H - MARGIN + 16.0, 10.0, "middle", &format!("{m} N"));
    }
    Ok(c.finish())
}

fn plot_curves(csv: &Csv) -> Result<String> {
    let iter_col = csv.column("iteration")?;
    let succ_col = csv.column("success_rate")?;
    let tr_col = csv.column("tr_violation_pct")?;
    let lc_col = csv.column("lc_violation_pct")?;
    let kf_col = csv.column("kf_violation_pct")?;
    if csv.rows.is_empty() {
        return Ok(empty_plot("training curves"));
    }
    let mut iters = Vec::new();
    let mut succ = Vec::new();
    let mut viol = [Vec::new(), Vec::new(), Vec::new()];
    for row in &csv.rows {
        iters.push(csv.f64(row, iter_col)?);
        succ.push(csv.f64(row, succ_col)?);
        viol[0].push(csv.f64(row, tr_col)?);
        viol[1].push(csv.f64(row, lc_col)?);
        viol[2].push(csv.f64(row, kf_col)?);
    }
    let x_max = iters.iter().copied().fold(1.0_f64, f64::max);
    let v_max = viol
        .iter()
        .flat_map(|v| v.iter().copied())
        .fold(1.0_f64, f64::max)
        * 1.15;

    let mut c = Canvas::new(W, H);
    c.text(W / 2.0, 24.0, 14.0, "middle", "training: success rate and audited violations");
    let half = (W - 3.0 * MARGIN) / 2.0;
    // left panel: success rate in [0,1]
    let lx = |i: f64| MARGIN + (i / x_max) * half;
    let ly = |v: f64| H - MARGIN - v.clamp(0.0, 1.0) * (H - 2.0 * MARGIN);
    c.line(MARGIN, H - MARGIN, MARGIN + half, H - MARGIN, "#333333");
    c.line(MARGIN, MARGIN, MARGIN, H - MARGIN, "#333333");
    c.polyline(
        &iters.iter().zip(&succ).map(|(&i, &s)| (lx(i), ly(s))).collect::<Vec<_>>(),
        "#1155cc",
    );
    c.text(MARGIN + half / 2.0, H - MARGIN + 16.0, 10.0, "middle", "iteration");
    c.text(MARGIN, MARGIN - 8.0, 10.0, "start", "success rate");

    // right panel: violation percentages
    let rx0 = 2.0 * MARGIN + half;
    let rx = |i: f64| rx0 + (i / x_max) * half;
    let ry = |v: f64| H - MARGIN - (v / v_max) * (H - 2.0 * MARGIN);
    c.line(rx0, H - MARGIN, rx0 + half, H - MARGIN, "#333333");
    c.line(rx0, MARGIN, rx0, H - MARGIN, "#333333");
    for (vals, color, label, dy) in [
        (&viol[0], "#cc0000", "TR %", 0.0),
        (&viol[1], "#e69138", "LC %", 12.0),
        (&viol[2], "#6aa84f", "KF %", 24.0),
    ] {
        c.polyline(
            &iters.iter().zip(vals.iter()).map(|(&i, &v)| (rx(i), ry(v))).collect::<Vec<_>>(),
            color,
        );
        c.text(rx0 + half - 4.0, MARGIN + 10.0 + dy, 10.0, "end", label);
    }
    c.text(rx0 + half / 2.0, H - MARGIN + 16.0, 10.0, "middle", "iteration");
    Ok(c.finish())
}

pub fn run(args: &PlotArgs) -> Result<()> {
    if !args.dir.is_dir() {
        return Err(Error::missing(format!(
            "campaign directory {}",
            args.dir.display()
        )));
    }
    let out = args.out.clone().unwrap_or_else(|| args.dir.join("plots"));
    fs::create_dir_all(&out)?;
    let mut written: Vec<PathBuf> = Vec::new();

    let episodes = read_csv(args.dir.join("episodes.csv"))?;
    let path = out.join("tracking_box.svg");
    fs::write(&path, plot_tracking(&episodes)?)?;
    written.push(path);

    let disturbance = read_csv(args.dir.join("disturbance.csv"))?;
    let path = out.join("disturbance_grid.svg");
    fs::write(&path, plot_disturbance(&disturbance)?)?;
    written.push(path);

    let curve_path: Option<PathBuf> = args.curve.clone().or_else(|| {
        let p = args.dir.join("training_curve.csv");
        p.exists().then_some(p)
    });
    if let Some(curve) = curve_path {
        let csv = read_csv(&curve)?;
        let path = out.join("training_curves.svg");
        fs::write(&path, plot_curves(&csv)?)?;
        written.push(path);
    }

    for p in &written {
        println!("wrote {}", p.display());
    }
    Ok(())
}
