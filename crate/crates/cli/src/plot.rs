use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use tsnode::metrics::{history_from_csv, prefix_len, smoothed_log_curve, FRACTIONS};
use tsnode::odeint::{integrate_partial, VectorField};
use tsnode::systems::System;
use tsnode::{Dataset, Trajectory};

use crate::data::build_dataset;
use crate::manifest::ExperimentManifest;
use crate::runs::load_model;
use crate::svg::{padded_range, Frame, Svg, PALETTE};
use crate::write_file;

/// Arrows per axis in vector-field plots.
pub const FIELD_GRID: usize = 25;
/// Moving-average window applied to logged error curves.
pub const CURVE_WINDOW: usize = 5;

/// Plot box for each system, chosen so the grid hits the equilibria.
pub fn field_bounds(system: &System) -> ((f64, f64), (f64, f64)) {
    match system {
        System::Cubic { .. } => ((-3.6, 3.6), (-3.6, 3.6)),
        System::LotkaVolterra { .. } => ((0.0, 2.4), (0.0, 2.4)),
        System::Pendulum { .. } => ((-3.6, 3.6), (-3.6, 3.6)),
    }
}

fn grid_value(lo: f64, hi: f64, i: usize, n: usize) -> f64 {
    lo + (hi - lo) * i as f64 / (n - 1) as f64
}

/// Vector field sampled on an `n x n` grid, as SVG arrows and as CSV rows
/// `x,y,u,v,magnitude`.
pub fn vector_field_plot<F: VectorField<f64>>(field: &F, bounds: ((f64, f64), (f64, f64)), n: usize, title: &str) -> (String, String) {
    let ((x0, x1), (y0, y1)) = bounds;
    let mut scratch = field.scratch();
    let mut samples = Vec::with_capacity(n * n);
    let mut out = [0.0; 2];
    for j in 0..n {
        for i in 0..n {
            let (x, y) = (grid_value(x0, x1, i, n), grid_value(y0, y1, j, n));
            field.eval(&[x, y], &mut out, &mut scratch);
            samples.push((x, y, out[0], out[1]));
        }
    }
    let mut csv = String::from("x,y,u,v,magnitude\n");
    for &(x, y, u, v) in &samples {
        let _ = writeln!(csv, "{x},{y},{u},{v},{}", u.hypot(v));
    }

    let frame = Frame { x: 60.0, y: 40.0, w: 440.0, h: 440.0, xr: (x0, x1), yr: (y0, y1) };
    let mut svg = Svg::new(540.0, 530.0);
    svg.text(280.0, 22.0, 14.0, "middle", title);
    frame.axes(&mut svg, "x1", "x2");
    let max_mag = samples
        .iter()
        .map(|s| s.2.hypot(s.3))
        .filter(|m| m.is_finite())
        .fold(0.0, f64::max);
    let cell = frame.w / (n - 1) as f64 * 0.9;
    for &(x, y, u, v) in &samples {
        let (px, py) = frame.map(x, y);
        let mag = u.hypot(v);
        if !(mag > 0.0) || !mag.is_finite() || max_mag == 0.0 {
            svg.circle(px, py, 1.2, "#888");
            continue;
        }
        let len = cell * (mag / max_mag).sqrt();
        let (dx, dy) = (u / mag * len, -v / mag * len);
        let (ex, ey) = (px + dx, py + dy);
        svg.line(px, py, ex, ey, "#1f4e79", 1.0);
        let (hx, hy) = (dx / len * 3.0, dy / len * 3.0);
        svg.line(ex, ey, ex - hx - hy * 0.6, ey - hy + hx * 0.6, "#1f4e79", 1.0);
        svg.line(ex, ey, ex - hx + hy * 0.6, ey - hy - hx * 0.6, "#1f4e79", 1.0);
    }
    (svg.finish(), csv)
}

/// Ground truth against model rollouts in phase space, one panel per
/// horizon fraction. CSV rows carry the per-point deviation.
pub fn phase_overlay(truth: &Trajectory, model: &Trajectory, title: &str) -> (String, String) {
    let n = truth.len();
    let mut csv = String::from("fraction,index,t,true_x1,true_x2,model_x1,model_x2,deviation\n");
    for &f in &FRACTIONS {
        for i in 0..prefix_len(f, n) {
            let t = truth.row(i);
            let (m1, m2, dev) = if i < model.len() {
                let m = model.row(i);
                (m[0].to_string(), m[1].to_string(), (t[0] - m[0]).hypot(t[1] - m[1]).to_string())
            } else {
                ("nan".into(), "nan".into(), "nan".into())
            };
            let _ = writeln!(csv, "{f},{i},{},{},{},{m1},{m2},{dev}", truth.times()[i], t[0], t[1]);
        }
    }

    let xr = padded_range(truth.rows().map(|r| r[0]), 0.15);
    let yr = padded_range(truth.rows().map(|r| r[1]), 0.15);
    let panel = 200.0;
    let gap = 60.0;
    let mut svg = Svg::new(gap + FRACTIONS.len() as f64 * (panel + gap), panel + 110.0);
    svg.text(svg_mid(FRACTIONS.len(), panel, gap), 20.0, 14.0, "middle", title);
    for (k, &f) in FRACTIONS.iter().enumerate() {
        let frame = Frame { x: gap + k as f64 * (panel + gap), y: 50.0, w: panel, h: panel, xr, yr };
        let id = format!("clip{k}");
        svg.clip_rect(&id, frame.x, frame.y, frame.w, frame.h);
        frame.axes(&mut svg, "x1", "x2");
        svg.text(frame.x + panel / 2.0, 44.0, 11.0, "middle", &format!("{:.0}% horizon", f * 100.0));
        let rows = prefix_len(f, n);
        let tp: Vec<(f64, f64)> = truth.rows().take(rows).map(|r| frame.map(r[0], r[1])).collect();
        let mp: Vec<(f64, f64)> = model.rows().take(rows).map(|r| frame.map(r[0], r[1])).collect();
        svg.polyline(&tp, "#000", 1.6, false, Some(&id));
        svg.polyline(&mp, "#d62728", 1.2, true, Some(&id));
        let (sx, sy) = frame.map(truth.row(0)[0], truth.row(0)[1]);
        svg.circle(sx, sy, 3.0, "#000");
    }
    (svg.finish(), csv)
}

fn svg_mid(panels: usize, panel: f64, gap: f64) -> f64 {
    (gap + panels as f64 * (panel + gap)) / 2.0
}

/// Smoothed log 100% rollouts error against iteration, one curve per run.
pub fn error_curves(runs: &[(String, Vec<(usize, f64)>)]) -> (String, String) {
    let curves: Vec<(String, Vec<(usize, f64)>)> = runs
        .iter()
        .map(|(name, series)| (name.clone(), smoothed_log_curve(series, CURVE_WINDOW)))
        .collect();
    let mut csv = String::from("run,iter,log_rollouts_error\n");
    for (name, c) in &curves {
        for (it, v) in c {
            let _ = writeln!(csv, "{name},{it},{v}");
        }
    }
    let xr = padded_range(curves.iter().flat_map(|(_, c)| c.iter().map(|p| p.0 as f64)), 0.0);
    let yr = padded_range(curves.iter().flat_map(|(_, c)| c.iter().map(|p| p.1)), 0.05);
    let frame = Frame { x: 70.0, y: 40.0, w: 520.0, h: 320.0, xr, yr };
    let mut svg = Svg::new(820.0, 410.0);
    svg.text(330.0, 22.0, 14.0, "middle", "log rollouts error (100% horizon), smoothed");
    frame.axes(&mut svg, "iteration", "ln error");
    for (k, (name, c)) in curves.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<(f64, f64)> = c.iter().filter(|p| p.1.is_finite()).map(|p| frame.map(p.0 as f64, p.1)).collect();
        svg.polyline(&pts, color, 1.5, false, None);
        let ly = 50.0 + 16.0 * k as f64;
        svg.line(610.0, ly - 4.0, 630.0, ly - 4.0, color, 2.0);
        svg.text(636.0, ly, 11.0, "start", name);
    }
    (svg.finish(), csv)
}

fn write_pair(dir: &Path, stem: &str, (svg, csv): (String, String)) -> Result<()> {
    write_file(&dir.join(format!("{stem}.svg")), &svg)?;
    write_file(&dir.join(format!("{stem}.csv")), &csv)
}

fn rollout_or_prefix<F: VectorField<f64>>(field: &F, ds: &Dataset, y0: &[f64]) -> Result<Trajectory> {
    let times = ds.spec.times::<f64>();
    let (traj, _) = integrate_partial(field, y0, &times, ds.spec.substeps)?;
    Ok(traj)
}

/// Writes every figure for the given runs (all runs when empty) into
/// `<out>/figures`.
pub fn plot(manifest: &ExperimentManifest, run_dirs: &[PathBuf]) -> Result<PathBuf> {
    let ds = build_dataset(manifest)?;
    let out = manifest.output_dir.join("figures");
    let dirs: Vec<PathBuf> = if run_dirs.is_empty() {
        let mut d: Vec<PathBuf> = std::fs::read_dir(manifest.runs_dir())
            .map(|it| it.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect())
            .unwrap_or_default();
        d.sort();
        d
    } else {
        run_dirs.to_vec()
    };
    let system = &ds.spec.system;
    let bounds = field_bounds(system);
    let truth = &ds.test_full[0];

    let gt = rollout_or_prefix(system, &ds, truth.initial())?;
    write_pair(&out, "phase_ground_truth", phase_overlay(truth, &gt, &format!("{} ground truth", system.name())))?;
    write_pair(&out, "field_ground_truth", vector_field_plot(system, bounds, FIELD_GRID, &format!("{} vector field", system.name())))?;

    let mut curves = Vec::new();
    for dir in &dirs {
        let (record, net) = load_model(dir).with_context(|| format!("run artifacts in {}", dir.display()))?;
        let metrics_path = dir.join("metrics.csv");
        let text = std::fs::read_to_string(&metrics_path).with_context(|| format!("reading {}", metrics_path.display()))?;
        let history = history_from_csv(&text).map_err(anyhow::Error::msg).with_context(|| metrics_path.display().to_string())?;
        curves.push((record.name.clone(), history.iter().map(|r| (r.iteration, r.rollouts_error[4])).collect()));
        let model = rollout_or_prefix(&net, &ds, truth.initial())?;
        let title = format!("{} {} ({})", system.name(), record.name, record.model);
        write_pair(&out, &format!("phase_{}", record.name), phase_overlay(truth, &model, &title))?;
        write_pair(&out, &format!("field_{}", record.name), vector_field_plot(&net, bounds, FIELD_GRID, &title))?;
    }
    if !curves.is_empty() {
        write_pair(&out, "error_curves", error_curves(&curves))?;
    }
    Ok(out)
}
