//! The frame loop: prior -> visibility -> solve -> register -> fuse ->
//! filter -> node regeneration, with a metrics stream, per-frame logs,
//! and PLY exports.
//!
//! Runs are deterministic functions of their configuration: logs and
//! metrics carry no wall-clock content unless timings are explicitly
//! enabled.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::energy::{build_snapshot, data_residuals, EnergyParams, FrameProblem};
use crate::fusion::{
    compute_model_skinning, filter_points, fuse_frame, lift_scan, register, tsdw, FusionOutcome,
    FusionParams, ModelPoint, RegistrationMap,
};
use crate::io::kv;
use crate::posefeed::{apply_prior, FrameEnvelope, FrameFeed};
use crate::solver::{solve, SolveReport, SolverConfig, Termination};
use crate::synth::{render_frame, ErrorReport, SceneSpec, TruthFrame};
use crate::warpfield::WarpField;
use crate::{Error, Result, Vec3};

/// Where frames come from.
pub enum InputMode {
    Synthetic(SceneSpec),
    Offline(PathBuf),
}

pub struct RunConfig {
    pub input: InputMode,
    pub energy: EnergyParams,
    pub fusion: FusionParams,
    pub solver: SolverConfig,
    /// Nodes blended per point.
    pub skin_count: usize,
    /// Node grid cell size, mm.
    pub node_grid: f64,
    /// Neighbors per node in the regularization graph.
    pub node_neighbors: usize,
    pub use_prior: bool,
    pub use_correspondences: bool,
    /// Export a model snapshot every N frames (0 = final only).
    pub export_every: usize,
    /// Skip fusing frames whose mean point-to-plane residual exceeds this
    /// (0 disables the gate).
    pub discard_residual: f64,
    pub output_dir: PathBuf,
    /// Adds a wall-clock column to the metrics stream; off by default so
    /// identical runs produce byte-identical outputs.
    pub include_timings: bool,
    pub verbose: bool,
}

impl RunConfig {
    pub fn new(input: InputMode, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            input,
            energy: EnergyParams::default(),
            fusion: FusionParams::default(),
            solver: SolverConfig::default(),
            skin_count: 4,
            node_grid: 4.0,
            node_neighbors: 4,
            use_prior: true,
            use_correspondences: true,
            export_every: 0,
            discard_residual: 0.0,
            output_dir: output_dir.into(),
            include_timings: false,
            verbose: false,
        }
    }

    /// Override tunables from a key=value file; unknown keys are
    /// rejected, missing keys keep their current values.
    pub fn apply_params_file(&mut self, path: &Path) -> Result<()> {
        let map = kv::parse_file(path)?;
        let known = [
            "w_rot", "w_reg", "w_data", "w_corr", "w_r", "w_p", "visibility_dist",
            "visibility_angle_deg", "reg_edge_weight", "truncation", "depth_gate",
            "angle_gate_deg", "weight_cap", "time_window", "stable_weight", "point_grid",
            "max_iterations", "initial_damping", "damping_up", "damping_down",
            "convergence_tol", "step_tol", "skin_count", "node_grid", "node_neighbors",
            "export_every", "discard_residual",
        ];
        for key in map.keys() {
            if !known.contains(&key.as_str()) {
                return Err(Error::parse(
                    path.display().to_string(),
                    format!("unknown parameter {key:?}"),
                ));
            }
        }
        let e = &mut self.energy;
        e.w_rot = kv::get_f64_or(&map, "w_rot", e.w_rot, path)?;
        e.w_reg = kv::get_f64_or(&map, "w_reg", e.w_reg, path)?;
        e.w_data = kv::get_f64_or(&map, "w_data", e.w_data, path)?;
        e.w_corr = kv::get_f64_or(&map, "w_corr", e.w_corr, path)?;
        e.w_r = kv::get_f64_or(&map, "w_r", e.w_r, path)?;
        e.w_p = kv::get_f64_or(&map, "w_p", e.w_p, path)?;
        e.visibility_dist = kv::get_f64_or(&map, "visibility_dist", e.visibility_dist, path)?;
        e.visibility_angle_deg =
            kv::get_f64_or(&map, "visibility_angle_deg", e.visibility_angle_deg, path)?;
        e.reg_edge_weight = kv::get_f64_or(&map, "reg_edge_weight", e.reg_edge_weight, path)?;
        let f = &mut self.fusion;
        f.truncation = kv::get_f64_or(&map, "truncation", f.truncation, path)?;
        f.depth_gate = kv::get_f64_or(&map, "depth_gate", f.depth_gate, path)?;
        f.angle_gate_deg = kv::get_f64_or(&map, "angle_gate_deg", f.angle_gate_deg, path)?;
        f.weight_cap = kv::get_f64_or(&map, "weight_cap", f.weight_cap, path)?;
        f.time_window = kv::get_usize_or(&map, "time_window", f.time_window, path)?;
        f.stable_weight = kv::get_f64_or(&map, "stable_weight", f.stable_weight, path)?;
        f.point_grid = kv::get_f64_or(&map, "point_grid", f.point_grid, path)?;
        let s = &mut self.solver;
        s.max_iterations = kv::get_usize_or(&map, "max_iterations", s.max_iterations, path)?;
        s.initial_damping = kv::get_f64_or(&map, "initial_damping", s.initial_damping, path)?;
        s.damping_up = kv::get_f64_or(&map, "damping_up", s.damping_up, path)?;
        s.damping_down = kv::get_f64_or(&map, "damping_down", s.damping_down, path)?;
        s.convergence_tol = kv::get_f64_or(&map, "convergence_tol", s.convergence_tol, path)?;
        s.step_tol = kv::get_f64_or(&map, "step_tol", s.step_tol, path)?;
        self.skin_count = kv::get_usize_or(&map, "skin_count", self.skin_count, path)?;
        self.node_grid = kv::get_f64_or(&map, "node_grid", self.node_grid, path)?;
        self.node_neighbors = kv::get_usize_or(&map, "node_neighbors", self.node_neighbors, path)?;
        self.export_every = kv::get_usize_or(&map, "export_every", self.export_every, path)?;
        self.discard_residual =
            kv::get_f64_or(&map, "discard_residual", self.discard_residual, path)?;
        Ok(())
    }
}

/// Everything the run exposes about one processed frame, for tests and
/// diagnostics.
pub struct FrameInspection<'a> {
    pub frame: usize,
    pub field: &'a WarpField,
    pub model_before_filter: &'a [ModelPoint],
    pub model: &'a [ModelPoint],
    pub registration: Option<&'a RegistrationMap>,
    pub outcome: Option<FusionOutcome>,
    pub report: Option<&'a SolveReport>,
    pub truth: Option<&'a TruthFrame>,
    pub error: Option<ErrorReport>,
    pub discarded: bool,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub frames: usize,
    pub discarded: usize,
    pub stalled: usize,
    pub final_model_points: usize,
    pub drops: u64,
    /// Final-frame accuracy, synthetic runs only.
    pub final_error: Option<ErrorReport>,
    pub max_pose_error_mm: Option<f64>,
    pub metrics_path: PathBuf,
}

struct RunLogger {
    file: BufWriter<File>,
    verbose: bool,
}

impl RunLogger {
    fn line(&mut self, text: &str) -> Result<()> {
        writeln!(self.file, "{text}").map_err(|e| Error::io("writing run.log", e))?;
        if self.verbose {
            eprintln!("{text}");
        }
        Ok(())
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Run the pipeline. See [`run_with_inspector`] for the hook variant.
pub fn run(config: &RunConfig) -> Result<RunSummary> {
    run_with_inspector(config, &mut |_| {})
}

pub fn run_with_inspector(
    config: &RunConfig,
    inspect: &mut dyn FnMut(&FrameInspection),
) -> Result<RunSummary> {
    config.solver.validate()?;
    config.fusion.validate()?;
    if config.skin_count < 1 || config.node_neighbors < 1 || !(config.node_grid > 0.0) {
        return Err(Error::Config("skin_count, node_neighbors, node_grid must be positive".into()));
    }
    std::fs::create_dir_all(&config.output_dir)
        .map_err(|e| Error::io(format!("creating {}", config.output_dir.display()), e))?;
    let metrics_path = config.output_dir.join("metrics.csv");
    let mut metrics = BufWriter::new(
        File::create(&metrics_path).map_err(|e| Error::io("creating metrics.csv", e))?,
    );
    let mut header = vec![
        "frame", "visible", "residuals", "iterations", "initial_energy", "final_energy",
        "e_rot", "e_reg", "e_data", "e_corr", "e_pose_r", "e_pose_t", "mean_data_residual",
        "registered", "new_points", "model_points", "nodes", "prior_applied", "discarded",
        "stalled", "drops", "mean_tsdw", "pose_err_deg", "pose_err_mm", "nn_dist",
        "plane_residual",
    ];
    if config.include_timings {
        header.push("duration_ms");
    }
    writeln!(metrics, "{}", header.join(",")).map_err(|e| Error::io("writing metrics.csv", e))?;
    let energy_path = config.output_dir.join("energy.csv");
    let mut energy_csv = BufWriter::new(
        File::create(&energy_path).map_err(|e| Error::io("creating energy.csv", e))?,
    );
    writeln!(
        energy_csv,
        "frame,iteration,lambda,accepted,energy_before,energy_after,e_rot,e_reg,e_data,e_corr,e_pose_r,e_pose_t,step_norm,visible"
    )
    .map_err(|e| Error::io("writing energy.csv", e))?;
    let mut logger = RunLogger {
        file: BufWriter::new(
            File::create(config.output_dir.join("run.log"))
                .map_err(|e| Error::io("creating run.log", e))?,
        ),
        verbose: config.verbose,
    };

    // frames pass through the latest-wins feed even in this synchronous
    // loop, so drop accounting and ordering rules always apply
    let feed = FrameFeed::new();
    let mut truths: Vec<Option<TruthFrame>> = Vec::new();
    let mut envelopes: Vec<FrameEnvelope> = Vec::new();
    match &config.input {
        InputMode::Synthetic(spec) => {
            for frame in 0..spec.frames {
                let rendered = render_frame(spec, frame)?;
                envelopes.push(FrameEnvelope {
                    scan: rendered.scan,
                    prior: Some(rendered.prior),
                    correspondences: rendered.correspondences,
                });
                truths.push(Some(rendered.truth));
            }
        }
        InputMode::Offline(dir) => {
            for envelope in crate::posefeed::read_offline_dir(dir)? {
                envelopes.push(envelope);
                truths.push(None);
            }
        }
    }

    let mut model: Vec<ModelPoint> = Vec::new();
    let mut field: Option<WarpField> = None;
    let mut summary = RunSummary {
        frames: 0,
        discarded: 0,
        stalled: 0,
        final_model_points: 0,
        drops: 0,
        final_error: None,
        max_pose_error_mm: None,
        metrics_path: metrics_path.clone(),
    };

    for (envelope, truth) in envelopes.into_iter().zip(truths) {
        feed.submit(envelope)?;
        let Some(envelope) = feed.take_latest() else { continue };
        let frame = envelope.frame_index();
        let start = std::time::Instant::now();
        let scan = &envelope.scan;
        let prior = if config.use_prior { envelope.prior.as_ref() } else { None };
        let corr: &[crate::posefeed::FeatureCorrespondence] =
            if config.use_correspondences { &envelope.correspondences } else { &[] };

        let mut row: BTreeMap<&str, String> = BTreeMap::new();
        row.insert("frame", frame.to_string());
        row.insert("drops", feed.stats().drops.to_string());

        if model.is_empty() {
            // first frame bootstraps the model from the scan
            let lifted_pose = match prior {
                Some(p) => {
                    let mut f = WarpField {
                        nodes: Vec::new(),
                        rotation: p.rotation,
                        translation: p.translation,
                        skin_count: config.skin_count,
                        grid: config.node_grid,
                    };
                    f.nodes.push(crate::warpfield::EdNode::at(Vec3::zeros()));
                    f
                }
                None => WarpField {
                    nodes: vec![crate::warpfield::EdNode::at(Vec3::zeros())],
                    rotation: crate::Mat3::identity(),
                    translation: Vec3::zeros(),
                    skin_count: config.skin_count,
                    grid: config.node_grid,
                },
            };
            model = lift_scan(scan, &lifted_pose, frame);
            if model.is_empty() {
                return Err(Error::EmptyScan);
            }
            model = filter_points(&model, frame, &config.fusion);
            let positions: Vec<Vec3> = model.iter().map(|p| p.position).collect();
            let mut f = WarpField::from_points(
                &positions,
                config.node_grid,
                config.skin_count,
                config.node_neighbors,
            )?;
            f.rotation = lifted_pose.rotation;
            f.translation = lifted_pose.translation;
            logger.line(&format!(
                "frame {frame:04} stages=prior,lift,filter,regenerate points={} nodes={}",
                model.len(),
                f.nodes.len()
            ))?;
            row.insert("prior_applied", (prior.is_some() as u8).to_string());
            row.insert("model_points", model.len().to_string());
            row.insert("nodes", f.nodes.len().to_string());
            row.insert("registered", "0".into());
            row.insert("new_points", model.len().to_string());
            row.insert("discarded", "0".into());
            row.insert("stalled", "0".into());
            let error = truth.as_ref().map(|t| {
                let positions: Vec<Vec3> = eval_subsample(&model);
                crate::synth::evaluate(&positions, &f.rotation, &f.translation, t)
            });
            let error = match error {
                Some(Ok(e)) => Some(e),
                Some(Err(err)) => return Err(err),
                None => None,
            };
            fill_error_columns(&mut row, &error, &mut summary);
            inspect(&FrameInspection {
                frame,
                field: &f,
                model_before_filter: &model,
                model: &model,
                registration: None,
                outcome: None,
                report: None,
                truth: truth.as_ref(),
                error,
                discarded: false,
            });
            field = Some(f);
            summary.frames += 1;
            summary.final_error = error;
            write_row(&mut metrics, &header, &row, config.include_timings, start)?;
            maybe_export(config, frame, &model)?;
            continue;
        }

        let current = field.as_ref().unwrap();
        let (posed, prior_applied) = apply_prior(current, prior);
        let positions: Vec<Vec3> = model.iter().map(|p| p.position).collect();
        let normals: Vec<Vec3> = model.iter().map(|p| p.normal).collect();
        let skins = compute_model_skinning(&model, &posed);
        let inputs = crate::solver::FrameInputs {
            positions: &positions,
            normals: &normals,
            skins: &skins,
            scan,
            correspondences: corr,
            prior,
        };
        let (solved, report) = solve(&posed, &inputs, &config.energy, &config.solver)?;
        for rec in &report.trace {
            writeln!(
                energy_csv,
                "{frame},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                rec.iteration,
                rec.lambda,
                rec.accepted as u8,
                rec.energy_before,
                rec.energy_after,
                rec.breakdown.rot,
                rec.breakdown.reg,
                rec.breakdown.data,
                rec.breakdown.corr,
                rec.breakdown.pose_rot,
                rec.breakdown.pose_trans,
                rec.step_norm,
                rec.visible,
            )
            .map_err(|e| Error::io("writing energy.csv", e))?;
        }
        let stalled = report.termination == Termination::Stalled;

        // final-state mean point-to-plane residual drives the discard gate
        let problem = FrameProblem {
            positions: &positions,
            normals: &normals,
            skins: &skins,
            scan,
        };
        let snapshot = build_snapshot(&problem, &solved, &config.energy, corr, prior);
        let residuals = data_residuals(&solved, &problem, &snapshot);
        let mean_residual = if residuals.is_empty() {
            0.0
        } else {
            residuals.iter().map(|r| r.abs()).sum::<f64>() / residuals.len() as f64
        };
        let discarded = stalled
            || (config.discard_residual > 0.0 && mean_residual > config.discard_residual);

        row.insert("visible", snapshot.data.len().to_string());
        row.insert("residuals", report.residual_count.to_string());
        row.insert("iterations", report.iterations.to_string());
        row.insert("initial_energy", report.initial_energy.to_string());
        row.insert("final_energy", report.final_energy.to_string());
        if let Some(last) = report.trace.iter().rev().find(|r| r.accepted) {
            row.insert("e_rot", last.breakdown.rot.to_string());
            row.insert("e_reg", last.breakdown.reg.to_string());
            row.insert("e_data", last.breakdown.data.to_string());
            row.insert("e_corr", last.breakdown.corr.to_string());
            row.insert("e_pose_r", last.breakdown.pose_rot.to_string());
            row.insert("e_pose_t", last.breakdown.pose_trans.to_string());
        }
        row.insert("mean_data_residual", mean_residual.to_string());
        row.insert("prior_applied", (prior_applied as u8).to_string());
        row.insert("discarded", (discarded as u8).to_string());
        row.insert("stalled", (stalled as u8).to_string());

        if discarded {
            // skip fusion; the model and the pre-solve pose are kept
            summary.discarded += 1;
            if stalled {
                summary.stalled += 1;
            }
            logger.line(&format!(
                "frame {frame:04} stages=prior,visible,solve DISCARDED mean_residual={mean_residual} stalled={stalled}"
            ))?;
            row.insert("model_points", model.len().to_string());
            row.insert("nodes", posed.nodes.len().to_string());
            let error = frame_error(&model, &posed, truth.as_ref())?;
            fill_error_columns(&mut row, &error, &mut summary);
            inspect(&FrameInspection {
                frame,
                field: &posed,
                model_before_filter: &model,
                model: &model,
                registration: None,
                outcome: None,
                report: Some(&report),
                truth: truth.as_ref(),
                error,
                discarded: true,
            });
            field = Some(posed);
            summary.frames += 1;
            write_row(&mut metrics, &header, &row, config.include_timings, start)?;
            continue;
        }

        let reg = register(&model, &skins, &solved, scan, &config.fusion);
        let mut tsdw_sum = 0.0;
        let mut tsdw_count = 0usize;
        for ((point, skin), hit) in model.iter().zip(&skins).zip(&reg.point_to_pixel) {
            if hit.is_some() {
                tsdw_sum += tsdw(point, skin, &solved, scan, &config.fusion);
                tsdw_count += 1;
            }
        }
        let (fused, outcome) =
            fuse_frame(&model, &skins, &solved, scan, &reg, &config.fusion, frame);
        let filtered = filter_points(&fused, frame, &config.fusion);
        let mut next_field = solved;
        let filtered_positions: Vec<Vec3> = filtered.iter().map(|p| p.position).collect();
        next_field.regenerate_nodes(&filtered_positions, config.node_neighbors)?;

        row.insert("registered", outcome.registered.to_string());
        row.insert("new_points", outcome.new_points.to_string());
        row.insert("model_points", filtered.len().to_string());
        row.insert("nodes", next_field.nodes.len().to_string());
        row.insert(
            "mean_tsdw",
            if tsdw_count > 0 { (tsdw_sum / tsdw_count as f64).to_string() } else { String::new() },
        );
        let error = frame_error(&filtered, &next_field, truth.as_ref())?;
        fill_error_columns(&mut row, &error, &mut summary);
        logger.line(&format!(
            "frame {frame:04} stages=prior,visible,solve,register,fuse,filter,regenerate visible={} registered={} new={} points={} nodes={} energy={}",
            snapshot.data.len(),
            outcome.registered,
            outcome.new_points,
            filtered.len(),
            next_field.nodes.len(),
            report.final_energy
        ))?;
        inspect(&FrameInspection {
            frame,
            field: &next_field,
            model_before_filter: &fused,
            model: &filtered,
            registration: Some(&reg),
            outcome: Some(outcome),
            report: Some(&report),
            truth: truth.as_ref(),
            error,
            discarded: false,
        });
        model = filtered;
        field = Some(next_field);
        summary.frames += 1;
        summary.final_error = error;
        summary.final_model_points = model.len();
        write_row(&mut metrics, &header, &row, config.include_timings, start)?;
        maybe_export(config, frame, &model)?;
    }

    summary.final_model_points = model.len();
    summary.drops = feed.stats().drops;
    crate::io::write_ply(&config.output_dir.join("model_final.ply"), &model)?;
    metrics.flush().map_err(|e| Error::io("flushing metrics.csv", e))?;
    energy_csv.flush().map_err(|e| Error::io("flushing energy.csv", e))?;
    let summary_text = format!(
        "frames={}\ndiscarded={}\nstalled={}\nmodel_points={}\ndrops={}\nfinal_nn_dist={}\nfinal_plane_residual={}\nfinal_pose_err_deg={}\nfinal_pose_err_mm={}\nmax_pose_err_mm={}\n",
        summary.frames,
        summary.discarded,
        summary.stalled,
        summary.final_model_points,
        summary.drops,
        fmt_opt(summary.final_error.map(|e| e.mean_nn_distance)),
        fmt_opt(summary.final_error.map(|e| e.mean_plane_residual)),
        fmt_opt(summary.final_error.map(|e| e.rotation_error_deg)),
        fmt_opt(summary.final_error.map(|e| e.translation_error)),
        fmt_opt(summary.max_pose_error_mm),
    );
    std::fs::write(config.output_dir.join("run_summary.txt"), summary_text)
        .map_err(|e| Error::io("writing run_summary.txt", e))?;
    logger.line(&format!(
        "done frames={} discarded={} points={}",
        summary.frames, summary.discarded, summary.final_model_points
    ))?;
    logger.file.flush().map_err(|e| Error::io("flushing run.log", e))?;
    Ok(summary)
}

/// Deterministic subsample of model positions for per-frame scoring.
fn eval_subsample(model: &[ModelPoint]) -> Vec<Vec3> {
    let step = (model.len() / 1200).max(1);
    model.iter().step_by(step).map(|p| p.position).collect()
}

fn frame_error(
    model: &[ModelPoint],
    field: &WarpField,
    truth: Option<&TruthFrame>,
) -> Result<Option<ErrorReport>> {
    match truth {
        None => Ok(None),
        Some(t) => {
            if model.is_empty() {
                return Ok(None);
            }
            let positions = eval_subsample(model);
            crate::synth::evaluate(&positions, &field.rotation, &field.translation, t).map(Some)
        }
    }
}

fn fill_error_columns(
    row: &mut BTreeMap<&str, String>,
    error: &Option<ErrorReport>,
    summary: &mut RunSummary,
) {
    if let Some(e) = error {
        row.insert("pose_err_deg", e.rotation_error_deg.to_string());
        row.insert("pose_err_mm", e.translation_error.to_string());
        row.insert("nn_dist", e.mean_nn_distance.to_string());
        row.insert("plane_residual", e.mean_plane_residual.to_string());
        let max = summary.max_pose_error_mm.get_or_insert(0.0);
        *max = max.max(e.translation_error);
    }
}

fn write_row(
    metrics: &mut BufWriter<File>,
    header: &[&str],
    row: &BTreeMap<&str, String>,
    include_timings: bool,
    start: std::time::Instant,
) -> Result<()> {
    let mut fields: Vec<String> = header
        .iter()
        .filter(|&&h| h != "duration_ms")
        .map(|h| row.get(h).cloned().unwrap_or_default())
        .collect();
    if include_timings {
        fields.push(format!("{:.3}", start.elapsed().as_secs_f64() * 1000.0));
    }
    writeln!(metrics, "{}", fields.join(","))
        .map_err(|e| Error::io("writing metrics.csv", e))
}

fn maybe_export(config: &RunConfig, frame: usize, model: &[ModelPoint]) -> Result<()> {
    if config.export_every > 0 && frame % config.export_every == 0 {
        crate::io::write_ply(
            &config.output_dir.join(format!("model_{frame:04}.ply")),
            model,
        )?;
    }
    Ok(())
}

// ---- report ------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ColumnStat {
    pub name: String,
    pub mean: f64,
    pub max: f64,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct ReportSummary {
    pub rows: usize,
    pub columns: Vec<ColumnStat>,
}

fn parse_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<Option<f64>>>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::parse(path.display().to_string(), "empty CSV"))?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        rows.push(line.split(',').map(|t| t.parse::<f64>().ok()).collect());
    }
    if rows.is_empty() {
        return Err(Error::parse(path.display().to_string(), "CSV holds no data rows"));
    }
    Ok((header, rows))
}

/// Per-column mean/max summary of a metrics CSV; with `compare`, also
/// writes a per-frame difference series (this run minus the other) for
/// the shared numeric columns into `difference.csv` next to the output.
pub fn report(
    metrics: &Path,
    compare: Option<&Path>,
    out_dir: Option<&Path>,
) -> Result<ReportSummary> {
    let (header, rows) = parse_csv(metrics)?;
    let mut columns = Vec::new();
    for (c, name) in header.iter().enumerate() {
        let values: Vec<f64> = rows.iter().filter_map(|r| r.get(c).copied().flatten()).collect();
        if values.is_empty() {
            continue;
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        columns.push(ColumnStat { name: name.clone(), mean, max, count: values.len() });
    }
    let summary = ReportSummary { rows: rows.len(), columns };

    if let Some(other) = compare {
        let (header_b, rows_b) = parse_csv(other)?;
        let frame_col_a = header.iter().position(|h| h == "frame");
        let frame_col_b = header_b.iter().position(|h| h == "frame");
        let (Some(fa), Some(fb)) = (frame_col_a, frame_col_b) else {
            return Err(Error::parse(
                other.display().to_string(),
                "both CSVs need a frame column for comparison",
            ));
        };
        let mut by_frame_b: BTreeMap<i64, &Vec<Option<f64>>> = BTreeMap::new();
        for row in &rows_b {
            if let Some(Some(f)) = row.get(fb) {
                by_frame_b.insert(*f as i64, row);
            }
        }
        let shared: Vec<(usize, usize, &String)> = header
            .iter()
            .enumerate()
            .filter(|(_, h)| h.as_str() != "frame")
            .filter_map(|(i, h)| header_b.iter().position(|x| x == h).map(|j| (i, j, h)))
            .collect();
        let dir = out_dir
            .map(Path::to_path_buf)
            .unwrap_or_else(|| metrics.parent().unwrap_or(Path::new(".")).to_path_buf());
        std::fs::create_dir_all(&dir)
            .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let diff_path = dir.join("difference.csv");
        let mut out = BufWriter::new(
            File::create(&diff_path).map_err(|e| Error::io("creating difference.csv", e))?,
        );
        let names: Vec<String> = shared.iter().map(|(_, _, h)| format!("d_{h}")).collect();
        writeln!(out, "frame,{}", names.join(",")).map_err(|e| Error::io("writing difference.csv", e))?;
        for row in &rows {
            let Some(Some(frame)) = row.get(fa) else { continue };
            let Some(row_b) = by_frame_b.get(&(*frame as i64)) else { continue };
            let mut fields = vec![format!("{frame}")];
            for (i, j, _) in &shared {
                let diff = match (row.get(*i).copied().flatten(), row_b.get(*j).copied().flatten())
                {
                    (Some(a), Some(b)) => Some(a - b),
                    _ => None,
                };
                fields.push(fmt_opt(diff));
            }
            writeln!(out, "{}", fields.join(","))
                .map_err(|e| Error::io("writing difference.csv", e))?;
        }
        out.flush().map_err(|e| Error::io("flushing difference.csv", e))?;
    }
    Ok(summary)
}

/// Render a report summary as an aligned text table.
pub fn format_report(summary: &ReportSummary) -> String {
    let mut out = format!("rows: {}\n{:<22} {:>14} {:>14} {:>7}\n", summary.rows, "column", "mean", "max", "count");
    for c in &summary.columns {
        out.push_str(&format!("{:<22} {:>14.6} {:>14.6} {:>7}\n", c.name, c.mean, c.max, c.count));
    }
    out
}
