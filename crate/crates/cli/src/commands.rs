use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use mfwsn::capture::{CaptureCurve, CaptureModel, ChannelModel, INNER_TOL, OUTER_TOL};
use mfwsn::model::{initial_occupancy, parse_model, ModelBundle};
use mfwsn::odes::{
    basin_grid, find_fixpoint, integrate as integrate_ode, AxisSpec, BasinOptions, Closure, Fixpoint,
    FixpointOptions, GridSpec, SolverOptions,
};
use mfwsn::pctmc::{compile as compile_model, CaptureSource, CompileOptions, Pctmc};
use mfwsn::ssa::{convergence_study, round_to_lattice, simulate_stream, ConvergenceOptions};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::output::{csv_error, csv_writer, open_output, write_manifest, CliError, CliResult, Clock, Manifest};
use crate::{
    BasinArgs, CompareArgs, FixpointArgs, IntegrateArgs, ListingFormat, ModelArgs, QCurveArgs, SimulateArgs,
    SpatialKind, TransformArgs,
};

const VERSION: &str = env!("CARGO_PKG_VERSION");

const BUNDLED: [(&str, &str); 2] = [
    ("aloha3.json", include_str!("../../core/models/aloha3.json")),
    ("discovery6.json", include_str!("../../core/models/discovery6.json")),
];

/// Fixpoints closer than this are reported as one.
const MERGE_RADIUS: f64 = 1e-4;

struct Loaded {
    bundle: ModelBundle,
    file_hash: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn read_model_text(path: &Path) -> CliResult<String> {
    match std::fs::read_to_string(path) {
        Ok(text) => Ok(text),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            let name = path.file_name().and_then(|n| n.to_str());
            match BUNDLED.iter().find(|(bundled, _)| Some(*bundled) == name) {
                Some((bundled, text)) if path.parent().is_none_or(|p| p.as_os_str().is_empty()) => {
                    log::info!("using bundled model {bundled}");
                    Ok(text.to_string())
                }
                _ => Err(CliError::Io(path.to_path_buf(), e)),
            }
        }
        Err(e) => Err(CliError::Io(path.to_path_buf(), e)),
    }
}

fn load(path: &Path) -> CliResult<Loaded> {
    let text = read_model_text(path)?;
    let bundle = parse_model(&text)?;
    Ok(Loaded {
        bundle,
        file_hash: sha256_hex(text.as_bytes()),
    })
}

fn compile_with(loaded: &Loaded, args: &ModelArgs, size: Option<usize>) -> CliResult<Pctmc> {
    let capture = match args.q_table {
        None => CaptureSource::Direct,
        Some(n_points) => CaptureSource::Table { n_points },
    };
    Ok(compile_model(
        &loaded.bundle,
        &CompileOptions {
            argument: args.convention,
            capture,
            size: size.or(args.size),
        },
    )?)
}

/// Parses `state=frac,state=frac` against the model's states.
fn parse_occupancy(bundle: &ModelBundle, spec: &str) -> CliResult<Vec<f64>> {
    let mut assignments = BTreeMap::new();
    for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (state, value) = part
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("expected state=fraction, got '{part}'")))?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("invalid fraction '{value}' for state '{state}'")))?;
        if assignments.insert(state.trim().to_string(), value).is_some() {
            return Err(CliError::Usage(format!("state '{state}' given twice")));
        }
    }
    Ok(initial_occupancy(&bundle.component, &assignments)?)
}

fn start_or_default(bundle: &ModelBundle, spec: Option<&str>) -> CliResult<Vec<f64>> {
    match spec {
        Some(s) => parse_occupancy(bundle, s),
        None => Ok(bundle.initial.clone()),
    }
}

fn state_index(p: &Pctmc, name: &str) -> CliResult<usize> {
    p.state_index(name)
        .ok_or_else(|| CliError::Usage(format!("unknown state '{name}'")))
}

fn check_positive(name: &str, v: f64) -> CliResult<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{name} must be positive and finite, got {v}")))
    }
}

fn out_path(out: &Option<PathBuf>) -> Option<&Path> {
    out.as_deref()
}

pub fn q_curve(args: &QCurveArgs) -> CliResult<()> {
    let clock = Clock::start();
    let (channel, file_hash) = match &args.model {
        Some(path) => {
            let loaded = load(path)?;
            (loaded.bundle.channel, Some(loaded.file_hash))
        }
        None => {
            let channel = match args.spatial {
                SpatialKind::Uniform => ChannelModel::uniform(args.beta, args.z),
                SpatialKind::Lognormal => ChannelModel::lognormal(args.beta, args.z, args.sigma_d),
            }
            .map_err(|e| CliError::Usage(format!("invalid channel: {e}")))?;
            (channel, None)
        }
    };
    check_positive("--i-max", args.i_max)?;
    let model = CaptureModel::new(channel)?;
    let out = out_path(&args.out);
    let mut w = csv_writer(out)?;
    w.write_record(["i", "q"]).map_err(|e| csv_error(out, e))?;
    let n = args.n_points as usize;
    for k in 0..n {
        let i = args.i_max * k as f64 / (n - 1) as f64;
        let q = model.q(i)?;
        w.write_record([num(i), num(q)]).map_err(|e| csv_error(out, e))?;
    }
    w.flush().map_err(|e| csv_error(out, e.into()))?;
    write_manifest(
        out,
        &Manifest {
            subcommand: "q-curve",
            tool_version: VERSION,
            config: args,
            model_file_hash: file_hash,
            model_hash: None,
            seeds: vec![],
            tolerances: json!({ "outer": OUTER_TOL, "inner": INNER_TOL }),
            summary: json!({ "channel": channel, "q": model.describe() }),
            started_unix: clock.started_unix(),
            wall_clock_seconds: clock.elapsed(),
        },
    )
}

pub fn transform(args: &TransformArgs) -> CliResult<()> {
    let clock = Clock::start();
    let loaded = load(&args.model.model)?;
    let p = compile_with(&loaded, &args.model, None)?;
    let out = out_path(&args.out);
    let mut w = open_output(out)?;
    let io_err = |e| CliError::Io(out.map_or_else(|| PathBuf::from("<stdout>"), Path::to_path_buf), e);
    match args.format {
        ListingFormat::Text => {
            let mut text = p.ode_text();
            text.push('\n');
            for t in p.listing() {
                text.push_str(&format!(
                    "{}: {} -> {}  change {:?}  rate {}\n",
                    t.label, t.from, t.to, t.change, t.rate
                ));
            }
            if !p.dropped_self_loops().is_empty() {
                text.push_str(&format!(
                    "# dropped self-loops: {}\n",
                    p.dropped_self_loops().join(", ")
                ));
            }
            w.write_all(text.as_bytes()).map_err(io_err)?;
        }
        ListingFormat::Json => {
            let doc = json!({
                "states": p.states(),
                "N": p.size(),
                "q": p.capture().describe(),
                "transformation": p.transformation(),
                "transitions": p.listing(),
                "dropped_self_loops": p.dropped_self_loops(),
                "odes": p.ode_text().lines().skip(1).collect::<Vec<_>>(),
            });
            write_pretty(&mut w, &doc).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)?;
    write_manifest(
        out,
        &Manifest {
            subcommand: "transform",
            tool_version: VERSION,
            config: args,
            model_file_hash: Some(loaded.file_hash),
            model_hash: Some(p.fingerprint()),
            seeds: vec![],
            tolerances: json!({}),
            summary: json!({ "transitions": p.transitions().len() }),
            started_unix: clock.started_unix(),
            wall_clock_seconds: clock.elapsed(),
        },
    )
}

fn solver_options(tol: f64, sample_interval: Option<f64>) -> CliResult<SolverOptions> {
    check_positive("--tol", tol)?;
    if let Some(dt) = sample_interval {
        check_positive("--dt", dt)?;
    }
    Ok(SolverOptions {
        rtol: tol,
        atol: tol * 1e-2,
        sample_interval,
        ..SolverOptions::default()
    })
}

pub fn integrate(args: &IntegrateArgs) -> CliResult<()> {
    let clock = Clock::start();
    let loaded = load(&args.model.model)?;
    let p = compile_with(&loaded, &args.model, None)?;
    let x0 = start_or_default(&loaded.bundle, args.x0.as_deref())?;
    check_positive("--T", args.horizon)?;
    let opts = solver_options(args.tol, args.dt)?;
    let traj = integrate_ode(&p, &x0, args.horizon, &opts)?;
    let out = out_path(&args.out);
    let mut w = csv_writer(out)?;
    let header: Vec<String> = std::iter::once("t".to_string()).chain(state_columns(&p)).collect();
    w.write_record(&header).map_err(|e| csv_error(out, e))?;
    for (t, x) in traj.times.iter().zip(&traj.points) {
        let row: Vec<String> = std::iter::once(*t).chain(x.iter().copied()).map(num).collect();
        w.write_record(&row).map_err(|e| csv_error(out, e))?;
    }
    w.flush().map_err(|e| csv_error(out, e.into()))?;
    write_manifest(
        out,
        &Manifest {
            subcommand: "integrate",
            tool_version: VERSION,
            config: args,
            model_file_hash: Some(loaded.file_hash),
            model_hash: Some(p.fingerprint()),
            seeds: vec![],
            tolerances: json!({ "rtol": opts.rtol, "atol": opts.atol }),
            summary: json!({ "x0": x0, "final": traj.last(), "meta": traj.meta }),
            started_unix: clock.started_unix(),
            wall_clock_seconds: clock.elapsed(),
        },
    )
}

fn write_pretty<T: serde::Serialize>(w: &mut dyn Write, value: &T) -> std::io::Result<()> {
    serde_json::to_writer_pretty(&mut *w, value).map_err(std::io::Error::other)?;
    w.write_all(b"\n")?;
    w.flush()
}

fn write_json<T: serde::Serialize>(out: Option<&Path>, value: &T) -> CliResult<()> {
    let mut w = open_output(out)?;
    write_pretty(&mut w, value)
        .map_err(|e| CliError::Io(out.map_or_else(|| PathBuf::from("<stdout>"), Path::to_path_buf), e))
}

fn state_columns(p: &Pctmc) -> impl Iterator<Item = String> + '_ {
    p.states().iter().map(|s| format!("x_{s}"))
}

/// Shortest round-trip representation, with an exponent for tiny values.
fn num(v: f64) -> String {
    format!("{v:?}")
}

fn vertices(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|k| {
            let mut x = vec![0.0; n];
            x[k] = 1.0;
            x
        })
        .collect()
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Fixpoint per start plus the index of its merged representative.
fn locate(p: &Pctmc, starts: &[Vec<f64>], opts: &FixpointOptions) -> CliResult<(Vec<Fixpoint>, Vec<usize>)> {
    let mut unique: Vec<Fixpoint> = Vec::new();
    let mut labels = Vec::with_capacity(starts.len());
    for x0 in starts {
        let fp = find_fixpoint(p, x0, opts)?;
        let label = match unique.iter().position(|u| linf(&u.location, &fp.location) < MERGE_RADIUS) {
            Some(k) => k,
            None => {
                unique.push(fp);
                unique.len() - 1
            }
        };
        labels.push(label);
    }
    Ok((unique, labels))
}

fn fixpoint_options(horizon: f64, tol: f64) -> CliResult<FixpointOptions> {
    check_positive("--T", horizon)?;
    check_positive("--tol", tol)?;
    Ok(FixpointOptions {
        horizon,
        tol,
        ..FixpointOptions::default()
    })
}

pub fn fixpoints(args: &FixpointArgs) -> CliResult<()> {
    let clock = Clock::start();
    let loaded = load(&args.model.model)?;
    let p = compile_with(&loaded, &args.model, None)?;
    let starts = if args.x0.is_empty() {
        vertices(p.n_states())
    } else {
        args.x0
            .iter()
            .map(|s| parse_occupancy(&loaded.bundle, s))
            .collect::<CliResult<_>>()?
    };
    let opts = fixpoint_options(args.horizon, args.tol)?;
    let (unique, labels) = locate(&p, &starts, &opts)?;
    let report: Vec<_> = unique
        .iter()
        .enumerate()
        .map(|(k, fp)| {
            json!({
                "location": fp.location,
                "residual": fp.residual,
                "classification": fp.classification,
                "spectral_abscissa": fp.spectral_abscissa,
                "starts": labels.iter().enumerate().filter(|(_, l)| **l == k).map(|(s, _)| s).collect::<Vec<_>>(),
            })
        })
        .collect();
    let out = out_path(&args.out);
    write_json(out, &report)?;
    write_manifest(
        out,
        &Manifest {
            subcommand: "fixpoints",
            tool_version: VERSION,
            config: args,
            model_file_hash: Some(loaded.file_hash),
            model_hash: Some(p.fingerprint()),
            seeds: vec![],
            tolerances: json!({ "residual": opts.tol, "merge_radius": MERGE_RADIUS, "solver": opts.solver }),
            summary: json!({ "starts": starts, "fixpoints": unique }),
            started_unix: clock.started_unix(),
            wall_clock_seconds: clock.elapsed(),
        },
    )
}

pub fn basin(args: &BasinArgs) -> CliResult<()> {
    let clock = Clock::start();
    let loaded = load(&args.model.model)?;
    let p = compile_with(&loaded, &args.model, None)?;
    let (first, second) = args
        .axes
        .split_once(',')
        .ok_or_else(|| CliError::Usage(format!("--axes expects two states 'A,B', got '{}'", args.axes)))?;
    let (i, j) = (state_index(&p, first.trim())?, state_index(&p, second.trim())?);
    let closure = match &args.closure {
        Some(name) => state_index(&p, name)?,
        None => (0..p.n_states())
            .find(|k| *k != i && *k != j)
            .ok_or_else(|| CliError::Usage("basin grids need a third state for the remainder".into()))?,
    };
    let spec = GridSpec {
        axes: (AxisSpec::unit(i), AxisSpec::unit(j)),
        resolution: args.resolution,
        closure: Closure::Remainder(closure),
    };
    let fp_opts = fixpoint_options(args.horizon, 1e-10)?;
    let (found, _) = locate(&p, &vertices(p.n_states()), &fp_opts)?;
    let stable: Vec<Fixpoint> = found.into_iter().filter(Fixpoint::is_stable).collect();
    check_positive("--tol", args.tol)?;
    let opts = BasinOptions {
        horizon: args.horizon,
        solver: SolverOptions {
            rtol: args.tol,
            atol: args.tol * 1e-3,
            ..SolverOptions::default()
        },
        ..BasinOptions::default()
    };
    let grid = basin_grid(&p, &spec, &stable, &opts)?;
    let out = out_path(&args.out);
    let mut w = csv_writer(out)?;
    let header = [format!("x_{}", p.states()[i]), format!("x_{}", p.states()[j]), "fixpoint_index".into()];
    w.write_record(&header).map_err(|e| csv_error(out, e))?;
    for c in &grid.cells {
        let label = c.label.map_or_else(|| "-1".to_string(), |l| l.to_string());
        w.write_record([num(c.x_i), num(c.x_j), label])
            .map_err(|e| csv_error(out, e))?;
    }
    w.flush().map_err(|e| csv_error(out, e.into()))?;
    write_manifest(
        out,
        &Manifest {
            subcommand: "basin",
            tool_version: VERSION,
            config: args,
            model_file_hash: Some(loaded.file_hash),
            model_hash: Some(p.fingerprint()),
            seeds: vec![],
            tolerances: json!({
                "match_radius": opts.match_radius,
                "capture_radius": opts.capture_radius,
                "solver": opts.solver,
            }),
            summary: json!({
                "closure": p.states()[closure],
                "fixpoints": grid.fixpoints,
                "label_counts": grid.label_counts(),
            }),
            started_unix: clock.started_unix(),
            wall_clock_seconds: clock.elapsed(),
        },
    )
}

pub fn simulate(args: &SimulateArgs) -> CliResult<()> {
    let clock = Clock::start();
    let loaded = load(&args.model.model)?;
    let p = compile_with(&loaded, &args.model, None)?;
    let requested = start_or_default(&loaded.bundle, args.x0.as_deref())?;
    let counts = round_to_lattice(&requested, p.size());
    let x0: Vec<f64> = counts.iter().map(|&c| c as f64 / p.size() as f64).collect();
    if !(args.horizon.is_finite() && args.horizon >= 0.0) {
        return Err(CliError::Usage(format!("--T must be non-negative, got {}", args.horizon)));
    }
    let out = out_path(&args.out);
    let mut w = csv_writer(out)?;
    let traj = simulate_stream(&p, &x0, args.horizon, args.seed, args.stream)?;
    let header: Vec<String> = std::iter::once("t".to_string()).chain(state_columns(&p)).collect();
    w.write_record(&header).map_err(|e| csv_error(out, e))?;
    for (k, t) in traj.times.iter().enumerate() {
        let row: Vec<String> = std::iter::once(*t).chain(traj.occupancy(k)).map(num).collect();
        w.write_record(&row).map_err(|e| csv_error(out, e))?;
    }
    w.flush().map_err(|e| csv_error(out, e.into()))?;
    write_manifest(
        out,
        &Manifest {
            subcommand: "simulate",
            tool_version: VERSION,
            config: args,
            model_file_hash: Some(loaded.file_hash),
            model_hash: Some(p.fingerprint()),
            seeds: vec![args.seed],
            tolerances: json!({}),
            summary: json!({
                "N": p.size(),
                "x0": x0,
                "counts0": counts,
                "jumps": traj.times.len() - 1,
                "absorbed": traj.absorbed,
            }),
            started_unix: clock.started_unix(),
            wall_clock_seconds: clock.elapsed(),
        },
    )
}

pub fn compare(args: &CompareArgs) -> CliResult<()> {
    let clock = Clock::start();
    let loaded = load(&args.model.model)?;
    let x0 = start_or_default(&loaded.bundle, args.x0.as_deref())?;
    let opts = ConvergenceOptions {
        horizon: args.horizon,
        replications: args.replications,
        seed: args.seed,
        grid_points: args.grid_points,
        solver: solver_options(args.tol, None)?,
    };
    let build = |n: usize| {
        compile_with(&loaded, &args.model, Some(n)).map_err(|e| match e {
            CliError::Core(e) => e,
            other => mfwsn::Error::Config(other.to_string()),
        })
    };
    let report = convergence_study(&build, &args.sizes, &x0, &opts)?;
    let out = out_path(&args.out);
    let mut w = csv_writer(out)?;
    w.write_record(["N", "mean_sup_error", "std_sup_error"])
        .map_err(|e| csv_error(out, e))?;
    for row in &report.rows {
        w.write_record([row.size.to_string(), num(row.mean), num(row.std)])
            .map_err(|e| csv_error(out, e))?;
    }
    w.flush().map_err(|e| csv_error(out, e.into()))?;
    write_manifest(
        out,
        &Manifest {
            subcommand: "compare",
            tool_version: VERSION,
            config: args,
            model_file_hash: Some(loaded.file_hash),
            model_hash: None,
            seeds: vec![args.seed],
            tolerances: json!({ "rtol": opts.solver.rtol, "atol": opts.solver.atol }),
            summary: json!({ "decreasing_trend": report.decreasing_trend(), "report": report }),
            started_unix: clock.started_unix(),
            wall_clock_seconds: clock.elapsed(),
        },
    )
}
