use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use morphobricks::damage::{
    damage_samples, detection_report, recover, recovery_accuracy, recovery_sweep, seed_cells, train_damage,
    DamageLabel, DamageNcaParams, Detector, NcaDetector, OracleDetector, RecoveryRow, DAMAGE_LABELS,
    RECOVERY_CSV_HEADER,
};
use morphobricks::engine::{export_channels, rollout, EngineConfig};
use morphobricks::protocol::{
    boundary_floats, decode_pulses, encode_frame, exchange, test_vector_row, timing_budget, Frame, STATE_FRAME_LEN,
};
use morphobricks::rng::hash_key;
use morphobricks::sim::{build_assembly, consensus_report, run_cycles, Comm, FaultPlan};
use morphobricks::training::checkpoint::{load_params, save_params};
use morphobricks::training::{evaluate, train_with, write_records_csv, EvalReport, TrainEvent};
use morphobricks::voxel::{class_index, load_shape, save_shape, Dataset, ShapeInstance, VoxelGrid, CLASS_NAMES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{ChannelProfile, RunConfig};
use crate::error::CliError;
use crate::manifest::{now, RunManifest};
use crate::{Command, DamageCommand, ProtocolCommand};

/// Per-run bookkeeping for the manifest.
struct Ctx {
    config: RunConfig,
    out: PathBuf,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    seeds: Vec<(String, u64)>,
}

impl Ctx {
    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.outputs.push(p.clone());
        p
    }

    fn write(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        let p = self.path(name);
        fs::write(&p, text).map_err(|e| CliError::io(p.display(), e))
    }

    fn seed(&mut self, key: &str, value: u64) {
        self.seeds.push((key.to_string(), value));
    }
}

pub fn execute(command: &Command, config: RunConfig, args: Vec<String>) -> Result<(), CliError> {
    let started = now();
    let out = match command {
        Command::GenDataset { common, .. }
        | Command::Train { common, .. }
        | Command::Eval { common, .. }
        | Command::Simulate { common, .. }
        | Command::ExportChannels { common, .. }
        | Command::Damage(
            DamageCommand::Train { common, .. }
            | DamageCommand::Detect { common, .. }
            | DamageCommand::Recover { common, .. }
            | DamageCommand::Sweep { common, .. },
        )
        | Command::Protocol(
            ProtocolCommand::Vectors { common, .. }
            | ProtocolCommand::Fuzz { common, .. }
            | ProtocolCommand::Budget { common, .. },
        ) => common.out.clone(),
        Command::Config { .. } | Command::Rerun { .. } => unreachable!("handled before execution"),
    };
    fs::create_dir_all(&out).map_err(|e| CliError::io(out.display(), e))?;
    let mut ctx = Ctx {
        config,
        out,
        inputs: Vec::new(),
        outputs: Vec::new(),
        seeds: Vec::new(),
    };
    // A failing check still leaves a manifest describing the attempt.
    let result = match command {
        Command::GenDataset { .. } => gen_dataset(&mut ctx),
        Command::Train { dataset, .. } => train(&mut ctx, dataset),
        Command::Eval {
            dataset, checkpoint, ..
        } => eval(&mut ctx, dataset, checkpoint),
        Command::Simulate {
            shape,
            checkpoint,
            fault_bricks,
            label,
            ..
        } => simulate(&mut ctx, shape, checkpoint, fault_bricks.as_deref(), label.as_deref()),
        Command::ExportChannels { shape, checkpoint, .. } => export(&mut ctx, shape, checkpoint),
        Command::Damage(DamageCommand::Train { dataset, .. }) => damage_train(&mut ctx, dataset),
        Command::Damage(DamageCommand::Detect {
            dataset, checkpoint, ..
        }) => damage_detect(&mut ctx, dataset, checkpoint),
        Command::Damage(DamageCommand::Recover {
            shape,
            checkpoint,
            start,
            oracle,
            ..
        }) => damage_recover(&mut ctx, shape, checkpoint.as_deref(), start.as_deref(), *oracle),
        Command::Damage(DamageCommand::Sweep {
            dataset, checkpoints, ..
        }) => damage_sweep(&mut ctx, dataset, checkpoints.as_deref()),
        Command::Protocol(ProtocolCommand::Vectors { random, .. }) => protocol_vectors(&mut ctx, *random),
        Command::Protocol(ProtocolCommand::Fuzz { .. }) => protocol_fuzz(&mut ctx),
        Command::Protocol(ProtocolCommand::Budget { .. }) => protocol_budget(&mut ctx),
        Command::Config { .. } | Command::Rerun { .. } => unreachable!("handled before execution"),
    };
    let manifest = RunManifest {
        command: command.name(),
        args,
        config: ctx.config.clone(),
        seeds: ctx.seeds.clone(),
        inputs: ctx.inputs.clone(),
        outputs: ctx.outputs.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        started,
        finished: now(),
    };
    manifest.write(&ctx.out)?;
    result
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, CliError> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path.display(), e))
}

fn load_dataset(ctx: &mut Ctx, dir: &Path) -> Result<Dataset, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Validation(format!("dataset {}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "voxtxt"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Validation(format!("dataset {} has no .voxtxt files", dir.display())));
    }
    let shapes = files
        .iter()
        .map(|f| load_shape(f).map_err(|e| CliError::Validation(format!("{}: {e}", f.display()))))
        .collect::<Result<Vec<_>, _>>()?;
    ctx.inputs.push(dir.to_path_buf());
    Ok(Dataset { shapes })
}

fn load_input_shape(ctx: &mut Ctx, path: &Path) -> Result<ShapeInstance, CliError> {
    ctx.inputs.push(path.to_path_buf());
    load_shape(path).map_err(|e| match e {
        morphobricks::voxel::VoxelError::Io(io) => CliError::io(path.display(), io),
        other => CliError::Validation(format!("{}: {other}", path.display())),
    })
}

fn load_classifier(ctx: &mut Ctx, path: &Path) -> Result<morphobricks::engine::NcaParams, CliError> {
    ctx.inputs.push(path.to_path_buf());
    Ok(load_params(path)?)
}

fn load_damage_model(ctx: &mut Ctx, path: &Path) -> Result<DamageNcaParams, CliError> {
    ctx.inputs.push(path.to_path_buf());
    Ok(DamageNcaParams::load(path)?)
}

fn class_name(label: Option<usize>) -> &'static str {
    label.map_or("-", |l| CLASS_NAMES[l])
}

fn gen_dataset(ctx: &mut Ctx) -> Result<(), CliError> {
    let cfg = ctx.config.dataset.clone();
    let classes = cfg
        .classes
        .iter()
        .map(|c| class_index(c).ok_or_else(|| CliError::Validation(format!("unknown class {c:?}"))))
        .collect::<Result<Vec<_>, _>>()?;
    ctx.seed("dataset.seed", cfg.seed);
    let dataset = Dataset::procedural(&classes, cfg.count, cfg.seed, cfg.budget)?;
    let mut index = String::from("file,class,voxels,nx,ny,nz\n");
    for shape in &dataset.shapes {
        let file = format!("{}.voxtxt", shape.name);
        let path = ctx.path(&file);
        save_shape(shape, &path)?;
        let [nx, ny, nz] = shape.grid.dims();
        let _ = writeln!(
            index,
            "{file},{},{},{nx},{ny},{nz}",
            class_name(shape.label),
            shape.grid.occupied_count()
        );
    }
    ctx.write("index.csv", &index)?;
    println!("wrote {} shapes to {}", dataset.len(), ctx.out.display());
    Ok(())
}

fn report_table(report: &EvalReport) -> String {
    let mut s = String::from("class,accuracy,voxels\n");
    for (c, name) in CLASS_NAMES.iter().enumerate() {
        if let Some(a) = report.per_class[c] {
            let _ = writeln!(s, "{name},{a:.6},{}", report.voxels[c]);
        }
    }
    let _ = writeln!(s, "overall,{:.6},{}", report.overall, report.voxels.iter().sum::<usize>());
    s
}

fn print_report(report: &EvalReport) {
    println!("{:<8} {:>9} {:>8}", "class", "accuracy", "voxels");
    for (c, name) in CLASS_NAMES.iter().enumerate() {
        if let Some(a) = report.per_class[c] {
            println!("{name:<8} {:>8.2}% {:>8}", 100.0 * a, report.voxels[c]);
        }
    }
    println!("{:<8} {:>8.2}%", "overall", 100.0 * report.overall);
}

fn train(ctx: &mut Ctx, dir: &Path) -> Result<(), CliError> {
    let dataset = load_dataset(ctx, dir)?;
    let cfg = ctx.config.train.clone();
    ctx.seed("train.rng_seed", cfg.rng_seed);
    let mut evals = String::from("iteration,overall\n");
    let (params, records) = train_with(&dataset, &cfg, |event| match event {
        TrainEvent::Iteration(r) => {
            if r.iteration % 50 == 0 {
                eprintln!("iteration {} loss {:.4} accuracy {:.4}", r.iteration, r.loss, r.accuracy);
            }
        }
        TrainEvent::Evaluation { iteration, report } => {
            eprintln!("evaluation at {iteration}: {:.4}", report.overall);
            let _ = writeln!(evals, "{iteration},{:.6}", report.overall);
        }
    })?;
    let model = ctx.path("model.ncap");
    save_params(&model, &params)?;
    let rec = ctx.path("records.csv");
    write_records_csv(&rec, &records)?;
    if cfg.eval_every > 0 {
        ctx.write("evals.csv", &evals)?;
    }
    let e = ctx.config.eval.clone();
    ctx.seed("eval.seed", e.seed);
    let report = evaluate(&dataset, &params, e.steps, e.trials, e.firing_rate, e.seed)?;
    ctx.write("eval.csv", &report_table(&report))?;
    print_report(&report);
    Ok(())
}

fn eval(ctx: &mut Ctx, dir: &Path, checkpoint: &Path) -> Result<(), CliError> {
    let dataset = load_dataset(ctx, dir)?;
    let params = load_classifier(ctx, checkpoint)?;
    let e = ctx.config.eval.clone();
    ctx.seed("eval.seed", e.seed);
    let report = evaluate(&dataset, &params, e.steps, e.trials, e.firing_rate, e.seed)?;
    ctx.write("eval.csv", &report_table(&report))?;
    print_report(&report);
    Ok(())
}

fn simulate(
    ctx: &mut Ctx,
    shape_path: &Path,
    checkpoint: &Path,
    fault_bricks: Option<&[usize]>,
    label: Option<&str>,
) -> Result<(), CliError> {
    let shape = load_input_shape(ctx, shape_path)?;
    let params = load_classifier(ctx, checkpoint)?;
    let truth = match label {
        Some(name) => class_index(name).ok_or_else(|| CliError::Validation(format!("unknown class {name:?}")))?,
        None => shape
            .label
            .ok_or_else(|| CliError::Validation("shape is unlabeled; pass --label".into()))?,
    };
    let comm = match ctx.config.simulate.channel {
        ChannelProfile::Ideal => Comm::Ideal,
        ChannelProfile::Protocol => Comm::Protocol {
            channel: ctx.config.channel,
            config: ctx.config.protocol.clone(),
        },
    };
    let mut assembly = build_assembly(&shape.grid, params, comm)?;
    assembly.config = ctx.config.sim.clone();
    let trials = ctx.config.simulate.trials.max(1);
    let base_seed = ctx.config.sim.seed;
    ctx.seed("sim.seed", base_seed);
    let plans: Vec<(f64, usize, FaultPlan)> = match fault_bricks {
        Some(ids) => (0..trials).map(|t| (f64::NAN, t, FaultPlan::Explicit(ids.to_vec()))).collect(),
        None => ctx
            .config
            .simulate
            .fault_rates
            .iter()
            .flat_map(|&r| {
                (0..trials).map(move |t| {
                    let seed = hash_key(&[base_seed, t as u64]);
                    (r, t, FaultPlan::Fraction { fraction: r, seed })
                })
            })
            .collect(),
    };
    let runs = plans
        .par_iter()
        .map(|(rate, t, plan)| {
            let mut a = assembly.clone();
            a.reset();
            a.config.seed = hash_key(&[base_seed, *t as u64, 1]);
            let log = run_cycles(&mut a, plan)?;
            let faulted: Vec<usize> = a.bricks.iter().filter(|b| b.is_faulty()).map(|b| b.id).collect();
            Ok((*rate, *t, a.config.seed, faulted, log))
        })
        .collect::<Result<Vec<_>, CliError>>()?;

    let mut curves = String::from("fault_rate,trial,cycle,percent_correct\n");
    let mut summary = String::from("fault_rate,trial,seed,faulted,final_percent,converged\n");
    let mut means: Vec<(f64, f64, usize)> = Vec::new();
    for (rate, t, seed, faulted, log) in &runs {
        let rate_tag = if rate.is_nan() { "explicit".to_string() } else { format!("{:03}", (rate * 100.0).round() as u32) };
        let rate_col = if rate.is_nan() { "explicit".to_string() } else { format!("{rate}") };
        let path = ctx.path(&format!("telemetry_r{rate_tag}_t{t}.jsonl"));
        log.write_jsonl(create(&path)?)?;
        let report = consensus_report(log, truth);
        for (k, f) in report.curve.iter().enumerate() {
            let _ = writeln!(curves, "{rate_col},{t},{k},{:.4}", 100.0 * f);
        }
        let ids: Vec<String> = faulted.iter().map(|i| i.to_string()).collect();
        let _ = writeln!(
            summary,
            "{rate_col},{t},{seed},{},{:.4},{}",
            ids.join(";"),
            100.0 * report.final_fraction(),
            report.converged
        );
        match means.iter_mut().find(|m| m.0.to_bits() == rate.to_bits()) {
            Some(m) => {
                m.1 += report.final_fraction();
                m.2 += 1;
            }
            None => means.push((*rate, report.final_fraction(), 1)),
        }
    }
    ctx.write("consensus.csv", &curves)?;
    ctx.write("summary.csv", &summary)?;
    let mut text = String::new();
    let _ = writeln!(text, "shape {} ({} bricks), true class {}", shape.name, assembly.len(), CLASS_NAMES[truth]);
    let _ = writeln!(
        text,
        "simulated time {:.1} s for {} cycles (hardware reference: 26-197 bricks, 60 cycles, about 3 minutes)",
        (assembly.cycle_ms() * ctx.config.sim.cycles as u64) as f64 / 1000.0,
        ctx.config.sim.cycles
    );
    let _ = writeln!(text, "fault_rate,mean_final_percent,trials");
    for (rate, sum, n) in &means {
        let rate_col = if rate.is_nan() { "explicit".to_string() } else { format!("{rate}") };
        let _ = writeln!(text, "{rate_col},{:.4},{n}", 100.0 * sum / *n as f64);
    }
    ctx.write("report.txt", &text)?;
    print!("{text}");
    Ok(())
}

fn export(ctx: &mut Ctx, shape_path: &Path, checkpoint: &Path) -> Result<(), CliError> {
    let shape = load_input_shape(ctx, shape_path)?;
    let params = load_classifier(ctx, checkpoint)?;
    let cfg = ctx.config.export.clone();
    ctx.seed("export.seed", cfg.seed);
    let steps = cfg.steps.iter().copied().max().unwrap_or(0).max(1);
    let engine = EngineConfig {
        firing_rate: cfg.firing_rate,
        steps,
        rng_seed: cfg.seed,
        alive_threshold: ctx.config.sim.alive_threshold,
    };
    let run = rollout(&shape.grid, &params, &engine, true)?;
    let trace = run.trace.expect("trace requested");
    let written = export_channels(&trace, &cfg.steps, &cfg.channels, shape.label, &ctx.out, &shape.name)?;
    println!("wrote {} volumes to {}", written.len(), ctx.out.display());
    ctx.outputs.extend(written);
    Ok(())
}

fn grids(dataset: &Dataset) -> Vec<VoxelGrid> {
    dataset.shapes.iter().map(|s| s.grid.clone()).collect()
}

fn damage_train(ctx: &mut Ctx, dir: &Path) -> Result<(), CliError> {
    let dataset = load_dataset(ctx, dir)?;
    let cfg = ctx.config.damage.clone();
    ctx.seed("damage.seed", cfg.seed);
    let (params, records) = train_damage(&grids(&dataset), &cfg, |r| {
        if r.iteration % 50 == 0 {
            eprintln!("epoch {} loss {:.4} accuracy {:.4}", r.iteration, r.loss, r.accuracy);
        }
    })?;
    let model = ctx.path("damage.ncap");
    params.save(&model)?;
    let rec = ctx.path("records.csv");
    write_records_csv(&rec, &records)?;
    println!(
        "trained H = {} ({} parameters, encoder {})",
        params.hidden,
        params.parameter_count(),
        params.encoder.parameter_count()
    );
    Ok(())
}

fn damage_detect(ctx: &mut Ctx, dir: &Path, checkpoint: &Path) -> Result<(), CliError> {
    let dataset = load_dataset(ctx, dir)?;
    let params = load_damage_model(ctx, checkpoint)?;
    let cfg = ctx.config.detect.clone();
    ctx.seed("detect.seed", cfg.seed);
    let targets = grids(&dataset);
    let samples = damage_samples(&targets, cfg.samples, cfg.seed)?;
    let report = detection_report(&params, &targets, &samples, cfg.steps, cfg.firing_rate, cfg.seed)?;
    let mut s = String::from("label,accuracy,voxels\n");
    for l in 0..DAMAGE_LABELS {
        let name = DamageLabel::ALL[l].name();
        match report.per_label[l] {
            Some(a) => {
                let _ = writeln!(s, "{name},{a:.6},{}", report.voxels[l]);
            }
            None => {
                let _ = writeln!(s, "{name},,0");
            }
        }
    }
    let _ = writeln!(s, "overall,{:.6},{}", report.accuracy, report.voxels.iter().sum::<usize>());
    ctx.write("detect.csv", &s)?;
    print!("{s}");
    Ok(())
}

fn damage_recover(
    ctx: &mut Ctx,
    shape_path: &Path,
    checkpoint: Option<&Path>,
    start: Option<&Path>,
    oracle: bool,
) -> Result<(), CliError> {
    let target = load_input_shape(ctx, shape_path)?;
    let cfg = ctx.config.recovery.clone();
    ctx.seed("recovery.seed", cfg.seed);
    let seed = match start {
        Some(p) => {
            let s = load_input_shape(ctx, p)?;
            if s.grid.dims() != target.grid.dims() {
                return Err(CliError::Validation("start and target dims differ".into()));
            }
            s.grid
        }
        None => seed_cells(&target.grid, cfg.seed_cells),
    };
    let params;
    let (mut detector, hidden): (Box<dyn Detector>, usize) = if oracle {
        (Box::new(OracleDetector), 0)
    } else {
        let path = checkpoint.ok_or_else(|| CliError::Validation("--checkpoint or --oracle required".into()))?;
        params = load_damage_model(ctx, path)?;
        (Box::new(NcaDetector::new(&params, &cfg)), params.hidden)
    };
    let outcome = recover(&target.grid, &seed, detector.as_mut(), cfg.max_iterations)?;
    let score = recovery_accuracy(&outcome.grid, &target.grid);
    let row = RecoveryRow {
        class: class_name(target.label).to_string(),
        hidden,
        seed: cfg.seed,
        iterations: outcome.iterations,
        iou: score.iou,
        voxel_acc: score.voxel_acc,
    };
    let recovered = ShapeInstance {
        grid: outcome.grid.clone(),
        label: target.label,
        name: format!("{}_recovered", target.name),
    };
    let grown = ctx.path("recovered.voxtxt");
    if outcome.grid.occupied_count() > 0 {
        save_shape(&recovered, &grown)?;
    }
    let text = format!("{RECOVERY_CSV_HEADER}\n{}\n", row.csv());
    ctx.write("recovery.csv", &text)?;
    print!("{text}");
    Ok(())
}

fn damage_sweep(ctx: &mut Ctx, dir: &Path, checkpoints: Option<&Path>) -> Result<(), CliError> {
    let dataset = load_dataset(ctx, dir)?;
    let targets = grids(&dataset);
    let named: Vec<(String, VoxelGrid)> = dataset
        .shapes
        .iter()
        .map(|s| (class_name(s.label).to_string(), s.grid.clone()))
        .collect();
    let sweep = ctx.config.sweep.clone();
    let recovery = ctx.config.recovery.clone();
    ctx.seed("damage.seed", ctx.config.damage.seed);
    let seeds: Vec<u64> = (0..sweep.seeds as u64).map(|s| recovery.seed.wrapping_add(s)).collect();
    let mut rows: Vec<RecoveryRow> = Vec::new();
    for &h in &sweep.hidden {
        let file = format!("damage_h{h}.ncap");
        let existing = checkpoints.map(|d| d.join(&file)).filter(|p| p.exists());
        let params = match existing {
            Some(p) => load_damage_model(ctx, &p)?,
            None => {
                let cfg = morphobricks::damage::DamageTrainConfig {
                    hidden: h,
                    ..ctx.config.damage.clone()
                };
                eprintln!("training H = {h}");
                let (p, _) = train_damage(&targets, &cfg, |_| {})?;
                let path = ctx.path(&file);
                p.save(&path)?;
                p
            }
        };
        if params.hidden != h {
            return Err(CliError::Validation(format!("checkpoint {file} has H = {}", params.hidden)));
        }
        rows.extend(recovery_sweep(&params, &named, &seeds, &recovery)?);
    }
    let mut csv = format!("{RECOVERY_CSV_HEADER}\n");
    for r in &rows {
        csv.push_str(&r.csv());
        csv.push('\n');
    }
    ctx.write("recovery.csv", &csv)?;

    let mut classes: Vec<&str> = Vec::new();
    for r in &rows {
        if !classes.contains(&r.class.as_str()) {
            classes.push(&r.class);
        }
    }
    let mut table = String::from("class");
    for h in &sweep.hidden {
        let _ = write!(table, ",H{h}");
    }
    table.push('\n');
    for c in classes {
        table.push_str(c);
        for &h in &sweep.hidden {
            let sel: Vec<f64> = rows.iter().filter(|r| r.class == c && r.hidden == h).map(|r| r.iou).collect();
            let _ = write!(table, ",{:.4}", sel.iter().sum::<f64>() / sel.len().max(1) as f64);
        }
        table.push('\n');
    }
    ctx.write("table.csv", &table)?;
    print!("{table}");
    Ok(())
}

fn protocol_vectors(ctx: &mut Ctx, random: usize) -> Result<(), CliError> {
    let cfg = ctx.config.protocol.clone();
    let seed = ctx.config.fuzz.seed;
    ctx.seed("fuzz.seed", seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = boundary_floats();
    while values.len() < boundary_floats().len() + random {
        let v = f32::from_bits(rng.random());
        if !v.is_nan() {
            values.push(v);
        }
    }
    let mut text = String::from("hex_bits,durations_us\n");
    for v in values {
        text.push_str(&test_vector_row(v, &cfg));
        text.push('\n');
    }
    ctx.write("vectors.csv", &text)?;
    println!("wrote {} vectors", text.lines().count() - 1);
    Ok(())
}

fn random_frame(seed: u64, len: usize) -> Frame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let payload = (0..len)
        .map(|_| loop {
            let v = f32::from_bits(rng.random());
            if !v.is_nan() {
                break v;
            }
        })
        .collect();
    Frame::new(payload)
}

fn same_bits(a: &Frame, b: &Frame) -> bool {
    a.payload.len() == b.payload.len() && a.payload.iter().zip(&b.payload).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn protocol_fuzz(ctx: &mut Ctx) -> Result<(), CliError> {
    let cfg = ctx.config.protocol.clone();
    let channel = ctx.config.channel;
    let fuzz = ctx.config.fuzz.clone();
    ctx.seed("fuzz.seed", fuzz.seed);
    let frames = fuzz.roundtrips.div_ceil(STATE_FRAME_LEN);
    let roundtrip_failures: Vec<u64> = (0..frames as u64)
        .into_par_iter()
        .filter_map(|i| {
            let seed = hash_key(&[fuzz.seed, 0, i]);
            let len = STATE_FRAME_LEN.min(fuzz.roundtrips - i as usize * STATE_FRAME_LEN);
            let frame = random_frame(seed, len);
            let train = encode_frame(&frame, &cfg).ok()?;
            match decode_pulses(&train, &cfg) {
                Ok(f) if same_bits(&f, &frame) => None,
                _ => Some(seed),
            }
        })
        .collect();
    let trials: Vec<(bool, bool, usize, u64)> = (0..fuzz.trials as u64)
        .into_par_iter()
        .map(|i| {
            let seed = hash_key(&[fuzz.seed, 1, i]);
            let frame = random_frame(seed, STATE_FRAME_LEN);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ex = exchange(&frame, &channel, &cfg, &mut rng).expect("random frames contain no NaN");
            let corrupted = ex.frame.as_ref().is_some_and(|f| !same_bits(f, &frame));
            (ex.frame.is_none(), corrupted, ex.attempts, seed)
        })
        .collect();
    let lost = trials.iter().filter(|t| t.0).count();
    let corrupted: Vec<u64> = trials.iter().filter(|t| t.1).map(|t| t.3).collect();
    let attempts: usize = trials.iter().map(|t| t.2).sum();

    let mut text = String::new();
    let _ = writeln!(text, "roundtrips,{},failures,{}", fuzz.roundtrips, roundtrip_failures.len());
    let _ = writeln!(
        text,
        "channel,jitter {} drop {} truncate {}",
        channel.jitter, channel.drop_prob, channel.truncate_prob
    );
    let _ = writeln!(
        text,
        "exchanges,{},lost,{},corrupted,{},mean_attempts,{:.4}",
        fuzz.trials,
        lost,
        corrupted.len(),
        attempts as f64 / fuzz.trials.max(1) as f64
    );
    ctx.write("fuzz.txt", &text)?;
    print!("{text}");
    let violations: Vec<String> = roundtrip_failures
        .iter()
        .map(|s| format!("round-trip failure, frame seed {s}"))
        .chain(corrupted.iter().map(|s| format!("undetected corruption, exchange seed {s}")))
        .collect();
    if violations.is_empty() {
        Ok(())
    } else {
        let shown: Vec<&str> = violations.iter().take(10).map(String::as_str).collect();
        Err(CliError::Validation(format!(
            "{} violations\n{}",
            violations.len(),
            shown.join("\n")
        )))
    }
}

fn protocol_budget(ctx: &mut Ctx) -> Result<(), CliError> {
    let cfg = ctx.config.protocol.clone();
    let b = timing_budget(STATE_FRAME_LEN, &cfg);
    let bits = STATE_FRAME_LEN * 32;
    let mut text = String::new();
    let _ = writeln!(text, "T = {} us, gap = {} T", b.unit_us, cfg.gap_units);
    let _ = writeln!(
        text,
        "frame = gap + header 3T + gap + {bits} x (2T + gap) = {:.1} us (worst case, all ones)",
        b.frame_us
    );
    let _ = writeln!(
        text,
        "{} attempts = {:.1} ms, window = {:.1} ms, fits = {}",
        b.attempts,
        b.total_us / 1000.0,
        b.window_us / 1000.0,
        b.fits
    );
    ctx.write("budget.txt", &text)?;
    let json = serde_json::to_string_pretty(&b).map_err(|e| CliError::Runtime(e.to_string()))?;
    ctx.write("budget.json", &(json + "\n"))?;
    print!("{text}");
    Ok(())
}
