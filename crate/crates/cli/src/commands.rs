use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Duration;

use flowtrack::detect::{
    anchor_kmeans_with, AnchorMetric, DetectError, DetectionSource, LatencySource, ScriptedSource,
};
use flowtrack::formats::{open_frames, read_pgm, write_flo};
use flowtrack::harness::{evaluate, export_sequence, ExportError, NoiseModel, SyntheticScene};
use flowtrack::imaging::{structure_texture, StructureTexture};
use flowtrack::optflow::{compute_flow, FlowParams};
use flowtrack::pipeline::{self, FrameResult, Mode, PipelineConfig, ResultSink};
use flowtrack::records::{
    group_mot, group_tracks, group_truth, read_jsonl, read_mot, read_truth_jsonl, write_jsonl, write_jsonl_trailer,
    write_mot, Trailer,
};
use flowtrack::track::TrackerConfig;
use serde_json::{json, Value};

use crate::config::ConfigFile;
use crate::{AnchorArgs, BenchArgs, CliError, EvalArgs, FlowArgs, FlowFlags, FormatArg, MetricArg, ModeArg, PipelineFlags, SynthArgs, TrackArgs};

fn flow_params(flags: &FlowFlags, file: &ConfigFile) -> Result<FlowParams, CliError> {
    let d = FlowParams::default();
    let params = FlowParams {
        data_weight: file.pick(flags.data_weight, "data_weight", d.data_weight)?,
        huber_epsilon: file.pick(flags.huber_epsilon, "huber_epsilon", d.huber_epsilon)?,
        time_step: file.pick(flags.time_step, "time_step", d.time_step)?,
        warps_per_level: file.pick(flags.warps, "warps", d.warps_per_level)?,
        iterations_per_warp: file.pick(flags.iterations, "iterations", d.iterations_per_warp)?,
        pyramid_scales: match flags.scales {
            Some(s) => Some(s),
            None => file.get("scales")?,
        },
        median_filter: file.pick(flags.median_filter, "median_filter", d.median_filter)?,
    };
    params.validate().map_err(|e| CliError::input(e.to_string()))?;
    Ok(params)
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile, CliError> {
    path.map(ConfigFile::load).transpose().map(Option::unwrap_or_default)
}

fn pipeline_config(flags: &PipelineFlags, file: &ConfigFile) -> Result<PipelineConfig, CliError> {
    let d = PipelineConfig::default();
    let st = StructureTexture::default();
    let tracker = TrackerConfig::default();
    let mode = match file.pick(flags.mode, "mode", ModeArg::Sequential)? {
        ModeArg::Sequential => Mode::Sequential,
        ModeArg::Concurrent => Mode::Concurrent,
    };
    let config = PipelineConfig {
        flow: flow_params(&flags.flow, file)?,
        preprocess: StructureTexture {
            smoothing_weight: file.pick(flags.smoothing_weight, "smoothing_weight", st.smoothing_weight)?,
            blend: file.pick(flags.blend, "blend", st.blend)?,
            iterations: file.pick(flags.rof_iterations, "rof_iterations", st.iterations)?,
        },
        gate: file.pick(flags.gate, "gate", d.gate)?,
        min_score: file.pick(flags.min_score, "min_score", d.min_score)?,
        level: match flags.level {
            Some(l) => Some(l),
            None => file.get("level")?,
        },
        mode,
        prefetch: file.pick(flags.prefetch, "prefetch", d.prefetch)?,
        tracker: TrackerConfig {
            max_coast: file.pick(flags.max_coast, "max_coast", tracker.max_coast)?,
            box_blend: file.pick(flags.box_blend, "box_blend", tracker.box_blend)?,
        },
    };
    let unit = |name: &str, v: f64| {
        if (0.0..=1.0).contains(&v) {
            Ok(())
        } else {
            Err(CliError::input(format!("{name} must lie in [0, 1], got {v}")))
        }
    };
    unit("gate", config.gate)?;
    unit("min-score", config.min_score)?;
    unit("box-blend", config.tracker.box_blend)?;
    unit("blend", config.preprocess.blend as f64)?;
    if config.preprocess.smoothing_weight.is_nan() || config.preprocess.smoothing_weight <= 0.0 {
        return Err(CliError::input("smoothing-weight must be positive"));
    }
    Ok(config)
}

fn load_detections(path: &Path) -> Result<ScriptedSource, CliError> {
    ScriptedSource::from_path(path).map_err(|e| match e {
        DetectError::Io { .. } => CliError::input(e.to_string()),
        other => CliError::input(format!("{}: {other}", path.display())),
    })
}

fn load_sources(flags: &PipelineFlags) -> Result<Vec<ScriptedSource>, CliError> {
    let mut sources = vec![load_detections(&flags.detections)?];
    if let Some(p) = &flags.detections2 {
        sources.push(load_detections(p)?);
    }
    Ok(sources)
}

fn boxed(sources: &[ScriptedSource], latency: Duration) -> Vec<Box<dyn DetectionSource>> {
    sources
        .iter()
        .map(|s| -> Box<dyn DetectionSource> {
            if latency.is_zero() {
                Box::new(s.clone())
            } else {
                Box::new(LatencySource::new(s.clone(), latency))
            }
        })
        .collect()
}

struct RecordSink<W: Write> {
    out: W,
    format: FormatArg,
}

impl<W: Write> ResultSink for RecordSink<W> {
    fn emit(&mut self, result: &FrameResult) -> io::Result<()> {
        let records = result.records();
        match self.format {
            FormatArg::Jsonl => write_jsonl(&mut self.out, &records),
            FormatArg::Mot => write_mot(&mut self.out, &records),
        }
    }
}

fn to_json(value: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(value).expect("report types serialize")
}

pub fn track(args: TrackArgs) -> Result<(), CliError> {
    let file = load_config(args.pipeline.config.as_deref())?;
    let config = pipeline_config(&args.pipeline, &file)?;
    let format = file.pick(args.format, "format", FormatArg::Jsonl)?;
    let sources = load_sources(&args.pipeline)?;
    let mut frames = open_frames(&args.pipeline.frames).map_err(|e| CliError::input(e.to_string()))?;

    let out: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| CliError::input(format!("{}: {e}", p.display())))?,
        )),
        None => Box::new(BufWriter::new(io::stdout())),
    };
    let mut sink = RecordSink { out, format };
    let summary = pipeline::run(&mut frames, &mut boxed(&sources, Duration::ZERO), &config, &mut sink)
        .map_err(|e| CliError::internal(e.to_string()))?;
    if !summary.complete {
        let trailer = Trailer { complete: false, frames: summary.frames, error: summary.error.clone() };
        let written = match format {
            FormatArg::Jsonl => write_jsonl_trailer(&mut sink.out, &trailer),
            FormatArg::Mot => writeln!(sink.out, "# trailer {}", serde_json::to_string(&trailer).expect("trailer serializes")),
        };
        written.map_err(|e| CliError::internal(e.to_string()))?;
    }
    sink.out.flush().map_err(|e| CliError::internal(e.to_string()))?;
    drop(sink);

    let report = to_json(&summary);
    if args.out.is_some() {
        println!("{report}");
    } else {
        eprintln!("{report}");
    }
    match summary.error {
        None => Ok(()),
        Some(e) => Err(CliError::input(format!("run stopped after {} frames: {e}", summary.frames))),
    }
}

pub fn flow(args: FlowArgs) -> Result<(), CliError> {
    let params = flow_params(&args.flow, &ConfigFile::default())?;
    let input = |e: flowtrack::formats::FormatError| CliError::input(e.to_string());
    let mut prev = read_pgm(&args.prev, 0).map_err(input)?;
    let mut curr = read_pgm(&args.curr, 1).map_err(input)?;
    if args.preprocess {
        let st = StructureTexture::default();
        prev = structure_texture(&prev, &st);
        curr = structure_texture(&curr, &st);
    }
    let field = compute_flow(&prev, &curr, &params).map_err(|e| CliError::input(e.to_string()))?;
    if let Some(out) = &args.out {
        write_flo(out, &field).map_err(|e| CliError::input(e.to_string()))?;
    }
    println!("{}", to_json(&field.stats()));
    Ok(())
}

fn parse_box_line(v: &Value) -> Option<(f64, f64)> {
    let num = |v: &Value| v.as_f64();
    match v {
        Value::Array(a) if a.len() == 2 => Some((num(&a[0])?, num(&a[1])?)),
        Value::Array(a) if a.len() == 4 => Some((num(&a[2])?, num(&a[3])?)),
        Value::Object(o) => match (o.get("w"), o.get("h"), o.get("box")) {
            (Some(w), Some(h), _) => Some((num(w)?, num(h)?)),
            (_, _, Some(b)) => parse_box_line(b),
            _ => None,
        },
        _ => None,
    }
}

pub fn anchors(args: AnchorArgs) -> Result<(), CliError> {
    let path = &args.boxes;
    let reader = BufReader::new(File::open(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?);
    let mut boxes = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || CliError::input(format!("{}:{}: expected [w, h], {{\"w\", \"h\"}} or a record with \"box\"", path.display(), n + 1));
        let value: Value = serde_json::from_str(&line).map_err(|_| bad())?;
        boxes.push(parse_box_line(&value).ok_or_else(bad)?);
    }
    if boxes.is_empty() {
        return Err(CliError::input(format!("{}: no boxes", path.display())));
    }
    let metric = match args.metric {
        MetricArg::Iou => AnchorMetric::Iou,
        MetricArg::Euclidean => AnchorMetric::Euclidean,
    };
    let report = anchor_kmeans_with(&boxes, args.k, args.seed, metric).map_err(|e| CliError::input(e.to_string()))?;
    let out = json!({
        "anchors": report.anchors.anchors,
        "iterations": report.iterations,
        "converged": report.converged,
        "distortion": report.distortion_history.last(),
    });
    println!("{}", to_json(&out));
    Ok(())
}

pub fn synth(args: SynthArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.spec).map_err(|e| CliError::input(format!("{}: {e}", args.spec.display())))?;
    let scene: SyntheticScene =
        serde_json::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", args.spec.display())))?;
    let noise = NoiseModel {
        jitter_sigma: args.jitter,
        size_jitter_sigma: args.size_jitter,
        dropout_prob: args.dropout,
        false_positive_rate: args.false_positives,
        score_min: args.score_min,
        score_max: args.score_max,
        seed: args.seed,
    };
    let exported = export_sequence(&scene, &noise, &args.out).map_err(|e| match e {
        ExportError::Scene(_) | ExportError::Noise(_) => CliError::input(format!("{}: {e}", args.spec.display())),
        other => CliError::input(other.to_string()),
    })?;
    let out = json!({
        "frames": exported.frames,
        "frames_dir": exported.frames_dir,
        "detections": exported.detections,
        "truth": exported.truth,
    });
    println!("{}", to_json(&out));
    Ok(())
}

pub fn bench(args: BenchArgs) -> Result<(), CliError> {
    if args.reps == 0 {
        return Err(CliError::input("--reps must be at least 1"));
    }
    let file = load_config(args.pipeline.config.as_deref())?;
    let config = pipeline_config(&args.pipeline, &file)?;
    let sources = load_sources(&args.pipeline)?;
    let frames: Vec<_> = open_frames(&args.pipeline.frames)
        .and_then(|s| s.collect::<Result<Vec<_>, _>>())
        .map_err(|e| CliError::input(e.to_string()))?;
    let latency = Duration::from_millis(args.latency_ms);
    let make = || boxed(&sources, latency);
    let report = pipeline::bench(&frames, &make, &config, args.reps).map_err(|e| match e {
        pipeline::PipelineError::ModeMismatch { .. } | pipeline::PipelineError::WorkerPanic => {
            CliError::internal(e.to_string())
        }
        other => CliError::input(other.to_string()),
    })?;
    if args.json {
        println!("{}", to_json(&report));
        return Ok(());
    }
    println!("{} frames, {} repetition(s); tracks identical in all modes", report.frames, report.repetitions);
    println!(
        "{:<22}{:>10}{:>10}{:>12}{:>10}{:>10}{:>10}{:>10}{:>10}{:>6}",
        "mode", "mean ms", "median", "preprocess", "flow", "detect", "features", "predict", "match", "lag"
    );
    for m in &report.modes {
        let p = &m.phases;
        println!(
            "{:<22}{:>10.2}{:>10.2}{:>12.2}{:>10.2}{:>10.2}{:>10.2}{:>10.3}{:>10.3}{:>6}",
            m.mode, m.mean_frame_ms, m.median_frame_ms, p.preprocess_ms, p.flow_ms, p.detect_ms, p.features_ms,
            p.predict_ms, p.match_ms, m.emission_lag
        );
    }
    println!(
        "speedup over sequential: concurrent {:.3}x, concurrent+prefetch {:.3}x",
        report.concurrent_speedup, report.prefetch_speedup
    );
    Ok(())
}

/// True when the first record of a JSONL file carries a `box` array, as ground truth does.
fn in_truth_layout(path: &Path) -> Result<bool, CliError> {
    let reader = BufReader::new(File::open(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?);
    for line in reader.lines() {
        let line = line.map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        return Ok(serde_json::from_str::<Value>(&line).is_ok_and(|v| v.get("box").is_some()));
    }
    Ok(false)
}

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    let open = |p: &Path| {
        File::open(p).map(BufReader::new).map_err(|e| CliError::input(format!("{}: {e}", p.display())))
    };
    let parse_err = |p: &Path, e: flowtrack::records::RecordError| CliError::input(format!("{}: {e}", p.display()));
    let is_mot = args
        .tracks
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("txt") || e.eq_ignore_ascii_case("csv"));
    let tracks = if is_mot {
        group_mot(&read_mot(open(&args.tracks)?).map_err(|e| parse_err(&args.tracks, e))?)
    } else if in_truth_layout(&args.tracks)? {
        group_truth(&read_truth_jsonl(open(&args.tracks)?).map_err(|e| parse_err(&args.tracks, e))?)
    } else {
        group_tracks(&read_jsonl(open(&args.tracks)?).map_err(|e| parse_err(&args.tracks, e))?)
    };
    let truth = group_truth(&read_truth_jsonl(open(&args.truth)?).map_err(|e| parse_err(&args.truth, e))?);
    let metrics = evaluate(&tracks, &truth).map_err(|e| CliError::input(e.to_string()))?;
    println!("{}", to_json(&metrics));
    Ok(())
}
