//! Per-frame orchestration.
//!
//! Every frame runs preprocessing, feature calculation (flow against the
//! previous frame and detection lookup), prediction, matching and update.
//! [`Mode::Concurrent`] runs each detection source on its own persistent
//! worker thread while the orchestrator computes flow; with `prefetch`, a
//! reader thread preprocesses frame `t + 1` while frame `t` is processed and
//! the result for `t` is emitted once `t + 1` has been read. Values cross
//! threads only through bounded channels, and every mode produces the same
//! tracks as [`Mode::Sequential`].

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assoc::{match_detections, DEFAULT_GATE};
use crate::detect::{clip_to_frame, filter_detections, DetectError, Detection, DetectionSource};
use crate::formats::FormatError;
use crate::geom::BBox;
use crate::imaging::{build_pyramid, select_level, structure_texture, Frame, ImagingError, StructureTexture};
use crate::optflow::{compute_flow, FieldStats, FlowError, FlowParams};
use crate::records::{records_for_frame, write_jsonl, TrackRecord};
use crate::track::{PredictionDropout, Scene, SceneObject, TrackError, TrackerConfig, UpdateReport};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("frame {frame}: {source}")]
    Imaging { frame: u64, source: ImagingError },
    #[error("frame {frame}: {source}")]
    Flow { frame: u64, source: FlowError },
    #[error("frame {frame}: {source}")]
    Detection { frame: u64, source: DetectError },
    #[error("frame {frame}: {source}")]
    Track { frame: u64, source: TrackError },
    #[error("frame {frame}: {source}")]
    Input { frame: u64, source: FormatError },
    #[error("frame {frame} follows frame {previous}")]
    IndexGap { frame: u64, previous: u64 },
    #[error("frame {frame} is {got:?}, earlier frames were {expected:?}")]
    DimensionChange { frame: u64, expected: (usize, usize), got: (usize, usize) },
    #[error("frame {frame}: motion field for {got:?} offered for pair {expected:?}")]
    FieldMismatch { frame: u64, expected: (u64, u64), got: Option<(u64, u64)> },
    #[error("sink: {0}")]
    Sink(#[from] std::io::Error),
    #[error("benchmark needs at least one repetition")]
    NoRepetitions,
    #[error("mode {mode} produced different tracks than sequential mode")]
    ModeMismatch { mode: String },
    #[error("a pipeline worker thread panicked")]
    WorkerPanic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Sequential,
    Concurrent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub flow: FlowParams,
    pub preprocess: StructureTexture,
    pub gate: f64,
    pub min_score: f64,
    /// Pyramid level override; `None` picks the level from the frame size.
    pub level: Option<usize>,
    pub mode: Mode,
    pub prefetch: bool,
    pub tracker: TrackerConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            flow: FlowParams::default(),
            preprocess: StructureTexture::default(),
            gate: DEFAULT_GATE,
            min_score: 0.5,
            level: None,
            mode: Mode::Sequential,
            prefetch: false,
            tracker: TrackerConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn with_mode(mut self, mode: Mode, prefetch: bool) -> Self {
        self.mode = mode;
        self.prefetch = prefetch;
        self
    }
}

/// Counts frames admitted into a run and not yet emitted.
#[derive(Debug, Clone, Default)]
pub struct FrameBudget {
    inner: Arc<BudgetCounters>,
}

#[derive(Debug, Default)]
struct BudgetCounters {
    live: AtomicUsize,
    high_water: AtomicUsize,
}

impl FrameBudget {
    pub fn admit(&self) -> LiveFrame {
        let now = self.inner.live.fetch_add(1, Ordering::SeqCst) + 1;
        self.inner.high_water.fetch_max(now, Ordering::SeqCst);
        LiveFrame { inner: Arc::clone(&self.inner) }
    }

    pub fn live(&self) -> usize {
        self.inner.live.load(Ordering::SeqCst)
    }

    pub fn high_water(&self) -> usize {
        self.inner.high_water.load(Ordering::SeqCst)
    }
}

/// Held from the moment a frame is read until its result is emitted.
#[derive(Debug)]
pub struct LiveFrame {
    inner: Arc<BudgetCounters>,
}

impl Drop for LiveFrame {
    fn drop(&mut self) {
        self.inner.live.fetch_sub(1, Ordering::SeqCst);
    }
}

/// A frame after preprocessing: the structure-texture image at the
/// processing pyramid level.
#[derive(Debug)]
pub struct PreparedFrame {
    pub index: u64,
    pub width: usize,
    pub height: usize,
    pub level: usize,
    pub image: Frame,
    pub preprocess_ms: f64,
    live: Option<LiveFrame>,
}

pub fn preprocess(frame: &Frame, config: &PipelineConfig) -> Result<PreparedFrame, PipelineError> {
    let start = Instant::now();
    let level = config.level.unwrap_or_else(|| select_level(frame.width(), frame.height()));
    let pyramid =
        build_pyramid(frame, level + 1).map_err(|source| PipelineError::Imaging { frame: frame.index(), source })?;
    let base = pyramid.into_level(level).expect("pyramid has the requested level");
    let image = structure_texture(&base, &config.preprocess);
    Ok(PreparedFrame {
        index: frame.index(),
        width: frame.width(),
        height: frame.height(),
        level,
        image,
        preprocess_ms: ms(start.elapsed()),
        live: None,
    })
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub preprocess_ms: f64,
    pub flow_ms: f64,
    pub detect_ms: f64,
    /// Wall time of the feature phase (flow and detection together).
    pub features_ms: f64,
    pub predict_ms: f64,
    pub match_ms: f64,
    pub update_ms: f64,
    pub total_ms: f64,
}

impl PhaseTimings {
    fn accumulate(&mut self, o: &PhaseTimings) {
        self.preprocess_ms += o.preprocess_ms;
        self.flow_ms += o.flow_ms;
        self.detect_ms += o.detect_ms;
        self.features_ms += o.features_ms;
        self.predict_ms += o.predict_ms;
        self.match_ms += o.match_ms;
        self.update_ms += o.update_ms;
        self.total_ms += o.total_ms;
    }

    fn scaled(&self, s: f64) -> PhaseTimings {
        PhaseTimings {
            preprocess_ms: self.preprocess_ms * s,
            flow_ms: self.flow_ms * s,
            detect_ms: self.detect_ms * s,
            features_ms: self.features_ms * s,
            predict_ms: self.predict_ms * s,
            match_ms: self.match_ms * s,
            update_ms: self.update_ms * s,
            total_ms: self.total_ms * s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSummary {
    pub pair: (u64, u64),
    pub level: usize,
    pub stats: FieldStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub index: u64,
    pub objects: Vec<SceneObject>,
    pub report: UpdateReport,
    pub dropouts: Vec<PredictionDropout>,
    pub flow: Option<FlowSummary>,
    pub timings: PhaseTimings,
}

impl FrameResult {
    pub fn records(&self) -> Vec<TrackRecord> {
        records_for_frame(self.index, &self.objects)
    }
}

/// JSONL of the track records of `results`; identical bytes mean identical tracks.
pub fn serialize_tracks(results: &[FrameResult]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in results {
        write_jsonl(&mut out, &r.records()).expect("writing to a Vec cannot fail");
    }
    out
}

type Answer = (Result<Vec<Detection>, DetectError>, Duration);

/// Where a detection source runs: inline on the orchestrator, or on its own
/// persistent worker thread that makes every call into the source.
enum Lane<'a> {
    Inline(&'a mut dyn DetectionSource),
    Worker { request: SyncSender<u64>, answer: Receiver<Answer> },
}

impl Lane<'_> {
    fn request(&mut self, frame: u64) -> Result<(), PipelineError> {
        match self {
            Lane::Inline(_) => Ok(()),
            Lane::Worker { request, .. } => request.send(frame).map_err(|_| PipelineError::WorkerPanic),
        }
    }

    fn collect(&mut self, frame: u64) -> Result<Answer, PipelineError> {
        match self {
            Lane::Inline(source) => {
                let start = Instant::now();
                let r = source.detections(frame);
                Ok((r, start.elapsed()))
            }
            Lane::Worker { answer, .. } => answer.recv().map_err(|_| PipelineError::WorkerPanic),
        }
    }
}

fn spawn_lane<'scope, 'env>(
    scope: &'scope thread::Scope<'scope, 'env>,
    source: &'env mut (dyn DetectionSource + 'env),
) -> Lane<'env> {
    let (request, requests) = sync_channel::<u64>(1);
    let (answers, answer) = sync_channel::<Answer>(1);
    scope.spawn(move || {
        while let Ok(frame) = requests.recv() {
            let start = Instant::now();
            let r = source.detections(frame);
            if answers.send((r, start.elapsed())).is_err() {
                break;
            }
        }
    });
    Lane::Worker { request, answer }
}

/// Owns the scene and the previous prepared frame between steps.
pub struct Tracker {
    config: PipelineConfig,
    scene: Scene,
    prev: Option<PreparedFrame>,
}

impl Tracker {
    pub fn new(config: PipelineConfig) -> Self {
        let scene = Scene::new(config.tracker);
        Self { config, scene, prev: None }
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    /// Preprocesses `frame` and runs the remaining phases on it.
    pub fn step(
        &mut self,
        frame: &Frame,
        sources: &mut [Box<dyn DetectionSource>],
    ) -> Result<FrameResult, PipelineError> {
        let prepared = preprocess(frame, &self.config)?;
        self.step_prepared(prepared, sources)
    }

    /// Runs feature calculation, prediction, matching and update on an
    /// already preprocessed frame. In concurrent mode the sources run on
    /// threads scoped to this call.
    pub fn step_prepared(
        &mut self,
        curr: PreparedFrame,
        sources: &mut [Box<dyn DetectionSource>],
    ) -> Result<FrameResult, PipelineError> {
        match self.config.mode {
            Mode::Sequential => {
                let mut lanes: Vec<Lane> =
                    sources.iter_mut().map(|s| Lane::Inline(s.as_mut() as &mut dyn DetectionSource)).collect();
                self.step_lanes(curr, &mut lanes)
            }
            Mode::Concurrent => thread::scope(|scope| {
                let mut lanes: Vec<Lane> =
                    sources.iter_mut().map(|s| spawn_lane(scope, s.as_mut() as &mut dyn DetectionSource)).collect();
                self.step_lanes(curr, &mut lanes)
            }),
        }
    }

    fn step_lanes(&mut self, mut curr: PreparedFrame, lanes: &mut [Lane]) -> Result<FrameResult, PipelineError> {
        let start = Instant::now();
        let index = curr.index;
        let mut timings = PhaseTimings { preprocess_ms: curr.preprocess_ms, ..Default::default() };
        curr.live = None;

        if let Some(prev) = &self.prev {
            if index != prev.index + 1 {
                return Err(PipelineError::IndexGap { frame: index, previous: prev.index });
            }
            if (curr.width, curr.height, curr.level) != (prev.width, prev.height, prev.level) {
                return Err(PipelineError::DimensionChange {
                    frame: index,
                    expected: (prev.width, prev.height),
                    got: (curr.width, curr.height),
                });
            }
        }

        // feature calculation: detection lanes are asked first so workers
        // overlap with the flow solve
        let features_start = Instant::now();
        for lane in lanes.iter_mut() {
            lane.request(index)?;
        }
        let flow_start = Instant::now();
        let flow = match &self.prev {
            Some(prev) => Some(
                compute_flow(&prev.image, &curr.image, &self.config.flow)
                    .map_err(|source| PipelineError::Flow { frame: index, source })?,
            ),
            None => None,
        };
        timings.flow_ms = ms(flow_start.elapsed());
        let mut detections = Vec::new();
        let mut first_error = None;
        for lane in lanes.iter_mut() {
            let (answer, elapsed) = lane.collect(index)?;
            timings.detect_ms += ms(elapsed);
            match answer {
                Ok(d) => detections.extend(d),
                Err(e) => {
                    first_error.get_or_insert(e);
                }
            }
        }
        if let Some(source) = first_error {
            return Err(PipelineError::Detection { frame: index, source });
        }
        timings.features_ms = ms(features_start.elapsed());
        let detections = clip_to_frame(
            filter_detections(detections, self.config.min_score),
            curr.width as f64,
            curr.height as f64,
        );

        // prediction
        let predict_start = Instant::now();
        let mut dropouts = Vec::new();
        let mut flow_summary = None;
        if let (Some(field), Some(prev)) = (&flow, &self.prev) {
            let expected = (prev.index, index);
            if field.pair() != Some(expected) {
                return Err(PipelineError::FieldMismatch { frame: index, expected, got: field.pair() });
            }
            dropouts = self.scene.apply_prediction(field, curr.level, index, curr.width as f64, curr.height as f64);
            flow_summary = Some(FlowSummary { pair: expected, level: curr.level, stats: field.stats() });
        }
        timings.predict_ms = ms(predict_start.elapsed());

        // matching
        let match_start = Instant::now();
        let active = self.scene.active_indices();
        let predicted: Vec<(BBox, u32)> = active
            .iter()
            .map(|&i| {
                let o = &self.scene.objects()[i];
                (o.bbox, o.class_id)
            })
            .collect();
        let assignment = match_detections(&predicted, &detections, self.config.gate);
        timings.match_ms = ms(match_start.elapsed());

        // update
        let update_start = Instant::now();
        let report = self
            .scene
            .update(&active, &assignment, &detections, index)
            .map_err(|source| PipelineError::Track { frame: index, source })?;
        timings.update_ms = ms(update_start.elapsed());
        timings.total_ms = timings.preprocess_ms + ms(start.elapsed());

        self.prev = Some(curr);
        Ok(FrameResult {
            index,
            objects: self.scene.objects().to_vec(),
            report,
            dropouts,
            flow: flow_summary,
            timings,
        })
    }
}

pub trait ResultSink {
    fn emit(&mut self, result: &FrameResult) -> std::io::Result<()>;
}

#[derive(Debug, Default)]
pub struct MemorySink {
    pub results: Vec<FrameResult>,
    /// Time since the sink was created at each emission.
    pub emitted_at: Vec<Duration>,
    created: Option<Instant>,
}

impl MemorySink {
    pub fn new() -> Self {
        Self { created: Some(Instant::now()), ..Default::default() }
    }
}

impl ResultSink for MemorySink {
    fn emit(&mut self, result: &FrameResult) -> std::io::Result<()> {
        let created = *self.created.get_or_insert_with(Instant::now);
        self.emitted_at.push(created.elapsed());
        self.results.push(result.clone());
        Ok(())
    }
}

impl<S: ResultSink + ?Sized> ResultSink for &mut S {
    fn emit(&mut self, result: &FrameResult) -> std::io::Result<()> {
        (**self).emit(result)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Census {
    pub ids_created: u64,
    pub active: usize,
    pub lost: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub frames: u64,
    pub complete: bool,
    pub error: Option<String>,
    pub mean_timings: PhaseTimings,
    pub census: Census,
    /// Largest number of frames read past a frame before its result was emitted.
    pub emission_lag: u64,
    /// Most frames alive (read, not yet emitted) at any one time.
    pub live_frames_high_water: usize,
    pub wall_ms: f64,
}

/// Frame stream accepted by [`run`].
pub type FrameIter<'a> = dyn Iterator<Item = Result<Frame, FormatError>> + Send + 'a;

struct Emitter<'s> {
    sink: &'s mut dyn ResultSink,
    emitted: u64,
    frames_read: u64,
    max_lag: u64,
    totals: PhaseTimings,
}

impl Emitter<'_> {
    fn emit(&mut self, result: FrameResult, live: LiveFrame) -> Result<(), PipelineError> {
        let position = self.emitted;
        self.max_lag = self.max_lag.max(self.frames_read - (position + 1));
        self.totals.accumulate(&result.timings);
        self.sink.emit(&result)?;
        self.emitted += 1;
        drop(live);
        Ok(())
    }
}

/// Drives the tracker over `frames`, emitting one result per frame in order.
///
/// A failing frame source or detection source ends the run early: results
/// already emitted stay valid and the summary is marked incomplete. Only
/// sink failures are returned as errors.
pub fn run(
    frames: &mut FrameIter<'_>,
    sources: &mut [Box<dyn DetectionSource>],
    config: &PipelineConfig,
    sink: &mut dyn ResultSink,
) -> Result<RunSummary, PipelineError> {
    let budget = FrameBudget::default();
    let start = Instant::now();
    let mut tracker = Tracker::new(config.clone());
    let mut emitter = Emitter { sink, emitted: 0, frames_read: 0, max_lag: 0, totals: PhaseTimings::default() };

    let failure = thread::scope(|scope| -> Result<Option<PipelineError>, PipelineError> {
        let mut lanes: Vec<Lane> = match config.mode {
            Mode::Sequential => sources.iter_mut().map(|s| Lane::Inline(s.as_mut() as &mut dyn DetectionSource)).collect(),
            Mode::Concurrent => {
                sources.iter_mut().map(|s| spawn_lane(scope, s.as_mut() as &mut dyn DetectionSource)).collect()
            }
        };

        if !config.prefetch {
            for (position, item) in (0u64..).zip(frames) {
                let live = budget.admit();
                emitter.frames_read += 1;
                let frame = match item {
                    Ok(f) => f,
                    Err(source) => return Ok(Some(PipelineError::Input { frame: position, source })),
                };
                let result = preprocess(&frame, config).and_then(|p| tracker.step_lanes(p, &mut lanes));
                match result {
                    Ok(r) => emitter.emit(r, live)?,
                    Err(e) => return Ok(Some(e)),
                }
            }
            return Ok(None);
        }

        // Prefetch: a reader thread preprocesses the next frame while this
        // thread processes the current one. Two permits bound the frames
        // alive at once; a permit returns when a result is emitted.
        let (permit_tx, permit_rx) = sync_channel::<()>(2);
        let (prepared_tx, prepared_rx) = sync_channel::<Result<PreparedFrame, PipelineError>>(1);
        let reader_budget = budget.clone();
        let reader = scope.spawn(move || {
            let mut position = 0u64;
            while permit_rx.recv().is_ok() {
                let Some(item) = frames.next() else { break };
                let live = reader_budget.admit();
                let prepared = item
                    .map_err(|source| PipelineError::Input { frame: position, source })
                    .and_then(|f| preprocess(&f, config))
                    .map(|mut p| {
                        p.live = Some(live);
                        p
                    });
                position += 1;
                let failed = prepared.is_err();
                if prepared_tx.send(prepared).is_err() || failed {
                    break;
                }
            }
        });
        for _ in 0..2 {
            permit_tx.send(()).expect("permit channel has room for two");
        }

        let mut pending: Option<(FrameResult, LiveFrame)> = None;
        let mut outcome = Ok(None);
        while let Ok(next) = prepared_rx.recv() {
            emitter.frames_read += 1;
            let mut prepared = match next {
                Ok(p) => p,
                Err(e) => {
                    outcome = Ok(Some(e));
                    break;
                }
            };
            if let Some((result, live)) = pending.take() {
                if let Err(e) = emitter.emit(result, live) {
                    outcome = Err(e);
                    break;
                }
                let _ = permit_tx.send(());
            }
            let live = prepared.live.take().expect("reader attaches a live token");
            match tracker.step_lanes(prepared, &mut lanes) {
                Ok(r) => pending = Some((r, live)),
                Err(e) => {
                    outcome = Ok(Some(e));
                    break;
                }
            }
        }
        // Unblock and retire the reader before the final emission.
        drop(permit_tx);
        drop(prepared_rx);
        reader.join().map_err(|_| PipelineError::WorkerPanic)?;
        if let Some((result, live)) = pending.take() {
            emitter.emit(result, live)?;
        }
        outcome
    })?;

    let frames_done = emitter.emitted;
    let mean_timings = if frames_done > 0 { emitter.totals.scaled(1.0 / frames_done as f64) } else { emitter.totals };
    let objects = tracker.scene().objects();
    Ok(RunSummary {
        frames: frames_done,
        complete: failure.is_none(),
        error: failure.map(|e| e.to_string()),
        mean_timings,
        census: Census {
            ids_created: tracker.scene().ids_created(),
            active: objects.iter().filter(|o| o.is_active()).count(),
            lost: objects.iter().filter(|o| !o.is_active()).count(),
        },
        emission_lag: emitter.max_lag,
        live_frames_high_water: budget.high_water(),
        wall_ms: ms(start.elapsed()),
    })
}

/// Convenience wrapper collecting results in memory.
pub fn run_frames(
    frames: &[Frame],
    sources: &mut [Box<dyn DetectionSource>],
    config: &PipelineConfig,
) -> Result<(Vec<FrameResult>, RunSummary), PipelineError> {
    let mut iter = frames.iter().cloned().map(Ok);
    let mut sink = MemorySink::new();
    let summary = run(&mut iter, sources, config, &mut sink)?;
    Ok((sink.results, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeTiming {
    pub mode: String,
    pub mean_frame_ms: f64,
    pub median_frame_ms: f64,
    pub phases: PhaseTimings,
    pub emission_lag: u64,
    pub live_frames_high_water: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub frames: usize,
    pub repetitions: usize,
    pub modes: Vec<ModeTiming>,
    /// Sequential mean divided by concurrent mean.
    pub concurrent_speedup: f64,
    /// Sequential mean divided by concurrent-with-prefetch mean.
    pub prefetch_speedup: f64,
}

pub const BENCH_MODES: [(Mode, bool, &str); 3] = [
    (Mode::Sequential, false, "sequential"),
    (Mode::Concurrent, false, "concurrent"),
    (Mode::Concurrent, true, "concurrent+prefetch"),
];

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Times the three execution modes on the same frames, `repetitions` runs
/// each, interleaving modes within each repetition. Fails if any mode's
/// tracks differ from sequential mode.
pub fn bench(
    frames: &[Frame],
    make_sources: &dyn Fn() -> Vec<Box<dyn DetectionSource>>,
    config: &PipelineConfig,
    repetitions: usize,
) -> Result<BenchReport, PipelineError> {
    if repetitions == 0 {
        return Err(PipelineError::NoRepetitions);
    }
    struct Acc {
        frame_ms: Vec<f64>,
        run_ms: Vec<f64>,
        phases: PhaseTimings,
        lag: u64,
        high_water: usize,
    }
    let mut accs: Vec<Acc> = BENCH_MODES
        .iter()
        .map(|_| Acc { frame_ms: vec![], run_ms: vec![], phases: PhaseTimings::default(), lag: 0, high_water: 0 })
        .collect();
    let mut reference: Option<Vec<u8>> = None;

    for _ in 0..repetitions {
        for (acc, &(mode, prefetch, name)) in accs.iter_mut().zip(BENCH_MODES.iter()) {
            let cfg = config.clone().with_mode(mode, prefetch);
            let mut sources = make_sources();
            let mut iter = frames.iter().cloned().map(Ok);
            let mut sink = MemorySink::new();
            let summary = run(&mut iter, &mut sources, &cfg, &mut sink)?;
            let bytes = serialize_tracks(&sink.results);
            match &reference {
                None => reference = Some(bytes),
                Some(r) if *r != bytes => return Err(PipelineError::ModeMismatch { mode: name.to_string() }),
                Some(_) => {}
            }
            let mut last = Duration::ZERO;
            for &t in &sink.emitted_at {
                acc.frame_ms.push(ms(t - last));
                last = t;
            }
            acc.run_ms.push(summary.wall_ms / frames.len().max(1) as f64);
            acc.phases.accumulate(&summary.mean_timings);
            acc.lag = acc.lag.max(summary.emission_lag);
            acc.high_water = acc.high_water.max(summary.live_frames_high_water);
        }
    }

    let reps = repetitions as f64;
    let modes: Vec<ModeTiming> = accs
        .iter_mut()
        .zip(BENCH_MODES.iter())
        .map(|(acc, &(_, _, name))| ModeTiming {
            mode: name.to_string(),
            mean_frame_ms: acc.run_ms.iter().sum::<f64>() / reps,
            median_frame_ms: median(&mut acc.frame_ms),
            phases: acc.phases.scaled(1.0 / reps),
            emission_lag: acc.lag,
            live_frames_high_water: acc.high_water,
        })
        .collect();
    let ratio = |i: usize| if modes[i].mean_frame_ms > 0.0 { modes[0].mean_frame_ms / modes[i].mean_frame_ms } else { 1.0 };
    Ok(BenchReport {
        frames: frames.len(),
        repetitions,
        concurrent_speedup: ratio(1),
        prefetch_speedup: ratio(2),
        modes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::{ScriptedSource, VecSource};
    use crate::harness::ValueNoise;

    fn textured(index: u64, shift: f64) -> Frame {
        let n = ValueNoise::new(11);
        Frame::from_fn(48, 40, index, |x, y| n.sample(x as f64 - shift, y as f64)).unwrap()
    }

    fn fast_config() -> PipelineConfig {
        PipelineConfig {
            flow: FlowParams { warps_per_level: 2, iterations_per_warp: 20, ..Default::default() },
            ..Default::default()
        }
    }

    fn person(b: BBox) -> Detection {
        Detection::new(0, "person", 0.9, b)
    }

    #[test]
    fn bootstrap_spawns_every_detection() {
        let mut tracker = Tracker::new(fast_config());
        let mut sources: Vec<Box<dyn DetectionSource>> = vec![Box::new(VecSource {
            frames: vec![vec![person(BBox::new(1.0, 1.0, 8.0, 8.0)), person(BBox::new(20.0, 5.0, 8.0, 8.0))]],
        })];
        let r = tracker.step(&textured(0, 0.0), &mut sources).unwrap();
        assert_eq!(r.report.spawned, vec![0, 1]);
        assert!(r.flow.is_none());
    }

    #[test]
    fn static_scene_keeps_ids() {
        let b = BBox::new(10.0, 10.0, 12.0, 12.0);
        let frames: Vec<Frame> = (0..4).map(|i| textured(i, 0.0)).collect();
        let mut sources: Vec<Box<dyn DetectionSource>> =
            vec![Box::new(VecSource { frames: vec![vec![person(b)]; 4] })];
        let (results, summary) = run_frames(&frames, &mut sources, &fast_config()).unwrap();
        assert!(summary.complete);
        for r in &results {
            assert_eq!(r.objects.len(), 1);
            assert_eq!(r.objects[0].id, 0);
            assert_eq!(r.objects[0].bbox, b);
        }
    }

    #[test]
    fn index_gap_rejected() {
        let mut tracker = Tracker::new(fast_config());
        let mut none: Vec<Box<dyn DetectionSource>> = vec![];
        tracker.step(&textured(0, 0.0), &mut none).unwrap();
        let err = tracker.step(&textured(2, 0.0), &mut none).unwrap_err();
        assert!(matches!(err, PipelineError::IndexGap { frame: 2, previous: 0 }));
    }

    #[test]
    fn dimension_change_rejected() {
        let mut tracker = Tracker::new(fast_config());
        let mut none: Vec<Box<dyn DetectionSource>> = vec![];
        tracker.step(&textured(0, 0.0), &mut none).unwrap();
        let other = Frame::constant(30, 30, 1, 0.5).unwrap();
        assert!(matches!(tracker.step(&other, &mut none), Err(PipelineError::DimensionChange { .. })));
    }

    #[test]
    fn source_failure_ends_run_incomplete() {
        let frames: Vec<Frame> = (0..5).map(|i| textured(i, 0.0)).collect();
        for (mode, prefetch) in [(Mode::Sequential, false), (Mode::Concurrent, false), (Mode::Concurrent, true)] {
            let mut sources: Vec<Box<dyn DetectionSource>> = vec![Box::new(VecSource { frames: vec![vec![]; 3] })];
            let cfg = fast_config().with_mode(mode, prefetch);
            let (results, summary) = run_frames(&frames, &mut sources, &cfg).unwrap();
            assert_eq!(results.len(), 3, "{mode:?} {prefetch}");
            assert!(!summary.complete);
            assert!(summary.error.unwrap().contains("frame 3"));
        }
    }

    #[test]
    fn single_frame_run() {
        let frames = vec![textured(0, 0.0)];
        for prefetch in [false, true] {
            let mut sources: Vec<Box<dyn DetectionSource>> = vec![Box::new(ScriptedSource::default())];
            let cfg = fast_config().with_mode(Mode::Concurrent, prefetch);
            let (results, summary) = run_frames(&frames, &mut sources, &cfg).unwrap();
            assert_eq!(results.len(), 1);
            assert!(results[0].flow.is_none());
            assert_eq!(summary.emission_lag, 0);
        }
    }

    #[test]
    fn bench_rejects_zero_repetitions() {
        let frames = vec![textured(0, 0.0)];
        let make = || -> Vec<Box<dyn DetectionSource>> { vec![] };
        assert!(matches!(bench(&frames, &make, &fast_config(), 0), Err(PipelineError::NoRepetitions)));
    }

    #[test]
    fn budget_counts_live_frames() {
        let b = FrameBudget::default();
        let a = b.admit();
        let c = b.admit();
        assert_eq!(b.live(), 2);
        drop(a);
        let _d = b.admit();
        drop(c);
        assert_eq!(b.live(), 1);
        assert_eq!(b.high_water(), 2);
    }
}
