use flowtrack::detect::{Detection, DetectionSource, ScriptedSource, VecSource};
use flowtrack::geom::BBox;
use flowtrack::harness::{emit_sequence, two_lane_scene, NoiseModel, ObjectScript, SyntheticScene, Waypoint};
use flowtrack::imaging::Frame;
use flowtrack::optflow::FlowParams;
use flowtrack::pipeline::{
    bench, preprocess, run, run_frames, serialize_tracks, FrameResult, Mode, PipelineConfig, ResultSink, Tracker,
    BENCH_MODES,
};
use flowtrack::records::{read_jsonl, write_jsonl};
use flowtrack::TrackState;

fn quick() -> PipelineConfig {
    PipelineConfig {
        flow: FlowParams { warps_per_level: 3, iterations_per_warp: 30, ..Default::default() },
        ..Default::default()
    }
}

fn moving_square() -> SyntheticScene {
    SyntheticScene {
        width: 80,
        height: 60,
        frames: 10,
        background_seed: 1,
        objects: vec![ObjectScript {
            class_id: 0,
            label: "square".into(),
            width: 16.0,
            height: 16.0,
            waypoints: vec![Waypoint { t: 0, x: 8.0, y: 20.0 }, Waypoint { t: 9, x: 44.0, y: 24.0 }],
            texture_seed: 2,
        }],
    }
}

fn frames_of(scene: &SyntheticScene) -> Vec<Frame> {
    (0..scene.frames).map(|t| scene.render(t).unwrap()).collect()
}

fn sources_of(dets: Vec<Vec<Detection>>) -> Vec<Box<dyn DetectionSource>> {
    vec![Box::new(VecSource { frames: dets })]
}

#[test]
fn moving_square_is_one_track() {
    let scene = moving_square();
    let (dets, _) = emit_sequence(&scene, &NoiseModel::exact()).unwrap();
    let (results, summary) = run_frames(&frames_of(&scene), &mut sources_of(dets), &quick()).unwrap();
    assert_eq!(summary.census.ids_created, 1);
    let last = &results.last().unwrap().objects;
    assert_eq!(last.len(), 1);
    assert_eq!(last[0].last_seen, 9);
    assert_eq!(last[0].state, TrackState::Active);
}

#[test]
fn flow_prediction_follows_motion() {
    let scene = moving_square();
    let (dets, _) = emit_sequence(&scene, &NoiseModel::exact()).unwrap();
    let frames = frames_of(&scene);
    // detections only on the first frame: afterwards the box moves by flow alone
    let mut sources: Vec<Box<dyn DetectionSource>> =
        sources_of((0..10).map(|t| if t == 0 { dets[0].clone() } else { vec![] }).collect());
    let config = PipelineConfig { tracker: flowtrack::track::TrackerConfig { max_coast: 10, box_blend: 0.0 }, ..Default::default() };
    let mut tracker = Tracker::new(config);
    tracker.step(&frames[0], &mut sources).unwrap();
    let moved = tracker.step(&frames[1], &mut sources).unwrap();
    let obj = &moved.objects[0];
    let truth = scene.objects[0].bbox_at(1);
    assert_eq!(moved.report.coasting, vec![0]);
    assert!((obj.bbox.x - truth.x).abs() < 1.0, "{:?} vs {truth:?}", obj.bbox);
    assert!((obj.bbox.y - truth.y).abs() < 1.0, "{:?} vs {truth:?}", obj.bbox);
}

#[test]
fn modes_agree_with_two_sources() {
    let scene = two_lane_scene(12, 3);
    let noise = NoiseModel { jitter_sigma: 1.5, dropout_prob: 0.1, false_positive_rate: 0.5, score_min: 0.3, seed: 2, ..NoiseModel::exact() };
    let (dets, _) = emit_sequence(&scene, &noise).unwrap();
    let frames = frames_of(&scene);
    let split = |parity: usize| -> Vec<Vec<Detection>> {
        dets.iter().map(|f| f.iter().skip(parity).step_by(2).cloned().collect()).collect()
    };
    let mut outputs = Vec::new();
    for &(mode, prefetch, _) in BENCH_MODES.iter() {
        let mut sources: Vec<Box<dyn DetectionSource>> =
            vec![Box::new(VecSource { frames: split(0) }), Box::new(VecSource { frames: split(1) })];
        let (results, summary) = run_frames(&frames, &mut sources, &quick().with_mode(mode, prefetch)).unwrap();
        assert_eq!(summary.emission_lag, prefetch as u64);
        assert_eq!(summary.live_frames_high_water, if prefetch { 2 } else { 1 });
        outputs.push(serialize_tracks(&results));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
}

#[test]
fn step_api_matches_run() {
    let scene = two_lane_scene(6, 8);
    let (dets, _) = emit_sequence(&scene, &NoiseModel::exact()).unwrap();
    let frames = frames_of(&scene);
    let (expected, _) = run_frames(&frames, &mut sources_of(dets.clone()), &quick()).unwrap();
    for mode in [Mode::Sequential, Mode::Concurrent] {
        let mut tracker = Tracker::new(quick().with_mode(mode, false));
        let mut sources = sources_of(dets.clone());
        let stepped: Vec<FrameResult> = frames.iter().map(|f| tracker.step(f, &mut sources).unwrap()).collect();
        assert_eq!(serialize_tracks(&stepped), serialize_tracks(&expected));
    }
    let mut tracker = Tracker::new(quick());
    let prepared = preprocess(&frames[0], tracker.config()).unwrap();
    assert_eq!(prepared.level, 0);
    assert!(tracker.step_prepared(prepared, &mut []).is_ok());
}

struct JsonlSink(Vec<u8>);

impl ResultSink for JsonlSink {
    fn emit(&mut self, result: &FrameResult) -> std::io::Result<()> {
        write_jsonl(&mut self.0, &result.records())
    }
}

#[test]
fn jsonl_sink_records_every_frame() {
    let scene = moving_square();
    let (dets, _) = emit_sequence(&scene, &NoiseModel::exact()).unwrap();
    let mut frames = frames_of(&scene).into_iter().map(Ok);
    let mut sink = JsonlSink(Vec::new());
    let summary = run(&mut frames, &mut sources_of(dets), &quick().with_mode(Mode::Concurrent, true), &mut sink).unwrap();
    assert!(summary.complete);
    let records = read_jsonl(sink.0.as_slice()).unwrap();
    assert_eq!(records.iter().map(|r| r.frame).collect::<Vec<_>>(), (0..10).collect::<Vec<_>>());
}

struct FailingSink;

impl ResultSink for FailingSink {
    fn emit(&mut self, _: &FrameResult) -> std::io::Result<()> {
        Err(std::io::Error::other("disk full"))
    }
}

#[test]
fn sink_failure_is_an_error() {
    let scene = moving_square();
    for prefetch in [false, true] {
        let mut frames = frames_of(&scene).into_iter().map(Ok);
        let mut none: Vec<Box<dyn DetectionSource>> = vec![Box::new(ScriptedSource::default())];
        let err = run(&mut frames, &mut none, &quick().with_mode(Mode::Concurrent, prefetch), &mut FailingSink).unwrap_err();
        assert!(err.to_string().contains("disk full"));
    }
}

#[test]
fn lost_objects_stay_lost_through_the_pipeline() {
    let b = BBox::new(20.0, 20.0, 16.0, 16.0);
    let scene = moving_square();
    let dets: Vec<Vec<Detection>> =
        (0..6).map(|t| if t == 2 { vec![] } else { vec![Detection::new(0, "square", 0.9, b)] }).collect();
    let frames: Vec<Frame> = frames_of(&scene).into_iter().take(6).collect();
    let (results, summary) = run_frames(&frames, &mut sources_of(dets), &quick()).unwrap();
    assert_eq!(results[2].report.lost, vec![0]);
    assert_eq!(results[3].report.spawned, vec![1]);
    assert_eq!(summary.census, flowtrack::pipeline::Census { ids_created: 2, active: 1, lost: 1 });
    // the lost row is reported once, on the frame it was lost
    let lost_rows: Vec<u64> = results.iter().flat_map(|r| r.records()).filter(|r| r.state == TrackState::Lost).map(|r| r.frame).collect();
    assert_eq!(lost_rows, vec![2]);
}

#[test]
fn bench_reports_three_modes() {
    let scene = two_lane_scene(4, 1);
    let (dets, _) = emit_sequence(&scene, &NoiseModel::exact()).unwrap();
    let frames = frames_of(&scene);
    let make = || sources_of(dets.clone());
    let report = bench(&frames, &make, &quick(), 1).unwrap();
    let names: Vec<&str> = report.modes.iter().map(|m| m.mode.as_str()).collect();
    assert_eq!(names, ["sequential", "concurrent", "concurrent+prefetch"]);
    assert_eq!(report.modes[2].emission_lag, 1);
    assert!(report.modes.iter().all(|m| m.mean_frame_ms > 0.0 && m.phases.flow_ms > 0.0));
}
