use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn flowtrack(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowtrack"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("stdout is not JSON ({e}): {}\nstderr: {}", String::from_utf8_lossy(&out.stdout), stderr(out))
    })
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SCENE: &str = r#"{
  "width": 96, "height": 72, "frames": 10, "background_seed": 3,
  "objects": [
    {"class_id": 0, "label": "a", "width": 20, "height": 16, "texture_seed": 7,
     "waypoints": [{"t": 0, "x": 5, "y": 10}, {"t": 9, "x": 55, "y": 30}]},
    {"class_id": 1, "label": "b", "width": 18, "height": 18, "texture_seed": 9,
     "waypoints": [{"t": 0, "x": 70, "y": 50}, {"t": 9, "x": 20, "y": 48}]}
  ]
}"#;

/// Writes the scene and exports it with mild jitter into `seq/`.
fn synth_sequence(dir: &Path, extra: &[&str]) -> PathBuf {
    fs::write(dir.join("scene.json"), SCENE).unwrap();
    let mut args = vec!["synth", "--spec", "scene.json", "--out", "seq", "--jitter", "0.5", "--seed", "4"];
    args.extend_from_slice(extra);
    let out = flowtrack(&args, dir);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    dir.join("seq")
}

fn write_pgm(path: &Path, width: usize, height: usize, pixel: impl Fn(usize, usize) -> u8) {
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    for y in 0..height {
        for x in 0..width {
            bytes.push(pixel(x, y));
        }
    }
    fs::write(path, bytes).unwrap();
}

fn blob(x: f64, y: f64, cx: f64) -> u8 {
    let d = ((x - cx).powi(2) + (y - 24.0).powi(2)) / 60.0;
    (40.0 + 180.0 * (-d).exp() + 20.0 * ((x * 0.4).sin() * (y * 0.3).cos())) as u8
}

#[test]
fn synth_track_eval_round_trip() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("scene.json"), SCENE).unwrap();
    let out = flowtrack(&["synth", "--spec", "scene.json", "--out", "seq"], tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = flowtrack(
        &["track", "seq/frames", "--detections", "seq/detections.jsonl", "--out", "tracks.jsonl"],
        tmp.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary = stdout_json(&out);
    assert_eq!(summary["frames"], 10);
    assert_eq!(summary["complete"], true);
    assert_eq!(summary["census"]["ids_created"], 2);

    let eval = flowtrack(&["eval", "tracks.jsonl", "seq/truth.jsonl"], tmp.path());
    assert_eq!(code(&eval), 0, "{}", stderr(&eval));
    let metrics = stdout_json(&eval);
    assert_eq!(metrics["id_switches"], 0);
    assert_eq!(metrics["recall"], 1.0);
}

#[test]
fn mot_output_evaluates_like_jsonl() {
    let tmp = TempDir::new().unwrap();
    synth_sequence(tmp.path(), &[]);
    for (format, file) in [("jsonl", "t.jsonl"), ("mot", "t.txt")] {
        let out = flowtrack(
            &["track", "seq/frames", "--detections", "seq/detections.jsonl", "--format", format, "--out", file],
            tmp.path(),
        );
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let a = stdout_json(&flowtrack(&["eval", "t.jsonl", "seq/truth.jsonl"], tmp.path()));
    let b = stdout_json(&flowtrack(&["eval", "t.txt", "seq/truth.jsonl"], tmp.path()));
    assert_eq!(a["matched"], b["matched"]);
    assert_eq!(a["id_switches"], b["id_switches"]);
    assert!((a["mean_iou"].as_f64().unwrap() - b["mean_iou"].as_f64().unwrap()).abs() < 1e-3);
}

#[test]
fn execution_modes_write_identical_files() {
    let tmp = TempDir::new().unwrap();
    synth_sequence(tmp.path(), &[]);
    let runs: [(&str, &[&str]); 3] = [
        ("seq.jsonl", &["--mode", "sequential"]),
        ("con.jsonl", &["--mode", "concurrent"]),
        ("pre.jsonl", &["--mode", "concurrent", "--prefetch"]),
    ];
    for (file, flags) in runs {
        let mut args = vec!["track", "seq/frames", "--detections", "seq/detections.jsonl", "--out", file];
        args.extend_from_slice(flags);
        let out = flowtrack(&args, tmp.path());
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let reference = fs::read(tmp.path().join("seq.jsonl")).unwrap();
    assert!(!reference.is_empty());
    assert_eq!(reference, fs::read(tmp.path().join("con.jsonl")).unwrap());
    assert_eq!(reference, fs::read(tmp.path().join("pre.jsonl")).unwrap());
}

#[test]
fn missing_detections_file_is_a_usage_error_naming_the_path() {
    let tmp = TempDir::new().unwrap();
    synth_sequence(tmp.path(), &[]);
    let out = flowtrack(&["track", "seq/frames", "--detections", "absent.jsonl"], tmp.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("absent.jsonl"), "{}", stderr(&out));

    let out = flowtrack(
        &["track", "seq/frames", "--detections", "seq/detections.jsonl", "--detections2", "other.jsonl"],
        tmp.path(),
    );
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("other.jsonl"));
}

#[test]
fn malformed_detections_name_the_path() {
    let tmp = TempDir::new().unwrap();
    synth_sequence(tmp.path(), &[]);
    fs::write(tmp.path().join("bad.jsonl"), "{not json}\n").unwrap();
    let out = flowtrack(&["track", "seq/frames", "--detections", "bad.jsonl"], tmp.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("bad.jsonl"), "{}", stderr(&out));
}

#[test]
fn corrupt_frame_mid_stream_marks_output_incomplete() {
    let tmp = TempDir::new().unwrap();
    let seq = synth_sequence(tmp.path(), &[]);
    fs::write(seq.join("frames/frame_00004.pgm"), b"P5\n96 72\n255\nshort").unwrap();
    let out = flowtrack(
        &["track", "seq/frames", "--detections", "seq/detections.jsonl", "--out", "t.jsonl"],
        tmp.path(),
    );
    assert_eq!(code(&out), 2);
    let summary = stdout_json(&out);
    assert_eq!(summary["complete"], false);
    assert_eq!(summary["frames"], 4);
    let text = fs::read_to_string(tmp.path().join("t.jsonl")).unwrap();
    let last: Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
    assert_eq!(last["trailer"]["complete"], false);
    assert_eq!(last["trailer"]["frames"], 4);

    let out = flowtrack(
        &["track", "seq/frames", "--detections", "seq/detections.jsonl", "--format", "mot", "--out", "t.txt"],
        tmp.path(),
    );
    assert_eq!(code(&out), 2);
    let text = fs::read_to_string(tmp.path().join("t.txt")).unwrap();
    assert!(text.lines().last().unwrap().starts_with("# trailer"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = TempDir::new().unwrap();
    synth_sequence(tmp.path(), &[]);
    fs::write(tmp.path().join("run.conf"), "# strict gate rejects every match\ngate = 1.0\nformat = mot\n").unwrap();
    let base = ["track", "seq/frames", "--detections", "seq/detections.jsonl", "--config", "run.conf"];

    let out = flowtrack(&[&base[..], &["--out", "strict.txt"]].concat(), tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout_json(&out)["census"]["ids_created"].as_u64().unwrap() > 2);
    let text = fs::read_to_string(tmp.path().join("strict.txt")).unwrap();
    assert!(!text.starts_with('{'), "config format should select MOT");

    let out = flowtrack(&[&base[..], &["--gate", "0.3", "--out", "loose.txt"]].concat(), tmp.path());
    assert_eq!(code(&out), 0);
    assert_eq!(stdout_json(&out)["census"]["ids_created"], 2);

    fs::write(tmp.path().join("typo.conf"), "gaet = 0.5\n").unwrap();
    let out = flowtrack(
        &["track", "seq/frames", "--detections", "seq/detections.jsonl", "--config", "typo.conf"],
        tmp.path(),
    );
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("gaet"));
}

#[test]
fn invalid_thresholds_are_rejected() {
    let tmp = TempDir::new().unwrap();
    synth_sequence(tmp.path(), &[]);
    let out = flowtrack(&["track", "seq/frames", "--detections", "seq/detections.jsonl", "--gate", "1.5"], tmp.path());
    assert_eq!(code(&out), 2);
    let out = flowtrack(&["track", "seq/frames", "--detections", "seq/detections.jsonl", "--warps", "0"], tmp.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn flow_of_identical_frames_is_zero() {
    let tmp = TempDir::new().unwrap();
    write_pgm(&tmp.path().join("a.pgm"), 64, 48, |x, y| blob(x as f64, y as f64, 30.0));
    let out = flowtrack(&["flow", "a.pgm", "a.pgm", "--out", "f.flo"], tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout_json(&out)["mean_magnitude"].as_f64().unwrap() < 1e-3);
    let flo = fs::read(tmp.path().join("f.flo")).unwrap();
    assert_eq!(&flo[..4], b"PIEH");
    assert_eq!(flo.len(), 12 + 64 * 48 * 8);
}

#[test]
fn flow_recovers_a_horizontal_shift() {
    let tmp = TempDir::new().unwrap();
    write_pgm(&tmp.path().join("a.pgm"), 64, 48, |x, y| blob(x as f64, y as f64, 30.0));
    write_pgm(&tmp.path().join("b.pgm"), 64, 48, |x, y| blob(x as f64 - 2.0, y as f64, 30.0));
    let out = flowtrack(&["flow", "a.pgm", "b.pgm"], tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stats = stdout_json(&out);
    let dx = stats["mean_dx"].as_f64().unwrap();
    assert!((dx - 2.0).abs() < 0.5, "mean dx {dx}");
    assert!(stats["mean_dy"].as_f64().unwrap().abs() < 0.3);
}

#[test]
fn flow_rejects_bad_inputs() {
    let tmp = TempDir::new().unwrap();
    write_pgm(&tmp.path().join("a.pgm"), 64, 48, |_, _| 100);
    write_pgm(&tmp.path().join("small.pgm"), 32, 48, |_, _| 100);
    fs::write(tmp.path().join("corrupt.pgm"), b"P5\n64 48\n255\n\x01\x02").unwrap();
    assert_eq!(code(&flowtrack(&["flow", "a.pgm", "corrupt.pgm"], tmp.path())), 2);
    assert_eq!(code(&flowtrack(&["flow", "a.pgm", "small.pgm"], tmp.path())), 2);
    assert_eq!(code(&flowtrack(&["flow", "a.pgm", "missing.pgm"], tmp.path())), 2);
}

#[test]
fn anchors_accepts_each_box_form() {
    let tmp = TempDir::new().unwrap();
    let lines = [
        "[10, 20]",
        r#"{"w": 11, "h": 19}"#,
        r#"{"frame": 0, "box": [3, 4, 40, 30], "score": 0.9}"#,
        "[0, 0, 42, 31]",
        "",
    ];
    fs::write(tmp.path().join("boxes.jsonl"), lines.join("\n")).unwrap();
    let out = flowtrack(&["anchors", "boxes.jsonl", "--k", "2", "--seed", "1"], tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = stdout_json(&out);
    let mut anchors: Vec<(f64, f64)> = report["anchors"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| (a[0].as_f64().unwrap(), a[1].as_f64().unwrap()))
        .collect();
    anchors.sort_by(|a, b| a.0.total_cmp(&b.0));
    assert!((anchors[0].0 - 10.5).abs() < 1e-9 && (anchors[0].1 - 19.5).abs() < 1e-9);
    assert!((anchors[1].0 - 41.0).abs() < 1e-9 && (anchors[1].1 - 30.5).abs() < 1e-9);

    let again = flowtrack(&["anchors", "boxes.jsonl", "--k", "2", "--seed", "1"], tmp.path());
    assert_eq!(out.stdout, again.stdout);
}

#[test]
fn anchors_rejects_unusable_input() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("empty.jsonl"), "").unwrap();
    fs::write(tmp.path().join("two.jsonl"), "[1, 2]\n[3, 4]\n").unwrap();
    fs::write(tmp.path().join("junk.jsonl"), "[1, 2]\n\"text\"\n").unwrap();
    assert_eq!(code(&flowtrack(&["anchors", "empty.jsonl"], tmp.path())), 2);
    assert_eq!(code(&flowtrack(&["anchors", "two.jsonl", "--k", "3"], tmp.path())), 2);
    let out = flowtrack(&["anchors", "junk.jsonl", "--k", "1"], tmp.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("junk.jsonl:2"));
}

/// Every file under `root` with its contents, keyed by relative path.
fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_deterministic_per_seed() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let noisy = ["--dropout", "0.2", "--false-positives", "0.5", "--score-min", "0.6"];
    synth_sequence(a.path(), &noisy);
    synth_sequence(b.path(), &noisy);
    assert_eq!(tree(&a.path().join("seq")), tree(&b.path().join("seq")));
}

#[test]
fn synth_single_frame_and_invalid_scenes() {
    let tmp = TempDir::new().unwrap();
    let one = SCENE.replace("\"frames\": 10", "\"frames\": 1");
    fs::write(tmp.path().join("one.json"), one).unwrap();
    let out = flowtrack(&["synth", "--spec", "one.json", "--out", "one"], tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read_dir(tmp.path().join("one/frames")).unwrap().count(), 1);

    let outside = SCENE.replace("{\"t\": 9, \"x\": 55, \"y\": 30}", "{\"t\": 9, \"x\": 200, \"y\": 30}");
    fs::write(tmp.path().join("outside.json"), outside).unwrap();
    assert_eq!(code(&flowtrack(&["synth", "--spec", "outside.json", "--out", "x"], tmp.path())), 2);

    fs::write(tmp.path().join("scene.json"), SCENE).unwrap();
    let out = flowtrack(&["synth", "--spec", "scene.json", "--out", "y", "--dropout", "1.5"], tmp.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn bench_reports_three_modes() {
    let tmp = TempDir::new().unwrap();
    synth_sequence(tmp.path(), &[]);
    let base = ["bench", "seq/frames", "--detections", "seq/detections.jsonl"];
    let out = flowtrack(&[&base[..], &["--reps", "1", "--json"]].concat(), tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = stdout_json(&out);
    assert_eq!(report["frames"], 10);
    let modes = report["modes"].as_array().unwrap();
    assert_eq!(modes.len(), 3);
    assert!(modes.iter().all(|m| m["mean_frame_ms"].as_f64().unwrap() > 0.0));

    let out = flowtrack(&[&base[..], &["--reps", "0"]].concat(), tmp.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn eval_scores_truth_against_itself_and_empty_tracks() {
    let tmp = TempDir::new().unwrap();
    synth_sequence(tmp.path(), &[]);
    let out = flowtrack(&["eval", "seq/truth.jsonl", "seq/truth.jsonl"], tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let m = stdout_json(&out);
    assert_eq!(m["recall"], 1.0);
    assert_eq!(m["id_switches"], 0);
    assert!((m["mean_iou"].as_f64().unwrap() - 1.0).abs() < 1e-12);

    fs::write(tmp.path().join("empty.jsonl"), "").unwrap();
    let m = stdout_json(&flowtrack(&["eval", "empty.jsonl", "seq/truth.jsonl"], tmp.path()));
    assert_eq!(m["recall"], 0.0);
    assert_eq!(m["matched"], 0);
}

#[test]
fn eval_rejects_tracks_beyond_the_truth() {
    let tmp = TempDir::new().unwrap();
    synth_sequence(tmp.path(), &[]);
    let row = r#"{"frame":50,"id":0,"class_id":0,"label":"a","x":1,"y":1,"w":5,"h":5,"score":1,"state":"active"}"#;
    fs::write(tmp.path().join("late.jsonl"), format!("{row}\n")).unwrap();
    assert_eq!(code(&flowtrack(&["eval", "late.jsonl", "seq/truth.jsonl"], tmp.path())), 2);
}

#[test]
fn anchors_recover_distinct_sizes_and_single_mean() {
    let tmp = TempDir::new().unwrap();
    let sizes: Vec<(u32, u32)> = (1..=9).map(|i| (8 * i, 5 * i + 3)).collect();
    let lines: Vec<String> = sizes.iter().flat_map(|&(w, h)| [format!("[{w}, {h}]"), format!("[{w}, {h}]")]).collect();
    fs::write(tmp.path().join("nine.jsonl"), lines.join("\n")).unwrap();
    let out = flowtrack(&["anchors", "nine.jsonl", "--k", "9"], tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let anchors: Vec<(f64, f64)> = stdout_json(&out)["anchors"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| (a[0].as_f64().unwrap(), a[1].as_f64().unwrap()))
        .collect();
    let expected: Vec<(f64, f64)> = sizes.iter().map(|&(w, h)| (w as f64, h as f64)).collect();
    assert_eq!(anchors, expected, "sorted by area");

    fs::write(tmp.path().join("two.jsonl"), "[10, 10]\n[30, 50]\n").unwrap();
    let out = flowtrack(&["anchors", "two.jsonl", "--k", "1"], tmp.path());
    assert_eq!(stdout_json(&out)["anchors"][0], serde_json::json!([20.0, 30.0]));
}

#[test]
fn eval_counts_swapped_identities() {
    let tmp = TempDir::new().unwrap();
    let truth: Vec<String> = (0..4)
        .flat_map(|f| {
            [
                format!(r#"{{"frame":{f},"id":0,"class_id":0,"label":"a","box":[0,0,10,10]}}"#),
                format!(r#"{{"frame":{f},"id":1,"class_id":0,"label":"a","box":[50,50,10,10]}}"#),
            ]
        })
        .collect();
    fs::write(tmp.path().join("truth.jsonl"), truth.join("\n")).unwrap();
    let tracks: Vec<String> = (0..4)
        .flat_map(|f| {
            let (p, q) = if f < 2 { (0, 1) } else { (1, 0) };
            [
                format!(r#"{{"frame":{f},"id":{p},"class_id":0,"label":"a","x":0,"y":0,"w":10,"h":10,"score":1,"state":"active"}}"#),
                format!(r#"{{"frame":{f},"id":{q},"class_id":0,"label":"a","x":50,"y":50,"w":10,"h":10,"score":1,"state":"active"}}"#),
            ]
        })
        .collect();
    fs::write(tmp.path().join("tracks.jsonl"), tracks.join("\n")).unwrap();
    let out = flowtrack(&["eval", "tracks.jsonl", "truth.jsonl"], tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(stdout_json(&out)["id_switches"], 2);
}
