//! Drives the `speechgrain` binary end to end against mock backends served
//! over HTTP by the binary itself.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_speechgrain");

struct Server {
    child: Child,
    url: String,
}

impl Server {
    fn start(args: &[&str]) -> Server {
        let mut child = Command::new(BIN)
            .args(args)
            .args(["--port", "0"])
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .expect("spawn server");
        let mut line = String::new();
        BufReader::new(child.stdout.as_mut().unwrap()).read_line(&mut line).unwrap();
        let url = line.trim().strip_prefix("listening on ").unwrap_or_else(|| panic!("unexpected banner {line:?}")).to_string();
        Server { child, url }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn run(args: &[&str]) -> Output {
    let out = Command::new(BIN).args(args).output().expect("run binary");
    assert!(
        out.status.success(),
        "speechgrain {args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn last_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.lines().last().expect("output")).expect("json summary")
}

fn lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path).unwrap().lines().filter(|l| !l.trim().is_empty()).map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn http_get(url: &str, path: &str) -> (u16, String) {
    let addr = url.strip_prefix("http://").unwrap();
    let mut s = TcpStream::connect(addr).unwrap();
    write!(s, "GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut resp = String::new();
    s.read_to_string(&mut resp).unwrap();
    let status = resp.split_whitespace().nth(1).unwrap().parse().unwrap();
    let body = resp.split_once("\r\n\r\n").map(|(_, b)| b.to_string()).unwrap_or_default();
    (status, body)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// 20 minutes of speech in 8 s turns separated by 2 s silences.
fn write_timeline(dir: &Path) {
    let mut a = String::new();
    let mut b = String::new();
    for k in 0..120 {
        let s = k as f64 * 10.0 + 1.0;
        a += &format!("{}\n", json!({ "recording_id": "rec1", "start_s": s, "end_s": s + 8.0 }));
        b += &format!(
            "{}\n",
            json!({ "recording_id": "rec1", "start_s": s + 0.1, "end_s": s + 7.9, "text": format!("turn number {k} of the show"), "speaker_id": format!("S{}", k % 2) })
        );
    }
    std::fs::write(dir.join("ts_a.jsonl"), a).unwrap();
    std::fs::write(dir.join("ts_b.jsonl"), b).unwrap();
    std::fs::write(
        dir.join("audio.jsonl"),
        format!("{}\n", json!({ "recording_id": "rec1", "audio_path": "audio/rec1.wav", "language": "EN", "duration_s": 1200.0 })),
    )
    .unwrap();
}

#[test]
fn full_cli_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_timeline(d);

    // chunk
    let out = run(&[
        "chunk",
        "--audio-manifest", p(&d.join("audio.jsonl")),
        "--timestamps-a", p(&d.join("ts_a.jsonl")),
        "--timestamps-b", p(&d.join("ts_b.jsonl")),
        "--out", p(&d.join("chunks")),
    ]);
    let summary = last_json(&out);
    assert_eq!(summary["chunks"], 4);
    assert_eq!(summary["fallback_cuts"], 0);
    let plan: Value = serde_json::from_str(&std::fs::read_to_string(d.join("chunks/plans/rec1.json")).unwrap()).unwrap();
    for cut in plan["plan"]["cuts"].as_array().unwrap() {
        let c = cut.as_f64().unwrap();
        assert!((c - 1.0).rem_euclid(10.0) > 8.0, "cut {c} is inside a turn");
    }

    // annotate
    let annotator = Server::start(&["mock-backend"]);
    let out = run(&[
        "annotate", "--stage", "full",
        "--manifest", p(&d.join("chunks/chunks.jsonl")),
        "--backend", &annotator.url,
        "--out", p(&d.join("ann")),
    ]);
    let summary = last_json(&out);
    assert_eq!(summary["records"], 120);
    assert_eq!(summary["failures"], 0);
    // Re-running reuses the store without new backend work.
    let again = last_json(&run(&[
        "annotate", "--stage", "full",
        "--manifest", p(&d.join("chunks/chunks.jsonl")),
        "--backend", &annotator.url,
        "--out", p(&d.join("ann")),
    ]));
    assert_eq!(again["records"], 120);
    assert!(again["reused"].as_u64().unwrap() > 0);

    // validate
    let experts = Server::start(&["mock-backend", "--records", p(&d.join("ann/annotations.jsonl"))]);
    std::fs::write(d.join("backends.json"), json!({ "default": experts.url }).to_string()).unwrap();
    let out = run(&[
        "validate",
        "--manifest", p(&d.join("ann/annotations.jsonl")),
        "--out", p(&d.join("survivors.jsonl")),
        "--report", p(&d.join("validate_report.json")),
        "--backend-map", p(&d.join("backends.json")),
    ]);
    assert_eq!(last_json(&out)["survivors"], 120);

    // build-bench, twice with the same seed
    for out_dir in ["bench", "bench_again"] {
        run(&[
            "build-bench",
            "--manifest", p(&d.join("survivors.jsonl")),
            "--targets", "uniform:3",
            "--backend", &experts.url,
            "--seed", "9",
            "--out", p(&d.join(out_dir)),
        ]);
    }
    let gen = std::fs::read_to_string(d.join("bench/gen/en/items.jsonl")).unwrap();
    assert_eq!(gen, std::fs::read_to_string(d.join("bench_again/gen/en/items.jsonl")).unwrap());
    assert_eq!(lines(&d.join("bench/gen/en/items.jsonl")).len(), 3);

    // eval: a key-following model is perfect on every present cell
    let model = Server::start(&[
        "mock-backend",
        "--records", p(&d.join("ann/annotations.jsonl")),
        "--bench", p(&d.join("bench")),
    ]);
    let out = run(&[
        "eval",
        "--bench", p(&d.join("bench")),
        "--model", &model.url,
        "--protocol", "direct",
        "--out", p(&d.join("report.json")),
        "--table", p(&d.join("report.md")),
    ]);
    assert_eq!(last_json(&out)["avg"], 1.0);
    let table = std::fs::read_to_string(d.join("report.md")).unwrap();
    assert!(table.contains("| 100.0 / 100.0 |") || table.contains("| -- / 100.0 |"));

    // A fixed-"A" model scores exactly the count of keys at position A.
    let fixed = Server::start(&["mock-backend", "--choose", "fixed:A"]);
    run(&[
        "eval", "--bench", p(&d.join("bench")), "--model", &fixed.url,
        "--out", p(&d.join("report_a.json")), "--table", p(&d.join("report_a.md")),
    ]);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(d.join("report_a.json")).unwrap()).unwrap();
    let items = lines(&d.join("bench/gen/en/items.jsonl"));
    let zero_keys = items.iter().filter(|i| i["answer_index"] == 0).count();
    assert_eq!(report["accuracy"]["GEN/EN"]["correct"], zero_keys);

    // score-tpt: references scored against themselves
    let hyps: String = lines(&d.join("ann/annotations.jsonl"))
        .iter()
        .map(|r| json!({ "utterance_id": r["utterance_id"], "text": r["transcript_tagged"] }).to_string() + "\n")
        .collect();
    std::fs::write(d.join("hyps.jsonl"), hyps).unwrap();
    let out = run(&[
        "score-tpt", "--refs", p(&d.join("ann/annotations.jsonl")), "--hyps", p(&d.join("hyps.jsonl")), "--lang", "en",
    ]);
    assert_eq!(last_json(&out)["mean_pata"], 1.0);

    // mix: one stage, then a full plan
    let out = run(&[
        "mix", "--manifest", p(&d.join("survivors.jsonl")), "--stage", "2", "--n", "20", "--seed", "4",
        "--out", p(&d.join("mix/stage2.jsonl")), "--backend", &experts.url,
    ]);
    assert_eq!(last_json(&out)["counts"], json!({ "TypeI_MCQ": 4, "TypeII_OpenQA": 8, "TypeIII_FullJson": 8 }));
    std::fs::write(d.join("plan.json"), json!({ "seed": 4, "stages": [{ "stage": 1, "n": 10 }, { "stage": 2, "n": 10 }, { "stage": 3, "n": 5 }] }).to_string()).unwrap();
    run(&[
        "mix", "all", "--plan", p(&d.join("plan.json")), "--manifest", p(&d.join("survivors.jsonl")),
        "--out", p(&d.join("mix_all")), "--backend", &experts.url,
    ]);
    for n in 1..=3 {
        assert!(d.join(format!("mix_all/stage{n}.jsonl")).exists());
    }
    assert_eq!(lines(&d.join("mix_all/stage3.jsonl")).len(), 5);

    // review serve / export
    let log = d.join("review.log.jsonl");
    {
        let review = Server::start(&["review", "serve", "--queue", p(&d.join("survivors.jsonl")), "--log", p(&log)]);
        let (status, body) = http_get(&review.url, "/api/queue?reviewer=alice");
        assert_eq!(status, 200);
        let queue: Value = serde_json::from_str(&body).unwrap();
        assert_eq!(queue.as_array().unwrap().len(), 120);
        assert_eq!(http_get(&review.url, "/api/items/missing").0, 404);
    }
    let out = run(&["review", "export", "--log", p(&log)]);
    assert!(String::from_utf8_lossy(&out.stdout).trim().is_empty(), "nothing reviewed, nothing retained");
}

#[test]
fn bad_arguments_fail_cleanly() {
    let out = Command::new(BIN).args(["eval", "--bench", "/nonexistent", "--model", "http://127.0.0.1:1", "--out", "/tmp/x.json"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
    let out = Command::new(BIN).args(["mix", "--stage", "2"]).output().unwrap();
    assert!(!out.status.success(), "mix without --manifest/--n/--out is a usage error");
}
