use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn ellsig() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ellsig"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    ellsig().current_dir(dir).args(args).output().expect("spawn ellsig")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn cost_prints_sample_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["cost", "--d", "1536", "--convention", "table1"]);
    assert!(out.contains("1180415"), "{out}");
    let out = ok(dir.path(), &["cost", "--d", "512", "--convention", "text"]);
    assert!(out.contains("131840"), "{out}");
}

#[test]
fn synth_sample_fit_verify_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--seed", "7", "synth", "--v", "128", "--d", "8", "--out", "m/model.json"]);
    ok(d, &["--seed", "8", "sample", "--model-file", "m/model.json", "--n", "80", "--out", "m/s.json"]);
    ok(d, &["fit", "--samples", "m/s.json", "--model-file", "m/model.json", "--out", "m/rec.json"]);
    ok(d, &["verify", "--samples", "m/s.json", "--recovered", "m/rec.json", "--out", "m/v.csv"]);
    let rows = csv_rows(&d.join("m/v.csv"));
    assert_eq!(rows.len(), 80);
    assert!(rows.iter().all(|r| r[5] == "true"));
    let score = csv_rows(&d.join("m/rec.score.csv"));
    assert!(score[0][1].parse::<f64>().unwrap() <= 1e-16);
    for f in ["model.manifest.json", "s.manifest.json", "rec.manifest.json", "v.manifest.json", "rec.angles.csv"] {
        assert!(d.join("m").join(f).exists(), "{f}");
    }
}

#[test]
fn layernorm_fit_through_cli() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--v", "96", "--d", "6", "--norm", "layernorm", "--out", "model.json"]);
    ok(d, &["sample", "--model-file", "model.json", "--n", "40", "--out", "s.json"]);
    let out = ok(d, &["fit", "--samples", "s.json", "--norm", "layernorm", "--out", "rec.json"]);
    assert!(out.contains("ellipse_dim=5"), "{out}");
}

#[test]
fn fit_with_too_few_samples_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--v", "128", "--d", "8", "--out", "model.json"]);
    ok(d, &["sample", "--model-file", "model.json", "--n", "20", "--out", "s.json"]);
    let out = run(d, &["fit", "--samples", "s.json", "--out", "rec.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_64_and_help_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["synth", "--bogus"]).status.code(), Some(64));
    assert_eq!(run(dir.path(), &["nope"]).status.code(), Some(64));
    assert_eq!(run(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn missing_input_is_not_a_precondition_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["sample", "--model-file", "absent.json", "--n", "3", "--out", "s.json"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn outputs_are_deterministic_given_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for tag in ["a", "b"] {
        ok(d, &["--seed", "3", "synth", "--v", "64", "--d", "4", "--eps", "1e-5", "--out", &format!("{tag}.json")]);
        ok(d, &["--seed", "5", "sample", "--model-file", &format!("{tag}.json"), "--n", "9", "--out", &format!("{tag}s.json")]);
    }
    for (x, y) in [("a.W.bin", "b.W.bin"), ("as.data.bin", "bs.data.bin")] {
        assert_eq!(std::fs::read(d.join(x)).unwrap(), std::fs::read(d.join(y)).unwrap());
    }
}

#[test]
fn identify_picks_the_source_model() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--seed", "1", "synth", "--v", "128", "--d", "8", "--out", "a.json"]);
    ok(d, &["--seed", "2", "synth", "--v", "128", "--d", "12", "--out", "b.json"]);
    ok(d, &["--seed", "3", "sample", "--model-file", "b.json", "--n", "10", "--out", "s.json"]);
    ok(
        d,
        &["identify", "--samples", "s.json", "--candidate", "a.json", "b.json", "--project", "--out", "id.csv"],
    );
    let rows = csv_rows(&d.join("id.csv"));
    assert_eq!(rows.len(), 20);
    for r in rows.iter().filter(|r| r[4] == "true") {
        assert_eq!(r[1], "b");
        assert!(r[5].parse::<f64>().unwrap() >= 3.0);
    }
}

#[test]
fn hist_and_bench_write_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--v", "64", "--d", "16", "--eps", "1e-3", "--out", "m.json"]);
    ok(d, &["hist", "--model-file", "m.json", "--n", "500", "--bins", "10", "--out", "h.csv"]);
    let bins = csv_rows(&d.join("h.csv"));
    assert_eq!(bins.len(), 10);
    assert_eq!(bins.iter().map(|r| r[2].parse::<usize>().unwrap()).sum::<usize>(), 500);
    ok(d, &["bench", "--dims", "4,8", "--repeats", "1", "--extrapolate", "64", "--out", "b.csv"]);
    let rows = csv_rows(&d.join("b.csv"));
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[2][3], "extrapolation");
    assert_eq!(csv_rows(&d.join("b.poly.csv")).len(), 7);
}

#[test]
fn mac_keygen_sign_verify_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--seed", "4", "mac-keygen", "--v", "128", "--d", "8", "--out", "key.json"]);
    ok(d, &["mac-sign", "--key", "key.json", "--message", "hello", "--out", "msg.json"]);
    let first = ok(d, &["mac-verify", "--key", "key.json", "--signed", "msg.json", "--store", "seen.bin", "--record"]);
    assert!(first.contains("accepted: true"), "{first}");
    let second = ok(d, &["mac-verify", "--key", "key.json", "--signed", "msg.json", "--store", "seen.bin", "--record"]);
    assert!(second.contains("\"replayed\": true") && second.contains("accepted: false"), "{second}");

    let mut msg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("msg.json")).unwrap()).unwrap();
    let lp = msg["logprob"].as_array_mut().unwrap();
    let vals: Vec<f64> = lp.iter().map(|x| x.as_f64().unwrap()).collect();
    let mut bumped = vals.clone();
    bumped[3] += 1e-3;
    let m = bumped.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + bumped.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    *lp = bumped.iter().map(|x| serde_json::json!(x - lse)).collect();
    std::fs::write(d.join("forged.json"), msg.to_string()).unwrap();
    let forged = ok(d, &["mac-verify", "--key", "key.json", "--signed", "forged.json"]);
    assert!(forged.contains("accepted: false"), "{forged}");
}

#[test]
fn serve_and_attack_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--seed", "9", "synth", "--v", "64", "--d", "4", "--out", "m.json"]);
    let mut server = ellsig()
        .current_dir(d)
        .args(["serve", "--model-file", "m.json", "--top-k", "8", "--listen", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let url = line.trim().strip_prefix("listening on ").expect("listen line").to_string();
    let out = run(
        d,
        &["attack", "--url", &url, "--v", "64", "--top-k", "8", "--n", "30", "--price-per-1k", "0.5", "--out", "h.json"],
    );
    server.kill().unwrap();
    server.wait().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ledger: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("h.ledger.json")).unwrap()).unwrap();
    let tokens = ledger["prompt_tokens"].as_f64().unwrap();
    assert!((ledger["spend"].as_f64().unwrap() - tokens * 0.5 / 1000.0).abs() < 1e-12);
    ok(d, &["fit", "--samples", "h.json", "--model-file", "m.json", "--out", "rec.json"]);
    let score = csv_rows(&d.join("rec.score.csv"));
    assert!(score[0][1].parse::<f64>().unwrap() <= 1e-16);
}
