use std::io::Write;
use std::path::{Path, PathBuf};

use ellsig_core::cost::{bench_fit, estimate_cost, required_samples};
use ellsig_core::io::{load_logprobs, load_model, save_json, save_logprobs, save_model};
use ellsig_core::mac::{keygen, sign_at, verify as mac_verify, ReplayStore, SignedMessage};
use ellsig_core::recovery::{
    recover_layernorm_with, recover_rms_with, score_recovery, RecoveredParams, RecoveryOptions,
};
use ellsig_core::synth::{hidden_norm_histogram, sample_outputs, synth_model};
use ellsig_core::verify::{default_tau, project_column, verify, EllipseKey, DEFAULT_TAU};
use ellsig_provider::{run_attack, serve, ApiClient, ApiConfig, AttackOptions};
use serde::Serialize;

use crate::args::*;
use crate::failure::Failure;
use crate::files::{ensure_parent, load_key, save_key, sibling};

/// Files a run read and wrote; the first output anchors the manifest.
#[derive(Debug, Default)]
pub struct Outcome {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl Outcome {
    fn new(inputs: &[&Path], outputs: Vec<PathBuf>) -> Self {
        Self {
            inputs: inputs.iter().map(|p| p.to_path_buf()).collect(),
            outputs,
        }
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), Failure> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn check_tolerance(t: Option<f64>) -> Result<(), Failure> {
    match t {
        Some(t) if !(t.is_finite() && t > 0.0) => Err(Failure::Precondition(format!(
            "--tolerance must be positive, got {t}"
        ))),
        _ => Ok(()),
    }
}

pub fn synth(g: &Global, a: &SynthArgs) -> Result<Outcome, Failure> {
    let model = synth_model(a.v, a.d, a.norm, a.eps, g.seed)?;
    ensure_parent(&a.out)?;
    save_model(&a.out, &model)?;
    println!(
        "model v={} d={} norm={} eps={} seed={} redraws={}",
        model.v,
        model.d,
        model.norm.as_str(),
        model.eps,
        model.seed,
        model.redraws
    );
    Ok(Outcome::new(&[], vec![a.out.clone(), sibling(&a.out, "W.bin")]))
}

pub fn sample(g: &Global, a: &SampleArgs) -> Result<Outcome, Failure> {
    let model = load_model(&a.model_file)?;
    let m = sample_outputs(&model, a.n, g.seed)?;
    ensure_parent(&a.out)?;
    save_logprobs(&a.out, &m)?;
    println!("{} logprob vectors of length {}", m.n(), m.v());
    Ok(Outcome::new(&[&a.model_file], vec![a.out.clone(), sibling(&a.out, "data.bin")]))
}

#[derive(Serialize)]
struct ScoreRow {
    n_samples: usize,
    bias_mse: f64,
    stretch_mse: f64,
    rotation_trace: f64,
    rotation_geodesic: f64,
}

#[derive(Serialize)]
struct AngleRow {
    column: usize,
    angle_rad: f64,
    degenerate: bool,
}

pub fn fit(_g: &Global, a: &FitArgs) -> Result<Outcome, Failure> {
    let m = load_logprobs(&a.samples)?;
    let opts = RecoveryOptions {
        d: a.d,
        ..RecoveryOptions::default()
    };
    let rec = if a.norm.is_rms_family() {
        recover_rms_with(&m, &opts)?
    } else {
        recover_layernorm_with(&m, &opts)?
    };
    ensure_parent(&a.out)?;
    save_json(&a.out, &rec)?;
    println!(
        "recovered d={} ellipse_dim={} from n={} (fit residual {:.3e})",
        rec.d(),
        rec.ellipse_dim,
        rec.n_samples,
        rec.fit_residual_rms
    );
    let mut inputs: Vec<&Path> = vec![&a.samples];
    let mut outputs = vec![a.out.clone()];
    if let Some(truth_path) = &a.model_file {
        let truth = load_model(truth_path)?;
        let s = score_recovery(&rec, &truth)?;
        let score_path = sibling(&a.out, "score.csv");
        write_csv(
            &score_path,
            &[ScoreRow {
                n_samples: s.n_samples,
                bias_mse: s.bias_mse,
                stretch_mse: s.stretch_mse,
                rotation_trace: s.rotation_trace,
                rotation_geodesic: s.rotation_geodesic,
            }],
        )?;
        let angles: Vec<AngleRow> = s
            .column_angles
            .iter()
            .enumerate()
            .map(|(i, &angle_rad)| AngleRow {
                column: i,
                angle_rad,
                degenerate: s.degenerate_pairs.contains(&i) || (i > 0 && s.degenerate_pairs.contains(&(i - 1))),
            })
            .collect();
        let angle_path = sibling(&a.out, "angles.csv");
        write_csv(&angle_path, &angles)?;
        println!(
            "bias_mse={:.3e} stretch_mse={:.3e} rotation_geodesic={:.3e}",
            s.bias_mse, s.stretch_mse, s.rotation_geodesic
        );
        inputs.push(truth_path);
        outputs.extend([score_path, angle_path]);
    }
    Ok(Outcome::new(&inputs, outputs))
}

#[derive(Serialize)]
struct DistanceRow {
    column: usize,
    candidate: String,
    distance: f64,
    subspace_residual: f64,
    tau: f64,
    passed: bool,
}

fn exact_key(path: &Path, tolerance: Option<f64>) -> Result<EllipseKey, Failure> {
    let params = load_model(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tau = match tolerance {
        Some(t) => t,
        None => default_tau(&params)?,
    };
    Ok(EllipseKey::exact_with_tau(id, params, tau)?)
}

pub fn verify_cmd(_g: &Global, a: &VerifyArgs) -> Result<Outcome, Failure> {
    check_tolerance(a.tolerance)?;
    let m = load_logprobs(&a.samples)?;
    let (key, key_path) = match (&a.model_file, &a.recovered) {
        (Some(p), _) => (exact_key(p, a.tolerance)?, p),
        (None, Some(p)) => {
            let rec: RecoveredParams = ellsig_core::io::load_json(p)?;
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            (EllipseKey::recovered(id, rec, a.tolerance.unwrap_or(DEFAULT_TAU))?, p)
        }
        (None, None) => return Err(Failure::Precondition("need --model-file or --recovered".into())),
    };
    let mut rows = Vec::with_capacity(m.n());
    for j in 0..m.n() {
        let r = verify(&m.column(j), &key)?;
        rows.push(DistanceRow {
            column: j,
            candidate: key.id.clone(),
            distance: r.distance,
            subspace_residual: r.subspace_residual,
            tau: r.tau,
            passed: r.passed,
        });
    }
    write_csv(&a.out, &rows)?;
    let passed = rows.iter().filter(|r| r.passed).count();
    println!("{passed}/{} columns on the ellipse (tau {:.3e})", rows.len(), key.tau);
    Ok(Outcome::new(&[&a.samples, key_path], vec![a.out.clone()]))
}

#[derive(Serialize)]
struct IdentifyRow {
    column: usize,
    candidate: String,
    distance: f64,
    subspace_residual: f64,
    best: bool,
    margin_log10: f64,
}

pub fn identify(_g: &Global, a: &IdentifyArgs) -> Result<Outcome, Failure> {
    check_tolerance(a.tolerance)?;
    let m = load_logprobs(&a.samples)?;
    let keys = a
        .candidates
        .iter()
        .map(|p| exact_key(p, a.tolerance))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(k) = keys.iter().find(|k| k.v() != m.v()) {
        return Err(Failure::Precondition(format!(
            "candidate {} has vocabulary {}, samples have {}",
            k.id,
            k.v(),
            m.v()
        )));
    }
    let bases: Vec<_> = keys.iter().map(|k| k.logit_basis()).collect();
    let shared: Vec<usize> = (0..m.v()).collect();
    let mut rows = Vec::new();
    let mut wins = vec![0usize; keys.len()];
    for j in 0..m.n() {
        let l = m.column(j);
        let mut scores = Vec::with_capacity(keys.len());
        for (key, basis) in keys.iter().zip(&bases) {
            let col = if a.project {
                project_column(&l, basis, &shared)?.0
            } else {
                l.clone()
            };
            let r = verify(&col, key)?;
            scores.push((r.distance, r.subspace_residual));
        }
        let score = |s: &(f64, f64)| s.0.max(s.1);
        let best = (0..keys.len())
            .min_by(|&x, &y| score(&scores[x]).total_cmp(&score(&scores[y])))
            .expect("at least one candidate");
        let runner_up = (0..keys.len())
            .filter(|&i| i != best)
            .map(|i| score(&scores[i]))
            .fold(f64::INFINITY, f64::min);
        let margin = (runner_up.max(f64::MIN_POSITIVE) / score(&scores[best]).max(f64::MIN_POSITIVE)).log10();
        wins[best] += 1;
        for (i, key) in keys.iter().enumerate() {
            rows.push(IdentifyRow {
                column: j,
                candidate: key.id.clone(),
                distance: scores[i].0,
                subspace_residual: scores[i].1,
                best: i == best,
                margin_log10: margin,
            });
        }
    }
    write_csv(&a.out, &rows)?;
    for (key, w) in keys.iter().zip(&wins) {
        println!("{}: {w}/{} columns", key.id, m.n());
    }
    let mut inputs: Vec<&Path> = vec![&a.samples];
    inputs.extend(a.candidates.iter().map(PathBuf::as_path));
    Ok(Outcome::new(&inputs, vec![a.out.clone()]))
}

pub async fn serve_cmd(_g: &Global, a: &ServeArgs) -> Result<Outcome, Failure> {
    let model = match (&a.model_file, &a.key) {
        (Some(p), _) => load_model(p)?,
        (None, Some(k)) => load_key(k)?.params,
        (None, None) => return Err(Failure::Precondition("need --model-file or --key".into())),
    };
    let cfg = ApiConfig {
        model,
        top_k: a.top_k,
        max_bias_tokens: a.max_bias_tokens,
        price_per_1k_tokens: a.price_per_1k,
        rate_limit_qps: a.qps,
    };
    let handle = serve(&cfg, a.listen).await?;
    println!("listening on {}", handle.base_url());
    std::io::stdout().flush()?;
    tokio::signal::ctrl_c().await?;
    let stats = handle.stats();
    handle.shutdown().await?;
    println!("served {} queries ({} prompt tokens)", stats.queries, stats.prompt_tokens);
    Ok(Outcome::default())
}

pub async fn attack(_g: &Global, a: &AttackArgs) -> Result<Outcome, Failure> {
    let client = ApiClient::new(a.url.clone(), a.v, a.top_k, a.price_per_1k)?;
    client.health().await?;
    let opts = AttackOptions {
        n_samples: a.n,
        boost: a.boost,
        d: a.d,
        concurrency: a.concurrency,
        ..AttackOptions::new(a.n)
    };
    let res = run_attack(&client, &opts).await?;
    for w in &res.warnings {
        eprintln!("warning: {w}");
    }
    ensure_parent(&a.out)?;
    save_logprobs(&a.out, &res.samples)?;
    let ledger_path = sibling(&a.out, "ledger.json");
    save_json(&ledger_path, &res.ledger)?;
    println!(
        "harvested {} vectors at d={} with {} queries, {} prompt tokens, spend {:.6}",
        res.samples.n(),
        res.d,
        res.ledger.queries,
        res.ledger.prompt_tokens,
        res.ledger.spend
    );
    Ok(Outcome::new(
        &[],
        vec![a.out.clone(), sibling(&a.out, "data.bin"), ledger_path],
    ))
}

pub fn cost(_g: &Global, a: &CostArgs) -> Result<Outcome, Failure> {
    let mut w = csv::Writer::from_writer(std::io::stdout());
    for &d in &a.d {
        match a.v {
            Some(v) => w.serialize(estimate_cost(d, v, a.top_k, a.price_per_1k, a.convention)?)?,
            None => {
                #[derive(Serialize)]
                struct Row {
                    d: u64,
                    convention: ellsig_core::cost::Convention,
                    samples: u64,
                }
                w.serialize(Row {
                    d,
                    convention: a.convention,
                    samples: required_samples(d, a.convention)?,
                })?
            }
        }
    }
    w.flush()?;
    Ok(Outcome::default())
}

#[derive(Serialize)]
struct BenchCsvRow {
    d: usize,
    n: usize,
    seconds: f64,
    kind: &'static str,
}

#[derive(Serialize)]
struct CoefRow {
    power: usize,
    coefficient: f64,
    d_scale: f64,
}

pub fn bench(g: &Global, a: &BenchArgs) -> Result<Outcome, Failure> {
    let report = bench_fit(&a.dims, a.oversample, a.repeats, &a.extrapolate, g.seed)?;
    let mut rows: Vec<BenchCsvRow> = report
        .rows
        .iter()
        .map(|r| BenchCsvRow {
            d: r.d,
            n: r.n,
            seconds: r.median_seconds,
            kind: "measurement",
        })
        .collect();
    rows.extend(report.extrapolations.iter().map(|e| BenchCsvRow {
        d: e.d,
        n: 0,
        seconds: e.seconds,
        kind: "extrapolation",
    }));
    write_csv(&a.out, &rows)?;
    let coef_path = sibling(&a.out, "poly.csv");
    let coefs: Vec<CoefRow> = report
        .coefficients
        .iter()
        .enumerate()
        .map(|(power, &coefficient)| CoefRow {
            power,
            coefficient,
            d_scale: report.d_scale,
        })
        .collect();
    write_csv(&coef_path, &coefs)?;
    for r in &rows {
        println!("d={:>5} {:>12.4e} s  {}", r.d, r.seconds, r.kind);
    }
    Ok(Outcome::new(&[], vec![a.out.clone(), coef_path]))
}

pub fn hist(g: &Global, a: &HistArgs) -> Result<Outcome, Failure> {
    let model = load_model(&a.model_file)?;
    let h = hidden_norm_histogram(&model, a.n, a.bins, g.seed)?;
    write_csv(&a.out, &h.bins)?;
    println!(
        "relative magnitude mean {:.9} (min {:.9}, max {:.9}) over {} states",
        h.mean, h.min, h.max, h.n
    );
    Ok(Outcome::new(&[&a.model_file], vec![a.out.clone()]))
}

pub fn mac_keygen(g: &Global, a: &MacKeygenArgs) -> Result<Outcome, Failure> {
    let key = keygen(a.v, a.d, g.seed)?;
    ensure_parent(&a.out)?;
    let outputs = save_key(&a.out, &key)?;
    println!("key {}", key.key_id);
    Ok(Outcome::new(&[], outputs))
}

pub fn mac_sign(_g: &Global, a: &MacSignArgs) -> Result<Outcome, Failure> {
    let key = load_key(&a.key)?;
    let bytes = match (&a.message, &a.message_file) {
        (Some(m), _) => m.as_bytes().to_vec(),
        (None, Some(p)) => std::fs::read(p)?,
        (None, None) => return Err(Failure::Precondition("need --message or --message-file".into())),
    };
    let msg = sign_at(&key, &bytes, a.sequence_index)?;
    ensure_parent(&a.out)?;
    save_json(&a.out, &msg)?;
    let mut inputs: Vec<&Path> = vec![&a.key];
    if let Some(p) = &a.message_file {
        inputs.push(p);
    }
    Ok(Outcome::new(&inputs, vec![a.out.clone()]))
}

pub fn mac_verify_cmd(_g: &Global, a: &MacVerifyArgs) -> Result<Outcome, Failure> {
    let key = load_key(&a.key)?;
    let msg: SignedMessage = ellsig_core::io::load_json(&a.signed)?;
    let store = match &a.store {
        Some(p) => ReplayStore::open(p)?,
        None => ReplayStore::in_memory(),
    };
    let report = mac_verify(&key, &msg, &store, a.record)?;
    let text = serde_json::to_string_pretty(&report).map_err(ellsig_core::Error::from)?;
    println!("{text}");
    println!("accepted: {}", report.accepted());
    let mut outputs = Vec::new();
    if let Some(out) = &a.out {
        ensure_parent(out)?;
        save_json(out, &report)?;
        outputs.push(out.clone());
    }
    let mut inputs: Vec<&Path> = vec![&a.key, &a.signed];
    if let Some(p) = &a.store {
        inputs.push(p);
    }
    Ok(Outcome::new(&inputs, outputs))
}
