//! Decode scaling and memory measurements, and CSV/SVG report output.
//!
//! FLOPs are read from the tape counters and are exact; wall time is the
//! median over repeats and is reported but never asserted on.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Convention, FlopCounter, Tape, Var};
use crate::captioning::{argmax, BOS};
use crate::error::{ensure, Error, Result};
use crate::model::Swifter;
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    /// Carries per-layer retention states between steps.
    Recurrent,
    /// Re-runs the decoder over the whole prefix at every step.
    Stateless,
}

impl DecodeMode {
    pub fn name(self) -> &'static str {
        match self {
            DecodeMode::Recurrent => "recurrent",
            DecodeMode::Stateless => "stateless",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mode: DecodeMode,
    pub seq_len: usize,
    pub batch: usize,
    pub flops: u64,
    pub wall_ns: u64,
    pub peak_state_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchMeta {
    pub config_hash: String,
    pub seed: u64,
    pub timestamp: String,
    pub parallel: bool,
    pub repeats: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub meta: BenchMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub repeats: usize,
    /// Decode the streams of a batch on worker threads.
    pub parallel: bool,
    /// Largest decoder FLOP count (fusion convention) a single cell may need.
    pub flop_budget: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            repeats: 3,
            parallel: false,
            flop_budget: 2_000_000_000_000,
        }
    }
}

/// Hex SHA-256 of the serialized model config.
pub fn config_hash(model: &Swifter) -> Result<String> {
    let json = serde_json::to_vec(&model.cfg)?;
    Ok(Sha256::digest(&json).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

/// Decoder-side work and peak state of decoding exactly `seq_len` tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamCost {
    pub flops: FlopCounter,
    pub peak_state_bytes: usize,
}

/// Deterministic unit-variance features `[rows×d_m]` for backbone-less models.
pub fn synthetic_features(rows: usize, d_m: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&[rows, d_m], 1.0, &mut rng)
}

fn encode_memory(model: &Swifter, input: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::inference(&model.store);
    let x = tape.constant(input.clone());
    let f = model.features(&mut tape, x)?;
    let m = model.fusion.encode(&mut tape, f)?;
    Ok(tape.value(m).clone())
}

/// Decodes `seq_len` argmax tokens (ignoring `EOS`) from an encoded memory.
/// Encoder work is excluded; cross-attention key/value projections are included.
pub fn decode_stream(model: &Swifter, memory: &Tensor, mode: DecodeMode, seq_len: usize) -> Result<(Vec<usize>, StreamCost)> {
    ensure!(seq_len >= 1, Error::Config("seq_len must be at least 1".into()));
    let mut tokens = vec![BOS];
    match mode {
        DecodeMode::Recurrent => {
            let mut tape = Tape::inference(&model.store);
            let m = tape.constant(memory.clone());
            let mut st = model.fusion.start_decode_from_memory(&mut tape, m)?;
            let mut peak = 0;
            for _ in 0..seq_len {
                let logits = model.decode_step(&mut st, *tokens.last().expect("non-empty"))?;
                tokens.push(argmax(logits.data()));
                peak = peak.max(st.state_bytes());
            }
            Ok((
                tokens,
                StreamCost {
                    flops: st.flops,
                    peak_state_bytes: peak,
                },
            ))
        }
        DecodeMode::Stateless => {
            let mut flops = FlopCounter::default();
            let mut peak = 0;
            for _ in 0..seq_len {
                let mut tape = Tape::inference(&model.store);
                let m: Var = tape.constant(memory.clone());
                let before = tape.value_bytes();
                let logits = model.fusion.decode_parallel(&mut tape, m, &tokens)?;
                let last = tape.value(logits).row(tokens.len() - 1).to_vec();
                flops += tape.flops();
                peak = peak.max(tape.value_bytes() - before);
                tokens.push(argmax(&last));
            }
            Ok((
                tokens,
                StreamCost {
                    flops,
                    peak_state_bytes: peak,
                },
            ))
        }
    }
}

/// Closed-form decoder FLOPs of [`decode_stream`], used by the budget guard.
pub fn predicted_stream_flops(model: &Swifter, mem_len: usize, mode: DecodeMode, seq_len: usize) -> FlopCounter {
    let f = &model.fusion;
    match mode {
        DecodeMode::Recurrent => f.memory_kv_flops(mem_len) + f.decode_step_flops(mem_len) * seq_len as u64,
        DecodeMode::Stateless => (1..=seq_len)
            .map(|t| f.decode_parallel_flops(mem_len, t))
            .fold(FlopCounter::default(), |a, b| a + b),
    }
}

fn median(mut xs: Vec<u64>) -> u64 {
    xs.sort_unstable();
    xs[xs.len() / 2]
}

/// One cell per `(mode, seq_len, batch)`; `inputs` supplies the images of a
/// batch (cycled when shorter than the batch).
pub fn bench_decode(
    model: &Swifter,
    inputs: &[Tensor],
    modes: &[DecodeMode],
    seq_lens: &[usize],
    batches: &[usize],
    cfg: &BenchConfig,
    seed: u64,
) -> Result<BenchReport> {
    ensure!(cfg.repeats >= 3, Error::Config("repeats must be at least 3".into()));
    ensure!(!inputs.is_empty(), Error::Config("no bench inputs".into()));
    ensure!(
        batches.iter().all(|&b| b >= 1) && seq_lens.iter().all(|&t| t >= 1),
        Error::Config("batch sizes and lengths must be positive".into())
    );
    let memories: Vec<Tensor> = inputs
        .iter()
        .map(|x| encode_memory(model, x))
        .collect::<Result<_>>()?;
    let mem_len = memories[0].rows();
    for &mode in modes {
        for &t in seq_lens {
            for &b in batches {
                let need = predicted_stream_flops(model, mem_len, mode, t).total(Convention::Fusion) * b as u64;
                ensure!(
                    need <= cfg.flop_budget,
                    Error::Budget(format!(
                        "{} decode of {t} tokens x batch {b} needs {need} FLOPs, budget is {}",
                        mode.name(),
                        cfg.flop_budget
                    ))
                );
            }
        }
    }
    let mut rows = Vec::new();
    for &mode in modes {
        for &t in seq_lens {
            for &b in batches {
                let batch: Vec<&Tensor> = (0..b).map(|i| &memories[i % memories.len()]).collect();
                let run = || -> Result<Vec<StreamCost>> {
                    let costs = if cfg.parallel {
                        par::map_slice(&batch, |m| decode_stream(model, m, mode, t))
                    } else {
                        batch.iter().map(|m| decode_stream(model, m, mode, t)).collect()
                    };
                    costs.into_iter().map(|c| c.map(|(_, c)| c)).collect()
                };
                let mut times = Vec::with_capacity(cfg.repeats);
                let mut costs = Vec::new();
                for _ in 0..cfg.repeats {
                    let start = Instant::now();
                    costs = run()?;
                    times.push((start.elapsed().as_nanos() as u64).max(1));
                }
                let flops = costs
                    .iter()
                    .map(|c| c.flops.total(Convention::Fusion))
                    .sum();
                let peak = costs.iter().map(|c| c.peak_state_bytes).max().unwrap_or(0);
                rows.push(BenchRow {
                    mode,
                    seq_len: t,
                    batch: b,
                    flops,
                    wall_ns: median(times),
                    peak_state_bytes: peak as u64,
                });
            }
        }
    }
    Ok(BenchReport {
        rows,
        meta: BenchMeta {
            config_hash: config_hash(model)?,
            seed,
            timestamp: String::new(),
            parallel: cfg.parallel,
            repeats: cfg.repeats,
        },
    })
}

/// Peak per-stream decode state bytes for each length.
pub fn bench_memory(model: &Swifter, input: &Tensor, mode: DecodeMode, seq_lens: &[usize]) -> Result<Vec<(usize, usize)>> {
    let memory = encode_memory(model, input)?;
    seq_lens
        .iter()
        .map(|&t| Ok((t, decode_stream(model, &memory, mode, t)?.1.peak_state_bytes)))
        .collect()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Svg,
}

pub const CSV_HEADER: &str = "mode,seq_len,batch,flops,wall_ns,peak_state_bytes";

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

pub fn to_csv(report: &BenchReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &report.rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

pub fn parse_csv(text: &str) -> Result<Vec<BenchRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
    ensure!(
        header.join(",") == CSV_HEADER,
        Error::Format(format!("unexpected bench header {:?}", header.join(",")))
    );
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn fmt_tick(v: f64) -> String {
    if v >= 1e4 {
        format!("{v:.1e}")
    } else {
        format!("{v}")
    }
}

/// Log-log line chart of FLOPs against length, one polyline per mode and batch.
pub fn to_svg(report: &BenchReport) -> Result<String> {
    ensure!(!report.rows.is_empty(), Error::Contract("empty bench report".into()));
    let (w, h, pad) = (640.0, 420.0, 70.0);
    let xs: Vec<f64> = report.rows.iter().map(|r| (r.seq_len as f64).ln()).collect();
    let ys: Vec<f64> = report.rows.iter().map(|r| (r.flops.max(1) as f64).ln()).collect();
    let span = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo { (lo, hi) } else { (lo - 1.0, hi + 1.0) }
    };
    let ((x0, x1), (y0, y1)) = (span(&xs), span(&ys));
    let px = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let py = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<g class="axes" stroke="black"><line x1="{pad}" y1="{b}" x2="{r}" y2="{b}"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{b}"/></g>"#,
        b = h - pad,
        r = w - pad
    );
    let mut lens: Vec<usize> = report.rows.iter().map(|r| r.seq_len).collect();
    lens.sort_unstable();
    lens.dedup();
    let _ = writeln!(s, r#"<g class="ticks" font-family="sans-serif" font-size="11">"#);
    for t in &lens {
        let x = px((*t as f64).ln());
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{b}" x2="{x:.2}" y2="{b2}" stroke="black"/><text x="{x:.2}" y="{ty}" text-anchor="middle">{t}</text>"#,
            b = h - pad,
            b2 = h - pad + 5.0,
            ty = h - pad + 18.0
        );
    }
    for k in 0..=4 {
        let y = y0 + (y1 - y0) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<line x1="{a}" y1="{p:.2}" x2="{pad}" y2="{p:.2}" stroke="black"/><text x="{tx}" y="{p:.2}" text-anchor="end">{v}</text>"#,
            a = pad - 5.0,
            p = py(y),
            tx = pad - 8.0,
            v = fmt_tick(y.exp().round())
        );
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(
        s,
        r#"<text x="{cx}" y="{by}" text-anchor="middle" font-family="sans-serif" font-size="13">caption length (tokens)</text>"#,
        cx = w / 2.0,
        by = h - 20.0
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{cy}" transform="rotate(-90 18 {cy})" text-anchor="middle" font-family="sans-serif" font-size="13">decoder FLOPs</text>"#,
        cy = h / 2.0
    );
    let mut series: Vec<(DecodeMode, usize)> = report.rows.iter().map(|r| (r.mode, r.batch)).collect();
    series.sort_unstable();
    series.dedup();
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    for (i, (mode, batch)) in series.iter().enumerate() {
        let mut pts: Vec<(usize, u64)> = report
            .rows
            .iter()
            .filter(|r| r.mode == *mode && r.batch == *batch)
            .map(|r| (r.seq_len, r.flops))
            .collect();
        pts.sort_unstable();
        let points: Vec<String> = pts
            .iter()
            .map(|&(t, f)| format!("{:.2},{:.2}", px((t as f64).ln()), py((f.max(1) as f64).ln())))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="series" data-mode="{m}" data-batch="{batch}" fill="none" stroke="{c}" stroke-width="2" points="{p}"/>"#,
            m = mode.name(),
            c = colors[i % colors.len()],
            p = points.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{y}" font-family="sans-serif" font-size="12" fill="{c}">{m} (batch {batch})</text>"#,
            x = pad + 10.0,
            y = pad + 16.0 * i as f64,
            c = colors[i % colors.len()],
            m = mode.name()
        );
    }
    let _ = writeln!(s, "</svg>");
    Ok(s)
}

/// Writes the report to `path`. Metadata goes to a `<path>.meta.json` sidecar.
pub fn emit_report(report: &BenchReport, format: ReportFormat, path: &Path) -> Result<()> {
    ensure!(!report.rows.is_empty(), Error::Contract("empty bench report".into()));
    let body = match format {
        ReportFormat::Csv => to_csv(report)?,
        ReportFormat::Svg => to_svg(report)?,
    };
    fs::write(path, body)?;
    let mut meta = path.as_os_str().to_owned();
    meta.push(".meta.json");
    fs::write(meta, serde_json::to_string_pretty(&report.meta)? + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> BenchReport {
        let row = |mode, seq_len, flops| BenchRow {
            mode,
            seq_len,
            batch: 1,
            flops,
            wall_ns: 17,
            peak_state_bytes: 64,
        };
        BenchReport {
            rows: vec![
                row(DecodeMode::Recurrent, 8, 100),
                row(DecodeMode::Recurrent, 16, 200),
                row(DecodeMode::Stateless, 8, 400),
                row(DecodeMode::Stateless, 16, 1600),
            ],
            meta: BenchMeta {
                config_hash: "x".into(),
                seed: 1,
                timestamp: String::new(),
                parallel: false,
                repeats: 3,
            },
        }
    }

    #[test]
    fn csv_roundtrip() {
        let r = report();
        let text = to_csv(&r).unwrap();
        assert!(text.starts_with(CSV_HEADER));
        assert_eq!(parse_csv(&text).unwrap(), r.rows);
        assert!(parse_csv("a,b\n1,2\n").is_err());
    }

    #[test]
    fn svg_has_one_polyline_per_series() {
        let svg = to_svg(&report()).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains(r#"data-mode="recurrent""#));
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn empty_report_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let mut r = report();
        r.rows.clear();
        assert!(emit_report(&r, ReportFormat::Csv, &p).is_err());
        assert!(!p.exists());
    }

    fn small_model() -> (Swifter, Tensor) {
        let cfg = crate::model::SwifterConfig {
            backbone: None,
            fusion: crate::fusion::FusionConfig {
                n_enc: 1,
                n_dec: 2,
                hidden: 8,
                ff_size: 16,
                heads: 2,
                vocab_size: 12,
                max_len: 64,
                gamma: 0.9,
                theta_base: 10_000.0,
                d_m: 5,
                tie_embeddings: false,
            },
        };
        let m = Swifter::new(cfg, 3).unwrap();
        let x = synthetic_features(6, 5, 1);
        (m, x)
    }

    #[test]
    fn measured_flops_match_closed_form() {
        let (m, x) = small_model();
        let mem = encode_memory(&m, &x).unwrap();
        for mode in [DecodeMode::Recurrent, DecodeMode::Stateless] {
            for t in [1, 5, 9] {
                let (toks, cost) = decode_stream(&m, &mem, mode, t).unwrap();
                assert_eq!(toks.len(), t + 1);
                assert_eq!(cost.flops, predicted_stream_flops(&m, 6, mode, t), "{mode:?} {t}");
            }
        }
        let (a, _) = decode_stream(&m, &mem, DecodeMode::Recurrent, 9).unwrap();
        let (b, _) = decode_stream(&m, &mem, DecodeMode::Stateless, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_and_memory_scaling() {
        let (m, x) = small_model();
        let cfg = BenchConfig::default();
        let r = bench_decode(&m, &[x.clone()], &[DecodeMode::Recurrent, DecodeMode::Stateless], &[8, 16], &[1, 2], &cfg, 0).unwrap();
        assert_eq!(r.rows.len(), 8);
        for pair in r.rows.chunks(2) {
            assert_eq!(pair[1].flops, 2 * pair[0].flops);
        }
        let rec = bench_memory(&m, &x, DecodeMode::Recurrent, &[4, 16, 32]).unwrap();
        assert!(rec.iter().all(|&(_, b)| b == 2 * 8 * 8 * 8));
        let st = bench_memory(&m, &x, DecodeMode::Stateless, &[4, 16, 32]).unwrap();
        assert!(st[0].1 < st[1].1 && st[1].1 < st[2].1);
        let tight = BenchConfig { flop_budget: 10, ..cfg };
        assert!(matches!(
            bench_decode(&m, &[x], &[DecodeMode::Stateless], &[8], &[1], &tight, 0),
            Err(Error::Budget(_))
        ));
    }

    #[test]
    fn slopes() {
        let xs = [32.0, 64.0, 128.0];
        assert!((loglog_slope(&xs, &[3.0, 6.0, 12.0]) - 1.0).abs() < 1e-12);
        assert!((loglog_slope(&xs, &[1.0, 4.0, 16.0]) - 2.0).abs() < 1e-12);
    }
}
