use std::error::Error as StdError;
use std::fs::File;
use std::io::{self, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use qvg_core::datagen::{gen_clustered_stream, load_raw_tensor, save_raw_tensor, RawDtype, StreamParams};
use qvg_core::metrics::psnr_from_mse;
use qvg_core::store::QvgcWriter;
use qvg_core::{
    decompress, ChunkSpec, Compressor, KVPlane, MemoryReport, Method, QuantConfig, QvgcHeader, QvgcReader,
};
use rayon::prelude::*;
use serde::Serialize;

type CliResult<T = ()> = Result<T, Box<dyn StdError + Send + Sync>>;

const BENCH_SCHEMA: &str = "# schema: qvg-bench/1";
const SWEEP_SCHEMA: &str = "# schema: qvg-sweep/1";

#[derive(Parser)]
#[command(name = "qvg", version, about = "Low-bit KV-cache codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress every plane of a KVT0 tensor into a QVGC container.
    Compress(CompressArgs),
    /// Reconstruct planes from a QVGC container.
    Decompress(DecompressArgs),
    /// Compare methods on one source, one CSV row per (method, bits).
    Bench(BenchArgs),
    /// Ratio/MSE trade-off grid over stages, block sizes and widths.
    Sweep(SweepArgs),
    /// Memory accounting for a configuration, as JSON.
    Stats(StatsArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Qvg,
    QvgPro,
}

impl Preset {
    fn config(self, bits: u8) -> QuantConfig {
        match self {
            Preset::Qvg => QuantConfig::qvg(bits),
            Preset::QvgPro => QuantConfig::qvg_pro(bits),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Dtype {
    F32,
    Bf16,
}

/// Codec knobs shared by compress and stats. Unset fields come from the preset.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long, value_enum, default_value = "qvg")]
    preset: Preset,
    #[arg(long)]
    bits: Option<u8>,
    /// Group size B.
    #[arg(long)]
    block: Option<usize>,
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long)]
    centroids: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ConfigArgs {
    fn config(&self) -> QuantConfig {
        let mut c = self.preset.config(self.bits.unwrap_or(2)).with_seed(self.seed);
        if let Some(b) = self.block {
            c = c.with_group_size(b);
        }
        if let Some(s) = self.stages {
            c = c.with_stages(s);
        }
        if let Some(k) = self.centroids {
            c = c.with_centroids(k);
        }
        c
    }
}

#[derive(Args)]
struct CompressArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "qvg")]
    method: Method,
    #[command(flatten)]
    config: ConfigArgs,
    /// Re-run k-means from scratch on every chunk.
    #[arg(long)]
    no_warm_start: bool,
}

#[derive(Args)]
struct DecompressArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Half-open chunk range `a..b`; defaults to every chunk.
    #[arg(long, value_parser = parse_range)]
    range: Option<Range<usize>>,
    /// Original KVT0 tensor to score the reconstruction against.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "f32")]
    dtype: Dtype,
}

/// Where evaluation planes come from: a synthetic preset or a KVT0 file.
#[derive(Args)]
struct SourceArgs {
    /// `clustered` (4096x128, 256 clusters), `small` (1024x128, 64 clusters) or a KVT0 path.
    #[arg(long, default_value = "clustered")]
    source: String,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long, value_delimiter = ',', default_value = "rtn,kivi,quarot,qvg")]
    methods: Vec<Method>,
    #[arg(long, value_delimiter = ',', default_value = "2,4")]
    bits: Vec<u8>,
    /// Seeds 0..n; each drives both the synthetic data and the codec.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Configuration for the qvg rows.
    #[arg(long, value_enum, default_value = "qvg")]
    preset: Preset,
    /// Group size for the baseline rows.
    #[arg(long, default_value_t = 16)]
    baseline_block: usize,
    /// Add encode/decode wall time columns (makes the CSV nondeterministic).
    #[arg(long)]
    timings: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Inclusive `a..b` or a comma list.
    #[arg(long, default_value = "0..4", value_parser = parse_stage_list)]
    stages: StageList,
    #[arg(long, value_delimiter = ',', default_value = "16,32,64")]
    block: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "2,4")]
    bits: Vec<u8>,
    #[arg(long, default_value_t = 256)]
    centroids: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long, default_value = "qvg")]
    method: Method,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 4096)]
    tokens: usize,
    #[arg(long, default_value_t = 128)]
    dim: usize,
}

#[derive(Clone)]
struct StageList(Vec<usize>);

fn parse_range(s: &str) -> Result<Range<usize>, String> {
    let (a, b) = s.split_once("..").ok_or_else(|| format!("expected a..b, got {s:?}"))?;
    let a = a.trim().parse::<usize>().map_err(|e| e.to_string())?;
    let b = b.trim().parse::<usize>().map_err(|e| e.to_string())?;
    if a > b {
        return Err(format!("empty range {a}..{b}"));
    }
    Ok(a..b)
}

fn parse_stage_list(s: &str) -> Result<StageList, String> {
    if let Some((a, b)) = s.split_once("..") {
        let b = b.strip_prefix('=').unwrap_or(b);
        let a = a.trim().parse::<usize>().map_err(|e| e.to_string())?;
        let b = b.trim().parse::<usize>().map_err(|e| e.to_string())?;
        if a > b {
            return Err(format!("empty range {a}..{b}"));
        }
        return Ok(StageList((a..=b).collect()));
    }
    s.split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()
        .map(StageList)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let res = match cli.command {
        Command::Compress(a) => cmd_compress(a),
        Command::Decompress(a) => cmd_decompress(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Stats(a) => cmd_stats(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn init_threads() -> CliResult {
    let Ok(v) = std::env::var("QVG_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("QVG_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn cmd_compress(a: CompressArgs) -> CliResult {
    let planes = load_raw_tensor(&a.input)?;
    let cfg = a.config.config();
    let mut comp = Compressor::new(a.method, cfg)?.with_warm_start(!a.no_warm_start);
    let d = planes.first().ok_or("input holds no planes")?.head_dim();
    let header = QvgcHeader::new(comp.method(), comp.params(), d, cfg.seed);
    let mut w = QvgcWriter::create(&a.out, header)?;
    let mut report: Option<MemoryReport> = None;
    for (i, p) in planes.iter().enumerate() {
        let plane = KVPlane::new(p.spec.with_chunk_index(i), p.data.clone())?;
        let chunk = comp.compress(&plane)?;
        w.append_chunk(&chunk)?;
        let r = MemoryReport::new(comp.method(), &chunk.params, &chunk.spec);
        match report.as_mut() {
            Some(acc) => acc.accumulate(&r),
            None => report = Some(r),
        }
    }
    let bytes = w.bytes_written();
    w.finish()?;
    let report = report.expect("at least one plane");
    eprintln!(
        "{} planes -> {} ({bytes} bytes, {:.2}x vs bf16)",
        planes.len(),
        a.out.display(),
        report.ratio
    );
    println!("{}", report.to_json());
    Ok(())
}

fn cmd_decompress(a: DecompressArgs) -> CliResult {
    let reader = QvgcReader::open(&a.input)?;
    let range = a.range.unwrap_or(0..reader.count());
    let planes = reader.dequantize_range(range.clone())?;
    let dtype = match a.dtype {
        Dtype::F32 => RawDtype::F32,
        Dtype::Bf16 => RawDtype::Bf16,
    };
    save_raw_tensor(&a.out, &planes, dtype)?;
    eprintln!("{} planes -> {}", planes.len(), a.out.display());
    if let Some(path) = a.reference {
        let reference = load_raw_tensor(&path)?;
        if reference.len() < range.end {
            return Err(format!(
                "reference holds {} planes, need chunks {}..{}",
                reference.len(),
                range.start,
                range.end
            )
            .into());
        }
        let e = score(&reference[range], &planes)?;
        eprintln!("mse {:.6e}  psnr {:.2} dB", e.mse, e.psnr_db);
        println!("{}", serde_json::to_string(&e)?);
    }
    Ok(())
}

#[derive(Serialize)]
struct Score {
    mse: f64,
    psnr_db: f64,
}

/// MSE over all elements; PSNR peak is the reference's largest magnitude.
fn score(reference: &[KVPlane], test: &[KVPlane]) -> CliResult<Score> {
    let mut sq = 0.0;
    let mut n = 0usize;
    let mut peak = 0.0f64;
    for (r, t) in reference.iter().zip(test) {
        let e = qvg_core::mse(&r.data, &t.data)?;
        let m = r.data.as_slice().len();
        sq += e * m as f64;
        n += m;
        peak = peak.max(r.data.max_abs());
    }
    let mse = if n == 0 { 0.0 } else { sq / n as f64 };
    let psnr_db = if peak > 0.0 { psnr_from_mse(mse, peak) } else { f64::NAN };
    Ok(Score { mse, psnr_db })
}

fn preset_stream(name: &str, seed: u64) -> Option<StreamParams> {
    let p = match name {
        "clustered" | "preset" => StreamParams::preset(),
        "small" => StreamParams::preset().with_shape(1024, 128, 64),
        _ => return None,
    };
    Some(p.with_seed(seed))
}

fn load_source(src: &SourceArgs, seed: u64) -> CliResult<Vec<KVPlane>> {
    match preset_stream(&src.source, seed) {
        Some(p) => Ok(gen_clustered_stream(&p)?),
        None if Path::new(&src.source).exists() => Ok(load_raw_tensor(&src.source)?),
        None => Err(format!("unknown source {:?}: not a preset name or an existing file", src.source).into()),
    }
}

struct RunResult {
    report: MemoryReport,
    score: Score,
    encode: Duration,
    decode: Duration,
}

/// Compress and decompress `planes` in stream order under one configuration.
fn run(planes: &[KVPlane], method: Method, cfg: QuantConfig) -> CliResult<RunResult> {
    let mut comp = Compressor::new(method, cfg)?;
    let mut recon = Vec::with_capacity(planes.len());
    let mut report: Option<MemoryReport> = None;
    let (mut encode, mut decode) = (Duration::ZERO, Duration::ZERO);
    for (i, p) in planes.iter().enumerate() {
        let plane = KVPlane::new(p.spec.with_chunk_index(i), p.data.clone())?;
        let t = Instant::now();
        let chunk = comp.compress(&plane)?;
        encode += t.elapsed();
        let t = Instant::now();
        recon.push(decompress(&chunk)?);
        decode += t.elapsed();
        let r = MemoryReport::new(comp.method(), &chunk.params, &chunk.spec);
        match report.as_mut() {
            Some(acc) => acc.accumulate(&r),
            None => report = Some(r),
        }
    }
    let report = report.ok_or("source holds no planes")?;
    Ok(RunResult { report, score: score(planes, &recon)?, encode, decode })
}

#[derive(Serialize)]
struct BenchRow {
    method: Method,
    bits: u8,
    group_size: usize,
    stages: usize,
    centroids: usize,
    seeds: u64,
    ratio: String,
    mse: String,
    psnr_db: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    encode_ms: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    decode_ms: Option<String>,
}

fn cmd_bench(a: BenchArgs) -> CliResult {
    if a.seeds == 0 {
        return Err("--seeds must be at least 1".into());
    }
    let sources: Vec<Vec<KVPlane>> = (0..a.seeds).map(|s| load_source(&a.source, s)).collect::<CliResult<_>>()?;
    let grid: Vec<(Method, u8)> = a.methods.iter().flat_map(|&m| a.bits.iter().map(move |&b| (m, b))).collect();
    let rows: Vec<CliResult<BenchRow>> = grid
        .par_iter()
        .map(|&(method, bits)| {
            let base = match method {
                Method::Qvg => a.preset.config(bits),
                _ => QuantConfig::rtn(bits, a.baseline_block),
            };
            let (mut sq, mut n, mut peak) = (0.0, 0usize, 0.0f64);
            let (mut encode, mut decode) = (Duration::ZERO, Duration::ZERO);
            let mut report: Option<MemoryReport> = None;
            for (seed, planes) in sources.iter().enumerate() {
                let r = run(planes, method, base.with_seed(seed as u64))?;
                let m: usize = planes.iter().map(|p| p.data.as_slice().len()).sum();
                sq += r.score.mse * m as f64;
                n += m;
                peak = planes.iter().fold(peak, |pk, p| pk.max(p.data.max_abs()));
                encode += r.encode;
                decode += r.decode;
                match report.as_mut() {
                    Some(acc) => acc.accumulate(&r.report),
                    None => report = Some(r.report),
                }
            }
            let report = report.expect("at least one seed");
            let mse = sq / n as f64;
            let ms = |d: Duration| format!("{:.3}", d.as_secs_f64() * 1e3);
            eprintln!(
                "{:>6} b={} B={:<3} S={}  ratio {:>6.2}  mse {:.4e}  psnr {:>6.2} dB  enc {} ms  dec {} ms",
                report.method.name(),
                bits,
                report.group_size,
                report.stages,
                report.ratio,
                mse,
                psnr_from_mse(mse, peak),
                ms(encode),
                ms(decode)
            );
            Ok(BenchRow {
                method: report.method,
                bits,
                group_size: report.group_size,
                stages: report.stages,
                centroids: report.centroids,
                seeds: a.seeds,
                ratio: format!("{:.2}", report.ratio),
                mse: format!("{mse:.6e}"),
                psnr_db: format!("{:.3}", psnr_from_mse(mse, peak)),
                encode_ms: a.timings.then(|| ms(encode)),
                decode_ms: a.timings.then(|| ms(decode)),
            })
        })
        .collect();
    let rows = rows.into_iter().collect::<CliResult<Vec<_>>>()?;
    write_csv(a.out.as_deref(), BENCH_SCHEMA, &rows)
}

#[derive(Serialize)]
struct SweepRow {
    method: Method,
    bits: u8,
    group_size: usize,
    stages: usize,
    centroids: usize,
    ratio: String,
    mse: String,
    psnr_db: String,
}

fn cmd_sweep(a: SweepArgs) -> CliResult {
    let planes = load_source(&a.source, a.seed)?;
    let mut grid = Vec::new();
    for &bits in &a.bits {
        for &block in &a.block {
            for &stages in &a.stages.0 {
                grid.push(
                    QuantConfig::qvg(bits)
                        .with_group_size(block)
                        .with_stages(stages)
                        .with_centroids(a.centroids)
                        .with_seed(a.seed),
                );
            }
        }
    }
    let rows: Vec<CliResult<SweepRow>> = grid
        .par_iter()
        .map(|&cfg| {
            let r = run(&planes, Method::Qvg, cfg)?;
            Ok(SweepRow {
                method: r.report.method,
                bits: cfg.bits,
                group_size: cfg.group_size,
                stages: cfg.stages,
                centroids: r.report.centroids,
                ratio: format!("{:.4}", r.report.ratio),
                mse: format!("{:.6e}", r.score.mse),
                psnr_db: format!("{:.3}", r.score.psnr_db),
            })
        })
        .collect();
    let rows = rows.into_iter().collect::<CliResult<Vec<_>>>()?;
    eprintln!("{} configurations over {} planes", rows.len(), planes.len());
    write_csv(a.out.as_deref(), SWEEP_SCHEMA, &rows)
}

fn cmd_stats(a: StatsArgs) -> CliResult {
    let cfg = a.config.config();
    let comp = Compressor::new(a.method, cfg)?;
    let report = MemoryReport::new(comp.method(), &comp.params(), &ChunkSpec::new(a.tokens, a.dim));
    println!("{}", report.to_json());
    Ok(())
}

fn write_csv<T: Serialize>(out: Option<&Path>, schema: &str, rows: &[T]) -> CliResult {
    let mut sink: Box<dyn Write> = match out {
        Some(p) => Box::new(io::BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    };
    writeln!(sink, "{schema}")?;
    let mut w = csv::Writer::from_writer(sink);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
