use std::path::Path;
use std::process::{Command, Output};

use qvg_core::datagen::{gen_clustered_stream, load_raw_tensor, save_raw_tensor, RawDtype, StreamParams};
use qvg_core::store::encode_single_chunk;
use qvg_core::{compress, decompress, ChunkSpec, MemoryReport, Method, QuantConfig, QvgcReader};

fn qvg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qvg")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = qvg(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stream(n_chunks: usize, n: usize, d: usize, k: usize, seed: u64) -> Vec<qvg_core::KVPlane> {
    let p = StreamParams::preset().with_shape(n, d, k).with_chunks(n_chunks, 0.01).with_seed(seed);
    gen_clustered_stream(&p).unwrap()
}

/// CSV body rows, schema comment and header dropped.
fn rows(csv: &str) -> Vec<Vec<String>> {
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("# schema: "));
    lines.skip(1).map(|l| l.split(',').map(str::to_owned).collect()).collect()
}

#[test]
fn missing_input_is_a_usage_error() {
    assert_eq!(qvg(&["compress", "--out", "x.qvgc"]).status.code(), Some(2));
    assert_eq!(qvg(&["bench", "--methods", "zstd"]).status.code(), Some(2));
    assert_eq!(qvg(&[]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.kvt");
    let out = dir.path().join("o.qvgc");
    assert_eq!(qvg(&["compress", "--input", s(&missing), "--out", s(&out)]).status.code(), Some(1));

    let input = dir.path().join("in.kvt");
    save_raw_tensor(&input, &stream(1, 24, 16, 4, 0), RawDtype::F32).unwrap();
    // a group size of 5 does not divide the 16 channels
    let o = qvg(&["compress", "--input", s(&input), "--out", s(&out), "--block", "5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: "));

    let empty = dir.path().join("empty.kvt");
    save_raw_tensor(&empty, &[], RawDtype::F32).unwrap();
    assert_eq!(qvg(&["compress", "--input", s(&empty), "--out", s(&out)]).status.code(), Some(1));
}

#[test]
fn thread_cap_must_be_positive() {
    let o = Command::new(env!("CARGO_BIN_EXE_qvg"))
        .args(["stats"])
        .env("QVG_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_qvg"))
        .args(["stats"])
        .env("QVG_THREADS", "2")
        .output()
        .unwrap();
    assert!(o.status.success());
}

#[test]
fn round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.kvt");
    let packed = dir.path().join("c.qvgc");
    let output = dir.path().join("out.kvt");
    let planes = stream(4, 128, 64, 8, 3);
    save_raw_tensor(&input, &planes, RawDtype::F32).unwrap();

    let json = ok(&["compress", "--input", s(&input), "--out", s(&packed), "--stages", "2", "--block", "32", "--seed", "9"]);
    let report: MemoryReport = serde_json::from_str(json.trim()).unwrap();
    assert_eq!((report.n_tokens, report.head_dim, report.stages), (4 * 128, 64, 2));
    let size = std::fs::metadata(&packed).unwrap().len();
    let bits = report.payload_bits + report.scale_bits + report.assignment_bits + report.centroid_bits;
    assert_eq!(size * 8, bits + 8 * (32 + 4 * 20));

    let json = ok(&["decompress", "--input", s(&packed), "--out", s(&output), "--reference", s(&input)]);
    let score: serde_json::Value = serde_json::from_str(json.trim()).unwrap();
    assert!(score["psnr_db"].as_f64().unwrap() > 40.0);

    // the written planes are the core decoder's output, rounded to f32
    let reader = QvgcReader::open(&packed).unwrap();
    let back = load_raw_tensor(&output).unwrap();
    assert_eq!(back.len(), 4);
    let mut sq = 0.0;
    for (i, (b, p)) in back.iter().zip(&planes).enumerate() {
        let want = decompress(&reader.read_chunk(i).unwrap()).unwrap();
        for ((x, y), z) in b.data.as_slice().iter().zip(want.data.as_slice()).zip(p.data.as_slice()) {
            assert_eq!(*x, *y as f32 as f64);
            sq += (y - z).powi(2);
        }
    }
    let mse = sq / (4 * 128 * 64) as f64;
    assert!((score["mse"].as_f64().unwrap() - mse).abs() <= 1e-12 * mse.max(1e-300));
}

#[test]
fn range_and_reference_are_checked() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.kvt");
    let packed = dir.path().join("c.qvgc");
    let output = dir.path().join("out.kvt");
    save_raw_tensor(&input, &stream(3, 64, 32, 4, 1), RawDtype::Bf16).unwrap();
    ok(&["compress", "--input", s(&input), "--out", s(&packed), "--method", "rtn", "--block", "16"]);

    ok(&["decompress", "--input", s(&packed), "--out", s(&output), "--range", "1..3", "--reference", s(&input)]);
    assert_eq!(load_raw_tensor(&output).unwrap().len(), 2);
    let run = |r: &str| qvg(&["decompress", "--input", s(&packed), "--out", s(&output), "--range", r]).status.code();
    assert_eq!(run("2..4"), Some(1));
    assert_eq!(run("3..1"), Some(2));
    assert_eq!(run("x"), Some(2));

    let other = dir.path().join("other.kvt");
    save_raw_tensor(&other, &stream(3, 64, 16, 4, 1), RawDtype::F32).unwrap();
    let o = qvg(&["decompress", "--input", s(&packed), "--out", s(&output), "--reference", s(&other)]);
    assert_eq!(o.status.code(), Some(1));
    let short = dir.path().join("short.kvt");
    save_raw_tensor(&short, &stream(1, 64, 32, 4, 1), RawDtype::F32).unwrap();
    let o = qvg(&["decompress", "--input", s(&packed), "--out", s(&output), "--reference", s(&short)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn single_plane_file_matches_core_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [(&str, &[&str], QuantConfig); 4] = [
        ("qvg", &[], QuantConfig::qvg(2).with_centroids(32)),
        ("qvg", &["--preset", "qvg-pro", "--bits", "4"], QuantConfig::qvg_pro(4).with_centroids(32)),
        ("kivi", &["--block", "16"], QuantConfig::rtn(2, 16)),
        ("quarot", &["--bits", "8"], QuantConfig::qvg(8).with_centroids(32)),
    ];
    for (i, (method, extra, cfg)) in cases.into_iter().enumerate() {
        let seed = 100 + i as u64;
        let cfg = cfg.with_seed(seed);
        let plane = stream(1, 128, 64, 16, seed).remove(0);
        let input = dir.path().join(format!("p{i}.kvt"));
        let packed = dir.path().join(format!("p{i}.qvgc"));
        save_raw_tensor(&input, std::slice::from_ref(&plane), RawDtype::F32).unwrap();
        let seed_s = seed.to_string();
        let mut args = vec!["compress", "--input", s(&input), "--out", s(&packed), "--method", method];
        args.extend_from_slice(&["--centroids", "32", "--seed", &seed_s]);
        args.extend_from_slice(extra);
        ok(&args);
        let m: Method = method.parse().unwrap();
        let want = encode_single_chunk(&compress(&plane, m, &cfg).unwrap()).unwrap();
        assert_eq!(std::fs::read(&packed).unwrap(), want, "case {i}");
    }
}

#[test]
fn stats_matches_core_accounting() {
    let json = ok(&["stats", "--preset", "qvg-pro", "--tokens", "1024", "--dim", "64"]);
    let got: MemoryReport = serde_json::from_str(json.trim()).unwrap();
    let cfg = QuantConfig::qvg_pro(2);
    assert_eq!(got, MemoryReport::new(Method::Qvg, &(&cfg).into(), &ChunkSpec::new(1024, 64)));
    let json = ok(&["stats", "--method", "rtn", "--bits", "2", "--block", "16"]);
    assert!(json.contains("\"ratio\":6.4"));
}

#[test]
fn bench_reports_table_ratio_and_error_gap() {
    let out = ok(&["bench", "--methods", "rtn,qvg", "--bits", "2", "--seeds", "1"]);
    let r = rows(&out);
    assert_eq!(r.len(), 2);
    let (rtn, qvg_row) = (&r[0], &r[1]);
    assert_eq!((rtn[0].as_str(), rtn[6].as_str()), ("rtn", "6.40"));
    assert_eq!(qvg_row[0], "qvg");
    let mse = |row: &Vec<String>| row[7].parse::<f64>().unwrap();
    assert!(mse(qvg_row) < mse(rtn) / 5.0, "{out}");
    assert_eq!(ok(&["bench", "--methods", "rtn,qvg", "--bits", "2", "--seeds", "1"]), out);
}

#[test]
fn bench_is_deterministic_over_seeds() {
    let args = ["bench", "--source", "small", "--bits", "2,4", "--seeds", "2"];
    let a = ok(&args);
    assert_eq!(rows(&a).len(), 8);
    assert_eq!(ok(&args), a);
    let timed = ok(&["bench", "--source", "small", "--methods", "rtn", "--seeds", "1", "--timings"]);
    assert!(timed.lines().nth(1).unwrap().ends_with("encode_ms,decode_ms"));
}

#[test]
fn bench_reads_kvt0_sources() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.kvt");
    save_raw_tensor(&input, &stream(2, 64, 32, 4, 5), RawDtype::F32).unwrap();
    let out = dir.path().join("b.csv");
    let stdout = ok(&["bench", "--source", s(&input), "--methods", "kivi", "--bits", "4", "--out", s(&out)]);
    assert!(stdout.is_empty());
    let csv = std::fs::read_to_string(&out).unwrap();
    assert_eq!(rows(&csv)[0][..3], ["kivi", "4", "16"]);
    assert_eq!(qvg(&["bench", "--source", "no-such-preset"]).status.code(), Some(1));
}

#[test]
fn sweep_grid_shape_and_trends() {
    let out = ok(&["sweep", "--source", "small", "--stages", "0..2", "--block", "16,32,64", "--bits", "2,4"]);
    let r = rows(&out);
    assert_eq!(r.len(), 3 * 3 * 2);
    let f = |row: &Vec<String>, i: usize| row[i].parse::<f64>().unwrap();
    for bits in ["2", "4"] {
        for stages in ["0", "1", "2"] {
            let ratios: Vec<f64> = r.iter().filter(|x| x[1] == bits && x[3] == stages).map(|x| f(x, 5)).collect();
            assert_eq!(ratios.len(), 3);
            assert!(ratios.windows(2).all(|w| w[0] < w[1]), "{ratios:?}");
        }
        for block in ["16", "32", "64"] {
            let at = |st: &str| r.iter().find(|x| x[1] == bits && x[2] == block && x[3] == st).unwrap();
            assert!(f(at("1"), 6) < f(at("0"), 6));
            assert_eq!(at("0")[0], "rtn");
        }
    }
    let list = ok(&["sweep", "--source", "small", "--stages", "1,3", "--block", "32", "--bits", "2"]);
    assert_eq!(rows(&list).iter().map(|x| x[3].clone()).collect::<Vec<_>>(), ["1", "3"]);
}
