use std::path::Path;
use std::process::Command;

use hnfnet::network::{CascadeConfig, NetConfig};
use hnfnet::{LabelMap, PipelineConfig, Tensor4};
use hnfnet_io::cli::run;
use hnfnet_io::config::ConfigFile;
use hnfnet_io::volume::{read_volume, write_volume, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    code: i32,
    stdout: String,
    stderr: String,
}

fn hnfnet(args: &[&str]) -> Outcome {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("hnfnet").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    Outcome {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let cfg = ConfigFile {
        single: Some(NetConfig::toy_single()),
        cascade: Some(CascadeConfig::toy()),
        pipeline: PipelineConfig {
            crop_dims: [32, 32, 32],
            patch_dims: [32, 32, 32],
            strides: [32, 32, 32],
            tta: hnfnet::pipeline::TtaMode::Full,
            ..PipelineConfig::default()
        },
    };
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

fn write_scan(path: &Path, dims: [usize; 3], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Tensor4::from_fn(1, dims, |_, d, h, w| {
        let inside = (3..dims[0] - 3).contains(&d) && (2..dims[1] - 2).contains(&h) && (1..dims[2] - 1).contains(&w);
        if inside {
            rng.random_range(10.0..500.0)
        } else {
            0.0
        }
    });
    write_volume(path, &Volume::intensity(t, [1.0; 3])).unwrap();
}

#[test]
fn infer_without_weights_is_a_usage_error() {
    let o = hnfnet(&["infer", "--input", "x", "--config", "c", "--out", "o"]);
    assert_eq!(o.code, 1);
    assert!(o.stderr.contains("Usage:"), "{}", o.stderr);
    let last = o.stderr.lines().last().unwrap();
    assert!(last.starts_with("error code=1 kind=usage message="), "{last}");
    assert!(last.contains("--weights"));
}

#[test]
fn unknown_subcommand_and_bad_tag_are_usage_errors() {
    assert_eq!(hnfnet(&["train"]).code, 1);
    let o = hnfnet(&["infer", "--input", "x", "--weights", "big:w", "--config", "c", "--out", "o"]);
    assert_eq!(o.code, 1);
    assert!(o.stderr.contains("unknown weight tag"));
}

#[test]
fn missing_input_file_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = hnfnet(&["inspect", "--config", s(&dir.path().join("nope.json"))]);
    assert_eq!(o.code, 3, "{}", o.stderr);
    let o = hnfnet(&["evaluate", "--pred", "a", "--gt", "b", "--out", s(&dir.path().join("r.csv"))]);
    assert_eq!(o.code, 3);
    assert_eq!(o.stderr.lines().count(), 1);
    assert!(o.stderr.starts_with("error code=3 kind=runtime message="));
}

#[test]
fn evaluate_identical_maps() {
    let dir = tempfile::tempdir().unwrap();
    let l = LabelMap::new([4, 4, 4], (0..64).map(|i| [0u8, 1, 2, 4][(i / 5) % 4]).collect()).unwrap();
    let seg = dir.path().join("seg");
    write_volume(&seg, &Volume::labels(l, [1.0; 3])).unwrap();
    let out = dir.path().join("report.csv");
    let o = hnfnet(&["evaluate", "--pred", s(&seg), "--gt", s(&seg), "--out", s(&out)]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let csv = std::fs::read_to_string(&out).unwrap();
    assert_eq!(
        csv,
        "region,dice,hd95_mm\nET,1.000000,0.000000\nWT,1.000000,0.000000\nTC,1.000000,0.000000\nmean,1.000000,0.000000\n"
    );
    assert_eq!(o.stdout, csv);
}

#[test]
fn init_weights_requires_family_when_ambiguous_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let w = dir.path().join("w");
    assert_eq!(hnfnet(&["init-weights", "--config", s(&cfg), "--seed", "1", "--out", s(&w)]).code, 1);
    let a = hnfnet(&["init-weights", "--config", s(&cfg), "--seed", "42", "--out", s(&w), "--family", "single"]);
    let b = hnfnet(&["init-weights", "--config", s(&cfg), "--seed", "42", "--out", s(&w), "--family", "single"]);
    assert_eq!(a.code, 0, "{}", a.stderr);
    assert_eq!(a.stdout, b.stdout);
    assert!(a.stdout.contains("sha256"));
}

#[test]
fn inspect_rejects_non_granular_dims() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = hnfnet(&["inspect", "--config", s(&cfg), "--input-dims", "16", "16", "20"]);
    assert_eq!(o.code, 2);
    let o = hnfnet(&["inspect", "--config", s(&cfg), "--input-dims", "32", "32", "32"]);
    assert_eq!(o.code, 0);
    assert!(o.stdout.contains("single") && o.stdout.contains("cascade"));
}

#[test]
fn preprocess_infer_evaluate_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let dims = [40, 36, 34];
    let names = ["t1", "t1ce", "t2", "flair"];
    for (i, n) in names.iter().enumerate() {
        write_scan(&d.join(n), dims, i as u64);
    }
    let norm = d.join("norm");
    let o = hnfnet(&[
        "preprocess", "--t1", s(&d.join("t1")), "--t1ce", s(&d.join("t1ce")), "--t2", s(&d.join("t2")),
        "--flair", s(&d.join("flair")), "--out", s(&norm),
    ]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let t = read_volume(&norm).unwrap().into_intensity(&norm).unwrap();
    assert_eq!((t.channels(), t.dims()), (4, dims));

    // Raw stacked study for inference.
    let scans: Vec<Tensor4> = names
        .iter()
        .map(|n| read_volume(&d.join(n)).unwrap().into_intensity(&d.join(n)).unwrap())
        .collect();
    let stacked = Tensor4::concat_channels(&scans.iter().collect::<Vec<_>>()).unwrap();
    let study = d.join("study");
    write_volume(&study, &Volume::intensity(stacked, [1.0; 3])).unwrap();

    let cfg = small_config(d);
    for (fam, seed) in [("single", "1"), ("cascade", "2")] {
        let w = d.join(fam);
        let o = hnfnet(&["init-weights", "--config", s(&cfg), "--seed", seed, "--out", s(&w), "--family", fam]);
        assert_eq!(o.code, 0, "{}", o.stderr);
    }
    let ws = format!("single:{}", s(&d.join("single")));
    let wc = format!("cascade:{}", s(&d.join("cascade")));
    let seg = d.join("seg");
    let args = ["infer", "--input", s(&study), "--weights", &ws, "--weights", &wc, "--config", s(&cfg), "--out", s(&seg), "--no-tta"];
    let o = hnfnet(&args);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let labels = read_volume(&seg).unwrap().into_labels(&seg).unwrap();
    assert_eq!(labels.dims(), dims);

    // Weights made for the other family fail validation.
    let wrong = format!("single:{}", s(&d.join("cascade")));
    let o = hnfnet(&["infer", "--input", s(&study), "--weights", &wrong, "--config", s(&cfg), "--out", s(&seg)]);
    assert_eq!(o.code, 2, "{}", o.stderr);

    let report = d.join("r.csv");
    let o = hnfnet(&["evaluate", "--pred", s(&seg), "--gt", s(&seg), "--out", s(&report)]);
    assert_eq!(o.code, 0, "{}", o.stderr);
}

#[test]
fn binary_reports_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_hnfnet");
    let out = Command::new(bin).args(["infer"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = Command::new(bin).arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("inspect"));
}
