use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flate2::write::GzEncoder;
use swanvox::ingest::emdb::{seed_cache, EmdbRecord};
use swanvox::ingest::{read_mrc, write_mrc, DatasetManifest, MrcHeader};
use swanvox::volume::DensityVolume;

const TINY: &str = r#"
[model]
input_side = 8
pe_levels = 1
latent_channels = 4
widths = [4]
schedules = [[1, 2, 4], [1, 2]]
codebook_size = 16
groups = 2

[train]
epochs = 2
batch_size = 2

[data]
synthetic = 4
"#;

fn swan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_swan-vox"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("SWAN_VOX_CACHE_DIR")
        .env_remove("SWAN_VOX_OFFLINE")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn error_record(o: &Output) -> serde_json::Value {
    let err = stderr(o);
    let line = err.lines().rev().find(|l| l.starts_with('{')).expect("json record on stderr");
    serde_json::from_str(line).unwrap()
}

fn write_map(path: &Path, vol: &DensityVolume) {
    std::fs::write(path, write_mrc(&MrcHeader::for_volume(vol), vol)).unwrap();
}

fn blob(side: usize, spacing: f64, shift: f64) -> DensityVolume {
    let c = (side as f64 - 1.0) / 2.0 + shift;
    DensityVolume::from_fn(side, spacing, |z, y, x| {
        let r2 = (z as f64 - c).powi(2) + (y as f64 - c).powi(2) + (x as f64 - c).powi(2);
        (-r2 / (side as f64)).exp() as f32
    })
    .unwrap()
}

#[test]
fn every_subcommand_documents_its_flags() {
    let cases: [(&str, &[&str]); 6] = [
        ("voxelize", &["--resolution", "--mode"]),
        ("curate", &["--weight-min", "--weight-max", "--apix", "--size", "--offline"]),
        ("train", &["--config", "--epochs", "--seed", "--resume"]),
        ("eval", &["--checkpoint", "--split", "--pred", "--gt"]),
        ("denoise", &["--checkpoint", "--in", "--out"]),
        ("neighbors", &["--checkpoint", "--db", "--query", "--k", "--metric"]),
    ];
    for (cmd, flags) in cases {
        let o = swan(&[cmd, "--help"]);
        assert!(o.status.success(), "{cmd} --help");
        let text = String::from_utf8_lossy(&o.stdout);
        for f in flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
}

#[test]
fn voxelize_writes_a_readable_map() {
    let dir = tempfile::tempdir().unwrap();
    let off = dir.path().join("cube.off");
    std::fs::write(
        &off,
        "OFF\n8 6 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n0 0 1\n1 0 1\n1 1 1\n0 1 1\n\
         4 0 3 2 1\n4 4 5 6 7\n4 0 1 5 4\n4 2 3 7 6\n4 1 2 6 5\n4 0 4 7 3\n",
    )
    .unwrap();
    let out = dir.path().join("cube.mrc");
    let o = swan(&["voxelize", s(&off), s(&out), "--resolution", "16", "--mode", "solid"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (h, v) = read_mrc(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!([h.nx, h.ny, h.nz], [16, 16, 16]);
    assert!(v.data().iter().all(|&x| x == 0.0 || x == 1.0));
    assert!(v.data().iter().any(|&x| x == 1.0));
}

#[test]
fn malformed_mesh_exits_2_naming_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let off = dir.path().join("bad.off");
    std::fs::write(&off, "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 9\n").unwrap();
    let o = swan(&["voxelize", s(&off), s(&dir.path().join("o.mrc"))]);
    assert_eq!(o.status.code(), Some(2));
    let rec = error_record(&o);
    assert_eq!(rec["error"], "parse");
    assert_eq!(rec["command"], "voxelize");
    assert!(rec["message"].as_str().unwrap().contains("line 6"));
}

#[test]
fn missing_input_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = swan(&["voxelize", s(&dir.path().join("nope.off")), s(&dir.path().join("o.mrc"))]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_record(&o)["error"], "io");
}

#[test]
fn missing_checkpoint_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("gone.ckpt");
    let o = swan(&["eval", "--checkpoint", s(&ck), "--run-dir", s(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(error_record(&o)["message"].as_str().unwrap().contains("gone.ckpt"));
}

#[test]
fn bad_flag_exits_2() {
    assert_eq!(swan(&["train", "--no-such-flag"]).status.code(), Some(2));
}

fn seed_fixture_cache(cache: &Path) {
    let fixtures = [("EMD-1001", 250.0, "singleParticle"), ("EMD-1002", 900.0, "subtomogramAveraging"), ("EMD-1003", 1500.0, "SPA"), ("EMD-1004", 99.0, "SPA")];
    for (i, (acc, kda, method)) in fixtures.iter().enumerate() {
        let vol = blob(16, 2.0, i as f64 * 0.5);
        let mut gz = GzEncoder::new(Vec::new(), flate2::Compression::default());
        gz.write_all(&write_mrc(&MrcHeader::for_volume(&vol), &vol)).unwrap();
        let record = EmdbRecord {
            accession: acc.to_string(),
            weight_kda: Some(*kda),
            resolution_a: Some(3.5),
            contour: Some(0.05),
            method: Some(method.to_string()),
            pixel_size_a: Some(2.0),
        };
        seed_cache(cache, &record, &gz.finish().unwrap()).unwrap();
    }
}

fn curate_run(list: &Path, cache: &Path, out: &Path) -> Output {
    swan(&[
        "curate", s(list), "--offline", "--cache-dir", s(cache), "--size", "8", "--apix", "4", "--weight-min", "100", "--weight-max",
        "1500", "--seed", "3", "--run-dir", s(out),
    ])
}

#[test]
fn curate_from_cache_is_filtered_augmented_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    seed_fixture_cache(&cache);
    let list = dir.path().join("ids.txt");
    std::fs::write(&list, "# fixtures\nEMD-1001\n1002\nemd_1003\nEMD-1004\n").unwrap();

    let a = dir.path().join("a");
    let o = curate_run(&list, &cache, &a);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = DatasetManifest::load(&a.join("manifest.jsonl")).unwrap();
    assert_eq!(m.entries.len(), 18);
    for acc in ["EMD-1001", "EMD-1002", "EMD-1003"] {
        let copies: Vec<_> = m.entries.iter().filter(|e| e.source_id.as_deref() == Some(acc)).collect();
        assert_eq!(copies.len(), 6);
        assert!(copies.iter().all(|e| e.split == copies[0].split));
    }
    let excl = std::fs::read_to_string(a.join("exclusions.jsonl")).unwrap();
    assert!(excl.contains("EMD-1004") && excl.contains("99"));
    let (_, v) = read_mrc(&std::fs::read(a.join(&m.entries[0].path)).unwrap()).unwrap();
    assert_eq!(v.dims(), [8; 3]);
    assert_eq!(v.spacing(), 4.0);
    assert!(v.mean().abs() < 1e-5);
    assert!((v.variance() - 1.0).abs() < 1e-4);

    let b = dir.path().join("b");
    assert!(curate_run(&list, &cache, &b).status.success());
    for e in &m.entries {
        assert_eq!(std::fs::read(a.join(&e.path)).unwrap(), std::fs::read(b.join(&e.path)).unwrap(), "{}", e.id);
    }
}

#[test]
fn offline_cache_miss_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let list = dir.path().join("ids.txt");
    std::fs::write(&list, "EMD-4242\n").unwrap();
    let o = curate_run(&list, &dir.path().join("empty-cache"), &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(error_record(&o)["error"], "network");
}

fn train_tiny(dir: &Path, name: &str) -> PathBuf {
    let cfg = dir.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let run = dir.join(name);
    let o = swan(&["train", "--config", s(&cfg), "--seed", "4", "--run-dir", s(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    run
}

#[test]
fn train_eval_denoise_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_tiny(dir.path(), "run");
    let loss = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    let lines: Vec<_> = loss.lines().collect();
    assert_eq!(lines[0], "epoch,train_total,train_recon,train_level1,train_level2,val_total,val_recon");
    assert_eq!(lines.len(), 3);
    let util: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("utilization.json")).unwrap()).unwrap();
    assert_eq!(util.as_array().unwrap().len(), 2);
    assert!(run.join("config.toml").exists());
    let ckpt = run.join("model.ckpt");
    assert!(ckpt.exists() && run.join("checkpoints/last.ckpt").exists());

    let eval = dir.path().join("eval");
    let o = swan(&["eval", "--checkpoint", s(&ckpt), "--synthetic", "2", "--run-dir", s(&eval)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(eval.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(metrics.lines().last().unwrap().contains("\"aggregate\""));
    assert_eq!(std::fs::read_dir(eval.join("fsc")).unwrap().count(), 2);

    let noisy = dir.path().join("noisy.mrc");
    write_map(&noisy, &blob(8, 1.0, 0.3));
    let out = dir.path().join("clean.mrc");
    let base = dir.path().join("bp.mrc");
    let o = swan(&["denoise", "--checkpoint", s(&ckpt), "--in", s(&noisy), "--out", s(&out), "--baseline", s(&base)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for p in [&out, &base] {
        let (_, v) = read_mrc(&std::fs::read(p).unwrap()).unwrap();
        assert_eq!(v.dims(), [8; 3]);
    }

    let wrong = dir.path().join("wrong.mrc");
    write_map(&wrong, &blob(10, 1.0, 0.0));
    let o = swan(&["denoise", "--checkpoint", s(&ckpt), "--in", s(&wrong), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn training_is_reproducible_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let a = train_tiny(dir.path(), "a");
    let b = train_tiny(dir.path(), "b");
    for f in ["model.ckpt", "checkpoints/last.ckpt", "loss.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let cfg = dir.path().join("tiny.toml");
    let c = dir.path().join("c");
    let o = swan(&["train", "--config", s(&cfg), "--seed", "4", "--epochs", "3", "--resume", s(&a.join("checkpoints/last.ckpt")), "--run-dir", s(&c)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(c.join("loss.csv")).unwrap().lines().count(), 4);
}

#[test]
fn eval_of_identical_pair() {
    let dir = tempfile::tempdir().unwrap();
    let v = dir.path().join("v.mrc");
    write_map(&v, &blob(16, 2.0, 0.0));
    let out = dir.path().join("e");
    let o = swan(&["eval", "--pred", s(&v), "--gt", s(&v), "--run-dir", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    assert_eq!(rec["iou"], 1.0);
    assert_eq!(rec["psnr"], "perfect");
    assert_eq!(rec["fsc_resolution_05"]["at_limit"], true);
    assert_eq!(rec["fsc_resolution_05"]["angstrom"], 4.0);
}

#[test]
fn neighbors_rank_a_duplicate_first() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_tiny(dir.path(), "run");
    let ckpt = run.join("model.ckpt");
    let maps: Vec<PathBuf> = ["anchor", "copy", "other", "far"].iter().map(|n| dir.path().join(format!("{n}.mrc"))).collect();
    write_map(&maps[0], &blob(8, 1.0, 0.0));
    write_map(&maps[1], &blob(8, 1.0, 0.0));
    write_map(&maps[2], &blob(8, 1.0, 1.5));
    write_map(&maps[3], &DensityVolume::from_fn(8, 1.0, |z, y, x| ((z * 7 + y * 3 + x) % 5) as f32).unwrap());
    let db = dir.path().join("db/emb.bin");
    let csv = dir.path().join("nn.csv");
    let mut args = vec!["neighbors", "--checkpoint", s(&ckpt), "--db", s(&db), "--query", s(&maps[0]), "--k", "2", "--out", s(&csv), "--build"];
    args.extend(maps.iter().map(|p| s(p)));
    let o = swan(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "query_id,rank,neighbor_id,distance");
    assert_eq!(lines[1], "anchor,1,copy,0");
    assert_eq!(lines.len(), 3);

    // Query by id against the stored database, cosine metric, no model needed.
    let o = swan(&["neighbors", "--db", s(&db), "--query-id", "copy", "--k", "1", "--metric", "cosine"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("copy,1,anchor,"));
}
