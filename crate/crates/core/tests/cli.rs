use std::path::Path;
use std::process::{Command, Output};
use std::sync::Arc;

use nodecg::io::Checkpoint;
use nodecg::mesh::{CostWeights, ParamTrajectory, TimeMesh};
use tempfile::TempDir;

fn nodecg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nodecg")).args(args).output().expect("binary runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn zero_checkpoint(dir: &TempDir) -> std::path::PathBuf {
    let mesh = Arc::new(TimeMesh::uniform(5.0, 250).unwrap());
    let path = dir.path().join("zero.ckpt");
    Checkpoint::new(ParamTrajectory::zeros(mesh, 2), CostWeights::moons(), 0).save(&path).unwrap();
    path
}

fn rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(str::to_string).collect()).collect()
}

fn header(path: &Path) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.headers().unwrap().iter().map(str::to_string).collect()
}

#[test]
fn generate_writes_and_refuses_to_overwrite() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("moons.csv");
    let o = nodecg(&["generate", "--kind", "circles", "--count", "40", "--seed", "3", "--augment", "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(header(&out), ["x", "y", "z", "class"]);
    let data = rows(&out);
    assert_eq!(data.len(), 40);
    assert!(data.iter().all(|r| r[2].parse::<f64>().unwrap() == 0.0));

    let again = nodecg(&["generate", "--count", "40", "--out", path_str(&out)]);
    assert_eq!(again.status.code(), Some(2));
    let forced = nodecg(&["generate", "--count", "40", "--out", path_str(&out), "--force"]);
    assert!(forced.status.success());
    assert_eq!(header(&out), ["x", "y", "class"]);
}

#[test]
fn validation_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("x.csv");
    assert_eq!(nodecg(&["generate", "--kind", "spirals", "--out", path_str(&out)]).status.code(), Some(2));

    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "cost.mu5 = 1e-4\ntrain.descent = l2\nno.such.key = 1\n").unwrap();
    let ck = dir.path().join("c.ckpt");
    let m = dir.path().join("m.csv");
    let o = nodecg(&["train", "--config", path_str(&cfg), "--checkpoint", path_str(&ck), "--metrics", path_str(&m)]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("no.such.key") && err.contains("mu5"), "{err}");
    assert!(!ck.exists());

    assert_eq!(nodecg(&["train"]).status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let o = nodecg(&["eval", "--checkpoint", path_str(&missing)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.ckpt"));
}

#[test]
fn zero_checkpoint_outputs() {
    let dir = TempDir::new().unwrap();
    let ck = zero_checkpoint(&dir);

    let grid = dir.path().join("grid.csv");
    let o = nodecg(&[
        "boundary", "--checkpoint", path_str(&ck), "--out", path_str(&grid),
        "--extent", "-1,1,0,0.5", "--resolution", "10",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(header(&grid), ["x", "y", "score"]);
    let g = rows(&grid);
    assert_eq!(g.len(), 20 * 5);
    for r in &g {
        let v: Vec<f64> = r.iter().map(|s| s.parse().unwrap()).collect();
        assert_eq!(v[2], v[1] - v[0]);
    }

    let traj = dir.path().join("traj.csv");
    let o = nodecg(&["trajectories", "--checkpoint", path_str(&ck), "--out", path_str(&traj), "--count", "3"]);
    assert!(o.status.success());
    let t = rows(&traj);
    assert_eq!(t.len(), 6 * 101);
    for sample in t.chunks(101) {
        assert!(sample.iter().all(|r| r[3..] == sample[0][3..]));
    }

    let params = dir.path().join("params.csv");
    assert!(nodecg(&["params-export", "--checkpoint", path_str(&ck), "--out", path_str(&params)]).status.success());
    assert_eq!(header(&params), ["t", "W11", "W21", "W12", "W22", "b1", "b2"]);
    let p = rows(&params);
    assert_eq!(p.len(), 251);
    assert_eq!(p[250][0].parse::<f64>().unwrap(), 5.0);

    let o = nodecg(&["eval", "--checkpoint", path_str(&ck)]);
    assert!(o.status.success());
    assert!(!o.stdout.is_empty());
}

#[test]
fn training_resumes_with_continued_counters() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("train.csv");
    let clean = dir.path().join("clean.csv");
    assert!(nodecg(&["generate", "--count", "100", "--out", path_str(&data)]).status.success());
    assert!(nodecg(&["generate", "--count", "20", "--sigma", "0", "--seed", "7", "--out", path_str(&clean)]).status.success());
    let ck = dir.path().join("run.ckpt");
    let m1 = dir.path().join("m1.csv");
    let common = ["--train", path_str(&data), "--clean", path_str(&clean), "--checkpoint", path_str(&ck)];

    let mut a = vec!["train", "--epochs", "1", "--metrics", path_str(&m1)];
    a.extend(common);
    let o = nodecg(&a);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let first = Checkpoint::load(&ck).unwrap();
    assert_eq!((first.epoch, first.batch, first.iterations), (1, 0, 150));
    assert_eq!(rows(&m1).len(), 150);

    let resumed = dir.path().join("resumed.ckpt");
    let m2 = dir.path().join("m2.csv");
    let o = nodecg(&[
        "train", "--epochs", "2", "--resume", path_str(&ck), "--train", path_str(&data),
        "--clean", path_str(&clean), "--checkpoint", path_str(&resumed), "--metrics", path_str(&m2),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let second = Checkpoint::load(&resumed).unwrap();
    assert_eq!((second.epoch, second.iterations), (2, 300));
    let r2 = rows(&m2);
    assert_eq!(r2.len(), 150);
    assert_eq!(r2[0][0], "1");
}

#[test]
fn rmsprop_training_writes_a_checkpoint() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("train.csv");
    assert!(nodecg(&["generate", "--count", "200", "--out", path_str(&data)]).status.success());
    let ck = dir.path().join("sgd.ckpt");
    let m = dir.path().join("sgd.csv");
    let o = nodecg(&[
        "train", "--set", "train.method=rmsprop", "--epochs", "2", "--train", path_str(&data),
        "--checkpoint", path_str(&ck), "--metrics", path_str(&m),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(rows(&m).len(), 2);
    assert_eq!(Checkpoint::load(&ck).unwrap().params.mesh().node_count(), 251);
}
