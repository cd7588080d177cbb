use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_lidarseg"));
    c.env_remove("LIDARSEG_THREADS").env_remove("LIDARSEG_DATA_DIR");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn lidarseg")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn csv_value(text: &str, key: &str) -> Option<String> {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key},")).map(str::to_string))
}

/// One toy training run shared by the tests: checkpoint plus scene files.
struct Toy {
    dir: TempDir,
    train_stdout: String,
}

impl Toy {
    fn ckpt(&self) -> PathBuf {
        self.dir.path().join("toy.ckpt")
    }
    fn scene(&self, name: &str) -> PathBuf {
        self.dir.path().join("scene").join(name)
    }
}

fn toy() -> &'static Toy {
    static TOY: OnceLock<Toy> = OnceLock::new();
    TOY.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let ckpt = dir.path().join("toy.ckpt");
        let scene = dir.path().join("scene");
        let o = run(&[
            "train-toy",
            "--seed",
            "0",
            "--steps",
            "500",
            "--out",
            ckpt.to_str().unwrap(),
            "--scene-dir",
            scene.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        Toy {
            dir,
            train_stdout: stdout(&o),
        }
    })
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn train_toy_writes_a_checkpoint_and_lowers_the_loss() {
    let t = toy();
    assert!(t.ckpt().exists());
    let first: f64 = csv_value(&t.train_stdout, "initial_loss").unwrap().parse().unwrap();
    let last: f64 = csv_value(&t.train_stdout, "final_loss").unwrap().parse().unwrap();
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn segment_labels_every_point_and_matches_the_training_labels() {
    let t = toy();
    let out = t.dir.path().join("seg_a.label");
    let o = run(&[
        "segment",
        "--input",
        p(&t.scene("scene.bin")),
        "--model",
        p(&t.ckpt()),
        "--out",
        p(&out),
        "--labels",
        p(&t.scene("scene.label")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let points = std::fs::metadata(t.scene("scene.bin")).unwrap().len() / 16;
    let labels = std::fs::metadata(&out).unwrap().len() / 4;
    assert_eq!(points, labels);
    let acc: f64 = csv_value(&stdout(&o), "accuracy").unwrap().parse().unwrap();
    assert!(acc >= 0.99, "accuracy {acc}");
    let text = stdout(&o);
    for stage in ["embed", "backbone", "head"] {
        assert!(text.contains(&format!("{stage},")), "missing {stage} timing");
    }
    assert!(stderr(&o).contains("# features=32"), "resolved config is logged");
}

#[test]
fn segment_is_deterministic() {
    let t = toy();
    let outs: Vec<Vec<u8>> = ["seg_x.label", "seg_y.label"]
        .iter()
        .map(|name| {
            let out = t.dir.path().join(name);
            let o = run(&["segment", "--input", p(&t.scene("scene.bin")), "--model", p(&t.ckpt()), "--out", p(&out)]);
            assert!(o.status.success(), "{}", stderr(&o));
            std::fs::read(out).unwrap()
        })
        .collect();
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn incompatible_config_names_the_fields() {
    let t = toy();
    let out = t.dir.path().join("never.label");
    let o = run(&[
        "segment",
        "--input",
        p(&t.scene("scene.bin")),
        "--model",
        p(&t.ckpt()),
        "--out",
        p(&out),
        "--set",
        "layers=2",
    ]);
    assert!(!o.status.success());
    let err = stderr(&o);
    let line = err.lines().find(|l| l.starts_with("error ")).unwrap();
    assert!(line.starts_with("error kind=config msg="), "{line}");
    assert!(line.contains("layers"), "{line}");
    assert!(!out.exists());
}

#[test]
fn eval_reads_a_sequence_tree_from_the_environment() {
    let t = toy();
    let root = TempDir::new().unwrap();
    let seq = root.path().join("sequences").join("08");
    std::fs::create_dir_all(seq.join("velodyne")).unwrap();
    std::fs::create_dir_all(seq.join("labels")).unwrap();
    std::fs::copy(t.scene("scene.bin"), seq.join("velodyne").join("000000.bin")).unwrap();
    std::fs::copy(t.scene("scene.label"), seq.join("labels").join("000000.label")).unwrap();
    let o = bin()
        .args(["eval", "--model", p(&t.ckpt())])
        .env("LIDARSEG_DATA_DIR", root.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("class,tp,fp,fn,iou"));
    let miou: f64 = csv_value(&text, "miou").unwrap().parse().unwrap();
    assert!(miou > 0.95, "{miou}");
}

#[test]
fn bench_knn_reports_both_thread_counts_with_equal_checksums() {
    let o = run(&["--threads", "2", "bench", "--suite", "knn", "--n", "3000", "--reps", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("query,1,"));
    assert!(text.contains("query,2,"));
    assert_eq!(csv_value(&text, "identical").as_deref(), Some("true"));
}

#[test]
fn thread_count_comes_from_the_environment() {
    let o = bin()
        .args(["bench", "--suite", "knn", "--n", "500", "--reps", "1"])
        .env("LIDARSEG_THREADS", "3")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("# threads=3"));
    assert!(stdout(&o).contains("query,3,"));
}

#[test]
fn bench_flatten_reports_both_arms() {
    let o = run(&["bench", "--suite", "flatten", "--n", "2000", "--hw", "256", "--channels", "8", "--reps", "2", "--f64"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("arm,N,HW,C,millis"));
    assert!(text.contains("\nscatter,2000,256,8,"));
    assert!(text.contains("\nmatmul,2000,256,8,"));
}

#[test]
fn unknown_suite_is_a_one_line_usage_error() {
    let o = run(&["bench", "--suite", "gpu"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.starts_with("error kind=usage msg="));
}

#[test]
fn missing_input_is_an_io_error() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("none.bin");
    let o = run(&["bench", "--suite", "knn", "--input", p(&missing)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).lines().any(|l| l.starts_with("error kind=io msg=")));
}

#[test]
fn synth_writes_matching_scan_and_label_files() {
    let dir = TempDir::new().unwrap();
    let stem = dir.path().join("scan");
    let o = run(&["synth", "--seed", "4", "--out", p(&stem)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let n: u64 = csv_value(&stdout(&o), "points").unwrap().parse().unwrap();
    assert_eq!(std::fs::metadata(stem.with_extension("bin")).unwrap().len(), 16 * n);
    assert_eq!(std::fs::metadata(stem.with_extension("label")).unwrap().len(), 4 * n);
}
