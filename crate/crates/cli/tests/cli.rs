use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pneumoscan_core::checkpoint::{save_checkpoint, CheckpointMeta};
use pneumoscan_core::{ClassifierModel, Model, SegmentationModel, WidthConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pneumoscan"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn pneumoscan")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(dir: &Path, n: usize) -> PathBuf {
    let out = dir.join("data");
    let o = run(&["synth", "--n", &n.to_string(), "--side", "32", "--seed", "3", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    out.join("manifest.csv")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

const SMALL: &str = "base_channels = 2\ninput_side = 32\nbatch_size = 4\nlearning_rate = 0.001\n";

fn meta() -> CheckpointMeta {
    CheckpointMeta {
        input_side: 32,
        epoch: 0,
        seed: 0,
        config: vec![],
    }
}

/// Classifier whose logits are exactly `bias` for every input.
fn biased_classifier(path: &Path, bias: [f32; 3]) {
    let mut m = ClassifierModel::<f32>::new(&WidthConfig::desk(2), 0).unwrap();
    m.mark_stats_initialized();
    let head = m.blocks_mut().last_mut().unwrap();
    head.params[0].value.data_mut().fill(0.0);
    head.params[1].value.data_mut().copy_from_slice(&bias);
    save_checkpoint(&m, &meta(), path).unwrap();
}

fn half_segmenter(path: &Path) {
    let mut m = SegmentationModel::<f32>::new(&WidthConfig::desk(2), 0).unwrap();
    m.zero_head();
    save_checkpoint(&m, &meta(), path).unwrap();
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = vec![];
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synth(a.path(), 3);
    synth(b.path(), 3);
    let (ta, tb) = (tree(&a.path().join("data")), tree(&b.path().join("data")));
    assert!(ta.len() >= 9 + 9 + 6 + 1);
    assert_eq!(ta, tb);
}

#[test]
fn train_seg_writes_checkpoint_and_history() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 4);
    let cfg = write_config(dir.path(), "seg.cfg", &format!("{SMALL}epochs = 5\nbase_channels = 4\n").replace("base_channels = 2\n", ""));
    let ckpt = dir.path().join("seg.ckpt");
    let o = run(&["train-seg", "--manifest", s(&manifest), "--config", s(&cfg), "--out", s(&ckpt)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("effective config:"));
    assert!(stderr(&o).contains("  base_channels = 4"));
    let history = fs::read_to_string(dir.path().join("seg.history.csv")).unwrap();
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,val_loss,train_dice,val_dice,train_iou,val_iou");
    assert_eq!(lines.len(), 6);
    assert!(lines[5].starts_with("5,"));
    assert!(fs::read(&ckpt).unwrap().starts_with(b"PNEUMOSCAN-CKPT 1\nkind segmentation\n"));

    // same inputs, same bytes
    let again = dir.path().join("seg2.ckpt");
    let o = run(&["train-seg", "--manifest", s(&manifest), "--config", s(&cfg), "--out", s(&again)]);
    assert!(o.status.success());
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(&again).unwrap());
    assert_eq!(history, fs::read_to_string(dir.path().join("seg2.history.csv")).unwrap());

    // transfer and scratch classifiers
    let cls_cfg = write_config(dir.path(), "cls.cfg", "epochs = 2\ninput_side = 32\nbatch_size = 4\n");
    let cls = dir.path().join("cls.ckpt");
    let o = run(&[
        "train-cls", "--manifest", s(&manifest), "--config", s(&cls_cfg), "--encoder-from", s(&ckpt), "--out", s(&cls),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!stderr(&o).contains("from scratch"));
    assert!(stderr(&o).contains("  base_channels = 4"));
    let history = fs::read_to_string(dir.path().join("cls.history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,val_loss,train_acc,val_acc,train_f1,val_f1\n"));

    let scratch = dir.path().join("scratch.ckpt");
    let cfg4 = write_config(dir.path(), "cls4.cfg", "epochs = 1\ninput_side = 32\nbase_channels = 4\n");
    let o = run(&["train-cls", "--manifest", s(&manifest), "--config", s(&cfg4), "--out", s(&scratch)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("warning: no --encoder-from given"));

    let clash = write_config(dir.path(), "clash.cfg", "epochs = 1\ninput_side = 32\nbase_channels = 8\n");
    let o = run(&[
        "train-cls", "--manifest", s(&manifest), "--config", s(&clash), "--encoder-from", s(&ckpt), "--out", s(&scratch),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 2);
    let cfg = write_config(dir.path(), "bad.cfg", "epochs = 1\nlearnig_rate = 0.1\n");
    let o = run(&["train-seg", "--manifest", s(&manifest), "--config", s(&cfg), "--out", s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learnig_rate"));
    assert_eq!(stderr(&o).trim().lines().count(), 1, "{}", stderr(&o));

    let o = run(&["train-seg", "--manifest", s(&dir.path().join("nope.csv")), "--out", "x"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    let o = run(&["train-seg", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn diverging_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 4);
    let cfg = write_config(dir.path(), "hot.cfg", &format!("{SMALL}epochs = 3\nlearning_rate = 1e37\n").replace("learning_rate = 0.001\n", ""));
    let o = run(&["train-seg", "--manifest", s(&manifest), "--config", s(&cfg), "--out", s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn predict_normal_and_infected() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 2);
    let (normal, covid, seg) = (dir.path().join("n.ckpt"), dir.path().join("c.ckpt"), dir.path().join("s.ckpt"));
    biased_classifier(&normal, [4.0, 0.0, 0.0]);
    biased_classifier(&covid, [0.0, 4.0, 0.0]);
    half_segmenter(&seg);
    let img = dir.path().join("data/images/covid_0000.png");
    let lung = dir.path().join("data/lungs/covid_0000.png");
    let out = dir.path().join("out");

    let o = run(&["predict", "--image", s(&img), "--lung-mask", s(&lung), "--cls", s(&normal), "--seg", s(&seg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o);
    assert!(line.contains("\"label\":\"Normal\""));
    assert!(line.contains("\"infection_pct\":null"));
    assert!(line.contains("\"overlay\":null"));
    assert!(!out.join("covid_0000_mask.png").exists());

    let o = run(&["predict", "--image", s(&img), "--lung-mask", s(&lung), "--cls", s(&covid), "--seg", s(&seg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("\"infection_pct\":100.0"), "{}", stdout(&o));
    assert!(out.join("covid_0000_mask.png").exists());
    assert!(out.join("covid_0000_overlay.png").exists());

    let o = run(&["predict", "--image", s(&img), "--cls", s(&covid), "--seg", s(&seg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing lung mask"), "{}", stderr(&o));

    // batch form: one JSON line per record, in manifest order
    let o = run(&["predict", "--manifest", s(&manifest), "--cls", s(&covid), "--seg", s(&seg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&manifest).unwrap();
    let images: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    let records: Vec<String> = stdout(&o).lines().map(String::from).collect();
    assert_eq!(records.len(), images.len());
    for (r, i) in records.iter().zip(&images) {
        assert!(r.contains(i), "{r} vs {i}");
    }
}

#[test]
fn corrupt_checkpoint_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 2);
    let (cls, seg) = (dir.path().join("c.ckpt"), dir.path().join("s.ckpt"));
    biased_classifier(&cls, [0.0, 4.0, 0.0]);
    half_segmenter(&seg);
    let mut bytes = fs::read(&cls).unwrap();
    let n = bytes.len();
    bytes[n - 1] ^= 1;
    fs::write(&cls, bytes).unwrap();
    let img = dir.path().join("data/images/covid_0000.png");
    let o = run(&["predict", "--image", s(&img), "--cls", s(&cls), "--seg", s(&seg), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("checksum"));
    // segmentation file passed as classifier
    let o = run(&["predict", "--image", s(&img), "--cls", s(&seg), "--seg", s(&seg), "--out", s(dir.path())]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("expected classifier"));
}

#[test]
fn eval_writes_report_with_param_count() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 4);
    let (cls, seg) = (dir.path().join("c.ckpt"), dir.path().join("s.ckpt"));
    biased_classifier(&cls, [0.0, 4.0, 0.0]);
    half_segmenter(&seg);
    let report = dir.path().join("r.csv");
    let o = run(&["eval", "--manifest", s(&manifest), "--cls", s(&cls), "--seg", s(&seg), "--report", s(&report)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let params = ClassifierModel::<f32>::new(&WidthConfig::desk(2), 0).unwrap().param_count().total;
    assert!(stdout(&o).contains(&format!("param_count = {params}")));
    assert!(stdout(&o).contains("Accuracy (%)"));
    let csv = fs::read_to_string(&report).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].ends_with(",dice,iou,param_count"));
    // a constant COVID-19 prediction is right on a third of every split
    let acc = |row: &str| row.split(',').nth(1).unwrap().parse::<f64>().unwrap();
    assert!((acc(rows[1]) - 1.0 / 3.0).abs() < 1e-12);
    assert!((acc(rows[2]) - 1.0 / 3.0).abs() < 1e-12);
    assert!(rows[3].starts_with("difference,0,"));
    assert!(rows[1].ends_with(&format!(",{params}")));
}

#[test]
fn gradcam_auto_matches_explicit_and_flags_zero_maps() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 2);
    let img = dir.path().join("data/images/noncovid_0000.png");
    let mut m = ClassifierModel::<f32>::new(&WidthConfig::desk(2), 7).unwrap();
    m.mark_stats_initialized();
    let ckpt = dir.path().join("c.ckpt");
    save_checkpoint(&m, &meta(), &ckpt).unwrap();
    let auto = dir.path().join("auto.png");
    let o = run(&["gradcam", "--image", s(&img), "--cls", s(&ckpt), "--out", s(&auto)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let class = stdout(&o).split_whitespace().nth(1).unwrap().to_string();
    let explicit = dir.path().join("explicit.png");
    let o = run(&["gradcam", "--image", s(&img), "--cls", s(&ckpt), "--class", &class, "--out", s(&explicit)]);
    assert!(o.status.success());
    assert_eq!(fs::read(&auto).unwrap(), fs::read(&explicit).unwrap());

    let zero = dir.path().join("z.ckpt");
    biased_classifier(&zero, [0.0, 0.0, 0.0]);
    let o = run(&["gradcam", "--image", s(&img), "--cls", s(&zero), "--class", "1", "--out", s(&dir.path().join("z.png"))]);
    assert!(o.status.success());
    assert!(stderr(&o).contains("all zero"));

    let o = run(&["gradcam", "--image", s(&img), "--cls", s(&zero), "--class", "5", "--out", s(&dir.path().join("z.png"))]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["gradcam", "--image", s(&img), "--cls", s(&zero), "--layer", "enc9", "--out", s(&dir.path().join("z.png"))]);
    assert_eq!(o.status.code(), Some(2));
}
