use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn camodiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_camodiff")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn version_names_checkpoint_format() {
    let o = camodiff(&["--version"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "camodiff 0.1.0 (checkpoint format 1)");
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(camodiff(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(camodiff(&[]).status.code(), Some(2));
    assert_eq!(camodiff(&["sample", "--steps", "ten"]).status.code(), Some(2));
}

#[test]
fn schedule_dump_prints_one_row_per_step() {
    let o = camodiff(&["schedule-dump", "--T", "10"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("t,"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 10);
    assert!(rows[0].starts_with("1,"));
    assert!(rows[9].starts_with("10,"));

    let o = camodiff(&["schedule-dump", "--T", "1000", "--respace", "50"]);
    assert_eq!(stdout(&o).lines().count(), 51);
}

#[test]
fn bad_schedule_is_a_config_error() {
    let o = camodiff(&["schedule-dump", "--T", "10", "--beta-start", "0.5", "--beta-end", "0.1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("ERROR config:"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "learning_rate = 1e-4\nwarmup = 10\n").unwrap();
    let o = camodiff(&["train", "--config", p(&cfg), "--data", p(dir.path()), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("ERROR config:") && err.contains("warmup"), "{err}");
}

#[test]
fn synth_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let o = camodiff(&["synth", "--count", "6", "--size", "32", "--seed", "3", "--out", p(&dir.path().join(name))]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for sub in ["Imgs", "GT"] {
        let mut names: Vec<_> = fs::read_dir(dir.path().join("a").join(sub)).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert_eq!(names.len(), 6);
        for n in names {
            assert_eq!(fs::read(dir.path().join("a").join(sub).join(&n)).unwrap(), fs::read(dir.path().join("b").join(sub).join(&n)).unwrap());
        }
    }
    assert_eq!(fs::read_to_string(dir.path().join("a/test.txt")).unwrap().lines().count(), 1);
}

#[test]
fn ground_truth_evaluated_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    assert!(camodiff(&["synth", "--count", "4", "--size", "32", "--out", p(&data)]).status.success());
    let report = dir.path().join("r.csv");
    let o = camodiff(&["eval", "--pred", p(&data.join("GT")), "--gt", p(&data.join("GT")), "--report", p(&report)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let mean = out.lines().find(|l| l.starts_with("MEAN")).unwrap();
    assert_eq!(mean, "MEAN,1.0000,1.0000,1.0000,1.0000,0.0000");
    let csv = fs::read_to_string(&report).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "image,s_alpha,f_w,f_m,e_m,mae");
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn eval_warns_about_unmatched_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    assert!(camodiff(&["synth", "--count", "3", "--size", "32", "--out", p(&data)]).status.success());
    let pred = dir.path().join("pred");
    fs::create_dir(&pred).unwrap();
    fs::copy(data.join("GT").join("synth_0000.png"), pred.join("synth_0000.png")).unwrap();
    let o = camodiff(&["eval", "--pred", p(&pred), "--gt", p(&data.join("GT"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stderr(&o).matches("WARN unmatched").count(), 2);
    fs::remove_file(pred.join("synth_0000.png")).unwrap();
    let o = camodiff(&["eval", "--pred", p(&pred), "--gt", p(&data.join("GT"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("ERROR dataset"), "{}", stderr(&o));
}

#[test]
fn train_then_sample_writes_masks_and_traces() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    assert!(camodiff(&["synth", "--count", "6", "--size", "32", "--out", p(&data)]).status.success());
    let cfg = dir.path().join("tiny.cfg");
    fs::write(
        &cfg,
        "# tiny network\nT = 40\nbatch_size = 2\nimage_size = 32\nmax_steps = 3\nencoder_widths = 4,4,8,8\ncond_width = 8\nunet_widths = 4,4,8,8,8\ntime_width = 8\ncheckpoint_interval = 2\n",
    )
    .unwrap();
    let run = dir.path().join("run");
    let o = camodiff(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run), "--progress", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(run.join("final.ckpt").is_file());
    assert!(run.join("checkpoint_000002.ckpt").is_file());
    assert_eq!(fs::read_to_string(run.join("loss.csv")).unwrap().lines().count(), 4);

    let pred = dir.path().join("pred");
    let ck = run.join("final.ckpt");
    let o = camodiff(&["sample", "--checkpoint", p(&ck), "--images", p(&data.join("Imgs")), "--out", p(&pred), "--steps", "5", "--trace", "40,20"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for stem in ["synth_0000", "synth_0005"] {
        let mask = image::open(pred.join(format!("{stem}.png"))).unwrap();
        assert_eq!((mask.width(), mask.height()), (32, 32));
        assert!(pred.join(format!("{stem}_t040.png")).is_file());
    }
    let o = camodiff(&["eval", "--pred", p(&pred), "--gt", p(&data.join("GT"))]);
    assert!(o.status.success(), "{}", stderr(&o));

    let again = dir.path().join("again");
    let o = camodiff(&["sample", "--checkpoint", p(&ck), "--images", p(&data.join("Imgs")), "--out", p(&again), "--steps", "5"]);
    assert!(o.status.success());
    assert_eq!(fs::read(pred.join("synth_0003.png")).unwrap(), fs::read(again.join("synth_0003.png")).unwrap());

    let o = camodiff(&["sample", "--checkpoint", p(&ck), "--images", p(&data.join("Imgs")), "--out", p(&again), "--steps", "41"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("ERROR config"), "{}", stderr(&o));
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = camodiff(&["sample", "--checkpoint", p(&dir.path().join("none.ckpt")), "--images", p(dir.path()), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("ERROR io"), "{}", stderr(&o));
}
