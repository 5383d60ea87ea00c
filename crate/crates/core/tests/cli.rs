use std::path::Path;
use std::process::{Command, Output};

use colocam::geometry::Frame;
use colocam::io;

fn colocam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_colocam"))
        .args(args)
        .output()
        .unwrap()
}

fn p(x: &Path) -> String {
    x.display().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_dataset(root: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let synth = root.join("synth.cfg");
    let train = root.join("train.cfg");
    std::fs::write(
        &synth,
        "# tiny clips\nframes=6\nheight=24\nwidth=24\nextent=4\n",
    )
    .unwrap();
    std::fs::write(&train, "epochs=2\nn_frames=2\n").unwrap();
    (synth, train)
}

#[test]
fn gen_train_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let (synth, train) = small_dataset(tmp.path());
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let o = colocam(&[
        "gen",
        "--config",
        &p(&synth),
        "--out",
        &p(&data),
        "--videos",
        "2",
        "--seed",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(data.join("manifest.txt").exists());
    assert!(data.join("video_000/frames/0005.ppm").exists());

    let o = colocam(&[
        "train",
        "--data",
        &p(&data),
        "--out",
        &p(&run),
        "--config",
        &p(&train),
        "--threads",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = std::fs::read_to_string(run.join("video_001/log.csv")).unwrap();
    assert!(log.starts_with("step,epoch,z,H_p,R,R_s,R_c_raw,R_c_scaled,total,wall_ms\n"));
    assert_eq!(log.lines().count(), 1 + 2 * 6);

    let o = colocam(&["eval", "--run", &p(&run), "--data", &p(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = std::fs::read_to_string(run.join("corloc.csv")).unwrap();
    let mean: f64 = summary
        .lines()
        .last()
        .unwrap()
        .strip_prefix("mean,")
        .unwrap()
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&mean));
    let frames = std::fs::read_to_string(run.join("frames.csv")).unwrap();
    assert_eq!(frames.lines().next(), Some("video,frame_id,iou,hit"));
    assert_eq!(frames.lines().count(), 1 + 12);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("corloc "));
}

#[test]
fn bench_emits_one_row_per_size() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bench.csv");
    let o = colocam(&[
        "bench",
        "--sizes",
        "1,2,4,8,16",
        "--hw",
        "64x64",
        "--repeats",
        "1",
        "--out",
        &p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "n,wall_ms");
    assert_eq!(lines.len(), 6);
    for (line, n) in lines[1..].iter().zip([1, 2, 4, 8, 16]) {
        let (a, b) = line.split_once(',').unwrap();
        assert_eq!(a.parse::<usize>().unwrap(), n);
        assert!(b.parse::<f64>().unwrap() >= 0.0);
    }
}

#[test]
fn usage_errors_and_missing_files_exit_2() {
    assert_eq!(colocam(&[]).status.code(), Some(2));
    assert_eq!(colocam(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(colocam(&["bench", "--hw", "64by64"]).status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let o = colocam(&["eval", "--run", &p(&missing), "--data", &p(&missing)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("manifest.txt"), "{}", stderr(&o));
}

#[test]
fn bad_config_reports_its_offset() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "frames=4\nnot a pair\n").unwrap();
    let o = colocam(&[
        "gen",
        "--config",
        &p(&cfg),
        "--out",
        &p(&tmp.path().join("d")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("kind=parse") && err.contains("9"), "{err}");
}

#[test]
fn truncated_frame_names_missing_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let frame = Frame::new(2, 2, vec![[10.0, 20.0, 30.0]; 4]).unwrap();
    let mut bytes = io::write_frame(&frame);
    bytes.truncate(bytes.len() - 5);
    let fpath = tmp.path().join("f.ppm");
    std::fs::write(&fpath, &bytes).unwrap();
    let mpath = tmp.path().join("m.pgm");
    std::fs::write(&mpath, io::write_map(&[0.5; 4], 2, 2).unwrap()).unwrap();
    let o = colocam(&[
        "filter",
        "--frame",
        &p(&fpath),
        "--map",
        &p(&mpath),
        "--out",
        &p(&tmp.path().join("o.pgm")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains("missing 5 of 12 bytes"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn filter_smooths_a_map() {
    let tmp = tempfile::tempdir().unwrap();
    let (h, w) = (8, 8);
    let frame = Frame::new(h, w, vec![[100.0, 100.0, 100.0]; h * w]).unwrap();
    let mut map = vec![0.0; h * w];
    map[27] = 1.0;
    let (fpath, mpath, out) = (
        tmp.path().join("f.ppm"),
        tmp.path().join("m.pgm"),
        tmp.path().join("o.pgm"),
    );
    std::fs::write(&fpath, io::write_frame(&frame)).unwrap();
    std::fs::write(&mpath, io::write_map(&map, h, w).unwrap()).unwrap();
    let o = colocam(&[
        "filter",
        "--frame",
        &p(&fpath),
        "--map",
        &p(&mpath),
        "--out",
        &p(&out),
        "--spatial",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (oh, ow, smoothed) = io::read_map(&std::fs::read(out).unwrap()).unwrap();
    assert_eq!((oh, ow), (h, w));
    assert!(smoothed[27] < 1.0 && smoothed[27] > smoothed[28]);
    assert!(smoothed[28] > 0.0 && smoothed[0] < smoothed[28]);
}

#[test]
fn gradcheck_passes_and_reports_each_loss() {
    let o = colocam(&["gradcheck", "--instances", "2", "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert_eq!(
        out.lines().next(),
        Some("loss,instances,checked,max_rel_error")
    );
    assert_eq!(out.lines().count(), 6);
}
