use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use posekit::data::{write_labels, Domain, LabelEntry};
use posekit::geometry::{Pose, Position3, UnitQuaternion};
use posekit::metrics::{DistanceTable, MetricsReport};
use posekit::model::{head_param_count, Head, HeadMode};
use posekit::training::{write_submission, SubmissionRow, TrainLog};

fn posekit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_posekit"))
        .args(args)
        .env_remove("POSEKIT_SEED")
        .output()
        .expect("spawn posekit")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
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

fn generate(dir: &Path, n: usize, seed: u64) {
    let o = posekit(&["generate", "--n", &n.to_string(), "--seed", &seed.to_string(), "--out", p(dir)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn generate_writes_images_manifest_and_config() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    generate(&d, 12, 7);
    let labels: Vec<LabelEntry> = serde_json::from_str(&fs::read_to_string(d.join("labels.json")).unwrap()).unwrap();
    assert_eq!(labels.len(), 12);
    for l in &labels {
        assert!(d.join(&l.filename).exists());
    }
    let cfg = fs::read_to_string(d.join("resolved_config.toml")).unwrap();
    assert!(cfg.contains("seed = 7") && cfg.contains("domain = \"synthetic\""));

    let again = t.path().join("again");
    generate(&again, 12, 7);
    assert_eq!(fs::read(d.join("labels.json")).unwrap(), fs::read(again.join("labels.json")).unwrap());
}

#[test]
fn seed_falls_back_to_environment() {
    let t = tempfile::tempdir().unwrap();
    let run = |dir: &str, seed: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_posekit"))
            .args(["generate", "--n", "3", "--out", p(&t.path().join(dir))])
            .env("POSEKIT_SEED", seed)
            .output()
            .unwrap();
        assert_eq!(code(&o), 0);
        fs::read_to_string(t.path().join(dir).join("resolved_config.toml")).unwrap()
    };
    assert!(run("a", "31").contains("seed = 31"));
    let o = Command::new(env!("CARGO_BIN_EXE_posekit"))
        .args(["generate", "--n", "3", "--seed", "5", "--out", p(&t.path().join("b"))])
        .env("POSEKIT_SEED", "31")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(fs::read_to_string(t.path().join("b/resolved_config.toml")).unwrap().contains("seed = 5"));
}

#[test]
fn usage_errors_exit_two() {
    let t = tempfile::tempdir().unwrap();
    let o = posekit(&["generate", "--n", "2", "--domain", "lunar", "--out", p(t.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("synthetic") && stderr(&o).contains("pseudo_real"));

    let o = posekit(&["train", "--data", p(&t.path().join("nope")), "--out", p(t.path())]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let o = posekit(&["evaluate", "--checkpoint", p(&t.path().join("x.ckpt")), "--data", p(t.path())]);
    assert_eq!(code(&o), 2);

    let cfg = t.path().join("bad.toml");
    fs::write(&cfg, "batch_size = 4\nlearning_speed = 3\n").unwrap();
    let o = posekit(&["generate", "--config", p(&cfg), "--out", p(t.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("learning_speed"));

    let o = posekit(&["frobnicate"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn help_lists_flags_with_defaults() {
    for (cmd, flags) in [
        ("generate", &["--n", "--seed", "--domain", "--distance-range", "--image-size", "--out", "--config"][..]),
        ("train", &["--profile", "--bins", "--epochs", "--batch-size", "--lambda-ori", "--delta", "--data", "--out"][..]),
        ("evaluate", &["--checkpoint", "--data", "--report-out", "--oracle"][..]),
        ("score", &["--submission", "--labels"][..]),
        ("plot", &["--report", "--kind", "--out", "--edges"][..]),
        ("predict", &["--checkpoint", "--images", "--out"][..]),
    ] {
        let o = posekit(&[cmd, "--help"]);
        assert_eq!(code(&o), 0);
        let h = stdout(&o);
        for f in flags {
            assert!(h.contains(f), "{cmd} --help lacks {f}");
        }
    }
    let h = stdout(&posekit(&["train", "--help"]));
    assert!(h.contains("[default: 32]") && h.contains("[default: 12]"));
}

fn train_once(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", p(data), "--out", p(out), "--epochs", "1", "--batch-size", "8"];
    args.extend_from_slice(extra);
    posekit(&args)
}

#[test]
fn train_evaluate_predict_score_plot() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    generate(&data, 30, 1);

    let run = t.path().join("run");
    let o = train_once(&data, &run, &["--bins", "16"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["last.ckpt", "best.ckpt", "last.config.json", "train_log.csv", "best_report.txt", "resolved_config.toml"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let resolved = fs::read_to_string(run.join("resolved_config.toml")).unwrap();
    assert!(resolved.contains("head = \"softclass\"") && resolved.contains("bins = 16"));
    let expected = head_param_count(128, Head::Orientation(HeadMode::Softclass { bins: 16 }));
    assert_eq!(expected, 4096 * 129);
    assert!(stdout(&o).contains(&format!("orientation head {expected} parameters")));
    let log = TrainLog::parse_csv(&fs::read_to_string(run.join("train_log.csv")).unwrap()).unwrap();
    assert_eq!(log.rows.len(), 1);

    // the resolved config reproduces the run
    let rerun = t.path().join("rerun");
    let o = posekit(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&rerun),
        "--config",
        p(&run.join("resolved_config.toml")),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(run.join("train_log.csv")).unwrap(),
        fs::read_to_string(rerun.join("train_log.csv")).unwrap()
    );

    let report = t.path().join("report.txt");
    let o = posekit(&[
        "evaluate",
        "--checkpoint",
        p(&run.join("last.ckpt")),
        "--data",
        p(&data),
        "--report-out",
        p(&report),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = MetricsReport::parse(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r.n_samples, 30);
    assert_eq!(r.metadata["head"], "softclass(16)");

    let oracle = t.path().join("oracle.txt");
    let o = posekit(&["evaluate", "--oracle", "--data", p(&data), "--report-out", p(&oracle)]);
    assert_eq!(code(&o), 0);
    let r = MetricsReport::parse(&fs::read_to_string(&oracle).unwrap()).unwrap();
    assert_eq!((r.e_t_mean, r.e_q_mean, r.esa_score), (0.0, 0.0, 0.0));

    let sub = t.path().join("sub.csv");
    let o = posekit(&["predict", "--checkpoint", p(&run.join("last.ckpt")), "--images", p(&data), "--out", p(&sub)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&sub).unwrap().lines().count(), 31);
    let o = posekit(&["score", "--submission", p(&sub), "--labels", p(&data.join("labels.json"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("G_factor=n/a"));

    let fig = t.path().join("fig/dist");
    let o = posekit(&["plot", "--report", p(&report), "--kind", "distance-error", "--out", p(&fig)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = DistanceTable::parse_csv(&fs::read_to_string(t.path().join("fig/dist.csv")).unwrap()).unwrap();
    assert_eq!(table.bins.len(), 3);
    assert_eq!(table.bins.iter().map(|b| b.count).sum::<usize>(), 30);
    assert!(fs::read_to_string(t.path().join("fig/dist.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn bins_study_table_has_monotone_counts() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    generate(&data, 12, 2);
    let mut args = vec!["plot".to_string()];
    for n in [16, 8, 12] {
        let out = t.path().join(format!("n{n}"));
        let o = train_once(&data, &out, &["--bins", &n.to_string(), "--max-train-images", "4"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        args.push("--report".into());
        args.push(out.join("best_report.txt").to_str().unwrap().into());
    }
    let prefix = t.path().join("bins");
    args.extend(["--kind".into(), "bins-study".into(), "--out".into(), p(&prefix).into()]);
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = posekit(&argv);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(t.path().join("bins.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let bins: Vec<&str> = rows.iter().map(|r| r[1]).collect();
    assert_eq!(bins, ["8", "12", "16"]);
    let heads: Vec<usize> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    assert_eq!(heads, [512 * 129, 1728 * 129, 4096 * 129]);
    let totals: Vec<usize> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(totals.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(totals[1] - totals[0], (1728 - 512) * 129);
}

#[test]
fn plot_of_empty_report_fails() {
    let t = tempfile::tempdir().unwrap();
    let empty = t.path().join("empty.txt");
    fs::write(&empty, "").unwrap();
    let o = posekit(&["plot", "--report", p(&empty), "--kind", "distance-error", "--out", p(&t.path().join("x"))]);
    assert_eq!(code(&o), 1);
    let o = posekit(&["plot", "--report", p(&t.path().join("gone.txt")), "--kind", "bins-study", "--out", p(t.path())]);
    assert_eq!(code(&o), 2);
}

fn two_domain_case(dir: &Path, e_syn: f64, e_real: f64) -> (std::path::PathBuf, std::path::PathBuf) {
    let gt = Pose::new(UnitQuaternion::identity(), Position3::new(0.5, -0.2, 9.0));
    let labels = vec![
        LabelEntry::from_pose("s.png", &gt, Some(Domain::Synthetic)),
        LabelEntry::from_pose("r.png", &gt, Some(Domain::PseudoReal)),
    ];
    let rows = vec![
        SubmissionRow {
            image_id: "s.png".into(),
            pose: Pose::new(UnitQuaternion::rot_y(e_syn), gt.position),
        },
        SubmissionRow {
            image_id: "r.png".into(),
            pose: Pose::new(UnitQuaternion::rot_y(e_real), gt.position),
        },
    ];
    let l = dir.join("labels.json");
    let s = dir.join("sub.csv");
    write_labels(&l, &labels).unwrap();
    fs::write(&s, write_submission(&rows)).unwrap();
    (s, l)
}

#[test]
fn score_prints_published_g_factor() {
    let t = tempfile::tempdir().unwrap();
    let (s, l) = two_domain_case(t.path(), 0.0571, 0.1555);
    let o = posekit(&["score", "--submission", p(&s), "--labels", p(&l)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("G_factor=2.72"), "{}", stdout(&o));

    let (s, l) = two_domain_case(t.path(), 0.0, 0.0);
    let o = posekit(&["score", "--submission", p(&s), "--labels", p(&l)]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.contains("E=0.000000") && out.contains("G_factor=undefined"), "{out}");
}

#[test]
fn malformed_submission_reports_line() {
    let t = tempfile::tempdir().unwrap();
    let (s, l) = two_domain_case(t.path(), 0.1, 0.2);
    let mut text = fs::read_to_string(&s).unwrap();
    text.push_str("x.png,1,0,zero,0,0,0,1\n");
    fs::write(&s, text).unwrap();
    let o = posekit(&["score", "--submission", p(&s), "--labels", p(&l)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("line 4"), "{}", stderr(&o));
}
