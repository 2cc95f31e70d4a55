use posekit::data::{generate_sample, label_pose, Domain, GenerateConfig, LabelEntry, SatelliteModel3D};
use posekit::geometry::{CameraIntrinsics, Pose, Position3, UnitQuaternion};
use posekit::losses::position_loss;
use posekit::metrics::{esa_score, PoseEstimatePair};
use posekit::model::{HeadMode, Network};
use posekit::training::*;
use posekit::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn samples(n: usize, seed: u64, mode: HeadMode) -> Vec<Sample> {
    let cfg = GenerateConfig::new(n, seed, Domain::Synthetic);
    let model = SatelliteModel3D::default();
    let m = TrainConfig::desk(mode).model;
    (0..n)
        .map(|i| {
            let (label, img) = generate_sample(&cfg, &model, i).unwrap();
            Sample {
                image_id: label.filename.clone(),
                pose: label_pose(&label).unwrap(),
                image: prepare_image(&img, &m),
            }
        })
        .collect()
}

#[test]
fn position_only_step_decreases_position_loss() {
    let mut cfg = TrainConfig::desk(HeadMode::Regression);
    cfg.loss.lambda_ori = 0.0;
    let batch = samples(8, 11, HeadMode::Regression);
    let images: Vec<_> = batch.iter().map(|s| &s.image).collect();
    let poses: Vec<Pose> = batch.iter().map(|s| s.pose).collect();
    let mut net = Network::new(cfg.model.clone()).unwrap();

    let eval_position = |net: &mut Network| {
        let out = net.forward(&to_tensor(&images).unwrap(), true).unwrap();
        (0..poses.len())
            .map(|i| position_loss(Position3::from_array(out.position(i)), poses[i].position).unwrap())
            .sum::<f64>()
            / poses.len() as f64
    };
    let before = eval_position(&mut net.clone());
    let loss = train_step(&mut net, &images, &poses, &cfg, None, 0.01).unwrap();
    assert!((loss.position - before).abs() < 1e-5 * before.max(1.0));
    let after = eval_position(&mut net);
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn smoke_run_two_epochs() {
    let data = samples(64, 3, HeadMode::Softclass { bins: 4 });
    let (train_set, val_set) = data.split_at(52);
    let mut cfg = TrainConfig::desk(HeadMode::Softclass { bins: 4 }).with_epochs(2);
    cfg.batch_size = 16;
    let mut seen = Vec::new();
    let out = train(&cfg, train_set, val_set, &CameraIntrinsics::desk(), |r| seen.push(r.epoch)).unwrap();
    assert_eq!(seen, vec![0, 1]);
    assert_eq!(out.log.rows.len(), 2);
    for r in &out.log.rows {
        assert_eq!(r.lr, 0.01);
        for v in [r.train_loss, r.train_position, r.train_orientation, r.val_e_t, r.val_e_q, r.val_esa] {
            assert!(v.is_finite());
        }
    }
    assert!(out.best.epoch <= 1);
    assert_eq!(out.last.epoch, 1);
    let report = out.best_report;
    assert!(report.e_t_mean >= 0.0 && report.e_q_mean >= 0.0 && report.esa_score >= 0.0);
    assert_eq!(report.n_samples, 12);
}

#[test]
fn training_is_reproducible() {
    let data = samples(24, 5, HeadMode::Regression);
    let cfg = TrainConfig::desk(HeadMode::Regression).with_epochs(1);
    let k = CameraIntrinsics::desk();
    let a = train(&cfg, &data[..16], &data[16..], &k, |_| {}).unwrap();
    let b = train(&cfg, &data[..16], &data[16..], &k, |_| {}).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.last.state, b.last.state);
}

#[test]
fn untrained_model_is_at_random_baseline() {
    // Monte Carlo oracle for the angle between independent uniform rotations.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let draws: Vec<f64> = (0..200_000)
        .map(|_| {
            let a = posekit::data::uniform_quaternion(&mut rng);
            let b = posekit::data::uniform_quaternion(&mut rng);
            a.angular_distance(b).to_degrees()
        })
        .collect();
    let mu = draws.iter().sum::<f64>() / draws.len() as f64;
    let sd = (draws.iter().map(|d| (d - mu).powi(2)).sum::<f64>() / draws.len() as f64).sqrt();
    assert!((mu - 126.5).abs() < 0.5, "oracle mean {mu}");

    let n = 320;
    for mode in [HeadMode::Softclass { bins: 8 }, HeadMode::Regression] {
        let data = samples(n, 21, mode);
        let cfg = TrainConfig::desk(mode);
        let mut net = Network::new(cfg.model.clone()).unwrap();
        let grid = cfg.grid().unwrap();
        let report = evaluate(&mut net, &data, grid.as_ref()).unwrap();
        let bound = 3.0 * sd / (n as f64).sqrt();
        assert!(
            (report.e_q_mean - mu).abs() < bound,
            "{mode}: e_q {} vs {mu} +- {bound}",
            report.e_q_mean
        );
    }
}

#[test]
fn oracle_predictions_score_zero() {
    let data = samples(10, 8, HeadMode::Regression);
    let pairs: Vec<_> = data
        .iter()
        .map(|s| PoseEstimatePair::new(s.image_id.clone(), s.pose, s.pose))
        .collect();
    let r = esa_score(&pairs).unwrap();
    assert_eq!((r.e_t_mean, r.e_q_mean, r.esa_score), (0.0, 0.0, 0.0));
}

fn pose(z: f64) -> Pose {
    Pose::new(UnitQuaternion::identity(), Position3::new(0.0, 0.0, z))
}

fn labels(domains: &[(Domain, usize)]) -> Vec<LabelEntry> {
    let mut out = Vec::new();
    for &(d, n) in domains {
        for i in 0..n {
            out.push(LabelEntry::from_pose(format!("{}_{i}.png", d.name()), &pose(10.0), Some(d)));
        }
    }
    out
}

fn self_rows(labels: &[LabelEntry]) -> Vec<SubmissionRow> {
    labels
        .iter()
        .map(|l| SubmissionRow {
            image_id: l.filename.clone(),
            pose: posekit::data::label_pose(l).unwrap(),
        })
        .collect()
}

#[test]
fn self_scored_submission_has_undefined_g_factor() {
    let l = labels(&[(Domain::Synthetic, 3), (Domain::PseudoReal, 3)]);
    let s = score_submission(&self_rows(&l), &l).unwrap();
    assert_eq!(s.overall.esa_score, 0.0);
    assert_eq!(s.g_factor, GFactor::Undefined);

    let l = labels(&[(Domain::Synthetic, 3)]);
    let s = score_submission(&self_rows(&l), &l).unwrap();
    assert_eq!(s.g_factor, GFactor::NotApplicable);
}

#[test]
fn injected_domain_errors_give_published_ratio() {
    // one image per domain; position error 0 so E equals the orientation error in radians
    let l = labels(&[(Domain::Synthetic, 1), (Domain::PseudoReal, 1)]);
    let mut rows = self_rows(&l);
    rows[0].pose.orientation = UnitQuaternion::rot_x(0.2520);
    rows[1].pose.orientation = UnitQuaternion::rot_x(0.7868);
    let s = score_submission(&rows, &l).unwrap();
    assert!((s.per_domain[&Domain::Synthetic].esa_score - 0.2520).abs() < 1e-9);
    assert!((s.per_domain[&Domain::PseudoReal].esa_score - 0.7868).abs() < 1e-9);
    match s.g_factor {
        GFactor::Defined(g) => assert_eq!(format!("{g:.2}"), "3.12"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn submission_id_errors() {
    let l = labels(&[(Domain::Synthetic, 3)]);
    let mut rows = self_rows(&l);
    let dropped = rows.remove(1);
    match score_submission(&rows, &l) {
        Err(Error::MissingPrediction(ids)) => assert_eq!(ids, vec![dropped.image_id]),
        other => panic!("{other:?}"),
    }
    rows.push(SubmissionRow {
        image_id: "nope.png".into(),
        pose: pose(5.0),
    });
    assert!(matches!(score_submission(&rows, &l), Err(Error::UnknownId(id)) if id == "nope.png"));
}

#[test]
fn submission_text_round_trip() {
    let l = labels(&[(Domain::Synthetic, 2)]);
    let mut rows = self_rows(&l);
    rows[0].pose = Pose::new(UnitQuaternion::new(0.3, -0.1, 0.7, 0.2), Position3::new(0.123456789123, -1.5, 9.75));
    let text = write_submission(&rows);
    assert!(text.starts_with("image_id,qw,qx,qy,qz,tx,ty,tz\n"));
    let back = parse_submission(&text).unwrap();
    assert_eq!(back.len(), 2);
    let (a, b) = (rows[0].pose, back[0].pose);
    assert!(a.orientation.angular_distance(b.orientation) < 1e-7);
    assert!(a.position.distance(b.position) < 1e-7);
    assert_eq!(write_submission(&back), text);
}

#[test]
fn checkpoint_round_trip_and_prediction() {
    let dir = tempfile::tempdir().unwrap();
    let mode = HeadMode::Softclass { bins: 4 };
    let cfg = TrainConfig::desk(mode);
    let mut net = Network::new(cfg.model.clone()).unwrap();
    let ck = Checkpoint::from_network(&mut net, &cfg, 3, CameraIntrinsics::desk());
    let path = dir.path().join("model.ckpt");
    ck.save(&path).unwrap();
    assert!(sidecar_path(&path).exists());
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);

    let bytes = std::fs::read(&path).unwrap();
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 1], &path),
        Err(Error::ConfigMismatch(_))
    ));

    let imgs = dir.path().join("imgs");
    std::fs::create_dir(&imgs).unwrap();
    let data = samples(3, 4, mode);
    for s in &data {
        s.image.save_png(&imgs.join(&s.image_id)).unwrap();
    }
    std::fs::copy(imgs.join(&data[0].image_id), imgs.join("dup.png")).unwrap();
    let rows = predict_dir(&back, &imgs).unwrap();
    assert_eq!(rows.len(), 4);
    let dup = rows.iter().find(|r| r.image_id == "dup.png").unwrap();
    let orig = rows.iter().find(|r| r.image_id == data[0].image_id).unwrap();
    assert_eq!(dup.pose, orig.pose);
    for r in &rows {
        assert!((r.pose.orientation.norm() - 1.0).abs() < 1e-9);
    }
    parse_submission(&write_submission(&rows)).unwrap();
}

#[test]
fn evaluate_rejects_mismatched_camera() {
    let cfg = TrainConfig::desk(HeadMode::Regression);
    let mut net = Network::new(cfg.model.clone()).unwrap();
    let ck = Checkpoint::from_network(&mut net, &cfg, 0, CameraIntrinsics::desk());
    let square = CameraIntrinsics::with_size(200, 200);
    assert!(matches!(
        evaluate_checkpoint(&ck, &[], Some(&square)),
        Err(Error::ConfigMismatch(_))
    ));
}
