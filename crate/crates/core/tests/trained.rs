use std::process::Command;
use std::sync::OnceLock;

use imucoco::body_model::{build_canonical_body, BodyConfig, BodyModel, JOINT_COUNT};
use imucoco::checkpoint::model_fingerprint;
use imucoco::eval::{conventional_devices, evaluate_devices, joint_devices};
use imucoco::matchmaker::{assign_devices, build_loss_table, nearest_vertex, DeviceSource, LossTable};
use imucoco::motion_gen::{desk_corpus, generate_motion, MotionKind};
use imucoco::net::{evaluate_node, ForwardOptions, ModelParams, NetConfig};
use imucoco::trainer::{
    mean_alignment_loss, phase1_eval_loss, prepare_corpus, train_phase1, train_phase2, PreparedSequence, TrainConfig,
    TrainState,
};
use imucoco::vimu_synth::{joint_placement_point, synthesize_joint_imu, PlacementCoordinate};

struct Trained {
    body: BodyModel,
    model: ModelParams,
    held: Vec<PreparedSequence>,
    table: LossTable,
}

fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let body = build_canonical_body(&BodyConfig::default()).unwrap();
        let corpus = prepare_corpus(&body, &desk_corpus(0, 4.0).unwrap()).unwrap();
        let cfg = TrainConfig {
            plateau_window: 0,
            lambda_align: 10.0,
            ..TrainConfig::default()
        };
        let init = ModelParams::init(&NetConfig::tiny(), cfg.seed).unwrap();
        let (p1, _) = train_phase1(&TrainState::fresh(init), &body, &corpus, &cfg).unwrap();
        let (p2, _) = train_phase2(&p1, &body, &corpus, &cfg).unwrap();
        let model = p2.model;
        let held = prepare_corpus(&body, &desk_corpus(100, 2.0).unwrap()).unwrap();
        let table = build_loss_table(&model, &model_fingerprint(&model), &body, &held, 8).unwrap();
        Trained {
            body,
            model,
            held,
            table,
        }
    })
}

#[test]
fn phase1_halves_loss_on_idle_and_walk() {
    let body = build_canonical_body(&BodyConfig::default()).unwrap();
    let motions: Vec<_> = [(MotionKind::Idle, 0), (MotionKind::Walk, 1), (MotionKind::Idle, 2), (MotionKind::Walk, 3)]
        .iter()
        .map(|&(k, s)| generate_motion(s, 4.0, k).unwrap())
        .collect();
    let corpus = prepare_corpus(&body, &motions).unwrap();
    let cfg = TrainConfig {
        phase1_steps: 200,
        plateau_window: 0,
        ..TrainConfig::default()
    };
    let net = NetConfig::tiny();
    assert_eq!(net.d_h, 8);
    let init = ModelParams::init(&net, 0).unwrap();
    let before = phase1_eval_loss(&init, &body, &corpus, &cfg).unwrap().total;
    let (st, log) = train_phase1(&TrainState::fresh(init), &body, &corpus, &cfg).unwrap();
    assert_eq!(log.len(), 200);
    let after = phase1_eval_loss(&st.model, &body, &corpus, &cfg).unwrap().total;
    assert!(after <= 0.5 * before, "{before} -> {after}");
}

#[test]
fn alignment_is_better_at_the_joint_placement() {
    let t = trained();
    let b = &t.body;
    for j in [0, 4, 15, 18, 21] {
        let target = joint_placement_point(b, j);
        let near = nearest_vertex(b, target).unwrap();
        let far = (0..b.vertex_count())
            .max_by(|&x, &y| {
                let dx = (b.mesh.vertices_rest[x] - target).norm();
                let dy = (b.mesh.vertices_rest[y] - target).norm();
                dx.total_cmp(&dy)
            })
            .unwrap();
        let a_near = mean_alignment_loss(&t.model, b, &t.held, &[(j, near)]).unwrap();
        let a_far = mean_alignment_loss(&t.model, b, &t.held, &[(j, far)]).unwrap();
        assert!(a_near < a_far, "joint {j}: near {a_near} far {a_far}");
    }
}

#[test]
fn moving_placement_changes_trained_features() {
    let t = trained();
    let motion = generate_motion(8, 1.0, MotionKind::ArmSwing).unwrap();
    let track = synthesize_joint_imu(&t.body, &motion, 18).unwrap();
    let mut moved = track.clone();
    moved.placement = PlacementCoordinate::at_vertex(&t.body, 900);
    let a = evaluate_node(&t.model, 18, &track, &t.body, ForwardOptions::default()).unwrap();
    let b = evaluate_node(&t.model, 18, &moved, &t.body, ForwardOptions::default()).unwrap();
    assert_ne!(a.z, b.z);
}

#[test]
fn idle_features_settle() {
    let t = trained();
    let motion = generate_motion(0, 2.0, MotionKind::Idle).unwrap();
    for j in [0, 7, 18] {
        let track = synthesize_joint_imu(&t.body, &motion, j).unwrap();
        let z = evaluate_node(&t.model, j, &track, &t.body, ForwardOptions::default()).unwrap().z;
        let n = z.rows();
        let steps: Vec<f64> = (n - 31..n - 1)
            .map(|r| {
                z.row_slice(r + 1)
                    .iter()
                    .zip(z.row_slice(r))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let early: f64 = steps[..10].iter().sum();
        let late: f64 = steps[20..].iter().sum();
        assert!(late <= early, "joint {j}: {early} -> {late}");
        assert!(steps[29] < 1e-3, "joint {j}: last step {}", steps[29]);
    }
}

#[test]
fn conventional_assignment_matches_exhaustive_argmin() {
    let t = trained();
    let set = conventional_devices(&t.body).unwrap();
    let got = assign_devices(&t.table, &t.body, &set).unwrap();
    for j in 0..JOINT_COUNT {
        let mut best = (f64::INFINITY, usize::MAX);
        for d in &set.devices {
            let DeviceSource::Vertex(v) = d.source else {
                panic!("conventional devices sit on vertices")
            };
            let l = t.table.get(j, v);
            if l < best.0 {
                best = (l, d.id);
            }
        }
        assert_eq!(got[j], best.1, "joint {j}");
    }
}

#[test]
fn idle_pose_stays_near_tpose() {
    let t = trained();
    let idle = prepare_corpus(&t.body, &[generate_motion(5, 2.0, MotionKind::Idle).unwrap()]).unwrap();
    let (gae, _) = evaluate_devices(
        &t.model,
        &t.body,
        &t.table,
        &idle,
        &joint_devices(&t.body),
        ForwardOptions::default(),
    )
    .unwrap();
    assert!(gae <= 15.0, "{gae}");
}

#[test]
fn cli_pipeline_reports_gae() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("run.cfg"),
        "d_in = 8\nd_h = 8\nd_e = 4\nn_freq = 2\nkr_hidden = 8\npr_hidden = 16\nphase1_steps = 3\nphase2_steps = 24\nbptt_window = 32\n",
    )
    .unwrap();
    std::fs::write(d.join("devices.txt"), "0 0 0 0\n1 0.6 0.45 0\n").unwrap();
    let steps: [&[&str]; 8] = [
        &["genmotion", "--kind", "squat", "--seconds", "1", "--out", "m.motion"],
        &["synth", "--motion", "m.motion", "--devices", "devices.txt", "--out", "tracks"],
        &["train", "--config", "run.cfg", "--phase", "1", "--motion", "m.motion", "--out", "p1.ckpt"],
        &["train", "--config", "run.cfg", "--phase", "2", "--init", "p1.ckpt", "--motion", "m.motion", "--out", "p2.ckpt"],
        &["losstable", "--checkpoint", "p2.ckpt", "--motion", "m.motion", "--stride", "64", "--out", "t.table"],
        &["assign", "--checkpoint", "p2.ckpt", "--table", "t.table", "--devices", "devices.txt", "--out", "assign.txt"],
        &[
            "infer", "--checkpoint", "p2.ckpt", "--table", "t.table", "--devices", "devices.txt", "--tracks",
            "tracks/device_0.imutrack", "tracks/device_1.imutrack", "--out", "est.pose",
        ],
        &["eval", "--pose", "est.pose", "--motion", "m.motion", "--out", "report.txt"],
    ];
    for args in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_imucoco")).args(args).current_dir(d).output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let report = std::fs::read_to_string(d.join("report.txt")).unwrap();
    let mut lines = report.lines();
    assert_eq!(lines.next(), Some("# placement gae_deg final_translation_error_m"));
    let row: Vec<&str> = lines.next().unwrap().split_whitespace().collect();
    assert_eq!(row[0], "estimate");
    let gae: f64 = row[1].parse().unwrap();
    assert!((0.0..=180.0).contains(&gae));
    assert_eq!(std::fs::read_to_string(d.join("assign.txt")).unwrap().lines().count(), 25);

    let bad = Command::new(env!("CARGO_BIN_EXE_imucoco"))
        .args(["infer", "--checkpoint", "missing.ckpt", "--table", "t.table", "--devices", "devices.txt", "--tracks", "x"])
        .current_dir(d)
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}
