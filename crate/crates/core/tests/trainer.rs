use diffkit::io::encode_checkpoint;
use diffkit::{OptimState, ParamSet, Tensor};
use occ_core::classes::{CAR, EMPTY};
use occ_core::occnets::NetConfig;
use occ_core::par::default_exec;
use occ_core::projection::{DepthBins, GridSpec};
use occ_core::trainer::*;
use sha2::{Digest, Sha256};

fn tiny_net() -> NetConfig {
    NetConfig {
        grid: GridSpec::new([-8.0, -8.0, -2.0, 8.0, 8.0, 2.0], 1.0).unwrap(),
        image_channels: 4,
        image_layers: 2,
        cam_channels: 8,
        lidar_channels: 8,
        fused_channels: 8,
        encoder_blocks: 1,
        occ_channels: 4,
        depth: DepthBins { count: 8, min: 1.0, max: 12.0 },
        ..Default::default()
    }
}

fn tiny(train: usize, epochs: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        teacher: tiny_net(),
        student: tiny_net(),
        epochs,
        fractions: vec![0.5, 1.0],
        seeds: vec![0, 1],
        ..Default::default()
    };
    cfg.data.train_scenes = train;
    cfg.data.val_scenes = 2;
    cfg
}

fn dataset(cfg: &ExperimentConfig) -> Dataset {
    generate_dataset(default_exec(), &cfg.data, &cfg.teacher.grid).unwrap()
}

fn digest(p: &ParamSet) -> Vec<u8> {
    Sha256::digest(encode_checkpoint(p).unwrap()).to_vec()
}

fn strip_time(mut r: RunReport) -> RunReport {
    r.wall_time_s = 0.0;
    r
}

#[test]
fn label_fraction_selects_whole_scenes() {
    let l = labeled_scenes(10, 0.4, 3).unwrap();
    assert_eq!(l.iter().filter(|v| **v).count(), 4);
    assert_eq!(labeled_scenes(10, 0.05, 3).unwrap().iter().filter(|v| **v).count(), 1);
    assert_eq!(labeled_scenes(7, 1.0, 3).unwrap(), vec![true; 7]);
    let small = labeled_scenes(50, 0.1, 9).unwrap();
    let big = labeled_scenes(50, 0.4, 9).unwrap();
    assert!(small.iter().zip(&big).all(|(s, b)| !s || *b));
    for bad in [0.0, -0.1, 1.5] {
        assert!(matches!(labeled_scenes(10, bad, 0), Err(occ_core::Error::Config(_))));
    }
}

#[test]
fn empty_labeled_set_is_rejected() {
    let cfg = tiny(2, 1);
    let data = dataset(&cfg);
    let r = train_teacher(&data, &cfg, &[false, false], 0);
    assert!(matches!(r, Err(occ_core::Error::Config(_))));
}

#[test]
fn teacher_training_is_reproducible() {
    let cfg = tiny(3, 2);
    let data = dataset(&cfg);
    let labeled = vec![true; 3];
    let (a, ra) = train_teacher(&data, &cfg, &labeled, 5).unwrap();
    let (b, rb) = train_teacher(&data, &cfg, &labeled, 5).unwrap();
    assert_eq!(encode_checkpoint(&a.params).unwrap(), encode_checkpoint(&b.params).unwrap());
    assert_eq!(strip_time(ra.clone()), strip_time(rb));
    assert_eq!(ra.epoch_loss.len(), 2);
    assert!((0.0..=1.0).contains(&ra.miou));
}

#[test]
fn invisible_labels_never_reach_the_loss() {
    let cfg = tiny(3, 2);
    let data = dataset(&cfg);
    let mut edited = data.clone();
    let mut changed = 0;
    for s in &mut edited.train {
        for (l, &vis) in s.grid.labels.iter_mut().zip(&s.grid.visibility) {
            if !vis {
                *l = if *l == EMPTY { CAR } else { EMPTY };
                changed += 1;
            }
        }
    }
    assert!(changed > 0);
    let labeled = vec![true; 3];
    let (a, _) = train_teacher(&data, &cfg, &labeled, 1).unwrap();
    let (b, _) = train_teacher(&edited, &cfg, &labeled, 1).unwrap();
    assert_eq!(digest(&a.params), digest(&b.params));
    let (c, _) = train_student(&data, &cfg, &labeled, 1, None).unwrap();
    let (d, _) = train_student(&edited, &cfg, &labeled, 1, None).unwrap();
    assert_eq!(digest(&c.params), digest(&d.params));
}

#[test]
fn unlabeled_scenes_get_distillation_only() {
    let cfg = tiny(4, 1);
    let data = dataset(&cfg);
    let labeled = vec![true, false, true, false];
    let (teacher, _) = train_teacher(&data, &cfg, &labeled, 2).unwrap();
    let before = digest(&teacher.params);

    let (_, rep, log) = train_student_logged(&data, &cfg, &labeled, 2, Some(&teacher)).unwrap();
    assert_eq!(digest(&teacher.params), before);
    assert_eq!(rep.model, ModelKind::Distilled);
    assert_eq!(log.len(), 4);
    for e in &log {
        assert_eq!(e.labeled, labeled[e.scene]);
        assert!(e.distill > 0.0);
        if !e.labeled {
            assert_eq!(e.supervised, 0.0);
        } else {
            assert!(e.supervised > 0.0);
        }
    }

    let (_, rep, log) = train_student_logged(&data, &cfg, &labeled, 2, None).unwrap();
    assert_eq!(rep.model, ModelKind::Scratch);
    assert_eq!(log.len(), 2);
    assert!(log.iter().all(|e| e.labeled && e.distill == 0.0));
}

#[test]
fn without_teacher_full_labels_is_plain_supervision() {
    let cfg = tiny(3, 1);
    let data = dataset(&cfg);
    let (_, _, log) = train_student_logged(&data, &cfg, &[true; 3], 4, None).unwrap();
    let mut scenes: Vec<usize> = log.iter().map(|e| e.scene).collect();
    scenes.sort();
    assert_eq!(scenes, vec![0, 1, 2]);
    assert!(log.iter().all(|e| e.supervised > 0.0 && e.distill == 0.0));
}

#[test]
fn mismatched_teacher_grid_is_rejected() {
    let cfg = tiny(2, 1);
    let data = dataset(&cfg);
    let coarse = NetConfig { grid: GridSpec::new([-8.0, -8.0, -2.0, 8.0, 8.0, 2.0], 2.0).unwrap(), ..tiny_net() };
    let other = ExperimentConfig { teacher: coarse.clone(), student: coarse, ..cfg.clone() };
    let (teacher, _) = train_teacher(&dataset(&other), &other, &[true, true], 0).unwrap();
    let r = train_student(&data, &cfg, &[true, true], 0, Some(&teacher));
    assert!(matches!(r, Err(occ_core::Error::Config(_))));
}

#[test]
fn single_scene_loss_falls_over_ten_epochs() {
    let mut cfg = tiny(1, 10);
    cfg.flip_aug = false;
    let data = dataset(&cfg);
    let (_, rep) = train_teacher(&data, &cfg, &[true], 0).unwrap();
    assert_eq!(rep.epoch_loss.len(), 10);
    assert!(rep.epoch_loss[9] < rep.epoch_loss[0], "{:?}", rep.epoch_loss);
}

fn constant_params(v: f32) -> ParamSet {
    ParamSet::from_parts(vec!["w".into()], vec![Tensor::full(&[3], v)]).unwrap()
}

#[test]
fn ema_follows_the_closed_form() {
    let grads = [Tensor::full(&[3], 1.0)];
    for d in [0.0f32, 1.0, 0.7] {
        let mut p = constant_params(2.0);
        let mut st = OptimState::sgd(&p, 0.5).with_ema(&p, d);
        st.step(&mut p, &grads).unwrap();
        st.step(&mut p, &grads).unwrap();
        // live weights 2.0, 1.5, 1.0
        let (w0, w1, w2) = (2.0f32, 1.5f32, 1.0f32);
        let want = d * d * w0 + d * (1.0 - d) * w1 + (1.0 - d) * w2;
        let shadow = ema_apply(&st, &p).unwrap();
        for &v in shadow.tensors()[0].data() {
            assert!((v - want).abs() < 1e-6, "decay {d}: {v} vs {want}");
        }
        assert_eq!(p.tensors()[0].data(), &[1.0; 3]);
    }
    let p = constant_params(1.0);
    let st = OptimState::sgd(&p, 0.1);
    assert!(matches!(ema_apply(&st, &p), Err(occ_core::Error::Contract(_))));
}

#[test]
fn grid_emits_three_runs_per_fraction_and_seed() {
    let cfg = tiny(2, 1);
    let data = dataset(&cfg);
    let reports = run_label_efficiency(&data, &cfg).unwrap();
    assert_eq!(reports.len(), cfg.fractions.len() * cfg.seeds.len() * 3);
    let table = efficiency_table(&reports).unwrap();
    assert_eq!(table.len(), 2);
    assert!(table.iter().all(|r| r.seeds == 2));
    assert_eq!(table_csv(&table).lines().count(), 3);
    assert_eq!(runs_csv(&reports).lines().count(), reports.len() + 1);
}

fn synthetic(model: ModelKind, fraction: f64, seed: u64, miou: f64) -> RunReport {
    RunReport {
        model,
        fraction,
        seed,
        labeled_scenes: 1,
        epoch_loss: vec![1.0],
        per_class_iou: vec![Some(miou)],
        miou,
        geo_iou: None,
        config_hash: String::new(),
        wall_time_s: 1.0,
    }
}

#[test]
fn table_rows_follow_the_fraction_schema() {
    let fractions = [1.0, 0.05, 0.4, 0.1, 0.8, 0.2, 0.6];
    let mut reports = Vec::new();
    for &f in &fractions {
        for seed in 0..3 {
            reports.push(synthetic(ModelKind::Teacher, f, seed, f));
            reports.push(synthetic(ModelKind::Scratch, f, seed, f / 2.0));
            reports.push(synthetic(ModelKind::Distilled, f, seed, f / 2.0 + seed as f64 * 0.01));
        }
    }
    let table = efficiency_table(&reports).unwrap();
    let labels: Vec<String> = table_csv(&table).lines().skip(1).map(|l| l.split(',').next().unwrap().to_string()).collect();
    assert_eq!(labels, ["5%", "10%", "20%", "40%", "60%", "80%", "100%"]);
    assert!((table[0].distilled - (0.025 + 0.01)).abs() < 1e-12);
    assert_eq!(series_csv(&table).lines().count(), 1 + 3 * 7);

    reports.pop();
    assert!(matches!(efficiency_table(&reports), Err(occ_core::Error::Config(_))));
}

#[test]
fn config_round_trips_and_overrides() {
    let cfg = ExperimentConfig::default();
    let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    let mut doc = serde_json::to_value(&cfg).unwrap();
    apply_override(&mut doc, "epochs=3").unwrap();
    apply_override(&mut doc, "optim.lr=0.01").unwrap();
    let edited: ExperimentConfig = serde_json::from_value(doc).unwrap();
    assert_eq!(edited.epochs, 3);
    assert_eq!(edited.optim.lr, 0.01);
    assert_ne!(edited.hash().unwrap(), cfg.hash().unwrap());
    let bad = ExperimentConfig { label_fraction: 0.0, ..cfg };
    assert!(matches!(bad.validate(), Err(occ_core::Error::Config(_))));
}
