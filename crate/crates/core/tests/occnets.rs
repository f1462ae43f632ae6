mod support;

use diffkit::{reference, Exec, Graph, ParamSet, Tensor};
use occ_core::evalkit::{decompose_regions, project_regions_bev, ClassMap};
use occ_core::losses::{distill_bev, distill_occ, DistillConfig};
use occ_core::occnets::*;
use support::nets::*;
use occ_core::projection::{pillarize, DepthBins, GridSpec, Pillars};
use occ_core::scenegen::{CameraSpec, SensorRig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_cfg() -> NetConfig {
    NetConfig {
        grid: GridSpec::new([-8.0, -8.0, -2.0, 8.0, 8.0, 2.0], 1.0).unwrap(),
        depth: DepthBins { count: 8, min: 1.0, max: 12.0 },
        pixel_stride: 1,
        ..Default::default()
    }
}

fn small_cams(n: usize) -> Vec<CameraSpec> {
    (0..n)
        .map(|k| CameraSpec::looking(k as f64 * 2.0 * std::f64::consts::PI / n as f64, [0.0, 0.0, 0.5], 6.0, 6.0, 8, 8))
        .collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn zero_params(params: &mut ParamSet, keep: impl Fn(&str) -> bool) {
    let names = params.names().to_vec();
    for (name, t) in names.iter().zip(params.tensors_mut()) {
        if !keep(name) {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[test]
fn channel_to_height_index_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (h, c) in [(1, 2), (4, 3), (16, 17)] {
        let (w, l) = (3, 2);
        let planes: Vec<f32> = (0..h * c).flat_map(|k| std::iter::repeat_n(k as f32, w * l)).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[h * c, w, l], planes).unwrap()).unwrap();
        let y = channel_to_height(&mut g, x, c).unwrap();
        assert_eq!(g.shape(y), &[w, l, h, c]);
        let out = g.value(y).data();
        for i in 0..w * l {
            for hh in 0..h {
                for cc in 0..c {
                    assert_eq!(out[(i * h + hh) * c + cc], (hh * c + cc) as f32);
                }
            }
        }

        let r = random_tensor(&mut rng, &[h * c, w, l], -1.0, 1.0);
        let x = g.constant(r.clone()).unwrap();
        let y = channel_to_height(&mut g, x, c).unwrap();
        let back = height_to_channel(&mut g, y).unwrap();
        assert_eq!(g.value(back), &r);
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[7, 2, 2])).unwrap();
    assert!(matches!(channel_to_height(&mut g, x, 3), Err(occ_core::Error::Config(_))));
}

#[test]
fn zeroed_encoder_lifts_to_zero() {
    let cfg = small_cfg();
    let view = CameraView::new(&cfg, &small_cams(2)).unwrap();
    let mut t = Teacher::new(cfg.clone(), 1).unwrap();
    zero_params(&mut t.params, |n| !n.starts_with("cam.enc"));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let images = random_tensor(&mut rng, &[2, 3, 8, 8], 0.0, 1.0);
    let mut g = Graph::new();
    let vars = t.params.attach_frozen(&mut g).unwrap();
    let img = g.constant(images).unwrap();
    let bev = image_branch(&mut g, Bound::new(&t.params, &vars), "cam", img, &view, &cfg).unwrap();
    assert!(g.value(bev).data().iter().all(|&v| v == 0.0));
}

#[test]
fn image_branch_shape_for_any_camera_count() {
    let cfg = small_cfg();
    let t = Teacher::new(cfg.clone(), 2).unwrap();
    let [w, l, _] = cfg.dims().unwrap();
    for n in [1, 3] {
        let view = CameraView::new(&cfg, &small_cams(n)).unwrap();
        let mut g = Graph::new();
        let vars = t.params.attach_frozen(&mut g).unwrap();
        let img = g.constant(Tensor::full(&[n, 3, 8, 8], 0.5)).unwrap();
        let bev = image_branch(&mut g, Bound::new(&t.params, &vars), "cam", img, &view, &cfg).unwrap();
        assert_eq!(g.shape(bev), &[1, cfg.cam_channels, w, l]);

        let bad = g.constant(Tensor::zeros(&[n, 3, 8, 9])).unwrap();
        let r = image_branch(&mut g, Bound::new(&t.params, &vars), "cam", bad, &view, &cfg);
        assert!(matches!(r, Err(occ_core::Error::Config(_))));
    }
}

/// Directional derivatives of the camera branch against f32 central
/// differences, along the gradient itself and along random unit directions.
#[test]
fn image_branch_directional_derivatives() {
    let cfg = small_cfg();
    let view = CameraView::new(&cfg, &small_cams(2)).unwrap();
    let t = Teacher::new(cfg.clone(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let images = random_tensor(&mut rng, &[2, 3, 8, 8], 0.0, 1.0);
    let [w, l, _] = cfg.dims().unwrap();
    let proj = random_tensor(&mut rng, &[1, cfg.cam_channels, w, l], -1.0, 1.0);

    let eval = |params: &ParamSet| -> (f64, Vec<Tensor>) {
        let mut g = Graph::new();
        let vars = params.attach(&mut g).unwrap();
        let img = g.constant(images.clone()).unwrap();
        let bev = image_branch(&mut g, Bound::new(params, &vars), "cam", img, &view, &cfg).unwrap();
        let r = g.constant(proj.clone()).unwrap();
        let m = g.mul(bev, r).unwrap();
        let loss = g.sum(m).unwrap();
        let grads = g.backward(loss).unwrap();
        (g.value(loss).item() as f64, vars.iter().map(|v| grads.get(*v)).collect())
    };
    let (_, grads) = eval(&t.params);
    let mut checked = 0;
    for (at, name) in t.params.names().iter().enumerate() {
        if !name.starts_with("cam.") || name.ends_with(".b") {
            continue;
        }
        let grad: Vec<f64> = grads[at].data().iter().map(|v| *v as f64).collect();
        let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm > 0.0, "{name} has no gradient");
        for dseed in 0..4u64 {
            let dir: Vec<f64> = if dseed == 0 {
                grad.iter().map(|v| v / norm).collect()
            } else {
                let mut r = ChaCha8Rng::seed_from_u64(dseed);
                let d: Vec<f64> = (0..grad.len()).map(|_| r.random_range(-1.0..1.0)).collect();
                let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
                d.iter().map(|v| v / n).collect()
            };
            let analytic: f64 = dir.iter().zip(&grad).map(|(d, g)| d * g).sum();
            // ReLU kinks bias large steps and f32 rounding swamps small
            // ones, so take the closest of a short step sweep.
            let err = [3e-3, 1e-3, 3e-4]
                .iter()
                .map(|&h| {
                    let shift = |sign: f64| {
                        let mut p = t.params.clone();
                        for (w, d) in p.tensors_mut()[at].data_mut().iter_mut().zip(&dir) {
                            *w += (sign * h * d) as f32;
                        }
                        eval(&p).0
                    };
                    ((shift(1.0) - shift(-1.0)) / (2.0 * h) - analytic).abs()
                })
                .fold(f64::INFINITY, f64::min);
            assert!(err <= 2e-3 * norm, "{name} direction {dseed}: off by {err} (|g| {norm})");
            checked += 1;
        }
    }
    assert!(checked >= 4 * 4);
}

fn lidar_out(t: &Teacher, pillars: &Pillars) -> Tensor {
    let mut g = Graph::new();
    let vars = t.params.attach_frozen(&mut g).unwrap();
    let out = lidar_branch(&mut g, Bound::new(&t.params, &vars), pillars, &t.cfg).unwrap();
    g.value(out).clone()
}

#[test]
fn empty_cloud_gives_zero_lidar_map() {
    let cfg = small_cfg();
    let t = Teacher::new(cfg.clone(), 4).unwrap();
    let p = pillarize(&[], &cfg.grid).unwrap();
    let out = lidar_out(&t, &p);
    let [w, l, _] = cfg.dims().unwrap();
    assert_eq!(out.shape(), &[1, cfg.lidar_channels, w, l]);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_pillar_support_stays_in_receptive_field() {
    let cfg = small_cfg();
    let t = Teacher::new(cfg.clone(), 5).unwrap();
    let [w, l, _] = cfg.dims().unwrap();
    for (x, y) in [(0.3f32, -2.6f32), (-7.5, 7.5), (5.2, 0.1)] {
        let p = pillarize(&[[x, y, 0.2, 0.5]], &cfg.grid).unwrap();
        let [cx, cy] = p.coords[0];
        let out = lidar_out(&t, &p);
        let mut any = false;
        for ch in 0..cfg.lidar_channels {
            for i in 0..w {
                for j in 0..l {
                    let v = out.data()[(ch * w + i) * l + j];
                    let near = i.abs_diff(cx) <= 1 && j.abs_diff(cy) <= 1;
                    assert!(near || v == 0.0, "support at ({i},{j}) for pillar ({cx},{cy})");
                    any |= v != 0.0;
                }
            }
        }
        assert!(any);
    }
}

#[test]
fn fusion_with_zero_camera_uses_the_lidar_weights() {
    let cfg = small_cfg();
    let t = Teacher::new(cfg.clone(), 6).unwrap();
    let [w, l, _] = cfg.dims().unwrap();
    let (cc, cl, cf) = (cfg.cam_channels, cfg.lidar_channels, cfg.fused_channels);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let lidar = random_tensor(&mut rng, &[1, cl, w, l], -1.0, 1.0);
    let mut g = Graph::new();
    let vars = t.params.attach_frozen(&mut g).unwrap();
    let cam = g.constant(Tensor::zeros(&[1, cc, w, l])).unwrap();
    let lv = g.constant(lidar.clone()).unwrap();
    let fused = fuse_bev(&mut g, Bound::new(&t.params, &vars), cam, lv).unwrap();
    assert_eq!(g.shape(fused), &[1, cf, w, l]);

    let fw = t.params.get("fuse.w").unwrap();
    let fb = t.params.get("fuse.b").unwrap();
    let mut lw = Vec::new();
    for o in 0..cf {
        let row = &fw.data()[o * (cc + cl) * 9..(o + 1) * (cc + cl) * 9];
        lw.extend(row[cc * 9..].iter().map(|&v| v as f64));
    }
    let x: Vec<f64> = lidar.data().iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = fb.data().iter().map(|&v| v as f64).collect();
    let (want, _) = reference::conv2d(&x, [1, cl, w, l], &lw, [cf, cl, 3, 3], Some(&b), 1, 1);
    for (a, e) in g.value(fused).data().iter().zip(reference::relu(&want)) {
        assert!((*a as f64 - e).abs() < 1e-4);
    }

    let other = g.constant(Tensor::zeros(&[1, cl, w, l + 1])).unwrap();
    let r = fuse_bev(&mut g, Bound::new(&t.params, &vars), cam, other);
    assert!(matches!(r, Err(occ_core::Error::Dimension(_))));
}

#[test]
fn fusion_passes_gradient_to_both_branches() {
    let cfg = small_cfg();
    let t = Teacher::new(cfg.clone(), 7).unwrap();
    let [w, l, _] = cfg.dims().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut g = Graph::new();
    let vars = t.params.attach_frozen(&mut g).unwrap();
    let cam = g.leaf(random_tensor(&mut rng, &[1, cfg.cam_channels, w, l], -1.0, 1.0)).unwrap();
    let lid = g.leaf(random_tensor(&mut rng, &[1, cfg.lidar_channels, w, l], -1.0, 1.0)).unwrap();
    let fused = fuse_bev(&mut g, Bound::new(&t.params, &vars), cam, lid).unwrap();
    let r = g.constant(random_tensor(&mut rng, &[1, cfg.fused_channels, w, l], -1.0, 1.0)).unwrap();
    let m = g.mul(fused, r).unwrap();
    let loss = g.sum(m).unwrap();
    let grads = g.backward(loss).unwrap();
    for v in [cam, lid] {
        let norm: f32 = grads.get(v).data().iter().map(|x| x * x).sum();
        assert!(norm > 0.0);
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let cfg = NetConfig::default();
    let view = CameraView::new(&cfg, &SensorRig::desk().cameras).unwrap();
    let teacher = Teacher::new(cfg.clone(), 8).unwrap();
    let student = Student::new(cfg.clone(), 9, Some(&cfg)).unwrap();
    let mut t_live = vec![false; teacher.params.len()];
    let mut s_live = vec![false; student.params.len()];
    for seed in 0..3 {
        let (sample, pillars) = scene(&cfg, 100 + seed);
        let input = SampleInput { images: Some(&sample.images), pillars: Some(&pillars) };

        let mut g = Graph::new();
        let (vars, out) = teacher.build(&mut g, input, &view, true).unwrap();
        let loss = flat_ce(&mut g, out.logits, &sample);
        let mut grads = g.backward(loss).unwrap();
        for (live, t) in t_live.iter_mut().zip(teacher.params.collect_grads(&mut grads, &vars)) {
            *live |= t.data().iter().any(|v| *v != 0.0);
        }

        let target = teacher.predict(Exec::Sequential, input, &view).unwrap();
        let masks = decompose_regions(&sample.grid.labels, cfg.dims().unwrap(), &ClassMap::default()).unwrap();
        let bev_masks = project_regions_bev(&masks).unwrap();
        let mut g = Graph::new();
        let (vars, out) = student.build(&mut g, &sample.images, &view, true).unwrap();
        let ce = flat_ce(&mut g, out.logits, &sample);
        let (bev, occ) = student.adapt(&mut g, &vars, &out).unwrap();
        let tb = g.constant(target.bev_feat.clone()).unwrap();
        let to = g.constant(target.occ_feat.clone()).unwrap();
        let dcfg = DistillConfig::default();
        let lb = distill_bev(&mut g, tb, bev, &bev_masks, &dcfg).unwrap();
        let lo = distill_occ(&mut g, to, occ, &masks, &dcfg).unwrap();
        let a = g.add(ce, lb).unwrap();
        let loss = g.add(a, lo).unwrap();
        let mut grads = g.backward(loss).unwrap();
        for (live, t) in s_live.iter_mut().zip(student.params.collect_grads(&mut grads, &vars)) {
            *live |= t.data().iter().any(|v| *v != 0.0);
        }
    }
    for (name, live) in teacher.params.names().iter().zip(&t_live) {
        assert!(live, "teacher parameter {name} never receives gradient");
    }
    for (name, live) in student.params.names().iter().zip(&s_live) {
        assert!(live, "student parameter {name} never receives gradient");
    }
}

#[test]
fn forward_is_deterministic_with_expected_shapes() {
    let cfg = NetConfig::default();
    let [w, l, h] = cfg.dims().unwrap();
    let view = CameraView::new(&cfg, &SensorRig::desk().cameras).unwrap();
    let (sample, pillars) = scene(&cfg, 11);
    let input = SampleInput { images: Some(&sample.images), pillars: Some(&pillars) };

    let teacher = Teacher::new(cfg.clone(), 10).unwrap();
    let a = teacher.predict(Exec::Sequential, input, &view).unwrap();
    assert_eq!(a, teacher.predict(Exec::Sequential, input, &view).unwrap());
    assert_eq!(a, teacher.predict(Exec::default(), input, &view).unwrap());
    assert_eq!(a.logits.shape(), &[w, l, h, cfg.num_classes]);
    assert_eq!(a.bev_feat.shape(), &[cfg.fused_channels, w, l]);
    assert_eq!(a.occ_feat.shape(), &[cfg.occ_channels, w, l, h]);

    let student = Student::new(cfg.clone(), 12, None).unwrap();
    let b = student.predict(Exec::Sequential, &sample.images, &view).unwrap();
    assert_eq!(b, student.predict(Exec::default(), &sample.images, &view).unwrap());
    assert_eq!(b.logits.shape(), &[w, l, h, cfg.num_classes]);
    assert_eq!(b.occ_feat.shape(), &[cfg.occ_channels, w, l, h]);
}

#[test]
fn teacher_needs_both_modalities() {
    let cfg = NetConfig::default();
    let view = CameraView::new(&cfg, &SensorRig::desk().cameras).unwrap();
    let (sample, pillars) = scene(&cfg, 13);
    let teacher = Teacher::new(cfg, 14).unwrap();
    for input in [
        SampleInput { images: Some(&sample.images), pillars: None },
        SampleInput { images: None, pillars: Some(&pillars) },
    ] {
        assert!(matches!(teacher.predict(Exec::Sequential, input, &view), Err(occ_core::Error::Input(_))));
    }
}

#[test]
fn fifty_steps_overfit_one_scene() {
    let [(t0, t1), (s0, s1)] = overfit_runs(15);
    assert!(t1 <= 0.5 * t0, "teacher CE {t0} -> {t1}");
    assert!(s1 <= 0.5 * s0, "student CE {s0} -> {s1}");
}
