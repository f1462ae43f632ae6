//! Single-scene helpers for the network tests.

use diffkit::{Graph, OptimState, ParamSet, Var};
use occ_core::losses::{supervised_loss, SupervisedConfig};
use occ_core::occnets::{CameraView, NetConfig, SampleInput, Student, Teacher};
use occ_core::projection::{pillarize, Pillars};
use occ_core::scenegen::{simulate, SceneConfig, SceneSample, SensorRig};

pub fn scene(cfg: &NetConfig, seed: u64) -> (SceneSample, Pillars) {
    let s = simulate(&SceneConfig::default(), &SensorRig::desk(), &cfg.grid, seed).unwrap();
    let p = pillarize(&s.points, &cfg.grid).unwrap();
    (s, p)
}

pub fn flat_ce(g: &mut Graph, logits: Var, sample: &SceneSample) -> Var {
    let s = g.shape(logits).to_vec();
    let flat = g.reshape(logits, &[s[0] * s[1] * s[2], s[3]]).unwrap();
    let labels: Vec<usize> = sample.grid.labels.iter().map(|&l| l as usize).collect();
    supervised_loss(g, flat, &labels, &sample.grid.visibility, &SupervisedConfig::default()).unwrap().0
}

/// First loss and the loss after 50 Adam steps on one sample.
pub fn ce_drop(mut params: ParamSet, mut step: impl FnMut(&ParamSet, &mut Graph) -> (Vec<Var>, Var)) -> (f32, f32) {
    let mut opt = OptimState::adamw(&params, 1e-2, (0.9, 0.999), 1e-8, 0.0);
    let mut losses = Vec::new();
    for _ in 0..50 {
        let mut g = Graph::new();
        let (vars, loss) = step(&params, &mut g);
        losses.push(g.value(loss).item());
        let mut grads = g.backward(loss).unwrap();
        let grads = params.collect_grads(&mut grads, &vars);
        opt.step(&mut params, &grads).unwrap();
    }
    let mut g = Graph::new();
    let (_, loss) = step(&params, &mut g);
    (losses[0], g.value(loss).item())
}

/// `[(first, last)]` training CE of the teacher, then the student, on one
/// default scene.
pub fn overfit_runs(scene_seed: u64) -> [(f32, f32); 2] {
    let cfg = NetConfig::default();
    let view = CameraView::new(&cfg, &SensorRig::desk().cameras).unwrap();
    let (sample, pillars) = scene(&cfg, scene_seed);

    let teacher = Teacher::new(cfg.clone(), 16).unwrap();
    let t = ce_drop(teacher.params.clone(), |params, g| {
        let t = Teacher { cfg: cfg.clone(), params: params.clone() };
        let input = SampleInput { images: Some(&sample.images), pillars: Some(&pillars) };
        let (vars, out) = t.build(g, input, &view, true).unwrap();
        (vars, flat_ce(g, out.logits, &sample))
    });

    let student = Student::new(cfg.clone(), 17, None).unwrap();
    let s = ce_drop(student.params.clone(), |params, g| {
        let s = Student { cfg: cfg.clone(), params: params.clone(), adapt: None };
        let (vars, out) = s.build(g, &sample.images, &view, true).unwrap();
        (vars, flat_ce(g, out.logits, &sample))
    });
    [t, s]
}
