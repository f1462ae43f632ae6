use std::time::Instant;

use diffkit::{Exec, Graph, OptimState, ParamSet, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::evalkit::{confusion_labels, decompose_logits, project_regions_bev, ClassMap, ConfusionMatrix, MetricsReport};
use crate::losses::{distill_bev, distill_occ, distill_total_var, supervised_loss, weighted_sum};
use crate::occnets::{CameraView, ModelVars, SampleInput, Student, Teacher};
use crate::par::default_exec;
use crate::scenegen::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Teacher,
    Scratch,
    Distilled,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Teacher => "teacher",
            ModelKind::Scratch => "scratch",
            ModelKind::Distilled => "distilled",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: ModelKind,
    pub fraction: f64,
    pub seed: u64,
    pub labeled_scenes: usize,
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub geo_iou: Option<f64>,
    pub config_hash: String,
    /// Informational only; never part of aggregated outputs.
    pub wall_time_s: f64,
}

/// The four mirror views of the camera rig, indexed by `flip_x + 2 · flip_y`.
pub struct Views {
    views: Vec<CameraView>,
}

pub const FLIPS: [[bool; 2]; 4] = [[false, false], [true, false], [false, true], [true, true]];

impl Views {
    pub fn new(cfg: &crate::occnets::NetConfig, cams: &[crate::scenegen::CameraSpec]) -> Result<Self> {
        let views = FLIPS.iter().map(|&f| CameraView::flipped(cfg, cams, f)).collect::<Result<_>>()?;
        Ok(Self { views })
    }

    pub fn get(&self, flip: [bool; 2]) -> &CameraView {
        &self.views[flip[0] as usize + 2 * flip[1] as usize]
    }
}

/// Shadow (EMA) weights of `state` in the layout of `params`; the live
/// weights are not touched.
pub fn ema_apply(state: &OptimState, params: &ParamSet) -> Result<ParamSet> {
    let shadow = state
        .ema_weights()
        .ok_or_else(|| Error::Contract("EMA is not enabled for this optimiser".into()))?;
    Ok(ParamSet::from_parts(params.names().to_vec(), shadow.to_vec())?)
}

fn optimizer(cfg: &ExperimentConfig, params: &ParamSet) -> OptimState {
    let o = &cfg.optim;
    let st = OptimState::adamw(params, o.lr, o.betas, o.eps, o.weight_decay);
    match cfg.ema_decay {
        Some(d) => st.with_ema(params, d),
        None => st,
    }
}

/// Per-epoch visiting order over `pool`: a fresh shuffle each pass, cut or
/// cycled to `steps_per_epoch` when set.
fn epoch_order(pool: &[usize], steps: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = steps.unwrap_or(pool.len());
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut p = pool.to_vec();
        p.shuffle(rng);
        out.extend(p.into_iter().take(n - out.len()));
    }
    out
}

fn draw_flip(enabled: bool, rng: &mut ChaCha8Rng) -> [bool; 2] {
    if enabled {
        FLIPS[rng.random_range(0..4)]
    } else {
        FLIPS[0]
    }
}

/// Accumulates per-sample gradients and applies one optimiser step every
/// `batch` samples (and for the trailing partial batch).
struct Accumulator {
    sum: Option<Vec<Tensor>>,
    count: usize,
    batch: usize,
}

impl Accumulator {
    fn new(batch: usize) -> Self {
        Self { sum: None, count: 0, batch }
    }

    fn push(&mut self, grads: Vec<Tensor>, st: &mut OptimState, params: &mut ParamSet) -> Result<()> {
        match &mut self.sum {
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.add_assign(g)?;
                }
            }
            None => self.sum = Some(grads),
        }
        self.count += 1;
        if self.count == self.batch {
            self.flush(st, params)?;
        }
        Ok(())
    }

    fn flush(&mut self, st: &mut OptimState, params: &mut ParamSet) -> Result<()> {
        if let Some(mut acc) = self.sum.take() {
            if self.count > 1 {
                let k = 1.0 / self.count as f32;
                acc.iter_mut().for_each(|t| t.scale_in_place(k));
            }
            st.step(params, &acc)?;
        }
        self.count = 0;
        Ok(())
    }
}

fn flat_logits(g: &mut Graph, v: &ModelVars) -> Result<Var> {
    let s = g.shape(v.logits).to_vec();
    Ok(g.reshape(v.logits, &[s[0] * s[1] * s[2], s[3]])?)
}

fn check_labeled(data: &Dataset, labeled: &[bool]) -> Result<Vec<usize>> {
    if labeled.len() != data.train.len() {
        return Err(Error::Config(format!("{} label flags for {} scenes", labeled.len(), data.train.len())));
    }
    let idx: Vec<usize> = (0..labeled.len()).filter(|&i| labeled[i]).collect();
    if idx.is_empty() {
        return Err(Error::Config("the labeled subset is empty".into()));
    }
    Ok(idx)
}

/// Confusion of `predict` against each validation grid, restricted to the
/// camera-visible voxels.
fn evaluate(data: &Dataset, mut predict: impl FnMut(&Sample) -> Result<Tensor>) -> Result<MetricsReport> {
    let mut total: Option<ConfusionMatrix> = None;
    for s in &data.val {
        let logits = predict(s)?;
        let c = logits.shape()[3];
        let pred: Vec<u8> = logits.argmax_last().into_iter().map(|v| v as u8).collect();
        let cm = confusion_labels(&pred, &s.grid.labels, &s.grid.visibility, c)?;
        match &mut total {
            Some(t) => t.merge(&cm)?,
            None => total = Some(cm),
        }
    }
    let cm = total.ok_or_else(|| Error::Config("no validation scenes".into()))?;
    MetricsReport::from_confusion(cm)
}

fn report(
    model: ModelKind,
    cfg: &ExperimentConfig,
    seed: u64,
    labeled: usize,
    epoch_loss: Vec<f64>,
    metrics: MetricsReport,
    started: Instant,
) -> Result<RunReport> {
    Ok(RunReport {
        model,
        fraction: cfg.label_fraction,
        seed,
        labeled_scenes: labeled,
        epoch_loss,
        per_class_iou: metrics.per_class_iou,
        miou: metrics.miou,
        geo_iou: metrics.geo_iou,
        config_hash: cfg.hash()?,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

/// Supervised training of the fusion model on the labeled scenes.
pub fn train_teacher(data: &Dataset, cfg: &ExperimentConfig, labeled: &[bool], seed: u64) -> Result<(Teacher, RunReport)> {
    cfg.validate()?;
    let started = Instant::now();
    let pool = check_labeled(data, labeled)?;
    let exec = default_exec();
    let mut model = Teacher::new(cfg.teacher.clone(), derive_seed(seed, 101))?;
    let views = Views::new(&cfg.teacher, &cfg.data.rig.cameras)?;
    let mut st = optimizer(cfg, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 102));
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let order = epoch_order(&pool, cfg.steps_per_epoch, &mut rng);
        let mut acc = Accumulator::new(cfg.batch_size);
        let mut sum = 0.0;
        for &i in &order {
            let view = data.train[i].view(draw_flip(cfg.flip_aug, &mut rng))?;
            let mut g = Graph::with_exec(exec);
            let input = SampleInput { images: Some(&data.train[i].images), pillars: Some(&view.pillars) };
            let (vars, out) = model.build(&mut g, input, views.get(view.flip), true)?;
            let logits = flat_logits(&mut g, &out)?;
            let (labels, valid) = Sample::targets(&view.grid);
            let (loss, _) = supervised_loss(&mut g, logits, &labels, valid, &cfg.supervised)?;
            sum += g.value(loss).item() as f64;
            let mut grads = g.backward(loss)?;
            acc.push(model.params.collect_grads(&mut grads, &vars), &mut st, &mut model.params)?;
        }
        acc.flush(&mut st, &mut model.params)?;
        curve.push(sum / order.len() as f64);
    }
    if cfg.ema_decay.is_some() {
        model.params = ema_apply(&st, &model.params)?;
    }
    let view0 = views.get(FLIPS[0]);
    let metrics = evaluate(data, |s| {
        let v = s.view(FLIPS[0])?;
        Ok(model.predict(exec, SampleInput { images: Some(&s.images), pillars: Some(&v.pillars) }, view0)?.logits)
    })?;
    let rep = report(ModelKind::Teacher, cfg, seed, pool.len(), curve, metrics, started)?;
    Ok((model, rep))
}

/// Per-step loss bookkeeping of the student loop, for tests and reports.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepLog {
    pub scene: usize,
    pub labeled: bool,
    pub supervised: f64,
    pub distill: f64,
}

/// Camera-only training. Labeled scenes get the supervised loss plus, with
/// a teacher, the distillation loss; unlabeled scenes get distillation only
/// and are skipped without a teacher.
pub fn train_student(
    data: &Dataset,
    cfg: &ExperimentConfig,
    labeled: &[bool],
    seed: u64,
    teacher: Option<&Teacher>,
) -> Result<(Student, RunReport)> {
    let (s, r, _) = train_student_logged(data, cfg, labeled, seed, teacher)?;
    Ok((s, r))
}

pub fn train_student_logged(
    data: &Dataset,
    cfg: &ExperimentConfig,
    labeled: &[bool],
    seed: u64,
    teacher: Option<&Teacher>,
) -> Result<(Student, RunReport, Vec<StepLog>)> {
    cfg.validate()?;
    let started = Instant::now();
    let lab = check_labeled(data, labeled)?;
    if let Some(t) = teacher {
        if t.cfg.grid != cfg.student.grid {
            return Err(Error::Config("teacher grid does not match the student grid".into()));
        }
    }
    let pool: Vec<usize> = if teacher.is_some() { (0..data.train.len()).collect() } else { lab.clone() };
    let exec = default_exec();
    let mut model = Student::new(cfg.student.clone(), derive_seed(seed, 201), teacher.map(|t| &t.cfg))?;
    let views = Views::new(&cfg.student, &cfg.data.rig.cameras)?;
    let tviews = match teacher {
        Some(t) => Some(Views::new(&t.cfg, &cfg.data.rig.cameras)?),
        None => None,
    };
    let cmap = ClassMap::default();
    let mut st = optimizer(cfg, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 202));
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut log = Vec::new();
    for _ in 0..cfg.epochs {
        let order = epoch_order(&pool, cfg.steps_per_epoch, &mut rng);
        let mut acc = Accumulator::new(cfg.batch_size);
        let mut sum = 0.0;
        for &i in &order {
            let sample = &data.train[i];
            let view = sample.view(draw_flip(cfg.flip_aug, &mut rng))?;
            let mut g = Graph::with_exec(exec);
            let (vars, out) = model.build(&mut g, &sample.images, views.get(view.flip), true)?;
            let mut terms = Vec::new();
            let mut entry = StepLog { scene: i, labeled: labeled[i], ..Default::default() };
            if labeled[i] {
                let logits = flat_logits(&mut g, &out)?;
                let (labels, valid) = Sample::targets(&view.grid);
                let (l, _) = supervised_loss(&mut g, logits, &labels, valid, &cfg.supervised)?;
                entry.supervised = g.value(l).item() as f64;
                terms.push((l, 1.0));
            }
            if let (Some(t), Some(tv)) = (teacher, &tviews) {
                let input = SampleInput { images: Some(&sample.images), pillars: Some(&view.pillars) };
                let tout = t.predict(exec, input, tv.get(view.flip))?;
                let masks = decompose_logits(&tout.logits, &cmap)?;
                let bev_masks = project_regions_bev(&masks)?;
                let (sb, so) = model.adapt(&mut g, &vars, &out)?;
                let tb = g.constant(tout.bev_feat)?;
                let to = g.constant(tout.occ_feat)?;
                let lb = distill_bev(&mut g, tb, sb, &bev_masks, &cfg.distill)?;
                let lo = distill_occ(&mut g, to, so, &masks, &cfg.distill)?;
                let l = distill_total_var(&mut g, lb, lo, &cfg.distill)?;
                entry.distill = g.value(l).item() as f64;
                terms.push((l, 1.0));
            }
            let loss = weighted_sum(&mut g, &terms)?;
            sum += g.value(loss).item() as f64;
            log.push(entry);
            if !g.is_tracked(loss) {
                continue;
            }
            let mut grads = g.backward(loss)?;
            acc.push(model.params.collect_grads(&mut grads, &vars), &mut st, &mut model.params)?;
        }
        acc.flush(&mut st, &mut model.params)?;
        curve.push(sum / order.len() as f64);
    }
    if cfg.ema_decay.is_some() {
        model.params = ema_apply(&st, &model.params)?;
    }
    let view0 = views.get(FLIPS[0]);
    let metrics = evaluate(data, |s| Ok(model.predict(exec, &s.images, view0)?.logits))?;
    let kind = if teacher.is_some() { ModelKind::Distilled } else { ModelKind::Scratch };
    let rep = report(kind, cfg, seed, lab.len(), curve, metrics, started)?;
    Ok((model, rep, log))
}

/// Teacher, scratch student and distilled student for every
/// `(fraction, seed)`, fractions outermost.
pub fn run_label_efficiency(data: &Dataset, cfg: &ExperimentConfig) -> Result<Vec<RunReport>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.fractions.len() * cfg.seeds.len() * 3);
    for &fraction in &cfg.fractions {
        let run_cfg = ExperimentConfig { label_fraction: fraction, ..cfg.clone() };
        for &seed in &cfg.seeds {
            let labeled = super::config::labeled_scenes(data.train.len(), fraction, derive_seed(seed, 7))?;
            let (teacher, rt) = train_teacher(data, &run_cfg, &labeled, seed)?;
            let (_, rs) = train_student(data, &run_cfg, &labeled, seed, None)?;
            let (_, rd) = train_student(data, &run_cfg, &labeled, seed, Some(&teacher))?;
            out.extend([rt, rs, rd]);
        }
    }
    Ok(out)
}

/// Evaluates frozen teacher weights on the validation scenes.
pub fn evaluate_teacher(data: &Dataset, teacher: &Teacher, cams: &[crate::scenegen::CameraSpec], exec: Exec) -> Result<MetricsReport> {
    let view = CameraView::new(&teacher.cfg, cams)?;
    evaluate(data, |s| {
        let v = s.view(FLIPS[0])?;
        Ok(teacher.predict(exec, SampleInput { images: Some(&s.images), pillars: Some(&v.pillars) }, &view)?.logits)
    })
}

pub fn evaluate_student(data: &Dataset, student: &Student, cams: &[crate::scenegen::CameraSpec], exec: Exec) -> Result<MetricsReport> {
    let view = CameraView::new(&student.cfg, cams)?;
    evaluate(data, |s| Ok(student.predict(exec, &s.images, &view)?.logits))
}
