//! Optimisation and the six-stage training protocol: warmup, joint
//! training, prototype projection, last-layer fine-tuning, pruning and a
//! second fine-tuning.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::explain::{confusion_over, StageRow};
use crate::numcore::{lit, Real, Tape, Tensor};
use crate::protoloss::{finetune_loss_var, joint_loss_var, l1_penalty_var, LossConfig};
use crate::segmodel::checkpoint::Checkpoint;
use crate::segmodel::{image_tensor, FeatureMap, ParamGroup, ParamId, Provenance, SegModel};
use crate::seeding::rng_for;
use crate::synthdata::{augment, downsample_labels, SegSample, IGNORE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Warmup,
    Joint,
    Projection,
    Tune1,
    Prune,
    Tune2,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Warmup,
        Stage::Joint,
        Stage::Projection,
        Stage::Tune1,
        Stage::Prune,
        Stage::Tune2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Warmup => "warmup",
            Stage::Joint => "joint",
            Stage::Projection => "projection",
            Stage::Tune1 => "tune1",
            Stage::Prune => "prune",
            Stage::Tune2 => "tune2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown stage `{s}` (expected one of warmup, joint, projection, tune1, prune, tune2)")))
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// The stage allowed to run after `completed`.
    pub fn after(completed: Option<Stage>) -> Option<Stage> {
        match completed {
            None => Some(Stage::Warmup),
            Some(s) => Stage::ALL.get(s.index() + 1).copied(),
        }
    }

    fn trains(self, group: ParamGroup) -> bool {
        match self {
            Stage::Warmup => matches!(group, ParamGroup::Projection | ParamGroup::Prototypes),
            Stage::Joint => group != ParamGroup::LastLayer,
            Stage::Tune1 | Stage::Tune2 => group == ParamGroup::LastLayer,
            Stage::Projection | Stage::Prune => false,
        }
    }

    fn uses_l1(self) -> bool {
        matches!(self, Stage::Tune1 | Stage::Prune | Stage::Tune2)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub warmup_steps: usize,
    pub joint_steps: usize,
    pub tune1_steps: usize,
    pub tune2_steps: usize,
    pub warmup_lr: f64,
    pub joint_backbone_lr: f64,
    pub joint_head_lr: f64,
    pub tune_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub poly_power: f64,
    pub prune_knn: usize,
    pub prune_threshold: usize,
    pub eval_train_images: usize,
    pub crop_height: usize,
    pub crop_width: usize,
    pub loss: LossConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lrs = [self.warmup_lr, self.joint_backbone_lr, self.joint_head_lr, self.tune_lr];
        if lrs.iter().any(|&lr| !(lr > 0.0) || !lr.is_finite()) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        for b in [self.beta1, self.beta2] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("Adam betas must lie in (0, 1), got {b}")));
            }
        }
        if !(self.weight_decay >= 0.0) || !(self.poly_power >= 0.0) {
            return Err(Error::Config("weight decay and poly power must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.prune_knn == 0 {
            return Err(Error::Config("prune_knn must be >= 1".into()));
        }
        self.loss.validate()
    }

    pub fn steps(&self, stage: Stage) -> usize {
        match stage {
            Stage::Warmup => self.warmup_steps,
            Stage::Joint => self.joint_steps,
            Stage::Tune1 => self.tune1_steps,
            Stage::Tune2 => self.tune2_steps,
            Stage::Projection | Stage::Prune => 0,
        }
    }
}

/// `base·(1 − step/max_steps)^power`.
pub fn poly_lr(base: f64, step: usize, max_steps: usize, power: f64) -> f64 {
    if max_steps == 0 {
        return base;
    }
    let frac = 1.0 - (step.min(max_steps) as f64) / max_steps as f64;
    base * frac.powf(power)
}

/// First and second moment estimates of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T: Real> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    /// Updates applied so far.
    pub t: u64,
}

impl<T: Real> Moments<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Moments {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            t: 0,
        }
    }
}

/// One Adam update with bias correction. Weight decay is added to the
/// gradient (`g + wd·θ`). Non-finite gradients leave everything untouched.
#[allow(clippy::too_many_arguments)]
pub fn adam_step<T: Real>(param: &mut Tensor<T>, grad: &Tensor<T>, state: &mut Moments<T>, lr: f64, wd: f64, beta1: f64, beta2: f64) -> Result<()> {
    if grad.shape() != param.shape() || state.m.shape() != param.shape() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            lhs: param.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    if !grad.all_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2, wd) = (lit::<T>(beta1), lit::<T>(beta2), lit::<T>(wd));
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let (lr, eps) = (lit::<T>(lr), lit::<T>(1e-8));
    let (m, v) = (state.m.data_mut(), state.v.data_mut());
    for (i, p) in param.data_mut().iter_mut().enumerate() {
        let g = grad.data()[i] + wd * *p;
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T: Real = f64> {
    pub model: SegModel<T>,
    /// Adam moments of the last trained stage, by parameter position in
    /// [`SegModel::param_ids`].
    pub moments: Vec<Option<Moments<T>>>,
    /// Optimisation steps taken over the whole run.
    pub step: u64,
    pub completed: Option<Stage>,
    pub config: RunConfig,
    pub report: Vec<StageRow>,
}

impl<T: Real> TrainState<T> {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let model = SegModel::new(&config.model_config(), config.seed)?;
        let n = model.param_ids().len();
        Ok(TrainState {
            model,
            moments: vec![None; n],
            step: 0,
            completed: None,
            config: config.clone(),
            report: Vec::new(),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        self.model.write_checkpoint(&mut ck);
        for (i, id) in self.model.param_ids().into_iter().enumerate() {
            if let Some(mo) = &self.moments[i] {
                let name = self.model.param_name(id);
                ck.push_real(&format!("adam.m.{name}"), &mo.m);
                ck.push_real(&format!("adam.v.{name}"), &mo.v);
                ck.push_u64(&format!("adam.t.{name}"), mo.t);
            }
        }
        ck.push_u64("train.step", self.step);
        ck.push_text("meta.stage", self.completed.map_or("none", Stage::name));
        ck.push_text("meta.config", &self.config.to_text());
        ck.push_text("meta.report", &report_csv(&self.report));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = RunConfig::parse(&ck.text("meta.config")?)?;
        let model = SegModel::<T>::from_checkpoint(&config.model_config(), ck)?;
        let mut moments = Vec::new();
        for id in model.param_ids() {
            let name = model.param_name(id);
            let key = format!("adam.m.{name}");
            if ck.contains(&key) {
                moments.push(Some(Moments {
                    m: ck.real(&key)?,
                    v: ck.real(&format!("adam.v.{name}"))?,
                    t: ck.u64(&format!("adam.t.{name}"))?,
                }));
            } else {
                moments.push(None);
            }
        }
        let stage = ck.text("meta.stage")?;
        let completed = if stage == "none" { None } else { Some(Stage::parse(&stage)?) };
        Ok(TrainState {
            model,
            moments,
            step: ck.u64("train.step")?,
            completed,
            config,
            report: parse_report(&ck.text("meta.report")?)?,
        })
    }
}

pub fn report_csv(rows: &[StageRow]) -> String {
    let mut s = String::from("stage,active_prototypes,val_miou,train_loss\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.stage, r.active_prototypes, r.val_miou, r.train_loss));
    }
    s
}

fn parse_report(text: &str) -> Result<Vec<StageRow>> {
    let bad = || Error::Checkpoint("malformed stage report".into());
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(StageRow {
                stage: Stage::parse(f[0])?,
                active_prototypes: f[1].parse().map_err(|_| bad())?,
                val_miou: f[2].parse().map_err(|_| bad())?,
                train_loss: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Training and validation images. Image ids are positions in `train`.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Vec<SegSample>,
    pub val: Vec<SegSample>,
}

fn labels_at_features(sample: &SegSample, hd: usize, wd: usize) -> Result<Vec<u8>> {
    downsample_labels(&sample.labels, sample.height, sample.width, hd, wd)
}

/// Loss of one image and gradients of every trainable parameter.
fn image_grads<T: Real>(model: &SegModel<T>, stage: Stage, sample: &SegSample, loss_cfg: &LossConfig) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, |g| stage.trains(g));
    let fw = model.forward(&mut tape, &vars, &image_tensor(sample))?;
    let labels_d = labels_at_features(sample, fw.hd, fw.wd)?;
    let loss = joint_loss_var(&mut tape, &fw, &labels_d, &model.prototypes, loss_cfg)?;
    let value = tape.value(loss).item().to_f64().unwrap();
    let mut grads = tape.backward(loss)?;
    let mut handles: Vec<_> = vars.backbone.clone();
    handles.push(vars.prototypes);
    handles.push(vars.last_layer);
    let out = handles
        .into_iter()
        .map(|v| grads.take(v).filter(|_| tape.requires_grad(v)))
        .collect();
    Ok((value, out))
}

fn checked_stage<T: Real>(state: &TrainState<T>, stage: Stage) -> Result<()> {
    if Stage::after(state.completed) != Some(stage) {
        return Err(Error::StageOrder {
            requested: stage.name().into(),
            completed: state.completed.map_or("nothing".into(), |s| s.name().into()),
        });
    }
    Ok(())
}

/// Runs the gradient-based stages (warmup, joint, tune1, tune2).
fn train_stage<T: Real>(stage: Stage, data: &TrainData, state: &mut TrainState<T>, cfg: &TrainConfig) -> Result<()> {
    let steps = cfg.steps(stage);
    let ids = state.model.param_ids();
    let trainable: Vec<bool> = ids.iter().map(|&id| stage.trains(state.model.param_group(id))).collect();
    state.moments = ids
        .iter()
        .zip(&trainable)
        .map(|(&id, &t)| t.then(|| Moments::zeros(state.model.param(id).shape())))
        .collect();
    if data.train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    for step in 0..steps {
        let samples: Vec<SegSample> = (0..cfg.batch_size)
            .map(|slot| {
                let mut rng = rng_for(&[cfg.seed, 0x7EA1, stage.index() as u64, step as u64, slot as u64]);
                let idx = rng.gen_range(0..data.train.len());
                augment(&data.train[idx], &mut rng, cfg.crop_height, cfg.crop_width)
            })
            .collect();
        let model = &state.model;
        let results: Vec<Result<(f64, Vec<Option<Tensor<T>>>)>> = samples
            .par_iter()
            .map(|s| image_grads(model, stage, s, &cfg.loss))
            .collect();
        let mut sum: Vec<Option<Tensor<T>>> = vec![None; ids.len()];
        for r in results {
            let (_, grads) = r?;
            for (acc, g) in sum.iter_mut().zip(grads) {
                match (acc.as_mut(), g) {
                    (Some(a), Some(g)) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, &y)| *x += y),
                    (None, Some(g)) => *acc = Some(g),
                    _ => {}
                }
            }
        }
        let inv = lit::<T>(1.0 / cfg.batch_size as f64);
        for g in sum.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= inv);
        }
        if stage.uses_l1() && cfg.loss.lambda_l1 > 0.0 {
            let mut tape = Tape::new();
            let w = tape.leaf(state.model.last_layer.weights.clone(), true);
            let l1 = l1_penalty_var(&mut tape, w, &state.model.prototypes, cfg.loss.lambda_l1)?;
            let g = tape.backward(l1)?.take(w).expect("leaf gradient");
            let pos = ids.iter().position(|&id| id == ParamId::LastLayer).unwrap();
            match sum[pos].as_mut() {
                Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, &y)| *x += y),
                None => sum[pos] = Some(g),
            }
        }
        for (i, &id) in ids.iter().enumerate() {
            if !trainable[i] {
                continue;
            }
            let group = state.model.param_group(id);
            let lr = match stage {
                Stage::Warmup => cfg.warmup_lr,
                Stage::Joint if group == ParamGroup::Core => poly_lr(cfg.joint_backbone_lr, step, steps, cfg.poly_power),
                Stage::Joint => poly_lr(cfg.joint_head_lr, step, steps, cfg.poly_power),
                _ => cfg.tune_lr,
            };
            let wd = if group == ParamGroup::Prototypes { 0.0 } else { cfg.weight_decay };
            let grad = match &sum[i] {
                Some(g) => g.clone(),
                None => Tensor::zeros(state.model.param(id).shape()),
            };
            let moments = state.moments[i].as_mut().expect("moments of trainable parameter");
            adam_step(state.model.param_mut(id), &grad, moments, lr, wd, cfg.beta1, cfg.beta2)
                .map_err(|e| Error::invalid(format!("{stage} step {step}: {e} in {}", state.model.param_name(id))))?;
        }
        // rows of removed prototypes stay zero
        let removed: Vec<usize> = (0..state.model.prototypes.len())
            .filter(|&j| !state.model.prototypes.active[j])
            .collect();
        for j in removed {
            state.model.last_layer.zero_row(j);
        }
        state.step += 1;
    }
    Ok(())
}

/// Runs one stage; stages must follow the fixed protocol order.
pub fn run_stage<T: Real>(stage: Stage, data: &TrainData, state: &mut TrainState<T>) -> Result<()> {
    checked_stage(state, stage)?;
    let cfg = state.config.train_config();
    match stage {
        Stage::Projection => {
            project_prototypes(&data.train, &mut state.model)?;
        }
        Stage::Prune => {
            prune_prototypes(&data.train, &mut state.model, cfg.prune_knn, cfg.prune_threshold)?;
        }
        _ => train_stage(stage, data, state, &cfg)?,
    }
    state.completed = Some(stage);
    Ok(())
}

/// Features and feature-resolution labels of non-augmented images.
fn feature_maps<'a, T: Real>(model: &'a SegModel<T>, images: &'a [SegSample]) -> impl IndexedParallelIterator<Item = Result<(FeatureMap<T>, Vec<u8>)>> + 'a {
    images.par_iter().map(move |s| {
        let z = model.features(s)?;
        let l = labels_at_features(s, z.hd, z.wd)?;
        Ok((z, l))
    })
}

fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionOutcome {
    /// Squared distance each active prototype moved to its patch.
    pub distances: Vec<(usize, f64)>,
    /// Prototypes deactivated as duplicates.
    pub removed: Vec<usize>,
}

/// Replaces every active prototype by its nearest same-class feature point
/// of the training images, scanning `(image, row, col)` in order so the
/// first minimum wins. Prototypes landing on the same point as a
/// lower-index prototype are deactivated and their last-layer rows zeroed.
pub fn project_prototypes<T: Real>(train: &[SegSample], model: &mut SegModel<T>) -> Result<ProjectionOutcome> {
    let active = model.prototypes.active_indices();
    let per_image: Vec<Result<Vec<Option<(T, usize, usize)>>>> = feature_maps(model, train)
        .map(|r| {
            let (z, labels) = r?;
            Ok(active
                .iter()
                .map(|&j| {
                    let c = model.prototypes.class_of[j];
                    let p = model.prototypes.vector(j);
                    let mut best: Option<(T, usize, usize)> = None;
                    for (i, &l) in labels.iter().enumerate() {
                        if l as usize != c || l == IGNORE {
                            continue;
                        }
                        let d = sq_dist(z.point(i), p);
                        if best.is_none_or(|(b, _, _)| d < b) {
                            best = Some((d, i, 0));
                        }
                    }
                    best
                })
                .collect())
        })
        .collect();
    let mut best: Vec<Option<(T, usize, usize)>> = vec![None; active.len()];
    for (img, r) in per_image.into_iter().enumerate() {
        for (a, cand) in r?.into_iter().enumerate() {
            if let Some((d, point, _)) = cand {
                if best[a].is_none_or(|(b, _, _)| d < b) {
                    best[a] = Some((d, point, img));
                }
            }
        }
    }
    for (a, &j) in active.iter().enumerate() {
        if best[a].is_none() {
            return Err(Error::invalid(format!(
                "class {} has no labelled feature points in the training set",
                model.prototypes.class_of[j]
            )));
        }
    }
    // copy the winning feature vectors
    let mut needed: Vec<usize> = best.iter().flatten().map(|b| b.2).collect();
    needed.sort_unstable();
    needed.dedup();
    let feats: Vec<FeatureMap<T>> = needed
        .par_iter()
        .map(|&i| model.features(&train[i]))
        .collect::<Result<_>>()?;
    let mut outcome = ProjectionOutcome {
        distances: Vec::new(),
        removed: Vec::new(),
    };
    let d = model.prototypes.dim();
    for (a, &j) in active.iter().enumerate() {
        let (dist, point, img) = best[a].unwrap();
        let z = &feats[needed.binary_search(&img).unwrap()];
        model.prototypes.vectors.data_mut()[j * d..(j + 1) * d].copy_from_slice(z.point(point));
        model.prototypes.provenance[j] = Some(Provenance {
            image: img,
            row: point / z.wd,
            col: point % z.wd,
        });
        outcome.distances.push((j, dist.to_f64().unwrap()));
    }
    for (a, &j) in active.iter().enumerate() {
        let dup = active[..a]
            .iter()
            .any(|&k| model.prototypes.active[k] && model.prototypes.provenance[k] == model.prototypes.provenance[j]);
        if dup {
            model.prototypes.active[j] = false;
            model.last_layer.zero_row(j);
            outcome.removed.push(j);
        }
    }
    Ok(outcome)
}

/// Deactivates every active prototype with fewer than `threshold`
/// same-class labels among its `k` nearest labelled training feature
/// points (all classes). Distance ties go to the earlier point in
/// `(image, row, col)` order. Returns the pruned indices.
pub fn prune_prototypes<T: Real>(train: &[SegSample], model: &mut SegModel<T>, k: usize, threshold: usize) -> Result<Vec<usize>> {
    let active = model.prototypes.active_indices();
    // per image and prototype: its k nearest points as (dist, point, label)
    let per_image: Vec<Result<(usize, Vec<Vec<(T, usize, u8)>>)>> = feature_maps(model, train)
        .map(|r| {
            let (z, labels) = r?;
            let labelled = labels.iter().filter(|&&l| l != IGNORE).count();
            let near = active
                .iter()
                .map(|&j| {
                    let p = model.prototypes.vector(j);
                    let mut cand: Vec<(T, usize, u8)> = labels
                        .iter()
                        .enumerate()
                        .filter(|(_, &l)| l != IGNORE)
                        .map(|(i, &l)| (sq_dist(z.point(i), p), i, l))
                        .collect();
                    cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                    cand.truncate(k);
                    cand
                })
                .collect();
            Ok((labelled, near))
        })
        .collect();
    let mut total = 0;
    let mut merged: Vec<Vec<(T, usize, usize, u8)>> = vec![Vec::new(); active.len()];
    for (img, r) in per_image.into_iter().enumerate() {
        let (labelled, near) = r?;
        total += labelled;
        for (a, cand) in near.into_iter().enumerate() {
            merged[a].extend(cand.into_iter().map(|(d, i, l)| (d, img, i, l)));
            merged[a].sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then((x.1, x.2).cmp(&(y.1, y.2))));
            merged[a].truncate(k);
        }
    }
    if k > total {
        return Err(Error::invalid(format!("prune_knn {k} exceeds the {total} labelled training points")));
    }
    let mut pruned = Vec::new();
    for (a, &j) in active.iter().enumerate() {
        let c = model.prototypes.class_of[j];
        let same = merged[a].iter().filter(|n| n.3 as usize == c).count();
        if same < threshold {
            pruned.push(j);
        }
    }
    for &j in &pruned {
        model.prototypes.active[j] = false;
        model.last_layer.zero_row(j);
    }
    Ok(pruned)
}

/// Objective of `stage` averaged over non-augmented images.
pub fn stage_loss<T: Real>(model: &SegModel<T>, images: &[SegSample], stage: Stage, loss_cfg: &LossConfig) -> Result<f64> {
    if images.is_empty() {
        return Ok(0.0);
    }
    let losses: Vec<Result<f64>> = images
        .par_iter()
        .map(|s| {
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, |_| false);
            let fw = model.forward(&mut tape, &vars, &image_tensor(s))?;
            let labels = labels_at_features(s, fw.hd, fw.wd)?;
            let l = joint_loss_var(&mut tape, &fw, &labels, &model.prototypes, loss_cfg)?;
            Ok(tape.value(l).item().to_f64().unwrap())
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    let mut mean = total / images.len() as f64;
    if stage.uses_l1() {
        let mut tape = Tape::new();
        let w = tape.constant(model.last_layer.weights.clone());
        let zero = tape.scalar(T::zero());
        let l = finetune_loss_var(&mut tape, zero, w, &model.prototypes, loss_cfg)?;
        mean += tape.value(l).item().to_f64().unwrap();
    }
    Ok(mean)
}

/// Report row for the state's last completed stage.
pub fn evaluate_stage<T: Real>(state: &TrainState<T>, data: &TrainData) -> Result<StageRow> {
    let stage = state.completed.ok_or_else(|| Error::invalid("no stage completed"))?;
    let acc = confusion_over(&state.model, &data.val)?;
    let cfg = state.config.train_config();
    let subset = &data.train[..cfg.eval_train_images.min(data.train.len())];
    Ok(StageRow {
        stage,
        active_prototypes: state.model.prototypes.active_count(),
        val_miou: acc.miou()?.mean,
        train_loss: stage_loss(&state.model, subset, stage, &cfg.loss)?,
    })
}

pub fn checkpoint_path(out_dir: &Path, stage: Stage) -> PathBuf {
    out_dir.join(format!("ckpt_{}_{}.pseg", stage.index() + 1, stage.name()))
}

/// Latest stage checkpoint in `out_dir`, if any.
pub fn latest_checkpoint(out_dir: &Path) -> Option<(Stage, PathBuf)> {
    Stage::ALL
        .into_iter()
        .rev()
        .map(|s| (s, checkpoint_path(out_dir, s)))
        .find(|(_, p)| p.is_file())
}

/// Runs the stages from the state's position through `until` (inclusive),
/// evaluating, reporting and (with `out_dir`) checkpointing after each.
pub fn run_pipeline<T: Real>(state: &mut TrainState<T>, data: &TrainData, out_dir: Option<&Path>, until: Stage, log: &mut dyn FnMut(&str)) -> Result<()> {
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    while let Some(stage) = Stage::after(state.completed) {
        if stage > until {
            break;
        }
        let before = state.model.prototypes.active_count();
        run_stage(stage, data, state)?;
        let row = evaluate_stage(state, data)?;
        log(&format!(
            "{stage}: active {} (was {before}), val mIoU {:.4}, train loss {:.4}, step {}",
            row.active_prototypes, row.val_miou, row.train_loss, state.step
        ));
        state.report.push(row);
        if let Some(dir) = out_dir {
            let path = checkpoint_path(dir, stage);
            state.to_checkpoint().write(&path)?;
            let report = dir.join("report.csv");
            fs::write(&report, report_csv(&state.report)).map_err(|e| Error::io(&report, e))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_examples() {
        assert_eq!(poly_lr(0.1, 0, 100, 0.9), 0.1);
        assert_eq!(poly_lr(0.1, 100, 100, 0.9), 0.0);
        assert!((poly_lr(1.0, 50, 100, 0.9) - 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!((poly_lr(1.0, 50, 100, 0.9) - 0.5359).abs() < 1e-4);
    }

    #[test]
    fn adam_first_step() {
        let mut p = Tensor::<f64>::vector(vec![0.5, -2.0]);
        let g = Tensor::vector(vec![1.0, 1.0]);
        let mut st = Moments::zeros(&[2]);
        adam_step(&mut p, &g, &mut st, 0.01, 0.0, 0.9, 0.999).unwrap();
        let step = 0.01 / (1.0 + 1e-8);
        assert!((p.data()[0] - (0.5 - step)).abs() < 1e-15);
        assert!((p.data()[1] - (-2.0 - step)).abs() < 1e-15);
        let before = p.clone();
        let mut st2 = Moments::zeros(&[2]);
        adam_step(&mut p, &Tensor::zeros(&[2]), &mut st2, 0.01, 0.0, 0.9, 0.999).unwrap();
        assert_eq!(p, before);
        let bad = Tensor::vector(vec![f64::NAN, 0.0]);
        assert!(adam_step(&mut p, &bad, &mut st2, 0.01, 0.0, 0.9, 0.999).is_err());
        assert_eq!(p, before);
    }

    #[test]
    fn stage_order() {
        assert_eq!(Stage::after(None), Some(Stage::Warmup));
        assert_eq!(Stage::after(Some(Stage::Tune1)), Some(Stage::Prune));
        assert_eq!(Stage::after(Some(Stage::Tune2)), None);
        for s in Stage::ALL {
            assert_eq!(Stage::parse(s.name()).unwrap(), s);
        }
        assert!(Stage::parse("finetune").is_err());
    }

    #[test]
    fn report_round_trip() {
        let rows = vec![
            StageRow {
                stage: Stage::Warmup,
                active_prototypes: 24,
                val_miou: 0.125,
                train_loss: 1.0 / 3.0,
            },
            StageRow {
                stage: Stage::Joint,
                active_prototypes: 24,
                val_miou: 0.7,
                train_loss: 0.2,
            },
        ];
        assert_eq!(parse_report(&report_csv(&rows)).unwrap(), rows);
    }
}
