//! Two-phase self-training: a teacher learns depth and pose from
//! day-clear triplets by view synthesis; a student then learns from mixed
//! (possibly translated) inputs, distilled from the frozen teacher on the
//! original frames and aligned to a frozen reference encoder.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::camgeom::{warp_var, Pose, DEFAULT_Z_MIN};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::diffcore::{Graph, Var};
use crate::error::{Error, Result};
use crate::image::DepthMap;
use crate::losses::{
    distillation_var, reprojection_var, semantic_var, smoothness_var, teacher_loss_var,
    teacher_mask, LossReport, MaskConvention,
};
use crate::nets::{DepthNet, DepthNetConfig, ParamSet, PoseNet, PoseNetConfig};
use crate::rng;
use crate::synthscene::{Condition, SampleTriplet};
use crate::tensor::Tensor;
use crate::translate::{build_schedule, mix_sample_with, ConditionSet, Overlay, ScheduleMode};

/// Which image the frozen reference encoder sees for the semantic loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SemanticPairing {
    /// The original day-clear frame.
    Original,
    /// The same (possibly translated) frame the student sees.
    Input,
}

impl SemanticPairing {
    pub fn name(self) -> &'static str {
        match self {
            SemanticPairing::Original => "original",
            SemanticPairing::Input => "input",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(SemanticPairing::Original),
            "input" => Ok(SemanticPairing::Input),
            other => Err(Error::Config(format!("unknown semantic pairing {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_depth: f64,
    pub lr_pose: f64,
    /// Learning rate at the last step as a fraction of the initial one.
    pub lr_end_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub w_p: f64,
    pub w_sm: f64,
    pub w_t: f64,
    pub w_s: f64,
    pub w_sm_student: f64,
    pub schedule: ScheduleMode,
    pub mask_convention: MaskConvention,
    pub semantic_pairing: SemanticPairing,
    /// Start the student from the teacher's depth weights.
    pub student_from_teacher: bool,
    pub seed: u64,
    pub d_min: f64,
    pub d_max: f64,
    pub decoder: [usize; 4],
    pub z_min: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 4,
            lr_depth: 1e-3,
            lr_pose: 1e-3,
            lr_end_fraction: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            w_p: 1.0,
            w_sm: 1e-3,
            w_t: 1.0,
            w_s: 0.1,
            w_sm_student: 0.0,
            schedule: ScheduleMode::UniformPerCondition,
            mask_convention: MaskConvention::KeepTeacherReasonable,
            semantic_pairing: SemanticPairing::Original,
            student_from_teacher: true,
            seed: 0,
            d_min: 0.1,
            d_max: 80.0,
            decoder: DepthNetConfig::default().decoder,
            z_min: DEFAULT_Z_MIN,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected a boolean, got {v:?}"
        ))),
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 23] = [
        "epochs",
        "batch_size",
        "lr_depth",
        "lr_pose",
        "lr_end_fraction",
        "beta1",
        "beta2",
        "eps",
        "weight_decay",
        "w_p",
        "w_sm",
        "w_t",
        "w_s",
        "w_sm_student",
        "schedule",
        "mask_convention",
        "semantic_pairing",
        "student_from_teacher",
        "seed",
        "d_min",
        "d_max",
        "decoder",
        "z_min",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "lr_depth" => self.lr_depth = parse_num(key, v)?,
            "lr_pose" => self.lr_pose = parse_num(key, v)?,
            "lr_end_fraction" => self.lr_end_fraction = parse_num(key, v)?,
            "beta1" => self.beta1 = parse_num(key, v)?,
            "beta2" => self.beta2 = parse_num(key, v)?,
            "eps" => self.eps = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "w_p" => self.w_p = parse_num(key, v)?,
            "w_sm" => self.w_sm = parse_num(key, v)?,
            "w_t" => self.w_t = parse_num(key, v)?,
            "w_s" => self.w_s = parse_num(key, v)?,
            "w_sm_student" => self.w_sm_student = parse_num(key, v)?,
            "schedule" => {
                self.schedule = ScheduleMode::parse(v).map_err(|e| Error::Config(e.to_string()))?
            }
            "mask_convention" => {
                self.mask_convention =
                    MaskConvention::parse(v).map_err(|e| Error::Config(e.to_string()))?
            }
            "semantic_pairing" => self.semantic_pairing = SemanticPairing::parse(v)?,
            "student_from_teacher" => self.student_from_teacher = parse_bool(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "d_min" => self.d_min = parse_num(key, v)?,
            "d_max" => self.d_max = parse_num(key, v)?,
            "decoder" => {
                let parts = v
                    .split(',')
                    .map(|p| parse_num::<usize>(key, p.trim()))
                    .collect::<Result<Vec<_>>>()?;
                self.decoder = parts.try_into().map_err(|_| {
                    Error::Config(format!("decoder: expected four channel counts, got {v:?}"))
                })?;
            }
            "z_min" => self.z_min = parse_num(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_kv_text(text)?;
        Ok(cfg)
    }

    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1))
            })?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        self.validate()
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k, v)?;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [self.w_p, self.w_sm, self.w_t, self.w_s, self.w_sm_student];
        let rates = [self.lr_depth, self.lr_pose, self.eps];
        let ok = weights.iter().all(|w| w.is_finite() && *w >= 0.0)
            && rates.iter().all(|r| r.is_finite() && *r > 0.0)
            && self.batch_size >= 1
            && (0.0..=1.0).contains(&self.lr_end_fraction)
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.weight_decay >= 0.0
            && self.z_min > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid training config {self:?}")));
        }
        self.depth_config().validate()
    }

    /// Canonical `key = value` text; its hash identifies the run.
    pub fn to_kv_text(&self) -> String {
        let d = self.decoder;
        let mut s = String::new();
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "lr_depth = {:e}", self.lr_depth);
        let _ = writeln!(s, "lr_pose = {:e}", self.lr_pose);
        let _ = writeln!(s, "lr_end_fraction = {:e}", self.lr_end_fraction);
        let _ = writeln!(s, "beta1 = {:e}", self.beta1);
        let _ = writeln!(s, "beta2 = {:e}", self.beta2);
        let _ = writeln!(s, "eps = {:e}", self.eps);
        let _ = writeln!(s, "weight_decay = {:e}", self.weight_decay);
        let _ = writeln!(s, "w_p = {:e}", self.w_p);
        let _ = writeln!(s, "w_sm = {:e}", self.w_sm);
        let _ = writeln!(s, "w_t = {:e}", self.w_t);
        let _ = writeln!(s, "w_s = {:e}", self.w_s);
        let _ = writeln!(s, "w_sm_student = {:e}", self.w_sm_student);
        let _ = writeln!(s, "schedule = {}", self.schedule.name());
        let _ = writeln!(s, "mask_convention = {}", self.mask_convention.name());
        let _ = writeln!(s, "semantic_pairing = {}", self.semantic_pairing.name());
        let _ = writeln!(s, "student_from_teacher = {}", self.student_from_teacher);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "d_min = {:e}", self.d_min);
        let _ = writeln!(s, "d_max = {:e}", self.d_max);
        let _ = writeln!(s, "decoder = {},{},{},{}", d[0], d[1], d[2], d[3]);
        let _ = writeln!(s, "z_min = {:e}", self.z_min);
        s
    }

    pub fn hash(&self) -> String {
        hex::encode(&Sha256::digest(self.to_kv_text().as_bytes())[..8])
    }

    pub fn depth_config(&self) -> DepthNetConfig {
        DepthNetConfig {
            decoder: self.decoder,
            d_min: self.d_min,
            d_max: self.d_max,
            ..DepthNetConfig::default()
        }
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamW {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect()
        };
        AdamW {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + cfg.eps);
                *pi -= lr * (update + cfg.weight_decay * *pi);
            }
        }
    }
}

/// Linearly decayed learning rate for step `s` of `total`.
pub fn learning_rate(base: f64, s: usize, total: usize, end_fraction: f64) -> f64 {
    if total <= 1 {
        return base;
    }
    let f = s as f64 / (total - 1) as f64;
    base * ((1.0 - f) + f * end_fraction)
}

/// One optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub report: LossReport,
    pub lr: f64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let terms: Vec<String> = rows
        .first()
        .map(|r| r.report.per_term.keys().cloned().collect())
        .unwrap_or_default();
    let mut s = format!("step,epoch,total,{},lr\n", terms.join(","));
    for r in rows {
        let _ = write!(s, "{},{},{:e}", r.step, r.epoch, r.report.total);
        for t in &terms {
            let _ = write!(s, ",{:e}", r.report.term(t));
        }
        let _ = writeln!(s, ",{:e}", r.lr);
    }
    s
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    fs::write(path, log_csv(rows)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
    /// Mean total loss of every epoch.
    pub epoch_means: Vec<f64>,
}

/// Trained teacher networks.
#[derive(Clone, Debug, PartialEq)]
pub struct Teacher {
    pub depth: DepthNet,
    pub pose: PoseNet,
}

impl Teacher {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let pose_cfg = ck.meta.pose.clone().ok_or_else(|| {
            Error::Invalid(format!("{} checkpoint has no pose network", ck.meta.kind))
        })?;
        let depth = depth_from_checkpoint(ck)?;
        let mut pose = PoseNet::init(pose_cfg, &mut rng::stream(0, "layout"))?;
        let stored = ck.group("pose");
        if !stored.same_layout(&pose.params) {
            return Err(Error::Invalid(
                "checkpoint pose parameters do not match the pose network layout".into(),
            ));
        }
        pose.params = stored;
        Ok(Teacher { depth, pose })
    }
}

pub fn depth_from_checkpoint(ck: &Checkpoint) -> Result<DepthNet> {
    let mut depth = DepthNet::init(ck.meta.depth.clone(), &mut rng::stream(0, "layout"))?;
    let stored = ck.group("depth");
    if !stored.same_layout(&depth.params) {
        return Err(Error::Invalid(
            "checkpoint depth parameters do not match the depth network layout".into(),
        ));
    }
    if !stored.all_finite() {
        return Err(Error::NonFinite("checkpoint depth parameters".into()));
    }
    depth.params = stored;
    Ok(depth)
}

fn accumulate(acc: &mut [Tensor], grads: &[Tensor]) {
    for (a, g) in acc.iter_mut().zip(grads) {
        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
            *x += y;
        }
    }
}

fn zeros_like(p: &ParamSet) -> Vec<Tensor> {
    p.tensors()
        .iter()
        .map(|t| Tensor::zeros(t.shape()))
        .collect()
}

fn check_finite(p: &ParamSet, step: usize, what: &str) -> Result<()> {
    if p.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "{what} parameters after step {step}"
        )))
    }
}

/// Teacher objective for one triplet: `w_p L_p + w_sm L_sm`.
pub fn teacher_objective(
    g: &mut Graph,
    depth: &DepthNet,
    pose: &PoseNet,
    dp: &[Var],
    pp: &[Var],
    t: &SampleTriplet,
    cfg: &TrainConfig,
) -> Result<(Var, LossReport)> {
    let k = &t.intrinsics;
    let it = g.constant(t.curr.to_chw());
    let out = depth.forward(g, dp, it)?;
    let mut warps = Vec::with_capacity(2);
    for adj in [&t.prev, &t.next] {
        let ia = g.constant(adj.to_chw());
        let p = pose.forward(g, pp, it, ia)?;
        warps.push(warp_var(g, ia, out.depth, &p, k, cfg.z_min)?);
    }
    let (rep, _) = reprojection_var(g, it, &warps)?;
    let sm = smoothness_var(g, out.disparity, it)?;
    let a = g.mul_scalar(rep.loss, cfg.w_p)?;
    let b = g.mul_scalar(sm, cfg.w_sm)?;
    let total = g.add(a, b)?;
    let report = LossReport::from_terms(&[
        ("photometric", cfg.w_p, g.value(rep.loss).item()),
        ("smoothness", cfg.w_sm, g.value(sm).item()),
    ]);
    Ok((total, report))
}

fn mean_reports(reports: &[LossReport]) -> LossReport {
    let n = reports.len() as f64;
    let mut terms: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for r in reports {
        for (k, v) in &r.per_term {
            let e = terms.entry(k.clone()).or_insert((r.weights[k], 0.0));
            e.1 += v / n;
        }
    }
    let list: Vec<(&str, f64, f64)> = terms
        .iter()
        .map(|(k, &(w, v))| (k.as_str(), w, v))
        .collect();
    LossReport::from_terms(&list)
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::Rng::from_seed_u64(rng::item_seed(
        seed,
        "shuffle",
        epoch as u64,
    )));
    order
}

trait FromSeedU64 {
    fn from_seed_u64(seed: u64) -> Self;
}

impl FromSeedU64 for rng::Rng {
    fn from_seed_u64(seed: u64) -> Self {
        rand::SeedableRng::seed_from_u64(seed)
    }
}

pub fn train_teacher(data: &[SampleTriplet], cfg: &TrainConfig) -> Result<TrainOutput> {
    train_teacher_with(data, cfg, &mut |_, _| {})
}

/// As [`train_teacher`], calling `on_epoch(epoch, mean_loss)` after each epoch.
pub fn train_teacher_with(
    data: &[SampleTriplet],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(usize, f64),
) -> Result<TrainOutput> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid(
            "teacher training needs at least one triplet".into(),
        ));
    }
    if let Some(t) = data.iter().find(|t| t.condition != Condition::DayClear) {
        return Err(Error::Invalid(format!(
            "teacher training expects day-clear samples; {} is {}",
            t.id, t.condition
        )));
    }
    let mut init = rng::stream(cfg.seed, "init");
    let mut depth = DepthNet::init(cfg.depth_config(), &mut init)?;
    let mut pose = PoseNet::init(PoseNetConfig::default(), &mut init)?;
    let mut opt_d = AdamW::new(&depth.params);
    let mut opt_p = AdamW::new(&pose.params);
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut log = Vec::with_capacity(total);
    let mut epoch_means = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(data.len(), cfg.seed, epoch);
        let mut epoch_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let per_sample = batch
                .par_iter()
                .map(|&i| {
                    let mut g = Graph::new();
                    let dp = depth.params.bind(&mut g, true);
                    let pp = pose.params.bind(&mut g, true);
                    let (loss, report) =
                        teacher_objective(&mut g, &depth, &pose, &dp, &pp, &data[i], cfg)?;
                    let scaled = g.mul_scalar(loss, 1.0 / batch.len() as f64)?;
                    let mut grads = g.backward(scaled)?;
                    let gd: Vec<Tensor> = dp.iter().map(|&v| grads.take(v)).collect();
                    let gp: Vec<Tensor> = pp.iter().map(|&v| grads.take(v)).collect();
                    Ok((gd, gp, report))
                })
                .collect::<Result<Vec<_>>>()?;
            // summed in batch order so the result is independent of scheduling
            let mut gd = zeros_like(&depth.params);
            let mut gp = zeros_like(&pose.params);
            let mut reports = Vec::with_capacity(batch.len());
            for (sd, sp, report) in per_sample {
                accumulate(&mut gd, &sd);
                accumulate(&mut gp, &sp);
                reports.push(report);
            }
            let lr_d = learning_rate(cfg.lr_depth, step, total, cfg.lr_end_fraction);
            let lr_p = learning_rate(cfg.lr_pose, step, total, cfg.lr_end_fraction);
            opt_d.update(&mut depth.params, &gd, lr_d, cfg);
            opt_p.update(&mut pose.params, &gp, lr_p, cfg);
            step += 1;
            check_finite(&depth.params, step, "depth")?;
            check_finite(&pose.params, step, "pose")?;
            let report = mean_reports(&reports);
            epoch_sum += report.total * batch.len() as f64;
            log.push(LogRow {
                step,
                epoch: epoch + 1,
                report,
                lr: lr_d,
            });
        }
        let mean = epoch_sum / data.len() as f64;
        epoch_means.push(mean);
        on_epoch(epoch + 1, mean);
    }
    let mut ck = Checkpoint {
        meta: CheckpointMeta {
            kind: "teacher".into(),
            epoch: cfg.epochs,
            step: step as u64,
            config_hash: cfg.hash(),
            depth: depth.config.clone(),
            pose: Some(pose.config.clone()),
        },
        arrays: ParamSet::default(),
    };
    ck.add_group("depth", &depth.params);
    ck.add_group("pose", &pose.params);
    add_optimizer(&mut ck, "depth", &depth.params, &opt_d);
    add_optimizer(&mut ck, "pose", &pose.params, &opt_p);
    Ok(TrainOutput {
        checkpoint: ck,
        log,
        epoch_means,
    })
}

fn add_optimizer(ck: &mut Checkpoint, group: &str, params: &ParamSet, opt: &AdamW) {
    for ((n, _), (m, v)) in params.iter().zip(opt.m.iter().zip(&opt.v)) {
        ck.arrays.push(format!("adam.m/{group}/{n}"), m.clone());
        ck.arrays.push(format!("adam.v/{group}/{n}"), v.clone());
    }
    ck.arrays.push(
        format!("adam.step/{group}"),
        Tensor::scalar(opt.step as f64),
    );
}

/// Frozen teacher outputs for one day-clear triplet.
#[derive(Clone, Debug)]
pub struct TeacherTargets {
    pub depth: DepthMap,
    /// `P_{t->t-1}`, `P_{t->t+1}` predicted on the original frames.
    pub poses: [Pose; 2],
    /// Reference features of the original frame.
    pub features: Tensor,
}

pub fn teacher_targets(
    teacher: &Teacher,
    reference: &ParamSet,
    t: &SampleTriplet,
) -> Result<TeacherTargets> {
    let (depth, _) = teacher.depth.predict(&t.curr)?;
    let poses = [
        teacher.pose.predict(&t.curr, &t.prev)?,
        teacher.pose.predict(&t.curr, &t.next)?,
    ];
    Ok(TeacherTargets {
        depth,
        poses,
        features: reference_features(reference, &t.curr)?,
    })
}

fn reference_features(reference: &ParamSet, img: &crate::image::Image) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = reference.bind(&mut g, false);
    let x = g.constant(img.to_chw());
    let feats = DepthNet::encode(&mut g, &p, x)?;
    Ok(g.value(feats[3]).clone())
}

/// Student objective for one mixed sample: `w_t L_t + w_s L_s (+ w_sm L_sm)`.
#[allow(clippy::too_many_arguments)]
pub fn student_objective(
    g: &mut Graph,
    student: &DepthNet,
    sp: &[Var],
    original: &SampleTriplet,
    mixed: &SampleTriplet,
    targets: &TeacherTargets,
    reference: &ParamSet,
    cfg: &TrainConfig,
) -> Result<(Var, LossReport)> {
    let input = g.constant(mixed.curr.to_chw());
    let out = student.forward(g, sp, input)?;
    let ds = DepthMap::from_tensor(g.value(out.depth))?;
    let mask = teacher_mask(
        &original.curr,
        &[original.prev.clone(), original.next.clone()],
        &ds,
        &targets.depth,
        &targets.poses,
        &original.intrinsics,
        cfg.mask_convention,
    )?;
    let dt = g.constant(targets.depth.to_tensor());
    let ld = distillation_var(g, out.depth, dt)?;
    let lt = teacher_loss_var(g, &mask, ld)?;
    let feats_ref = match cfg.semantic_pairing {
        SemanticPairing::Original => targets.features.clone(),
        SemanticPairing::Input => reference_features(reference, &mixed.curr)?,
    };
    let fr = g.constant(feats_ref);
    let ls = semantic_var(g, out.features, fr)?;
    let a = g.mul_scalar(lt, cfg.w_t)?;
    let b = g.mul_scalar(ls, cfg.w_s)?;
    let mut total = g.add(a, b)?;
    let mut terms = vec![
        ("teacher", cfg.w_t, g.value(lt).item()),
        ("semantic", cfg.w_s, g.value(ls).item()),
    ];
    if cfg.w_sm_student > 0.0 {
        let sm = smoothness_var(g, out.disparity, input)?;
        let c = g.mul_scalar(sm, cfg.w_sm_student)?;
        total = g.add(total, c)?;
        terms.push(("smoothness", cfg.w_sm_student, g.value(sm).item()));
    }
    Ok((total, LossReport::from_terms(&terms)))
}

pub fn train_student(
    data: &[SampleTriplet],
    teacher_ck: &Checkpoint,
    cfg: &TrainConfig,
    set: &ConditionSet,
    overlay: Option<&Overlay>,
) -> Result<TrainOutput> {
    train_student_with(data, teacher_ck, cfg, set, overlay, &mut |_, _| {})
}

pub fn train_student_with(
    data: &[SampleTriplet],
    teacher_ck: &Checkpoint,
    cfg: &TrainConfig,
    set: &ConditionSet,
    overlay: Option<&Overlay>,
    on_epoch: &mut dyn FnMut(usize, f64),
) -> Result<TrainOutput> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid(
            "student training needs at least one triplet".into(),
        ));
    }
    let teacher = Teacher::from_checkpoint(teacher_ck)?;
    let reference = teacher.depth.params.filter_prefix("enc");
    let schedule = build_schedule(set, cfg.schedule)?;
    let targets = data
        .par_iter()
        .map(|t| teacher_targets(&teacher, &reference, t))
        .collect::<Result<Vec<_>>>()?;

    let mut student = if cfg.student_from_teacher {
        teacher.depth.clone()
    } else {
        DepthNet::init(
            teacher.depth.config.clone(),
            &mut rng::stream(cfg.seed, "init-student"),
        )?
    };
    let mut opt = AdamW::new(&student.params);
    let mut mix_rng = rng::stream(cfg.seed, "mix");
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut log = Vec::with_capacity(total);
    let mut epoch_means = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(data.len(), cfg.seed, epoch);
        let mut epoch_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            // drawn in batch order before any parallel work
            let mixed = batch
                .iter()
                .map(|&i| mix_sample_with(&data[i], &schedule, set, overlay, &mut mix_rng))
                .collect::<Result<Vec<_>>>()?;
            let per_sample = batch
                .par_iter()
                .zip(&mixed)
                .map(|(&i, m)| {
                    let mut g = Graph::new();
                    let sp = student.params.bind(&mut g, true);
                    let (loss, report) = student_objective(
                        &mut g,
                        &student,
                        &sp,
                        &data[i],
                        m,
                        &targets[i],
                        &reference,
                        cfg,
                    )?;
                    let scaled = g.mul_scalar(loss, 1.0 / batch.len() as f64)?;
                    let mut grads = g.backward(scaled)?;
                    let gs: Vec<Tensor> = sp.iter().map(|&v| grads.take(v)).collect();
                    Ok((gs, report))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grads_acc = zeros_like(&student.params);
            let mut reports = Vec::with_capacity(batch.len());
            for (gs, report) in per_sample {
                accumulate(&mut grads_acc, &gs);
                reports.push(report);
            }
            let lr = learning_rate(cfg.lr_depth, step, total, cfg.lr_end_fraction);
            opt.update(&mut student.params, &grads_acc, lr, cfg);
            step += 1;
            check_finite(&student.params, step, "student depth")?;
            let report = mean_reports(&reports);
            epoch_sum += report.total * batch.len() as f64;
            log.push(LogRow {
                step,
                epoch: epoch + 1,
                report,
                lr,
            });
        }
        let mean = epoch_sum / data.len() as f64;
        epoch_means.push(mean);
        on_epoch(epoch + 1, mean);
    }
    let mut ck = Checkpoint {
        meta: CheckpointMeta {
            kind: "student".into(),
            epoch: cfg.epochs,
            step: step as u64,
            config_hash: cfg.hash(),
            depth: student.config.clone(),
            pose: None,
        },
        arrays: ParamSet::default(),
    };
    ck.add_group("depth", &student.params);
    add_optimizer(&mut ck, "depth", &student.params, &opt);
    Ok(TrainOutput {
        checkpoint: ck,
        log,
        epoch_means,
    })
}

/// Depth of `image` from a teacher or student checkpoint's depth network.
pub fn predict_depth(ck: &Checkpoint, image: &crate::image::Image) -> Result<DepthMap> {
    Ok(depth_from_checkpoint(ck)?.predict(image)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthscene::{default_intrinsics, sample_triplet, MotionConfig, SceneConfig};

    fn data(n: u64) -> Vec<SampleTriplet> {
        (0..n)
            .map(|s| {
                sample_triplet(
                    &SceneConfig::default(),
                    &MotionConfig::default(),
                    &default_intrinsics(),
                    s,
                )
                .unwrap()
                .quantized()
            })
            .collect()
    }

    fn small(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 2,
            ..Default::default()
        }
    }

    #[test]
    fn config_text_roundtrip() {
        let mut cfg = TrainConfig::default();
        cfg.apply_override("w_s=0.25").unwrap();
        cfg.apply_override("mask_convention = eq5-literal").unwrap();
        cfg.apply_override("decoder=8,8,8,8").unwrap();
        let text = cfg.to_kv_text();
        for k in TrainConfig::KEYS {
            assert!(
                text.contains(&format!("\n{k} = ")) || text.starts_with(&format!("{k} = ")),
                "{k}"
            );
        }
        let back = TrainConfig::from_kv_text(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(cfg.hash(), TrainConfig::default().hash());
    }

    #[test]
    fn config_errors_name_the_problem() {
        let err = TrainConfig::from_kv_text("epochs = 3\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(TrainConfig::from_kv_text("w_t = -1").is_err());
        assert!(TrainConfig::from_kv_text("epochs 3").is_err());
        let cfg = TrainConfig::from_kv_text("# comment\n\nepochs = 3 # trailing\n").unwrap();
        assert_eq!(cfg.epochs, 3);
    }

    #[test]
    fn linear_decay_endpoints() {
        assert_eq!(learning_rate(1.0, 0, 11, 0.0), 1.0);
        assert!((learning_rate(1.0, 5, 11, 0.0) - 0.5).abs() < 1e-15);
        assert_eq!(learning_rate(1.0, 10, 11, 0.1), 0.1);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let d = data(2);
        let cfg = small(0);
        let out = train_teacher(&d, &cfg).unwrap();
        let init = DepthNet::init(cfg.depth_config(), &mut rng::stream(cfg.seed, "init")).unwrap();
        assert_eq!(out.checkpoint.group("depth"), init.params);
        assert!(out.log.is_empty());
    }

    #[test]
    fn teacher_rejects_translated_samples() {
        let mut d = data(1);
        d[0].condition = Condition::Rain;
        assert!(train_teacher(&d, &small(1)).is_err());
    }

    #[test]
    fn training_is_reproducible_and_decomposes() {
        let d = data(3);
        let a = train_teacher(&d, &small(1)).unwrap();
        let b = train_teacher(&d, &small(1)).unwrap();
        assert_eq!(
            a.checkpoint.to_bytes().unwrap(),
            b.checkpoint.to_bytes().unwrap()
        );
        assert_eq!(log_csv(&a.log), log_csv(&b.log));
        for row in &a.log {
            assert!(row.report.decomposition_error() < 1e-9);
        }
        assert!(log_csv(&a.log).starts_with("step,epoch,total,photometric,smoothness,lr\n"));
    }

    #[test]
    fn student_keeps_teacher_frozen() {
        let d = data(2);
        let teacher = train_teacher(&d, &small(1)).unwrap().checkpoint;
        let before = teacher.to_bytes().unwrap();
        let out = train_student(&d, &teacher, &small(1), &ConditionSet::default(), None).unwrap();
        assert_eq!(teacher.to_bytes().unwrap(), before);
        assert!(out.checkpoint.meta.pose.is_none());
        assert!(out
            .log
            .iter()
            .all(|r| r.report.decomposition_error() < 1e-9));
    }

    #[test]
    fn empty_mask_and_no_semantic_term_gives_zero_gradient() {
        let d = data(1);
        let teacher_ck = train_teacher(&d, &small(0)).unwrap().checkpoint;
        let teacher = Teacher::from_checkpoint(&teacher_ck).unwrap();
        let reference = teacher.depth.params.filter_prefix("enc");
        let targets = teacher_targets(&teacher, &reference, &d[0]).unwrap();
        // student == teacher, so the strict convention masks every pixel out
        let cfg = TrainConfig {
            w_s: 0.0,
            mask_convention: MaskConvention::KeepStudentBetter,
            ..Default::default()
        };
        let mut g = Graph::new();
        let sp = teacher.depth.params.bind(&mut g, true);
        let (loss, _) = student_objective(
            &mut g,
            &teacher.depth,
            &sp,
            &d[0],
            &d[0],
            &targets,
            &reference,
            &cfg,
        )
        .unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
        let grads = g.backward(loss).unwrap();
        for &v in &sp {
            assert!(grads.wrt(v).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn bad_checkpoint_rejected() {
        let d = data(1);
        let mut ck = train_teacher(&d, &small(0)).unwrap().checkpoint;
        ck.meta.pose = None;
        assert!(train_student(&d, &ck, &small(1), &ConditionSet::default(), None).is_err());
    }
}
