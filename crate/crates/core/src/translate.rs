//! Depth-preserving condition translation and the sample mixing schedule.
//!
//! Built-in degradations stand in for a generative translator; frames
//! produced externally can be ingested as an overlay and take precedence.
//! Geometry (depth, poses, intrinsics) is never touched.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{read_png, Dataset, FRAMES};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{self, item_seed};
use crate::synthscene::{Condition, SampleTriplet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NightParams {
    pub gamma: f64,
    pub gain: f64,
    pub noise: f64,
    /// Inclusive range of glare blob counts.
    pub glare: (usize, usize),
}

impl Default for NightParams {
    fn default() -> Self {
        NightParams {
            gamma: 2.2,
            gain: 0.25,
            noise: 0.02,
            glare: (1, 3),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RainParams {
    pub contrast: f64,
    pub noise: f64,
    /// Streaks per 100 pixels.
    pub streak_density: f64,
    /// Blend weight of the streak overlay.
    pub streak_opacity: f64,
}

impl Default for RainParams {
    fn default() -> Self {
        RainParams {
            contrast: 0.7,
            noise: 0.01,
            streak_density: 0.25,
            streak_opacity: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConditionSet {
    pub conditions: Vec<Condition>,
    pub night: NightParams,
    pub rain: RainParams,
}

impl Default for ConditionSet {
    fn default() -> Self {
        ConditionSet {
            conditions: vec![Condition::Night, Condition::Rain],
            night: NightParams::default(),
            rain: RainParams::default(),
        }
    }
}

impl ConditionSet {
    pub fn new(conditions: Vec<Condition>) -> Result<Self> {
        let set = ConditionSet {
            conditions,
            ..Default::default()
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.conditions.is_empty() {
            return Err(Error::Invalid("condition set is empty".into()));
        }
        for (i, c) in self.conditions.iter().enumerate() {
            if *c == Condition::DayClear {
                return Err(Error::Invalid(
                    "day-clear is not a challenging condition".into(),
                ));
            }
            if self.conditions[..i].contains(c) {
                return Err(Error::Invalid(format!("duplicate condition {c}")));
            }
        }
        Ok(())
    }
}

/// Image-space structure shared by all frames of a triplet.
struct Fields {
    glare: Vec<(f64, f64, f64, f64)>,
    streaks: Vec<f64>,
}

const GLARE_COLOUR: [f64; 3] = [1.0, 0.85, 0.55];

fn night_fields(h: usize, w: usize, p: &NightParams, rng: &mut impl Rng) -> Fields {
    let n = rng.gen_range(p.glare.0..=p.glare.1);
    let glare = (0..n)
        .map(|_| {
            let x = rng.gen_range(0.0..w as f64);
            let y = rng.gen_range(0.0..h as f64 * 0.6);
            let radius = rng.gen_range(2.0..5.0);
            let amplitude = rng.gen_range(0.4..0.8);
            (x, y, radius, amplitude)
        })
        .collect();
    Fields {
        glare,
        streaks: Vec::new(),
    }
}

fn rain_fields(h: usize, w: usize, p: &RainParams, rng: &mut impl Rng) -> Fields {
    let mut streaks = vec![0.0; h * w];
    let count = (p.streak_density * (h * w) as f64 / 100.0).round() as usize;
    // falling slightly to the right
    let (dx, dy) = (0.35, 1.0);
    let norm = f64::hypot(dx, dy);
    for _ in 0..count {
        let (mut x, mut y) = (rng.gen_range(0.0..w as f64), rng.gen_range(-4.0..h as f64));
        let len = rng.gen_range(4.0..9.0);
        let strength = rng.gen_range(0.5..1.0);
        let mut s = 0.0;
        while s < len {
            let (xi, yi) = (x.round(), y.round());
            if xi >= 0.0 && yi >= 0.0 && (xi as usize) < w && (yi as usize) < h {
                let cell = &mut streaks[yi as usize * w + xi as usize];
                *cell = f64::max(*cell, strength);
            }
            x += 0.5 * dx / norm;
            y += 0.5 * dy / norm;
            s += 0.5;
        }
    }
    Fields {
        glare: Vec::new(),
        streaks,
    }
}

fn add_noise(img: &mut Image, sigma: f64, rng: &mut impl Rng) {
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("positive sigma");
        for v in img.data_mut() {
            *v += normal.sample(rng);
        }
    }
}

fn clamp01(img: &mut Image) {
    for v in img.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

/// 3x3 box blur with replicate padding.
fn blur3(img: &Image) -> Image {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    Image::from_fn(h, w, c, |y, x, ch| {
        let mut acc = 0.0;
        for dy in [-1i64, 0, 1] {
            for dx in [-1i64, 0, 1] {
                let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                acc += img.get(yy, xx, ch);
            }
        }
        acc / 9.0
    })
}

fn apply_night(img: &Image, p: &NightParams, f: &Fields, rng: &mut impl Rng) -> Image {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    // noise enters before the tone curve, so the gain scales it with the signal
    let mut noisy = img.clone();
    add_noise(&mut noisy, p.noise, rng);
    clamp01(&mut noisy);
    let mut out = Image::from_fn(h, w, c, |y, x, ch| {
        let mut v = p.gain * noisy.get(y, x, ch).powf(p.gamma);
        for &(gx, gy, r, a) in &f.glare {
            let d2 = (x as f64 - gx).powi(2) + (y as f64 - gy).powi(2);
            v += a * GLARE_COLOUR[ch % 3] * (-0.5 * d2 / (r * r)).exp();
        }
        v
    });
    clamp01(&mut out);
    out
}

fn apply_rain(img: &Image, p: &RainParams, f: &Fields, rng: &mut impl Rng) -> Image {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let means: Vec<f64> = (0..c)
        .map(|ch| (0..h * w).map(|i| img.data()[i * c + ch]).sum::<f64>() / (h * w) as f64)
        .collect();
    let flat = Image::from_fn(h, w, c, |y, x, ch| {
        means[ch] + p.contrast * (img.get(y, x, ch) - means[ch])
    });
    let blurred = blur3(&flat);
    let mut out = Image::from_fn(h, w, c, |y, x, ch| {
        let s = p.streak_opacity * f.streaks[y * w + x];
        blurred.get(y, x, ch) * (1.0 - s) + 0.9 * s
    });
    add_noise(&mut out, p.noise, rng);
    clamp01(&mut out);
    out
}

fn fields_for(
    condition: Condition,
    h: usize,
    w: usize,
    set: &ConditionSet,
    seed: u64,
) -> Result<Fields> {
    let mut r = rng::stream(seed, "structure");
    match condition {
        Condition::Night => Ok(night_fields(h, w, &set.night, &mut r)),
        Condition::Rain => Ok(rain_fields(h, w, &set.rain, &mut r)),
        Condition::DayClear => Err(Error::Invalid("day-clear is not a degradation".into())),
    }
}

fn apply(
    img: &Image,
    condition: Condition,
    set: &ConditionSet,
    fields: &Fields,
    noise_seed: u64,
) -> Image {
    let mut r = rng::Rng::seed_from_u64(noise_seed);
    match condition {
        Condition::Night => apply_night(img, &set.night, fields, &mut r),
        Condition::Rain => apply_rain(img, &set.rain, fields, &mut r),
        Condition::DayClear => img.clone(),
    }
}

/// Degrades one image with the built-in parameters.
pub fn degrade(image: &Image, condition: Condition, seed: u64) -> Result<Image> {
    degrade_with(image, condition, seed, &ConditionSet::default())
}

pub fn degrade_with(
    image: &Image,
    condition: Condition,
    seed: u64,
    set: &ConditionSet,
) -> Result<Image> {
    let fields = fields_for(condition, image.height(), image.width(), set, seed)?;
    Ok(apply(
        image,
        condition,
        set,
        &fields,
        item_seed(seed, "noise", 0),
    ))
}

/// Degrades all three frames with a shared glare/streak structure and
/// independent per-frame noise. Geometry is copied untouched.
pub fn degrade_triplet(
    t: &SampleTriplet,
    condition: Condition,
    seed: u64,
    set: &ConditionSet,
) -> Result<SampleTriplet> {
    let fields = fields_for(condition, t.curr.height(), t.curr.width(), set, seed)?;
    let mut out = t.clone();
    for (i, frame) in [&mut out.prev, &mut out.curr, &mut out.next]
        .into_iter()
        .enumerate()
    {
        *frame = apply(
            frame,
            condition,
            set,
            &fields,
            item_seed(seed, "noise", i as u64),
        );
    }
    out.condition = condition;
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleMode {
    /// Unchanged and every condition each get `1/(|C|+1)`.
    #[default]
    UniformPerCondition,
    /// Unchanged gets `|C|/(|C|+1)`; conditions share the rest.
    MostlyUnchanged,
}

impl ScheduleMode {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleMode::UniformPerCondition => "uniform-per-condition",
            ScheduleMode::MostlyUnchanged => "paper-literal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform-per-condition" | "uniform" => Ok(ScheduleMode::UniformPerCondition),
            "paper-literal" => Ok(ScheduleMode::MostlyUnchanged),
            other => Err(Error::Invalid(format!("unknown schedule mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixSchedule {
    pub p_unchanged: f64,
    pub conditions: Vec<(Condition, f64)>,
}

pub fn build_schedule(set: &ConditionSet, mode: ScheduleMode) -> Result<MixSchedule> {
    set.validate()?;
    let n = set.conditions.len() as f64;
    let p_unchanged = match mode {
        ScheduleMode::UniformPerCondition => 1.0 / (n + 1.0),
        ScheduleMode::MostlyUnchanged => n / (n + 1.0),
    };
    let each = (1.0 - p_unchanged) / n;
    Ok(MixSchedule {
        p_unchanged,
        conditions: set.conditions.iter().map(|&c| (c, each)).collect(),
    })
}

impl MixSchedule {
    /// Never translates.
    pub fn unchanged() -> Self {
        MixSchedule {
            p_unchanged: 1.0,
            conditions: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.p_unchanged + self.conditions.iter().map(|c| c.1).sum::<f64>();
        let ok = self.p_unchanged >= 0.0
            && self.conditions.iter().all(|c| c.1 >= 0.0)
            && (total - 1.0).abs() < 1e-12;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!(
                "schedule probabilities do not form a distribution: {self:?}"
            )))
        }
    }

    /// `None` keeps the sample unchanged.
    pub fn draw(&self, rng: &mut impl Rng) -> Option<Condition> {
        let u: f64 = rng.gen();
        let mut acc = self.p_unchanged;
        if u < acc {
            return None;
        }
        for &(c, p) in &self.conditions {
            acc += p;
            if u < acc {
                return Some(c);
            }
        }
        self.conditions
            .iter()
            .rev()
            .find(|c| c.1 > 0.0)
            .map(|c| c.0)
    }
}

/// Externally translated frames keyed by sample id and condition.
#[derive(Clone, Debug, Default)]
pub struct Overlay {
    frames: BTreeMap<(String, Condition), [Image; 3]>,
}

impl Overlay {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn get(&self, id: &str, condition: Condition) -> Option<&[Image; 3]> {
        self.frames.get(&(id.to_string(), condition))
    }

    pub fn insert(&mut self, id: &str, condition: Condition, frames: [Image; 3]) {
        self.frames.insert((id.to_string(), condition), frames);
    }
}

/// Reads `<dir>/<id>/<condition>/frame_{prev,curr,next}.png`. Every id must
/// exist in `dataset` and every frame must match its size; all offending
/// entries are listed in the error.
pub fn ingest_external(dir: &Path, dataset: &Dataset) -> Result<Overlay> {
    let mut overlay = Overlay::default();
    let mut problems = Vec::new();
    let ids = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries: Vec<_> = ids
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .collect();
    entries.sort_by_key(|e| e.file_name());
    let size = match dataset.ids.first() {
        Some(_) => {
            let t = dataset.load(0)?;
            (t.curr.height(), t.curr.width())
        }
        None => (0, 0),
    };
    for entry in entries {
        let id = entry.file_name().to_string_lossy().into_owned();
        if !dataset.ids.contains(&id) {
            problems.push(format!("{id}: not in split {}", dataset.split));
            continue;
        }
        let mut conds: Vec<_> = fs::read_dir(entry.path())
            .map_err(|e| Error::io(entry.path(), e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .collect();
        conds.sort_by_key(|e| e.file_name());
        for c in conds {
            let tag = c.file_name().to_string_lossy().into_owned();
            let condition = match Condition::parse(&tag) {
                Ok(Condition::DayClear) | Err(_) => {
                    problems.push(format!("{id}/{tag}: not a challenging condition"));
                    continue;
                }
                Ok(cond) => cond,
            };
            let mut frames = Vec::with_capacity(3);
            for name in FRAMES {
                let img = read_png(&c.path().join(name))?;
                if (img.height(), img.width()) != size {
                    problems.push(format!(
                        "{id}/{tag}/{name}: {}x{} does not match {}x{}",
                        img.width(),
                        img.height(),
                        size.1,
                        size.0
                    ));
                }
                frames.push(img);
            }
            let [prev, curr, next]: [Image; 3] = frames.try_into().expect("three frames");
            overlay.insert(&id, condition, [prev, curr, next]);
        }
    }
    if problems.is_empty() {
        Ok(overlay)
    } else {
        Err(Error::Invalid(format!(
            "external frames rejected: {}",
            problems.join("; ")
        )))
    }
}

/// Draws an outcome for a day-clear sample and translates it accordingly.
/// Overlay frames win over the built-in degradation.
pub fn mix_sample_with(
    sample: &SampleTriplet,
    schedule: &MixSchedule,
    set: &ConditionSet,
    overlay: Option<&Overlay>,
    rng: &mut impl Rng,
) -> Result<SampleTriplet> {
    if sample.condition != Condition::DayClear {
        return Err(Error::Invalid(format!(
            "sample {} is {}, mixing expects day-clear input",
            sample.id, sample.condition
        )));
    }
    let Some(condition) = schedule.draw(rng) else {
        return Ok(sample.clone());
    };
    let seed: u64 = rng.gen();
    if let Some(frames) = overlay.and_then(|o| o.get(&sample.id, condition)) {
        let mut out = sample.clone();
        [out.prev, out.curr, out.next] = frames.clone();
        out.condition = condition;
        return Ok(out);
    }
    degrade_triplet(sample, condition, seed, set)
}

pub fn mix_sample(
    sample: &SampleTriplet,
    schedule: &MixSchedule,
    rng: &mut impl Rng,
) -> Result<SampleTriplet> {
    mix_sample_with(sample, schedule, &ConditionSet::default(), None, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthscene::{default_intrinsics, sample_triplet, MotionConfig, SceneConfig};

    fn triplet(seed: u64) -> SampleTriplet {
        sample_triplet(
            &SceneConfig::default(),
            &MotionConfig::default(),
            &default_intrinsics(),
            seed,
        )
        .unwrap()
    }

    #[test]
    fn night_darkens() {
        let t = triplet(0);
        for seed in 0..5 {
            let n = degrade(&t.curr, Condition::Night, seed).unwrap();
            let mean = |img: &Image| {
                img.luminance().iter().sum::<f64>() / (img.height() * img.width()) as f64
            };
            assert!(mean(&n) < mean(&t.curr));
            assert!(n.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn degradation_is_deterministic() {
        let t = triplet(1);
        for c in [Condition::Night, Condition::Rain] {
            assert_eq!(
                degrade(&t.curr, c, 9).unwrap(),
                degrade(&t.curr, c, 9).unwrap()
            );
            assert_ne!(
                degrade(&t.curr, c, 9).unwrap(),
                degrade(&t.curr, c, 10).unwrap()
            );
        }
        assert!(degrade(&t.curr, Condition::DayClear, 0).is_err());
    }

    #[test]
    fn triplet_shares_structure_but_not_noise() {
        let t = triplet(2);
        let d = degrade_triplet(&t, Condition::Rain, 4, &ConditionSet::default()).unwrap();
        assert_eq!(d.condition, Condition::Rain);
        assert_eq!(d.gt_depth, t.gt_depth);
        assert_eq!(d.pose_next, t.pose_next);
        assert_ne!(d.prev, d.curr);
    }

    #[test]
    fn degraded_triplets_stay_photo_consistent() {
        let k = default_intrinsics();
        let set = ConditionSet::default();
        for seed in 0..5 {
            let t = triplet(seed).quantized();
            for c in [Condition::Night, Condition::Rain] {
                let d = degrade_triplet(&t, c, seed, &set).unwrap();
                let (mut sum, mut n) = (0.0, 0usize);
                for (img, pose) in d.adjacent() {
                    let (warped, valid) =
                        crate::camgeom::synthesize_view(img, &d.gt_depth, pose, &k).unwrap();
                    let pe = crate::losses::photometric_error(&d.curr, &warped).unwrap();
                    for (p, &v) in pe.data().iter().zip(valid.data()) {
                        if v {
                            sum += p;
                            n += 1;
                        }
                    }
                }
                assert!(
                    sum / (n as f64) < 0.05,
                    "{c} seed {seed}: {}",
                    sum / n as f64
                );
            }
        }
    }

    #[test]
    fn schedule_probabilities() {
        let two = ConditionSet::default();
        let u = build_schedule(&two, ScheduleMode::UniformPerCondition).unwrap();
        assert!((u.p_unchanged - 1.0 / 3.0).abs() < 1e-15);
        assert!(u.conditions.iter().all(|c| (c.1 - 1.0 / 3.0).abs() < 1e-15));
        let p = build_schedule(&two, ScheduleMode::MostlyUnchanged).unwrap();
        assert!((p.p_unchanged - 2.0 / 3.0).abs() < 1e-15);
        assert!(p.conditions.iter().all(|c| (c.1 - 1.0 / 6.0).abs() < 1e-15));
        let one = ConditionSet::new(vec![Condition::Night]).unwrap();
        for mode in [
            ScheduleMode::UniformPerCondition,
            ScheduleMode::MostlyUnchanged,
        ] {
            let s = build_schedule(&one, mode).unwrap();
            assert_eq!((s.p_unchanged, s.conditions[0].1), (0.5, 0.5));
            s.validate().unwrap();
        }
    }

    #[test]
    fn bad_condition_sets_rejected() {
        assert!(ConditionSet::new(vec![]).is_err());
        assert!(ConditionSet::new(vec![Condition::Night, Condition::Night]).is_err());
        assert!(ConditionSet::new(vec![Condition::DayClear]).is_err());
    }

    #[test]
    fn degenerate_schedule_is_identity() {
        let t = triplet(3);
        let mut r = rng::stream(0, "mix");
        for _ in 0..20 {
            assert_eq!(
                mix_sample(&t, &MixSchedule::unchanged(), &mut r).unwrap(),
                t
            );
        }
    }

    #[test]
    fn mixing_rejects_translated_input() {
        let mut t = triplet(4);
        t.condition = Condition::Night;
        let s = build_schedule(&ConditionSet::default(), ScheduleMode::default()).unwrap();
        assert!(mix_sample(&t, &s, &mut rng::stream(0, "mix")).is_err());
    }

    #[test]
    fn overlay_frames_take_precedence() {
        let t = triplet(5);
        let marker = Image::filled(t.curr.height(), t.curr.width(), 3, 0.5);
        let mut overlay = Overlay::default();
        overlay.insert(
            &t.id,
            Condition::Night,
            [marker.clone(), marker.clone(), marker.clone()],
        );
        let sched = MixSchedule {
            p_unchanged: 0.0,
            conditions: vec![(Condition::Night, 1.0)],
        };
        let set = ConditionSet::default();
        let out =
            mix_sample_with(&t, &sched, &set, Some(&overlay), &mut rng::stream(0, "mix")).unwrap();
        assert_eq!(out.curr, marker);
        assert_eq!(out.condition, Condition::Night);
        assert_eq!(out.gt_depth, t.gt_depth);
    }
}
