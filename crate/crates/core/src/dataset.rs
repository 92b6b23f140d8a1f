//! On-disk triplet datasets.
//!
//! Layout: `<root>/<split>/<id>/frame_{prev,curr,next}.png`, `depth.f32`
//! (little-endian `f32`, row-major) and `meta.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camgeom::{Intrinsics, Pose};
use crate::error::{Error, Result};
use crate::image::{DepthMap, Image};
use crate::rng::item_seed;
use crate::synthscene::{sample_triplet, Condition, MotionConfig, SampleTriplet, SceneConfig};
use crate::translate::{degrade_triplet, ConditionSet};

pub const SPLITS: [&str; 4] = ["train", "val-day", "val-night", "val-rain"];
pub const FRAMES: [&str; 3] = ["frame_prev.png", "frame_curr.png", "frame_next.png"];

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PoseMeta {
    axis_angle: [f64; 3],
    translation: [f64; 3],
    /// Exact rotation; the axis-angle form alone does not roundtrip bitwise.
    rotation: Option<[[f64; 3]; 3]>,
}

impl PoseMeta {
    fn from_pose(p: &Pose) -> Self {
        PoseMeta {
            axis_angle: p.axis_angle(),
            translation: p.translation,
            rotation: Some(p.rotation),
        }
    }

    fn to_pose(&self) -> Pose {
        match self.rotation {
            Some(rotation) => Pose {
                rotation,
                translation: self.translation,
            },
            None => Pose::from_axis_angle(self.axis_angle, self.translation),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Meta {
    id: String,
    seed: u64,
    condition: Condition,
    intrinsics: Intrinsics,
    pose_prev: PoseMeta,
    pose_next: PoseMeta,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let (w, h) = (img.width() as u32, img.height() as u32);
    let color = match img.channels() {
        1 => image::ColorType::L8,
        3 => image::ColorType::Rgb8,
        c => {
            return Err(Error::Invalid(format!(
                "cannot store a {c}-channel image as PNG"
            )))
        }
    };
    image::save_buffer_with_format(path, &bytes, w, h, color, image::ImageFormat::Png)?;
    Ok(())
}

/// Reads an 8-bit PNG as RGB; grayscale is replicated across channels.
pub fn read_png(path: &Path) -> Result<Image> {
    let dynimg = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Codec(other),
    })?;
    let rgb = dynimg.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb
        .into_raw()
        .into_iter()
        .map(|b| b as f64 / 255.0)
        .collect();
    Image::new(h as usize, w as usize, 3, data)
}

pub fn write_depth(path: &Path, d: &DepthMap) -> Result<()> {
    let bytes: Vec<u8> = d
        .data()
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_depth(path: &Path, height: usize, width: usize) -> Result<DepthMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != 4 * height * width {
        return Err(Error::Format(format!(
            "{}: expected {} bytes for {height}x{width} depth, found {}",
            path.display(),
            4 * height * width,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    DepthMap::new(height, width, data)
}

/// Writes one triplet into `dir` (created if needed). Values are stored at
/// 8-bit / `f32` precision; see [`SampleTriplet::quantized`].
pub fn write_triplet(dir: &Path, t: &SampleTriplet) -> Result<()> {
    create_dir(dir)?;
    for (name, img) in FRAMES.iter().zip([&t.prev, &t.curr, &t.next]) {
        write_png(&dir.join(name), img)?;
    }
    write_depth(&dir.join("depth.f32"), &t.gt_depth)?;
    let meta = Meta {
        id: t.id.clone(),
        seed: t.seed,
        condition: t.condition,
        intrinsics: t.intrinsics,
        pose_prev: PoseMeta::from_pose(&t.pose_prev),
        pose_next: PoseMeta::from_pose(&t.pose_next),
    };
    let path = dir.join("meta.json");
    let json = serde_json::to_string_pretty(&meta)?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_triplet(dir: &Path) -> Result<SampleTriplet> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: Meta = serde_json::from_str(&text)?;
    meta.intrinsics.validate()?;
    let k = meta.intrinsics;
    let mut frames = Vec::with_capacity(3);
    for name in FRAMES {
        let img = read_png(&dir.join(name))?;
        if img.height() != k.height || img.width() != k.width {
            return Err(Error::Format(format!(
                "{}: {}x{} frame does not match {}x{} intrinsics",
                dir.join(name).display(),
                img.width(),
                img.height(),
                k.width,
                k.height
            )));
        }
        frames.push(img);
    }
    let gt_depth = read_depth(&dir.join("depth.f32"), k.height, k.width)?;
    let next = frames.pop().expect("three frames");
    let curr = frames.pop().expect("three frames");
    let prev = frames.pop().expect("three frames");
    Ok(SampleTriplet {
        prev,
        curr,
        next,
        intrinsics: k,
        gt_depth,
        pose_prev: meta.pose_prev.to_pose(),
        pose_next: meta.pose_next.to_pose(),
        condition: meta.condition,
        id: meta.id,
        seed: meta.seed,
    })
}

/// Sorted sample directories of one split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub split: String,
    pub ids: Vec<String>,
}

impl Dataset {
    pub fn open(root: &Path, split: &str) -> Result<Self> {
        let dir = root.join(split);
        let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut ids = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            if entry.path().join("meta.json").is_file() {
                ids.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        ids.sort();
        if ids.is_empty() {
            return Err(Error::Invalid(format!("{}: no samples", dir.display())));
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            split: split.to_string(),
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn sample_dir(&self, id: &str) -> PathBuf {
        self.root.join(&self.split).join(id)
    }

    pub fn load(&self, index: usize) -> Result<SampleTriplet> {
        read_triplet(&self.sample_dir(&self.ids[index]))
    }

    pub fn load_all(&self) -> Result<Vec<SampleTriplet>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}

/// Generation settings shared by every split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub scene: SceneConfig,
    pub motion: MotionConfig,
    pub intrinsics: Option<Intrinsics>,
    pub conditions: ConditionSet,
}

/// `n` quantized triplets of `split`. The degraded validation splits are
/// copies of `val-day` with fixed per-sample degradation seeds.
pub fn generate_split(
    split: &str,
    n: usize,
    seed: u64,
    cfg: &GenConfig,
) -> Result<Vec<SampleTriplet>> {
    let k = cfg
        .intrinsics
        .unwrap_or_else(crate::synthscene::default_intrinsics);
    let render = |stream: &str| -> Result<Vec<SampleTriplet>> {
        (0..n)
            .map(|i| {
                let mut t = sample_triplet(
                    &cfg.scene,
                    &cfg.motion,
                    &k,
                    item_seed(seed, stream, i as u64),
                )?;
                t.id = format!("{i:06}");
                Ok(t.quantized())
            })
            .collect()
    };
    let degraded = |condition: Condition, stream: &str| -> Result<Vec<SampleTriplet>> {
        render("data/val")?
            .iter()
            .enumerate()
            .map(|(i, t)| {
                Ok(degrade_triplet(
                    t,
                    condition,
                    item_seed(seed, stream, i as u64),
                    &cfg.conditions,
                )?
                .quantized())
            })
            .collect()
    };
    match split {
        "train" => render("data/train"),
        "val-day" => render("data/val"),
        "val-night" => degraded(Condition::Night, "degrade/night"),
        "val-rain" => degraded(Condition::Rain, "degrade/rain"),
        other => Err(Error::Invalid(format!(
            "unknown split {other:?} (expected one of {SPLITS:?})"
        ))),
    }
}

/// Writes samples under `<root>/<split>/<id>/`.
pub fn write_split(root: &Path, split: &str, samples: &[SampleTriplet]) -> Result<()> {
    for t in samples {
        write_triplet(&root.join(split).join(&t.id), t)?;
    }
    Ok(())
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
        .quantized()
    }

    #[test]
    fn triplet_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let t = triplet(2);
        write_triplet(&dir.path().join("a"), &t).unwrap();
        let back = read_triplet(&dir.path().join("a")).unwrap();
        assert_eq!(back, t);
        write_triplet(&dir.path().join("b"), &back).unwrap();
        for name in [
            "frame_prev.png",
            "frame_curr.png",
            "frame_next.png",
            "depth.f32",
            "meta.json",
        ] {
            let a = fs::read(dir.path().join("a").join(name)).unwrap();
            let b = fs::read(dir.path().join("b").join(name)).unwrap();
            assert_eq!(a, b, "{name}");
        }
    }

    #[test]
    fn grayscale_png_is_replicated() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(4, 5, 1, |y, x, _| (y * 5 + x) as f64 / 255.0);
        let path = dir.path().join("g.png");
        write_png(&path, &img).unwrap();
        let back = read_png(&path).unwrap();
        assert_eq!(back.channels(), 3);
        assert_eq!(back.get(2, 3, 1), img.get(2, 3, 0));
    }

    #[test]
    fn truncated_depth_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("depth.f32");
        fs::write(&path, [0u8; 10]).unwrap();
        assert!(matches!(read_depth(&path, 2, 2), Err(Error::Format(_))));
    }

    #[test]
    fn dataset_lists_sorted_ids() {
        let dir = tempfile::tempdir().unwrap();
        for (i, id) in ["00000002", "00000001"].iter().enumerate() {
            let mut t = triplet(i as u64);
            t.id = id.to_string();
            write_triplet(&dir.path().join("train").join(id), &t).unwrap();
        }
        let ds = Dataset::open(dir.path(), "train").unwrap();
        assert_eq!(ds.ids, vec!["00000001", "00000002"]);
        assert_eq!(ds.load(0).unwrap().id, "00000001");
        assert!(Dataset::open(dir.path(), "val-day").is_err());
    }

    #[test]
    fn degraded_splits_share_geometry_with_val_day() {
        let cfg = GenConfig::default();
        let day = generate_split("val-day", 2, 7, &cfg).unwrap();
        let night = generate_split("val-night", 2, 7, &cfg).unwrap();
        assert_eq!(night, generate_split("val-night", 2, 7, &cfg).unwrap());
        for (d, n) in day.iter().zip(&night) {
            assert_eq!(d.gt_depth, n.gt_depth);
            assert_eq!(d.id, n.id);
            assert_eq!(n.condition, Condition::Night);
            assert_ne!(d.curr, n.curr);
        }
        assert_ne!(
            generate_split("train", 1, 7, &cfg).unwrap()[0].curr,
            day[0].curr
        );
        assert!(generate_split("test", 1, 7, &cfg).is_err());
    }
}
