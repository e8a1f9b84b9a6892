//! Deterministic polyp-like synthetic segmentation data and the oracle
//! annotator that reveals its masks.
//!
//! Each image is a smooth textured background (eight random planar
//! sinusoids over one of a few lighting presets, plus uniform white noise)
//! with one or more rotated bright ellipses. The ellipse intensity offset is
//! drawn from `contrast_range`; low offsets make the lesion hard to tell
//! from the background.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::seed;

/// Bounds on the foreground fraction of every generated mask.
pub const MIN_FOREGROUND: f64 = 0.005;
pub const MAX_FOREGROUND: f64 = 0.5;

const CHANNELS: usize = 3;

/// Background base colors (RGB) for the lighting presets.
const LIGHTING: [[f64; 3]; 4] = [
    [0.38, 0.26, 0.22],
    [0.30, 0.30, 0.34],
    [0.46, 0.34, 0.28],
    [0.24, 0.20, 0.18],
];

/// Per-channel gain of the lesion offset.
const LESION_TINT: [f64; 3] = [1.0, 0.75, 0.65];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub image_size: usize,
    /// Inclusive range of ellipses per image.
    pub polyps_per_image: [usize; 2],
    pub contrast_range: [f64; 2],
    pub noise_amplitude: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_train: 200,
            n_test: 50,
            image_size: 64,
            polyps_per_image: [1, 3],
            contrast_range: [0.05, 0.6],
            noise_amplitude: 0.08,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.n_train < 1 {
            bad.push("n_train must be >= 1".to_string());
        }
        if self.n_test < 1 {
            bad.push("n_test must be >= 1".to_string());
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(4) {
            bad.push(format!("image_size must be a positive multiple of 4, got {}", self.image_size));
        }
        let [lo, hi] = self.polyps_per_image;
        if lo < 1 || lo > hi {
            bad.push(format!("polyps_per_image must satisfy 1 <= min <= max, got [{lo}, {hi}]"));
        }
        let [cl, ch] = self.contrast_range;
        if !(cl > 0.0 && cl <= ch && ch <= 1.0) {
            bad.push(format!("contrast_range must satisfy 0 < min <= max <= 1, got [{cl}, {ch}]"));
        }
        if !(self.noise_amplitude >= 0.0 && self.noise_amplitude.is_finite()) {
            bad.push(format!("noise_amplitude must be finite and >= 0, got {}", self.noise_amplitude));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad))
        }
    }
}

/// Binary segmentation mask, one byte per pixel (0 or 1).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn foreground_fraction(&self) -> f64 {
        self.data.iter().filter(|&&v| v != 0).count() as f64 / self.data.len().max(1) as f64
    }

    /// The mask as a 0.0/1.0 training target.
    pub fn to_target(&self) -> Vec<f64> {
        self.data.iter().map(|&v| if v != 0 { 1.0 } else { 0.0 }).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub sample_id: usize,
    /// `[3, S, S]`, values in [0, 1].
    pub image: Tensor,
    pub mask: Mask,
    /// Mean lesion intensity offset; the difficulty knob.
    pub contrast: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Clone, Copy, Debug)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub ra: f64,
    pub rb: f64,
    pub angle: f64,
    pub offset: f64,
}

impl Ellipse {
    /// Squared normalized radius of pixel center `(x, y)`; < 1 inside.
    pub fn radius2(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.ra).powi(2) + (v / self.rb).powi(2)
    }
}

struct Wave {
    amp: f64,
    fx: f64,
    fy: f64,
    phase: f64,
}

/// Draws one sample; also returns its ellipses for diagnostics.
pub fn generate_sample(spec: &DatasetSpec, sample_id: usize, sample_seed: u64) -> (Sample, Vec<Ellipse>) {
    let s = spec.image_size;
    let sf = s as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);

    let preset = LIGHTING[rng.random_range(0..LIGHTING.len())];
    let base: Vec<f64> = preset.iter().map(|b| b + rng.random_range(-0.04..0.04)).collect();
    let waves: Vec<Wave> = (0..8)
        .map(|_| {
            let freq = rng.random_range(0.5..4.0);
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            Wave {
                amp: rng.random_range(0.0..0.03),
                fx: freq * theta.cos() / sf,
                fy: freq * theta.sin() / sf,
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            }
        })
        .collect();

    let [pmin, pmax] = spec.polyps_per_image;
    let [cmin, cmax] = spec.contrast_range;
    let (ellipses, mask) = loop {
        let count = rng.random_range(pmin..=pmax);
        let ellipses: Vec<Ellipse> = (0..count)
            .map(|_| Ellipse {
                cx: rng.random_range(0.15 * sf..0.85 * sf),
                cy: rng.random_range(0.15 * sf..0.85 * sf),
                ra: rng.random_range(sf / 16.0..sf / 6.0),
                rb: rng.random_range(sf / 16.0..sf / 6.0),
                angle: rng.random_range(0.0..std::f64::consts::PI),
                offset: if cmax > cmin { rng.random_range(cmin..=cmax) } else { cmin },
            })
            .collect();
        let data: Vec<u8> = (0..s * s)
            .map(|i| {
                let (x, y) = ((i % s) as f64 + 0.5, (i / s) as f64 + 0.5);
                ellipses.iter().any(|e| e.radius2(x, y) < 1.0) as u8
            })
            .collect();
        let mask = Mask {
            height: s,
            width: s,
            data,
        };
        let frac = mask.foreground_fraction();
        if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) {
            break (ellipses, mask);
        }
    };

    let mut pixels = vec![0.0; CHANNELS * s * s];
    for y in 0..s {
        for x in 0..s {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let texture: f64 = waves
                .iter()
                .map(|w| w.amp * (std::f64::consts::TAU * (w.fx * px + w.fy * py) + w.phase).sin())
                .sum();
            // Overlapping lesions take the strongest offset.
            let lesion = ellipses
                .iter()
                .filter(|e| e.radius2(px, py) < 1.0)
                .map(|e| e.offset)
                .fold(0.0, f64::max);
            for c in 0..CHANNELS {
                let noise = if spec.noise_amplitude > 0.0 {
                    rng.random_range(-spec.noise_amplitude..=spec.noise_amplitude)
                } else {
                    0.0
                };
                let v = base[c] + texture + lesion * LESION_TINT[c] + noise;
                pixels[(c * s + y) * s + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    let contrast = ellipses.iter().map(|e| e.offset).sum::<f64>() / ellipses.len() as f64;
    let image = Tensor::new(vec![CHANNELS, s, s], pixels).expect("image shape");
    (
        Sample {
            sample_id,
            image,
            mask,
            contrast,
        },
        ellipses,
    )
}

/// Train ids are `0..n_train`, test ids continue from `n_train`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let stream = |split: u64, count: usize, first_id: usize| -> Vec<Sample> {
        (0..count)
            .map(|i| {
                let sub = seed::derive(spec.seed, &[split, i as u64]);
                generate_sample(spec, first_id + i, sub).0
            })
            .collect()
    };
    Ok(Dataset {
        spec: spec.clone(),
        train: stream(0, spec.n_train, 0),
        test: stream(1, spec.n_test, spec.n_train),
    })
}

impl Dataset {
    pub fn train_sample(&self, id: usize) -> Option<&Sample> {
        self.train.get(id).filter(|s| s.sample_id == id).or_else(|| self.train.iter().find(|s| s.sample_id == id))
    }

    fn image_bytes(&self) -> Vec<u8> {
        self.train
            .iter()
            .chain(&self.test)
            .flat_map(|s| s.image.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    fn mask_bytes(&self) -> Vec<u8> {
        self.train.iter().chain(&self.test).flat_map(|s| s.mask.data.iter().copied()).collect()
    }

    /// SHA-256 over the image payload followed by the mask payload.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.image_bytes());
        h.update(self.mask_bytes());
        hex::encode(h.finalize())
    }
}

/// Reveals ground-truth masks for training ids only.
pub struct Oracle<'a> {
    masks: HashMap<usize, &'a Mask>,
}

impl<'a> Oracle<'a> {
    pub fn new(dataset: &'a Dataset) -> Self {
        Oracle {
            masks: dataset.train.iter().map(|s| (s.sample_id, &s.mask)).collect(),
        }
    }

    pub fn annotate(&self, sample_id: usize) -> Result<Mask> {
        self.masks
            .get(&sample_id)
            .map(|m| (*m).clone())
            .ok_or_else(|| Error::Lookup(format!("sample {sample_id} is not in the training pool")))
    }
}

pub const DATASET_FORMAT_VERSION: u32 = 1;
const IMAGES_FILE: &str = "images.bin";
const MASKS_FILE: &str = "masks.bin";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct PayloadEntry {
    name: String,
    bytes: u64,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleEntry {
    id: usize,
    split: String,
    /// Byte offset into the image payload.
    image_offset: u64,
    /// Byte offset into the mask payload.
    mask_offset: u64,
    contrast: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    spec: DatasetSpec,
    image_shape: [usize; 3],
    train_ids: Vec<usize>,
    test_ids: Vec<usize>,
    samples: Vec<SampleEntry>,
    images: PayloadEntry,
    masks: PayloadEntry,
    checksum: String,
}

/// Writes `manifest.json`, `images.bin` and `masks.bin` into `dir`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let s = dataset.spec.image_size;
    let images = dataset.image_bytes();
    let masks = dataset.mask_bytes();
    let image_stride = (CHANNELS * s * s * 8) as u64;
    let mask_stride = (s * s) as u64;
    let samples = dataset
        .train
        .iter()
        .map(|x| (x, "train"))
        .chain(dataset.test.iter().map(|x| (x, "test")))
        .enumerate()
        .map(|(i, (x, split))| SampleEntry {
            id: x.sample_id,
            split: split.into(),
            image_offset: i as u64 * image_stride,
            mask_offset: i as u64 * mask_stride,
            contrast: x.contrast,
        })
        .collect();
    let manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        spec: dataset.spec.clone(),
        image_shape: [CHANNELS, s, s],
        train_ids: dataset.train.iter().map(|x| x.sample_id).collect(),
        test_ids: dataset.test.iter().map(|x| x.sample_id).collect(),
        samples,
        images: PayloadEntry {
            name: IMAGES_FILE.into(),
            bytes: images.len() as u64,
            sha256: hex::encode(Sha256::digest(&images)),
        },
        masks: PayloadEntry {
            name: MASKS_FILE.into(),
            bytes: masks.len() as u64,
            sha256: hex::encode(Sha256::digest(&masks)),
        },
        checksum: dataset.checksum(),
    };
    for (name, bytes) in [(IMAGES_FILE, &images), (MASKS_FILE, &masks)] {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    }
    let p = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
    Ok(())
}

fn read_payload(dir: &Path, entry: &PayloadEntry) -> Result<(PathBuf, Vec<u8>)> {
    let p = dir.join(&entry.name);
    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    if bytes.len() as u64 != entry.bytes {
        return Err(Error::Integrity {
            file: p,
            reason: format!("expected {} bytes, found {}", entry.bytes, bytes.len()),
        });
    }
    if hex::encode(Sha256::digest(&bytes)) != entry.sha256 {
        return Err(Error::Integrity {
            file: p,
            reason: "sha256 mismatch".into(),
        });
    }
    Ok((p, bytes))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mp = dir.join(MANIFEST_FILE);
    let raw = fs::read(&mp).map_err(|e| Error::io(&mp, e))?;
    let value: serde_json::Value = serde_json::from_slice(&raw)?;
    let version = value.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != DATASET_FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: DATASET_FORMAT_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(value)?;
    manifest.spec.validate()?;
    let (img_path, images) = read_payload(dir, &manifest.images)?;
    let (mask_path, masks) = read_payload(dir, &manifest.masks)?;

    let [c, h, w] = manifest.image_shape;
    let (img_len, mask_len) = (c * h * w * 8, h * w);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for e in &manifest.samples {
        let (io, mo) = (e.image_offset as usize, e.mask_offset as usize);
        let img = images.get(io..io + img_len).ok_or_else(|| Error::Integrity {
            file: img_path.clone(),
            reason: format!("sample {} runs past the end", e.id),
        })?;
        let m = masks.get(mo..mo + mask_len).ok_or_else(|| Error::Integrity {
            file: mask_path.clone(),
            reason: format!("sample {} runs past the end", e.id),
        })?;
        let data = img
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let sample = Sample {
            sample_id: e.id,
            image: Tensor::new(vec![c, h, w], data)?,
            mask: Mask {
                height: h,
                width: w,
                data: m.to_vec(),
            },
            contrast: e.contrast,
        };
        match e.split.as_str() {
            "train" => train.push(sample),
            "test" => test.push(sample),
            other => {
                return Err(Error::Integrity {
                    file: mp,
                    reason: format!("unknown split {other:?}"),
                })
            }
        }
    }
    Ok(Dataset {
        spec: manifest.spec,
        train,
        test,
    })
}
