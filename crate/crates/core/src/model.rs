//! Miniature U-shaped encoder–decoder for binary segmentation.
//!
//! Layout for the default widths `[8, 16, 32]` and an `H×W` input:
//!
//! ```text
//! enc1  conv3x3 s1  3 -> 8    relu   H   × W
//! enc2  conv3x3 s2  8 -> 16   relu   H/2 × W/2
//! enc3  conv3x3 s2 16 -> 32   relu   H/4 × W/4   (encoder output f_E)
//! dec2  up2x(enc3) ++ enc2 -> conv3x3 48 -> 16 relu
//! dec1  up2x(dec2) ++ enc1 -> conv3x3 24 -> 8  relu
//! head  conv1x1 8 -> 1, sigmoid                  H × W
//! ```

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{dim_err, Error, Result};

/// Total spatial downsampling between the input and the encoder output.
pub const ENCODER_STRIDE: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub in_channels: usize,
    /// Channel widths of the three encoder levels.
    pub widths: [usize; 3],
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            in_channels: 3,
            widths: [8, 16, 32],
        }
    }
}

impl ArchConfig {
    /// Parameter names and shapes in checkpoint order.
    pub fn layout(&self) -> Vec<(&'static str, Vec<usize>)> {
        let [w1, w2, w3] = self.widths;
        vec![
            ("enc1.weight", vec![w1, self.in_channels, 3, 3]),
            ("enc1.bias", vec![w1]),
            ("enc2.weight", vec![w2, w1, 3, 3]),
            ("enc2.bias", vec![w2]),
            ("enc3.weight", vec![w3, w2, 3, 3]),
            ("enc3.bias", vec![w3]),
            ("dec2.weight", vec![w2, w3 + w2, 3, 3]),
            ("dec2.bias", vec![w2]),
            ("dec1.weight", vec![w1, w2 + w1, 3, 3]),
            ("dec1.bias", vec![w1]),
            ("head.weight", vec![1, w1, 1, 1]),
            ("head.bias", vec![1]),
        ]
    }

    pub fn feature_channels(&self) -> usize {
        self.widths[2]
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: ArchConfig,
    pub seed: u64,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Kernels ~ U(-sqrt(6/fan_in), sqrt(6/fan_in)); biases zero.
    pub fn init(arch: &ArchConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = arch
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with(".bias") {
                    return Tensor::zeros(&shape);
                }
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::new(shape, data).expect("layout shape")
            })
            .collect();
        ModelParams {
            arch: arch.clone(),
            seed,
            tensors,
        }
    }

    pub fn from_tensors(arch: ArchConfig, seed: u64, tensors: Vec<Tensor>) -> Result<Self> {
        let layout = arch.layout();
        if layout.len() != tensors.len() {
            return dim_err(format!("expected {} tensors, got {}", layout.len(), tensors.len()));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return dim_err(format!("{name}: expected {shape:?}, got {:?}", t.shape()));
            }
        }
        Ok(ModelParams { arch, seed, tensors })
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.arch.layout().into_iter().map(|(n, _)| n).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Puts every parameter on `tape`, trainable or frozen.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    /// Prediction and encoder features for one image, no gradients.
    pub fn predict(&self, image: &Tensor) -> Result<ModelOutput> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let out = forward(&mut tape, &vars, image)?;
        Ok(ModelOutput {
            prediction: tape.value(out.prediction).clone(),
            features: tape.value(out.features).clone(),
        })
    }
}

/// Sigmoid probability map `[H,W]` and encoder feature map `[d,h,w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub prediction: Tensor,
    pub features: Tensor,
}

/// Tape handles for a [`ModelOutput`].
#[derive(Clone, Copy, Debug)]
pub struct OutputVars {
    pub prediction: Var,
    pub features: Var,
}

fn conv_block(tape: &mut Tape, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
    let pad = tape.value(w).shape()[2] / 2;
    let y = tape.conv2d(x, w, stride, pad)?;
    let y = tape.bias_add(y, b)?;
    Ok(tape.relu(y))
}

/// Runs one `[C,H,W]` image through the network on `tape`.
///
/// `params` are the handles returned by [`ModelParams::register`].
pub fn forward(tape: &mut Tape, params: &[Var], image: &Tensor) -> Result<OutputVars> {
    let s = image.shape();
    if s.len() != 3 || !s[1].is_multiple_of(ENCODER_STRIDE) || !s[2].is_multiple_of(ENCODER_STRIDE) || s[1] == 0 || s[2] == 0 {
        return dim_err(format!(
            "model input must be [C,H,W] with H and W divisible by {ENCODER_STRIDE}, got {s:?}"
        ));
    }
    if params.len() != 12 {
        return Err(Error::Usage(format!("expected 12 parameter handles, got {}", params.len())));
    }
    let (h, w) = (s[1], s[2]);
    let x = tape.constant(image.clone().reshape(vec![1, s[0], h, w])?);
    let e1 = conv_block(tape, x, params[0], params[1], 1)?;
    let e2 = conv_block(tape, e1, params[2], params[3], 2)?;
    let e3 = conv_block(tape, e2, params[4], params[5], 2)?;

    let u2 = tape.upsample_nearest2x(e3)?;
    let c2 = tape.concat_channels(u2, e2)?;
    let d2 = conv_block(tape, c2, params[6], params[7], 1)?;
    let u1 = tape.upsample_nearest2x(d2)?;
    let c1 = tape.concat_channels(u1, e1)?;
    let d1 = conv_block(tape, c1, params[8], params[9], 1)?;

    let logits = tape.conv2d(d1, params[10], 1, 0)?;
    let logits = tape.bias_add(logits, params[11])?;
    let prob = tape.sigmoid(logits);
    let prediction = tape.reshape(prob, vec![h, w])?;

    let fs = tape.value(e3).shape().to_vec();
    let features = tape.reshape(e3, fs[1..].to_vec())?;
    Ok(OutputVars {
        prediction,
        features,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of a single buffer at step `t >= 1`.
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    cfg: &AdamConfig,
    t: u64,
) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Adam with moment state that persists across calls.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &[Tensor]) -> Self {
        Adam {
            cfg,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != params.len() || grads.iter().zip(params.iter()).any(|(g, p)| g.len() != p.len()) {
            return Err(Error::Usage("adam step needs one gradient per parameter element".into()));
        }
        self.t += 1;
        for (i, p) in params.iter_mut().enumerate() {
            adam_update(p.data_mut(), &grads[i], &mut self.m[i], &mut self.v[i], &self.cfg, self.t);
        }
        Ok(())
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    arch: ArchConfig,
    seed: u64,
    step: u64,
    params: Vec<(String, Vec<usize>)>,
    payload: String,
    sha256: String,
}

/// Writes `<stem>.json` (header) and `<stem>.bin` (little-endian f64 in
/// [`ArchConfig::layout`] order) under `dir`.
pub fn save_checkpoint(params: &ModelParams, step: u64, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bytes: Vec<u8> = params
        .tensors
        .iter()
        .flat_map(|t| t.data().iter().flat_map(|v| v.to_le_bytes()))
        .collect();
    let bin_name = format!("{stem}.bin");
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        arch: params.arch.clone(),
        seed: params.seed,
        step,
        params: params
            .arch
            .layout()
            .into_iter()
            .map(|(n, s)| (n.to_string(), s))
            .collect(),
        payload: bin_name.clone(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    };
    let bin_path = dir.join(&bin_name);
    fs::write(&bin_path, &bytes).map_err(|e| Error::io(&bin_path, e))?;
    let json_path = dir.join(format!("{stem}.json"));
    fs::write(&json_path, serde_json::to_vec_pretty(&header)?).map_err(|e| Error::io(&json_path, e))?;
    Ok(())
}

/// Returns the parameters and the recorded optimizer step count.
pub fn load_checkpoint(dir: &Path, stem: &str) -> Result<(ModelParams, u64)> {
    let json_path = dir.join(format!("{stem}.json"));
    let raw = fs::read(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let header: CheckpointHeader = serde_json::from_slice(&raw)?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: header.version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let bin_path = dir.join(&header.payload);
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    if hex::encode(Sha256::digest(&bytes)) != header.sha256 {
        return Err(Error::Integrity {
            file: bin_path,
            reason: "checksum mismatch".into(),
        });
    }
    let expected = header.arch.param_count() * 8;
    if bytes.len() != expected {
        return Err(Error::Integrity {
            file: bin_path,
            reason: format!("expected {expected} bytes, found {}", bytes.len()),
        });
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let tensors = header
        .arch
        .layout()
        .into_iter()
        .map(|(_, shape)| {
            let n = shape.iter().product();
            Tensor::new(shape, values.by_ref().take(n).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((ModelParams::from_tensors(header.arch, header.seed, tensors)?, header.step))
}
