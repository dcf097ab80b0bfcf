//! Small differentiable volumetric segmentation network: a 3-layer 3D CNN
//! (1 -> 8 -> 8 -> NumClass channels, cubic 3^3 kernels, stride 1,
//! replicate padding) producing per-voxel class logits.
//!
//! The attack and training code never inspects the architecture; it only
//! needs `M(x)` and gradients through it. Replicate padding inside the
//! convolutions avoids border class artifacts, and the small receptive
//! field (7^3) keeps per-voxel decisions local to their 3D neighborhood.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{Precision, Tape, Var};
use crate::conv::conv3d_forward;
use crate::error::FileError;
use crate::rng::{fnv1a64, Rng};
use crate::tensor::Tensor;
use crate::volume::{LabelField, Volume};

pub const HIDDEN_CHANNELS: usize = 8;
pub const KERNEL: usize = 3;
/// Negative slope of the leaky activation; a hard ReLU lets whole channels
/// die under aggressive dice-loss steps on imbalanced volumes.
pub const LEAKY_SLOPE: f64 = 0.1;

const CKPT_MAGIC: &[u8; 8] = b"VAFACKPT";
const CKPT_VERSION: u16 = 1;

/// Parameters of the 3-layer CNN, stored as leaf tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    pub num_class: usize,
    pub seed: u64,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

/// Tape handles for the model parameters during a training step.
pub struct ParamVars<'t> {
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
    pub w3: Var<'t>,
    pub b3: Var<'t>,
}

impl<'t> ParamVars<'t> {
    pub fn all(&self) -> [Var<'t>; 6] {
        [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]
    }
}

impl SegModel {
    /// Kaiming-style fan-in scaled uniform init, reproducible from the seed.
    pub fn init(num_class: usize, seed: u64) -> SegModel {
        assert!(num_class >= 2);
        let mut rng = Rng::derive(seed, 0x5eed_1e17, 0);
        let k3 = KERNEL * KERNEL * KERNEL;
        let mut conv_init = |cout: usize, cin: usize| {
            let bound = (6.0 / (cin * k3) as f64).sqrt();
            let data = (0..cout * cin * k3).map(|_| rng.uniform(-bound, bound)).collect();
            Tensor::from_vec(&[cout, cin, KERNEL, KERNEL, KERNEL], data)
        };
        let w1 = conv_init(HIDDEN_CHANNELS, 1);
        let w2 = conv_init(HIDDEN_CHANNELS, HIDDEN_CHANNELS);
        // zero-initialized head: the softmax starts exactly uniform, which
        // sidesteps the dice-loss cold start on class-imbalanced volumes
        let w3 = Tensor::zeros(&[num_class, HIDDEN_CHANNELS, KERNEL, KERNEL, KERNEL]);
        SegModel {
            num_class,
            seed,
            w1,
            b1: Tensor::zeros(&[HIDDEN_CHANNELS]),
            w2,
            b2: Tensor::zeros(&[HIDDEN_CHANNELS]),
            w3,
            b3: Tensor::zeros(&[num_class]),
        }
    }

    pub fn named_params(&self) -> [(&'static str, &Tensor); 6] {
        [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("w3", &self.w3),
            ("b3", &self.b3),
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }

    /// FNV-1a fingerprint of all parameter bits; used to assert the model
    /// is untouched across attack calls and to key caches.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::new();
        for (_, t) in self.named_params() {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        fnv1a64(&bytes)
    }

    /// Forward pass with parameters as constants (the "frozen" model used
    /// by attacks). `x` is a rank-3 volume node on the tape; returns
    /// (NumClass, H, W, D) logits.
    pub fn forward_frozen<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        let w1 = tape.constant(self.w1.clone());
        let b1 = tape.constant(self.b1.clone());
        let w2 = tape.constant(self.w2.clone());
        let b2 = tape.constant(self.b2.clone());
        let w3 = tape.constant(self.w3.clone());
        let b3 = tape.constant(self.b3.clone());
        Self::forward_graph(x, (w1, b1, w2, b2, w3, b3))
    }

    /// Forward pass with parameters as gradient leaves (for training).
    pub fn forward_trainable<'t>(&self, tape: &'t Tape, x: Var<'t>) -> (Var<'t>, ParamVars<'t>) {
        let params = ParamVars {
            w1: tape.param(self.w1.clone()),
            b1: tape.param(self.b1.clone()),
            w2: tape.param(self.w2.clone()),
            b2: tape.param(self.b2.clone()),
            w3: tape.param(self.w3.clone()),
            b3: tape.param(self.b3.clone()),
        };
        let logits = Self::forward_graph(
            x,
            (params.w1, params.b1, params.w2, params.b2, params.w3, params.b3),
        );
        (logits, params)
    }

    /// Forward pass reusing existing parameter vars (several samples of one
    /// batch sharing the same leaves).
    pub fn forward_with<'t>(x: Var<'t>, params: &ParamVars<'t>) -> Var<'t> {
        Self::forward_graph(
            x,
            (params.w1, params.b1, params.w2, params.b2, params.w3, params.b3),
        )
    }

    fn forward_graph<'t>(
        x: Var<'t>,
        (w1, b1, w2, b2, w3, b3): (Var<'t>, Var<'t>, Var<'t>, Var<'t>, Var<'t>, Var<'t>),
    ) -> Var<'t> {
        let shape = x.shape();
        assert_eq!(shape.len(), 3, "model input must be a rank-3 volume");
        // center the canonical [0, 1] range so first-layer pre-activations
        // start sign-balanced
        let x4 = x.reshape(&[1, shape[0], shape[1], shape[2]]).add_scalar(-0.5);
        let h1 = leaky(x4.conv3d(w1, b1));
        let h2 = leaky(h1.conv3d(w2, b2));
        h2.conv3d(w3, b3)
    }

    /// Plain (tape-free) logits; matches the tape forward bit-exactly
    /// because both run the same kernels in the same order.
    pub fn predict_logits(&self, x: &Volume, precision: Precision) -> Tensor {
        let [h, w, d] = x.extent();
        let mut t = x.tensor().clone().reshaped(&[1, h, w, d]);
        let quantize = |t: &mut Tensor| {
            if precision == Precision::F32 {
                t.round_to_f32();
            }
        };
        quantize(&mut t);
        let mut centered = t.map(|v| v - 0.5);
        quantize(&mut centered);
        let mut h1 = conv3d_forward(&centered, &self.w1, &self.b1);
        quantize(&mut h1);
        let mut a1 = leaky_direct(&h1, precision);
        quantize(&mut a1);
        let mut h2 = conv3d_forward(&a1, &self.w2, &self.b2);
        quantize(&mut h2);
        let mut a2 = leaky_direct(&h2, precision);
        quantize(&mut a2);
        let mut out = conv3d_forward(&a2, &self.w3, &self.b3);
        quantize(&mut out);
        out
    }

    /// Hard predictions: per-voxel argmax over the class axis, ties broken
    /// toward the lowest class index.
    pub fn predict_labels(&self, x: &Volume, precision: Precision) -> LabelField {
        let logits = self.predict_logits(x, precision);
        argmax_labels(&logits, self.num_class)
    }

    pub fn save(&self, path: &Path) -> Result<(), FileError> {
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.num_class as u32).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.named_params().len() as u32).to_le_bytes());
        for (name, t) in self.named_params() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &dim in t.shape() {
                out.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            out.push(0); // dtype tag: f64 little-endian
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SegModel, FileError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Cursor { bytes: &bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != CKPT_MAGIC {
            return Err(FileError::BadMagic { offset: 0, expected: CKPT_MAGIC, got: magic.to_vec() });
        }
        let version = r.u16()?;
        if version != CKPT_VERSION {
            return Err(FileError::BadVersion { offset: r.pos - 2, got: version });
        }
        let num_class = r.u32()? as usize;
        let seed = r.u64()?;
        let count = r.u32()? as usize;
        if count != 6 {
            return Err(FileError::Corrupt {
                offset: r.pos - 4,
                what: format!("expected 6 tensors, found {count}"),
            });
        }
        let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name_off = r.pos;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| {
                FileError::Corrupt { offset: name_off, what: "tensor name is not utf-8".into() }
            })?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let dtype_off = r.pos;
            let dtype = r.take(1)?[0];
            if dtype != 0 {
                return Err(FileError::Corrupt {
                    offset: dtype_off,
                    what: format!("unknown dtype tag {dtype}"),
                });
            }
            let n: usize = shape.iter().product();
            let payload = r.take(n * 8)?;
            let data: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::from_vec(&shape, data)));
        }
        let get = |want: &str| -> Result<Tensor, FileError> {
            tensors
                .iter()
                .find(|(n, _)| n == want)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| FileError::Corrupt {
                    offset: 0,
                    what: format!("missing tensor {want}"),
                })
        };
        Ok(SegModel {
            num_class,
            seed,
            w1: get("w1")?,
            b1: get("b1")?,
            w2: get("w2")?,
            b2: get("b2")?,
            w3: get("w3")?,
            b3: get("b3")?,
        })
    }
}

/// Leaky activation composed from tape ops:
/// `(1 - slope) * relu(x) + slope * x`.
pub fn leaky<'t>(x: Var<'t>) -> Var<'t> {
    x.relu().mul_scalar(1.0 - LEAKY_SLOPE) + x.mul_scalar(LEAKY_SLOPE)
}

/// Tape-free mirror of `leaky` with identical op order and precision
/// rounding points, so direct and taped forwards agree bit-exactly.
fn leaky_direct(h: &Tensor, precision: Precision) -> Tensor {
    let quantize = |t: &mut Tensor| {
        if precision == Precision::F32 {
            t.round_to_f32();
        }
    };
    let mut r = h.map(|v| v.max(0.0));
    quantize(&mut r);
    let mut a = r.scale(1.0 - LEAKY_SLOPE);
    quantize(&mut a);
    let mut b = h.scale(LEAKY_SLOPE);
    quantize(&mut b);
    let mut out = a.zip(&b, |x, y| x + y);
    quantize(&mut out);
    out
}

/// Per-voxel argmax over the class axis of a (C, H, W, D) logit field,
/// lowest class index winning ties.
pub fn argmax_labels(logits: &Tensor, num_class: usize) -> LabelField {
    assert_eq!(logits.rank(), 4);
    assert_eq!(logits.shape()[0], num_class);
    let [h, w, d] = [logits.shape()[1], logits.shape()[2], logits.shape()[3]];
    let inner = h * w * d;
    let mut classes = vec![0u8; inner];
    for j in 0..inner {
        let mut best_c = 0usize;
        let mut best = logits.data()[j];
        for c in 1..num_class {
            let v = logits.data()[c * inner + j];
            if v > best {
                best = v;
                best_c = c;
            }
        }
        classes[j] = best_c as u8;
    }
    LabelField::new(classes, [h, w, d], num_class).expect("argmax labels are in range")
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FileError> {
        if self.pos + n > self.bytes.len() {
            return Err(FileError::Truncated {
                offset: self.pos,
                expected: n,
                actual: self.bytes.len() - self.pos,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, FileError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, FileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, FileError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
