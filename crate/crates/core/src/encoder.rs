//! Text featurization and the trainable projection network.

use std::io::Read;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const DEFAULT_HASH_DIM: usize = 1024;
/// Floor on the norm used by output normalization.
pub const NORM_EPS: f64 = 1e-8;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
// Distinct basis for the sign hash.
const SIGN_OFFSET: u64 = 0x8422_2325_cbf2_9ce4;

fn fnv1a(basis: u64, bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(basis, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Lowercased tokens: split on non-alphanumerics, then on camelCase
/// boundaries (`parseHTTPResponse` → `parse`, `http`, `response`).
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.split(|c: char| !c.is_alphanumeric()) {
        if word.is_empty() {
            continue;
        }
        let chars: Vec<char> = word.chars().collect();
        let mut start = 0;
        for i in 1..chars.len() {
            let (prev, cur) = (chars[i - 1], chars[i]);
            let next_lower = chars.get(i + 1).is_some_and(|c| c.is_lowercase());
            let boundary = (prev.is_lowercase() && cur.is_uppercase())
                || (prev.is_uppercase() && cur.is_uppercase() && next_lower)
                || (prev.is_alphabetic() && cur.is_numeric())
                || (prev.is_numeric() && cur.is_alphabetic());
            if boundary {
                tokens.push(chars[start..i].iter().collect::<String>().to_lowercase());
                start = i;
            }
        }
        tokens.push(chars[start..].iter().collect::<String>().to_lowercase());
    }
    tokens
}

/// Signed feature hashing of the token bag, L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Featurizer {
    pub hash_dim: usize,
}

impl Default for Featurizer {
    fn default() -> Self {
        Self {
            hash_dim: DEFAULT_HASH_DIM,
        }
    }
}

impl Featurizer {
    pub fn new(hash_dim: usize) -> Self {
        assert!(hash_dim > 0, "hash_dim must be positive");
        Self { hash_dim }
    }

    pub fn featurize(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.hash_dim];
        for tok in tokenize(text) {
            let idx = (fnv1a(FNV_OFFSET, tok.as_bytes()) % self.hash_dim as u64) as usize;
            let sign = if fnv1a(SIGN_OFFSET, tok.as_bytes()) >> 63 == 0 { 1.0 } else { -1.0 };
            v[idx] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }

    pub fn featurize_batch<S: AsRef<str>>(&self, texts: &[S]) -> Tensor {
        let mut data = Vec::with_capacity(texts.len() * self.hash_dim);
        for t in texts {
            data.extend(self.featurize(t.as_ref()));
        }
        Tensor::matrix(texts.len(), self.hash_dim, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Query,
    Item,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Input width first, output width `e` last.
    pub layer_sizes: Vec<usize>,
    pub normalize_output: bool,
    pub shared_towers: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layer_sizes: vec![DEFAULT_HASH_DIM, 256, 128],
            normalize_output: false,
            shared_towers: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 || self.layer_sizes.contains(&0) {
            return Err(Error::config(format!(
                "layer_sizes needs at least two positive widths, got {:?}",
                self.layer_sizes
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `fan_in × fan_out`, row-major.
    pub weight: Tensor,
    /// `1 × fan_out`.
    pub bias: Tensor,
}

/// Fully-connected towers with tanh between layers and a linear last layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    config: EncoderConfig,
    towers: Vec<Vec<Layer>>,
}

impl EncoderModel {
    /// Glorot-uniform weights, zero biases.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, &[rng::label::INIT]);
        let n_towers = if config.shared_towers { 1 } else { 2 };
        let towers = (0..n_towers)
            .map(|_| {
                config
                    .layer_sizes
                    .windows(2)
                    .map(|w| glorot_layer(w[0], w[1], &mut rng))
                    .collect()
            })
            .collect();
        Ok(Self { config, towers })
    }

    pub fn from_parts(config: EncoderConfig, towers: Vec<Vec<Layer>>) -> Result<Self> {
        config.validate()?;
        let expected = if config.shared_towers { 1 } else { 2 };
        if towers.len() != expected {
            return Err(Error::contract(format!("expected {expected} towers, got {}", towers.len())));
        }
        for tower in &towers {
            if tower.len() != config.layer_sizes.len() - 1 {
                return Err(Error::contract("tower depth does not match layer_sizes"));
            }
            for (layer, w) in tower.iter().zip(config.layer_sizes.windows(2)) {
                if layer.weight.shape() != [w[0], w[1]] || layer.bias.shape() != [1, w[1]] {
                    return Err(Error::contract("layer shape does not match layer_sizes"));
                }
            }
        }
        Ok(Self { config, towers })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn towers(&self) -> &[Vec<Layer>] {
        &self.towers
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    fn tower(&self, side: Side) -> &[Layer] {
        match (side, self.towers.len()) {
            (Side::Item, 2) => &self.towers[1],
            _ => &self.towers[0],
        }
    }

    /// Flat list of parameter tensors in a fixed order.
    pub fn params(&self) -> Vec<&Tensor> {
        self.towers
            .iter()
            .flatten()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.towers
            .iter_mut()
            .flatten()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Inference forward pass. With normalization enabled, a row whose
    /// pre-normalization norm is below [`NORM_EPS`] cannot be made unit-norm
    /// and is rejected.
    pub fn encode(&self, side: Side, features: &Tensor) -> Result<Tensor> {
        if features.shape().len() != 2 || features.cols() != self.config.input_dim() {
            return Err(Error::Dimension {
                op: "encode",
                left: features.shape().to_vec(),
                right: vec![self.config.input_dim()],
            });
        }
        let tower = self.tower(side);
        let mut h = features.clone();
        for (k, layer) in tower.iter().enumerate() {
            h = h.matmul(&layer.weight)?;
            for r in 0..h.rows() {
                for (v, b) in h.row_mut(r).iter_mut().zip(layer.bias.data()) {
                    *v += b;
                }
            }
            if k + 1 < tower.len() {
                h.data_mut().iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        if self.config.normalize_output {
            for (r, norm) in h.row_norms().into_iter().enumerate() {
                if norm < NORM_EPS {
                    return Err(Error::contract(format!(
                        "row {r} has norm {norm:e}; cannot normalize a degenerate representation"
                    )));
                }
                h.row_mut(r).iter_mut().for_each(|v| *v /= norm);
            }
        }
        Ok(h)
    }

    /// Places every parameter on `tape` for a differentiable pass.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundEncoder<'_, 't> {
        let params = self.params().into_iter().map(|p| tape.param(p.clone())).collect();
        BoundEncoder { model: self, params }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut cur = Cursor { buf, pos: 0 };
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let normalize_output = cur.take(1)?[0] != 0;
        let n_towers = cur.take(1)?[0] as usize;
        if !(1..=2).contains(&n_towers) {
            return Err(Error::Format(format!("bad tower count {n_towers}")));
        }
        let n_sizes = cur.u32()? as usize;
        if n_sizes > 64 {
            return Err(Error::Format(format!("implausible layer count {n_sizes}")));
        }
        let layer_sizes = (0..n_sizes).map(|_| cur.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let config = EncoderConfig {
            layer_sizes,
            normalize_output,
            shared_towers: n_towers == 1,
        };
        config.validate().map_err(|e| Error::Format(e.to_string()))?;
        let mut towers = Vec::with_capacity(n_towers);
        for _ in 0..n_towers {
            let mut tower = Vec::new();
            for w in config.layer_sizes.windows(2) {
                let weight = Tensor::matrix(w[0], w[1], cur.f64s(w[0] * w[1])?);
                let bias = Tensor::matrix(1, w[1], cur.f64s(w[1])?);
                tower.push(Layer { weight, bias });
            }
            towers.push(tower);
        }
        if cur.pos != buf.len() {
            return Err(Error::Format(format!("{} trailing bytes in checkpoint", buf.len() - cur.pos)));
        }
        Self::from_parts(config, towers)
    }

    /// Checkpoint layout: magic `RAMD`, u16 version, u8 normalize flag,
    /// u8 tower count, u32 layer count, u32 layer sizes, then every weight
    /// and bias as little-endian f64 in [`EncoderModel::params`] order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.push(u8::from(self.config.normalize_output));
        buf.push(self.towers.len() as u8);
        buf.extend_from_slice(&(self.config.layer_sizes.len() as u32).to_le_bytes());
        for &s in &self.config.layer_sizes {
            buf.extend_from_slice(&(s as u32).to_le_bytes());
        }
        for p in self.params() {
            for v in p.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RAMD";
pub const CHECKPOINT_VERSION: u16 = 1;

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn glorot_layer(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Layer {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Layer {
        weight: Tensor::matrix(fan_in, fan_out, data),
        bias: Tensor::zeros(&[1, fan_out]),
    }
}

/// An encoder whose parameters live on a tape.
pub struct BoundEncoder<'m, 't> {
    model: &'m EncoderModel,
    params: Vec<Var<'t>>,
}

impl<'m, 't> BoundEncoder<'m, 't> {
    pub fn params(&self) -> &[Var<'t>] {
        &self.params
    }

    /// Differentiable forward pass. Normalization here divides by
    /// `max(‖x‖, NORM_EPS)` instead of rejecting degenerate rows.
    pub fn forward(&self, side: Side, x: Var<'t>) -> Result<Var<'t>> {
        let cfg = &self.model.config;
        let depth = cfg.layer_sizes.len() - 1;
        let tower = match (side, self.model.towers.len()) {
            (Side::Item, 2) => 1,
            _ => 0,
        };
        let rows = x.value().rows();
        let tape = self.params[0].tape();
        let ones = tape.constant(Tensor::full(&[rows, 1], 1.0));
        let mut h = x;
        for k in 0..depth {
            let w = self.params[2 * (tower * depth + k)];
            let b = self.params[2 * (tower * depth + k) + 1];
            h = h.matmul(w)?.add(ones.matmul(b)?)?;
            if k + 1 < depth {
                h = h.tanh();
            }
        }
        if cfg.normalize_output {
            h = h.normalize_rows(NORM_EPS);
        }
        Ok(h)
    }
}
