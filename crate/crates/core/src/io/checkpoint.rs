//! Versioned little-endian checkpoint files.
//!
//! The byte layout is described in `docs/checkpoint-format.md`. Weights are
//! stored as `f32` for inference; a full-precision section follows so that
//! loading restores the exact training state.

use std::path::Path;

use super::report::write_atomic;
use crate::error::{Error, Result};
use crate::nn::{BnState, LayerSpec, Network};
use crate::tensor::Tensor;
use crate::trainer::{AdamState, OptState};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"RPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Optimizer moments and counters needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub epoch: u64,
    pub opt: OptState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    /// Experiment configuration echo (TOML text).
    pub config: Option<String>,
    pub train_state: Option<TrainState>,
}

impl Checkpoint {
    pub fn new(network: Network) -> Self {
        Self {
            network,
            config: None,
            train_state: None,
        }
    }
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f64]) {
        for &x in v {
            self.0.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    fn f64s(&mut self, v: &[f64]) {
        for &x in v {
            self.f64(x);
        }
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len());
        self.0.extend_from_slice(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::format(
            self.path,
            format!("{} (at byte {})", detail.into(), self.pos),
        )
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated: need {n} more bytes")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    /// Length-checked before allocating so corrupt counts cannot exhaust memory.
    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| self.err("length overflow"))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| self.err("length overflow"))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()?;
        self.take(n)
    }
}

const TAG_CONV: u8 = 0;
const TAG_DENSE: u8 = 1;
const TAG_RELU: u8 = 2;
const TAG_BN: u8 = 3;
const TAG_FLATTEN: u8 = 4;

fn layer_name(layer: &LayerSpec, k: usize) -> String {
    match layer {
        LayerSpec::Conv2d { .. } => format!("conv{k}"),
        _ => format!("dense{k}"),
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let net = &ckpt.network;
    let mut w = Writer::default();
    w.0.extend_from_slice(&CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION as usize);

    w.u32(net.input_shape.len());
    net.input_shape.iter().for_each(|&d| w.u32(d));
    w.u32(net.layers.len());
    for layer in &net.layers {
        match *layer {
            LayerSpec::Conv2d {
                kernel_h,
                kernel_w,
                in_channels,
                out_channels,
                stride,
                padding,
            } => {
                w.u8(TAG_CONV);
                for v in [
                    kernel_h,
                    kernel_w,
                    in_channels,
                    out_channels,
                    stride,
                    padding,
                ] {
                    w.u32(v);
                }
            }
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                w.u8(TAG_DENSE);
                w.u32(in_features);
                w.u32(out_features);
            }
            LayerSpec::Relu => w.u8(TAG_RELU),
            LayerSpec::BatchNorm {
                channels,
                eps,
                momentum,
            } => {
                w.u8(TAG_BN);
                w.u32(channels);
                w.f64(eps);
                w.f64(momentum);
            }
            LayerSpec::Flatten => w.u8(TAG_FLATTEN),
        }
    }

    let param_layers: Vec<&LayerSpec> = net.layers.iter().filter(|l| l.is_parametric()).collect();
    w.u32(net.weights.len());
    for (k, (wt, b)) in net.weights.iter().zip(&net.biases).enumerate() {
        w.bytes(layer_name(param_layers[k], k).as_bytes());
        w.u32(wt.shape().len());
        wt.shape().iter().for_each(|&d| w.u32(d));
        w.f32s(wt.data());
        w.u32(b.len());
        w.f32s(b.data());
        w.f64(net.init_std[k]);
    }
    w.u32(net.bn.len());
    for s in &net.bn {
        w.u32(s.gamma.len());
        for v in [&s.gamma, &s.beta, &s.running_mean, &s.running_var] {
            w.f32s(v);
        }
    }

    // full-precision copy
    w.u8(1);
    for (wt, b) in net.weights.iter().zip(&net.biases) {
        w.f64s(wt.data());
        w.f64s(b.data());
    }
    for s in &net.bn {
        for v in [&s.gamma, &s.beta, &s.running_mean, &s.running_var] {
            w.f64s(v);
        }
    }

    w.bytes(ckpt.config.as_deref().unwrap_or("").as_bytes());

    match &ckpt.train_state {
        None => w.u8(0),
        Some(ts) => {
            w.u8(1);
            w.u64(ts.step);
            w.u64(ts.epoch);
            match &ts.opt {
                OptState::Sgd => w.u8(0),
                OptState::Adam(a) => {
                    w.u8(1);
                    w.u64(a.t);
                    w.u32(a.m.len());
                    for (m, v) in a.m.iter().zip(&a.v) {
                        w.u32(m.len());
                        w.f64s(m);
                        w.f64s(v);
                    }
                }
            }
        }
    }
    w.0
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        path,
    };
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(
            path,
            format!(
                "bad magic: expected {:?}, found {:?}",
                CHECKPOINT_MAGIC, magic
            ),
        ));
    }
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version: expected {CHECKPOINT_VERSION}, found {version}"),
        ));
    }

    let rank = r.u32()?;
    if rank == 0 || rank > 3 {
        return Err(r.err(format!("input rank {rank}")));
    }
    let input_shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let n_layers = r.u32()?;
    if n_layers > bytes.len() {
        return Err(r.err("layer count exceeds file size"));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let layer = match r.u8()? {
            TAG_CONV => {
                let v = (0..6).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
                LayerSpec::Conv2d {
                    kernel_h: v[0],
                    kernel_w: v[1],
                    in_channels: v[2],
                    out_channels: v[3],
                    stride: v[4],
                    padding: v[5],
                }
            }
            TAG_DENSE => LayerSpec::Dense {
                in_features: r.u32()?,
                out_features: r.u32()?,
            },
            TAG_RELU => LayerSpec::Relu,
            TAG_BN => LayerSpec::BatchNorm {
                channels: r.u32()?,
                eps: r.f64()?,
                momentum: r.f64()?,
            },
            TAG_FLATTEN => LayerSpec::Flatten,
            t => return Err(r.err(format!("unknown layer tag {t}"))),
        };
        layers.push(layer);
    }
    crate::nn::chain_shapes(&input_shape, &layers).map_err(|e| r.err(e.to_string()))?;
    let param_layers: Vec<LayerSpec> = layers
        .iter()
        .filter(|l| l.is_parametric())
        .cloned()
        .collect();

    let n_param = r.u32()?;
    if n_param != param_layers.len() {
        return Err(r.err(format!(
            "{n_param} parameter blocks for {} parametric layers",
            param_layers.len()
        )));
    }
    let mut weights = Vec::with_capacity(n_param);
    let mut biases = Vec::with_capacity(n_param);
    let mut init_std = Vec::with_capacity(n_param);
    for layer in &param_layers {
        let _name = r.bytes()?;
        let rank = r.u32()?;
        if rank > 4 {
            return Err(r.err(format!("weight rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if Some(&shape) != layer.weight_shape().as_ref() {
            return Err(r.err(format!("weight shape {shape:?} does not match layer")));
        }
        let n: usize = shape.iter().product();
        weights.push(Tensor::new(shape, r.f32s(n)?)?);
        let nb = r.u32()?;
        if nb != weights.last().expect("pushed").shape()[0] {
            return Err(r.err("bias length does not match layer"));
        }
        biases.push(Tensor::new(vec![nb], r.f32s(nb)?)?);
        init_std.push(r.f64()?);
    }
    let n_bn = r.u32()?;
    let bn_channels: Vec<usize> = layers
        .iter()
        .filter_map(|l| match l {
            LayerSpec::BatchNorm { channels, .. } => Some(*channels),
            _ => None,
        })
        .collect();
    if n_bn != bn_channels.len() {
        return Err(r.err("batch-norm block count does not match layers"));
    }
    let mut bn = Vec::with_capacity(n_bn);
    for &c in &bn_channels {
        if r.u32()? != c {
            return Err(r.err("batch-norm channel count mismatch"));
        }
        bn.push(BnState {
            gamma: r.f32s(c)?,
            beta: r.f32s(c)?,
            running_mean: r.f32s(c)?,
            running_var: r.f32s(c)?,
        });
    }

    match r.u8()? {
        0 => {}
        1 => {
            for (wt, b) in weights.iter_mut().zip(biases.iter_mut()) {
                *wt = Tensor::new(wt.shape().to_vec(), r.f64s(wt.len())?)?;
                *b = Tensor::new(b.shape().to_vec(), r.f64s(b.len())?)?;
            }
            for s in bn.iter_mut() {
                let c = s.gamma.len();
                s.gamma = r.f64s(c)?;
                s.beta = r.f64s(c)?;
                s.running_mean = r.f64s(c)?;
                s.running_var = r.f64s(c)?;
            }
        }
        f => return Err(r.err(format!("bad full-precision flag {f}"))),
    }

    let cfg = r.bytes()?;
    let config = if cfg.is_empty() {
        None
    } else {
        Some(
            std::str::from_utf8(cfg)
                .map_err(|_| r.err("config echo is not UTF-8"))?
                .to_string(),
        )
    };

    let train_state = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let epoch = r.u64()?;
            let opt = match r.u8()? {
                0 => OptState::Sgd,
                1 => {
                    let t = r.u64()?;
                    let groups = r.u32()?;
                    if groups > bytes.len() {
                        return Err(r.err("optimizer group count exceeds file size"));
                    }
                    let mut m = Vec::with_capacity(groups);
                    let mut v = Vec::with_capacity(groups);
                    for _ in 0..groups {
                        let n = r.u32()?;
                        m.push(r.f64s(n)?);
                        v.push(r.f64s(n)?);
                    }
                    OptState::Adam(AdamState { t, m, v })
                }
                o => return Err(r.err(format!("unknown optimizer tag {o}"))),
            };
            Some(TrainState { step, epoch, opt })
        }
        f => return Err(r.err(format!("bad train-state flag {f}"))),
    };
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let network = Network {
        input_shape,
        layers,
        weights,
        biases,
        init_std,
        bn,
    };
    network
        .validate()
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(Checkpoint {
        network,
        config,
        train_state,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_checkpoint(ckpt))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
