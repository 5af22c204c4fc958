//! Layer kit and the residual 2x supersampling network.
//!
//! The model follows the benchmark architecture: a bilinear 2x upsample
//! followed by a convolutional stack with three skip-2 residual blocks, ReLU
//! after every convolution except the last. Weights are Xavier initialized,
//! biases start at zero.

use crate::autodiff::{Tape, Value};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Uniform Xavier bound: sqrt(6 / (fan_in + fan_out)).
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Draw a tensor of the given shape uniformly from [-a, a] with the Xavier
/// bound a for the given fans.
pub fn xavier_init<T: Element>(
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::Config(format!(
            "xavier init needs nonzero fans, got ({fan_in}, {fan_out})"
        )));
    }
    let a = xavier_bound(fan_in, fan_out);
    let data: Vec<f64> = (0..shape.iter().product::<usize>())
        .map(|_| rng.random_range(-a..a))
        .collect();
    Tensor::from_f64s(shape, &data)
}

/// A convolution layer's tensors: weight [k,k,cin,cout] plus bias [cout].
#[derive(Clone, Debug)]
pub struct Conv2dLayer<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> Conv2dLayer<T> {
    pub fn xavier(k: usize, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let weight = xavier_init(vec![k, k, cin, cout], k * k * cin, k * k * cout, rng)?;
        Ok(Conv2dLayer { weight, bias: Tensor::zeros(vec![cout]) })
    }

    /// Register this layer's parameters and apply it: conv + bias.
    pub fn forward(&self, tape: &mut Tape<T>, x: Value) -> Result<(Value, [Value; 2])> {
        let w = tape.param(self.weight.clone());
        let b = tape.param(self.bias.clone());
        let y = tape.conv2d(x, w)?;
        let y = tape.add_bias(y, b)?;
        Ok((y, [w, b]))
    }
}

/// A dense layer's tensors: weight [fan_in, fan_out] plus bias [fan_out].
#[derive(Clone, Debug)]
pub struct DenseLayer<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> DenseLayer<T> {
    pub fn xavier(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let weight = xavier_init(vec![fan_in, fan_out], fan_in, fan_out, rng)?;
        Ok(DenseLayer { weight, bias: Tensor::zeros(vec![fan_out]) })
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Value) -> Result<(Value, [Value; 2])> {
        let w = tape.param(self.weight.clone());
        let b = tape.param(self.bias.clone());
        let y = tape.matmul(x, w)?;
        let y = tape.add_bias(y, b)?;
        Ok((y, [w, b]))
    }
}

/// One building block of a model stack.
#[derive(Clone, Debug)]
pub enum Layer<T: Element> {
    Dense(DenseLayer<T>),
    Conv2d(Conv2dLayer<T>),
    Relu,
    Upsample2x,
}

impl<T: Element> Layer<T> {
    /// Apply the layer, returning its output and any parameters it registered.
    pub fn forward(&self, tape: &mut Tape<T>, x: Value) -> Result<(Value, Vec<Value>)> {
        match self {
            Layer::Dense(l) => l.forward(tape, x).map(|(y, p)| (y, p.to_vec())),
            Layer::Conv2d(l) => l.forward(tape, x).map(|(y, p)| (y, p.to_vec())),
            Layer::Relu => Ok((tape.relu(x), vec![])),
            Layer::Upsample2x => Ok((tape.upsample2x(x)?, vec![])),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupersamplerConfig {
    /// Channel width of the intermediate conv layers.
    pub width: usize,
    /// Number of skip-2 residual blocks (3 at full fidelity).
    pub residual_blocks: usize,
    /// Image channels (3 for RGB).
    pub in_channels: usize,
    /// Square kernel size, odd.
    pub kernel: usize,
}

impl Default for SupersamplerConfig {
    fn default() -> Self {
        SupersamplerConfig { width: 32, residual_blocks: 3, in_channels: 3, kernel: 3 }
    }
}

impl SupersamplerConfig {
    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.in_channels == 0 {
            return Err(Error::Config("supersampler widths must be >= 1".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel must be odd, got {}", self.kernel)));
        }
        Ok(())
    }
}

/// Parameters and skip wiring produced by one forward pass of the model,
/// aligned with [`SupersamplerModel::params`] order.
pub struct BoundForward {
    pub output: Value,
    pub params: Vec<Value>,
}

/// 2x supersampler: bilinear upsample, a stem conv into `width` channels,
/// `residual_blocks` skip-2 blocks, and a linear head conv back to image
/// channels. Every conv except the head is followed by ReLU.
#[derive(Clone, Debug)]
pub struct SupersamplerModel<T: Element> {
    pub config: SupersamplerConfig,
    convs: Vec<Conv2dLayer<T>>,
    /// Residual additions as (block input conv index, block output conv index).
    skips: Vec<(usize, usize)>,
}

/// Build the model with Xavier weights and zero biases.
pub fn build_supersampler<T: Element>(
    config: SupersamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SupersamplerModel<T>> {
    config.validate()?;
    let (k, w, c) = (config.kernel, config.width, config.in_channels);
    let mut convs = Vec::with_capacity(2 + 2 * config.residual_blocks);
    convs.push(Conv2dLayer::xavier(k, c, w, rng)?);
    for _ in 0..config.residual_blocks {
        convs.push(Conv2dLayer::xavier(k, w, w, rng)?);
        convs.push(Conv2dLayer::xavier(k, w, w, rng)?);
    }
    convs.push(Conv2dLayer::xavier(k, w, c, rng)?);
    let skips = (0..config.residual_blocks)
        .map(|b| (2 * b + 1, 2 * b + 2))
        .collect();
    Ok(SupersamplerModel { config, convs, skips })
}

impl<T: Element> SupersamplerModel<T> {
    /// Parameter tensors in a stable order: (weight, bias) per conv, stem first.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.convs.iter().flat_map(|c| [&c.weight, &c.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.convs
            .iter_mut()
            .flat_map(|c| [&mut c.weight, &mut c.bias])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Number of conv layers (stem + block convs + head).
    pub fn num_convs(&self) -> usize {
        self.convs.len()
    }

    /// Residual additions as (from, to) conv indices; each spans two convs.
    pub fn skip_topology(&self) -> &[(usize, usize)] {
        &self.skips
    }

    /// Run the model on a [b,h,w,c] batch, recording onto `tape`. Output is
    /// [b,2h,2w,c].
    pub fn forward(&self, tape: &mut Tape<T>, batch: Value) -> Result<BoundForward> {
        let shape = tape.value(batch).shape().to_vec();
        if shape.len() != 4 || shape[3] != self.config.in_channels {
            return Err(Error::ShapeMismatch {
                op: "supersampler_forward",
                detail: format!(
                    "want [b,h,w,{}], got {shape:?}",
                    self.config.in_channels
                ),
            });
        }
        let mut params = Vec::with_capacity(2 * self.convs.len());
        let up = tape.upsample2x(batch)?;

        let (mut x, stem_params) = self.convs[0].forward(tape, up)?;
        x = tape.relu(x);
        params.extend(stem_params);

        for b in 0..self.config.residual_blocks {
            let block_input = x;
            let (y, p1) = self.convs[2 * b + 1].forward(tape, x)?;
            let y = tape.relu(y);
            params.extend(p1);
            let (y, p2) = self.convs[2 * b + 2].forward(tape, y)?;
            let y = tape.relu(y);
            params.extend(p2);
            x = tape.add(block_input, y)?;
        }

        let (out, head_params) = self.convs[self.convs.len() - 1].forward(tape, x)?;
        params.extend(head_params);
        Ok(BoundForward { output: out, params })
    }

    /// Write config and weights to a checkpoint file; round-trips bit-exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        let config =
            toml::to_string(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        let tensors: Vec<&Tensor<T>> = self.params();
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        wire::write_block(&mut file, MODEL_MAGIC, &config, &tensors).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<SupersamplerModel<T>> {
        let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let (config_text, tensors) =
            wire::read_block::<T>(&mut file, MODEL_MAGIC).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                detail: e.to_string(),
            })?;
        let config: SupersamplerConfig =
            toml::from_str(&config_text).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                detail: e.to_string(),
            })?;
        Self::from_parts(config, tensors).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }

    /// Rebuild a model from its config and a flat (weight, bias, ...) tensor list.
    pub fn from_parts(config: SupersamplerConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let n_convs = 2 + 2 * config.residual_blocks;
        if tensors.len() != 2 * n_convs {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model wants {}",
                tensors.len(),
                2 * n_convs
            )));
        }
        let mut it = tensors.into_iter();
        let convs: Vec<Conv2dLayer<T>> = (0..n_convs)
            .map(|_| Conv2dLayer { weight: it.next().unwrap(), bias: it.next().unwrap() })
            .collect();
        let skips = (0..config.residual_blocks)
            .map(|b| (2 * b + 1, 2 * b + 2))
            .collect();
        Ok(SupersamplerModel { config, convs, skips })
    }
}

const MODEL_MAGIC: &[u8; 8] = b"ALRCMDL1";

/// Length-prefixed binary tensor blocks shared by model and trainer
/// checkpoints. Values are stored as f64 little-endian bits, which is lossless
/// for both element types.
pub(crate) mod wire {
    use crate::error::Result as CResult;
    use crate::tensor::{Element, Tensor};
    use std::io::{self, Read, Write};

    pub fn write_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
        w.write_all(&v.to_le_bytes())
    }

    pub fn read_u64(r: &mut impl Read) -> io::Result<u64> {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        Ok(u64::from_le_bytes(buf))
    }

    pub fn write_f64(w: &mut impl Write, v: f64) -> io::Result<()> {
        w.write_all(&v.to_le_bytes())
    }

    pub fn read_f64(r: &mut impl Read) -> io::Result<f64> {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        Ok(f64::from_le_bytes(buf))
    }

    pub fn write_str(w: &mut impl Write, s: &str) -> io::Result<()> {
        write_u64(w, s.len() as u64)?;
        w.write_all(s.as_bytes())
    }

    pub fn read_str(r: &mut impl Read) -> io::Result<String> {
        let len = read_u64(r)? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        String::from_utf8(buf).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }

    pub fn write_tensor<T: Element>(w: &mut impl Write, t: &Tensor<T>) -> io::Result<()> {
        write_u64(w, t.shape().len() as u64)?;
        for &d in t.shape() {
            write_u64(w, d as u64)?;
        }
        write_u64(w, t.numel() as u64)?;
        for &v in t.data() {
            write_f64(w, v.to_f64())?;
        }
        Ok(())
    }

    pub fn read_tensor<T: Element>(r: &mut impl Read) -> io::Result<Tensor<T>> {
        let rank = read_u64(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(r)? as usize);
        }
        let len = read_u64(r)? as usize;
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(T::from_f64(read_f64(r)?));
        }
        Tensor::new(shape, data).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }

    pub fn write_block<T: Element>(
        w: &mut impl Write,
        magic: &[u8; 8],
        meta: &str,
        tensors: &[&Tensor<T>],
    ) -> io::Result<()> {
        w.write_all(magic)?;
        write_str(w, meta)?;
        write_u64(w, tensors.len() as u64)?;
        for t in tensors {
            write_tensor(w, t)?;
        }
        Ok(())
    }

    pub fn read_block<T: Element>(
        r: &mut impl Read,
        magic: &[u8; 8],
    ) -> io::Result<(String, Vec<Tensor<T>>)> {
        let mut got = [0u8; 8];
        r.read_exact(&mut got)?;
        if &got != magic {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "bad checkpoint magic"));
        }
        let meta = read_str(r)?;
        let count = read_u64(r)? as usize;
        let tensors: CResult<Vec<_>, io::Error> = (0..count).map(|_| read_tensor(r)).collect();
        Ok((meta, tensors?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn xavier_bound_matches_closed_form() {
        assert_eq!(xavier_bound(3, 3), 1.0);
    }

    #[test]
    fn xavier_rejects_zero_fans() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(xavier_init::<f64>(vec![3], 0, 3, &mut rng).is_err());
    }

    #[test]
    fn xavier_sample_variance_near_closed_form() {
        // 1e5 samples, fan_in = fan_out = 50 -> variance within 5% of 0.02.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = xavier_init::<f64>(vec![100_000], 50, 50, &mut rng).unwrap();
        let mean = t.mean_f64();
        let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (t.numel() - 1) as f64;
        assert!((var - 0.02).abs() / 0.02 < 0.05, "variance {var}");
        assert!(mean.abs() < 0.01, "mean {mean}");
        let bound = xavier_bound(50, 50);
        assert!(t.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn xavier_is_deterministic_under_seed() {
        let mut a = ChaCha8Rng::seed_from_u64(11);
        let mut b = ChaCha8Rng::seed_from_u64(11);
        let ta = xavier_init::<f32>(vec![4, 4], 4, 4, &mut a).unwrap();
        let tb = xavier_init::<f32>(vec![4, 4], 4, 4, &mut b).unwrap();
        assert_eq!(ta.data(), tb.data());
    }

    fn desk_model(width: usize) -> SupersamplerModel<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        build_supersampler(
            SupersamplerConfig { width, ..Default::default() },
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn full_fidelity_parameter_count() {
        // Hand count at width 32, three blocks, 3x3 kernels:
        //   stem 3*3*3*32 + 32 = 896
        //   six block convs (3*3*32*32 + 32) * 6 = 55488
        //   head 3*3*32*3 + 3 = 867
        assert_eq!(desk_model(32).num_params(), 57_251);
    }

    #[test]
    fn three_skip2_blocks_at_full_fidelity() {
        let m = desk_model(32);
        assert_eq!(m.skip_topology(), &[(1, 2), (3, 4), (5, 6)]);
        for (from, to) in m.skip_topology() {
            assert_eq!(to - from, 1); // two convs per block
        }
        assert_eq!(m.num_convs(), 8);
    }

    #[test]
    fn forward_doubles_spatial_dims() {
        let m = desk_model(8);
        let mut tape = Tape::new();
        let batch = tape.input(Tensor::filled(vec![4, 8, 8, 3], 0.1));
        let bound = m.forward(&mut tape, batch).unwrap();
        assert_eq!(tape.value(bound.output).shape(), &[4, 16, 16, 3]);
        let mut tape16 = Tape::new();
        let batch16 = tape16.input(Tensor::filled(vec![1, 16, 16, 3], 0.1));
        let bound16 = m.forward(&mut tape16, batch16).unwrap();
        assert_eq!(tape16.value(bound16.output).shape(), &[1, 32, 32, 3]);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut m = desk_model(8);
        for p in m.params_mut() {
            *p = Tensor::zeros(p.shape().to_vec());
        }
        let mut tape = Tape::new();
        let batch = tape.input(Tensor::filled(vec![1, 8, 8, 3], 0.37));
        let bound = m.forward(&mut tape, batch).unwrap();
        assert!(tape.value(bound.output).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let m = desk_model(8);
        let run = || {
            let mut tape = Tape::new();
            let batch = tape.input(Tensor::filled(vec![1, 8, 8, 3], 0.21));
            let bound = m.forward(&mut tape, batch).unwrap();
            tape.value(bound.output).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gradient_reaches_every_parameter() {
        let m = desk_model(8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..8 * 8 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let target: Vec<f64> = (0..16 * 16 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let batch = tape.input(Tensor::new(vec![1, 8, 8, 3], data).unwrap());
        let bound = m.forward(&mut tape, batch).unwrap();
        let gt = tape.input(Tensor::new(vec![1, 16, 16, 3], target).unwrap());
        let diff = tape.sub(bound.output, gt).unwrap();
        let sq = tape.powi(diff, 2).unwrap();
        let loss = tape.mean(sq);
        let grads = tape.backward(loss).unwrap();
        for (i, &v) in bound.params.iter().enumerate() {
            let g = grads.wrt_or_zeros(&tape, v);
            assert!(
                g.data().iter().any(|&x| x != 0.0),
                "parameter {i} received an all-zero gradient"
            );
        }
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let m = desk_model(8);
        let mut tape = Tape::new();
        let batch = tape.input(Tensor::filled(vec![1, 8, 8, 4], 0.0));
        assert!(m.forward(&mut tape, batch).is_err());
    }

    #[test]
    fn checkpoint_roundtrips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let m = {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            build_supersampler::<f32>(
                SupersamplerConfig { width: 4, ..Default::default() },
                &mut rng,
            )
            .unwrap()
        };
        m.save(&path).unwrap();
        let loaded = SupersamplerModel::<f32>::load(&path).unwrap();
        assert_eq!(loaded.config, m.config);
        for (a, b) in m.params().iter().zip(loaded.params()) {
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
