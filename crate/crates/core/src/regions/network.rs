use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PooledFeature;
use crate::error::{Error, Result};
use crate::nn::{col2im3, gemm, im2col3, relu_backward, relu_in_place};
use crate::seed::{derive_seed, tag};

/// Layer widths of the region generation network.
///
/// Layout: conv3x3(M*d -> conv1) -> ReLU -> conv3x3(conv1 -> conv2) -> ReLU
/// -> flatten -> linear(conv2*l*l -> hidden) -> ReLU -> linear(hidden -> M).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureDescriptor {
    pub proposals: usize,
    pub feature_dim: usize,
    pub pool_size: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub hidden: usize,
}

impl ArchitectureDescriptor {
    /// Default widths for `proposals` boxes over `feature_dim` channels.
    pub fn new(proposals: usize, feature_dim: usize, pool_size: usize) -> Self {
        Self {
            proposals,
            feature_dim,
            pool_size,
            conv1_channels: 256,
            conv2_channels: 128,
            hidden: 256,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.proposals * self.feature_dim
    }

    fn area(&self) -> usize {
        self.pool_size * self.pool_size
    }

    /// Fan-in of each layer in forward order.
    pub fn fan_ins(&self) -> [usize; 4] {
        [
            self.in_channels() * 9,
            self.conv1_channels * 9,
            self.conv2_channels * self.area(),
            self.hidden,
        ]
    }

    /// Per-layer multiplier `1/sqrt(fan_in)` applied to each weight product.
    ///
    /// Weights are stored at unit scale and the fan-in factor is applied in
    /// the forward pass. At initialization this is the same function as
    /// scaling the initial weights, but it keeps a fixed-size optimizer step
    /// from moving wide layers' outputs by a multiple of their own scale.
    pub fn weight_scales(&self) -> [f32; 4] {
        self.fan_ins().map(|n| 1.0 / (n as f32).sqrt())
    }

    /// `(name, shape)` of every tensor in storage order.
    pub fn shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        vec![
            ("conv1.weight", vec![self.conv1_channels, self.in_channels(), 3, 3]),
            ("conv1.bias", vec![self.conv1_channels]),
            ("conv2.weight", vec![self.conv2_channels, self.conv1_channels, 3, 3]),
            ("conv2.bias", vec![self.conv2_channels]),
            ("linear1.weight", vec![self.hidden, self.conv2_channels * self.area()]),
            ("linear1.bias", vec![self.hidden]),
            ("linear2.weight", vec![self.proposals, self.hidden]),
            ("linear2.bias", vec![self.proposals]),
        ]
    }

    fn validate(&self) -> Result<()> {
        let dims = [
            self.proposals,
            self.feature_dim,
            self.pool_size,
            self.conv1_channels,
            self.conv2_channels,
            self.hidden,
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidInput(format!(
                "architecture has a zero dimension: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Weights of the region generation network, stored in the order of
/// [`ArchitectureDescriptor::shapes`].
#[derive(Debug, Clone, PartialEq)]
pub struct RegionGeneratorParams {
    pub arch: ArchitectureDescriptor,
    pub seed: u64,
    pub tensors: Vec<Vec<f32>>,
}

#[derive(Serialize, Deserialize)]
struct BlobHeader {
    format: String,
    arch: ArchitectureDescriptor,
    seed: u64,
    tensors: Vec<(String, Vec<usize>)>,
}

const BLOB_MAGIC: &[u8; 4] = b"RGNP";

impl RegionGeneratorParams {
    pub fn zeros(arch: ArchitectureDescriptor) -> Result<Self> {
        arch.validate()?;
        let tensors = arch
            .shapes()
            .iter()
            .map(|(_, s)| vec![0.0; s.iter().product()])
            .collect();
        Ok(Self {
            arch,
            seed: 0,
            tensors,
        })
    }

    /// Seeded uniform initialization: stored weights in `[-1, 1]` (scaled by
    /// [`ArchitectureDescriptor::weight_scales`] when applied) and biases in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init(arch: ArchitectureDescriptor, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(arch)?;
        params.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[tag::INIT]));
        let scales = arch.weight_scales();
        for (i, t) in params.tensors.iter_mut().enumerate() {
            let bound = if i % 2 == 0 { 1.0 } else { scales[i / 2] };
            for v in t.iter_mut() {
                *v = rng.gen_range(-bound..=bound);
            }
        }
        Ok(params)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }

    /// Concatenates `M` pooled features along channels into the network input.
    pub fn stack_input(&self, pooled: &[PooledFeature]) -> Result<Vec<f32>> {
        let a = &self.arch;
        if pooled.len() != a.proposals {
            return Err(Error::DimensionMismatch {
                expected: format!("{} pooled features", a.proposals),
                actual: format!("{}", pooled.len()),
            });
        }
        let mut input = Vec::with_capacity(a.in_channels() * a.area());
        for p in pooled {
            if p.channels != a.feature_dim || p.size != a.pool_size {
                return Err(Error::DimensionMismatch {
                    expected: format!("{}x{}x{}", a.feature_dim, a.pool_size, a.pool_size),
                    actual: format!("{}x{}x{}", p.channels, p.size, p.size),
                });
            }
            input.extend_from_slice(&p.data);
        }
        Ok(input)
    }

    /// Forward pass on a stacked input, keeping activations for backward.
    pub fn forward(&self, input: &[f32]) -> Result<ForwardTrace> {
        let a = &self.arch;
        let area = a.area();
        if input.len() != a.in_channels() * area {
            return Err(Error::DimensionMismatch {
                expected: format!("{} input values", a.in_channels() * area),
                actual: format!("{}", input.len()),
            });
        }
        let t = &self.tensors;
        let [s1, s2, s3, s4] = a.weight_scales();
        let scaled = |v: &[f32], s: f32| v.iter().map(|x| x * s).collect::<Vec<f32>>();

        let mut cols1 = im2col3(input, a.in_channels(), a.pool_size);
        cols1.iter_mut().for_each(|v| *v *= s1);
        let mut act1 = bias_rows(&t[1], area);
        gemm(a.conv1_channels, a.in_channels() * 9, area, &t[0], false, &cols1, false, 1.0, &mut act1);
        relu_in_place(&mut act1);

        let mut cols2 = im2col3(&act1, a.conv1_channels, a.pool_size);
        cols2.iter_mut().for_each(|v| *v *= s2);
        let mut act2 = bias_rows(&t[3], area);
        gemm(a.conv2_channels, a.conv1_channels * 9, area, &t[2], false, &cols2, false, 1.0, &mut act2);
        relu_in_place(&mut act2);
        let act2 = scaled(&act2, s3);

        let mut hidden = t[5].clone();
        gemm(a.hidden, a.conv2_channels * area, 1, &t[4], false, &act2, false, 1.0, &mut hidden);
        relu_in_place(&mut hidden);
        let hidden = scaled(&hidden, s4);

        let mut logits = t[7].clone();
        gemm(a.proposals, a.hidden, 1, &t[6], false, &hidden, false, 1.0, &mut logits);

        Ok(ForwardTrace {
            cols1,
            act1,
            cols2,
            act2,
            hidden,
            logits,
        })
    }

    /// Parameter gradients given `d loss / d logits`.
    pub fn backward(&self, trace: &ForwardTrace, dlogits: &[f32]) -> Vec<Vec<f32>> {
        let a = &self.arch;
        let area = a.area();
        let t = &self.tensors;
        let [_, s2, s3, s4] = a.weight_scales();
        assert_eq!(dlogits.len(), a.proposals);

        let mut d_w4 = vec![0.0; a.proposals * a.hidden];
        gemm(a.proposals, 1, a.hidden, dlogits, false, &trace.hidden, false, 0.0, &mut d_w4);
        let d_b4 = dlogits.to_vec();

        let mut d_hidden = vec![0.0; a.hidden];
        gemm(a.hidden, a.proposals, 1, &t[6], true, dlogits, false, 0.0, &mut d_hidden);
        d_hidden.iter_mut().for_each(|v| *v *= s4);
        relu_backward(&mut d_hidden, &trace.hidden);

        let flat = a.conv2_channels * area;
        let mut d_w3 = vec![0.0; a.hidden * flat];
        gemm(a.hidden, 1, flat, &d_hidden, false, &trace.act2, false, 0.0, &mut d_w3);
        let d_b3 = d_hidden.clone();

        let mut d_act2 = vec![0.0; flat];
        gemm(flat, a.hidden, 1, &t[4], true, &d_hidden, false, 0.0, &mut d_act2);
        d_act2.iter_mut().for_each(|v| *v *= s3);
        relu_backward(&mut d_act2, &trace.act2);

        let k2 = a.conv1_channels * 9;
        let mut d_w2 = vec![0.0; a.conv2_channels * k2];
        gemm(a.conv2_channels, area, k2, &d_act2, false, &trace.cols2, true, 0.0, &mut d_w2);
        let d_b2 = row_sums(&d_act2, area);

        let mut d_cols2 = vec![0.0; k2 * area];
        gemm(k2, a.conv2_channels, area, &t[2], true, &d_act2, false, 0.0, &mut d_cols2);
        d_cols2.iter_mut().for_each(|v| *v *= s2);
        let mut d_act1 = col2im3(&d_cols2, a.conv1_channels, a.pool_size);
        relu_backward(&mut d_act1, &trace.act1);

        let k1 = a.in_channels() * 9;
        let mut d_w1 = vec![0.0; a.conv1_channels * k1];
        gemm(a.conv1_channels, area, k1, &d_act1, false, &trace.cols1, true, 0.0, &mut d_w1);
        let d_b1 = row_sums(&d_act1, area);

        vec![d_w1, d_b1, d_w2, d_b2, d_w3, d_b3, d_w4, d_b4]
    }

    /// Serializes to `RGNP | u32 header length | JSON header | f32 LE data`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = BlobHeader {
            format: "region-generator/1".into(),
            arch: self.arch,
            seed: self.seed,
            tensors: self
                .arch
                .shapes()
                .into_iter()
                .map(|(n, s)| (n.to_string(), s))
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + json.len() + self.parameter_count() * 4);
        out.extend_from_slice(BLOB_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.tensors.iter().flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != BLOB_MAGIC {
            return Err(Error::Format("missing RGNP magic".into()));
        }
        let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let json = bytes
            .get(8..8 + len)
            .ok_or_else(|| Error::Format("truncated header".into()))?;
        let header: BlobHeader =
            serde_json::from_slice(json).map_err(|e| Error::Format(e.to_string()))?;
        let mut params = Self::zeros(header.arch)?;
        params.seed = header.seed;
        let expected: Vec<_> = header
            .arch
            .shapes()
            .into_iter()
            .map(|(n, s)| (n.to_string(), s))
            .collect();
        if expected != header.tensors {
            return Err(Error::Format("tensor manifest does not match architecture".into()));
        }
        let body = &bytes[8 + len..];
        if body.len() != params.parameter_count() * 4 {
            return Err(Error::Format(format!(
                "expected {} parameter bytes, found {}",
                params.parameter_count() * 4,
                body.len()
            )));
        }
        let mut values = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        for t in &mut params.tensors {
            for v in t.iter_mut() {
                *v = values.next().unwrap();
            }
        }
        Ok(params)
    }
}

fn bias_rows(bias: &[f32], area: usize) -> Vec<f32> {
    bias.iter().flat_map(|&b| std::iter::repeat_n(b, area)).collect()
}

fn row_sums(m: &[f32], cols: usize) -> Vec<f32> {
    m.chunks_exact(cols).map(|r| r.iter().sum()).collect()
}

/// Activations from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    cols1: Vec<f32>,
    act1: Vec<f32>,
    cols2: Vec<f32>,
    act2: Vec<f32>,
    hidden: Vec<f32>,
    pub logits: Vec<f32>,
}

impl ForwardTrace {
    pub fn logits_f64(&self) -> Vec<f64> {
        self.logits.iter().map(|&v| f64::from(v)).collect()
    }
}

/// Logits `pi_1..pi_M` for one anchor's pooled proposal features.
pub fn rgn_forward(params: &RegionGeneratorParams, pooled: &[PooledFeature]) -> Result<Vec<f64>> {
    let input = params.stack_input(pooled)?;
    Ok(params.forward(&input)?.logits_f64())
}
