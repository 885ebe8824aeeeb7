use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::buffers::BufferStats;
use super::spec::{param_name, Layer, ModelSpec};
use crate::format::{self, Container, FormatError, CHECKPOINT_MAGIC};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct Meta {
    pub seed: u64,
    /// Training samples behind this model (the domain size `n_k`).
    pub samples: u64,
    pub epochs: u32,
    /// `init`, `trained`, `merged`, `refined`, ...
    pub origin: String,
    /// Merge coefficients, when this checkpoint is a merge.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alphas: Vec<f64>,
}

/// Architecture, parameters, batch-norm buffers and provenance of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: BTreeMap<String, Tensor<f32>>,
    /// Keyed by batch-norm layer index.
    pub buffers: BTreeMap<usize, BufferStats>,
    pub meta: Meta,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    meta: Meta,
    buffer_counts: BTreeMap<String, u64>,
}

const RUNNING_MEAN: &str = "running_mean";
const RUNNING_VAR: &str = "running_var";

impl Checkpoint {
    /// Kaiming-uniform weights (`bound = sqrt(6 / fan_in)`), zero biases,
    /// unit `gamma`, zero `beta`, fresh buffers. Each layer draws from its
    /// own stream of a generator keyed by `seed`.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        for (i, layer) in spec.layers.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut kaiming = |shape: Vec<usize>, fan_in: usize| {
                let bound = (6.0 / fan_in as f64).sqrt();
                Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound) as f32)
            };
            match *layer {
                Layer::Dense { inputs, outputs } => {
                    params.insert(param_name(i, "weight"), kaiming(vec![inputs, outputs], inputs));
                    params.insert(param_name(i, "bias"), Tensor::zeros(vec![outputs]));
                }
                Layer::Conv2d { in_channels, out_channels, kernel } => {
                    let fan_in = in_channels * kernel * kernel;
                    params.insert(param_name(i, "weight"), kaiming(vec![out_channels, in_channels, kernel, kernel], fan_in));
                    params.insert(param_name(i, "bias"), Tensor::zeros(vec![out_channels]));
                }
                Layer::BatchNorm { channels } => {
                    params.insert(param_name(i, "gamma"), Tensor::full(vec![channels], 1.0));
                    params.insert(param_name(i, "beta"), Tensor::zeros(vec![channels]));
                    buffers.insert(i, BufferStats::fresh(channels));
                }
                _ => {}
            }
        }
        Ok(Self { spec: spec.clone(), params, buffers, meta: Meta { seed, origin: "init".into(), ..Meta::default() } })
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<f32>> {
        self.params.get(name).ok_or_else(|| Error::Spec(format!("missing parameter {name}")))
    }

    /// Checks that parameters and buffers match the declared architecture.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let expected = self.spec.param_shapes();
        if expected.len() != self.params.len() {
            return Err(Error::Spec(format!("expected {} parameter arrays, found {}", expected.len(), self.params.len())));
        }
        for (name, shape) in expected {
            let p = self.param(&name)?;
            if p.shape() != shape.as_slice() {
                return Err(Error::Spec(format!("{name}: expected shape {shape:?}, found {:?}", p.shape())));
            }
        }
        let bn = self.spec.batchnorm_layers();
        if bn.len() != self.buffers.len() || bn.iter().any(|l| !self.buffers.contains_key(l)) {
            return Err(Error::Spec("every batch-norm layer needs exactly one buffer entry".into()));
        }
        for (&l, b) in &self.buffers {
            b.validate()?;
            if let Layer::BatchNorm { channels } = self.spec.layers[l] {
                if b.channels() != channels {
                    return Err(Error::Spec(format!("buffers of layer {l} have {} channels, expected {channels}", b.channels())));
                }
            }
        }
        Ok(())
    }

    /// Errors unless `other` has the same architecture.
    pub fn ensure_aligned(&self, other: &Checkpoint) -> Result<()> {
        if self.spec != other.spec {
            return Err(Error::SpecMismatch("checkpoints have different model specs".into()));
        }
        Ok(())
    }

    pub fn to_container(&self) -> Container {
        let mut arrays = self.params.clone();
        let mut buffer_counts = BTreeMap::new();
        for (&l, b) in &self.buffers {
            let n = b.channels();
            arrays.insert(param_name(l, RUNNING_MEAN), Tensor::new(vec![n], b.mean.clone()).expect("channels > 0"));
            arrays.insert(param_name(l, RUNNING_VAR), Tensor::new(vec![n], b.var.clone()).expect("channels > 0"));
            buffer_counts.insert(format!("{l}"), b.count);
        }
        let header = Header { spec: self.spec.clone(), meta: self.meta.clone(), buffer_counts };
        Container { header: serde_json::to_string(&header).expect("header serializes"), arrays }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let header: Header =
            serde_json::from_str(&c.header).map_err(|e| FormatError::Malformed(format!("checkpoint header: {e}")))?;
        let mut arrays = c.arrays;
        let mut buffers = BTreeMap::new();
        for (key, count) in header.buffer_counts {
            let l: usize = key.parse().map_err(|_| FormatError::Malformed(format!("bad buffer layer key {key:?}")))?;
            let mut take = |what: &str| {
                arrays
                    .remove(&param_name(l, what))
                    .ok_or_else(|| FormatError::Malformed(format!("layer {l} lacks {what}")))
            };
            let mean = take(RUNNING_MEAN)?.into_data();
            let var = take(RUNNING_VAR)?.into_data();
            buffers.insert(l, BufferStats { mean, var, count });
        }
        let ckpt = Self { spec: header.spec, params: arrays, buffers, meta: header.meta };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        format::encode(CHECKPOINT_MAGIC, &self.to_container())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(format::decode(CHECKPOINT_MAGIC, bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        format::write_file(path, CHECKPOINT_MAGIC, &self.to_container())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(format::read_file(path, CHECKPOINT_MAGIC)?)
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Bitwise equality of everything that is serialized.
    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        self.to_bytes() == other.to_bytes()
    }
}
