//! Parameter container, deterministic initialization, and weight files.
//!
//! Every learned tensor lives in a flat map keyed by a canonical block
//! path (`coarse.block0.self.wq`, `fine.pos_enc.proj.w`, ...). The same
//! enumeration drives seeded initialization, saving, and load validation,
//! so a weight directory is bit-exact across a save/load round trip.

use crate::error::{Error, Result};
use crate::nn::attention::DIST_EMB_DIM;
use crate::rng;
use crate::tensor::{read_tensor_f64, write_tensor_f64};
use ndarray::{ArrayD, ArrayView1, ArrayView2, Ix1, Ix2, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Hidden widths of the set-abstraction positional encoder.
pub const POS_ENC_HIDDEN: [usize; 2] = [32, 64];
/// Damping applied to attention output projections at init so an
/// untrained forward pass stays close to the residual identity.
const ATTN_OUT_GAIN: f64 = 0.1;
/// Noise amplitude around identity for the stage in/out projections.
const STAGE_PROJ_NOISE: f64 = 0.02;
/// Initial coefficient on the cos(πd/2) distance bin, giving self
/// attention a locality prior at init.
const LOCALITY_GAIN: f64 = 1.0;
/// Jitter on the remaining distance-bin coefficients.
const DIST_JITTER: f64 = 0.05;
/// Initial output gain of the positional encoder.
const POS_ENC_GAIN: f64 = 1.5;

/// Which transformer the fine stage stacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FineVariant {
    /// Geometric attention on a sparse subset, spread to the dense set
    /// through kernelized cross-attention.
    Sdpt,
    /// Geometric attention directly on the dense sets.
    FullGeo,
    /// Kernelized self- and cross-attention on the dense sets only.
    LinearOnly,
}

/// Channel width, head count, and block depths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub heads: usize,
    pub coarse_blocks: usize,
    pub fine_blocks: usize,
    pub fine_variant: FineVariant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 256,
            heads: 4,
            coarse_blocks: 3,
            fine_blocks: 3,
            fine_variant: FineVariant::Sdpt,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::ShapeMismatch {
                expected: "channels divisible by a nonzero head count".into(),
                actual: format!("channels {}, heads {}", self.channels, self.heads),
            });
        }
        if self.coarse_blocks == 0 || self.fine_blocks == 0 {
            return Err(Error::InvalidCount {
                requested: 0,
                available: 1,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Init {
    Xavier,
    XavierScaled(f64),
    IdentityPlusNoise(f64),
    Zeros,
    Ones,
    UnitRandom,
    DistanceLocality,
    Scalar(f64),
}

struct ParamSpec {
    path: String,
    shape: Vec<usize>,
    init: Init,
}

fn linear_spec(out: &mut Vec<ParamSpec>, prefix: &str, rows: usize, cols: usize, init: Init) {
    out.push(ParamSpec {
        path: format!("{prefix}.w"),
        shape: vec![rows, cols],
        init,
    });
    out.push(ParamSpec {
        path: format!("{prefix}.b"),
        shape: vec![rows],
        init: Init::Zeros,
    });
}

fn norm_spec(out: &mut Vec<ParamSpec>, prefix: &str, c: usize) {
    out.push(ParamSpec {
        path: format!("{prefix}.gain"),
        shape: vec![c],
        init: Init::Ones,
    });
    out.push(ParamSpec {
        path: format!("{prefix}.bias"),
        shape: vec![c],
        init: Init::Zeros,
    });
}

fn attention_spec(out: &mut Vec<ParamSpec>, prefix: &str, c: usize) {
    for (w_name, b_name, init) in [
        ("wq", "bq", Init::Xavier),
        ("wk", "bk", Init::Xavier),
        ("wv", "bv", Init::Xavier),
        ("wo", "bo", Init::XavierScaled(ATTN_OUT_GAIN)),
    ] {
        out.push(ParamSpec {
            path: format!("{prefix}.{w_name}"),
            shape: vec![c, c],
            init,
        });
        out.push(ParamSpec {
            path: format!("{prefix}.{b_name}"),
            shape: vec![c],
            init: Init::Zeros,
        });
    }
}

fn geo_attention_spec(out: &mut Vec<ParamSpec>, prefix: &str, c: usize, heads: usize) {
    norm_spec(out, &format!("{prefix}.ln"), c);
    attention_spec(out, prefix, c);
    out.push(ParamSpec {
        path: format!("{prefix}.dist"),
        shape: vec![heads, DIST_EMB_DIM],
        init: Init::DistanceLocality,
    });
}

fn geo_block_spec(out: &mut Vec<ParamSpec>, prefix: &str, c: usize, heads: usize) {
    geo_attention_spec(out, &format!("{prefix}.self"), c, heads);
    norm_spec(out, &format!("{prefix}.cross.ln"), c);
    attention_spec(out, &format!("{prefix}.cross"), c);
}

fn kernel_attention_spec(out: &mut Vec<ParamSpec>, prefix: &str, c: usize) {
    norm_spec(out, &format!("{prefix}.lnq"), c);
    norm_spec(out, &format!("{prefix}.lnkv"), c);
    attention_spec(out, prefix, c);
}

fn stage_spec(out: &mut Vec<ParamSpec>, stage: &str, c: usize) {
    linear_spec(
        out,
        &format!("{stage}.in_proj"),
        c,
        c,
        Init::IdentityPlusNoise(STAGE_PROJ_NOISE),
    );
    linear_spec(
        out,
        &format!("{stage}.out_proj"),
        c,
        c,
        Init::IdentityPlusNoise(STAGE_PROJ_NOISE),
    );
    out.push(ParamSpec {
        path: format!("{stage}.bg_m"),
        shape: vec![c],
        init: Init::UnitRandom,
    });
    out.push(ParamSpec {
        path: format!("{stage}.bg_o"),
        shape: vec![c],
        init: Init::UnitRandom,
    });
}

fn parameter_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let c = config.channels;
    let heads = config.heads;
    let mut out = Vec::new();

    stage_spec(&mut out, "coarse", c);
    for i in 0..config.coarse_blocks {
        geo_block_spec(&mut out, &format!("coarse.block{i}"), c, heads);
    }

    stage_spec(&mut out, "fine", c);
    for (s, hidden) in [POS_ENC_HIDDEN, POS_ENC_HIDDEN].iter().enumerate() {
        let p = format!("fine.pos_enc.s{s}");
        linear_spec(&mut out, &format!("{p}.l1"), hidden[0], 3, Init::Xavier);
        linear_spec(&mut out, &format!("{p}.l2"), hidden[1], hidden[0], Init::Xavier);
    }
    linear_spec(
        &mut out,
        "fine.pos_enc.proj",
        c,
        2 * POS_ENC_HIDDEN[1],
        Init::Xavier,
    );
    out.push(ParamSpec {
        path: "fine.pos_enc.gain".into(),
        shape: vec![1],
        init: Init::Scalar(POS_ENC_GAIN),
    });

    for i in 0..config.fine_blocks {
        let bp = format!("fine.block{i}");
        match config.fine_variant {
            FineVariant::Sdpt => {
                geo_block_spec(&mut out, &format!("{bp}.geo"), c, heads);
                kernel_attention_spec(&mut out, &format!("{bp}.spread"), c);
            }
            FineVariant::FullGeo => {
                geo_block_spec(&mut out, &format!("{bp}.geo"), c, heads);
            }
            FineVariant::LinearOnly => {
                kernel_attention_spec(&mut out, &format!("{bp}.lin_self"), c);
                kernel_attention_spec(&mut out, &format!("{bp}.lin_cross"), c);
            }
        }
    }
    out
}

/// Immutable parameter container for every learned block.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    config: ModelConfig,
    tensors: BTreeMap<String, ArrayD<f64>>,
}

fn init_tensor(spec: &ParamSpec, rng: &mut ChaCha12Rng) -> ArrayD<f64> {
    let count: usize = spec.shape.iter().product();
    let uniform = |rng: &mut ChaCha12Rng, a: f64| rng.random::<f64>() * 2.0 * a - a;
    let data: Vec<f64> = match spec.init {
        Init::Xavier | Init::XavierScaled(_) => {
            let (fan_out, fan_in) = (spec.shape[0], spec.shape[spec.shape.len() - 1]);
            let mut a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            if let Init::XavierScaled(g) = spec.init {
                a *= g;
            }
            (0..count).map(|_| uniform(rng, a)).collect()
        }
        Init::IdentityPlusNoise(noise) => {
            let n = spec.shape[0];
            let mut data = vec![0.0; count];
            for (idx, v) in data.iter_mut().enumerate() {
                let (i, j) = (idx / n, idx % n);
                *v = if i == j { 1.0 } else { 0.0 } + uniform(rng, noise);
            }
            data
        }
        Init::Zeros => vec![0.0; count],
        Init::Ones => vec![1.0; count],
        Init::UnitRandom => {
            let mut data: Vec<f64> = (0..count).map(|_| rng::normal(rng)).collect();
            let norm = data.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for v in data.iter_mut() {
                *v /= norm;
            }
            data
        }
        Init::DistanceLocality => {
            let mut data: Vec<f64> = (0..count).map(|_| uniform(rng, DIST_JITTER)).collect();
            // column 1 holds the cos((π/2)·d) bin
            let cols = spec.shape[1];
            for h in 0..spec.shape[0] {
                data[h * cols + 1] += LOCALITY_GAIN;
            }
            data
        }
        Init::Scalar(v) => vec![v; count],
    };
    ArrayD::from_shape_vec(IxDyn(&spec.shape), data).unwrap()
}

impl ModelWeights {
    /// Deterministic scaled-uniform initialization from a seed.
    pub fn seeded(seed: u64, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for spec in parameter_specs(config) {
            let t = init_tensor(&spec, &mut rng);
            tensors.insert(spec.path, t);
        }
        Ok(Self {
            config: *config,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensor(&self, path: &str) -> Result<&ArrayD<f64>> {
        self.tensors.get(path).ok_or_else(|| Error::ShapeMismatch {
            expected: format!("tensor `{path}`"),
            actual: "missing".into(),
        })
    }

    pub fn mat(&self, path: &str) -> Result<ArrayView2<'_, f64>> {
        let t = self.tensor(path)?;
        t.view().into_dimensionality::<Ix2>().map_err(|_| Error::ShapeMismatch {
            expected: format!("2-d tensor at `{path}`"),
            actual: format!("{:?}", t.shape()),
        })
    }

    pub fn vec(&self, path: &str) -> Result<ArrayView1<'_, f64>> {
        let t = self.tensor(path)?;
        t.view().into_dimensionality::<Ix1>().map_err(|_| Error::ShapeMismatch {
            expected: format!("1-d tensor at `{path}`"),
            actual: format!("{:?}", t.shape()),
        })
    }

    pub fn scalar(&self, path: &str) -> Result<f64> {
        let v = self.vec(path)?;
        if v.len() != 1 {
            return Err(Error::ShapeMismatch {
                expected: format!("scalar at `{path}`"),
                actual: format!("length {}", v.len()),
            });
        }
        Ok(v[0])
    }

    /// Replaces a tensor, keeping its declared shape (used by the toy
    /// fitting loop).
    pub fn set_tensor(&mut self, path: &str, value: ArrayD<f64>) -> Result<()> {
        let current = self.tensor(path)?;
        if current.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?} at `{path}`", current.shape()),
                actual: format!("{:?}", value.shape()),
            });
        }
        self.tensors.insert(path.to_string(), value);
        Ok(())
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    /// Writes `manifest.json` plus one tensor file per parameter.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for (i, (path, tensor)) in self.tensors.iter().enumerate() {
            let file = format!("{i:04}.tnsr");
            write_tensor_f64(&dir.join(&file), tensor.view())?;
            entries.push(ManifestTensor {
                path: path.clone(),
                file,
                shape: tensor.shape().to_vec(),
            });
        }
        let manifest = Manifest {
            format: FORMAT_NAME.into(),
            version: 1,
            config: self.config,
            tensors: entries,
        };
        let json = serde_json::to_vec_pretty(&manifest)?;
        std::fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }

    /// Loads a weight directory and validates it against `config`.
    pub fn load(dir: &Path, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let manifest_path = dir.join("manifest.json");
        let bytes = std::fs::read(&manifest_path)?;
        let manifest: Manifest = serde_json::from_slice(&bytes)
            .map_err(|e| Error::CorruptFile(format!("{}: {e}", manifest_path.display())))?;
        if manifest.format != FORMAT_NAME {
            return Err(Error::CorruptFile(format!(
                "{}: unknown format `{}`",
                manifest_path.display(),
                manifest.format
            )));
        }
        if manifest.config != *config {
            return Err(Error::ShapeMismatch {
                expected: format!("{config:?}"),
                actual: format!("{:?}", manifest.config),
            });
        }
        let mut tensors = BTreeMap::new();
        for entry in &manifest.tensors {
            let t = read_tensor_f64(&dir.join(&entry.file))?;
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{:?} at `{}`", entry.shape, entry.path),
                    actual: format!("{:?}", t.shape()),
                });
            }
            tensors.insert(entry.path.clone(), t);
        }
        // every declared parameter must be present with its declared shape
        for spec in parameter_specs(config) {
            match tensors.get(&spec.path) {
                None => {
                    return Err(Error::ShapeMismatch {
                        expected: format!("tensor `{}`", spec.path),
                        actual: "missing".into(),
                    })
                }
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{:?} at `{}`", spec.shape, spec.path),
                        actual: format!("{:?}", t.shape()),
                    })
                }
                _ => {}
            }
        }
        Ok(Self {
            config: *config,
            tensors,
        })
    }
}

const FORMAT_NAME: &str = "pose-match-weights";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<ManifestTensor>,
}

#[derive(Serialize, Deserialize)]
struct ManifestTensor {
    path: String,
    file: String,
    shape: Vec<usize>,
}

/// Where weights come from.
#[derive(Debug, Clone)]
pub enum WeightSource {
    Seed(u64),
    Dir(std::path::PathBuf),
}

/// Seeded initialization or a validated load from a weight directory.
pub fn init_or_load_weights(source: &WeightSource, config: &ModelConfig) -> Result<ModelWeights> {
    match source {
        WeightSource::Seed(seed) => ModelWeights::seeded(*seed, config),
        WeightSource::Dir(dir) => ModelWeights::load(dir, config),
    }
}
