//! Conditioned up-convolutional generator.
//!
//! Layout for an `N`-class task and `H x H` images:
//!
//! ```text
//! [z ; cond] -> linear -> (4C, ceil(N/2)^2) -> convT s2 -> (2C, N, N)
//!            -> [concat hot matrix] -> resize -> (C, ceil(H/2)^2)
//!            -> convT s2 -> (C/2, H, H) -> conv 3x3 -> sigmoid
//! ```
//!
//! The vector (or the label embedding) enters with the latent; the hot matrix
//! enters as one extra channel once the feature map is `N x N`.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use tch::nn::{self, ModuleT};
use tch::{Device, Kind, Tensor};

use crate::conditioning::{ConditionBatch, ConditioningMode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub latent_dim: usize,
    pub base_channels: usize,
    pub dropout_rate: f64,
    pub mode: ConditioningMode,
    pub num_classes: usize,
    /// `(channels, height, width)`; must equal the classifier's input shape.
    pub out_shape: (usize, usize, usize),
}

impl GeneratorSpec {
    pub fn default_for(out_shape: (usize, usize, usize), num_classes: usize) -> Self {
        Self {
            latent_dim: 128,
            base_channels: 64,
            dropout_rate: 0.3,
            mode: ConditioningMode::VectorMatrix,
            num_classes,
            out_shape,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.out_shape;
        if c == 0 || h < 2 || h != w {
            return Err(Error::Config(format!(
                "generator output must be square with at least 2x2 pixels, got {:?}",
                self.out_shape
            )));
        }
        if self.latent_dim == 0 || self.base_channels < 2 {
            return Err(Error::Config("latent_dim must be positive and base_channels >= 2".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate {} not in [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }
}

struct Stage {
    up: Box<dyn ModuleT>,
    bn: nn::BatchNorm,
}

impl std::fmt::Debug for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Stage")
    }
}

impl Stage {
    fn forward(&self, x: &Tensor, train: bool) -> Tensor {
        self.up.forward_t(x, train).apply_t(&self.bn, train).relu()
    }
}

#[derive(Debug)]
struct Network {
    spec: GeneratorSpec,
    embedding: Option<nn::Embedding>,
    project: nn::Linear,
    project_bn: nn::BatchNorm,
    to_classes: Stage,
    resize: Stage,
    to_image: Stage,
    head: nn::Conv2D,
    seed_size: i64,
}

fn conv_t(p: nn::Path, c_in: i64, c_out: i64, k: i64, stride: i64, padding: i64) -> nn::ConvTranspose2D {
    let cfg = nn::ConvTransposeConfig {
        stride,
        padding,
        bias: false,
        ..Default::default()
    };
    nn::conv_transpose2d(p, c_in, c_out, k, cfg)
}

impl Network {
    fn new(root: &nn::Path, spec: &GeneratorSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.num_classes as i64;
        let c = spec.base_channels as i64;
        let (channels, h, _) = spec.out_shape;
        let h = h as i64;

        let cond_width = match spec.mode {
            ConditioningMode::Vector | ConditioningMode::VectorMatrix | ConditioningMode::Label => n,
            ConditioningMode::Matrix => 0,
        };
        let embedding = (spec.mode == ConditioningMode::Label)
            .then(|| nn::embedding(root / "label_embedding", n, n, Default::default()));

        // ceil(N/2) -> N with a stride-2 transposed conv of kernel 3 or 4.
        let seed_size = (n + 1) / 2;
        let project = nn::linear(
            root / "project",
            spec.latent_dim as i64 + cond_width,
            4 * c * seed_size * seed_size,
            Default::default(),
        );
        let project_bn = nn::batch_norm2d(root / "project_bn", 4 * c, Default::default());
        let to_classes = Stage {
            up: Box::new(conv_t(root / "up_classes", 4 * c, 2 * c, n - 2 * seed_size + 4, 2, 1)),
            bn: nn::batch_norm2d(root / "bn_classes", 2 * c, Default::default()),
        };

        // N -> ceil(H/2): stride-1 transposed conv to grow, plain conv to shrink.
        let mid = (h + 1) / 2;
        let c_mid_in = 2 * c + i64::from(spec.mode.uses_matrix());
        let resize_up: Box<dyn ModuleT> = if mid >= n {
            Box::new(conv_t(root / "resize", c_mid_in, c, mid - n + 1, 1, 0))
        } else {
            let cfg = nn::ConvConfig {
                bias: false,
                ..Default::default()
            };
            Box::new(nn::conv2d(root / "resize", c_mid_in, c, n - mid + 1, cfg))
        };
        let resize = Stage {
            up: resize_up,
            bn: nn::batch_norm2d(root / "bn_resize", c, Default::default()),
        };
        let to_image = Stage {
            up: Box::new(conv_t(root / "up_image", c, c / 2, h - 2 * mid + 4, 2, 1)),
            bn: nn::batch_norm2d(root / "bn_image", c / 2, Default::default()),
        };
        let head = nn::conv2d(
            root / "head",
            c / 2,
            channels as i64,
            3,
            nn::ConvConfig {
                padding: 1,
                ..Default::default()
            },
        );
        Ok(Self {
            spec: spec.clone(),
            embedding,
            project,
            project_bn,
            to_classes,
            resize,
            to_image,
            head,
            seed_size,
        })
    }

    fn forward(&self, latents: &Tensor, conds: &ConditionBatch, train: bool) -> Tensor {
        let b = latents.size()[0];
        let c = self.spec.base_channels as i64;
        let input = match self.spec.mode {
            ConditioningMode::Vector | ConditioningMode::VectorMatrix => {
                Tensor::cat(&[latents.shallow_clone(), conds.dist.to_kind(latents.kind())], 1)
            }
            ConditioningMode::Label => {
                let emb = conds.labels.apply(self.embedding.as_ref().unwrap());
                Tensor::cat(&[latents.shallow_clone(), emb], 1)
            }
            ConditioningMode::Matrix => latents.shallow_clone(),
        };
        let dropout = self.spec.dropout_rate;
        let x = input
            .apply(&self.project)
            .view([b, 4 * c, self.seed_size, self.seed_size])
            .apply_t(&self.project_bn, train)
            .relu();
        let mut x = self.to_classes.forward(&x, train).dropout(dropout, train);
        if let Some(m) = &conds.matrix {
            x = Tensor::cat(&[x, m.to_kind(latents.kind())], 1);
        }
        let x = self.resize.forward(&x, train).dropout(dropout, train);
        let x = self.to_image.forward(&x, train);
        x.apply(&self.head).sigmoid()
    }
}

/// Generator weights plus architecture.
pub struct Generator {
    vs: nn::VarStore,
    net: Network,
}

impl std::fmt::Debug for Generator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Generator").field("spec", &self.net.spec).finish()
    }
}

pub const WEIGHTS_FILE: &str = "generator.safetensors";
pub const MANIFEST_FILE: &str = "generator.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorManifest {
    pub spec: GeneratorSpec,
    pub steps: usize,
    pub seed: u64,
}

impl Generator {
    /// Fresh generator with torch's RNG seeded for initialization.
    pub fn new(spec: &GeneratorSpec, seed: u64) -> Result<Self> {
        tch::manual_seed(seed as i64);
        let vs = nn::VarStore::new(Device::Cpu);
        let net = Network::new(&vs.root(), spec)?;
        Ok(Self { vs, net })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.net.spec
    }

    pub fn var_store(&self) -> &nn::VarStore {
        &self.vs
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        self.vs.trainable_variables()
    }

    /// Images for a batch of latents and conditions. With `train` set,
    /// dropout is active and batch-norm uses batch statistics.
    pub fn generate(&self, latents: &Tensor, conds: &ConditionBatch, train: bool) -> Result<Tensor> {
        let spec = &self.net.spec;
        if conds.mode != spec.mode {
            return Err(Error::Argument(format!(
                "generator built for {} conditioning, got {} conditions",
                spec.mode, conds.mode
            )));
        }
        let size = latents.size();
        if size.len() != 2 || size[1] != spec.latent_dim as i64 {
            return Err(Error::Argument(format!(
                "latents of shape {size:?}, expected (B, {})",
                spec.latent_dim
            )));
        }
        if size[0] as usize != conds.len() || conds.dist.size()[1] != spec.num_classes as i64 {
            return Err(Error::Argument(format!(
                "{} latents for {} conditions over {} classes (generator has {})",
                size[0],
                conds.len(),
                conds.dist.size()[1],
                spec.num_classes
            )));
        }
        if train && size[0] < 2 {
            return Err(Error::Argument("training-mode batches need at least two samples".into()));
        }
        Ok(self.net.forward(latents, conds, train))
    }

    pub fn save(&self, dir: &Path, steps: usize, seed: u64) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.vs.save(dir.join(WEIGHTS_FILE))?;
        let manifest = GeneratorManifest {
            spec: self.net.spec.clone(),
            steps,
            seed,
        };
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<(Self, GeneratorManifest)> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: GeneratorManifest = serde_json::from_str(&text)?;
        let mut g = Self::new(&manifest.spec, manifest.seed)?;
        g.vs.load(dir.join(WEIGHTS_FILE))?;
        Ok((g, manifest))
    }
}

/// `(count, dim)` standard-normal latents drawn from `rng`.
pub fn sample_latents<R: Rng>(count: usize, dim: usize, rng: &mut R) -> Tensor {
    let values: Vec<f32> = (0..count * dim).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_slice(&values).view([count as i64, dim as i64]).to_kind(Kind::Float)
}
