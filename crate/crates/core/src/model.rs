//! The full generator: text embedding, shape deformation, triplane and
//! decoder, sharing one parameter store.

use std::collections::BTreeMap;

use crate::decoder::{decode, sample_triplane, DecoderConfig, GaussianDecoder, Gaussians};
use crate::diff::{ParameterStore, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::textenc::{embed, TextEmbedding};
use crate::tsd::{deform, make_anchor_grid, AnchorGrid, Deformation, TsdConfig, TsdNetwork};
use crate::ttg::{Triplane, TriplaneGenerator, TtgConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub embed_len: usize,
    pub embed_dim: usize,
    pub embed_seed: u64,
    pub n_side: usize,
    /// Half-width of the anchor lattice.
    pub extent: f64,
    pub tsd: TsdConfig,
    pub ttg: TtgConfig,
    pub decoder: DecoderConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_len: 16,
            embed_dim: 32,
            embed_seed: 0x7e47,
            n_side: 8,
            extent: 1.0,
            tsd: TsdConfig::default(),
            ttg: TtgConfig::default(),
            decoder: DecoderConfig::default(),
            seed: 0,
        }
    }
}

/// Prompt embeddings: imported ones when available, hashed otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedder {
    pub len: usize,
    pub width: usize,
    pub seed: u64,
    imported: BTreeMap<String, TextEmbedding>,
}

impl Embedder {
    pub fn new(len: usize, width: usize, seed: u64) -> Self {
        Embedder {
            len,
            width,
            seed,
            imported: BTreeMap::new(),
        }
    }

    pub fn from_config(cfg: &ModelConfig) -> Self {
        Embedder::new(cfg.embed_len, cfg.embed_dim, cfg.embed_seed)
    }

    /// Prefers `e` for `prompt` from now on.
    pub fn insert(&mut self, prompt: &str, e: TextEmbedding) -> Result<()> {
        if e.len() != self.len || e.width() != self.width {
            return Err(Error::Dimension(format!(
                "embedding is {}x{}, model expects {}x{}",
                e.len(),
                e.width(),
                self.len,
                self.width
            )));
        }
        self.imported.insert(prompt.to_string(), e);
        Ok(())
    }

    pub fn num_imported(&self) -> usize {
        self.imported.len()
    }

    pub fn embed(&self, prompt: &str) -> Result<TextEmbedding> {
        match self.imported.get(prompt) {
            Some(e) => Ok(e.clone()),
            None => embed(prompt, self.len, self.width, self.seed),
        }
    }
}

pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub store: ParameterStore<T>,
    pub grid: AnchorGrid,
    pub tsd: TsdNetwork<T>,
    pub ttg: TriplaneGenerator<T>,
    pub decoder: GaussianDecoder<T>,
}

/// Every intermediate of one forward pass.
pub struct Generated<T: Scalar> {
    pub deformation: Deformation<T>,
    pub triplane: Triplane<T>,
    pub features: Tensor<T>,
    pub gaussians: Gaussians<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let grid = make_anchor_grid(cfg.n_side, cfg.extent)?;
        if cfg.ttg.extent < cfg.extent + cfg.tsd.beta {
            return Err(Error::Config(format!(
                "triplane extent {} does not cover anchors plus offsets ({})",
                cfg.ttg.extent,
                cfg.extent + cfg.tsd.beta
            )));
        }
        let mut store = ParameterStore::new(cfg.seed);
        let (tsd, ttg, decoder) = {
            let mut root = store.root();
            let tsd = TsdNetwork::new(&mut root, &cfg.tsd, cfg.embed_dim)?;
            let seeds = TriplaneGenerator::<T>::default_seeds(cfg.seed);
            let ttg = TriplaneGenerator::new(&mut root, &cfg.ttg, cfg.embed_dim, seeds)?;
            let decoder = GaussianDecoder::new(&mut root, &cfg.decoder, cfg.ttg.channels)?;
            (tsd, ttg, decoder)
        };
        Ok(Model {
            cfg: cfg.clone(),
            store,
            grid,
            tsd,
            ttg,
            decoder,
        })
    }

    /// Deformation, triplane generation, triplane sampling and decoding, in
    /// that order.
    pub fn forward(&self, y: &Tensor<T>) -> Result<Generated<T>> {
        let deformation = deform(&self.tsd, &self.grid, y)?;
        let triplane = self.ttg.generate(y, self.cfg.ttg.extent)?;
        let features = sample_triplane(&triplane, &deformation.centers)?;
        let gaussians = decode(&self.decoder, &features, &deformation.centers)?;
        Ok(Generated {
            deformation,
            triplane,
            features,
            gaussians,
        })
    }

    pub fn forward_embedding(&self, e: &TextEmbedding) -> Result<Generated<T>> {
        if e.len() != self.cfg.embed_len || e.width() != self.cfg.embed_dim {
            return Err(Error::Dimension(format!(
                "embedding is {}x{}, model expects {}x{}",
                e.len(),
                e.width(),
                self.cfg.embed_len,
                self.cfg.embed_dim
            )));
        }
        self.forward(&e.to_tensor())
    }

    pub fn num_gaussians(&self) -> usize {
        self.grid.len()
    }
}
