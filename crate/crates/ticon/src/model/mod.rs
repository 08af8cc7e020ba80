//! The contextualizer: per-encoder input projectors, a shared pre-norm
//! transformer encoder with 2D ALiBi attention biases, a cross-attention
//! decoder with a learnable mask token, and per-encoder output heads.

pub mod alibi;
mod checkpoint;
mod forward;

pub use checkpoint::{read_container, write_container, TensorContainer};
pub use forward::{
    contextualize, contextualize_isolated, contextualize_isolated_batch, decode_predict, encode,
    ContextOutput,
};
pub(crate) use forward::{decode_graph, encode_graph, head_graph};

use crate::error::{Error, Result};
use crate::kvconfig::KvConfig;
use crate::seed::{stream_rng, stream_seed};
use crate::tensor::{ParamId, ParamStore, Tensor};
use std::collections::BTreeMap;

/// One encoder the model accepts as input or predicts as target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderEntry {
    pub id: String,
    pub dim: usize,
}

impl EncoderEntry {
    pub fn new(id: &str, dim: usize) -> Self {
        EncoderEntry { id: id.to_string(), dim }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Shared embedding width D.
    pub d_model: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Whether decoder mask tokens self-attend in addition to cross-attending.
    pub decoder_self_attention: bool,
    pub input_encoders: Vec<EncoderEntry>,
    pub target_encoders: Vec<EncoderEntry>,
}

impl ModelConfig {
    /// Desk-scale default used throughout the demo pipeline.
    pub fn desk(input_encoders: Vec<EncoderEntry>, target_encoders: Vec<EncoderEntry>) -> Self {
        let mut cfg = ModelConfig {
            d_model: 64,
            encoder_depth: 4,
            decoder_depth: 1,
            heads: 4,
            mlp_ratio: 4.0,
            decoder_self_attention: true,
            input_encoders,
            target_encoders,
        };
        cfg.normalize();
        cfg
    }

    /// Full-scale preset kept for parameter-count checks only (never trained).
    /// The decoder is a single cross-attention ViT block.
    pub fn paper_scale() -> Self {
        let encoders = vec![
            EncoderEntry::new("fm-a", 1536),
            EncoderEntry::new("fm-b", 1536),
            EncoderEntry::new("fm-c", 768),
        ];
        let mut cfg = ModelConfig {
            d_model: 1536,
            encoder_depth: 6,
            decoder_depth: 1,
            heads: 16,
            mlp_ratio: 4.0,
            decoder_self_attention: false,
            input_encoders: encoders.clone(),
            target_encoders: encoders,
        };
        cfg.normalize();
        cfg
    }

    fn normalize(&mut self) {
        self.input_encoders.sort_by(|a, b| a.id.cmp(&b.id));
        self.target_encoders.sort_by(|a, b| a.id.cmp(&b.id));
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.encoder_depth == 0 || self.decoder_depth == 0 {
            return Err(Error::Config("encoder/decoder depth must be >= 1".into()));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(Error::Config(format!("mlp_ratio {} must be > 0", self.mlp_ratio)));
        }
        if self.input_encoders.is_empty() || self.target_encoders.is_empty() {
            return Err(Error::Config("at least one input and one target encoder".into()));
        }
        for list in [&self.input_encoders, &self.target_encoders] {
            for pair in list.windows(2) {
                if pair[0].id >= pair[1].id {
                    return Err(Error::Config(format!(
                        "encoder list not sorted/unique at {}",
                        pair[1].id
                    )));
                }
            }
            if list.iter().any(|e| e.dim == 0) {
                return Err(Error::Config("encoder dim must be >= 1".into()));
            }
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.d_model as f64 * self.mlp_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn input_dim(&self, id: &str) -> Result<usize> {
        self.input_encoders
            .iter()
            .find(|e| e.id == id)
            .map(|e| e.dim)
            .ok_or_else(|| Error::Registry(id.to_string()))
    }

    pub fn target_dim(&self, id: &str) -> Result<usize> {
        self.target_encoders
            .iter()
            .find(|e| e.id == id)
            .map(|e| e.dim)
            .ok_or_else(|| Error::Registry(id.to_string()))
    }

    fn encoder_list(entries: &[EncoderEntry]) -> String {
        entries
            .iter()
            .map(|e| format!("{}:{}", e.id, e.dim))
            .collect::<Vec<_>>()
            .join(",")
    }

    fn parse_encoder_list(raw: &str) -> Result<Vec<EncoderEntry>> {
        raw.split(',')
            .map(|item| {
                let (id, dim) = item
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("encoder entry {item}: want id:dim")))?;
                let dim = dim
                    .parse()
                    .map_err(|_| Error::Config(format!("encoder entry {item}: bad dim")))?;
                Ok(EncoderEntry { id: id.trim().to_string(), dim })
            })
            .collect()
    }

    pub const CONFIG_KEYS: [&'static str; 8] = [
        "d_model",
        "encoder_depth",
        "decoder_depth",
        "heads",
        "mlp_ratio",
        "decoder_self_attention",
        "input_encoders",
        "target_encoders",
    ];

    pub fn write_config(&self, cfg: &mut KvConfig) {
        cfg.set("model", "d_model", self.d_model);
        cfg.set("model", "encoder_depth", self.encoder_depth);
        cfg.set("model", "decoder_depth", self.decoder_depth);
        cfg.set("model", "heads", self.heads);
        cfg.set("model", "mlp_ratio", self.mlp_ratio);
        cfg.set("model", "decoder_self_attention", self.decoder_self_attention);
        cfg.set("model", "input_encoders", Self::encoder_list(&self.input_encoders));
        cfg.set("model", "target_encoders", Self::encoder_list(&self.target_encoders));
    }

    pub fn read_config(cfg: &KvConfig) -> Result<Self> {
        cfg.check_known("model", &Self::CONFIG_KEYS)?;
        let mut out = ModelConfig {
            d_model: cfg.parse_value("model", "d_model")?,
            encoder_depth: cfg.parse_value("model", "encoder_depth")?,
            decoder_depth: cfg.parse_value("model", "decoder_depth")?,
            heads: cfg.parse_value("model", "heads")?,
            mlp_ratio: cfg.parse_value("model", "mlp_ratio")?,
            decoder_self_attention: cfg.parse_value("model", "decoder_self_attention")?,
            input_encoders: Self::parse_encoder_list(cfg.require("model", "input_encoders")?)?,
            target_encoders: Self::parse_encoder_list(cfg.require("model", "target_encoders")?)?,
        };
        out.normalize();
        out.validate()?;
        Ok(out)
    }
}

// ---- parameter layout -------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

/// Two-layer MLP (projectors, heads, and block MLPs share the shape).
#[derive(Debug, Clone, Copy)]
pub(crate) struct Mlp2 {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncoderBlock {
    pub norm1: Norm,
    pub attn: AttentionParams,
    pub norm2: Norm,
    pub mlp: Mlp2,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecoderBlock {
    pub self_attn: Option<(Norm, AttentionParams)>,
    pub cross_norm: Norm,
    pub cross: AttentionParams,
    pub mlp_norm: Norm,
    pub mlp: Mlp2,
}

/// All learnable state of the contextualizer.
#[derive(Debug, Clone)]
pub struct TiconParams {
    pub config: ModelConfig,
    store: ParamStore,
    pub(crate) projectors: BTreeMap<String, Mlp2>,
    pub(crate) blocks: Vec<EncoderBlock>,
    pub(crate) final_norm: Norm,
    pub(crate) decoder: Vec<DecoderBlock>,
    pub(crate) decoder_norm: Norm,
    pub(crate) mask_token: ParamId,
    pub(crate) heads: BTreeMap<String, Mlp2>,
}

pub const INIT_STD: f64 = 0.02;

/// Tensor initializer keyed by parameter name.
type InitFn<'a> = dyn FnMut(&str, &[usize]) -> Tensor + 'a;

fn trunc_normal_init(seed: u64) -> impl FnMut(&str, &[usize]) -> Tensor {
    move |name: &str, shape: &[usize]| {
        if name.ends_with(".b") || name.ends_with(".beta") {
            Tensor::zeros(shape)
        } else if name.ends_with(".gamma") {
            Tensor::full(shape, 1.0)
        } else {
            let mut rng = stream_rng(seed, &format!("init/{name}"));
            Tensor::trunc_normal(shape, INIT_STD, &mut rng)
        }
    }
}

fn zeros_init(name: &str, shape: &[usize]) -> Tensor {
    let _ = name;
    Tensor::zeros(shape)
}

impl TiconParams {
    /// Fresh parameters: truncated-normal(0.02) weights, zero biases,
    /// layer-norm scale one. Deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut init = trunc_normal_init(seed);
        Self::build(config.clone(), &mut init)
    }

    fn build(config: ModelConfig, init: &mut InitFn) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let hidden = config.mlp_hidden();
        let mut store = ParamStore::new();

        let linear = |store: &mut ParamStore,
                          name: String,
                          din: usize,
                          dout: usize,
                          init: &mut InitFn|
         -> Result<Linear> {
            Ok(Linear {
                w: store.add(format!("{name}.w"), init(&format!("{name}.w"), &[din, dout]))?,
                b: store.add(format!("{name}.b"), init(&format!("{name}.b"), &[dout]))?,
            })
        };
        let norm = |store: &mut ParamStore, name: String, init: &mut InitFn| -> Result<Norm> {
            Ok(Norm {
                gamma: store.add(format!("{name}.gamma"), init(&format!("{name}.gamma"), &[d]))?,
                beta: store.add(format!("{name}.beta"), init(&format!("{name}.beta"), &[d]))?,
            })
        };
        let attn =
            |store: &mut ParamStore, name: String, init: &mut InitFn| -> Result<AttentionParams> {
                Ok(AttentionParams {
                    q: linear(store, format!("{name}.q"), d, d, init)?,
                    k: linear(store, format!("{name}.k"), d, d, init)?,
                    v: linear(store, format!("{name}.v"), d, d, init)?,
                    o: linear(store, format!("{name}.o"), d, d, init)?,
                })
            };

        let mut projectors = BTreeMap::new();
        for e in &config.input_encoders {
            let name = format!("proj.{}", e.id);
            let mlp = Mlp2 {
                fc1: linear(&mut store, format!("{name}.fc1"), e.dim, d, init)?,
                fc2: linear(&mut store, format!("{name}.fc2"), d, d, init)?,
            };
            projectors.insert(e.id.clone(), mlp);
        }

        let mut blocks = Vec::new();
        for i in 0..config.encoder_depth {
            blocks.push(EncoderBlock {
                norm1: norm(&mut store, format!("enc.{i}.norm1"), init)?,
                attn: attn(&mut store, format!("enc.{i}.attn"), init)?,
                norm2: norm(&mut store, format!("enc.{i}.norm2"), init)?,
                mlp: Mlp2 {
                    fc1: linear(&mut store, format!("enc.{i}.mlp.fc1"), d, hidden, init)?,
                    fc2: linear(&mut store, format!("enc.{i}.mlp.fc2"), hidden, d, init)?,
                },
            });
        }
        let final_norm = norm(&mut store, "enc.final".into(), init)?;

        let mut decoder = Vec::new();
        for i in 0..config.decoder_depth {
            let self_attn = if config.decoder_self_attention {
                Some((
                    norm(&mut store, format!("dec.{i}.self_norm"), init)?,
                    attn(&mut store, format!("dec.{i}.self"), init)?,
                ))
            } else {
                None
            };
            decoder.push(DecoderBlock {
                self_attn,
                cross_norm: norm(&mut store, format!("dec.{i}.cross_norm"), init)?,
                cross: attn(&mut store, format!("dec.{i}.cross"), init)?,
                mlp_norm: norm(&mut store, format!("dec.{i}.mlp_norm"), init)?,
                mlp: Mlp2 {
                    fc1: linear(&mut store, format!("dec.{i}.mlp.fc1"), d, hidden, init)?,
                    fc2: linear(&mut store, format!("dec.{i}.mlp.fc2"), hidden, d, init)?,
                },
            });
        }
        let decoder_norm = norm(&mut store, "dec.final".into(), init)?;
        let mask_token = store.add("mask_token", init("mask_token", &[d]))?;

        let mut heads = BTreeMap::new();
        for e in &config.target_encoders {
            let name = format!("head.{}", e.id);
            let mlp = Mlp2 {
                fc1: linear(&mut store, format!("{name}.fc1"), d, d, init)?,
                fc2: linear(&mut store, format!("{name}.fc2"), d, e.dim, init)?,
            };
            heads.insert(e.id.clone(), mlp);
        }

        Ok(TiconParams {
            config,
            store,
            projectors,
            blocks,
            final_norm,
            decoder,
            decoder_norm,
            mask_token,
            heads,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Append projector and output head for an encoder unseen at pretraining.
    /// Existing tensors are untouched; returns the new parameter ids.
    pub fn add_encoder(&mut self, id: &str, dim: usize, seed: u64) -> Result<Vec<ParamId>> {
        if self.projectors.contains_key(id) || self.heads.contains_key(id) {
            return Err(Error::Registry(format!("encoder {id} already present")));
        }
        let d = self.config.d_model;
        let mut init = trunc_normal_init(stream_seed(seed, &format!("adapt/{id}")));
        let mut new_ids = Vec::new();
        let mut linear = |store: &mut ParamStore,
                          name: String,
                          din: usize,
                          dout: usize,
                          ids: &mut Vec<ParamId>|
         -> Result<Linear> {
            let w = store.add(format!("{name}.w"), init(&format!("{name}.w"), &[din, dout]))?;
            let b = store.add(format!("{name}.b"), init(&format!("{name}.b"), &[dout]))?;
            ids.push(w);
            ids.push(b);
            Ok(Linear { w, b })
        };
        let proj = Mlp2 {
            fc1: linear(&mut self.store, format!("proj.{id}.fc1"), dim, d, &mut new_ids)?,
            fc2: linear(&mut self.store, format!("proj.{id}.fc2"), d, d, &mut new_ids)?,
        };
        let head = Mlp2 {
            fc1: linear(&mut self.store, format!("head.{id}.fc1"), d, d, &mut new_ids)?,
            fc2: linear(&mut self.store, format!("head.{id}.fc2"), d, dim, &mut new_ids)?,
        };
        self.projectors.insert(id.to_string(), proj);
        self.heads.insert(id.to_string(), head);
        self.config.input_encoders.push(EncoderEntry::new(id, dim));
        self.config.target_encoders.push(EncoderEntry::new(id, dim));
        self.config.normalize();
        Ok(new_ids)
    }

    pub fn total_params(&self) -> usize {
        self.store.total_params()
    }

    /// Scalar parameter count of tensors whose name starts with `prefix`.
    pub fn params_with_prefix(&self, prefix: &str) -> usize {
        self.store
            .iter()
            .filter(|(name, _)| name.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn encoder_param_count(&self) -> usize {
        self.params_with_prefix("enc.")
    }

    pub fn decoder_param_count(&self) -> usize {
        self.params_with_prefix("dec.") + self.store.get(self.mask_token).numel()
    }

    /// Save to a TCK1 container; tensors are written in f32 after rounding the
    /// live values to f32 so that saving commutes with reloading.
    pub fn save(&self, path: &std::path::Path, extra: Option<&KvConfig>) -> Result<()> {
        let mut cfg = extra.cloned().unwrap_or_default();
        self.config.write_config(&mut cfg);
        let tensors: Vec<(String, Vec<usize>, Vec<f32>)> = self
            .store
            .iter()
            .map(|(name, t)| {
                (name.to_string(), t.shape.clone(), t.data.iter().map(|&v| v as f32).collect())
            })
            .collect();
        write_container(path, &cfg.canonical(), &tensors)
    }

    /// Load from a TCK1 container, verifying the manifest matches the layout
    /// implied by the config block.
    pub fn load(path: &std::path::Path) -> Result<(Self, KvConfig)> {
        let container = read_container(path)?;
        let cfg = KvConfig::parse(&container.config_text)?;
        let model_cfg = ModelConfig::read_config(&cfg)?;
        let mut params = Self::build(model_cfg, &mut zeros_init)?;
        let mut seen = 0usize;
        for (name, shape, data) in &container.tensors {
            let id = params.store.find(name).ok_or_else(|| {
                Error::Format { offset: 0, msg: format!("manifest tensor {name} not in config layout") }
            })?;
            let t = params.store.get_mut(id);
            if &t.shape != shape {
                return Err(Error::Format {
                    offset: 0,
                    msg: format!("tensor {name}: manifest shape {shape:?} vs layout {:?}", t.shape),
                });
            }
            t.data = data.iter().map(|&v| f64::from(v)).collect();
            seen += 1;
        }
        if seen != params.store.len() {
            return Err(Error::Format {
                offset: 0,
                msg: format!(
                    "manifest holds {seen} of {} tensors required by config",
                    params.store.len()
                ),
            });
        }
        Ok((params, cfg))
    }
}
