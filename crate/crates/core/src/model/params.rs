use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError};
use crate::tensor::{read_checkpoint, write_checkpoint, Graph, Tensor, Var};
use crate::Scalar;

/// Appended to a checkpoint path to name its config sidecar.
pub const CONFIG_SUFFIX: &str = ".cfg";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpertSlots<I> {
    pub gate: I,
    pub up: I,
    pub down: I,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadSlots<I> {
    pub q: I,
    pub k: I,
    pub v: I,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionSlots<I> {
    pub norm: I,
    pub heads: Vec<HeadSlots<I>>,
    pub out: I,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FfnSlots<I> {
    Moe {
        norm: I,
        router: I,
        shared_gate: I,
        shared: ExpertSlots<I>,
        experts: Vec<ExpertSlots<I>>,
    },
    Dense {
        norm: I,
        ffn: ExpertSlots<I>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSlots<I> {
    pub attention: AttentionSlots<I>,
    pub ffn: FfnSlots<I>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassHeadSlots<I> {
    pub w1: I,
    pub b1: I,
    pub w2: I,
    pub b2: I,
}

/// Where each weight lives in the flat parameter list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout<I> {
    pub embedding: I,
    pub layers: Vec<LayerSlots<I>>,
    pub final_norm: I,
    pub vocab: I,
    pub class_head: Option<ClassHeadSlots<I>>,
}

impl<I: Copy> ExpertSlots<I> {
    fn map<J>(&self, f: &impl Fn(I) -> J) -> ExpertSlots<J> {
        ExpertSlots {
            gate: f(self.gate),
            up: f(self.up),
            down: f(self.down),
        }
    }
}

impl<I: Copy> Layout<I> {
    pub fn map<J>(&self, f: impl Fn(I) -> J) -> Layout<J> {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerSlots {
                attention: AttentionSlots {
                    norm: f(l.attention.norm),
                    heads: l
                        .attention
                        .heads
                        .iter()
                        .map(|h| HeadSlots {
                            q: f(h.q),
                            k: f(h.k),
                            v: f(h.v),
                        })
                        .collect(),
                    out: f(l.attention.out),
                },
                ffn: match &l.ffn {
                    FfnSlots::Moe {
                        norm,
                        router,
                        shared_gate,
                        shared,
                        experts,
                    } => FfnSlots::Moe {
                        norm: f(*norm),
                        router: f(*router),
                        shared_gate: f(*shared_gate),
                        shared: shared.map(&f),
                        experts: experts.iter().map(|e| e.map(&f)).collect(),
                    },
                    FfnSlots::Dense { norm, ffn } => FfnSlots::Dense {
                        norm: f(*norm),
                        ffn: ffn.map(&f),
                    },
                },
            })
            .collect();
        Layout {
            embedding: f(self.embedding),
            layers,
            final_norm: f(self.final_norm),
            vocab: f(self.vocab),
            class_head: self.class_head.map(|h| ClassHeadSlots {
                w1: f(h.w1),
                b1: f(h.b1),
                w2: f(h.w2),
                b2: f(h.b2),
            }),
        }
    }
}

/// Learning-rate group of a tensor: `0` is the embedding, `1..=L` the
/// blocks, `L + 1` the final norm and heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamGroup(pub usize);

enum Init {
    Normal,
    Ones,
    Zeros,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
    group: usize,
}

struct Builder {
    specs: Vec<Spec>,
    d: usize,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init, group: usize) -> usize {
        self.specs.push(Spec {
            name,
            shape: shape.to_vec(),
            init,
            group,
        });
        self.specs.len() - 1
    }

    fn expert(&mut self, name: &str, width: usize, group: usize) -> ExpertSlots<usize> {
        let d = self.d;
        ExpertSlots {
            gate: self.add(format!("{name}.gate"), &[d, width], Init::Normal, group),
            up: self.add(format!("{name}.up"), &[d, width], Init::Normal, group),
            down: self.add(format!("{name}.down"), &[width, d], Init::Normal, group),
        }
    }
}

fn specs(cfg: &ModelConfig) -> (Vec<Spec>, Layout<usize>) {
    let (d, dm, c) = (cfg.d_model, cfg.head_dim(), cfg.vocab_size);
    let mut b = Builder { specs: Vec::new(), d };
    let embedding = b.add("embed".into(), &[c, d], Init::Normal, 0);
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let g = l + 1;
        let p = format!("layer{l}");
        let norm = b.add(format!("{p}.attn.norm"), &[d], Init::Ones, g);
        let heads = (0..cfg.heads)
            .map(|h| HeadSlots {
                q: b.add(format!("{p}.attn.head{h}.q"), &[d, dm], Init::Normal, g),
                k: b.add(format!("{p}.attn.head{h}.k"), &[d, dm], Init::Normal, g),
                v: b.add(format!("{p}.attn.head{h}.v"), &[d, dm], Init::Normal, g),
            })
            .collect();
        let out = b.add(format!("{p}.attn.out"), &[d, d], Init::Normal, g);
        let ffn_norm = b.add(format!("{p}.ffn.norm"), &[d], Init::Ones, g);
        let ffn = match cfg.dense_ffn {
            Some(w) => FfnSlots::Dense {
                norm: ffn_norm,
                ffn: b.expert(&format!("{p}.ffn.dense"), w, g),
            },
            None => {
                let router = b.add(format!("{p}.ffn.router"), &[d, cfg.experts], Init::Normal, g);
                let shared_gate = b.add(format!("{p}.ffn.shared_gate"), &[d], Init::Normal, g);
                let shared = b.expert(&format!("{p}.ffn.shared"), cfg.d_ff, g);
                let experts = (0..cfg.experts)
                    .map(|e| b.expert(&format!("{p}.ffn.expert{e}"), cfg.expert_width(), g))
                    .collect();
                FfnSlots::Moe {
                    norm: ffn_norm,
                    router,
                    shared_gate,
                    shared,
                    experts,
                }
            }
        };
        layers.push(LayerSlots {
            attention: AttentionSlots { norm, heads, out },
            ffn,
        });
    }
    let top = cfg.layers + 1;
    let final_norm = b.add("final_norm".into(), &[d], Init::Ones, top);
    let vocab = b.add("vocab".into(), &[d, c], Init::Normal, top);
    let class_head = cfg.num_classes.map(|nc| ClassHeadSlots {
        w1: b.add("cls.w1".into(), &[d, d], Init::Normal, top),
        b1: b.add("cls.b1".into(), &[d], Init::Zeros, top),
        w2: b.add("cls.w2".into(), &[d, nc], Init::Normal, top),
        b2: b.add("cls.b2".into(), &[nc], Init::Zeros, top),
    });
    let layout = Layout {
        embedding,
        layers,
        final_norm,
        vocab,
        class_head,
    };
    (b.specs, layout)
}

/// All learnable tensors of one model, stored flat with a [`Layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub layout: Layout<usize>,
    pub names: Vec<String>,
    pub groups: Vec<ParamGroup>,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Normal(0, init_std) matrices, unit norm gains, zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let (specs, layout) = specs(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = specs
            .iter()
            .map(|s| match s.init {
                Init::Normal => Tensor::randn(&s.shape, config.init_std, &mut rng),
                Init::Ones => Tensor::full(&s.shape, T::one()),
                Init::Zeros => Tensor::zeros(&s.shape),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            layout,
            names: specs.iter().map(|s| s.name.clone()).collect(),
            groups: specs.iter().map(|s| ParamGroup(s.group)).collect(),
            tensors,
        })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Registers every tensor on the tape; returns the flat vars and the
    /// same vars arranged by layout.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> (Vec<Var>, Layout<Var>) {
        let vars: Vec<Var> = self.tensors.iter().map(|t| g.param(t)).collect();
        let layout = self.layout.map(|i| vars[i]);
        (vars, layout)
    }

    /// Rank-1 tensors (gains, gate vector, biases) take no weight decay.
    pub fn decays(&self, index: usize) -> bool {
        self.tensors[index].shape().len() > 1
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            names: self.names.clone(),
            groups: self.groups.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn config_path(ckpt: &Path) -> PathBuf {
        let mut s = ckpt.as_os_str().to_owned();
        s.push(CONFIG_SUFFIX);
        PathBuf::from(s)
    }

    /// Writes the tensors and a TOML config sidecar next to them.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let named: Vec<(&str, &Tensor<T>)> = self.names.iter().map(String::as_str).zip(&self.tensors).collect();
        let f = BufWriter::new(File::create(path)?);
        write_checkpoint(f, &named)?;
        std::fs::write(Self::config_path(path), self.config.to_toml())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(Self::config_path(path))?;
        let config = ModelConfig::from_toml(&text)?;
        let mut params = Self::init(&config, 0)?;
        let stored = read_checkpoint::<T, _>(BufReader::new(File::open(path)?))?;
        if stored.len() != params.len() {
            return Err(ModelError::TensorMismatch {
                name: "*".into(),
                reason: format!("expected {} tensors, found {}", params.len(), stored.len()),
            });
        }
        for (i, (name, t)) in stored.into_iter().enumerate() {
            if name != params.names[i] {
                return Err(ModelError::TensorMismatch {
                    reason: format!("expected {}", params.names[i]),
                    name,
                });
            }
            if t.shape() != params.tensors[i].shape() {
                return Err(ModelError::TensorMismatch {
                    reason: format!("shape {:?}, expected {:?}", t.shape(), params.tensors[i].shape()),
                    name,
                });
            }
            params.tensors[i] = t;
        }
        Ok(params)
    }
}
