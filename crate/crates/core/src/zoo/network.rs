use std::path::PathBuf;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Input, Model};
use super::spec::{InputKind, ModelSpec};
use crate::autodiff::{softmax_rows, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{
    dropout, load_checkpoint, Activation, CheckpointHeader, Ctx, Dense, Init, Mode, Optimizer, OptimizerConfig,
    OptimizerKind, ParamStore, Seq,
};
use crate::tensor::Tensor;
use crate::NUM_CLASSES;

/// One batch of inputs for one branch.
#[derive(Clone, Debug, PartialEq)]
pub enum Batch {
    /// `(B, ...)` features with optional per-sample valid lengths.
    Dense { x: Tensor, lengths: Option<Vec<usize>> },
    /// `(B, T)` vocabulary rows, `None` for padding.
    Tokens { ids: Vec<Option<usize>>, batch: usize },
}

impl Batch {
    pub fn batch_size(&self) -> usize {
        match self {
            Batch::Dense { x, .. } => x.shape()[0],
            Batch::Tokens { batch, .. } => *batch,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionRegime {
    /// Members start from their checkpoints (when given) and keep training.
    EndToEnd,
    /// Members are loaded from checkpoints and never updated.
    Frozen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionMember {
    /// Branch key, used as the parameter-name prefix (`key/`).
    pub key: String,
    pub spec: ModelSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionSpec {
    pub members: Vec<FusionMember>,
    pub units: usize,
    pub dropout: f64,
    pub regime: FusionRegime,
}

/// Serializable description sufficient to rebuild a [`Network`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NetworkDesc {
    Single { spec: ModelSpec },
    Fusion { spec: FusionSpec },
}

#[derive(Clone, Debug)]
struct Branch {
    key: String,
    model: Model,
}

#[derive(Clone, Debug)]
struct Head {
    dropout: f64,
    hidden: Dense,
    out: Dense,
}

/// A trainable classifier: one model, or several truncated members joined
/// by a fusion head. Owns all parameters.
#[derive(Clone, Debug)]
pub struct Network {
    name: String,
    pub params: ParamStore,
    branches: Vec<Branch>,
    head: Option<Head>,
    desc: NetworkDesc,
    seed: u64,
}

impl Network {
    /// Fresh seeded parameters for a single catalog model.
    pub fn single(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let mut params = ParamStore::new();
        let model = Model::build(spec, &mut params, &mut init, "", spec.layers.len())?;
        Ok(Network {
            name: spec.name.clone(),
            params,
            branches: vec![Branch {
                key: String::new(),
                model,
            }],
            head: None,
            desc: NetworkDesc::Single { spec: spec.clone() },
            seed,
        })
    }

    /// Members truncated after their penultimate layers, concatenated, then
    /// dropout, dense(units, relu), dense(4).
    pub fn fusion(spec: &FusionSpec, seed: u64) -> Result<Self> {
        if spec.members.is_empty() {
            return Err(Error::Config("fusion needs at least one member".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let mut params = ParamStore::new();
        let mut branches = Vec::new();
        let mut width = 0;
        for m in &spec.members {
            if m.key.is_empty() || m.key.contains('/') || branches.iter().any(|b: &Branch| b.key == m.key) {
                return Err(Error::Config(format!("invalid or duplicate fusion member key {:?}", m.key)));
            }
            let prefix = format!("{}/", m.key);
            let model = Model::build(&m.spec, &mut params, &mut init, &prefix, m.spec.penultimate + 1)?;
            width += m.spec.penultimate_width()?;
            match (&m.checkpoint, spec.regime) {
                (Some(path), _) => {
                    let (header, tensors) = load_checkpoint(path)?;
                    params.load_values(&header, &tensors, &prefix)?;
                }
                (None, FusionRegime::Frozen) => {
                    return Err(Error::Config(format!(
                        "frozen fusion needs a checkpoint for member {}",
                        m.key
                    )))
                }
                (None, FusionRegime::EndToEnd) => {}
            }
            if spec.regime == FusionRegime::Frozen {
                params.set_trainable(&prefix, false);
            }
            branches.push(Branch { key: m.key.clone(), model });
        }
        if !(0.0..1.0).contains(&spec.dropout) {
            return Err(Error::Config(format!("fusion dropout {} outside [0, 1)", spec.dropout)));
        }
        let hidden = Dense::new(
            &mut params,
            &mut init,
            "fusion.hidden",
            width,
            spec.units,
            Activation::Relu,
            OptimizerKind::Adam,
        )?;
        let out = Dense::new(
            &mut params,
            &mut init,
            "fusion.out",
            spec.units,
            NUM_CLASSES,
            Activation::None,
            OptimizerKind::Adam,
        )?;
        let name = spec.members.iter().map(|m| m.spec.name.as_str()).collect::<Vec<_>>().join("+");
        Ok(Network {
            name: format!("fusion({name})"),
            params,
            branches,
            head: Some(Head {
                dropout: spec.dropout,
                hidden,
                out,
            }),
            desc: NetworkDesc::Fusion { spec: spec.clone() },
            seed,
        })
    }

    pub fn from_desc(desc: &NetworkDesc, seed: u64) -> Result<Self> {
        match desc {
            NetworkDesc::Single { spec } => Self::single(spec, seed),
            NetworkDesc::Fusion { spec } => {
                // Stored values replace the member checkpoints when rebuilding.
                let mut spec = spec.clone();
                spec.members.iter_mut().for_each(|m| m.checkpoint = None);
                let frozen = spec.regime == FusionRegime::Frozen;
                spec.regime = FusionRegime::EndToEnd;
                let mut net = Self::fusion(&spec, seed)?;
                if frozen {
                    for m in &spec.members {
                        net.params.set_trainable(&format!("{}/", m.key), false);
                    }
                }
                Ok(net)
            }
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn desc(&self) -> &NetworkDesc {
        &self.desc
    }

    /// Member keys (empty string for a single model) and input kinds, in
    /// the order `forward` expects batches.
    pub fn inputs(&self) -> Vec<(String, InputKind)> {
        self.branches
            .iter()
            .map(|b| (b.key.clone(), b.model.spec().input))
            .collect()
    }

    pub fn specs(&self) -> Vec<&ModelSpec> {
        self.branches.iter().map(|b| b.model.spec()).collect()
    }

    /// Any recurrent layer anywhere (enables gradient clipping).
    pub fn is_recurrent(&self) -> bool {
        self.branches.iter().any(|b| b.model.spec().is_recurrent())
    }

    pub fn optimizer(&self, cfg: &OptimizerConfig) -> Optimizer {
        Optimizer::new(cfg.clone(), &self.params, self.is_recurrent())
    }

    pub fn layer_names(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .branches
            .iter()
            .flat_map(|b| {
                let spec = b.model.spec();
                spec.layers[..b.model.depth()]
                    .iter()
                    .enumerate()
                    .map(move |(i, l)| format!("{}{}l{i}.{}", b.key, if b.key.is_empty() { "" } else { "/" }, l.kind()))
            })
            .collect();
        if self.head.is_some() {
            out.extend(["fusion.dropout", "fusion.hidden", "fusion.out"].map(String::from));
        }
        out
    }

    pub fn checkpoint_header(&self, config_hash: &str) -> CheckpointHeader {
        CheckpointHeader {
            model_name: self.name.clone(),
            layers: self.layer_names(),
            params: vec![],
            seed: self.seed,
            config_hash: config_hash.to_string(),
            extra: serde_json::to_value(&self.desc).expect("network description serializes"),
        }
    }

    /// Logits `(B, 4)` on `ctx.graph`. `batches[i]` feeds branch `i`.
    pub fn forward(&self, ctx: &mut Ctx, batches: &[&Batch]) -> Result<Var> {
        if batches.len() != self.branches.len() {
            return Err(Error::Contract(format!(
                "{} expects {} inputs, got {}",
                self.name,
                self.branches.len(),
                batches.len()
            )));
        }
        let mut feats = Vec::with_capacity(batches.len());
        for (b, batch) in self.branches.iter().zip(batches) {
            let expected = &b.model.spec().input_shape;
            let input = match batch {
                Batch::Dense { x, lengths } => {
                    if &x.shape()[1..] != expected.as_slice() {
                        return Err(Error::Data(format!(
                            "{}: input shape {:?} does not match {:?}",
                            b.model.spec().name,
                            &x.shape()[1..],
                            expected
                        )));
                    }
                    let var = ctx.graph.constant(x.clone());
                    Input::Dense(Seq {
                        var,
                        lengths: lengths.as_ref().map(|l| Rc::from(l.as_slice())),
                    })
                }
                Batch::Tokens { ids, batch } => Input::Ids { ids, batch: *batch },
            };
            feats.push(b.model.forward(ctx, input)?);
        }
        let Some(head) = &self.head else {
            return Ok(feats[0]);
        };
        let joined = if feats.len() == 1 { feats[0] } else { ctx.graph.concat(&feats, 1)? };
        let joined = dropout(ctx, joined, head.dropout)?;
        let h = head.hidden.forward(ctx, joined)?;
        head.out.forward(ctx, h)
    }

    /// Softmax probabilities `(B, 4)` in inference mode.
    pub fn predict_proba(&self, batches: &[&Batch]) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = Ctx {
            graph: &mut g,
            vars: &vars,
            mode: Mode::Infer,
            rng: &mut rng,
        };
        let logits = self.forward(&mut ctx, batches)?;
        Ok(softmax_rows(g.value(logits)))
    }

    /// Mean cross-entropy for one batch, without gradients.
    pub fn loss(&self, batches: &[&Batch], labels: &[usize], mode: Mode, rng: &mut dyn rand::RngCore) -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params.iter().map(|p| g.constant(p.value.clone())).collect();
        let mut ctx = Ctx {
            graph: &mut g,
            vars: &vars,
            mode,
            rng,
        };
        let logits = self.forward(&mut ctx, batches)?;
        let loss = g.softmax_xent(logits, labels)?;
        Ok(g.value(loss).item())
    }

    /// Mean cross-entropy and per-parameter gradients for one batch.
    pub fn loss_and_grads(
        &self,
        batches: &[&Batch],
        labels: &[usize],
        mode: Mode,
        rng: &mut dyn rand::RngCore,
    ) -> Result<(f64, Vec<Option<Tensor>>)> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        let mut ctx = Ctx {
            graph: &mut g,
            vars: &vars,
            mode,
            rng,
        };
        let logits = self.forward(&mut ctx, batches)?;
        let loss = g.softmax_xent(logits, labels)?;
        let value = g.value(loss).item();
        g.backward(loss)?;
        let grads = vars.iter().map(|&v| g.grad(v).cloned()).collect();
        Ok((value, grads))
    }
}
