use super::spec::{LayerSpec, ModelSpec};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{
    dropout, Activation, AttentionDecoder, BiLstm, Conv1d, Conv2d, Ctx, Dense, Embedding, Init, Lstm, ParamStore, Seq,
};

#[derive(Clone, Debug)]
enum Layer {
    Flatten,
    Dense(Dense),
    Lstm(Lstm),
    BiLstm(BiLstm),
    Attention(AttentionDecoder),
    Conv1d(Conv1d),
    Conv2d(Conv2d),
    Dropout(f64),
    GlobalMaxPool,
    Embedding(Embedding),
    ExpandChannel,
}

/// Model input for one batch.
pub enum Input<'a> {
    Dense(Seq),
    Ids { ids: &'a [Option<usize>], batch: usize },
}

/// The executable form of a [`ModelSpec`], possibly truncated after its
/// penultimate layer.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<Layer>,
}

impl Model {
    /// Registers parameters named `{prefix}l{i}.{kind}.*` for the first
    /// `depth` layers.
    pub fn build(spec: &ModelSpec, store: &mut ParamStore, init: &mut Init, prefix: &str, depth: usize) -> Result<Self> {
        let shapes = spec.validate()?;
        if depth == 0 || depth > spec.layers.len() {
            return Err(Error::Contract(format!("{}: cannot build {depth} layers", spec.name)));
        }
        let opt = spec.optimizer;
        let mut prev = spec.input_act()?;
        let mut layers = Vec::with_capacity(depth);
        for (i, l) in spec.layers[..depth].iter().enumerate() {
            let name = format!("{prefix}l{i}.{}", l.kind());
            let in_width = *prev.dims().last().expect("non-empty shape");
            let layer = match *l {
                LayerSpec::Flatten => Layer::Flatten,
                LayerSpec::Dense { units, activation } => {
                    Layer::Dense(Dense::new(store, init, &name, prev.width(), units, activation, opt)?)
                }
                LayerSpec::Lstm {
                    units,
                    return_sequences,
                } => Layer::Lstm(Lstm::new(store, init, &name, in_width, units, return_sequences, opt)?),
                LayerSpec::BiLstm {
                    units,
                    return_sequences,
                } => Layer::BiLstm(BiLstm::new(store, init, &name, in_width, units, return_sequences, opt)?),
                LayerSpec::AttentionDecoder { units, bidirectional } => {
                    Layer::Attention(AttentionDecoder::new(store, init, &name, in_width, units, bidirectional, opt)?)
                }
                LayerSpec::Conv1d { filters, kernel, stride } => Layer::Conv1d(Conv1d::new(
                    store,
                    init,
                    &name,
                    in_width,
                    filters,
                    kernel,
                    stride,
                    Activation::Relu,
                    opt,
                )?),
                LayerSpec::Conv2d { filters, kernel, stride } => Layer::Conv2d(Conv2d::new(
                    store,
                    init,
                    &name,
                    in_width,
                    filters,
                    kernel,
                    stride,
                    Activation::Relu,
                    opt,
                )?),
                LayerSpec::Dropout { p } => Layer::Dropout(p),
                LayerSpec::GlobalMaxPool => Layer::GlobalMaxPool,
                LayerSpec::Embedding { rows, dim } => Layer::Embedding(Embedding::new(store, init, &name, rows, dim, opt)?),
                LayerSpec::ExpandChannel => Layer::ExpandChannel,
            };
            layers.push(layer);
            prev = shapes[i];
        }
        Ok(Model {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn forward(&self, ctx: &mut Ctx, input: Input) -> Result<Var> {
        match (input, self.layers.first()) {
            (Input::Ids { ids, batch }, Some(Layer::Embedding(e))) => {
                let seq = e.forward(ctx, ids, batch)?;
                self.run_from(ctx, seq, 1)
            }
            (Input::Dense(seq), Some(l)) if !matches!(l, Layer::Embedding(_)) => self.run_from(ctx, seq, 0),
            (Input::Ids { .. }, _) => Err(Error::Contract(format!(
                "{}: token input needs an embedding layer",
                self.spec.name
            ))),
            (Input::Dense(_), _) => Err(Error::Contract(format!("{}: expects token ids", self.spec.name))),
        }
    }

    fn run_from(&self, ctx: &mut Ctx, mut cur: Seq, start: usize) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate().skip(start) {
            let wrap = |e: Error| match e {
                Error::Shape { op, lhs, rhs } => Error::Data(format!(
                    "{} layer {i} ({}): {op} shape mismatch {lhs:?} vs {rhs:?}",
                    self.spec.name,
                    self.spec.layers[i].kind()
                )),
                other => other,
            };
            cur = match layer {
                Layer::Flatten => Seq::dense(ctx.graph.flatten(cur.var).map_err(wrap)?),
                Layer::Dense(d) => Seq::dense(d.forward(ctx, cur.var).map_err(wrap)?),
                Layer::Lstm(l) => l.forward(ctx, &cur).map_err(wrap)?,
                Layer::BiLstm(l) => l.forward(ctx, &cur).map_err(wrap)?,
                Layer::Attention(a) => Seq::dense(a.forward(ctx, &cur).map_err(wrap)?),
                Layer::Conv1d(c) => Seq::dense(c.forward(ctx, cur.var).map_err(wrap)?),
                Layer::Conv2d(c) => Seq::dense(c.forward(ctx, cur.var).map_err(wrap)?),
                Layer::Dropout(p) => Seq {
                    var: dropout(ctx, cur.var, *p)?,
                    lengths: cur.lengths,
                },
                Layer::GlobalMaxPool => Seq::dense(ctx.graph.max_axis1(cur.var).map_err(wrap)?),
                Layer::Embedding(_) => {
                    return Err(Error::Contract(format!("{}: embedding must be the first layer", self.spec.name)))
                }
                Layer::ExpandChannel => {
                    let mut s = ctx.graph.shape(cur.var).to_vec();
                    s.push(1);
                    Seq::dense(ctx.graph.reshape(cur.var, s).map_err(wrap)?)
                }
            };
        }
        Ok(cur.var)
    }
}
