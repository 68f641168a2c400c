use rand::Rng;

use super::{Activation, Ctx, Init, Lengths, Mode, OptimizerKind, ParamId, ParamStore};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Additive score for padded attention positions; underflows to zero weight.
const MASKED_SCORE: f64 = -1e9;

/// A batch-major activation plus the valid length of each sample, when the
/// leading axes are `(B, T, ...)` and trailing steps are padding.
#[derive(Clone, Debug)]
pub struct Seq {
    pub var: Var,
    pub lengths: Lengths,
}

impl Seq {
    pub fn dense(var: Var) -> Self {
        Seq { var, lengths: None }
    }
}

fn apply(g: &mut Graph, x: Var, act: Activation) -> Var {
    match act {
        Activation::Relu => g.relu(x),
        Activation::None => x,
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    w: ParamId,
    b: ParamId,
    act: Activation,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        inputs: usize,
        units: usize,
        act: Activation,
        opt: OptimizerKind,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.weight"), init.fan_in(vec![inputs, units], inputs), opt)?;
        let b = store.add(format!("{name}.bias"), Tensor::zeros(vec![units]), opt)?;
        Ok(Dense { w, b, act })
    }

    /// `act(x · W + b)` for `x: (B, inputs)`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let y = ctx.graph.matmul(x, ctx.var(self.w))?;
        let y = ctx.graph.add(y, ctx.var(self.b))?;
        Ok(apply(ctx.graph, y, self.act))
    }
}

/// Inverted dropout: in training, zero each element with probability `p`
/// and scale survivors by `1 / (1 - p)`. Identity otherwise.
pub fn dropout(ctx: &mut Ctx, x: Var, p: f64) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
    }
    if ctx.mode == Mode::Infer || p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - p;
    let shape = ctx.graph.shape(x).to_vec();
    let rng = &mut ctx.rng;
    let mask = Tensor::from_fn(shape, |_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 });
    ctx.graph.mask_apply(x, mask)
}

/// Four-gate LSTM cell, gate order input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct LstmCell {
    wx: ParamId,
    wh: ParamId,
    b: ParamId,
    units: usize,
}

struct State {
    h: Var,
    c: Var,
    zero: bool,
}

impl LstmCell {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        inputs: usize,
        units: usize,
        opt: OptimizerKind,
    ) -> Result<Self> {
        let limit = 1.0 / (units as f64).sqrt();
        let wx = store.add(format!("{name}.wx"), init.uniform(vec![inputs, 4 * units], limit), opt)?;
        let wh = store.add(format!("{name}.wh"), init.uniform(vec![units, 4 * units], limit), opt)?;
        let mut bias = Tensor::zeros(vec![4 * units]);
        bias.data_mut()[units..2 * units].fill(1.0);
        let b = store.add(format!("{name}.bias"), bias, opt)?;
        Ok(LstmCell { wx, wh, b, units })
    }

    pub fn units(&self) -> usize {
        self.units
    }

    /// One step from the pre-projected input `xw = x · Wx + b`.
    fn step(&self, ctx: &mut Ctx, xw: Var, state: &State) -> Result<(Var, Var)> {
        let g = &mut *ctx.graph;
        let z = if state.zero {
            xw
        } else {
            let hw = g.matmul(state.h, ctx.vars[self.wh.index()])?;
            g.add(xw, hw)?
        };
        let u = self.units;
        let zi = g.slice_last(z, 0, u)?;
        let zf = g.slice_last(z, u, u)?;
        let zg = g.slice_last(z, 2 * u, u)?;
        let zo = g.slice_last(z, 3 * u, u)?;
        let (i, f, cand, o) = (g.sigmoid(zi), g.sigmoid(zf), g.tanh(zg), g.sigmoid(zo));
        let ig = g.mul(i, cand)?;
        let c = if state.zero {
            ig
        } else {
            let fc = g.mul(f, state.c)?;
            g.add(fc, ig)?
        };
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok((h, c))
    }

    /// Single cell update on `x: (B, inputs)` from a given hidden state
    /// (`None` = zeros) and zero cell state.
    pub fn step_from(&self, ctx: &mut Ctx, x: Var, h0: Option<Var>) -> Result<Var> {
        let batch = ctx.graph.shape(x)[0];
        let xw = ctx.graph.matmul(x, ctx.var(self.wx))?;
        let xw = ctx.graph.add(xw, ctx.var(self.b))?;
        let zeros = ctx.graph.constant(Tensor::zeros(vec![batch, self.units]));
        let state = State {
            h: h0.unwrap_or(zeros),
            c: zeros,
            zero: h0.is_none(),
        };
        let (h, _) = self.step(ctx, xw, &state)?;
        Ok(h)
    }

    /// Runs the recurrence over `x: (B, T, D)`. Padded steps keep the state
    /// and emit zeros. Returns per-step outputs in time order and the final
    /// hidden state.
    pub fn run(&self, ctx: &mut Ctx, x: &Seq, reverse: bool) -> Result<(Vec<Var>, Var)> {
        let shape = ctx.graph.shape(x.var).to_vec();
        let [b, t, d] = shape[..] else {
            return Err(Error::Domain {
                op: "lstm",
                msg: format!("expected (B, T, D) input, got {shape:?}"),
            });
        };
        if t == 0 {
            return Err(Error::Contract("lstm over an empty sequence".into()));
        }
        let flat = ctx.graph.reshape(x.var, vec![b * t, d])?;
        let xw = ctx.graph.matmul(flat, ctx.var(self.wx))?;
        let xw = ctx.graph.add(xw, ctx.var(self.b))?;
        let xw = ctx.graph.reshape(xw, vec![b, t, 4 * self.units])?;

        let zeros = ctx.graph.constant(Tensor::zeros(vec![b, self.units]));
        let mut state = State {
            h: zeros,
            c: zeros,
            zero: true,
        };
        let mut outputs = vec![zeros; t];
        let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for step in order {
            let valid: Vec<bool> = match &x.lengths {
                Some(l) => l.iter().map(|&n| step < n).collect(),
                None => vec![true; b],
            };
            let n_valid = valid.iter().filter(|v| **v).count();
            if n_valid == 0 {
                continue;
            }
            let xt = ctx.graph.select_axis1(xw, step)?;
            let (h_new, c_new) = self.step(ctx, xt, &state)?;
            if n_valid == b {
                state = State {
                    h: h_new,
                    c: c_new,
                    zero: false,
                };
                outputs[step] = h_new;
            } else {
                let mask = Tensor::from_fn(vec![b, self.units], |i| {
                    if valid[i / self.units] {
                        1.0
                    } else {
                        0.0
                    }
                });
                let g = &mut *ctx.graph;
                let m = g.constant(mask);
                let blend = |g: &mut Graph, old: Var, new: Var| -> Result<Var> {
                    let diff = g.sub(new, old)?;
                    let kept = g.mul(m, diff)?;
                    g.add(old, kept)
                };
                let h = blend(g, state.h, h_new)?;
                let c = blend(g, state.c, c_new)?;
                outputs[step] = g.mul(m, h)?;
                state = State { h, c, zero: false };
            }
        }
        Ok((outputs, state.h))
    }
}

#[derive(Clone, Debug)]
pub struct Lstm {
    cell: LstmCell,
    return_sequences: bool,
}

impl Lstm {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        inputs: usize,
        units: usize,
        return_sequences: bool,
        opt: OptimizerKind,
    ) -> Result<Self> {
        Ok(Lstm {
            cell: LstmCell::new(store, init, name, inputs, units, opt)?,
            return_sequences,
        })
    }

    /// `(B, T, units)` when returning sequences, else the final `(B, units)`.
    pub fn forward(&self, ctx: &mut Ctx, x: &Seq) -> Result<Seq> {
        let (outs, last) = self.cell.run(ctx, x, false)?;
        if self.return_sequences {
            Ok(Seq {
                var: ctx.graph.stack_axis1(&outs)?,
                lengths: x.lengths.clone(),
            })
        } else {
            Ok(Seq::dense(last))
        }
    }
}

/// Independent forward and backward cells, concatenated `[forward | backward]`.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub forward_cell: LstmCell,
    pub backward_cell: LstmCell,
    return_sequences: bool,
}

impl BiLstm {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        inputs: usize,
        units: usize,
        return_sequences: bool,
        opt: OptimizerKind,
    ) -> Result<Self> {
        Ok(BiLstm {
            forward_cell: LstmCell::new(store, init, &format!("{name}.fwd"), inputs, units, opt)?,
            backward_cell: LstmCell::new(store, init, &format!("{name}.bwd"), inputs, units, opt)?,
            return_sequences,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: &Seq) -> Result<Seq> {
        let (fo, fl) = self.forward_cell.run(ctx, x, false)?;
        let (bo, bl) = self.backward_cell.run(ctx, x, true)?;
        if self.return_sequences {
            let steps = fo
                .iter()
                .zip(&bo)
                .map(|(f, b)| ctx.graph.concat(&[*f, *b], 1))
                .collect::<Result<Vec<_>>>()?;
            Ok(Seq {
                var: ctx.graph.stack_axis1(&steps)?,
                lengths: x.lengths.clone(),
            })
        } else {
            Ok(Seq::dense(ctx.graph.concat(&[fl, bl], 1)?))
        }
    }
}

#[derive(Clone, Debug)]
struct AttentionHead {
    w_enc: ParamId,
    w_dec: ParamId,
    v: ParamId,
    w_init: ParamId,
    b_init: ParamId,
    cell: LstmCell,
    /// Reads the sequence back to front: seeds from the first encoder state.
    reversed: bool,
}

/// Additive-attention decoder emitting one decoded step per direction.
///
/// The decoder state is seeded from `tanh(W · h_ref + b)` where `h_ref` is
/// the last valid encoder state (first, for the reversed head). Scores are
/// `vᵀ tanh(W_enc h_t + W_dec s)`; the context `Σ α_t h_t` drives one LSTM
/// step whose hidden state is the output.
#[derive(Clone, Debug)]
pub struct AttentionDecoder {
    heads: Vec<AttentionHead>,
    units: usize,
}

impl AttentionDecoder {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        enc_width: usize,
        units: usize,
        bidirectional: bool,
        opt: OptimizerKind,
    ) -> Result<Self> {
        let dirs: &[(bool, &str)] = if bidirectional {
            &[(false, "fwd"), (true, "bwd")]
        } else {
            &[(false, "fwd")]
        };
        let heads = dirs
            .iter()
            .map(|&(reversed, tag)| {
                let n = format!("{name}.{tag}");
                Ok(AttentionHead {
                    w_enc: store.add(format!("{n}.w_enc"), init.fan_in(vec![enc_width, units], enc_width), opt)?,
                    w_dec: store.add(format!("{n}.w_dec"), init.fan_in(vec![units, units], units), opt)?,
                    v: store.add(format!("{n}.v"), init.fan_in(vec![units, 1], units), opt)?,
                    w_init: store.add(format!("{n}.w_init"), init.fan_in(vec![enc_width, units], enc_width), opt)?,
                    b_init: store.add(format!("{n}.b_init"), Tensor::zeros(vec![units]), opt)?,
                    cell: LstmCell::new(store, init, &format!("{n}.cell"), enc_width, units, opt)?,
                    reversed,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AttentionDecoder { heads, units })
    }

    pub fn output_width(&self) -> usize {
        self.units * self.heads.len()
    }

    pub fn forward(&self, ctx: &mut Ctx, enc: &Seq) -> Result<Var> {
        Ok(self.forward_with_weights(ctx, enc)?.0)
    }

    /// Also returns the attention weights `(B, T)` of each head.
    pub fn forward_with_weights(&self, ctx: &mut Ctx, enc: &Seq) -> Result<(Var, Vec<Var>)> {
        let shape = ctx.graph.shape(enc.var).to_vec();
        let [b, t, h] = shape[..] else {
            return Err(Error::Domain {
                op: "attention_decode",
                msg: format!("expected (B, T, H) encoder states, got {shape:?}"),
            });
        };
        if t == 0 {
            return Err(Error::Contract("attention over an empty sequence".into()));
        }
        let lengths: Vec<usize> = match &enc.lengths {
            Some(l) => l.iter().map(|&n| n.clamp(1, t)).collect(),
            None => vec![t; b],
        };
        let padded = lengths.iter().any(|&n| n < t);
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut weights = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let g = &mut *ctx.graph;
            let pick = Tensor::from_fn(vec![b, t], |i| {
                let (bi, ti) = (i / t, i % t);
                let target = if head.reversed { 0 } else { lengths[bi] - 1 };
                if ti == target {
                    1.0
                } else {
                    0.0
                }
            });
            let pick = g.constant(pick);
            let h_ref = g.weighted_sum_axis1(pick, enc.var)?;
            let s0 = g.matmul(h_ref, ctx.vars[head.w_init.index()])?;
            let s0 = g.add(s0, ctx.vars[head.b_init.index()])?;
            let s0 = g.tanh(s0);

            let flat = g.reshape(enc.var, vec![b * t, h])?;
            let e = g.matmul(flat, ctx.vars[head.w_enc.index()])?;
            let e = g.reshape(e, vec![b, t, self.units])?;
            let d = g.matmul(s0, ctx.vars[head.w_dec.index()])?;
            let d = g.expand_axis1(d, t)?;
            let u = g.add(e, d)?;
            let u = g.tanh(u);
            let u = g.reshape(u, vec![b * t, self.units])?;
            let scores = g.matmul(u, ctx.vars[head.v.index()])?;
            let mut scores = g.reshape(scores, vec![b, t])?;
            if padded {
                let mask = Tensor::from_fn(vec![b, t], |i| {
                    if i % t < lengths[i / t] {
                        0.0
                    } else {
                        MASKED_SCORE
                    }
                });
                let mask = g.constant(mask);
                scores = g.add(scores, mask)?;
            }
            let alpha = g.softmax_last(scores);
            let context = g.weighted_sum_axis1(alpha, enc.var)?;
            let out = head.cell.step_from(ctx, context, Some(s0))?;
            outs.push(out);
            weights.push(alpha);
        }
        let out = if outs.len() == 1 {
            outs[0]
        } else {
            ctx.graph.concat(&outs, 1)?
        };
        Ok((out, weights))
    }
}

/// Same-padded 1-D convolution over `(B, L, C)`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    w: ParamId,
    b: ParamId,
    stride: usize,
    act: Activation,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        channels: usize,
        filters: usize,
        kernel: usize,
        stride: usize,
        act: Activation,
        opt: OptimizerKind,
    ) -> Result<Self> {
        let fan_in = kernel * channels;
        let w = store.add(format!("{name}.weight"), init.fan_in(vec![1, kernel, channels, filters], fan_in), opt)?;
        let b = store.add(format!("{name}.bias"), Tensor::zeros(vec![filters]), opt)?;
        Ok(Conv1d { w, b, stride, act })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let s = ctx.graph.shape(x).to_vec();
        let [b, l, c] = s[..] else {
            return Err(Error::Domain {
                op: "conv1d",
                msg: format!("expected (B, L, C), got {s:?}"),
            });
        };
        let x4 = ctx.graph.reshape(x, vec![b, 1, l, c])?;
        let y = ctx.graph.conv2d(x4, ctx.var(self.w), ctx.var(self.b), (1, self.stride))?;
        let ys = ctx.graph.shape(y).to_vec();
        let y = ctx.graph.reshape(y, vec![b, ys[2], ys[3]])?;
        Ok(apply(ctx.graph, y, self.act))
    }
}

/// Same-padded square-kernel 2-D convolution over `(B, H, W, C)`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    w: ParamId,
    b: ParamId,
    stride: usize,
    act: Activation,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        channels: usize,
        filters: usize,
        kernel: usize,
        stride: usize,
        act: Activation,
        opt: OptimizerKind,
    ) -> Result<Self> {
        let fan_in = kernel * kernel * channels;
        let w = store.add(
            format!("{name}.weight"),
            init.fan_in(vec![kernel, kernel, channels, filters], fan_in),
            opt,
        )?;
        let b = store.add(format!("{name}.bias"), Tensor::zeros(vec![filters]), opt)?;
        Ok(Conv2d { w, b, stride, act })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let y = ctx.graph.conv2d(x, ctx.var(self.w), ctx.var(self.b), (self.stride, self.stride))?;
        Ok(apply(ctx.graph, y, self.act))
    }
}

/// Trainable lookup table with a shared out-of-vocabulary row.
#[derive(Clone, Debug)]
pub struct Embedding {
    table: ParamId,
}

impl Embedding {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        rows: usize,
        dim: usize,
        opt: OptimizerKind,
    ) -> Result<Self> {
        let table = store.add(format!("{name}.table"), init.uniform(vec![rows, dim], 0.05), opt)?;
        Ok(Embedding { table })
    }

    /// `ids` is `(B, T)` row-major; `None` marks padding.
    pub fn forward(&self, ctx: &mut Ctx, ids: &[Option<usize>], batch: usize) -> Result<Seq> {
        let t = ids.len() / batch.max(1);
        let var = ctx.graph.gather(ctx.var(self.table), ids, &[batch, t])?;
        let lengths: Vec<usize> = ids
            .chunks(t)
            .map(|row| row.iter().rposition(Option::is_some).map_or(0, |p| p + 1))
            .collect();
        Ok(Seq {
            var,
            lengths: Some(lengths.into()),
        })
    }
}
