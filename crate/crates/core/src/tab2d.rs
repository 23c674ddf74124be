//! Cell encoder and alternating row/column attention blocks shared by the
//! compressor and the predictor.
//!
//! Model code is written once against [`Backend`]. [`TapeBackend`] records
//! onto an autodiff [`Graph`] for training; [`EagerBackend`] evaluates
//! directly on tensors for inference and can record or replay a per-layer
//! key/value cache.

use rand::Rng;
use taco_tensor::{kernels, AttentionLayout, Axis, Graph, RowMask, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{normal, ParamId, ParamStore};
use crate::table::{ColumnKind, Table};

/// What goes into the target column of an embedded table.
#[derive(Clone, Copy, Debug)]
pub enum TargetCode<'a> {
    Labels(&'a [usize]),
    /// Query rows: label unknown.
    Missing,
    /// Compressor dummy rows.
    Mask,
}

/// Per-cell encoder inputs: a scalar multiplier for the shared numeric
/// projection and an embedding-table slot. The last column is the target.
#[derive(Clone, Debug, PartialEq)]
pub struct CellCodes {
    pub rows: usize,
    pub cols: usize,
    pub scalars: Vec<f64>,
    pub slots: Vec<usize>,
}

impl CellCodes {
    pub fn from_table(table: &Table, target: TargetCode<'_>, cfg: &ModelConfig) -> Result<Self> {
        let (n, m) = (table.n_rows(), table.n_features());
        let mut scalars = Vec::with_capacity(n * (m + 1));
        let mut slots = Vec::with_capacity(n * (m + 1));
        if let TargetCode::Labels(labels) = target {
            if labels.len() != n {
                return Err(Error::Data(format!("{} labels for {n} rows", labels.len())));
            }
            if let Some(&y) = labels.iter().find(|&&y| y >= cfg.num_classes_max) {
                return Err(Error::Config(format!("label {y} exceeds num_classes_max {}", cfg.num_classes_max)));
            }
        }
        for i in 0..n {
            for (j, col) in table.columns().iter().enumerate() {
                let v = table.cell(i, j);
                if !v.is_finite() {
                    return Err(Error::Data(format!("non-finite value in row {i}, column {}", col.name)));
                }
                match col.kind {
                    ColumnKind::Numeric => {
                        scalars.push(v);
                        slots.push(cfg.numeric_slot());
                    }
                    ColumnKind::Categorical => {
                        scalars.push(0.0);
                        slots.push(cfg.category_slot(v as usize));
                    }
                }
            }
            scalars.push(0.0);
            slots.push(match target {
                TargetCode::Labels(labels) => cfg.class_slot(labels[i]),
                TargetCode::Missing => cfg.missing_target_slot(),
                TargetCode::Mask => cfg.mask_placeholder_slot(),
            });
        }
        Ok(Self {
            rows: n,
            cols: m + 1,
            scalars,
            slots,
        })
    }
}

/// Parameter ids of one encoder.
#[derive(Clone, Copy, Debug)]
pub struct EncoderIds {
    pub table: ParamId,
    pub proj: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct AttnIds {
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnIds {
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockIds {
    pub row: AttnIds,
    pub col: AttnIds,
    pub ffn: FfnIds,
}

/// Encoder, `B` blocks and a closing layer norm under one name prefix.
#[derive(Clone, Debug)]
pub struct Stack {
    pub encoder: EncoderIds,
    pub blocks: Vec<BlockIds>,
    pub final_g: ParamId,
    pub final_b: ParamId,
}

fn dense(rng: &mut impl Rng, din: usize, dout: usize) -> Tensor {
    normal(rng, &[din, dout], 1.0 / (din as f64).sqrt())
}

fn norm_pair(store: &mut ParamStore, name: &str, dim: usize) -> (ParamId, ParamId) {
    let g = store.add(format!("{name}.g"), Tensor::full(&[dim], 1.0));
    let b = store.add(format!("{name}.b"), Tensor::zeros(&[dim]));
    (g, b)
}

fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .find(name)
        .ok_or_else(|| Error::CorruptCheckpoint(format!("missing parameter {name}")))
}

impl Stack {
    pub fn init(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let l = cfg.embed_dim;
        let encoder = EncoderIds {
            table: store.add(format!("{prefix}.encoder.table"), normal(rng, &[cfg.encoder_slots(), l], 1.0)),
            proj: store.add(format!("{prefix}.encoder.proj"), normal(rng, &[1, l], 1.0)),
        };
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            let mut attn = |store: &mut ParamStore, kind: &str| {
                let base = format!("{prefix}.block{b}.{kind}");
                let (ln_g, ln_b) = norm_pair(store, &format!("{base}.ln"), l);
                AttnIds {
                    ln_g,
                    ln_b,
                    wq: store.add(format!("{base}.wq"), dense(rng, l, l)),
                    wk: store.add(format!("{base}.wk"), dense(rng, l, l)),
                    wv: store.add(format!("{base}.wv"), dense(rng, l, l)),
                    wo: store.add(format!("{base}.wo"), dense(rng, l, l)),
                    bo: store.add(format!("{base}.bo"), Tensor::zeros(&[l])),
                }
            };
            let row = attn(store, "row");
            let col = attn(store, "col");
            let base = format!("{prefix}.block{b}.ffn");
            let (ln_g, ln_b) = norm_pair(store, &format!("{base}.ln"), l);
            let ffn = FfnIds {
                ln_g,
                ln_b,
                w1: store.add(format!("{base}.w1"), dense(rng, l, cfg.ffn_dim())),
                b1: store.add(format!("{base}.b1"), Tensor::zeros(&[cfg.ffn_dim()])),
                w2: store.add(format!("{base}.w2"), dense(rng, cfg.ffn_dim(), l)),
                b2: store.add(format!("{base}.b2"), Tensor::zeros(&[l])),
            };
            blocks.push(BlockIds { row, col, ffn });
        }
        let (final_g, final_b) = norm_pair(store, &format!("{prefix}.final_ln"), l);
        Self {
            encoder,
            blocks,
            final_g,
            final_b,
        }
    }

    /// Re-binds ids by name, e.g. after loading a checkpoint.
    pub fn find(store: &ParamStore, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let encoder = EncoderIds {
            table: lookup(store, &format!("{prefix}.encoder.table"))?,
            proj: lookup(store, &format!("{prefix}.encoder.proj"))?,
        };
        let attn = |kind: &str, b: usize| -> Result<AttnIds> {
            let base = format!("{prefix}.block{b}.{kind}");
            Ok(AttnIds {
                ln_g: lookup(store, &format!("{base}.ln.g"))?,
                ln_b: lookup(store, &format!("{base}.ln.b"))?,
                wq: lookup(store, &format!("{base}.wq"))?,
                wk: lookup(store, &format!("{base}.wk"))?,
                wv: lookup(store, &format!("{base}.wv"))?,
                wo: lookup(store, &format!("{base}.wo"))?,
                bo: lookup(store, &format!("{base}.bo"))?,
            })
        };
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            let base = format!("{prefix}.block{b}.ffn");
            blocks.push(BlockIds {
                row: attn("row", b)?,
                col: attn("col", b)?,
                ffn: FfnIds {
                    ln_g: lookup(store, &format!("{base}.ln.g"))?,
                    ln_b: lookup(store, &format!("{base}.ln.b"))?,
                    w1: lookup(store, &format!("{base}.w1"))?,
                    b1: lookup(store, &format!("{base}.b1"))?,
                    w2: lookup(store, &format!("{base}.w2"))?,
                    b2: lookup(store, &format!("{base}.b2"))?,
                },
            });
        }
        Ok(Self {
            encoder,
            blocks,
            final_g: lookup(store, &format!("{prefix}.final_ln.g"))?,
            final_b: lookup(store, &format!("{prefix}.final_ln.b"))?,
        })
    }
}

/// Operations the model needs, over either tape variables or plain tensors.
pub trait Backend {
    type Value: Clone;

    fn config(&self) -> &ModelConfig;
    fn shape<'a>(&'a self, x: &'a Self::Value) -> &'a [usize];
    fn input(&mut self, t: Tensor) -> Self::Value;
    fn embed(&mut self, codes: &CellCodes, enc: EncoderIds) -> Result<Self::Value>;
    fn linear(&mut self, x: &Self::Value, w: ParamId, b: Option<ParamId>) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn layer_norm(&mut self, x: &Self::Value, g: ParamId, b: ParamId) -> Result<Self::Value>;
    fn gelu(&mut self, x: &Self::Value) -> Self::Value;
    /// Row attention of layer `layer` (counted across the whole stack).
    fn row_attention(
        &mut self,
        q: &Self::Value,
        k: &Self::Value,
        v: &Self::Value,
        mask: &RowMask,
        layer: usize,
    ) -> Result<Self::Value>;
    fn col_attention(&mut self, q: &Self::Value, k: &Self::Value, v: &Self::Value) -> Result<Self::Value>;
    fn concat_rows(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn slice_rows(&mut self, x: &Self::Value, start: usize, end: usize) -> Result<Self::Value>;
    fn gather_rows(&mut self, x: &Self::Value, idx: Vec<usize>) -> Result<Self::Value>;
    fn reshape(&mut self, x: &Self::Value, shape: &[usize]) -> Result<Self::Value>;
    fn slice_last(&mut self, x: &Self::Value, width: usize) -> Result<Self::Value>;
}

fn cube_layout(shape: &[usize], heads: usize, axis: Axis) -> Result<AttentionLayout> {
    if shape.len() != 3 {
        return Err(Error::Data(format!("expected a rows x cols x dim cube, got {shape:?}")));
    }
    Ok(AttentionLayout {
        rows: shape[0],
        cols: shape[1],
        heads,
        dim: shape[2],
        axis,
    })
}

/// Training backend: parameters become graph leaves on first use.
pub struct TapeBackend<'g> {
    pub graph: &'g mut Graph,
    store: &'g ParamStore,
    cfg: ModelConfig,
    vars: Vec<Option<Var>>,
    frozen: Vec<bool>,
}

impl<'g> TapeBackend<'g> {
    pub fn new(graph: &'g mut Graph, store: &'g ParamStore, cfg: &ModelConfig) -> Self {
        Self {
            graph,
            store,
            cfg: cfg.clone(),
            vars: vec![None; store.len()],
            frozen: vec![false; store.len()],
        }
    }

    /// Parameters whose name starts with `prefix` enter as constants.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for id in self.store.ids() {
            if self.store.name(id).starts_with(prefix) {
                self.frozen[id.0] = true;
            }
        }
    }

    /// Uses an existing graph variable for parameter `id`.
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = Some(var);
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = self.graph.leaf(self.store.get(id).clone(), !self.frozen[id.0]);
        self.vars[id.0] = Some(v);
        v
    }

    /// Graph variables of every parameter touched so far.
    pub fn bound(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.vars.iter().enumerate().filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }
}

impl Backend for TapeBackend<'_> {
    type Value = Var;

    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn shape<'a>(&'a self, x: &'a Var) -> &'a [usize] {
        self.graph.value(*x).shape()
    }

    fn input(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    fn embed(&mut self, codes: &CellCodes, enc: EncoderIds) -> Result<Var> {
        let table = self.param(enc.table);
        let proj = self.param(enc.proj);
        let n = codes.rows * codes.cols;
        let base = self.graph.gather_rows(table, codes.slots.clone())?;
        let spread = self.graph.gather_rows(proj, vec![0; n])?;
        let scaled = self.graph.scale_rows(spread, codes.scalars.clone())?;
        let sum = self.graph.add(base, scaled)?;
        Ok(self.graph.reshape(sum, &[codes.rows, codes.cols, self.cfg.embed_dim])?)
    }

    fn linear(&mut self, x: &Var, w: ParamId, b: Option<ParamId>) -> Result<Var> {
        let w = self.param(w);
        let y = self.graph.matmul(*x, w)?;
        match b {
            Some(b) => {
                let b = self.param(b);
                Ok(self.graph.add_bias(y, b)?)
            }
            None => Ok(y),
        }
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Ok(self.graph.add(*a, *b)?)
    }

    fn layer_norm(&mut self, x: &Var, g: ParamId, b: ParamId) -> Result<Var> {
        let g = self.param(g);
        let b = self.param(b);
        Ok(self.graph.layer_norm(*x, g, b)?)
    }

    fn gelu(&mut self, x: &Var) -> Var {
        self.graph.gelu(*x)
    }

    fn row_attention(&mut self, q: &Var, k: &Var, v: &Var, mask: &RowMask, _layer: usize) -> Result<Var> {
        let layout = cube_layout(self.graph.value(*q).shape(), self.cfg.heads, Axis::Rows)?;
        Ok(self.graph.attention(*q, *k, *v, layout, mask.clone())?)
    }

    fn col_attention(&mut self, q: &Var, k: &Var, v: &Var) -> Result<Var> {
        let layout = cube_layout(self.graph.value(*q).shape(), self.cfg.heads, Axis::Cols)?;
        Ok(self.graph.attention(*q, *k, *v, layout, RowMask::Full)?)
    }

    fn concat_rows(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Ok(self.graph.concat_rows(*a, *b)?)
    }

    fn slice_rows(&mut self, x: &Var, start: usize, end: usize) -> Result<Var> {
        Ok(self.graph.slice_rows(*x, start, end)?)
    }

    fn gather_rows(&mut self, x: &Var, idx: Vec<usize>) -> Result<Var> {
        Ok(self.graph.gather_rows(*x, idx)?)
    }

    fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        Ok(self.graph.reshape(*x, shape)?)
    }

    fn slice_last(&mut self, x: &Var, width: usize) -> Result<Var> {
        Ok(self.graph.slice_last(*x, width)?)
    }
}

/// Keys and values of every row-attention layer over a fixed set of
/// context rows, each `context_rows x cols x dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    pub context_rows: usize,
    pub cols: usize,
    pub layers: Vec<(Tensor, Tensor)>,
}

impl KvCache {
    pub fn tokens(&self) -> usize {
        self.context_rows * self.cols
    }

    pub fn size_bytes(&self) -> usize {
        self.layers.iter().map(|(k, v)| k.size_bytes() + v.size_bytes()).sum()
    }
}

/// How the eager backend treats row attention.
#[derive(Debug, Default)]
pub enum KvMode<'c> {
    #[default]
    Off,
    /// Keep each layer's keys and values (run over context rows only).
    Record(Vec<(Tensor, Tensor)>),
    /// Query rows attend to the cached context plus themselves; the mask
    /// argument is ignored.
    Use(&'c KvCache),
}

/// Inference backend evaluating straight on tensors.
pub struct EagerBackend<'p> {
    store: &'p ParamStore,
    cfg: ModelConfig,
    pub kv: KvMode<'p>,
}

impl<'p> EagerBackend<'p> {
    pub fn new(store: &'p ParamStore, cfg: &ModelConfig) -> Self {
        Self {
            store,
            cfg: cfg.clone(),
            kv: KvMode::Off,
        }
    }

    pub fn with_kv(mut self, kv: KvMode<'p>) -> Self {
        self.kv = kv;
        self
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(taco_tensor::TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }
        .into());
    }
    Ok(())
}

impl Backend for EagerBackend<'_> {
    type Value = Tensor;

    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn shape<'a>(&'a self, x: &'a Tensor) -> &'a [usize] {
        x.shape()
    }

    fn input(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn embed(&mut self, codes: &CellCodes, enc: EncoderIds) -> Result<Tensor> {
        let l = self.cfg.embed_dim;
        let table = self.store.get(enc.table).data();
        let proj = self.store.get(enc.proj).data();
        let slots = self.store.get(enc.table).shape()[0];
        let mut data = Vec::with_capacity(codes.slots.len() * l);
        for (&slot, &s) in codes.slots.iter().zip(&codes.scalars) {
            if slot >= slots {
                return Err(Error::Data(format!("encoder slot {slot} out of range")));
            }
            let row = &table[slot * l..(slot + 1) * l];
            data.extend(row.iter().zip(proj).map(|(t, p)| t + s * p));
        }
        Ok(Tensor::new(vec![codes.rows, codes.cols, l], data)?)
    }

    fn linear(&mut self, x: &Tensor, w: ParamId, b: Option<ParamId>) -> Result<Tensor> {
        let w = self.store.get(w);
        let (din, dout) = (w.shape()[0], w.shape()[1]);
        if x.last_dim() != din {
            return Err(taco_tensor::TensorError::ShapeMismatch {
                op: "linear",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            }
            .into());
        }
        let bias = b.map(|b| self.store.get(b).data());
        let data = kernels::linear(x.data(), w.data(), bias, x.leading(), din, dout);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        Ok(Tensor::new(shape, data)?)
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("add", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        Ok(Tensor::new(a.shape().to_vec(), data)?)
    }

    fn layer_norm(&mut self, x: &Tensor, g: ParamId, b: ParamId) -> Result<Tensor> {
        let (data, _) = kernels::layer_norm(x.data(), self.store.get(g).data(), self.store.get(b).data(), x.last_dim());
        Ok(Tensor::new(x.shape().to_vec(), data)?)
    }

    fn gelu(&mut self, x: &Tensor) -> Tensor {
        x.map(kernels::gelu)
    }

    fn row_attention(&mut self, q: &Tensor, k: &Tensor, v: &Tensor, mask: &RowMask, layer: usize) -> Result<Tensor> {
        same_shape("attention", q, k)?;
        same_shape("attention", q, v)?;
        let layout = cube_layout(q.shape(), self.cfg.heads, Axis::Rows)?;
        match &mut self.kv {
            KvMode::Use(cache) => {
                let (kc, vc) = cache
                    .layers
                    .get(layer)
                    .ok_or_else(|| Error::Data(format!("cache has no layer {layer}")))?;
                if kc.shape()[1] != layout.cols || kc.shape()[2] != layout.dim {
                    return Err(Error::Schema(format!(
                        "cache built for {:?}, queries are {:?}",
                        kc.shape(),
                        q.shape()
                    )));
                }
                let out = kernels::cached_row_attention(
                    q.data(),
                    k.data(),
                    v.data(),
                    kc.data(),
                    vc.data(),
                    layout.rows,
                    cache.context_rows,
                    layout.cols,
                    layout.heads,
                    layout.dim,
                );
                Ok(Tensor::new(q.shape().to_vec(), out)?)
            }
            KvMode::Record(layers) => {
                if layers.len() != layer {
                    return Err(Error::Data(format!("cache recording out of order at layer {layer}")));
                }
                layers.push((k.clone(), v.clone()));
                let (out, _) = kernels::attention(q.data(), k.data(), v.data(), &layout, mask, false)?;
                Ok(Tensor::new(q.shape().to_vec(), out)?)
            }
            KvMode::Off => {
                let (out, _) = kernels::attention(q.data(), k.data(), v.data(), &layout, mask, false)?;
                Ok(Tensor::new(q.shape().to_vec(), out)?)
            }
        }
    }

    fn col_attention(&mut self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        same_shape("attention", q, k)?;
        same_shape("attention", q, v)?;
        let layout = cube_layout(q.shape(), self.cfg.heads, Axis::Cols)?;
        let (out, _) = kernels::attention(q.data(), k.data(), v.data(), &layout, &RowMask::Full, false)?;
        Ok(Tensor::new(q.shape().to_vec(), out)?)
    }

    fn concat_rows(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape()[1..] != b.shape()[1..] {
            return Err(taco_tensor::TensorError::ShapeMismatch {
                op: "concat_rows",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            }
            .into());
        }
        let mut shape = a.shape().to_vec();
        shape[0] += b.shape()[0];
        let mut data = Vec::with_capacity(a.len() + b.len());
        data.extend_from_slice(a.data());
        data.extend_from_slice(b.data());
        Ok(Tensor::new(shape, data)?)
    }

    fn slice_rows(&mut self, x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        if start >= end || end > x.shape()[0] {
            return Err(Error::Data(format!("row range {start}..{end} invalid for {:?}", x.shape())));
        }
        let stride = x.len() / x.shape()[0];
        let mut shape = x.shape().to_vec();
        shape[0] = end - start;
        Ok(Tensor::new(shape, x.data()[start * stride..end * stride].to_vec())?)
    }

    fn gather_rows(&mut self, x: &Tensor, idx: Vec<usize>) -> Result<Tensor> {
        let (n, d) = (x.leading(), x.last_dim());
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            if i >= n {
                return Err(Error::Data(format!("row {i} out of range for {n} rows")));
            }
            data.extend_from_slice(&x.data()[i * d..(i + 1) * d]);
        }
        Ok(Tensor::new(vec![idx.len(), d], data)?)
    }

    fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        Ok(x.clone().reshape(shape)?)
    }

    fn slice_last(&mut self, x: &Tensor, width: usize) -> Result<Tensor> {
        let d = x.last_dim();
        let mut data = Vec::with_capacity(x.leading() * width);
        for row in x.data().chunks(d) {
            data.extend_from_slice(&row[..width]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = width;
        Ok(Tensor::new(shape, data)?)
    }
}

/// Pre-norm residual attention sub-layer.
fn attention_sublayer<B: Backend>(
    be: &mut B,
    x: &B::Value,
    ids: &AttnIds,
    row: Option<(&RowMask, usize)>,
) -> Result<B::Value> {
    let h = be.layer_norm(x, ids.ln_g, ids.ln_b)?;
    let q = be.linear(&h, ids.wq, None)?;
    let k = be.linear(&h, ids.wk, None)?;
    let v = be.linear(&h, ids.wv, None)?;
    let a = match row {
        Some((mask, layer)) => be.row_attention(&q, &k, &v, mask, layer)?,
        None => be.col_attention(&q, &k, &v)?,
    };
    let o = be.linear(&a, ids.wo, Some(ids.bo))?;
    be.add(x, &o)
}

pub fn row_attention<B: Backend>(be: &mut B, x: &B::Value, ids: &AttnIds, mask: &RowMask, layer: usize) -> Result<B::Value> {
    attention_sublayer(be, x, ids, Some((mask, layer)))
}

pub fn col_attention<B: Backend>(be: &mut B, x: &B::Value, ids: &AttnIds) -> Result<B::Value> {
    attention_sublayer(be, x, ids, None)
}

pub fn feed_forward<B: Backend>(be: &mut B, x: &B::Value, ids: &FfnIds) -> Result<B::Value> {
    let h = be.layer_norm(x, ids.ln_g, ids.ln_b)?;
    let h = be.linear(&h, ids.w1, Some(ids.b1))?;
    let h = be.gelu(&h);
    let h = be.linear(&h, ids.w2, Some(ids.b2))?;
    be.add(x, &h)
}

pub fn transformer_block<B: Backend>(be: &mut B, x: &B::Value, ids: &BlockIds, mask: &RowMask, layer: usize) -> Result<B::Value> {
    let x = row_attention(be, x, &ids.row, mask, layer)?;
    let x = col_attention(be, &x, &ids.col)?;
    feed_forward(be, &x, &ids.ffn)
}

/// Runs every block of `stack` (without the closing norm).
pub fn run_blocks<B: Backend>(be: &mut B, x: &B::Value, stack: &Stack, mask: &RowMask) -> Result<B::Value> {
    let mut x = x.clone();
    for (layer, block) in stack.blocks.iter().enumerate() {
        x = transformer_block(be, &x, block, mask, layer)?;
    }
    Ok(x)
}

pub fn embed_cells<B: Backend>(be: &mut B, table: &Table, target: TargetCode<'_>, enc: EncoderIds) -> Result<B::Value> {
    let codes = CellCodes::from_table(table, target, be.config())?;
    be.embed(&codes, enc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore, Stack, ModelConfig) {
        let cfg = ModelConfig::tiny();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stack = Stack::init(&mut store, "m", &cfg, &mut rng);
        (store, stack, cfg)
    }

    fn table(rows: &[Vec<f64>]) -> Table {
        Table::from_numeric(rows, None).unwrap()
    }

    #[test]
    fn embedding_shape_is_rows_by_cols_plus_one() {
        let (store, stack, cfg) = setup();
        let mut be = EagerBackend::new(&store, &cfg);
        let t = table(&vec![vec![0.1, 0.2, 0.3]; 4]);
        let z = embed_cells(&mut be, &t, TargetCode::Missing, stack.encoder).unwrap();
        assert_eq!(z.shape(), &[4, 4, cfg.embed_dim]);
    }

    #[test]
    fn missing_target_changes_only_the_target_slice() {
        let (store, stack, cfg) = setup();
        let mut be = EagerBackend::new(&store, &cfg);
        let t = table(&[vec![0.5, -1.0]]);
        let a = embed_cells(&mut be, &t, TargetCode::Missing, stack.encoder).unwrap();
        let b = embed_cells(&mut be, &t, TargetCode::Labels(&[1]), stack.encoder).unwrap();
        let l = cfg.embed_dim;
        assert_eq!(a.data()[..2 * l], b.data()[..2 * l]);
        assert_ne!(a.data()[2 * l..], b.data()[2 * l..]);
    }

    #[test]
    fn non_finite_feature_is_rejected() {
        let (_, _, cfg) = setup();
        let t = table(&[vec![f64::INFINITY]]);
        assert!(CellCodes::from_table(&t, TargetCode::Missing, &cfg).is_err());
    }

    #[test]
    fn tape_and_eager_agree() {
        let (store, stack, cfg) = setup();
        let t = table(&[vec![0.5, -1.0], vec![1.5, 2.0], vec![0.0, 0.1]]);
        let mut be = EagerBackend::new(&store, &cfg);
        let x = embed_cells(&mut be, &t, TargetCode::Labels(&[0, 1, 0]), stack.encoder).unwrap();
        let eager = run_blocks(&mut be, &x, &stack, &RowMask::Prefix { context: 2 }).unwrap();
        let mut g = Graph::new();
        let mut tb = TapeBackend::new(&mut g, &store, &cfg);
        let x = embed_cells(&mut tb, &t, TargetCode::Labels(&[0, 1, 0]), stack.encoder).unwrap();
        let y = run_blocks(&mut tb, &x, &stack, &RowMask::Prefix { context: 2 }).unwrap();
        // The tape keeps per-query attention for its saved probabilities while
        // inference uses blocked products, so only rounding may differ.
        let diff = g.value(y).data().iter().zip(eager.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn empty_stack_is_identity() {
        let cfg = ModelConfig { blocks: 0, ..ModelConfig::tiny() };
        let mut store = ParamStore::new();
        let stack = Stack::init(&mut store, "m", &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let mut be = EagerBackend::new(&store, &cfg);
        let x = Tensor::from_slice(&[2, 2, cfg.embed_dim], &vec![0.25; 4 * cfg.embed_dim]);
        assert_eq!(run_blocks(&mut be, &x, &stack, &RowMask::Full).unwrap(), x);
    }
}
