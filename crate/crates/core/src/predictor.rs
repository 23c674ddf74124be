//! Predictor: in-context classification of query rows against a latent
//! context.
//!
//! Context rows attend to each other; each query row attends to the context
//! and to itself only, so query rows never influence one another.

use taco_tensor::{RowMask, Tensor};

use crate::error::{Error, Result};
use crate::model::TacoModel;
use crate::tab2d::{run_blocks, Backend, CellCodes, EagerBackend, KvCache, KvMode, TargetCode};
use crate::table::Table;

fn check_classes(model: &TacoModel, n_classes: usize) -> Result<()> {
    if n_classes < 2 || n_classes > model.cfg.num_classes_max {
        return Err(Error::Config(format!(
            "{n_classes} classes outside 2..={}",
            model.cfg.num_classes_max
        )));
    }
    Ok(())
}

/// Final norm, target-cell readout and class head for rows `first..` of `x`.
fn readout<B: Backend>(be: &mut B, model: &TacoModel, x: &B::Value, first: usize, n_classes: usize) -> Result<B::Value> {
    let (rows, cols, l) = {
        let s = be.shape(x);
        (s[0], s[1], s[2])
    };
    let flat = be.reshape(x, &[rows * cols, l])?;
    let idx: Vec<usize> = (first..rows).map(|r| r * cols + cols - 1).collect();
    let targets = be.gather_rows(&flat, idx)?;
    let h = be.layer_norm(&targets, model.predictor.final_g, model.predictor.final_b)?;
    let logits = be.linear(&h, model.head.w, Some(model.head.b))?;
    be.slice_last(&logits, n_classes)
}

/// Embeds query rows with the missing-target sentinel.
pub fn embed_queries<B: Backend>(be: &mut B, model: &TacoModel, test: &Table) -> Result<B::Value> {
    let codes = CellCodes::from_table(test, TargetCode::Missing, &model.cfg)?;
    be.embed(&codes, model.predictor.encoder)
}

/// Embeds labeled context rows with the predictor's encoder.
pub fn embed_context<B: Backend>(be: &mut B, model: &TacoModel, train: &Table, labels: &[usize]) -> Result<B::Value> {
    let codes = CellCodes::from_table(train, TargetCode::Labels(labels), &model.cfg)?;
    be.embed(&codes, model.predictor.encoder)
}

/// `T x C` logits for embedded queries against an embedded context.
pub fn predict_logits<B: Backend>(
    be: &mut B,
    model: &TacoModel,
    context: &B::Value,
    queries: &B::Value,
    n_classes: usize,
) -> Result<B::Value> {
    check_classes(model, n_classes)?;
    let ctx_rows = be.shape(context)[0];
    if be.shape(context)[1..] != be.shape(queries)[1..] {
        return Err(Error::Schema(format!(
            "context cells {:?} do not match query cells {:?}",
            be.shape(context),
            be.shape(queries)
        )));
    }
    let x = be.concat_rows(context, queries)?;
    let x = run_blocks(be, &x, &model.predictor, &RowMask::Prefix { context: ctx_rows })?;
    readout(be, model, &x, ctx_rows, n_classes)
}

/// Predictor-only path over an uncompressed, labeled training table.
pub fn predict_from_table<B: Backend>(
    be: &mut B,
    model: &TacoModel,
    train: &Table,
    labels: &[usize],
    test: &Table,
    n_classes: usize,
) -> Result<B::Value> {
    let ctx = embed_context(be, model, train, labels)?;
    let q = embed_queries(be, model, test)?;
    predict_logits(be, model, &ctx, &q, n_classes)
}

/// Runs the context through the predictor blocks alone and keeps every
/// row-attention layer's keys and values.
pub fn build_kv_cache(model: &TacoModel, context: &Tensor) -> Result<KvCache> {
    let mut be = EagerBackend::new(&model.store, &model.cfg).with_kv(KvMode::Record(Vec::new()));
    run_blocks(&mut be, context, &model.predictor, &RowMask::Full)?;
    let layers = match std::mem::take(&mut be.kv) {
        KvMode::Record(layers) => layers,
        _ => unreachable!("backend was created in record mode"),
    };
    Ok(KvCache {
        context_rows: context.shape()[0],
        cols: context.shape()[1],
        layers,
    })
}

/// Logits for embedded queries using a cache instead of the context rows.
pub fn predict_cached(model: &TacoModel, cache: &KvCache, queries: &Tensor, n_classes: usize) -> Result<Tensor> {
    check_classes(model, n_classes)?;
    if queries.shape()[1] != cache.cols {
        return Err(Error::Schema(format!(
            "cache covers {} columns, queries have {}",
            cache.cols,
            queries.shape()[1]
        )));
    }
    let mut be = EagerBackend::new(&model.store, &model.cfg).with_kv(KvMode::Use(cache));
    let x = run_blocks(&mut be, queries, &model.predictor, &RowMask::Full)?;
    readout(&mut be, model, &x, 0, n_classes)
}

/// Row-wise softmax of a `T x C` logit tensor.
pub fn probabilities(logits: &Tensor) -> Tensor {
    let data = taco_tensor::kernels::softmax_rows(logits.data(), logits.last_dim());
    Tensor::new(logits.shape().to_vec(), data).expect("softmax keeps shape")
}
