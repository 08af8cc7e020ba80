//! The multi-target cosine reconstruction loss.

use super::MaskPlan;
use crate::error::{Error, Result};
use crate::model::{decode_graph, encode_graph, head_graph, TiconParams};
use crate::synth::EmbeddingGrid;
use crate::tensor::{Binding, Tape, Tensor, Var};
use std::collections::BTreeMap;

/// `mean over rows of (1 - cos(y, target))` as a tape scalar.
pub(crate) fn cosine_loss_graph(tape: &mut Tape, y: Var, target: Var) -> Result<Var> {
    let cos = tape.cosine_sim(y, target)?;
    let rows: Vec<usize> = (0..tape.value(cos).rows()).collect();
    let mean = tape.mean_rows(cos, &rows)?;
    tape.affine(mean, -1.0, 1.0)
}

/// Mean over rows of one minus cosine similarity; range [0, 2].
pub fn cosine_loss(y: &Tensor, target: &Tensor) -> Result<f64> {
    if y.shape != target.shape {
        return Err(Error::Shape(format!(
            "cosine_loss {:?} vs {:?}",
            y.shape, target.shape
        )));
    }
    let mut tape = Tape::new();
    let yv = tape.constant(y.clone());
    let tv = tape.constant(target.clone());
    let loss = cosine_loss_graph(&mut tape, yv, tv)?;
    tape.value(loss).item()
}

/// One candidate's grids plus the mask plan, unpacked for the model graph.
pub(crate) struct OfmmItem {
    pub visible: Tensor,
    pub visible_pos: Vec<(i32, i32)>,
    pub pred_pos: Vec<(i32, i32)>,
    /// Ground-truth embeddings at the prediction locations, per target.
    pub targets: BTreeMap<String, Tensor>,
}

fn rows_at(grid: &EmbeddingGrid, positions: &[(usize, usize)]) -> Tensor {
    let mut data = Vec::with_capacity(positions.len() * grid.dim);
    for &(r, c) in positions {
        data.extend(grid.embedding(r, c).iter().map(|&v| f64::from(v)));
    }
    Tensor { shape: vec![positions.len(), grid.dim], data, requires_grad: false, grad: None }
}

/// Validate alignment and extract the tensors one OFMM evaluation needs.
pub(crate) fn prepare_item(
    grids: &BTreeMap<String, EmbeddingGrid>,
    input_encoder_id: &str,
    plan: &MaskPlan,
    target_ids: &[String],
) -> Result<OfmmItem> {
    let input = grids
        .get(input_encoder_id)
        .ok_or_else(|| Error::Alignment(format!("no grid for input encoder {input_encoder_id}")))?;
    for id in target_ids {
        let g = grids
            .get(id)
            .ok_or_else(|| Error::Alignment(format!("no grid for target encoder {id}")))?;
        if g.rows != input.rows || g.cols != input.cols || g.origin != input.origin {
            return Err(Error::Alignment(format!(
                "grid {id} is {}x{} at {:?}, input is {}x{} at {:?}",
                g.rows, g.cols, g.origin, input.rows, input.cols, input.origin
            )));
        }
        if g.validity != input.validity {
            return Err(Error::Alignment(format!("grid {id} validity differs from input")));
        }
    }
    for &(r, c) in plan.visible.iter().chain(&plan.predicted) {
        if r >= input.rows || c >= input.cols || !input.valid(r, c) {
            return Err(Error::Alignment(format!("plan position ({r},{c}) invalid for grid")));
        }
    }

    let to_global =
        |&(r, c): &(usize, usize)| (input.origin.0 + r as i32, input.origin.1 + c as i32);
    let visible_pos: Vec<(i32, i32)> = plan.visible.iter().map(to_global).collect();
    let pred_pos: Vec<(i32, i32)> = plan.predicted.iter().map(to_global).collect();
    let visible = rows_at(input, &plan.visible);
    let targets = target_ids
        .iter()
        .map(|id| (id.clone(), rows_at(&grids[id], &plan.predicted)))
        .collect();
    Ok(OfmmItem { visible, visible_pos, pred_pos, targets })
}

/// Full masked-modeling graph for one item: encode the visible tiles, decode
/// at the prediction locations, project per target, sum the per-target cosine
/// losses. `visible_var` carries the input embeddings so callers can
/// gradient-check through the whole pipeline.
pub(crate) fn ofmm_graph(
    tape: &mut Tape,
    bind: &Binding,
    params: &TiconParams,
    input_encoder_id: &str,
    visible_var: Var,
    item: &OfmmItem,
) -> Result<(Var, BTreeMap<String, Var>)> {
    let ctx = encode_graph(tape, bind, params, input_encoder_id, visible_var, &item.visible_pos)?;
    let z = decode_graph(tape, bind, params, ctx, &item.visible_pos, &item.pred_pos)?;
    let mut per_target = BTreeMap::new();
    let mut total: Option<Var> = None;
    for (id, truth) in &item.targets {
        let dim = params.config.target_dim(id)?;
        if truth.cols() != dim {
            return Err(Error::Shape(format!(
                "target {id} dim {} vs head dim {dim}",
                truth.cols()
            )));
        }
        let y = head_graph(tape, bind, params, id, z)?;
        let tv = tape.constant(truth.clone());
        let loss = cosine_loss_graph(tape, y, tv)?;
        per_target.insert(id.clone(), loss);
        total = Some(match total {
            None => loss,
            Some(acc) => tape.add(acc, loss)?,
        });
    }
    Ok((total.expect("target_ids nonempty"), per_target))
}

/// Masked-modeling loss for one candidate: total plus per-target components.
pub fn ofmm_loss(
    params: &TiconParams,
    input_encoder_id: &str,
    grids: &BTreeMap<String, EmbeddingGrid>,
    plan: &MaskPlan,
    target_ids: &[String],
) -> Result<(f64, BTreeMap<String, f64>)> {
    if target_ids.is_empty() {
        return Err(Error::EmptyInput("ofmm_loss with no targets"));
    }
    let item = prepare_item(grids, input_encoder_id, plan, target_ids)?;
    let mut tape = Tape::new();
    let bind = params.store().bind(&mut tape, false);
    let x = tape.constant(item.visible.clone());
    let (total, per_target) = ofmm_graph(&mut tape, &bind, params, input_encoder_id, x, &item)?;
    let totals = tape.value(total).item()?;
    let per = per_target
        .into_iter()
        .map(|(id, v)| Ok((id, tape.value(v).item()?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok((totals, per))
}
