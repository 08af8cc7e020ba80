//! Frozen-core adaptation: extend a pretrained model to an unseen encoder by
//! training only its new input projector and output head on single-target
//! self-reconstruction. Every pre-existing tensor stays byte-identical.

use super::loss::prepare_item;
use super::{
    batch_loss_and_grads, make_mask_plan, make_pool, sample_batch, CandidateGrids, Corpus,
};
use crate::error::{Error, Result};
use crate::model::TiconParams;
use crate::seed::stream_seed;
use crate::tensor::{adamw_step, lr_at, OptState, Schedule};
use std::collections::BTreeSet;

#[derive(Debug, Clone)]
pub struct AdaptConfig {
    pub adapt_iters: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub mask_ratio: f64,
    pub prediction_ratio: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub seed: u64,
    pub threads: usize,
}

impl AdaptConfig {
    /// Same masking and optimizer settings as pretraining, desk-scaled budget.
    pub fn desk(seed: u64) -> Self {
        AdaptConfig {
            adapt_iters: 600,
            batch_size: 32,
            base_lr: 1e-3,
            mask_ratio: 0.75,
            prediction_ratio: 0.25,
            betas: (0.9, 0.95),
            weight_decay: 0.05,
            seed,
            threads: 1,
        }
    }
}

pub struct AdaptOutcome {
    pub params: TiconParams,
    /// Self-reconstruction loss on held-out grids before any training of the
    /// new projectors (the untrained-projector baseline) and after.
    pub baseline_heldout: f64,
    pub final_heldout: f64,
}

fn heldout_self_loss(
    params: &TiconParams,
    heldout: &[CandidateGrids],
    encoder_id: &str,
    cfg: &AdaptConfig,
) -> Result<f64> {
    let targets = vec![encoder_id.to_string()];
    let mut total = 0.0;
    for cand in heldout {
        let grid = cand
            .grids
            .get(encoder_id)
            .ok_or_else(|| Error::Alignment(format!("candidate {} lacks {encoder_id}", cand.key)))?;
        let plan_seed = stream_seed(cfg.seed, &format!("adapt-heldout/{}", cand.key));
        let plan = make_mask_plan(
            &grid.validity,
            grid.cols,
            cfg.mask_ratio,
            cfg.prediction_ratio,
            plan_seed,
        )?;
        let (l, _) = super::ofmm_loss(params, encoder_id, &cand.grids, &plan, &targets)?;
        total += l;
    }
    Ok(total / heldout.len() as f64)
}

/// Adapt `base` to `unseen_encoder_id` (dimension `dim`). The corpus must
/// carry grids for the unseen encoder; `corpus.heldout` measures the
/// untrained baseline and the adapted loss.
pub fn adapt_unseen(
    base: &TiconParams,
    unseen_encoder_id: &str,
    dim: usize,
    corpus: &Corpus,
    cfg: &AdaptConfig,
) -> Result<AdaptOutcome> {
    if corpus.train.is_empty() {
        return Err(Error::Dataset("empty adaptation corpus".into()));
    }
    let mut params = base.clone();
    let new_ids = params.add_encoder(unseen_encoder_id, dim, cfg.seed)?;
    let trainable: BTreeSet<usize> = new_ids.iter().map(|id| id.index()).collect();

    let baseline_heldout = if corpus.heldout.is_empty() {
        f64::NAN
    } else {
        heldout_self_loss(&params, &corpus.heldout, unseen_encoder_id, cfg)?
    };

    let sched = Schedule::new(
        cfg.base_lr,
        (cfg.adapt_iters / 10).max(1),
        cfg.adapt_iters,
        0.1,
    )?;
    let pool = make_pool(cfg.threads)?;
    let targets = vec![unseen_encoder_id.to_string()];
    let mut opt = OptState::new();

    let mut loop_cfg = super::TrainConfig::desk(targets.clone(), targets.clone(), cfg.seed);
    loop_cfg.batch_size = cfg.batch_size;

    for iter in 0..cfg.adapt_iters {
        let batch = sample_batch(&corpus.train, &loop_cfg, iter);
        let items = batch
            .iter()
            .map(|cand| {
                let grid = cand.grids.get(unseen_encoder_id).ok_or_else(|| {
                    Error::Alignment(format!("candidate {} lacks {unseen_encoder_id}", cand.key))
                })?;
                let plan_seed =
                    stream_seed(cfg.seed, &format!("adapt-maskplan/{}/iter{iter}", cand.key));
                let plan = make_mask_plan(
                    &grid.validity,
                    grid.cols,
                    cfg.mask_ratio,
                    cfg.prediction_ratio,
                    plan_seed,
                )?;
                prepare_item(&cand.grids, unseen_encoder_id, &plan, &targets)
            })
            .collect::<Result<Vec<_>>>()?;

        let result = batch_loss_and_grads(
            &params,
            unseen_encoder_id,
            &items,
            &|i| trainable.contains(&i),
            pool.as_ref(),
        )?;
        let lr = lr_at(iter, &sched)?;
        adamw_step(
            params.store_mut().tensors_mut(),
            &result.grads,
            &mut opt,
            lr,
            cfg.betas,
            cfg.weight_decay,
        )?;
    }

    let final_heldout = if corpus.heldout.is_empty() {
        f64::NAN
    } else {
        heldout_self_loss(&params, &corpus.heldout, unseen_encoder_id, cfg)?
    };

    Ok(AdaptOutcome { params, baseline_heldout, final_heldout })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderEntry, ModelConfig};
    use crate::synth::{encode_tiles, generate_slide, sample_candidates, EncoderRegistry, SlideConfig};
    use std::collections::BTreeMap;

    fn corpus_with_unseen(n_slides: usize, heldout: usize) -> (Corpus, Vec<String>) {
        let reg = EncoderRegistry::standard(16, 9);
        let cfg = SlideConfig::default();
        let mut ids = reg.pretraining_ids();
        ids.push("mock56".to_string());
        let mut all = Vec::new();
        for s in 0..n_slides {
            let slide = generate_slide(7000 + s as u64, &cfg).unwrap();
            let full: BTreeMap<String, _> = ids
                .iter()
                .map(|id| (id.clone(), encode_tiles(&slide, reg.get(id).unwrap()).unwrap()))
                .collect();
            for cand in sample_candidates(&slide, s, 4, 0.55, 3, 77) {
                let grids = full
                    .iter()
                    .map(|(id, g)| {
                        (id.clone(), g.crop(cand.origin.0, cand.origin.1, cand.k).unwrap())
                    })
                    .collect();
                all.push(CandidateGrids {
                    key: format!("slide{s:03}/c{}-{}", cand.origin.0, cand.origin.1),
                    grids,
                });
            }
        }
        let heldout_set = all.split_off(all.len().saturating_sub(heldout));
        (Corpus { train: all, heldout: heldout_set }, reg.pretraining_ids())
    }

    #[test]
    fn frozen_core_is_byte_identical_and_self_loss_drops() {
        let (corpus, ids) = corpus_with_unseen(3, 3);
        let reg = EncoderRegistry::standard(16, 9);
        let entries: Vec<EncoderEntry> =
            ids.iter().map(|id| EncoderEntry::new(id, reg.dim(id).unwrap())).collect();
        let base = crate::model::TiconParams::init(&ModelConfig::desk(entries.clone(), entries), 5)
            .unwrap();

        let mut cfg = AdaptConfig::desk(13);
        cfg.adapt_iters = 40;
        cfg.batch_size = 4;
        let outcome = adapt_unseen(&base, "mock56", 56, &corpus, &cfg).unwrap();

        // every pre-existing tensor byte-identical
        for (name, before) in base.store().iter() {
            let id = outcome.params.store().find(name).unwrap();
            let after = outcome.params.store().get(id);
            let b1: Vec<u8> =
                before.data.iter().flat_map(|v| v.to_le_bytes()).collect();
            let b2: Vec<u8> = after.data.iter().flat_map(|v| v.to_le_bytes()).collect();
            assert_eq!(b1, b2, "tensor {name} changed");
        }
        // training actually moved the new projectors
        assert!(outcome.final_heldout < outcome.baseline_heldout);
        // adding the same encoder twice is a registry error
        assert!(matches!(
            adapt_unseen(&outcome.params, "mock56", 56, &corpus, &cfg),
            Err(Error::Registry(_))
        ));
    }

    #[test]
    fn existing_contextualize_outputs_unchanged_after_adaptation() {
        let (corpus, ids) = corpus_with_unseen(2, 1);
        let reg = EncoderRegistry::standard(16, 9);
        let entries: Vec<EncoderEntry> =
            ids.iter().map(|id| EncoderEntry::new(id, reg.dim(id).unwrap())).collect();
        let base = crate::model::TiconParams::init(&ModelConfig::desk(entries.clone(), entries), 5)
            .unwrap();
        let grid = corpus.train[0].grids[&ids[0]].clone();
        let before = crate::model::contextualize(&base, &ids[0], &grid).unwrap();

        let mut cfg = AdaptConfig::desk(13);
        cfg.adapt_iters = 10;
        cfg.batch_size = 2;
        let outcome = adapt_unseen(&base, "mock56", 56, &corpus, &cfg).unwrap();
        let after = crate::model::contextualize(&outcome.params, &ids[0], &grid).unwrap();
        assert_eq!(before.embeddings, after.embeddings);
    }
}
