//! Omni-feature masked-modeling pretraining: mask-plan construction, the
//! multi-target cosine loss, the training loop with per-step encoder
//! sampling, ablation modes, and frozen-core adaptation to unseen encoders.

mod adapt;
mod loss;
mod mask;

pub use adapt::{adapt_unseen, AdaptConfig, AdaptOutcome};
pub use loss::{cosine_loss, ofmm_loss};
pub use mask::{make_mask_plan, MaskPlan};

use crate::error::{Error, Result};
use crate::kvconfig::KvConfig;
use crate::model::{read_container, write_container, ModelConfig, TiconParams};
use crate::seed::{stream_rng, stream_seed};
use crate::synth::EmbeddingGrid;
use crate::tensor::{adamw_step, lr_at, OptState, Schedule, Tape};
use loss::{ofmm_graph, prepare_item, OfmmItem};
use rand::Rng;
use serde::Serialize;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Sample an input encoder per step, reconstruct all targets.
    OmniMultiTarget,
    /// Sample an input encoder per step, reconstruct only the input.
    OmniSingleTarget,
    /// One fixed encoder, self-reconstruction only.
    Individual,
}

impl TrainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::OmniMultiTarget => "omni-multi",
            TrainMode::OmniSingleTarget => "omni-single",
            TrainMode::Individual => "individual",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "omni-multi" => Ok(TrainMode::OmniMultiTarget),
            "omni-single" => Ok(TrainMode::OmniSingleTarget),
            "individual" => Ok(TrainMode::Individual),
            other => Err(Error::Config(format!("unknown train mode {other}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_iters: u64,
    pub sched: Schedule,
    pub mask_ratio: f64,
    pub prediction_ratio: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub mode: TrainMode,
    pub input_encoder_ids: Vec<String>,
    pub target_encoder_ids: Vec<String>,
    pub seed: u64,
    pub eval_interval: u64,
    pub checkpoint_interval: u64,
    pub threads: usize,
}

impl TrainConfig {
    /// Desk-scale defaults; encoders filled in by the caller.
    pub fn desk(input_ids: Vec<String>, target_ids: Vec<String>, seed: u64) -> Self {
        TrainConfig {
            batch_size: 32,
            total_iters: 2000,
            sched: Schedule { base_lr: 2e-4, warmup_iters: 200, total_iters: 2000, floor_fraction: 0.1 },
            mask_ratio: 0.75,
            prediction_ratio: 0.25,
            betas: (0.9, 0.95),
            weight_decay: 0.05,
            mode: TrainMode::OmniMultiTarget,
            input_encoder_ids: input_ids,
            target_encoder_ids: target_ids,
            seed,
            eval_interval: 100,
            checkpoint_interval: 500,
            threads: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) || self.mask_ratio <= 0.0 {
            return Err(Error::Config(format!("mask_ratio {} not in (0,1)", self.mask_ratio)));
        }
        if self.prediction_ratio <= 0.0 || self.prediction_ratio > self.mask_ratio {
            return Err(Error::Config(format!(
                "prediction_ratio {} not in (0, mask_ratio]",
                self.prediction_ratio
            )));
        }
        if self.input_encoder_ids.is_empty() || self.target_encoder_ids.is_empty() {
            return Err(Error::Config("encoder id lists must be non-empty".into()));
        }
        if self.mode == TrainMode::Individual
            && (self.input_encoder_ids.len() != 1
                || self.target_encoder_ids != self.input_encoder_ids)
        {
            return Err(Error::Config(
                "individual mode requires exactly one input encoder with targets equal to it"
                    .into(),
            ));
        }
        if self.sched.total_iters != self.total_iters {
            return Err(Error::Config(format!(
                "schedule covers {} iters, training runs {}",
                self.sched.total_iters, self.total_iters
            )));
        }
        Ok(())
    }

    const KEYS: [&'static str; 16] = [
        "batch_size",
        "total_iters",
        "base_lr",
        "warmup_iters",
        "floor_fraction",
        "mask_ratio",
        "prediction_ratio",
        "beta1",
        "beta2",
        "weight_decay",
        "mode",
        "input_encoders",
        "target_encoders",
        "seed",
        "eval_interval",
        "checkpoint_interval",
    ];

    pub fn write_config(&self, kv: &mut KvConfig) {
        kv.set("train", "batch_size", self.batch_size);
        kv.set("train", "total_iters", self.total_iters);
        kv.set("train", "base_lr", self.sched.base_lr);
        kv.set("train", "warmup_iters", self.sched.warmup_iters);
        kv.set("train", "floor_fraction", self.sched.floor_fraction);
        kv.set("train", "mask_ratio", self.mask_ratio);
        kv.set("train", "prediction_ratio", self.prediction_ratio);
        kv.set("train", "beta1", self.betas.0);
        kv.set("train", "beta2", self.betas.1);
        kv.set("train", "weight_decay", self.weight_decay);
        kv.set("train", "mode", self.mode.as_str());
        kv.set("train", "input_encoders", self.input_encoder_ids.join(","));
        kv.set("train", "target_encoders", self.target_encoder_ids.join(","));
        kv.set("train", "seed", self.seed);
        kv.set("train", "eval_interval", self.eval_interval);
        kv.set("train", "checkpoint_interval", self.checkpoint_interval);
    }

    pub fn read_config(kv: &KvConfig) -> Result<Self> {
        kv.check_known("train", &Self::KEYS)?;
        let total_iters: u64 = kv.parse_value("train", "total_iters")?;
        let cfg = TrainConfig {
            batch_size: kv.parse_value("train", "batch_size")?,
            total_iters,
            sched: Schedule::new(
                kv.parse_value("train", "base_lr")?,
                kv.parse_value("train", "warmup_iters")?,
                total_iters,
                kv.parse_value("train", "floor_fraction")?,
            )?,
            mask_ratio: kv.parse_value("train", "mask_ratio")?,
            prediction_ratio: kv.parse_value("train", "prediction_ratio")?,
            betas: (kv.parse_value("train", "beta1")?, kv.parse_value("train", "beta2")?),
            weight_decay: kv.parse_value("train", "weight_decay")?,
            mode: TrainMode::parse(kv.require("train", "mode")?)?,
            input_encoder_ids: split_ids(kv.require("train", "input_encoders")?),
            target_encoder_ids: split_ids(kv.require("train", "target_encoders")?),
            seed: kv.parse_value("train", "seed")?,
            eval_interval: kv.parse_value("train", "eval_interval")?,
            checkpoint_interval: kv.parse_value("train", "checkpoint_interval")?,
            threads: 1,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn split_ids(raw: &str) -> Vec<String> {
    raw.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

/// One pretraining candidate: aligned K x K grids for every registry encoder.
#[derive(Debug, Clone)]
pub struct CandidateGrids {
    /// Stable identity, e.g. "slide042/cand3"; seeds the per-item mask plans.
    pub key: String,
    pub grids: BTreeMap<String, EmbeddingGrid>,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub train: Vec<CandidateGrids>,
    pub heldout: Vec<CandidateGrids>,
}

/// Learnable state plus optimizer moments and the iteration counter.
pub struct TrainState {
    pub params: TiconParams,
    pub opt: OptState,
    pub iter: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepMetrics {
    pub iter: u64,
    pub lr: f64,
    pub input_encoder: String,
    pub loss_total: f64,
    pub loss_per_target: BTreeMap<String, f64>,
    pub wallclock_ms: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct HeldoutMetrics {
    pub iter: u64,
    pub total: f64,
    pub per_input: BTreeMap<String, f64>,
    /// "input>target" -> mean reconstruction loss over held-out candidates.
    pub cross: BTreeMap<String, f64>,
}

/// Loss and parameter gradients for one candidate under one mask plan.
/// `trainable` restricts which parameters receive gradients.
fn item_loss_and_grads(
    params: &TiconParams,
    input_id: &str,
    item: &OfmmItem,
    trainable: &dyn Fn(usize) -> bool,
) -> Result<(f64, BTreeMap<String, f64>, Vec<Option<Vec<f64>>>)> {
    let mut tape = Tape::new();
    let bind = params.store().bind_where(&mut tape, trainable);
    let x = tape.constant(item.visible.clone());
    let (total, per_target) = ofmm_graph(&mut tape, &bind, params, input_id, x, item)?;
    tape.backward(total)?;
    let total_val = tape.value(total).item()?;
    let per = per_target
        .into_iter()
        .map(|(id, v)| Ok((id, tape.value(v).item()?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok((total_val, per, bind.grads(&tape)))
}

struct BatchResult {
    loss_total: f64,
    per_target: BTreeMap<String, f64>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Average loss and gradients over a batch. Items are evaluated independently
/// (optionally in parallel) and reduced in batch order, so results are
/// bitwise identical at any thread count.
fn batch_loss_and_grads(
    params: &TiconParams,
    input_id: &str,
    items: &[OfmmItem],
    trainable: &(dyn Fn(usize) -> bool + Sync),
    pool: Option<&rayon::ThreadPool>,
) -> Result<BatchResult> {
    type ItemOut = (f64, BTreeMap<String, f64>, Vec<Option<Vec<f64>>>);
    let run = |item: &OfmmItem| -> Result<ItemOut> {
        item_loss_and_grads(params, input_id, item, &trainable)
    };
    let outs: Vec<Result<ItemOut>> = match pool {
        Some(pool) => pool.install(|| {
            use rayon::prelude::*;
            items.par_iter().map(run).collect()
        }),
        None => items.iter().map(run).collect(),
    };

    let scale = 1.0 / items.len() as f64;
    let mut loss_total = 0.0;
    let mut per_target: BTreeMap<String, f64> = BTreeMap::new();
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; params.store().len()];
    for out in outs {
        let (l, per, g) = out?;
        loss_total += l * scale;
        for (id, v) in per {
            *per_target.entry(id).or_insert(0.0) += v * scale;
        }
        for (slot, gi) in grads.iter_mut().zip(g) {
            if let Some(gi) = gi {
                match slot {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b * scale),
                    None => {
                        let mut gi = gi;
                        gi.iter_mut().for_each(|v| *v *= scale);
                        *slot = Some(gi);
                    }
                }
            }
        }
    }
    Ok(BatchResult { loss_total, per_target, grads })
}

/// Input encoder for a step: fixed in individual mode, sampled uniformly
/// per optimizer step otherwise.
fn step_input_encoder(cfg: &TrainConfig, iter: u64) -> String {
    match cfg.mode {
        TrainMode::Individual => cfg.input_encoder_ids[0].clone(),
        _ => {
            let mut rng = stream_rng(cfg.seed, &format!("encoder/iter{iter}"));
            let k = rng.random_range(0..cfg.input_encoder_ids.len());
            cfg.input_encoder_ids[k].clone()
        }
    }
}

fn step_targets(cfg: &TrainConfig, input_id: &str) -> Vec<String> {
    match cfg.mode {
        TrainMode::OmniMultiTarget => cfg.target_encoder_ids.clone(),
        _ => vec![input_id.to_string()],
    }
}

/// One optimizer step over a batch of candidates.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&CandidateGrids],
    cfg: &TrainConfig,
    pool: Option<&rayon::ThreadPool>,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::Batch("empty training batch".into()));
    }
    let iter = state.iter;
    let lr = lr_at(iter, &cfg.sched)?;
    let input_id = step_input_encoder(cfg, iter);
    let targets = step_targets(cfg, &input_id);

    let items: Vec<OfmmItem> = batch
        .iter()
        .map(|cand| {
            let grid = cand
                .grids
                .get(&input_id)
                .ok_or_else(|| Error::Alignment(format!("candidate {} lacks {input_id}", cand.key)))?;
            let plan_seed = stream_seed(cfg.seed, &format!("maskplan/{}/iter{iter}", cand.key));
            let plan = make_mask_plan(
                &grid.validity,
                grid.cols,
                cfg.mask_ratio,
                cfg.prediction_ratio,
                plan_seed,
            )?;
            prepare_item(&cand.grids, &input_id, &plan, &targets)
        })
        .collect::<Result<Vec<_>>>()?;

    let result = batch_loss_and_grads(&state.params, &input_id, &items, &|_| true, pool)?;
    adamw_step(
        state.params.store_mut().tensors_mut(),
        &result.grads,
        &mut state.opt,
        lr,
        cfg.betas,
        cfg.weight_decay,
    )?;
    state.iter += 1;

    Ok(StepMetrics {
        iter,
        lr,
        input_encoder: input_id,
        loss_total: result.loss_total,
        loss_per_target: result.per_target,
        wallclock_ms: 0,
    })
}

/// Held-out reconstruction losses under fixed per-candidate mask plans,
/// evaluated for every (input, target) pair regardless of training mode.
pub fn eval_heldout(
    params: &TiconParams,
    heldout: &[CandidateGrids],
    cfg: &TrainConfig,
    iter: u64,
) -> Result<HeldoutMetrics> {
    if heldout.is_empty() {
        return Err(Error::Dataset("empty held-out set".into()));
    }
    let mut cross_sum: BTreeMap<String, f64> = BTreeMap::new();
    let mut count = 0usize;
    for cand in heldout {
        let plan_seed = stream_seed(cfg.seed, &format!("heldout/{}", cand.key));
        count += 1;
        for input_id in &cfg.input_encoder_ids {
            let grid = cand
                .grids
                .get(input_id)
                .ok_or_else(|| Error::Alignment(format!("candidate {} lacks {input_id}", cand.key)))?;
            let plan = make_mask_plan(
                &grid.validity,
                grid.cols,
                cfg.mask_ratio,
                cfg.prediction_ratio,
                plan_seed,
            )?;
            let (_, per) =
                ofmm_loss(params, input_id, &cand.grids, &plan, &cfg.target_encoder_ids)?;
            for (target, v) in per {
                *cross_sum.entry(format!("{input_id}>{target}")).or_insert(0.0) += v;
            }
        }
    }
    let cross: BTreeMap<String, f64> =
        cross_sum.into_iter().map(|(k, v)| (k, v / count as f64)).collect();
    let mut per_input: BTreeMap<String, f64> = BTreeMap::new();
    for (key, v) in &cross {
        let input = key.split('>').next().unwrap().to_string();
        *per_input.entry(input).or_insert(0.0) += v;
    }
    let total = per_input.values().sum::<f64>() / per_input.len() as f64;
    Ok(HeldoutMetrics { iter, total, per_input, cross })
}

// ---- train-state checkpointing ----------------------------------------------

/// Save params + optimizer moments + counters. The live f64 state is rounded
/// to f32 first (the container's storage precision) so that an uninterrupted
/// run and a run restored from this checkpoint continue from identical state.
pub fn save_train_state(
    state: &mut TrainState,
    cfg: &TrainConfig,
    extra: Option<&KvConfig>,
    path: &Path,
) -> Result<()> {
    state.params.store_mut().round_to_f32();
    for m in state.opt.first_moment.iter_mut().chain(state.opt.second_moment.iter_mut()) {
        for v in m.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
    let mut kv = extra.cloned().unwrap_or_default();
    state.params.config.write_config(&mut kv);
    cfg.write_config(&mut kv);
    kv.set("state", "iter", state.iter);
    kv.set("state", "step_count", state.opt.step_count);

    let store = state.params.store();
    let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = store
        .iter()
        .map(|(name, t)| {
            (name.to_string(), t.shape.clone(), t.data.iter().map(|&v| v as f32).collect())
        })
        .collect();
    if !state.opt.first_moment.is_empty() {
        for (i, (name, t)) in store.iter().enumerate() {
            tensors.push((
                format!("opt.m.{name}"),
                t.shape.clone(),
                state.opt.first_moment[i].iter().map(|&v| v as f32).collect(),
            ));
            tensors.push((
                format!("opt.v.{name}"),
                t.shape.clone(),
                state.opt.second_moment[i].iter().map(|&v| v as f32).collect(),
            ));
        }
    }
    write_container(path, &kv.canonical(), &tensors)
}

/// Restore a training checkpoint saved by [`save_train_state`].
pub fn load_train_state(path: &Path) -> Result<(TrainState, TrainConfig, KvConfig)> {
    let container = read_container(path)?;
    let kv = KvConfig::parse(&container.config_text)?;
    let model_cfg = ModelConfig::read_config(&kv)?;
    let train_cfg = TrainConfig::read_config(&kv)?;
    let iter: u64 = kv.parse_value("state", "iter")?;
    let step_count: u64 = kv.parse_value("state", "step_count")?;

    let mut params = TiconParams::init(&model_cfg, 0)?;
    let by_name: BTreeMap<&str, &(String, Vec<usize>, Vec<f32>)> =
        container.tensors.iter().map(|t| (t.0.as_str(), t)).collect();
    let n = params.store().len();
    let mut first = Vec::with_capacity(n);
    let mut second = Vec::with_capacity(n);
    let names: Vec<String> = params.store().iter().map(|(n, _)| n.to_string()).collect();
    for name in &names {
        let entry = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::format_at(0, format!("checkpoint lacks tensor {name}")))?;
        let id = params.store().find(name).unwrap();
        if params.store().get(id).shape != entry.1 {
            return Err(Error::format_at(0, format!("tensor {name} shape mismatch")));
        }
        params.store_mut().get_mut(id).data = entry.2.iter().map(|&v| f64::from(v)).collect();
        let m = by_name
            .get(format!("opt.m.{name}").as_str())
            .ok_or_else(|| Error::format_at(0, format!("checkpoint lacks moments for {name}")))?;
        let v = by_name
            .get(format!("opt.v.{name}").as_str())
            .ok_or_else(|| Error::format_at(0, format!("checkpoint lacks moments for {name}")))?;
        first.push(m.2.iter().map(|&x| f64::from(x)).collect());
        second.push(v.2.iter().map(|&x| f64::from(x)).collect());
    }
    let opt = OptState { first_moment: first, second_moment: second, step_count };
    Ok((TrainState { params, opt, iter }, train_cfg, kv))
}

// ---- the pretraining loop ----------------------------------------------------

pub struct PretrainArtifacts {
    pub checkpoint: PathBuf,
    pub train_metrics: PathBuf,
    pub heldout_metrics: PathBuf,
    pub first_heldout: Option<HeldoutMetrics>,
    pub final_heldout: Option<HeldoutMetrics>,
}

fn make_pool(threads: usize) -> Result<Option<rayon::ThreadPool>> {
    if threads <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map(Some)
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn append_json(file: &mut std::fs::File, value: &impl Serialize) -> Result<()> {
    let line = serde_json::to_string(value)
        .map_err(|e| Error::Dataset(format!("metrics serialization: {e}")))?;
    writeln!(file, "{line}")?;
    Ok(())
}

fn sample_batch<'a>(
    corpus: &'a [CandidateGrids],
    cfg: &TrainConfig,
    iter: u64,
) -> Vec<&'a CandidateGrids> {
    let mut rng = stream_rng(cfg.seed, &format!("batch/iter{iter}"));
    (0..cfg.batch_size).map(|_| &corpus[rng.random_range(0..corpus.len())]).collect()
}

/// Run the training loop from `state.iter` to `cfg.total_iters`, with
/// held-out evaluation every `eval_interval` and periodic checkpoints.
pub fn run_training(
    mut state: TrainState,
    corpus: &Corpus,
    cfg: &TrainConfig,
    extra: Option<&KvConfig>,
    out_dir: &Path,
) -> Result<(TrainState, PretrainArtifacts)> {
    cfg.validate()?;
    if corpus.train.is_empty() {
        return Err(Error::Dataset("empty training corpus".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let pool = make_pool(cfg.threads)?;
    let ckpt_path = out_dir.join("checkpoint.tck");
    let mut train_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out_dir.join("train_metrics.jsonl"))?;
    let mut heldout_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out_dir.join("heldout_metrics.jsonl"))?;

    let mut first_heldout = None;
    let mut final_heldout = None;
    if state.iter == 0 && !corpus.heldout.is_empty() {
        let h = eval_heldout(&state.params, &corpus.heldout, cfg, 0)?;
        append_json(&mut heldout_file, &h)?;
        first_heldout = Some(h);
    }

    while state.iter < cfg.total_iters {
        let batch = sample_batch(&corpus.train, cfg, state.iter);
        let metrics = train_step(&mut state, &batch, cfg, pool.as_ref())?;
        append_json(&mut train_file, &metrics)?;

        let done = state.iter;
        if done % cfg.eval_interval == 0 && !corpus.heldout.is_empty() {
            let h = eval_heldout(&state.params, &corpus.heldout, cfg, done)?;
            append_json(&mut heldout_file, &h)?;
            final_heldout = Some(h);
        }
        if done % cfg.checkpoint_interval == 0 && done < cfg.total_iters {
            save_train_state(&mut state, cfg, extra, &out_dir.join(format!("checkpoint_iter{done}.tck")))?;
        }
    }

    save_train_state(&mut state, cfg, extra, &ckpt_path)?;
    if !corpus.heldout.is_empty()
        && final_heldout.as_ref().map(|h| h.iter) != Some(cfg.total_iters)
    {
        let h = eval_heldout(&state.params, &corpus.heldout, cfg, cfg.total_iters)?;
        append_json(&mut heldout_file, &h)?;
        final_heldout = Some(h);
    }

    Ok((
        state,
        PretrainArtifacts {
            checkpoint: ckpt_path,
            train_metrics: out_dir.join("train_metrics.jsonl"),
            heldout_metrics: out_dir.join("heldout_metrics.jsonl"),
            first_heldout,
            final_heldout,
        },
    ))
}

/// Pretrain from fresh state.
pub fn pretrain(
    params: TiconParams,
    corpus: &Corpus,
    cfg: &TrainConfig,
    extra: Option<&KvConfig>,
    out_dir: &Path,
) -> Result<(TrainState, PretrainArtifacts)> {
    let state = TrainState { params, opt: OptState::new(), iter: 0 };
    run_training(state, corpus, cfg, extra, out_dir)
}

/// Continue an interrupted run from a checkpoint; bit-exact with the
/// uninterrupted trajectory.
pub fn resume(
    checkpoint: &Path,
    corpus: &Corpus,
    threads: usize,
    out_dir: &Path,
) -> Result<(TrainState, PretrainArtifacts)> {
    let (state, mut cfg, kv) = load_train_state(checkpoint)?;
    cfg.threads = threads;
    run_training(state, corpus, &cfg, Some(&kv), out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderEntry;
    use crate::synth::{encode_tiles, generate_slide, sample_candidates, EncoderRegistry, SlideConfig};

    pub(crate) fn tiny_corpus(n_slides: usize, heldout: usize) -> (Corpus, Vec<String>) {
        let reg = EncoderRegistry::standard(16, 9);
        let cfg = SlideConfig::default();
        let ids = reg.pretraining_ids();
        let mut all = Vec::new();
        for s in 0..n_slides {
            let slide = generate_slide(5000 + s as u64, &cfg).unwrap();
            let full: BTreeMap<String, EmbeddingGrid> = ids
                .iter()
                .map(|id| (id.clone(), encode_tiles(&slide, reg.get(id).unwrap()).unwrap()))
                .collect();
            for cand in sample_candidates(&slide, s, 4, 0.55, 4, 77) {
                let grids = full
                    .iter()
                    .map(|(id, g)| {
                        (id.clone(), g.crop(cand.origin.0, cand.origin.1, cand.k).unwrap())
                    })
                    .collect();
                all.push(CandidateGrids {
                    key: format!("slide{s:03}/cand{}-{}", cand.origin.0, cand.origin.1),
                    grids,
                });
            }
        }
        let heldout_set = all.split_off(all.len().saturating_sub(heldout));
        (Corpus { train: all, heldout: heldout_set }, ids)
    }

    fn desk_params(ids: &[String]) -> TiconParams {
        let reg = EncoderRegistry::standard(16, 9);
        let entries: Vec<EncoderEntry> =
            ids.iter().map(|id| EncoderEntry::new(id, reg.dim(id).unwrap())).collect();
        TiconParams::init(&ModelConfig::desk(entries.clone(), entries), 5).unwrap()
    }

    fn quick_cfg(ids: &[String], iters: u64, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::desk(ids.to_vec(), ids.to_vec(), seed);
        cfg.total_iters = iters;
        cfg.sched = Schedule::new(2e-4, 2.min(iters).max(1), iters, 0.1).unwrap();
        cfg.batch_size = 4;
        cfg.eval_interval = iters;
        cfg.checkpoint_interval = iters + 1;
        cfg
    }

    #[test]
    fn zero_lr_step_leaves_params_unchanged_but_emits_metrics() {
        let (corpus, ids) = tiny_corpus(2, 0);
        let params = desk_params(&ids);
        let before: Vec<Vec<f64>> =
            params.store().tensors().iter().map(|t| t.data.clone()).collect();
        let cfg = quick_cfg(&ids, 10, 3);
        let mut state = TrainState { params, opt: OptState::new(), iter: 0 };
        let batch: Vec<&CandidateGrids> = corpus.train.iter().take(4).collect();
        let metrics = train_step(&mut state, &batch, &cfg, None).unwrap();
        assert_eq!(metrics.iter, 0);
        assert_eq!(metrics.lr, 0.0);
        assert!(metrics.loss_total > 0.0);
        assert_eq!(state.iter, 1);
        for (t, b) in state.params.store().tensors().iter().zip(&before) {
            assert_eq!(&t.data, b);
        }
    }

    #[test]
    fn fixed_seed_reproduces_metrics_and_thread_count_does_not_matter() {
        let (corpus, ids) = tiny_corpus(2, 2);
        let cfg = quick_cfg(&ids, 4, 11);
        let dir = tempfile::tempdir().unwrap();
        let (state1, _) =
            pretrain(desk_params(&ids), &corpus, &cfg, None, &dir.path().join("a")).unwrap();
        let (state2, _) =
            pretrain(desk_params(&ids), &corpus, &cfg, None, &dir.path().join("b")).unwrap();
        let a = std::fs::read(dir.path().join("a/train_metrics.jsonl")).unwrap();
        let b = std::fs::read(dir.path().join("b/train_metrics.jsonl")).unwrap();
        assert_eq!(a, b);
        for (t1, t2) in state1.params.store().tensors().iter().zip(state2.params.store().tensors())
        {
            assert_eq!(t1.data, t2.data);
        }

        let mut cfg_mt = cfg.clone();
        cfg_mt.threads = 4;
        let (state3, _) =
            pretrain(desk_params(&ids), &corpus, &cfg_mt, None, &dir.path().join("c")).unwrap();
        let c = std::fs::read(dir.path().join("c/train_metrics.jsonl")).unwrap();
        assert_eq!(a, c, "thread count changed the metrics stream");
        for (t1, t3) in state1.params.store().tensors().iter().zip(state3.params.store().tensors())
        {
            assert_eq!(t1.data, t3.data);
        }
    }

    #[test]
    fn encoder_sampling_is_uniform_per_step() {
        let ids = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let cfg = TrainConfig::desk(ids.clone(), ids.clone(), 123);
        let mut counts = BTreeMap::new();
        let steps = 3000;
        for it in 0..steps {
            *counts.entry(step_input_encoder(&cfg, it)).or_insert(0usize) += 1;
        }
        for id in &ids {
            let freq = counts[id] as f64 / steps as f64;
            assert!((freq - 1.0 / 3.0).abs() <= 0.03, "{id}: {freq}");
        }
    }

    #[test]
    fn interrupt_and_resume_is_trajectory_exact() {
        let (corpus, ids) = tiny_corpus(2, 1);
        let mut cfg = quick_cfg(&ids, 6, 19);
        cfg.checkpoint_interval = 3;
        let dir = tempfile::tempdir().unwrap();

        // uninterrupted
        let (full, _) =
            pretrain(desk_params(&ids), &corpus, &cfg, None, &dir.path().join("full")).unwrap();
        // interrupted at 3 (checkpoint_iter3), resumed in a fresh dir
        let ckpt = dir.path().join("full/checkpoint_iter3.tck");
        assert!(ckpt.exists());
        let (resumed, _) = resume(&ckpt, &corpus, 1, &dir.path().join("resumed")).unwrap();

        assert_eq!(full.iter, resumed.iter);
        for ((n1, t1), (n2, t2)) in
            full.params.store().iter().zip(resumed.params.store().iter())
        {
            assert_eq!(n1, n2);
            assert_eq!(t1.data, t2.data, "tensor {n1} diverged");
        }
        for (m1, m2) in full.opt.first_moment.iter().zip(&resumed.opt.first_moment) {
            assert_eq!(m1, m2);
        }
        // the resumed run's step metrics match the tail of the full run
        let full_lines: Vec<String> = std::fs::read_to_string(dir.path().join("full/train_metrics.jsonl"))
            .unwrap()
            .lines()
            .map(String::from)
            .collect();
        let resumed_lines: Vec<String> =
            std::fs::read_to_string(dir.path().join("resumed/train_metrics.jsonl"))
                .unwrap()
                .lines()
                .map(String::from)
                .collect();
        assert_eq!(&full_lines[full_lines.len() - resumed_lines.len()..], &resumed_lines[..]);
    }

    #[test]
    fn individual_mode_matches_single_target_with_one_encoder() {
        let (corpus, ids) = tiny_corpus(2, 0);
        let one = vec![ids[0].clone()];
        let dir = tempfile::tempdir().unwrap();

        let mut cfg_ind = quick_cfg(&one, 5, 31);
        cfg_ind.mode = TrainMode::Individual;
        let reg = EncoderRegistry::standard(16, 9);
        let entries = vec![EncoderEntry::new(&one[0], reg.dim(&one[0]).unwrap())];
        let params = TiconParams::init(&ModelConfig::desk(entries.clone(), entries), 5).unwrap();
        let (s1, _) =
            pretrain(params.clone(), &corpus, &cfg_ind, None, &dir.path().join("ind")).unwrap();

        let mut cfg_single = quick_cfg(&one, 5, 31);
        cfg_single.mode = TrainMode::OmniSingleTarget;
        let (s2, _) =
            pretrain(params, &corpus, &cfg_single, None, &dir.path().join("single")).unwrap();

        for (t1, t2) in s1.params.store().tensors().iter().zip(s2.params.store().tensors()) {
            assert_eq!(t1.data, t2.data);
        }
        let a = std::fs::read(dir.path().join("ind/train_metrics.jsonl")).unwrap();
        let b = std::fs::read(dir.path().join("single/train_metrics.jsonl")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn individual_mode_checkpoint_has_one_projector_and_head() {
        let (corpus, ids) = tiny_corpus(1, 0);
        let one = vec![ids[1].clone()];
        let mut cfg = quick_cfg(&one, 2, 41);
        cfg.mode = TrainMode::Individual;
        let reg = EncoderRegistry::standard(16, 9);
        let entries = vec![EncoderEntry::new(&one[0], reg.dim(&one[0]).unwrap())];
        let params = TiconParams::init(&ModelConfig::desk(entries.clone(), entries), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (_, artifacts) = pretrain(params, &corpus, &cfg, None, dir.path()).unwrap();
        let (loaded, _, _) = load_train_state(&artifacts.checkpoint).unwrap();
        let projs: Vec<&str> = loaded
            .params
            .store()
            .iter()
            .map(|(n, _)| n)
            .filter(|n| n.starts_with("proj."))
            .collect();
        assert_eq!(projs.len(), 4, "{projs:?}");
        assert!(projs.iter().all(|n| n.contains(&one[0])));
    }
}
