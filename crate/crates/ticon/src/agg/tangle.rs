//! Contrastive slide-level pretraining: symmetric InfoNCE between pooled
//! slide vectors and gene-expression vectors passed through the gene MLP.

use super::{abmil_graph, gene_graph, AbmilParams, AggConfig};
use crate::error::{Error, Result};
use crate::kvconfig::KvConfig;
use crate::seed::stream_rng;
use crate::tensor::{adamw_step, lr_at, OptState, Schedule, Tape, Tensor, Var};
use rand::Rng;
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};

/// One slide's sampled tile embeddings and its gene vector.
#[derive(Debug, Clone)]
pub struct SlidePair {
    pub slide_id: String,
    /// At most max_tokens rows, sampling seeded by the pipeline.
    pub tiles: Tensor,
    pub gene: Vec<f64>,
}

/// Symmetric InfoNCE over L2-normalized rows as a tape scalar.
pub(crate) fn tangle_loss_graph(
    tape: &mut Tape,
    slide_vecs: Var,
    gene_vecs: Var,
    temperature: f64,
) -> Result<Var> {
    let b = tape.value(slide_vecs).rows();
    if b < 2 {
        return Err(Error::Batch(format!("contrastive batch of {b} < 2")));
    }
    if temperature <= 0.0 {
        return Err(Error::Batch(format!("temperature {temperature} must be > 0")));
    }
    let s = tape.l2_normalize(slide_vecs)?;
    let g = tape.l2_normalize(gene_vecs)?;
    let gt = tape.transpose(g)?;
    let logits = tape.matmul(s, gt)?;
    let logits = tape.affine(logits, 1.0 / temperature, 0.0)?;
    let labels: Vec<usize> = (0..b).collect();
    let weights = vec![1.0; b];
    let s2g = tape.cross_entropy(logits, &labels, &weights)?;
    let logits_t = tape.transpose(logits)?;
    let g2s = tape.cross_entropy(logits_t, &labels, &weights)?;
    let sum = tape.add(s2g, g2s)?;
    tape.affine(sum, 0.5, 0.0)
}

/// Symmetric InfoNCE between matched slide and gene vectors.
pub fn tangle_loss(slide_vecs: &Tensor, gene_vecs: &Tensor, temperature: f64) -> Result<f64> {
    if slide_vecs.shape != gene_vecs.shape {
        return Err(Error::Shape(format!(
            "tangle_loss {:?} vs {:?}",
            slide_vecs.shape, gene_vecs.shape
        )));
    }
    let mut tape = Tape::new();
    let s = tape.constant(slide_vecs.clone());
    let g = tape.constant(gene_vecs.clone());
    let loss = tangle_loss_graph(&mut tape, s, g, temperature)?;
    tape.value(loss).item()
}

#[derive(Debug, Clone)]
pub struct AggTrainConfig {
    pub batch_size: usize,
    pub total_iters: u64,
    pub base_lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub seed: u64,
    pub eval_interval: u64,
}

impl AggTrainConfig {
    pub fn desk(seed: u64) -> Self {
        AggTrainConfig {
            batch_size: 32,
            total_iters: 800,
            base_lr: 1e-3,
            betas: (0.9, 0.95),
            weight_decay: 0.01,
            seed,
            eval_interval: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AggStepMetrics {
    pub iter: u64,
    pub lr: f64,
    pub loss: f64,
    pub wallclock_ms: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AggEvalMetrics {
    pub iter: u64,
    pub retrieval_top1: f64,
    pub chance: f64,
}

pub struct AggregatorRun {
    pub params: AbmilParams,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub final_retrieval: f64,
    pub chance: f64,
}

/// Slide and gene vectors for a set of pairs under the current parameters.
fn embed_pairs(params: &AbmilParams, pairs: &[&SlidePair]) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let bind = params.store().bind(&mut tape, false);
    let mut slide_rows = Vec::new();
    for p in pairs {
        let t = tape.constant(p.tiles.clone());
        let (s, _) = abmil_graph(&mut tape, &bind, params, t)?;
        slide_rows.push(s);
    }
    let slides = tape.concat_rows(&slide_rows)?;
    let genes = Tensor::from_vec(
        &[pairs.len(), params.config.gene_dim],
        pairs.iter().flat_map(|p| p.gene.clone()).collect(),
    )?;
    let gv = tape.constant(genes);
    let g = gene_graph(&mut tape, &bind, params, gv)?;
    Ok((tape.value(slides).clone(), tape.value(g).clone()))
}

/// Top-1 retrieval accuracy of matched slide-gene pairs (mean of both
/// directions) under cosine similarity.
pub fn retrieval_top1(params: &AbmilParams, pairs: &[&SlidePair]) -> Result<f64> {
    let b = pairs.len();
    if b < 2 {
        return Err(Error::Batch("retrieval needs at least two pairs".into()));
    }
    let (slides, genes) = embed_pairs(params, pairs)?;
    let norm = |t: &Tensor, r: usize| -> Vec<f64> {
        let row = t.row_slice(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        row.iter().map(|v| v / n).collect()
    };
    let mut hits = 0usize;
    for i in 0..b {
        let si = norm(&slides, i);
        let best = (0..b)
            .map(|j| {
                let gj = norm(&genes, j);
                si.iter().zip(&gj).map(|(a, c)| a * c).sum::<f64>()
            })
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
            .unwrap()
            .0;
        hits += usize::from(best == i);
    }
    for j in 0..b {
        let gj = norm(&genes, j);
        let best = (0..b)
            .map(|i| {
                let si = norm(&slides, i);
                gj.iter().zip(&si).map(|(a, c)| a * c).sum::<f64>()
            })
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
            .unwrap()
            .0;
        hits += usize::from(best == j);
    }
    Ok(hits as f64 / (2 * b) as f64)
}

/// Train the aggregator and gene MLP jointly with AdamW against the
/// contrastive objective; emits loss metrics and held-out retrieval accuracy.
pub fn pretrain_aggregator(
    corpus: &[SlidePair],
    heldout: &[SlidePair],
    config: &AggConfig,
    cfg: &AggTrainConfig,
    extra: Option<&KvConfig>,
    out_dir: &Path,
) -> Result<AggregatorRun> {
    if corpus.is_empty() {
        return Err(Error::Dataset("empty aggregator corpus".into()));
    }
    if cfg.batch_size < 2 {
        return Err(Error::Batch("contrastive batch size must be >= 2".into()));
    }
    for p in corpus.iter().chain(heldout) {
        if p.tiles.cols() != config.input_dim || p.gene.len() != config.gene_dim {
            return Err(Error::Shape(format!(
                "slide {}: tiles {:?} / gene {} vs config dims {}/{}",
                p.slide_id,
                p.tiles.shape,
                p.gene.len(),
                config.input_dim,
                config.gene_dim
            )));
        }
    }
    std::fs::create_dir_all(out_dir)?;
    let mut params = AbmilParams::init(config, cfg.seed)?;
    let mut opt = OptState::new();
    let sched = Schedule::new(cfg.base_lr, (cfg.total_iters / 10).max(1), cfg.total_iters, 0.1)?;
    let metrics_path = out_dir.join("aggregator_metrics.jsonl");
    let mut metrics_file =
        std::fs::OpenOptions::new().create(true).append(true).open(&metrics_path)?;

    let heldout_refs: Vec<&SlidePair> = heldout.iter().collect();
    let chance = if heldout.is_empty() { f64::NAN } else { 1.0 / heldout.len() as f64 };

    let mut final_retrieval = f64::NAN;
    for iter in 0..cfg.total_iters {
        let mut rng = stream_rng(cfg.seed, &format!("agg-batch/iter{iter}"));
        let batch: Vec<&SlidePair> =
            (0..cfg.batch_size).map(|_| &corpus[rng.random_range(0..corpus.len())]).collect();

        let mut tape = Tape::new();
        let bind = params.store().bind(&mut tape, true);
        let mut slide_rows = Vec::new();
        for p in &batch {
            let t = tape.constant(p.tiles.clone());
            let (s, _) = abmil_graph(&mut tape, &bind, &params, t)?;
            slide_rows.push(s);
        }
        let slides = tape.concat_rows(&slide_rows)?;
        let genes = Tensor::from_vec(
            &[batch.len(), config.gene_dim],
            batch.iter().flat_map(|p| p.gene.clone()).collect(),
        )?;
        let gv = tape.constant(genes);
        let g = gene_graph(&mut tape, &bind, &params, gv)?;
        let loss = tangle_loss_graph(&mut tape, slides, g, config.temperature)?;
        tape.backward(loss)?;
        let loss_val = tape.value(loss).item()?;
        let grads = bind.grads(&tape);
        let lr = lr_at(iter, &sched)?;
        adamw_step(
            params.store_mut().tensors_mut(),
            &grads,
            &mut opt,
            lr,
            cfg.betas,
            cfg.weight_decay,
        )?;

        append_line(&mut metrics_file, &AggStepMetrics { iter, lr, loss: loss_val, wallclock_ms: 0 })?;
        let done = iter + 1;
        if (done % cfg.eval_interval == 0 || done == cfg.total_iters) && heldout.len() >= 2 {
            let r = retrieval_top1(&params, &heldout_refs)?;
            append_line(&mut metrics_file, &AggEvalMetrics { iter: done, retrieval_top1: r, chance })?;
            final_retrieval = r;
        }
    }

    let ckpt = out_dir.join("aggregator.tck");
    params.store_mut().round_to_f32();
    params.save(&ckpt, extra)?;
    Ok(AggregatorRun {
        params,
        checkpoint: ckpt,
        metrics: metrics_path,
        final_retrieval,
        chance,
    })
}

fn append_line(file: &mut std::fs::File, value: &impl Serialize) -> Result<()> {
    let line = serde_json::to_string(value)
        .map_err(|e| Error::Dataset(format!("metrics serialization: {e}")))?;
    writeln!(file, "{line}")?;
    Ok(())
}
