//! Forward passes: the shared encoder over visible tiles, the cross-decoder
//! at prediction locations, and the two inference modes (full-grid
//! contextualization and isolated single-tile mode).

use super::alibi::bias_matrix;
use super::{AttentionParams, Mlp2, TiconParams};
use crate::error::{Error, Result};
use crate::synth::EmbeddingGrid;
use crate::tensor::{Binding, Tape, Tensor, Var};
use std::collections::BTreeMap;

/// Contextualized embeddings for a set of grid positions, one row per
/// position, in input order.
#[derive(Debug, Clone)]
pub struct ContextOutput {
    pub features: Tensor,
    pub positions: Vec<(i32, i32)>,
}

pub(crate) fn mlp2_graph(tape: &mut Tape, bind: &Binding, mlp: &Mlp2, x: Var) -> Result<Var> {
    let h = tape.matmul(x, bind.var(mlp.fc1.w))?;
    let h = tape.add_bias(h, bind.var(mlp.fc1.b))?;
    let h = tape.gelu(h)?;
    let out = tape.matmul(h, bind.var(mlp.fc2.w))?;
    tape.add_bias(out, bind.var(mlp.fc2.b))
}

/// Multi-head attention with 2D ALiBi biases. Queries come from `xq` at
/// `pos_q`; keys and values from `xkv` at `pos_kv`.
pub(crate) fn attention_graph(
    tape: &mut Tape,
    bind: &Binding,
    attn: &AttentionParams,
    xq: Var,
    xkv: Var,
    pos_q: &[(i32, i32)],
    pos_kv: &[(i32, i32)],
    heads: usize,
    head_dim: usize,
) -> Result<Var> {
    let q = tape.matmul(xq, bind.var(attn.q.w))?;
    let q = tape.add_bias(q, bind.var(attn.q.b))?;
    let k = tape.matmul(xkv, bind.var(attn.k.w))?;
    let k = tape.add_bias(k, bind.var(attn.k.b))?;
    let v = tape.matmul(xkv, bind.var(attn.v.w))?;
    let v = tape.add_bias(v, bind.var(attn.v.b))?;

    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut pooled = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
        let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
        let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.affine(scores, scale, 0.0)?;
        let bias = bias_matrix(h, heads, pos_q, pos_kv);
        let weights = tape.softmax_bias(scores, Some(&bias))?;
        pooled.push(tape.matmul(weights, vh)?);
    }
    let cat = tape.concat_cols(&pooled)?;
    let out = tape.matmul(cat, bind.var(attn.o.w))?;
    tape.add_bias(out, bind.var(attn.o.b))
}

/// Project with the encoder-specific MLP, then run the shared pre-norm
/// transformer stack over all given positions. Returns `[n, D]`.
pub(crate) fn encode_graph(
    tape: &mut Tape,
    bind: &Binding,
    params: &TiconParams,
    input_encoder_id: &str,
    x: Var,
    positions: &[(i32, i32)],
) -> Result<Var> {
    let proj = params
        .projectors
        .get(input_encoder_id)
        .ok_or_else(|| Error::Registry(input_encoder_id.to_string()))?;
    let cfg = &params.config;
    let mut x = mlp2_graph(tape, bind, proj, x)?;
    for block in &params.blocks {
        let h = tape.layer_norm(x, bind.var(block.norm1.gamma), bind.var(block.norm1.beta))?;
        let a = attention_graph(
            tape,
            bind,
            &block.attn,
            h,
            h,
            positions,
            positions,
            cfg.heads,
            cfg.head_dim(),
        )?;
        x = tape.add(x, a)?;
        let h = tape.layer_norm(x, bind.var(block.norm2.gamma), bind.var(block.norm2.beta))?;
        let m = mlp2_graph(tape, bind, &block.mlp, h)?;
        x = tape.add(x, m)?;
    }
    tape.layer_norm(x, bind.var(params.final_norm.gamma), bind.var(params.final_norm.beta))
}

/// Repeat the mask token at each prediction location and run the decoder:
/// optional self-attention among mask tokens, cross-attention to the
/// contextualized visible embeddings, MLP. Returns `[p, D]`.
pub(crate) fn decode_graph(
    tape: &mut Tape,
    bind: &Binding,
    params: &TiconParams,
    ctx: Var,
    ctx_positions: &[(i32, i32)],
    pred_positions: &[(i32, i32)],
) -> Result<Var> {
    let cfg = &params.config;
    let mut z = tape.repeat_rows(bind.var(params.mask_token), pred_positions.len())?;
    for block in &params.decoder {
        if let Some((norm, attn)) = &block.self_attn {
            let h = tape.layer_norm(z, bind.var(norm.gamma), bind.var(norm.beta))?;
            let a = attention_graph(
                tape,
                bind,
                attn,
                h,
                h,
                pred_positions,
                pred_positions,
                cfg.heads,
                cfg.head_dim(),
            )?;
            z = tape.add(z, a)?;
        }
        let h = tape.layer_norm(z, bind.var(block.cross_norm.gamma), bind.var(block.cross_norm.beta))?;
        let a = attention_graph(
            tape,
            bind,
            &block.cross,
            h,
            ctx,
            pred_positions,
            ctx_positions,
            cfg.heads,
            cfg.head_dim(),
        )?;
        z = tape.add(z, a)?;
        let h = tape.layer_norm(z, bind.var(block.mlp_norm.gamma), bind.var(block.mlp_norm.beta))?;
        let m = mlp2_graph(tape, bind, &block.mlp, h)?;
        z = tape.add(z, m)?;
    }
    tape.layer_norm(z, bind.var(params.decoder_norm.gamma), bind.var(params.decoder_norm.beta))
}

/// Output head for one target encoder, `[p, D] -> [p, d_j]`.
pub(crate) fn head_graph(
    tape: &mut Tape,
    bind: &Binding,
    params: &TiconParams,
    target_id: &str,
    z: Var,
) -> Result<Var> {
    let head = params
        .heads
        .get(target_id)
        .ok_or_else(|| Error::Registry(target_id.to_string()))?;
    mlp2_graph(tape, bind, head, z)
}

/// Contextualize a set of visible tile embeddings (rows of `embeddings`,
/// one per position). Output order matches input order.
pub fn encode(
    params: &TiconParams,
    input_encoder_id: &str,
    embeddings: &Tensor,
    positions: &[(i32, i32)],
) -> Result<ContextOutput> {
    if positions.is_empty() {
        return Err(Error::EmptyInput("encode with zero visible positions"));
    }
    let din = params.config.input_dim(input_encoder_id)?;
    if !embeddings.is_matrix() || embeddings.cols() != din || embeddings.rows() != positions.len() {
        return Err(Error::Shape(format!(
            "encode expects [{}, {din}] embeddings for {input_encoder_id}, got {:?}",
            positions.len(),
            embeddings.shape
        )));
    }
    let mut tape = Tape::new();
    let bind = params.store().bind(&mut tape, false);
    let x = tape.constant(embeddings.clone());
    let out = encode_graph(&mut tape, &bind, params, input_encoder_id, x, positions)?;
    Ok(ContextOutput { features: tape.value(out).clone(), positions: positions.to_vec() })
}

/// Predict embeddings for every target encoder at the prediction locations.
pub fn decode_predict(
    params: &TiconParams,
    ctx: &ContextOutput,
    pred_positions: &[(i32, i32)],
    target_ids: &[String],
) -> Result<BTreeMap<String, Tensor>> {
    if pred_positions.is_empty() {
        return Err(Error::EmptyInput("decode_predict with empty prediction set"));
    }
    for id in target_ids {
        if !params.heads.contains_key(id) {
            return Err(Error::Registry(id.to_string()));
        }
    }
    let mut tape = Tape::new();
    let bind = params.store().bind(&mut tape, false);
    let ctx_var = tape.constant(ctx.features.clone());
    let z = decode_graph(&mut tape, &bind, params, ctx_var, &ctx.positions, pred_positions)?;
    let mut out = BTreeMap::new();
    for id in target_ids {
        let y = head_graph(&mut tape, &bind, params, id, z)?;
        out.insert(id.clone(), tape.value(y).clone());
    }
    Ok(out)
}

/// Run the encoder over every valid position of a grid (no masking, no
/// decoder). Invalid positions stay zero. Accepts grids of any extent,
/// including ones larger than the pretraining window.
pub fn contextualize(
    params: &TiconParams,
    input_encoder_id: &str,
    grid: &EmbeddingGrid,
) -> Result<EmbeddingGrid> {
    let positions_rc = grid.valid_positions();
    if positions_rc.is_empty() {
        return Err(Error::EmptyInput("contextualize on a grid without valid positions"));
    }
    let din = params.config.input_dim(input_encoder_id)?;
    if grid.dim != din {
        return Err(Error::Shape(format!(
            "grid dim {} vs encoder {input_encoder_id} dim {din}",
            grid.dim
        )));
    }
    let n = positions_rc.len();
    let mut data = Vec::with_capacity(n * din);
    let mut positions = Vec::with_capacity(n);
    for &(r, c) in &positions_rc {
        data.extend(grid.embedding(r, c).iter().map(|&v| f64::from(v)));
        positions.push((grid.origin.0 + r as i32, grid.origin.1 + c as i32));
    }
    let x = Tensor::from_vec(&[n, din], data)?;
    let ctx = encode(params, input_encoder_id, &x, &positions)?;

    let mut out = EmbeddingGrid::zeros(
        &format!("ticon[{input_encoder_id}]"),
        grid.rows,
        grid.cols,
        params.config.d_model,
    );
    out.origin = grid.origin;
    for (i, &(r, c)) in positions_rc.iter().enumerate() {
        out.set_embedding(r, c, ctx.features.row_slice(i));
    }
    Ok(out)
}

/// Isolated inference: a sequence of length one, the transformer reduced to a
/// deep per-tile transform. Exactly `contextualize` on a 1x1 grid.
pub fn contextualize_isolated(
    params: &TiconParams,
    input_encoder_id: &str,
    embedding: &[f64],
) -> Result<Vec<f64>> {
    let din = params.config.input_dim(input_encoder_id)?;
    if embedding.len() != din {
        return Err(Error::Shape(format!(
            "embedding dim {} vs encoder {input_encoder_id} dim {din}",
            embedding.len()
        )));
    }
    let x = Tensor::from_vec(&[1, din], embedding.to_vec())?;
    let ctx = encode(params, input_encoder_id, &x, &[(0, 0)])?;
    Ok(ctx.features.data)
}

/// Isolated inference over many tiles at once: each row of `rows` runs as its
/// own length-one sequence (no cross-tile interaction), sharing one tape so
/// parameters are bound once. Row i of the result equals
/// `contextualize_isolated` on row i.
pub fn contextualize_isolated_batch(
    params: &TiconParams,
    input_encoder_id: &str,
    rows: &Tensor,
) -> Result<Tensor> {
    let din = params.config.input_dim(input_encoder_id)?;
    if !rows.is_matrix() || rows.cols() != din {
        return Err(Error::Shape(format!(
            "expected [n, {din}] embeddings, got {:?}",
            rows.shape
        )));
    }
    if rows.rows() == 0 {
        return Err(Error::EmptyInput("isolated batch with no rows"));
    }
    let mut tape = Tape::new();
    let bind = params.store().bind(&mut tape, false);
    let x = tape.constant(rows.clone());
    let mut outs = Vec::with_capacity(rows.rows());
    for i in 0..rows.rows() {
        let xi = tape.gather_rows(x, &[i])?;
        outs.push(encode_graph(&mut tape, &bind, params, input_encoder_id, xi, &[(0, 0)])?);
    }
    let cat = tape.concat_rows(&outs)?;
    Ok(tape.value(cat).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderEntry, ModelConfig};
    use crate::seed::stream_rng;
    use crate::tensor::LAYER_NORM_EPS;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn small_config() -> ModelConfig {
        let entries = vec![EncoderEntry::new("mock48", 48), EncoderEntry::new("mock96", 96)];
        ModelConfig::desk(entries.clone(), entries)
    }

    fn rand_rows(n: usize, d: usize, path: &str) -> Tensor {
        let mut rng = stream_rng(31, path);
        Tensor::from_vec(&[n, d], (0..n * d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
            .unwrap()
    }

    #[test]
    fn encode_validates_inputs() {
        let params = TiconParams::init(&small_config(), 3).unwrap();
        let x = rand_rows(2, 48, "v");
        assert!(matches!(
            encode(&params, "nope", &x, &[(0, 0), (0, 1)]),
            Err(Error::Registry(_))
        ));
        assert!(matches!(encode(&params, "mock48", &x, &[]), Err(Error::EmptyInput(_))));
        let bad = rand_rows(2, 47, "w");
        assert!(matches!(
            encode(&params, "mock48", &bad, &[(0, 0), (0, 1)]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn permutation_equivariance() {
        let params = TiconParams::init(&small_config(), 3).unwrap();
        let n = 7;
        let x = rand_rows(n, 48, "perm");
        let positions: Vec<(i32, i32)> = (0..n as i32).map(|i| (i / 3, i % 3)).collect();
        let base = encode(&params, "mock48", &x, &positions).unwrap();

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(5, "order"));
        let xp = Tensor::from_vec(
            &[n, 48],
            order.iter().flat_map(|&i| x.row_slice(i).to_vec()).collect(),
        )
        .unwrap();
        let pp: Vec<(i32, i32)> = order.iter().map(|&i| positions[i]).collect();
        let permuted = encode(&params, "mock48", &xp, &pp).unwrap();
        for (j, &i) in order.iter().enumerate() {
            for d in 0..params.config.d_model {
                let a = base.features.at(i, d);
                let b = permuted.features.at(j, d);
                assert!((a - b).abs() <= 1e-12, "row {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn translation_invariance_is_exact() {
        let params = TiconParams::init(&small_config(), 3).unwrap();
        let n = 6;
        let x = rand_rows(n, 48, "shift");
        let positions: Vec<(i32, i32)> = (0..n as i32).map(|i| (i / 2, i % 2)).collect();
        let base = encode(&params, "mock48", &x, &positions).unwrap();
        let shifted: Vec<(i32, i32)> = positions.iter().map(|&(r, c)| (r + 3, c + 5)).collect();
        let moved = encode(&params, "mock48", &x, &shifted).unwrap();
        assert_eq!(base.features.data, moved.features.data);
    }

    /// Length-1 input: attention mixes only the single token, so the whole
    /// stack reduces to an MLP path. Re-implemented here with plain loops.
    #[test]
    fn single_token_matches_mlp_path_oracle() {
        let cfg = small_config();
        let params = TiconParams::init(&cfg, 11).unwrap();
        let e = rand_rows(1, 48, "single");
        let got = contextualize_isolated(&params, "mock48", &e.data).unwrap();

        let store = params.store();
        let tensor = |name: &str| store.get(store.find(name).unwrap());
        let linear = |x: &[f64], w: &Tensor, b: &Tensor| -> Vec<f64> {
            let (din, dout) = (w.rows(), w.cols());
            (0..dout)
                .map(|j| b.data[j] + (0..din).map(|i| x[i] * w.data[i * dout + j]).sum::<f64>())
                .collect()
        };
        let layer_norm = |x: &[f64], g: &Tensor, b: &Tensor| -> Vec<f64> {
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            x.iter()
                .enumerate()
                .map(|(i, v)| g.data[i] * (v - mean) * inv + b.data[i])
                .collect()
        };
        let gelu = |x: Vec<f64>| -> Vec<f64> {
            x.into_iter()
                .map(|v| {
                    0.5 * v
                        * (1.0
                            + (0.7978845608028654 * (v + 0.044715 * v.powi(3))).tanh())
                })
                .collect()
        };

        // projector
        let mut x = linear(
            &gelu(linear(&e.data, tensor("proj.mock48.fc1.w"), tensor("proj.mock48.fc1.b"))),
            tensor("proj.mock48.fc2.w"),
            tensor("proj.mock48.fc2.b"),
        );
        for i in 0..cfg.encoder_depth {
            let h = layer_norm(&x, tensor(&format!("enc.{i}.norm1.gamma")), tensor(&format!("enc.{i}.norm1.beta")));
            // attention weight over one token is 1: out = Wo (Wv h + bv) + bo
            let v = linear(&h, tensor(&format!("enc.{i}.attn.v.w")), tensor(&format!("enc.{i}.attn.v.b")));
            let a = linear(&v, tensor(&format!("enc.{i}.attn.o.w")), tensor(&format!("enc.{i}.attn.o.b")));
            for (xi, ai) in x.iter_mut().zip(&a) {
                *xi += ai;
            }
            let h = layer_norm(&x, tensor(&format!("enc.{i}.norm2.gamma")), tensor(&format!("enc.{i}.norm2.beta")));
            let m = linear(
                &gelu(linear(&h, tensor(&format!("enc.{i}.mlp.fc1.w")), tensor(&format!("enc.{i}.mlp.fc1.b")))),
                tensor(&format!("enc.{i}.mlp.fc2.w")),
                tensor(&format!("enc.{i}.mlp.fc2.b")),
            );
            for (xi, mi) in x.iter_mut().zip(&m) {
                *xi += mi;
            }
        }
        let expect = layer_norm(&x, tensor("enc.final.gamma"), tensor("enc.final.beta"));
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() <= 1e-10, "{g} vs {e}");
        }
    }

    #[test]
    fn isolated_equals_one_by_one_grid_bitwise() {
        let params = TiconParams::init(&small_config(), 3).unwrap();
        let mut grid = EmbeddingGrid::zeros("mock48", 1, 1, 48);
        let mut rng = stream_rng(8, "iso");
        let e: Vec<f64> = (0..48).map(|_| rng.random::<f64>()).collect();
        grid.set_embedding(0, 0, &e);
        let rounded: Vec<f64> = grid.embedding(0, 0).iter().map(|&v| f64::from(v)).collect();
        let via_grid = contextualize(&params, "mock48", &grid).unwrap();
        let direct = contextualize_isolated(&params, "mock48", &rounded).unwrap();
        let stored: Vec<f32> = direct.iter().map(|&v| v as f32).collect();
        assert_eq!(via_grid.embedding(0, 0), &stored[..]);
    }

    #[test]
    fn identical_tokens_in_symmetric_pair_agree() {
        let params = TiconParams::init(&small_config(), 3).unwrap();
        let e = rand_rows(1, 48, "dup");
        let x = Tensor::from_vec(&[2, 48], [e.data.clone(), e.data.clone()].concat()).unwrap();
        let out = encode(&params, "mock48", &x, &[(0, 0), (0, 4)]).unwrap();
        for d in 0..params.config.d_model {
            let (a, b) = (out.features.at(0, d), out.features.at(1, d));
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn decode_shapes_and_symmetry() {
        let params = TiconParams::init(&small_config(), 3).unwrap();
        let e = rand_rows(1, 48, "dec");
        let x = Tensor::from_vec(&[2, 48], [e.data.clone(), e.data.clone()].concat()).unwrap();
        let ctx = encode(&params, "mock48", &x, &[(0, 0), (0, 2)]).unwrap();
        let targets = vec!["mock48".to_string(), "mock96".to_string()];
        let preds = decode_predict(&params, &ctx, &[(1, 0), (1, 2)], &targets).unwrap();
        assert_eq!(preds["mock48"].shape, vec![2, 48]);
        assert_eq!(preds["mock96"].shape, vec![2, 96]);
        // mirrored prediction positions over identical visible tokens
        for id in ["mock48", "mock96"] {
            let p = &preds[id];
            for d in 0..p.cols() {
                let (a, b) = (p.at(0, d), p.at(1, d));
                assert!((a - b).abs() <= 1e-12, "{id}: {a} vs {b}");
            }
        }
        assert!(matches!(
            decode_predict(&params, &ctx, &[], &targets),
            Err(Error::EmptyInput(_))
        ));
        assert!(matches!(
            decode_predict(&params, &ctx, &[(0, 0)], &["zzz".to_string()]),
            Err(Error::Registry(_))
        ));
    }

    /// Hand-unrolled single-query cross-attention oracle for |p| = 1 with a
    /// cross-only decoder depth 1.
    #[test]
    fn single_query_decode_matches_closed_form() {
        let entries = vec![EncoderEntry::new("mock48", 48)];
        let mut cfg = ModelConfig::desk(entries.clone(), entries);
        cfg.decoder_self_attention = false;
        cfg.decoder_depth = 1;
        let params = TiconParams::init(&cfg, 17).unwrap();
        let x = rand_rows(3, 48, "sq");
        let positions = [(0, 0), (0, 1), (1, 1)];
        let ctx = encode(&params, "mock48", &x, &positions).unwrap();
        let pred = [(1, 0)];
        let preds =
            decode_predict(&params, &ctx, &pred, &["mock48".to_string()]).unwrap();

        let store = params.store();
        let tensor = |name: &str| store.get(store.find(name).unwrap());
        let linear = |x: &[f64], w: &Tensor, b: &Tensor| -> Vec<f64> {
            let (din, dout) = (w.rows(), w.cols());
            (0..dout)
                .map(|j| b.data[j] + (0..din).map(|i| x[i] * w.data[i * dout + j]).sum::<f64>())
                .collect()
        };
        let layer_norm = |x: &[f64], g: &Tensor, b: &Tensor| -> Vec<f64> {
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            x.iter().enumerate().map(|(i, v)| g.data[i] * (v - mean) * inv + b.data[i]).collect()
        };
        let gelu = |x: Vec<f64>| -> Vec<f64> {
            x.into_iter()
                .map(|v| 0.5 * v * (1.0 + (0.7978845608028654 * (v + 0.044715 * v.powi(3))).tanh()))
                .collect()
        };

        let d = cfg.d_model;
        let (heads, hd) = (cfg.heads, cfg.head_dim());
        let mut z: Vec<f64> = tensor("mask_token").data.clone();
        let h = layer_norm(&z, tensor("dec.0.cross_norm.gamma"), tensor("dec.0.cross_norm.beta"));
        let q = linear(&h, tensor("dec.0.cross.q.w"), tensor("dec.0.cross.q.b"));
        let keys: Vec<Vec<f64>> = (0..3)
            .map(|i| linear(ctx.features.row_slice(i), tensor("dec.0.cross.k.w"), tensor("dec.0.cross.k.b")))
            .collect();
        let vals: Vec<Vec<f64>> = (0..3)
            .map(|i| linear(ctx.features.row_slice(i), tensor("dec.0.cross.v.w"), tensor("dec.0.cross.v.b")))
            .collect();
        let mut attn_cat = vec![0.0; d];
        for hh in 0..heads {
            let cols = hh * hd..(hh + 1) * hd;
            let mut logits = Vec::new();
            for (i, &kp) in positions.iter().enumerate() {
                let dot: f64 = cols.clone().map(|c| q[c] * keys[i][c]).sum();
                let dist = f64::from((pred[0].0 - kp.0).abs() + (pred[0].1 - kp.1).abs());
                logits.push(
                    dot / (hd as f64).sqrt()
                        - 2f64.powf(-8.0 * (hh + 1) as f64 / heads as f64) * dist,
                );
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for (ci, c) in cols.enumerate() {
                let _ = ci;
                attn_cat[c] = (0..3).map(|i| exps[i] / sum * vals[i][c]).sum();
            }
        }
        let a = linear(&attn_cat, tensor("dec.0.cross.o.w"), tensor("dec.0.cross.o.b"));
        for (zi, ai) in z.iter_mut().zip(&a) {
            *zi += ai;
        }
        let h = layer_norm(&z, tensor("dec.0.mlp_norm.gamma"), tensor("dec.0.mlp_norm.beta"));
        let m = linear(
            &gelu(linear(&h, tensor("dec.0.mlp.fc1.w"), tensor("dec.0.mlp.fc1.b"))),
            tensor("dec.0.mlp.fc2.w"),
            tensor("dec.0.mlp.fc2.b"),
        );
        for (zi, mi) in z.iter_mut().zip(&m) {
            *zi += mi;
        }
        let z = layer_norm(&z, tensor("dec.final.gamma"), tensor("dec.final.beta"));
        let expect = linear(
            &gelu(linear(&z, tensor("head.mock48.fc1.w"), tensor("head.mock48.fc1.b"))),
            tensor("head.mock48.fc2.w"),
            tensor("head.mock48.fc2.b"),
        );
        for (g, e) in preds["mock48"].data.iter().zip(&expect) {
            assert!((g - e).abs() <= 1e-10, "{g} vs {e}");
        }
    }

    #[test]
    fn contextualize_extrapolates_beyond_training_window() {
        let params = TiconParams::init(&small_config(), 3).unwrap();
        let mut grid = EmbeddingGrid::zeros("mock48", 12, 12, 48);
        let mut rng = stream_rng(4, "extrap");
        for r in 0..12 {
            for c in 0..12 {
                if rng.random::<f64>() < 0.8 {
                    let e: Vec<f64> = (0..48).map(|_| rng.random::<f64>()).collect();
                    grid.set_embedding(r, c, &e);
                }
            }
        }
        let out = contextualize(&params, "mock48", &grid).unwrap();
        assert_eq!((out.rows, out.cols, out.dim), (12, 12, 64));
        for r in 0..12 {
            for c in 0..12 {
                if !grid.valid(r, c) {
                    assert!(out.embedding(r, c).iter().all(|&v| v == 0.0));
                } else {
                    assert!(out.embedding(r, c).iter().any(|&v| v != 0.0));
                }
            }
        }
    }
}
