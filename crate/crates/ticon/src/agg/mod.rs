//! Slide-level aggregation: a multi-head gated-attention ABMIL pools tile
//! embeddings into one slide vector, plus the meanpool baseline.

mod tangle;

pub use tangle::{
    pretrain_aggregator, retrieval_top1, tangle_loss, AggTrainConfig, AggregatorRun, SlidePair,
};

use crate::error::{Error, Result};
use crate::kvconfig::KvConfig;
use crate::model::{read_container, write_container};
use crate::seed::stream_rng;
use crate::tensor::{Binding, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct AggConfig {
    /// Tile embedding dimension consumed by the aggregator.
    pub input_dim: usize,
    pub gene_dim: usize,
    /// Pre-attention MLP width (the reference setup's 512, desk-scaled).
    pub hidden: usize,
    /// Gated-attention bottleneck width.
    pub attn_dim: usize,
    pub heads: usize,
    pub slide_dim: usize,
    /// Gated (tanh * sigmoid) attention; plain tanh when false.
    pub gated: bool,
    pub temperature: f64,
}

impl AggConfig {
    pub fn desk(input_dim: usize, gene_dim: usize) -> Self {
        AggConfig {
            input_dim,
            gene_dim,
            hidden: 64,
            attn_dim: 32,
            heads: 2,
            slide_dim: 64,
            gated: true,
            temperature: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self.gene_dim == 0
            || self.hidden == 0
            || self.attn_dim == 0
            || self.heads == 0
            || self.slide_dim == 0
        {
            return Err(Error::Config("aggregator dims must be positive".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!("temperature {} must be > 0", self.temperature)));
        }
        Ok(())
    }

    const KEYS: [&'static str; 8] = [
        "input_dim",
        "gene_dim",
        "hidden",
        "attn_dim",
        "heads",
        "slide_dim",
        "gated",
        "temperature",
    ];

    pub fn write_config(&self, kv: &mut KvConfig) {
        kv.set("aggregator", "input_dim", self.input_dim);
        kv.set("aggregator", "gene_dim", self.gene_dim);
        kv.set("aggregator", "hidden", self.hidden);
        kv.set("aggregator", "attn_dim", self.attn_dim);
        kv.set("aggregator", "heads", self.heads);
        kv.set("aggregator", "slide_dim", self.slide_dim);
        kv.set("aggregator", "gated", self.gated);
        kv.set("aggregator", "temperature", self.temperature);
    }

    pub fn read_config(kv: &KvConfig) -> Result<Self> {
        kv.check_known("aggregator", &Self::KEYS)?;
        let cfg = AggConfig {
            input_dim: kv.parse_value("aggregator", "input_dim")?,
            gene_dim: kv.parse_value("aggregator", "gene_dim")?,
            hidden: kv.parse_value("aggregator", "hidden")?,
            attn_dim: kv.parse_value("aggregator", "attn_dim")?,
            heads: kv.parse_value("aggregator", "heads")?,
            slide_dim: kv.parse_value("aggregator", "slide_dim")?,
            gated: kv.parse_value("aggregator", "gated")?,
            temperature: kv.parse_value("aggregator", "temperature")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct HeadParams {
    v: Linear,
    u: Linear,
    w: ParamId,
}

/// ABMIL parameters plus the gene-branch MLP used for contrastive alignment.
#[derive(Debug, Clone)]
pub struct AbmilParams {
    pub config: AggConfig,
    store: ParamStore,
    pre: [Linear; 3],
    heads: Vec<HeadParams>,
    post: Linear,
    gene: [Linear; 3],
}

impl AbmilParams {
    pub fn init(config: &AggConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = |store: &mut ParamStore, name: String, din: usize, dout: usize| -> Result<Linear> {
            let mut rng = stream_rng(seed, &format!("agg-init/{name}"));
            let w = store.add(format!("{name}.w"), Tensor::trunc_normal(&[din, dout], 0.02, &mut rng))?;
            let b = store.add(format!("{name}.b"), Tensor::zeros(&[dout]))?;
            Ok(Linear { w, b })
        };
        Self::build(config.clone(), &mut init)
    }

    fn build(
        config: AggConfig,
        linear: &mut dyn FnMut(&mut ParamStore, String, usize, usize) -> Result<Linear>,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let (d, h, a, s) = (config.input_dim, config.hidden, config.attn_dim, config.slide_dim);
        let pre = [
            linear(&mut store, "pre.0".into(), d, h)?,
            linear(&mut store, "pre.1".into(), h, h)?,
            linear(&mut store, "pre.2".into(), h, h)?,
        ];
        let mut heads = Vec::new();
        for k in 0..config.heads {
            let v = linear(&mut store, format!("attn.{k}.v"), h, a)?;
            let u = linear(&mut store, format!("attn.{k}.u"), h, a)?;
            let mut rng = stream_rng(0xA66, &format!("agg-w/{k}"));
            let w = store.add(
                format!("attn.{k}.w"),
                Tensor::trunc_normal(&[a, 1], 0.02, &mut rng),
            )?;
            heads.push(HeadParams { v, u, w });
        }
        let post = linear(&mut store, "post".into(), config.heads * h, s)?;
        let gene = [
            linear(&mut store, "gene.0".into(), config.gene_dim, h)?,
            linear(&mut store, "gene.1".into(), h, h)?,
            linear(&mut store, "gene.2".into(), h, s)?,
        ];
        Ok(AbmilParams { config, store, pre, heads, post, gene })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn save(&self, path: &std::path::Path, extra: Option<&KvConfig>) -> Result<()> {
        let mut kv = extra.cloned().unwrap_or_default();
        self.config.write_config(&mut kv);
        let tensors: Vec<(String, Vec<usize>, Vec<f32>)> = self
            .store
            .iter()
            .map(|(name, t)| {
                (name.to_string(), t.shape.clone(), t.data.iter().map(|&v| v as f32).collect())
            })
            .collect();
        write_container(path, &kv.canonical(), &tensors)
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, KvConfig)> {
        let container = read_container(path)?;
        let kv = KvConfig::parse(&container.config_text)?;
        let config = AggConfig::read_config(&kv)?;
        let mut zero =
            |store: &mut ParamStore, name: String, din: usize, dout: usize| -> Result<Linear> {
                let w = store.add(format!("{name}.w"), Tensor::zeros(&[din, dout]))?;
                let b = store.add(format!("{name}.b"), Tensor::zeros(&[dout]))?;
                Ok(Linear { w, b })
            };
        let mut params = Self::build(config, &mut zero)?;
        let mut seen = 0usize;
        for (name, shape, data) in &container.tensors {
            let id = params
                .store
                .find(name)
                .ok_or_else(|| Error::format_at(0, format!("unknown aggregator tensor {name}")))?;
            let t = params.store.get_mut(id);
            if &t.shape != shape {
                return Err(Error::format_at(0, format!("tensor {name} shape mismatch")));
            }
            t.data = data.iter().map(|&v| f64::from(v)).collect();
            seen += 1;
        }
        if seen != params.store.len() {
            return Err(Error::format_at(0, "aggregator checkpoint incomplete"));
        }
        Ok((params, kv))
    }
}

fn linear_graph(tape: &mut Tape, bind: &Binding, l: &Linear, x: Var) -> Result<Var> {
    let y = tape.matmul(x, bind.var(l.w))?;
    tape.add_bias(y, bind.var(l.b))
}

/// ABMIL graph: pre-attention MLP, per-head gated attention over tiles,
/// concatenated pooled heads, post projection. Returns the slide vector
/// `[1, slide_dim]` and per-head attention weights `[1, n]`.
pub(crate) fn abmil_graph(
    tape: &mut Tape,
    bind: &Binding,
    params: &AbmilParams,
    tiles: Var,
) -> Result<(Var, Vec<Var>)> {
    let n = tape.value(tiles).rows();
    if n == 0 {
        return Err(Error::EmptyInput("abmil over zero tiles"));
    }
    let mut h = tiles;
    for (i, l) in params.pre.iter().enumerate() {
        h = linear_graph(tape, bind, l, h)?;
        if i + 1 < params.pre.len() {
            h = tape.gelu(h)?;
        }
    }
    let mut pooled = Vec::new();
    let mut weights = Vec::new();
    for head in &params.heads {
        let vh = linear_graph(tape, bind, &head.v, h)?;
        let vh = tape.tanh(vh)?;
        let gated = if params.config.gated {
            let uh = linear_graph(tape, bind, &head.u, h)?;
            let uh = tape.sigmoid(uh)?;
            tape.mul(vh, uh)?
        } else {
            vh
        };
        let scores = tape.matmul(gated, bind.var(head.w))?; // [n,1]
        let row = tape.transpose(scores)?; // [1,n]
        let attn = tape.softmax(row)?;
        weights.push(attn);
        pooled.push(tape.matmul(attn, h)?); // [1,hidden]
    }
    let cat = tape.concat_cols(&pooled)?;
    let slide = linear_graph(tape, bind, &params.post, cat)?;
    Ok((slide, weights))
}

/// Gene-branch MLP `[B, gene_dim] -> [B, slide_dim]`.
pub(crate) fn gene_graph(
    tape: &mut Tape,
    bind: &Binding,
    params: &AbmilParams,
    genes: Var,
) -> Result<Var> {
    let mut h = genes;
    for (i, l) in params.gene.iter().enumerate() {
        h = linear_graph(tape, bind, l, h)?;
        if i + 1 < params.gene.len() {
            h = tape.gelu(h)?;
        }
    }
    Ok(h)
}

/// Pool one bag of tile embeddings into a slide vector; also returns the
/// per-head attention weights over tiles.
pub fn abmil_forward(params: &AbmilParams, tiles: &Tensor) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if !tiles.is_matrix() || tiles.cols() != params.config.input_dim {
        return Err(Error::Shape(format!(
            "abmil expects [n, {}], got {:?}",
            params.config.input_dim, tiles.shape
        )));
    }
    if tiles.rows() == 0 {
        return Err(Error::EmptyInput("abmil over zero tiles"));
    }
    let mut tape = Tape::new();
    let bind = params.store.bind(&mut tape, false);
    let t = tape.constant(tiles.clone());
    let (slide, weights) = abmil_graph(&mut tape, &bind, params, t)?;
    Ok((
        tape.value(slide).data.clone(),
        weights.into_iter().map(|w| tape.value(w).data.clone()).collect(),
    ))
}

/// Arithmetic mean of tile embeddings.
pub fn meanpool_slide(tiles: &Tensor) -> Result<Vec<f64>> {
    if !tiles.is_matrix() || tiles.rows() == 0 {
        return Err(Error::EmptyInput("meanpool over zero tiles"));
    }
    let (n, d) = (tiles.rows(), tiles.cols());
    let mut out = vec![0.0; d];
    for r in 0..n {
        for (o, x) in out.iter_mut().zip(tiles.row_slice(r)) {
            *o += x / n as f64;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::stream_rng;
    use crate::tensor::grad_check;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn sample_params() -> AbmilParams {
        AbmilParams::init(&AggConfig::desk(24, 8), 3).unwrap()
    }

    fn rand_tiles(n: usize, d: usize, path: &str) -> Tensor {
        let mut rng = stream_rng(55, path);
        Tensor::from_vec(&[n, d], (0..n * d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
            .unwrap()
    }

    #[test]
    fn single_tile_attention_is_one() {
        let params = sample_params();
        let tiles = rand_tiles(1, 24, "single");
        let (slide, weights) = abmil_forward(&params, &tiles).unwrap();
        assert_eq!(slide.len(), params.config.slide_dim);
        for w in &weights {
            assert_eq!(w, &vec![1.0]);
        }
    }

    #[test]
    fn permutation_and_duplication_invariance() {
        let params = sample_params();
        let n = 9;
        let tiles = rand_tiles(n, 24, "perm");
        let (base, weights) = abmil_forward(&params, &tiles).unwrap();
        for w in &weights {
            let sum: f64 = w.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            assert!(w.iter().all(|&x| x > 0.0));
        }

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(7, "order"));
        let permuted = Tensor::from_vec(
            &[n, 24],
            order.iter().flat_map(|&i| tiles.row_slice(i).to_vec()).collect(),
        )
        .unwrap();
        let (p, _) = abmil_forward(&params, &permuted).unwrap();
        for (a, b) in base.iter().zip(&p) {
            assert!((a - b).abs() <= 1e-12);
        }

        let doubled = Tensor::from_vec(
            &[2 * n, 24],
            [tiles.data.clone(), tiles.data.clone()].concat(),
        )
        .unwrap();
        let (d, _) = abmil_forward(&params, &doubled).unwrap();
        for (a, b) in base.iter().zip(&d) {
            assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn empty_bag_is_error() {
        let params = sample_params();
        let tiles = Tensor::zeros(&[0, 24]);
        assert!(matches!(abmil_forward(&params, &tiles), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn meanpool_cases() {
        let v = rand_tiles(1, 5, "mp");
        let same = Tensor::from_vec(&[3, 5], [v.data.clone(), v.data.clone(), v.data.clone()].concat()).unwrap();
        let m = meanpool_slide(&same).unwrap();
        for (a, b) in m.iter().zip(&v.data) {
            assert!((a - b).abs() <= 1e-12);
        }
        let two = Tensor::matrix(2, 2, vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(meanpool_slide(&two).unwrap(), vec![3.0, 5.0]);
        let tiles = rand_tiles(7, 4, "mp2");
        let m = meanpool_slide(&tiles).unwrap();
        for c in 0..4 {
            let brute: f64 = (0..7).map(|r| tiles.at(r, c)).sum::<f64>() / 7.0;
            assert!((m[c] - brute).abs() <= 1e-12);
        }
    }

    #[test]
    fn aggregator_gradients_pass_grad_check() {
        let params = sample_params();
        let tiles = rand_tiles(3, 24, "gc");
        // through the tile input
        let p = params.clone();
        let err = grad_check(
            move |tape, v| {
                let bind = p.store().bind(tape, false);
                let (slide, _) = abmil_graph(tape, &bind, &p, v)?;
                let sq = tape.mul(slide, slide)?;
                let s = tape.row_sum(sq)?;
                tape.mean_rows(s, &[0])
            },
            &tiles,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "tile-input gradient error {err}");

        // through one attention weight tensor, spliced into the binding
        let p = params.clone();
        let w_idx = params.store().find("attn.0.v.w").unwrap().index();
        let w0 = rand_tiles(64, 32, "gc-w");
        let tiles2 = tiles.clone();
        let err = grad_check(
            move |tape, v| {
                let bind = p.store().bind(tape, false);
                let mut vars = bind.vars().to_vec();
                vars[w_idx] = v;
                let spliced = crate::tensor::Binding::from_vars(vars);
                let t = tape.constant(tiles2.clone());
                let (slide, _) = abmil_graph(tape, &spliced, &p, t)?;
                let sq = tape.mul(slide, slide)?;
                let s = tape.row_sum(sq)?;
                tape.mean_rows(s, &[0])
            },
            &w0,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "attention weight gradient error {err}");
    }
}
