//! Synthetic whole-slide substrate.
//!
//! Slides are grids of tiles with spatially coherent region labels, per-tile
//! latent appearance vectors, a slide label, and a gene-expression vector.
//! Two configured classes (the aliased pair) share one latent distribution:
//! their tiles are indistinguishable in isolation and separable only through
//! neighborhood context. That asymmetry is produced by a hidden binary
//! territory field: territory 0 mixes the first aliased class with its own
//! companion class, territory 1 the second with a different companion, and
//! the per-slide mixing proportions are randomized so slide-level companion
//! counts do not pin down the aliased composition.

mod candidate;
mod encoder;
mod grid;

pub use candidate::{sample_candidates, Candidate};
pub use encoder::{
    encode_fine, encode_tiles, pool_quadrants, EncoderRegistry, MockEncoderSpec, OperatingScale,
};
pub use grid::{grid_roundtrip, EmbeddingGrid};

use crate::error::{Error, Result};
use crate::seed::stream_rng;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideConfig {
    pub rows: usize,
    pub cols: usize,
    /// Number of region classes R (>= 3; the aliasing asymmetry needs >= 5).
    pub num_regions: usize,
    /// Latent appearance dimension L.
    pub latent_dim: usize,
    /// Gene-expression dimension G.
    pub gene_dim: usize,
    /// The two region classes that share a latent distribution.
    pub alias_pair: (usize, usize),
    pub background_fraction: f64,
    /// Shared across a cohort of slides: class centers and the gene map.
    pub cohort_seed: u64,
    /// Nominal tile edge in pixels.
    pub tile_size: usize,
}

impl Default for SlideConfig {
    fn default() -> Self {
        SlideConfig {
            rows: 16,
            cols: 16,
            num_regions: 5,
            latent_dim: 16,
            gene_dim: 32,
            alias_pair: (0, 1),
            background_fraction: 0.15,
            cohort_seed: 0x51CD,
            tile_size: 512,
        }
    }
}

/// Grid geometry plus the tissue-validity mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileGrid {
    pub rows: usize,
    pub cols: usize,
    pub tile_size: usize,
    pub validity: Vec<bool>,
}

impl TileGrid {
    pub fn idx(&self, r: usize, c: usize) -> usize {
        r * self.cols + c
    }

    pub fn valid(&self, r: usize, c: usize) -> bool {
        self.validity[self.idx(r, c)]
    }

    pub fn valid_count(&self) -> usize {
        self.validity.iter().filter(|v| **v).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSlide {
    pub grid: TileGrid,
    pub region_labels: Vec<usize>,
    /// rows * cols * latent_dim, row-major.
    pub tile_latents: Vec<f64>,
    pub tile_labels: Vec<usize>,
    pub slide_label: usize,
    pub gene_vector: Vec<f64>,
    pub seed: u64,
    pub config: SlideConfig,
}

impl SyntheticSlide {
    pub fn rows(&self) -> usize {
        self.grid.rows
    }

    pub fn cols(&self) -> usize {
        self.grid.cols
    }

    pub fn latent(&self, r: usize, c: usize) -> &[f64] {
        let l = self.config.latent_dim;
        let i = self.grid.idx(r, c);
        &self.tile_latents[i * l..(i + 1) * l]
    }

    pub fn label(&self, r: usize, c: usize) -> usize {
        self.tile_labels[self.grid.idx(r, c)]
    }

    /// Fraction of valid tiles per region class.
    pub fn composition(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.config.num_regions];
        for (i, &v) in self.grid.validity.iter().enumerate() {
            if v {
                counts[self.region_labels[i]] += 1;
            }
        }
        let total = counts.iter().sum::<usize>().max(1) as f64;
        counts.into_iter().map(|c| c as f64 / total).collect()
    }

    /// Majority region label in the (2*radius+1)^2 window around a tile, the
    /// context oracle for the aliasing asymmetry. Ties break to the smaller
    /// class index.
    pub fn majority_label(&self, r: usize, c: usize, radius: usize) -> usize {
        let mut counts = vec![0usize; self.config.num_regions];
        let (rows, cols) = (self.rows() as isize, self.cols() as isize);
        let rad = radius as isize;
        for dr in -rad..=rad {
            for dc in -rad..=rad {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if rr >= 0 && rr < rows && cc >= 0 && cc < cols {
                    counts[self.region_labels[(rr * cols + cc) as usize]] += 1;
                }
            }
        }
        counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap()
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// One round of majority smoothing over the 4-neighborhood plus self;
/// ties keep the current value, otherwise the smallest class wins.
fn smooth_majority(labels: &[usize], rows: usize, cols: usize, classes: usize) -> Vec<usize> {
    let mut out = vec![0usize; labels.len()];
    let mut counts = vec![0usize; classes];
    for r in 0..rows {
        for c in 0..cols {
            counts.iter_mut().for_each(|x| *x = 0);
            let cur = labels[r * cols + c];
            counts[cur] += 1;
            if r > 0 {
                counts[labels[(r - 1) * cols + c]] += 1;
            }
            if r + 1 < rows {
                counts[labels[(r + 1) * cols + c]] += 1;
            }
            if c > 0 {
                counts[labels[r * cols + c - 1]] += 1;
            }
            if c + 1 < cols {
                counts[labels[r * cols + c + 1]] += 1;
            }
            let best = *counts.iter().max().unwrap();
            out[r * cols + c] = if counts[cur] == best {
                cur
            } else {
                counts.iter().position(|&x| x == best).unwrap()
            };
        }
    }
    out
}

/// Class sampling probabilities inside one territory.
fn territory_probs(
    num_regions: usize,
    own_alias: usize,
    own_companion: usize,
    other_alias: usize,
    other_companion: usize,
    p_main: f64,
    companion_split: f64,
) -> Vec<f64> {
    let shared: Vec<usize> = (0..num_regions)
        .filter(|&k| {
            k != own_alias && k != own_companion && k != other_alias && k != other_companion
        })
        .collect();
    let mut p = vec![0.0; num_regions];
    p[own_alias] = p_main;
    if shared.is_empty() {
        p[own_companion] += 1.0 - p_main;
    } else {
        p[own_companion] += (1.0 - p_main) * companion_split;
        let rest = (1.0 - p_main) * (1.0 - companion_split) / shared.len() as f64;
        for k in shared {
            p[k] += rest;
        }
    }
    p
}

fn class_from_uniform(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

/// One iid uniform draw per `block x block` cell, shared by every tile in the
/// block. Region structure needs a minimum patch size for any local-context
/// method to work; per-tile seeds fragment into patches smaller than the
/// 5x5 oracle window.
fn block_uniforms(rows: usize, cols: usize, block: usize, rng: &mut impl Rng) -> Vec<f64> {
    let brows = rows.div_ceil(block);
    let bcols = cols.div_ceil(block);
    let draws: Vec<f64> = (0..brows * bcols).map(|_| rng.random()).collect();
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = draws[(r / block) * bcols + c / block];
        }
    }
    out
}

/// Generate one slide, deterministic in `seed`.
pub fn generate_slide(seed: u64, cfg: &SlideConfig) -> Result<SyntheticSlide> {
    if cfg.rows < 4 || cfg.cols < 4 {
        return Err(Error::Config(format!("grid {}x{} below 4x4", cfg.rows, cfg.cols)));
    }
    if cfg.num_regions < 3 {
        return Err(Error::Config(format!("num_regions {} < 3", cfg.num_regions)));
    }
    let (a, b) = cfg.alias_pair;
    if a == b || a >= cfg.num_regions || b >= cfg.num_regions {
        return Err(Error::Config(format!(
            "alias_pair ({a},{b}) invalid for {} regions",
            cfg.num_regions
        )));
    }
    if !(0.0..1.0).contains(&cfg.background_fraction) {
        return Err(Error::Config(format!(
            "background_fraction {} leaves no tissue",
            cfg.background_fraction
        )));
    }
    if cfg.latent_dim < 2 || cfg.gene_dim < 1 {
        return Err(Error::Config("latent_dim >= 2 and gene_dim >= 1 required".into()));
    }

    let (rows, cols, r_classes) = (cfg.rows, cfg.cols, cfg.num_regions);
    let n = rows * cols;

    // hidden territory field with a per-slide prior
    let mut rng = stream_rng(seed, "territory-prior");
    let prior = 0.25 + 0.5 * rng.random::<f64>();
    let mut rng = stream_rng(seed, "territory");
    let tu = block_uniforms(rows, cols, 4, &mut rng);
    let mut territory: Vec<usize> = tu.iter().map(|&u| usize::from(u < prior)).collect();
    for _ in 0..3 {
        territory = smooth_majority(&territory, rows, cols, 2);
    }

    // territory-conditional class mixes, randomized per slide
    let non_aliased: Vec<usize> = (0..r_classes).filter(|&k| k != a && k != b).collect();
    let comp_a = non_aliased[0];
    let comp_b = non_aliased[1 % non_aliased.len()];
    let mut rng = stream_rng(seed, "mix");
    let p_main_0 = 0.35 + 0.3 * rng.random::<f64>();
    let split_0 = 0.3 + 0.4 * rng.random::<f64>();
    let p_main_1 = 0.35 + 0.3 * rng.random::<f64>();
    let split_1 = 0.3 + 0.4 * rng.random::<f64>();
    let probs = [
        territory_probs(r_classes, a, comp_a, b, comp_b, p_main_0, split_0),
        territory_probs(r_classes, b, comp_b, a, comp_a, p_main_1, split_1),
    ];

    let mut rng = stream_rng(seed, "classes");
    let cu = block_uniforms(rows, cols, 4, &mut rng);
    let mut region_labels: Vec<usize> =
        (0..n).map(|i| class_from_uniform(&probs[territory[i]], cu[i])).collect();
    for _ in 0..3 {
        region_labels = smooth_majority(&region_labels, rows, cols, r_classes);
    }

    // tissue validity
    let mut rng = stream_rng(seed, "validity");
    let mut validity: Vec<bool> =
        (0..n).map(|_| rng.random::<f64>() >= cfg.background_fraction).collect();
    if !validity.iter().any(|&v| v) {
        validity[(rows / 2) * cols + cols / 2] = true;
    }

    // latents: class centers are cohort-wide; the aliased pair shares one
    let l = cfg.latent_dim;
    let mut rng = stream_rng(cfg.cohort_seed, "centers");
    let mut centers = vec![0.0; r_classes * l];
    for v in &mut centers {
        *v = 2.0 * normal(&mut rng);
    }
    for j in 0..l {
        centers[b * l + j] = centers[a * l + j];
    }
    let mut rng = stream_rng(seed, "latents");
    let mut tile_latents = vec![0.0; n * l];
    for i in 0..n {
        let ctr = &centers[region_labels[i] * l..(region_labels[i] + 1) * l];
        for j in 0..l {
            tile_latents[i * l + j] = ctr[j] + 0.5 * normal(&mut rng);
        }
    }

    let tile_labels = region_labels.clone();
    let grid = TileGrid { rows, cols, tile_size: cfg.tile_size, validity };

    // slide label: which aliased class dominates
    let mut count_a = 0usize;
    let mut count_b = 0usize;
    for i in 0..n {
        if grid.validity[i] {
            if region_labels[i] == a {
                count_a += 1;
            } else if region_labels[i] == b {
                count_b += 1;
            }
        }
    }
    let slide_label = usize::from(count_b > count_a);

    let mut slide = SyntheticSlide {
        grid,
        region_labels,
        tile_latents,
        tile_labels,
        slide_label,
        gene_vector: Vec::new(),
        seed,
        config: cfg.clone(),
    };

    // gene vector: fixed cohort map of the composition plus seeded noise
    let comp = slide.composition();
    let g = cfg.gene_dim;
    let mut rng = stream_rng(cfg.cohort_seed, "gene-map");
    let mut gene_map = vec![0.0; g * r_classes];
    for v in &mut gene_map {
        *v = 3.0 * normal(&mut rng);
    }
    let mut rng = stream_rng(seed, "gene-noise");
    let gene_vector = (0..g)
        .map(|i| {
            let signal: f64 =
                (0..r_classes).map(|k| gene_map[i * r_classes + k] * comp[k]).sum();
            signal + 0.05 * normal(&mut rng)
        })
        .collect();
    slide.gene_vector = gene_vector;
    Ok(slide)
}

/// Per-tile regression targets for the spot task: a fixed cohort map of the
/// 5x5 neighborhood region composition plus a weaker latent term and noise.
pub fn spot_targets(slide: &SyntheticSlide, spot_dim: usize) -> Vec<f64> {
    let cfg = &slide.config;
    let (rows, cols, r_classes, l) = (slide.rows(), slide.cols(), cfg.num_regions, cfg.latent_dim);
    let mut rng = stream_rng(cfg.cohort_seed, "spot-map-comp");
    let mut w_comp = vec![0.0; spot_dim * r_classes];
    for v in &mut w_comp {
        *v = 2.0 * normal(&mut rng);
    }
    let mut rng = stream_rng(cfg.cohort_seed, "spot-map-latent");
    let mut w_lat = vec![0.0; spot_dim * l];
    for v in &mut w_lat {
        *v = normal(&mut rng) / (l as f64).sqrt();
    }
    let mut rng = stream_rng(slide.seed, "spot-noise");
    let mut out = vec![0.0; rows * cols * spot_dim];
    for r in 0..rows {
        for c in 0..cols {
            let mut counts = vec![0.0f64; r_classes];
            let mut total = 0.0;
            for dr in -2isize..=2 {
                for dc in -2isize..=2 {
                    let (rr, cc) = (r as isize + dr, c as isize + dc);
                    if rr >= 0 && rr < rows as isize && cc >= 0 && cc < cols as isize {
                        counts[slide.region_labels[(rr * cols as isize + cc) as usize]] += 1.0;
                        total += 1.0;
                    }
                }
            }
            for v in &mut counts {
                *v /= total;
            }
            let lat = slide.latent(r, c);
            let base = (r * cols + c) * spot_dim;
            for i in 0..spot_dim {
                let ctx: f64 = (0..r_classes).map(|k| w_comp[i * r_classes + k] * counts[k]).sum();
                let own: f64 = (0..l).map(|j| w_lat[i * l + j] * lat[j]).sum();
                out[base + i] = ctx + 0.3 * own + 0.02 * normal(&mut rng);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bitwise_identical() {
        let cfg = SlideConfig::default();
        let s1 = generate_slide(42, &cfg).unwrap();
        let s2 = generate_slide(42, &cfg).unwrap();
        assert_eq!(s1, s2);
        let s3 = generate_slide(43, &cfg).unwrap();
        assert_ne!(s1.region_labels, s3.region_labels);
    }

    #[test]
    fn zero_background_means_all_valid() {
        let cfg = SlideConfig { background_fraction: 0.0, ..SlideConfig::default() };
        let s = generate_slide(7, &cfg).unwrap();
        assert!(s.grid.validity.iter().all(|&v| v));
    }

    #[test]
    fn degenerate_configs_rejected() {
        let cfg = SlideConfig { num_regions: 2, ..SlideConfig::default() };
        assert!(matches!(generate_slide(1, &cfg), Err(Error::Config(_))));
        let cfg = SlideConfig { background_fraction: 1.0, ..SlideConfig::default() };
        assert!(matches!(generate_slide(1, &cfg), Err(Error::Config(_))));
        let cfg = SlideConfig { alias_pair: (1, 1), ..SlideConfig::default() };
        assert!(matches!(generate_slide(1, &cfg), Err(Error::Config(_))));
        let cfg = SlideConfig { rows: 3, ..SlideConfig::default() };
        assert!(matches!(generate_slide(1, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn regions_are_spatially_coherent() {
        // at least 60% of 4-neighbor pairs agree
        let cfg = SlideConfig::default();
        for seed in 0..5 {
            let s = generate_slide(seed, &cfg).unwrap();
            let (rows, cols) = (s.rows(), s.cols());
            let mut agree = 0usize;
            let mut total = 0usize;
            for r in 0..rows {
                for c in 0..cols {
                    if c + 1 < cols {
                        total += 1;
                        agree += usize::from(
                            s.region_labels[r * cols + c] == s.region_labels[r * cols + c + 1],
                        );
                    }
                    if r + 1 < rows {
                        total += 1;
                        agree += usize::from(
                            s.region_labels[r * cols + c] == s.region_labels[(r + 1) * cols + c],
                        );
                    }
                }
            }
            let frac = agree as f64 / total as f64;
            assert!(frac >= 0.6, "seed {seed}: coherence {frac}");
        }
    }

    /// Ridge classifier on raw latents: the aliased pair must sit at chance,
    /// non-aliased classes must separate cleanly.
    #[test]
    fn aliased_pair_is_chance_from_latents_alone() {
        let cfg = SlideConfig::default();
        let mut accs_alias = Vec::new();
        let mut accs_other = Vec::new();
        for seed in 0..10 {
            let train: Vec<_> =
                (0..6).map(|i| generate_slide(seed * 100 + i, &cfg).unwrap()).collect();
            let test: Vec<_> =
                (0..3).map(|i| generate_slide(seed * 100 + 50 + i, &cfg).unwrap()).collect();
            let (a, b) = cfg.alias_pair;
            accs_alias.push(linear_two_class_accuracy(&train, &test, a, b));
            let others: Vec<usize> =
                (0..cfg.num_regions).filter(|&k| k != a && k != b).collect();
            accs_other.push(linear_two_class_accuracy(&train, &test, others[0], others[1]));
        }
        let mean_alias = accs_alias.iter().sum::<f64>() / accs_alias.len() as f64;
        let mean_other = accs_other.iter().sum::<f64>() / accs_other.len() as f64;
        assert!(
            (0.45..=0.55).contains(&mean_alias),
            "aliased-pair accuracy {mean_alias} (per-seed {accs_alias:?})"
        );
        assert!(mean_other >= 0.95, "non-aliased accuracy {mean_other}");
    }

    /// Context oracle: the majority region label in a 5x5 window recovers
    /// aliased tile labels almost perfectly.
    #[test]
    fn majority_window_oracle_recovers_aliased_labels() {
        let cfg = SlideConfig::default();
        let mut correct = 0usize;
        let mut total = 0usize;
        for seed in 0..10 {
            let s = generate_slide(1000 + seed, &cfg).unwrap();
            let (a, b) = cfg.alias_pair;
            for r in 0..s.rows() {
                for c in 0..s.cols() {
                    let y = s.label(r, c);
                    if y == a || y == b {
                        total += 1;
                        correct += usize::from(s.majority_label(r, c, 2) == y);
                    }
                }
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc >= 0.95, "oracle accuracy {acc}");
    }

    #[test]
    fn gene_vector_tracks_composition() {
        let cfg = SlideConfig::default();
        let s1 = generate_slide(5, &cfg).unwrap();
        let s2 = generate_slide(5, &cfg).unwrap();
        assert_eq!(s1.gene_vector, s2.gene_vector);
        assert_eq!(s1.gene_vector.len(), cfg.gene_dim);
    }

    // least-squares linear classifier on tile latents for two classes
    fn linear_two_class_accuracy(
        train: &[SyntheticSlide],
        test: &[SyntheticSlide],
        class_a: usize,
        class_b: usize,
    ) -> f64 {
        let l = train[0].config.latent_dim;
        let dim = l + 1;
        let mut xtx = vec![0.0; dim * dim];
        let mut xty = vec![0.0; dim];
        let push = |lat: &[f64], y: f64, xtx: &mut [f64], xty: &mut [f64]| {
            let mut x = lat.to_vec();
            x.push(1.0);
            for i in 0..dim {
                for j in 0..dim {
                    xtx[i * dim + j] += x[i] * x[j];
                }
                xty[i] += x[i] * y;
            }
        };
        for s in train {
            for r in 0..s.rows() {
                for c in 0..s.cols() {
                    let lab = s.label(r, c);
                    if lab == class_a {
                        push(s.latent(r, c), 1.0, &mut xtx, &mut xty);
                    } else if lab == class_b {
                        push(s.latent(r, c), -1.0, &mut xtx, &mut xty);
                    }
                }
            }
        }
        for i in 0..dim {
            xtx[i * dim + i] += 1e-3;
        }
        let w = solve_spd(&xtx, &xty, dim);
        let mut correct = 0usize;
        let mut total = 0usize;
        for s in test {
            for r in 0..s.rows() {
                for c in 0..s.cols() {
                    let lab = s.label(r, c);
                    if lab != class_a && lab != class_b {
                        continue;
                    }
                    let lat = s.latent(r, c);
                    let score: f64 =
                        lat.iter().enumerate().map(|(i, v)| w[i] * v).sum::<f64>() + w[l];
                    let pred = if score >= 0.0 { class_a } else { class_b };
                    total += 1;
                    correct += usize::from(pred == lab);
                }
            }
        }
        correct as f64 / total.max(1) as f64
    }

    // Cholesky solve for small SPD systems
    fn solve_spd(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
        let mut ch = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = a[i * n + j];
                for k in 0..j {
                    s -= ch[i * n + k] * ch[j * n + k];
                }
                if i == j {
                    ch[i * n + i] = s.sqrt();
                } else {
                    ch[i * n + j] = s / ch[j * n + j];
                }
            }
        }
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= ch[i * n + k] * y[k];
            }
            y[i] = s / ch[i * n + i];
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= ch[k * n + i] * x[k];
            }
            x[i] = s / ch[i * n + i];
        }
        x
    }
}
