//! Distance and depth probes: pair construction, training, evaluation,
//! the hierarchical subspace they span, fold stability, and grid search.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::TraversalExample;
use crate::error::{ensure_dim, Error, Result};
use crate::linalg::{self, Basis, Metrics, PcaModel, Provenance};
use crate::par;
use crate::rng::{self, stream};
use crate::tree::{position_depth, position_distance, Label};

/// Alignment of one activation row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowMeta {
    pub example_id: String,
    /// Index into the PATH output for node rows; token index for other rows.
    pub path_index: u32,
    /// `None` for rows that are not PATH node tokens.
    pub node_label: Option<Label>,
    /// 0 for the first occurrence of the node in the path, 1 for the next...
    pub visitation: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSet {
    pub layer: u32,
    pub rows: DMatrix<f64>,
    pub alignment: Vec<RowMeta>,
}

impl ActivationSet {
    pub fn new(layer: u32, rows: DMatrix<f64>, alignment: Vec<RowMeta>) -> Result<Self> {
        if rows.nrows() != alignment.len() {
            return Err(Error::DataIntegrity(format!(
                "{} rows but {} alignment records",
                rows.nrows(),
                alignment.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for (i, a) in alignment.iter().enumerate() {
            if !seen.insert((&a.example_id, a.path_index, a.node_label.is_some())) {
                return Err(Error::DataIntegrity(format!(
                    "row {i}: duplicate alignment ({}, {})",
                    a.example_id, a.path_index
                )));
            }
        }
        Ok(Self {
            layer,
            rows,
            alignment,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn node_rows(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.alignment[i].node_label.is_some())
            .collect()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            layer: self.layer,
            rows: self.rows.select_rows(idx),
            alignment: idx.iter().map(|&i| self.alignment[i].clone()).collect(),
        }
    }

    /// Same alignment, replaced row matrix.
    pub fn with_rows(&self, rows: DMatrix<f64>) -> Result<Self> {
        ensure_dim(self.len(), rows.nrows())?;
        Ok(Self {
            layer: self.layer,
            rows,
            alignment: self.alignment.clone(),
        })
    }
}

/// Node rows grouped by example, with tree positions resolved.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub groups: Vec<Group>,
    /// Tree position per activation row; `None` for non-node rows.
    pub position: Vec<Option<usize>>,
}

#[derive(Debug, Clone)]
pub struct Group {
    pub id: String,
    /// Index of the example in the dataset slice.
    pub example: usize,
    /// Node rows in activation order.
    pub rows: Vec<usize>,
    /// Retained positions of the example's tree.
    pub tree_positions: Vec<usize>,
}

impl Resolved {
    pub fn new(acts: &ActivationSet, dataset: &[TraversalExample]) -> Result<Self> {
        let by_id: HashMap<&str, usize> = dataset
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id.as_str(), i))
            .collect();
        let mut groups: Vec<Group> = Vec::new();
        let mut group_of: HashMap<&str, usize> = HashMap::new();
        let mut position = vec![None; acts.len()];
        for (i, meta) in acts.alignment.iter().enumerate() {
            let &ex = by_id.get(meta.example_id.as_str()).ok_or_else(|| {
                Error::DataIntegrity(format!(
                    "row {i}: example {} is not in the dataset",
                    meta.example_id
                ))
            })?;
            let Some(label) = meta.node_label else { continue };
            let q = dataset[ex].tree.position_of(label).map_err(|_| {
                Error::DataIntegrity(format!(
                    "row {i}: label {label} is not a node of example {}",
                    meta.example_id
                ))
            })?;
            position[i] = Some(q);
            let g = *group_of.entry(meta.example_id.as_str()).or_insert_with(|| {
                groups.push(Group {
                    id: meta.example_id.clone(),
                    example: ex,
                    rows: Vec::new(),
                    tree_positions: dataset[ex].tree.positions().to_vec(),
                });
                groups.len() - 1
            });
            groups[g].rows.push(i);
        }
        Ok(Self { groups, position })
    }

    pub fn depths(&self) -> Vec<Option<f64>> {
        self.position
            .iter()
            .map(|q| q.map(|q| position_depth(q) as f64))
            .collect()
    }

    pub fn rows_where(&self, keep: impl Fn(&Group) -> bool) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .groups
            .iter()
            .filter(|g| keep(g))
            .flat_map(|g| g.rows.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }
}

/// Example-level train/test assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub ratio: f64,
    pub seed: u64,
    pub train: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl Split {
    pub fn is_train(&self, id: &str) -> bool {
        self.train.contains(id)
    }

    pub fn is_test(&self, id: &str) -> bool {
        self.test.contains(id)
    }
}

/// Shuffles example ids and sends the first `round(ratio · n)` to train.
pub fn split_examples(ids: &[String], ratio: f64, seed: u64) -> Result<Split> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidInput(format!(
            "train split {ratio} must lie strictly between 0 and 1"
        )));
    }
    let mut order: Vec<&String> = ids.iter().collect();
    order.shuffle(&mut rng::child(seed, stream::SPLIT, 0));
    let n_train = (ratio * ids.len() as f64).round() as usize;
    if n_train == 0 || n_train == ids.len() {
        return Err(Error::InvalidInput(format!(
            "train split {ratio} over {} examples leaves one side empty",
            ids.len()
        )));
    }
    Ok(Split {
        ratio,
        seed,
        train: order[..n_train].iter().map(|s| s.to_string()).collect(),
        test: order[n_train..].iter().map(|s| s.to_string()).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pair {
    pub i: usize,
    pub j: usize,
    pub target: f64,
    pub weight: f64,
}

/// All unordered node-row pairs within each selected example. Weights are
/// the inverse frequency of the target distance, rescaled to mean 1, times
/// `1 + depth_alpha · target`.
pub fn make_pairs(
    resolved: &Resolved,
    select: impl Fn(&Group) -> bool,
    depth_alpha: f64,
) -> Vec<Pair> {
    let mut pairs = Vec::new();
    for g in resolved.groups.iter().filter(|g| select(g)) {
        for (a, &i) in g.rows.iter().enumerate() {
            for &j in &g.rows[a + 1..] {
                let (qi, qj) = (resolved.position[i], resolved.position[j]);
                let t = position_distance(qi.expect("node row"), qj.expect("node row"));
                pairs.push(Pair {
                    i,
                    j,
                    target: t as f64,
                    weight: 1.0,
                });
            }
        }
    }
    let mut freq: BTreeMap<u64, usize> = BTreeMap::new();
    for p in &pairs {
        *freq.entry(p.target as u64).or_insert(0) += 1;
    }
    let inv: Vec<f64> = pairs
        .iter()
        .map(|p| 1.0 / freq[&(p.target as u64)] as f64)
        .collect();
    let mean = inv.iter().sum::<f64>() / inv.len().max(1) as f64;
    for (p, w) in pairs.iter_mut().zip(inv) {
        p.weight = w / mean * (1.0 + depth_alpha * p.target);
    }
    pairs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceConfig {
    pub p: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub depth_alpha: f64,
    pub seed: u64,
    /// Full batch when `None`.
    #[serde(default)]
    pub batch_size: Option<usize>,
}

impl Default for DistanceConfig {
    fn default() -> Self {
        Self {
            p: 5,
            lr: 1e-2,
            weight_decay: 1e-4,
            steps: 1500,
            depth_alpha: 1e-2,
            seed: 0,
            batch_size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceProbe {
    /// p×k.
    pub b: DMatrix<f64>,
    pub config: DistanceConfig,
    pub layer: u32,
    /// Weighted MSE at the start of each step.
    pub loss_history: Vec<f64>,
}

impl DistanceProbe {
    pub fn predict(&self, zi: &[f64], zj: &[f64]) -> f64 {
        let (p, k) = self.b.shape();
        let mut s = 0.0;
        for r in 0..p {
            let mut y = 0.0;
            for c in 0..k {
                y += self.b[(r, c)] * (zi[c] - zj[c]);
            }
            s += y * y;
        }
        s.sqrt()
    }
}

const PAIR_CHUNK: usize = 2048;

/// Trains `B` on projected rows `z` (n×k).
pub fn train_distance_probe(
    pairs: &[Pair],
    z: &DMatrix<f64>,
    cfg: &DistanceConfig,
    layer: u32,
) -> Result<DistanceProbe> {
    let mut out = train_distance_probe_checkpointed(pairs, z, cfg, layer, &[cfg.steps])?;
    Ok(out.pop().expect("one checkpoint"))
}

/// Trains once for `cfg.steps` and returns a probe per requested step count,
/// each identical to an independent run stopped at that step.
pub fn train_distance_probe_checkpointed(
    pairs: &[Pair],
    z: &DMatrix<f64>,
    cfg: &DistanceConfig,
    layer: u32,
    checkpoints: &[usize],
) -> Result<Vec<DistanceProbe>> {
    let (p, k) = (cfg.p, z.ncols());
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no training pairs".into()));
    }
    if p == 0 || p >= k {
        return Err(Error::InvalidInput(format!(
            "projection dimension {p} must be positive and below the input dimension {k}"
        )));
    }
    if let Some(&c) = checkpoints.iter().find(|&&c| c > cfg.steps) {
        return Err(Error::InvalidInput(format!(
            "checkpoint {c} beyond {} steps",
            cfg.steps
        )));
    }
    let mut init = rng::child(cfg.seed, stream::PROBE_INIT, 0);
    let scale = 1.0 / (k as f64).sqrt();
    let mut b: Vec<f64> = (0..p * k)
        .map(|_| {
            let g: f64 = StandardNormal.sample(&mut init);
            g * scale
        })
        .collect();

    // Row differences, pair-major.
    let mut diffs = vec![0.0; pairs.len() * k];
    for (n, pr) in pairs.iter().enumerate() {
        for c in 0..k {
            diffs[n * k + c] = z[(pr.i, c)] - z[(pr.j, c)];
        }
    }
    let targets: Vec<f64> = pairs.iter().map(|p| p.target).collect();
    let weights: Vec<f64> = pairs.iter().map(|p| p.weight).collect();

    let mut opt = crate::optim::AdamW::new(p * k, cfg.lr, cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.steps);
    let mut snapshots = Vec::new();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut cursor = pairs.len();
    let mut epoch = 0u64;
    let record = |step: usize, b: &[f64], history: &[f64], snaps: &mut Vec<DistanceProbe>| {
        for _ in checkpoints.iter().filter(|&&c| c == step) {
            snaps.push(DistanceProbe {
                b: DMatrix::from_row_slice(p, k, b),
                config: DistanceConfig {
                    steps: step,
                    ..cfg.clone()
                },
                layer,
                loss_history: history.to_vec(),
            });
        }
    };
    record(0, &b, &history, &mut snapshots);
    for step in 0..cfg.steps {
        let batch: Option<&[usize]> = match cfg.batch_size {
            Some(bs) if bs < pairs.len() => {
                if cursor + bs > order.len() {
                    order.shuffle(&mut rng::child(cfg.seed, stream::MINIBATCH, epoch));
                    epoch += 1;
                    cursor = 0;
                }
                cursor += bs;
                Some(&order[cursor - bs..cursor])
            }
            _ => None,
        };
        let n = batch.map_or(pairs.len(), |b| b.len());
        let (loss, wsum, mut grad) = par::chunked_reduce(
            n,
            PAIR_CHUNK,
            |s, e| {
                let mut g = vec![0.0; p * k];
                let (mut loss, mut wsum) = (0.0, 0.0);
                let mut y = vec![0.0; p];
                for t in s..e {
                    let idx = batch.map_or(t, |b| b[t]);
                    let d = &diffs[idx * k..(idx + 1) * k];
                    for r in 0..p {
                        let row = &b[r * k..(r + 1) * k];
                        y[r] = row.iter().zip(d).map(|(a, b)| a * b).sum();
                    }
                    let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let resid = norm - targets[idx];
                    let w = weights[idx];
                    loss += w * resid * resid;
                    wsum += w;
                    let coef = 2.0 * w * resid / norm.max(1e-12);
                    for r in 0..p {
                        let cr = coef * y[r];
                        for c in 0..k {
                            g[r * k + c] += cr * d[c];
                        }
                    }
                }
                (loss, wsum, g)
            },
            (0.0, 0.0, vec![0.0; p * k]),
            |mut acc, part| {
                acc.0 += part.0;
                acc.1 += part.1;
                acc.2.iter_mut().zip(&part.2).for_each(|(a, b)| *a += b);
                acc
            },
        );
        let loss = loss / wsum;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        history.push(loss);
        grad.iter_mut().for_each(|g| *g /= wsum);
        opt.step(&mut b, &grad);
        record(step + 1, &b, &history, &mut snapshots);
    }
    snapshots.sort_by_key(|s| s.config.steps);
    Ok(snapshots)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthProbe {
    pub w: DVector<f64>,
    pub b: f64,
    pub lambda: f64,
    pub layer: u32,
    /// Training rows had a single distinct depth.
    pub degenerate: bool,
}

impl DepthProbe {
    pub fn predict(&self, z: &[f64]) -> f64 {
        self.w.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + self.b
    }
}

pub const DEFAULT_LAMBDA: f64 = 1e-2;

/// Ridge fit of depth on standardized features with inverse depth-frequency
/// weights; the scaler is folded back into `(w, b)`.
pub fn train_depth_probe(
    z: &DMatrix<f64>,
    depths: &[f64],
    lambda: f64,
    layer: u32,
) -> Result<DepthProbe> {
    let (n, k) = z.shape();
    ensure_dim(n, depths.len())?;
    if n == 0 {
        return Err(Error::InvalidInput("no rows for the depth probe".into()));
    }
    let mut freq: BTreeMap<u64, usize> = BTreeMap::new();
    for d in depths {
        *freq.entry(d.to_bits()).or_insert(0) += 1;
    }
    let weights = DVector::from_iterator(n, depths.iter().map(|d| 1.0 / freq[&d.to_bits()] as f64));
    let mean = z.row_mean();
    let sd = DVector::from_fn(k, |c, _| {
        let m = mean[c];
        let v = z.column(c).iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
        if v > 0.0 {
            v.sqrt()
        } else {
            1.0
        }
    });
    let zs = DMatrix::from_fn(n, k, |i, c| (z[(i, c)] - mean[c]) / sd[c]);
    let y = DVector::from_column_slice(depths);
    let fit = linalg::ridge_solve(&zs, &y, lambda, Some(&weights))?;
    let w = fit.w.component_div(&sd);
    let b = fit.b - w.dot(&mean.transpose());
    Ok(DepthProbe {
        w,
        b,
        lambda,
        layer,
        degenerate: freq.len() < 2,
    })
}

/// Ambient-space span of the distance-probe rows and the depth direction.
pub fn hierarchical_subspace(dp: &DistanceProbe, zp: &DepthProbe, pca: &PcaModel) -> Result<Basis> {
    ensure_dim(pca.k(), dp.b.ncols())?;
    ensure_dim(pca.k(), zp.w.len())?;
    let p = dp.b.nrows();
    let mut stacked = DMatrix::zeros(pca.k(), p + 1);
    for r in 0..p {
        stacked.set_column(r, &dp.b.row(r).transpose());
    }
    stacked.set_column(p, &zp.w);
    let lifted = pca.components.tr_mul(&stacked);
    linalg::orthonormalize(&lifted, Provenance::Probe)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    Train,
    TestExact,
    TestInexact,
    Shuffled,
}

impl Bucket {
    pub const ALL: [Bucket; 4] = [Self::Train, Self::TestExact, Self::TestInexact, Self::Shuffled];

    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::TestExact => "test_exact",
            Self::TestInexact => "test_inexact",
            Self::Shuffled => "shuffled",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub bucket: Bucket,
    pub n_pairs: usize,
    pub n_tokens: usize,
    pub distance: Option<Metrics>,
    pub depth: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub layer: u32,
    pub p: usize,
    pub buckets: Vec<BucketReport>,
}

impl EvalReport {
    pub fn bucket(&self, b: Bucket) -> &BucketReport {
        self.buckets
            .iter()
            .find(|r| r.bucket == b)
            .expect("every bucket is reported")
    }
}

/// Everything fitted for one layer.
#[derive(Debug, Clone)]
pub struct LayerFit {
    pub pca: PcaModel,
    pub distance: DistanceProbe,
    pub depth: DepthProbe,
    /// Projected coordinates of every activation row.
    pub z: DMatrix<f64>,
}

impl LayerFit {
    pub fn subspace(&self) -> Result<Basis> {
        hierarchical_subspace(&self.distance, &self.depth, &self.pca)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub pca_dim: usize,
    pub distance: DistanceConfig,
    pub lambda: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            pca_dim: 10,
            distance: DistanceConfig::default(),
            lambda: DEFAULT_LAMBDA,
        }
    }
}

/// PCA on train node rows, then both probes on the same train examples.
pub fn fit_layer(
    acts: &ActivationSet,
    resolved: &Resolved,
    split: &Split,
    cfg: &ProbeConfig,
) -> Result<LayerFit> {
    let train_rows = resolved.rows_where(|g| split.is_train(&g.id));
    if train_rows.is_empty() {
        return Err(Error::InvalidInput("no node rows in the train split".into()));
    }
    let pca = PcaModel::fit(&acts.rows.select_rows(&train_rows), cfg.pca_dim)?;
    let z = pca.project_rows(&acts.rows)?;
    fit_probes_on(acts.layer, &z, pca, resolved, |g| split.is_train(&g.id), cfg)
}

/// Like [`fit_layer`] with an already fitted PCA.
pub fn fit_layer_with_pca(
    acts: &ActivationSet,
    resolved: &Resolved,
    split: &Split,
    pca: PcaModel,
    cfg: &ProbeConfig,
) -> Result<LayerFit> {
    let z = pca.project_rows(&acts.rows)?;
    fit_probes_on(acts.layer, &z, pca, resolved, |g| split.is_train(&g.id), cfg)
}

/// Reassembles a fit from stored parts.
pub fn layer_fit_from_parts(
    acts: &ActivationSet,
    pca: PcaModel,
    distance: DistanceProbe,
    depth: DepthProbe,
) -> Result<LayerFit> {
    ensure_dim(pca.k(), distance.b.ncols())?;
    ensure_dim(pca.k(), depth.w.len())?;
    let z = pca.project_rows(&acts.rows)?;
    Ok(LayerFit {
        pca,
        distance,
        depth,
        z,
    })
}

fn fit_probes_on(
    layer: u32,
    z: &DMatrix<f64>,
    pca: PcaModel,
    resolved: &Resolved,
    select: impl Fn(&Group) -> bool + Copy,
    cfg: &ProbeConfig,
) -> Result<LayerFit> {
    let pairs = make_pairs(resolved, select, cfg.distance.depth_alpha);
    let distance = train_distance_probe(&pairs, z, &cfg.distance, layer)?;
    let depth = fit_depth_on(layer, z, resolved, select, cfg.lambda)?;
    Ok(LayerFit {
        pca,
        distance,
        depth,
        z: z.clone(),
    })
}

fn fit_depth_on(
    layer: u32,
    z: &DMatrix<f64>,
    resolved: &Resolved,
    select: impl Fn(&Group) -> bool,
    lambda: f64,
) -> Result<DepthProbe> {
    let rows = resolved.rows_where(select);
    let depths: Vec<f64> = rows
        .iter()
        .map(|&i| position_depth(resolved.position[i].expect("node row")) as f64)
        .collect();
    train_depth_probe(&z.select_rows(&rows), &depths, lambda, layer)
}

/// Per-bucket metrics. `exact` maps example ids to whether the response was
/// exactly right; ids missing from it count as exact. The shuffled bucket
/// re-scores the test rows after randomly reassigning nodes to rows and
/// relabeling each tree, keeping the trained probes fixed.
pub fn evaluate(
    fit: &LayerFit,
    resolved: &Resolved,
    split: &Split,
    exact: &HashMap<String, bool>,
    shuffle_seed: u64,
) -> Result<EvalReport> {
    let is_exact = |id: &str| exact.get(id).copied().unwrap_or(true);
    let mut buckets = Vec::new();
    for bucket in [Bucket::Train, Bucket::TestExact, Bucket::TestInexact] {
        let select = |g: &Group| match bucket {
            Bucket::Train => split.is_train(&g.id),
            Bucket::TestExact => split.is_test(&g.id) && is_exact(&g.id),
            Bucket::TestInexact => split.is_test(&g.id) && !is_exact(&g.id),
            Bucket::Shuffled => unreachable!(),
        };
        let pairs = make_pairs(resolved, select, 0.0);
        let rows = resolved.rows_where(select);
        let depths: Vec<f64> = rows
            .iter()
            .map(|&i| position_depth(resolved.position[i].expect("node row")) as f64)
            .collect();
        buckets.push(bucket_report(bucket, fit, &pairs, &rows, &depths)?);
    }

    // Shuffled control on the test examples.
    let mut shuffled_pos: HashMap<usize, usize> = HashMap::new();
    let test_groups: Vec<(usize, &Group)> = resolved
        .groups
        .iter()
        .enumerate()
        .filter(|(_, g)| split.is_test(&g.id))
        .collect();
    for &(gi, g) in &test_groups {
        let mut r = rng::child(shuffle_seed, stream::SHUFFLE, gi as u64);
        let mut attribution = g.rows.clone();
        attribution.shuffle(&mut r);
        let tree_positions = &g.tree_positions;
        let mut image = tree_positions.clone();
        image.shuffle(&mut r);
        let relabel: HashMap<usize, usize> =
            tree_positions.iter().copied().zip(image).collect();
        for (&row, &src) in g.rows.iter().zip(&attribution) {
            let q = resolved.position[src].expect("node row");
            shuffled_pos.insert(row, relabel[&q]);
        }
    }
    let mut pairs = Vec::new();
    let mut rows = Vec::new();
    for &(_, g) in &test_groups {
        for (a, &i) in g.rows.iter().enumerate() {
            rows.push(i);
            for &j in &g.rows[a + 1..] {
                pairs.push(Pair {
                    i,
                    j,
                    target: position_distance(shuffled_pos[&i], shuffled_pos[&j]) as f64,
                    weight: 1.0,
                });
            }
        }
    }
    let depths: Vec<f64> = rows
        .iter()
        .map(|i| position_depth(shuffled_pos[i]) as f64)
        .collect();
    buckets.push(bucket_report(Bucket::Shuffled, fit, &pairs, &rows, &depths)?);
    Ok(EvalReport {
        layer: fit.distance.layer,
        p: fit.distance.b.nrows(),
        buckets,
    })
}

fn bucket_report(
    bucket: Bucket,
    fit: &LayerFit,
    pairs: &[Pair],
    rows: &[usize],
    depths: &[f64],
) -> Result<BucketReport> {
    let z = &fit.z;
    let zrow = |i: usize| -> Vec<f64> { z.row(i).iter().copied().collect() };
    let distance = if pairs.is_empty() {
        None
    } else {
        let pred: Vec<f64> = par::map_slice(pairs, |p| {
            fit.distance.predict(&zrow(p.i), &zrow(p.j))
        });
        let target: Vec<f64> = pairs.iter().map(|p| p.target).collect();
        Some(linalg::metrics(&pred, &target, None)?)
    };
    let depth = if rows.is_empty() {
        None
    } else {
        let pred: Vec<f64> = rows.iter().map(|&i| fit.depth.predict(&zrow(i))).collect();
        Some(linalg::metrics(&pred, depths, None)?)
    };
    Ok(BucketReport {
        bucket,
        n_pairs: pairs.len(),
        n_tokens: rows.len(),
        distance,
        depth,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub folds: usize,
    /// Pairwise similarity of the distance-probe row spans.
    pub b_similarity: Vec<Vec<f64>>,
    /// Pairwise cosine of the depth directions.
    pub depth_cosine: Vec<Vec<f64>>,
    pub mean_b_similarity: f64,
    pub mean_depth_cosine: f64,
}

/// Splits the train examples into `folds` disjoint subsets, fits both probes
/// on each against one PCA fitted on the whole train split, and compares
/// them in PCA coordinates.
pub fn cross_split_stability(
    acts: &ActivationSet,
    resolved: &Resolved,
    split: &Split,
    folds: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<StabilityReport> {
    if folds < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 folds, got {folds}")));
    }
    let mut train_ids: Vec<&String> = resolved
        .groups
        .iter()
        .map(|g| &g.id)
        .filter(|id| split.is_train(id))
        .collect();
    train_ids.shuffle(&mut rng::child(seed, stream::FOLDS, 0));
    let fold_of: HashMap<&str, usize> = train_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i % folds))
        .collect();
    let train_rows = resolved.rows_where(|g| split.is_train(&g.id));
    if train_rows.is_empty() {
        return Err(Error::InvalidInput("no node rows in the train split".into()));
    }
    let pca = PcaModel::fit(&acts.rows.select_rows(&train_rows), cfg.pca_dim)?;
    let z = pca.project_rows(&acts.rows)?;
    let fits = par::try_map_range(folds, |f| {
        let select = |g: &Group| fold_of.get(g.id.as_str()) == Some(&f);
        let pairs = make_pairs(resolved, select, cfg.distance.depth_alpha);
        if pairs.is_empty() {
            return Err(Error::InvalidInput(format!(
                "fold {f} has no within-example pairs"
            )));
        }
        let dp = train_distance_probe(&pairs, &z, &cfg.distance, acts.layer)?;
        let zp = fit_depth_on(acts.layer, &z, resolved, select, cfg.lambda)?;
        let span = linalg::orthonormalize(&dp.b.transpose(), Provenance::Probe)?;
        Ok((span, zp.w))
    })?;
    let mut b_similarity = vec![vec![1.0; folds]; folds];
    let mut depth_cosine = vec![vec![1.0; folds]; folds];
    let (mut sb, mut sd, mut n) = (0.0, 0.0, 0.0);
    for a in 0..folds {
        for b in a + 1..folds {
            let s = linalg::subspace_similarity(&fits[a].0, &fits[b].0)?;
            let c = linalg::cosine(&fits[a].1, &fits[b].1);
            b_similarity[a][b] = s;
            b_similarity[b][a] = s;
            depth_cosine[a][b] = c;
            depth_cosine[b][a] = c;
            sb += s;
            sd += c;
            n += 1.0;
        }
    }
    Ok(StabilityReport {
        folds,
        b_similarity,
        depth_cosine,
        mean_b_similarity: sb / n,
        mean_depth_cosine: sd / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NullStats {
    pub mean: f64,
    pub sd: f64,
    pub trials: usize,
}

impl NullStats {
    fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
        Self {
            mean,
            sd: var.sqrt(),
            trials: xs.len(),
        }
    }
}

fn random_unit(r: &mut rng::Rng, k: usize) -> DVector<f64> {
    let v = DVector::from_fn(k, |_, _| {
        let g: f64 = StandardNormal.sample(r);
        g
    });
    let n = v.norm();
    v / n
}

/// Monte Carlo null for [`StabilityReport`]: the mean pairwise statistics of
/// `folds` independent uniformly random `p`-planes and directions in `R^k`.
/// Returns `(b_similarity, depth_cosine)` statistics.
pub fn stability_null(
    k: usize,
    p: usize,
    folds: usize,
    trials: usize,
    seed: u64,
) -> Result<(NullStats, NullStats)> {
    if p == 0 || p > k || folds < 2 || trials < 2 {
        return Err(Error::InvalidInput("degenerate null configuration".into()));
    }
    let samples = par::try_map_range(trials, |t| {
        let mut r = rng::child(seed, stream::NULL_MODEL, t as u64);
        let mut spans = Vec::with_capacity(folds);
        let mut dirs = Vec::with_capacity(folds);
        for _ in 0..folds {
            let g = DMatrix::from_fn(k, p, |_, _| {
                let g: f64 = StandardNormal.sample(&mut r);
                g
            });
            spans.push(linalg::orthonormalize(&g, Provenance::Random)?);
            dirs.push(random_unit(&mut r, k));
        }
        let (mut sb, mut sd, mut n) = (0.0, 0.0, 0.0);
        for a in 0..folds {
            for b in a + 1..folds {
                sb += linalg::subspace_similarity(&spans[a], &spans[b])?;
                sd += dirs[a].dot(&dirs[b]);
                n += 1.0;
            }
        }
        Ok((sb / n, sd / n))
    })?;
    let b: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let d: Vec<f64> = samples.iter().map(|s| s.1).collect();
    Ok((NullStats::from_samples(&b), NullStats::from_samples(&d)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub ps: Vec<usize>,
    pub lrs: Vec<f64>,
    pub steps: Vec<usize>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            ps: vec![2, 3, 4, 5],
            lrs: vec![1e-3, 5e-3, 1e-2],
            steps: vec![500, 1000, 1500],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub p: usize,
    pub lr: f64,
    pub steps: usize,
    pub train_mse: f64,
    pub test_mse: f64,
    pub test_pearson: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub layer: u32,
    pub cells: Vec<GridCell>,
}

impl GridReport {
    /// Lowest test MSE for each `p`, in ascending `p`.
    pub fn best_per_p(&self) -> Vec<&GridCell> {
        let ps: BTreeSet<usize> = self.cells.iter().map(|c| c.p).collect();
        ps.into_iter()
            .filter_map(|p| {
                self.cells
                    .iter()
                    .filter(|c| c.p == p)
                    .min_by(|a, b| a.test_mse.total_cmp(&b.test_mse))
            })
            .collect()
    }

    pub fn best(&self) -> Option<&GridCell> {
        self.cells.iter().min_by(|a, b| a.test_mse.total_cmp(&b.test_mse))
    }
}

/// Trains every `(p, lr)` combination once to the largest step count and
/// scores the checkpoints at each requested step count.
pub fn grid_search(
    acts: &ActivationSet,
    resolved: &Resolved,
    split: &Split,
    grid: &Grid,
    base: &ProbeConfig,
) -> Result<GridReport> {
    if grid.ps.is_empty() || grid.lrs.is_empty() || grid.steps.is_empty() {
        return Err(Error::InvalidInput("empty grid".into()));
    }
    let train_rows = resolved.rows_where(|g| split.is_train(&g.id));
    let pca = PcaModel::fit(&acts.rows.select_rows(&train_rows), base.pca_dim)?;
    let z = pca.project_rows(&acts.rows)?;
    let train_pairs = make_pairs(resolved, |g| split.is_train(&g.id), base.distance.depth_alpha);
    let test_pairs = make_pairs(resolved, |g| split.is_test(&g.id), 0.0);
    let max_steps = *grid.steps.iter().max().expect("non-empty");
    let combos: Vec<(usize, f64)> = grid
        .ps
        .iter()
        .flat_map(|&p| grid.lrs.iter().map(move |&lr| (p, lr)))
        .collect();
    let per_combo = par::try_map_range(combos.len(), |c| {
        let (p, lr) = combos[c];
        let cfg = DistanceConfig {
            p,
            lr,
            steps: max_steps,
            ..base.distance.clone()
        };
        let probes = train_distance_probe_checkpointed(&train_pairs, &z, &cfg, acts.layer, &grid.steps)?;
        probes
            .iter()
            .map(|probe| {
                let score = |pairs: &[Pair]| -> Result<Metrics> {
                    let pred: Vec<f64> = pairs
                        .iter()
                        .map(|pr| {
                            let zi: Vec<f64> = z.row(pr.i).iter().copied().collect();
                            let zj: Vec<f64> = z.row(pr.j).iter().copied().collect();
                            probe.predict(&zi, &zj)
                        })
                        .collect();
                    let t: Vec<f64> = pairs.iter().map(|p| p.target).collect();
                    linalg::metrics(&pred, &t, None)
                };
                let train = score(&train_pairs)?;
                let test = score(&test_pairs)?;
                Ok(GridCell {
                    p,
                    lr,
                    steps: probe.config.steps,
                    train_mse: train.mse,
                    test_mse: test.mse,
                    test_pearson: test.pearson,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(GridReport {
        layer: acts.layer,
        cells: per_combo.into_iter().flatten().collect(),
    })
}

/// Draws a random `r`-dimensional orthonormal basis in `R^dim`.
pub fn random_basis(dim: usize, r: usize, seed: u64) -> Result<Basis> {
    let mut g = rng::child(seed, stream::RANDOM_BASIS, 0);
    let m = DMatrix::from_fn(dim, r, |_, _| {
        let v: f64 = StandardNormal.sample(&mut g);
        v
    });
    linalg::orthonormalize(&m, Provenance::Random)
}

/// On-disk form of a trained probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeArtifact {
    /// "distance" or "depth".
    pub kind: String,
    pub layer: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub p: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lambda: Option<f64>,
    /// `B` (p×k) or `w` (1×k).
    pub matrix: linalg::StoredMatrix,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bias: Option<f64>,
    pub train_config: serde_json::Value,
    pub dataset_hash: String,
    pub split_seed: u64,
}

impl ProbeArtifact {
    pub fn distance(p: &DistanceProbe, dataset_hash: &str, split_seed: u64) -> Self {
        Self {
            kind: "distance".into(),
            layer: p.layer,
            p: Some(p.b.nrows()),
            lambda: None,
            matrix: linalg::StoredMatrix::from(&p.b),
            bias: None,
            train_config: serde_json::json!({
                "config": p.config,
                "final_loss": p.loss_history.last(),
            }),
            dataset_hash: dataset_hash.into(),
            split_seed,
        }
    }

    pub fn depth(p: &DepthProbe, dataset_hash: &str, split_seed: u64) -> Self {
        Self {
            kind: "depth".into(),
            layer: p.layer,
            p: None,
            lambda: Some(p.lambda),
            matrix: linalg::StoredMatrix::from_vector(&p.w),
            bias: Some(p.b),
            train_config: serde_json::json!({ "lambda": p.lambda, "degenerate": p.degenerate }),
            dataset_hash: dataset_hash.into(),
            split_seed,
        }
    }

    pub fn to_distance(&self) -> Result<DistanceProbe> {
        if self.kind != "distance" {
            return Err(Error::DataIntegrity(format!("artifact is a {} probe", self.kind)));
        }
        let config = serde_json::from_value(self.train_config["config"].clone())
            .map_err(|e| Error::json("distance probe config", e))?;
        Ok(DistanceProbe {
            b: self.matrix.to_matrix()?,
            config,
            layer: self.layer,
            loss_history: Vec::new(),
        })
    }

    pub fn to_depth(&self) -> Result<DepthProbe> {
        if self.kind != "depth" {
            return Err(Error::DataIntegrity(format!("artifact is a {} probe", self.kind)));
        }
        Ok(DepthProbe {
            w: self.matrix.to_vector()?,
            b: self.bias.unwrap_or(0.0),
            lambda: self.lambda.unwrap_or(DEFAULT_LAMBDA),
            layer: self.layer,
            degenerate: self.train_config["degenerate"].as_bool().unwrap_or(false),
        })
    }
}
