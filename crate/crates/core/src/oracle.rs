//! Synthetic activations with a planted hierarchical subspace.
//!
//! Each node row carries its tree's classical MDS coordinates, rotated by a
//! random per-example orthogonal map, together with its depth, written into
//! a random orthonormal `D×r` basis `U`. Low-rank distractors, optional
//! non-causal echo copies of the coordinates, context-only rows and
//! isotropic noise make the recovery problem non-trivial.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{ScoredResponse, TraversalExample};
use crate::error::{ensure_dim, Error, Result};
use crate::linalg::{self, Basis, BasisFile, Provenance, StoredMatrix};
use crate::par;
use crate::probes::{ActivationSet, RowMeta};
use crate::rng::{self, stream};
use crate::tree::{position_depth, position_distance, Label};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub ambient_dim: usize,
    pub planted_rank: usize,
    pub noise_sigma: f64,
    pub distractor_rank: usize,
    pub distractor_scale: f64,
    /// Per-row Gaussian jitter on the planted MDS coordinates.
    pub causal_noise: f64,
    /// Blocks of `r − 1` directions carrying noisy copies of the MDS
    /// coordinates outside `U`.
    pub echo_blocks: usize,
    pub echo_amplitude: f64,
    /// Amplitude of block `j` is `echo_amplitude · echo_decay^j`.
    pub echo_decay: f64,
    pub echo_noise: f64,
    /// Fraction of examples answered incorrectly (final node dropped).
    pub inexact_fraction: f64,
    /// Planted-signal gain on rows of incorrectly answered examples.
    pub inexact_gain: f64,
    /// Non-node context rows per example.
    pub cot_rows: usize,
    pub cot_rank: usize,
    pub cot_scale: f64,
    /// One layer per entry, scaling the planted signal.
    pub layer_gains: Vec<f64>,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            ambient_dim: 1024,
            planted_rank: 6,
            noise_sigma: 0.1,
            distractor_rank: 4,
            distractor_scale: 1.5,
            causal_noise: 0.0,
            echo_blocks: 0,
            echo_amplitude: 0.6,
            echo_decay: 0.75,
            echo_noise: 0.7,
            inexact_fraction: 0.2,
            inexact_gain: 0.5,
            cot_rows: 4,
            cot_rank: 3,
            cot_scale: 2.0,
            layer_gains: vec![1.0],
            seed: 0,
        }
    }
}

impl OracleConfig {
    /// The harder configuration used for component sweeps: jittered planted
    /// coordinates plus eight decaying echo blocks.
    pub fn sweep() -> Self {
        Self {
            causal_noise: 0.7,
            echo_blocks: 8,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let r = self.planted_rank;
        if r < 2 {
            return Err(Error::InvalidInput(format!(
                "planted rank {r} leaves no room for MDS coordinates"
            )));
        }
        let used = r + self.distractor_rank + self.cot_rank + self.echo_blocks * (r - 1);
        if used > self.ambient_dim {
            return Err(Error::InvalidInput(format!(
                "{used} structured directions do not fit in dimension {}",
                self.ambient_dim
            )));
        }
        if !(self.noise_sigma >= 0.0) || !(0.0..=1.0).contains(&self.inexact_fraction) {
            return Err(Error::InvalidInput("invalid noise or inexact fraction".into()));
        }
        if self.layer_gains.is_empty() {
            return Err(Error::InvalidInput("at least one layer is required".into()));
        }
        Ok(())
    }
}

/// Classical MDS of the tree metric on `positions` into `dim` coordinates.
/// Directions with non-positive eigenvalues are left at zero.
pub fn mds(positions: &[usize], dim: usize) -> DMatrix<f64> {
    let n = positions.len();
    let d2 = DMatrix::from_fn(n, n, |i, j| {
        let d = position_distance(positions[i], positions[j]) as f64;
        d * d
    });
    let row_mean = DVector::from_fn(n, |i, _| d2.row(i).mean());
    let total = d2.mean();
    let g = DMatrix::from_fn(n, n, |i, j| -0.5 * (d2[(i, j)] - row_mean[i] - row_mean[j] + total));
    let eig = SymmetricEigen::new(g);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut x = DMatrix::zeros(n, dim);
    for (c, &e) in order.iter().take(dim).enumerate() {
        let lam = eig.eigenvalues[e];
        if lam > 1e-9 {
            x.set_column(c, &(eig.eigenvectors.column(e) * lam.sqrt()));
        }
    }
    x
}

/// Normalized stress `sqrt(Σ (d − ‖xᵢ − xⱼ‖)² / Σ d²)` over pairs.
pub fn mds_stress(positions: &[usize], coords: &DMatrix<f64>) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..positions.len() {
        for j in i + 1..positions.len() {
            let d = position_distance(positions[i], positions[j]) as f64;
            let e = (coords.row(i) - coords.row(j)).norm();
            num += (d - e) * (d - e);
            den += d * d;
        }
    }
    (num / den).sqrt()
}

pub struct OracleLayer {
    pub acts: ActivationSet,
    /// `U`, the planted `D×r` basis.
    pub planted: Basis,
    /// Noise-free planted coordinates per row (zeros for context rows).
    pub coords: DMatrix<f64>,
}

pub struct OracleOutput {
    pub layers: Vec<OracleLayer>,
    /// One simulated response per example, scored against the truth.
    pub responses: Vec<ScoredResponse>,
}

fn random_orthogonal(r: &mut rng::Rng, n: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| {
        let v: f64 = StandardNormal.sample(r);
        v
    });
    g.qr().q()
}

struct RowPlan {
    meta: RowMeta,
    /// Planted coordinates for node rows.
    coords: Option<DVector<f64>>,
    gain: f64,
}

pub fn plant(dataset: &[TraversalExample], cfg: &OracleConfig) -> Result<OracleOutput> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let r = cfg.planted_rank;
    let n_inexact = (cfg.inexact_fraction * dataset.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng::child(cfg.seed, stream::ORACLE_RESPONSE, 0));
    let mut inexact = vec![false; dataset.len()];
    for &i in &order[..n_inexact] {
        inexact[i] = true;
    }

    // Response paths and per-example row plans are shared across layers.
    let plans: Vec<(ScoredResponse, Vec<RowPlan>)> = par::map_range(dataset.len(), |e| {
        let ex = &dataset[e];
        let mut path: Vec<Label> = ex.truth.nodes().to_vec();
        if inexact[e] {
            path.pop();
        }
        let text = format!(
            "Tracing the tree from node {}.\nPATH: {}",
            ex.anchors[0],
            path.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(" ")
        );
        let response = ScoredResponse::from_raw(ex, text);
        let positions = ex.tree.positions();
        let base = mds(positions, r - 1);
        let rot = random_orthogonal(&mut rng::child(cfg.seed, stream::ORACLE_ROW, e as u64), r - 1);
        let gain = if inexact[e] { cfg.inexact_gain } else { 1.0 };
        let mut rows = Vec::new();
        let mut visits: std::collections::HashMap<Label, u32> = Default::default();
        for (k, &label) in path.iter().enumerate() {
            let q = ex.tree.position_of(label).expect("truth labels are in the tree");
            let idx = positions.binary_search(&q).expect("retained");
            let mut c = DVector::zeros(r);
            c.rows_mut(0, r - 1).copy_from(&(&rot * base.row(idx).transpose()));
            c[r - 1] = position_depth(q) as f64;
            let v = visits.entry(label).or_insert(0);
            rows.push(RowPlan {
                meta: RowMeta {
                    example_id: ex.id.clone(),
                    path_index: k as u32,
                    node_label: Some(label),
                    visitation: *v,
                },
                coords: Some(c),
                gain,
            });
            *v += 1;
        }
        for t in 0..cfg.cot_rows {
            rows.push(RowPlan {
                meta: RowMeta {
                    example_id: ex.id.clone(),
                    path_index: t as u32,
                    node_label: None,
                    visitation: 0,
                },
                coords: None,
                gain,
            });
        }
        (response, rows)
    });

    let n_rows: usize = plans.iter().map(|p| p.1.len()).sum();
    let alignment: Vec<RowMeta> = plans
        .iter()
        .flat_map(|p| p.1.iter().map(|r| r.meta.clone()))
        .collect();
    let mut coords = DMatrix::zeros(n_rows, r);
    {
        let mut i = 0;
        for p in &plans {
            for row in &p.1 {
                if let Some(c) = &row.coords {
                    coords.set_row(i, &c.transpose());
                }
                i += 1;
            }
        }
    }
    let offsets: Vec<usize> = plans
        .iter()
        .scan(0, |acc, p| {
            let o = *acc;
            *acc += p.1.len();
            Some(o)
        })
        .collect();

    let d = cfg.ambient_dim;
    let echo_dims = cfg.echo_blocks * (r - 1);
    let n_dirs = r + cfg.distractor_rank + cfg.cot_rank + echo_dims;
    let mut layers = Vec::with_capacity(cfg.layer_gains.len());
    for (l, &layer_gain) in cfg.layer_gains.iter().enumerate() {
        let mut g = rng::child(cfg.seed, stream::ORACLE_BASIS, l as u64);
        let gauss = DMatrix::from_fn(d, n_dirs, |_, _| {
            let v: f64 = StandardNormal.sample(&mut g);
            v
        });
        let q = gauss.qr().q();
        let u = q.columns(0, r).into_owned();
        let dist = q.columns(r, cfg.distractor_rank).into_owned();
        let cot = q.columns(r + cfg.distractor_rank, cfg.cot_rank).into_owned();
        let echo = q.columns(r + cfg.distractor_rank + cfg.cot_rank, echo_dims).into_owned();
        let amps: Vec<f64> = (0..echo_dims)
            .map(|c| cfg.echo_amplitude * cfg.echo_decay.powi((c / (r - 1)) as i32))
            .collect();

        let blocks: Vec<DMatrix<f64>> = par::map_range(plans.len(), |e| {
            let rows = &plans[e].1;
            let mut rg = rng::child(
                rng::derive_seed(cfg.seed, stream::ORACLE_ROW, l as u64),
                stream::ORACLE_ROW,
                e as u64,
            );
            let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).expect("finite sigma");
            let mut out = DMatrix::zeros(rows.len(), d);
            for (i, row) in rows.iter().enumerate() {
                let mut x = DVector::<f64>::zeros(d);
                match &row.coords {
                    Some(c) => {
                        let mut cp = c.clone();
                        if cfg.causal_noise > 0.0 {
                            for k in 0..r - 1 {
                                let z: f64 = StandardNormal.sample(&mut rg);
                                cp[k] += cfg.causal_noise * z;
                            }
                        }
                        x += &u * (cp * (row.gain * layer_gain));
                        if echo_dims > 0 {
                            let ec = DVector::from_fn(echo_dims, |k, _| {
                                let z: f64 = StandardNormal.sample(&mut rg);
                                amps[k] * (c[k % (r - 1)] + cfg.echo_noise * z)
                            });
                            x += &echo * ec;
                        }
                    }
                    None => {
                        let z = DVector::from_fn(cfg.cot_rank, |_, _| {
                            let v: f64 = StandardNormal.sample(&mut rg);
                            v * cfg.cot_scale
                        });
                        x += &cot * z;
                    }
                }
                if cfg.distractor_rank > 0 {
                    let z = DVector::from_fn(cfg.distractor_rank, |_, _| {
                        let v: f64 = StandardNormal.sample(&mut rg);
                        v * cfg.distractor_scale
                    });
                    x += &dist * z;
                }
                if cfg.noise_sigma > 0.0 {
                    for v in x.iter_mut() {
                        *v += noise.sample(&mut rg);
                    }
                }
                out.set_row(i, &x.transpose());
            }
            out
        });
        let mut rows = DMatrix::zeros(n_rows, d);
        for (e, b) in blocks.iter().enumerate() {
            rows.rows_mut(offsets[e], b.nrows()).copy_from(b);
        }
        layers.push(OracleLayer {
            acts: ActivationSet::new(l as u32, rows, alignment.clone())?,
            planted: Basis::from_orthonormal(u, Provenance::Planted)?,
            coords: coords.clone(),
        });
    }
    Ok(OracleOutput {
        layers,
        responses: plans.into_iter().map(|p| p.0).collect(),
    })
}

pub fn recovery_score(found: &Basis, planted: &Basis) -> Result<f64> {
    linalg::subspace_similarity(found, planted)
}

/// Share of the planted readout energy `Σ‖Uᵀ x̃‖²` on `rows` (centered at
/// `mean`) that lies inside `h`, i.e. what ablating `h` removes from it.
pub fn readout_selectivity(
    rows: &DMatrix<f64>,
    mean: &DVector<f64>,
    planted: &Basis,
    h: &Basis,
) -> Result<f64> {
    ensure_dim(planted.dim(), rows.ncols())?;
    ensure_dim(h.dim(), rows.ncols())?;
    ensure_dim(mean.len(), rows.ncols())?;
    let mut centered = rows.clone();
    for mut r in centered.row_iter_mut() {
        r -= mean.transpose();
    }
    let u = planted.matrix();
    let readout = &centered * u;
    let inside = (&centered * h.matrix()) * h.matrix().tr_mul(u);
    let total = readout.norm_squared();
    if total == 0.0 {
        return Err(Error::Numerical("planted readout has zero energy".into()));
    }
    Ok(inside.norm_squared() / total)
}

/// Test fixture written next to oracle activations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sidecar {
    pub config: OracleConfig,
    pub layers: Vec<SidecarLayer>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SidecarLayer {
    pub layer: u32,
    pub planted: BasisFile,
    pub coords: StoredMatrix,
}

impl Sidecar {
    pub fn new(cfg: &OracleConfig, out: &OracleOutput) -> Self {
        Self {
            config: cfg.clone(),
            layers: out
                .layers
                .iter()
                .map(|l| SidecarLayer {
                    layer: l.acts.layer,
                    planted: BasisFile::new(&l.planted, serde_json::Value::Null),
                    coords: StoredMatrix::from(&l.coords),
                })
                .collect(),
        }
    }
}
