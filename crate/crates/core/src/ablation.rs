//! Ablation bases, zero-ablation of stored activations, and the accuracy,
//! logit-shift and oracle causal summaries.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::dataset::ScoredResponse;
use crate::error::{Error, Result};
use crate::linalg::{self, Basis, PcaModel, Provenance};
use crate::probes::{self, ActivationSet, Bucket, LayerFit, ProbeConfig, Resolved, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    Probe,
    Random,
    PcaCot,
    PcaNodes,
    Full,
    None,
}

impl AblationKind {
    pub const ALL: [AblationKind; 6] = [
        Self::Probe,
        Self::Random,
        Self::PcaCot,
        Self::PcaNodes,
        Self::Full,
        Self::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Probe => "probe",
            Self::Random => "random",
            Self::PcaCot => "pca_cot",
            Self::PcaNodes => "pca_nodes",
            Self::Full => "full",
            Self::None => "none",
        }
    }

    /// Kinds whose rank must equal the probe subspace rank.
    pub fn rank_matched(self) -> bool {
        matches!(self, Self::Probe | Self::Random | Self::PcaCot | Self::PcaNodes)
    }
}

impl std::str::FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s || k.name().replace('_', "-") == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown ablation kind {s:?}")))
    }
}

impl std::fmt::Display for AblationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub kind: AblationKind,
    pub rank: usize,
    pub layer: u32,
    pub seed: u64,
}

/// Builds the basis for `spec`. `probe` is required for the probe kind.
/// PCA kinds pool all rows at the layer (`pca_cot`) or only PATH node rows
/// (`pca_nodes`).
pub fn build_basis(spec: &AblationSpec, acts: &ActivationSet, probe: Option<&LayerFit>) -> Result<Basis> {
    if spec.layer != acts.layer {
        return Err(Error::InvalidInput(format!(
            "spec is for layer {} but activations are layer {}",
            spec.layer, acts.layer
        )));
    }
    let d = acts.dim();
    let basis = match spec.kind {
        AblationKind::None => return Ok(Basis::none(d)),
        AblationKind::Full => return Ok(Basis::full(d)),
        AblationKind::Probe => probe
            .ok_or_else(|| Error::InvalidInput("probe ablation needs trained probes".into()))?
            .subspace()?,
        AblationKind::Random => probes::random_basis(d, spec.rank, spec.seed)?,
        AblationKind::PcaCot | AblationKind::PcaNodes => {
            let rows: Vec<usize> = if spec.kind == AblationKind::PcaCot {
                if acts.node_rows().len() == acts.len() {
                    return Err(Error::InvalidInput(
                        "pca_cot ablation needs non-node token rows; none were collected".into(),
                    ));
                }
                (0..acts.len()).collect()
            } else {
                acts.node_rows()
            };
            if rows.is_empty() {
                return Err(Error::InvalidInput("no node rows for pca_nodes ablation".into()));
            }
            let pca = PcaModel::fit(&acts.rows.select_rows(&rows), spec.rank)?;
            let prov = if spec.kind == AblationKind::PcaCot {
                Provenance::PcaCot
            } else {
                Provenance::PcaNodes
            };
            Basis::from_orthonormal(pca.components.transpose(), prov)?
        }
    };
    if basis.rank() != spec.rank {
        return Err(Error::RankDeficient {
            needed: spec.rank,
            rank: basis.rank(),
        });
    }
    Ok(basis)
}

/// Builds every requested kind at the probe subspace rank, checking that the
/// rank-matched ones agree.
pub fn build_bases(
    kinds: &[AblationKind],
    acts: &ActivationSet,
    probe: &LayerFit,
    seed: u64,
) -> Result<Vec<(AblationKind, Basis)>> {
    let rank = probe.subspace()?.rank();
    let mut out = Vec::new();
    for &kind in kinds {
        let spec = AblationSpec {
            kind,
            rank: if kind.rank_matched() { rank } else { acts.dim() },
            layer: acts.layer,
            seed,
        };
        out.push((kind, build_basis(&spec, acts, Some(probe))?));
    }
    let ranks: BTreeSet<usize> = out
        .iter()
        .filter(|(k, _)| k.rank_matched())
        .map(|(_, b)| b.rank())
        .collect();
    assert!(ranks.len() <= 1, "rank-matched bases disagree: {ranks:?}");
    Ok(out)
}

pub fn ablate_set(acts: &ActivationSet, basis: &Basis) -> Result<ActivationSet> {
    acts.with_rows(linalg::ablate_rows(&acts.rows, basis)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Population {
    /// Only examples answered exactly before ablation.
    ExactOnly,
    /// All examples; adds the rescue rate on the originally inexact ones.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub n: usize,
    pub exact_before: f64,
    pub exact_after: f64,
    pub partial_before: f64,
    pub partial_after: f64,
    pub exact_delta: f64,
    pub partial_delta: f64,
    pub n_originally_exact: usize,
    pub exact_retention: f64,
    pub n_originally_inexact: usize,
    pub inexact_rescue: Option<f64>,
}

/// Compares responses before and after an intervention. Both files must
/// cover the same ids.
pub fn accuracy_protocol(
    before: &[ScoredResponse],
    after: &[ScoredResponse],
    population: Population,
) -> Result<AccuracyReport> {
    let after_by: HashMap<&str, &ScoredResponse> = after.iter().map(|r| (r.id.as_str(), r)).collect();
    let before_ids: BTreeSet<&str> = before.iter().map(|r| r.id.as_str()).collect();
    let after_ids: BTreeSet<&str> = after_by.keys().copied().collect();
    if before_ids != after_ids || before_ids.len() != before.len() || after_ids.len() != after.len() {
        let missing = before_ids.symmetric_difference(&after_ids).next();
        return Err(Error::DataIntegrity(format!(
            "response ids differ between runs{}",
            missing.map(|m| format!(" (e.g. {m})")).unwrap_or_default()
        )));
    }
    let pop: Vec<(&ScoredResponse, &ScoredResponse)> = before
        .iter()
        .filter(|b| population == Population::All || b.exact)
        .map(|b| (b, after_by[b.id.as_str()]))
        .collect();
    let n = pop.len();
    let frac = |f: &dyn Fn(&(&ScoredResponse, &ScoredResponse)) -> f64| -> f64 {
        if n == 0 {
            0.0
        } else {
            pop.iter().map(f).sum::<f64>() / n as f64
        }
    };
    let exact_before = frac(&|p| p.0.exact as u8 as f64);
    let exact_after = frac(&|p| p.1.exact as u8 as f64);
    let partial_before = frac(&|p| p.0.partial);
    let partial_after = frac(&|p| p.1.partial);
    let orig_exact: Vec<_> = pop.iter().filter(|p| p.0.exact).collect();
    let orig_inexact: Vec<_> = pop.iter().filter(|p| !p.0.exact).collect();
    let rate = |v: &[&(&ScoredResponse, &ScoredResponse)]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().filter(|p| p.1.exact).count() as f64 / v.len() as f64
        }
    };
    Ok(AccuracyReport {
        n,
        exact_before,
        exact_after,
        partial_before,
        partial_after,
        exact_delta: exact_after - exact_before,
        partial_delta: partial_after - partial_before,
        n_originally_exact: orig_exact.len(),
        exact_retention: rate(&orig_exact),
        n_originally_inexact: orig_inexact.len(),
        inexact_rescue: (population == Population::All && !orig_inexact.is_empty())
            .then(|| rate(&orig_inexact)),
    })
}

/// One line of logit-shift input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitShiftRecord {
    pub layer: u32,
    pub kind: AblationKind,
    pub example_id: String,
    pub mean_abs_shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitRow {
    pub layer: u32,
    pub kind: AblationKind,
    pub n: usize,
    pub mean: f64,
    /// 95% normal-approximation interval.
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitSummary {
    pub rows: Vec<LogitRow>,
    /// Kinds per layer, largest mean shift first.
    pub ranking: BTreeMap<u32, Vec<AblationKind>>,
}

pub fn logit_protocol(records: &[LogitShiftRecord]) -> Result<LogitSummary> {
    let mut groups: BTreeMap<(u32, AblationKind), Vec<f64>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        if !r.mean_abs_shift.is_finite() || r.mean_abs_shift < 0.0 {
            return Err(Error::DataIntegrity(format!(
                "record {i}: mean_abs_shift {} is not a finite non-negative value",
                r.mean_abs_shift
            )));
        }
        groups.entry((r.layer, r.kind)).or_default().push(r.mean_abs_shift);
    }
    let mut rows = Vec::new();
    for ((layer, kind), xs) in groups {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let half = if n > 1 {
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
            1.959964 * (var / n as f64).sqrt()
        } else {
            0.0
        };
        rows.push(LogitRow {
            layer,
            kind,
            n,
            mean,
            ci_low: mean - half,
            ci_high: mean + half,
        });
    }
    let mut ranking: BTreeMap<u32, Vec<(f64, AblationKind)>> = BTreeMap::new();
    for r in &rows {
        ranking.entry(r.layer).or_default().push((r.mean, r.kind));
    }
    let ranking = ranking
        .into_iter()
        .map(|(l, mut v)| {
            v.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            (l, v.into_iter().map(|x| x.1).collect())
        })
        .collect();
    Ok(LogitSummary { rows, ranking })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalReport {
    pub rank: usize,
    /// Test-exact distance pearson of probes re-trained after each ablation.
    pub pearson: BTreeMap<AblationKind, f64>,
    pub depth_pearson: BTreeMap<AblationKind, f64>,
}

impl CausalReport {
    /// Pearson drop from the unablated fit.
    pub fn damage(&self, kind: AblationKind) -> Option<f64> {
        Some(self.pearson.get(&AblationKind::None)? - self.pearson.get(&kind)?)
    }
}

/// Ablates the recovered subspace and controls, re-fits fresh probes on each
/// ablated copy with the same configuration, and reports their test
/// pearson.
pub fn oracle_causal_check(
    acts: &ActivationSet,
    resolved: &Resolved,
    split: &Split,
    fit: &LayerFit,
    cfg: &ProbeConfig,
    exact: &HashMap<String, bool>,
    kinds: &[AblationKind],
    seed: u64,
) -> Result<CausalReport> {
    let bases = build_bases(kinds, acts, fit, seed)?;
    let mut pearson = BTreeMap::new();
    let mut depth_pearson = BTreeMap::new();
    for (kind, basis) in &bases {
        if basis.rank() == acts.dim() {
            // Nothing is left to fit.
            pearson.insert(*kind, 0.0);
            depth_pearson.insert(*kind, 0.0);
            continue;
        }
        let ablated = ablate_set(acts, basis)?;
        let refit = probes::fit_layer(&ablated, resolved, split, cfg)?;
        let report = probes::evaluate(&refit, resolved, split, exact, seed)?;
        let b = report.bucket(Bucket::TestExact);
        pearson.insert(*kind, b.distance.map_or(0.0, |m| m.pearson));
        depth_pearson.insert(*kind, b.depth.map_or(0.0, |m| m.pearson));
    }
    Ok(CausalReport {
        rank: fit.subspace()?.rank(),
        pearson,
        depth_pearson,
    })
}

/// "exact retention: probe 51.52% vs. random 72.73%"-style comparison line.
pub fn retention_comparison(a: (&str, &AccuracyReport), b: (&str, &AccuracyReport)) -> String {
    format!(
        "exact retention: {} {:.2}% vs. {} {:.2}%",
        a.0,
        100.0 * a.1.exact_retention,
        b.0,
        100.0 * b.1.exact_retention
    )
}
