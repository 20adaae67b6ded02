//! Subcommand bodies. Every command holds the store lock while it writes and
//! leaves a manifest next to its outputs.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use hprobe::ablation::{self, AblationKind, LogitShiftRecord, Population};
use hprobe::dataset::{self, SamplingConfig, ScoredResponse, TraversalExample};
use hprobe::hpak::HpakFile;
use hprobe::linalg::{BasisFile, PcaFile, PcaModel};
use hprobe::oracle::{self, OracleConfig, Sidecar};
use hprobe::probes::{self, ActivationSet, DistanceConfig, Grid, ProbeArtifact, ProbeConfig, Resolved, Split};
use hprobe::store::{self, StoreLock};
use hprobe::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::manifest::Run;
use crate::{
    Command, Common, CreateDatasetArgs, DataArgs, EvalProbeArgs, GridArgs, InterveneArgs, Profile,
    ReportArgs, SimilarityArgs, SynthArgs, TrainArgs,
};

pub const SIDECAR: &str = "oracle-sidecar.json";
pub const SPLIT: &str = "split.json";

pub fn run(store: &Path, cmd: &Command, argv: &[String]) -> Result<()> {
    std::fs::create_dir_all(store).map_err(|e| Error::io(store, e))?;
    let _lock = StoreLock::acquire(store)?;
    match cmd {
        Command::CreateDataset(a) => create_dataset(store, a, argv),
        Command::EvalProbe(a) => eval_probe(store, a, argv),
        Command::Intervene(a) => intervene(store, a, argv),
        Command::Similarity(a) => similarity(store, a, argv),
        Command::Synth(a) => synth(store, a, argv),
        Command::Grid(a) => grid(store, a, argv),
        Command::Report(a) => report(store, a, argv),
    }
}

pub fn run_dir(store: &Path, c: &Common) -> PathBuf {
    store.join(c.setting.dir()).join(&c.tag)
}

pub fn layer_dir(run_dir: &Path, layer: u32) -> PathBuf {
    run_dir.join(layer.to_string())
}

fn default_dataset(store: &Path, setting: crate::Setting) -> PathBuf {
    store.join(setting.dir()).join("dataset.jsonl")
}

fn pair(v: &[u32]) -> (u32, u32) {
    (v[0], v[1])
}

fn create_dataset(store: &Path, a: &CreateDatasetArgs, argv: &[String]) -> Result<()> {
    let mut cfg = SamplingConfig::new(pair(&a.depth_range), pair(&a.steps_range), a.num_samples, a.seed)?;
    if let Some(s) = &a.sparsity_range {
        cfg = cfg.with_sparsity(s[0], s[1])?;
    }
    let examples = dataset::sample_dataset(&cfg)?;
    let out = a.out.clone().unwrap_or_else(|| default_dataset(store, a.setting));
    let mut run = Run::new("create-dataset", argv, a, a.seed);
    dataset::write_dataset(&out, &examples)?;
    run.output(&out);
    let composition: Vec<_> = dataset::composition(&examples)
        .into_iter()
        .map(|((d, s), n)| json!({"depth": d, "steps": s, "count": n}))
        .collect();
    let summary = out.with_extension("composition.json");
    run.write_json(&summary, &composition)?;
    let dir = out.parent().unwrap_or(Path::new("."));
    run.finish(dir)?;
    println!("wrote {} examples to {}", examples.len(), out.display());
    Ok(())
}

/// Inputs shared by the analysis commands.
struct Loaded {
    run_dir: PathBuf,
    dataset: Vec<TraversalExample>,
    dataset_hash: String,
    hpak: HpakFile,
    exact: HashMap<String, bool>,
    layers: Vec<u32>,
    sidecar: Option<Sidecar>,
}

impl Loaded {
    fn open(store: &Path, c: &Common, d: &DataArgs, run: &mut Run) -> Result<Self> {
        let run_dir = run_dir(store, c);
        let ds_path = d.dataset.clone().unwrap_or_else(|| default_dataset(store, c.setting));
        let dataset = dataset::read_dataset(&ds_path)?;
        run.input(&ds_path)?;
        let dataset_hash = store::sha256_hex(&dataset::dataset_bytes(&dataset));
        let acts_path = d.activations.clone().unwrap_or_else(|| run_dir.join("activations.hpak"));
        let hpak = HpakFile::read(&acts_path)?;
        run.input(&acts_path)?;
        let resp_path = d.responses.clone().or_else(|| {
            let p = run_dir.join("responses.jsonl");
            p.exists().then_some(p)
        });
        let mut exact = HashMap::new();
        if let Some(p) = resp_path {
            for r in dataset::read_responses(&p)? {
                exact.insert(r.id, r.exact);
            }
            run.input(&p)?;
        }
        let layers = match &d.layers {
            Some(ls) => ls.clone(),
            None => hpak.header.layers.clone(),
        };
        let sc_path = run_dir.join(SIDECAR);
        let sidecar = if sc_path.exists() {
            run.input(&sc_path)?;
            Some(store::read_json(&sc_path)?)
        } else {
            None
        };
        Ok(Self {
            run_dir,
            dataset,
            dataset_hash,
            hpak,
            exact,
            layers,
            sidecar,
        })
    }

    fn layer(&self, l: u32) -> Result<(ActivationSet, Resolved)> {
        let acts = self.hpak.activation_set(l)?;
        let resolved = Resolved::new(&acts, &self.dataset)?;
        Ok((acts, resolved))
    }

    /// Example split over the examples present in the activations.
    fn split(&self, resolved: &Resolved, ratio: f64, seed: u64) -> Result<Split> {
        let ids: Vec<String> = resolved.groups.iter().map(|g| g.id.clone()).collect();
        probes::split_examples(&ids, ratio, seed)
    }

    fn planted(&self, l: u32) -> Result<Option<hprobe::linalg::Basis>> {
        let Some(sc) = &self.sidecar else { return Ok(None) };
        sc.layers
            .iter()
            .find(|s| s.layer == l)
            .map(|s| s.planted.to_basis())
            .transpose()
    }
}

fn probe_config(pca_dim: usize, t: &TrainArgs, p: usize, seed: u64) -> ProbeConfig {
    ProbeConfig {
        pca_dim,
        distance: DistanceConfig {
            p,
            lr: t.lr,
            weight_decay: t.weight_decay,
            steps: t.steps,
            depth_alpha: t.depth_alpha,
            seed,
            batch_size: t.batch_size,
        },
        lambda: t.lambda,
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalRecord {
    pub layer: u32,
    pub p: usize,
    pub report: probes::EvalReport,
    /// Similarity to the planted subspace on oracle runs.
    pub recovery: Option<f64>,
    pub subspace_rank: usize,
}

fn eval_probe(store: &Path, a: &EvalProbeArgs, argv: &[String]) -> Result<()> {
    let mut run = Run::new("eval-probe", argv, a, a.common.seed);
    let data = Loaded::open(store, &a.common, &a.data, &mut run)?;
    let seed = a.common.seed;
    for &l in &data.layers {
        let (acts, resolved) = data.layer(l)?;
        let split = data.split(&resolved, a.data.train_split, seed)?;
        let dir = layer_dir(&data.run_dir, l);
        run.write_json(&dir.join(SPLIT), &split)?;
        let train_rows = resolved.rows_where(|g| split.is_train(&g.id));
        if train_rows.is_empty() {
            return Err(Error::InvalidInput(format!("layer {l}: no node rows in the train split")));
        }
        let pca = PcaModel::fit(&acts.rows.select_rows(&train_rows), a.data.pca_dim)?;
        run.write_json(&dir.join("pca.json"), &PcaFile::new(&pca, json!({"layer": l})))?;
        let mut records = Vec::new();
        for (n, &p) in a.proj_dims.iter().enumerate() {
            let cfg = probe_config(a.data.pca_dim, &a.train, p, seed);
            let fit = probes::fit_layer_with_pca(&acts, &resolved, &split, pca.clone(), &cfg)?;
            if n == 0 {
                run.write_json(
                    &dir.join("probe-depth.json"),
                    &ProbeArtifact::depth(&fit.depth, &data.dataset_hash, seed),
                )?;
            }
            run.write_json(
                &dir.join(format!("probe-distance-p{p}.json")),
                &ProbeArtifact::distance(&fit.distance, &data.dataset_hash, seed),
            )?;
            let h = fit.subspace()?;
            run.write_json(
                &dir.join(format!("subspace-p{p}.json")),
                &BasisFile::new(&h, json!({"layer": l, "p": p})),
            )?;
            let report = probes::evaluate(&fit, &resolved, &split, &data.exact, seed)?;
            let recovery = data.planted(l)?.map(|u| oracle::recovery_score(&h, &u)).transpose()?;
            let te = report.bucket(probes::Bucket::TestExact);
            println!(
                "layer {l} p={p}: test_exact distance pearson {} depth pearson {}{}",
                fmt_opt(te.distance.map(|m| m.pearson)),
                fmt_opt(te.depth.map(|m| m.pearson)),
                recovery.map(|r| format!(", recovery {r:.3}")).unwrap_or_default()
            );
            records.push(EvalRecord {
                layer: l,
                p,
                report,
                recovery,
                subspace_rank: h.rank(),
            });
        }
        run.write_json(&dir.join("eval.json"), &records)?;
    }
    run.finish(&data.run_dir)?;
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or("n/a".into(), |v| format!("{v:.3}"))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AblationRecord {
    pub layer: u32,
    pub p: usize,
    pub rank: usize,
    pub causal: Option<ablation::CausalReport>,
    /// Similarity of each built basis to the planted subspace.
    pub planted_similarity: Vec<(AblationKind, f64)>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AccuracyEntry {
    pub kind: String,
    pub report: ablation::AccuracyReport,
}

fn intervene(store: &Path, a: &InterveneArgs, argv: &[String]) -> Result<()> {
    let kinds: Vec<AblationKind> = a
        .ablation_kind
        .iter()
        .map(|s| s.parse())
        .collect::<Result<_>>()?;
    let mut run = Run::new("intervene", argv, a, a.common.seed);
    let seed = a.common.seed;
    let rd = run_dir(store, &a.common);

    // Response and logit files can be summarized without activations.
    let population = if a.include_inexact { Population::All } else { Population::ExactOnly };
    if let (Some(before), Some(after)) = (&a.responses_before, &a.responses_after) {
        let b = dataset::read_responses(before)?;
        run.input(before)?;
        let mut entries = Vec::new();
        for spec in after {
            let (kind, path) = spec.split_once('=').ok_or_else(|| {
                Error::InvalidInput(format!("--responses-after expects KIND=PATH, got {spec:?}"))
            })?;
            let kind: AblationKind = kind.parse()?;
            let path = PathBuf::from(path);
            let after: Vec<ScoredResponse> = dataset::read_responses(&path)?;
            run.input(&path)?;
            let report = ablation::accuracy_protocol(&b, &after, population)?;
            println!(
                "{}: exact {:.2}% -> {:.2}%, retention {:.2}%",
                kind,
                100.0 * report.exact_before,
                100.0 * report.exact_after,
                100.0 * report.exact_retention
            );
            entries.push(AccuracyEntry {
                kind: kind.name().into(),
                report,
            });
        }
        let probe = entries.iter().find(|e| e.kind == "probe");
        let random = entries.iter().find(|e| e.kind == "random");
        if let (Some(p), Some(r)) = (probe, random) {
            println!("{}", ablation::retention_comparison(("probe", &p.report), ("random", &r.report)));
        }
        run.write_json(&rd.join("accuracy.json"), &entries)?;
    }
    if let Some(path) = &a.logit_shifts {
        let records: Vec<LogitShiftRecord> = dataset::read_jsonl(path)?;
        run.input(path)?;
        let summary = ablation::logit_protocol(&records)?;
        for (layer, order) in &summary.ranking {
            let names: Vec<&str> = order.iter().map(|k| k.name()).collect();
            println!("layer {layer}: {}", names.join(" > "));
        }
        run.write_json(&rd.join("logit.json"), &summary)?;
    }

    let acts_path = a.data.activations.clone().unwrap_or_else(|| rd.join("activations.hpak"));
    let summarizing_only = a.responses_before.is_some() || a.logit_shifts.is_some();
    if summarizing_only && !acts_path.exists() && a.data.activations.is_none() {
        run.finish(&rd)?;
        return Ok(());
    }

    let data = Loaded::open(store, &a.common, &a.data, &mut run)?;
    let p = a.proj_dim;
    for &l in &data.layers {
        let (acts, resolved) = data.layer(l)?;
        let dir = layer_dir(&data.run_dir, l);
        let missing = |what: &str| {
            Error::InvalidInput(format!(
                "layer {l}: no stored {what}; run eval-probe with --proj-dims {p} first"
            ))
        };
        let need = |name: &str| -> Result<PathBuf> {
            let path = dir.join(name);
            if path.exists() {
                Ok(path)
            } else {
                Err(missing(name))
            }
        };
        let pca_path = need("pca.json")?;
        let dist_path = need(&format!("probe-distance-p{p}.json"))?;
        let depth_path = need("probe-depth.json")?;
        let split_path = need(SPLIT)?;
        for path in [&pca_path, &dist_path, &depth_path, &split_path] {
            run.input(path)?;
        }
        let pca = store::read_json::<PcaFile>(&pca_path)?.to_model()?;
        let dist = store::read_json::<ProbeArtifact>(&dist_path)?.to_distance()?;
        let depth = store::read_json::<ProbeArtifact>(&depth_path)?.to_depth()?;
        let split: Split = store::read_json(&split_path)?;
        let fit = probes::layer_fit_from_parts(&acts, pca, dist, depth)?;
        let bases = ablation::build_bases(&kinds, &acts, &fit, seed)?;
        let planted = data.planted(l)?;
        let mut planted_similarity = Vec::new();
        for (kind, basis) in &bases {
            if kind.rank_matched() {
                run.write_json(
                    &dir.join(format!("basis-{kind}.json")),
                    &BasisFile::new(basis, json!({"layer": l, "kind": kind, "seed": seed})),
                )?;
                if let Some(u) = &planted {
                    planted_similarity.push((*kind, oracle::recovery_score(basis, u)?));
                }
            }
        }
        let causal = if a.no_refit {
            None
        } else {
            let cfg = ProbeConfig {
                pca_dim: fit.pca.k(),
                distance: fit.distance.config.clone(),
                lambda: fit.depth.lambda,
            };
            let report =
                ablation::oracle_causal_check(&acts, &resolved, &split, &fit, &cfg, &data.exact, &kinds, seed)?;
            for (kind, r) in &report.pearson {
                println!("layer {l} {kind}: test_exact distance pearson after ablation {r:.3}");
            }
            Some(report)
        };
        run.write_json(
            &dir.join("ablation.json"),
            &AblationRecord {
                layer: l,
                p,
                rank: fit.subspace()?.rank(),
                causal,
                planted_similarity,
            },
        )?;
    }
    run.finish(&data.run_dir)?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SimilarityRecord {
    pub layer: u32,
    pub p: usize,
    pub k: usize,
    pub report: probes::StabilityReport,
    pub null_b: probes::NullStats,
    pub null_depth: probes::NullStats,
}

fn similarity(store: &Path, a: &SimilarityArgs, argv: &[String]) -> Result<()> {
    let mut run = Run::new("similarity", argv, a, a.common.seed);
    let data = Loaded::open(store, &a.common, &a.data, &mut run)?;
    let seed = a.common.seed;
    let k = a.data.pca_dim;
    for &l in &data.layers {
        let (acts, resolved) = data.layer(l)?;
        let split = data.split(&resolved, a.data.train_split, seed)?;
        let mut records = Vec::new();
        for &p in &a.proj_dims {
            let cfg = probe_config(k, &a.train, p, seed);
            let report = probes::cross_split_stability(&acts, &resolved, &split, a.folds, &cfg, seed)?;
            let (null_b, null_depth) = probes::stability_null(k, p, a.folds, a.null_trials, seed)?;
            println!(
                "layer {l} p={p}: B similarity {:.3} (null {:.3} ± {:.3}), depth cosine {:.3} (null {:.3} ± {:.3})",
                report.mean_b_similarity, null_b.mean, null_b.sd, report.mean_depth_cosine, null_depth.mean, null_depth.sd
            );
            records.push(SimilarityRecord {
                layer: l,
                p,
                k,
                report,
                null_b,
                null_depth,
            });
        }
        run.write_json(&layer_dir(&data.run_dir, l).join("similarity.json"), &records)?;
    }
    run.finish(&data.run_dir)?;
    Ok(())
}

/// Gains that rise to 1 in the middle layers and fall off at both ends.
pub fn default_gains(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.3 + 0.7 * (std::f64::consts::PI * (i + 1) as f64 / (n + 1) as f64).sin())
        .collect()
}

fn synth(store: &Path, a: &SynthArgs, argv: &[String]) -> Result<()> {
    let mut run = Run::new("synth", argv, a, a.common.seed);
    let ds_path = a.dataset.clone().unwrap_or_else(|| default_dataset(store, a.common.setting));
    let examples = dataset::read_dataset(&ds_path)?;
    run.input(&ds_path)?;
    let gains = match &a.layer_gains {
        Some(g) if g.len() != a.layers.len() => {
            return Err(Error::InvalidInput(format!(
                "{} layer gains for {} layers",
                g.len(),
                a.layers.len()
            )))
        }
        Some(g) => g.clone(),
        None => default_gains(a.layers.len()),
    };
    let base = match a.profile {
        Profile::Default => OracleConfig::default(),
        Profile::Sweep => OracleConfig::sweep(),
    };
    let cfg = OracleConfig {
        ambient_dim: a.dim,
        planted_rank: a.rank,
        noise_sigma: a.noise,
        inexact_fraction: a.inexact_fraction,
        layer_gains: gains,
        seed: a.common.seed,
        ..base
    };
    let mut out = oracle::plant(&examples, &cfg)?;
    for (layer, &id) in out.layers.iter_mut().zip(&a.layers) {
        layer.acts.layer = id;
    }
    let rd = run_dir(store, &a.common);
    let sets: Vec<ActivationSet> = out.layers.iter().map(|l| l.acts.clone()).collect();
    let hpak_path = rd.join("activations.hpak");
    HpakFile::from_sets(&a.common.tag, &sets)?.write(&hpak_path)?;
    run.output(&hpak_path);
    let resp_path = rd.join("responses.jsonl");
    dataset::write_responses(&resp_path, &out.responses)?;
    run.output(&resp_path);
    run.write_json(&rd.join(SIDECAR), &Sidecar::new(&cfg, &out))?;
    run.finish(&rd)?;
    println!(
        "wrote {} layers x {} rows x {} dims to {}",
        sets.len(),
        sets[0].len(),
        sets[0].dim(),
        hpak_path.display()
    );
    Ok(())
}

fn grid(store: &Path, a: &GridArgs, argv: &[String]) -> Result<()> {
    let mut run = Run::new("grid", argv, a, a.common.seed);
    let data = Loaded::open(store, &a.common, &a.data, &mut run)?;
    let seed = a.common.seed;
    let g = Grid {
        ps: a.proj_dims.clone(),
        lrs: a.lrs.clone(),
        steps: a.steps.clone(),
    };
    let base = ProbeConfig {
        pca_dim: a.data.pca_dim,
        distance: DistanceConfig {
            weight_decay: a.weight_decay,
            depth_alpha: a.depth_alpha,
            seed,
            ..DistanceConfig::default()
        },
        ..ProbeConfig::default()
    };
    for &l in &data.layers {
        let (acts, resolved) = data.layer(l)?;
        let split = data.split(&resolved, a.data.train_split, seed)?;
        let report = probes::grid_search(&acts, &resolved, &split, &g, &base)?;
        for c in report.best_per_p() {
            println!(
                "layer {l} p={}: best lr {} steps {} test mse {:.4}",
                c.p, c.lr, c.steps, c.test_mse
            );
        }
        run.write_json(&layer_dir(&data.run_dir, l).join("grid.json"), &report)?;
    }
    run.finish(&data.run_dir)?;
    Ok(())
}

fn report(store: &Path, a: &ReportArgs, argv: &[String]) -> Result<()> {
    let mut run = Run::new("report", argv, a, a.common.seed);
    let rd = run_dir(store, &a.common);
    if !rd.is_dir() {
        return Err(Error::InvalidInput(format!("no run directory {}", rd.display())));
    }
    let out = a.out.clone().unwrap_or_else(|| rd.join("report"));
    for path in crate::report::render(&rd, &out)? {
        run.output(&path);
    }
    run.finish(&out)?;
    println!("report written to {}", out.join("report.md").display());
    Ok(())
}
