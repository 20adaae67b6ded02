//! Traversal examples: sampling, prompt rendering, response parsing and
//! scoring, plus the line-delimited JSON dataset and response files.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path as FsPath;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::par;
use crate::rng;
use crate::tree::{full_size, Label, LabeledTree, Path};

#[derive(Debug, Clone, PartialEq)]
pub struct TraversalExample {
    pub id: String,
    pub tree: LabeledTree,
    pub anchors: Vec<Label>,
    pub steps: u32,
    pub truth: Path,
    pub sparsity: Option<f64>,
    pub seed: u64,
}

impl TraversalExample {
    /// Concatenates per-step shortest paths, dropping duplicated boundary
    /// nodes.
    pub fn traverse(tree: &LabeledTree, anchors: &[Label]) -> Result<Path> {
        if anchors.len() < 2 {
            return Err(Error::InvalidInput("need at least two anchors".into()));
        }
        let mut nodes = vec![anchors[0]];
        for w in anchors.windows(2) {
            if w[0] == w[1] {
                return Err(Error::InvalidInput(format!("consecutive anchors repeat {}", w[0])));
            }
            let leg = tree.shortest_path(w[0], w[1])?;
            nodes.extend_from_slice(&leg.nodes()[1..]);
        }
        Ok(Path(nodes))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Range<T> {
    pub lo: T,
    pub hi: T,
}

impl<T: PartialOrd + Copy + std::fmt::Display> Range<T> {
    pub fn new(lo: T, hi: T) -> Result<Self> {
        if lo > hi {
            return Err(Error::InvalidInput(format!("range {lo}..{hi} is empty")));
        }
        Ok(Self { lo, hi })
    }
}

#[derive(Debug, Clone)]
pub struct SamplingConfig {
    pub depth: Range<u32>,
    pub steps: Range<u32>,
    pub n: usize,
    pub sparsity: Option<Range<f64>>,
    pub seed: u64,
}

impl SamplingConfig {
    pub fn new(depth: (u32, u32), steps: (u32, u32), n: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            depth: Range::new(depth.0, depth.1)?,
            steps: Range::new(steps.0, steps.1)?,
            n,
            sparsity: None,
            seed,
        })
    }

    pub fn with_sparsity(mut self, lo: f64, hi: f64) -> Result<Self> {
        if !(0.5..=1.0).contains(&lo) || !(0.5..=1.0).contains(&hi) || lo > hi {
            return Err(Error::InvalidInput(format!(
                "sparsity range [{lo}, {hi}] must lie within [0.5, 1.0]"
            )));
        }
        self.sparsity = Some(Range { lo, hi });
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        if self.depth.lo == 0 {
            return Err(Error::InvalidInput(
                "depth 0 trees have a single node; distinct anchors are impossible".into(),
            ));
        }
        if self.depth.hi > 10 {
            return Err(Error::InvalidInput(format!(
                "depth {} exceeds the supported maximum of 10",
                self.depth.hi
            )));
        }
        if self.steps.lo == 0 {
            return Err(Error::InvalidInput("steps must be at least 1".into()));
        }
        let n_steps = (self.steps.hi - self.steps.lo + 1) as usize;
        if self.n == 0 || self.n % n_steps != 0 {
            return Err(Error::InvalidInput(format!(
                "num-samples {} must be a positive multiple of the {n_steps} step counts",
                self.n
            )));
        }
        Ok(())
    }
}

/// Draws `n` examples with exactly `n / |steps|` examples per step count.
///
/// For a given step count `s`, depth `d` is drawn with probability
/// proportional to `N_d * (N_d - 1)^s`, the number of anchor tuples without
/// consecutive repeats on the full tree of that depth, so every tuple across
/// depths is equally likely. Each example gets a fresh label permutation
/// (and, when a sparsity range is given, a fresh sparsified shape) from its
/// own derived seed.
pub fn sample_dataset(cfg: &SamplingConfig) -> Result<Vec<TraversalExample>> {
    cfg.validate()?;
    let step_values: Vec<u32> = (cfg.steps.lo..=cfg.steps.hi).collect();
    let depths: Vec<u32> = (cfg.depth.lo..=cfg.depth.hi).collect();
    let weights: Vec<Vec<f64>> = step_values
        .iter()
        .map(|&s| {
            depths
                .iter()
                .map(|&d| {
                    let n = full_size(d) as f64;
                    n * (n - 1.0).powi(s as i32)
                })
                .collect()
        })
        .collect();
    let width = cfg.n.to_string().len().max(5);
    par::try_map_range(cfg.n, |i| {
        let s_idx = i % step_values.len();
        let steps = step_values[s_idx];
        let seed = rng::derive_seed(cfg.seed, rng::stream::EXAMPLE, i as u64);
        let mut r = rng::seeded(seed);
        let depth = depths[pick_weighted(&mut r, &weights[s_idx])];
        let mut tree = LabeledTree::full(depth)?;
        let mut sparsity = None;
        if let Some(range) = cfg.sparsity {
            let sp = if range.hi > range.lo {
                r.random_range(range.lo..=range.hi)
            } else {
                range.lo
            };
            tree = tree.sparsify(sp, seed)?;
            sparsity = Some(sp);
        }
        let tree = tree.permute_labels(seed);
        let labels = tree.labels();
        let mut anchors = vec![labels[r.random_range(0..labels.len())]];
        while anchors.len() < steps as usize + 1 {
            let prev = *anchors.last().expect("non-empty");
            // Uniform over the other labels.
            let mut pick = labels[r.random_range(0..labels.len() - 1)];
            if pick >= prev {
                pick = labels[labels.iter().position(|&l| l == pick).expect("present") + 1];
            }
            anchors.push(pick);
        }
        let truth = TraversalExample::traverse(&tree, &anchors)?;
        Ok(TraversalExample {
            id: format!("tree-{i:0width$}"),
            tree,
            anchors,
            steps,
            truth,
            sparsity,
            seed,
        })
    })
}

fn pick_weighted(r: &mut rng::Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = r.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Level-order ASCII drawing: one line of labels per depth, separated by
/// connector lines with `/` toward left children and `\` toward right ones.
pub fn render_tree(tree: &LabeledTree) -> String {
    let d = tree.depth_max();
    let label_w = tree
        .labels()
        .last()
        .map(|l| l.to_string().len())
        .unwrap_or(1);
    let cell = label_w + 2;
    let width = cell << d;
    let center = |level: u32, idx: usize| -> usize {
        let span = width >> level;
        idx * span + span / 2
    };
    let mut lines: Vec<String> = Vec::new();
    for level in 0..=d {
        let first = (1usize << level) - 1;
        let mut row = vec![b' '; width + label_w];
        let mut conn = vec![b' '; width + label_w];
        for idx in 0..(1usize << level) {
            let q = first + idx;
            let Some(label) = tree.label_of(q) else { continue };
            let text = label.to_string();
            let c = center(level, idx);
            let start = c.saturating_sub(text.len() / 2);
            row[start..start + text.len()].copy_from_slice(text.as_bytes());
            if level > 0 {
                let pc = center(level - 1, idx / 2);
                let mid = (c + pc) / 2;
                conn[mid] = if q % 2 == 1 { b'/' } else { b'\\' };
            }
        }
        if level > 0 {
            lines.push(trim_bytes(conn));
        }
        lines.push(trim_bytes(row));
    }
    lines.join("\n")
}

fn trim_bytes(v: Vec<u8>) -> String {
    String::from_utf8(v).expect("ascii").trim_end().to_string()
}

/// User prompt for one example. Deterministic in the example.
pub fn build_prompt(ex: &TraversalExample) -> String {
    let tree = &ex.tree;
    let mut edges = Vec::new();
    for &q in tree.positions() {
        for c in tree.children(q) {
            edges.push(format!(
                "{}-{}",
                tree.label_of(q).expect("retained"),
                tree.label_of(c).expect("retained")
            ));
        }
    }
    let route = ex
        .anchors
        .iter()
        .map(|a| a.to_string())
        .collect::<Vec<_>>()
        .join(" to node ");
    let mut out = String::new();
    out.push_str(
        "You are a traversal assistant. The binary tree below has integer node labels; \
         each node is connected to its parent and to the nodes drawn directly beneath it.\n\n",
    );
    out.push_str(&format!(
        "Tree (depth {}, {} nodes):\n",
        tree.depth_max(),
        tree.len()
    ));
    out.push_str(&render_tree(tree));
    out.push_str("\n\nEdges: ");
    out.push_str(&edges.join(", "));
    out.push_str(&format!(
        "\n\nTask: find the shortest path that moves only along tree edges from node {route}. \
         List every node visited, in order, including the start and end nodes{}.\n",
        if ex.anchors.len() > 2 {
            " and each intermediate target"
        } else {
            ""
        }
    ));
    out.push_str(
        "Think step by step. The final line of your response must contain only the path, \
         in the format:\nPATH: n_0 n_1 ... n_f\n",
    );
    out
}

pub fn prompt_hash(prompt: &str) -> String {
    let digest = Sha256::digest(prompt.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

const COT_DELIMITERS: [&str; 4] = ["<think>", "</think>", "<|im_end|>", "<|endoftext|>"];

/// Extracts the last `PATH:` line of a response. Returns `None` when no such
/// line exists, it lists no tokens, or any token is not a non-negative
/// integer.
pub fn parse_path(raw: &str) -> Option<Path> {
    let mut last = None;
    for line in raw.lines() {
        let mut line = line.to_string();
        for d in COT_DELIMITERS {
            line = line.replace(d, "");
        }
        let line = line.trim().trim_matches(|c| c == '*' || c == '`').trim();
        if let Some(rest) = line.strip_prefix("PATH:") {
            last = Some(rest.to_string());
        }
    }
    let rest = last?;
    let nodes: Option<Vec<Label>> = rest.split_whitespace().map(|t| t.parse().ok()).collect();
    nodes.filter(|n| !n.is_empty()).map(Path)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub exact: bool,
    pub partial: f64,
}

/// Exact match on the full sequence; partial credit is the longest common
/// prefix length over the truth length.
pub fn score(parsed: Option<&Path>, truth: &Path) -> Score {
    let Some(parsed) = parsed else {
        return Score {
            exact: false,
            partial: 0.0,
        };
    };
    let prefix = parsed
        .nodes()
        .iter()
        .zip(truth.nodes())
        .take_while(|(a, b)| a == b)
        .count();
    let exact = parsed.nodes() == truth.nodes();
    Score {
        exact,
        partial: if exact {
            1.0
        } else {
            (prefix as f64 / truth.len() as f64).min(1.0)
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredResponse {
    pub id: String,
    pub prompt_hash: String,
    pub raw_text: String,
    pub parsed: Option<Vec<Label>>,
    pub exact: bool,
    pub partial: f64,
}

impl ScoredResponse {
    pub fn from_raw(ex: &TraversalExample, raw_text: impl Into<String>) -> Self {
        let raw_text = raw_text.into();
        let parsed = parse_path(&raw_text);
        let s = score(parsed.as_ref(), &ex.truth);
        Self {
            id: ex.id.clone(),
            prompt_hash: prompt_hash(&build_prompt(ex)),
            raw_text,
            parsed: parsed.map(|p| p.0),
            exact: s.exact,
            partial: s.partial,
        }
    }

    pub fn parsed_path(&self) -> Option<Path> {
        self.parsed.clone().map(Path)
    }
}

/// On-disk form of one example. Field names are part of the file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: String,
    pub depth_max: u32,
    pub positions: Vec<usize>,
    pub label_of: Vec<Option<Label>>,
    pub anchors: Vec<Label>,
    pub steps: u32,
    pub truth: Vec<Label>,
    pub sparsity: Option<f64>,
    pub seed: u64,
}

impl From<&TraversalExample> for ExampleRecord {
    fn from(ex: &TraversalExample) -> Self {
        Self {
            id: ex.id.clone(),
            depth_max: ex.tree.depth_max(),
            positions: ex.tree.positions().to_vec(),
            label_of: ex.tree.label_table().to_vec(),
            anchors: ex.anchors.clone(),
            steps: ex.steps,
            truth: ex.truth.0.clone(),
            sparsity: ex.sparsity,
            seed: ex.seed,
        }
    }
}

impl TryFrom<ExampleRecord> for TraversalExample {
    type Error = Error;

    fn try_from(rec: ExampleRecord) -> Result<Self> {
        let labels: Option<Vec<Label>> = rec
            .positions
            .iter()
            .map(|&q| rec.label_of.get(q).copied().flatten())
            .collect();
        let labels = labels.ok_or_else(|| {
            Error::DataIntegrity(format!("{}: retained position without a label", rec.id))
        })?;
        let tree = LabeledTree::from_parts(rec.depth_max, &rec.positions, &labels)?;
        let truth = Path(rec.truth);
        tree.validate_path(&truth)
            .map_err(|e| Error::DataIntegrity(format!("{}: {e}", rec.id)))?;
        if rec.anchors.len() != rec.steps as usize + 1 {
            return Err(Error::DataIntegrity(format!(
                "{}: {} anchors for {} steps",
                rec.id,
                rec.anchors.len(),
                rec.steps
            )));
        }
        if TraversalExample::traverse(&tree, &rec.anchors)? != truth {
            return Err(Error::DataIntegrity(format!(
                "{}: truth does not match anchors",
                rec.id
            )));
        }
        Ok(Self {
            id: rec.id,
            tree,
            anchors: rec.anchors,
            steps: rec.steps,
            truth,
            sparsity: rec.sparsity,
            seed: rec.seed,
        })
    }
}

pub fn write_jsonl<T: Serialize>(path: &FsPath, records: impl IntoIterator<Item = T>) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, &r).map_err(|e| Error::json("serialize record", e))?;
        buf.push(b'\n');
    }
    crate::store::write_atomic(path, &buf)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &FsPath) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::json(format!("{}:{}", path.display(), i + 1), e))?,
        );
    }
    Ok(out)
}

pub fn write_dataset(path: &FsPath, examples: &[TraversalExample]) -> Result<()> {
    write_jsonl(path, examples.iter().map(ExampleRecord::from))
}

pub fn read_dataset(path: &FsPath) -> Result<Vec<TraversalExample>> {
    read_jsonl::<ExampleRecord>(path)?
        .into_iter()
        .map(TraversalExample::try_from)
        .collect()
}

pub fn write_responses(path: &FsPath, responses: &[ScoredResponse]) -> Result<()> {
    write_jsonl(path, responses)
}

pub fn read_responses(path: &FsPath) -> Result<Vec<ScoredResponse>> {
    read_jsonl(path)
}

/// Serializes examples exactly as [`write_dataset`] would.
pub fn dataset_bytes(examples: &[TraversalExample]) -> Vec<u8> {
    let mut buf = Vec::new();
    for ex in examples {
        serde_json::to_writer(&mut buf, &ExampleRecord::from(ex)).expect("serializable");
        buf.write_all(b"\n").expect("vec write");
    }
    buf
}

/// Lookup by example id.
pub struct DatasetIndex<'a> {
    by_id: HashMap<&'a str, &'a TraversalExample>,
}

impl<'a> DatasetIndex<'a> {
    pub fn new(examples: &'a [TraversalExample]) -> Self {
        Self {
            by_id: examples.iter().map(|e| (e.id.as_str(), e)).collect(),
        }
    }

    pub fn get(&self, id: &str) -> Result<&'a TraversalExample> {
        self.by_id
            .get(id)
            .copied()
            .ok_or_else(|| Error::DataIntegrity(format!("example {id} not in dataset")))
    }
}

/// Example counts per `(depth, steps)` bucket.
pub fn composition(examples: &[TraversalExample]) -> std::collections::BTreeMap<(u32, u32), usize> {
    let mut m = std::collections::BTreeMap::new();
    for ex in examples {
        *m.entry((ex.tree.depth_max(), ex.steps)).or_insert(0) += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example(depth: u32, anchors: &[Label]) -> TraversalExample {
        let tree = LabeledTree::full(depth).unwrap();
        let truth = TraversalExample::traverse(&tree, anchors).unwrap();
        TraversalExample {
            id: "t".into(),
            tree,
            anchors: anchors.to_vec(),
            steps: anchors.len() as u32 - 1,
            truth,
            sparsity: None,
            seed: 0,
        }
    }

    #[test]
    fn two_step_truth_drops_boundary_duplicate() {
        let ex = example(2, &[3, 4, 6]);
        assert_eq!(ex.truth.nodes(), &[3, 1, 4, 1, 0, 2, 6]);
    }

    #[test]
    fn balanced_steps() {
        let cfg = SamplingConfig::new((1, 2), (1, 2), 1000, 7).unwrap();
        let ds = sample_dataset(&cfg).unwrap();
        assert_eq!(ds.iter().filter(|e| e.steps == 1).count(), 500);
        assert_eq!(ds.iter().filter(|e| e.steps == 2).count(), 500);
    }

    #[test]
    fn depth_zero_is_impossible() {
        let cfg = SamplingConfig::new((0, 0), (1, 1), 10, 0).unwrap();
        assert!(matches!(sample_dataset(&cfg), Err(Error::InvalidInput(_))));
        let odd = SamplingConfig::new((1, 2), (1, 2), 7, 0).unwrap();
        assert!(sample_dataset(&odd).is_err());
    }

    #[test]
    fn depth_one_single_step_covers_six_ordered_pairs() {
        let cfg = SamplingConfig::new((1, 1), (1, 1), 600, 3).unwrap();
        let ds = sample_dataset(&cfg).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for ex in &ds {
            let q: Vec<usize> = ex
                .anchors
                .iter()
                .map(|&a| ex.tree.position_of(a).unwrap())
                .collect();
            seen.insert((q[0], q[1]));
        }
        assert_eq!(seen.len(), 6);
    }

    #[test]
    fn prompt_contains_format_and_all_labels() {
        let ex = example(2, &[5, 3]);
        let p = build_prompt(&ex);
        assert!(p.contains("PATH:"));
        for l in 0..7 {
            assert!(render_tree(&ex.tree).contains(&l.to_string()));
        }
        assert_eq!(p, build_prompt(&ex));
    }

    #[test]
    fn render_depth_two() {
        let t = LabeledTree::full_with_labels(2, &[5, 0, 3, 6, 2, 4, 1]).unwrap();
        let s = render_tree(&t);
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[0].trim() == "5");
        assert_eq!(lines[4].split_whitespace().collect::<Vec<_>>(), ["6", "2", "4", "1"]);
    }

    #[test]
    fn parse_examples() {
        assert_eq!(parse_path("thinking\nPATH: 5 0 2").unwrap().nodes(), &[5, 0, 2]);
        assert_eq!(
            parse_path("PATH: 1 2\nmore\n  PATH: 3 4  \n").unwrap().nodes(),
            &[3, 4]
        );
        assert!(parse_path("PATH: five zero").is_none());
        assert!(parse_path("no answer").is_none());
        assert!(parse_path("PATH:").is_none());
        assert_eq!(
            parse_path("<think>PATH: 9</think>\n**PATH: 1 0**").unwrap().nodes(),
            &[1, 0]
        );
    }

    #[test]
    fn score_examples() {
        let truth = Path(vec![5, 0, 2, 6]);
        let s = score(Some(&truth.clone()), &truth);
        assert!(s.exact && s.partial == 1.0);
        let s = score(Some(&Path(vec![5, 0])), &truth);
        assert!(!s.exact && (s.partial - 0.5).abs() < 1e-12);
        let s = score(Some(&Path(vec![9, 0, 2, 6])), &truth);
        assert_eq!(s.partial, 0.0);
        let s = score(None, &truth);
        assert!(!s.exact && s.partial == 0.0);
        let s = score(Some(&Path(vec![5, 0, 2, 6, 1])), &truth);
        assert!(!s.exact && s.partial == 1.0);
    }

    #[test]
    fn record_round_trip_checks_truth() {
        let ex = example(2, &[3, 6]);
        let rec = ExampleRecord::from(&ex);
        assert_eq!(TraversalExample::try_from(rec.clone()).unwrap(), ex);
        let mut bad = rec;
        bad.truth = vec![3, 6];
        assert!(TraversalExample::try_from(bad).is_err());
    }
}
