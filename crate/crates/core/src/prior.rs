//! Synthetic classification tasks from random structural causal models.
//!
//! A task draws a DAG over feature, latent and label nodes, gives every
//! non-root node a random mechanism of its parents plus Gaussian noise,
//! samples rows ancestrally and bins the label node into classes by
//! quantiles.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::table::{write_csv, ColumnSchema, Table, Target};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MechanismWeights {
    pub linear: f64,
    pub mlp: f64,
    pub tree: f64,
}

impl Default for MechanismWeights {
    fn default() -> Self {
        Self {
            linear: 0.4,
            mlp: 0.3,
            tree: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    /// Total rows per task (train plus test), inclusive range.
    pub n_rows: (usize, usize),
    pub n_features: (usize, usize),
    pub n_classes: (usize, usize),
    /// Probability of an edge between two nodes compatible with the order.
    pub dag_density: f64,
    pub mechanisms: MechanismWeights,
    /// Noise standard deviation range, sampled per node.
    pub noise_std: (f64, f64),
    /// Unobserved nodes per graph, inclusive range.
    pub latent_nodes: (usize, usize),
    pub mlp_hidden: usize,
    pub tree_depth: usize,
    /// Probability that a feature column is turned categorical.
    pub categorical_prob: f64,
    pub max_levels: usize,
    pub test_fraction: f64,
    /// Attempts to draw a task whose train split holds every class.
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            n_rows: (256, 256),
            n_features: (2, 100),
            n_classes: (2, 10),
            dag_density: 0.3,
            mechanisms: MechanismWeights::default(),
            noise_std: (0.05, 0.3),
            latent_nodes: (0, 3),
            mlp_hidden: 8,
            tree_depth: 4,
            categorical_prob: 0.2,
            max_levels: 8,
            test_fraction: 0.5,
            max_retries: 20,
            seed: 0,
        }
    }
}

fn check_range<T: PartialOrd + std::fmt::Debug>(name: &str, r: &(T, T)) -> Result<()> {
    if r.0 > r.1 {
        return Err(Error::Config(format!("prior.{name} range {r:?} is empty")));
    }
    Ok(())
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        check_range("n_rows", &self.n_rows)?;
        check_range("n_features", &self.n_features)?;
        check_range("n_classes", &self.n_classes)?;
        check_range("noise_std", &self.noise_std)?;
        check_range("latent_nodes", &self.latent_nodes)?;
        let w = &self.mechanisms;
        if w.linear < 0.0 || w.mlp < 0.0 || w.tree < 0.0 || (w.linear + w.mlp + w.tree - 1.0).abs() > 1e-9 {
            return Err(Error::Config("prior.mechanisms weights must be nonnegative and sum to 1".into()));
        }
        if self.n_features.0 == 0 || self.n_classes.0 < 2 {
            return Err(Error::Config("prior needs at least one feature and two classes".into()));
        }
        if !(0.0..=1.0).contains(&self.dag_density) || !(0.0..=1.0).contains(&self.categorical_prob) {
            return Err(Error::Config("prior probabilities must lie in [0, 1]".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config("prior.test_fraction must lie in (0, 1)".into()));
        }
        if self.max_levels < 2 || self.tree_depth == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("prior.max_levels >= 2, tree_depth and mlp_hidden >= 1 required".into()));
        }
        let n_test = ((self.n_rows.0 as f64) * self.test_fraction).round() as usize;
        if self.n_rows.0.saturating_sub(n_test.max(1)) < self.n_classes.1 {
            return Err(Error::Config("prior.n_rows too small to hold every class in train".into()));
        }
        Ok(())
    }
}

/// Directed acyclic graph over `features + latents + 1` nodes. Nodes
/// `0..features` are observed features, the next `latents` are hidden and the
/// last is the label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Dag {
    pub n_features: usize,
    pub n_latents: usize,
    /// Topological order used for sampling.
    pub order: Vec<usize>,
    /// Sorted `(parent, child)` pairs.
    pub edges: Vec<(usize, usize)>,
}

impl Dag {
    pub fn n_nodes(&self) -> usize {
        self.n_features + self.n_latents + 1
    }

    pub fn label(&self) -> usize {
        self.n_nodes() - 1
    }

    pub fn parents(&self, node: usize) -> Vec<usize> {
        self.edges.iter().filter(|e| e.1 == node).map(|e| e.0).collect()
    }
}

pub fn sample_dag(n_features: usize, n_latents: usize, density: f64, rng: &mut impl Rng) -> Dag {
    let n = n_features + n_latents + 1;
    let label = n - 1;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    if order[0] == label {
        order.swap(0, 1);
    }
    let mut edges = Vec::new();
    for (pos, &child) in order.iter().enumerate() {
        for &parent in &order[..pos] {
            if rng.random::<f64>() < density {
                edges.push((parent, child));
            }
        }
    }
    if !edges.iter().any(|e| e.1 == label) {
        let pos = order.iter().position(|&v| v == label).unwrap();
        let parent = order[rng.random_range(0..pos)];
        edges.push((parent, label));
    }
    edges.sort_unstable();
    Dag {
        n_features,
        n_latents,
        order,
        edges,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MechanismKind {
    Root,
    Linear,
    Mlp,
    Tree,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TreeNode {
    Split { input: usize, threshold: f64, left: usize, right: usize },
    Leaf(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Mechanism {
    Root,
    Linear { weights: Vec<f64>, bias: f64 },
    Mlp { w1: Vec<f64>, b1: Vec<f64>, w2: Vec<f64>, b2: f64 },
    Tree { nodes: Vec<TreeNode> },
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn grow_tree(nodes: &mut Vec<TreeNode>, inputs: usize, depth: usize, rng: &mut impl Rng) -> usize {
    let id = nodes.len();
    if depth == 0 || rng.random::<f64>() < 0.2 {
        nodes.push(TreeNode::Leaf(normal(rng)));
        return id;
    }
    nodes.push(TreeNode::Leaf(0.0));
    let input = rng.random_range(0..inputs);
    let threshold = normal(rng) * 0.8;
    let left = grow_tree(nodes, inputs, depth - 1, rng);
    let right = grow_tree(nodes, inputs, depth - 1, rng);
    nodes[id] = TreeNode::Split {
        input,
        threshold,
        left,
        right,
    };
    id
}

impl Mechanism {
    pub fn kind(&self) -> MechanismKind {
        match self {
            Mechanism::Root => MechanismKind::Root,
            Mechanism::Linear { .. } => MechanismKind::Linear,
            Mechanism::Mlp { .. } => MechanismKind::Mlp,
            Mechanism::Tree { .. } => MechanismKind::Tree,
        }
    }

    pub fn sample(kind: MechanismKind, inputs: usize, cfg: &PriorConfig, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (inputs.max(1) as f64).sqrt();
        match kind {
            MechanismKind::Root => Mechanism::Root,
            MechanismKind::Linear => Mechanism::Linear {
                weights: (0..inputs).map(|_| normal(rng) * scale).collect(),
                bias: normal(rng) * 0.1,
            },
            MechanismKind::Mlp => {
                let h = cfg.mlp_hidden;
                Mechanism::Mlp {
                    w1: (0..h * inputs).map(|_| normal(rng) * scale * 2.0).collect(),
                    b1: (0..h).map(|_| normal(rng) * 0.5).collect(),
                    w2: (0..h).map(|_| normal(rng) / (h as f64).sqrt()).collect(),
                    b2: normal(rng) * 0.1,
                }
            }
            MechanismKind::Tree => {
                let mut nodes = Vec::new();
                grow_tree(&mut nodes, inputs.max(1), cfg.tree_depth, rng);
                Mechanism::Tree { nodes }
            }
        }
    }

    /// Noise-free output for one row of parent values.
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Mechanism::Root => 0.0,
            Mechanism::Linear { weights, bias } => bias + weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>(),
            Mechanism::Mlp { w1, b1, w2, b2 } => {
                let p = x.len();
                let mut out = *b2;
                for (j, (b, w)) in b1.iter().zip(w2).enumerate() {
                    let pre: f64 = b + w1[j * p..(j + 1) * p].iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
                    out += w * pre.tanh();
                }
                out
            }
            Mechanism::Tree { nodes } => {
                let mut i = 0;
                loop {
                    match &nodes[i] {
                        TreeNode::Leaf(v) => return *v,
                        TreeNode::Split {
                            input,
                            threshold,
                            left,
                            right,
                        } => {
                            i = if x.get(*input).copied().unwrap_or(0.0) <= *threshold { *left } else { *right };
                        }
                    }
                }
            }
        }
    }
}

/// A node's mechanism and its additive noise scale.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeModel {
    pub parents: Vec<usize>,
    pub mechanism: Mechanism,
    pub noise_std: f64,
}

pub fn sample_mechanisms(dag: &Dag, cfg: &PriorConfig, rng: &mut impl Rng) -> Vec<NodeModel> {
    let w = &cfg.mechanisms;
    (0..dag.n_nodes())
        .map(|node| {
            let parents = dag.parents(node);
            let kind = if parents.is_empty() {
                MechanismKind::Root
            } else {
                let u = rng.random::<f64>() * (w.linear + w.mlp + w.tree);
                if u < w.linear {
                    MechanismKind::Linear
                } else if u < w.linear + w.mlp {
                    MechanismKind::Mlp
                } else {
                    MechanismKind::Tree
                }
            };
            let mechanism = Mechanism::sample(kind, parents.len(), cfg, rng);
            let noise_std = rng.random_range(cfg.noise_std.0..=cfg.noise_std.1);
            NodeModel {
                parents,
                mechanism,
                noise_std,
            }
        })
        .collect()
}

/// Ancestral sampling of `n` rows; returns node-major values
/// (`values[node][row]`). Roots are standard normal; every other node is
/// standardized across rows before its noise is added.
pub fn sample_nodes(dag: &Dag, models: &[NodeModel], n: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut values = vec![Vec::new(); dag.n_nodes()];
    let mut buf = Vec::new();
    for &node in &dag.order {
        let m = &models[node];
        let col: Vec<f64> = if m.parents.is_empty() {
            (0..n).map(|_| normal(rng)).collect()
        } else {
            let mut out: Vec<f64> = (0..n)
                .map(|r| {
                    buf.clear();
                    buf.extend(m.parents.iter().map(|&p| values[p][r]));
                    m.mechanism.eval(&buf)
                })
                .collect();
            let mean = out.iter().sum::<f64>() / n as f64;
            let sd = (out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt();
            for v in &mut out {
                *v = if sd > 1e-12 { (*v - mean) / sd } else { 0.0 };
                *v += m.noise_std * normal(rng);
            }
            out
        };
        values[node] = col;
    }
    values
}

/// Cut points splitting `values` into `bins` equal-frequency bins.
pub fn quantile_edges(values: &[f64], bins: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    (1..bins)
        .map(|b| {
            let pos = b as f64 * sorted.len() as f64 / bins as f64;
            let i = (pos.ceil() as usize).clamp(1, sorted.len() - 1);
            0.5 * (sorted[i - 1] + sorted[i])
        })
        .collect()
}

pub fn bin_of(value: f64, edges: &[f64]) -> usize {
    edges.iter().take_while(|&&e| value > e).count()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpisodeTrace {
    pub edges: Vec<(usize, usize)>,
    pub mechanisms: Vec<MechanismKind>,
    pub n_latents: usize,
    pub categorical_columns: Vec<usize>,
    pub attempts: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub task_id: u64,
    pub train: Table,
    pub test: Table,
    pub trace: EpisodeTrace,
}

impl Episode {
    pub fn n_classes(&self) -> usize {
        self.train.n_classes().unwrap_or(0)
    }

    /// Writes `<stem>_train.csv` and `<stem>_test.csv` into `dir`.
    pub fn export_csv(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_csv(&self.train, &dir.join(format!("{stem}_train.csv")))?;
        write_csv(&self.test, &dir.join(format!("{stem}_test.csv")))
    }
}

fn sample_in(range: (usize, usize), rng: &mut impl Rng) -> usize {
    rng.random_range(range.0..=range.1)
}

/// Draws one task. Retries whole draws until the train split holds every
/// class.
pub fn sample_episode(cfg: &PriorConfig, task_id: u64, rng: &mut impl Rng) -> Result<Episode> {
    for attempt in 1..=cfg.max_retries.max(1) {
        if let Some(mut ep) = try_episode(cfg, task_id, rng)? {
            ep.trace.attempts = attempt;
            return Ok(ep);
        }
    }
    Err(Error::Data(format!(
        "task {task_id}: no draw with every class in train after {} attempts",
        cfg.max_retries
    )))
}

fn try_episode(cfg: &PriorConfig, task_id: u64, rng: &mut impl Rng) -> Result<Option<Episode>> {
    let n = sample_in(cfg.n_rows, rng);
    let m = sample_in(cfg.n_features, rng);
    let c = sample_in(cfg.n_classes, rng);
    let h = sample_in(cfg.latent_nodes, rng);
    let dag = sample_dag(m, h, cfg.dag_density, rng);
    let models = sample_mechanisms(&dag, cfg, rng);
    let values = sample_nodes(&dag, &models, n, rng);

    let label_edges = quantile_edges(&values[dag.label()], c);
    let labels: Vec<usize> = values[dag.label()].iter().map(|&v| bin_of(v, &label_edges)).collect();

    let mut columns = Vec::with_capacity(m);
    let mut feature_cols: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut categorical_columns = Vec::new();
    for (j, col) in values.iter().take(m).enumerate() {
        if rng.random::<f64>() < cfg.categorical_prob {
            let levels = rng.random_range(2..=cfg.max_levels);
            let edges = quantile_edges(col, levels);
            let mut perm: Vec<usize> = (0..levels).collect();
            perm.shuffle(rng);
            feature_cols.push(col.iter().map(|&v| perm[bin_of(v, &edges)] as f64).collect());
            columns.push(ColumnSchema::categorical(
                format!("x{j}"),
                (0..levels).map(|l| format!("c{l}")).collect(),
            ));
            categorical_columns.push(j);
        } else {
            feature_cols.push(col.clone());
            columns.push(ColumnSchema::numeric(format!("x{j}")));
        }
    }

    let n_test = ((n as f64 * cfg.test_fraction).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let (test_idx, train_idx) = idx.split_at(n_test);
    let mut seen = vec![false; c];
    for &i in train_idx {
        seen[labels[i]] = true;
    }
    if seen.iter().any(|s| !s) {
        return Ok(None);
    }

    let classes: Vec<String> = (0..c).map(|k| k.to_string()).collect();
    let build = |rows: &[usize]| -> Result<Table> {
        let mut cells = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            cells.extend(feature_cols.iter().map(|col| col[r]));
        }
        let target = Target {
            name: "y".into(),
            classes: classes.clone(),
            labels: rows.iter().map(|&r| labels[r]).collect(),
        };
        Table::new(columns.clone(), cells, Some(target))
    };
    let trace = EpisodeTrace {
        edges: dag.edges.clone(),
        mechanisms: models.iter().map(|nm| nm.mechanism.kind()).collect(),
        n_latents: h,
        categorical_columns,
        attempts: 0,
    };
    Ok(Some(Episode {
        task_id,
        train: build(train_idx)?,
        test: build(test_idx)?,
        trace,
    }))
}

/// Independent generator for task `index` of the stream rooted at `seed`.
pub fn task_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Task `index` of the stream rooted at `cfg.seed`.
pub fn episode(cfg: &PriorConfig, index: u64) -> Result<Episode> {
    sample_episode(cfg, index, &mut task_rng(cfg.seed, index))
}
