//! Grow-When-Required network over behavior latents.
//!
//! Each node's weight vector is a behavior embedding. A step finds the two
//! nearest nodes, links them, and then either inserts a node halfway between
//! the winner and the input (input poorly matched and winner already
//! habituated) or pulls the winner and its neighbors towards the input.
//! Habituation is a closed-form function of how often a node has fired, so
//! well-trained nodes stop moving.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lae::distance;
use crate::rng::Rng;

pub type NodeId = u64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GwrParams {
    pub activity_threshold: f64,
    pub habituation_threshold: f64,
    pub winner_rate: f64,
    pub neighbor_rate: f64,
    pub initial_habituation: f64,
    pub winner_alpha: f64,
    pub neighbor_alpha: f64,
    pub winner_tau: f64,
    pub neighbor_tau: f64,
    pub max_edge_age: u32,
}

impl Default for GwrParams {
    fn default() -> Self {
        GwrParams {
            activity_threshold: 0.8,
            habituation_threshold: 0.15,
            winner_rate: 0.1,
            neighbor_rate: 0.01,
            initial_habituation: 1.0,
            winner_alpha: 1.05,
            neighbor_alpha: 1.05,
            winner_tau: 3.3,
            neighbor_tau: 14.3,
            max_edge_age: 80,
        }
    }
}

impl GwrParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("gwr: {m}")));
        if !(0.0 < self.neighbor_rate && self.neighbor_rate < self.winner_rate && self.winner_rate < 1.0) {
            return bad("learning rates must satisfy 0 < neighbor_rate < winner_rate < 1");
        }
        if !(self.activity_threshold > 0.0 && self.activity_threshold < 1.0) {
            return bad("activity_threshold must lie in (0, 1)");
        }
        if self.max_edge_age < 1 {
            return bad("max_edge_age must be at least 1");
        }
        if !(self.habituation_threshold > 0.0 && self.initial_habituation > 0.0) {
            return bad("habituation values must be positive");
        }
        for v in [self.winner_alpha, self.neighbor_alpha, self.winner_tau, self.neighbor_tau] {
            if !(v > 0.0 && v.is_finite()) {
                return bad("habituation curve constants must be positive");
            }
        }
        Ok(())
    }
}

/// `a = exp(-|phi - w|)`.
pub fn activity(phi: &[f64], weight: &[f64]) -> f64 {
    (-distance(phi, weight)).exp()
}

/// Habituation after `count` firings: `h0 - (1 - exp(-alpha * count / tau)) / alpha`.
pub fn habituation_value(h0: f64, alpha: f64, tau: f64, count: u64) -> f64 {
    h0 - (1.0 - (-alpha * count as f64 / tau).exp()) / alpha
}

#[derive(Clone, Debug, PartialEq)]
pub struct GwrNode {
    pub id: NodeId,
    pub weight: Vec<f64>,
    /// Times this node adapted as the best match.
    pub fire_count: u64,
    /// Times this node adapted as a neighbor of the best match.
    pub neighbor_fire_count: u64,
}

impl GwrNode {
    /// Current habituation: the lower of the winner and neighbor curves at
    /// the node's respective counts, so it never increases.
    pub fn habituation(&self, p: &GwrParams) -> f64 {
        let as_winner = habituation_value(p.initial_habituation, p.winner_alpha, p.winner_tau, self.fire_count);
        let as_neighbor =
            habituation_value(p.initial_habituation, p.neighbor_alpha, p.neighbor_tau, self.neighbor_fire_count);
        as_winner.min(as_neighbor)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BehaviorEmbedding {
    pub node: NodeId,
    pub b: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepReport {
    pub winner: NodeId,
    pub second: NodeId,
    pub activity: f64,
    pub winner_habituation: f64,
    pub inserted: Option<NodeId>,
    pub removed_edges: Vec<(NodeId, NodeId)>,
    pub removed_nodes: Vec<NodeId>,
}

fn edge_key(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GwrNetwork {
    params: GwrParams,
    dim: usize,
    /// Sorted by id.
    nodes: Vec<GwrNode>,
    edges: BTreeMap<(NodeId, NodeId), u32>,
    next_id: NodeId,
}

impl GwrNetwork {
    /// Two connected nodes with weights drawn uniformly per dimension from
    /// `[low, high]`.
    pub fn new(params: GwrParams, low: &[f64], high: &[f64], rng: &mut Rng) -> Result<Self> {
        params.validate()?;
        if low.len() != high.len() || low.is_empty() {
            return Err(Error::Shape("gwr init range bounds differ in width".into()));
        }
        let mut draw = || {
            low.iter()
                .zip(high)
                .map(|(&lo, &hi)| if hi > lo { rng.random_range(lo..=hi) } else { lo })
                .collect::<Vec<f64>>()
        };
        let (a, b) = (draw(), draw());
        GwrNetwork::from_weights(params, vec![a, b])
    }

    /// Nodes with the given weights (ids `0..n`), consecutive nodes linked.
    pub fn from_weights(params: GwrParams, weights: Vec<Vec<f64>>) -> Result<Self> {
        let n = weights.len() as NodeId;
        let nodes = weights
            .into_iter()
            .enumerate()
            .map(|(i, weight)| GwrNode {
                id: i as NodeId,
                weight,
                fire_count: 0,
                neighbor_fire_count: 0,
            })
            .collect();
        let edges = (1..n).map(|i| ((i - 1, i), 0)).collect();
        GwrNetwork::from_parts(params, nodes, edges, n)
    }

    pub fn from_parts(
        params: GwrParams,
        mut nodes: Vec<GwrNode>,
        edges: BTreeMap<(NodeId, NodeId), u32>,
        next_id: NodeId,
    ) -> Result<Self> {
        params.validate()?;
        if nodes.len() < 2 {
            return Err(Error::State("a gwr network needs at least two nodes".into()));
        }
        nodes.sort_by_key(|n| n.id);
        let dim = nodes[0].weight.len();
        if dim == 0 || nodes.iter().any(|n| n.weight.len() != dim) {
            return Err(Error::Shape("node weights differ in width".into()));
        }
        if nodes.windows(2).any(|w| w[0].id == w[1].id) || nodes.last().unwrap().id >= next_id {
            return Err(Error::State("node ids must be unique and below next_id".into()));
        }
        let net = GwrNetwork {
            params,
            dim,
            nodes,
            edges,
            next_id,
        };
        net.check_consistency()?;
        Ok(net)
    }

    pub fn params(&self) -> &GwrParams {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nodes(&self) -> &[GwrNode] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edges(&self) -> &BTreeMap<(NodeId, NodeId), u32> {
        &self.edges
    }

    pub fn node(&self, id: NodeId) -> Option<&GwrNode> {
        self.index_of(id).map(|i| &self.nodes[i])
    }

    fn index_of(&self, id: NodeId) -> Option<usize> {
        self.nodes.binary_search_by_key(&id, |n| n.id).ok()
    }

    pub fn neighbors(&self, id: NodeId) -> Vec<NodeId> {
        self.edges
            .keys()
            .filter_map(|&(a, b)| {
                if a == id {
                    Some(b)
                } else if b == id {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    }

    /// Every edge joins two live, distinct nodes.
    pub fn check_consistency(&self) -> Result<()> {
        for &(a, b) in self.edges.keys() {
            if a >= b {
                return Err(Error::State(format!("edge ({a}, {b}) is not normalised or is a self-loop")));
            }
            if self.index_of(a).is_none() || self.index_of(b).is_none() {
                return Err(Error::State(format!("edge ({a}, {b}) references a missing node")));
            }
        }
        Ok(())
    }

    fn check_input(&self, phi: &[f64]) -> Result<()> {
        if phi.len() != self.dim {
            return Err(Error::Shape(format!("input width {} vs network width {}", phi.len(), self.dim)));
        }
        if !phi.iter().all(|v| v.is_finite()) {
            return Err(Error::Input("non-finite gwr input".into()));
        }
        Ok(())
    }

    /// Best and second-best matching node indices; ties go to the lower id.
    fn best_two_indices(&self, phi: &[f64]) -> Result<(usize, usize)> {
        if self.nodes.len() < 2 {
            return Err(Error::State("fewer than two nodes".into()));
        }
        let mut best = (f64::INFINITY, usize::MAX);
        let mut second = (f64::INFINITY, usize::MAX);
        // nodes are sorted by id, so strict comparisons keep the lower id on ties
        for (i, node) in self.nodes.iter().enumerate() {
            let d = distance(phi, &node.weight);
            if d < best.0 {
                second = best;
                best = (d, i);
            } else if d < second.0 {
                second = (d, i);
            }
        }
        Ok((best.1, second.1))
    }

    pub fn find_best_two(&self, phi: &[f64]) -> Result<(NodeId, NodeId)> {
        self.check_input(phi)?;
        let (c, c2) = self.best_two_indices(phi)?;
        Ok((self.nodes[c].id, self.nodes[c2].id))
    }

    /// Pure best-match query.
    pub fn infer(&self, phi: &[f64]) -> Result<BehaviorEmbedding> {
        self.check_input(phi)?;
        let (c, _) = self.best_two_indices(phi)?;
        Ok(BehaviorEmbedding {
            node: self.nodes[c].id,
            b: self.nodes[c].weight.clone(),
        })
    }

    /// One learning iteration. Returns the winner's weight as it was before
    /// this step changed anything.
    pub fn step(&mut self, phi: &[f64]) -> Result<(BehaviorEmbedding, StepReport)> {
        self.check_input(phi)?;
        let (ci, c2i) = self.best_two_indices(phi)?;
        let (c, c2) = (self.nodes[ci].id, self.nodes[c2i].id);
        let embedding = BehaviorEmbedding {
            node: c,
            b: self.nodes[ci].weight.clone(),
        };

        let link = edge_key(c, c2);
        self.edges.insert(link, 0);
        let mut fresh = vec![link];

        let a = activity(phi, &self.nodes[ci].weight);
        let h_c = self.nodes[ci].habituation(&self.params);
        let mut report = StepReport {
            winner: c,
            second: c2,
            activity: a,
            winner_habituation: h_c,
            ..StepReport::default()
        };

        if a < self.params.activity_threshold && h_c < self.params.habituation_threshold {
            let v = self.next_id;
            self.next_id += 1;
            let weight = self.nodes[ci].weight.iter().zip(phi).map(|(w, x)| 0.5 * (w + x)).collect();
            self.nodes.push(GwrNode {
                id: v,
                weight,
                fire_count: 0,
                neighbor_fire_count: 0,
            });
            self.edges.remove(&link);
            fresh = vec![edge_key(v, c), edge_key(v, c2)];
            for &e in &fresh {
                self.edges.insert(e, 0);
            }
            report.inserted = Some(v);
        } else {
            let neighbors = self.neighbors(c);
            let p = self.params.clone();
            let winner = &mut self.nodes[ci];
            let scale = p.winner_rate * h_c;
            for (w, x) in winner.weight.iter_mut().zip(phi) {
                *w += scale * (x - *w);
            }
            winner.fire_count += 1;
            for k in neighbors {
                let idx = self.index_of(k).expect("edges reference live nodes");
                let node = &mut self.nodes[idx];
                let scale = p.neighbor_rate * node.habituation(&p);
                for (w, x) in node.weight.iter_mut().zip(phi) {
                    *w += scale * (x - *w);
                }
                node.neighbor_fire_count += 1;
            }
        }

        // age the winner's other edges, then prune
        for (key, age) in self.edges.iter_mut() {
            if (key.0 == c || key.1 == c) && !fresh.contains(key) {
                *age += 1;
            }
        }
        let limit = self.params.max_edge_age;
        let stale: Vec<_> = self.edges.iter().filter(|(_, &age)| age > limit).map(|(&k, _)| k).collect();
        for k in &stale {
            self.edges.remove(k);
        }
        report.removed_edges = stale;
        let connected: std::collections::BTreeSet<NodeId> = self.edges.keys().flat_map(|&(a, b)| [a, b]).collect();
        let (kept, dropped): (Vec<_>, Vec<_>) = std::mem::take(&mut self.nodes)
            .into_iter()
            .partition(|n| connected.contains(&n.id));
        self.nodes = kept;
        report.removed_nodes = dropped.into_iter().map(|n| n.id).collect();
        Ok((embedding, report))
    }

    /// Text snapshot:
    ///
    /// ```text
    /// gwr-snapshot v1
    /// params <a_T> <h_T> <eps_c> <eps_n> <h0> <alpha_c> <alpha_n> <tau_c> <tau_n> <kappa>
    /// dim <d>
    /// next_id <n>
    /// node <id> <fire_count> <neighbor_fire_count> <w_1> ... <w_d>
    /// edge <id_a> <id_b> <age>
    /// ```
    pub fn to_snapshot(&self) -> String {
        let p = &self.params;
        let mut out = String::from("gwr-snapshot v1\n");
        writeln!(
            out,
            "params {} {} {} {} {} {} {} {} {} {}",
            p.activity_threshold,
            p.habituation_threshold,
            p.winner_rate,
            p.neighbor_rate,
            p.initial_habituation,
            p.winner_alpha,
            p.neighbor_alpha,
            p.winner_tau,
            p.neighbor_tau,
            p.max_edge_age
        )
        .unwrap();
        writeln!(out, "dim {}", self.dim).unwrap();
        writeln!(out, "next_id {}", self.next_id).unwrap();
        for n in &self.nodes {
            write!(out, "node {} {} {}", n.id, n.fire_count, n.neighbor_fire_count).unwrap();
            for w in &n.weight {
                write!(out, " {w}").unwrap();
            }
            out.push('\n');
        }
        for (&(a, b), age) in &self.edges {
            writeln!(out, "edge {a} {b} {age}").unwrap();
        }
        out
    }

    pub fn from_snapshot(text: &str, origin: &Path) -> Result<Self> {
        let bad = |line: usize, m: &str| Error::format(origin, format!("line {}: {m}", line + 1));
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "gwr-snapshot v1")) => {}
            _ => return Err(bad(0, "expected header `gwr-snapshot v1`")),
        }
        let mut params = None;
        let mut dim = None;
        let mut next_id = None;
        let mut nodes = Vec::new();
        let mut edges = BTreeMap::new();
        for (ln, line) in lines {
            let mut parts = line.split_whitespace();
            let tag = match parts.next() {
                Some(t) => t,
                None => continue,
            };
            let fields: Vec<&str> = parts.collect();
            let f = |i: usize| -> Result<f64> {
                fields
                    .get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad(ln, "malformed number"))
            };
            let u = |i: usize| -> Result<u64> {
                fields
                    .get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad(ln, "malformed integer"))
            };
            match tag {
                "params" => {
                    if fields.len() != 10 {
                        return Err(bad(ln, "params needs 10 values"));
                    }
                    params = Some(GwrParams {
                        activity_threshold: f(0)?,
                        habituation_threshold: f(1)?,
                        winner_rate: f(2)?,
                        neighbor_rate: f(3)?,
                        initial_habituation: f(4)?,
                        winner_alpha: f(5)?,
                        neighbor_alpha: f(6)?,
                        winner_tau: f(7)?,
                        neighbor_tau: f(8)?,
                        max_edge_age: u(9)? as u32,
                    });
                }
                "dim" => dim = Some(u(0)? as usize),
                "next_id" => next_id = Some(u(0)?),
                "node" => {
                    let d = dim.ok_or_else(|| bad(ln, "node before dim"))?;
                    if fields.len() != 3 + d {
                        return Err(bad(ln, "node weight width does not match dim"));
                    }
                    nodes.push(GwrNode {
                        id: u(0)?,
                        fire_count: u(1)?,
                        neighbor_fire_count: u(2)?,
                        weight: (3..3 + d).map(f).collect::<Result<_>>()?,
                    });
                }
                "edge" => {
                    let (a, b) = (u(0)?, u(1)?);
                    if a == b {
                        return Err(bad(ln, "self-loop"));
                    }
                    if edges.insert(edge_key(a, b), u(2)? as u32).is_some() {
                        return Err(bad(ln, "duplicate edge"));
                    }
                }
                other => return Err(bad(ln, &format!("unknown record `{other}`"))),
            }
        }
        let params = params.ok_or_else(|| Error::format(origin, "missing params"))?;
        let next_id = next_id.ok_or_else(|| Error::format(origin, "missing next_id"))?;
        GwrNetwork::from_parts(params, nodes, edges, next_id)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_snapshot())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        GwrNetwork::from_snapshot(&std::fs::read_to_string(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use approx::assert_relative_eq;

    fn pair(dim: usize) -> GwrNetwork {
        GwrNetwork::from_weights(GwrParams::default(), vec![vec![0.0; dim], vec![1.0; dim]]).unwrap()
    }

    #[test]
    fn activity_values() {
        assert_eq!(activity(&[0.3, 0.2], &[0.3, 0.2]), 1.0);
        assert_relative_eq!(activity(&[0.0], &[0.8f64.ln().abs()]), 0.8, epsilon = 1e-15);
        assert_relative_eq!(activity(&[1.0, 0.0], &[0.0, 0.0]), (-1.0f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn habituation_curve() {
        assert_eq!(habituation_value(1.0, 1.05, 3.3, 0), 1.0);
        let h1 = habituation_value(1.0, 1.05, 3.3, 1);
        let expect = 1.0 - (1.0 - (-1.05f64 / 3.3).exp()) / 1.05;
        assert_relative_eq!(h1, expect, epsilon = 1e-15);
        assert!((h1 - 0.74045).abs() < 1e-5);
        let limit = 1.0 - 1.0 / 1.05;
        assert!((habituation_value(1.0, 1.05, 3.3, 10_000) - limit).abs() < 1e-12);
    }

    #[test]
    fn best_two_exact_match_and_ties() {
        let net = pair(3);
        assert_eq!(net.find_best_two(&[0.0; 3]).unwrap(), (0, 1));
        assert_eq!(net.find_best_two(&[0.5; 3]).unwrap(), (0, 1));
        assert_eq!(net.find_best_two(&[0.9; 3]).unwrap(), (1, 0));
    }

    #[test]
    fn fresh_winner_adapts_at_full_rate() {
        let mut net = pair(2);
        let phi = [-3.0, 4.0];
        let (b, report) = net.step(&phi).unwrap();
        assert_eq!(b.b, vec![0.0, 0.0]);
        assert!(report.inserted.is_none());
        let w = &net.node(0).unwrap().weight;
        assert_relative_eq!(w[0], 0.1 * -3.0, epsilon = 1e-15);
        assert_relative_eq!(w[1], 0.1 * 4.0, epsilon = 1e-15);
        // the second node is a neighbor and moves at the neighbor rate
        let w1 = &net.node(1).unwrap().weight;
        assert_relative_eq!(w1[0], 1.0 + 0.01 * (-4.0), epsilon = 1e-15);
        assert_eq!(net.node(0).unwrap().fire_count, 1);
        assert_eq!(net.node(1).unwrap().neighbor_fire_count, 1);
    }

    #[test]
    fn habituated_winner_inserts_midpoint() {
        let mut net = GwrNetwork::from_weights(GwrParams::default(), vec![vec![0.0; 3], vec![0.0, 5.0, 0.0]]).unwrap();
        net.nodes[0].fire_count = 50;
        assert!(net.nodes[0].habituation(net.params()) < 0.15);
        let (b, report) = net.step(&[2.0, 0.0, 0.0]).unwrap();
        assert_eq!(b.b, vec![0.0; 3]);
        let v = report.inserted.expect("insertion");
        assert_eq!(net.node(v).unwrap().weight, vec![1.0, 0.0, 0.0]);
        assert!(net.edges().contains_key(&(0, v)));
        assert!(net.edges().contains_key(&(1, v)));
        assert!(!net.edges().contains_key(&(0, 1)));
        // the winner did not move
        assert_eq!(net.node(0).unwrap().weight, vec![0.0; 3]);
    }

    #[test]
    fn insertion_needs_both_conditions() {
        // poorly matched but fresh winner: adapt
        let mut net = pair(2);
        let (_, r) = net.step(&[10.0, 10.0]).unwrap();
        assert!(r.activity < 0.8 && r.winner_habituation >= 0.15 && r.inserted.is_none());
        // habituated winner but good match: adapt
        let mut net = pair(2);
        net.nodes[0].fire_count = 100;
        let (_, r) = net.step(&[0.05, 0.0]).unwrap();
        assert!(r.activity >= 0.8 && r.winner_habituation < 0.15 && r.inserted.is_none());
    }

    #[test]
    fn infer_is_pure_and_matches_step() {
        let mut net = GwrNetwork::new(GwrParams::default(), &[-1.0; 4], &[1.0; 4], &mut seeded(2, 0)).unwrap();
        let phi = [0.2, -0.1, 0.4, 0.0];
        let before = net.clone();
        let a = net.infer(&phi).unwrap();
        let b = net.infer(&phi).unwrap();
        assert_eq!(a, b);
        assert_eq!(net, before);
        let (c, _) = net.step(&phi).unwrap();
        assert_eq!(a, c);
        let w0 = net.nodes()[0].weight.clone();
        assert_eq!(net.infer(&w0).unwrap().b, w0);
    }

    #[test]
    fn repeated_input_converges_and_habituates() {
        let mut net = pair(2);
        let phi = [0.3, -0.2];
        let mut last_h = 1.0;
        let mut last_d = f64::INFINITY;
        for _ in 0..300 {
            net.step(&phi).unwrap();
            let n = net.node(0).unwrap();
            let h = n.habituation(net.params());
            let d = distance(&n.weight, &phi);
            assert!(h <= last_h && d <= last_d);
            last_h = h;
            last_d = d;
        }
        assert!((last_h - (1.0 - 1.0 / 1.05)).abs() < 1e-9);
    }

    #[test]
    fn stale_edges_and_orphans_are_pruned() {
        let params = GwrParams {
            max_edge_age: 2,
            ..GwrParams::default()
        };
        // chain 0-1-2; node 2 far away
        let mut net =
            GwrNetwork::from_weights(params, vec![vec![0.0], vec![0.1], vec![0.2]]).unwrap();
        net.edges.clear();
        net.edges.insert((0, 1), 0);
        net.edges.insert((0, 2), 0);
        // keep hitting node 0 with node 1 second: edge 0-2 ages out
        for _ in 0..3 {
            let (_, r) = net.step(&[-0.01]).unwrap();
            assert_eq!((r.winner, r.second), (0, 1));
        }
        assert!(!net.edges().contains_key(&(0, 2)));
        assert!(net.node(2).is_none());
        assert_eq!(net.node_count(), 2);
        assert_eq!(net.edges()[&(0, 1)], 0);
    }

    #[test]
    fn input_validation() {
        let mut net = pair(2);
        assert!(matches!(net.step(&[f64::NAN, 0.0]), Err(Error::Input(_))));
        assert!(matches!(net.step(&[0.0]), Err(Error::Shape(_))));
        assert!(GwrNetwork::from_weights(GwrParams::default(), vec![vec![0.0]]).is_err());
        let bad = GwrParams {
            neighbor_rate: 0.2,
            ..GwrParams::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn best_two_matches_brute_force() {
        let mut rng = seeded(11, 0);
        let weights: Vec<Vec<f64>> = (0..40).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let net = GwrNetwork::from_weights(GwrParams::default(), weights.clone()).unwrap();
        for _ in 0..200 {
            let phi: Vec<f64> = (0..3).map(|_| rng.random_range(-1.5..1.5)).collect();
            let mut order: Vec<(f64, u64)> =
                weights.iter().enumerate().map(|(i, w)| (distance(&phi, w), i as u64)).collect();
            order.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(net.find_best_two(&phi).unwrap(), (order[0].1, order[1].1));
        }
    }

    #[test]
    fn novel_cluster_grows_network() {
        for seed in 0..10 {
            let mut rng = seeded(seed, 1);
            let mut net = GwrNetwork::new(GwrParams::default(), &[-0.1; 4], &[0.1; 4], &mut rng).unwrap();
            let jitter = |c: f64, rng: &mut Rng| -> Vec<f64> { (0..4).map(|_| c + rng.random_range(-0.05..0.05)).collect() };
            for _ in 0..300 {
                let phi = jitter(0.0, &mut rng);
                net.step(&phi).unwrap();
            }
            let settled = net.node_count();
            let mut grew = false;
            for _ in 0..300 {
                let phi = jitter(3.0, &mut rng);
                let (_, r) = net.step(&phi).unwrap();
                grew |= r.inserted.is_some();
            }
            assert!(grew && net.node_count() > settled, "seed {seed}: {settled} -> {}", net.node_count());
            let near = net.infer(&[3.0; 4]).unwrap();
            assert!(distance(&near.b, &[3.0; 4]) < 0.5);
        }
    }

    proptest::proptest! {
        #[test]
        fn invariants_hold_under_random_streams(
            seed in 0u64..1000,
            inputs in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 2), 1..150),
        ) {
            let params = GwrParams { max_edge_age: 5, ..GwrParams::default() };
            let mut net = GwrNetwork::new(params, &[-1.0; 2], &[1.0; 2], &mut seeded(seed, 0)).unwrap();
            let mut habituation: BTreeMap<NodeId, f64> = BTreeMap::new();
            let mut max_id = 1;
            for phi in &inputs {
                let before = net.infer(phi).unwrap();
                let (b, r) = net.step(phi).unwrap();
                proptest::prop_assert_eq!(&before, &b);
                proptest::prop_assert!(net.node_count() >= 2);
                net.check_consistency().unwrap();
                if r.inserted.is_none() {
                    proptest::prop_assert_eq!(net.edges()[&edge_key(r.winner, r.second)], 0);
                }
                if let Some(v) = r.inserted {
                    proptest::prop_assert!(v > max_id);
                    max_id = v;
                }
                for n in net.nodes() {
                    let h = n.habituation(net.params());
                    proptest::prop_assert!(h > 1.0 - 1.0 / 1.05 - 1e-12 && h <= 1.0);
                    if let Some(&prev) = habituation.get(&n.id) {
                        proptest::prop_assert!(h <= prev);
                    }
                    habituation.insert(n.id, h);
                }
                for &(a, b) in net.edges().keys() {
                    proptest::prop_assert!(net.edges()[&(a, b)] <= 5);
                }
            }
        }
    }

    #[test]
    fn snapshot_round_trip() {
        let mut net = GwrNetwork::new(GwrParams::default(), &[-1.0; 3], &[1.0; 3], &mut seeded(5, 0)).unwrap();
        let mut rng = seeded(6, 0);
        for _ in 0..200 {
            let phi: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            net.step(&phi).unwrap();
        }
        let text = net.to_snapshot();
        let back = GwrNetwork::from_snapshot(&text, Path::new("mem")).unwrap();
        assert_eq!(back, net);
        assert!(GwrNetwork::from_snapshot("nope", Path::new("mem")).is_err());
        let broken = text.replace("edge", "edge 99");
        assert!(GwrNetwork::from_snapshot(&broken, Path::new("mem")).is_err());
    }
}
