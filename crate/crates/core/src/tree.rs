//! The search tree: a CASH root, one node per algorithm, and hyperparameter
//! nodes below them. Selection uses PUCT at both levels.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::space::Configuration;

pub type NodeId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("every node below algorithm node {0} is fully expanded")]
    NoLeaf(NodeId),
    #[error("configuration for `{found}` cannot be attached under `{expected}`")]
    AlgorithmMismatch { expected: String, found: String },
    #[error("node {0} cannot take hyperparameter children")]
    InvalidParent(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    CashRoot,
    Algo,
    Hp,
}

/// How a hyperparameter node was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionLabel {
    LlmWarmup,
    LlmExploration,
    LlmExploitation,
    BoRandom,
    BoLocal,
}

impl ActionLabel {
    /// Initialization actions start a new trajectory below an algo node.
    pub fn is_init(self) -> bool {
        matches!(self, ActionLabel::LlmWarmup | ActionLabel::BoRandom)
    }
}

/// Which LLM directives an hp node has already been expanded with.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectiveSet {
    pub exploration: bool,
    pub exploitation: bool,
}

impl DirectiveSet {
    pub fn is_full(&self) -> bool {
        self.exploration && self.exploitation
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: NodeId,
    pub kind: NodeKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub algorithm: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<Configuration>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reflection: Option<String>,
    pub visits: u64,
    pub reward: u64,
    /// Subtree best; `None` stands for −∞.
    pub best_y: Option<f64>,
    pub children: Vec<NodeId>,
    pub parent: Option<NodeId>,
    pub directives_done: DirectiveSet,
    pub warmup_count: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub action: Option<ActionLabel>,
}

impl TreeNode {
    fn new(id: NodeId, kind: NodeKind, parent: Option<NodeId>) -> Self {
        Self {
            id,
            kind,
            algorithm: None,
            config: None,
            y: None,
            reflection: None,
            visits: 0,
            reward: 0,
            best_y: None,
            children: Vec::new(),
            parent,
            directives_done: DirectiveSet::default(),
            warmup_count: 0,
            action: None,
        }
    }

    /// `R/N`, or 0 for an unvisited node.
    pub fn mean_reward(&self) -> f64 {
        if self.visits == 0 {
            0.0
        } else {
            self.reward as f64 / self.visits as f64
        }
    }
}

/// `Q + c·P·√N_parent / (1 + N_child)`. An unvisited parent counts as one
/// visit so that cold selection still follows the priors.
pub fn puct(q: f64, prior: f64, parent_visits: u64, child_visits: u64, c_puct: f64) -> f64 {
    q + c_puct * prior * (parent_visits.max(1) as f64).sqrt() / (1.0 + child_visits as f64)
}

/// Value of an algo node: mean reward plus the subtree best min–max
/// normalized over the global range of observed metrics.
pub fn q_algo(node: &TreeNode, global_min: f64, global_max: f64) -> f64 {
    if node.visits == 0 {
        return 0.0;
    }
    let range = global_max - global_min;
    let normalized = match node.best_y {
        Some(best) if range > 0.0 && range.is_finite() => (best - global_min) / range,
        _ => 0.0,
    };
    node.mean_reward() + normalized
}

/// 1 iff `y_new` strictly improves on the root's best.
pub fn compute_reward(y_new: f64, root_best: Option<f64>) -> u64 {
    match root_best {
        None => 1,
        Some(best) => u64::from(y_new > best),
    }
}

// Lowest index wins ties.
fn argmax(scores: impl IntoIterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.into_iter().enumerate() {
        match best {
            Some((_, b)) if s <= b => {}
            _ => best = Some((i, s)),
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<TreeNode>,
    algo_nodes: Vec<NodeId>,
    observed_min: Option<f64>,
}

impl Tree {
    pub const ROOT: NodeId = 0;

    pub fn new<S: AsRef<str>>(algorithm_ids: impl IntoIterator<Item = S>) -> Self {
        let mut nodes = vec![TreeNode::new(Self::ROOT, NodeKind::CashRoot, None)];
        let mut algo_nodes = Vec::new();
        for alg in algorithm_ids {
            let id = nodes.len();
            let mut node = TreeNode::new(id, NodeKind::Algo, Some(Self::ROOT));
            node.algorithm = Some(alg.as_ref().to_string());
            nodes.push(node);
            algo_nodes.push(id);
        }
        nodes[Self::ROOT].children = algo_nodes.clone();
        Self { nodes, algo_nodes, observed_min: None }
    }

    pub fn node(&self, id: NodeId) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn algo_nodes(&self) -> &[NodeId] {
        &self.algo_nodes
    }

    pub fn algo_node(&self, index: usize) -> NodeId {
        self.algo_nodes[index]
    }

    pub fn root_best(&self) -> Option<f64> {
        self.nodes[Self::ROOT].best_y
    }

    /// Global (min, max) of every backpropagated metric.
    pub fn observed_range(&self) -> Option<(f64, f64)> {
        Some((self.observed_min?, self.root_best()?))
    }

    /// Root → `id`, inclusive.
    pub fn path_to(&self, id: NodeId) -> Vec<NodeId> {
        let mut path = vec![id];
        let mut cur = id;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// All hp nodes below `id` in depth-first preorder.
    pub fn subtree_hp_nodes(&self, id: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack: Vec<NodeId> = self.nodes[id].children.iter().rev().copied().collect();
        while let Some(n) = stack.pop() {
            if self.nodes[n].kind == NodeKind::Hp {
                out.push(n);
            }
            stack.extend(self.nodes[n].children.iter().rev().copied());
        }
        out
    }

    /// PUCT score of child `child` under its parent, using `q_algo` for algo
    /// children and mean reward for hp children.
    pub fn puct_score(&self, child: NodeId, prior: f64, c_puct: f64) -> f64 {
        let node = &self.nodes[child];
        let parent = node.parent.map(|p| self.nodes[p].visits).unwrap_or(0);
        let q = match node.kind {
            NodeKind::Algo => {
                let (lo, hi) = self.observed_range().unwrap_or((0.0, 0.0));
                q_algo(node, lo, hi)
            }
            _ => node.mean_reward(),
        };
        puct(q, prior, parent, node.visits, c_puct)
    }

    /// Returns the index (into [`algo_nodes`](Self::algo_nodes)) of the
    /// algorithm maximizing PUCT.
    pub fn select_algorithm(&self, priors: &[f64], c_puct: f64) -> usize {
        assert_eq!(priors.len(), self.algo_nodes.len(), "one prior per algorithm");
        argmax(self.algo_nodes.iter().zip(priors).map(|(&id, &p)| self.puct_score(id, p, c_puct)))
            .expect("at least one algorithm")
    }

    fn is_llm_leaf(&self, id: NodeId, warmups: u32) -> bool {
        let n = &self.nodes[id];
        match n.kind {
            NodeKind::Algo => n.warmup_count < warmups,
            NodeKind::Hp => !n.directives_done.is_full(),
            NodeKind::CashRoot => false,
        }
    }

    /// Descends from `algo` by PUCT with a uniform prior over children until a
    /// node the LLM has not fully expanded. Children are tried in score order,
    /// so a fully expanded dead end backtracks instead of failing.
    pub fn select_hp_leaf(&self, algo: NodeId, c_puct: f64, warmups: u32) -> Result<NodeId, TreeError> {
        self.descend(algo, c_puct, warmups).ok_or(TreeError::NoLeaf(algo))
    }

    fn descend(&self, id: NodeId, c_puct: f64, warmups: u32) -> Option<NodeId> {
        if self.is_llm_leaf(id, warmups) {
            return Some(id);
        }
        let children = &self.nodes[id].children;
        if children.is_empty() {
            return None;
        }
        let prior = 1.0 / children.len() as f64;
        let mut order: Vec<(usize, f64)> = children
            .iter()
            .enumerate()
            .map(|(i, &c)| (i, self.puct_score(c, prior, c_puct)))
            .collect();
        // stable sort keeps lowest index first among equal scores
        order.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        order.into_iter().find_map(|(i, _)| self.descend(children[i], c_puct, warmups))
    }

    /// Appends a fresh hp node under `parent` and updates its expansion state.
    pub fn add_child(
        &mut self,
        parent: NodeId,
        config: Configuration,
        action: ActionLabel,
    ) -> Result<NodeId, TreeError> {
        let p = &self.nodes[parent];
        if p.kind == NodeKind::CashRoot {
            return Err(TreeError::InvalidParent(parent));
        }
        let expected = p.algorithm.clone().unwrap_or_default();
        if config.algorithm != expected {
            return Err(TreeError::AlgorithmMismatch { expected, found: config.algorithm });
        }
        let id = self.nodes.len();
        let mut node = TreeNode::new(id, NodeKind::Hp, Some(parent));
        node.algorithm = Some(expected);
        node.config = Some(config);
        node.action = Some(action);
        self.nodes.push(node);

        let p = &mut self.nodes[parent];
        p.children.push(id);
        match (p.kind, action) {
            (NodeKind::Algo, a) if a.is_init() => p.warmup_count += 1,
            (NodeKind::Hp, ActionLabel::LlmExploration) => p.directives_done.exploration = true,
            (NodeKind::Hp, ActionLabel::LlmExploitation) => p.directives_done.exploitation = true,
            _ => {}
        }
        Ok(id)
    }

    pub fn set_outcome(&mut self, id: NodeId, y: f64, reflection: Option<String>) {
        let n = &mut self.nodes[id];
        n.y = Some(y);
        n.reflection = reflection;
    }

    /// Adds one visit, `reward`, and `y_new` to every node on root → `leaf`.
    pub fn backpropagate(&mut self, leaf: NodeId, reward: u64, y_new: f64) {
        for id in self.path_to(leaf) {
            let n = &mut self.nodes[id];
            n.visits += 1;
            n.reward += reward;
            n.best_y = Some(n.best_y.map_or(y_new, |b| b.max(y_new)));
        }
        self.observed_min = Some(self.observed_min.map_or(y_new, |m| m.min(y_new)));
    }

    /// One JSON object per node, newline separated.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            out.push_str(&serde_json::to_string(n).expect("node serializes"));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::ParamValue;
    use proptest::prelude::*;

    fn cfg(alg: &str, x: f64) -> Configuration {
        Configuration {
            algorithm: alg.into(),
            values: [("x".to_string(), ParamValue::Float(x))].into_iter().collect(),
        }
    }

    #[test]
    fn puct_worked_example() {
        let c = 2f64.sqrt();
        let s1 = puct(0.5, 0.5, 10, 4, c);
        let s2 = puct(0.2, 0.5, 10, 1, c);
        assert!((s1 - 0.9472).abs() < 1e-4, "{s1}");
        assert!((s2 - 1.3180).abs() < 1e-4, "{s2}");
        assert_eq!(argmax([s1, s2]), Some(1));
        assert_eq!(puct(0.3, 0.9, 100, 0, 0.0), 0.3);
    }

    #[test]
    fn q_algo_cases() {
        let mut n = TreeNode::new(1, NodeKind::Algo, Some(0));
        assert_eq!(q_algo(&n, 0.0, 1.0), 0.0);
        n.visits = 10;
        n.reward = 3;
        n.best_y = Some(0.8);
        assert!((q_algo(&n, 0.0, 1.0) - 1.1).abs() < 1e-12);
        assert!((q_algo(&n, 0.8, 0.8) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn reward_is_strict() {
        assert_eq!(compute_reward(0.5, Some(0.5)), 0);
        assert_eq!(compute_reward(0.4, Some(0.5)), 0);
        assert_eq!(compute_reward(0.6, Some(0.5)), 1);
        assert_eq!(compute_reward(-3.0, None), 1);
    }

    #[test]
    fn cold_selection_follows_priors() {
        let t = Tree::new(["a", "b", "c"]);
        assert_eq!(t.select_algorithm(&[1.0 / 3.0; 3], 2f64.sqrt()), 0);
        assert_eq!(t.select_algorithm(&[0.05, 0.9, 0.05], 2f64.sqrt()), 1);
    }

    #[test]
    fn selection_matches_score_table() {
        let mut t = Tree::new(["a", "b"]);
        // a: 4 visits 2 rewards; b: 1 visit 0 rewards
        for (alg, x, reward) in [("a", 0.1, 1), ("a", 0.2, 1), ("a", 0.15, 0), ("a", 0.05, 0), ("b", 0.12, 0)] {
            let idx = if alg == "a" { 0 } else { 1 };
            let id = t.add_child(t.algo_node(idx), cfg(alg, x), ActionLabel::BoRandom).unwrap();
            t.backpropagate(id, reward, x);
        }
        let priors = [0.5, 0.5];
        let c = 2f64.sqrt();
        let (lo, hi) = t.observed_range().unwrap();
        let table: Vec<f64> = t
            .algo_nodes()
            .iter()
            .zip(priors)
            .map(|(&id, p)| {
                let n = t.node(id);
                q_algo(n, lo, hi) + c * p * (t.node(Tree::ROOT).visits as f64).sqrt() / (1.0 + n.visits as f64)
            })
            .collect();
        assert_eq!(t.select_algorithm(&priors, c), argmax(table).unwrap());
    }

    #[test]
    fn leaf_rules() {
        let mut t = Tree::new(["a"]);
        let algo = t.algo_node(0);
        assert_eq!(t.select_hp_leaf(algo, 1.4, 3), Ok(algo));
        let mut first = 0;
        for i in 0..3 {
            let id = t.add_child(algo, cfg("a", i as f64), ActionLabel::LlmWarmup).unwrap();
            t.backpropagate(id, 0, i as f64);
            if i == 0 {
                first = id;
            }
        }
        assert_eq!(t.node(algo).warmup_count, 3);
        // every warmup child is an open leaf; the first wins the tie
        assert_eq!(t.select_hp_leaf(algo, 1.4, 3), Ok(first));
    }

    #[test]
    fn exhausted_chain_has_no_leaf() {
        let mut t = Tree::new(["a"]);
        let algo = t.algo_node(0);
        let mut parent = algo;
        for i in 0..3 {
            let id = t.add_child(algo, cfg("a", i as f64), ActionLabel::BoRandom).unwrap();
            if i == 0 {
                parent = id;
            }
        }
        for id in t.node(algo).children.clone() {
            t.nodes[id].directives_done = DirectiveSet { exploration: true, exploitation: true };
        }
        assert_eq!(t.select_hp_leaf(algo, 1.4, 3), Err(TreeError::NoLeaf(algo)));
        // bo local children do not consume directive slots
        let child = t.add_child(parent, cfg("a", 9.0), ActionLabel::BoLocal).unwrap();
        assert_eq!(t.node(child).action, Some(ActionLabel::BoLocal));
        assert_eq!(t.select_hp_leaf(algo, 1.4, 3), Ok(child));
    }

    #[test]
    fn directive_bookkeeping() {
        let mut t = Tree::new(["a"]);
        let algo = t.algo_node(0);
        let base = t.add_child(algo, cfg("a", 0.0), ActionLabel::LlmWarmup).unwrap();
        assert_eq!(t.node(algo).warmup_count, 1);
        t.add_child(base, cfg("a", 0.1), ActionLabel::LlmExploration).unwrap();
        assert!(t.node(base).directives_done.exploration);
        assert!(!t.node(base).directives_done.exploitation);
        t.add_child(base, cfg("a", 0.2), ActionLabel::BoLocal).unwrap();
        assert!(!t.node(base).directives_done.exploitation);
        assert!(matches!(
            t.add_child(base, cfg("b", 0.2), ActionLabel::BoLocal),
            Err(TreeError::AlgorithmMismatch { .. })
        ));
        assert!(matches!(
            t.add_child(Tree::ROOT, cfg("a", 0.2), ActionLabel::BoLocal),
            Err(TreeError::InvalidParent(0))
        ));
    }

    #[test]
    fn backpropagation_updates_path() {
        let mut t = Tree::new(["a", "b"]);
        let algo = t.algo_node(0);
        let hp = t.add_child(algo, cfg("a", 0.0), ActionLabel::BoRandom).unwrap();
        t.backpropagate(hp, 1, 0.5);
        let new = t.add_child(hp, cfg("a", 0.1), ActionLabel::BoLocal).unwrap();
        t.backpropagate(new, 1, 0.7);
        for id in [Tree::ROOT, algo, hp, new] {
            assert!(t.node(id).visits >= 1);
        }
        assert_eq!(t.node(Tree::ROOT).visits, 2);
        assert_eq!(t.node(Tree::ROOT).reward, 2);
        assert_eq!(t.node(new).visits, 1);
        assert_eq!(t.node(new).reward, 1);
        let before: Vec<_> = t.nodes().iter().map(|n| (n.best_y, n.reward)).collect();
        let low = t.add_child(new, cfg("a", 0.2), ActionLabel::BoLocal).unwrap();
        t.backpropagate(low, 0, 0.1);
        for (id, (best, reward)) in before.iter().enumerate() {
            assert_eq!(t.node(id).best_y, *best);
            assert_eq!(t.node(id).reward, *reward);
        }
        assert_eq!(t.node(t.algo_node(1)).visits, 0);
        assert_eq!(t.path_to(low), vec![Tree::ROOT, algo, hp, new, low]);
    }

    #[test]
    fn jsonl_has_one_line_per_node() {
        let mut t = Tree::new(["a"]);
        let hp = t.add_child(t.algo_node(0), cfg("a", 0.0), ActionLabel::BoRandom).unwrap();
        t.set_outcome(hp, 0.3, Some("init".into()));
        t.backpropagate(hp, 1, 0.3);
        let dump = t.to_jsonl();
        assert_eq!(dump.lines().count(), 3);
        let v: serde_json::Value = serde_json::from_str(dump.lines().last().unwrap()).unwrap();
        assert_eq!(v["kind"], "hp");
        assert_eq!(v["action"], "bo_random");
        assert_eq!(t.node(0).best_y, Some(0.3));
    }

    proptest! {
        // Random growth: statistics stay consistent with an exhaustive rescan.
        #[test]
        fn statistics_consistent(ops in prop::collection::vec((0usize..1000, -5.0f64..5.0, 0usize..2), 1..120)) {
            let mut t = Tree::new(["a", "b"]);
            let mut rewards = 0u64;
            for (pick, y, alg) in ops {
                let algo = t.algo_node(alg);
                let mut candidates = vec![algo];
                candidates.extend(t.subtree_hp_nodes(algo));
                let parent = candidates[pick % candidates.len()];
                let name = if alg == 0 { "a" } else { "b" };
                let id = t.add_child(parent, cfg(name, y), ActionLabel::BoLocal).unwrap();
                t.set_outcome(id, y, None);
                let r = compute_reward(y, t.root_best());
                rewards += r;
                t.backpropagate(id, r, y);
            }
            let n = t.len();
            prop_assert_eq!(t.node(Tree::ROOT).reward, rewards);
            for id in 0..n {
                let node = t.node(id);
                prop_assert!(node.reward <= node.visits);
                let child_visits: u64 = node.children.iter().map(|&c| t.node(c).visits).sum();
                let own = u64::from(node.kind == NodeKind::Hp);
                prop_assert_eq!(node.visits, child_visits + own);
                let mut best: Option<f64> = node.y;
                for d in t.subtree_hp_nodes(id) {
                    let y = t.node(d).y.unwrap();
                    best = Some(best.map_or(y, |b: f64| b.max(y)));
                }
                prop_assert_eq!(node.best_y, best);
            }
        }

        #[test]
        fn selection_invariant_under_affine_rescaling(
            ys in prop::collection::vec((0usize..3, -1.0f64..1.0), 1..40),
            scale in 0.1f64..10.0, shift in -5.0f64..5.0,
            priors in prop::collection::vec(0.01f64..1.0, 3)
        ) {
            let total: f64 = priors.iter().sum();
            let priors: Vec<f64> = priors.iter().map(|p| p / total).collect();
            let build = |f: &dyn Fn(f64) -> f64| {
                let mut t = Tree::new(["a", "b", "c"]);
                let mut rewards = Vec::new();
                for &(alg, y) in &ys {
                    let name = ["a", "b", "c"][alg];
                    let id = t.add_child(t.algo_node(alg), cfg(name, y), ActionLabel::BoRandom).unwrap();
                    let r = compute_reward(f(y), t.root_best());
                    rewards.push(r);
                    t.backpropagate(id, r, f(y));
                }
                (t, rewards)
            };
            let (a, ra) = build(&|y| y);
            let (b, rb) = build(&|y| scale * y + shift);
            prop_assume!(ra == rb);
            prop_assert_eq!(a.select_algorithm(&priors, 1.4), b.select_algorithm(&priors, 1.4));
        }
    }
}
