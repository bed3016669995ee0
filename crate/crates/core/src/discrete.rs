//! Discrete-time consumption on finite scenario trees.
//!
//! Wealth evolves as `X_i = X_{i-1}(1 + R_i) - C_i` with consumption
//! `C_i = X_{i-1}(1 + R_i) / a_i` and `a_n = 1`. Node identity plays the
//! role of the information set, so every conditional expectation below is
//! a finite probability-weighted sum over a subtree and martingale claims
//! can be checked to rounding precision.
//!
//! Sums over branches use compensated (Neumaier) accumulation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{McsError, Result};

/// Tolerance on the sum of branch probabilities at a node.
pub const PROB_SUM_TOL: f64 = 1e-15;

/// Nested, serializable description of a tree node.
///
/// The root's `ret` and `prob` are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    #[serde(default)]
    pub ret: f64,
    #[serde(default = "one")]
    pub prob: f64,
    #[serde(default)]
    pub children: Vec<NodeSpec>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub period: usize,
    /// Return over the period ending at this node; zero at the root.
    pub ret: f64,
    /// Conditional probability of this branch given the parent.
    pub prob: f64,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
}

/// Non-recombining return tree with the root at period 0.
///
/// Nodes are stored in breadth-first order, so every period occupies a
/// contiguous index range and children follow their parents.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioTree {
    nodes: Vec<Node>,
    periods: usize,
}

fn neumaier(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

impl ScenarioTree {
    pub fn from_spec(root: &NodeSpec) -> Result<Self> {
        let mut nodes = vec![Node {
            period: 0,
            ret: 0.0,
            prob: 1.0,
            parent: None,
            children: Vec::new(),
        }];
        let mut queue = std::collections::VecDeque::from([(0usize, root)]);
        while let Some((id, spec)) = queue.pop_front() {
            for child in &spec.children {
                let cid = nodes.len();
                nodes.push(Node {
                    period: nodes[id].period + 1,
                    ret: child.ret,
                    prob: child.prob,
                    parent: Some(id),
                    children: Vec::new(),
                });
                nodes[id].children.push(cid);
                queue.push_back((cid, child));
            }
        }
        let periods = nodes.last().map_or(0, |n| n.period);
        let tree = Self { nodes, periods };
        tree.validate()?;
        Ok(tree)
    }

    /// Builds a tree from `(return, probability)` branch lists where
    /// `branches(parent)` gives the branches below `parent`.
    fn grow(periods: usize, mut branches: impl FnMut(&Self, usize) -> Vec<(f64, f64)>) -> Result<Self> {
        let mut tree = Self {
            nodes: vec![Node {
                period: 0,
                ret: 0.0,
                prob: 1.0,
                parent: None,
                children: Vec::new(),
            }],
            periods,
        };
        let mut frontier = vec![0usize];
        for period in 1..=periods {
            let mut next = Vec::new();
            for &parent in &frontier {
                for (ret, prob) in branches(&tree, parent) {
                    let id = tree.nodes.len();
                    tree.nodes.push(Node {
                        period,
                        ret,
                        prob,
                        parent: Some(parent),
                        children: Vec::new(),
                    });
                    tree.nodes[parent].children.push(id);
                    next.push(id);
                }
            }
            frontier = next;
        }
        tree.validate()?;
        Ok(tree)
    }

    /// Every period draws from its own branch list regardless of history,
    /// so the returns are mutually independent.
    pub fn independent(per_period: &[Vec<(f64, f64)>]) -> Result<Self> {
        Self::grow(per_period.len(), |t, parent| per_period[t.nodes[parent].period].clone())
    }

    /// A single deterministic return `r` in each of `n` periods.
    pub fn fixed_rate(r: f64, n: usize) -> Result<Self> {
        Self::independent(&vec![vec![(r, 1.0)]; n])
    }

    /// Three-period Markov tree: the next return's distribution depends on
    /// whether the last return was non-negative.
    ///
    /// With two periods the candidate and the recursion coincide
    /// identically, since both reduce to `1 + 1/E[1 + R_2 | F_1]`; the gap
    /// first appears one period further back.
    pub fn dependent_counterexample() -> Self {
        let up = vec![(0.3, 0.5), (-0.1, 0.5)];
        let down = vec![(0.1, 0.5), (-0.2, 0.5)];
        Self::grow(3, |t, parent| {
            if parent == 0 {
                vec![(0.1, 0.5), (-0.05, 0.5)]
            } else if t.nodes[parent].ret >= 0.0 {
                up.clone()
            } else {
                down.clone()
            }
        })
        .expect("counterexample is well formed")
    }

    /// Random tree with an independent branching at every node.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, max_periods: usize, max_branches: usize) -> Self {
        let periods = rng.random_range(1..=max_periods.max(1));
        Self::grow(periods, |_, _| random_branches(rng, max_branches)).expect("generated tree is well formed")
    }

    /// Random tree whose returns are independent across periods.
    pub fn random_independent<R: Rng + ?Sized>(rng: &mut R, max_periods: usize, max_branches: usize) -> Self {
        let periods = rng.random_range(1..=max_periods.max(1));
        let per_period: Vec<_> = (0..periods).map(|_| random_branches(rng, max_branches)).collect();
        Self::independent(&per_period).expect("generated tree is well formed")
    }

    pub fn validate(&self) -> Result<()> {
        if self.periods == 0 {
            return Err(McsError::InvalidTree("tree needs at least one period".into()));
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if id > 0 && !(node.ret > -1.0 && node.ret.is_finite()) {
                return Err(McsError::InvalidTree(format!(
                    "node {id}: return {} not in (-1, inf)",
                    node.ret
                )));
            }
            if node.children.is_empty() {
                if node.period != self.periods {
                    return Err(McsError::InvalidTree(format!(
                        "leaf {id} at period {} but the tree has {} periods",
                        node.period, self.periods
                    )));
                }
                continue;
            }
            let mut total = Vec::with_capacity(node.children.len());
            for &c in &node.children {
                let p = self.nodes[c].prob;
                if !(p > 0.0 && p <= 1.0) {
                    return Err(McsError::InvalidTree(format!(
                        "node {c}: probability {p} not in (0, 1]"
                    )));
                }
                total.push(p);
            }
            let sum = neumaier(total.into_iter());
            if (sum - 1.0).abs() > PROB_SUM_TOL {
                return Err(McsError::InvalidTree(format!(
                    "children of node {id} have probability sum {sum}"
                )));
            }
        }
        Ok(())
    }

    pub fn periods(&self) -> usize {
        self.periods
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &Node {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].children.is_empty())
    }

    /// `E[g(child) | node]` over the node's branches.
    fn expect(&self, id: usize, mut g: impl FnMut(usize) -> f64) -> f64 {
        neumaier(self.nodes[id].children.iter().map(|&c| self.nodes[c].prob * g(c)))
    }
}

fn random_branches<R: Rng + ?Sized>(rng: &mut R, max_branches: usize) -> Vec<(f64, f64)> {
    let k = rng.random_range(1..=max_branches.max(1));
    let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = weights.iter().sum();
    let mut probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
    // put the rounding remainder on the last branch
    let head: f64 = probs[..k - 1].iter().sum();
    probs[k - 1] = 1.0 - head;
    probs.into_iter().map(|p| (rng.random_range(-0.5..0.8), p)).collect()
}

/// Wealth-to-consumption factor `a_i` per node; the root carries none.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteFactorProcess {
    values: Vec<f64>,
}

impl DiscreteFactorProcess {
    pub fn a(&self, node: usize) -> Option<f64> {
        (node > 0).then(|| self.values[node])
    }

    pub fn values(&self) -> &[f64] {
        &self.values[1..]
    }
}

/// Backward induction `a_i = 1 + 1 / E[(1 + R_{i+1}) / a_{i+1} | F_i]`
/// from `a_n = 1`.
pub fn solve_recursion(tree: &ScenarioTree) -> Result<DiscreteFactorProcess> {
    let mut a = vec![f64::NAN; tree.len()];
    for id in (1..tree.len()).rev() {
        let node = tree.node(id);
        if node.children.is_empty() {
            a[id] = 1.0;
            continue;
        }
        let e = tree.expect(id, |c| (1.0 + tree.node(c).ret) / a[c]);
        if e == 0.0 {
            return Err(McsError::DegenerateReturn { node: id });
        }
        a[id] = 1.0 + 1.0 / e;
    }
    Ok(DiscreteFactorProcess { values: a })
}

/// `a_i = 1 + Σ_{j>i} Π_{k=i+1..j} 1 / E[1 + R_k | F_i]`, the discrete
/// annuity factor at the conditionally expected gross returns.
pub fn candidate_factor(tree: &ScenarioTree) -> Result<DiscreteFactorProcess> {
    let n = tree.periods();
    // growth[id][k - period - 1] = E[1 + R_k | node id] for k > period
    let mut growth: Vec<Vec<f64>> = vec![Vec::new(); tree.len()];
    let mut a = vec![f64::NAN; tree.len()];
    for id in (0..tree.len()).rev() {
        let node = tree.node(id);
        let depth = n - node.period;
        let mut g = Vec::with_capacity(depth);
        for ahead in 0..depth {
            g.push(tree.expect(id, |c| {
                if ahead == 0 {
                    1.0 + tree.node(c).ret
                } else {
                    growth[c][ahead - 1]
                }
            }));
        }
        if id > 0 {
            let mut disc = 1.0;
            let mut terms = Vec::with_capacity(depth);
            for &m in &g {
                if m == 0.0 {
                    return Err(McsError::DegenerateReturn { node: id });
                }
                disc /= m;
                terms.push(disc);
            }
            a[id] = 1.0 + neumaier(terms.into_iter());
        }
        for &c in &node.children {
            growth[c] = Vec::new();
        }
        growth[id] = g;
    }
    Ok(DiscreteFactorProcess { values: a })
}

/// Wealth and consumption at a node; the root has no consumption.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeState {
    pub x: f64,
    pub c: f64,
}

/// Runs the wealth recursion from `X_0 = x0` down the tree.
pub fn evaluate(tree: &ScenarioTree, factors: &DiscreteFactorProcess, x0: f64) -> Vec<NodeState> {
    let mut out = vec![NodeState { x: x0, c: f64::NAN }; tree.len()];
    for id in 1..tree.len() {
        let node = tree.node(id);
        let parent = node.parent.expect("non-root node has a parent");
        let gross = out[parent].x * (1.0 + node.ret);
        let c = gross / factors.values[id];
        out[id] = NodeState { x: gross - c, c };
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MartingaleCheck {
    /// Max over non-leaf, non-root nodes of `|E[C_{i+1} | F_i] - C_i|`.
    pub max_violation: f64,
    /// Max over leaves of `|X_n|`.
    pub max_terminal_wealth: f64,
}

/// Checks the martingale condition and exhaustion with `X_0 = 1`.
pub fn martingale_verify(tree: &ScenarioTree, factors: &DiscreteFactorProcess) -> MartingaleCheck {
    let states = evaluate(tree, factors, 1.0);
    let mut max_violation = 0.0f64;
    for id in 1..tree.len() {
        if tree.node(id).children.is_empty() {
            continue;
        }
        let next = tree.expect(id, |c| states[c].c);
        max_violation = max_violation.max((next - states[id].c).abs());
    }
    let max_terminal_wealth = tree.leaves().map(|l| states[l].x.abs()).fold(0.0, f64::max);
    MartingaleCheck {
        max_violation,
        max_terminal_wealth,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_rate_counts_remaining_payments() {
        let tree = ScenarioTree::fixed_rate(0.0, 3).unwrap();
        let a = solve_recursion(&tree).unwrap();
        assert_eq!(a.values(), &[3.0, 2.0, 1.0]);
        assert_eq!(candidate_factor(&tree).unwrap().values(), &[3.0, 2.0, 1.0]);
    }

    #[test]
    fn fixed_rate_matches_annuity_formula() {
        let r: f64 = 0.1;
        let n = 6;
        let tree = ScenarioTree::fixed_rate(r, n).unwrap();
        let a = solve_recursion(&tree).unwrap();
        let cand = candidate_factor(&tree).unwrap();
        for (k, (&v, &w)) in a.values().iter().zip(cand.values()).enumerate() {
            let i = (k + 1) as i32;
            let oracle = if i == n as i32 {
                1.0
            } else {
                ((1.0 + r) - (1.0 + r).powi(i - n as i32)) / r
            };
            assert_abs_diff_eq!(v, oracle, epsilon = 1e-14);
            assert_abs_diff_eq!(w, oracle, epsilon = 1e-14);
        }
        let two = solve_recursion(&ScenarioTree::fixed_rate(r, 2).unwrap()).unwrap();
        assert_abs_diff_eq!(two.values()[0], 1.0 + 1.0 / 1.1, epsilon = 1e-15);
    }

    #[test]
    fn fixed_rate_consumption_is_level() {
        let tree = ScenarioTree::fixed_rate(0.04, 5).unwrap();
        let a = solve_recursion(&tree).unwrap();
        let states = evaluate(&tree, &a, 1.0);
        let level = 1.04 / a.values()[0];
        for s in &states[1..] {
            assert_abs_diff_eq!(s.c, level, epsilon = 1e-15);
        }
    }

    #[test]
    fn two_state_iid_tree_agrees_with_candidate() {
        let branch = vec![(0.2, 0.5), (-0.1, 0.5)];
        let tree = ScenarioTree::independent(&vec![branch; 3]).unwrap();
        let a = solve_recursion(&tree).unwrap();
        let c = candidate_factor(&tree).unwrap();
        for (x, y) in a.values().iter().zip(c.values()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-14);
        }
    }

    #[test]
    fn single_period_consumes_everything() {
        let tree = ScenarioTree::independent(&[vec![(0.3, 0.25), (-0.2, 0.75)]]).unwrap();
        let a = solve_recursion(&tree).unwrap();
        assert!(a.values().iter().all(|&v| v == 1.0));
        let check = martingale_verify(&tree, &a);
        assert_eq!(check.max_violation, 0.0);
        assert_eq!(check.max_terminal_wealth, 0.0);
        let states = evaluate(&tree, &a, 1.0);
        assert_eq!(states[1].c, 1.3);
    }

    #[test]
    fn dependence_breaks_the_candidate() {
        let tree = ScenarioTree::dependent_counterexample();
        let exact = solve_recursion(&tree).unwrap();
        let cand = candidate_factor(&tree).unwrap();
        let first: Vec<usize> = tree.node(0).children.clone();
        let gap = first
            .iter()
            .map(|&i| (exact.a(i).unwrap() - cand.a(i).unwrap()).abs())
            .fold(0.0, f64::max);
        assert!(gap > 1e-3, "gap {gap}");
        assert!(martingale_verify(&tree, &cand).max_violation > 1e-3);
        assert!(martingale_verify(&tree, &exact).max_violation <= 1e-13);
    }

    #[test]
    fn spec_round_trip() {
        let spec = NodeSpec {
            ret: 0.0,
            prob: 1.0,
            children: vec![
                NodeSpec {
                    ret: 0.1,
                    prob: 0.4,
                    children: vec![],
                },
                NodeSpec {
                    ret: -0.1,
                    prob: 0.6,
                    children: vec![],
                },
            ],
        };
        let tree = ScenarioTree::from_spec(&spec).unwrap();
        assert_eq!(tree.periods(), 1);
        assert_eq!(tree.len(), 3);
    }

    #[test]
    fn malformed_trees_are_rejected() {
        let leaf = |ret, prob| NodeSpec {
            ret,
            prob,
            children: vec![],
        };
        let root = |children| NodeSpec {
            ret: 0.0,
            prob: 1.0,
            children,
        };
        assert!(ScenarioTree::from_spec(&root(vec![leaf(0.1, 0.5), leaf(0.0, 0.4)])).is_err());
        assert!(ScenarioTree::from_spec(&root(vec![leaf(-1.0, 1.0)])).is_err());
        assert!(ScenarioTree::from_spec(&root(vec![])).is_err());
        let ragged = root(vec![
            NodeSpec {
                ret: 0.0,
                prob: 0.5,
                children: vec![leaf(0.1, 1.0)],
            },
            leaf(0.0, 0.5),
        ]);
        assert!(ScenarioTree::from_spec(&ragged).is_err());
    }

    #[test]
    fn total_loss_in_expectation_is_degenerate() {
        let tree = ScenarioTree::independent(&[vec![(0.0, 1.0)], vec![(-0.5, 1.0)]]).unwrap();
        assert!(solve_recursion(&tree).is_ok());
        // bypasses validation, which would reject R = -1
        let mut nodes = tree.clone();
        nodes.nodes[2].ret = -1.0;
        assert!(matches!(
            solve_recursion(&nodes),
            Err(McsError::DegenerateReturn { node: 1 })
        ));
        assert!(matches!(
            candidate_factor(&nodes),
            Err(McsError::DegenerateReturn { node: 1 })
        ));
    }
}
