//! Local surrogate: a Gini decision tree fitted on the labeled latent
//! neighborhood, with factual and counterfactual rule extraction.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::aae::LatentCode;
use crate::classifier::ClassLabel;
use crate::error::{Error, Result};
use crate::neighborhood::Neighborhood;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
}

impl Op {
    pub fn symbol(self) -> &'static str {
        match self {
            Op::Le => "<=",
            Op::Gt => ">",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub feature: usize,
    pub op: Op,
    pub threshold: f64,
}

impl Condition {
    pub fn holds(&self, value: f64) -> bool {
        match self.op {
            Op::Le => value <= self.threshold,
            Op::Gt => value > self.threshold,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {:.2}", self.feature, self.op.symbol(), self.threshold)
    }
}

/// A conjunction of conditions implying a class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub conditions: Vec<Condition>,
    pub consequent: ClassLabel,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let conds: Vec<String> = self.conditions.iter().map(Condition::to_string).collect();
        write!(f, "{{{}}} -> {{class: {}}}", conds.join(", "), self.consequent.code)
    }
}

impl Rule {
    /// `(lower, upper)` bounds the rule places on `feature`: values must be
    /// `> lower` and `<= upper`.
    pub fn interval(&self, feature: usize) -> (f64, f64) {
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for c in self.conditions.iter().filter(|c| c.feature == feature) {
            match c.op {
                Op::Gt => lo = lo.max(c.threshold),
                Op::Le => hi = hi.min(c.threshold),
            }
        }
        (lo, hi)
    }

    /// Number of conditions `h` fails.
    pub fn violations(&self, h: &LatentCode) -> usize {
        self.conditions.iter().filter(|c| !c.holds(h.0.get(c.feature).copied().unwrap_or(f64::NAN))).count()
    }

    pub fn record(&self) -> RuleRecord {
        RuleRecord { conditions: self.conditions.clone(), consequent: self.consequent.clone(), text: self.to_string() }
    }
}

/// Structured rule with its textual rendering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleRecord {
    pub conditions: Vec<Condition>,
    pub consequent: ClassLabel,
    pub text: String,
}

/// True iff every condition holds for `h`.
pub fn satisfies(r: &Rule, h: &LatentCode) -> Result<bool> {
    for c in &r.conditions {
        let v = h.0.get(c.feature).ok_or_else(|| {
            Error::Invalid(format!("condition on feature {} but code has length {}", c.feature, h.dim()))
        })?;
        if !c.holds(*v) {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeConfig {
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self { max_depth: 8, min_leaf: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Node {
    /// Values `<= threshold` go to `left`.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        class: usize,
        counts: Vec<usize>,
    },
}

/// Binary tree stored as an arena; node 0 is the root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateTree {
    pub nodes: Vec<Node>,
    pub class_codes: Vec<String>,
    pub num_features: usize,
}

/// A leaf with the full-path rule that reaches it.
#[derive(Clone, Debug, PartialEq)]
pub struct LeafInfo {
    pub node: usize,
    /// Position in left-to-right leaf order.
    pub order: usize,
    pub rule: Rule,
    pub size: usize,
    pub purity: f64,
}

fn gini(counts: &[usize], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

fn majority(counts: &[usize]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

/// Merges path conditions into the tightest interval per feature, keeping
/// the order in which each `(feature, op)` first appears.
fn merge_path(path: &[Condition]) -> Vec<Condition> {
    let mut out: Vec<Condition> = Vec::new();
    for c in path {
        match out.iter_mut().find(|o| o.feature == c.feature && o.op == c.op) {
            Some(o) => {
                o.threshold = match c.op {
                    Op::Le => o.threshold.min(c.threshold),
                    Op::Gt => o.threshold.max(c.threshold),
                }
            }
            None => out.push(*c),
        }
    }
    out
}

impl SurrogateTree {
    /// Fits a tree on `(x, y)`; rows of `x` all have length `num_features`.
    pub fn fit(x: &[Vec<f64>], y: &[usize], class_codes: &[String], cfg: &TreeConfig) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::Invalid(format!("{} rows for {} labels", x.len(), y.len())));
        }
        let num_features = x[0].len();
        if x.iter().any(|r| r.len() != num_features) {
            return Err(Error::Shape("ragged feature rows".into()));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= class_codes.len()) {
            return Err(Error::Invalid(format!("label {bad} outside {} classes", class_codes.len())));
        }
        let mut tree = SurrogateTree { nodes: Vec::new(), class_codes: class_codes.to_vec(), num_features };
        let idx: Vec<usize> = (0..x.len()).collect();
        tree.grow(x, y, idx, 0, cfg.max_depth, cfg.min_leaf.max(1));
        Ok(tree)
    }

    fn grow(
        &mut self,
        x: &[Vec<f64>],
        y: &[usize],
        idx: Vec<usize>,
        depth: usize,
        max_depth: usize,
        min_leaf: usize,
    ) -> usize {
        let k = self.class_codes.len();
        let mut counts = vec![0; k];
        for &i in &idx {
            counts[y[i]] += 1;
        }
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { class: majority(&counts), counts: counts.clone() });
        let n = idx.len();
        let parent = gini(&counts, n);
        if depth >= max_depth || parent == 0.0 || n < 2 * min_leaf {
            return id;
        }
        let mut best: Option<(f64, usize, f64)> = None;
        let mut sorted = idx.clone();
        for f in 0..self.num_features {
            sorted.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
            let mut left = vec![0usize; k];
            let mut right = counts.clone();
            for pos in 0..n - 1 {
                let c = y[sorted[pos]];
                left[c] += 1;
                right[c] -= 1;
                let (a, b) = (x[sorted[pos]][f], x[sorted[pos + 1]][f]);
                let nl = pos + 1;
                if a == b || nl < min_leaf || n - nl < min_leaf {
                    continue;
                }
                let score = (nl as f64 * gini(&left, nl) + (n - nl) as f64 * gini(&right, n - nl)) / n as f64;
                if best.is_none_or(|(s, _, _)| score < s) {
                    let mut t = a + (b - a) / 2.0;
                    if t >= b {
                        t = a;
                    }
                    best = Some((score, f, t));
                }
            }
        }
        let Some((score, feature, threshold)) = best else {
            return id;
        };
        if score >= parent {
            return id;
        }
        let (li, ri): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| x[i][feature] <= threshold);
        let left = self.grow(x, y, li, depth + 1, max_depth, min_leaf);
        let right = self.grow(x, y, ri, depth + 1, max_depth, min_leaf);
        self.nodes[id] = Node::Split { feature, threshold, left, right };
        id
    }

    fn label(&self, class: usize) -> ClassLabel {
        ClassLabel { id: class, code: self.class_codes[class].clone() }
    }

    /// Leaf reached by `h` and the raw conditions along the way.
    fn route(&self, h: &[f64]) -> (usize, Vec<Condition>) {
        let mut node = 0;
        let mut path = Vec::new();
        loop {
            match &self.nodes[node] {
                Node::Leaf { .. } => return (node, path),
                Node::Split { feature, threshold, left, right } => {
                    let go_left = h[*feature] <= *threshold;
                    path.push(Condition {
                        feature: *feature,
                        op: if go_left { Op::Le } else { Op::Gt },
                        threshold: *threshold,
                    });
                    node = if go_left { *left } else { *right };
                }
            }
        }
    }

    fn leaf_class(&self, node: usize) -> usize {
        match &self.nodes[node] {
            Node::Leaf { class, .. } => *class,
            Node::Split { .. } => unreachable!("route ends at a leaf"),
        }
    }

    fn check_len(&self, h: &LatentCode) -> Result<()> {
        if h.dim() != self.num_features {
            return Err(Error::Shape(format!("tree uses {} features, code has {}", self.num_features, h.dim())));
        }
        Ok(())
    }

    pub fn predict(&self, h: &LatentCode) -> Result<usize> {
        self.check_len(h)?;
        Ok(self.leaf_class(self.route(&h.0).0))
    }

    pub fn depth(&self) -> usize {
        fn d(t: &SurrogateTree, n: usize) -> usize {
            match &t.nodes[n] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + d(t, *left).max(d(t, *right)),
            }
        }
        d(self, 0)
    }

    /// Every leaf in left-to-right order with its merged full-path rule.
    pub fn leaves(&self) -> Vec<LeafInfo> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, Vec::<Condition>::new())];
        while let Some((node, path)) = stack.pop() {
            match &self.nodes[node] {
                Node::Leaf { class, counts } => {
                    let size: usize = counts.iter().sum();
                    let purity = if size == 0 { 0.0 } else { counts[*class] as f64 / size as f64 };
                    out.push(LeafInfo {
                        node,
                        order: out.len(),
                        rule: Rule { conditions: merge_path(&path), consequent: self.label(*class) },
                        size,
                        purity,
                    });
                }
                Node::Split { feature, threshold, left, right } => {
                    let mut r = path.clone();
                    r.push(Condition { feature: *feature, op: Op::Gt, threshold: *threshold });
                    stack.push((*right, r));
                    let mut l = path;
                    l.push(Condition { feature: *feature, op: Op::Le, threshold: *threshold });
                    stack.push((*left, l));
                }
            }
        }
        out
    }
}

/// Fits the surrogate on the valid instances of `nbh`.
pub fn fit_surrogate(nbh: &Neighborhood, cfg: &TreeConfig, class_codes: &[String]) -> Result<SurrogateTree> {
    let (x, y): (Vec<Vec<f64>>, Vec<usize>) = nbh.valid_instances().map(|i| (i.code.0.clone(), i.label.id)).unzip();
    let mut distinct = y.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::DegenerateLocality {
            class: distinct.first().copied().unwrap_or(nbh.reference.id),
            neighborhood: Box::new(nbh.clone()),
        });
    }
    SurrogateTree::fit(&x, &y, class_codes, cfg)
}

/// The merged conditions along `z`'s root-to-leaf path and the leaf class.
pub fn extract_rule(tree: &SurrogateTree, z: &LatentCode) -> Result<Rule> {
    tree.check_len(z)?;
    let (leaf, path) = tree.route(&z.0);
    Ok(Rule { conditions: merge_path(&path), consequent: tree.label(tree.leaf_class(leaf)) })
}

/// Rules of leaves predicting a class other than `z`'s leaf, ordered by
/// how many conditions `z` violates, then purity and size (both
/// descending), then leaf order; at most `limit`.
pub fn extract_counterfactual_rules(tree: &SurrogateTree, z: &LatentCode, limit: usize) -> Result<Vec<Rule>> {
    let own = tree.predict(z)?;
    counterfactual_rules_against(tree, z, own, limit)
}

/// Same ordering as [`extract_counterfactual_rules`], over leaves whose
/// class differs from `class`.
pub fn counterfactual_rules_against(
    tree: &SurrogateTree,
    z: &LatentCode,
    class: usize,
    limit: usize,
) -> Result<Vec<Rule>> {
    tree.check_len(z)?;
    let own = class;
    let mut cands: Vec<(usize, LeafInfo)> =
        tree.leaves().into_iter().filter(|l| l.rule.consequent.id != own).map(|l| (l.rule.violations(z), l)).collect();
    cands.sort_by(|(va, a), (vb, b)| {
        va.cmp(vb).then(b.purity.total_cmp(&a.purity)).then(b.size.cmp(&a.size)).then(a.order.cmp(&b.order))
    });
    Ok(cands.into_iter().take(limit).map(|(_, l)| l.rule).collect())
}

/// Fraction of valid instances whose tree prediction matches the black-box label.
pub fn fidelity(tree: &SurrogateTree, nbh: &Neighborhood) -> Result<f64> {
    let mut total = 0usize;
    let mut agree = 0usize;
    for inst in nbh.valid_instances() {
        total += 1;
        if tree.predict(&inst.code)? == inst.label.id {
            agree += 1;
        }
    }
    if total == 0 {
        return Err(Error::Invalid("fidelity of an empty neighborhood".into()));
    }
    Ok(agree as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn codes(n: usize) -> Vec<String> {
        ["NV", "BCC", "AK", "BKL"][..n].iter().map(|s| s.to_string()).collect()
    }

    fn cond(feature: usize, op: Op, threshold: f64) -> Condition {
        Condition { feature, op, threshold }
    }

    #[test]
    fn separable_clusters_give_a_stump() {
        let x: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![if i < 10 { -1.0 - i as f64 * 0.01 } else { 1.0 + i as f64 * 0.01 }, (i % 3) as f64])
            .collect();
        let y: Vec<usize> = (0..20).map(|i| usize::from(i >= 10)).collect();
        let t = SurrogateTree::fit(&x, &y, &codes(2), &TreeConfig::default()).unwrap();
        assert_eq!(t.depth(), 1);
        assert!(matches!(t.nodes[0], Node::Split { feature: 0, .. }));
    }

    #[test]
    fn boundary_value_goes_left() {
        let t = SurrogateTree {
            nodes: vec![
                Node::Split { feature: 0, threshold: 0.5, left: 1, right: 2 },
                Node::Leaf { class: 0, counts: vec![3, 0] },
                Node::Leaf { class: 1, counts: vec![0, 2] },
            ],
            class_codes: codes(2),
            num_features: 1,
        };
        let z = LatentCode(vec![0.5]);
        let r = extract_rule(&t, &z).unwrap();
        assert_eq!(r.conditions, vec![cond(0, Op::Le, 0.5)]);
        assert_eq!(r.consequent.id, 0);
        let cf = extract_counterfactual_rules(&t, &z, 5).unwrap();
        assert_eq!(cf.len(), 1);
        assert_eq!(cf[0].conditions, vec![cond(0, Op::Gt, 0.5)]);
    }

    #[test]
    fn single_leaf_tree() {
        let x = vec![vec![0.0], vec![0.0]];
        let t = SurrogateTree::fit(&x, &[1, 1], &codes(2), &TreeConfig::default()).unwrap();
        let r = extract_rule(&t, &LatentCode(vec![3.0])).unwrap();
        assert!(r.conditions.is_empty());
        assert_eq!(r.consequent.id, 1);
        assert!(extract_counterfactual_rules(&t, &LatentCode(vec![3.0]), 3).unwrap().is_empty());
    }

    #[test]
    fn memorizes_distinct_points() {
        let x: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64, ((i * 7) % 5) as f64]).collect();
        let y: Vec<usize> = (0..12).map(|i| (i * 5 % 3) as usize).collect();
        let cfg = TreeConfig { max_depth: 64, min_leaf: 1 };
        let t = SurrogateTree::fit(&x, &y, &codes(3), &cfg).unwrap();
        for (r, &l) in x.iter().zip(&y) {
            assert_eq!(t.predict(&LatentCode(r.clone())).unwrap(), l);
        }
    }

    #[test]
    fn rule_text_and_satisfaction() {
        let nv = ClassLabel { id: 0, code: "NV".into() };
        let r = Rule {
            conditions: vec![
                cond(7, Op::Gt, -1.01),
                cond(99, Op::Le, 0.07),
                cond(225, Op::Gt, -0.75),
                cond(255, Op::Le, -0.02),
                cond(238, Op::Gt, 0.15),
                cond(137, Op::Le, -0.14),
            ],
            consequent: nv,
        };
        assert_eq!(
            r.to_string(),
            "{7 > -1.01, 99 <= 0.07, 225 > -0.75, 255 <= -0.02, 238 > 0.15, 137 <= -0.14} -> {class: NV}"
        );
        let zero = LatentCode(vec![0.0; 256]);
        assert!(!satisfies(&r, &zero).unwrap());
        assert_eq!(r.violations(&zero), 3);
        let counter =
            Rule { conditions: vec![cond(7, Op::Le, -1.01)], consequent: ClassLabel { id: 1, code: "BCC".into() } };
        assert_eq!(counter.to_string(), "{7 <= -1.01} -> {class: BCC}");
        let mut h = zero.clone();
        h.0[7] = -2.0;
        assert!(satisfies(&counter, &h).unwrap());
        assert!(satisfies(&Rule { conditions: vec![], consequent: counter.consequent.clone() }, &h).unwrap());
        assert!(satisfies(&r, &LatentCode(vec![0.0; 8])).is_err());
    }

    #[test]
    fn merge_keeps_tightest_bounds() {
        let merged =
            merge_path(&[cond(3, Op::Le, 1.0), cond(1, Op::Gt, 0.0), cond(3, Op::Le, 0.5), cond(1, Op::Gt, -1.0)]);
        assert_eq!(merged, vec![cond(3, Op::Le, 0.5), cond(1, Op::Gt, 0.0)]);
    }
}
