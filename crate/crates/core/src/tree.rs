//! Rooted binary phylogenies.
//!
//! Nodes are numbered from zero: tips occupy `0..n`, internal nodes
//! `n..2n-1`, and the root is always the last node, `2n-2`. Every non-root
//! node owns the branch above it, so a branch vector of length `2n-2` is
//! indexed by the node at its lower end.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Exp};

use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    tip_names: Vec<String>,
    parent: Vec<Option<NodeId>>,
    children: Vec<Option<[NodeId; 2]>>,
    branch_length: Vec<f64>,
    node_time: Option<Vec<f64>>,
    post_order: Vec<NodeId>,
    pre_order: Vec<NodeId>,
}

impl Tree {
    /// Builds a tree from the child pairs of the internal nodes.
    ///
    /// `internal_children[k]` holds the children of node `n + k`; the last
    /// entry is the root. `branch_length` has one entry per node (the root
    /// entry is ignored and stored as zero).
    pub fn from_children(
        tip_names: Vec<String>,
        internal_children: &[[NodeId; 2]],
        branch_length: Vec<f64>,
    ) -> Result<Self> {
        let n = tip_names.len();
        if n < 2 {
            return Err(Error::InvalidTree(format!("need at least two tips, got {n}")));
        }
        if internal_children.len() != n - 1 {
            return Err(Error::InvalidTree(format!(
                "{n} tips need {} internal nodes, got {}",
                n - 1,
                internal_children.len()
            )));
        }
        let node_count = 2 * n - 1;
        if branch_length.len() != node_count {
            return Err(Error::InvalidTree(format!(
                "expected {node_count} branch lengths, got {}",
                branch_length.len()
            )));
        }
        let mut seen = HashSet::new();
        for name in &tip_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::DuplicateTip(name.clone()));
            }
        }

        let mut parent = vec![None; node_count];
        let mut children = vec![None; node_count];
        for (k, pair) in internal_children.iter().enumerate() {
            let node = n + k;
            for &c in pair {
                if c >= node_count || c == node {
                    return Err(Error::InvalidTree(format!("bad child {c} of node {node}")));
                }
                if parent[c].is_some() {
                    return Err(Error::InvalidTree(format!("node {c} has two parents")));
                }
                parent[c] = Some(node);
            }
            children[node] = Some(*pair);
        }
        let root = node_count - 1;
        if parent[root].is_some() {
            return Err(Error::InvalidTree("last node must be the root".into()));
        }
        if let Some(orphan) = (0..root).find(|&i| parent[i].is_none()) {
            return Err(Error::InvalidTree(format!("node {orphan} is disconnected")));
        }

        let mut branch_length = branch_length;
        branch_length[root] = 0.0;
        for (i, &b) in branch_length.iter().enumerate() {
            if !b.is_finite() || b < 0.0 {
                return Err(Error::NegativeBranchLength { node: format!("node {i}"), length: b });
            }
        }

        let post_order = depth_first_post_order(&children, root);
        if post_order.len() != node_count {
            return Err(Error::InvalidTree("tree contains a cycle".into()));
        }
        let pre_order = post_order.iter().rev().copied().collect();
        Ok(Self { tip_names, parent, children, branch_length, node_time: None, post_order, pre_order })
    }

    pub fn tip_count(&self) -> usize {
        self.tip_names.len()
    }

    pub fn node_count(&self) -> usize {
        self.parent.len()
    }

    /// Number of branches, `2n - 2`.
    pub fn branch_count(&self) -> usize {
        self.node_count() - 1
    }

    pub fn root(&self) -> NodeId {
        self.node_count() - 1
    }

    pub fn is_tip(&self, node: NodeId) -> bool {
        node < self.tip_count()
    }

    pub fn tip_names(&self) -> &[String] {
        &self.tip_names
    }

    pub fn parent(&self, node: NodeId) -> Option<NodeId> {
        self.parent[node]
    }

    pub fn children(&self, node: NodeId) -> Option<[NodeId; 2]> {
        self.children[node]
    }

    /// The other child of this node's parent.
    pub fn sibling(&self, node: NodeId) -> Option<NodeId> {
        let [a, b] = self.children[self.parent[node]?]?;
        Some(if a == node { b } else { a })
    }

    pub fn branch_length(&self, node: NodeId) -> f64 {
        self.branch_length[node]
    }

    /// Branch lengths of all non-root nodes, indexed by node.
    pub fn branch_lengths(&self) -> &[f64] {
        &self.branch_length[..self.branch_count()]
    }

    pub fn set_branch_lengths(&mut self, lengths: &[f64]) -> Result<()> {
        if lengths.len() != self.branch_count() {
            return Err(Error::InvalidArgument(format!(
                "expected {} branch lengths, got {}",
                self.branch_count(),
                lengths.len()
            )));
        }
        if let Some((i, &b)) = lengths.iter().enumerate().find(|(_, b)| !b.is_finite() || **b < 0.0) {
            return Err(Error::NegativeBranchLength { node: format!("node {i}"), length: b });
        }
        self.branch_length[..lengths.len()].copy_from_slice(lengths);
        Ok(())
    }

    pub fn tree_length(&self) -> f64 {
        self.branch_lengths().iter().sum()
    }

    pub fn post_order(&self) -> &[NodeId] {
        &self.post_order
    }

    pub fn pre_order(&self) -> &[NodeId] {
        &self.pre_order
    }

    /// Replaces the post-order visitation sequence with another admissible
    /// one; the pre-order becomes its reverse.
    pub fn set_post_order(&mut self, order: Vec<NodeId>) -> Result<()> {
        if !is_admissible_post_order(self, &order) {
            return Err(Error::InvalidArgument("not a valid post-order".into()));
        }
        self.pre_order = order.iter().rev().copied().collect();
        self.post_order = order;
        Ok(())
    }

    pub fn node_times(&self) -> Option<&[f64]> {
        self.node_time.as_deref()
    }

    pub fn set_node_times(&mut self, times: Vec<f64>) -> Result<()> {
        if times.len() != self.node_count() {
            return Err(Error::InvalidArgument(format!(
                "expected {} node times, got {}",
                self.node_count(),
                times.len()
            )));
        }
        for i in 0..self.branch_count() {
            let p = self.parent[i].expect("non-root node has a parent");
            if !(times[i] > times[p]) {
                return Err(Error::InvalidTree(format!(
                    "node {i} (time {}) is not later than its parent (time {})",
                    times[i], times[p]
                )));
            }
        }
        self.node_time = Some(times);
        Ok(())
    }

    /// Assigns node times with the root at zero, treating branch lengths as
    /// durations.
    pub fn node_times_from_branch_lengths(&mut self) -> Result<()> {
        let mut times = vec![0.0; self.node_count()];
        for &node in &self.pre_order {
            if let Some(p) = self.parent[node] {
                times[node] = times[p] + self.branch_length[node];
            }
        }
        self.set_node_times(times)
    }

    /// Chronological durations `t_i - t_pa(i)` of every branch.
    pub fn branch_durations(&self) -> Result<Vec<f64>> {
        let times = self.node_time.as_ref().ok_or(Error::MissingNodeTimes)?;
        Ok((0..self.branch_count())
            .map(|i| times[i] - times[self.parent[i].expect("non-root")])
            .collect())
    }

    pub fn tip_index(&self, name: &str) -> Option<NodeId> {
        self.tip_names.iter().position(|t| t == name)
    }

    /// Number of edges on the longest root-to-tip path.
    pub fn height_in_edges(&self) -> usize {
        let mut depth = vec![0usize; self.node_count()];
        for &node in &self.pre_order {
            if let Some(p) = self.parent[node] {
                depth[node] = depth[p] + 1;
            }
        }
        depth.into_iter().max().unwrap_or(0)
    }

    /// Random topology and node times drawn from the Kingman coalescent with
    /// all tips sampled at the same time. Tip names are `t1..tn`.
    pub fn random_coalescent<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidTree(format!("need at least two tips, got {n}")));
        }
        let mut lineages: Vec<NodeId> = (0..n).collect();
        let mut height = vec![0.0; 2 * n - 1];
        let mut internal = Vec::with_capacity(n - 1);
        let mut now = 0.0;
        while lineages.len() > 1 {
            let k = lineages.len() as f64;
            let wait: f64 = Exp::new(k * (k - 1.0) / 2.0).expect("positive rate").sample(rng);
            now += wait;
            let a = lineages.swap_remove(rng.random_range(0..lineages.len()));
            let b = lineages.swap_remove(rng.random_range(0..lineages.len()));
            let node = n + internal.len();
            internal.push([a, b]);
            height[node] = now;
            lineages.push(node);
        }
        let root_height = now;
        let names = (1..=n).map(|i| format!("t{i}")).collect();
        let mut lengths = vec![0.0; 2 * n - 1];
        for (k, pair) in internal.iter().enumerate() {
            for &c in pair {
                lengths[c] = height[n + k] - height[c];
            }
        }
        let mut tree = Self::from_children(names, &internal, lengths)?;
        tree.set_node_times(height.iter().map(|h| root_height - h).collect())?;
        Ok(tree)
    }

    /// Maximally unbalanced tree `(((t1,t2),t3),...)` with equal branch
    /// lengths and node times.
    pub fn caterpillar(n: usize, branch_length: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidTree(format!("need at least two tips, got {n}")));
        }
        let mut internal = vec![[0, 1]];
        for tip in 2..n {
            internal.push([n + tip - 2, tip]);
        }
        let names = (1..=n).map(|i| format!("t{i}")).collect();
        let mut tree = Self::from_children(names, &internal, vec![branch_length; 2 * n - 1])?;
        if branch_length > 0.0 {
            tree.node_times_from_branch_lengths()?;
        }
        Ok(tree)
    }

    pub fn to_newick(&self) -> String {
        let mut out = String::new();
        self.write_subtree(self.root(), &mut out);
        out.push(';');
        out
    }

    fn write_subtree(&self, node: NodeId, out: &mut String) {
        match self.children[node] {
            Some([a, b]) => {
                out.push('(');
                self.write_subtree(a, out);
                out.push(',');
                self.write_subtree(b, out);
                out.push(')');
            }
            None => out.push_str(&quote_label(&self.tip_names[node])),
        }
        if node != self.root() {
            let _ = write!(out, ":{}", self.branch_length[node]);
        }
    }
}

fn depth_first_post_order(children: &[Option<[NodeId; 2]>], root: NodeId) -> Vec<NodeId> {
    let mut order = Vec::with_capacity(children.len());
    let mut stack = vec![(root, false)];
    let mut guard = 0usize;
    while let Some((node, expanded)) = stack.pop() {
        guard += 1;
        if guard > 4 * children.len() {
            break;
        }
        match children[node] {
            Some([a, b]) if !expanded => {
                stack.push((node, true));
                stack.push((b, false));
                stack.push((a, false));
            }
            _ => order.push(node),
        }
    }
    order
}

/// True when `order` lists every node exactly once with children before
/// parents.
pub fn is_admissible_post_order(tree: &Tree, order: &[NodeId]) -> bool {
    if order.len() != tree.node_count() {
        return false;
    }
    let mut position = vec![usize::MAX; tree.node_count()];
    for (idx, &node) in order.iter().enumerate() {
        if node >= tree.node_count() || position[node] != usize::MAX {
            return false;
        }
        position[node] = idx;
    }
    (0..tree.branch_count()).all(|i| position[i] < position[tree.parent(i).expect("non-root")])
}

fn quote_label(label: &str) -> String {
    if label.chars().any(|c| "()[]':;, \t\n".contains(c)) {
        format!("'{}'", label.replace('\'', "''"))
    } else {
        label.to_string()
    }
}

/// Parses a single rooted binary tree in Newick format.
///
/// Tips are numbered in left-to-right order and internal nodes in the order
/// their closing parenthesis is reached. Internal labels and a root branch
/// length are accepted and discarded; missing branch lengths default to 0.
pub fn parse_newick(text: &str) -> Result<Tree> {
    let mut parser = NewickParser { bytes: text.as_bytes(), pos: 0, tips: vec![], internals: vec![] };
    let root = parser.subtree()?;
    parser.skip_ws();
    if parser.peek() != Some(b';') {
        return Err(parser.error("expected `;`"));
    }
    parser.pos += 1;
    parser.skip_ws();
    if parser.pos != parser.bytes.len() {
        return Err(parser.error("trailing characters after `;`"));
    }
    if matches!(root, Parsed::Tip(_)) {
        return Err(Error::InvalidTree("a tree needs at least two tips".into()));
    }

    let n = parser.tips.len();
    let resolve = |p: Parsed| match p {
        Parsed::Tip(i) => i,
        Parsed::Internal(k) => n + k,
    };
    let mut lengths = vec![0.0; 2 * n - 1];
    let mut names = Vec::with_capacity(n);
    for (i, (name, len)) in parser.tips.into_iter().enumerate() {
        lengths[i] = len;
        names.push(name);
    }
    let mut internal_children = Vec::with_capacity(n - 1);
    for (k, (kids, len)) in parser.internals.into_iter().enumerate() {
        lengths[n + k] = len;
        internal_children.push([resolve(kids[0]), resolve(kids[1])]);
    }
    Tree::from_children(names, &internal_children, lengths)
}

#[derive(Clone, Copy)]
enum Parsed {
    Tip(usize),
    Internal(usize),
}

struct NewickParser<'a> {
    bytes: &'a [u8],
    pos: usize,
    tips: Vec<(String, f64)>,
    internals: Vec<([Parsed; 2], f64)>,
}

impl NewickParser<'_> {
    fn error(&self, message: &str) -> Error {
        Error::NewickSyntax { position: self.pos, message: message.to_string() }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        loop {
            match self.peek() {
                Some(c) if c.is_ascii_whitespace() => self.pos += 1,
                Some(b'[') => {
                    while let Some(c) = self.peek() {
                        self.pos += 1;
                        if c == b']' {
                            break;
                        }
                    }
                }
                _ => return,
            }
        }
    }

    fn subtree(&mut self) -> Result<Parsed> {
        self.skip_ws();
        if self.peek() == Some(b'(') {
            self.pos += 1;
            let mut kids = vec![self.subtree()?];
            loop {
                self.skip_ws();
                match self.peek() {
                    Some(b',') => {
                        self.pos += 1;
                        kids.push(self.subtree()?);
                    }
                    Some(b')') => {
                        self.pos += 1;
                        break;
                    }
                    _ => return Err(self.error("expected `,` or `)`")),
                }
            }
            if kids.len() != 2 {
                return Err(Error::NotBinary(kids.len()));
            }
            let label = self.label()?;
            let length = self.length(label.as_deref().unwrap_or("internal node"))?;
            self.internals.push(([kids[0], kids[1]], length));
            Ok(Parsed::Internal(self.internals.len() - 1))
        } else {
            let label = self.label()?.ok_or_else(|| self.error("expected tip label"))?;
            if self.tips.iter().any(|(t, _)| *t == label) {
                return Err(Error::DuplicateTip(label));
            }
            let length = self.length(&label)?;
            self.tips.push((label, length));
            Ok(Parsed::Tip(self.tips.len() - 1))
        }
    }

    fn label(&mut self) -> Result<Option<String>> {
        self.skip_ws();
        if self.peek() == Some(b'\'') {
            self.pos += 1;
            let mut label = Vec::new();
            loop {
                match self.peek() {
                    None => return Err(self.error("unterminated quoted label")),
                    Some(b'\'') if self.bytes.get(self.pos + 1) == Some(&b'\'') => {
                        label.push(b'\'');
                        self.pos += 2;
                    }
                    Some(b'\'') => {
                        self.pos += 1;
                        break;
                    }
                    Some(c) => {
                        label.push(c);
                        self.pos += 1;
                    }
                }
            }
            return String::from_utf8(label).map(Some).map_err(|_| self.error("label is not UTF-8"));
        }
        let start = self.pos;
        while let Some(c) = self.peek() {
            if b"()[]':;,".contains(&c) || c.is_ascii_whitespace() {
                break;
            }
            self.pos += 1;
        }
        if self.pos == start {
            return Ok(None);
        }
        let raw = std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| self.error("label is not UTF-8"))?;
        Ok(Some(raw.to_string()))
    }

    fn length(&mut self, node: &str) -> Result<f64> {
        self.skip_ws();
        if self.peek() != Some(b':') {
            return Ok(0.0);
        }
        self.pos += 1;
        self.skip_ws();
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_ascii_digit() || b"+-.eE".contains(&c) {
                self.pos += 1;
            } else {
                break;
            }
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii");
        let value: f64 = text.parse().map_err(|_| Error::NewickSyntax {
            position: start,
            message: format!("invalid branch length `{text}`"),
        })?;
        if value < 0.0 {
            return Err(Error::NegativeBranchLength { node: node.to_string(), length: value });
        }
        Ok(value)
    }
}
