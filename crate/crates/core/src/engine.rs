//! Likelihood, branch-length gradient and diagonal Hessian by a post-order
//! pass followed by a single pre-order pass.
//!
//! For node `i` with post-order partial `p_i` (probability of the data below
//! `i` given its state) and pre-order partial `q_i` (joint probability of the
//! state at `i` and the data not below it), every node satisfies
//! `Pr(Y) = p_i' q_i`. Since `q_i = P_i' [q_k o (P_j p_j)]` for parent `k`
//! and sibling `j`, differentiating through `P_i = exp(Q_i b_i)` gives
//! `d Pr(Y) / d b_i = q_i' Q_i p_i`, and `q_i' Q_i^2 p_i` for the second
//! derivative. All of them are accumulated while the pre-order partials are
//! built, so the whole gradient costs two traversals.
//!
//! Partials are stored per node as `pattern x category x state` blocks and
//! renormalized per `(node, pattern)` with accumulated log scalers kept
//! separately for the two passes.

use crate::alignment::SitePatternAlignment;
use crate::error::{Error, Result};
use crate::substitution::{RateCategories, SubstitutionModel};
use crate::tree::Tree;

/// Partials whose largest entry drops below this value are renormalized.
pub const RESCALE_THRESHOLD: f64 = 1e-150;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Rescaling {
    /// Renormalize a `(node, pattern)` block when its maximum falls below
    /// [`RESCALE_THRESHOLD`].
    #[default]
    Threshold,
    /// Renormalize every block.
    Always,
    Never,
}

impl Rescaling {
    #[inline(always)]
    fn needed(self, max: f64) -> bool {
        max > 0.0
            && match self {
                Rescaling::Threshold => max < RESCALE_THRESHOLD,
                Rescaling::Always => true,
                Rescaling::Never => false,
            }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub log_likelihood: f64,
    /// `d log Pr(Y) / d b_i` for every non-root node `i`.
    pub branch_gradient: Vec<f64>,
    /// `d^2 log Pr(Y) / d b_i^2`, when requested.
    pub hessian_diagonal: Option<Vec<f64>>,
    pub pattern_count: usize,
    pub category_count: usize,
}

/// Per-node partial-likelihood buffers.
#[derive(Debug, Clone, Default)]
pub struct PartialCache {
    post: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    /// `P_i p_i` for every non-root node, kept from the post-order pass for
    /// the sibling updates of the pre-order pass.
    branch_top: Vec<Vec<f64>>,
    post_log_scale: Vec<Vec<f64>>,
    pre_log_scale: Vec<Vec<f64>>,
    /// Row-major `exp(Q_i b_i c_l)` per branch and category.
    transitions: Vec<f64>,
    transition_dirty: Vec<bool>,
    post_valid: bool,
    pre_valid: bool,
}

pub struct Engine {
    tree: Tree,
    model: SubstitutionModel,
    categories: RateCategories,
    weights: Vec<f64>,
    states: usize,
    patterns: usize,
    rescaling: Rescaling,
    cache: PartialCache,
    node_visits: u64,
}

#[inline(always)]
fn mat_vec(p: &[f64], v: &[f64], out: &mut [f64], m: usize) {
    for (j, o) in out[..m].iter_mut().enumerate() {
        let row = &p[j * m..j * m + m];
        *o = row.iter().zip(&v[..m]).map(|(a, b)| a * b).sum();
    }
}

#[inline(always)]
fn mat_t_vec(p: &[f64], v: &[f64], out: &mut [f64], m: usize) {
    out[..m].fill(0.0);
    for j in 0..m {
        let vj = v[j];
        let row = &p[j * m..j * m + m];
        for (o, a) in out[..m].iter_mut().zip(row) {
            *o += a * vj;
        }
    }
}

#[inline(always)]
fn quad_form(q: &[f64], x: &[f64], y: &[f64], m: usize) -> f64 {
    // y' Q x
    let mut total = 0.0;
    for j in 0..m {
        let row = &q[j * m..j * m + m];
        let qx: f64 = row.iter().zip(&x[..m]).map(|(a, b)| a * b).sum();
        total += y[j] * qx;
    }
    total
}

/// Neumaier-compensated sum, so that pattern-weighted totals stay accurate
/// to a few ulps regardless of the pattern count.
pub(crate) fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut carry = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            carry += (sum - t) + v;
        } else {
            carry += (v - t) + sum;
        }
        sum = t;
    }
    sum + carry
}

#[inline(always)]
fn dot(a: &[f64], b: &[f64], m: usize) -> f64 {
    a[..m].iter().zip(&b[..m]).map(|(x, y)| x * y).sum()
}

impl Engine {
    /// Binds alignment taxa to tree tips by name.
    pub fn new(
        tree: Tree,
        alignment: &SitePatternAlignment,
        model: SubstitutionModel,
        categories: RateCategories,
    ) -> Result<Self> {
        let states = model.state_count();
        if alignment.state_count() != states {
            return Err(Error::Binding(format!(
                "alignment has {} states but the model has {states}",
                alignment.state_count()
            )));
        }
        if let Some(count) = model.branch_generator_count() {
            if count != tree.branch_count() {
                return Err(Error::Binding(format!(
                    "{count} branch generators for {} branches",
                    tree.branch_count()
                )));
            }
        }
        if alignment.taxa().len() != tree.tip_count() {
            return Err(Error::Binding(format!(
                "alignment has {} taxa, tree has {} tips",
                alignment.taxa().len(),
                tree.tip_count()
            )));
        }
        let patterns = alignment.pattern_count();
        let l_count = categories.len();
        let block = patterns * l_count * states;
        let node_count = tree.node_count();

        let mut post = vec![Vec::new(); node_count];
        for (tip, name) in tree.tip_names().iter().enumerate() {
            let taxon = alignment
                .taxa()
                .iter()
                .position(|t| t == name)
                .ok_or_else(|| Error::Binding(format!("tree tip `{name}` has no sequence")))?;
            let src = alignment.tip_partials(taxon);
            let mut expanded = Vec::with_capacity(block);
            for s in 0..patterns {
                for _ in 0..l_count {
                    expanded.extend_from_slice(&src[s * states..(s + 1) * states]);
                }
            }
            post[tip] = expanded;
        }
        for buffer in post.iter_mut().skip(tree.tip_count()) {
            *buffer = vec![0.0; block];
        }

        let branches = tree.branch_count();
        let cache = PartialCache {
            post,
            pre: Vec::new(),
            branch_top: vec![vec![0.0; block]; branches],
            post_log_scale: vec![vec![0.0; patterns]; node_count],
            pre_log_scale: Vec::new(),
            transitions: vec![0.0; branches * l_count * states * states],
            transition_dirty: vec![true; branches],
            post_valid: false,
            pre_valid: false,
        };
        Ok(Self {
            tree,
            model,
            categories,
            weights: alignment.weights().to_vec(),
            states,
            patterns,
            rescaling: Rescaling::default(),
            cache,
            node_visits: 0,
        })
    }

    pub fn tree(&self) -> &Tree {
        &self.tree
    }

    pub fn model(&self) -> &SubstitutionModel {
        &self.model
    }

    pub fn categories(&self) -> &RateCategories {
        &self.categories
    }

    pub fn pattern_count(&self) -> usize {
        self.patterns
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn rescaling(&self) -> Rescaling {
        self.rescaling
    }

    pub fn set_rescaling(&mut self, mode: Rescaling) {
        if mode != self.rescaling {
            self.rescaling = mode;
            self.invalidate();
        }
    }

    /// Nodes visited by traversals since construction or the last reset.
    pub fn node_visits(&self) -> u64 {
        self.node_visits
    }

    pub fn reset_node_visits(&mut self) {
        self.node_visits = 0;
    }

    pub fn branch_lengths(&self) -> &[f64] {
        self.tree.branch_lengths()
    }

    /// Updates branch lengths; only branches whose length changed get new
    /// transition matrices.
    pub fn set_branch_lengths(&mut self, lengths: &[f64]) -> Result<()> {
        let old = self.tree.branch_lengths().to_vec();
        self.tree.set_branch_lengths(lengths)?;
        for (i, (a, b)) in old.iter().zip(lengths).enumerate() {
            if a != b {
                self.cache.transition_dirty[i] = true;
            }
        }
        self.invalidate();
        Ok(())
    }

    fn invalidate(&mut self) {
        self.cache.post_valid = false;
        self.cache.pre_valid = false;
    }

    fn update_transitions(&mut self) -> Result<()> {
        let m2 = self.states * self.states;
        let l_count = self.categories.len();
        for branch in 0..self.tree.branch_count() {
            if !self.cache.transition_dirty[branch] {
                continue;
            }
            let b = self.tree.branch_length(branch);
            let generator = self.model.generator(branch);
            for (l, &c) in self.categories.rates().iter().enumerate() {
                let start = (branch * l_count + l) * m2;
                generator.fill_transition(b * c, &mut self.cache.transitions[start..start + m2])?;
            }
            self.cache.transition_dirty[branch] = false;
        }
        Ok(())
    }

    /// Row-major transition matrix of `branch` under category `category`.
    pub fn transition(&mut self, branch: usize, category: usize) -> Result<&[f64]> {
        self.update_transitions()?;
        let m2 = self.states * self.states;
        let start = (branch * self.categories.len() + category) * m2;
        Ok(&self.cache.transitions[start..start + m2])
    }

    pub fn post_order_pass(&mut self) -> Result<()> {
        self.update_transitions()?;
        match self.states {
            4 => self.post_order_impl::<4>(),
            _ => self.post_order_impl::<0>(),
        }
        self.cache.post_valid = true;
        self.cache.pre_valid = false;
        Ok(())
    }

    fn post_order_impl<const M: usize>(&mut self) {
        let m = if M == 0 { self.states } else { M };
        let l_count = self.categories.len();
        let m2 = m * m;
        let block = l_count * m;
        let order = self.tree.post_order().to_vec();
        let cache = &mut self.cache;
        for node in order {
            self.node_visits += 1;
            let Some([i, j]) = self.tree.children(node) else { continue };
            let mut out = std::mem::take(&mut cache.post[node]);
            let mut top_i = std::mem::take(&mut cache.branch_top[i]);
            let mut top_j = std::mem::take(&mut cache.branch_top[j]);
            let mut scale = std::mem::take(&mut cache.post_log_scale[node]);
            let (p_i, p_j) = (&cache.post[i], &cache.post[j]);
            let trans_i = &cache.transitions[i * l_count * m2..(i + 1) * l_count * m2];
            let trans_j = &cache.transitions[j * l_count * m2..(j + 1) * l_count * m2];
            for s in 0..self.patterns {
                let mut max = 0.0f64;
                for l in 0..l_count {
                    let o = s * block + l * m;
                    let pm = &trans_i[l * m2..(l + 1) * m2];
                    mat_vec(pm, &p_i[o..o + m], &mut top_i[o..o + m], m);
                    let pm = &trans_j[l * m2..(l + 1) * m2];
                    mat_vec(pm, &p_j[o..o + m], &mut top_j[o..o + m], m);
                    for x in 0..m {
                        let v = top_i[o + x] * top_j[o + x];
                        out[o + x] = v;
                        max = max.max(v);
                    }
                }
                let mut log_scale = cache.post_log_scale[i][s] + cache.post_log_scale[j][s];
                if self.rescaling.needed(max) {
                    let inv = 1.0 / max;
                    for v in &mut out[s * block..(s + 1) * block] {
                        *v *= inv;
                    }
                    log_scale += max.ln();
                }
                scale[s] = log_scale;
            }
            cache.post[node] = out;
            cache.branch_top[i] = top_i;
            cache.branch_top[j] = top_j;
            cache.post_log_scale[node] = scale;
        }
    }

    fn ensure_post(&mut self) -> Result<()> {
        if !self.cache.post_valid {
            self.post_order_pass()?;
        }
        Ok(())
    }

    /// Per-pattern log-likelihoods (unweighted).
    pub fn site_log_likelihoods(&mut self) -> Result<Vec<f64>> {
        self.ensure_post()?;
        let root = self.tree.root();
        let m = self.states;
        let l_count = self.categories.len();
        let pi = self.model.root_distribution();
        let probs = self.categories.probabilities();
        let p_root = &self.cache.post[root];
        (0..self.patterns)
            .map(|s| {
                let site: f64 = (0..l_count)
                    .map(|l| probs[l] * dot(pi, &p_root[(s * l_count + l) * m..], m))
                    .sum();
                if site > 0.0 && site.is_finite() {
                    Ok(site.ln() + self.cache.post_log_scale[root][s])
                } else if site == 0.0 {
                    Err(Error::ZeroLikelihood { pattern: s })
                } else {
                    Err(Error::NonFinite(format!("site likelihood of pattern {s}")))
                }
            })
            .collect()
    }

    /// `sum_s w_s log sum_l Pr(c_l) pi' p_root(s, l)`, running the post-order
    /// pass when the cache is stale.
    pub fn log_likelihood(&mut self) -> Result<f64> {
        let sites = self.site_log_likelihoods()?;
        Ok(compensated_sum(sites.iter().zip(&self.weights).map(|(ll, w)| w * ll)))
    }

    /// Builds the pre-order partials without accumulating derivatives.
    pub fn pre_order_pass(&mut self) -> Result<()> {
        if !self.cache.post_valid {
            return Err(Error::StaleCache);
        }
        self.pre_order_dispatch(None)
    }

    fn pre_order_dispatch(&mut self, sink: Option<(&mut [f64], Option<&mut [f64]>)>) -> Result<()> {
        let result = match self.states {
            4 => self.pre_order_impl::<4>(sink),
            _ => self.pre_order_impl::<0>(sink),
        };
        self.cache.pre_valid = result.is_ok();
        result
    }

    fn pre_order_impl<const M: usize>(
        &mut self,
        mut sink: Option<(&mut [f64], Option<&mut [f64]>)>,
    ) -> Result<()> {
        let m = if M == 0 { self.states } else { M };
        let l_count = self.categories.len();
        let m2 = m * m;
        let block = l_count * m;
        let node_count = self.tree.node_count();
        let cache = &mut self.cache;
        if cache.pre.len() != node_count {
            cache.pre = vec![vec![0.0; self.patterns * block]; node_count];
            cache.pre_log_scale = vec![vec![0.0; self.patterns]; node_count];
        }
        let probs = self.categories.probabilities();
        let rates = self.categories.rates();
        let pi = self.model.root_distribution();
        let mut scratch = vec![0.0; m];
        let order = self.tree.pre_order().to_vec();

        for node in order {
            self.node_visits += 1;
            let Some(parent) = self.tree.parent(node) else {
                let q = &mut cache.pre[node];
                for chunk in q.chunks_exact_mut(m) {
                    chunk.copy_from_slice(pi);
                }
                cache.pre_log_scale[node].fill(0.0);
                continue;
            };
            let sibling = self.tree.sibling(node).expect("binary tree");
            let mut out = std::mem::take(&mut cache.pre[node]);
            let mut scale = std::mem::take(&mut cache.pre_log_scale[node]);
            let q_parent = &cache.pre[parent];
            let top_sibling = &cache.branch_top[sibling];
            let p_node = &cache.post[node];
            let trans = &cache.transitions[node * l_count * m2..(node + 1) * l_count * m2];
            let generator = self.model.generator(node);
            let (q_rate, q_rate2) = (generator.flat(), generator.squared_flat());

            let mut grad = 0.0;
            let mut hess = 0.0;
            for s in 0..self.patterns {
                let mut max = 0.0f64;
                for l in 0..l_count {
                    let o = s * block + l * m;
                    for x in 0..m {
                        scratch[x] = q_parent[o + x] * top_sibling[o + x];
                    }
                    mat_t_vec(&trans[l * m2..(l + 1) * m2], &scratch, &mut out[o..o + m], m);
                    for &v in &out[o..o + m] {
                        max = max.max(v);
                    }
                }
                let mut log_scale =
                    cache.pre_log_scale[parent][s] + cache.post_log_scale[sibling][s];
                if self.rescaling.needed(max) {
                    let inv = 1.0 / max;
                    for v in &mut out[s * block..(s + 1) * block] {
                        *v *= inv;
                    }
                    log_scale += max.ln();
                }
                scale[s] = log_scale;

                if let Some((_, hessian)) = sink.as_mut() {
                    let mut like = 0.0;
                    let mut first = 0.0;
                    let mut second = 0.0;
                    for l in 0..l_count {
                        let o = s * block + l * m;
                        let (p, q) = (&p_node[o..o + m], &out[o..o + m]);
                        like += probs[l] * dot(p, q, m);
                        first += probs[l] * rates[l] * quad_form(q_rate, p, q, m);
                        if hessian.is_some() {
                            second += probs[l] * rates[l] * rates[l] * quad_form(q_rate2, p, q, m);
                        }
                    }
                    if !(like > 0.0) {
                        cache.pre[node] = out;
                        cache.pre_log_scale[node] = scale;
                        return Err(Error::ZeroLikelihood { pattern: s });
                    }
                    let ratio = first / like;
                    grad += self.weights[s] * ratio;
                    if hessian.is_some() {
                        hess += self.weights[s] * (second / like - ratio * ratio);
                    }
                }
            }
            if let Some((gradient, hessian)) = sink.as_mut() {
                gradient[node] = grad;
                if let Some(h) = hessian.as_mut() {
                    h[node] = hess;
                }
            }
            cache.pre[node] = out;
            cache.pre_log_scale[node] = scale;
        }
        Ok(())
    }

    /// Log-likelihood, branch gradient and optionally the Hessian diagonal,
    /// all with respect to branch lengths.
    pub fn gradient(&mut self, with_hessian: bool) -> Result<GradientReport> {
        self.ensure_post()?;
        let log_likelihood = self.log_likelihood()?;
        let branches = self.tree.branch_count();
        let mut gradient = vec![0.0; branches + 1];
        let mut hessian = with_hessian.then(|| vec![0.0; branches + 1]);
        self.pre_order_dispatch(Some((&mut gradient, hessian.as_deref_mut())))?;
        gradient.truncate(branches);
        if let Some(h) = hessian.as_mut() {
            h.truncate(branches);
        }
        if let Some(i) = gradient.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {i}")));
        }
        Ok(GradientReport {
            log_likelihood,
            branch_gradient: gradient,
            hessian_diagonal: hessian,
            pattern_count: self.patterns,
            category_count: self.categories.len(),
        })
    }

    pub fn hessian_diagonal(&mut self) -> Result<Vec<f64>> {
        Ok(self.gradient(true)?.hessian_diagonal.expect("requested"))
    }

    /// Log-likelihood recomputed from `p_k' q_k` at `node`, which must agree
    /// with the root value at every node.
    pub fn node_log_likelihood(&mut self, node: usize) -> Result<f64> {
        self.ensure_post()?;
        if !self.cache.pre_valid {
            self.pre_order_pass()?;
        }
        let m = self.states;
        let l_count = self.categories.len();
        let probs = self.categories.probabilities();
        let (p, q) = (&self.cache.post[node], &self.cache.pre[node]);
        let mut terms = Vec::with_capacity(self.patterns);
        for s in 0..self.patterns {
            let site: f64 = (0..l_count)
                .map(|l| {
                    let o = (s * l_count + l) * m;
                    probs[l] * dot(&p[o..], &q[o..], m)
                })
                .sum();
            if !(site > 0.0) {
                return Err(Error::ZeroLikelihood { pattern: s });
            }
            terms.push(
                self.weights[s] * (site.ln() + self.cache.post_log_scale[node][s] + self.cache.pre_log_scale[node][s]),
            );
        }
        Ok(compensated_sum(terms))
    }

    /// Stored post-order partial of `(node, pattern, category)` and its
    /// accumulated log scaler.
    pub fn post_partial(&mut self, node: usize, pattern: usize, category: usize) -> Result<(Vec<f64>, f64)> {
        self.ensure_post()?;
        let o = (pattern * self.categories.len() + category) * self.states;
        Ok((
            self.cache.post[node][o..o + self.states].to_vec(),
            self.cache.post_log_scale[node][pattern],
        ))
    }

    /// Stored pre-order partial of `(node, pattern, category)` and its
    /// accumulated log scaler.
    pub fn pre_partial(&mut self, node: usize, pattern: usize, category: usize) -> Result<(Vec<f64>, f64)> {
        self.ensure_post()?;
        if !self.cache.pre_valid {
            self.pre_order_pass()?;
        }
        let o = (pattern * self.categories.len() + category) * self.states;
        Ok((
            self.cache.pre[node][o..o + self.states].to_vec(),
            self.cache.pre_log_scale[node][pattern],
        ))
    }
}
