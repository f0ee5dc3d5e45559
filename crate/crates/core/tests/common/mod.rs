#![allow(dead_code)]

use phylograd::{
    compress_patterns, simulate_alignment, Engine, RateCategories, RawAlignment, SitePatternAlignment,
    SubstitutionModel, Tree,
};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Jc,
    Hky,
    Gtr,
}

pub const MODEL_KINDS: [ModelKind; 3] = [ModelKind::Jc, ModelKind::Hky, ModelKind::Gtr];

pub fn random_frequencies<R: Rng>(rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..4).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

pub fn random_model<R: Rng>(rng: &mut R, kind: ModelKind) -> SubstitutionModel {
    match kind {
        ModelKind::Jc => SubstitutionModel::jc69(),
        ModelKind::Hky => SubstitutionModel::hky85(rng.random_range(0.5..6.0), &random_frequencies(rng)).unwrap(),
        ModelKind::Gtr => {
            let rates: Vec<f64> = (0..6).map(|_| rng.random_range(0.2..3.0)).collect();
            SubstitutionModel::gtr(&rates, &random_frequencies(rng)).unwrap()
        }
    }
}

pub fn random_categories<R: Rng>(rng: &mut R, count: usize) -> RateCategories {
    if count == 1 {
        RateCategories::single()
    } else {
        RateCategories::discrete_gamma(rng.random_range(0.3..2.0), count).unwrap()
    }
}

/// Coalescent topology with branch lengths redrawn uniformly from `range`.
pub fn random_tree<R: Rng>(rng: &mut R, n: usize, range: std::ops::Range<f64>) -> Tree {
    let mut tree = Tree::random_coalescent(n, rng).unwrap();
    let lengths: Vec<f64> = (0..tree.branch_count()).map(|_| rng.random_range(range.clone())).collect();
    tree.set_branch_lengths(&lengths).unwrap();
    tree
}

/// Uniformly random columns, occasionally with ambiguity codes or gaps.
pub fn random_alignment<R: Rng>(rng: &mut R, tree: &Tree, sites: usize) -> RawAlignment {
    const SYMBOLS: &[u8] = b"ACGTACGTACGTACGTRYN-";
    let rows = tree
        .tip_names()
        .iter()
        .map(|_| (0..sites).map(|_| SYMBOLS[rng.random_range(0..SYMBOLS.len())]).collect())
        .collect();
    RawAlignment::new(tree.tip_names().to_vec(), rows).unwrap()
}

pub struct Instance {
    pub tree: Tree,
    pub alignment: SitePatternAlignment,
    pub model: SubstitutionModel,
    pub categories: RateCategories,
}

impl Instance {
    pub fn engine(&self) -> Engine {
        Engine::new(self.tree.clone(), &self.alignment, self.model.clone(), self.categories.clone()).unwrap()
    }
}

/// Random tree, model and categories with data simulated under them.
pub fn simulated_instance<R: Rng>(
    rng: &mut R,
    n: usize,
    kind: ModelKind,
    categories: usize,
    sites: usize,
    range: std::ops::Range<f64>,
) -> Instance {
    let tree = random_tree(rng, n, range);
    let model = random_model(rng, kind);
    let categories = random_categories(rng, categories);
    let raw = simulate_alignment(&tree, &model, &categories, tree.branch_lengths(), sites, rng.random()).unwrap();
    Instance { alignment: compress_patterns(&raw), tree, model, categories }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs())
}

/// `|a - b| <= rel * max(|a|, |b|)`, or `|a - b| <= abs` for tiny values.
pub fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    let d = (a - b).abs();
    d <= abs || d <= rel * a.abs().max(b.abs())
}
