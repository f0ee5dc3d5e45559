//! Sequence alignments, site-pattern compression and forward simulation.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::substitution::{RateCategories, SubstitutionModel, NUCLEOTIDES};
use crate::tree::Tree;

/// Taxa and their aligned character rows, uppercased.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawAlignment {
    pub taxa: Vec<String>,
    pub rows: Vec<Vec<u8>>,
}

impl RawAlignment {
    pub fn new(taxa: Vec<String>, rows: Vec<Vec<u8>>) -> Result<Self> {
        if taxa.len() != rows.len() {
            return Err(Error::InvalidArgument("one row per taxon required".into()));
        }
        let mut seen = HashSet::new();
        for t in &taxa {
            if !seen.insert(t.as_str()) {
                return Err(Error::DuplicateTaxon(t.clone()));
            }
        }
        let rows: Vec<Vec<u8>> = rows.into_iter().map(|r| r.to_ascii_uppercase()).collect();
        let expected = rows.first().map_or(0, Vec::len);
        for (taxon, row) in taxa.iter().zip(&rows) {
            if row.len() != expected {
                return Err(Error::RaggedAlignment { taxon: taxon.clone(), expected, found: row.len() });
            }
            if let Some(col) = row.iter().position(|&c| nucleotide_partial(c).is_none()) {
                return Err(Error::UnknownCharacter {
                    taxon: taxon.clone(),
                    column: col,
                    character: row[col] as char,
                });
            }
        }
        Ok(Self { taxa, rows })
    }

    pub fn site_count(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn to_fasta(&self) -> String {
        let mut out = String::new();
        for (t, row) in self.taxa.iter().zip(&self.rows) {
            let _ = writeln!(out, ">{t}");
            for chunk in row.chunks(70) {
                out.push_str(std::str::from_utf8(chunk).expect("ascii"));
                out.push('\n');
            }
        }
        out
    }
}

/// Tip partial likelihood for a nucleotide character in A, C, G, T order.
/// Ambiguity codes map to the indicator of their member states; gaps and
/// unknowns map to all ones.
pub fn nucleotide_partial(c: u8) -> Option<[f64; 4]> {
    let members: &[usize] = match c.to_ascii_uppercase() {
        b'A' => &[0],
        b'C' => &[1],
        b'G' => &[2],
        b'T' | b'U' => &[3],
        b'R' => &[0, 2],
        b'Y' => &[1, 3],
        b'S' => &[1, 2],
        b'W' => &[0, 3],
        b'K' => &[2, 3],
        b'M' => &[0, 1],
        b'B' => &[1, 2, 3],
        b'D' => &[0, 2, 3],
        b'H' => &[0, 1, 3],
        b'V' => &[0, 1, 2],
        b'N' | b'?' | b'-' => &[0, 1, 2, 3],
        _ => return None,
    };
    let mut v = [0.0; 4];
    for &i in members {
        v[i] = 1.0;
    }
    Some(v)
}

pub fn parse_fasta(text: &str) -> Result<RawAlignment> {
    let mut taxa = Vec::new();
    let mut rows: Vec<Vec<u8>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with(';') {
            continue;
        }
        if let Some(header) = line.strip_prefix('>') {
            let name = header.split_whitespace().next().unwrap_or("");
            if name.is_empty() {
                return Err(Error::AlignmentParse { line: lineno + 1, message: "empty record name".into() });
            }
            taxa.push(name.to_string());
            rows.push(Vec::new());
        } else {
            let row = rows.last_mut().ok_or_else(|| Error::AlignmentParse {
                line: lineno + 1,
                message: "sequence data before the first `>` header".into(),
            })?;
            row.extend(line.bytes().filter(|c| !c.is_ascii_whitespace()));
        }
    }
    if taxa.is_empty() {
        return Err(Error::AlignmentParse { line: 0, message: "no records".into() });
    }
    RawAlignment::new(taxa, rows)
}

/// Relaxed sequential PHYLIP: a header `ntax nchar`, then one line per taxon
/// with the name, whitespace, and the sequence (internal spaces ignored).
pub fn parse_phylip(text: &str) -> Result<RawAlignment> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(Error::AlignmentParse { line: 0, message: "empty file".into() })?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::AlignmentParse { line: 1, message: "expected `ntax nchar` header".into() })?;
    let [ntax, nchar] = dims[..] else {
        return Err(Error::AlignmentParse { line: 1, message: "expected `ntax nchar` header".into() });
    };
    let mut taxa = Vec::with_capacity(ntax);
    let mut rows = Vec::with_capacity(ntax);
    for (lineno, line) in lines.take(ntax) {
        let mut parts = line.split_whitespace();
        let name = parts.next().expect("non-empty line");
        let row: Vec<u8> = parts.flat_map(str::bytes).collect();
        if row.len() != nchar {
            return Err(Error::AlignmentParse {
                line: lineno + 1,
                message: format!("`{name}` has {} characters, header says {nchar}", row.len()),
            });
        }
        taxa.push(name.to_string());
        rows.push(row);
    }
    if taxa.len() != ntax {
        return Err(Error::AlignmentParse { line: 0, message: format!("expected {ntax} taxa, found {}", taxa.len()) });
    }
    RawAlignment::new(taxa, rows)
}

/// Unique alignment columns with multiplicities and their tip partials.
#[derive(Debug, Clone, PartialEq)]
pub struct SitePatternAlignment {
    taxa: Vec<String>,
    state_count: usize,
    /// Characters of each pattern in taxon order; empty when the alignment
    /// was built directly from partials.
    columns: Vec<Vec<u8>>,
    weights: Vec<f64>,
    /// Per taxon, `pattern_count * state_count` values.
    tip_partials: Vec<Vec<f64>>,
}

impl SitePatternAlignment {
    /// Builds an alignment from tip partials for an arbitrary state count.
    /// `tip_partials[t]` holds `weights.len() * state_count` values.
    pub fn from_partials(
        taxa: Vec<String>,
        state_count: usize,
        tip_partials: Vec<Vec<f64>>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if state_count < 2 {
            return Err(Error::InvalidArgument("state count must be at least 2".into()));
        }
        if taxa.len() != tip_partials.len() {
            return Err(Error::InvalidArgument("one partial block per taxon required".into()));
        }
        let mut seen = HashSet::new();
        for t in &taxa {
            if !seen.insert(t.as_str()) {
                return Err(Error::DuplicateTaxon(t.clone()));
            }
        }
        if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument("pattern weights must be positive".into()));
        }
        for (t, p) in taxa.iter().zip(&tip_partials) {
            if p.len() != weights.len() * state_count {
                return Err(Error::RaggedAlignment {
                    taxon: t.clone(),
                    expected: weights.len() * state_count,
                    found: p.len(),
                });
            }
            if p.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
                return Err(Error::InvalidArgument(format!("partials for `{t}` must be nonnegative")));
            }
        }
        Ok(Self { taxa, state_count, columns: Vec::new(), weights, tip_partials })
    }

    pub fn taxa(&self) -> &[String] {
        &self.taxa
    }

    pub fn state_count(&self) -> usize {
        self.state_count
    }

    pub fn pattern_count(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Total number of sites represented.
    pub fn site_count(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn columns(&self) -> &[Vec<u8>] {
        &self.columns
    }

    pub fn tip_partials(&self, taxon: usize) -> &[f64] {
        &self.tip_partials[taxon]
    }

    /// `pattern,weight` CSV for debugging.
    pub fn pattern_csv(&self) -> String {
        let mut out = String::from("pattern,weight\n");
        for (s, w) in self.weights.iter().enumerate() {
            let label = match self.columns.get(s) {
                Some(c) => String::from_utf8_lossy(c).into_owned(),
                None => format!("#{s}"),
            };
            let _ = writeln!(out, "{label},{w}");
        }
        out
    }
}

/// Collapses identical columns. Columns compare by their characters, so an
/// `N` column and a `-` column stay distinct even though their partials
/// agree. Patterns keep first-occurrence order.
pub fn compress_patterns(raw: &RawAlignment) -> SitePatternAlignment {
    let mut index: HashMap<Vec<u8>, usize> = HashMap::new();
    let mut columns: Vec<Vec<u8>> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    for site in 0..raw.site_count() {
        let column: Vec<u8> = raw.rows.iter().map(|r| r[site]).collect();
        match index.get(&column) {
            Some(&p) => weights[p] += 1.0,
            None => {
                index.insert(column.clone(), columns.len());
                columns.push(column);
                weights.push(1.0);
            }
        }
    }
    let tip_partials = (0..raw.taxa.len())
        .map(|t| {
            columns
                .iter()
                .flat_map(|c| nucleotide_partial(c[t]).expect("validated character"))
                .collect()
        })
        .collect();
    SitePatternAlignment { taxa: raw.taxa.clone(), state_count: 4, columns, weights, tip_partials }
}

/// Simulates `site_count` i.i.d. nucleotide sites down the tree.
///
/// For each site a rate category is drawn, the root state is drawn from the
/// root distribution, and each child state from the row of
/// `exp(Q_i b_i c_l)` selected by its parent's state.
pub fn simulate_alignment(
    tree: &Tree,
    model: &SubstitutionModel,
    categories: &RateCategories,
    branch_lengths: &[f64],
    site_count: usize,
    seed: u64,
) -> Result<RawAlignment> {
    if site_count == 0 {
        return Err(Error::InvalidArgument("site_count must be at least 1".into()));
    }
    if model.state_count() != 4 {
        return Err(Error::InvalidModel("simulation emits nucleotides and needs four states".into()));
    }
    if branch_lengths.len() != tree.branch_count() {
        return Err(Error::InvalidArgument(format!(
            "expected {} branch lengths, got {}",
            tree.branch_count(),
            branch_lengths.len()
        )));
    }
    let m = 4;
    let l_count = categories.len();
    // cumulative transition rows per (branch, category)
    let mut cumulative = vec![0.0; tree.branch_count() * l_count * m * m];
    for branch in 0..tree.branch_count() {
        for (l, &c) in categories.rates().iter().enumerate() {
            let p = model.transition_matrix(branch, branch_lengths[branch], c)?;
            let base = (branch * l_count + l) * m * m;
            for j in 0..m {
                let mut acc = 0.0;
                for k in 0..m {
                    acc += p[(j, k)];
                    cumulative[base + j * m + k] = acc;
                }
            }
        }
    }
    let draw = |rng: &mut ChaCha8Rng, cdf: &[f64]| -> usize {
        let u: f64 = rng.random::<f64>() * cdf[cdf.len() - 1];
        cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1)
    };
    let root_cdf: Vec<f64> = model
        .root_distribution()
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    let cat_cdf: Vec<f64> = categories
        .probabilities()
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = tree.tip_count();
    let mut rows = vec![Vec::with_capacity(site_count); n];
    let mut state = vec![0usize; tree.node_count()];
    for _ in 0..site_count {
        let l = draw(&mut rng, &cat_cdf);
        for &node in tree.pre_order() {
            state[node] = match tree.parent(node) {
                None => draw(&mut rng, &root_cdf),
                Some(p) => {
                    let base = (node * l_count + l) * m * m + state[p] * m;
                    draw(&mut rng, &cumulative[base..base + m])
                }
            };
        }
        for (tip, row) in rows.iter_mut().enumerate() {
            row.push(NUCLEOTIDES[state[tip]] as u8);
        }
    }
    RawAlignment::new(tree.tip_names().to_vec(), rows)
}
