mod common;

use common::*;
use phylograd::clock::ClockParameterization;
use phylograd::tree::is_admissible_post_order;
use phylograd::{compress_patterns, parse_fasta, parse_newick, Engine, RawAlignment, SitePatternAlignment, Tree};
use phylograd::alignment::nucleotide_partial;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn label() -> impl Strategy<Value = String> {
    prop_oneof![
        "[A-Za-z][A-Za-z0-9_.]{0,8}",
        "[A-Za-z ]{1,6}'?[a-z(),:]{0,3}",
    ]
}

fn tree_strategy() -> impl Strategy<Value = Tree> {
    (2usize..20, any::<u64>(), prop::collection::vec(label(), 20)).prop_filter_map(
        "distinct labels",
        |(n, seed, labels)| {
            let mut names: Vec<String> = labels.into_iter().take(n).collect();
            names.sort();
            names.dedup();
            if names.len() < n {
                return None;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tree = random_tree(&mut rng, n, 0.0..3.0);
            let internal: Vec<[usize; 2]> = (n..tree.node_count()).map(|k| tree.children(k).unwrap()).collect();
            Tree::from_children(names, &internal, tree.branch_lengths().iter().copied().chain([0.0]).collect()).ok()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn newick_round_trip(tree in tree_strategy()) {
        let text = tree.to_newick();
        let back = parse_newick(&text).unwrap();
        prop_assert_eq!(back.to_newick(), text);
        prop_assert_eq!(back.tip_count(), tree.tip_count());
        for (k, name) in tree.tip_names().iter().enumerate() {
            let j = back.tip_index(name).unwrap();
            prop_assert_eq!(back.branch_length(j), tree.branch_length(k));
        }
        prop_assert!((back.tree_length() - tree.tree_length()).abs() <= 1e-12 * tree.tree_length().max(1.0));
    }

    #[test]
    fn compression_preserves_columns_and_likelihood(seed in any::<u64>(), n in 2usize..8, sites in 1usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tree = random_tree(&mut rng, n, 0.01..1.0);
        let raw = random_alignment(&mut rng, &tree, sites);
        let aln = compress_patterns(&raw);
        prop_assert_eq!(aln.site_count(), sites as f64);
        prop_assert!(aln.pattern_count() <= sites);
        let mut distinct: Vec<&Vec<u8>> = aln.columns().iter().collect();
        distinct.sort();
        distinct.dedup();
        prop_assert_eq!(distinct.len(), aln.pattern_count());
        for s in 0..sites {
            let column: Vec<u8> = raw.rows.iter().map(|r| r[s]).collect();
            prop_assert!(aln.columns().contains(&column));
        }
        // uncompressed: one pattern per site with unit weight
        let partials: Vec<Vec<f64>> = raw
            .rows
            .iter()
            .map(|r| r.iter().flat_map(|c| nucleotide_partial(*c).unwrap()).collect())
            .collect();
        let flat = SitePatternAlignment::from_partials(raw.taxa.clone(), 4, partials, vec![1.0; sites]).unwrap();
        let model = random_model(&mut rng, ModelKind::Hky);
        let cats = random_categories(&mut rng, 4);
        let a = Engine::new(tree.clone(), &aln, model.clone(), cats.clone()).unwrap().log_likelihood().unwrap();
        let b = Engine::new(tree, &flat, model, cats).unwrap().log_likelihood().unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn fasta_round_trip(seed in any::<u64>(), n in 2usize..6, sites in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tree = random_tree(&mut rng, n, 0.01..1.0);
        let raw = random_alignment(&mut rng, &tree, sites);
        let back = parse_fasta(&raw.to_fasta()).unwrap();
        prop_assert_eq!(back, raw);
    }

    #[test]
    fn clock_transform_round_trip(
        log_mu in -12.0f64..3.0,
        log_psi in -5.0f64..2.0,
        log_eps in prop::collection::vec(-4.0f64..4.0, 1..30),
    ) {
        let mut x = vec![log_mu, log_psi];
        x.extend(&log_eps);
        let c = ClockParameterization::from_unconstrained(&x).unwrap();
        let y = c.to_unconstrained();
        for (a, b) in x.iter().zip(&y) {
            prop_assert!((a - b).abs() <= 1e-14 * a.abs().max(1.0));
        }
        let back = ClockParameterization::from_unconstrained(&y).unwrap();
        prop_assert!((back.mu - c.mu).abs() <= 1e-14 * c.mu);
    }

    #[test]
    fn post_order_admissibility(seed in any::<u64>(), n in 2usize..30, swaps in prop::collection::vec((0usize..60, 0usize..60), 0..5)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tree = random_tree(&mut rng, n, 0.1..0.2);
        prop_assert!(is_admissible_post_order(&tree, tree.post_order()));
        let mut order = tree.post_order().to_vec();
        let len = order.len();
        for (a, b) in swaps {
            order.swap(a % len, b % len);
        }
        // admissible exactly when every child precedes its parent
        let mut position = vec![0; order.len()];
        for (i, &k) in order.iter().enumerate() {
            position[k] = i;
        }
        let expected = (0..tree.branch_count()).all(|c| position[c] < position[tree.parent(c).unwrap()]);
        prop_assert_eq!(is_admissible_post_order(&tree, &order), expected);
        let mut t2 = tree.clone();
        prop_assert_eq!(t2.set_post_order(order).is_ok(), expected);
    }
}

#[test]
fn raw_alignment_rejects_ragged_rows() {
    let r = RawAlignment::new(vec!["a".into(), "b".into()], vec![b"ACG".to_vec(), b"AC".to_vec()]);
    assert!(r.is_err());
}
