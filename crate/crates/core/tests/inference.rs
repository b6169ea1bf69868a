use partparse::evalbench::{random_instance, InstanceKind};
use partparse::featurestack::synth::noise_stack;
use partparse::grid::Grid;
use partparse::inference::{
    evaluate_energy, exact_parse, hard_constraint_violations, parse, parse_mixtures, parse_tree, rescale_point,
    Method, ParseDocument, Unaries,
};
use partparse::shapemodel::{CompNode, CompTree, LandmarkCounts, LeafType, MixtureModel, WeightVector};
use partparse::Error;
use proptest::prelude::*;

/// Minimum energy of the subtree at `id` placed at `(x, y)`, by plain recursion
/// over every split of the parent position.
fn subtree_min(tree: &CompTree, u: &Unaries, w: [f64; 2], id: usize, x: i64, y: i64) -> f64 {
    let (wd, ht) = (u.width() as i64, u.height() as i64);
    let node = tree.node(id);
    let part = node.part_score_channel.map_or(0.0, |c| *u.part[c].get(x as usize, y as usize));
    if let Some(t) = node.leaf_type {
        return u.leaf.get(t).get(x as usize, y as usize) + part;
    }
    let (a, b) = (node.children[0], node.children[1]);
    let d = node.delta.unwrap();
    let mut best = f64::INFINITY;
    for y1 in 0..ht {
        for x1 in 0..wd {
            let (x2, y2) = (2 * x - x1, 2 * y - y1);
            if x2 < 0 || y2 < 0 || x2 >= wd || y2 >= ht {
                continue;
            }
            let ex = (x2 - x1) as f64 - d[0];
            let ey = (y2 - y1) as f64 - d[1];
            let e = subtree_min(tree, u, w, a, x1, y1) + subtree_min(tree, u, w, b, x2, y2) + w[0] * ex * ex + w[1] * ey * ey;
            best = best.min(e);
        }
    }
    best + part
}

fn oracle_min(tree: &CompTree, u: &Unaries, w: [f64; 2]) -> f64 {
    let mut best = f64::INFINITY;
    for y in 0..u.height() as i64 {
        for x in 0..u.width() as i64 {
            best = best.min(subtree_min(tree, u, w, tree.root(), x, y));
        }
    }
    best
}

#[test]
fn exact_parse_matches_recursive_oracle() {
    for seed in 0..12 {
        for (grid, levels) in [(6, 2), (9, 3)] {
            let kind = if seed % 2 == 0 { InstanceKind::Noise } else { InstanceKind::SmoothWells };
            let inst = random_instance(grid, levels, seed, kind).unwrap();
            let r = parse_tree(&inst.tree, &inst.unaries, inst.w_def, Method::Exact).unwrap();
            let o = oracle_min(&inst.tree, &inst.unaries, inst.w_def);
            assert!((r.total_energy - o).abs() <= 1e-9 * (1.0 + o.abs()), "seed {seed}: {} vs {o}", r.total_energy);
        }
    }
}

#[test]
fn approximation_dominates_and_reevaluates() {
    for seed in 0..30 {
        let inst = random_instance(12, 3, 100 + seed, InstanceKind::SmoothWells).unwrap();
        let a = parse_tree(&inst.tree, &inst.unaries, inst.w_def, Method::Approximate).unwrap();
        let e = parse_tree(&inst.tree, &inst.unaries, inst.w_def, Method::Exact).unwrap();
        assert!(a.total_energy >= e.total_energy - 1e-9);
        for r in [&a, &e] {
            assert!(hard_constraint_violations(&inst.tree, &r.positions).is_empty());
            let again = evaluate_energy(&inst.tree, &inst.unaries, inst.w_def, &r.positions).unwrap();
            assert!((again - r.total_energy).abs() < 1e-9);
            assert!((r.dp_energy - r.total_energy).abs() <= 1e-9 * (1.0 + r.dp_energy.abs()));
        }
    }
}

fn flat_unaries(w: usize, h: usize) -> Unaries {
    let stack = noise_stack(w, h, 1, 1, 0);
    let mut u = Unaries::build(&stack, &WeightVector::zeros(1), 1).unwrap();
    for t in LeafType::all() {
        *u.leaf.get_mut(t) = Grid::filled(w, h, 0.0);
    }
    u
}

#[test]
fn single_leaf_well_is_found() {
    let t = LeafType::new(2, 0).unwrap();
    let tree = CompTree {
        nodes: vec![
            CompNode::leaf(0, t),
            CompNode::leaf(1, LeafType::new(3, 0).unwrap()),
            CompNode::composite(2, 2, 0, 1, [2.0, 2.0]),
        ],
    };
    let mut u = flat_unaries(9, 9);
    *u.leaf.get_mut(t).get_mut(3, 4) = -5.0;
    for m in [Method::Approximate, Method::Exact] {
        let r = parse_tree(&tree, &u, [1.0, 1.0], m).unwrap();
        assert_eq!(r.total_energy, -5.0);
        assert_eq!(r.positions[0], [3, 4]);
        assert_eq!(r.positions[1], [5, 6]);
        assert_eq!(r.root, [4, 5]);
    }
}

#[test]
fn infeasible_mixture_is_skipped() {
    let leaf = |i| CompNode::leaf(i, LeafType::new(0, 0).unwrap());
    let wide = CompTree {
        nodes: vec![leaf(0), leaf(1), CompNode::composite(2, 2, 0, 1, [40.0, 0.0])],
    };
    let narrow = CompTree {
        nodes: vec![leaf(0), leaf(1), CompNode::composite(2, 2, 0, 1, [2.0, 0.0])],
    };
    let mut u = flat_unaries(6, 6);
    // far offsets can still be placed with a deformation cost, so forbid the border
    for t in LeafType::all() {
        *u.leaf.get_mut(t) = Grid::from_fn(6, 6, |x, _| if x == 0 || x == 5 { f64::INFINITY } else { 0.0 });
    }
    let r = parse_mixtures(&[wide.clone(), narrow], &u, [1.0, 1.0], Method::Approximate).unwrap();
    assert_eq!(r.mixture_index, 1);
    assert!(r.per_mixture_energies[0].unwrap() > r.per_mixture_energies[1].unwrap());
    let blocked = Unaries {
        leaf: partparse::featurestack::LeafUnaryField::from_grids(
            LeafType::all().map(|_| Grid::filled(6, 6, f64::INFINITY)).collect(),
        )
        .unwrap(),
        part: vec![],
    };
    assert!(matches!(
        parse_mixtures(&[wide], &blocked, [1.0, 1.0], Method::Approximate),
        Err(Error::Infeasible(_))
    ));
}

fn two_leaf_model(channels: usize) -> MixtureModel {
    MixtureModel {
        grid_size: 16,
        square_side: 3,
        channels,
        landmark_counts: LandmarkCounts::default(),
        mixtures: vec![CompTree {
            nodes: vec![
                CompNode::leaf(0, LeafType::new(0, 0).unwrap()),
                CompNode::leaf(1, LeafType::new(4, 1).unwrap()),
                CompNode::composite(2, 2, 0, 1, [4.0, 0.0]),
            ],
        }],
    }
}

#[test]
fn exact_cap_and_channel_checks() {
    let m = two_leaf_model(2);
    let s = noise_stack(20, 20, 2, 1, 3);
    let w = WeightVector::initial(2);
    assert!(matches!(
        exact_parse(&m.mixtures[0], &s, &w, 3, 399),
        Err(Error::CapExceeded { size: 400, cap: 399 })
    ));
    assert!(exact_parse(&m.mixtures[0], &s, &w, 3, 400).is_ok());
    let s3 = noise_stack(20, 20, 3, 1, 3);
    assert!(matches!(parse(&m, &s3, &w), Err(Error::DimensionMismatch { .. })));
}

#[test]
fn parse_is_deterministic() {
    let m = two_leaf_model(2);
    let s = noise_stack(24, 18, 2, 1, 9);
    let w = WeightVector::initial(2);
    assert_eq!(parse(&m, &s, &w).unwrap(), parse(&m, &s, &w).unwrap());
}

#[test]
fn document_rescales_about_pixel_centers() {
    assert_eq!(rescale_point([3.0, 4.0], [1.0, 1.0]), [3.0, 4.0]);
    assert_eq!(rescale_point([0.0, 0.0], [2.0, 2.0]), [0.5, 0.5]);
    let inst = random_instance(12, 3, 4, InstanceKind::Noise).unwrap();
    let r = parse_tree(&inst.tree, &inst.unaries, inst.w_def, Method::Approximate).unwrap();
    // an unlabeled tree yields no part polygons
    let doc = ParseDocument::from_result(&r, [2.0, 2.0]).unwrap();
    assert_eq!(doc.landmarks.len(), r.landmarks.len());
    assert_eq!(doc.landmarks[0], rescale_point(r.landmarks[0], [2.0, 2.0]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn constant_leaf_shift_moves_energy(seed in any::<u64>(), c in -3.0f64..3.0, exact in any::<bool>()) {
        let inst = random_instance(10, 3, seed, InstanceKind::Noise).unwrap();
        let method = if exact { Method::Exact } else { Method::Approximate };
        let base = parse_tree(&inst.tree, &inst.unaries, inst.w_def, method).unwrap();
        let t = inst.tree.node(inst.tree.leaves()[0]).leaf_type.unwrap();
        let mut u = inst.unaries.clone();
        for v in u.leaf.get_mut(t).as_mut_slice() {
            *v += c;
        }
        let shifted = parse_tree(&inst.tree, &u, inst.w_def, method).unwrap();
        prop_assert!((shifted.total_energy - base.total_energy - c).abs() < 1e-9);
        prop_assert!((shifted.score - base.score + c).abs() < 1e-9);
    }

    #[test]
    fn approximate_never_beats_exact(seed in any::<u64>()) {
        let inst = random_instance(9, 3, seed, InstanceKind::PixelWells).unwrap();
        let a = parse_tree(&inst.tree, &inst.unaries, inst.w_def, Method::Approximate).unwrap();
        let e = parse_tree(&inst.tree, &inst.unaries, inst.w_def, Method::Exact).unwrap();
        prop_assert!(a.total_energy >= e.total_energy - 1e-9);
    }
}
