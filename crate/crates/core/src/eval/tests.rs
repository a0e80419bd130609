use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn fixture(seed: u64, n: usize, dim: usize, classes: usize, role: Role, prefix: &str) -> EmbeddingSet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let features = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let modality = (0..n)
        .map(|_| if rng.random_bool(0.5) { Modality::Opt } else { Modality::Sar })
        .collect();
    let ids = (0..n).map(|i| format!("{prefix}{i:04}")).collect();
    EmbeddingSet::new(dim, features, labels, modality, vec![role; n], ids).unwrap()
}

/// Definition-level metrics: full sort of every admissible gallery item,
/// precision read off at each relevant position.
fn oracle(q: &EmbeddingSet<f64>, g: &EmbeddingSet<f64>, p: Protocol) -> (f64, [f64; 3], usize) {
    let spec = p.spec();
    let mut aps = Vec::new();
    let mut hits = [0.0; 3];
    for i in 0..q.len() {
        if spec.query_modality.is_some_and(|m| m != q.modality[i]) {
            continue;
        }
        let mut items: Vec<(f64, String, bool)> = Vec::new();
        for j in 0..g.len() {
            if spec.gallery_modality.is_some_and(|m| m != g.modality[j]) || g.ids[j] == q.ids[i] {
                continue;
            }
            let mut s = 0.0;
            for k in 0..q.dim {
                s += (q.features[i * q.dim + k] - g.features[j * g.dim + k]).powi(2);
            }
            items.push((s.sqrt(), g.ids[j].clone(), g.labels[j] == q.labels[i]));
        }
        items.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let r = items.iter().filter(|x| x.2).count();
        if r == 0 {
            continue;
        }
        let mut precisions = Vec::new();
        for (pos, it) in items.iter().enumerate() {
            if it.2 {
                let rel_so_far = items[..=pos].iter().filter(|x| x.2).count();
                precisions.push(rel_so_far as f64 / (pos + 1) as f64);
            }
        }
        aps.push(precisions.iter().sum::<f64>() / r as f64);
        for (slot, k) in [1usize, 3, 5].iter().enumerate() {
            if items.iter().take(*k).any(|x| x.2) {
                hits[slot] += 1.0;
            }
        }
    }
    let n = aps.len().max(1) as f64;
    (
        aps.iter().sum::<f64>() / n,
        [hits[0] / n, hits[1] / n, hits[2] / n],
        aps.len(),
    )
}

#[test]
fn ap_examples() {
    assert_eq!(average_precision(&[true, true, true]), Some(1.0));
    assert!((average_precision(&[true, false, true, false]).unwrap() - 5.0 / 6.0).abs() < 1e-15);
    assert!((average_precision(&[false, false, true]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(average_precision(&[false, false]), None);
}

#[test]
fn random_baseline_matches_enumeration() {
    // Average AP over all placements of r relevant items among n.
    fn enumerate(n: usize, r: usize) -> f64 {
        let mut total = 0.0;
        let mut count = 0.0;
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != r {
                continue;
            }
            let rel: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
            total += average_precision(&rel).unwrap();
            count += 1.0;
        }
        total / count
    }
    for n in 1..9 {
        for r in 1..=n {
            assert!((random_ranking_ap(n, r) - enumerate(n, r)).abs() < 1e-12, "n={n} r={r}");
        }
    }
}

#[test]
fn duplicate_ranks_first_and_filters_apply() {
    let g = EmbeddingSet::new(
        2,
        vec![0.0, 0.0, 1.0, 1.0, 0.5, 0.5, 3.0, 3.0],
        vec![0, 1, 0, 1],
        vec![Modality::Opt, Modality::Sar, Modality::Sar, Modality::Opt],
        vec![Role::Gallery; 4],
        vec!["g0".into(), "g1".into(), "g2".into(), "g3".into()],
    )
    .unwrap();
    let q = [1.0, 1.0];
    let all = rank_gallery(&q, "q", &g, &Protocol::AllToAll.spec());
    assert_eq!(all[0].0, 1);
    let o2s = rank_gallery(&q, "q", &g, &Protocol::OptToSar.spec());
    assert!(o2s.iter().all(|&(j, _)| g.modality[j] == Modality::Sar));
    assert_eq!(o2s.len(), 2);
    // Self exclusion by id.
    let own = rank_gallery(&q, "g1", &g, &Protocol::AllToAll.spec());
    assert!(own.iter().all(|&(j, _)| j != 1));
}

#[test]
fn ties_break_by_sample_id() {
    let g = EmbeddingSet::new(
        1,
        vec![1.0, -1.0, 1.0],
        vec![0, 0, 0],
        vec![Modality::Opt; 3],
        vec![Role::Gallery; 3],
        vec!["c".into(), "b".into(), "a".into()],
    )
    .unwrap();
    let r = rank_gallery(&[0.0], "q", &g, &Protocol::AllToAll.spec());
    let ids: Vec<&str> = r.iter().map(|&(j, _)| g.ids[j].as_str()).collect();
    assert_eq!(ids, ["a", "b", "c"]);
}

#[test]
fn one_hot_embeddings_give_perfect_rank1() {
    let n = 12;
    let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
    let features = labels
        .iter()
        .flat_map(|&l| (0..4).map(move |k| if k == l { 1.0 } else { 0.0 }))
        .collect();
    let set = EmbeddingSet::new(
        4,
        features,
        labels,
        vec![Modality::Opt; n],
        vec![Role::Query; n],
        (0..n).map(|i| format!("s{i}")).collect(),
    )
    .unwrap();
    let m = evaluate(&set, &set, Protocol::AllToAll, EvalOptions::default()).unwrap();
    assert_eq!(m.rank1, 1.0);
    assert_eq!(m.map, 1.0);
    assert_eq!(m.queries, n);
}

#[test]
fn queries_without_relevant_items_are_excluded() {
    let q = EmbeddingSet::new(
        1,
        vec![0.0, 1.0],
        vec![0, 9],
        vec![Modality::Opt; 2],
        vec![Role::Query; 2],
        vec!["q0".into(), "q1".into()],
    )
    .unwrap();
    let g = EmbeddingSet::new(
        1,
        vec![0.5, 2.0],
        vec![0, 1],
        vec![Modality::Sar; 2],
        vec![Role::Gallery; 2],
        vec!["g0".into(), "g1".into()],
    )
    .unwrap();
    let m = evaluate(&q, &g, Protocol::OptToSar, EvalOptions::default()).unwrap();
    assert_eq!((m.queries, m.excluded), (1, 1));
    assert_eq!(m.map, 1.0);
}

#[test]
fn metrics_match_oracle_on_random_fixtures() {
    for seed in 0..100u64 {
        let q = fixture(seed, 50, 6, 5, Role::Query, "q");
        let g = fixture(seed + 1000, 40, 6, 5, Role::Gallery, "g");
        for p in Protocol::ALL {
            for block in [1, 7, 64] {
                let m = evaluate(&q, &g, p, EvalOptions { block }).unwrap();
                let (map, ranks, valid) = oracle(&q, &g, p);
                assert_eq!(m.queries, valid);
                assert!((m.map - map).abs() <= 1e-12);
                assert!((m.rank1 - ranks[0]).abs() <= 1e-12);
                assert!((m.rank3 - ranks[1]).abs() <= 1e-12);
                assert!((m.rank5 - ranks[2]).abs() <= 1e-12);
                assert!(m.rank1 <= m.rank3 && m.rank3 <= m.rank5);
            }
        }
    }
}

#[test]
fn all_to_all_over_shared_set_excludes_self() {
    let s = fixture(3, 30, 4, 3, Role::Query, "s");
    let m = evaluate(&s, &s, Protocol::AllToAll, EvalOptions::default()).unwrap();
    let (map, _, _) = oracle(&s, &s, Protocol::AllToAll);
    assert!((m.map - map).abs() <= 1e-12);
    assert!(m.map < 1.0);
}

proptest! {
    #[test]
    fn gallery_permutation_invariance(seed in 0u64..1000) {
        let q = fixture(seed, 10, 5, 3, Role::Query, "q");
        let g = fixture(seed + 7, 15, 5, 3, Role::Gallery, "g");
        let mut order: Vec<usize> = (0..g.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let gp = g.permuted(&order);
        for p in Protocol::ALL {
            let a = evaluate(&q, &g, p, EvalOptions::default()).unwrap();
            let b = evaluate(&q, &gp, p, EvalOptions::default()).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn uniform_scaling_invariance(seed in 0u64..1000, c in prop::sample::select(vec![0.25f64, 2.0, 8.0])) {
        let q = fixture(seed, 10, 5, 3, Role::Query, "q");
        let g = fixture(seed + 9, 15, 5, 3, Role::Gallery, "g");
        let scale = |s: &EmbeddingSet<f64>| EmbeddingSet {
            features: s.features.iter().map(|v| v * c).collect(),
            ..s.clone()
        };
        for p in Protocol::ALL {
            let a = evaluate(&q, &g, p, EvalOptions::default()).unwrap();
            let b = evaluate(&scale(&q), &scale(&g), p, EvalOptions::default()).unwrap();
            prop_assert_eq!((a.map, a.rank1, a.rank3, a.rank5), (b.map, b.rank1, b.rank3, b.rank5));
        }
    }

    #[test]
    fn metrics_in_unit_interval(seed in 0u64..1000) {
        let q = fixture(seed, 12, 3, 4, Role::Query, "q");
        let g = fixture(seed + 3, 12, 3, 4, Role::Gallery, "g");
        for p in Protocol::ALL {
            let m = evaluate(&q, &g, p, EvalOptions::default()).unwrap();
            for v in [m.map, m.rank1, m.rank3, m.rank5] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(m.rank1 <= m.rank3 && m.rank3 <= m.rank5);
        }
    }
}

#[test]
fn repeated_evaluation_is_bit_identical() {
    let q = fixture(1, 20, 8, 4, Role::Query, "q");
    let g = fixture(2, 30, 8, 4, Role::Gallery, "g");
    let a = evaluate(&q, &g, Protocol::AllToAll, EvalOptions::default()).unwrap();
    let b = evaluate(&q, &g, Protocol::AllToAll, EvalOptions::default()).unwrap();
    assert_eq!(a.map.to_bits(), b.map.to_bits());
}

#[test]
fn embedding_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = fixture(4, 9, 3, 3, Role::Gallery, "x");
    s.roles[0] = Role::Query;
    let stem = dir.path().join("emb");
    write_embeddings(&s, &stem).unwrap();
    let back = read_embeddings(&stem).unwrap();
    assert_eq!(back, s);
    let m = evaluate(&s, &s, Protocol::AllToAll, EvalOptions::default()).unwrap();
    let path = dir.path().join("m.json");
    write_metrics_json(&[m], &path).unwrap();
    assert_eq!(read_metrics_json(&path).unwrap(), vec![m]);
    write_metrics_csv(&[m], &dir.path().join("m.csv")).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
    assert!(csv.starts_with("protocol,map"));
    let lists = ranked_lists(&s, &s, Protocol::AllToAll, 3);
    assert_eq!(lists.len(), 9);
    assert!(lists.iter().all(|l| l.entries.len() == 3));
    write_ranked_lists(&lists, &dir.path().join("r.jsonl")).unwrap();
}

#[test]
fn misaligned_sets_are_rejected() {
    assert!(EmbeddingSet::<f64>::new(2, vec![0.0; 3], vec![0], vec![Modality::Opt], vec![Role::Query], vec!["a".into()]).is_err());
    assert!(EmbeddingSet::new(1, vec![f64::NAN], vec![0], vec![Modality::Opt], vec![Role::Query], vec!["a".into()]).is_err());
}
