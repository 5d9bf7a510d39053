use ndarray::{Array2, Array3};
use proptest::prelude::*;

use weakseg::hmm::{constrained_viterbi, ClassPrior, LengthModel};
use weakseg::losses::{forward_loss, logadd_all_paths, loss_backward, loss_value, LossKind};
use weakseg::metrics::{evaluate, segment_overlaps};
use weakseg::oracle::{brute_force_viterbi, enumerate_logadds, enumerated_loss, rel_dev};
use weakseg::scalar::log_sum_exp;
use weakseg::scorer::{scorer_forward, ScorerKind, ScorerParams};
use weakseg::seggraph::{best_valid_path, build_graph, enumerate_paths, path_energy, PathAssignment};
use weakseg::{EdgeEnergies, FrameLogPosteriors, FrameSequence, Lattice, Segmentation, Transcript};

fn posteriors(t: usize, k: usize) -> impl Strategy<Value = FrameLogPosteriors<f64>> {
    prop::collection::vec(-4.0f64..4.0, t * k).prop_map(move |v| {
        FrameLogPosteriors::from_logits(Array2::from_shape_vec((t, k), v).unwrap().view()).unwrap()
    })
}

fn labels_without_repeats(n: usize, k: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0..k, n).prop_map(move |mut v| {
        for i in 1..v.len() {
            if v[i] == v[i - 1] {
                v[i] = (v[i] + 1) % k;
            }
        }
        v
    })
}

/// Posteriors, an anchor segmentation over them, and a window.
fn graph_case() -> impl Strategy<Value = (FrameLogPosteriors<f64>, Segmentation, usize)> {
    (2usize..=4, 1usize..=4, 0usize..=6)
        .prop_flat_map(|(k, n, w)| (Just(k), Just(n), Just(w), n..=n + 10))
        .prop_flat_map(|(k, n, w, t)| {
            (
                posteriors(t, k),
                labels_without_repeats(n, k),
                prop::collection::btree_set(1..t.max(2), n - 1..=n - 1),
                Just(w),
                Just(t),
            )
        })
        .prop_filter_map("cuts inside the video", |(post, labels, inner, w, t)| {
            let mut cuts = vec![0];
            cuts.extend(inner.into_iter().filter(|&c| c < t));
            cuts.push(t);
            Segmentation::from_cuts(labels, &cuts).ok().map(|s| (post, s, w))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn viterbi_output_is_a_partition_and_optimal(
        (post, labels, lambdas) in (2usize..=3, 1usize..=3)
            .prop_flat_map(|(k, n)| (Just(k), Just(n), n..=12))
            .prop_flat_map(|(k, n, t)| (posteriors(t, k), labels_without_repeats(n, k), prop::collection::vec(1.0f64..8.0, k)))
    ) {
        let k = post.classes();
        let tr = Transcript::new(labels).unwrap();
        let prior = ClassPrior::uniform(k);
        let lm = LengthModel::new(lambdas).unwrap();
        let fast = constrained_viterbi(&post, &prior, &lm, &tr).unwrap();
        prop_assert_eq!(fast.segmentation.total_frames(), post.frames());
        prop_assert_eq!(fast.segmentation.transcript(), tr.clone());
        prop_assert!(fast.segmentation.lengths().iter().all(|&l| l >= 1));
        let (seg, score) = brute_force_viterbi(&post, &prior, &lm, &tr).unwrap();
        prop_assert!(rel_dev(fast.log_posterior, score) < 1e-9);
        prop_assert_eq!(fast.segmentation, seg);
    }

    #[test]
    fn graph_layers_are_ordered_and_contain_the_anchor((post, anchor, w) in graph_case()) {
        let g = build_graph(&anchor, &post, w).unwrap();
        let cuts = anchor.cuts();
        prop_assert_eq!(g.layers().len(), cuts.len());
        for (layer, &c) in g.layers().iter().zip(&cuts) {
            prop_assert!(layer.contains(&c));
            prop_assert!(layer.windows(2).all(|p| p[0] < p[1]));
        }
        for pair in g.layers().windows(2) {
            prop_assert!(pair[0].last() < pair[1].first());
        }
        prop_assert_eq!(g.layers()[0].clone(), vec![0]);
        prop_assert_eq!(g.layers().last().unwrap().clone(), vec![post.frames()]);
    }

    #[test]
    fn refined_path_never_exceeds_anchor_energy((post, anchor, w) in graph_case()) {
        let g = build_graph(&anchor, &post, w).unwrap();
        let e_anchor = path_energy(&g, &PathAssignment::from_segmentation(&anchor)).unwrap();
        let (best, e_best) = best_valid_path(&g, &anchor.transcript()).unwrap();
        prop_assert!(e_best <= e_anchor);
        prop_assert_eq!(path_energy(&g, &best).unwrap(), e_best);
        // the minimum over every enumerated valid path
        let min = enumerate_paths(&g, Some(&anchor.transcript())).unwrap()
            .iter()
            .map(|p| path_energy(&g, p).unwrap())
            .fold(f64::INFINITY, f64::min);
        prop_assert!((e_best - min).abs() <= 1e-9 * min.abs().max(1.0));
    }

    #[test]
    fn losses_match_enumeration((post, anchor, w) in graph_case(), alpha in 0.0f64..1.0) {
        let g = build_graph(&anchor, &post, w).unwrap();
        let tr = anchor.transcript();
        let e = enumerate_logadds(&g, &tr).unwrap();
        for kind in [LossKind::Forward, LossKind::Discriminative { alpha }, LossKind::Constrained] {
            let v = loss_value(&g, &tr, kind).unwrap();
            prop_assert!(rel_dev(v, enumerated_loss(&e, kind)) < 1e-9, "{:?}", kind);
        }
    }

    #[test]
    fn soft_minimum_bounds((post, anchor, w) in graph_case()) {
        let g = build_graph(&anchor, &post, w).unwrap();
        let tr = anchor.transcript();
        let f = forward_loss(&g, &tr).unwrap();
        let e_anchor = path_energy(&g, &PathAssignment::from_segmentation(&anchor)).unwrap();
        let (_, e_min) = best_valid_path(&g, &tr).unwrap();
        let paths = enumerate_paths(&g, Some(&tr)).unwrap().len() as f64;
        // min - log |P| <= logadd <= min
        prop_assert!(f <= e_min + 1e-12 && f <= e_anchor + 1e-12);
        prop_assert!(f >= e_min - paths.ln() - 1e-9);
        prop_assert!(logadd_all_paths(&g).unwrap() <= f + 1e-12);
    }

    #[test]
    fn forward_edge_gradients_are_edge_posteriors((post, anchor, w) in graph_case()) {
        let g = build_graph(&anchor, &post, w).unwrap();
        let grads = loss_backward(&g, &anchor.transcript(), LossKind::Forward).unwrap();
        for d in &grads.d_edge {
            prop_assert!(d.iter().all(|&x| (0.0..=1.0 + 1e-12).contains(&x)));
            prop_assert!((d.sum() - 1.0).abs() < 1e-9);
        }
        // every frame is covered by exactly one segment of every path
        for row in grads.d_frame.rows() {
            prop_assert!((row.sum() + 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn scorer_rows_normalize(seed in 0u64..1000, t in 1usize..12, gru in any::<bool>()) {
        let kind = if gru { ScorerKind::Gru } else { ScorerKind::Linear };
        let p = ScorerParams::<f64>::init(kind, 3, 5, 4, seed).unwrap();
        let x = Array2::from_shape_fn((t, 3), |(i, j)| ((i * 7 + j * 3 + seed as usize) % 11) as f64 - 5.0);
        let (post, _) = scorer_forward(&p, &FrameSequence::new("v", x).unwrap()).unwrap();
        for row in post.values().rows() {
            prop_assert!(log_sum_exp(row.iter().copied()).abs() < 1e-9);
        }
    }

    #[test]
    fn metrics_are_bounded_and_label_invariant(
        (pred, gt) in (1usize..40).prop_flat_map(|t| (prop::collection::vec(0usize..4, t), prop::collection::vec(0usize..4, t))),
        perm_seed in 0usize..24,
    ) {
        let r = evaluate(&[("v".into(), pred.clone(), gt.clone())], Some(0));
        // all-background ground truth has no scoreable segment
        prop_assume!(gt.iter().any(|&g| g != 0));
        let r = r.unwrap();
        for m in [r.mof, r.mof_bg, r.iou, r.iod] {
            prop_assert!((0.0..=1.0).contains(&m));
        }
        // a consistent relabeling of the non-background classes
        let mut perm = [1usize, 2, 3];
        let mut s = perm_seed;
        for i in (1..3).rev() {
            perm.swap(i, s % (i + 1));
            s /= i + 1;
        }
        let relabel = |v: &[usize]| v.iter().map(|&a| if a == 0 { 0 } else { perm[a - 1] }).collect::<Vec<_>>();
        let r2 = evaluate(&[("v".into(), relabel(&pred), relabel(&gt))], Some(0)).unwrap();
        prop_assert_eq!((r.mof, r.mof_bg, r.iou, r.iod), (r2.mof, r2.mof_bg, r2.iou, r2.iod));
        let ov = segment_overlaps(
            &Segmentation::from_frame_labels(&pred).unwrap(),
            &Segmentation::from_frame_labels(&gt).unwrap(),
            Some(0),
        ).unwrap();
        prop_assert!(ov.iter().all(|o| o.iod >= o.iou));
    }
}

#[test]
fn constrained_gradient_near_and_at_hard_ties() {
    // one edge, two classes, transcript class 0 with energy 1.0
    let tr = Transcript::new(vec![0]).unwrap();
    let lattice = |w1: f64| EdgeEnergies::new(vec![vec![0], vec![3]], 2, vec![Array3::from_shape_vec((1, 1, 2), vec![1.0, w1]).unwrap()]).unwrap();
    let h = 1e-6;
    for w1 in [1.0 - 1e-3, 1.0 + 1e-3] {
        let g = lattice(w1);
        let d = loss_backward(&g, &tr, LossKind::Constrained).unwrap();
        for a in 0..2 {
            let mut up = g.clone();
            up.weights_mut()[0][[0, 0, a]] += h;
            let mut down = g.clone();
            down.weights_mut()[0][[0, 0, a]] -= h;
            let fd = (loss_value(&up, &tr, LossKind::Constrained).unwrap()
                - loss_value(&down, &tr, LossKind::Constrained).unwrap())
                / (2.0 * h);
            assert!(rel_dev(d.d_edge[0][[0, 0, a]], fd) < 1e-5, "w1={w1} a={a}");
        }
    }
    // exact tie: class 1 is not hard, so its choice is the zero-cost fallback
    let g = lattice(1.0);
    let d = loss_backward(&g, &tr, LossKind::Constrained).unwrap();
    assert_eq!(d.d_edge[0][[0, 0, 1]], 0.0);
    assert_eq!(d.d_edge[0][[0, 0, 0]], 1.0);
    assert_eq!(g.energy(0, 0, 0, 1), 1.0);
}
