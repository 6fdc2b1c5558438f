use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsegrad::models::channel::GatedChannelNet;
use sparsegrad::models::gcn::{AdjacencySource, GcnModel, GcnShape};
use sparsegrad::models::metrics::{geodesic_distances, relationship_score};
use sparsegrad::models::wiring::{wiring_forward, Activation, Edge, WiringGraph};
use sparsegrad::models::GateParam;
use sparsegrad::sparse_param::{record_gates, GateMode, GradMode};
use sparsegrad::{Tape, Tensor64};

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], low: f64, high: f64) -> Tensor64 {
    let n = shape.iter().product();
    Tensor64::new(shape.to_vec(), (0..n).map(|_| rng.random_range(low..high)).collect()).unwrap()
}

#[test]
fn pruning_dead_channels_is_bit_identical() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = GatedChannelNet::new(5, &[7, 6], 3, GateParam::Sparse(GradMode::Exact), &mut rng).unwrap();
        for name in ["layer0", "layer1"] {
            let alpha = net.params.find(&format!("{name}.alpha")).unwrap();
            let shape = net.params.get(alpha).shape().to_vec();
            net.params.set(alpha, random_tensor(&mut rng, &shape, -1.0, 1.0)).unwrap();
            let beta = net.params.find(&format!("{name}.beta")).unwrap();
            net.params.set(beta, Tensor64::scalar(rng.random_range(-4.0..-1.0))).unwrap();
        }
        let stats = net
            .running_stats()
            .into_iter()
            .map(|(m, v)| {
                (
                    m.iter().map(|_| rng.random_range(-1.0..1.0)).collect(),
                    v.iter().map(|_| rng.random_range(0.5..2.0)).collect(),
                )
            })
            .collect();
        net.set_running_stats(stats).unwrap();

        let frozen = net.freeze().unwrap();
        let dead: usize = frozen.layers.iter().map(|l| l.gates.count_zeros()).sum();
        let pruned = frozen.prune();
        let x = random_tensor(&mut rng, &[9, 5], -2.0, 2.0);
        let full = frozen.forward(&x).unwrap();
        let small = pruned.forward(&x).unwrap();
        assert_eq!(full.shape(), small.shape());
        for (a, b) in full.data().iter().zip(small.data()) {
            assert_eq!(a.to_bits(), b.to_bits(), "seed {seed}");
        }
        assert_eq!(pruned.layers.iter().map(|l| l.channels()).sum::<usize>(), 13 - dead);
        assert!(dead == 0 || pruned.parameter_count() < frozen.parameter_count());
    }
}

/// Forward-pointing edges over 8 nodes, each present with probability one half.
fn dag() -> impl Strategy<Value = (usize, Vec<Edge<f64>>)> {
    let pairs: Vec<(usize, usize)> = (0..8).flat_map(|u| (u + 1..8).map(move |v| (u, v))).collect();
    let n = pairs.len();
    (1usize..4, prop::collection::vec((any::<bool>(), prop_oneof![Just(0.0), -1.5f64..1.5]), n)).prop_map(
        move |(inputs, picks)| {
            let edges = pairs
                .iter()
                .zip(picks)
                .filter(|((_, v), (keep, _))| *keep && *v >= inputs)
                .map(|(&(from, to), (_, weight))| Edge { from, to, weight })
                .collect();
            (inputs, edges)
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn wiring_forward_matches_per_edge_sums((inputs, edges) in dag(), relu in any::<bool>(), seed in any::<u64>()) {
        let activation = if relu { Activation::Relu } else { Activation::Identity };
        let graph = WiringGraph::new(8, inputs, edges.clone(), activation).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<Tensor64> = (0..inputs).map(|_| random_tensor(&mut rng, &[3, 4], -2.0, 2.0)).collect();
        let got = wiring_forward(&graph, &xs).unwrap();

        // node indices are already a topological order
        let mut oracle: Vec<Vec<f64>> = xs.iter().map(|x| x.data().to_vec()).collect();
        for v in inputs..8 {
            let mut y = vec![0.0; 12];
            for e in edges.iter().filter(|e| e.to == v) {
                for (acc, x) in y.iter_mut().zip(&oracle[e.from]) {
                    *acc += e.weight * x;
                }
            }
            if relu {
                y.iter_mut().for_each(|t| *t = t.max(0.0));
            }
            oracle.push(y);
        }
        for (node, expected) in got.iter().zip(&oracle) {
            for (a, b) in node.data().iter().zip(expected) {
                prop_assert!((a - b).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn relationship_score_is_a_fraction(
        n in 2usize..8,
        entries in prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..3.0], 64),
        links in prop::collection::vec(any::<bool>(), 64),
        k in 0usize..4,
    ) {
        let mut adjacency = Tensor64::eye(n);
        for i in 0..n {
            for j in 0..i {
                if links[i * 8 + j] {
                    adjacency.set2(i, j, 1.0);
                    adjacency.set2(j, i, 1.0);
                }
            }
        }
        let geodesic = geodesic_distances(&adjacency).unwrap();
        let a = Tensor64::new(vec![n, n], entries[..n * n].to_vec()).unwrap();
        let score = relationship_score(&a, k, &geodesic).unwrap();
        prop_assert!((0.0..=1.0).contains(&score));
        // the graph itself lies inside its one-hop mask
        prop_assert_eq!(relationship_score(&adjacency, 1, &geodesic).unwrap(), 1.0);
    }
}

fn block_outputs(model: &GcnModel<f64>, x: &Tensor64) -> Vec<Tensor64> {
    let tape = Tape::new();
    let bound = model.params.bind(&tape);
    let fwd = model.record(&bound, &tape, tape.leaf(x.clone())).unwrap();
    fwd.blocks.iter().map(|b| b.value().as_ref().clone()).collect()
}

#[test]
fn gcn_blocks_depend_only_on_earlier_weights_and_the_shared_adjacency() {
    let shape = GcnShape { nodes: 4, window: 3, hidden: 8, blocks: 4, head_layers: 2 };
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let adjacency = random_tensor(&mut rng, &[4, 4], 0.1, 1.0);
        let model = GcnModel::new(shape, AdjacencySource::Fixed(adjacency.clone()), &mut rng).unwrap();
        let x = random_tensor(&mut rng, &[2 * 4, 3], 0.0, 2.0);
        let base = block_outputs(&model, &x);

        for l in 0..shape.blocks {
            let mut perturbed = model.clone();
            let id = perturbed.params.find(&format!("block{l}.weight")).unwrap();
            let w = perturbed.params.get(id).map(|v| v * 1.5 + 0.1);
            perturbed.params.set(id, w).unwrap();
            let out = block_outputs(&perturbed, &x);
            for (b, (before, after)) in base.iter().zip(&out).enumerate() {
                assert_eq!(b >= l, before != after, "seed {seed}: weight {l} vs block {b}");
            }
        }

        let mut other = adjacency.clone();
        other.set2(0, 1, other.at2(0, 1) + 0.7);
        other.set2(3, 2, other.at2(3, 2) + 0.5);
        let mut moved = model.clone();
        moved.source = AdjacencySource::Fixed(other);
        for (b, (before, after)) in base.iter().zip(block_outputs(&moved, &x).iter()).enumerate() {
            assert_ne!(before, after, "seed {seed}: block {b} ignored the adjacency");
        }
    }
}

/// Plain gradient ascent on `a_target` from a group where it starts dead.
fn revive(grad_mode: GradMode, steps: usize) -> (f64, bool) {
    let mut alpha = vec![2.0, 0.05, 1.0, -1.5];
    let beta = -2.0;
    let target = 1;
    let mut first_grad = 0.0;
    for step in 0..steps {
        let tape = Tape::new();
        let a = tape.leaf(Tensor64::vector(alpha.clone()).unwrap());
        let gates = record_gates(a, tape.scalar(beta), GateMode::Signed, grad_mode).unwrap().a;
        if gates.value().data()[target] != 0.0 {
            return (first_grad, true);
        }
        let loss = gates.gather(&[target]).unwrap().sum().neg();
        let g = tape.backward(loss).unwrap().wrt(a);
        if step == 0 {
            first_grad = g.data()[target];
        }
        alpha.iter_mut().zip(g.data()).for_each(|(p, d)| *p -= 0.5 * d);
    }
    (first_grad, false)
}

#[test]
fn rectified_gradients_revive_a_dead_gate_and_exact_ones_cannot() {
    let (exact_grad, exact_alive) = revive(GradMode::Exact, 2000);
    assert_eq!(exact_grad, 0.0);
    assert!(!exact_alive);
    let (rect_grad, rect_alive) = revive(GradMode::Rectified, 2000);
    assert!(rect_grad < 0.0, "descent direction raises alpha: {rect_grad}");
    assert!(rect_alive);
}
