use awgnn_core::graph::SessionGraph;
use awgnn_core::model::{
    adaptive_weights, cross_entropy, ggnn_propagate, side_vec, HyperParams, Model, ModelParams,
    ParamId, SideIndex,
};
use awgnn_tensor::{finite_difference_check, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Rows = Vec<Vec<f64>>;

fn rows(m: &Matrix) -> Rows {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn mm(a: &Rows, b: &Rows) -> Rows {
    let inner = b.len();
    let cols = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|ar| {
            assert_eq!(ar.len(), inner);
            (0..cols)
                .map(|j| {
                    let mut s = 0.0;
                    for k in 0..inner {
                        s += ar[k] * b[k][j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn zip(a: &Rows, b: &Rows, f: impl Fn(f64, f64) -> f64) -> Rows {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(&u, &v)| f(u, v)).collect())
        .collect()
}

fn add_row(a: &Rows, r: &[f64]) -> Rows {
    a.iter()
        .map(|x| x.iter().zip(r).map(|(u, v)| u + v).collect())
        .collect()
}

fn map(a: &Rows, f: impl Fn(f64) -> f64) -> Rows {
    a.iter()
        .map(|x| x.iter().map(|&v| f(v)).collect())
        .collect()
}

// same branch form as the engine, so results can be compared bit for bit
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn concat(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().chain(y).copied().collect())
        .collect()
}

/// Straight-line session encoder with no adaptive or side-information terms.
struct Reference<'m> {
    p: &'m ModelParams,
    steps: usize,
}

impl Reference<'_> {
    fn w(&self, id: ParamId) -> Rows {
        rows(self.p.expect(id))
    }

    fn adjacency(seq: &[usize]) -> (Vec<usize>, Vec<usize>, Rows, Rows) {
        let mut nodes: Vec<usize> = Vec::new();
        let mut alias = Vec::new();
        for &s in seq {
            let pos = match nodes.iter().position(|&n| n == s) {
                Some(p) => p,
                None => {
                    nodes.push(s);
                    nodes.len() - 1
                }
            };
            alias.push(pos);
        }
        let m = nodes.len();
        let mut out = vec![vec![0.0; m]; m];
        let mut inn = vec![vec![0.0; m]; m];
        for w in alias.windows(2) {
            out[w[0]][w[1]] += 1.0;
            inn[w[1]][w[0]] += 1.0;
        }
        for row in out.iter_mut().chain(inn.iter_mut()) {
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                row.iter_mut().for_each(|v| *v /= total);
            }
        }
        (nodes, alias, out, inn)
    }

    fn states(&self, seq: &[usize]) -> (Rows, Vec<usize>) {
        let (nodes, alias, a_out, a_in) = Self::adjacency(seq);
        let embed = self.w(ParamId::ItemEmbed);
        let mut h: Rows = nodes.iter().map(|&n| embed[n].clone()).collect();
        for _ in 0..self.steps {
            let mo = add_row(
                &mm(&mm(&a_out, &h), &self.w(ParamId::MsgOutW)),
                &self.w(ParamId::MsgOutB)[0],
            );
            let mi = add_row(
                &mm(&mm(&a_in, &h), &self.w(ParamId::MsgInW)),
                &self.w(ParamId::MsgInB)[0],
            );
            let msg = concat(&mo, &mi);
            let z = map(
                &zip(
                    &mm(&msg, &self.w(ParamId::GateZW)),
                    &mm(&h, &self.w(ParamId::GateZU)),
                    |a, b| a + b,
                ),
                sigmoid,
            );
            let r = map(
                &zip(
                    &mm(&msg, &self.w(ParamId::GateRW)),
                    &mm(&h, &self.w(ParamId::GateRU)),
                    |a, b| a + b,
                ),
                sigmoid,
            );
            let rh = zip(&r, &h, |a, b| a * b);
            let cand = map(
                &zip(
                    &mm(&msg, &self.w(ParamId::CandW)),
                    &mm(&rh, &self.w(ParamId::CandU)),
                    |a, b| a + b,
                ),
                f64::tanh,
            );
            let keep = map(&z, |v| 1.0 - v);
            h = zip(
                &zip(&keep, &h, |a, b| a * b),
                &zip(&z, &cand, |a, b| a * b),
                |a, b| a + b,
            );
        }
        (h, alias)
    }

    fn hybrid(&self, seq: &[usize]) -> Vec<f64> {
        let (h, alias) = self.states(seq);
        let pos: Rows = alias.iter().map(|&a| h[a].clone()).collect();
        let last = vec![h[*alias.last().unwrap()].clone()];
        let t1 = mm(&last, &self.w(ParamId::AttnW1));
        let t2 = mm(&pos, &self.w(ParamId::AttnW2));
        let pre = add_row(&add_row(&t2, &t1[0]), &self.w(ParamId::AttnC)[0]);
        let alpha = mm(&map(&pre, sigmoid), &self.w(ParamId::AttnQ));
        let alpha_row = vec![alpha.iter().map(|a| a[0]).collect::<Vec<_>>()];
        let global = mm(&alpha_row, &pos);
        mm(&concat(&last, &global), &self.w(ParamId::FuseW3)).remove(0)
    }

    fn scores(&self, seq: &[usize]) -> Vec<f64> {
        let sh = self.hybrid(seq);
        self.w(ParamId::ItemEmbed)
            .iter()
            .map(|e| {
                let mut s = 0.0;
                for k in 0..sh.len() {
                    s += sh[k] * e[k];
                }
                s
            })
            .collect()
    }
}

fn base_hyper(dim: usize) -> HyperParams {
    HyperParams {
        dim,
        ..HyperParams::default()
    }
}

#[test]
fn propagation_matches_straight_line_reference() {
    let model = Model::new(base_hyper(4), 10, 0, 11).unwrap();
    let seq = [2, 5, 7];
    let ours = ggnn_propagate(&model, &SessionGraph::build(&seq)).unwrap();
    let reference = Reference {
        p: &model.params,
        steps: 1,
    }
    .states(&seq)
    .0;
    assert_eq!(rows(&ours), reference);
}

#[test]
fn multi_step_propagation_with_revisits_matches_reference() {
    let hyper = HyperParams {
        steps: 3,
        ..base_hyper(5)
    };
    let model = Model::new(hyper, 10, 0, 4).unwrap();
    let seq = [1, 2, 1, 3, 3, 9];
    let ours = ggnn_propagate(&model, &SessionGraph::build(&seq)).unwrap();
    assert_eq!(
        rows(&ours),
        Reference {
            p: &model.params,
            steps: 3
        }
        .states(&seq)
        .0
    );
}

#[test]
fn flag_off_model_is_bit_identical_to_reference_encoder() {
    let model = Model::new(base_hyper(8), 30, 0, 2).unwrap();
    let reference = Reference {
        p: &model.params,
        steps: 1,
    };
    let side = SideIndex::none(30);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..20 {
        let len = rng.random_range(1..=10);
        let seq: Vec<usize> = (0..len).map(|_| rng.random_range(0..30)).collect();
        let f = model.forward(&side, &seq).unwrap();
        assert_eq!(f.hybrid, reference.hybrid(&seq));
        assert_eq!(f.scores, reference.scores(&seq));
    }
}

#[test]
fn zeroed_adaptive_block_reduces_to_base() {
    let base = Model::new(base_hyper(6), 15, 0, 8).unwrap();
    let mut aw = Model::new(
        HyperParams {
            use_adaptive: true,
            ..base_hyper(6)
        },
        15,
        0,
        8,
    )
    .unwrap();
    let w3 = aw.params.get_mut(ParamId::FuseW3).unwrap();
    for r in 12..18 {
        w3.row_mut(r).fill(0.0);
    }
    let side = SideIndex::none(15);
    for seq in [vec![0], vec![3, 4, 3], vec![1, 2, 5, 8, 13, 14]] {
        assert_eq!(
            aw.scores(&side, &seq).unwrap(),
            base.scores(&side, &seq).unwrap()
        );
    }
}

#[test]
fn single_item_session_has_local_equal_to_state() {
    let model = Model::new(base_hyper(4), 6, 0, 1).unwrap();
    let f = model.forward(&SideIndex::none(6), &[4]).unwrap();
    assert_eq!(f.local, f.node_states.row(0));
    let expect: Vec<f64> = f
        .node_states
        .row(0)
        .iter()
        .map(|v| f.attention[0] * v)
        .collect();
    assert_eq!(f.global, expect);
}

#[test]
fn top_item_matches_brute_force_dot_products() {
    let model = Model::new(base_hyper(8), 50, 0, 21).unwrap();
    let embed = model.params.expect(ParamId::ItemEmbed);
    let side = SideIndex::none(50);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..25 {
        let seq: Vec<usize> = (0..rng.random_range(1..8))
            .map(|_| rng.random_range(0..50))
            .collect();
        let f = model.forward(&side, &seq).unwrap();
        let mut best = (f64::NEG_INFINITY, 0);
        for i in 0..50 {
            let s: f64 = embed.row(i).iter().zip(&f.hybrid).map(|(a, b)| a * b).sum();
            assert!((s - f.scores[i]).abs() < 1e-12);
            if s > best.0 {
                best = (s, i);
            }
        }
        let argmax = (0..50).fold(0, |b, i| if f.scores[i] > f.scores[b] { i } else { b });
        assert_eq!(argmax, best.1);
    }
}

#[test]
fn scores_are_linear_in_the_hybrid_vector() {
    let mut model = Model::new(base_hyper(4), 12, 0, 3).unwrap();
    let side = SideIndex::none(12);
    let before = model.scores(&side, &[1, 2, 3]).unwrap();
    model
        .params
        .get_mut(ParamId::FuseW3)
        .unwrap()
        .scale_in_place(2.0);
    let after = model.scores(&side, &[1, 2, 3]).unwrap();
    for (a, b) in before.iter().zip(&after) {
        assert!((2.0 * a - b).abs() < 1e-14);
    }
    model.params.get_mut(ParamId::FuseW3).unwrap().fill(0.0);
    let zero = model.scores(&side, &[1, 2, 3]).unwrap();
    assert!(zero.iter().all(|&s| s == 0.0));
    assert!((cross_entropy(&zero, 4).unwrap() - 12f64.ln()).abs() < 1e-12);
}

#[test]
fn loss_limits_and_range() {
    let mut scores = vec![0.0; 10];
    scores[3] = 50.0;
    assert!(cross_entropy(&scores, 3).unwrap() < 1e-20);
    assert!(cross_entropy(&scores, 10).is_err());
}

fn side_model(hyper: HyperParams) -> (Model, SideIndex) {
    // item 0: pair 0; item 1: pair 1; item 2: pairs 2 and 3; item 3: none
    let side = SideIndex::from_lists(
        vec![
            Some(vec![0]),
            Some(vec![1]),
            Some(vec![2, 3]),
            None,
            Some(vec![0, 3]),
        ],
        4,
    );
    (Model::new(hyper, 5, 4, 17).unwrap(), side)
}

#[test]
fn side_vectors_are_pair_means() {
    let (model, side) = side_model(HyperParams {
        use_si: true,
        ..base_hyper(4)
    });
    let table = model.params.expect(ParamId::SidePairEmbed);
    assert_eq!(side_vec(&model, &side, 0).unwrap(), table.row(0));
    let two = side_vec(&model, &side, 2).unwrap();
    for (c, v) in two.iter().enumerate() {
        assert!((v - (table.get(2, c) + table.get(3, c)) / 2.0).abs() < 1e-15);
    }
    assert!(side_vec(&model, &side, 3).is_none());
}

#[test]
fn mean_side_fusion_shifts_global_by_mean() {
    let (plain, side) = side_model(base_hyper(4));
    let (msi, _) = side_model(HyperParams {
        use_msi: true,
        ..base_hyper(4)
    });
    let seq = [0, 1];
    let a = plain.forward(&side, &seq).unwrap();
    let b = msi.forward(&side, &seq).unwrap();
    let u = side_vec(&msi, &side, 0).unwrap();
    let v = side_vec(&msi, &side, 1).unwrap();
    for c in 0..4 {
        assert_eq!(b.global[c], a.global[c] + (u[c] + v[c]) / 2.0);
    }
    assert_eq!(b.missing_side, 0);
}

#[test]
fn absent_side_information_counts_as_missing() {
    let (msi, side) = side_model(HyperParams {
        use_si: true,
        use_msi: true,
        ..base_hyper(4)
    });
    let f = msi.forward(&side, &[0, 3, 3]).unwrap();
    // SI looks up the last item once, MSI every position
    assert_eq!(f.missing_side, 3);
    assert!(f.scores.iter().all(|s| s.is_finite()));
}

#[test]
fn all_flags_gradients_match_finite_differences() {
    let hyper = HyperParams {
        dim: 8,
        use_adaptive: true,
        use_si: true,
        use_msi: true,
        ..HyperParams::default()
    };
    let (model, side) = {
        let side = SideIndex::from_lists(
            (0..12)
                .map(|i| {
                    if i == 6 {
                        None
                    } else {
                        Some(vec![i % 5, (i + 2) % 5])
                    }
                })
                .collect(),
            5,
        );
        (Model::new(hyper, 12, 5, 13).unwrap(), side)
    };
    let seq = [1, 6, 4, 1, 9];
    let target = 7;
    let (_, grads) = model.loss_and_gradients(&side, &seq, target).unwrap();
    let ids = model.params.ids();
    let mut values: Vec<Matrix> = ids
        .iter()
        .map(|&id| model.params.expect(id).clone())
        .collect();
    let analytic: Vec<Matrix> = ids.iter().map(|&id| grads.expect(id).clone()).collect();
    let report = finite_difference_check(&mut values, &analytic, 1e-5, 1e-4, |vals| {
        let mut params = ModelParams::empty();
        for (&id, v) in ids.iter().zip(vals) {
            params.insert(id, v.clone());
        }
        Model { hyper, params }.loss(&side, &seq, target).unwrap()
    })
    .unwrap();
    assert!(
        report.passed,
        "worst {:?} at {:?}",
        report.max_rel_error, report.worst
    );
}

#[test]
fn reversing_distinct_states_changes_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let states: Vec<Vec<f64>> = (0..5)
        .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let fwd = Matrix::from_rows(&states).unwrap();
    let rev = Matrix::from_rows(&states.iter().rev().cloned().collect::<Vec<_>>()).unwrap();
    let wf = adaptive_weights(&fwd, 4.0, true).unwrap();
    let wr = adaptive_weights(&rev, 4.0, true).unwrap();
    let wr_back: Vec<f64> = wr.iter().rev().copied().collect();
    assert!(wf.iter().zip(&wr_back).any(|(a, b)| (a - b).abs() > 1e-6));
    assert!((wf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}
