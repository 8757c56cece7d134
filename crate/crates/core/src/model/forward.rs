use awgnn_tensor::{Matrix, Tape, Var};

use super::{init_params, HyperParams, ModelError, ModelParams, ParamId, SideIndex};
use crate::graph::SessionGraph;

/// Hyperparameters plus the learned tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub hyper: HyperParams,
    pub params: ModelParams,
}

/// Every intermediate of one forward pass, as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub graph: SessionGraph,
    /// Node states after propagation, one row per distinct item.
    pub node_states: Matrix,
    pub local: Vec<f64>,
    pub global: Vec<f64>,
    pub adaptive: Option<Vec<f64>>,
    /// Softmax weights behind `adaptive`, one per participating position.
    pub adaptive_weights: Option<Vec<f64>>,
    /// Unnormalised soft-attention coefficients, one per position.
    pub attention: Vec<f64>,
    pub hybrid: Vec<f64>,
    pub scores: Vec<f64>,
    /// Lookups of items that had no side information.
    pub missing_side: usize,
}

struct Pass {
    vars: Vec<Option<Var>>,
    graph: SessionGraph,
    states: Var,
    local: Var,
    global: Var,
    adaptive: Option<(Var, Var)>,
    attention: Var,
    hybrid: Var,
    scores: Var,
    missing_side: usize,
}

impl Model {
    pub fn new(
        hyper: HyperParams,
        item_count: usize,
        pair_count: usize,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let params = init_params(&hyper, item_count, pair_count, seed)?;
        Ok(Self { hyper, params })
    }

    pub fn item_count(&self) -> usize {
        self.params.get(ParamId::ItemEmbed).map_or(0, Matrix::rows)
    }

    /// Keeps the last `max_len` items.
    pub fn truncate<'s>(&self, items: &'s [usize]) -> &'s [usize] {
        &items[items.len().saturating_sub(self.hyper.max_len)..]
    }

    pub fn forward(&self, side: &SideIndex, items: &[usize]) -> Result<Forward, ModelError> {
        let mut tape = Tape::new();
        let pass = record(&mut tape, self, side, self.truncate(items), false)?;
        let row = |v: Var| tape.value(v).as_slice().to_vec();
        Ok(Forward {
            node_states: tape.value(pass.states).clone(),
            local: row(pass.local),
            global: row(pass.global),
            adaptive: pass.adaptive.map(|(sa, _)| row(sa)),
            adaptive_weights: pass.adaptive.map(|(_, w)| row(w)),
            attention: row(pass.attention),
            hybrid: row(pass.hybrid),
            scores: row(pass.scores),
            missing_side: pass.missing_side,
            graph: pass.graph,
        })
    }

    /// Score of every catalog item for the session `items`.
    pub fn scores(&self, side: &SideIndex, items: &[usize]) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let pass = record(&mut tape, self, side, self.truncate(items), false)?;
        Ok(tape.value(pass.scores).as_slice().to_vec())
    }

    /// Cross-entropy against `target` and its gradient for every tensor.
    pub fn loss_and_gradients(
        &self,
        side: &SideIndex,
        items: &[usize],
        target: usize,
    ) -> Result<(f64, ModelParams), ModelError> {
        let mut tape = Tape::new();
        let pass = record(&mut tape, self, side, self.truncate(items), true)?;
        let loss = tape.cross_entropy_with_softmax(pass.scores, target)?;
        let value = tape.value(loss).get(0, 0);
        tape.backward(loss)?;
        let mut grads = ModelParams::empty();
        for (id, var) in ParamId::ALL.into_iter().zip(pass.vars) {
            if let Some(g) = var.and_then(|v| tape.take_grad(v)) {
                grads.insert(id, g);
            }
        }
        Ok((value, grads))
    }

    pub fn loss(
        &self,
        side: &SideIndex,
        items: &[usize],
        target: usize,
    ) -> Result<f64, ModelError> {
        cross_entropy(&self.scores(side, items)?, target)
    }
}

fn param(vars: &[Option<Var>], id: ParamId) -> Result<Var, ModelError> {
    vars[id as usize].ok_or(ModelError::MissingParam(id))
}

fn record<'a>(
    tape: &mut Tape<'a>,
    model: &'a Model,
    side: &SideIndex,
    items: &[usize],
    track: bool,
) -> Result<Pass, ModelError> {
    let hyper = &model.hyper;
    hyper.validate()?;
    if items.is_empty() {
        return Err(ModelError::EmptySession);
    }
    let count = model.item_count();
    if let Some(&bad) = items.iter().find(|&&i| i >= count) {
        return Err(ModelError::UnknownItem { index: bad, count });
    }
    let vars: Vec<Option<Var>> = ParamId::ALL
        .into_iter()
        .map(|id| model.params.get(id).map(|m| tape.leaf_ref(m, track)))
        .collect();
    let p = |id| param(&vars, id);

    let graph = SessionGraph::build(items);
    let embed = p(ParamId::ItemEmbed)?;
    let h0 = tape.gather_rows(embed, &graph.nodes)?;
    let states = propagate(tape, &vars, &graph, h0, hyper.steps)?;

    let n = graph.len();
    let positions = tape.gather_rows(states, &graph.alias)?;
    let last = tape.gather_rows(states, &[graph.alias[n - 1]])?;

    // soft attention
    let t1 = tape.matmul(last, p(ParamId::AttnW1)?)?;
    let t2 = tape.matmul(positions, p(ParamId::AttnW2)?)?;
    let pre = tape.add(t2, t1)?;
    let pre = tape.add(pre, p(ParamId::AttnC)?)?;
    let act = tape.sigmoid(pre)?;
    let alpha = tape.matmul(act, p(ParamId::AttnQ)?)?;
    let alpha_row = tape.transpose(alpha)?;
    let mut global = tape.matmul(alpha_row, positions)?;

    let mut local = last;
    let mut missing_side = 0;
    if hyper.use_si {
        let sv = side_mean(
            tape,
            &vars,
            side,
            &[items[n - 1]],
            hyper.dim,
            &mut missing_side,
        )?;
        let cat = tape.concat_cols(local, sv)?;
        local = tape.matmul(cat, p(ParamId::SiProj)?)?;
    }
    if hyper.use_msi {
        let sv = side_mean(tape, &vars, side, items, hyper.dim, &mut missing_side)?;
        global = tape.add(global, sv)?;
    }

    let adaptive = if hyper.use_adaptive {
        Some(adaptive_term(
            tape,
            positions,
            last,
            hyper.t_order,
            hyper.include_last,
        )?)
    } else {
        None
    };

    let mut fused = tape.concat_cols(local, global)?;
    if let Some((sa, _)) = adaptive {
        fused = tape.concat_cols(fused, sa)?;
    }
    let hybrid = tape.matmul(fused, p(ParamId::FuseW3)?)?;
    let scores = tape.matmul_nt(hybrid, embed)?;

    Ok(Pass {
        vars,
        graph,
        states,
        local,
        global,
        adaptive,
        attention: alpha_row,
        hybrid,
        scores,
        missing_side,
    })
}

fn propagate(
    tape: &mut Tape<'_>,
    vars: &[Option<Var>],
    graph: &SessionGraph,
    h0: Var,
    steps: usize,
) -> Result<Var, ModelError> {
    let p = |id| param(vars, id);
    let a_out = tape.constant(graph.a_out.clone());
    let a_in = tape.constant(graph.a_in.clone());
    let ones = tape.constant(Matrix::filled(
        graph.node_count(),
        tape.value(h0).cols(),
        1.0,
    ));
    let mut h = h0;
    for _ in 0..steps {
        let ho = tape.matmul(a_out, h)?;
        let mo = tape.matmul(ho, p(ParamId::MsgOutW)?)?;
        let mo = tape.add(mo, p(ParamId::MsgOutB)?)?;
        let hi = tape.matmul(a_in, h)?;
        let mi = tape.matmul(hi, p(ParamId::MsgInW)?)?;
        let mi = tape.add(mi, p(ParamId::MsgInB)?)?;
        let msg = tape.concat_cols(mo, mi)?;

        let z = gate(tape, msg, h, p(ParamId::GateZW)?, p(ParamId::GateZU)?)?;
        let r = gate(tape, msg, h, p(ParamId::GateRW)?, p(ParamId::GateRU)?)?;
        let rh = tape.hadamard(r, h)?;
        let cw = tape.matmul(msg, p(ParamId::CandW)?)?;
        let cu = tape.matmul(rh, p(ParamId::CandU)?)?;
        let cand = tape.add(cw, cu)?;
        let cand = tape.tanh(cand)?;

        let keep = tape.sub(ones, z)?;
        let kept = tape.hadamard(keep, h)?;
        let moved = tape.hadamard(z, cand)?;
        h = tape.add(kept, moved)?;
    }
    Ok(h)
}

fn gate(tape: &mut Tape<'_>, msg: Var, h: Var, w: Var, u: Var) -> Result<Var, ModelError> {
    let a = tape.matmul(msg, w)?;
    let b = tape.matmul(h, u)?;
    let s = tape.add(a, b)?;
    Ok(tape.sigmoid(s)?)
}

/// Returns `(adaptive preference, weights)`.
fn adaptive_term(
    tape: &mut Tape<'_>,
    positions: Var,
    last: Var,
    t_order: f64,
    include_last: bool,
) -> Result<(Var, Var), ModelError> {
    let n = tape.value(positions).rows();
    let cos = tape.cosine_sim_rows(positions, last)?;
    let order = tape.constant(Matrix::col_vector(&order_factors(n, t_order)));
    let mut logits = tape.hadamard(cos, order)?;
    let mut pool = positions;
    if !include_last && n > 1 {
        let head: Vec<usize> = (0..n - 1).collect();
        logits = tape.gather_rows(logits, &head)?;
        pool = tape.gather_rows(positions, &head)?;
    }
    let logits = tape.transpose(logits)?;
    let weights = tape.softmax_row(logits)?;
    let sa = tape.matmul(weights, pool)?;
    Ok((sa, weights))
}

fn order_factors(n: usize, t_order: f64) -> Vec<f64> {
    (1..=n).map(|j| (j as f64 / t_order).exp()).collect()
}

/// Mean side vector over `items`; each item contributes the mean of its
/// pair embeddings, and items without side information contribute zeros.
fn side_mean(
    tape: &mut Tape<'_>,
    vars: &[Option<Var>],
    side: &SideIndex,
    items: &[usize],
    dim: usize,
    missing: &mut usize,
) -> Result<Var, ModelError> {
    let mut rows = Vec::new();
    let mut weights = Vec::new();
    let share = 1.0 / items.len() as f64;
    for &item in items {
        match side.pairs(item) {
            Some(pairs) => {
                let w = share / pairs.len() as f64;
                rows.extend_from_slice(pairs);
                weights.extend(std::iter::repeat_n(w, pairs.len()));
            }
            None => *missing += 1,
        }
    }
    if rows.is_empty() {
        return Ok(tape.constant(Matrix::zeros(1, dim)));
    }
    let table = param(vars, ParamId::SidePairEmbed)?;
    let gathered = tape.gather_rows(table, &rows)?;
    let w = tape.constant(Matrix::row_vector(&weights));
    Ok(tape.matmul(w, gathered)?)
}

/// Node states after gated propagation over `graph`.
pub fn ggnn_propagate(model: &Model, graph: &SessionGraph) -> Result<Matrix, ModelError> {
    let mut tape = Tape::new();
    let vars: Vec<Option<Var>> = ParamId::ALL
        .into_iter()
        .map(|id| model.params.get(id).map(|m| tape.leaf_ref(m, false)))
        .collect();
    let h0 = tape.gather_rows(param(&vars, ParamId::ItemEmbed)?, &graph.nodes)?;
    let h = propagate(&mut tape, &vars, graph, h0, model.hyper.steps)?;
    Ok(tape.value(h).clone())
}

/// Softmax weights over positions given per-position states (`n × d`, last
/// row is the final position).
pub fn adaptive_weights(
    positions: &Matrix,
    t_order: f64,
    include_last: bool,
) -> Result<Vec<f64>, ModelError> {
    let n = positions.rows();
    if n == 0 {
        return Err(ModelError::EmptySession);
    }
    let mut tape = Tape::new();
    let pos = tape.constant(positions.clone());
    let last = tape.gather_rows(pos, &[n - 1])?;
    let (_, w) = adaptive_term(&mut tape, pos, last, t_order, include_last)?;
    Ok(tape.value(w).as_slice().to_vec())
}

/// `softmax(c_j · exp(j / t))` for 1-based positions `j`.
pub fn order_weighted_softmax(cosines: &[f64], t_order: f64) -> Vec<f64> {
    order_weighted_log_softmax(cosines, t_order)
        .into_iter()
        .map(f64::exp)
        .collect()
}

/// Logarithm of [`order_weighted_softmax`], finite even where the weights
/// underflow.
pub fn order_weighted_log_softmax(cosines: &[f64], t_order: f64) -> Vec<f64> {
    let logits: Vec<f64> = cosines
        .iter()
        .zip(order_factors(cosines.len(), t_order))
        .map(|(c, o)| c * o)
        .collect();
    let z = awgnn_tensor::log_sum_exp(&logits);
    logits.iter().map(|l| l - z).collect()
}

/// Mean pair embedding of one item, or `None` when it has no side information.
pub fn side_vec(model: &Model, side: &SideIndex, item: usize) -> Option<Vec<f64>> {
    let table = model.params.get(ParamId::SidePairEmbed)?;
    let pairs = side.pairs(item)?;
    let mut out = vec![0.0; table.cols()];
    let w = 1.0 / pairs.len() as f64;
    for &p in pairs {
        for (o, v) in out.iter_mut().zip(table.row(p)) {
            *o += w * v;
        }
    }
    Some(out)
}

/// `-log softmax(scores)[target]`.
pub fn cross_entropy(scores: &[f64], target: usize) -> Result<f64, ModelError> {
    if target >= scores.len() {
        return Err(ModelError::UnknownItem {
            index: target,
            count: scores.len(),
        });
    }
    Ok(awgnn_tensor::log_sum_exp(scores) - scores[target])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(adaptive: bool) -> Model {
        let hyper = HyperParams {
            dim: 6,
            use_adaptive: adaptive,
            ..HyperParams::default()
        };
        Model::new(hyper, 12, 0, 5).unwrap()
    }

    #[test]
    fn two_position_worked_example() {
        let w = order_weighted_softmax(&[0.5, 1.0], 4.0);
        assert!((w[0] - 0.267_624_48).abs() < 1e-8);
        assert!((w[1] - 0.732_375_52).abs() < 1e-8);
    }

    #[test]
    fn identical_states_weight_later_positions_more() {
        let pos = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        let w = adaptive_weights(&pos, 4.0, true).unwrap();
        let expect = order_weighted_softmax(&[1.0, 1.0, 1.0], 4.0);
        for (a, b) in w.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(w[0] < w[1] && w[1] < w[2]);
    }

    #[test]
    fn excluding_last_drops_one_weight() {
        let pos = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(adaptive_weights(&pos, 4.0, false).unwrap().len(), 2);
        let single = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert_eq!(adaptive_weights(&single, 4.0, false).unwrap(), vec![1.0]);
    }

    #[test]
    fn single_item_session_scores() {
        let m = small(true);
        let f = m.forward(&SideIndex::none(12), &[3]).unwrap();
        assert_eq!(f.scores.len(), 12);
        assert_eq!(f.adaptive_weights.as_deref(), Some(&[1.0][..]));
        assert_eq!(f.adaptive.as_ref().unwrap(), &f.local);
    }

    #[test]
    fn empty_and_unknown_sessions_error() {
        let m = small(false);
        assert!(matches!(
            m.scores(&SideIndex::none(12), &[]),
            Err(ModelError::EmptySession)
        ));
        assert!(matches!(
            m.scores(&SideIndex::none(12), &[40]),
            Err(ModelError::UnknownItem { index: 40, .. })
        ));
    }

    #[test]
    fn loss_matches_scores() {
        let m = small(true);
        let side = SideIndex::none(12);
        let (loss, grads) = m.loss_and_gradients(&side, &[1, 2, 1, 4], 7).unwrap();
        let direct = cross_entropy(&m.scores(&side, &[1, 2, 1, 4]).unwrap(), 7).unwrap();
        assert!((loss - direct).abs() < 1e-12);
        assert_eq!(grads.ids(), m.params.ids());
    }

    #[test]
    fn input_is_truncated_to_max_len() {
        let mut m = small(false);
        m.hyper.max_len = 2;
        let side = SideIndex::none(12);
        assert_eq!(
            m.scores(&side, &[5, 6, 1, 2]).unwrap(),
            m.scores(&side, &[1, 2]).unwrap()
        );
    }
}
