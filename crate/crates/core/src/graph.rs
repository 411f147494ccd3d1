//! Per-step patient–variable bipartite graphs and edge-aware message passing.
//!
//! At every time step each patient in the batch and each variable is a node;
//! an edge `(p, n)` exists exactly when patient `p` observed variable `n` at
//! that step. Edge features start as the sum of a value projection, a
//! linear-plus-sinusoidal time embedding and a variable-type embedding.

use crate::data::Episode;
use crate::diffcore::{Bound, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{fan_in_uniform, SeededRng};
use crate::scalar::Scalar;

/// One bipartite graph: observed `(patient, variable)` pairs with their raw inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphStep {
    pub n_patients: usize,
    pub n_vars: usize,
    /// Sorted lexicographically by `(patient, variable)`.
    pub edges: Vec<(usize, usize)>,
    pub values: Vec<f64>,
    pub times: Vec<f64>,
    pub delta_t: Vec<f64>,
}

impl GraphStep {
    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn patient_index(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.0).collect()
    }

    pub fn variable_index(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.1).collect()
    }

    /// Flat `p * n_vars + n` position of every edge in a `[B·V, ·]` bank.
    pub fn bank_index(&self) -> Vec<usize> {
        self.edges.iter().map(|&(p, n)| p * self.n_vars + n).collect()
    }
}

/// Graph for step `t` of every episode in `batch`. Episodes shorter than
/// `t + 1` steps contribute no edges.
pub fn build_graph_step(batch: &[&Episode], t: usize, n_vars: usize) -> GraphStep {
    let mut g = GraphStep {
        n_patients: batch.len(),
        n_vars,
        edges: Vec::new(),
        values: Vec::new(),
        times: Vec::new(),
        delta_t: Vec::new(),
    };
    for (p, e) in batch.iter().enumerate() {
        let Some(step) = e.steps.get(t) else { continue };
        for n in step.observed() {
            g.edges.push((p, n));
            g.values.push(step.values[n]);
            g.times.push(step.time);
            g.delta_t.push(step.delta_t[n]);
        }
    }
    g
}

/// Parameter names of the edge-embedding block.
pub mod names {
    pub const VALUE_W: &str = "edge.value_w";
    pub const VALUE_B: &str = "edge.value_b";
    pub const TIME_FREQ: &str = "edge.time_freq";
    pub const TIME_PHASE: &str = "edge.time_phase";
    pub const VAR_EMB: &str = "edge.var_emb";
    pub const VAR_NODES: &str = "node.var_init";

    pub fn layer(l: usize, part: &str) -> String {
        format!("mp{l}.{part}")
    }
}

/// Registers the edge-embedding, variable-node and message-passing parameters.
pub fn register_params<S: Scalar>(
    params: &mut ParamSet<S>,
    rng: &mut SeededRng,
    d: usize,
    n_vars: usize,
    layers: usize,
) -> Result<()> {
    params.insert(names::VALUE_W, fan_in_uniform(rng, &[1, d], 1))?;
    params.insert(names::VALUE_B, Tensor::zeros(&[d]))?;
    params.insert(names::TIME_FREQ, fan_in_uniform(rng, &[1, d], 1))?;
    params.insert(names::TIME_PHASE, fan_in_uniform(rng, &[d], 1))?;
    params.insert(names::VAR_EMB, fan_in_uniform(rng, &[n_vars, d], d))?;
    params.insert(names::VAR_NODES, fan_in_uniform(rng, &[n_vars, d], d))?;
    for l in 0..layers {
        params.insert(names::layer(l, "msg_w"), fan_in_uniform(rng, &[2 * d, d], 2 * d))?;
        params.insert(names::layer(l, "msg_b"), Tensor::zeros(&[d]))?;
        params.insert(names::layer(l, "node_w"), fan_in_uniform(rng, &[2 * d, d], 2 * d))?;
        params.insert(names::layer(l, "node_b"), Tensor::zeros(&[d]))?;
        params.insert(names::layer(l, "edge_w"), fan_in_uniform(rng, &[3 * d, d], 3 * d))?;
        params.insert(names::layer(l, "edge_b"), Tensor::zeros(&[d]))?;
    }
    Ok(())
}

/// Tape handles of the edge-embedding block.
#[derive(Clone, Copy, Debug)]
pub struct EdgeEmbedding {
    pub value_w: Var,
    pub value_b: Var,
    pub time_freq: Var,
    pub time_phase: Var,
    pub var_emb: Var,
}

impl EdgeEmbedding {
    pub fn bind(b: &Bound) -> Result<Self> {
        Ok(Self {
            value_w: b.var(names::VALUE_W)?,
            value_b: b.var(names::VALUE_B)?,
            time_freq: b.var(names::TIME_FREQ)?,
            time_phase: b.var(names::TIME_PHASE)?,
            var_emb: b.var(names::VAR_EMB)?,
        })
    }

    /// Time2Vec features of `[E, 1]` times: component 0 linear, the rest sinusoidal.
    pub fn time_embedding<S: Scalar>(&self, tape: &Tape<S>, times: &[f64]) -> Result<Var> {
        let d = tape.shape(self.time_freq)[1];
        let t = tape.constant(Tensor::from_f64(vec![times.len(), 1], times)?);
        let lin = tape.add(tape.matmul(t, self.time_freq)?, self.time_phase)?;
        let mut first = vec![0.0; d];
        first[0] = 1.0;
        let rest: Vec<f64> = first.iter().map(|x| 1.0 - x).collect();
        let first = tape.constant(Tensor::from_f64(vec![d], &first)?);
        let rest = tape.constant(Tensor::from_f64(vec![d], &rest)?);
        let periodic = tape.mul(tape.sin(lin), rest)?;
        tape.add(tape.mul(lin, first)?, periodic)
    }

    /// Initial `[E, d]` edge features, or `None` for a graph without edges.
    pub fn embed<S: Scalar>(&self, tape: &Tape<S>, step: &GraphStep, use_time: bool) -> Result<Option<Var>> {
        if step.edges.is_empty() {
            return Ok(None);
        }
        if let Some(i) = step.values.iter().position(|v| !v.is_finite()) {
            let (p, n) = step.edges[i];
            return Err(Error::Data(format!(
                "non-finite value on edge (patient {p}, variable {n}) at time {}",
                step.times[i]
            )));
        }
        let x = tape.constant(Tensor::from_f64(vec![step.n_edges(), 1], &step.values)?);
        let value = tape.add(tape.matmul(x, self.value_w)?, self.value_b)?;
        let var = tape.gather_rows(self.var_emb, &step.variable_index())?;
        let mut e = tape.add(value, var)?;
        if use_time {
            e = tape.add(e, self.time_embedding(tape, &step.times)?)?;
        }
        Ok(Some(e))
    }
}

/// Patient states `[B, d]` (constant unit vectors, untracked) and the
/// learnable variable states `[V, d]`.
pub fn init_node_states<S: Scalar>(tape: &Tape<S>, bound: &Bound, n_patients: usize, d: usize) -> Result<(Var, Var)> {
    let c = S::lit(1.0 / (d as f64).sqrt());
    let patients = tape.constant(Tensor::full(&[n_patients, d], c));
    Ok((patients, bound.var(names::VAR_NODES)?))
}

/// One edge-aware message-passing layer.
#[derive(Clone, Copy, Debug)]
pub struct EdgeSageLayer {
    pub msg_w: Var,
    pub msg_b: Var,
    pub node_w: Var,
    pub node_b: Var,
    pub edge_w: Var,
    pub edge_b: Var,
}

/// Node and edge states flowing through message passing.
#[derive(Clone, Copy, Debug)]
pub struct GraphState {
    pub patients: Var,
    pub variables: Var,
    pub edges: Option<Var>,
}

impl EdgeSageLayer {
    pub fn bind(b: &Bound, l: usize) -> Result<Self> {
        Ok(Self {
            msg_w: b.var(&names::layer(l, "msg_w"))?,
            msg_b: b.var(&names::layer(l, "msg_b"))?,
            node_w: b.var(&names::layer(l, "node_w"))?,
            node_b: b.var(&names::layer(l, "node_b"))?,
            edge_w: b.var(&names::layer(l, "edge_w"))?,
            edge_b: b.var(&names::layer(l, "edge_b"))?,
        })
    }

    /// Messages `ReLU(W_m [v_j ‖ e_ij] + b_m)` summed per receiving node, in
    /// both directions; node update `ReLU(W_h [v_i ‖ m_i] + b)`; residual
    /// edge update `e + ReLU(W_e [v_p' ‖ v_n' ‖ e] + b_e)`.
    pub fn forward<S: Scalar>(&self, tape: &Tape<S>, step: &GraphStep, state: GraphState) -> Result<GraphState> {
        let d = tape.shape(state.patients)[1];
        let (b, v) = (step.n_patients, step.n_vars);
        let (agg_p, agg_v) = match state.edges {
            Some(e) => {
                let (pi, ni) = (step.patient_index(), step.variable_index());
                let from_var = tape.concat(&[tape.gather_rows(state.variables, &ni)?, e], 1)?;
                let to_patient = tape.relu(tape.linear(from_var, self.msg_w, Some(self.msg_b))?);
                let from_patient = tape.concat(&[tape.gather_rows(state.patients, &pi)?, e], 1)?;
                let to_var = tape.relu(tape.linear(from_patient, self.msg_w, Some(self.msg_b))?);
                (
                    tape.scatter_add_rows(to_patient, &pi, b)?,
                    tape.scatter_add_rows(to_var, &ni, v)?,
                )
            }
            None => (
                tape.constant(Tensor::zeros(&[b, d])),
                tape.constant(Tensor::zeros(&[v, d])),
            ),
        };
        let update = |nodes: Var, agg: Var| -> Result<Var> {
            let x = tape.concat(&[nodes, agg], 1)?;
            Ok(tape.relu(tape.linear(x, self.node_w, Some(self.node_b))?))
        };
        let patients = update(state.patients, agg_p)?;
        let variables = update(state.variables, agg_v)?;
        let edges = match state.edges {
            Some(e) => {
                let x = tape.concat(
                    &[
                        tape.gather_rows(patients, &step.patient_index())?,
                        tape.gather_rows(variables, &step.variable_index())?,
                        e,
                    ],
                    1,
                )?;
                let delta = tape.relu(tape.linear(x, self.edge_w, Some(self.edge_b))?);
                Some(tape.add(e, delta)?)
            }
            None => None,
        };
        Ok(GraphState {
            patients,
            variables,
            edges,
        })
    }
}

/// `layers.len()` sequential message-passing layers with unshared parameters.
pub fn message_pass<S: Scalar>(
    tape: &Tape<S>,
    layers: &[EdgeSageLayer],
    step: &GraphStep,
    state: GraphState,
) -> Result<GraphState> {
    if layers.is_empty() {
        return Err(Error::Config("message passing needs at least one layer".into()));
    }
    layers.iter().try_fold(state, |s, layer| layer.forward(tape, step, s))
}
