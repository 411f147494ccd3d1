//! The assembled classifier: per-step graph encoding, decayed hidden bank,
//! codebook fusion and the classification head.

mod checkpoint;
mod train;

pub use checkpoint::{Checkpoint, CheckpointTensor, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use train::{EarlyStopping, EpochRecord, Evaluation, StopVerdict, TrainHistory};

use serde::{Deserialize, Serialize};

use crate::codebook::{self, Codebook};
use crate::data::{Episode, NormStats};
use crate::diffcore::{AdamConfig, Bound, GradcheckOptions, GradcheckReport, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{self, EdgeEmbedding, EdgeSageLayer, GraphState};
use crate::rng;
use crate::scalar::Scalar;
use crate::temporal::{self, DecayKernel, TemporalBlock};

pub mod names {
    pub const HEAD_W1: &str = "head.w1";
    pub const HEAD_B1: &str = "head.b1";
    pub const HEAD_W2: &str = "head.w2";
    pub const HEAD_B2: &str = "head.b2";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DbglConfig {
    pub d: usize,
    pub codebook_size: usize,
    pub layers: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub kernel: DecayKernel,
    pub seed: u64,
    pub n_classes: usize,
}

impl Default for DbglConfig {
    fn default() -> Self {
        Self {
            d: 16,
            codebook_size: 4096,
            layers: 2,
            lr: 0.005,
            batch_size: 256,
            epochs: 30,
            patience: 5,
            kernel: DecayKernel::MlpExp,
            seed: 0,
            n_classes: 2,
        }
    }
}

impl DbglConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("codebook_size", self.codebook_size),
            ("layers", self.layers),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("patience", self.patience),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{name}` must be positive")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.n_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.n_classes)));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Component toggles; every one is on by default.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    /// Temporal decay of the hidden bank.
    pub use_tde: bool,
    /// Patient attention over its variable states.
    pub use_sna: bool,
    /// Reweighted hidden bank in the classifier input.
    pub use_hvs: bool,
    /// Per-step codebook fusion.
    pub use_cb: bool,
    /// Matched code vector in the classifier input.
    pub use_mcv: bool,
    /// Time embedding in the edge features.
    pub use_te: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_tde: true,
            use_sna: true,
            use_hvs: true,
            use_cb: true,
            use_mcv: true,
            use_te: true,
        }
    }
}

impl AblationFlags {
    pub const NAMES: [&'static str; 6] = ["tde", "sna", "hvs", "cb", "mcv", "te"];

    /// Turns one component off by its short name.
    pub fn disable(&mut self, name: &str) -> Result<()> {
        let slot = match name {
            "tde" => &mut self.use_tde,
            "sna" => &mut self.use_sna,
            "hvs" => &mut self.use_hvs,
            "cb" => &mut self.use_cb,
            "mcv" => &mut self.use_mcv,
            "te" => &mut self.use_te,
            other => return Err(Error::Config(format!("unknown ablation `{other}`"))),
        };
        *slot = false;
        Ok(())
    }

    /// Without a codebook there is nothing to retrieve from.
    pub fn normalized(mut self) -> Self {
        if !self.use_cb {
            self.use_mcv = false;
        }
        self
    }

    pub fn needs_codebook(&self) -> bool {
        self.use_cb || self.use_mcv
    }
}

/// Input width of the classifier MLP.
pub fn head_input_dim(d: usize, n_vars: usize, flags: &AblationFlags) -> usize {
    d + if flags.use_mcv { d } else { 0 } + if flags.use_hvs { n_vars * d } else { 0 }
}

/// `h + h ⊙ softmax_V(counts)` per patient, flattened to `[B, V·d]`.
/// `counts` holds per-patient, per-variable observation counts, `[B·V]`.
pub fn head_reweight<S: Scalar>(tape: &Tape<S>, bank: Var, counts: &[f64], n_vars: usize) -> Result<Var> {
    let shape = tape.shape(bank);
    if n_vars == 0 || shape.len() != 2 || shape[0] != counts.len() || !counts.len().is_multiple_of(n_vars) {
        return Err(Error::Dimension {
            op: "head_reweight",
            lhs: shape,
            rhs: vec![counts.len(), n_vars],
        });
    }
    let mut weights = Vec::with_capacity(counts.len());
    for row in counts.chunks(n_vars) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|c| (c - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        weights.extend(exps.iter().map(|e| 1.0 + e / total));
    }
    let w = tape.constant(Tensor::from_f64(vec![counts.len(), 1], &weights)?);
    let scaled = tape.mul(bank, w)?;
    tape.reshape(scaled, &[counts.len() / n_vars, n_vars * shape[1]])
}

/// Per-patient, per-variable observation counts, `[B·V]`.
pub fn observation_counts(batch: &[&Episode], n_vars: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch.len() * n_vars];
    for (p, e) in batch.iter().enumerate() {
        for s in &e.steps {
            for n in s.observed() {
                out[p * n_vars + n] += 1.0;
            }
        }
    }
    out
}

/// Tape values produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[B, C]`.
    pub logits: Var,
    /// Final patient embeddings `[B, d]`.
    pub patients: Var,
    /// Hidden bank `[B·V, d]` after the last step.
    pub bank: Var,
    /// Codebook weights of every fusion, `[N, K]` each.
    pub fusion_weights: Vec<Var>,
    /// Retrieved code indices, when retrieval is on.
    pub retrieved: Option<Vec<usize>>,
    /// Steps that had at least one edge.
    pub active_steps: usize,
}

/// Dynamic bipartite graph classifier over `n_vars` input variables.
#[derive(Clone, Debug, PartialEq)]
pub struct Dbgl<S: Scalar = f64> {
    pub config: DbglConfig,
    pub flags: AblationFlags,
    pub n_vars: usize,
    /// Normalization applied to inputs before they reach the model.
    pub norm: Option<NormStats>,
    /// Horizon the elapsed intervals were computed with during training.
    pub t_max: Option<f64>,
    pub params: ParamSet<S>,
}

impl<S: Scalar> Dbgl<S> {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: DbglConfig, flags: AblationFlags, n_vars: usize) -> Result<Self> {
        config.validate()?;
        if n_vars == 0 {
            return Err(Error::Config("the model needs at least one variable".into()));
        }
        let flags = flags.normalized();
        let mut rng = rng::substream(config.seed, "init");
        let d = config.d;
        let mut params = ParamSet::new();
        graph::register_params(&mut params, &mut rng, d, n_vars, config.layers)?;
        temporal::register_params(&mut params, &mut rng, d, config.kernel)?;
        if flags.needs_codebook() {
            codebook::register_params(&mut params, &mut rng, d, config.codebook_size)?;
        }
        let input = head_input_dim(d, n_vars, &flags);
        params.insert(names::HEAD_W1, rng::fan_in_uniform(&mut rng, &[input, 2 * d], input))?;
        params.insert(names::HEAD_B1, Tensor::zeros(&[2 * d]))?;
        params.insert(
            names::HEAD_W2,
            rng::fan_in_uniform(&mut rng, &[2 * d, config.n_classes], 2 * d),
        )?;
        params.insert(names::HEAD_B2, Tensor::zeros(&[config.n_classes]))?;
        Ok(Self {
            config,
            flags,
            n_vars,
            norm: None,
            t_max: None,
            params,
        })
    }

    pub fn n_params(&self) -> usize {
        self.params.numel()
    }

    fn check_batch(&self, batch: &[&Episode]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        for e in batch {
            if let Some(s) = e.steps.iter().find(|s| s.values.len() != self.n_vars) {
                return Err(Error::Compatibility(format!(
                    "episode `{}` has {} variables, the model expects {}",
                    e.patient_id,
                    s.values.len(),
                    self.n_vars
                )));
            }
            if e.label >= self.config.n_classes {
                return Err(Error::Compatibility(format!(
                    "label {} of `{}` outside the model's {} classes",
                    e.label, e.patient_id, self.config.n_classes
                )));
            }
        }
        Ok(())
    }

    /// Runs the full model on `batch` with parameters bound on `tape`.
    pub fn forward_on(&self, tape: &Tape<S>, bound: &Bound, batch: &[&Episode]) -> Result<ForwardOutput> {
        self.check_batch(batch)?;
        let (b, v, d) = (batch.len(), self.n_vars, self.config.d);
        let flags = self.flags;
        let embed = EdgeEmbedding::bind(bound)?;
        let layers = (0..self.config.layers)
            .map(|l| EdgeSageLayer::bind(bound, l))
            .collect::<Result<Vec<_>>>()?;
        let temporal = TemporalBlock::bind(bound, self.config.kernel)?;
        let book = if flags.needs_codebook() {
            Some(Codebook::bind(bound)?)
        } else {
            None
        };

        let (patients, variables) = graph::init_node_states(tape, bound, b, d)?;
        let mut state = GraphState {
            patients,
            variables,
            edges: None,
        };
        let mut bank = tape.constant(Tensor::zeros(&[b * v, d]));
        let mut fusion_weights = Vec::new();
        let steps = batch.iter().map(|e| e.steps.len()).max().unwrap_or(0);
        let mut active = 0;
        for t in 0..steps {
            let step = graph::build_graph_step(batch, t, v);
            if step.edges.is_empty() {
                continue;
            }
            if active > 0 {
                if let (true, Some(book)) = (flags.use_cb, &book) {
                    let (fp, fv) = book.fuse_nodes(tape, state.patients, state.variables)?;
                    fusion_weights.push(fp.weights);
                    fusion_weights.push(fv.weights);
                    state.patients = fp.output;
                    state.variables = fv.output;
                }
                if flags.use_sna {
                    state.patients = temporal.node_attention(tape, state.patients, bank)?.0;
                }
            }
            active += 1;
            state.edges = embed.embed(tape, &step, flags.use_te)?;
            state = graph::message_pass(tape, &layers, &step, state)?;
            let edges = state.edges.expect("step has edges");
            let idx = step.bank_index();
            let prev = tape.gather_rows(bank, &idx)?;
            let decayed = if flags.use_tde {
                let gamma = temporal.decay_factor(tape, edges, &step.delta_t)?;
                temporal::decay_state(tape, prev, gamma)?
            } else {
                prev
            };
            let updated = temporal.gated_update(tape, edges, decayed)?;
            bank = tape.scatter_rows(bank, updated, &idx)?;
            state.edges = None;
        }

        let mut parts = vec![state.patients];
        let mut retrieved = None;
        if flags.use_mcv {
            let book = book.as_ref().expect("retrieval implies a codebook");
            let (idx, rows) = book.retrieve(tape, state.patients)?;
            parts.push(rows);
            retrieved = Some(idx);
        }
        if flags.use_hvs {
            let counts = observation_counts(batch, v);
            parts.push(head_reweight(tape, bank, &counts, v)?);
        }
        let z = tape.concat(&parts, 1)?;
        let hidden = tape.relu(tape.linear(
            z,
            bound.var(names::HEAD_W1)?,
            Some(bound.var(names::HEAD_B1)?),
        )?);
        let logits = tape.linear(
            hidden,
            bound.var(names::HEAD_W2)?,
            Some(bound.var(names::HEAD_B2)?),
        )?;
        Ok(ForwardOutput {
            logits,
            patients: state.patients,
            bank,
            fusion_weights,
            retrieved,
            active_steps: active,
        })
    }

    /// Logits `[B, C]` as plain values.
    pub fn logits(&self, batch: &[&Episode]) -> Result<Vec<S>> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let out = self.forward_on(&tape, &bound, batch)?;
        Ok(tape.data(out.logits))
    }

    /// Mean cross-entropy of `batch` on `tape`.
    pub fn loss_on(&self, tape: &Tape<S>, bound: &Bound, batch: &[&Episode]) -> Result<Var> {
        let out = self.forward_on(tape, bound, batch)?;
        let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
        tape.cross_entropy(out.logits, &labels)
    }

    /// Finite-difference check of every parameter block on `batch`.
    pub fn gradcheck(&self, batch: &[&Episode], opts: &GradcheckOptions) -> Result<GradcheckReport> {
        crate::diffcore::check_gradients(&self.params, |tape, bound| self.loss_on(tape, bound, batch), opts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reweight_examples() {
        let tape = Tape::<f64>::new();
        let bank = tape.constant(Tensor::from_f64(vec![1, 2], &[1.0, -2.0]).unwrap());
        assert_eq!(tape.data(head_reweight(&tape, bank, &[3.0], 1).unwrap()), vec![2.0, -4.0]);
        let bank = tape.constant(Tensor::ones(&[4, 1]));
        let out = tape.data(head_reweight(&tape, bank, &[0.0; 4], 4).unwrap());
        assert!(out.iter().all(|&x| (x - 1.25).abs() < 1e-15));
    }

    #[test]
    fn flags() {
        let mut f = AblationFlags::default();
        f.disable("cb").unwrap();
        assert!(!f.normalized().use_mcv);
        assert!(f.disable("gru").is_err());
        assert_eq!(head_input_dim(8, 3, &AblationFlags::default()), 8 + 8 + 24);
    }

    #[test]
    fn config_rejects_zeroes() {
        let c = DbglConfig {
            layers: 0,
            ..Default::default()
        };
        assert!(matches!(Dbgl::<f64>::new(c, AblationFlags::default(), 3), Err(Error::Config(_))));
    }
}
