//! Variable-specific temporal decay of hidden states and the state-aware
//! patient attention.
//!
//! Each observed `(patient, variable)` pair at a step decays its stored
//! hidden state by `γ = K(λ, Δt)` with `λ = softplus(MLP(e))`, then mixes in
//! the edge feature through a sigmoid gate. Pairs that are not observed keep
//! their state untouched.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Bound, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{fan_in_uniform, SeededRng};
use crate::scalar::Scalar;

pub mod names {
    pub const MLP_W1: &str = "decay.mlp_w1";
    pub const MLP_B1: &str = "decay.mlp_b1";
    pub const MLP_W2: &str = "decay.mlp_w2";
    pub const MLP_B2: &str = "decay.mlp_b2";
    pub const FIXED_LAMBDA: &str = "decay.lambda_raw";
    pub const GATE_W: &str = "gate.w";
    pub const GATE_B: &str = "gate.b";
    pub const ATTN_PROJ: &str = "attn.proj";
}

/// Shape of the decay kernel `γ(λ, Δt)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayKernel {
    /// `exp(-λΔt)` with `λ` from the edge MLP.
    #[default]
    MlpExp,
    /// `exp(-λΔt)` with one learned scalar `λ`.
    #[serde(rename = "exp")]
    FixedExp,
    /// `exp(-(λΔt)²)`.
    MlpGaussian,
    /// `max(1 - λΔt, 0)`.
    MlpLinear,
}

impl DecayKernel {
    pub const ALL: [DecayKernel; 4] = [
        DecayKernel::MlpExp,
        DecayKernel::FixedExp,
        DecayKernel::MlpGaussian,
        DecayKernel::MlpLinear,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DecayKernel::MlpExp => "mlp_exp",
            DecayKernel::FixedExp => "exp",
            DecayKernel::MlpGaussian => "mlp_gaussian",
            DecayKernel::MlpLinear => "mlp_linear",
        }
    }

    pub fn uses_mlp(self) -> bool {
        self != DecayKernel::FixedExp
    }
}

impl std::str::FromStr for DecayKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DecayKernel::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown decay kernel `{s}`")))
    }
}

pub fn register_params<S: Scalar>(
    params: &mut ParamSet<S>,
    rng: &mut SeededRng,
    d: usize,
    kernel: DecayKernel,
) -> Result<()> {
    if kernel.uses_mlp() {
        params.insert(names::MLP_W1, fan_in_uniform(rng, &[d, d], d))?;
        params.insert(names::MLP_B1, Tensor::zeros(&[d]))?;
        params.insert(names::MLP_W2, fan_in_uniform(rng, &[d, 1], d))?;
        params.insert(names::MLP_B2, Tensor::zeros(&[1]))?;
    } else {
        params.insert(names::FIXED_LAMBDA, Tensor::zeros(&[1]))?;
    }
    params.insert(names::GATE_W, fan_in_uniform(rng, &[2 * d, d], 2 * d))?;
    params.insert(names::GATE_B, Tensor::zeros(&[d]))?;
    params.insert(names::ATTN_PROJ, fan_in_uniform(rng, &[d, d], d))?;
    Ok(())
}

/// Where the decay rate comes from.
#[derive(Clone, Copy, Debug)]
pub enum RateSource {
    Mlp { w1: Var, b1: Var, w2: Var, b2: Var },
    Fixed { raw: Var },
}

/// Tape handles of the decay, gate and attention blocks.
#[derive(Clone, Copy, Debug)]
pub struct TemporalBlock {
    pub kernel: DecayKernel,
    pub rate: RateSource,
    pub gate_w: Var,
    pub gate_b: Var,
    pub attn_proj: Var,
}

impl TemporalBlock {
    pub fn bind(b: &Bound, kernel: DecayKernel) -> Result<Self> {
        let rate = if kernel.uses_mlp() {
            RateSource::Mlp {
                w1: b.var(names::MLP_W1)?,
                b1: b.var(names::MLP_B1)?,
                w2: b.var(names::MLP_W2)?,
                b2: b.var(names::MLP_B2)?,
            }
        } else {
            RateSource::Fixed {
                raw: b.var(names::FIXED_LAMBDA)?,
            }
        };
        Ok(Self {
            kernel,
            rate,
            gate_w: b.var(names::GATE_W)?,
            gate_b: b.var(names::GATE_B)?,
            attn_proj: b.var(names::ATTN_PROJ)?,
        })
    }

    /// Non-negative decay rates `[E, 1]` for edge features `[E, d]`.
    pub fn decay_rate<S: Scalar>(&self, tape: &Tape<S>, edges: Var) -> Result<Var> {
        match self.rate {
            RateSource::Mlp { w1, b1, w2, b2 } => {
                let hidden = tape.relu(tape.linear(edges, w1, Some(b1))?);
                Ok(tape.softplus(tape.linear(hidden, w2, Some(b2))?))
            }
            RateSource::Fixed { raw } => {
                let n = tape.shape(edges)[0];
                let ones = tape.constant(Tensor::ones(&[n, 1]));
                tape.mul(ones, tape.softplus(raw))
            }
        }
    }

    /// Decay factors `[E, 1]` for the edges' features and elapsed intervals.
    pub fn decay_factor<S: Scalar>(&self, tape: &Tape<S>, edges: Var, delta_t: &[f64]) -> Result<Var> {
        let lambda = self.decay_rate(tape, edges)?;
        kernel_factor(tape, self.kernel, lambda, delta_t)
    }

    /// `r = σ(W_r [e ‖ ĥ] + b)`, then `(1 - r) ⊙ ĥ + r ⊙ e`.
    pub fn gated_update<S: Scalar>(&self, tape: &Tape<S>, edges: Var, decayed: Var) -> Result<Var> {
        let x = tape.concat(&[edges, decayed], 1)?;
        let r = tape.sigmoid(tape.linear(x, self.gate_w, Some(self.gate_b))?);
        gate_mix(tape, r, edges, decayed)
    }

    /// Attention of each patient over its `V` variable states; returns the
    /// projected result `[B, d]` and the weights `[B, 1, V]`.
    pub fn node_attention<S: Scalar>(&self, tape: &Tape<S>, patients: Var, bank: Var) -> Result<(Var, Var)> {
        node_specific_attention(tape, patients, bank, self.attn_proj)
    }
}

/// `γ` for rates `[E, 1]` and intervals `Δt ≥ 0`. The exponent is clamped so
/// exponential kernels stay strictly positive for any finite input.
pub fn kernel_factor<S: Scalar>(tape: &Tape<S>, kernel: DecayKernel, lambda: Var, delta_t: &[f64]) -> Result<Var> {
    if let Some(bad) = delta_t.iter().find(|&&x| !(x >= 0.0)) {
        return Err(Error::Contract(format!("elapsed interval must be non-negative, got {bad}")));
    }
    let dt = tape.constant(Tensor::from_f64(vec![delta_t.len(), 1], delta_t)?);
    let scaled = tape.mul(lambda, dt)?;
    let cap = Some(S::max_exp_arg());
    Ok(match kernel {
        DecayKernel::MlpExp | DecayKernel::FixedExp => tape.exp(tape.neg(tape.clamp(scaled, None, cap))),
        DecayKernel::MlpGaussian => {
            let sq = tape.mul(scaled, scaled)?;
            tape.exp(tape.neg(tape.clamp(sq, None, cap)))
        }
        DecayKernel::MlpLinear => tape.relu(tape.add_scalar(tape.neg(scaled), S::one())),
    })
}

/// `ĥ = γ ⊙ h` with `γ: [E, 1]` broadcast over the feature axis.
pub fn decay_state<S: Scalar>(tape: &Tape<S>, hidden: Var, gamma: Var) -> Result<Var> {
    tape.mul(hidden, gamma)
}

/// `(1 - r) ⊙ ĥ + r ⊙ e`.
pub fn gate_mix<S: Scalar>(tape: &Tape<S>, r: Var, edges: Var, decayed: Var) -> Result<Var> {
    let keep = tape.add_scalar(tape.neg(r), S::one());
    tape.add(tape.mul(keep, decayed)?, tape.mul(r, edges)?)
}

/// `softmax(v_p Hᵀ / √d) H`, projected by `proj`, for patients `[B, d]` and a
/// hidden bank `[B·V, d]`.
pub fn node_specific_attention<S: Scalar>(tape: &Tape<S>, patients: Var, bank: Var, proj: Var) -> Result<(Var, Var)> {
    let ps = tape.shape(patients);
    let (b, d) = (ps[0], ps[1]);
    let rows = tape.shape(bank)[0];
    if b == 0 || !rows.is_multiple_of(b) {
        return Err(Error::Dimension {
            op: "node_attention",
            lhs: ps,
            rhs: tape.shape(bank),
        });
    }
    let v = rows / b;
    let q = tape.reshape(patients, &[b, 1, d])?;
    let h = tape.reshape(bank, &[b, v, d])?;
    let scores = tape.scale(tape.bmm(q, tape.transpose(h)?)?, S::lit(1.0 / (d as f64).sqrt()));
    let weights = tape.softmax(scores, 2)?;
    let attended = tape.reshape(tape.bmm(weights, h)?, &[b, d])?;
    Ok((tape.matmul(attended, proj)?, weights))
}
