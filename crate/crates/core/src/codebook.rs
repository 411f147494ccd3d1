//! Learnable prototype codebook.
//!
//! Soft fusion pulls each node embedding towards a similarity-weighted mix
//! of the `K` prototypes; retrieval picks the single best-matching row for
//! the classifier input.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Bound, ParamSet, Tape, Tensor, Var, COSINE_EPS};
use crate::error::{Error, Result};
use crate::rng::{fan_in_uniform, SeededRng};
use crate::scalar::Scalar;

/// Guard in the adaptive scale `‖g_quant‖ / (‖g‖ + ε)`.
pub const FUSE_EPS: f64 = 1e-8;

pub mod names {
    pub const ENTRIES: &str = "codebook.entries";
    pub const FUSE_W: &str = "codebook.fuse_w";
    pub const FUSE_B: &str = "codebook.fuse_b";
}

pub fn register_params<S: Scalar>(params: &mut ParamSet<S>, rng: &mut SeededRng, d: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("codebook size must be at least 1".into()));
    }
    params.insert(names::ENTRIES, fan_in_uniform(rng, &[k, d], d))?;
    params.insert(names::FUSE_W, fan_in_uniform(rng, &[2 * d, d], 2 * d))?;
    params.insert(names::FUSE_B, Tensor::zeros(&[d]))?;
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct Codebook {
    pub entries: Var,
    pub fuse_w: Var,
    pub fuse_b: Var,
}

/// Output of [`soft_fuse`].
#[derive(Clone, Copy, Debug)]
pub struct Fused {
    /// `g + α g_quant`, `[N, d]`.
    pub output: Var,
    /// Softmax weights over entries, `[N, K]`.
    pub weights: Var,
}

impl Codebook {
    pub fn bind(b: &Bound) -> Result<Self> {
        Ok(Self {
            entries: b.var(names::ENTRIES)?,
            fuse_w: b.var(names::FUSE_W)?,
            fuse_b: b.var(names::FUSE_B)?,
        })
    }

    /// Fuses patient `[B, d]` and variable `[V, d]` node states. A patient
    /// is paired with the mean variable state, a variable with the mean
    /// patient state; the pair is projected back to `d` and fused.
    pub fn fuse_nodes<S: Scalar>(&self, tape: &Tape<S>, patients: Var, variables: Var) -> Result<(Fused, Fused)> {
        let (b, v) = (tape.shape(patients)[0], tape.shape(variables)[0]);
        let mean_p = tape.scale(tape.sum_axis(patients, 0)?, S::lit(1.0 / b as f64));
        let mean_v = tape.scale(tape.sum_axis(variables, 0)?, S::lit(1.0 / v as f64));
        let ones_b = tape.constant(Tensor::ones(&[b, 1]));
        let ones_v = tape.constant(Tensor::ones(&[v, 1]));
        let gp = tape.concat(&[patients, tape.matmul(ones_b, mean_v)?], 1)?;
        let gv = tape.concat(&[tape.matmul(ones_v, mean_p)?, variables], 1)?;
        let gp = tape.linear(gp, self.fuse_w, Some(self.fuse_b))?;
        let gv = tape.linear(gv, self.fuse_w, Some(self.fuse_b))?;
        Ok((soft_fuse(tape, gp, self.entries)?, soft_fuse(tape, gv, self.entries)?))
    }

    pub fn retrieve<S: Scalar>(&self, tape: &Tape<S>, g: Var) -> Result<(Vec<usize>, Var)> {
        retrieve(tape, g, self.entries)
    }
}

/// Cosine similarities `[N, K]` between the rows of `g` and of `entries`.
pub fn cosine_matrix<S: Scalar>(tape: &Tape<S>, g: Var, entries: Var) -> Result<Var> {
    let eps = S::lit(COSINE_EPS);
    let dot = tape.matmul(g, tape.transpose(entries)?)?;
    let ng = tape.add_scalar(tape.l2_norm(g, 1)?, eps);
    let nc = tape.add_scalar(tape.l2_norm(entries, 1)?, eps);
    let denom = tape.matmul(ng, tape.transpose(nc)?)?;
    tape.div(dot, denom)
}

/// `w = softmax_k cos(g, c_k)`, `g_quant = w C`, `α = ‖g_quant‖ / (‖g‖ + ε)`,
/// result `g + α g_quant`.
pub fn soft_fuse<S: Scalar>(tape: &Tape<S>, g: Var, entries: Var) -> Result<Fused> {
    let weights = tape.softmax(cosine_matrix(tape, g, entries)?, 1)?;
    let quant = tape.matmul(weights, entries)?;
    let alpha = tape.div(
        tape.l2_norm(quant, 1)?,
        tape.add_scalar(tape.l2_norm(g, 1)?, S::lit(FUSE_EPS)),
    )?;
    Ok(Fused {
        output: tape.add(g, tape.mul(alpha, quant)?)?,
        weights,
    })
}

/// Per row of `sims`, the index of the largest entry; ties go to the lower
/// index.
pub fn argmax_rows<S: Scalar>(sims: &[S], k: usize) -> Vec<usize> {
    sims.chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Best-matching entry per row of `g` and the gathered code vectors. The
/// selection carries no gradient; the gathered rows do.
pub fn retrieve<S: Scalar>(tape: &Tape<S>, g: Var, entries: Var) -> Result<(Vec<usize>, Var)> {
    let k = tape.shape(entries)[0];
    let sims = {
        let probe = Tape::<S>::new();
        let g = probe.constant(tape.value(g).clone());
        let c = probe.constant(tape.value(entries).clone());
        probe.data(cosine_matrix(&probe, g, c)?)
    };
    let idx = argmax_rows(&sims, k);
    let rows = tape.gather_rows(entries, &idx)?;
    Ok((idx, rows))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilizationReport {
    /// Mean weight per entry over the samples.
    pub mean_weights: Vec<f64>,
    /// Fraction of entries whose mean weight exceeds `1/K`.
    pub utilization: f64,
}

/// Soft utilization of weight rows `[N, K]` (flattened).
pub fn utilization(weights: &[f64], k: usize) -> Result<UtilizationReport> {
    if k == 0 || !weights.len().is_multiple_of(k) || weights.is_empty() {
        return Err(Error::Contract(format!(
            "{} weights do not form rows of length {k}",
            weights.len()
        )));
    }
    let n = weights.len() / k;
    let mut mean = vec![0.0; k];
    for (i, row) in weights.chunks(k).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!("weight row {i} sums to {s}, not 1")));
        }
        for (m, w) in mean.iter_mut().zip(row) {
            *m += w;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let uniform = 1.0 / k as f64;
    let above = mean.iter().filter(|&&m| m > uniform).count();
    Ok(UtilizationReport {
        mean_weights: mean,
        utilization: above as f64 / k as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(tape: &Tape<f64>, shape: &[usize], x: &[f64]) -> Var {
        tape.constant(Tensor::from_f64(shape.to_vec(), x).unwrap())
    }

    #[test]
    fn single_entry() {
        let tape = Tape::new();
        let g = t(&tape, &[1, 2], &[3.0, 4.0]);
        let c = t(&tape, &[1, 2], &[1.0, 0.0]);
        let f = soft_fuse(&tape, g, c).unwrap();
        assert_eq!(tape.data(f.weights), vec![1.0]);
        let alpha = 1.0 / (5.0 + FUSE_EPS);
        let out = tape.data(f.output);
        assert!((out[0] - (3.0 + alpha)).abs() < 1e-15);
        assert_eq!(out[1], 4.0);
    }

    #[test]
    fn identical_entries_give_that_entry() {
        let tape = Tape::new();
        let g = t(&tape, &[2, 2], &[0.3, -1.0, 5.0, 2.0]);
        let c = t(&tape, &[3, 2], &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let q = tape.matmul(soft_fuse(&tape, g, c).unwrap().weights, c).unwrap();
        for (a, b) in tape.data(q).iter().zip([1.0, 2.0, 1.0, 2.0]) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn retrieval_rules() {
        let tape = Tape::new();
        let c = t(&tape, &[3, 2], &[1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        let g = t(&tape, &[2, 2], &[0.0, 2.0, 5.0, 0.0]);
        assert_eq!(retrieve(&tape, g, c).unwrap().0, vec![1, 0]);
        let pm = t(&tape, &[2, 2], &[1.0, 1.0, -1.0, -1.0]);
        let g = t(&tape, &[2, 2], &[1.0, 0.5, -1.0, -0.5]);
        assert_eq!(retrieve(&tape, g, pm).unwrap().0, vec![0, 1]);
    }

    #[test]
    fn utilization_examples() {
        assert_eq!(utilization(&[0.25; 8], 4).unwrap().utilization, 0.0);
        let r = utilization(&[1.0, 0.0, 0.0, 0.0], 4).unwrap();
        assert_eq!(r.utilization, 0.25);
        assert!(matches!(utilization(&[0.5, 0.6], 2), Err(Error::Contract(_))));
    }
}
