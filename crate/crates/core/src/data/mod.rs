//! Irregular multivariate episodes: construction, the elapsed-interval rule,
//! normalization, splitting, and the leave-variables-out protocol.

mod csv;
mod synth;

pub use self::csv::{
    load_dataset, load_dir, read_split_manifest, read_variables, save_dir, write_labels,
    write_observations, write_splits, write_variables, SplitName, LABELS_FILE, LABELS_HEADER,
    OBSERVATIONS_FILE, OBSERVATIONS_HEADER, SPLITS_FILE, SPLITS_HEADER, VARIABLES_FILE,
};
pub use synth::{simulate_ou_path, synthesize, LabelFeature, LabelRule, SyntheticConfig};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Standard deviations below this are treated as degenerate during normalization.
pub const STD_FLOOR: f64 = 1e-8;

/// One measurement of one variable for one patient.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub patient_id: String,
    pub time: f64,
    pub variable: usize,
    pub value: f64,
}

/// All observations of a patient that share one timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub time: f64,
    /// Values per variable; entries with `mask == false` hold 0.
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
    /// Elapsed interval per variable; 0 where unobserved.
    pub delta_t: Vec<f64>,
}

impl Step {
    pub fn observed(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(v, _)| v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub patient_id: String,
    /// Strictly increasing in time.
    pub steps: Vec<Step>,
    pub label: usize,
}

impl Episode {
    /// Groups `(time, variable, value)` triples into time steps. Later
    /// duplicates of the same `(time, variable)` overwrite earlier ones.
    pub fn from_triples(
        patient_id: impl Into<String>,
        triples: &[(f64, usize, f64)],
        n_vars: usize,
        label: usize,
        t_max: f64,
    ) -> Result<Self> {
        let mut times: Vec<f64> = triples.iter().map(|t| t.0).collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        let mut steps: Vec<Step> = times
            .iter()
            .map(|&time| Step {
                time,
                values: vec![0.0; n_vars],
                mask: vec![false; n_vars],
                delta_t: vec![0.0; n_vars],
            })
            .collect();
        for &(time, var, value) in triples {
            if var >= n_vars {
                return Err(Error::Schema(format!("variable index {var} out of range for {n_vars}")));
            }
            let i = times.binary_search_by(|t| t.total_cmp(&time)).expect("time present");
            steps[i].values[var] = value;
            steps[i].mask[var] = true;
        }
        let mut ep = Self {
            patient_id: patient_id.into(),
            steps,
            label,
        };
        ep.refresh_delta_t(t_max);
        Ok(ep)
    }

    pub fn n_observations(&self) -> usize {
        self.steps.iter().map(|s| s.mask.iter().filter(|&&m| m).count()).sum()
    }

    /// Times at which variable `v` was observed.
    pub fn times_of(&self, v: usize) -> Vec<f64> {
        self.steps.iter().filter(|s| s.mask[v]).map(|s| s.time).collect()
    }

    /// `(time, value)` pairs of variable `v`.
    pub fn series(&self, v: usize) -> Vec<(f64, f64)> {
        self.steps.iter().filter(|s| s.mask[v]).map(|s| (s.time, s.values[v])).collect()
    }

    fn refresh_delta_t(&mut self, t_max: f64) {
        let n_vars = self.steps.first().map_or(0, |s| s.mask.len());
        for v in 0..n_vars {
            let dts = compute_delta_t(&self.times_of(v), t_max);
            let mut it = dts.into_iter();
            for s in &mut self.steps {
                s.delta_t[v] = if s.mask[v] { it.next().expect("one per observation") } else { 0.0 };
            }
        }
    }
}

/// Elapsed interval for each observation of a variable observed at `times`
/// (sorted ascending): the mean of the gaps to both neighbours when both
/// exist, the single available gap otherwise, and `t_max / 2` for a lone
/// observation.
pub fn compute_delta_t(times: &[f64], t_max: f64) -> Vec<f64> {
    let n = times.len();
    (0..n)
        .map(|i| {
            let prev = (i > 0).then(|| times[i] - times[i - 1]);
            let next = (i + 1 < n).then(|| times[i + 1] - times[i]);
            match (prev, next) {
                (Some(p), Some(q)) => (p + q) / 2.0,
                (Some(p), None) => p,
                (None, Some(q)) => q,
                (None, None) => t_max / 2.0,
            }
        })
        .collect()
}

/// Per-variable z-score parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population mean and standard deviation of every variable over `train`.
    /// Unobserved variables get (0, 1); degenerate ones get std 1.
    pub fn fit(train: &Dataset) -> Self {
        let n_vars = train.n_vars();
        let mut sum = vec![0.0; n_vars];
        let mut count = vec![0usize; n_vars];
        for s in train.episodes.iter().flat_map(|e| &e.steps) {
            for v in s.observed() {
                sum[v] += s.values[v];
                count[v] += 1;
            }
        }
        let mean: Vec<f64> = (0..n_vars)
            .map(|v| if count[v] > 0 { sum[v] / count[v] as f64 } else { 0.0 })
            .collect();
        let mut sq = vec![0.0; n_vars];
        for s in train.episodes.iter().flat_map(|e| &e.steps) {
            for v in s.observed() {
                sq[v] += (s.values[v] - mean[v]).powi(2);
            }
        }
        let std = (0..n_vars)
            .map(|v| {
                let sd = if count[v] > 0 { (sq[v] / count[v] as f64).sqrt() } else { 1.0 };
                if sd < STD_FLOOR {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub variables: Vec<String>,
    pub episodes: Vec<Episode>,
    pub t_max: f64,
    pub n_classes: usize,
    /// Set once the values have been z-scored.
    pub norm: Option<NormStats>,
}

impl Dataset {
    pub fn new(variables: Vec<String>, episodes: Vec<Episode>, t_max: f64, n_classes: usize) -> Result<Self> {
        if !(t_max > 0.0 && t_max.is_finite()) {
            return Err(Error::Validation(format!("t_max must be positive and finite, got {t_max}")));
        }
        let n_vars = variables.len();
        for e in &episodes {
            if e.label >= n_classes {
                return Err(Error::Validation(format!(
                    "label {} of patient {} out of range for {n_classes} classes",
                    e.label, e.patient_id
                )));
            }
            for w in e.steps.windows(2) {
                if w[0].time >= w[1].time {
                    return Err(Error::Validation(format!(
                        "timestamps of patient {} are not strictly increasing",
                        e.patient_id
                    )));
                }
            }
            for s in &e.steps {
                if s.mask.len() != n_vars || s.values.len() != n_vars || s.delta_t.len() != n_vars {
                    return Err(Error::Validation(format!(
                        "patient {} has a step with the wrong variable count",
                        e.patient_id
                    )));
                }
                if s.time < 0.0 || s.time > t_max {
                    return Err(Error::Validation(format!(
                        "patient {} observed at {} outside [0, {t_max}]",
                        e.patient_id, s.time
                    )));
                }
                if s.observed().any(|v| !s.values[v].is_finite()) {
                    return Err(Error::Data(format!("non-finite value for patient {}", e.patient_id)));
                }
            }
        }
        let mut ds = Self {
            variables,
            episodes,
            t_max,
            n_classes,
            norm: None,
        };
        ds.set_t_max(t_max)?;
        Ok(ds)
    }

    pub fn n_vars(&self) -> usize {
        self.variables.len()
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Largest timestamp over all episodes, if any observation exists.
    pub fn max_time(&self) -> Option<f64> {
        self.episodes
            .iter()
            .filter_map(|e| e.steps.last().map(|s| s.time))
            .reduce(f64::max)
    }

    /// Replaces the horizon and recomputes every elapsed interval.
    pub fn set_t_max(&mut self, t_max: f64) -> Result<()> {
        if !(t_max > 0.0 && t_max.is_finite()) {
            return Err(Error::Validation(format!("t_max must be positive and finite, got {t_max}")));
        }
        self.t_max = t_max;
        for e in &mut self.episodes {
            e.refresh_delta_t(t_max);
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.episodes.iter().map(|e| e.label).collect()
    }

    /// Dataset restricted to the given episode indices, in that order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            variables: self.variables.clone(),
            episodes: idx.iter().map(|&i| self.episodes[i].clone()).collect(),
            t_max: self.t_max,
            n_classes: self.n_classes,
            norm: self.norm.clone(),
        }
    }

    /// Z-scores every observed value with `stats`.
    pub fn normalized(&self, stats: &NormStats) -> Self {
        let mut out = self.clone();
        for s in out.episodes.iter_mut().flat_map(|e| &mut e.steps) {
            for v in 0..s.mask.len() {
                if s.mask[v] {
                    s.values[v] = (s.values[v] - stats.mean[v]) / stats.std[v];
                }
            }
        }
        out.norm = Some(stats.clone());
        out
    }

    /// Inverse of [`Dataset::normalized`]; identity when not normalized.
    pub fn denormalized(&self) -> Self {
        let Some(stats) = &self.norm else { return self.clone() };
        let mut out = self.clone();
        for s in out.episodes.iter_mut().flat_map(|e| &mut e.steps) {
            for v in 0..s.mask.len() {
                if s.mask[v] {
                    s.values[v] = s.values[v] * stats.std[v] + stats.mean[v];
                }
            }
        }
        out.norm = None;
        out
    }

    /// Removes every observation of the given variables.
    pub fn hide_variables(&self, hidden: &[usize]) -> Self {
        let mut out = self.clone();
        for s in out.episodes.iter_mut().flat_map(|e| &mut e.steps) {
            for &v in hidden {
                s.mask[v] = false;
                s.values[v] = 0.0;
                s.delta_t[v] = 0.0;
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

/// Whether splitting keeps all episodes of a patient together.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitUnit {
    #[default]
    Patient,
    Record,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    /// Z-scores all three parts with statistics fitted on `train` only.
    pub fn normalized(&self) -> (Self, NormStats) {
        let stats = NormStats::fit(&self.train);
        (
            Self {
                train: self.train.normalized(&stats),
                val: self.val.normalized(&stats),
                test: self.test.normalized(&stats),
            },
            stats,
        )
    }

    /// Sets the horizon of every part to the largest training timestamp.
    pub fn fit_t_max_to_train(&mut self) -> Result<()> {
        let t = self.train.max_time().unwrap_or(self.train.t_max).max(f64::MIN_POSITIVE);
        let t = self.val.max_time().into_iter().chain(self.test.max_time()).fold(t, f64::max);
        self.train.set_t_max(t)?;
        self.val.set_t_max(t)?;
        self.test.set_t_max(t)
    }
}

/// Group sizes for `n` units under `ratios`; every part with a positive
/// ratio receives at least one unit.
fn split_sizes(n: usize, ratios: &SplitRatios) -> Result<[usize; 3]> {
    let r = [ratios.train, ratios.val, ratios.test];
    if r.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!("split ratios {r:?} must be non-negative and sum to 1")));
    }
    let needed = r.iter().filter(|&&x| x > 0.0).count();
    if n < needed {
        return Err(Error::Sizing(format!("{n} units cannot fill {needed} non-empty partitions")));
    }
    let part = |x: f64| if x > 0.0 { ((n as f64 * x).round() as usize).max(1) } else { 0 };
    let (val, test) = (part(r[1]), part(r[2]));
    let min_train = usize::from(r[0] > 0.0);
    if val + test + min_train > n {
        return Err(Error::Sizing(format!("{n} units too few for ratios {r:?}")));
    }
    Ok([n - val - test, val, test])
}

/// Seeded partition into train/validation/test.
pub fn split(dataset: &Dataset, ratios: &SplitRatios, seed: u64, unit: SplitUnit) -> Result<Splits> {
    let mut groups: Vec<Vec<usize>> = match unit {
        SplitUnit::Record => (0..dataset.len()).map(|i| vec![i]).collect(),
        SplitUnit::Patient => {
            let mut order: Vec<&str> = Vec::new();
            let mut by_id: HashMap<&str, Vec<usize>> = HashMap::new();
            for (i, e) in dataset.episodes.iter().enumerate() {
                by_id
                    .entry(&e.patient_id)
                    .or_insert_with(|| {
                        order.push(&e.patient_id);
                        Vec::new()
                    })
                    .push(i);
            }
            order.iter().map(|id| by_id.remove(id).expect("grouped")).collect()
        }
    };
    let [n_train, n_val, _] = split_sizes(groups.len(), ratios)?;
    let mut r = rng::substream(seed, "split");
    rng::shuffle(&mut r, &mut groups);
    let take = |gs: &[Vec<usize>]| gs.iter().flatten().copied().collect::<Vec<_>>();
    Ok(Splits {
        train: dataset.subset(&take(&groups[..n_train])),
        val: dataset.subset(&take(&groups[n_train..n_train + n_val])),
        test: dataset.subset(&take(&groups[n_train + n_val..])),
    })
}

/// Partition following a `patient_id,split` manifest.
pub fn split_by_manifest(dataset: &Dataset, manifest: &HashMap<String, SplitName>) -> Result<Splits> {
    let mut idx: [Vec<usize>; 3] = Default::default();
    for (i, e) in dataset.episodes.iter().enumerate() {
        let part = manifest
            .get(&e.patient_id)
            .ok_or_else(|| Error::Completeness(format!("patient {} missing from split manifest", e.patient_id)))?;
        idx[*part as usize].push(i);
    }
    Ok(Splits {
        train: dataset.subset(&idx[0]),
        val: dataset.subset(&idx[1]),
        test: dataset.subset(&idx[2]),
    })
}

/// Outcome of [`leave_variables_out`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeaveOut {
    pub rate: f64,
    pub hidden: Vec<usize>,
    /// True when `⌊rate·V⌋ = 0` and nothing was hidden.
    pub no_op: bool,
}

/// Seeded choice of `⌊rate·V⌋` variables to hide.
pub fn choose_hidden_variables(n_vars: usize, rate: f64, seed: u64) -> Result<LeaveOut> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Validation(format!("leave-out rate {rate} outside [0, 1)")));
    }
    let k = (rate * n_vars as f64 + 1e-9).floor() as usize;
    if k == 0 {
        log::warn!("leave-out rate {rate} hides no variable among {n_vars}");
        return Ok(LeaveOut {
            rate,
            hidden: Vec::new(),
            no_op: true,
        });
    }
    let mut vars: Vec<usize> = (0..n_vars).collect();
    let mut r = rng::substream(seed, "leave-out");
    rng::shuffle(&mut r, &mut vars);
    let mut hidden = vars[..k].to_vec();
    hidden.sort_unstable();
    Ok(LeaveOut {
        rate,
        hidden,
        no_op: false,
    })
}

/// Hides a seeded `⌊rate·V⌋` variables entirely from validation and test;
/// training is left untouched.
pub fn leave_variables_out(splits: &Splits, rate: f64, seed: u64) -> Result<(Splits, LeaveOut)> {
    let lo = choose_hidden_variables(splits.train.n_vars(), rate, seed)?;
    if lo.no_op {
        return Ok((splits.clone(), lo));
    }
    Ok((
        Splits {
            train: splits.train.clone(),
            val: splits.val.hide_variables(&lo.hidden),
            test: splits.test.hide_variables(&lo.hidden),
        },
        lo,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        let eps = (0..n)
            .map(|i| {
                Episode::from_triples(format!("p{i}"), &[(1.0, 0, i as f64), (2.0, 1, 1.0)], 2, i % 2, 48.0).unwrap()
            })
            .collect();
        Dataset::new(vec!["a".into(), "b".into()], eps, 48.0, 2).unwrap()
    }

    #[test]
    fn delta_t_rule_examples() {
        assert_eq!(compute_delta_t(&[2.0, 5.0, 6.0], 48.0)[1], 2.0);
        assert_eq!(compute_delta_t(&[1.0, 4.0], 48.0)[1], 3.0);
        assert_eq!(compute_delta_t(&[1.0, 4.0], 48.0)[0], 3.0);
        assert_eq!(compute_delta_t(&[7.0], 48.0), vec![24.0]);
        assert!(compute_delta_t(&[], 48.0).is_empty());
    }

    #[test]
    fn duplicate_entries_last_wins() {
        let e = Episode::from_triples("p", &[(1.0, 0, 3.0), (1.0, 0, 5.0)], 1, 0, 10.0).unwrap();
        assert_eq!(e.steps.len(), 1);
        assert_eq!(e.steps[0].values[0], 5.0);
        assert!(e.steps[0].mask[0]);
    }

    #[test]
    fn normalization_examples() {
        let eps = vec![
            Episode::from_triples("a", &[(1.0, 0, 0.0), (1.0, 1, 4.0)], 3, 0, 5.0).unwrap(),
            Episode::from_triples("b", &[(1.0, 0, 2.0), (2.0, 1, 4.0)], 3, 1, 5.0).unwrap(),
        ];
        let ds = Dataset::new(vec!["x".into(), "c".into(), "u".into()], eps, 5.0, 2).unwrap();
        let stats = NormStats::fit(&ds);
        assert_eq!(stats.mean, vec![1.0, 4.0, 0.0]);
        assert_eq!(stats.std, vec![1.0, 1.0, 1.0]);
        let n = ds.normalized(&stats);
        assert_eq!(n.episodes[0].steps[0].values[0], -1.0);
        assert_eq!(n.episodes[1].steps[0].values[0], 1.0);
        assert_eq!(n.episodes[0].steps[0].values[1], 0.0);
        assert_eq!(n.denormalized(), ds);
    }

    #[test]
    fn split_sizes_follow_ratios() {
        let s = split(&toy(10), &SplitRatios::default(), 1, SplitUnit::Patient).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        assert!(matches!(
            split(&toy(2), &SplitRatios::default(), 1, SplitUnit::Patient),
            Err(Error::Sizing(_))
        ));
        let bad = SplitRatios { train: 0.5, val: 0.1, test: 0.1 };
        assert!(split(&toy(10), &bad, 1, SplitUnit::Patient).is_err());
    }

    #[test]
    fn leave_out_hides_floor_of_rate() {
        let lo = choose_hidden_variables(10, 0.3, 4).unwrap();
        assert_eq!(lo.hidden.len(), 3);
        assert!(choose_hidden_variables(2, 0.3, 4).unwrap().no_op);
        assert!(choose_hidden_variables(2, 1.0, 4).is_err());
    }

    #[test]
    fn dataset_rejects_out_of_horizon_times() {
        let e = Episode::from_triples("p", &[(60.0, 0, 1.0)], 1, 0, 48.0).unwrap();
        assert!(Dataset::new(vec!["a".into()], vec![e], 48.0, 2).is_err());
    }
}
