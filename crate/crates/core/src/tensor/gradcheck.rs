//! Central-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat entry)` of the worst entry.
    pub worst: (usize, usize),
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// `|a - n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.item(out))
}

fn analytic<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars.iter().map(|v| grads.tensor(*v)).collect())
}

fn check_entries<F>(f: &F, inputs: &[Tensor], eps: f64, entries: &[(usize, usize)]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let grads = analytic(f, inputs)?;
    let mut work = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        entries_checked: entries.len(),
    };
    for &(i, j) in entries {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + eps;
        let plus = evaluate(f, &work)?;
        work[i].data_mut()[j] = orig - eps;
        let minus = evaluate(f, &work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let err = relative_error(grads[i].data()[j], numeric);
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = err;
            report.worst = (i, j);
        }
    }
    Ok(report)
}

/// Max relative error between the tape gradient of scalar `f` and central
/// differences, over every entry of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let entries: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    check_entries(&f, inputs, eps, &entries)
}

/// Like [`grad_check`] but probes at most `per_input` seeded-random entries
/// of each input; used for models with too many parameters to sweep.
pub fn grad_check_sampled<F>(f: F, inputs: &[Tensor], eps: f64, per_input: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        if t.len() <= per_input {
            entries.extend((0..t.len()).map(|j| (i, j)));
        } else {
            let mut picked: Vec<usize> = sample(&mut rng, t.len(), per_input).into_vec();
            picked.sort_unstable();
            entries.extend(picked.into_iter().map(|j| (i, j)));
        }
    }
    check_entries(&f, inputs, eps, &entries)
}
