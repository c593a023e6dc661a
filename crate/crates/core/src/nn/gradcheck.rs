use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::NnError;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central difference step.
    pub h: f64,
    pub tol: f64,
    /// Check a random subset of this many coordinates when the store is larger.
    pub max_coords: Option<usize>,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            max_coords: Some(400),
            floor: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub passed: bool,
}

/// Compare reverse-mode gradients of `f` with central finite differences.
pub fn grad_check<F>(store: &ParamStore<f64>, f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport, NnError>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var, NnError> + Sync,
{
    let mut analytic = store.detached();
    analytic.zero_grads();
    let mut tape = Tape::new();
    let loss = f(&mut tape, &analytic)?;
    if !tape.scalar(loss).is_finite() {
        return Err(NnError::NonFinite("objective".into()));
    }
    let grads = tape.backward(loss)?;
    tape.accumulate_into(&grads, &mut analytic)?;

    let coords: Vec<(String, usize)> = store
        .iter()
        .flat_map(|(name, e)| (0..e.value.len()).map(move |i| (name.to_string(), i)))
        .collect();
    let chosen: Vec<usize> = match cfg.max_coords {
        Some(k) if k < coords.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut idx = index::sample(&mut rng, coords.len(), k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..coords.len()).collect(),
    };

    let eval = |s: &ParamStore<f64>| -> Result<f64, NnError> {
        let mut t = Tape::no_grad();
        let v = f(&mut t, s)?;
        let y = t.scalar(v);
        if y.is_finite() {
            Ok(y)
        } else {
            Err(NnError::NonFinite("objective".into()))
        }
    };

    let errors: Vec<Result<(usize, f64), NnError>> = chosen
        .par_iter()
        .map(|&ci| {
            let (name, i) = &coords[ci];
            let mut s = store.detached();
            let base = s.value(name).expect("name from store").data()[*i];
            s.value_mut(name).expect("present").data_mut()[*i] = base + cfg.h;
            let fp = eval(&s)?;
            s.value_mut(name).expect("present").data_mut()[*i] = base - cfg.h;
            let fm = eval(&s)?;
            let numeric = (fp - fm) / (2.0 * cfg.h);
            let a = analytic.get(name).and_then(|e| e.grad.as_ref()).map_or(0.0, |g| g.data()[*i]);
            let denom = a.abs().max(numeric.abs()).max(cfg.floor);
            Ok((ci, (a - numeric).abs() / denom))
        })
        .collect();

    let mut max_rel_error = 0.0;
    let mut worst = None;
    for r in errors {
        let (ci, e) = r?;
        if e > max_rel_error || worst.is_none() {
            max_rel_error = e;
            worst = Some(coords[ci].clone());
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        checked: chosen.len(),
        passed: max_rel_error <= cfg.tol,
    })
}
