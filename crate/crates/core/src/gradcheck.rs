//! Central finite-difference checks against tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// `|a - c| / (|a| + |c| + 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-8)
}

/// Largest relative error between the tape gradient of `f` with respect to
/// `x` and central differences with step `eps`, over every coordinate.
///
/// `f` must be deterministic (build the tape without training mode) and
/// must return a one-element node.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tape<'_>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    finite_diff_check_coords(&f, x, eps, &coords)
}

/// As [`finite_diff_check`], on at most `max_coords` coordinates drawn with `seed`.
pub fn finite_diff_check_sampled<F>(
    f: F,
    x: &Tensor,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&Tape<'_>, Var) -> Result<Var>,
{
    let coords = pick_coords(x.len(), max_coords, seed);
    finite_diff_check_coords(&f, x, eps, &coords)
}

fn pick_coords(len: usize, max_coords: usize, seed: u64) -> Vec<usize> {
    if len <= max_coords {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = sample(&mut rng, len, max_coords).into_vec();
    c.sort_unstable();
    c
}

fn finite_diff_check_coords<F>(f: &F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&Tape<'_>, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Contract("finite difference step must be > 0".into()));
    }
    let analytic = {
        let tape = Tape::new();
        let xv = tape.variable(x.clone());
        let loss = f(&tape, xv)?;
        let grads = tape.backward(loss)?;
        grads
            .wrt(xv)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; x.len()])
    };
    let eval = |t: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let xv = tape.constant(t);
        let out = f(&tape, xv)?;
        tape.scalar(out)
    };
    let mut worst: f64 = 0.0;
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Per-parameter result of [`finite_diff_check_params`].
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

/// Finite-difference check of every trainable tensor in `store`, sampling at
/// most `max_coords` coordinates per tensor. `f` builds the loss on a tape
/// bound to the (possibly perturbed) store.
pub fn finite_diff_check_params<F>(
    store: &ParamStore,
    f: F,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<Vec<ParamCheck>>
where
    F: Fn(&Tape<'_>) -> Result<Var>,
{
    let mut analytic: Vec<Option<Vec<f64>>> = vec![None; store.len()];
    {
        let tape = Tape::with_params(store);
        let loss = f(&tape)?;
        let grads = tape.backward(loss)?;
        for (pid, g) in grads.params() {
            analytic[pid.0] = Some(g.to_vec());
        }
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::with_params(s);
        let out = f(&tape)?;
        tape.scalar(out)
    };

    let mut work = store.clone();
    let mut report = Vec::new();
    for (k, pid) in store.trainable().collect::<Vec<ParamId>>().into_iter().enumerate() {
        let len = store.get(pid).len();
        let coords = pick_coords(len, max_coords, seed.wrapping_add(k as u64));
        let zero = vec![0.0; len];
        let a = analytic[pid.0].as_deref().unwrap_or(&zero);
        let mut worst: f64 = 0.0;
        for &i in &coords {
            let orig = store.get(pid).data()[i];
            work.get_mut(pid).data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work.get_mut(pid).data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work.get_mut(pid).data_mut()[i] = orig;
            worst = worst.max(relative_error(a[i], (up - down) / (2.0 * eps)));
        }
        report.push(ParamCheck {
            name: store.name(pid).to_string(),
            max_rel_error: worst,
            coords_checked: coords.len(),
        });
    }
    Ok(report)
}
