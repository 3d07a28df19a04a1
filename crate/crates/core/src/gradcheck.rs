//! Central finite-difference check of analytic gradients.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::params::{Grads, ParamId, ParamStore};

/// A scalar function of a parameter store with an analytic gradient.
pub trait Objective {
    fn value(&mut self, params: &ParamStore) -> f64;
    fn value_and_grad(&mut self, params: &ParamStore) -> (f64, Grads);
}

/// Adapts a closure returning `(value, grads)` to [`Objective`].
pub struct FnObjective<F>(pub F);

impl<F: FnMut(&ParamStore) -> (f64, Grads)> Objective for FnObjective<F> {
    fn value(&mut self, params: &ParamStore) -> f64 {
        (self.0)(params).0
    }

    fn value_and_grad(&mut self, params: &ParamStore) -> (f64, Grads) {
        (self.0)(params)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Tensors larger than this are checked on a sample of this many
    /// coordinates, preferring ones with a nonzero analytic gradient.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            max_coords: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coords_checked: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.entries.iter().all(|e| e.max_rel_error <= tolerance)
    }

    pub fn entry(&self, name: &str) -> Option<&GradCheckEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

pub fn check_gradients<O: Objective + ?Sized>(
    params: &ParamStore,
    objective: &mut O,
    opts: GradCheckOptions,
) -> GradCheckReport {
    let (_, analytic) = objective.value_and_grad(params);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut entries = Vec::with_capacity(params.len());

    for id in params.ids() {
        let coords = pick_coords(analytic.get(id).data(), opts.max_coords, &mut rng);
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for &c in &coords {
            let numeric = central_difference(&mut work, id, c, opts.step, objective);
            let a = analytic.get(id).data()[c];
            max_rel = max_rel.max(relative_error(a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
        }
        entries.push(GradCheckEntry {
            name: params.name(id).to_string(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            coords_checked: coords.len(),
        });
    }
    GradCheckReport { entries }
}

fn central_difference<O: Objective + ?Sized>(
    work: &mut ParamStore,
    id: ParamId,
    coord: usize,
    h: f64,
    objective: &mut O,
) -> f64 {
    let original = work.get(id).data()[coord];
    work.get_mut(id).data_mut()[coord] = original + h;
    let plus = objective.value(work);
    work.get_mut(id).data_mut()[coord] = original - h;
    let minus = objective.value(work);
    work.get_mut(id).data_mut()[coord] = original;
    (plus - minus) / (2.0 * h)
}

fn pick_coords(analytic: &[f64], max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if analytic.len() <= max {
        return (0..analytic.len()).collect();
    }
    let (mut active, mut idle): (Vec<usize>, Vec<usize>) =
        (0..analytic.len()).partition(|&i| analytic[i] != 0.0);
    active.shuffle(rng);
    idle.shuffle(rng);
    let take_active = active.len().min(max - max / 4);
    let mut out: Vec<usize> = active[..take_active].to_vec();
    let rest = max - out.len();
    out.extend(idle.iter().take(rest));
    if out.len() < max {
        out.extend(active[take_active..].iter().take(max - out.len()));
    }
    out.sort_unstable();
    out
}
