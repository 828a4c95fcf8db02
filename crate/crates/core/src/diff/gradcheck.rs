use rand::seq::SliceRandom;
use rand::Rng;

use super::{DiffError, ParamId, ParamStore, Tape, Var};

/// Central-difference step used by the checker.
pub const FD_STEP: f64 = 1e-5;

/// One sampled parameter entry.
#[derive(Clone, Debug)]
pub struct EntryCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    /// Loss at the unperturbed parameters.
    pub loss: f64,
    pub entries: Vec<EntryCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.rel_error <= self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &EntryCheck> {
        self.entries.iter().filter(|e| e.rel_error > self.tolerance)
    }

    /// Absolute error a central difference can carry from rounding the loss
    /// alone: a couple of ulps of the loss over the step.
    pub fn rounding_floor(&self) -> f64 {
        2.0 * self.loss.abs() * f64::EPSILON / FD_STEP
    }

    /// Whether `e` is large enough for its relative error to be resolved at
    /// this tolerance at all.
    pub fn resolvable(&self, e: &EntryCheck) -> bool {
        e.analytic.abs().max(e.numeric.abs()) * self.tolerance >= self.rounding_floor()
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Which entries to probe.
#[derive(Clone, Debug)]
pub enum Sampling {
    All,
    /// Up to this many entries, spread over every parameter tensor.
    Random(usize),
}

fn sample_entries<R: Rng>(params: &ParamStore, sampling: &Sampling, rng: &mut R) -> Vec<(ParamId, usize)> {
    let mut all: Vec<(ParamId, usize)> = params
        .iter()
        .flat_map(|(id, _, t)| (0..t.len()).map(move |i| (id, i)))
        .collect();
    match sampling {
        Sampling::All => all,
        Sampling::Random(n) if *n >= all.len() => all,
        Sampling::Random(n) => {
            // At least one entry per tensor, the rest uniformly.
            let mut picked = Vec::with_capacity(*n);
            for (id, _, t) in params.iter() {
                if picked.len() < *n {
                    picked.push((id, rng.gen_range(0..t.len())));
                }
            }
            all.shuffle(rng);
            for e in all {
                if picked.len() >= *n {
                    break;
                }
                if !picked.contains(&e) {
                    picked.push(e);
                }
            }
            picked.sort();
            picked
        }
    }
}

fn eval_loss<F, E>(params: &ParamStore, build: &F) -> Result<f64, E>
where
    F: Fn(&mut Tape<'_>) -> Result<Var, E>,
{
    let mut tape = Tape::new(params);
    let root = build(&mut tape)?;
    Ok(tape.value(root).item())
}

/// Compares reverse-mode gradients against central finite differences.
///
/// `build` must map the parameters deterministically to a scalar loss; two
/// forward passes are compared bit-for-bit before any probing.
pub fn gradient_check<F, R, E>(
    params: &mut ParamStore,
    build: F,
    tolerance: f64,
    sampling: Sampling,
    rng: &mut R,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape<'_>) -> Result<Var, E>,
    R: Rng,
    E: From<DiffError>,
{
    let (loss, analytic) = {
        let mut tape = Tape::new(params);
        let root = build(&mut tape)?;
        let first = tape.value(root).item();
        let second = eval_loss(params, &build)?;
        if first.to_bits() != second.to_bits() {
            return Err(DiffError::Nondeterministic { first, second }.into());
        }
        (first, tape.backward(root)?)
    };

    let mut entries = Vec::new();
    for (id, index) in sample_entries(params, &sampling, rng) {
        let original = params.get(id).data()[index];
        params.get_mut(id).data_mut()[index] = original + FD_STEP;
        let plus = eval_loss(params, &build);
        params.get_mut(id).data_mut()[index] = original - FD_STEP;
        let minus = eval_loss(params, &build);
        params.get_mut(id).data_mut()[index] = original;
        let numeric = (plus? - minus?) / (2.0 * FD_STEP);
        let a = analytic.get(id).data()[index];
        entries.push(EntryCheck {
            param: params.name(id).to_string(),
            index,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        });
    }
    Ok(GradCheckReport { tolerance, loss, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::cell::Cell;

    fn random_store(rng: &mut ChaCha8Rng, shapes: &[(&str, &[usize])]) -> ParamStore {
        let mut s = ParamStore::new();
        for (name, shape) in shapes {
            s.register_init(*name, shape, crate::diff::Init::Uniform(1.0), rng);
        }
        s
    }

    #[test]
    fn quadratic_norm_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = random_store(&mut rng, &[("w", &[3, 4])]);
        let w = s.id("w").unwrap();
        let report = gradient_check(
            &mut s,
            |t| {
                let v = t.param(w)?;
                let sq = t.mul(v, v)?;
                t.sum(sq)
            },
            1e-9,
            Sampling::All,
            &mut rng,
        )
        .unwrap();
        assert!(report.passed(), "max err {}", report.max_rel_error());
        assert_eq!(report.entries.len(), 12);
    }

    #[test]
    fn corrupted_concat_rule_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = random_store(&mut rng, &[("a", &[2, 3]), ("b", &[2, 2])]);
        let (a, b) = (s.id("a").unwrap(), s.id("b").unwrap());
        let build = |t: &mut Tape<'_>| {
            let av = t.param(a)?;
            let bv = t.param(b)?;
            let c = t.concat(&[av, bv])?;
            let th = t.tanh(c)?;
            let sq = t.mul(th, c)?;
            t.sum(sq)
        };
        let ok = gradient_check(&mut s, build, 1e-6, Sampling::All, &mut rng).unwrap();
        assert!(ok.passed());

        let mut tape = Tape::new(&s);
        tape.corrupt_concat_backward = true;
        let root = build(&mut tape).unwrap();
        let bad = tape.backward(root).unwrap();
        let mut worst: f64 = 0.0;
        for e in &ok.entries {
            let id = s.id(&e.param).unwrap();
            worst = worst.max(relative_error(bad.get(id).data()[e.index], e.numeric));
        }
        assert!(worst > 1e-4, "mutation went unnoticed");
    }

    #[test]
    fn nondeterminism_aborts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = random_store(&mut rng, &[("w", &[2])]);
        let w = s.id("w").unwrap();
        let calls = Cell::new(0.0);
        let err = gradient_check(
            &mut s,
            |t| {
                calls.set(calls.get() + 1.0);
                let v = t.param(w)?;
                let k = t.constant(Tensor::row(vec![calls.get(), 1.0]))?;
                let p = t.mul(v, k)?;
                t.sum(p)
            },
            1e-6,
            Sampling::All,
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, DiffError::Nondeterministic { .. }));
    }
}
