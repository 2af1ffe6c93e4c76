use super::{Tape, Var};
use crate::params::{Bindings, ParamStore};
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub coordinates: usize,
}

/// Relative error with denominator `max(1, |analytic|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Checks `build` against central finite differences in every coordinate
/// of every input. `build` receives one gradient-tracking variable per
/// input and must return a scalar.
pub fn check_inputs<F>(inputs: &[(usize, usize, Vec<f64>)], build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[(usize, usize, Vec<f64>)]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|(r, c, v)| tape.variable(*r, *c, v.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|(r, c, v)| tape.variable(*r, *c, v.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, (_, _, x))| grads.get(v).map_or_else(|| vec![0.0; x.len()], <[f64]>::to_vec))
        .collect();
    drop(tape);

    let mut work = inputs.to_vec();
    let mut report = GradCheck {
        max_rel_err: 0.0,
        coordinates: 0,
    };
    for k in 0..work.len() {
        for i in 0..work[k].2.len() {
            let orig = work[k].2[i];
            work[k].2[i] = orig + FD_STEP;
            let up = eval(&work)?;
            work[k].2[i] = orig - FD_STEP;
            let down = eval(&work)?;
            work[k].2[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            if !numeric.is_finite() {
                return Err(Error::Numeric(format!("non-finite difference at input {k}[{i}]")));
            }
            report.max_rel_err = report.max_rel_err.max(rel_err(analytic[k][i], numeric));
            report.coordinates += 1;
        }
    }
    Ok(report)
}

/// Checks the gradient of a scalar built from `store` against central
/// differences in every coordinate of every trainable tensor.
pub fn check_store<F>(store: &mut ParamStore, build: F) -> Result<GradCheck>
where
    F: for<'a> Fn(&mut Tape<'a>, &Bindings) -> Result<Var>,
{
    let (binds, grads) = {
        let mut tape = Tape::new();
        let binds = store.bind(&mut tape);
        let out = build(&mut tape, &binds)?;
        let grads = tape.backward(out)?;
        (binds, grads)
    };
    store.zero_grad();
    store.accumulate(&binds, &grads)?;
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let b = s.bind(&mut tape);
        let out = build(&mut tape, &b)?;
        Ok(tape.scalar(out))
    };
    let names: Vec<String> = store
        .iter()
        .filter(|(_, p)| p.tensor.requires_grad())
        .map(|(n, _)| n.to_string())
        .collect();
    let mut report = GradCheck {
        max_rel_err: 0.0,
        coordinates: 0,
    };
    for name in names {
        let analytic = store.get(&name)?.grad().expect("trainable").to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let orig = store.get(&name)?.data()[i];
            store.get_mut(&name)?.data_mut()[i] = orig + FD_STEP;
            let up = eval(store)?;
            store.get_mut(&name)?.data_mut()[i] = orig - FD_STEP;
            let down = eval(store)?;
            store.get_mut(&name)?.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            if !numeric.is_finite() {
                return Err(Error::Numeric(format!("non-finite difference at {name}[{i}]")));
            }
            report.max_rel_err = report.max_rel_err.max(rel_err(a, numeric));
            report.coordinates += 1;
        }
    }
    store.zero_grad();
    Ok(report)
}
