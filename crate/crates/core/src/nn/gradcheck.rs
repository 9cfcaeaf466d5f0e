//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::nn::params::ParameterSet;
use crate::nn::tape::{NodeId, Tape};

/// Outcome of one gradient check: the forward loss, the worst relative
/// error over every element of every bound parameter, and where it was.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub loss: f64,
    pub max_rel_error: f64,
    pub worst: String,
    /// Parameters present in the set but never bound by the forward pass.
    pub unchecked: Vec<String>,
}

/// Compare analytic gradients against central differences with the given
/// step for every element of every parameter the forward pass binds.
///
/// `build` must construct the full forward graph on the provided tape and
/// return the scalar loss node; it is called once per perturbed evaluation,
/// so keep the model tiny.
pub fn check_gradients(
    params: &ParameterSet,
    step: f64,
    build: impl Fn(&mut Tape, &ParameterSet) -> Result<NodeId>,
) -> Result<GradReport> {
    let loss_of = |p: &ParameterSet| -> Result<f64> {
        let mut tape = Tape::new();
        let root = build(&mut tape, p)?;
        tape.scalar(root)
    };

    let mut tape = Tape::new();
    let root = build(&mut tape, params)?;
    let loss = tape.scalar(root)?;
    tape.backward(root)?;
    let analytic = tape.param_grads();

    let unchecked: Vec<String> = params
        .names()
        .filter(|n| !analytic.contains_key(*n))
        .map(str::to_string)
        .collect();

    let mut work = params.clone();
    let mut max_rel_error = 0.0f64;
    let mut worst = String::from("none");
    for (name, grad) in &analytic {
        let (rows, cols) = {
            let s = grad.shape();
            (s[0], s[1])
        };
        for i in 0..rows {
            for j in 0..cols {
                let original = work.get(name)?[[i, j]];
                work.get_mut(name)?[[i, j]] = original + step;
                let plus = loss_of(&work)?;
                work.get_mut(name)?[[i, j]] = original - step;
                let minus = loss_of(&work)?;
                work.get_mut(name)?[[i, j]] = original;
                let numeric = (plus - minus) / (2.0 * step);
                let a = grad[[i, j]];
                let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-4);
                if rel > max_rel_error {
                    max_rel_error = rel;
                    worst = format!("{name}[{i},{j}]");
                }
            }
        }
    }
    Ok(GradReport {
        loss,
        max_rel_error,
        worst,
        unchecked,
    })
}
