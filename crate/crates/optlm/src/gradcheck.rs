//! Central-difference gradient checking. The oracle re-runs the forward pass
//! with perturbed leaf values and never inspects the tape's backward path.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of one gradient check: the worst elementwise deviation between the
/// reverse-mode gradient and central differences.
#[derive(Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub n_checked: usize,
}

/// Check reverse-mode gradients of `f` against central differences over every
/// element of every leaf. `f` must build a scalar loss from the given leaves.
///
/// Relative error uses a unit floor: |ad - fd| / max(|ad|, |fd|, 1).
pub fn check_gradients<Builder>(leaves: &[Tensor<f64>], step: f64, f: Builder) -> Result<GradCheck>
where
    Builder: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let grads: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape.clone()))
        })
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.leaf(x.clone(), true)).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).item())
    };

    let mut max_rel_err = 0.0f64;
    let mut n_checked = 0usize;
    let mut work: Vec<Tensor<f64>> = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        for ei in 0..leaf.numel() {
            let orig = work[li].data[ei];
            work[li].data[ei] = orig + step;
            let up = eval(&work)?;
            work[li].data[ei] = orig - step;
            let down = eval(&work)?;
            work[li].data[ei] = orig;
            let fd = (up - down) / (2.0 * step);
            let ad = grads[li].data[ei];
            let rel = (ad - fd).abs() / (ad.abs().max(fd.abs()).max(1.0));
            if rel > max_rel_err {
                max_rel_err = rel;
            }
            n_checked += 1;
        }
    }
    Ok(GradCheck {
        max_rel_err,
        n_checked,
    })
}
