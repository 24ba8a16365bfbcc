use crate::error::GradError;
use crate::tensor::Tensor;

use super::tape::{LeafId, Tape, Var};

/// Compares tape gradients against central differences.
///
/// `build` records a scalar loss on the given tape from the supplied leaf
/// vars; it is called once for the analytic pass and twice per coordinate
/// for the numeric pass, each time on a fresh tape. It must be
/// deterministic; a non-deterministic builder gives meaningless output.
///
/// Returns the largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`
/// over every coordinate of every parameter.
pub fn finite_diff_check<F, E>(build: F, params: &[Tensor], step: f64) -> Result<f64, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<GradError>,
{
    assert!(step > 0.0, "finite difference step must be positive");
    let eval = |values: &[Tensor]| -> Result<(Tape, Var), E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> =
            values.iter().enumerate().map(|(i, t)| tape.leaf(LeafId(i), t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok((tape, loss))
    };

    let (tape, loss) = eval(params)?;
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut probe = params.to_vec();
    for (p, param) in params.iter().enumerate() {
        let analytic = grads.get(LeafId(p)).expect("every leaf has a gradient");
        for k in 0..param.len() {
            let orig = param.data()[k];
            probe[p].data_mut()[k] = orig + step;
            let (t, l) = eval(&probe)?;
            let plus = t.value(l)?.item();
            probe[p].data_mut()[k] = orig - step;
            let (t, l) = eval(&probe)?;
            let minus = t.value(l)?.item();
            probe[p].data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[k];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
