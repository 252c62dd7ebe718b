use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Magnitude below which gradients are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, element index) of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub elements: usize,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central finite differences against tape gradients for every element of
/// every parameter. `f` must rebuild the whole computation on the tape it is
/// given, reading parameters from the supplied vars.
pub fn grad_check<F>(mut f: F, params: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |f: &mut F, ps: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0, elements: 0 };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for ei in 0..p.len() {
            let base = p.data()[ei];
            // divide by the step actually representable around `base`
            let (hi, lo) = (base + eps, base - eps);
            let mut plus = p.to_vec();
            plus[ei] = hi;
            work[pi] = Tensor::new(p.shape().to_vec(), plus)?;
            let fp = eval(&mut f, &work)?;
            let mut minus = p.to_vec();
            minus[ei] = lo;
            work[pi] = Tensor::new(p.shape().to_vec(), minus)?;
            let fm = eval(&mut f, &work)?;
            work[pi] = p.clone();

            let numeric = (fp - fm) / (hi - lo);
            let a = analytic[pi].data()[ei];
            let err = rel_error(a, numeric);
            report.elements += 1;
            if err > report.max_rel_error || report.elements == 1 {
                report.max_rel_error = err;
                report.worst = (pi, ei);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
