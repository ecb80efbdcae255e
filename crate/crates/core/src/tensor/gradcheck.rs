use super::{Gradients, ParamId, ParamStore, Session, Var};
use crate::error::Result;
use crate::exec::Strategy;

/// Outcome of a central-difference gradient comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of `|analytic − numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub worst: Option<Worst>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Worst {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Checks the tape gradients of the scalar built by `f` against central
/// differences over every trainable coordinate of `params`.
pub fn finite_diff_check<F>(params: &ParamStore, f: F, step: f64, exec: Strategy) -> Result<GradCheckReport>
where
    F: Fn(&mut Session<'_>) -> Result<Var> + Sync + Send,
{
    let analytic = {
        let mut s = Session::new(params);
        let loss = f(&mut s)?;
        s.backward(loss)?
    };
    let value = |p: &ParamStore| -> Result<f64> {
        let mut s = Session::new(p);
        let loss = f(&mut s)?;
        Ok(s.value(loss).item())
    };
    compare_gradients(params, &analytic, value, step, exec)
}

/// Compares externally computed `analytic` gradients with central
/// differences of `value`, which must be deterministic in `params`.
pub fn compare_gradients<F>(
    params: &ParamStore,
    analytic: &Gradients,
    value: F,
    step: f64,
    exec: Strategy,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<f64> + Sync + Send,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let coords: Vec<(ParamId, usize)> = params
        .trainable_ids()
        .into_iter()
        .flat_map(|id| (0..params.get(id).numel()).map(move |j| (id, j)))
        .collect();

    let numeric: Vec<Result<f64>> = exec.map_with(
        coords.len(),
        || params.clone(),
        |scratch, c| {
            let (id, j) = coords[c];
            let orig = scratch.get(id).data()[j];
            scratch.get_mut(id).data_mut()[j] = orig + step;
            let plus = value(scratch);
            scratch.get_mut(id).data_mut()[j] = orig - step;
            let minus = value(scratch);
            scratch.get_mut(id).data_mut()[j] = orig;
            Ok((plus? - minus?) / (2.0 * step))
        },
    );

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coordinates: coords.len(),
        worst: None,
    };
    for (&(id, j), num) in coords.iter().zip(numeric) {
        let num = num?;
        let ana = analytic.get(id).map_or(0.0, |g| g[j]);
        let err = (ana - num).abs() / ana.abs().max(1.0);
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
            report.worst = Some(Worst {
                param: params.name(id).to_string(),
                index: j,
                analytic: ana,
                numeric: num,
            });
        }
    }
    Ok(report)
}
