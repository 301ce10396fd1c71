use super::{GradientMap, NumericsError, ParamSet};

/// Central-difference gradient of `objective` over every coordinate of
/// every parameter: `(f(w+h) - f(w-h)) / 2h`.
///
/// This is the independent oracle the tape is audited against. It is
/// O(coordinates) objective evaluations, so keep instances small. `h`
/// must be positive; a non-finite objective value is an error naming
/// the offending coordinate.
pub fn finite_difference_grad<F>(
    mut objective: F,
    params: &ParamSet,
    h: f64,
) -> Result<GradientMap, NumericsError>
where
    F: FnMut(&ParamSet) -> Result<f64, NumericsError>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(NumericsError::BadStep { h });
    }
    let mut work = params.clone();
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    let mut out = GradientMap::new();
    for name in names {
        let (rows, cols) = work.get(&name).expect("name from same set").shape();
        let mut grad = super::DenseMatrix::zeros(rows, cols);
        for index in 0..rows * cols {
            let original = work.get(&name).expect("present").data()[index];

            work.get_mut(&name).expect("present").data_mut()[index] = original + h;
            let plus = objective(&work)?;

            work.get_mut(&name).expect("present").data_mut()[index] = original - h;
            let minus = objective(&work)?;

            work.get_mut(&name).expect("present").data_mut()[index] = original;

            if !plus.is_finite() || !minus.is_finite() {
                return Err(NumericsError::NonFiniteObjective {
                    name: name.clone(),
                    index,
                });
            }
            grad.data_mut()[index] = (plus - minus) / (2.0 * h);
        }
        out.insert(name, grad);
    }
    Ok(out)
}
