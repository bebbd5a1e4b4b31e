//! Central finite-difference verification of analytic gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{Network, ParameterSet};
use super::tensor::{Real, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Check at most this many coordinates (seeded random subsample, at
    /// least 200). `None` checks every coordinate.
    pub max_coordinates: Option<usize>,
    pub seed: u64,
    /// Relative error is `|analytic - numeric| / max(|numeric|, floor)`, so
    /// near-zero gradients are compared in absolute terms.
    pub denominator_floor: f64,
    /// Skip coordinates whose forward and backward one-sided differences
    /// disagree by more than this relative amount: a ReLU or L1 kink lies
    /// within `eps` there and the central difference is not a derivative.
    /// `None` checks every chosen coordinate.
    pub kink_tolerance: Option<f64>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            max_coordinates: None,
            seed: 0,
            denominator_floor: 1e-4,
            kink_tolerance: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub coordinates_checked: usize,
    /// Coordinates skipped by [`GradCheckConfig::kink_tolerance`].
    pub kinks_skipped: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// Compares `analytic` against central differences of `loss` taken around
/// `params`.
pub fn check_parameter_gradients<T, F>(
    params: &ParameterSet<T>,
    analytic: &ParameterSet<T>,
    mut loss: F,
    config: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    T: Real,
    F: FnMut(&ParameterSet<T>) -> Result<T>,
{
    if !(config.eps > 0.0) {
        return Err(Error::InvalidConfig(format!("eps must be positive, got {}", config.eps)));
    }
    if let Some(max) = config.max_coordinates {
        if max < 200 {
            return Err(Error::InvalidConfig(format!(
                "a subsampled gradient check needs at least 200 coordinates, got {max}"
            )));
        }
    }
    if params.len() != analytic.len()
        || params
            .iter()
            .zip(analytic.iter())
            .any(|(p, g)| p.tensor.shape() != g.tensor.shape())
    {
        return Err(Error::ShapeMismatch("analytic gradients do not match parameters".into()));
    }

    // (tensor, offset) for every coordinate in declared order
    let all: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(t, e)| (0..e.tensor.len()).map(move |o| (t, o)))
        .collect();
    let chosen: Vec<(usize, usize)> = match config.max_coordinates {
        Some(max) if max < all.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let mut picks = index::sample(&mut rng, all.len(), max).into_vec();
            picks.sort_unstable();
            picks.into_iter().map(|i| all[i]).collect()
        }
        _ => all,
    };

    let eps = T::from_f64_lossy(config.eps);
    let mut probe = params.clone();
    let mut eval = |probe: &ParameterSet<T>| -> Result<f64> {
        let v = loss(probe)?.to_f64_lossy();
        if !v.is_finite() {
            return Err(Error::NonFinite("loss during gradient check".into()));
        }
        Ok(v)
    };

    let center = match config.kink_tolerance {
        Some(_) => eval(params)?,
        None => 0.0,
    };
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        coordinates_checked: 0,
        kinks_skipped: 0,
        worst: None,
    };
    for (t, o) in chosen {
        let original = probe.get(t).tensor.data()[o];
        probe.get_mut(t).tensor.data_mut()[o] = original + eps;
        let plus = eval(&probe)?;
        probe.get_mut(t).tensor.data_mut()[o] = original - eps;
        let minus = eval(&probe)?;
        probe.get_mut(t).tensor.data_mut()[o] = original;

        let numeric = (plus - minus) / (2.0 * config.eps);
        if let Some(tol) = config.kink_tolerance {
            let forward = (plus - center) / config.eps;
            let backward = (center - minus) / config.eps;
            if (forward - backward).abs() / numeric.abs().max(config.denominator_floor) > tol {
                report.kinks_skipped += 1;
                continue;
            }
        }
        report.coordinates_checked += 1;
        let exact = analytic.get(t).tensor.data()[o].to_f64_lossy();
        let rel = (exact - numeric).abs() / numeric.abs().max(config.denominator_floor);
        if rel > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = rel.max(report.max_relative_error);
            report.worst = Some((params.get(t).name.clone(), o));
        }
    }
    Ok(report)
}

/// Gradient check of a single network under a loss of its output.
/// `loss_fn` returns the loss and its gradient with respect to the output.
pub fn gradient_check<T, F>(
    network: &Network,
    params: &ParameterSet<T>,
    input: &Tensor<T>,
    loss_fn: F,
    config: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&Tensor<T>) -> Result<(T, Tensor<T>)>,
{
    let (output, tape) = network.forward(params, input)?;
    let (_, output_grad) = loss_fn(&output)?;
    let analytic = network.backward(params, &tape, &output_grad, false)?.params;
    gradient_check_with(network, params, input, &loss_fn, &analytic, config)
}

/// Like [`gradient_check`] but against caller-supplied analytic gradients.
pub fn gradient_check_with<T, F>(
    network: &Network,
    params: &ParameterSet<T>,
    input: &Tensor<T>,
    loss_fn: F,
    analytic: &ParameterSet<T>,
    config: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&Tensor<T>) -> Result<(T, Tensor<T>)>,
{
    check_parameter_gradients(
        params,
        analytic,
        |p| Ok(loss_fn(&network.infer(p, input)?)?.0),
        config,
    )
}
