//! Expected ENTER delay, probability of completing the crossing over V2V,
//! and fitting of the exponential delivery-ratio model.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{
    burst_length_pmf, pdr, sample_delivery, ChannelModel, LinkContext, ReceiverStreams, LAMBDA_HARSH,
    LAMBDA_OPEN_FIELD,
};
use crate::error::{ConfigError, ModelError};
use crate::kinematics::Uid;
use crate::protocol::{closed_form_enter_delay, harness};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Environment {
    OpenField,
    Harsh,
}

impl Environment {
    pub const ALL: [Environment; 2] = [Environment::OpenField, Environment::Harsh];

    pub fn lambda(self) -> f64 {
        match self {
            Environment::OpenField => LAMBDA_OPEN_FIELD,
            Environment::Harsh => LAMBDA_HARSH,
        }
    }
}

impl fmt::Display for Environment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Environment::OpenField => "open-field",
            Environment::Harsh => "harsh",
        })
    }
}

impl FromStr for Environment {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "open-field" => Ok(Environment::OpenField),
            "harsh" => Ok(Environment::Harsh),
            _ => Err(ModelError::invalid(format!("unknown environment {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayCurvePoint {
    pub environment: Environment,
    pub xi: Option<f64>,
    pub distance: f64,
    pub expected_delay: f64,
    pub threshold: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdrSample {
    #[serde(rename = "distance_m")]
    pub distance: f64,
    pub pdr: f64,
}

fn check_pdr(p: f64) -> Result<(), ModelError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(ModelError::invalid(format!("pdr {p} outside [0, 1]")));
    }
    if p == 0.0 {
        return Err(ModelError::DegenerateChannel);
    }
    Ok(())
}

fn check_xi(xi: Option<f64>) -> Result<(), ModelError> {
    match xi {
        Some(x) if !(0.0..=1.0).contains(&x) => Err(ModelError::invalid(format!("xi {x} outside [0, 1]"))),
        _ => Ok(()),
    }
}

/// Burst-length weights over `0..=F`, as given (not normalized).
fn truncated_weights(p: f64, threshold: u32, xi: Option<f64>) -> Vec<f64> {
    (0..=threshold).map(|m| burst_length_pmf(p, xi, m)).collect()
}

/// Average ENTER delay over one car suffering `m` consecutive failures,
/// `m` drawn from the burst law restricted to `0..=F`.
pub fn expected_enter_delay(p: f64, threshold: u32, xi: Option<f64>) -> Result<f64, ModelError> {
    check_pdr(p)?;
    check_xi(xi)?;
    let weights = truncated_weights(p, threshold, xi);
    let (num, den) = weights.iter().enumerate().fold((0.0, 0.0), |(n, d), (m, w)| {
        let t = closed_form_enter_delay(threshold, &[m as u32, 0]) as f64;
        (n + w * t, d + w)
    });
    Ok(num / den)
}

/// Probability that a vehicle finishes the crossing over V2V, i.e. does not
/// see a burst of `F + 1` failures.
pub fn v2v_probability(p: f64, threshold: u32, xi: Option<f64>) -> Result<f64, ModelError> {
    if !(0.0..=1.0).contains(&p) || p == 0.0 {
        return Err(ModelError::invalid(format!("pdr {p} outside (0, 1]")));
    }
    check_xi(xi)?;
    Ok(1.0 - burst_length_pmf(p, xi, threshold + 1))
}

/// Least-squares slope of `-ln(pdr)` against distance, through the origin.
pub fn fit_decay_rate(samples: &[PdrSample]) -> Result<f64, ModelError> {
    if let Some(s) = samples.iter().find(|s| !(s.pdr > 0.0 && s.pdr <= 1.0)) {
        return Err(ModelError::invalid(format!("pdr {} at d={} outside (0, 1]", s.pdr, s.distance)));
    }
    if samples.iter().any(|s| !s.distance.is_finite() || s.distance < 0.0) {
        return Err(ModelError::invalid("distances must be finite and nonnegative"));
    }
    let first = samples.first().map(|s| s.distance);
    let distinct = samples.iter().any(|s| Some(s.distance) != first);
    if samples.len() < 2 || !distinct {
        return Err(ModelError::invalid("need samples at two or more distinct distances"));
    }
    let sxx: f64 = samples.iter().map(|s| s.distance * s.distance).sum();
    let sxy: f64 = samples.iter().map(|s| s.distance * -s.pdr.ln()).sum();
    if sxx == 0.0 {
        return Err(ModelError::invalid("all distances are zero"));
    }
    Ok(sxy / sxx)
}

pub fn delay_curve(
    environment: Environment,
    xi: Option<f64>,
    distances: &[f64],
    threshold: u32,
) -> Result<Vec<DelayCurvePoint>, ModelError> {
    distances
        .iter()
        .map(|&d| {
            Ok(DelayCurvePoint {
                environment,
                xi,
                distance: d,
                expected_delay: expected_enter_delay(pdr(d, environment.lambda()), threshold, xi)?,
                threshold,
            })
        })
        .collect()
}

/// Draws one burst length from the truncated law, by inverse CDF.
fn draw_truncated<R: Rng + ?Sized>(cdf: &[f64], rng: &mut R) -> u32 {
    let total = *cdf.last().expect("nonempty");
    let u = rng.gen::<f64>() * total;
    cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1) as u32
}

/// Monte Carlo counterpart of [`expected_enter_delay`]: two vehicles, the
/// second one losing a single contiguous burst from the first slot, with
/// bursts longer than `F` discarded. Each trial runs the protocol itself.
///
/// For the independent model the burst is measured slot by slot with the
/// channel sampler. For the correlated model the burst length is drawn
/// from the correlated law restricted to `0..=F`.
pub fn monte_carlo_enter_delay(
    model: &ChannelModel,
    distance: f64,
    threshold: u32,
    n_trials: usize,
    seed: u64,
) -> Result<(f64, f64), ModelError> {
    if n_trials == 0 {
        return Err(ModelError::invalid("n_trials must be at least 1"));
    }
    model.validate()?;
    let receiver = Uid(2);
    let mut rng = ReceiverStreams::stream_for(seed, receiver);
    let mut delay_cache: BTreeMap<u32, f64> = BTreeMap::new();
    let mut delay_for = |m: u32| -> f64 {
        *delay_cache.entry(m).or_insert_with(|| {
            let out = harness::run_enter_round(2, threshold, 4 * threshold + 16, harness::burst(1, m));
            let t = out.vehicles.iter().filter_map(|v| v.mainctrl_at).max();
            // a burst that forces fallback is charged the full loop length
            t.or(out.vehicles.iter().filter_map(|v| v.fallback_at).max()).unwrap_or(0) as f64
        })
    };

    let cdf: Option<Vec<f64>> = match model {
        ChannelModel::CorrelatedBurst { lambda, xi } => {
            let p = pdr(distance, *lambda);
            check_pdr(p)?;
            let mut acc = 0.0;
            Some(
                truncated_weights(p, threshold, Some(*xi))
                    .into_iter()
                    .map(|w| {
                        acc += w;
                        acc
                    })
                    .collect(),
            )
        }
        ChannelModel::DistanceIid { lambda } => {
            check_pdr(pdr(distance, *lambda))?;
            None
        }
        _ => None,
    };

    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_trials {
        let m = match &cdf {
            Some(cdf) => draw_truncated(cdf, &mut rng),
            None => loop {
                let mut m = 0u32;
                let mut prior_lost = false;
                loop {
                    let ctx = LinkContext {
                        sender: Uid(1),
                        receiver,
                        distance,
                        slot: m + 1,
                        prior_lost,
                    };
                    if sample_delivery(model, &ctx, &mut rng) {
                        break;
                    }
                    prior_lost = true;
                    m += 1;
                    if m > threshold {
                        break;
                    }
                }
                if m <= threshold {
                    break m;
                }
                if matches!(model, ChannelModel::Scripted { .. }) {
                    break threshold + 1;
                }
            },
        };
        let t = delay_for(m);
        sum += t;
        sum_sq += t * t;
    }
    let n = n_trials as f64;
    let mean = sum / n;
    let stderr = if n_trials > 1 {
        let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok((mean, stderr))
}

pub fn read_pdr_samples(path: &Path) -> Result<Vec<PdrSample>, ConfigError> {
    let mut reader = csv::Reader::from_path(path)?;
    let samples = reader.deserialize().collect::<Result<Vec<PdrSample>, _>>()?;
    if let Some(s) = samples.iter().find(|s| !(s.pdr > 0.0 && s.pdr <= 1.0)) {
        return Err(ConfigError::Invalid(format!("pdr {} at d={} outside (0, 1]", s.pdr, s.distance)));
    }
    Ok(samples)
}

pub fn write_pdr_samples(path: &Path, samples: &[PdrSample]) -> Result<(), ConfigError> {
    let mut w = csv::Writer::from_path(path)?;
    for s in samples {
        w.serialize(s)?;
    }
    w.flush().map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })
}
