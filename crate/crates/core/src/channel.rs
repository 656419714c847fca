//! Lossy V2V link models and the burst-length laws derived from them.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::kinematics::Uid;

/// Decay rate fitted to the open-field delivery measurements, 1/m.
pub const LAMBDA_OPEN_FIELD: f64 = 0.00063;
/// Decay rate fitted to the harsh-environment delivery measurements, 1/m.
pub const LAMBDA_HARSH: f64 = 0.0013;

/// A receive-omission window for one receiver, inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedLoss {
    pub receiver: Uid,
    pub slot: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub until: Option<u32>,
}

impl ScriptedLoss {
    pub fn covers(&self, receiver: Uid, slot: u32) -> bool {
        receiver == self.receiver && slot >= self.slot && slot <= self.until.unwrap_or(self.slot)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChannelModel {
    Perfect,
    DistanceIid { lambda: f64 },
    CorrelatedBurst { lambda: f64, xi: f64 },
    Scripted { losses: Vec<ScriptedLoss> },
}

impl ChannelModel {
    pub fn validate(&self) -> Result<(), ModelError> {
        let check_lambda = |l: f64| {
            if l >= 0.0 && l.is_finite() {
                Ok(())
            } else {
                Err(ModelError::invalid(format!("lambda {l} must be >= 0")))
            }
        };
        match *self {
            ChannelModel::DistanceIid { lambda } => check_lambda(lambda),
            ChannelModel::CorrelatedBurst { lambda, xi } => {
                check_lambda(lambda)?;
                if (0.0..1.0).contains(&xi) {
                    Ok(())
                } else {
                    Err(ModelError::invalid(format!("xi {xi} must lie in [0, 1)")))
                }
            }
            _ => Ok(()),
        }
    }
}

/// Everything a link model may condition on for one sender-to-receiver hop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkContext {
    pub sender: Uid,
    pub receiver: Uid,
    pub distance: f64,
    pub slot: u32,
    /// Whether this receiver lost a message in the previous slot.
    pub prior_lost: bool,
}

/// Packet delivery ratio `exp(-lambda * d)`.
pub fn pdr(distance: f64, lambda: f64) -> f64 {
    (-lambda * distance).exp().clamp(0.0, 1.0)
}

/// One delivery draw. `rng` is only consumed by the random variants.
pub fn sample_delivery<R: Rng + ?Sized>(model: &ChannelModel, ctx: &LinkContext, rng: &mut R) -> bool {
    match model {
        ChannelModel::Perfect => true,
        ChannelModel::DistanceIid { lambda } => rng.gen::<f64>() < pdr(ctx.distance, *lambda),
        ChannelModel::CorrelatedBurst { lambda, xi } => {
            let p_loss = if ctx.prior_lost {
                *xi
            } else {
                1.0 - pdr(ctx.distance, *lambda)
            };
            rng.gen::<f64>() >= p_loss
        }
        ChannelModel::Scripted { losses } => !losses.iter().any(|l| l.covers(ctx.receiver, ctx.slot)),
    }
}

/// Probability of a burst of exactly `m` consecutive failures.
///
/// Without `xi` this is the geometric law `(1-P)^m P`. With `xi` it is the
/// correlated law `P` for `m = 0` and `(1-P) P xi^(m-1)` otherwise, which
/// is not normalized; callers renormalize over the range they use.
pub fn burst_length_pmf(pdr: f64, xi: Option<f64>, m: u32) -> f64 {
    match xi {
        None => (1.0 - pdr).powi(m as i32) * pdr,
        Some(_) if m == 0 => pdr,
        Some(xi) => (1.0 - pdr) * pdr * xi.powi(m as i32 - 1),
    }
}

/// Per-receiver random streams seeded from `(scenario seed, uid)`, plus the
/// receiver-side loss memory used by the correlated model.
#[derive(Debug, Clone)]
pub struct ReceiverStreams {
    seed: u64,
    streams: BTreeMap<Uid, ChaCha8Rng>,
    lost_last_slot: BTreeMap<Uid, bool>,
    lost_this_slot: BTreeMap<Uid, bool>,
}

impl ReceiverStreams {
    pub fn new(seed: u64) -> Self {
        ReceiverStreams {
            seed,
            streams: BTreeMap::new(),
            lost_last_slot: BTreeMap::new(),
            lost_this_slot: BTreeMap::new(),
        }
    }

    pub fn stream_for(seed: u64, uid: Uid) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(uid.0 as u64 + 1);
        rng
    }

    pub fn prior_lost(&self, receiver: Uid) -> bool {
        self.lost_last_slot.get(&receiver).copied().unwrap_or(false)
    }

    /// Draws one delivery outcome for `ctx.receiver`. `ctx.prior_lost` is
    /// overwritten from the stored receiver state.
    pub fn sample(&mut self, model: &ChannelModel, mut ctx: LinkContext) -> bool {
        ctx.prior_lost = self.prior_lost(ctx.receiver);
        let seed = self.seed;
        let rng = self
            .streams
            .entry(ctx.receiver)
            .or_insert_with(|| Self::stream_for(seed, ctx.receiver));
        let delivered = sample_delivery(model, &ctx, rng);
        if !delivered {
            self.lost_this_slot.insert(ctx.receiver, true);
        }
        delivered
    }

    /// Closes the current slot: this slot's losses become the prior state.
    pub fn end_slot(&mut self) {
        self.lost_last_slot = std::mem::take(&mut self.lost_this_slot);
    }
}
