use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel::ChannelModel;
use crate::error::ConfigError;
use crate::kinematics::{IntersectionGeometry, Route, Uid};

pub const SCHEMA_VERSION: u32 = 1;

/// Deceleration assumed when checking that a vehicle can still stop, m/s^2.
pub const STOP_DECEL: f64 = 6.0;
/// Distance between the stop line and the first cell, m.
pub const STOP_LINE_SETBACK: f64 = 1.0;
/// Acceleration used to regain cruise speed, m/s^2.
pub const LAUNCH_ACCEL: f64 = 2.0;
/// Minimum gap kept to a leader on the same approach lane, m.
pub const FOLLOW_GAP: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleSpec {
    pub uid: Uid,
    pub route: Route,
    /// Position along the own path, m. The first cell starts at `x_s - w`.
    pub x: f64,
    pub v: f64,
    #[serde(default)]
    pub a: f64,
    #[serde(default)]
    pub dx_bound: f64,
    /// Speed the vehicle returns to after slowing down. Defaults to the
    /// initial speed, or 8 m/s for a vehicle starting at rest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cruise_speed: Option<f64>,
}

impl VehicleSpec {
    pub fn cruise(&self) -> f64 {
        self.cruise_speed.unwrap_or(if self.v > 0.0 { self.v } else { 8.0 })
    }
}

fn default_slot() -> f64 {
    0.1
}
fn default_threshold() -> u32 {
    5
}
fn default_range() -> f64 {
    300.0
}
fn default_lookahead() -> f64 {
    50.0
}
fn default_tau_th() -> f64 {
    1.0
}
fn default_displacement() -> f64 {
    7.0
}
fn default_epsilon() -> f64 {
    0.01
}
fn default_sigma() -> f64 {
    0.5
}
fn default_sensing() -> f64 {
    150.0
}
fn default_max_slots() -> u32 {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    /// Slot duration T, s.
    #[serde(default = "default_slot")]
    pub slot_duration_s: f64,
    /// Failure threshold F, slots.
    #[serde(default = "default_threshold")]
    pub failure_threshold: u32,
    /// Communication range R, m.
    #[serde(default = "default_range")]
    pub comm_range_m: f64,
    /// Distance R the ENTER trigger looks ahead, m.
    #[serde(default = "default_lookahead")]
    pub trigger_lookahead_m: f64,
    #[serde(default = "default_tau_th")]
    pub tau_th_s: f64,
    /// Displacement D removed by a yielding vehicle, m.
    #[serde(default = "default_displacement")]
    pub yield_displacement_m: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_sigma")]
    pub sigma_x_m: f64,
    #[serde(default = "default_sensing")]
    pub sensing_radius_m: f64,
    /// Capture-area boundary along each approach; defaults to 10 m before
    /// the first cell.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ca_boundary_m: Option<f64>,
    #[serde(default = "default_max_slots")]
    pub max_slots: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub geometry: IntersectionGeometry,
    #[serde(default = "default_channel")]
    pub channel: ChannelModel,
    pub vehicles: Vec<VehicleSpec>,
}

fn default_channel() -> ChannelModel {
    ChannelModel::Perfect
}

impl Scenario {
    pub fn new(name: &str, vehicles: Vec<VehicleSpec>) -> Self {
        Scenario {
            schema_version: SCHEMA_VERSION,
            name: name.to_string(),
            slot_duration_s: default_slot(),
            failure_threshold: default_threshold(),
            comm_range_m: default_range(),
            trigger_lookahead_m: default_lookahead(),
            tau_th_s: default_tau_th(),
            yield_displacement_m: default_displacement(),
            epsilon: default_epsilon(),
            sigma_x_m: default_sigma(),
            sensing_radius_m: default_sensing(),
            ca_boundary_m: None,
            max_slots: default_max_slots(),
            seed: 0,
            geometry: IntersectionGeometry::default(),
            channel: ChannelModel::Perfect,
            vehicles,
        }
    }

    pub fn ca_boundary(&self) -> f64 {
        self.ca_boundary_m.unwrap_or(self.geometry.entry() - 10.0)
    }

    pub fn stop_line(&self) -> f64 {
        self.geometry.entry() - STOP_LINE_SETBACK
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if !(self.slot_duration_s > 0.0 && self.slot_duration_s.is_finite()) {
            return bad("slot_duration_s must be positive".into());
        }
        if self.max_slots == 0 {
            return bad("max_slots must be positive".into());
        }
        if !(self.comm_range_m > 0.0 && self.sensing_radius_m > 0.0 && self.trigger_lookahead_m > 0.0) {
            return bad("ranges must be positive".into());
        }
        if !(self.tau_th_s > 0.0) || !(self.yield_displacement_m >= 0.0) {
            return bad("tau_th_s must be positive and yield_displacement_m nonnegative".into());
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) || !(self.sigma_x_m >= 0.0) {
            return bad("epsilon must lie in (0, 1) and sigma_x_m be nonnegative".into());
        }
        if !(self.geometry.cell_width > 0.0 && self.geometry.x_s.is_finite()) {
            return bad("geometry needs a positive cell width".into());
        }
        self.channel.validate()?;

        let mut uids = BTreeSet::new();
        for v in &self.vehicles {
            if !uids.insert(v.uid) {
                return bad(format!("duplicate uid {}", v.uid));
            }
            if !(v.x.is_finite() && v.v >= 0.0 && v.a.is_finite() && v.dx_bound >= 0.0 && v.cruise() > 0.0) {
                return bad(format!("vehicle {}: invalid initial state", v.uid));
            }
            if v.x + v.v * v.v / (2.0 * STOP_DECEL) > self.stop_line() {
                return bad(format!("vehicle {} cannot stop before the intersection", v.uid));
            }
        }
        for (i, a) in self.vehicles.iter().enumerate() {
            for b in &self.vehicles[i + 1..] {
                if a.route.clane == b.route.clane && (a.x - b.x).abs() < FOLLOW_GAP {
                    return bad(format!("vehicles {} and {} overlap on one lane", a.uid, b.uid));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn car(uid: u32, route: &str, x: f64) -> VehicleSpec {
        VehicleSpec {
            uid: Uid(uid),
            route: route.parse().unwrap(),
            x,
            v: 10.0,
            a: 0.0,
            dx_bound: 0.0,
            cruise_speed: None,
        }
    }

    #[test]
    fn json_round_trip() {
        let s = Scenario::new("t", vec![car(1, "H1R->H3L", 100.0), car(2, "H2R->H4L", 100.0)]);
        let back = Scenario::from_json(&s.to_json()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn defaults_fill_in() {
        let s = Scenario::from_json(
            r#"{"schema_version": 1, "vehicles": [{"uid": 1, "route": "H1R->H2L", "x": 0, "v": 10}]}"#,
        )
        .unwrap();
        assert_eq!(s.slot_duration_s, 0.1);
        assert_eq!(s.geometry, IntersectionGeometry::default());
        assert_eq!(s.channel, ChannelModel::Perfect);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(Scenario::from_json("{").is_err());
        assert!(Scenario::from_json(r#"{"schema_version": 2, "vehicles": []}"#).is_err());
        let mut s = Scenario::new("t", vec![car(1, "H1R->H3L", 100.0), car(1, "H2R->H4L", 100.0)]);
        assert!(s.validate().is_err());
        s.vehicles[1].uid = Uid(2);
        s.vehicles[1].x = 190.0;
        assert!(s.validate().is_err(), "too close to stop");
        s.vehicles[1].x = 100.0;
        s.max_slots = 0;
        assert!(s.validate().is_err());
    }
}
