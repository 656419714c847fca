//! Longitudinal vehicle dynamics and the priority rules built on them.
//!
//! Every function here is pure. Positions are measured along each vehicle's
//! own path, so two vehicles on different approaches share the same
//! coordinates for the stop line, the intersection center and the cell
//! boundaries.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use statrs::function::erf::erfc;

use crate::error::ModelError;

/// Below this magnitude the acceleration is treated as zero.
pub const A_TOL: f64 = 1e-6;

/// Unique vehicle identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Uid(pub u32);

impl fmt::Display for Uid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleEstimate {
    pub uid: Uid,
    pub x_hat: f64,
    pub v: f64,
    pub a: f64,
    pub dx_bound: f64,
}

impl VehicleEstimate {
    pub fn x_max(&self) -> f64 {
        self.x_hat + self.dx_bound
    }
}

/// One of the four intersection arms, numbered counterclockwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Approach {
    H1,
    H2,
    H3,
    H4,
}

impl Approach {
    pub const ALL: [Approach; 4] = [Approach::H1, Approach::H2, Approach::H3, Approach::H4];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Approach {
        Approach::ALL[i % 4]
    }

    /// Arm reached by turning `quarter_turns` counterclockwise steps from this one.
    pub fn offset(self, quarter_turns: usize) -> Approach {
        Approach::from_index(self.index() + quarter_turns)
    }
}

/// Intersection subsection. `S_k` is the quadrant a vehicle from `H_k` enters first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Cell {
    S1,
    S2,
    S3,
    S4,
}

impl Cell {
    pub fn from_index(i: usize) -> Cell {
        [Cell::S1, Cell::S2, Cell::S3, Cell::S4][i % 4]
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Maneuver {
    Right,
    Straight,
    Left,
}

impl Maneuver {
    pub const ALL: [Maneuver; 3] = [Maneuver::Right, Maneuver::Straight, Maneuver::Left];
}

/// Approach lane (`H<k>R`) plus departure lane (`H<m>L`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Route {
    pub clane: Approach,
    pub nlane: Approach,
}

impl Route {
    pub fn new(clane: Approach, nlane: Approach) -> Result<Route, ModelError> {
        if clane == nlane {
            return Err(ModelError::invalid(format!(
                "departure lane {:?}L is the own approach arm",
                nlane
            )));
        }
        Ok(Route { clane, nlane })
    }

    pub fn from_maneuver(clane: Approach, maneuver: Maneuver) -> Route {
        let steps = match maneuver {
            Maneuver::Right => 1,
            Maneuver::Straight => 2,
            Maneuver::Left => 3,
        };
        Route {
            clane,
            nlane: clane.offset(steps),
        }
    }

    pub fn maneuver(&self) -> Maneuver {
        match (self.nlane.index() + 4 - self.clane.index()) % 4 {
            1 => Maneuver::Right,
            2 => Maneuver::Straight,
            3 => Maneuver::Left,
            _ => unreachable!("route invariant: nlane != clane"),
        }
    }

    /// Cells crossed in traversal order.
    pub fn cells(&self) -> Vec<Cell> {
        let n = match self.maneuver() {
            Maneuver::Right => 1,
            Maneuver::Straight => 2,
            Maneuver::Left => 3,
        };
        (0..n).map(|i| Cell::from_index(self.clane.index() + i)).collect()
    }

    pub fn conflicts_with(&self, other: &Route) -> bool {
        let mine = self.cells();
        other.cells().iter().any(|c| mine.contains(c))
    }
}

pub fn lane_name(approach: Approach, suffix: char) -> String {
    format!("{:?}{}", approach, suffix)
}

fn parse_lane(s: &str, suffix: char) -> Result<Approach, ModelError> {
    let s = s.trim();
    let bad = || ModelError::invalid(format!("unknown lane identifier '{s}'"));
    let mut chars = s.chars();
    if chars.next() != Some('H') {
        return Err(bad());
    }
    let digit = chars.next().and_then(|c| c.to_digit(10)).ok_or_else(bad)?;
    if chars.next() != Some(suffix) || chars.next().is_some() || !(1..=4).contains(&digit) {
        return Err(bad());
    }
    Ok(Approach::from_index(digit as usize - 1))
}

impl Approach {
    pub fn parse_clane(s: &str) -> Result<Approach, ModelError> {
        parse_lane(s, 'R')
    }

    pub fn parse_nlane(s: &str) -> Result<Approach, ModelError> {
        parse_lane(s, 'L')
    }
}

impl fmt::Display for Route {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}R->{:?}L", self.clane, self.nlane)
    }
}

impl FromStr for Route {
    type Err = ModelError;

    /// Parses `H1R->H3L`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (c, n) = s
            .split_once("->")
            .ok_or_else(|| ModelError::invalid(format!("route '{s}' is not CLANE->NLANE")))?;
        Route::new(Approach::parse_clane(c)?, Approach::parse_nlane(n)?)
    }
}

impl Serialize for Route {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Route {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Symmetric four-way intersection seen from each approach.
///
/// Cell `i` of a route spans `[entry + i*w, entry + (i+1)*w)` along the path,
/// where `entry = x_s - w`; a straight route therefore passes the center
/// `x_s` at the boundary of its two cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntersectionGeometry {
    pub x_s: f64,
    pub cell_width: f64,
}

impl Default for IntersectionGeometry {
    fn default() -> Self {
        IntersectionGeometry {
            x_s: 200.0,
            cell_width: 5.0,
        }
    }
}

impl IntersectionGeometry {
    pub fn entry(&self) -> f64 {
        self.x_s - self.cell_width
    }

    pub fn exit(&self, route: &Route) -> f64 {
        self.entry() + self.cell_width * route.cells().len() as f64
    }

    /// Path position where the `index`-th cell of a route begins.
    pub fn cell_start(&self, index: usize) -> f64 {
        self.entry() + self.cell_width * index as f64
    }

    /// Cell occupied by a vehicle whose front is at `x`, if inside the intersection.
    pub fn occupied_cell(&self, route: &Route, x: f64) -> Option<Cell> {
        if x < self.entry() {
            return None;
        }
        let idx = ((x - self.entry()) / self.cell_width).floor() as usize;
        route.cells().get(idx).copied()
    }

    /// Entry point of the first cell of `route` that belongs to `col`.
    pub fn collision_entry(&self, route: &Route, col: &BTreeSet<Cell>) -> Option<f64> {
        route
            .cells()
            .iter()
            .position(|c| col.contains(c))
            .map(|i| self.cell_start(i))
    }
}

/// Time for `est` to reach `x_s` under constant acceleration.
pub fn mean_time_to_intersection(est: &VehicleEstimate, x_s: f64) -> Result<f64, ModelError> {
    time_to_reach(est.x_hat, est.v, est.a, x_s)
}

/// Smallest nonnegative `tau` with `x + v*tau + a*tau^2/2 = target`.
fn time_to_reach(x: f64, v: f64, a: f64, target: f64) -> Result<f64, ModelError> {
    if !(x.is_finite() && v.is_finite() && a.is_finite() && target.is_finite()) {
        return Err(ModelError::invalid("non-finite kinematic state"));
    }
    let gap = target - x;
    if gap < 0.0 {
        return Err(ModelError::invalid(format!(
            "position {x} already past target {target}"
        )));
    }
    if gap == 0.0 {
        return Ok(0.0);
    }
    if a.abs() < A_TOL {
        return if v > 0.0 { Ok(gap / v) } else { Err(ModelError::Unreachable) };
    }
    if v <= 0.0 && a <= 0.0 {
        return Err(ModelError::Unreachable);
    }
    let disc = v * v + 2.0 * a * gap;
    if disc < 0.0 {
        return Err(ModelError::Unreachable);
    }
    // Rationalized root; the denominator is positive on every reachable branch.
    Ok(2.0 * gap / (v + disc.sqrt()))
}

/// Per-vehicle collision sets: the cells each route shares with any other.
pub fn collision_area(
    routes: &BTreeMap<Uid, Route>,
) -> Result<BTreeMap<Uid, BTreeSet<Cell>>, ModelError> {
    if routes.is_empty() {
        return Err(ModelError::invalid("no routes"));
    }
    let mut lanes = BTreeSet::new();
    for route in routes.values() {
        if !lanes.insert(route.clane) {
            return Err(ModelError::invalid(format!(
                "two vehicles on approach lane {:?}R",
                route.clane
            )));
        }
    }
    Ok(routes
        .iter()
        .map(|(&uid, route)| {
            let mine: BTreeSet<Cell> = route.cells().into_iter().collect();
            let col = routes
                .iter()
                .filter(|(&other, _)| other != uid)
                .flat_map(|(_, r)| r.cells())
                .filter(|c| mine.contains(c))
                .collect();
            (uid, col)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Proceed,
    Yield,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PriorityVerdict {
    pub decisions: BTreeMap<Uid, Decision>,
    pub collision_set: BTreeMap<Uid, BTreeSet<Cell>>,
    /// Vehicles whose MTI trails every earlier conflicting vehicle by more
    /// than the threshold. They still yield, but need no slowdown.
    pub separated: BTreeSet<Uid>,
}

impl PriorityVerdict {
    pub fn decision(&self, uid: Uid) -> Option<Decision> {
        self.decisions.get(&uid).copied()
    }

    pub fn proceeding(&self) -> BTreeSet<Uid> {
        self.decisions
            .iter()
            .filter(|(_, d)| **d == Decision::Proceed)
            .map(|(u, _)| *u)
            .collect()
    }
}

/// First-come-first-served verdict over the vehicles that hold each
/// other's ENTER data.
///
/// A vehicle proceeds when its collision set is empty, or when it precedes
/// every vehicle it conflicts with: strictly smaller MTI, or equal MTI and
/// larger UID. MTI values are compared exactly, as received.
pub fn priority_decision(
    entries: &BTreeMap<Uid, (Route, f64)>,
    tau_th: f64,
) -> Result<PriorityVerdict, ModelError> {
    if !(tau_th > 0.0) {
        return Err(ModelError::invalid("tau_th must be positive"));
    }
    if entries.values().any(|(_, tau)| !tau.is_finite()) {
        return Err(ModelError::invalid("MTI values must be finite"));
    }
    let routes: BTreeMap<Uid, Route> = entries.iter().map(|(u, (r, _))| (*u, *r)).collect();
    let collision_set = collision_area(&routes)?;
    let precedes = |a: Uid, b: Uid| {
        let (ta, tb) = (entries[&a].1, entries[&b].1);
        ta < tb || (ta == tb && a > b)
    };

    let mut decisions = BTreeMap::new();
    let mut separated = BTreeSet::new();
    for (&uid, (route, tau)) in entries {
        let rivals: Vec<Uid> = entries
            .iter()
            .filter(|(&o, (r, _))| o != uid && route.conflicts_with(r))
            .map(|(o, _)| *o)
            .collect();
        let first = rivals.iter().all(|&o| precedes(uid, o));
        let decision = if collision_set[&uid].is_empty() || first {
            Decision::Proceed
        } else {
            let earliest = rivals
                .iter()
                .filter(|&&o| precedes(o, uid))
                .map(|o| entries[o].1)
                .fold(f64::INFINITY, f64::min);
            if (tau - earliest).abs() > tau_th {
                separated.insert(uid);
            }
            Decision::Yield
        };
        decisions.insert(uid, decision);
    }
    Ok(PriorityVerdict {
        decisions,
        collision_set,
        separated,
    })
}

/// Constant acceleration that shortens the displacement by `d` before the
/// worst-case arrival at `x_col`.
pub fn yield_acceleration(
    est: &VehicleEstimate,
    a_pr: f64,
    x_col: f64,
    d: f64,
) -> Result<f64, ModelError> {
    if !(d >= 0.0) {
        return Err(ModelError::invalid("displacement reduction must be >= 0"));
    }
    if !(x_col > est.x_max()) {
        return Err(ModelError::invalid(format!(
            "collision entry {x_col} not ahead of worst-case position {}",
            est.x_max()
        )));
    }
    let tau_col = match time_to_reach(est.x_max(), est.v, a_pr, x_col) {
        Ok(t) => t,
        Err(ModelError::Unreachable) => return Ok(a_pr),
        Err(e) => return Err(e),
    };
    if !(tau_col > 0.0) || !tau_col.is_finite() {
        return Err(ModelError::invalid("nonpositive time to collision area"));
    }
    Ok(a_pr - 2.0 * d / (tau_col * tau_col))
}

/// Whether the vehicle must announce itself: the predicted position after
/// `ceil(R / (v*T))` slots lies past `ca_boundary` with probability at least
/// `epsilon`. The prediction is Gaussian around constant-velocity motion.
pub fn enter_trigger(
    est: &VehicleEstimate,
    sigma_x: f64,
    range: f64,
    slot: f64,
    ca_boundary: f64,
    epsilon: f64,
) -> Result<bool, ModelError> {
    if !(range > 0.0 && slot > 0.0) {
        return Err(ModelError::invalid("R and T must be positive"));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(ModelError::invalid("epsilon must lie in (0, 1)"));
    }
    if !(sigma_x >= 0.0) {
        return Err(ModelError::invalid("sigma_x must be >= 0"));
    }
    if est.v <= 0.0 {
        return Ok(false);
    }
    let lookahead = (range / (est.v * slot)).ceil();
    let mean = est.x_hat + est.v * lookahead * slot;
    if sigma_x == 0.0 {
        return Ok(mean >= ca_boundary);
    }
    let z = (ca_boundary - mean) / (sigma_x * std::f64::consts::SQRT_2);
    Ok(0.5 * erfc(z) >= epsilon)
}
