//! Slot-synchronous simulation of vehicles approaching one intersection.
//!
//! Within a slot the engine runs, in order: sensor-driven exits and
//! releases, the sensor-driven main step, the stop-and-go rule for vehicles
//! that fell back, the ENTER steps, message delivery, and finally control
//! and integration of the longitudinal motion.

pub mod bundled;
mod scenario;
mod trace;

use std::collections::{BTreeMap, BTreeSet};

pub use scenario::*;
pub use trace::*;

use crate::channel::{ChannelModel, LinkContext, ReceiverStreams};
use crate::kinematics::{
    enter_trigger, mean_time_to_intersection, priority_decision, yield_acceleration, Decision, PriorityVerdict,
    Route, Uid, VehicleEstimate,
};
use crate::protocol::{
    enter_step, exit_step, sd_main_step, Action, Beacon, Mode, ProtocolState, SdDecision, SensedVehicle,
    SensorSnapshot, V2vMessage,
};

/// MTI reported when the vehicle would never reach the intersection under
/// its current dynamics.
pub const UNREACHABLE_MTI: f64 = 1e9;

/// One sender-to-receiver delivery attempt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeliveryQuery {
    pub sender: Uid,
    pub receiver: Uid,
    pub slot: u32,
    pub distance: f64,
    /// How many slots (including this one) the receiver has been listening.
    pub listen_index: u32,
}

/// Decides which transmissions reach their receiver.
pub trait LossModel {
    fn delivered(&mut self, q: &DeliveryQuery) -> bool;
    fn end_slot(&mut self) {}
}

/// Loss process drawn from a [`ChannelModel`] with per-receiver streams.
pub struct ChannelLoss {
    model: ChannelModel,
    streams: ReceiverStreams,
}

impl ChannelLoss {
    pub fn new(model: ChannelModel, seed: u64) -> Self {
        ChannelLoss {
            model,
            streams: ReceiverStreams::new(seed),
        }
    }
}

impl LossModel for ChannelLoss {
    fn delivered(&mut self, q: &DeliveryQuery) -> bool {
        let ctx = LinkContext {
            sender: q.sender,
            receiver: q.receiver,
            distance: q.distance,
            slot: q.slot,
            prior_lost: false,
        };
        self.streams.sample(&self.model, ctx)
    }

    fn end_slot(&mut self) {
        self.streams.end_slot();
    }
}

struct Vehicle {
    spec: VehicleSpec,
    x: f64,
    v: f64,
    proto: ProtocolState,
    triggered: bool,
    inbox: Vec<V2vMessage>,
    outbox: Vec<V2vMessage>,
    commit_slot: Option<u32>,
    stop_slot: Option<u32>,
    a_nopr: Option<f64>,
    listen_count: u32,
    round_started: Option<u32>,
    summary: VehicleSummary,
}

impl Vehicle {
    fn route(&self) -> Route {
        self.spec.route
    }

    fn done(&self) -> bool {
        self.proto.mode == Mode::Done
    }

    fn listening(&self, slot: u32) -> bool {
        self.proto.mode == Mode::V2vEnter && !self.proto.mainctrl && self.round_started != Some(slot)
    }

    fn desired_accel(&self, t: f64) -> f64 {
        let gap = self.spec.cruise() - self.v;
        if gap.abs() < 1e-9 {
            0.0
        } else {
            (gap / t).clamp(-LAUNCH_ACCEL, LAUNCH_ACCEL)
        }
    }

    fn estimate(&self, t: f64) -> VehicleEstimate {
        VehicleEstimate {
            uid: self.spec.uid,
            x_hat: self.x,
            v: self.v,
            a: self.desired_accel(t),
            dx_bound: self.spec.dx_bound,
        }
    }
}

/// Planar position used for distances: approach arms point away from the
/// centre, counterclockwise by index; a vehicle inside the box sits at the
/// centre.
fn planar(sc: &Scenario, route: &Route, x: f64) -> (f64, f64) {
    let g = &sc.geometry;
    let arm = |k: usize, r: f64| {
        let ang = k as f64 * std::f64::consts::FRAC_PI_2;
        (r * ang.cos(), r * ang.sin())
    };
    if x < g.entry() {
        arm(route.clane.index(), g.entry() - x + g.cell_width)
    } else if x < g.exit(route) {
        (0.0, 0.0)
    } else {
        arm(route.nlane.index(), x - g.exit(route) + g.cell_width)
    }
}

fn distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Largest acceleration after which the vehicle can still stop at `target`
/// braking at [`STOP_DECEL`]; never below a full stop within the slot.
fn stop_guard(x: f64, v: f64, t: f64, target: f64) -> f64 {
    let b = STOP_DECEL;
    let c = x + t * v / 2.0 - target;
    let disc = t * t / 4.0 - 2.0 * c / b;
    let v_next = if disc < 0.0 { 0.0 } else { (b * (-t / 2.0 + disc.sqrt())).max(0.0) };
    (v_next - v) / t
}

pub fn run_scenario(sc: &Scenario) -> SimTrace {
    let mut loss = ChannelLoss::new(sc.channel.clone(), sc.seed);
    run_scenario_with(sc, &mut loss)
}

pub fn run_scenario_with(sc: &Scenario, loss: &mut dyn LossModel) -> SimTrace {
    let t_slot = sc.slot_duration_s;
    let geo = sc.geometry;
    let x_stop = sc.stop_line();
    let mut vs: Vec<Vehicle> = sc
        .vehicles
        .iter()
        .map(|spec| Vehicle {
            spec: spec.clone(),
            x: spec.x,
            v: spec.v,
            proto: ProtocolState::new(spec.uid, spec.route, sc.failure_threshold),
            triggered: false,
            inbox: Vec::new(),
            outbox: Vec::new(),
            commit_slot: None,
            stop_slot: None,
            a_nopr: None,
            listen_count: 0,
            round_started: None,
            summary: VehicleSummary {
                uid: spec.uid,
                route: spec.route,
                round_starts: Vec::new(),
                mainctrl_slots: Vec::new(),
                fallback_slot: None,
                entry_slot: None,
                done_slot: None,
            },
        })
        .collect();
    vs.sort_by_key(|v| v.spec.uid);
    let n = vs.len();
    let mut records = Vec::new();
    let mut slots_run = 0;
    let mut truncated = true;

    for slot in 0..sc.max_slots {
        if vs.iter().all(Vehicle::done) {
            truncated = false;
            break;
        }
        slots_run = slot + 1;
        let active: Vec<bool> = vs.iter().map(|v| !v.done()).collect();
        let start: Vec<(f64, f64)> = vs.iter().map(|v| (v.x, v.v)).collect();
        let mut actions = ActionLog::new();
        let mut received: Vec<Vec<V2vMessage>> = vec![Vec::new(); n];
        let mut lost: Vec<Vec<V2vMessage>> = vec![Vec::new(); n];
        for v in vs.iter_mut() {
            v.outbox.clear();
            if active_entry(v, &geo) && v.summary.entry_slot.is_none() {
                v.summary.entry_slot = Some(slot);
            }
        }

        // exits
        for v in vs.iter_mut().filter(|v| v.proto.mode == Mode::Crossing) {
            let cleared = v.x >= geo.exit(&v.route());
            let sensed = SensorSnapshot {
                cleared_intersection: cleared,
                ..Default::default()
            };
            let verdict = v.proto.verdict.clone().unwrap_or_default();
            let (p, a) = exit_step(v.proto.clone(), &verdict, &sensed);
            v.proto = p;
            if let Some(a) = a {
                actions_for(&mut actions, v, a);
                v.summary.done_slot = Some(slot);
            }
        }
        let exited: BTreeSet<Uid> = vs.iter().filter(|v| v.done()).map(|v| v.spec.uid).collect();

        // sensing
        let pos: Vec<(f64, f64)> = vs.iter().map(|v| planar(sc, &v.route(), v.x)).collect();
        let releasing: Vec<bool> = vs
            .iter()
            .map(|v| v.proto.mode == Mode::AwaitExit && v.proto.awaiting.is_subset(&exited))
            .collect();
        let beacon = |i: usize, v: &Vehicle| {
            if releasing[i] {
                Beacon::Negotiating { acked: false }
            } else {
                v.proto.beacon()
            }
        };
        let nearby = |i: usize, vs: &[Vehicle]| -> Vec<(usize, SensedVehicle)> {
            (0..n)
                .filter(|&j| j != i && !vs[j].done() && distance(pos[i], pos[j]) <= sc.sensing_radius_m)
                .map(|j| {
                    let ahead = vs[j].route().clane == vs[i].route().clane && vs[j].x > vs[i].x;
                    (
                        j,
                        SensedVehicle {
                            uid: vs[j].spec.uid,
                            beacon: beacon(j, &vs[j]),
                            same_lane_ahead: ahead,
                        },
                    )
                })
                .collect()
        };

        let mut starters: BTreeSet<usize> = (0..n).filter(|&i| releasing[i]).collect();
        let mut sd_decisions: BTreeMap<usize, SdDecision> = BTreeMap::new();
        for i in 0..n {
            let v = &mut vs[i];
            if v.proto.mode != Mode::SdApproach {
                continue;
            }
            if !v.triggered {
                v.triggered = enter_trigger(
                    &v.estimate(t_slot),
                    sc.sigma_x_m,
                    sc.trigger_lookahead_m,
                    t_slot,
                    sc.ca_boundary(),
                    sc.epsilon,
                )
                .unwrap_or(false);
            }
            if !v.triggered {
                continue;
            }
            let near = nearby(i, &vs);
            let decision = if near.iter().any(|(_, s)| s.same_lane_ahead) {
                SdDecision::UseSdFollow
            } else if near.is_empty() {
                SdDecision::UseSdCross
            } else if near.iter().any(|(_, s)| s.beacon.is_competing()) {
                SdDecision::UseSdWait
            } else {
                starters.insert(i);
                SdDecision::SwitchToV2v
            };
            sd_decisions.insert(i, decision);
        }
        let open: BTreeSet<usize> = (0..n)
            .filter(|&i| {
                starters.contains(&i)
                    || (vs[i].proto.mode == Mode::V2vEnter && !vs[i].proto.ack_sent && !vs[i].proto.mainctrl)
            })
            .collect();
        for i in 0..n {
            let decision = sd_decisions.get(&i).copied();
            if decision.is_none() && !releasing[i] {
                continue;
            }
            let near = nearby(i, &vs);
            let competitors: BTreeSet<Uid> = near
                .iter()
                .filter(|(j, _)| open.contains(j))
                .map(|(_, s)| s.uid)
                .collect();
            let v = &mut vs[i];
            let own_mti = mean_time_to_intersection(&v.estimate(t_slot), geo.x_s).unwrap_or(UNREACHABLE_MTI);
            let sensed = SensorSnapshot {
                own_mti,
                nearby: near.into_iter().map(|(_, s)| s).collect(),
                competitors,
                exited: exited.clone(),
                cleared_intersection: false,
            };
            if releasing[i] {
                let verdict = v.proto.verdict.clone().unwrap_or_default();
                let (p, a) = exit_step(v.proto.clone(), &verdict, &sensed);
                v.proto = p;
                if let Some(a) = a {
                    actions_for(&mut actions, v, a);
                }
                v.a_nopr = None;
                v.round_started = Some(slot);
                v.summary.round_starts.push(slot);
                continue;
            }
            let (p, d) = sd_main_step(v.proto.clone(), &sensed);
            debug_assert_eq!(Some(d), decision);
            v.proto = p;
            match d {
                SdDecision::UseSdCross => {
                    v.commit_slot = Some(slot);
                    actions_for(&mut actions, v, Action::SdCross);
                }
                SdDecision::UseSdFollow => actions_for(&mut actions, v, Action::SdFollow),
                SdDecision::UseSdWait => actions_for(&mut actions, v, Action::SdWait),
                SdDecision::SwitchToV2v => {
                    v.round_started = Some(slot);
                    v.summary.round_starts.push(slot);
                    actions_for(&mut actions, v, Action::SwitchToV2v);
                }
            }
        }

        // stop-and-go for vehicles that fell back
        let inside = |v: &Vehicle| !v.done() && v.x >= geo.entry();
        for v in vs.iter_mut().filter(|v| v.proto.mode == Mode::SdFallback) {
            if v.stop_slot.is_none() && v.v < 0.05 && v.x >= x_stop - 0.5 {
                v.stop_slot = Some(slot);
            }
        }
        let intersection_busy = vs
            .iter()
            .any(|v| inside(v) || (v.proto.mode == Mode::Crossing && v.x < geo.entry()));
        if !intersection_busy {
            let next = vs
                .iter()
                .enumerate()
                .filter(|(_, v)| v.proto.mode == Mode::SdFallback)
                .filter_map(|(i, v)| v.stop_slot.map(|s| (s, v.spec.uid, i)))
                .min();
            if let Some((_, _, i)) = next {
                let v = &mut vs[i];
                v.proto.mode = Mode::Crossing;
                v.commit_slot = Some(slot);
                actions_for(&mut actions, v, Action::FallbackGo);
            }
        }

        // agreement steps
        for v in vs.iter_mut() {
            if v.proto.mode != Mode::V2vEnter || v.proto.mainctrl {
                continue;
            }
            if v.round_started != Some(slot) {
                let inbox = std::mem::take(&mut v.inbox);
                let (p, io) = enter_step(v.proto.clone(), &inbox);
                v.proto = p;
                v.outbox = io.outbox;
                match io.action {
                    Some(Action::InitiateMainCtrl) => {
                        actions_for(&mut actions, v, Action::InitiateMainCtrl);
                        v.summary.mainctrl_slots.push(slot);
                        apply_verdict(sc, v, slot, &mut actions);
                    }
                    Some(Action::SwitchToSd) => {
                        actions_for(&mut actions, v, Action::SwitchToSd);
                        v.summary.fallback_slot = Some(slot);
                    }
                    Some(a) => actions_for(&mut actions, v, a),
                    None => {}
                }
            } else {
                v.inbox.clear();
            }
        }

        // delivery, within the slot
        for r in 0..n {
            if !vs[r].listening(slot) {
                continue;
            }
            vs[r].listen_count += 1;
            for s in 0..n {
                if s == r || vs[s].outbox.is_empty() {
                    continue;
                }
                let d = distance(pos[r], pos[s]);
                if d > sc.comm_range_m {
                    continue;
                }
                let q = DeliveryQuery {
                    sender: vs[s].spec.uid,
                    receiver: vs[r].spec.uid,
                    slot,
                    distance: d,
                    listen_index: vs[r].listen_count,
                };
                let msgs = vs[s].outbox.clone();
                if loss.delivered(&q) {
                    received[r].extend(msgs.iter().copied());
                    vs[r].inbox.extend(msgs);
                } else {
                    lost[r].extend(msgs);
                }
            }
        }
        loss.end_slot();

        // control
        let accel: Vec<f64> = (0..n)
            .map(|i| if active[i] { control(sc, &vs, i, &geo) } else { 0.0 })
            .collect();

        for i in 0..n {
            if !active[i] {
                continue;
            }
            let v = &vs[i];
            let (x0, v0) = start[i];
            records.push(TraceRecord {
                slot,
                uid: v.spec.uid,
                mode: v.proto.mode,
                x: x0,
                v: v0,
                a: accel[i],
                f: v.proto.f,
                sent: v.outbox.clone(),
                received: std::mem::take(&mut received[i]),
                lost: std::mem::take(&mut lost[i]),
                occupancy: geo.occupied_cell(&v.route(), x0),
                actions: actions.remove(&v.spec.uid).unwrap_or_default(),
                peers: if v.proto.mode == Mode::V2vEnter {
                    v.proto.expected_peers.iter().copied().collect()
                } else {
                    Vec::new()
                },
            });
        }
        for i in 0..n {
            if !active[i] || vs[i].done() {
                continue;
            }
            let v = &mut vs[i];
            let a = accel[i];
            v.x += v.v * t_slot + 0.5 * a * t_slot * t_slot;
            v.v = (v.v + a * t_slot).max(0.0);
        }
    }
    if vs.iter().all(Vehicle::done) {
        truncated = false;
    }

    SimTrace {
        name: sc.name.clone(),
        seed: sc.seed,
        threshold: sc.failure_threshold,
        slots_run,
        truncated,
        records,
        vehicles: vs.into_iter().map(|v| v.summary).collect(),
    }
}

fn active_entry(v: &Vehicle, geo: &crate::kinematics::IntersectionGeometry) -> bool {
    !v.done() && v.x >= geo.entry()
}

type ActionLog = BTreeMap<Uid, Vec<Action>>;

fn actions_for(actions: &mut ActionLog, v: &Vehicle, a: Action) {
    actions.entry(v.spec.uid).or_default().push(a);
}

fn apply_verdict(sc: &Scenario, v: &mut Vehicle, slot: u32, actions: &mut ActionLog) {
    let verdict = match priority_decision(&v.proto.round_entries(), sc.tau_th_s) {
        Ok(verdict) => verdict,
        Err(_) => {
            v.proto.fall_back();
            v.summary.fallback_slot = Some(slot);
            actions_for(actions, v, Action::SwitchToSd);
            return;
        }
    };
    let (p, a) = exit_step(v.proto.clone(), &verdict, &SensorSnapshot::default());
    v.proto = p;
    if let Some(a) = a {
        actions_for(actions, v, a);
    }
    match verdict.decision(v.spec.uid) {
        Some(Decision::Yield) if !verdict.separated.contains(&v.spec.uid) => {
            v.a_nopr = slow_down(sc, v, &verdict);
        }
        Some(Decision::Yield) => v.a_nopr = None,
        _ => v.commit_slot = Some(slot),
    }
}

fn slow_down(sc: &Scenario, v: &Vehicle, verdict: &PriorityVerdict) -> Option<f64> {
    let col = verdict.collision_set.get(&v.spec.uid)?;
    let x_col = sc.geometry.collision_entry(&v.route(), col)?;
    let est = v.estimate(sc.slot_duration_s);
    yield_acceleration(&est, est.a, x_col, sc.yield_displacement_m).ok()
}

/// Whether a committed vehicle must still hold at the line.
fn held_back(vs: &[Vehicle], i: usize, geo: &crate::kinematics::IntersectionGeometry) -> bool {
    let me = &vs[i];
    let key = |v: &Vehicle| (v.commit_slot.unwrap_or(u32::MAX), std::cmp::Reverse(v.spec.uid));
    vs.iter().enumerate().any(|(j, o)| {
        if j == i || o.done() || !o.route().conflicts_with(&me.route()) {
            return false;
        }
        let o_inside = o.x >= geo.entry();
        let o_committed = o.proto.mode == Mode::Crossing && !o_inside;
        o_inside || (o_committed && key(o) < key(me))
    })
}

fn control(sc: &Scenario, vs: &[Vehicle], i: usize, geo: &crate::kinematics::IntersectionGeometry) -> f64 {
    let t = sc.slot_duration_s;
    let v = &vs[i];
    let mut a = v.desired_accel(t);
    if v.proto.mode == Mode::AwaitExit {
        if let Some(a_nopr) = v.a_nopr {
            a = a.min(a_nopr);
        }
    }
    let before_entry = v.x < geo.entry();
    let authorized = v.proto.mode == Mode::Crossing && !held_back(vs, i, geo);
    let mut target = f64::INFINITY;
    if before_entry && !authorized {
        target = sc.stop_line();
    }
    if let Some(leader) = vs
        .iter()
        .filter(|o| !o.done() && o.route().clane == v.route().clane && o.x > v.x && o.spec.uid != v.spec.uid)
        .map(|o| o.x)
        .min_by(f64::total_cmp)
    {
        if before_entry {
            target = target.min(leader - FOLLOW_GAP);
        }
    }
    if target.is_finite() {
        a = a.min(stop_guard(v.x, v.v, t, target));
    }
    a.max(-v.v / t)
}
