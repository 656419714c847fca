//! Per-vehicle crossing protocol: the sensor-driven main loop, the V2V
//! ENTER agreement and the sensor-driven EXIT phase.
//!
//! Each vehicle owns one [`ProtocolState`] and advances it once per slot.
//! Messages returned in a slot's outbox are delivered (or lost) within that
//! slot and are handed to the receiver's next `enter_step` call; anything
//! older is discarded.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::kinematics::{Decision, PriorityVerdict, Route, Uid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnterMessage {
    pub uid: Uid,
    pub route: Route,
    pub tau_mti: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum V2vMessage {
    Enter(EnterMessage),
    Ack { uid: Uid },
}

impl V2vMessage {
    pub fn sender(&self) -> Uid {
        match self {
            V2vMessage::Enter(e) => e.uid,
            V2vMessage::Ack { uid } => *uid,
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            V2vMessage::Enter(_) => "ENTER",
            V2vMessage::Ack { .. } => "ACK",
        }
    }
}

/// Canonical record form `uid/TYPE/clane/nlane/tau_mti`; ACK leaves the
/// last three fields empty.
impl fmt::Display for V2vMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            V2vMessage::Enter(e) => write!(
                f,
                "{}/ENTER/{:?}R/{:?}L/{:.6}",
                e.uid, e.route.clane, e.route.nlane, e.tau_mti
            ),
            V2vMessage::Ack { uid } => write!(f, "{uid}/ACK///"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mode {
    SdApproach,
    V2vEnter,
    AwaitExit,
    Crossing,
    Done,
    SdFallback,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mode::SdApproach => "SD_APPROACH",
            Mode::V2vEnter => "V2V_ENTER",
            Mode::AwaitExit => "AWAIT_EXIT",
            Mode::Crossing => "CROSSING",
            Mode::Done => "DONE",
            Mode::SdFallback => "SD_FALLBACK",
        };
        f.write_str(s)
    }
}

/// Position in the ENTER loop: what the vehicle transmitted last slot, and
/// therefore which check it runs on the next inbox.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnterPhase {
    SendEnter,
    SendAck,
    SendBoth,
}

/// Sensor-visible signal light. Only its coarse state can be observed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Beacon {
    Off,
    Negotiating { acked: bool },
    Yielding,
    Committed,
    Fallback,
}

impl Beacon {
    /// A vehicle showing this signal is already competing and cannot take a
    /// newcomer into its current round.
    pub fn is_competing(self) -> bool {
        matches!(
            self,
            Beacon::Negotiating { acked: true } | Beacon::Yielding | Beacon::Committed | Beacon::Fallback
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    SdCross,
    SdFollow,
    SdWait,
    SwitchToV2v,
    InitiateMainCtrl,
    SwitchToSd,
    Proceed,
    Yield,
    ReEnter,
    FallbackGo,
    Exited,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Action::SdCross => "SD_CROSS",
            Action::SdFollow => "SD_FOLLOW",
            Action::SdWait => "SD_WAIT",
            Action::SwitchToV2v => "SWITCH_TO_V2V",
            Action::InitiateMainCtrl => "INITIATE_MAINCTRL",
            Action::SwitchToSd => "SWITCH_TO_SD",
            Action::Proceed => "PROCEED",
            Action::Yield => "YIELD",
            Action::ReEnter => "RE_ENTER",
            Action::FallbackGo => "FALLBACK_GO",
            Action::Exited => "EXITED",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SdDecision {
    UseSdCross,
    UseSdFollow,
    UseSdWait,
    SwitchToV2v,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SensedVehicle {
    pub uid: Uid,
    pub beacon: Beacon,
    pub same_lane_ahead: bool,
}

/// What the sensor stack reports to the protocol in one slot.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SensorSnapshot {
    /// Own MTI under desired dynamics, used for a fresh ENTER message.
    pub own_mti: f64,
    /// Other vehicles near the intersection that have not left it.
    pub nearby: Vec<SensedVehicle>,
    /// Vehicles detected as starting (or still open to) an agreement round.
    pub competitors: BTreeSet<Uid>,
    /// Vehicles seen leaving the intersection so far.
    pub exited: BTreeSet<Uid>,
    /// Own position estimate is past the intersection exit.
    pub cleared_intersection: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SlotIo {
    pub outbox: Vec<V2vMessage>,
    pub action: Option<Action>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolState {
    pub uid: Uid,
    pub route: Route,
    pub mode: Mode,
    /// Failure counter, slots.
    pub f: u32,
    /// Slots since the current round started.
    pub t: u32,
    /// Failure threshold F.
    pub threshold: u32,
    pub phase: EnterPhase,
    pub own_enter: Option<EnterMessage>,
    pub known_enters: BTreeMap<Uid, EnterMessage>,
    pub known_acks: BTreeSet<Uid>,
    pub expected_peers: BTreeSet<Uid>,
    /// ENTERs from vehicles that showed up after our own ACK went out.
    pub deferred: BTreeSet<Uid>,
    pub ack_sent: bool,
    pub mainctrl: bool,
    pub fell_back: bool,
    pub awaiting: BTreeSet<Uid>,
    pub verdict: Option<PriorityVerdict>,
    pub rounds: u32,
}

impl ProtocolState {
    pub fn new(uid: Uid, route: Route, threshold: u32) -> Self {
        ProtocolState {
            uid,
            route,
            mode: Mode::SdApproach,
            f: 0,
            t: 0,
            threshold,
            phase: EnterPhase::SendEnter,
            own_enter: None,
            known_enters: BTreeMap::new(),
            known_acks: BTreeSet::new(),
            expected_peers: BTreeSet::new(),
            deferred: BTreeSet::new(),
            ack_sent: false,
            mainctrl: false,
            fell_back: false,
            awaiting: BTreeSet::new(),
            verdict: None,
            rounds: 0,
        }
    }

    pub fn beacon(&self) -> Beacon {
        match self.mode {
            Mode::SdApproach | Mode::Done => Beacon::Off,
            Mode::V2vEnter => Beacon::Negotiating {
                acked: self.ack_sent,
            },
            Mode::AwaitExit => Beacon::Yielding,
            Mode::Crossing => Beacon::Committed,
            Mode::SdFallback => Beacon::Fallback,
        }
    }

    /// Starts a fresh agreement round: counters reset, peer set taken from SD.
    pub fn begin_round(&mut self, tau_mti: f64, peers: &BTreeSet<Uid>) {
        debug_assert!(!self.fell_back, "no return to V2V after falling back");
        self.mode = Mode::V2vEnter;
        self.f = 0;
        self.t = 0;
        self.phase = EnterPhase::SendEnter;
        self.own_enter = Some(EnterMessage {
            uid: self.uid,
            route: self.route,
            tau_mti,
        });
        self.known_enters.clear();
        self.known_acks.clear();
        self.deferred.clear();
        self.expected_peers = peers.iter().copied().filter(|&u| u != self.uid).collect();
        self.ack_sent = false;
        self.mainctrl = false;
        self.awaiting.clear();
        self.verdict = None;
        self.rounds += 1;
    }

    /// Absorbs one received message. Repeated delivery is a no-op.
    pub fn absorb(&mut self, msg: &V2vMessage) {
        match msg {
            V2vMessage::Enter(e) if e.uid != self.uid => {
                if self.known_enters.contains_key(&e.uid) {
                    return;
                }
                if self.expected_peers.contains(&e.uid) {
                    self.known_enters.insert(e.uid, *e);
                } else if !self.ack_sent {
                    self.expected_peers.insert(e.uid);
                    self.known_enters.insert(e.uid, *e);
                } else {
                    self.deferred.insert(e.uid);
                }
            }
            V2vMessage::Ack { uid } if *uid != self.uid && self.known_enters.contains_key(uid) => {
                self.known_acks.insert(*uid);
            }
            _ => {}
        }
    }

    pub fn holds_all_enters(&self) -> bool {
        self.expected_peers.iter().all(|u| self.known_enters.contains_key(u))
    }

    pub fn holds_all_acks(&self) -> bool {
        self.ack_sent && self.expected_peers.iter().all(|u| self.known_acks.contains(u))
    }

    /// Inputs to the priority verdict: every held ENTER plus our own.
    pub fn round_entries(&self) -> BTreeMap<Uid, (Route, f64)> {
        let mut out: BTreeMap<Uid, (Route, f64)> = self
            .known_enters
            .values()
            .map(|e| (e.uid, (e.route, e.tau_mti)))
            .collect();
        if let Some(own) = &self.own_enter {
            out.insert(own.uid, (own.route, own.tau_mti));
        }
        out
    }

    fn outbox_for(&mut self, phase: EnterPhase) -> Vec<V2vMessage> {
        let own = self.own_enter.expect("round started");
        let enter = V2vMessage::Enter(own);
        let ack = V2vMessage::Ack { uid: self.uid };
        match phase {
            EnterPhase::SendEnter => vec![enter],
            EnterPhase::SendAck | EnterPhase::SendBoth => {
                self.ack_sent = true;
                self.known_acks.insert(self.uid);
                if phase == EnterPhase::SendAck {
                    vec![ack]
                } else {
                    vec![enter, ack]
                }
            }
        }
    }

    pub fn fall_back(&mut self) {
        self.mode = Mode::SdFallback;
        self.fell_back = true;
    }
}

/// Sensor-driven main step for a vehicle that has reached the point where
/// it must announce itself.
pub fn sd_main_step(mut state: ProtocolState, sensed: &SensorSnapshot) -> (ProtocolState, SdDecision) {
    debug_assert_eq!(state.mode, Mode::SdApproach);
    // COND2: something ahead on our own lane
    if sensed.nearby.iter().any(|v| v.same_lane_ahead) {
        return (state, SdDecision::UseSdFollow);
    }
    // COND1: nobody around the intersection
    if sensed.nearby.is_empty() {
        state.mode = Mode::Crossing;
        return (state, SdDecision::UseSdCross);
    }
    // COND3: a competition is already under way
    if sensed.nearby.iter().any(|v| v.beacon.is_competing()) {
        return (state, SdDecision::UseSdWait);
    }
    state.begin_round(sensed.own_mti, &sensed.competitors);
    (state, SdDecision::SwitchToV2v)
}

/// One slot of the V2V ENTER agreement.
///
/// `inbox` holds what was delivered to this vehicle in the previous slot.
/// The first call after a round starts only transmits the ENTER message.
/// Later calls check the inbox against what was sent last slot:
///
/// * after an ENTER, all peer ENTERs must be held, then the ACK is sent;
/// * after an ACK, all peer ACKs must be held, then MAINCTRL starts;
/// * after a retransmitted ENTER+ACK, MAINCTRL starts if all ACKs are in,
///   otherwise the vehicle goes back to sending its ACK, counting a failure
///   only when some peer was not heard from at all.
///
/// A failed check increments `f` (once per slot); `f > F` abandons V2V.
/// Every failure in the ACK phase is followed by a retransmission of both
/// messages.
pub fn enter_step(mut state: ProtocolState, inbox: &[V2vMessage]) -> (ProtocolState, SlotIo) {
    debug_assert_eq!(state.mode, Mode::V2vEnter);
    if state.mainctrl {
        return (state, SlotIo::default());
    }
    state.t += 1;
    if state.t == 1 {
        let outbox = state.outbox_for(EnterPhase::SendEnter);
        return (state, SlotIo { outbox, action: None });
    }

    // ENTERs first so that an ACK arriving with its ENTER is kept.
    for msg in inbox.iter().filter(|m| matches!(m, V2vMessage::Enter(_))) {
        state.absorb(msg);
    }
    for msg in inbox.iter().filter(|m| matches!(m, V2vMessage::Ack { .. })) {
        state.absorb(msg);
    }
    let heard: BTreeSet<Uid> = inbox.iter().map(V2vMessage::sender).collect();

    let (failed, next) = match state.phase {
        EnterPhase::SendEnter => {
            if state.holds_all_enters() {
                (false, Some(EnterPhase::SendAck))
            } else {
                (true, Some(EnterPhase::SendEnter))
            }
        }
        EnterPhase::SendAck => {
            if state.holds_all_acks() {
                (false, None)
            } else {
                (true, Some(EnterPhase::SendBoth))
            }
        }
        EnterPhase::SendBoth => {
            if state.holds_all_enters() && state.holds_all_acks() {
                (false, None)
            } else if state.holds_all_enters() {
                let silent = state.expected_peers.iter().any(|u| !heard.contains(u));
                if silent {
                    (true, Some(EnterPhase::SendBoth))
                } else {
                    (false, Some(EnterPhase::SendAck))
                }
            } else {
                (true, Some(EnterPhase::SendBoth))
            }
        }
    };

    if failed {
        state.f += 1;
        if state.f > state.threshold {
            state.fall_back();
            return (
                state,
                SlotIo {
                    outbox: Vec::new(),
                    action: Some(Action::SwitchToSd),
                },
            );
        }
    }

    match next {
        None => {
            state.mainctrl = true;
            (
                state,
                SlotIo {
                    outbox: Vec::new(),
                    action: Some(Action::InitiateMainCtrl),
                },
            )
        }
        Some(phase) => {
            state.phase = phase;
            let outbox = state.outbox_for(phase);
            (state, SlotIo { outbox, action: None })
        }
    }
}

/// Sensor-driven EXIT step, run once MAINCTRL has been initiated.
///
/// The first call applies the verdict: the vehicle either commits to
/// crossing or waits for every prioritized vehicle to leave. A waiting
/// vehicle that sees them all gone starts a new ENTER round with the
/// competitors SD reports.
pub fn exit_step(
    mut state: ProtocolState,
    verdict: &PriorityVerdict,
    sensed: &SensorSnapshot,
) -> (ProtocolState, Option<Action>) {
    match state.mode {
        Mode::V2vEnter if state.mainctrl => {
            state.verdict = Some(verdict.clone());
            match verdict.decision(state.uid).unwrap_or(Decision::Proceed) {
                Decision::Proceed => {
                    state.mode = Mode::Crossing;
                    (state, Some(Action::Proceed))
                }
                Decision::Yield => {
                    state.mode = Mode::AwaitExit;
                    state.awaiting = verdict.proceeding();
                    (state, Some(Action::Yield))
                }
            }
        }
        Mode::Crossing if sensed.cleared_intersection => {
            state.mode = Mode::Done;
            (state, Some(Action::Exited))
        }
        Mode::AwaitExit if state.awaiting.is_subset(&sensed.exited) => {
            state.begin_round(sensed.own_mti, &sensed.competitors);
            (state, Some(Action::ReEnter))
        }
        _ => (state, None),
    }
}

/// Closed-form ENTER delay when each vehicle suffers one burst of
/// `failures[i]` consecutive receive omissions.
pub fn closed_form_enter_delay(threshold: u32, failures: &[u32]) -> u32 {
    let worst = failures.iter().copied().max().unwrap_or(0);
    threshold.min(2 * worst.div_ceil(2)) + 3
}

pub mod harness {
    //! Runs a single ENTER round among vehicles that all switch to V2V in
    //! the same slot, with losses chosen by a callback.

    use super::*;
    use crate::kinematics::{Approach, Maneuver};

    #[derive(Debug, Clone, PartialEq)]
    pub struct VehicleOutcome {
        pub uid: Uid,
        pub mainctrl_at: Option<u32>,
        pub fallback_at: Option<u32>,
        pub known_enters: BTreeMap<Uid, EnterMessage>,
        pub final_f: u32,
    }

    #[derive(Debug, Clone, PartialEq)]
    pub struct RoundOutcome {
        pub vehicles: Vec<VehicleOutcome>,
        /// Per slot, the messages each vehicle sent and received.
        pub log: Vec<SlotLog>,
    }

    #[derive(Debug, Clone, PartialEq)]
    pub struct SlotLog {
        pub t: u32,
        pub sent: Vec<Vec<V2vMessage>>,
        pub delivered: Vec<Vec<V2vMessage>>,
        pub lost: Vec<Vec<V2vMessage>>,
        pub f: Vec<u32>,
        pub actions: Vec<Option<Action>>,
    }

    impl RoundOutcome {
        pub fn all_mainctrl_same_slot(&self) -> Option<u32> {
            let first = self.vehicles.first()?.mainctrl_at?;
            self.vehicles
                .iter()
                .all(|v| v.mainctrl_at == Some(first))
                .then_some(first)
        }
    }

    /// `lost(receiver_index, t)` drops everything delivered to that receiver
    /// in round slot `t` (first transmission is `t = 1`).
    pub fn run_enter_round(
        n: usize,
        threshold: u32,
        max_slots: u32,
        mut lost: impl FnMut(usize, u32) -> bool,
    ) -> RoundOutcome {
        let uids: Vec<Uid> = (1..=n as u32).map(Uid).collect();
        let all: BTreeSet<Uid> = uids.iter().copied().collect();
        let mut states: Vec<Option<ProtocolState>> = uids
            .iter()
            .enumerate()
            .map(|(i, &uid)| {
                let route = Route::from_maneuver(Approach::from_index(i), Maneuver::Straight);
                let mut s = ProtocolState::new(uid, route, threshold);
                s.begin_round(5.0 + i as f64, &all);
                Some(s)
            })
            .collect();
        let mut inboxes: Vec<Vec<V2vMessage>> = vec![Vec::new(); n];
        let mut outcomes: Vec<VehicleOutcome> = uids
            .iter()
            .map(|&uid| VehicleOutcome {
                uid,
                mainctrl_at: None,
                fallback_at: None,
                known_enters: BTreeMap::new(),
                final_f: 0,
            })
            .collect();
        let mut log = Vec::new();

        for t in 1..=max_slots {
            let mut sent = vec![Vec::new(); n];
            let mut actions = vec![None; n];
            for i in 0..n {
                let Some(state) = states[i].take() else { continue };
                if state.mode != Mode::V2vEnter || state.mainctrl {
                    states[i] = Some(state);
                    continue;
                }
                let (state, io) = enter_step(state, &inboxes[i]);
                match io.action {
                    Some(Action::InitiateMainCtrl) => {
                        outcomes[i].mainctrl_at = Some(state.t);
                        outcomes[i].known_enters = state.known_enters.clone();
                    }
                    Some(Action::SwitchToSd) => outcomes[i].fallback_at = Some(state.t),
                    _ => {}
                }
                outcomes[i].final_f = state.f;
                actions[i] = io.action;
                sent[i] = io.outbox;
                states[i] = Some(state);
            }
            let mut delivered = vec![Vec::new(); n];
            let mut dropped = vec![Vec::new(); n];
            for r in 0..n {
                let incoming: Vec<V2vMessage> = (0..n)
                    .filter(|&s| s != r)
                    .flat_map(|s| sent[s].iter().copied())
                    .collect();
                if incoming.is_empty() {
                    continue;
                }
                if lost(r, t) {
                    dropped[r] = incoming;
                } else {
                    delivered[r] = incoming;
                }
            }
            let f = states.iter().map(|s| s.as_ref().map_or(0, |s| s.f)).collect();
            log.push(SlotLog {
                t,
                sent,
                delivered: delivered.clone(),
                lost: dropped,
                f,
                actions,
            });
            inboxes = delivered;
            let finished = outcomes
                .iter()
                .all(|o| o.mainctrl_at.is_some() || o.fallback_at.is_some());
            if finished {
                break;
            }
        }
        RoundOutcome {
            vehicles: outcomes,
            log,
        }
    }

    /// Burst of `len` slots at receiver `who`, starting at the first transmission.
    pub fn burst(who: usize, len: u32) -> impl Fn(usize, u32) -> bool {
        move |r, t| r == who && t <= len
    }
}

#[cfg(test)]
mod tests {
    use super::harness::*;
    use super::*;
    use crate::kinematics::{priority_decision, Approach, Maneuver};

    fn route(i: usize) -> Route {
        Route::from_maneuver(Approach::from_index(i), Maneuver::Straight)
    }

    fn snapshot(nearby: Vec<SensedVehicle>, competitors: &[u32]) -> SensorSnapshot {
        SensorSnapshot {
            own_mti: 4.0,
            nearby,
            competitors: competitors.iter().map(|&u| Uid(u)).collect(),
            ..Default::default()
        }
    }

    fn sensed(uid: u32, beacon: Beacon, ahead: bool) -> SensedVehicle {
        SensedVehicle {
            uid: Uid(uid),
            beacon,
            same_lane_ahead: ahead,
        }
    }

    #[test]
    fn empty_neighborhood_crosses_on_sensors() {
        let s = ProtocolState::new(Uid(1), route(0), 5);
        let (s, d) = sd_main_step(s, &snapshot(vec![], &[]));
        assert_eq!(d, SdDecision::UseSdCross);
        assert_eq!(s.mode, Mode::Crossing);
    }

    #[test]
    fn vehicle_ahead_means_follow() {
        let s = ProtocolState::new(Uid(1), route(0), 5);
        let (s, d) = sd_main_step(s, &snapshot(vec![sensed(2, Beacon::Off, true)], &[]));
        assert_eq!(d, SdDecision::UseSdFollow);
        assert_eq!(s.mode, Mode::SdApproach);
    }

    #[test]
    fn fresh_competitors_switch_to_v2v() {
        let s = ProtocolState::new(Uid(1), route(0), 5);
        let near = vec![sensed(2, Beacon::Off, false), sensed(3, Beacon::Off, false)];
        let (s, d) = sd_main_step(s, &snapshot(near, &[2, 3]));
        assert_eq!(d, SdDecision::SwitchToV2v);
        assert_eq!((s.mode, s.f, s.t), (Mode::V2vEnter, 0, 0));
        assert_eq!(s.expected_peers, BTreeSet::from([Uid(2), Uid(3)]));
    }

    #[test]
    fn running_competition_means_wait() {
        for beacon in [
            Beacon::Negotiating { acked: true },
            Beacon::Yielding,
            Beacon::Committed,
            Beacon::Fallback,
        ] {
            let s = ProtocolState::new(Uid(1), route(0), 5);
            let (_, d) = sd_main_step(s, &snapshot(vec![sensed(2, beacon, false)], &[]));
            assert_eq!(d, SdDecision::UseSdWait, "{beacon:?}");
        }
    }

    #[test]
    fn closed_form_values() {
        assert_eq!(closed_form_enter_delay(30, &[0, 0]), 3);
        assert_eq!(closed_form_enter_delay(30, &[0, 1]), 5);
        assert_eq!(closed_form_enter_delay(30, &[0, 2]), 5);
        assert_eq!(closed_form_enter_delay(30, &[0, 3]), 7);
        assert_eq!(closed_form_enter_delay(30, &[2, 2]), 5);
        assert_eq!(closed_form_enter_delay(3, &[0, 3]), 6);
    }

    fn diagram(pattern: [u32; 2]) -> RoundOutcome {
        run_enter_round(2, 8, 40, move |r, t| t <= pattern[r])
    }

    #[test]
    fn no_losses_take_three_slots() {
        assert_eq!(diagram([0, 0]).all_mainctrl_same_slot(), Some(3));
    }

    #[test]
    fn single_loss_takes_five_slots() {
        assert_eq!(diagram([0, 1]).all_mainctrl_same_slot(), Some(5));
        assert_eq!(diagram([0, 2]).all_mainctrl_same_slot(), Some(5));
    }

    #[test]
    fn three_losses_take_seven_slots() {
        assert_eq!(diagram([0, 3]).all_mainctrl_same_slot(), Some(7));
    }

    #[test]
    fn simultaneous_losses_do_not_add_up() {
        assert_eq!(diagram([2, 2]).all_mainctrl_same_slot(), Some(5));
    }

    #[test]
    fn single_loss_message_sequence() {
        // Car 1 sends ENTER, ACK, ENTER+ACK, ACK; car 2 ENTER, ENTER, ENTER, ACK.
        let out = diagram([0, 1]);
        let kinds = |i: usize| -> Vec<String> {
            out.log
                .iter()
                .take(4)
                .map(|l| l.sent[i].iter().map(|m| m.type_name()).collect::<Vec<_>>().join("+"))
                .collect()
        };
        assert_eq!(kinds(0), ["ENTER", "ACK", "ENTER+ACK", "ACK"]);
        assert_eq!(kinds(1), ["ENTER", "ENTER", "ENTER", "ACK"]);
    }

    #[test]
    fn exceeding_threshold_switches_to_sd() {
        let out = run_enter_round(2, 3, 40, burst(1, 4));
        assert!(out.vehicles.iter().all(|v| v.fallback_at.is_some()));
        assert_eq!(out.vehicles[1].fallback_at, Some(5));
        assert!(out.vehicles.iter().all(|v| v.mainctrl_at.is_none()));
    }

    #[test]
    fn fallback_spreads_within_threshold_plus_one() {
        for threshold in 1..=6 {
            let out = run_enter_round(2, threshold, 60, burst(1, threshold + 1));
            let first = out.vehicles[1].fallback_at.unwrap();
            let other = out.vehicles[0].fallback_at.unwrap();
            assert!(other <= first + threshold + 1, "F={threshold}: {first} vs {other}");
        }
    }

    #[test]
    fn duplicate_delivery_is_idempotent() {
        let mut s = ProtocolState::new(Uid(1), route(0), 5);
        s.begin_round(3.0, &BTreeSet::from([Uid(2)]));
        let e = V2vMessage::Enter(EnterMessage {
            uid: Uid(2),
            route: route(1),
            tau_mti: 4.0,
        });
        let a = V2vMessage::Ack { uid: Uid(2) };
        s.absorb(&e);
        s.absorb(&a);
        let once = s.clone();
        s.absorb(&e);
        s.absorb(&a);
        assert_eq!(s, once);
    }

    #[test]
    fn ack_without_enter_is_not_recorded() {
        let mut s = ProtocolState::new(Uid(1), route(0), 5);
        s.begin_round(3.0, &BTreeSet::from([Uid(2)]));
        s.absorb(&V2vMessage::Ack { uid: Uid(2) });
        assert!(s.known_acks.is_empty());
    }

    #[test]
    fn late_joiner_folded_before_ack_deferred_after() {
        let mut s = ProtocolState::new(Uid(1), route(0), 5);
        s.begin_round(3.0, &BTreeSet::from([Uid(2)]));
        let enter = |u: u32| {
            V2vMessage::Enter(EnterMessage {
                uid: Uid(u),
                route: route(u as usize),
                tau_mti: 9.0,
            })
        };
        s.absorb(&enter(3));
        assert!(s.expected_peers.contains(&Uid(3)));
        s.ack_sent = true;
        s.absorb(&enter(4));
        assert!(!s.expected_peers.contains(&Uid(4)));
        assert!(s.deferred.contains(&Uid(4)));
    }

    #[test]
    fn yielding_vehicle_reenters_after_priority_exit() {
        let mut s = ProtocolState::new(Uid(2), route(1), 5);
        s.begin_round(6.0, &BTreeSet::from([Uid(1)]));
        s.mainctrl = true;
        let entries = BTreeMap::from([(Uid(1), (route(0), 4.0)), (Uid(2), (route(1), 6.0))]);
        let verdict = priority_decision(&entries, 2.0).unwrap();
        let (s, a) = exit_step(s, &verdict, &SensorSnapshot::default());
        assert_eq!((s.mode, a), (Mode::AwaitExit, Some(Action::Yield)));
        let (s, a) = exit_step(s, &verdict, &SensorSnapshot::default());
        assert_eq!((s.mode, a), (Mode::AwaitExit, None));
        let sensed = SensorSnapshot {
            own_mti: 2.0,
            competitors: BTreeSet::from([Uid(3)]),
            exited: BTreeSet::from([Uid(1)]),
            ..Default::default()
        };
        let (s, a) = exit_step(s, &verdict, &sensed);
        assert_eq!(a, Some(Action::ReEnter));
        assert_eq!((s.mode, s.f, s.t), (Mode::V2vEnter, 0, 0));
        assert_eq!(s.expected_peers, BTreeSet::from([Uid(3)]));
    }

    #[test]
    fn priority_vehicle_exits_when_clear() {
        let mut s = ProtocolState::new(Uid(1), route(0), 5);
        s.begin_round(4.0, &BTreeSet::new());
        s.mainctrl = true;
        let verdict = priority_decision(&s.round_entries(), 2.0).unwrap();
        let (s, a) = exit_step(s, &verdict, &SensorSnapshot::default());
        assert_eq!((s.mode, a), (Mode::Crossing, Some(Action::Proceed)));
        let clear = SensorSnapshot {
            cleared_intersection: true,
            ..Default::default()
        };
        let (s, a) = exit_step(s, &verdict, &clear);
        assert_eq!((s.mode, a), (Mode::Done, Some(Action::Exited)));
    }

    #[test]
    fn lone_vehicle_round_completes() {
        let out = run_enter_round(1, 3, 10, |_, _| false);
        assert_eq!(out.vehicles[0].mainctrl_at, Some(3));
    }

    #[test]
    fn wire_form() {
        let e = V2vMessage::Enter(EnterMessage {
            uid: Uid(4),
            route: route(0),
            tau_mti: 1.5,
        });
        assert_eq!(e.to_string(), "4/ENTER/H1R/H3L/1.500000");
        assert_eq!(V2vMessage::Ack { uid: Uid(4) }.to_string(), "4/ACK///");
    }
}
