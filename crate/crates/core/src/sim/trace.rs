use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::Serialize;

use crate::kinematics::{Cell, Route, Uid};
use crate::protocol::{Action, Mode, V2vMessage};

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub slot: u32,
    pub uid: Uid,
    /// Mode once this slot's protocol steps have run.
    pub mode: Mode,
    /// State at the start of the slot and the acceleration applied during it.
    pub x: f64,
    pub v: f64,
    pub a: f64,
    pub f: u32,
    pub sent: Vec<V2vMessage>,
    pub received: Vec<V2vMessage>,
    pub lost: Vec<V2vMessage>,
    pub occupancy: Option<Cell>,
    pub actions: Vec<Action>,
    /// Expected peers of the current agreement round, if negotiating.
    pub peers: Vec<Uid>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VehicleSummary {
    pub uid: Uid,
    pub route: Route,
    /// Slots in which an agreement round began.
    pub round_starts: Vec<u32>,
    pub mainctrl_slots: Vec<u32>,
    pub fallback_slot: Option<u32>,
    /// First slot with the front inside the intersection.
    pub entry_slot: Option<u32>,
    pub done_slot: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub name: String,
    pub seed: u64,
    pub threshold: u32,
    pub slots_run: u32,
    pub truncated: bool,
    pub records: Vec<TraceRecord>,
    pub vehicles: Vec<VehicleSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct SafetyViolation {
    pub slot: u32,
    pub cell: Cell,
    pub first: Uid,
    pub second: Uid,
}

/// Every pair of vehicles sharing a cell in the same slot.
pub fn check_safety(trace: &SimTrace) -> Vec<SafetyViolation> {
    let mut by_slot: BTreeMap<(u32, Cell), Vec<Uid>> = BTreeMap::new();
    for r in &trace.records {
        if let Some(cell) = r.occupancy {
            by_slot.entry((r.slot, cell)).or_default().push(r.uid);
        }
    }
    let mut out = Vec::new();
    for ((slot, cell), uids) in by_slot {
        for (i, &first) in uids.iter().enumerate() {
            for &second in &uids[i + 1..] {
                out.push(SafetyViolation {
                    slot,
                    cell,
                    first: first.min(second),
                    second: first.max(second),
                });
            }
        }
    }
    out
}

/// Per vehicle: done within `bound` slots of the start.
pub fn check_liveness(trace: &SimTrace, bound: u32) -> BTreeMap<Uid, bool> {
    trace
        .vehicles
        .iter()
        .map(|v| (v.uid, v.done_slot.is_some_and(|d| d <= bound)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossingStats {
    /// Slots from the start of each completed round to its MAINCTRL.
    pub enter_delays: Vec<u32>,
    pub entry_slot: Option<u32>,
    pub done_slot: Option<u32>,
    pub fallback_count: u32,
    pub v2v_used: bool,
}

pub fn crossing_stats(trace: &SimTrace) -> BTreeMap<Uid, CrossingStats> {
    trace
        .vehicles
        .iter()
        .map(|v| {
            let enter_delays = v
                .mainctrl_slots
                .iter()
                .filter_map(|&m| v.round_starts.iter().filter(|&&s| s <= m).max().map(|s| m - s))
                .collect();
            let stats = CrossingStats {
                enter_delays,
                entry_slot: v.entry_slot,
                done_slot: v.done_slot,
                fallback_count: u32::from(v.fallback_slot.is_some()),
                v2v_used: !v.mainctrl_slots.is_empty() && v.fallback_slot.is_none(),
            };
            (v.uid, stats)
        })
        .collect()
}

/// Longest run of slots in which some negotiating vehicle still expects a
/// peer that has already fallen back to sensor-only operation.
pub fn longest_mixed_window(trace: &SimTrace) -> u32 {
    let mut modes: BTreeMap<u32, BTreeMap<Uid, Mode>> = BTreeMap::new();
    for r in &trace.records {
        modes.entry(r.slot).or_default().insert(r.uid, r.mode);
    }
    let mut mixed_slots = BTreeSet::new();
    for r in &trace.records {
        if r.mode != Mode::V2vEnter {
            continue;
        }
        let slot_modes = &modes[&r.slot];
        if r.peers.iter().any(|p| slot_modes.get(p) == Some(&Mode::SdFallback)) {
            mixed_slots.insert(r.slot);
        }
    }
    let mut best = 0;
    let mut run = 0;
    let mut prev: Option<u32> = None;
    for s in mixed_slots {
        run = if prev == Some(s.wrapping_sub(1)) { run + 1 } else { 1 };
        best = best.max(run);
        prev = Some(s);
    }
    best
}

fn join<T: ToString>(items: &[T], sep: &str) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(sep)
}

pub const TRACE_HEADER: [&str; 12] = [
    "slot", "uid", "mode", "x", "v", "a", "f", "sent", "received", "lost", "occupancy", "action",
];

pub fn write_trace_csv<W: Write>(trace: &SimTrace, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER)?;
    for r in &trace.records {
        w.write_record([
            r.slot.to_string(),
            r.uid.to_string(),
            r.mode.to_string(),
            format!("{:.6}", r.x),
            format!("{:.6}", r.v),
            format!("{:.6}", r.a),
            r.f.to_string(),
            join(&r.sent, ";"),
            join(&r.received, ";"),
            join(&r.lost, ";"),
            r.occupancy.map(|c| c.to_string()).unwrap_or_default(),
            join(&r.actions, "|"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub name: String,
    pub seed: u64,
    pub failure_threshold: u32,
    pub slots_run: u32,
    pub truncated: bool,
    pub all_done: bool,
    pub safety_violations: Vec<SafetyViolation>,
    pub longest_mixed_window: u32,
    pub vehicles: Vec<VehicleSummary>,
    pub stats: BTreeMap<Uid, CrossingStats>,
}

pub fn summarize(trace: &SimTrace) -> Summary {
    Summary {
        name: trace.name.clone(),
        seed: trace.seed,
        failure_threshold: trace.threshold,
        slots_run: trace.slots_run,
        truncated: trace.truncated,
        all_done: trace.vehicles.iter().all(|v| v.done_slot.is_some()),
        safety_violations: check_safety(trace),
        longest_mixed_window: longest_mixed_window(trace),
        vehicles: trace.vehicles.clone(),
        stats: crossing_stats(trace),
    }
}

/// Slot-by-slot message table for the negotiating phase of a trace.
pub fn diagram_table(trace: &SimTrace) -> String {
    let uids: Vec<Uid> = trace.vehicles.iter().map(|v| v.uid).collect();
    let mut rows: BTreeMap<u32, BTreeMap<Uid, &TraceRecord>> = BTreeMap::new();
    for r in &trace.records {
        rows.entry(r.slot).or_default().insert(r.uid, r);
    }
    // first agreement round only
    let first = trace.vehicles.iter().filter_map(|v| v.round_starts.first()).min().copied();
    let last = trace
        .vehicles
        .iter()
        .filter(|v| v.round_starts.first().copied() == first)
        .filter_map(|v| v.mainctrl_slots.iter().chain(v.fallback_slot.iter()).min())
        .max()
        .copied()
        .unwrap_or(0);
    let first = first.unwrap_or(0);
    let mut out = String::from("slot");
    for u in &uids {
        out.push_str(&format!(" | C{u:<30}"));
    }
    out.push('\n');
    for (slot, by_uid) in rows.range(first..=last.max(first)) {
        out.push_str(&format!("{slot:>4}"));
        for u in &uids {
            let cell = by_uid.get(u).map_or(String::new(), |r| {
                let sent: Vec<&str> = r.sent.iter().map(V2vMessage::type_name).collect();
                let mut s = format!("f={} ", r.f);
                if !sent.is_empty() {
                    s.push_str(&format!("tx:{} ", sent.join("+")));
                }
                if !r.lost.is_empty() {
                    s.push_str("LOST ");
                }
                if let Some(a) = r.actions.iter().find(|a| {
                    matches!(
                        a,
                        Action::SwitchToV2v | Action::InitiateMainCtrl | Action::SwitchToSd | Action::ReEnter
                    )
                }) {
                    s.push_str(&a.to_string());
                }
                s
            });
            out.push_str(&format!(" | {cell:<31}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(slot: u32, uid: u32, cell: Option<Cell>, mode: Mode, peers: &[u32]) -> TraceRecord {
        TraceRecord {
            slot,
            uid: Uid(uid),
            mode,
            x: 0.0,
            v: 0.0,
            a: 0.0,
            f: 0,
            sent: vec![],
            received: vec![],
            lost: vec![],
            occupancy: cell,
            actions: vec![],
            peers: peers.iter().map(|&p| Uid(p)).collect(),
        }
    }

    fn trace(records: Vec<TraceRecord>) -> SimTrace {
        SimTrace {
            name: String::new(),
            seed: 0,
            threshold: 2,
            slots_run: 0,
            truncated: false,
            records,
            vehicles: vec![],
        }
    }

    #[test]
    fn co_occupancy_is_reported() {
        let t = trace(vec![
            rec(7, 1, Some(Cell::S2), Mode::Crossing, &[]),
            rec(7, 2, Some(Cell::S2), Mode::Crossing, &[]),
            rec(8, 1, Some(Cell::S3), Mode::Crossing, &[]),
            rec(8, 2, Some(Cell::S2), Mode::Crossing, &[]),
        ]);
        assert_eq!(
            check_safety(&t),
            vec![SafetyViolation {
                slot: 7,
                cell: Cell::S2,
                first: Uid(1),
                second: Uid(2)
            }]
        );
    }

    #[test]
    fn single_vehicle_is_safe() {
        let t = trace(vec![rec(1, 1, Some(Cell::S1), Mode::Crossing, &[])]);
        assert!(check_safety(&t).is_empty());
    }

    #[test]
    fn empty_trace_is_vacuously_live() {
        assert!(check_liveness(&trace(vec![]), 10).is_empty());
    }

    #[test]
    fn mixed_window_counts_consecutive_slots() {
        let mut rs = Vec::new();
        for s in [3, 4, 5, 9] {
            rs.push(rec(s, 1, None, Mode::V2vEnter, &[2]));
            rs.push(rec(s, 2, None, Mode::SdFallback, &[]));
        }
        rs.push(rec(6, 1, None, Mode::V2vEnter, &[2]));
        rs.push(rec(6, 2, None, Mode::SdApproach, &[]));
        assert_eq!(longest_mixed_window(&trace(rs)), 3);
    }
}
