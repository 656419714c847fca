//! Scenarios shipped with the crate, embedded at build time.

use super::Scenario;

macro_rules! bundled {
    ($($name:literal),* $(,)?) => {
        pub const ALL: &[(&str, &str)] = &[
            $(($name, include_str!(concat!("../../scenarios/", $name, ".scenario")))),*
        ];
    };
}

bundled!(
    "three_cars_late_joiner",
    "burst_0_0",
    "burst_0_1",
    "burst_0_3",
    "burst_2_2",
    "single_car",
    "all_messages_lost",
    "four_way_harsh_channel",
);

/// The scripted two- or three-car runs whose message exchange is shown by
/// the `diagram` subcommand.
pub const DIAGRAMS: [&str; 4] = ["three_cars_late_joiner", "burst_0_1", "burst_0_3", "burst_2_2"];

pub fn load(name: &str) -> Option<Scenario> {
    ALL.iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| Scenario::from_json(text).expect("bundled scenario is valid"))
}
