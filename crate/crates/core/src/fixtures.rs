//! Bundled scenario files, embedded so tests and the CLI can use them
//! without locating the source tree.

pub const STATION_NAV_TCL: &str = include_str!("../fixtures/station_nav.tcl");
pub const STATION_NAV_SCENARIO: &str = include_str!("../fixtures/station_nav.scenario.json");
pub const CODEC_VECTORS: &str = include_str!("../fixtures/codec_vectors.json");
pub const BROKEN_TCL: &str = include_str!("../fixtures/broken.tcl");

/// Round-trip corpus: `(file name, source)`.
pub const CORPUS: &[(&str, &str)] = &[
    ("empty.tcl", include_str!("../fixtures/corpus/empty.tcl")),
    ("events.tcl", include_str!("../fixtures/corpus/events.tcl")),
    ("minimal.tcl", include_str!("../fixtures/corpus/minimal.tcl")),
    ("station_nav.tcl", include_str!("../fixtures/corpus/station_nav.tcl")),
    ("zoned.tcl", include_str!("../fixtures/corpus/zoned.tcl")),
];
