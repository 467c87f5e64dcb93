//! An intersection-handling laboratory: a micro traffic simulator, a
//! from-scratch deep Q-network, and transfer experiments between tasks.

pub mod checkpoint;
pub mod config;
pub mod env;
pub mod geom;
pub mod grid;
pub mod net;
pub mod recording;
pub mod rl;
pub mod rmsprop;
pub mod scenario;
pub mod sim;
pub mod stats;
pub mod transfer;

/// Compiles and runs every code block in the guide as a doctest, so the
/// book cannot drift from the library.
#[cfg(doctest)]
mod guide {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            #[allow(dead_code)]
            struct $name;
        };
    }

    chapter!(Introduction, "../../../book/src/introduction.md");
    chapter!(Scenarios, "../../../book/src/scenarios.md");
    chapter!(Simulator, "../../../book/src/simulator.md");
    chapter!(Observation, "../../../book/src/observation.md");
    chapter!(Network, "../../../book/src/network.md");
    chapter!(Training, "../../../book/src/training.md");
    chapter!(Transfer, "../../../book/src/transfer.md");
    chapter!(Recordings, "../../../book/src/recordings.md");
    chapter!(Interface, "../../../book/src/interface.md");
}
