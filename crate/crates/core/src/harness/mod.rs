//! Scenario configuration, the simulation loop, reports, and the CLI.
