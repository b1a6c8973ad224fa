//! Closed-loop simulation and experiment drivers.
