//! Simulated-observation consistency experiments.
