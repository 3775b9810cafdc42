//! Reconstructed macaw-cub primitive set.
//!
//! Seven closed loops of 72 steps each, traced clockwise in the normalized
//! workspace with y pointing up. Shapes are re-drawn by hand, not measured.

use std::f64::consts::PI;

use super::primitives::{Primitive, PrimitiveSet, SAMPLING_MS};

pub const DEMO_STEPS: usize = 72;

struct Loop {
    label: &'static str,
    center: (f64, f64),
    radii: (f64, f64),
    /// Amplitude of a three-lobed radial modulation.
    lobes: f64,
    phase: f64,
}

const LOOPS: [Loop; 7] = [
    Loop { label: "Eye", center: (-0.02, 0.52), radii: (0.07, 0.07), lobes: 0.0, phase: PI / 2.0 },
    Loop { label: "Head", center: (-0.1, 0.45), radii: (0.28, 0.28), lobes: 0.0, phase: PI / 2.0 },
    Loop { label: "Beak", center: (-0.5, 0.35), radii: (0.15, 0.15), lobes: 0.18, phase: PI },
    Loop { label: "Neck", center: (0.0, 0.05), radii: (0.18, 0.12), lobes: 0.0, phase: PI / 2.0 },
    Loop { label: "Rwing", center: (0.5, -0.25), radii: (0.15, 0.35), lobes: 0.0, phase: PI / 2.0 },
    Loop { label: "Belly", center: (0.05, -0.45), radii: (0.3, 0.3), lobes: 0.0, phase: 0.0 },
    Loop { label: "Lwing", center: (-0.4, -0.3), radii: (0.15, 0.33), lobes: 0.0, phase: PI / 2.0 },
];

fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

fn trace(l: &Loop, steps: usize) -> Vec<[f64; 2]> {
    (0..steps)
        .map(|t| {
            let theta = l.phase - 2.0 * PI * t as f64 / steps as f64;
            let m = 1.0 + l.lobes * (3.0 * (theta - l.phase)).cos();
            [
                round4(l.center.0 + l.radii.0 * m * theta.cos()),
                round4(l.center.1 + l.radii.1 * m * theta.sin()),
            ]
        })
        .collect()
}

pub fn macaw_primitives() -> PrimitiveSet {
    PrimitiveSet {
        primitives: LOOPS
            .iter()
            .map(|l| Primitive {
                label: l.label.to_string(),
                rows: trace(l, DEMO_STEPS),
                sampling_ms: SAMPLING_MS,
            })
            .collect(),
    }
}
