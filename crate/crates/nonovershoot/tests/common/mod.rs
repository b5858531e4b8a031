#![allow(dead_code)]

use std::path::{Path, PathBuf};

use nonovershoot::scenario::Scenario;

pub fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("..")
        .join("..")
        .join("scenarios")
        .join(name)
}

pub fn load_scenario(name: &str) -> Scenario {
    Scenario::from_file(&scenario_path(name))
        .unwrap_or_else(|e| panic!("loading {name}: {e}"))
}

/// Deterministic 64-bit LCG so oracle tests sample the same states on every
/// run.
pub struct Lcg(u64);

impl Lcg {
    pub fn new(seed: u64) -> Self {
        Self(seed | 1)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self
            .0
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        self.0
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u = (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        lo + (hi - lo) * u
    }
}
