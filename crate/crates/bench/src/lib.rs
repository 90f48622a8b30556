//! Shared fixture for the pipeline benchmarks.

use nalgebra::DVector;
use rnddpc::control::ControllerKind;
use rnddpc::harness::{prepare, Artifacts, RunConfig};
use rnddpc::platoon::{desired_state, PlatoonConfig};

pub struct Fixture {
    pub cfg: RunConfig,
    pub plant: PlatoonConfig,
    pub art: Artifacts,
    /// `(x, ε)` pairs from the excitation run.
    pub states: Vec<(DVector<f64>, f64)>,
}

impl Fixture {
    /// Offline pipeline with a shortened training budget.
    pub fn new(n: usize, epochs: usize) -> Self {
        let mut cfg = RunConfig::default();
        cfg.platoon.n = n;
        cfg.train.epochs = epochs;
        let (log, _, art, _) = prepare(&cfg).expect("offline pipeline");
        let stride = (log.transitions() / 64).max(1);
        let states = (0..log.transitions())
            .step_by(stride)
            .map(|k| (log.x.column(k).into_owned(), log.eps[k]))
            .collect();
        let plant = cfg.platoon.to_config();
        Self { cfg, plant, art, states }
    }

    pub fn reference(&self, eps: f64) -> DVector<f64> {
        desired_state(eps, &self.plant).expect("reference")
    }

    pub fn controller_config(&self, kind: ControllerKind) -> rnddpc::control::ControllerConfig {
        self.cfg.controller_config(kind).expect("controller config")
    }
}
