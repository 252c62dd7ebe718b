//! A simulator bundled with the per-episode spatial memory each agent
//! variant needs, producing policy inputs and auxiliary labels.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::policy::{ray_features, SpatialInput, StepInput, Variant, PREV_ACTION_NONE};
use crate::simulator::{Action, EpisodeSpec, SimConfig, SimState, Simulator, StepResult};
use crate::spatial::{make_aux_labels, to_egocentric, AuxLabels, EgoMode, NeuralMap, RevealedMask};
use crate::world::WorldMap;

#[derive(Debug, Clone)]
pub struct NavEnv {
    sim: Simulator,
    variant: Variant,
    revealed: RevealedMask,
    neural: Option<NeuralMap>,
    prev_action: Option<Action>,
}

/// Serializable episode memory, enough to rebuild a [`NavEnv`] exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSnapshot {
    pub spec: EpisodeSpec,
    pub state: SimState,
    pub revealed: RevealedMask,
    pub neural: Option<NeuralMap>,
    pub prev_action: Option<Action>,
}

impl NavEnv {
    pub fn new(map: Arc<WorldMap>, spec: EpisodeSpec, cfg: SimConfig, variant: Variant) -> Result<NavEnv> {
        let (sim, _) = Simulator::reset(Arc::clone(&map), spec, cfg)?;
        let mut env = NavEnv {
            revealed: RevealedMask::new(&map),
            neural: (variant == Variant::ProjNeural).then(|| NeuralMap::new(&map)),
            sim,
            variant,
            prev_action: None,
        };
        env.absorb_view();
        Ok(env)
    }

    pub fn restore(map: Arc<WorldMap>, snap: EnvSnapshot, cfg: SimConfig, variant: Variant) -> Result<NavEnv> {
        let sim = Simulator::restore(map, snap.spec, cfg, snap.state)?;
        Ok(NavEnv { sim, variant, revealed: snap.revealed, neural: snap.neural, prev_action: snap.prev_action })
    }

    pub fn snapshot(&self) -> EnvSnapshot {
        EnvSnapshot {
            spec: self.sim.spec().clone(),
            state: self.sim.state().clone(),
            revealed: self.revealed.clone(),
            neural: self.neural.clone(),
            prev_action: self.prev_action,
        }
    }

    fn absorb_view(&mut self) {
        let map = Arc::clone(self.sim.map());
        let pose = self.sim.state().pose;
        self.revealed.update(&map, self.sim.objects(), self.sim.rays(), &pose);
        if let Some(nm) = &mut self.neural {
            nm.write(&map, self.sim.rays(), &pose, self.sim.config().max_range);
        }
    }

    pub fn sim(&self) -> &Simulator {
        &self.sim
    }

    pub fn revealed(&self) -> &RevealedMask {
        &self.revealed
    }

    pub fn neural(&self) -> Option<&NeuralMap> {
        self.neural.as_ref()
    }

    pub fn done(&self) -> bool {
        self.sim.state().done
    }

    pub fn input(&self) -> StepInput {
        let map = self.sim.map();
        let pose = self.sim.state().pose;
        let spatial = match self.variant {
            Variant::NoMap => SpatialInput::None,
            Variant::ProjNeural => SpatialInput::Neural(self.neural.as_ref().map(|n| n.read_ego(map, &pose)).unwrap_or_default()),
            Variant::OracleMap => SpatialInput::Oracle(to_egocentric(map, self.sim.objects(), &self.revealed, &pose, EgoMode::OracleMap)),
            Variant::OracleEgoMap => SpatialInput::Oracle(to_egocentric(map, self.sim.objects(), &self.revealed, &pose, EgoMode::OracleEgoMap)),
        };
        let goal = self.sim.current_goal();
        StepInput {
            rays: ray_features(self.sim.rays(), self.sim.config().max_range),
            target_class: self.sim.spec().goals[goal].class_id,
            prev_action: self.prev_action.map_or(PREV_ACTION_NONE, Action::index),
            spatial,
        }
    }

    pub fn labels(&self) -> AuxLabels {
        let goal = self.sim.current_goal();
        make_aux_labels(self.sim.state(), goal, &self.sim.spec().goals[goal], self.sim.map().resolution())
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult> {
        let r = self.sim.step(action)?;
        self.prev_action = Some(action);
        self.absorb_view();
        Ok(r)
    }
}
