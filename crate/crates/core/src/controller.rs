use crate::camrender::CameraFrame;
use crate::expert::{expert_policy, ExpertConfig, ExpertMemory};
use crate::simworld::{SpeedCommand, WorldState};

/// What a controller may look at on one tick. Learned policies only read the
/// frames; the expert reads the ground-truth state.
pub struct Observation<'a> {
    pub state: &'a WorldState,
    pub top: &'a CameraFrame,
    pub bottom: &'a CameraFrame,
}

/// Anything that drives the robot: the expert or a trained policy.
pub trait Controller {
    /// Called at the start of every episode.
    fn reset(&mut self);
    fn act(&mut self, obs: &Observation) -> SpeedCommand;
    /// Diagnostic label recorded with the last action.
    fn label(&self) -> u8 {
        0
    }
    fn name(&self) -> String;
}

/// The scripted demonstrator as a [`Controller`].
#[derive(Clone, Debug, Default)]
pub struct Expert {
    pub config: ExpertConfig,
    memory: ExpertMemory,
}

impl Expert {
    pub fn new(config: ExpertConfig) -> Self {
        Self {
            config,
            memory: ExpertMemory::default(),
        }
    }

    pub fn memory(&self) -> &ExpertMemory {
        &self.memory
    }
}

impl Controller for Expert {
    fn reset(&mut self) {
        self.memory = ExpertMemory::default();
    }

    fn act(&mut self, obs: &Observation) -> SpeedCommand {
        let (cmd, mem) = expert_policy(obs.state, &self.memory, &self.config);
        self.memory = mem;
        cmd
    }

    fn label(&self) -> u8 {
        self.memory.fsm_state as u8
    }

    fn name(&self) -> String {
        "expert".into()
    }
}

/// Always outputs the same command.
#[derive(Clone, Copy, Debug)]
pub struct Constant(pub SpeedCommand);

impl Controller for Constant {
    fn reset(&mut self) {}

    fn act(&mut self, _obs: &Observation) -> SpeedCommand {
        self.0
    }

    fn name(&self) -> String {
        "constant".into()
    }
}
