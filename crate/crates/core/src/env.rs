//! The decision-level interface an agent sees: a discrete action set with
//! dynamic frame skipping, terminal outcomes, and an episode runner.
//!
//! Time advances in two layers. The simulation ticks at a fixed rate; the
//! agent acts at *decision points*. A wait action skips a chosen number of
//! ticks before the next decision, so the agent also learns how long to wait,
//! not just whether to go.

use crate::grid::Grid;

/// Agent actions. `Go` irrevocably commits to crossing; the wait variants
/// hold position for 1, 2, 4, or 8 ticks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    Go,
    Wait1,
    Wait2,
    Wait4,
    Wait8,
}

impl Action {
    pub const COUNT: usize = 5;
    pub const ALL: [Action; 5] =
        [Action::Go, Action::Wait1, Action::Wait2, Action::Wait4, Action::Wait8];

    /// Stable index used by the Q-network output layer.
    pub fn index(self) -> usize {
        match self {
            Action::Go => 0,
            Action::Wait1 => 1,
            Action::Wait2 => 2,
            Action::Wait4 => 3,
            Action::Wait8 => 4,
        }
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }

    /// Ticks skipped before the next decision; `None` for `Go`.
    pub fn wait_ticks(self) -> Option<u32> {
        match self {
            Action::Go => None,
            Action::Wait1 => Some(1),
            Action::Wait2 => Some(2),
            Action::Wait4 => Some(4),
            Action::Wait8 => Some(8),
        }
    }
}

/// How an episode ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Outcome {
    /// The ego crossed the conflict zone (or finished its path) untouched.
    Success,
    /// The ego footprint overlapped a traffic vehicle.
    Collision,
    /// The tick budget ran out before a crossing was attempted or finished.
    Timeout,
}

/// Reward for one decision: +1 on success, -1 on collision, and a small
/// constant cost otherwise (including the decision that times out).
pub fn decision_reward(outcome: Option<Outcome>) -> f32 {
    match outcome {
        Some(Outcome::Success) => 1.0,
        Some(Outcome::Collision) => -1.0,
        _ => -0.01,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepResult {
    pub reward: f32,
    pub outcome: Option<Outcome>,
}

/// Anything an agent can be trained on: the simulator and the recorded-data
/// replayer both implement this.
///
/// Contract: `reset` starts a fresh episode; `act` may only be called while
/// `outcome()` is `None` and panics otherwise (acting in a terminal state is
/// a caller bug, not a recoverable condition).
pub trait Environment {
    fn reset(&mut self, seed: u64);
    /// Ego-centric occupancy grid of the current scene.
    fn observe(&self) -> Grid;
    fn act(&mut self, action: Action) -> StepResult;
    fn outcome(&self) -> Option<Outcome>;
}

/// One decision point: the state seen, the action taken, the reward received.
#[derive(Clone, Debug)]
pub struct Decision {
    pub state: Grid,
    pub action: Action,
    pub reward: f32,
}

#[derive(Clone, Debug)]
pub struct Episode {
    pub decisions: Vec<Decision>,
    pub outcome: Outcome,
}

/// Runs one episode to termination under `policy`.
pub fn run_episode<E: Environment + ?Sized>(
    env: &mut E,
    seed: u64,
    mut policy: impl FnMut(&Grid) -> Action,
) -> Episode {
    env.reset(seed);
    let mut decisions = Vec::new();
    loop {
        let state = env.observe();
        let action = policy(&state);
        let step = env.act(action);
        decisions.push(Decision { state, action, reward: step.reward });
        if let Some(outcome) = step.outcome {
            return Episode { decisions, outcome };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn action_indices_are_stable() {
        for (i, a) in Action::ALL.iter().enumerate() {
            assert_eq!(a.index(), i);
            assert_eq!(Action::from_index(i), Some(*a));
        }
        assert_eq!(Action::from_index(5), None);
        assert_eq!(Action::Wait8.wait_ticks(), Some(8));
        assert_eq!(Action::Go.wait_ticks(), None);
    }

    #[test]
    fn rewards_by_outcome() {
        assert_eq!(decision_reward(Some(Outcome::Success)), 1.0);
        assert_eq!(decision_reward(Some(Outcome::Collision)), -1.0);
        assert_eq!(decision_reward(Some(Outcome::Timeout)), -0.01);
        assert_eq!(decision_reward(None), -0.01);
    }
}
