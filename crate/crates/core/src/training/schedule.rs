use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Group, Role};

/// One of the three optimization steps run in every iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Step {
    /// Photometric training of the monocular auxiliary path.
    Mono,
    /// Binocular path trained against the monocular teacher.
    Stereo,
    /// Distillation of the hybrid volume into the final monocular branch.
    Distill,
}

impl Step {
    pub const ALL: [Step; 3] = [Step::Mono, Step::Stereo, Step::Distill];

    /// 1, 2 or 3.
    pub fn id(self) -> u8 {
        match self {
            Step::Mono => 1,
            Step::Stereo => 2,
            Step::Distill => 3,
        }
    }

    pub fn index(self) -> usize {
        self.id() as usize - 1
    }

    /// Parameter groups the step's optimizer may change; every other group is frozen.
    pub fn groups(self) -> &'static [Group] {
        match self {
            Step::Mono => &[Group::Encoder, Group::AggBlocks, Group::DecoderBlock, Group::OutMono],
            Step::Stereo => &[
                Group::AggBlocks,
                Group::DecoderBlock,
                Group::Mfm,
                Group::OutMono,
                Group::OutStereo,
            ],
            Step::Distill => &[Group::AggBlocks, Group::DecoderBlock, Group::OutMono],
        }
    }

    pub fn updates(self, role: Role) -> bool {
        self.groups().contains(&role.group())
    }

    /// Whether the step's loss can reach parameters of `role` at all: the steps route through
    /// one aggregation branch each, and the stereo step never touches the monocular head.
    pub fn reaches(self, role: Role) -> bool {
        let on_path = match self {
            Step::Mono => !matches!(role, Role::AggFinal),
            Step::Stereo => !matches!(role, Role::AggFinal | Role::OutMono),
            Step::Distill => !matches!(role, Role::AggAuxiliary),
        };
        on_path && self.updates(role)
    }

    /// Parameters already optimized by an earlier step are revisited at a reduced rate.
    pub fn revisits(self, role: Role) -> bool {
        Step::ALL.iter().any(|&s| s < self && s.reaches(role))
    }
}

/// Epoch gates and learning-rate policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSchedule {
    pub e1: usize,
    pub e2: usize,
    pub total_epochs: usize,
    pub lr_base: f64,
    pub lr_halving_epochs: Vec<usize>,
    pub revisit_factor: f64,
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self {
            e1: 20,
            e2: 30,
            total_epochs: 50,
            lr_base: 1e-4,
            lr_halving_epochs: vec![20, 30, 40, 45],
            revisit_factor: 0.1,
        }
    }
}

impl StageSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.e1 <= self.e2 && self.e2 <= self.total_epochs) {
            return Err(Error::Config(format!(
                "need e1 <= e2 <= total_epochs, got {} / {} / {}",
                self.e1, self.e2, self.total_epochs
            )));
        }
        if !(self.lr_base.is_finite() && self.lr_base > 0.0) {
            return Err(Error::Config("lr_base must be positive".into()));
        }
        if !(self.revisit_factor.is_finite() && self.revisit_factor >= 0.0) {
            return Err(Error::Config("revisit_factor must be non-negative".into()));
        }
        Ok(())
    }

    /// First epoch at which `step` runs.
    pub fn enabled_at(&self, step: Step) -> usize {
        match step {
            Step::Mono => 0,
            Step::Stereo => self.e1,
            Step::Distill => self.e2,
        }
    }

    pub fn active_steps(&self, epoch: usize) -> Vec<Step> {
        Step::ALL.into_iter().filter(|&s| epoch >= self.enabled_at(s)).collect()
    }

    /// Base rate of the step's optimizer: `lr_base` from the enabling epoch, halved at every
    /// halving epoch after it. `None` while the step is inactive.
    pub fn learning_rate(&self, epoch: usize, step: Step) -> Option<f64> {
        let start = self.enabled_at(step);
        if epoch < start {
            return None;
        }
        let halvings = self
            .lr_halving_epochs
            .iter()
            .filter(|&&m| m > start && m <= epoch)
            .count();
        Some(self.lr_base * 0.5f64.powi(halvings as i32))
    }

    /// Rate for one parameter role within a step; zero for frozen roles and inactive steps.
    pub fn role_learning_rate(&self, epoch: usize, step: Step, role: Role) -> f64 {
        match self.learning_rate(epoch, step) {
            Some(lr) if step.updates(role) => {
                if step.revisits(role) {
                    lr * self.revisit_factor
                } else {
                    lr
                }
            }
            _ => 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gates() {
        let s = StageSchedule::default();
        assert_eq!(s.active_steps(0), vec![Step::Mono]);
        assert_eq!(s.active_steps(19), vec![Step::Mono]);
        assert_eq!(s.active_steps(20), vec![Step::Mono, Step::Stereo]);
        assert_eq!(s.active_steps(30), Step::ALL.to_vec());
        assert_eq!(s.active_steps(49), Step::ALL.to_vec());
    }

    #[test]
    fn rates() {
        let s = StageSchedule::default();
        assert_eq!(s.learning_rate(0, Step::Mono), Some(1e-4));
        assert_eq!(s.learning_rate(19, Step::Mono), Some(1e-4));
        assert_eq!(s.learning_rate(20, Step::Mono), Some(5e-5));
        assert_eq!(s.learning_rate(45, Step::Mono), Some(6.25e-6));
        assert_eq!(s.learning_rate(0, Step::Stereo), None);
        assert_eq!(s.learning_rate(20, Step::Stereo), Some(1e-4));
        assert_eq!(s.learning_rate(30, Step::Stereo), Some(5e-5));
        assert_eq!(s.learning_rate(30, Step::Distill), Some(1e-4));
        assert_eq!(s.learning_rate(40, Step::Distill), Some(5e-5));
        assert_eq!(s.role_learning_rate(20, Step::Stereo, Role::OutMono), 1e-4 * 0.1);
        assert_eq!(s.role_learning_rate(20, Step::Stereo, Role::Mfm), 1e-4);
        assert_eq!(s.role_learning_rate(20, Step::Stereo, Role::Encoder), 0.0);
        assert_eq!(s.role_learning_rate(30, Step::Distill, Role::AggFinal), 1e-4);
        assert_eq!(s.role_learning_rate(30, Step::Distill, Role::DecoderBlock), 1e-4 * 0.1);
        assert_eq!(s.role_learning_rate(30, Step::Distill, Role::Mfm), 0.0);
    }

    #[test]
    fn frozen_groups() {
        let frozen = |s: Step| -> Vec<Group> {
            Group::ALL.into_iter().filter(|g| !s.groups().contains(g)).collect()
        };
        assert_eq!(frozen(Step::Mono), vec![Group::Mfm, Group::OutStereo]);
        assert_eq!(frozen(Step::Stereo), vec![Group::Encoder]);
        assert_eq!(frozen(Step::Distill), vec![Group::Encoder, Group::Mfm, Group::OutStereo]);
    }

    #[test]
    fn ordering_is_validated() {
        let s = StageSchedule { e1: 10, e2: 5, ..Default::default() };
        assert!(s.validate().is_err());
        StageSchedule::default().validate().unwrap();
    }
}
