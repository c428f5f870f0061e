use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Cosine annealing without restarts: `lr0 · ½ · (1 + cos(π·e/E))`.
pub fn cosine_lr(epoch: usize, total: usize, lr0: f64) -> Result<f64> {
    if total == 0 || epoch > total {
        return Err(Error::Schedule(format!("epoch {epoch} outside [0, {total}]")));
    }
    if epoch == total {
        return Ok(0.0);
    }
    Ok(lr0 * 0.5 * (1.0 + (PI * epoch as f64 / total as f64).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SchedulerKind {
    Cosine,
    /// Step decay triggered when the epoch loss stops improving.
    PlateauSteps,
}

impl fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SchedulerKind::Cosine => "cosine",
            SchedulerKind::PlateauSteps => "steps",
        })
    }
}

impl FromStr for SchedulerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(SchedulerKind::Cosine),
            "steps" | "plateau" | "plateau_steps" => Ok(SchedulerKind::PlateauSteps),
            other => Err(Error::Config(format!("unknown scheduler {other:?} (cosine|steps)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScheduleEvents {
    pub lr_decayed: bool,
    pub margin_advanced: bool,
    pub resolution_bump: bool,
}

impl ScheduleEvents {
    pub fn any(&self) -> bool {
        self.lr_decayed || self.margin_advanced || self.resolution_bump
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlateauConfig {
    pub patience: usize,
    /// Relative improvement a loss must show to count as progress.
    pub threshold: f64,
    pub decay_factor: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            patience: 2,
            threshold: 1e-3,
            decay_factor: 0.1,
        }
    }
}

/// Learning-rate and margin state machine for one or more stages.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleState {
    pub kind: SchedulerKind,
    pub lr0: f64,
    pub lr: f64,
    pub epoch: usize,
    pub total_epochs: usize,
    pub best_loss: f64,
    pub epochs_since_improve: usize,
    pub plateau: PlateauConfig,
    pub margins: Vec<f64>,
    pub margin_index: usize,
    pub bump_resolution_on_first_decay: bool,
    pub decays: usize,
}

impl ScheduleState {
    pub fn new(
        kind: SchedulerKind,
        lr0: f64,
        total_epochs: usize,
        plateau: PlateauConfig,
        margins: Vec<f64>,
        bump_resolution_on_first_decay: bool,
    ) -> Result<Self> {
        if margins.is_empty() {
            return Err(Error::Config("margin schedule is empty".into()));
        }
        if !(lr0 >= 0.0) || total_epochs == 0 {
            return Err(Error::Config(format!(
                "schedule needs lr0 ≥ 0 and ≥ 1 epoch (lr0={lr0}, epochs={total_epochs})"
            )));
        }
        if !(plateau.decay_factor > 0.0 && plateau.decay_factor < 1.0) || plateau.patience == 0 {
            return Err(Error::Config(format!("invalid plateau settings {plateau:?}")));
        }
        Ok(Self {
            kind,
            lr0,
            lr: lr0,
            epoch: 0,
            total_epochs,
            best_loss: f64::INFINITY,
            epochs_since_improve: 0,
            plateau,
            margins,
            margin_index: 0,
            bump_resolution_on_first_decay,
            decays: 0,
        })
    }

    pub fn margin(&self) -> f64 {
        self.margins[self.margin_index]
    }

    /// Learning rate for the epoch about to run.
    pub fn current_lr(&self) -> Result<f64> {
        match self.kind {
            SchedulerKind::Cosine => cosine_lr(self.epoch, self.total_epochs, self.lr0),
            SchedulerKind::PlateauSteps => Ok(self.lr),
        }
    }

    /// Closes an epoch with its mean loss.
    pub fn end_epoch(&mut self, epoch_loss: f64) -> Result<ScheduleEvents> {
        let events = match self.kind {
            SchedulerKind::Cosine => {
                self.lr = cosine_lr((self.epoch + 1).min(self.total_epochs), self.total_epochs, self.lr0)?;
                ScheduleEvents::default()
            }
            SchedulerKind::PlateauSteps => plateau_step(epoch_loss, self)?,
        };
        self.epoch += 1;
        Ok(events)
    }
}

/// Plateau rule: a loss improves iff it is below `best·(1 − δ)`. After `patience`
/// consecutive non-improvements the lr is multiplied by the decay factor and the
/// margin advances one rung (capped at the last). At most one decay per call.
pub fn plateau_step(epoch_loss: f64, state: &mut ScheduleState) -> Result<ScheduleEvents> {
    if !epoch_loss.is_finite() {
        return Err(Error::Schedule(format!("non-finite epoch loss {epoch_loss}")));
    }
    let mut events = ScheduleEvents::default();
    if epoch_loss < state.best_loss * (1.0 - state.plateau.threshold) {
        state.best_loss = epoch_loss;
        state.epochs_since_improve = 0;
        return Ok(events);
    }
    state.epochs_since_improve += 1;
    if state.epochs_since_improve >= state.plateau.patience {
        state.lr *= state.plateau.decay_factor;
        events.lr_decayed = true;
        if state.margin_index + 1 < state.margins.len() {
            state.margin_index += 1;
            events.margin_advanced = true;
        }
        events.resolution_bump = state.bump_resolution_on_first_decay && state.decays == 0;
        state.decays += 1;
        state.epochs_since_improve = 0;
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn plateau(margins: Vec<f64>) -> ScheduleState {
        ScheduleState::new(SchedulerKind::PlateauSteps, 0.01, 10, PlateauConfig::default(), margins, true).unwrap()
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 10, 0.01).unwrap(), 0.01);
        assert_eq!(cosine_lr(10, 10, 0.01).unwrap(), 0.0);
        assert!((cosine_lr(5, 10, 0.01).unwrap() - 0.005).abs() < 1e-18);
        assert!(matches!(cosine_lr(11, 10, 0.01), Err(Error::Schedule(_))));
    }

    #[test]
    fn plateau_trace() {
        let mut st = plateau(vec![0.15, 0.25, 0.35]);
        let mut fired = Vec::new();
        for loss in [1.0, 0.9, 0.9, 0.9] {
            fired.push(plateau_step(loss, &mut st).unwrap());
        }
        assert!(fired[..3].iter().all(|e| !e.any()));
        assert!(fired[3].lr_decayed && fired[3].margin_advanced && fired[3].resolution_bump);
        assert!((st.lr - 0.001).abs() < 1e-18);
        assert_eq!(st.margin(), 0.25);
    }

    #[test]
    fn improving_losses_never_fire() {
        let mut st = plateau(vec![0.15, 0.25, 0.35]);
        for i in 0..50 {
            let e = plateau_step(1.0 / (1.0 + i as f64), &mut st).unwrap();
            assert!(!e.any());
        }
        assert_eq!(st.lr, 0.01);
    }

    #[test]
    fn margin_caps_at_last_rung() {
        let mut st = plateau(vec![0.15, 0.25, 0.35]);
        st.margin_index = 2;
        st.decays = 1;
        for l in [1.0, 1.0, 1.0] {
            plateau_step(l, &mut st).unwrap();
        }
        assert_eq!(st.margin(), 0.35);
        assert!((st.lr - 0.001).abs() < 1e-18);
    }

    #[test]
    fn resolution_bump_only_on_first_decay() {
        let mut st = plateau(vec![0.15]);
        let mut bumps = 0;
        for _ in 0..12 {
            bumps += plateau_step(1.0, &mut st).unwrap().resolution_bump as usize;
        }
        assert_eq!(bumps, 1);
        assert!(st.decays >= 2);
    }

    #[test]
    fn cosine_state_walks_the_curve() {
        let mut st =
            ScheduleState::new(SchedulerKind::Cosine, 0.01, 4, PlateauConfig::default(), vec![0.15], false).unwrap();
        let mut lrs = Vec::new();
        for _ in 0..4 {
            lrs.push(st.current_lr().unwrap());
            assert!(!st.end_epoch(1.0).unwrap().any());
        }
        assert_eq!(lrs[0], 0.01);
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(st.margin(), 0.15);
    }

    proptest! {
        #[test]
        fn cosine_nonincreasing(total in 1usize..200, lr0 in 1e-5f64..1.0) {
            let mut prev = f64::INFINITY;
            for e in 0..=total {
                let lr = cosine_lr(e, total, lr0).unwrap();
                prop_assert!(lr <= prev && lr >= 0.0 && lr <= lr0);
                prev = lr;
            }
        }

        #[test]
        fn plateau_invariants(losses in prop::collection::vec(0.1f64..2.0, 1..60)) {
            let mut st = plateau(vec![0.15, 0.25, 0.35]);
            for l in losses {
                let (lr, idx, decays) = (st.lr, st.margin_index, st.decays);
                let e = plateau_step(l, &mut st).unwrap();
                prop_assert!(st.lr <= lr);
                prop_assert!(st.margin_index >= idx);
                prop_assert!(st.decays - decays <= 1);
                prop_assert!(st.lr <= st.lr0);
                prop_assert_eq!(e.lr_decayed, st.decays > decays);
            }
        }
    }
}
