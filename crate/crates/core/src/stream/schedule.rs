use crate::config::RunConfig;

/// Per-window learning-rate schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowSchedule {
    pub lr_init: f64,
    pub lr_decay: f64,
    pub lr_min: f64,
    pub max_epochs: usize,
}

impl WindowSchedule {
    pub fn from_config(cfg: &RunConfig) -> Self {
        WindowSchedule {
            lr_init: cfg.lr_init,
            lr_decay: cfg.lr_decay,
            lr_min: cfg.lr_min,
            max_epochs: cfg.max_epochs,
        }
    }

    /// Learning rate of 0-based `epoch` within a window.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_init * self.lr_decay.powi(epoch as i32)
    }

    /// `None` once the epoch budget is spent or the rate has decayed below the floor.
    pub fn next_lr(&self, epoch: usize) -> Option<f64> {
        let lr = self.lr_at(epoch);
        (epoch < self.max_epochs && lr >= self.lr_min * (1.0 - 1e-12)).then_some(lr)
    }
}

/// Patience-based early stopping on a score where higher is better.
#[derive(Clone, Debug)]
pub struct EarlyStopping<T> {
    patience: usize,
    best: Option<(usize, f64, T)>,
    since_best: usize,
}

impl<T: Clone> EarlyStopping<T> {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            since_best: 0,
        }
    }

    /// Records the score after `epoch`; returns true when training should stop.
    /// Only strict improvements reset the patience counter.
    pub fn observe(&mut self, epoch: usize, score: f64, snapshot: &T) -> bool {
        let improved = match &self.best {
            None => true,
            Some((_, best, _)) => score > *best,
        };
        if improved {
            self.best = Some((epoch, score, snapshot.clone()));
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.since_best >= self.patience
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.as_ref().map(|b| b.0)
    }

    pub fn best_score(&self) -> Option<f64> {
        self.best.as_ref().map(|b| b.1)
    }

    pub fn into_best(self) -> Option<T> {
        self.best.map(|b| b.2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stops_five_epochs_after_the_best() {
        let mut es = EarlyStopping::new(5);
        let scores = [0.1, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.9];
        let mut stopped_after = None;
        for (e, &s) in scores.iter().enumerate() {
            if es.observe(e + 1, s, &e) {
                stopped_after = Some(e + 1);
                break;
            }
        }
        assert_eq!(stopped_after, Some(7));
        assert_eq!(es.best_epoch(), Some(2));
        assert_eq!(es.into_best(), Some(1));
    }

    #[test]
    fn geometric_decay_and_floor() {
        let s = WindowSchedule::from_config(&RunConfig::default());
        assert_eq!(s.lr_at(0), 0.001);
        assert!((s.lr_at(3) - 0.001 * 0.95f64.powi(3)).abs() < 1e-18);
        let last = (0..).take_while(|&e| s.next_lr(e).is_some()).last().unwrap();
        assert!(s.lr_at(last) >= 1e-4 && s.lr_at(last + 1) < 1e-4);
        assert_eq!(last, 44);
    }
}
