use proptest::prelude::*;
use vocseg_core::objective_metrics::MetricSummary;
use vocseg_core::train_engine::{cosine_lr, fit, EarlyStopping, EpochRunner, Scheduler, TrainConfig};
use vocseg_core::Result;

/// Replays a fixed validation-loss sequence; the snapshot is the epoch.
struct Replay {
    losses: Vec<f64>,
    epoch: usize,
}

impl EpochRunner for Replay {
    type Snapshot = usize;

    fn train_epoch(&mut self, epoch: usize, _lr: f64) -> Result<MetricSummary> {
        self.epoch = epoch;
        Ok(MetricSummary { loss: 1.0, pixel_accuracy: 0.5, mean_iou: 0.1 })
    }

    fn validate(&mut self) -> Result<MetricSummary> {
        Ok(MetricSummary { loss: self.losses[self.epoch - 1], pixel_accuracy: 0.5, mean_iou: 0.1 })
    }

    fn snapshot(&self) -> usize {
        self.epoch
    }
}

#[test]
fn cosine_endpoints_and_midpoint() {
    for t_max in [30, 40, 50] {
        assert!((cosine_lr(0, t_max, 0.005, 0.0) - 0.005).abs() < 1e-12);
        assert!(cosine_lr(t_max, t_max, 0.005, 0.0).abs() < 1e-12);
        assert!((cosine_lr(t_max / 2, t_max, 0.005, 0.0) - 0.0025).abs() < 1e-12);
    }
}

#[test]
fn constant_rate_without_scheduler() {
    let c = TrainConfig::default();
    assert_eq!(c.scheduler, Scheduler::None);
    assert!((0..60).all(|e| c.lr_at(e) == 0.005));
}

proptest! {
    #[test]
    fn cosine_never_increases(t_max in 1usize..200, lr_max in 1e-5f64..1.0, frac in 0.0f64..1.0) {
        let lr_min = lr_max * frac;
        for t in 0..t_max {
            prop_assert!(cosine_lr(t + 1, t_max, lr_max, lr_min) <= cosine_lr(t, t_max, lr_max, lr_min));
        }
    }

    #[test]
    fn stop_comes_patience_epochs_after_best(
        losses in prop::collection::vec(0.0f64..10.0, 1..60),
        patience in 1usize..8,
    ) {
        let mut stopper = EarlyStopping::new(patience);
        for (i, &l) in losses.iter().enumerate() {
            let d = stopper.observe(i + 1, l);
            prop_assert!(stopper.epochs_since_improvement <= patience);
            if d.stop {
                prop_assert_eq!(i + 1 - stopper.best_epoch, patience);
                break;
            }
        }
    }

    #[test]
    fn fit_keeps_the_best_snapshot(losses in prop::collection::vec(0.0f64..10.0, 1..40)) {
        let config = TrainConfig { epochs_max: losses.len(), ..TrainConfig::default() };
        let mut runner = Replay { losses: losses.clone(), epoch: 0 };
        let mut seen = Vec::new();
        let out = fit(&config, &mut runner, |r| { seen.push(r.epoch); Ok(()) }).unwrap();
        prop_assert_eq!(out.best, out.best_epoch);
        prop_assert!(seen.windows(2).all(|w| w[0] < w[1]));
        let best = losses[..out.stop_epoch].iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert_eq!(losses[out.best_epoch - 1], best);
        prop_assert_eq!(losses[..out.best_epoch - 1].iter().position(|&l| l == best), None);
        if out.stopped_early {
            prop_assert_eq!(out.stop_epoch - out.best_epoch, 5);
        }
    }
}
