//! Toy-scale training on the grating task.

use std::fmt::Write as _;
use std::path::Path;

use a2mamba::model::{build_model, forward_classify, Model, ModelConfig};
use a2mamba::ops::cross_entropy;
use a2mamba::params::{Ctx, ParameterStore};
use a2mamba::rng::SeededRng;
use a2mamba::{Result, Tape, Tensor};

use crate::data::{GratingTask, Split};

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub steps: usize,
    pub seed: u64,
    pub batch: usize,
    pub lr: f64,
    pub eval_every: usize,
    /// Test images scored at each evaluation; the full split by default.
    pub eval_samples: usize,
    /// Ends the run at the first logged evaluation reaching this accuracy.
    pub stop_at_accuracy: Option<f64>,
}

impl TrainOptions {
    pub fn new(steps: usize, seed: u64) -> Self {
        TrainOptions {
            steps,
            seed,
            batch: 32,
            lr: 1e-3,
            eval_every: 100,
            eval_samples: Split::Test.len(),
            stop_at_accuracy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    /// Mean training loss since the previous row; at step 0, the loss of
    /// the first batch before any update.
    pub loss: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub rows: Vec<MetricsRow>,
    pub params: usize,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.rows[0].loss
    }

    pub fn final_accuracy(&self) -> f64 {
        self.rows.last().expect("at least one row").test_accuracy
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("step,loss,test_accuracy\n");
        for r in &self.rows {
            writeln!(s, "{},{:.6},{:.4}", r.step, r.loss, r.test_accuracy).unwrap();
        }
        s
    }
}

/// Adam with bias correction, no weight decay and a constant step size.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParameterStore, lr: f64) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect()
        };
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies the accumulated gradients and clears them.
    pub fn step(&mut self, store: &mut ParameterStore) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((_, p), (m, v)) in store
            .iter_mut()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let (pv, g) = (p.value.data_mut(), p.grad.data());
            for (((x, &g), m), v) in pv.iter_mut().zip(g).zip(m.data_mut()).zip(v.data_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *x -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        store.zero_grads();
    }
}

/// Share of the first `samples` test images classified correctly.
pub fn evaluate(model: &Model, task: &GratingTask, samples: usize) -> Result<f64> {
    const CHUNK: usize = 50;
    let mut correct = 0;
    for start in (0..samples).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(samples)).collect();
        let (x, labels) = task.batch(Split::Test, &idx);
        let logits = model.logits(&x)?;
        let k = logits.shape()[1];
        for (row, &label) in logits.data().chunks(k).zip(&labels) {
            let pred = (0..k).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            correct += usize::from(pred == label);
        }
    }
    Ok(correct as f64 / samples.max(1) as f64)
}

/// One forward/backward pass; returns the batch loss with gradients added
/// to the store.
fn train_step(model: &mut Model, x: Tensor, labels: &[usize], seed: u64) -> Result<f64> {
    let tape = Tape::new();
    let (loss, grads) = {
        let ctx = Ctx::train(&tape, &model.store, seed);
        let logits = forward_classify(&ctx, model, &tape.constant(x))?;
        let loss = cross_entropy(&logits, labels)?;
        let grads = tape.backward(&loss)?;
        (loss.value().item(), ctx.param_grads(&grads))
    };
    for (id, g) in grads {
        model.store.get_mut(id).grad.add_assign(&g);
    }
    Ok(loss)
}

/// Trains a fresh model from `cfg`. `progress` sees each row as it is logged.
pub fn train(
    cfg: &ModelConfig,
    opts: &TrainOptions,
    mut progress: impl FnMut(&MetricsRow),
) -> Result<(Model, TrainReport)> {
    let mut model = build_model(cfg, opts.seed)?;
    let task = GratingTask::new(opts.seed);
    let mut adam = Adam::new(&model.store, opts.lr);
    let mut order_rng = SeededRng::derive(opts.seed, 0x5eed);
    let mut order: Vec<usize> = Vec::new();
    let mut rows = Vec::new();
    let mut window = Vec::new();
    let mut log =
        |rows: &mut Vec<MetricsRow>, step: usize, loss: f64, model: &Model| -> Result<()> {
            let row = MetricsRow {
                step,
                loss,
                test_accuracy: evaluate(model, &task, opts.eval_samples)?,
            };
            progress(&row);
            rows.push(row);
            Ok(())
        };
    for step in 0..opts.steps {
        if order.len() < opts.batch {
            let mut epoch: Vec<usize> = (0..Split::Train.len()).collect();
            order_rng.shuffle(&mut epoch);
            order.extend(epoch);
        }
        let idx: Vec<usize> = order.drain(..opts.batch).collect();
        let (x, labels) = task.batch(Split::Train, &idx);
        let loss = train_step(&mut model, x, &labels, opts.seed.wrapping_add(step as u64))?;
        if step == 0 {
            // The first row reports the untrained model.
            log(&mut rows, 0, loss, &model)?;
        }
        adam.step(&mut model.store);
        window.push(loss);
        let done = step + 1;
        if done % opts.eval_every == 0 || done == opts.steps {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            window.clear();
            log(&mut rows, done, mean, &model)?;
            let reached = rows
                .last()
                .is_some_and(|r| opts.stop_at_accuracy.is_some_and(|t| r.test_accuracy >= t));
            if reached {
                break;
            }
        }
    }
    if rows.is_empty() {
        let idx: Vec<usize> = (0..opts.batch).collect();
        let (x, labels) = task.batch(Split::Train, &idx);
        let tape = Tape::no_grad();
        let ctx = Ctx::eval(&tape, &model.store);
        let loss = cross_entropy(&forward_classify(&ctx, &model, &tape.constant(x))?, &labels)?
            .value()
            .item();
        log(&mut rows, 0, loss, &model)?;
    }
    let params = model.store.count();
    Ok((model, TrainReport { rows, params }))
}

/// Writes `config.json`, `metrics.csv` and the `model` checkpoint into `dir`.
pub fn write_outputs(dir: &Path, model: &Model, report: &TrainReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.json"), model.config.to_json())?;
    std::fs::write(dir.join("metrics.csv"), report.csv())?;
    model.store.save(&dir.join("model"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParameterStore::new();
        let id = store
            .insert("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap())
            .unwrap();
        store.get_mut(id).grad = Tensor::new(vec![3], vec![4.0, -0.1, 0.0]).unwrap();
        let mut adam = Adam::new(&store, 0.01);
        adam.step(&mut store);
        let w = store.get(id).value.data().to_vec();
        assert!((w[0] - 0.99).abs() < 1e-9);
        assert!((w[1] + 1.99).abs() < 1e-9);
        assert_eq!(w[2], 0.5);
        assert!(store.get(id).grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParameterStore::new();
        let id = store
            .insert("w", Tensor::new(vec![2], vec![3.0, -4.0]).unwrap())
            .unwrap();
        let mut adam = Adam::new(&store, 0.1);
        for _ in 0..500 {
            let g = store.get(id).value.map(|v| 2.0 * v);
            store.get_mut(id).grad = g;
            adam.step(&mut store);
        }
        assert!(store.get(id).value.max_abs() < 1e-2);
    }

    #[test]
    fn early_stop_ends_at_the_first_qualifying_row() {
        let opts = TrainOptions {
            batch: 2,
            eval_every: 1,
            eval_samples: 10,
            stop_at_accuracy: Some(0.0),
            ..TrainOptions::new(50, 0)
        };
        let (_, report) = train(&ModelConfig::toy(), &opts, |_| {}).unwrap();
        assert_eq!(report.rows.last().unwrap().step, 1);
    }

    #[test]
    fn untrained_model_is_at_chance() {
        let opts = TrainOptions {
            eval_samples: 500,
            ..TrainOptions::new(0, 0)
        };
        let (_, report) = train(&ModelConfig::toy(), &opts, |_| {}).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert!(
            (report.initial_loss() - 10f64.ln()).abs() < 0.1,
            "{}",
            report.initial_loss()
        );
        assert!(
            (report.final_accuracy() - 0.1).abs() <= 0.05,
            "{}",
            report.final_accuracy()
        );
    }

    #[test]
    fn short_runs_are_deterministic_and_logged() {
        let opts = TrainOptions {
            batch: 4,
            eval_every: 2,
            eval_samples: 20,
            ..TrainOptions::new(3, 1)
        };
        let (a, ra) = train(&ModelConfig::toy(), &opts, |_| {}).unwrap();
        let (b, rb) = train(&ModelConfig::toy(), &opts, |_| {}).unwrap();
        assert_eq!(ra.csv(), rb.csv());
        assert_eq!(
            ra.rows.iter().map(|r| r.step).collect::<Vec<_>>(),
            vec![0, 2, 3]
        );
        for ((_, p), (_, q)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(p.value, q.value);
        }
        let dir = tempfile::tempdir().unwrap();
        write_outputs(dir.path(), &a, &ra).unwrap();
        let mut back = build_model(&ModelConfig::toy(), 99).unwrap();
        back.store.load(&dir.path().join("model")).unwrap();
        for ((_, p), (_, q)) in a.store.iter().zip(back.store.iter()) {
            assert_eq!(p.value, q.value);
        }
        let cfg = ModelConfig::load(&dir.path().join("config.json")).unwrap();
        assert_eq!(cfg, ModelConfig::toy());
    }
}
