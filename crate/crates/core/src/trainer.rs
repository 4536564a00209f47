//! Training loop: pool consecutive-frame pairs from normal trajectories,
//! shuffle them every epoch, and take one Adam step per full batch.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::Trajectory;
use crate::model::{frames_to_tensor, EmbeddingModel};
use crate::tensor::{AdamState, Tensor};
use crate::triplet::batch_triplet_loss;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub margin: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            margin: 0.2,
            learning_rate: 0.0005,
            epochs: 12,
            embed_dim: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size < 2 {
            return fail(format!("batch size {} < 2", self.batch_size));
        }
        if !(self.margin > 0.0) {
            return fail(format!("margin {} must be > 0", self.margin));
        }
        if !(self.learning_rate > 0.0) {
            return fail(format!("learning rate {} must be > 0", self.learning_rate));
        }
        if self.epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        if self.embed_dim == 0 {
            return fail("embed_dim must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epoch_mean_loss: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
}

impl TrainLog {
    pub fn step_losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    /// CSV with columns `step,epoch,loss`.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "step,epoch,loss")?;
        for s in &self.steps {
            writeln!(out, "{},{},{}", s.step, s.epoch, s.loss)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }
}

/// `(frame_t, frame_{t+1})` for `t = 0..T-1`.
pub fn make_pairs(trajectory: &Trajectory) -> Result<Vec<(&[u8], &[u8])>> {
    if trajectory.len() < 2 {
        return Err(Error::EmptyTrajectory {
            id: trajectory.id.clone(),
            len: trajectory.len(),
        });
    }
    Ok(trajectory
        .frames
        .windows(2)
        .map(|w| (w[0].as_slice(), w[1].as_slice()))
        .collect())
}

/// Position of a pair within a pooled corpus: frames `t` and `t + 1` of
/// trajectory number `trajectory`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairRef {
    pub trajectory: usize,
    pub t: usize,
}

/// Every within-trajectory pair of the corpus, in order.
pub fn pair_index(trajectories: &[Trajectory]) -> Result<Vec<PairRef>> {
    let mut refs = Vec::new();
    for (i, traj) in trajectories.iter().enumerate() {
        let n = make_pairs(traj)?.len();
        refs.extend((0..n).map(|t| PairRef { trajectory: i, t }));
    }
    Ok(refs)
}

pub fn steps_per_epoch(pairs: usize, batch_size: usize) -> usize {
    pairs / batch_size
}

/// Train `model` on the trajectories yielded by `collector`, which must all be
/// normal play. Deterministic given the trajectories, config and initial
/// model.
pub fn train<I>(
    collector: I,
    config: &TrainConfig,
    mut model: EmbeddingModel<f32>,
) -> Result<(EmbeddingModel<f32>, TrainLog)>
where
    I: IntoIterator<Item = Trajectory>,
{
    config.validate()?;
    if model.config().embed_dim != config.embed_dim {
        return Err(Error::InvalidConfig(format!(
            "model embeds to {} dimensions, training config says {}",
            model.config().embed_dim,
            config.embed_dim
        )));
    }
    let trajectories: Vec<Trajectory> = collector.into_iter().collect();
    let mut order = pair_index(&trajectories)?;
    let n = config.batch_size;
    if order.len() < n {
        return Err(Error::InvalidInput(format!(
            "{} pairs cannot fill a batch of {n}",
            order.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(model.params());
    let mut log = TrainLog::default();
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for batch in order.chunks_exact(n) {
            let frames: Vec<&[u8]> = batch
                .iter()
                .map(|p| trajectories[p.trajectory].frame(p.t))
                .chain(batch.iter().map(|p| trajectories[p.trajectory].frame(p.t + 1)))
                .collect();
            let input = frames_to_tensor::<f32>(&frames, model.config())?;
            let (embedded, cache) = model.forward(&input)?;
            let d = config.embed_dim;
            let (head, tail) = embedded.data().split_at(n * d);
            let anchors = Tensor::new(vec![n, d], head.to_vec())?;
            let positives = Tensor::new(vec![n, d], tail.to_vec())?;
            let out = batch_triplet_loss(&anchors, &positives, config.margin)?;
            if !out.loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    step: step as u64,
                    reason: format!("loss is {}", out.loss),
                });
            }
            let mut grad = out.grad_anchors.into_data();
            grad.extend_from_slice(out.grad_positives.data());
            let grads = model.backward_params(&cache, &Tensor::new(vec![2 * n, d], grad)?)?;
            adam.step(model.params_mut(), &grads, config.learning_rate)
                .map_err(|e| match e {
                    Error::TrainingDiverged { reason, .. } => Error::TrainingDiverged {
                        step: step as u64,
                        reason,
                    },
                    other => other,
                })?;
            log.steps.push(StepRecord {
                step,
                epoch,
                loss: out.loss,
            });
            epoch_total += out.loss;
            step += 1;
        }
        let steps = steps_per_epoch(order.len(), n);
        let mean = epoch_total / steps as f64;
        log.epoch_mean_loss.push(mean);
        log.epoch_seconds.push(started.elapsed().as_secs_f64());
        log::info!(
            "epoch {}/{}: mean loss {mean:.4} over {steps} steps ({:.1}s)",
            epoch + 1,
            config.epochs,
            log.epoch_seconds[epoch]
        );
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{simulate, GameConfig};
    use crate::model::ModelConfig;

    fn tiny_game(seed: u64, frames: usize) -> Trajectory {
        let config = GameConfig {
            height: 16,
            width: 16,
            ball_radius: 1,
            ball_speed: 1.5,
            paddle_width: 4,
            paddle_speed: 1.0,
            seed,
        };
        simulate(&config, frames).unwrap()
    }

    fn tiny_model(seed: u64) -> EmbeddingModel<f32> {
        let mut c = ModelConfig::for_frames(16, 16, 4);
        c.channels = [4, 4, 8];
        EmbeddingModel::init(c, seed).unwrap()
    }

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            epochs: 2,
            embed_dim: 4,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn pairs_follow_frame_order() {
        let traj = tiny_game(0, 5);
        let pairs = make_pairs(&traj).unwrap();
        assert_eq!(pairs.len(), 4);
        assert_eq!(pairs[2], (traj.frame(2), traj.frame(3)));
        assert_eq!(make_pairs(&tiny_game(0, 2)).unwrap().len(), 1);

        let mut short = tiny_game(0, 2);
        short.frames.pop();
        assert!(matches!(make_pairs(&short), Err(Error::EmptyTrajectory { .. })));
    }

    #[test]
    fn pooled_pairs_stay_within_trajectories() {
        let corpus = vec![tiny_game(1, 10), tiny_game(2, 20)];
        let refs = pair_index(&corpus).unwrap();
        assert_eq!(refs.len(), 28);
        for r in &refs {
            assert!(r.t + 1 < corpus[r.trajectory].len());
        }
        assert_eq!(refs.iter().filter(|r| r.trajectory == 0).count(), 9);
    }

    #[test]
    fn steps_per_epoch_is_floor() {
        assert_eq!(steps_per_epoch(257, 128), 2);
        for pairs in [2usize, 7, 100, 128, 129, 255, 256, 1000] {
            for n in [2usize, 3, 16, 128] {
                assert_eq!(steps_per_epoch(pairs, n), pairs / n);
            }
        }
    }

    #[test]
    fn batching_drops_the_remainder() {
        // 3 trajectories of 12 frames: 33 pairs, batches of 16 -> 2 steps
        let corpus: Vec<_> = (0..3).map(|s| tiny_game(s, 12)).collect();
        let (_, log) = train(corpus, &tiny_train_config(), tiny_model(0)).unwrap();
        assert_eq!(log.steps.len(), 4);
        assert_eq!(log.epoch_mean_loss.len(), 2);
        assert!(log.steps.iter().all(|s| s.loss.is_finite() && s.loss >= 0.0));
    }

    #[test]
    fn training_is_deterministic() {
        let corpus: Vec<_> = (0..2).map(|s| tiny_game(s, 40)).collect();
        let (m1, l1) = train(corpus.clone(), &tiny_train_config(), tiny_model(3)).unwrap();
        let (m2, l2) = train(corpus, &tiny_train_config(), tiny_model(3)).unwrap();
        let bits = |l: &TrainLog| l.steps.iter().map(|s| s.loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&l1), bits(&l2));
        assert_eq!(m1, m2);
        assert_ne!(m1, tiny_model(3));
    }

    #[test]
    fn rejects_invalid_configs() {
        let corpus = vec![tiny_game(0, 40)];
        let mut c = tiny_train_config();
        c.batch_size = 1;
        assert!(train(corpus.clone(), &c, tiny_model(0)).is_err());
        let mut c = tiny_train_config();
        c.embed_dim = 8;
        assert!(train(corpus.clone(), &c, tiny_model(0)).is_err());
        let mut c = tiny_train_config();
        c.batch_size = 64;
        assert!(train(corpus, &c, tiny_model(0)).is_err());
    }

    #[test]
    fn log_csv_layout() {
        let log = TrainLog {
            steps: vec![
                StepRecord { step: 0, epoch: 0, loss: 1.5 },
                StepRecord { step: 1, epoch: 1, loss: 0.25 },
            ],
            ..TrainLog::default()
        };
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,epoch,loss\n0,0,1.5\n1,1,0.25\n");
    }
}
