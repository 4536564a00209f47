//! "Bounce": a deterministic toy game rendered to grayscale frames.
//!
//! A square ball travels at constant speed inside a box and reflects off the
//! walls and off a paddle at the bottom; the paddle follows the ball's
//! horizontal position at bounded speed. The outermost pixel ring and the rows
//! below the paddle are never drawn on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BACKGROUND: u8 = 0;
pub const FOREGROUND: u8 = 255;

/// Rows occupied by the paddle.
const PADDLE_HEIGHT: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameConfig {
    pub height: usize,
    pub width: usize,
    pub ball_radius: usize,
    pub ball_speed: f64,
    pub paddle_width: usize,
    pub paddle_speed: f64,
    pub seed: u64,
}

impl Default for GameConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            ball_radius: 2,
            ball_speed: 2.0,
            paddle_width: 12,
            paddle_speed: 1.5,
            seed: 0,
        }
    }
}

/// Closed interval of admissible centre positions along one axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

impl GameConfig {
    pub fn validate(&self) -> Result<()> {
        let side = self.height.min(self.width);
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if side < 8 {
            return fail(format!("frame {}x{} is too small", self.height, self.width));
        }
        if 4 * self.ball_radius >= side {
            return fail(format!(
                "ball radius {} must be below a quarter of {side}",
                self.ball_radius
            ));
        }
        if !(self.ball_speed >= 1.0 && self.ball_speed.is_finite()) {
            return fail(format!("ball speed {} must be >= 1", self.ball_speed));
        }
        if !(self.paddle_speed >= 1.0 && self.paddle_speed.is_finite()) {
            return fail(format!("paddle speed {} must be >= 1", self.paddle_speed));
        }
        if self.paddle_width == 0 || self.paddle_width + 2 > self.width {
            return fail(format!("paddle width {} does not fit", self.paddle_width));
        }
        let (bx, by) = (self.ball_x_bounds(), self.ball_y_bounds());
        if bx.hi - bx.lo <= 2.0 * self.ball_speed || by.hi - by.lo <= 2.0 * self.ball_speed {
            return fail("ball speed too large for the playfield".into());
        }
        Ok(())
    }

    pub fn ball_x_bounds(&self) -> Bounds {
        let r = self.ball_radius as f64;
        Bounds {
            lo: 1.0 + r,
            hi: self.width as f64 - 2.0 - r,
        }
    }

    /// The lower bound is the paddle line.
    pub fn ball_y_bounds(&self) -> Bounds {
        let r = self.ball_radius as f64;
        Bounds {
            lo: 1.0 + r,
            hi: self.paddle_row() as f64 - 1.0 - r,
        }
    }

    pub fn paddle_bounds(&self) -> Bounds {
        let half = self.paddle_width as f64 / 2.0;
        Bounds {
            lo: 1.0 + half,
            hi: self.width as f64 - 1.0 - half,
        }
    }

    /// Top row of the paddle.
    pub fn paddle_row(&self) -> usize {
        self.height - 1 - PADDLE_HEIGHT
    }
}

/// Continuous game state at one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GameState {
    pub ball: (f64, f64),
    pub velocity: (f64, f64),
    pub paddle: f64,
}

impl GameState {
    fn initial(config: &GameConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (bx, by) = (config.ball_x_bounds(), config.ball_y_bounds());
        let x = rng.random_range(bx.lo..=bx.hi);
        let y = rng.random_range(by.lo..=by.hi);
        // keep both components away from zero so the ball never crawls
        // along an axis
        let angle = loop {
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            if a.cos().abs() >= 0.35 && a.sin().abs() >= 0.35 {
                break a;
            }
        };
        let pb = config.paddle_bounds();
        Self {
            ball: (x, y),
            velocity: (config.ball_speed * angle.cos(), config.ball_speed * angle.sin()),
            paddle: x.clamp(pb.lo, pb.hi),
        }
    }

    fn step(&self, config: &GameConfig) -> Self {
        let (x, vx) = reflect(self.ball.0, self.velocity.0, config.ball_x_bounds());
        let (y, vy) = reflect(self.ball.1, self.velocity.1, config.ball_y_bounds());
        let pb = config.paddle_bounds();
        let chase = (x - self.paddle).clamp(-config.paddle_speed, config.paddle_speed);
        Self {
            ball: (x, y),
            velocity: (vx, vy),
            paddle: (self.paddle + chase).clamp(pb.lo, pb.hi),
        }
    }

    /// Integer top-left corner of the drawn ball.
    pub fn ball_pixel(&self, config: &GameConfig) -> (usize, usize) {
        let r = config.ball_radius;
        (
            self.ball.0.round() as usize - r,
            self.ball.1.round() as usize - r,
        )
    }

    fn paddle_left(&self, config: &GameConfig) -> usize {
        (self.paddle - config.paddle_width as f64 / 2.0).round() as usize
    }
}

/// Advance one axis by `v`, mirroring about whichever bound is crossed.
fn reflect(p: f64, v: f64, b: Bounds) -> (f64, f64) {
    let next = p + v;
    if next > b.hi {
        (2.0 * b.hi - next, -v)
    } else if next < b.lo {
        (2.0 * b.lo - next, -v)
    } else {
        (next, v)
    }
}

/// The state sequence of a `frames`-long play-through.
pub fn state_trace(config: &GameConfig, frames: usize) -> Result<Vec<GameState>> {
    config.validate()?;
    if frames < 2 {
        return Err(Error::InvalidInput(format!(
            "a trajectory needs at least 2 frames, asked for {frames}"
        )));
    }
    let mut states = Vec::with_capacity(frames);
    states.push(GameState::initial(config));
    while states.len() < frames {
        let next = states[states.len() - 1].step(config);
        states.push(next);
    }
    Ok(states)
}

pub fn render(config: &GameConfig, state: &GameState) -> Vec<u8> {
    let (w, h) = (config.width, config.height);
    let mut frame = vec![BACKGROUND; w * h];
    let side = 2 * config.ball_radius + 1;
    let (bx, by) = state.ball_pixel(config);
    for row in by..by + side {
        frame[row * w + bx..row * w + bx + side].fill(FOREGROUND);
    }
    let left = state.paddle_left(config);
    let top = config.paddle_row();
    for row in top..top + PADDLE_HEIGHT {
        frame[row * w + left..row * w + left + config.paddle_width].fill(FOREGROUND);
    }
    frame
}

/// An ordered sequence of single-channel frames from one play-through.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub frames: Vec<Vec<u8>>,
    pub game_config: Option<GameConfig>,
}

impl Trajectory {
    pub fn new(id: impl Into<String>, height: usize, width: usize, frames: Vec<Vec<u8>>) -> Result<Self> {
        let id = id.into();
        if frames.len() < 2 {
            return Err(Error::EmptyTrajectory { id, len: frames.len() });
        }
        if let Some(t) = frames.iter().position(|f| f.len() != height * width) {
            return Err(Error::shape(format!(
                "trajectory `{id}`: frame {t} has {} bytes, expected {height}x{width}",
                frames[t].len()
            )));
        }
        Ok(Self {
            id,
            height,
            width,
            frames,
            game_config: None,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        &self.frames[t]
    }

    pub fn frame_refs(&self) -> Vec<&[u8]> {
        self.frames.iter().map(Vec::as_slice).collect()
    }

    /// Same frames in reverse temporal order.
    pub fn reversed(&self) -> Self {
        let mut out = self.clone();
        out.frames.reverse();
        out
    }
}

/// Play the game for `frames` steps and render every state.
pub fn simulate(config: &GameConfig, frames: usize) -> Result<Trajectory> {
    let states = state_trace(config, frames)?;
    let rendered = states.iter().map(|s| render(config, s)).collect();
    let mut traj = Trajectory::new(
        format!("bounce-{}", config.seed),
        config.height,
        config.width,
        rendered,
    )?;
    traj.game_config = Some(config.clone());
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(seed: u64) -> GameConfig {
        GameConfig {
            seed,
            ..GameConfig::default()
        }
    }

    #[test]
    fn simulate_is_deterministic() {
        let a = simulate(&config(3), 200).unwrap();
        let b = simulate(&config(3), 200).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.frames, simulate(&config(4), 200).unwrap().frames);
    }

    #[test]
    fn rejects_bad_configs_and_lengths() {
        let mut c = config(0);
        c.ball_radius = 16;
        assert!(matches!(simulate(&c, 10), Err(Error::InvalidConfig(_))));
        let mut c = config(0);
        c.ball_speed = 0.5;
        assert!(simulate(&c, 10).is_err());
        let mut c = config(0);
        c.paddle_speed = 0.0;
        assert!(simulate(&c, 10).is_err());
        assert!(simulate(&config(0), 1).is_err());
    }

    #[test]
    fn wall_contact_flips_velocity() {
        let c = config(0);
        let b = c.ball_x_bounds();
        let s = GameState {
            ball: (b.lo, 20.0),
            velocity: (-1.5, 1.0),
            paddle: 32.0,
        };
        let next = s.step(&c);
        assert_eq!(next.velocity, (1.5, 1.0));
        assert_eq!(next.ball.0, b.lo + 1.5);

        let by = c.ball_y_bounds();
        let s = GameState {
            ball: (30.0, by.hi - 0.5),
            velocity: (1.2, 1.6),
            paddle: 32.0,
        };
        let next = s.step(&c);
        assert_eq!(next.velocity, (1.2, -1.6));
        assert!((next.ball.1 - (by.hi - 1.1)).abs() < 1e-12);
    }

    #[test]
    fn trace_stays_confined_with_constant_speed() {
        for seed in 0..5 {
            let c = config(seed);
            let trace = state_trace(&c, 2000).unwrap();
            let (bx, by, pb) = (c.ball_x_bounds(), c.ball_y_bounds(), c.paddle_bounds());
            for s in &trace {
                assert!(bx.contains(s.ball.0) && by.contains(s.ball.1), "{s:?}");
                assert!(pb.contains(s.paddle));
                let speed = s.velocity.0.hypot(s.velocity.1);
                assert!((speed - c.ball_speed).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn velocity_flips_exactly_at_contact_steps() {
        let c = config(9);
        let trace = state_trace(&c, 1000).unwrap();
        let (bx, by) = (c.ball_x_bounds(), c.ball_y_bounds());
        for w in trace.windows(2) {
            let (s, n) = (w[0], w[1]);
            let crosses_x = !bx.contains(s.ball.0 + s.velocity.0);
            let crosses_y = !by.contains(s.ball.1 + s.velocity.1);
            assert_eq!(n.velocity.0 == -s.velocity.0, crosses_x);
            assert_eq!(n.velocity.1 == -s.velocity.1, crosses_y);
            if !crosses_x {
                assert_eq!(n.velocity.0, s.velocity.0);
            }
        }
    }

    #[test]
    fn frames_are_nonempty_and_change_when_the_ball_moves() {
        let c = config(1);
        let traj = simulate(&c, 500).unwrap();
        let trace = state_trace(&c, 500).unwrap();
        for t in 0..500 {
            assert!(traj.frame(t).iter().any(|&p| p != 0));
        }
        for t in 0..499 {
            if trace[t].ball_pixel(&c) != trace[t + 1].ball_pixel(&c) {
                assert_ne!(traj.frame(t), traj.frame(t + 1), "t = {t}");
            }
        }
    }

    #[test]
    fn border_ring_is_never_drawn() {
        let c = config(2);
        let traj = simulate(&c, 1500).unwrap();
        let (h, w) = (c.height, c.width);
        for f in &traj.frames {
            for x in 0..w {
                assert_eq!(f[x], 0);
                assert_eq!(f[(h - 1) * w + x], 0);
            }
            for y in 0..h {
                assert_eq!(f[y * w], 0);
                assert_eq!(f[y * w + w - 1], 0);
            }
        }
    }

    #[test]
    fn render_matches_trace_at_sampled_steps() {
        let c = config(5);
        let traj = simulate(&c, 1000).unwrap();
        let trace = state_trace(&c, 1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let t = rng.random_range(0..1000);
            assert_eq!(render(&c, &trace[t]), traj.frames[t]);
        }
    }

    #[test]
    fn seeds_change_initial_conditions_only() {
        let a = state_trace(&config(10), 300).unwrap();
        let b = state_trace(&config(11), 300).unwrap();
        assert_ne!(a[0], b[0]);
        for trace in [&a, &b] {
            for s in trace.iter() {
                assert!((s.velocity.0.hypot(s.velocity.1) - 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn trajectory_requires_two_frames() {
        assert!(matches!(
            Trajectory::new("x", 2, 2, vec![vec![0; 4]]),
            Err(Error::EmptyTrajectory { len: 1, .. })
        ));
        assert!(Trajectory::new("x", 2, 2, vec![vec![0; 4], vec![0; 3]]).is_err());
    }
}
