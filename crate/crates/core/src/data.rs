//! Bouncing-squares videos: a small synthetic stand-in for real footage.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::numerics::Array;

pub const MIN_OBJECT: usize = 3;
pub const MAX_OBJECT: usize = 5;
/// Frames must leave room for the largest square to move.
pub const MIN_SIZE: usize = 2 * MAX_OBJECT;
pub const BACKGROUND: f32 = -1.0;

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("frame size {size} too small for {object}-px objects (need at least {min})")]
    SizeTooSmall { size: usize, object: usize, min: usize },
    #[error("count and length must be at least 1")]
    Empty,
}

/// Position and velocity of one square in every frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectTrack {
    pub size: usize,
    /// RGB in `[−1, 1]`.
    pub color: [f32; 3],
    /// Top-left corner `(x, y)` per frame.
    pub positions: Vec<(i64, i64)>,
    pub velocities: Vec<(i64, i64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    /// `[L, 3, S, S]` in `[−1, 1]`.
    pub frames: Array<f32>,
    pub objects: Vec<ObjectTrack>,
}

/// Advances one coordinate by `v` with mirror reflection at `0` and `max`.
pub fn reflect_step(pos: i64, vel: i64, max: i64) -> (i64, i64) {
    let mut p = pos + vel;
    let mut v = vel;
    if p < 0 {
        p = -p;
        v = -v;
    } else if p > max {
        p = 2 * max - p;
        v = -v;
    }
    (p, v)
}

/// Per-frame `(x, y)` pairs.
pub type Trajectory = Vec<(i64, i64)>;

/// Positions and velocities over `len` frames, starting at `start`.
pub fn simulate(
    start: (i64, i64),
    velocity: (i64, i64),
    max: i64,
    len: usize,
) -> (Trajectory, Trajectory) {
    let mut positions = Vec::with_capacity(len);
    let mut velocities = Vec::with_capacity(len);
    let (mut p, mut v) = (start, velocity);
    for _ in 0..len {
        positions.push(p);
        velocities.push(v);
        let (x, vx) = reflect_step(p.0, v.0, max);
        let (y, vy) = reflect_step(p.1, v.1, max);
        p = (x, y);
        v = (vx, vy);
    }
    (positions, velocities)
}

/// Draws the squares of one frame onto the dark background.
pub fn render(objects: &[ObjectTrack], frame: usize, size: usize) -> Vec<f32> {
    let plane = size * size;
    let mut out = vec![BACKGROUND; 3 * plane];
    for obj in objects {
        let (x0, y0) = obj.positions[frame];
        for y in y0 as usize..y0 as usize + obj.size {
            for x in x0 as usize..x0 as usize + obj.size {
                for (c, &value) in obj.color.iter().enumerate() {
                    out[c * plane + y * size + x] = value;
                }
            }
        }
    }
    out
}

fn nonzero_velocity(rng: &mut impl Rng) -> (i64, i64) {
    loop {
        let v = (rng.random_range(-2..=2), rng.random_range(-2..=2));
        if v != (0, 0) {
            return v;
        }
    }
}

pub fn generate_clip(rng: &mut impl Rng, len: usize, size: usize) -> SyntheticClip {
    let count = rng.random_range(1..=2);
    let objects: Vec<ObjectTrack> = (0..count)
        .map(|_| {
            let obj = rng.random_range(MIN_OBJECT..=MAX_OBJECT);
            let max = (size - obj) as i64;
            let start = (rng.random_range(0..=max), rng.random_range(0..=max));
            let velocity = nonzero_velocity(rng);
            let color = [0; 3].map(|_| rng.random_range(0.2f32..=1.0));
            let (positions, velocities) = simulate(start, velocity, max, len);
            ObjectTrack {
                size: obj,
                color,
                positions,
                velocities,
            }
        })
        .collect();
    let mut data = Vec::with_capacity(len * 3 * size * size);
    for f in 0..len {
        data.extend(render(&objects, f, size));
    }
    SyntheticClip {
        frames: Array::from_vec([len, 3, size, size], data).expect("length matches shape"),
        objects,
    }
}

/// `count` clips of `len` frames at `size×size`, fully determined by `seed`.
pub fn generate_dataset(
    count: usize,
    len: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<SyntheticClip>, DataError> {
    if count == 0 || len == 0 {
        return Err(DataError::Empty);
    }
    if size < MIN_SIZE {
        return Err(DataError::SizeTooSmall {
            size,
            object: MAX_OBJECT,
            min: MIN_SIZE,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count).map(|_| generate_clip(&mut rng, len, size)).collect())
}
