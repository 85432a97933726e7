//! Shared fixtures for the benchmarks.

use wm_core::eval::{action_chunk, single_episode};
use wm_core::latent::chunk_latent;
use wm_core::sampler::{Generator, Schedule};
use wm_core::world::{Episode, TrajectoryKind, CHUNK_FRAMES, DEFAULT_WORLD_SIZE};
use wm_core::{Model, ModelConfig};

pub fn desk_model() -> Model {
    Model::new(ModelConfig::desk_test()).expect("desk config is valid")
}

/// Random walk long enough for `chunks` chunks at the model's resolution.
pub fn walk(model: &Model, chunks: usize, seed: u64) -> Episode {
    let cfg = &model.cfg;
    single_episode(TrajectoryKind::RandomWalk, seed, DEFAULT_WORLD_SIZE, chunks * CHUNK_FRAMES, cfg.frame_width, cfg.frame_height)
        .expect("random walk")
}

/// Generator with the first `history` chunks of `ep` committed.
pub fn warm_generator<'m>(model: &'m Model, ep: &Episode, history: usize, cache: bool) -> Generator<'m> {
    let mut g = Generator::new(model, DEFAULT_WORLD_SIZE, Schedule::uniform(model.cfg.student_steps).unwrap(), 1);
    g.use_cache = cache;
    for c in 0..history {
        let lat = chunk_latent(&ep.frames[c * CHUNK_FRAMES..(c + 1) * CHUNK_FRAMES], model.cfg.patch).unwrap();
        g.commit(lat, &action_chunk(ep, c)).unwrap();
    }
    g
}
