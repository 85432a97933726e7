use proptest::prelude::*;

use wm_core::dataset::{DataConfig, Dataset};
use wm_core::distill::{align_context, replay_contexts, self_rollout};
use wm_core::latent::{patchify, unpatchify};
use wm_core::memory::{fov_overlap, reconstitute, reframe, relevance, ChunkRecord, ContextSet, MemoryBank, RetrievalConfig, RELEVANCE_THRESHOLD};
use wm_core::model::{ChunkSpec, Layout, Model, ModelConfig};
use wm_core::rng;
use wm_core::sampler::{ActionChunk, Generator, Schedule};
use wm_core::tape::Tape;
use wm_core::world::{CameraPose, DiscreteAction, Frame, Intrinsics};
use wm_core::Tensor;

fn tiny() -> ModelConfig {
    ModelConfig { dim: 16, heads: 2, blocks: 2, patch: 4, frame_width: 8, frame_height: 8, time_features: 8, ..ModelConfig::default() }
}

fn pose(x: f64, z: f64, yaw: f64) -> CameraPose {
    CameraPose::from_yaw(x, z, yaw, Intrinsics::hfov90(8, 8))
}

fn chunk_spec(seed: u64, k: f64, position: i64) -> ChunkSpec {
    let s = seed as f64;
    let poses = std::array::from_fn(|f| pose(3.0 + 0.25 * f as f64 + s.sin(), 3.0 + s.cos(), 15.0 * (seed % 24) as f64 + 15.0 * f as f64));
    ChunkSpec { noise_level: k, keys: DiscreteAction((seed % 64) as u8 & 0b10_0101), poses, position }
}

/// Gates opened so the pose branch contributes.
fn open_gates(model: &mut Model, g: f32) {
    for id in model.gate_ids() {
        *model.params.get_mut(id) = Tensor::full(&[1], g);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn future_chunks_never_reach_the_past(seed in 0u64..1000) {
        let mut model = Model::new(tiny()).unwrap();
        open_gates(&mut model, 0.4);
        let tpc = model.cfg.tokens_per_chunk();
        let c = model.cfg.latent_channels();
        let specs: Vec<ChunkSpec> = (0..3).map(|i| chunk_spec(seed + i, 0.5, i as i64)).collect();
        let x: Tensor<f32> = rng::normal(&mut rng::seeded(seed), &[3 * tpc, c]);
        let mut y = x.clone();
        for v in &mut y.data_mut()[2 * tpc * c..] {
            *v += 1.0;
        }
        let run = |input: &Tensor<f32>| {
            let mut t = Tape::inference();
            let xv = t.leaf(input.clone());
            let out = model.forward(&mut t, xv, &specs, Layout::Causal).unwrap();
            t.value(out).slice_rows(0, 2 * tpc).unwrap()
        };
        prop_assert_eq!(run(&x), run(&y));

        let mut t = Tape::new();
        let xv = t.input(x);
        let out = model.forward(&mut t, xv, &specs, Layout::Causal).unwrap();
        let first = t.slice_rows(out, 0, tpc).unwrap();
        let loss = t.sum(first);
        let g = t.backward(loss).unwrap();
        let gx = g.get(xv).unwrap();
        prop_assert!(gx.data()[tpc * c..].iter().all(|&v| v == 0.0));
        prop_assert!(gx.data()[..tpc * c].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn fresh_dual_model_equals_unconditioned(seed in 0u64..1000) {
        let cfg = tiny();
        let dual = Model::new(cfg.clone()).unwrap();
        let plain = Model::new(ModelConfig { use_keys: false, use_poses: false, ..cfg }).unwrap();
        let specs = vec![chunk_spec(seed, 0.3, 0), chunk_spec(seed + 1, 0.9, 1)];
        let x: Tensor<f32> = rng::normal(&mut rng::seeded(seed), &[2 * dual.cfg.tokens_per_chunk(), dual.cfg.latent_channels()]);
        let run = |m: &Model| {
            let mut t = Tape::inference();
            let xv = t.leaf(x.clone());
            let out = m.forward(&mut t, xv, &specs, Layout::Causal).unwrap();
            t.value(out).clone()
        };
        prop_assert_eq!(run(&dual), run(&plain));
    }

    #[test]
    fn reframed_positions_ignore_age(n_t in 1usize..4, spatial in proptest::collection::btree_set(0u64..8, 0..3), age in 0u64..5000) {
        let temporal: Vec<u64> = (20 - n_t as u64..20).collect();
        let ctx = |shift: u64| ContextSet {
            temporal: temporal.iter().map(|c| c + shift).collect(),
            spatial: spatial.iter().map(|c| c + shift).collect(),
            scores: vec![0.5; spatial.len()],
        };
        prop_assert_eq!(reframe(&ctx(0)).pattern(), reframe(&ctx(age)).pattern());
    }

    #[test]
    fn patchify_round_trips(seed in 0u64..1000, patch in prop_oneof![Just(1usize), Just(2), Just(4)]) {
        let rgb: Vec<u8> = (0..8 * 8 * 3).map(|i| ((i as u64 * 2654435761 + seed) >> 7) as u8).collect();
        let f = Frame { width: 8, height: 8, rgb };
        prop_assert_eq!(unpatchify(&patchify(&f, patch).unwrap(), 8, 8, patch).unwrap(), f);
    }

    #[test]
    fn uniform_schedules_are_valid(n in 1usize..64) {
        let s = Schedule::uniform(n).unwrap();
        prop_assert_eq!(s.len(), n);
        prop_assert_eq!(s.knots()[0], 1.0);
        prop_assert_eq!(s.steps().last().unwrap().1, 0.0);
    }
}

fn random_bank(seed: u64, n: usize) -> (MemoryBank, CameraPose) {
    use rand::Rng;
    let mut r = rng::seeded(seed);
    let mut bank = MemoryBank::new();
    let mut idx = 0u64;
    // coarse lattice so equal scores (and tie-breaks) actually occur
    let mut p = || pose(2.0 + 0.5 * r.random_range(0..6) as f64, 2.0 + 0.5 * r.random_range(0..6) as f64, 45.0 * r.random_range(0..8) as f64);
    for _ in 0..n {
        idx += 1 + (seed + idx) % 3;
        bank.push(ChunkRecord { capture_index: idx, latent: Tensor::zeros(&[1, 1]), poses: [p(); 4], keys: DiscreteAction::IDLE }).unwrap();
    }
    let cur = p();
    (bank, cur)
}

/// Selection by counting: a candidate is chosen when fewer than K others
/// outrank it.
fn brute_force(bank: &MemoryBank, cur: &CameraPose, cfg: &RetrievalConfig) -> ContextSet {
    let recs = bank.records();
    let split = recs.len().saturating_sub(cfg.temporal);
    let scored: Vec<(f64, u64)> = recs[..split].iter().map(|r| (relevance(r, cur, cfg), r.capture_index)).collect();
    let mut chosen: Vec<(usize, f64, u64)> = Vec::new();
    for &(s, c) in &scored {
        if s <= RELEVANCE_THRESHOLD {
            continue;
        }
        let rank = scored.iter().filter(|&&(s2, c2)| s2 > RELEVANCE_THRESHOLD && (s2 > s || (s2 == s && c2 > c))).count();
        if rank < cfg.spatial {
            chosen.push((rank, s, c));
        }
    }
    chosen.sort_by_key(|x| x.0);
    ContextSet {
        temporal: recs[split..].iter().map(|r| r.capture_index).collect(),
        spatial: chosen.iter().map(|x| x.2).collect(),
        scores: chosen.iter().map(|x| x.1).collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn retrieval_matches_brute_force(seed in 0u64..100_000, n in 0usize..=32, l in 0usize..4, k in 0usize..4) {
        let (bank, cur) = random_bank(seed, n);
        let cfg = RetrievalConfig::new(l, k, 12);
        prop_assert_eq!(reconstitute(&bank, &cur, &cfg), brute_force(&bank, &cur, &cfg));
    }

    #[test]
    fn overlap_is_a_fraction(x in 1.0f64..5.0, z in 1.0f64..5.0, yaw in 0.0f64..360.0) {
        let a = pose(3.0, 3.0, 0.0);
        let b = pose(x, z, yaw);
        let o = fov_overlap(&a, &b);
        prop_assert!((0.0..=1.0).contains(&o));
        prop_assert_eq!(fov_overlap(&a, &a), 1.0);
    }
}

#[test]
fn kv_cache_matches_recompute() {
    let mut model = Model::new(tiny()).unwrap();
    open_gates(&mut model, 0.5);
    let poses = |c: usize| std::array::from_fn(|f| pose(3.0 + 0.25 * (c * 4 + f) as f64 % 2.0, 3.0, 15.0 * (c * 4 + f) as f64));
    let run = |cache: bool| {
        let mut g = Generator::new(&model, 12, Schedule::uniform(3).unwrap(), 5);
        g.use_cache = cache;
        let first: Tensor<f32> = rng::normal(&mut rng::seeded(1), &[model.cfg.tokens_per_chunk(), model.cfg.latent_channels()]);
        let a0 = ActionChunk { frame_keys: [DiscreteAction::IDLE; 4], poses: poses(0) };
        g.commit(first, &a0).unwrap();
        (1..8).map(|c| g.step(&ActionChunk { frame_keys: [DiscreteAction::FORWARD; 4], poses: poses(c) }).unwrap().latent).collect::<Vec<_>>()
    };
    for (a, b) in run(true).iter().zip(run(false).iter()) {
        assert!(a.max_abs_diff(b) < 1e-5);
    }
}

#[test]
fn rollout_contexts_align_with_teacher_context() {
    let cfg = tiny();
    let dc = DataConfig { episodes: 3, length: 40, world_size: 10, width: 8, height: 8, ..DataConfig::default() };
    let ds = Dataset::generate(&dc, &cfg).unwrap();
    let model = Model::new(cfg).unwrap();
    let sched = Schedule::uniform(2).unwrap();
    let mut r = rng::seeded(3);
    for (e, ep) in ds.episodes.iter().enumerate() {
        for j in 0..ep.chunks.len() - 5 {
            let (w, _) = self_rollout(&model, ep, j, &sched, &mut r, None, false).unwrap();
            let tea = align_context(&w);
            assert!(tea.iter().all(|c| !w.chunks.contains(c)), "episode {e} j {j}");
            let union: std::collections::BTreeSet<u64> = w.contexts.iter().flat_map(|c| c.ordered()).collect();
            let expect: Vec<u64> = union.into_iter().filter(|c| !w.chunks.contains(c)).collect();
            assert_eq!(tea, expect);
            let retrieval = RetrievalConfig::new(model.cfg.temporal_memory, model.cfg.spatial_memory, ep.world_size);
            assert_eq!(replay_contexts(ep, &w, &retrieval).unwrap(), w.contexts);
        }
    }
}
