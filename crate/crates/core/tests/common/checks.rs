//! Criterion-sized checks that both the integration tests and the acceptance
//! runner execute. Each returns a one-line summary or the first failure.

use super::*;
use morphobricks::damage::{label_damage, sample_damage, Conditioning};
use morphobricks::protocol::{
    decode_expecting, decode_pulses, encode_frame, exchange, jitter_margins, timing_budget, transmit,
    boundary_floats, ChannelModel, Frame, ProtocolConfig, STATE_FRAME_LEN,
};
use proptest::test_runner::{Config, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------
// Gradients

pub fn gradient_check(instances: u64) -> Check {
    let (mut worst, mut checked, mut redrawn) = (0.0f64, 0, 0);
    let mut per_tensor = [0usize; 6];
    for seed in 0..instances {
        let out = classification_fd(seed, 4);
        ensure(out.masked_nonzero == 0, || format!("instance {seed}: masked taps received gradient"))?;
        ensure(out.checked >= 12, || format!("instance {seed}: only {} kink-free coordinates", out.checked))?;
        worst = worst.max(out.max_rel);
        checked += out.checked;
        redrawn += out.redrawn;
        (0..6).for_each(|k| per_tensor[k] += out.per_tensor[k]);
    }
    for mode in [Conditioning::HiddenEveryStep, Conditioning::HiddenInit, Conditioning::PerceptionInput] {
        for seed in 0..4 {
            let (rel, n) = damage_fd(seed, mode, 3);
            worst = worst.max(rel);
            checked += n.iter().sum::<usize>();
        }
    }
    ensure(per_tensor.iter().all(|&n| n >= 2 * instances as usize), || {
        format!("too few kink-free coordinates per tensor: {per_tensor:?}")
    })?;
    ensure(worst <= 1e-3, || format!("max relative error {worst:.3e} > 1e-3"))?;
    Ok(format!(
        "{instances} classification instances + 12 damage instances, {checked} coordinates ({redrawn} redrawn at kinks), max rel err {worst:.2e}"
    ))
}

// ---------------------------------------------------------------------------
// Protocol

fn random_float(rng: &mut ChaCha8Rng) -> f32 {
    loop {
        let v = f32::from_bits(rng.random());
        if !v.is_nan() {
            return v;
        }
    }
}

fn round_trip(values: &[f32], config: &ProtocolConfig) -> Result<(), String> {
    for chunk in values.chunks(STATE_FRAME_LEN) {
        let frame = Frame::new(chunk.to_vec());
        let train = encode_frame(&frame, config).map_err(|e| e.to_string())?;
        ensure(train.is_well_formed(), || "malformed pulse train".into())?;
        let back = decode_pulses(&train, config).map_err(|r| format!("rejected: {r}"))?;
        for (a, b) in chunk.iter().zip(&back.payload) {
            ensure(a.to_bits() == b.to_bits(), || format!("{:08X} decoded as {:08X}", a.to_bits(), b.to_bits()))?;
        }
        ensure(back.payload.len() == chunk.len(), || "length changed".into())?;
    }
    Ok(())
}

pub fn protocol_round_trip(random: usize) -> Check {
    let config = ProtocolConfig::default();
    let boundary = boundary_floats();
    round_trip(&boundary, &config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let values: Vec<f32> = (0..random).map(|_| random_float(&mut rng)).collect();
    round_trip(&values, &config)?;
    Ok(format!("{} boundary + {random} random floats, zero failures", boundary.len()))
}

/// Decision intervals at ±20% jitter, the closed-form margins, and a Monte
/// Carlo confirmation that jittered trains decode exactly or are rejected.
pub fn protocol_jitter(trials: usize) -> Check {
    let config = ProtocolConfig::default();
    for (units, lo, hi) in [(1.0, 0.0, config.zero_threshold), (2.0, config.zero_threshold, config.header_threshold)] {
        let (a, b) = (units * 0.8, units * 1.2);
        ensure(a >= lo && b < hi, || format!("{units}T at ±20% spans [{a}, {b}], outside [{lo}, {hi})"))?;
    }
    ensure(jitter_margins(0.2, &config).bits_safe(), || "jitter_margins reports unsafe bits at 20%".into())?;
    let channel = ChannelModel {
        jitter: 0.2,
        ..ChannelModel::ideal()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut rejected = 0;
    for _ in 0..trials {
        let payload: Vec<f32> = (0..STATE_FRAME_LEN).map(|_| random_float(&mut rng)).collect();
        let train = encode_frame(&Frame::new(payload.clone()), &config).unwrap();
        match decode_expecting(&transmit(&train, &channel, &mut rng), &config, STATE_FRAME_LEN) {
            Ok(f) => ensure(f.payload.iter().zip(&payload).all(|(a, b)| a.to_bits() == b.to_bits()), || {
                "jittered frame decoded with flipped bits".into()
            })?,
            Err(_) => rejected += 1,
        }
    }
    Ok(format!("interval check passes; {trials} jittered frames, 0 bit flips ({rejected} header rejects)"))
}

/// End-to-end loss over five attempts when each attempt fails with
/// probability `p` (the channel truncates with probability `p`).
pub fn protocol_loss(trials: usize) -> Check {
    let config = ProtocolConfig::default();
    let frame = Frame::state_message(&[0.25; 28]);
    let mut parts = Vec::new();
    for (i, p) in [0.1f64, 0.3, 0.5].into_iter().enumerate() {
        let channel = ChannelModel {
            truncate_prob: p,
            ..ChannelModel::ideal()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(10 + i as u64);
        let mut lost = 0usize;
        for _ in 0..trials {
            let ex = exchange(&frame, &channel, &config, &mut rng).map_err(|e| e.to_string())?;
            match ex.frame {
                Some(f) => ensure(f == frame, || "delivered frame differs".into())?,
                None => {
                    ensure(ex.attempts == 5, || format!("gave up after {} attempts", ex.attempts))?;
                    lost += 1;
                }
            }
        }
        let q = p.powi(5);
        let sigma = (q * (1.0 - q) / trials as f64).sqrt();
        let rate = lost as f64 / trials as f64;
        ensure((rate - q).abs() <= 3.0 * sigma, || {
            format!("p={p}: loss {rate:.3e} vs p^5 {q:.3e} (3 sigma {:.3e})", 3.0 * sigma)
        })?;
        parts.push(format!("p={p}: {rate:.2e} vs {q:.2e}"));
    }
    Ok(format!("{trials} trials each; {}", parts.join(", ")))
}

pub fn protocol_budget() -> Check {
    let config = ProtocolConfig::default();
    let b = timing_budget(STATE_FRAME_LEN, &config);
    let t = config.unit_us;
    // Leading gap, header, gap, then 928 all-ones bits each followed by a gap.
    let worst = t + 3.0 * t + t + (STATE_FRAME_LEN * 32) as f64 * 3.0 * t;
    ensure((b.frame_us - worst).abs() < 1e-6, || format!("frame {} us, expected {worst} us", b.frame_us))?;
    ensure(b.fits && 5.0 * worst <= 3.0e6, || format!("5 frames take {} us", b.total_us))?;
    Ok(format!(
        "5 x {} floats = {:.2} ms of a {:.0} ms window",
        STATE_FRAME_LEN,
        b.total_us / 1000.0,
        b.window_us / 1000.0
    ))
}

// ---------------------------------------------------------------------------
// Damage labels

fn compare_labels(original: &VoxelGrid, damaged: &VoxelGrid) -> Result<(), String> {
    let got: Vec<usize> = label_damage(original, damaged)
        .map_err(|e| e.to_string())?
        .iter()
        .map(|l| l.index())
        .collect();
    let want = brute_labels(original, damaged);
    ensure(got == want, || format!("mismatch on dims {:?}", original.dims()))
}

/// Builds the pair where each voxel is 0 empty, 1 kept, 2 removed.
fn pair_from_states(dims: [usize; 3], states: &[u8]) -> (VoxelGrid, VoxelGrid) {
    let original = VoxelGrid::from_occupancy(dims, states.iter().map(|&s| s > 0).collect()).unwrap();
    let damaged = VoxelGrid::from_occupancy(dims, states.iter().map(|&s| s == 1).collect()).unwrap();
    (original, damaged)
}

/// Every (occupancy, damage) pair on grids up to 3 per axis: enumerated in
/// full up to 12 voxels, and for the 18- and 27-voxel grids every joint
/// state of each voxel's closed neighbourhood at every position (the label
/// of a voxel is a function of that neighbourhood) over random backgrounds.
pub fn label_oracle_small(backgrounds: usize) -> Check {
    let (mut full, mut local) = (0u64, 0u64);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for x in 1..=3 {
        for y in 1..=3 {
            for z in 1..=3 {
                let dims = [x, y, z];
                let n = x * y * z;
                if n <= 12 {
                    let mut states = vec![0u8; n];
                    for code in 0..3u64.pow(n as u32) {
                        let mut c = code;
                        for s in states.iter_mut() {
                            *s = (c % 3) as u8;
                            c /= 3;
                        }
                        let (o, d) = pair_from_states(dims, &states);
                        compare_labels(&o, &d)?;
                        full += 1;
                    }
                    continue;
                }
                for v in 0..n {
                    let p = unlinear(dims, v);
                    let mut hood = vec![v];
                    for f in [[-1i64, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]] {
                        let q: Vec<i64> = (0..3).map(|a| p[a] as i64 + f[a]).collect();
                        if (0..3).all(|a| q[a] >= 0 && q[a] < dims[a] as i64) {
                            hood.push(linear(dims, q[0] as usize, q[1] as usize, q[2] as usize));
                        }
                    }
                    for _ in 0..backgrounds {
                        let mut states: Vec<u8> = (0..n).map(|_| rng.random_range(0..3)).collect();
                        for code in 0..3u64.pow(hood.len() as u32) {
                            let mut c = code;
                            for &h in &hood {
                                states[h] = (c % 3) as u8;
                                c /= 3;
                            }
                            let (o, d) = pair_from_states(dims, &states);
                            compare_labels(&o, &d)?;
                            local += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(format!("{full} enumerated pairs (≤ 12 voxels), {local} neighbourhood-exhaustive pairs (18, 27 voxels)"))
}

/// Random 15³ shapes damaged either by the sampler or by a random subset.
pub fn label_oracle_random(cases: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..cases {
        let density = rng.random_range(0.05..0.95);
        let original = VoxelGrid::from_fn([15; 3], |_, _, _| rng.random_bool(density)).unwrap();
        let damaged = if case % 2 == 0 && original.occupied_count() > 1 {
            match sample_damage(&original, &mut rng) {
                Ok((_, d)) => d,
                Err(_) => original.clone(),
            }
        } else {
            let keep = rng.random_range(0.0..1.0);
            VoxelGrid::from_occupancy(
                [15; 3],
                original.occupancy().iter().map(|&o| o && rng.random_bool(keep)).collect(),
            )
            .unwrap()
        };
        compare_labels(&original, &damaged).map_err(|e| format!("case {case}: {e}"))?;
    }
    Ok(format!("{cases} random 15³ cases, zero mismatches"))
}

// ---------------------------------------------------------------------------
// Invariants

pub fn invariant_suite(cases: u32) -> Check {
    let mut parts = Vec::new();
    for (name, property) in props::PROPERTIES {
        let mut runner = TestRunner::new(Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        });
        runner
            .run(&proptest::prelude::any::<u64>(), property)
            .map_err(|e| format!("{name}: {e}"))?;
        parts.push(name);
    }
    Ok(format!("{} properties x {cases} cases: {}", parts.len(), parts.join(", ")))
}

// ---------------------------------------------------------------------------
// Distributed simulation

/// Ideal-channel, fault-free simulation against the grid rollout at firing
/// rate 1, per brick, per channel, per cycle.
pub fn sim_equivalence(params: &morphobricks::engine::NcaParams, shapes: &[VoxelGrid], cycles: usize) -> Check {
    use morphobricks::engine::{rollout, EngineConfig};
    use morphobricks::sim::{build_assembly, run_cycles, Comm, FaultPlan};
    let mut worst = 0.0f64;
    for (k, grid) in shapes.iter().enumerate() {
        let mut a = build_assembly(grid, params.clone(), Comm::Ideal).map_err(|e| e.to_string())?;
        a.config.cycles = cycles;
        let log = run_cycles(&mut a, &FaultPlan::None).map_err(|e| e.to_string())?;
        ensure(log.records.len() == cycles * a.len(), || format!("shape {k}: {} records", log.records.len()))?;
        let trace = rollout(grid, params, &EngineConfig::deterministic(cycles), true)
            .map_err(|e| e.to_string())?
            .trace
            .expect("trace requested");
        let voxels: Vec<usize> = grid.occupied_indices().collect();
        for r in &log.records {
            let want = trace[r.cycle + 1].voxel(voxels[r.id]);
            for (c, (&g, &w)) in r.state.iter().zip(want.iter()).enumerate() {
                let d = (g as f64 - w as f64).abs();
                worst = worst.max(d);
                ensure(d <= 1e-5, || format!("shape {k} cycle {} brick {} channel {c}: {g} vs {w}", r.cycle, r.id))?;
            }
        }
    }
    Ok(format!("{} shapes x {cycles} cycles, max abs diff {worst:.2e}", shapes.len()))
}
