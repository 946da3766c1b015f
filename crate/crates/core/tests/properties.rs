//! Property tests for the model invariants.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use triage_core::decoder_model::{decode_duration, sigma, JitterModel, LatencyModel};
use triage_core::metrics::{aggregate_ler, LerTable};
use triage_core::schedulers::{schedule_steady, HeuristicWeights, SchedulerKind, SteadyPolicy};
use triage_core::sim_engine::{run, SimConfig};
use triage_core::slice_graph::{ConstraintGraph, SliceState};
use triage_core::timeline::{build_timeline, causal_cone, ConeCache, Direction, SliceId, Timeline};
use triage_core::workload::{generate_synthetic, parse_workload, OpKind, SyntheticParams, Workload};

fn params() -> impl Strategy<Value = SyntheticParams> {
    (1usize..=6, 2usize..=30, 0.0..0.5f64, 0.0..0.8f64, 0.0..0.3f64).prop_flat_map(|(n, layers, dens, merge, rot)| {
        let route_max = if n >= 2 { 2..=n } else { 1..=1 };
        (Just((n, layers, dens, merge, rot)), route_max).prop_map(|((n, layers, dens, merge, rot), route)| SyntheticParams {
            n_lqubits: n,
            n_layers: layers,
            critical_density: dens,
            merge_probability: if n >= 2 { merge } else { 0.0 },
            route_length_max: route,
            rotate_probability: rot,
        })
    })
}

fn workload() -> impl Strategy<Value = (Workload, u64)> {
    (params(), any::<u64>()).prop_map(|(p, seed)| (generate_synthetic(&p, seed).unwrap(), seed))
}

fn assert_symmetric(tl: &Timeline) {
    for s in tl.slices() {
        for d in Direction::ALL {
            if let Some(n) = tl.neighbor(s.id, d) {
                assert_eq!(tl.neighbor(n, d.mirror()), Some(s.id), "{} -> {} via {d:?}", s.id.0, n.0);
            }
        }
    }
}

/// Non-COMPLETED slices reachable from the root instruction's predecessors
/// through same-layer spatial edges and downward temporal edges.
fn naive_cone(tl: &Timeline, root: SliceId) -> Vec<SliceId> {
    let r = tl.slice(root);
    let group: Vec<SliceId> = tl.layer_by_key(r.layer).iter().copied().filter(|&x| tl.slice(x).group == r.group).collect();
    let mut reach = vec![false; tl.n_slices()];
    let mut stack = Vec::new();
    for &p in &group {
        let mut below = tl.neighbor(p, Direction::Prev);
        while let Some(b) = below {
            if tl.slice(b).stall_for == Some(r.layer) {
                below = tl.neighbor(b, Direction::Prev);
            } else {
                break;
            }
        }
        stack.extend(below);
    }
    while let Some(u) = stack.pop() {
        if reach[u.index()] || group.contains(&u) {
            continue;
        }
        reach[u.index()] = true;
        for d in [Direction::Prev, Direction::Up, Direction::Down, Direction::Left, Direction::Right] {
            if let Some(v) = tl.neighbor(u, d) {
                stack.push(v);
            }
        }
    }
    let mut out: Vec<SliceId> = (0..tl.n_slices() as u32)
        .map(SliceId)
        .filter(|&s| reach[s.index()] && tl.slice(s).state != SliceState::Completed)
        .collect();
    out.sort();
    out
}

/// Independence of the ASSIGNED set.
fn assigned_independent(g: &ConstraintGraph) -> bool {
    let tl = g.timeline();
    tl.slices()
        .iter()
        .filter(|s| g.state(s.id) == SliceState::Assigned)
        .all(|s| tl.neighbors(s.id).all(|n| g.state(n) != SliceState::Assigned))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lli_round_trip((w, _) in workload()) {
        let back = parse_workload(&w.to_lli()).unwrap();
        prop_assert_eq!(&back, &w);
        prop_assert_eq!(back.to_lli(), w.to_lli());
    }

    #[test]
    fn generator_is_deterministic(p in params(), seed in any::<u64>()) {
        prop_assert_eq!(generate_synthetic(&p, seed).unwrap(), generate_synthetic(&p, seed).unwrap());
    }

    #[test]
    fn every_cell_has_one_instruction((w, _) in workload()) {
        for t in 0..w.n_layers() {
            let mut cover = vec![0; w.layout().n_qubits()];
            for ins in w.layer(t) {
                for &q in &ins.patches {
                    cover[q] += 1;
                }
            }
            prop_assert!(cover.iter().all(|&c| c == 1), "layer {} cover {:?}", t, cover);
            for q in 0..w.layout().n_qubits() {
                prop_assert!(w.instruction_of(t, q).patches.contains(&q));
            }
        }
    }

    #[test]
    fn masks_stay_symmetric_under_idle_insertion((w, seed) in workload(), inserts in 0usize..4) {
        let mut tl = build_timeline(&w);
        assert_symmetric(&tl);
        let ops_before: Vec<(usize, OpKind, u32)> = tl
            .slices()
            .iter()
            .map(|s| (s.id.index(), s.op, s.group))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..inserts {
            let at = rng.random_range(0..=tl.n_layers());
            let new = tl.insert_idle_layer(at).unwrap();
            prop_assert_eq!(new.len(), tl.n_qubits());
            assert_symmetric(&tl);
        }
        prop_assert_eq!(tl.inserted_idle_count(), inserts);
        prop_assert_eq!(tl.n_layers(), w.n_layers() + inserts);
        // original slices keep their ids, ops and groups
        for (i, op, group) in ops_before {
            let s = tl.slice(SliceId(i as u32));
            prop_assert_eq!(s.op, op);
            prop_assert_eq!(s.group, group);
        }
    }

    #[test]
    fn graph_walk_keeps_assigned_set_independent((w, seed) in workload(), steps in 1usize..200) {
        let mut g = ConstraintGraph::new(build_timeline(&w));
        let n = g.timeline().n_slices();
        for s in 0..n {
            g.generate(SliceId(s as u32)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut assigned: Vec<SliceId> = Vec::new();
        for _ in 0..steps {
            if !assigned.is_empty() && rng.random_bool(0.4) {
                let s = assigned.swap_remove(rng.random_range(0..assigned.len()));
                g.complete(&[s]).unwrap();
            } else {
                let s = SliceId(rng.random_range(0..n) as u32);
                let free = g.state(s) == SliceState::Pending && g.is_free_of(s, &[]);
                match g.assign(&[s]) {
                    Ok(()) => {
                        prop_assert!(free);
                        assigned.push(s);
                    }
                    Err(_) => prop_assert!(!free),
                }
            }
            prop_assert!(assigned_independent(&g));
            for s in 0..n {
                let s = SliceId(s as u32);
                prop_assert!(g.unresolved_degree(s) <= 6);
                let busy = g.timeline().neighbors(s).filter(|&x| g.state(x) == SliceState::Assigned).count() as u32;
                prop_assert_eq!(g.assigned_neighbors(s), busy);
                match g.state(s) {
                    SliceState::Pending => prop_assert_eq!(busy, 0),
                    SliceState::Occupied => prop_assert!(busy > 0),
                    _ => {}
                }
            }
        }
    }

    #[test]
    fn steady_selection_is_independent_and_weighted_degenerates((w, seed) in workload(), free in 0usize..8, t_now in 0usize..10) {
        let mut g = ConstraintGraph::new(build_timeline(&w));
        let n = g.timeline().n_slices();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in 0..n {
            g.generate(SliceId(s as u32)).unwrap();
        }
        for _ in 0..n / 2 {
            let s = SliceId(rng.random_range(0..n) as u32);
            if g.state(s) == SliceState::Pending && g.is_free_of(s, &[]) {
                g.assign(&[s]).unwrap();
                if rng.random_bool(0.5) {
                    g.complete(&[s]).unwrap();
                }
            }
        }
        let pending: Vec<SliceId> = (0..n as u32).map(SliceId).filter(|&s| g.state(s) == SliceState::Pending).collect();
        for policy in [
            SteadyPolicy::Fifo,
            SteadyPolicy::Edf,
            SteadyPolicy::Mdf,
            SteadyPolicy::Weighted(HeuristicWeights::default()),
        ] {
            let pick = schedule_steady(&pending, free, &policy, &g, t_now);
            prop_assert!(pick.len() <= free);
            let mut trial = g.clone();
            for &s in &pick {
                prop_assert!(trial.is_free_of(s, &[]));
                trial.assign(&[s]).unwrap();
            }
            prop_assert!(assigned_independent(&trial));
        }
        let edf = schedule_steady(&pending, free, &SteadyPolicy::Edf, &g, t_now);
        let w10 = schedule_steady(&pending, free, &SteadyPolicy::Weighted(HeuristicWeights::new(1.0, 0.0).unwrap()), &g, t_now);
        prop_assert_eq!(edf, w10);
        let mdf = schedule_steady(&pending, free, &SteadyPolicy::Mdf, &g, t_now);
        let w01 = schedule_steady(&pending, free, &SteadyPolicy::Weighted(HeuristicWeights::new(0.0, 1.0).unwrap()), &g, t_now);
        prop_assert_eq!(mdf, w01);
    }

    #[test]
    fn cone_matches_naive_backward_search((w, seed) in workload(), done_frac in 0.0..1.0f64) {
        let mut g = ConstraintGraph::new(build_timeline(&w));
        let n = g.timeline().n_slices();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in 0..n {
            g.generate(SliceId(s as u32)).unwrap();
        }
        // complete a random subset (oldest layers more likely)
        for s in 0..n {
            let s = SliceId(s as u32);
            let bias = 1.0 - g.timeline().t(s) as f64 / g.timeline().n_layers() as f64;
            if rng.random_bool((done_frac * bias).clamp(0.0, 1.0)) && g.is_free_of(s, &[]) {
                g.assign(&[s]).unwrap();
                g.complete(&[s]).unwrap();
            }
        }
        let tl = g.timeline();
        let mut cache = ConeCache::new(8).with_traverse_completed(true);
        for root in tl.slices().iter().filter(|s| s.critical).map(|s| s.id) {
            let got = causal_cone(tl, root, &mut cache).unwrap();
            let mut got_set: Vec<SliceId> = got.members.clone();
            got_set.sort();
            prop_assert_eq!(got_set, naive_cone(tl, root));
        }
    }

    #[test]
    fn duration_is_monotone(deg in 0u32..6, r in 0.1..4.0f64, dr in 0.01..1.0f64, d in 3u32..25, b in 1u32..25) {
        let lm = LatencyModel::new(1.17, d, b.min(d));
        prop_assert!(decode_duration(deg + 1, &lm, r) > decode_duration(deg, &lm, r));
        prop_assert!(decode_duration(deg, &lm, r + dr) < decode_duration(deg, &lm, r));
    }

    #[test]
    fn sigma_is_clamped(d in 1u32..60, p in 0.0..0.05f64) {
        let jm = JitterModel::default();
        let s = sigma(d, p, &jm);
        prop_assert!((jm.sigma_min..=jm.sigma_max).contains(&s));
    }

    #[test]
    fn idle_layer_raises_ler((w, _) in workload(), p in 1e-6..0.1f64, at_frac in 0.0..=1.0f64) {
        let mut tl = build_timeline(&w);
        let table = LerTable::uniform(p);
        let before = aggregate_ler(&tl, tl.n_layers(), &table);
        let at = (at_frac * tl.n_layers() as f64) as usize;
        tl.insert_idle_layer(at).unwrap();
        prop_assert!(aggregate_ler(&tl, tl.n_layers(), &table) > before);
    }
}

fn sim_case() -> impl Strategy<Value = (Workload, SimConfig)> {
    (
        workload(),
        0usize..SchedulerKind::ALL.len(),
        1usize..=8,
        0.3..1.6f64,
        any::<bool>(),
        any::<u64>(),
    )
        .prop_map(|((w, _), k, m, speed, jitter, seed)| {
            let mut cfg = SimConfig::default()
                .with_pool(m, speed)
                .with_scheduler(SchedulerKind::ALL[k]);
            cfg.jitter.enabled = jitter;
            cfg.seed = seed;
            cfg.check_invariants = true;
            cfg.event_log = true;
            cfg.event_log_cap = usize::MAX;
            (w, cfg)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn simulation_invariants((w, cfg) in sim_case()) {
        // check_invariants makes `run` fail on any independence violation
        let r = run(&w, &cfg).unwrap();
        let again = run(&w, &cfg).unwrap();
        prop_assert_eq!(r.csv_row("x"), again.csv_row("x"));
        prop_assert_eq!(&r.event_log, &again.event_log);

        let tl = &r.timeline;
        prop_assert_eq!(tl.n_layers(), r.total_layers);
        prop_assert_eq!(r.total_layers, r.original_layers + r.idle_layers_inserted);
        if r.terminated_early {
            prop_assert!(r.idle_layers_inserted as f64 > cfg.termination_factor * r.original_layers as f64);
        } else {
            prop_assert!(tl.slices().iter().all(|s| s.state == SliceState::Completed));
        }
        prop_assert!((0.0..=1.0).contains(&r.metrics.mean_utilization));
        prop_assert!((0.0..=1.0).contains(&r.metrics.aggregated_ler));

        // no task starts before its syndrome exists (layer t arrives at t + 1)
        let log = r.event_log.unwrap();
        for line in log.lines().filter(|l| l.contains(",dispatch,")) {
            let cols: Vec<&str> = line.splitn(5, ',').collect();
            let slice: u32 = cols[2].parse().unwrap();
            let detail = cols[4];
            let field = |name: &str| -> f64 {
                detail.split(' ').find_map(|kv| kv.strip_prefix(name)).unwrap().parse().unwrap()
            };
            let (start, finish) = (field("start="), field("finish="));
            let gen_time = (tl.t(SliceId(slice)) + 1) as f64;
            prop_assert!(start >= gen_time - 1e-9, "{line}");
            prop_assert!(finish > start, "{line}");
        }
    }
}
