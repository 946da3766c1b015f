//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! The process fails when a criterion outside `KNOWN_FAILURES` fails, or when
//! any criterion fails and `ACCEPTANCE_STRICT=1` is set.

#[path = "../../core/tests/support/planner_oracle.rs"]
mod planner_oracle;

use std::fs;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use triage_core::decoder_model::{sample_jitter_factor, sigma, JitterModel, LatencyModel};
use triage_core::schedulers::{plan_emergency, plan_input_from_graph, HeuristicWeights, SchedulerKind};
use triage_core::sim_engine::{run, SimConfig, SimError, SimResult};
use triage_core::slice_graph::ConstraintGraph;
use triage_core::timeline::{build_timeline, SliceId};
use triage_core::workload::{generate_synthetic, parse_workload, SyntheticParams, Workload};

/// Criteria that fail under this model; see the README.
const KNOWN_FAILURES: &[u32] = &[2, 3, 8, 9];

const BELL4: &str = include_str!("../../core/fixtures/bell4.lli");

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

/// Invariant checking tally shared by criteria 1 to 3.
#[derive(Default)]
struct Invariants {
    runs: usize,
    violations: Vec<String>,
}

impl Invariants {
    fn run(&mut self, w: &Workload, cfg: &SimConfig) -> SimResult {
        let mut cfg = cfg.clone();
        cfg.check_invariants = true;
        self.runs += 1;
        match run(w, &cfg) {
            Ok(r) => r,
            Err(SimError::Invariant { time, detail }) => {
                self.violations.push(format!("{} at t={time}: {detail}", w.name));
                // keep going so the other criteria still report
                cfg.check_invariants = false;
                run(w, &cfg).expect("simulation without checks")
            }
            Err(e) => panic!("{}: {e}", w.name),
        }
    }
}

fn shaped(n_lqubits: usize, n_layers: usize, n_critical: usize) -> SyntheticParams {
    SyntheticParams {
        n_lqubits,
        n_layers,
        critical_density: n_critical as f64 / n_layers as f64,
        merge_probability: 0.3,
        route_length_max: 3,
        rotate_probability: 0.1,
    }
}

fn bell4_shaped() -> SyntheticParams {
    shaped(4, 41, 5)
}

fn config(kind: SchedulerKind, m: usize, speed: f64) -> SimConfig {
    SimConfig::default().with_pool(m, speed).with_scheduler(kind)
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn within(elapsed: Duration, budget_s: u64) -> (bool, String) {
    let ok = elapsed <= Duration::from_secs(budget_s);
    (ok, format!("{:.1}s of {budget_s}s", elapsed.as_secs_f64()))
}

// -- criteria -----------------------------------------------------------------

fn sliding_flatness(inv: &mut Invariants) -> Verdict {
    let start = Instant::now();
    let w = parse_workload(BELL4).unwrap();
    let idles: Vec<usize> = [1, 2, 4, 8, 16]
        .iter()
        .map(|&m| inv.run(&w, &config(SchedulerKind::Sliding, m, 0.8)).idle_layers_inserted)
        .collect();
    let (fast, time) = within(start.elapsed(), 10);
    let flat = idles.windows(2).all(|p| p[0] == p[1]);
    Verdict::new(flat && fast, format!("idle for M=1,2,4,8,16: {idles:?}; {time}"))
}

fn parallelism_ordering(inv: &mut Invariants) -> Verdict {
    let start = Instant::now();
    let order = [
        SchedulerKind::Sliding,
        SchedulerKind::TimeParallel,
        SchedulerKind::StFifo,
        SchedulerKind::Triage,
    ];
    let workloads: Vec<Workload> = (0..10).map(|s| generate_synthetic(&bell4_shaped(), s).unwrap()).collect();
    let means: Vec<f64> = order
        .iter()
        .map(|&k| mean(workloads.iter().map(|w| inv.run(w, &config(k, 8, 0.8)).idle_layers_inserted as f64)))
        .collect();
    let ordered = means.windows(2).all(|p| p[0] >= p[1]) && means[3] < means[1];
    let (fast, time) = within(start.elapsed(), 120);
    Verdict::new(
        ordered && fast,
        format!(
            "mean idle sliding {:.1} >= time_parallel {:.1} >= st_fifo {:.1} >= triage {:.1}; {time}",
            means[0], means[1], means[2], means[3]
        ),
    )
}

fn constrained_dominance(inv: &mut Invariants) -> Verdict {
    let start = Instant::now();
    let benchmarks = [bell4_shaped(), shaped(5, 24, 11), shaped(4, 200, 61)];
    let seeds = 0..3u64;
    let workloads: Vec<Workload> = benchmarks
        .iter()
        .flat_map(|p| seeds.clone().map(move |s| generate_synthetic(p, s).unwrap()))
        .collect();
    let mut idle_wins = 0;
    let mut reductions = Vec::new();
    for m in [2, 4, 6, 8] {
        for r in [0.6, 0.8, 1.0, 1.2] {
            let mut idle = [0.0; 2];
            let mut ler = [0.0; 2];
            for (i, kind) in [SchedulerKind::TimeParallel, SchedulerKind::Triage].into_iter().enumerate() {
                let runs: Vec<SimResult> = workloads.iter().map(|w| inv.run(w, &config(kind, m, r))).collect();
                idle[i] = mean(runs.iter().map(|x| x.idle_layers_inserted as f64));
                ler[i] = mean(runs.iter().map(|x| x.metrics.aggregated_ler));
            }
            if idle[1] <= idle[0] {
                idle_wins += 1;
            }
            reductions.push(1.0 - ler[1] / ler[0]);
        }
    }
    let reduction = mean(reductions.iter().copied());
    let (fast, time) = within(start.elapsed(), 900);
    Verdict::new(
        idle_wins >= 14 && reduction >= 0.30 && fast,
        format!(
            "triage idle <= time_parallel in {idle_wins}/16 cells; mean LER reduction {:.1}% (need 30%); {time}",
            reduction * 100.0
        ),
    )
}

fn independence(inv: &Invariants) -> Verdict {
    let detail = match inv.violations.first() {
        None => format!("0 violations over {} checked runs", inv.runs),
        Some(first) => format!("{} violations over {} runs; first: {first}", inv.violations.len(), inv.runs),
    };
    Verdict::new(inv.violations.is_empty() && inv.runs > 0, detail)
}

fn planner_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x0e5e);
    let mut failures = Vec::new();
    for case in 0..500 {
        let input = planner_oracle::random_input(&mut rng, 8);
        let plan = plan_emergency(&input);
        if let Err(e) = planner_oracle::check_feasible(&input, &plan).and(planner_oracle::matches_oracle(&input, &plan)) {
            failures.push(format!("case {case}: {e}"));
        }
    }
    let (fast, time) = within(start.elapsed(), 60);
    let detail = match failures.first() {
        None => format!("500/500 cones feasible and equal to the oracle; {time}"),
        Some(f) => format!("{} mismatches; first {f}; {time}", failures.len()),
    };
    Verdict::new(failures.is_empty() && fast, detail)
}

/// Median wall time of one planning call over `scope`.
fn time_plan(g: &ConstraintGraph, scope: &[SliceId]) -> f64 {
    let m = 16;
    let input = plan_input_from_graph(
        g,
        scope,
        0.0,
        &vec![0.0; m],
        &vec![1.0; m],
        LatencyModel::default(),
        |_| 0.0,
        |t| t as f64,
    );
    let mut samples = Vec::new();
    for _ in 0..7 {
        let mut reps = 0u32;
        let t0 = Instant::now();
        while t0.elapsed() < Duration::from_millis(20) {
            std::hint::black_box(plan_emergency(std::hint::black_box(&input)));
            reps += 1;
        }
        samples.push(t0.elapsed().as_secs_f64() / f64::from(reps));
    }
    samples.sort_by(f64::total_cmp);
    samples[samples.len() / 2]
}

fn planner_scaling() -> Verdict {
    let start = Instant::now();
    let params = SyntheticParams {
        n_lqubits: 16,
        n_layers: 40,
        critical_density: 0.2,
        merge_probability: 0.3,
        route_length_max: 3,
        rotate_probability: 0.0,
    };
    let w = generate_synthetic(&params, 12).unwrap();
    let mut g = ConstraintGraph::new(build_timeline(&w));
    for s in 0..g.timeline().n_slices() {
        g.generate(SliceId(s as u32)).unwrap();
    }
    let sizes = [8usize, 16, 32, 64, 96, 128, 192, 256, 320, 384, 448, 512];
    let points: Vec<(f64, f64)> = sizes
        .iter()
        .map(|&n| {
            let scope: Vec<SliceId> = (0..n as u32).map(SliceId).collect();
            let x = n as f64 * (n as f64).ln();
            (x, time_plan(&g, &scope))
        })
        .collect();
    // least squares through the origin: y = a x
    let a = points.iter().map(|(x, y)| x * y).sum::<f64>() / points.iter().map(|(x, _)| x * x).sum::<f64>();
    let y_mean = mean(points.iter().map(|p| p.1));
    let ss_res: f64 = points.iter().map(|(x, y)| (y - a * x).powi(2)).sum();
    let ss_tot: f64 = points.iter().map(|(_, y)| (y - y_mean).powi(2)).sum();
    let r2 = 1.0 - ss_res / ss_tot;
    let (fast, time) = within(start.elapsed(), 120);
    Verdict::new(
        r2 >= 0.8 && fast,
        format!(
            "a = {:.3e} s, R^2 = {r2:.4} over n = 8..512 (t(512) = {:.1} us); {time}",
            a,
            points.last().unwrap().1 * 1e6
        ),
    )
}

fn jitter_calibration() -> Verdict {
    let start = Instant::now();
    let jm = JitterModel::default();
    let s5 = sigma(5, 1e-3, &jm);
    let s9 = sigma(9, 3e-3, &jm);
    // closed form of the fitted model
    let expect9 = 0.3447 + 0.0041 * (9.0f64 / 5.0).log2() + 15.03 * (3e-3 - 1e-3);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 1_000_000;
    let m = (0..n).map(|_| sample_jitter_factor(0.3447, &mut rng)).sum::<f64>() / n as f64;
    let (fast, time) = within(start.elapsed(), 30);
    let pass = s5 == 0.3447 && (s9 - expect9).abs() <= 5e-4 && (s9 - 0.3782).abs() <= 5e-4 && (m - 1.0).abs() <= 0.01;
    Verdict::new(
        pass && fast,
        format!("sigma(5,1e-3) = {s5}, sigma(9,3e-3) = {s9:.5} (closed form {expect9:.5}), mean factor {m:.5}; {time}"),
    )
}

fn scope_cap_robustness() -> Verdict {
    let start = Instant::now();
    let w = generate_synthetic(&shaped(15, 508, 252), 1).unwrap();
    let ratios = [0.0, 0.05, 0.1, 0.2];
    let sim = |cap: Option<usize>, ratio: f64| {
        let mut cfg = config(SchedulerKind::Triage, 25, 1.0);
        cfg.trigger.scope_cap = cap;
        cfg.delay.ratio = ratio;
        run(&w, &cfg).unwrap()
    };
    let capped: Vec<SimResult> = ratios.iter().map(|&r| sim(Some(100), r)).collect();
    let base = capped[0].idle_layers_inserted.max(1) as f64;
    let capped_ok = capped
        .iter()
        .all(|r| !r.terminated_early && r.idle_layers_inserted as f64 <= 2.0 * base);
    // the uncapped sweep stops at its first termination
    let mut uncapped = Vec::new();
    for &ratio in ratios.iter().filter(|&&r| r <= 0.1) {
        let r = sim(None, ratio);
        let stop = r.terminated_early;
        uncapped.push((ratio, r));
        if stop {
            break;
        }
    }
    let uncapped_fails = uncapped.iter().any(|(_, r)| r.terminated_early);
    let show = |r: &SimResult| format!("{}{}", r.idle_layers_inserted, if r.terminated_early { "T" } else { "" });
    let (fast, time) = within(start.elapsed(), 600);
    Verdict::new(
        capped_ok && uncapped_fails && fast,
        format!(
            "M=25 r=1.0; capped idle at ratios 0/.05/.1/.2: {}; uncapped: {}; T = terminated; {time}",
            capped.iter().map(show).collect::<Vec<_>>().join("/"),
            uncapped.iter().map(|(x, r)| format!("{x}:{}", show(r))).collect::<Vec<_>>().join(" ")
        ),
    )
}

fn hyperparameter_robustness() -> Verdict {
    let start = Instant::now();
    let workloads: Vec<Workload> = (0..10).map(|s| generate_synthetic(&bell4_shaped(), s).unwrap()).collect();
    let mean_idle = |cfg: &SimConfig| mean(workloads.iter().map(|w| run(w, cfg).unwrap().idle_layers_inserted as f64));
    let base = config(SchedulerKind::Triage, 6, 0.8);
    let by_weight: Vec<f64> = [0.0, 0.25, 0.5, 0.75, 1.0]
        .iter()
        .map(|&w_u| {
            let mut cfg = base.clone();
            cfg.weights = HeuristicWeights { w_u, w_c: 1.0 - w_u };
            mean_idle(&cfg)
        })
        .collect();
    let by_tau: Vec<f64> = [2, 4, 8, 16]
        .iter()
        .map(|&tau| {
            let mut cfg = base.clone();
            cfg.trigger.tau_emergency = tau;
            mean_idle(&cfg)
        })
        .collect();
    let spread = |xs: &[f64]| {
        let max = xs.iter().copied().fold(f64::MIN, f64::max);
        let min = xs.iter().copied().fold(f64::MAX, f64::min);
        if min == 0.0 {
            if max == 0.0 { 1.0 } else { f64::INFINITY }
        } else {
            max / min
        }
    };
    let w_ratio = spread(&by_weight);
    let tau_ratio = spread(&by_tau[..3]);
    let (fast, time) = within(start.elapsed(), 600);
    let fmt = |xs: &[f64]| xs.iter().map(|x| format!("{x:.1}")).collect::<Vec<_>>().join("/");
    Verdict::new(
        w_ratio <= 1.5 && tau_ratio <= 1.5 && fast,
        format!(
            "M=6 r=0.8; w_u 0..1 idle {} (max/min {w_ratio:.2}); tau 2/4/8 idle {} (max/min {tau_ratio:.2}), tau 16 {:.1}; {time}",
            fmt(&by_weight),
            fmt(&by_tau[..3]),
            by_tau[3]
        ),
    )
}

fn random_config(rng: &mut ChaCha8Rng) -> (Workload, SimConfig) {
    let n = rng.random_range(2..=6);
    let params = SyntheticParams {
        n_lqubits: n,
        n_layers: rng.random_range(10..=60),
        critical_density: rng.random_range(0.05..0.5),
        merge_probability: rng.random_range(0.0..0.6),
        route_length_max: rng.random_range(2..=n.min(4)),
        rotate_probability: 0.1,
    };
    let w = generate_synthetic(&params, rng.random()).unwrap();
    let kind = SchedulerKind::ALL[rng.random_range(0..SchedulerKind::ALL.len())];
    let mut cfg = config(kind, rng.random_range(1..=12), [0.6, 0.8, 1.0, 1.3][rng.random_range(0..4)]);
    cfg.seed = rng.random();
    cfg.jitter.enabled = rng.random_bool(0.5);
    cfg.delay.ratio = [0.0, 0.05][rng.random_range(0..2)];
    cfg.event_log = true;
    (w, cfg)
}

fn determinism() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut diffs = Vec::new();
    for i in 0..20 {
        let (w, cfg) = random_config(&mut rng);
        let a = run(&w, &cfg).unwrap();
        let b = run(&w, &cfg).unwrap();
        if a.csv_row("det") != b.csv_row("det") || a.event_log != b.event_log || a.event_log.is_none() {
            diffs.push(format!("config {i} ({})", cfg.scheduler));
        }
    }
    let (fast, time) = within(start.elapsed(), 120);
    Verdict::new(
        diffs.is_empty() && fast,
        if diffs.is_empty() {
            format!("20/20 configs byte-identical (metrics row and event log); {time}")
        } else {
            format!("differences in {}; {time}", diffs.join(", "))
        },
    )
}

fn termination_rule() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bell4.lli"), BELL4).unwrap();
    let write = |name: &str, decoders: usize, speed: f64| {
        let body = format!(
            "[workload]\npath = \"bell4.lli\"\n[pool]\ndecoders = {decoders}\nspeed = {speed}\n[output]\nevent_log = \"{name}.csv\"\nevent_log_cap = 10000000\n"
        );
        fs::write(dir.path().join(format!("{name}.toml")), body).unwrap();
    };
    let triage = |name: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_triage"))
            .args(["run", "--config", &format!("{name}.toml")])
            .current_dir(dir.path())
            .output()
            .unwrap();
        let row = String::from_utf8_lossy(&out.stdout).lines().nth(1).unwrap_or("").to_string();
        let idle: usize = row.split(',').nth(4).and_then(|x| x.parse().ok()).unwrap_or(usize::MAX);
        let log = fs::read_to_string(dir.path().join(format!("{name}.csv"))).unwrap_or_default();
        (out.status.code(), idle, log)
    };

    write("starved", 1, 0.1);
    write("healthy", 8, 1.0);
    let (code, idle, log) = triage("starved");
    let (healthy_code, healthy_idle, _) = triage("healthy");

    // the terminate event must directly follow the 411th idle layer
    let mut idles = 0;
    let mut at_terminate = None;
    for line in log.lines() {
        match line.split(',').nth(1) {
            Some("idle") => idles += 1,
            Some("terminate") => at_terminate = Some(idles),
            _ => {}
        }
    }
    let threshold = 10 * 41;
    let pass = code == Some(2)
        && idle == threshold + 1
        && at_terminate == Some(threshold + 1)
        && healthy_code == Some(0)
        && healthy_idle <= threshold;
    Verdict::new(
        pass,
        format!(
            "starved exit {code:?} with {idle} idle layers (limit 10 x 41 = {threshold}), terminate logged after idle #{}; healthy exit {healthy_code:?} with {healthy_idle}",
            at_terminate.map_or("none".to_string(), |x| x.to_string())
        ),
    )
}

fn main() -> ExitCode {
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut inv = Invariants::default();
    let mut verdicts: Vec<(u32, Verdict)> = Vec::new();
    let mut report = |id: u32, v: Verdict| {
        println!("criterion {id}: {} - {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        verdicts.push((id, v));
    };
    report(1, sliding_flatness(&mut inv));
    report(2, parallelism_ordering(&mut inv));
    report(3, constrained_dominance(&mut inv));
    report(4, independence(&inv));
    report(5, planner_oracle());
    report(6, planner_scaling());
    report(7, jitter_calibration());
    report(8, scope_cap_robustness());
    report(9, hyperparameter_robustness());
    report(10, determinism());
    report(11, termination_rule());

    let failed: Vec<u32> = verdicts.iter().filter(|(_, v)| !v.pass).map(|(id, _)| *id).collect();
    let unexpected: Vec<u32> = failed.iter().copied().filter(|id| !KNOWN_FAILURES.contains(id)).collect();
    let recovered: Vec<u32> = KNOWN_FAILURES.iter().copied().filter(|id| !failed.contains(id)).collect();
    println!(
        "acceptance: {}/{} passed; known failures {:?}; unexpected failures {:?}",
        verdicts.len() - failed.len(),
        verdicts.len(),
        KNOWN_FAILURES,
        unexpected
    );
    if !recovered.is_empty() {
        println!("acceptance: listed as known failures but passed: {recovered:?}");
    }
    if !unexpected.is_empty() || (strict && !failed.is_empty()) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
