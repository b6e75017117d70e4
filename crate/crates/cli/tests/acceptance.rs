//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. `ACCEPTANCE_ONLY=1,5,10` runs a subset.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use mtlab::config::ExperimentConfig;
use mtlab::tables::Report;
use mtlab::{run_with, Command, Lab};
use mtlab_core::attackkit::{
    attack_in_chunks, combine_gradients, linearized_objective, linearized_objective_oracle, project, signed_direction,
    AttackConfig, AttackTrace, Budget, Combiner, Driver, ModelObjective, MultiTaskObjective,
};
use mtlab_core::diffcore::{finite_difference_check, DiffError, Tensor};
use mtlab_core::metrics::{ara, arp, relative_loss_change, transferability, MetricSnapshot, MetricValue, Orientation, TaskMetrics};
use mtlab_core::mtlnet::{
    standard_tasks, BranchedModel, LabeledBatch, Layout, SyntheticSpec, TaskSpec, DEFAULT_ANGLE_THRESHOLD,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const REFERENCE: &str = include_str!("../../../configs/reference.toml");
const SLACK: f64 = 1e-12;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict { passed, detail: detail.into() }
}

const ALL_COMBINERS: [Combiner; 6] =
    [Combiner::Single(0), Combiner::Single(1), Combiner::Single(2), Combiner::Total, Combiner::SignTotal, Combiner::Dgba];
const ALL_DRIVERS: [Driver; 3] = [Driver::Fgsm, Driver::Pgd, Driver::Apgd];

/// Random layout over `tasks` tasks whose partitions only ever refine.
fn random_layout(rng: &mut ChaCha8Rng, tasks: usize, blocks: usize) -> Layout {
    let mut parts: Vec<Vec<usize>> = vec![(0..tasks).collect()];
    let mut depths = Vec::with_capacity(blocks);
    for _ in 0..blocks {
        let splittable: Vec<usize> = (0..parts.len()).filter(|&i| parts[i].len() > 1).collect();
        if !splittable.is_empty() && rng.random_bool(0.45) {
            let i = splittable[rng.random_range(0..splittable.len())];
            let mut set = parts.remove(i);
            set.shuffle(rng);
            let cut = rng.random_range(1..set.len());
            let mut right = set.split_off(cut);
            set.sort();
            right.sort();
            parts.push(set);
            parts.push(right);
            parts.sort();
        }
        depths.push(parts.clone());
    }
    Layout::new(depths)
}

fn random_model(rng: &mut ChaCha8Rng, max_dim: usize) -> (BranchedModel, usize) {
    let d = rng.random_range(4..=max_dim);
    let blocks = rng.random_range(1..=4);
    let width = rng.random_range(3..=12);
    let layout = random_layout(rng, 3, blocks);
    let model = BranchedModel::build(layout, d, &[width], standard_tasks(3), rng.random()).expect("valid random model");
    (model, d)
}

fn teacher_batch(tasks: Vec<TaskSpec>, d: usize, rows: usize, seed: u64) -> LabeledBatch {
    let spec = SyntheticSpec { tasks, input_dim: d, train_size: rows, test_size: 1, correlation: 0.5, latent: 4, support: d, seed };
    spec.generate().expect("valid synthetic spec").train
}

fn feeds(batch: &LabeledBatch) -> Vec<Tensor> {
    let mut f = vec![batch.x.clone()];
    f.extend(batch.labels.iter().cloned());
    f
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    let mut resampled = 0;
    for i in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1_000 + i);
        let (model, d) = random_model(&mut rng, 64);
        let mut checked = false;
        for attempt in 0..50u64 {
            let batch = teacher_batch(standard_tasks(3), d, 2, 10_000 * i + attempt);
            let g = model.batch_graph(&batch).expect("graph");
            let f = feeds(&batch);
            let reports: Result<Vec<_>, DiffError> =
                g.losses.iter().map(|&l| finite_difference_check(&g.record, &f, l, &[g.x], 1e-5, 1e-6)).collect();
            match reports {
                Ok(reports) => {
                    for r in reports {
                        worst = worst.max(r.max_relative_error);
                        failures += usize::from(!r.passed);
                    }
                    checked = true;
                    break;
                }
                Err(DiffError::KinkProximity { .. }) => resampled += 1,
                Err(e) => panic!("finite-difference check failed to run: {e}"),
            }
        }
        failures += usize::from(!checked);
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        failures == 0 && worst <= 1e-6 && secs < 10.0,
        format!("50 models, max relative error {worst:.2e} (tol 1e-6), {failures} failures, {resampled} kink resamples, {secs:.1}s (< 10s)"),
    )
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = 0;
    let mut instances = 0;
    while instances < 1000 {
        let n = rng.random_range(1..=4);
        let grads: Vec<Tensor> =
            (0..n).map(|_| Tensor::vector((0..10).map(|_| rng.random_range(-1.0..1.0)).collect())).collect();
        let losses: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..5.0)).collect();
        let c = combine_gradients(Combiner::Dgba, &grads, &losses).expect("combine");
        if c.data().iter().any(|v| v.abs() < 1e-6) {
            continue;
        }
        instances += 1;
        let beta = signed_direction(Combiner::Dgba, &grads, &losses).expect("direction");
        let oracle = linearized_objective_oracle(&grads, &losses).expect("oracle");
        let value = linearized_objective(beta.data(), &grads, &losses).expect("objective");
        if oracle.optimal != vec![beta.data().to_vec()] || value != oracle.value {
            failures += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(failures == 0 && secs < 30.0, format!("1000 tie-free d=10 instances, {failures} failures, {secs:.1}s (< 30s)"))
}

fn random_budget(rng: &mut ChaCha8Rng) -> Budget {
    let eps = if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.0..0.3) };
    Budget::new(eps)
}

fn trace_violations(trace: &AttackTrace, x0: &Tensor, budget: &Budget) -> usize {
    trace.iterates.iter().chain(std::iter::once(&trace.x_adv)).filter(|x| !budget.contains(x, x0, SLACK)).count()
}

/// Random small-model attack traces cycling through every driver and combiner.
fn random_traces(seed: u64, count: usize) -> Vec<(AttackTrace, Tensor, Budget)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let (model, d) = random_model(&mut rng, 12);
        let rows = rng.random_range(1..=3);
        let batch = teacher_batch(standard_tasks(3), d, rows, rng.random());
        let driver = ALL_DRIVERS[i % 3];
        let combiner = ALL_COMBINERS[(i / 3) % 6];
        let budget = random_budget(&mut rng);
        let mut config = AttackConfig::for_driver(driver, combiner, budget.epsilon);
        config.random_start = driver == Driver::Pgd && rng.random_bool(0.5);
        config.record_iterates = true;
        config.seed = rng.random();
        let trace = attack_in_chunks(&model, &batch, &config, rows).expect("attack").traces.remove(0);
        out.push((trace, batch.x, budget));
    }
    out
}

fn criterion_3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut projection_violations = 0;
    for _ in 0..100_000 {
        let d = rng.random_range(1..=16);
        let origin = Tensor::vector((0..d).map(|_| rng.random_range(0.0..=1.0)).collect());
        let candidate = Tensor::vector((0..d).map(|_| rng.random_range(-2.0..3.0)).collect());
        let budget = random_budget(&mut rng);
        if !budget.contains(&project(&candidate, &origin, &budget), &origin, SLACK) {
            projection_violations += 1;
        }
    }
    let traces = random_traces(33, 1000);
    let iterates: usize = traces.iter().map(|(t, _, _)| t.iterates.len()).sum();
    let trace_violations: usize = traces.iter().map(|(t, x0, b)| trace_violations(t, x0, b)).sum();
    verdict(
        projection_violations == 0 && trace_violations == 0,
        format!(
            "1e5 projections: {projection_violations} violations; 1000 traces ({iterates} iterates): {trace_violations} violations (slack 1e-12)"
        ),
    )
}

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut changed = 0;
    let mut compared = 0;
    for _ in 0..500 {
        let n = rng.random_range(2..=4);
        let d = rng.random_range(4..=32);
        let grads: Vec<Tensor> =
            (0..n).map(|_| Tensor::vector((0..d).map(|_| rng.random_range(-1.0..1.0)).collect())).collect();
        let losses: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..5.0)).collect();
        let scales: Vec<f64> = (0..n).map(|_| 10f64.powf(rng.random_range(-3.0..3.0))).collect();
        let scaled_g: Vec<Tensor> = grads.iter().zip(&scales).map(|(g, s)| g.scale(*s)).collect();
        let scaled_l: Vec<f64> = losses.iter().zip(&scales).map(|(l, s)| l * s).collect();
        let c = combine_gradients(Combiner::Dgba, &grads, &losses).expect("combine");
        let a = signed_direction(Combiner::Dgba, &grads, &losses).expect("direction");
        let b = signed_direction(Combiner::Dgba, &scaled_g, &scaled_l).expect("direction");
        let floor = 1e-9 * c.linf_norm();
        for j in 0..d {
            if c.data()[j].abs() > floor {
                compared += 1;
                changed += usize::from(a.data()[j] != b.data()[j]);
            }
        }
    }
    // Task 1 dominates once it is scaled by 10: Total flips, DGBA does not.
    let g = [Tensor::vector(vec![1.0, 1.0]), Tensor::vector(vec![-0.5, 2.0])];
    let l = [1.0, 1.0];
    let gs = [g[0].clone(), g[1].scale(10.0)];
    let ls = [1.0, 10.0];
    let total_flips = signed_direction(Combiner::Total, &g, &l).unwrap() != signed_direction(Combiner::Total, &gs, &ls).unwrap();
    let dgba_stays = signed_direction(Combiner::Dgba, &g, &l).unwrap() == signed_direction(Combiner::Dgba, &gs, &ls).unwrap();
    verdict(
        changed == 0 && total_flips && dgba_stays,
        format!("500 rescaled instances, {compared} tie-free components, {changed} sign changes; dominance instance: Total flips = {total_flips}, DGBA unchanged = {dgba_stays}"),
    )
}

fn criterion_5() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut notes = Vec::new();
    let mut ok = true;

    // one task: DGBA, Total and Single(0) coincide for every driver and head kind
    let mut single_mismatch = 0;
    for (k, task) in [TaskSpec::classification(0, 4), TaskSpec::regression(0, 3), TaskSpec::unit_vector(0, 3, DEFAULT_ANGLE_THRESHOLD)]
        .into_iter()
        .enumerate()
    {
        for rep in 0..4u64 {
            let d = rng.random_range(4..=16);
            let model = BranchedModel::build(Layout::all_shared(1, 3), d, &[8], vec![task.clone()], 50 + rep).unwrap();
            let batch = teacher_batch(vec![task.clone()], d, 3, 100 * k as u64 + rep);
            for driver in ALL_DRIVERS {
                let run = |c: Combiner| attack_in_chunks(&model, &batch, &AttackConfig::for_driver(driver, c, 8.0 / 255.0), 3).unwrap();
                let base = run(Combiner::Single(0));
                for c in [Combiner::Total, Combiner::Dgba] {
                    let other = run(c);
                    single_mismatch += usize::from(other.x_adv != base.x_adv || other.traces[0].final_losses != base.traces[0].final_losses);
                }
            }
        }
    }
    ok &= single_mismatch == 0;
    notes.push(format!("n=1 mismatches {single_mismatch}"));

    // FGSM is one PGD step of size ε
    let mut fgsm_mismatch = 0;
    for i in 0..30 {
        let (model, d) = random_model(&mut rng, 16);
        let batch = teacher_batch(standard_tasks(3), d, 2, 500 + i);
        let eps = rng.random_range(0.0..0.2);
        let combiner = ALL_COMBINERS[i as usize % 6];
        let fgsm = attack_in_chunks(&model, &batch, &AttackConfig::fgsm(combiner, eps), 2).unwrap();
        let mut pgd = AttackConfig::pgd(combiner, eps);
        pgd.steps = 1;
        pgd.step_size = eps;
        let pgd = attack_in_chunks(&model, &batch, &pgd, 2).unwrap();
        fgsm_mismatch += usize::from(fgsm.x_adv != pgd.x_adv);
    }
    ok &= fgsm_mismatch == 0;
    notes.push(format!("FGSM vs 1-step PGD mismatches {fgsm_mismatch}"));

    // APGD with α = 1 and no checkpoints moves by plain projected sign steps
    let mut apgd_mismatch = 0;
    let mut apgd_steps = 0;
    for i in 0..30 {
        let (model, d) = random_model(&mut rng, 16);
        let batch = teacher_batch(standard_tasks(3), d, 2, 700 + i);
        let combiner = ALL_COMBINERS[i as usize % 6];
        let mut config = AttackConfig::apgd(combiner, 8.0 / 255.0);
        config.momentum = 1.0;
        config.checkpoints.clear();
        config.record_iterates = true;
        let trace = attack_in_chunks(&model, &batch, &config, 2).unwrap().traces.remove(0);
        let objective = ModelObjective::new(&model, &batch).unwrap();
        for w in trace.iterates.windows(2) {
            let (l, g) = objective.losses_and_gradients(&w[0]).unwrap();
            let mut candidate = w[0].clone();
            candidate.axpy(config.step_size, &signed_direction(combiner, &g, &l).unwrap());
            apgd_mismatch += usize::from(project(&candidate, &batch.x, &config.budget) != w[1]);
            apgd_steps += 1;
        }
    }
    ok &= apgd_mismatch == 0;
    notes.push(format!("APGD alpha=1 step mismatches {apgd_mismatch}/{apgd_steps}"));

    // the best objective never decreases
    let traces = random_traces(55, 300);
    let non_monotone = traces.iter().filter(|(t, _, _)| t.best_objectives().windows(2).any(|w| w[1] < w[0])).count();
    ok &= non_monotone == 0;
    notes.push(format!("non-monotone best-objective traces {non_monotone}/300"));
    verdict(ok, notes.join("; "))
}

fn criterion_6() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let eta = 1e-4;
    let mut worst: f64 = 0.0;
    let mut worst_at_tenth = 0.0;
    let mut instances = 0;
    let mut flat = 0;
    while instances < 100 {
        let (model, d) = random_model(&mut rng, 32);
        let rows = rng.random_range(1..=4);
        let batch = teacher_batch(standard_tasks(3), d, rows, rng.random());
        let objective = ModelObjective::new(&model, &batch).unwrap();
        let (l, g) = objective.losses_and_gradients(&batch.x).unwrap();
        let beta = signed_direction(Combiner::Dgba, &g, &l).unwrap();
        let predicted: f64 = eta * g.iter().zip(&l).map(|(g, l)| beta.dot(g) / l).sum::<f64>();
        // every unit dead: the ratio has no denominator
        if predicted.abs() < 1e-12 {
            flat += 1;
            continue;
        }
        instances += 1;
        let mut x = batch.x.clone();
        x.axpy(eta, &beta);
        let measured = relative_loss_change(&l, &objective.losses(&x).unwrap()).unwrap();
        let err = (measured - predicted).abs() / predicted.abs();
        if err > worst {
            let mut x = batch.x.clone();
            x.axpy(eta / 10.0, &beta);
            let tenth = relative_loss_change(&l, &objective.losses(&x).unwrap()).unwrap();
            worst_at_tenth = (tenth - predicted / 10.0).abs() / (predicted / 10.0).abs();
        }
        worst = worst.max(err);
    }
    verdict(
        worst <= 0.01,
        format!("100 instances at eta=1e-4, worst relative error {worst:.2e} (tol 1e-2), same instance at eta=1e-5 {worst_at_tenth:.2e}; {flat} flat instances redrawn"),
    )
}

fn snapshot(tasks: &[&[(&str, Orientation, f64)]]) -> MetricSnapshot {
    MetricSnapshot {
        tasks: tasks
            .iter()
            .enumerate()
            .map(|(task, metrics)| TaskMetrics {
                task,
                metrics: metrics.iter().map(|&(name, orientation, value)| MetricValue { name: name.into(), orientation, value }).collect(),
            })
            .collect(),
    }
}

fn criterion_10() -> Verdict {
    use Orientation::{HigherBetter, LowerBetter};
    let lower = snapshot(&[&[("mean-abs-error", LowerBetter, 1.0)]]);
    let lower_after = snapshot(&[&[("mean-abs-error", LowerBetter, 1.5)]]);
    let higher = snapshot(&[&[("accuracy", HigherBetter, 40.0), ("within-angle", HigherBetter, 60.0)]]);
    let higher_after = snapshot(&[&[("accuracy", HigherBetter, 20.0), ("within-angle", HigherBetter, 30.0)]]);
    let checks: Vec<(&str, f64, f64)> = vec![
        ("ara identical", ara(&[0.7, 0.2], &[0.7, 0.2]).unwrap(), 0.0),
        ("ara (0.5, 0.9) vs (1, 1)", ara(&[0.5, 0.9], &[1.0, 1.0]).unwrap(), -0.3),
        ("ara doubled", ara(&[0.8], &[0.4]).unwrap(), 1.0),
        ("arp unchanged", arp(&higher, &higher).unwrap().overall, 0.0),
        ("arp lower-better 1 -> 1.5", arp(&lower, &lower_after).unwrap().overall, 50.0),
        ("arp higher-better halved", arp(&higher, &higher_after).unwrap().per_task[0], 50.0),
        ("loss change unchanged", relative_loss_change(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 0.0),
        ("loss change (1,2) -> (2,2)", relative_loss_change(&[1.0, 2.0], &[2.0, 2.0]).unwrap(), 1.0),
        ("loss change doubled, n=3", relative_loss_change(&[0.5, 1.0, 2.0], &[1.0, 2.0, 4.0]).unwrap(), 3.0),
        ("transferability 50 / {10, 15}", transferability(&[50.0, 10.0, 15.0], 0).unwrap().value, 0.25),
        ("transferability zero spill", transferability(&[0.0, 20.0, 0.0], 1).unwrap().value, 0.0),
    ];
    let bad: Vec<String> =
        checks.iter().filter(|(_, got, want)| (got - want).abs() > 1e-12).map(|(n, got, want)| format!("{n}: {got} != {want}")).collect();
    verdict(bad.is_empty(), if bad.is_empty() { format!("{} examples within 1e-12", checks.len()) } else { bad.join("; ") })
}

fn reference_config() -> ExperimentConfig {
    ExperimentConfig::from_toml(REFERENCE).expect("reference config parses")
}

/// Full reference run; returns the seconds spent on training plus the attack grid.
fn reference_run(out: &Path) -> f64 {
    let start = Instant::now();
    run_with(Command::Train, reference_config(), out).expect("train");
    run_with(Command::Attack, reference_config(), out).expect("attack");
    let sweep_secs = start.elapsed().as_secs_f64();
    run_with(Command::Diagnose, reference_config(), out).expect("diagnose");
    run_with(Command::Advtrain, reference_config(), out).expect("advtrain");
    sweep_secs
}

fn with_report<T>(out: &Path, f: impl FnOnce(&Report) -> T) -> T {
    let lab = Lab::open(reference_config(), out).expect("open run");
    let cells = lab.store().cells();
    let report = Report::new(lab.config(), lab.models(), &cells);
    f(&report)
}

fn criterion_7(out: &Path, secs: f64) -> Verdict {
    with_report(out, |report| {
        let sweep = report.sweep();
        let mut worst = f64::INFINITY;
        let mut where_worst = String::new();
        for driver in [Driver::Pgd, Driver::Apgd] {
            let mut by_eps: BTreeMap<u64, Vec<(Combiner, f64)>> = BTreeMap::new();
            for p in sweep.iter().filter(|p| p.driver == driver && p.epsilon >= 2.0 / 255.0 - 1e-12) {
                by_eps.entry(p.epsilon.to_bits()).or_default().push((p.combiner, p.mean_arp.unwrap_or(f64::NAN)));
            }
            for (eps, points) in by_eps {
                let dgba = points.iter().find(|(c, _)| *c == Combiner::Dgba).map_or(f64::NAN, |p| p.1);
                let rival = points.iter().filter(|(c, _)| *c != Combiner::Dgba).map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
                let margin = dgba - rival;
                if !(margin >= worst) {
                    worst = margin;
                    where_worst = format!("{driver} at {}/255", (f64::from_bits(eps) * 255.0).round());
                }
            }
        }
        verdict(
            worst >= 0.0 && secs < 600.0,
            format!("smallest DGBA margin over the best rival {worst:+.3} ARP points ({where_worst}); train+attack {secs:.0}s (< 600s)"),
        )
    })
}

fn criterion_8(out: &Path) -> Verdict {
    with_report(out, |report| {
        let rows = report.spearman();
        let rhos: Vec<Option<f64>> = (0..3)
            .map(|x| rows.iter().find(|r| r.correlation == 0.8 && r.attacked == x).and_then(|r| r.rho))
            .collect();
        let transfer = report.transferability();
        let mean_of = |c: f64, model: &str, x: usize| {
            transfer.iter().find(|t| t.correlation == c && t.model_id == model && t.attacked == x).and_then(|t| t.mean)
        };
        let pairs: Vec<(Option<f64>, Option<f64>)> = (0..3).map(|x| (mean_of(0.0, "0L", x), mean_of(0.8, "5L", x))).collect();
        let rho_ok = rhos.iter().all(|r| r.is_some_and(|r| r > 0.0));
        let order_ok = pairs.iter().all(|(ind, all)| matches!((ind, all), (Some(a), Some(b)) if a < b));
        let fmt = |v: &Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.3}"));
        verdict(
            rho_ok && order_ok,
            format!(
                "spearman at rho=0.8 per Single-x: [{}]; IND(rho=0) vs AS(rho=0.8): [{}]",
                rhos.iter().map(fmt).collect::<Vec<_>>().join(", "),
                pairs.iter().map(|(a, b)| format!("{} < {}", fmt(a), fmt(b))).collect::<Vec<_>>().join(", ")
            ),
        )
    })
}

fn criterion_9(out: &Path) -> Verdict {
    with_report(out, |report| {
        let Some(mean) = report.robustness_mean() else { return verdict(false, "no robustness matrix recorded") };
        let row = |name: &str| mean.rows.iter().find(|r| r.0 == name).map(|r| r.2.clone()).expect("row present");
        let clean = row("clean");
        let fat = row("FAT-DGBA");
        let ratios: Vec<f64> = fat.iter().zip(&clean).map(|(f, c)| f / c).collect();
        let worst = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let worst_attack = &mean.attacks[ratios.iter().position(|&r| r == worst).unwrap()];
        let halved = ratios.iter().all(|&r| r <= 0.5);

        let matrices = report.robustness();
        let dgba_max_seeds = matrices
            .iter()
            .filter(|(_, m)| {
                m.rows.iter().filter(|r| r.defense != "clean").all(|r| {
                    ALL_DRIVERS.iter().all(|driver| {
                        let prefix = format!("{driver}-");
                        let cells: Vec<_> = r.cells.iter().filter(|c| c.attack.starts_with(&prefix)).collect();
                        let dgba = cells.iter().find(|c| c.attack == format!("{driver}-DGBA")).map_or(f64::NAN, |c| c.arp);
                        cells.iter().all(|c| c.arp <= dgba)
                    })
                })
            })
            .count();
        let majority = 2 * dgba_max_seeds > matrices.len();
        verdict(
            halved && majority,
            format!(
                "FAT-DGBA/clean ARP ratio at 8/255: worst {worst:.3} under {worst_attack} (need <= 0.5 for every attack); DGBA column maximal on every FAT row in {dgba_max_seeds}/{} seeds (need a majority)",
                matrices.len()
            ),
        )
    })
}

fn tree_files(out: &Path) -> BTreeMap<String, Vec<u8>> {
    let lab = Lab::open(reference_config(), out).expect("open run");
    let mut files = BTreeMap::new();
    files.insert("records.json".to_string(), fs::read(lab.run_dir().join("records.json")).expect("records.json"));
    for entry in fs::read_dir(out.join("tables")).expect("tables dir") {
        let path = entry.expect("dir entry").path();
        files.insert(format!("tables/{}", path.file_name().unwrap().to_string_lossy()), fs::read(&path).expect("table"));
    }
    files
}

fn criterion_11(first: &Path, second: &Path) -> Verdict {
    reference_run(second);
    let a = tree_files(first);
    let b = tree_files(second);
    let differing: Vec<&String> = a.keys().chain(b.keys()).filter(|k| a.get(*k) != b.get(*k)).collect();
    verdict(
        differing.is_empty() && a.len() > 1,
        if differing.is_empty() {
            format!("records.json and {} CSV tables byte-identical across two runs", a.len() - 1)
        } else {
            format!("differing files: {differing:?}")
        },
    )
}

fn main() {
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut record = |n: usize, name: &'static str, f: &dyn Fn() -> Verdict| {
        if wanted(n) {
            let v = f();
            println!("{} criterion {n:>2} ({name}): {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
            results.push((n, name, v));
        }
    };
    record(1, "gradient oracle", &criterion_1);
    record(2, "sign rounding optimality", &criterion_2);
    record(3, "budget safety", &criterion_3);
    record(4, "rescaling invariance", &criterion_4);
    record(5, "degeneracies", &criterion_5);
    record(6, "first-order consistency", &criterion_6);
    record(10, "metric formulas", &criterion_10);

    if [7, 8, 9, 11].iter().any(|&n| wanted(n)) {
        let first = tempfile::tempdir().expect("temp dir");
        let secs = reference_run(first.path());
        record(7, "attack ordering on the reference grid", &|| criterion_7(first.path(), secs));
        record(8, "transferability vs sharing", &|| criterion_8(first.path()));
        record(9, "adversarial training robustness", &|| criterion_9(first.path()));
        if wanted(11) {
            let second = tempfile::tempdir().expect("temp dir");
            record(11, "determinism", &|| criterion_11(first.path(), second.path()));
        }
    }

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.passed).map(|r| r.0).collect();
    println!("acceptance: {} passed, {} failed", results.len() - failed.len(), failed.len());
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
