use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::Tensor;
use crate::metrics::mean_relative_loss_change;
use crate::mtlnet::{BranchedModel, LabeledBatch, ModelGraph};

use super::combine::{gradient_dominance_ratio, project, signed_direction, Budget, Combiner};
use super::{AttackConfig, AttackError, AttackStep, AttackTrace, Driver};

/// Per-task losses and input gradients of a batch, as seen by an attack.
pub trait MultiTaskObjective {
    fn task_count(&self) -> usize;

    /// Floored per-task losses at `x`.
    fn losses(&self, x: &Tensor) -> Result<Vec<f64>, AttackError>;

    /// Floored per-task losses and the input gradient of every task loss.
    fn losses_and_gradients(&self, x: &Tensor) -> Result<(Vec<f64>, Vec<Tensor>), AttackError>;
}

/// A model's task losses on a fixed set of labels.
#[derive(Debug, Clone)]
pub struct ModelObjective {
    graph: ModelGraph,
    labels: Vec<Tensor>,
}

impl ModelObjective {
    pub fn new(model: &BranchedModel, batch: &LabeledBatch) -> Result<Self, AttackError> {
        Ok(Self { graph: model.batch_graph(batch)?, labels: batch.labels.clone() })
    }
}

impl MultiTaskObjective for ModelObjective {
    fn task_count(&self) -> usize {
        self.labels.len()
    }

    fn losses(&self, x: &Tensor) -> Result<Vec<f64>, AttackError> {
        Ok(self.graph.task_losses(x, &self.labels)?)
    }

    fn losses_and_gradients(&self, x: &Tensor) -> Result<(Vec<f64>, Vec<Tensor>), AttackError> {
        Ok(self.graph.losses_and_input_gradients(x, &self.labels)?)
    }
}

struct GraphObjective<'a> {
    graph: &'a ModelGraph,
    labels: &'a [Tensor],
}

impl MultiTaskObjective for GraphObjective<'_> {
    fn task_count(&self) -> usize {
        self.labels.len()
    }

    fn losses(&self, x: &Tensor) -> Result<Vec<f64>, AttackError> {
        Ok(self.graph.task_losses(x, self.labels)?)
    }

    fn losses_and_gradients(&self, x: &Tensor) -> Result<(Vec<f64>, Vec<Tensor>), AttackError> {
        Ok(self.graph.losses_and_input_gradients(x, self.labels)?)
    }
}

/// Checkpoint iterations for an `n_iter`-step APGD run: fractions
/// `p₀ = 0, p₁ = 0.22, p_{j+1} = p_j + max(p_j − p_{j−1} − 0.03, 0.06)` scaled
/// by `n_iter`, rounded up, restricted to `[1, n_iter)`.
pub fn checkpoint_schedule(n_iter: usize) -> Vec<usize> {
    let mut p: Vec<f64> = vec![0.0, 0.22];
    while *p.last().expect("non-empty") < 1.0 {
        let j = p.len() - 1;
        p.push(p[j] + (p[j] - p[j - 1] - 0.03).max(0.06));
    }
    let mut out: Vec<usize> = Vec::new();
    for f in p {
        let k = (f * n_iter as f64 - 1e-9).ceil().max(0.0) as usize;
        if k >= 1 && k < n_iter && out.last().is_none_or(|&last| k > last) {
            out.push(k);
        }
    }
    out
}

/// Objective tracked by the drivers: the summed per-task relative loss change
/// for DGBA, the attacked task's relative change for Single, and the relative
/// change of the summed loss for Total and SignTotal. All are 0 at the clean
/// input.
fn tracked_objective(combiner: Combiner, initial: &[f64], current: &[f64]) -> f64 {
    match combiner {
        Combiner::Dgba => initial.iter().zip(current).map(|(l, c)| (c - l) / l).sum(),
        Combiner::Single(j) => (current[j] - initial[j]) / initial[j],
        Combiner::Total | Combiner::SignTotal => {
            let l: f64 = initial.iter().sum();
            let c: f64 = current.iter().sum();
            (c - l) / l
        }
    }
}

fn dominance(grads: &[Tensor]) -> f64 {
    if grads.len() < 2 {
        1.0
    } else {
        gradient_dominance_ratio(grads).unwrap_or(f64::INFINITY)
    }
}

struct Recorder<'a> {
    config: &'a AttackConfig,
    origin: &'a Tensor,
    initial: Vec<f64>,
    steps: Vec<AttackStep>,
    iterates: Vec<Tensor>,
    best: f64,
}

impl<'a> Recorder<'a> {
    fn new(config: &'a AttackConfig, origin: &'a Tensor, initial: Vec<f64>) -> Self {
        Self { config, origin, initial, steps: Vec::new(), iterates: Vec::new(), best: f64::NEG_INFINITY }
    }

    fn objective(&self, losses: &[f64]) -> f64 {
        tracked_objective(self.config.combiner, &self.initial, losses)
    }

    fn push(&mut self, x: &Tensor, losses: &[f64], grads: &[Tensor], step_size: f64, restarted: bool) -> f64 {
        let objective = self.objective(losses);
        self.best = self.best.max(objective);
        let budget = &self.config.budget;
        let in_range = x.data().iter().all(|&v| v >= budget.lower && v <= budget.upper);
        self.steps.push(AttackStep {
            step: self.steps.len(),
            losses: losses.to_vec(),
            relative_loss_change: mean_relative_loss_change(&self.initial, losses).unwrap_or(f64::NAN),
            objective,
            best_objective: self.best,
            step_size,
            dominance_ratio: dominance(grads),
            linf_distance: x.linf_distance(self.origin),
            in_range,
            restarted,
        });
        if self.config.record_iterates {
            self.iterates.push(x.clone());
        }
        objective
    }

    fn finish(self, x_adv: Tensor, final_losses: Vec<f64>) -> AttackTrace {
        AttackTrace {
            driver: self.config.driver,
            combiner: self.config.combiner,
            epsilon: self.config.budget.epsilon,
            initial_losses: self.initial,
            steps: self.steps,
            x_adv,
            final_losses,
            iterates: self.iterates,
        }
    }
}

fn step(x: &Tensor, direction: &Tensor, eta: f64, origin: &Tensor, budget: &Budget) -> Tensor {
    let mut candidate = x.clone();
    candidate.axpy(eta, direction);
    project(&candidate, origin, budget)
}

fn prepare<O: MultiTaskObjective + ?Sized>(
    objective: &O,
    x0: &Tensor,
    config: &AttackConfig,
) -> Result<(Vec<f64>, Vec<Tensor>), AttackError> {
    config.validate()?;
    config.combiner.check_tasks(objective.task_count())?;
    objective.losses_and_gradients(x0)
}

/// Runs the driver selected by `config` against `objective`, starting from the
/// clean input `x0`.
pub fn attack_objective<O: MultiTaskObjective + ?Sized>(
    objective: &O,
    x0: &Tensor,
    config: &AttackConfig,
) -> Result<AttackTrace, AttackError> {
    match config.driver {
        Driver::Fgsm | Driver::Pgd => run_pgd(objective, x0, config),
        Driver::Apgd => run_apgd(objective, x0, config),
    }
}

fn run_pgd<O: MultiTaskObjective + ?Sized>(
    objective: &O,
    x0: &Tensor,
    config: &AttackConfig,
) -> Result<AttackTrace, AttackError> {
    let (initial, initial_grads) = prepare(objective, x0, config)?;
    let budget = &config.budget;
    let eta = if config.driver == Driver::Fgsm { budget.epsilon } else { config.step_size };
    let mut rec = Recorder::new(config, x0, initial.clone());
    if budget.epsilon == 0.0 {
        rec.push(x0, &initial, &initial_grads, eta, false);
        return Ok(rec.finish(x0.clone(), initial));
    }

    let (mut x, mut losses, mut grads) = if config.random_start && config.driver == Driver::Pgd {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut start = x0.clone();
        for v in start.data_mut() {
            *v += rng.random_range(-budget.epsilon..=budget.epsilon);
        }
        let start = project(&start, x0, budget);
        let (l, g) = objective.losses_and_gradients(&start)?;
        (start, l, g)
    } else {
        (x0.clone(), initial.clone(), initial_grads)
    };
    rec.push(&x, &losses, &grads, eta, false);

    let mut stop_at: Option<usize> = None;
    for k in 1..=config.steps {
        let direction = signed_direction(config.combiner, &grads, &losses)?;
        x = step(&x, &direction, eta, x0, budget);
        (losses, grads) = objective.losses_and_gradients(&x)?;
        rec.push(&x, &losses, &grads, eta, false);
        if let Some(es) = config.early_stop {
            if stop_at.is_none() && rec.steps[k].relative_loss_change > es.threshold {
                stop_at = Some(k + es.extra_steps);
            }
            if stop_at.is_some_and(|s| k >= s) {
                break;
            }
        }
    }
    Ok(rec.finish(x, losses))
}

fn run_apgd<O: MultiTaskObjective + ?Sized>(
    objective: &O,
    x0: &Tensor,
    config: &AttackConfig,
) -> Result<AttackTrace, AttackError> {
    let (initial, initial_grads) = prepare(objective, x0, config)?;
    let budget = &config.budget;
    let alpha = config.momentum;
    let mut eta = config.step_size;
    let mut rec = Recorder::new(config, x0, initial.clone());
    let f0 = rec.push(x0, &initial, &initial_grads, eta, false);
    if budget.epsilon == 0.0 {
        return Ok(rec.finish(x0.clone(), initial));
    }

    let direction = signed_direction(config.combiner, &initial_grads, &initial)?;
    let x1 = step(x0, &direction, eta, x0, budget);
    let (l1, g1) = objective.losses_and_gradients(&x1)?;
    let f1 = rec.push(&x1, &l1, &g1, eta, false);

    let mut fvals = vec![f0, f1];
    let (mut x_max, mut f_max, mut l_max) =
        if f1 > f0 { (x1.clone(), f1, l1.clone()) } else { (x0.clone(), f0, initial.clone()) };
    let mut g_max = if f1 > f0 { g1.clone() } else { initial_grads.clone() };

    let mut x_prev = x0.clone();
    let (mut x_cur, mut l_cur, mut g_cur) = (x1, l1, g1);
    let mut last_check = 0usize;
    let mut reduced_last = false;
    let mut f_max_last_check = f0;

    for k in 1..config.steps {
        let direction = signed_direction(config.combiner, &g_cur, &l_cur)?;
        let z = step(&x_cur, &direction, eta, x0, budget);
        // x + α(z − x) + (1 − α)(x − x_prev), arranged so that α = 1 gives z exactly
        let mut candidate = z.scale(alpha);
        candidate.axpy(1.0 - alpha, &x_cur.zip_map(&x_prev, |a, b| 2.0 * a - b).expect("same shape"));
        let mut x_next = project(&candidate, x0, budget);
        let (mut l_next, mut g_next) = objective.losses_and_gradients(&x_next)?;
        let f_next = rec.objective(&l_next);
        if f_next > f_max {
            x_max = x_next.clone();
            f_max = f_next;
            l_max = l_next.clone();
            g_max = g_next.clone();
        }
        fvals.push(f_next);

        let mut restarted = false;
        if config.checkpoints.contains(&k) {
            let interval = k - last_check;
            let increases = (last_check..k).filter(|&t| fvals[t + 1] > fvals[t]).count();
            let cond1 = (increases as f64) < 0.75 * interval as f64;
            let cond2 = !reduced_last && f_max <= f_max_last_check;
            if cond1 || cond2 {
                eta /= 2.0;
                restarted = true;
            }
            reduced_last = restarted;
            f_max_last_check = f_max;
            last_check = k;
        }
        rec.push(&x_next, &l_next, &g_next, eta, restarted);
        if restarted {
            x_next = x_max.clone();
            l_next = l_max.clone();
            g_next = g_max.clone();
            *fvals.last_mut().expect("non-empty") = f_max;
        }
        x_prev = std::mem::replace(&mut x_cur, x_next);
        l_cur = l_next;
        g_cur = g_next;
    }
    Ok(rec.finish(x_max, l_max))
}

fn expect_driver(config: &AttackConfig, driver: Driver) -> Result<(), AttackError> {
    if config.driver != driver {
        return Err(AttackError::InvalidConfig(format!("expected a {driver} configuration, got {}", config.driver)));
    }
    Ok(())
}

pub fn fgsm_attack(model: &BranchedModel, batch: &LabeledBatch, config: &AttackConfig) -> Result<AttackTrace, AttackError> {
    expect_driver(config, Driver::Fgsm)?;
    attack(model, batch, config)
}

pub fn pgd_attack(model: &BranchedModel, batch: &LabeledBatch, config: &AttackConfig) -> Result<AttackTrace, AttackError> {
    expect_driver(config, Driver::Pgd)?;
    attack(model, batch, config)
}

pub fn apgd_attack(model: &BranchedModel, batch: &LabeledBatch, config: &AttackConfig) -> Result<AttackTrace, AttackError> {
    expect_driver(config, Driver::Apgd)?;
    attack(model, batch, config)
}

/// Attacks `batch` against its own labels with whichever driver `config` names.
pub fn attack(model: &BranchedModel, batch: &LabeledBatch, config: &AttackConfig) -> Result<AttackTrace, AttackError> {
    let objective = ModelObjective::new(model, batch)?;
    attack_objective(&objective, &batch.x, config)
}

/// Adversarial inputs for a whole batch, attacked `chunk` rows at a time.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkedAttack {
    pub x_adv: Tensor,
    /// One trace per chunk, in row order.
    pub traces: Vec<AttackTrace>,
}

/// Splits `batch` into consecutive groups of `chunk` rows and attacks each
/// group independently against its own labels. Losses inside a group are group
/// means; `chunk = 1` attacks every example on its own. Group `k` uses seed
/// `config.seed + k` for its random start.
pub fn attack_in_chunks(
    model: &BranchedModel,
    batch: &LabeledBatch,
    config: &AttackConfig,
    chunk: usize,
) -> Result<ChunkedAttack, AttackError> {
    if chunk == 0 {
        return Err(AttackError::InvalidConfig("attack chunk size must be positive".into()));
    }
    let rows = batch.rows();
    let mut graphs: Vec<(usize, ModelGraph)> = Vec::new();
    let mut x_adv = batch.x.clone();
    let mut traces = Vec::with_capacity(rows.div_ceil(chunk));
    for (k, start) in (0..rows).step_by(chunk).enumerate() {
        let part = batch.slice(start, (start + chunk).min(rows));
        let slot = match graphs.iter().position(|(r, _)| *r == part.rows()) {
            Some(i) => i,
            None => {
                graphs.push((part.rows(), model.batch_graph(&part)?));
                graphs.len() - 1
            }
        };
        let objective = GraphObjective { graph: &graphs[slot].1, labels: &part.labels };
        let mut cfg = config.clone();
        cfg.seed = config.seed.wrapping_add(k as u64);
        let trace = attack_objective(&objective, &part.x, &cfg)?;
        let cols = batch.x.cols();
        x_adv.data_mut()[start * cols..start * cols + trace.x_adv.len()].copy_from_slice(trace.x_adv.data());
        traces.push(trace);
    }
    Ok(ChunkedAttack { x_adv, traces })
}

/// Cosine between the final perturbations of single-task attacks on tasks `a`
/// and `b`. `None` when either perturbation is zero.
pub fn perturbation_alignment(
    model: &BranchedModel,
    batch: &LabeledBatch,
    budget: Budget,
    driver: Driver,
    a: usize,
    b: usize,
) -> Result<Option<f64>, AttackError> {
    let objective = ModelObjective::new(model, batch)?;
    let delta = |task: usize| -> Result<Tensor, AttackError> {
        let mut config = AttackConfig::for_driver(driver, Combiner::Single(task), budget.epsilon);
        config.budget = budget;
        let trace = attack_objective(&objective, &batch.x, &config)?;
        Ok(trace.x_adv.zip_map(&batch.x, |p, o| p - o).expect("same shape"))
    };
    let (da, db) = (delta(a)?, delta(b)?);
    let (na, nb) = (da.l2_norm(), db.l2_norm());
    if na == 0.0 || nb == 0.0 {
        return Ok(None);
    }
    Ok(Some((da.dot(&db) / (na * nb)).clamp(-1.0, 1.0)))
}
