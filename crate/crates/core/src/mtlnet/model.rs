use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::diffcore::{NodeId, Record, RecordBuilder, Tensor};

use super::data::LabeledBatch;
use super::layout::Layout;
use super::task::{HeadKind, TaskSpec};
use super::MtlError;

/// Lower bound applied to every reported task loss.
pub const LOSS_FLOOR: f64 = 1e-8;

/// Affine+ReLU block serving one task set at one depth.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub depth: usize,
    pub tasks: Vec<usize>,
    /// Index of the block at `depth - 1` that feeds this one.
    pub parent: Option<usize>,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Linear output layer of one task, reading the task's deepest block.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub task: usize,
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchedModel {
    layout: Layout,
    input_dim: usize,
    widths: Vec<usize>,
    tasks: Vec<TaskSpec>,
    blocks: Vec<Block>,
    heads: Vec<Head>,
}

/// Differentiable program of a model applied to a batch of fixed size.
///
/// Feeds are `x` followed by one label tensor per task when losses are present.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    pub record: Record,
    pub x: NodeId,
    pub labels: Vec<NodeId>,
    /// Logits, regression outputs or normalized vectors, per task.
    pub predictions: Vec<NodeId>,
    /// Unfloored per-task batch-mean losses.
    pub losses: Vec<NodeId>,
    /// Sum of the task losses.
    pub total: Option<NodeId>,
    /// Parameter leaves in [`BranchedModel::parameters`] order.
    pub params: Vec<NodeId>,
}

impl ModelGraph {
    fn feeds(&self, x: &Tensor, labels: &[Tensor]) -> Vec<Tensor> {
        let mut feeds = Vec::with_capacity(1 + labels.len());
        feeds.push(x.clone());
        feeds.extend(labels.iter().cloned());
        feeds
    }

    /// Floored task losses at `x`.
    pub fn task_losses(&self, x: &Tensor, labels: &[Tensor]) -> Result<Vec<f64>, MtlError> {
        let eval = self.record.forward(&self.feeds(x, labels))?;
        Ok(self.losses.iter().map(|&l| eval.scalar(l).max(LOSS_FLOOR)).collect())
    }

    /// Floored task losses and the input gradient of each unfloored loss.
    pub fn losses_and_input_gradients(
        &self,
        x: &Tensor,
        labels: &[Tensor],
    ) -> Result<(Vec<f64>, Vec<Tensor>), MtlError> {
        let eval = self.record.forward(&self.feeds(x, labels))?;
        let losses = self.losses.iter().map(|&l| eval.scalar(l).max(LOSS_FLOOR)).collect();
        let mut grads = Vec::with_capacity(self.losses.len());
        for &l in &self.losses {
            grads.push(eval.grad(l, &[self.x])?.remove(0));
        }
        Ok((losses, grads))
    }
}

fn init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect()).expect("consistent dims")
}

impl BranchedModel {
    /// Builds a model with He-initialized blocks and zero biases. `widths` holds
    /// one hidden width per depth, or a single width used at every depth.
    pub fn build(
        layout: Layout,
        input_dim: usize,
        widths: &[usize],
        tasks: Vec<TaskSpec>,
        seed: u64,
    ) -> Result<Self, MtlError> {
        layout.validate()?;
        let blocks_n = layout.blocks();
        let widths: Vec<usize> = match widths {
            [w] => vec![*w; blocks_n],
            ws if ws.len() == blocks_n => ws.to_vec(),
            ws => {
                return Err(MtlError::InvalidConfig(format!(
                    "{} widths given for {} blocks",
                    ws.len(),
                    blocks_n
                )))
            }
        };
        if input_dim == 0 || widths.contains(&0) {
            return Err(MtlError::InvalidConfig("input dimension and widths must be positive".into()));
        }
        if tasks.len() != layout.task_count() {
            return Err(MtlError::InvalidConfig(format!(
                "layout covers {} tasks but {} task specs were given",
                layout.task_count(),
                tasks.len()
            )));
        }
        for (i, t) in tasks.iter().enumerate() {
            if t.id != i {
                return Err(MtlError::InvalidConfig(format!("task at position {i} has id {}", t.id)));
            }
            t.validate()?;
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks: Vec<Block> = Vec::new();
        let mut prev_range = 0..0;
        for depth in 0..blocks_n {
            let fan_in = if depth == 0 { input_dim } else { widths[depth - 1] };
            let start = blocks.len();
            for set in layout.depth(depth) {
                let parent = (depth > 0).then(|| {
                    prev_range.clone().find(|&p| blocks[p].tasks.contains(&set[0])).expect("layout is a refinement")
                });
                blocks.push(Block {
                    depth,
                    tasks: set.clone(),
                    parent,
                    weight: init(&mut rng, fan_in, widths[depth], (2.0 / fan_in as f64).sqrt()),
                    bias: Tensor::zeros(&[widths[depth]]),
                });
            }
            prev_range = start..blocks.len();
        }
        let last = *widths.last().expect("at least one block");
        let heads = tasks
            .iter()
            .map(|t| Head {
                task: t.id,
                weight: init(&mut rng, last, t.head.outputs(), (1.0 / last as f64).sqrt()),
                bias: Tensor::zeros(&[t.head.outputs()]),
            })
            .collect();
        Ok(Self { layout, input_dim, widths, tasks, blocks, heads })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Block] {
        &mut self.blocks
    }

    pub fn heads(&self) -> &[Head] {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut [Head] {
        &mut self.heads
    }

    /// Parameters in canonical order: each block's weight and bias in block
    /// order, then each head's weight and bias in task order.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(2 * (self.blocks.len() + self.heads.len()));
        for b in &self.blocks {
            out.push(&b.weight);
            out.push(&b.bias);
        }
        for h in &self.heads {
            out.push(&h.weight);
            out.push(&h.bias);
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(2 * (self.blocks.len() + self.heads.len()));
        for b in &mut self.blocks {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
        }
        for h in &mut self.heads {
            out.push(&mut h.weight);
            out.push(&mut h.bias);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    /// Parameter count of one block at `depth`.
    pub fn block_size(&self, depth: usize) -> usize {
        let fan_in = if depth == 0 { self.input_dim } else { self.widths[depth - 1] };
        (fan_in + 1) * self.widths[depth]
    }

    /// Index of the block that `task` routes through at `depth`.
    pub fn block_of(&self, depth: usize, task: usize) -> Option<usize> {
        self.blocks.iter().position(|b| b.depth == depth && b.tasks.contains(&task))
    }

    /// Builds the computation for a batch of `rows` examples. Without losses the
    /// only feed is `x`.
    pub fn graph(&self, rows: usize, with_losses: bool) -> Result<ModelGraph, MtlError> {
        if rows == 0 {
            return Err(MtlError::InvalidConfig("batch must contain at least one row".into()));
        }
        let mut rb = RecordBuilder::new();
        let x = rb.input(&[rows, self.input_dim])?;
        let mut labels = Vec::new();
        if with_losses {
            for t in &self.tasks {
                let shape = match t.head {
                    HeadKind::Classification { .. } => vec![rows],
                    h => vec![rows, h.outputs()],
                };
                labels.push(rb.input(&shape)?);
            }
        }
        let mut params = Vec::new();
        let mut block_out: Vec<NodeId> = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let w = rb.param(b.weight.clone());
            let bias = rb.param(b.bias.clone());
            params.extend([w, bias]);
            let input = b.parent.map_or(x, |p| block_out[p]);
            let a = rb.affine(input, w, Some(bias))?;
            block_out.push(rb.relu(a)?);
        }
        let depth = self.layout.blocks() - 1;
        let mut predictions = Vec::new();
        let mut losses = Vec::new();
        for (t, h) in self.tasks.iter().zip(&self.heads) {
            let w = rb.param(h.weight.clone());
            let bias = rb.param(h.bias.clone());
            params.extend([w, bias]);
            let feature = block_out[self.block_of(depth, t.id).expect("every task has a block")];
            let out = rb.affine(feature, w, Some(bias))?;
            let pred = match t.head {
                HeadKind::UnitVector { .. } => rb.normalize(out)?,
                _ => out,
            };
            predictions.push(pred);
            if with_losses {
                let y = labels[t.id];
                losses.push(match t.head {
                    HeadKind::Classification { .. } => rb.softmax_cross_entropy(pred, y)?,
                    HeadKind::Regression { .. } => rb.l1(pred, y)?,
                    HeadKind::UnitVector { .. } => rb.cosine(pred, y)?,
                });
            }
        }
        let total = if with_losses {
            let terms: Vec<(NodeId, f64)> = losses.iter().map(|&l| (l, 1.0)).collect();
            Some(rb.weighted_sum(&terms)?)
        } else {
            None
        };
        Ok(ModelGraph { record: rb.build(), x, labels, predictions, losses, total, params })
    }

    fn check_batch(&self, batch: &LabeledBatch) -> Result<(), MtlError> {
        let shape = batch.x.shape();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(MtlError::BatchShape(format!(
                "inputs have shape {shape:?}, model expects (_, {})",
                self.input_dim
            )));
        }
        if batch.labels.len() != self.tasks.len() {
            return Err(MtlError::BatchShape(format!(
                "{} label tensors for {} tasks",
                batch.labels.len(),
                self.tasks.len()
            )));
        }
        Ok(())
    }

    /// Graph for `batch`, checked against the model's shapes.
    pub fn batch_graph(&self, batch: &LabeledBatch) -> Result<ModelGraph, MtlError> {
        self.check_batch(batch)?;
        self.graph(batch.rows(), true)
    }

    /// Per-task batch-mean losses, floored at [`LOSS_FLOOR`].
    pub fn task_losses(&self, batch: &LabeledBatch) -> Result<Vec<f64>, MtlError> {
        self.batch_graph(batch)?.task_losses(&batch.x, &batch.labels)
    }

    /// Gradient of each task loss with respect to the batch inputs.
    pub fn input_gradients(&self, batch: &LabeledBatch) -> Result<Vec<Tensor>, MtlError> {
        Ok(self.batch_graph(batch)?.losses_and_input_gradients(&batch.x, &batch.labels)?.1)
    }

    /// Head outputs per task for inputs `x`.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<Tensor>, MtlError> {
        if x.shape().len() != 2 || x.cols() != self.input_dim {
            return Err(MtlError::BatchShape(format!(
                "inputs have shape {:?}, model expects (_, {})",
                x.shape(),
                self.input_dim
            )));
        }
        let g = self.graph(x.rows(), false)?;
        let eval = g.record.forward(std::slice::from_ref(x))?;
        Ok(g.predictions.iter().map(|&p| eval.value(p).clone()).collect())
    }

    /// Gradients of the summed task losses with respect to every parameter, in
    /// [`BranchedModel::parameters`] order, together with the floored losses.
    pub fn parameter_gradients(&self, batch: &LabeledBatch) -> Result<(Vec<f64>, Vec<Tensor>), MtlError> {
        let g = self.batch_graph(batch)?;
        let eval = g.record.forward(&g.feeds(&batch.x, &batch.labels))?;
        let losses = g.losses.iter().map(|&l| eval.scalar(l).max(LOSS_FLOOR)).collect();
        let grads = eval.grad(g.total.expect("graph has losses"), &g.params)?;
        Ok((losses, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::finite_difference_check;
    use crate::mtlnet::{standard_tasks, SyntheticSpec};
    use proptest::prelude::*;
    use rand::Rng;

    fn data(seed: u64, rows: usize) -> LabeledBatch {
        SyntheticSpec::standard(3, 8, rows, 1, 0.5, seed).generate().unwrap().train
    }

    #[test]
    fn block_counts() {
        let tasks = standard_tasks(3);
        let m = BranchedModel::build(Layout::all_shared(3, 5), 8, &[6], tasks.clone(), 0).unwrap();
        assert_eq!(m.blocks().len(), 5);
        let m = BranchedModel::build(Layout::independent(3, 5), 8, &[6], tasks.clone(), 0).unwrap();
        assert_eq!(m.blocks().len(), 15);
        let l: Layout = "[[{0, 1, 2}], [{1}, {0, 2}]]".parse().unwrap();
        let m = BranchedModel::build(l, 8, &[6, 5], tasks, 0).unwrap();
        assert_eq!(m.blocks().len(), 3);
        assert_eq!(m.blocks()[2].parent, Some(0));
    }

    #[test]
    fn parameter_count_by_hand() {
        let l: Layout = "[[{0, 1, 2}], [{1}, {0, 2}]]".parse().unwrap();
        let tasks = standard_tasks(3);
        let m = BranchedModel::build(l, 8, &[6, 5], tasks, 0).unwrap();
        // 1 block (8→6), 2 blocks (6→5), heads 5→4, 5→3, 5→3.
        let expected = 9 * 6 + 2 * 7 * 5 + 6 * 4 + 6 * 3 + 6 * 3;
        assert_eq!(m.parameter_count(), expected);
    }

    #[test]
    fn rejects_invalid_inputs() {
        let bad: Layout = "[[{0}, {1, 2}], [{0, 1, 2}]]".parse().unwrap();
        assert!(matches!(
            BranchedModel::build(bad, 8, &[4], standard_tasks(3), 0),
            Err(MtlError::InvalidLayout(_))
        ));
        assert!(BranchedModel::build(Layout::all_shared(3, 2), 8, &[4, 4, 4], standard_tasks(3), 0).is_err());
        assert!(BranchedModel::build(Layout::all_shared(2, 2), 8, &[4], standard_tasks(3), 0).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = BranchedModel::build(Layout::independent(3, 3), 8, &[5], standard_tasks(3), 9).unwrap();
        let b = BranchedModel::build(Layout::independent(3, 3), 8, &[5], standard_tasks(3), 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_head_has_zero_input_gradient() {
        let mut m = BranchedModel::build(Layout::all_shared(3, 2), 8, &[6], standard_tasks(3), 1).unwrap();
        let h = &mut m.heads_mut()[1];
        h.weight = Tensor::zeros(h.weight.shape());
        let grads = m.input_gradients(&data(2, 4)).unwrap();
        assert!(grads[1].data().iter().all(|&v| v == 0.0));
        assert!(grads[0].data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn single_task_gradient_is_diffcore_gradient() {
        let tasks = vec![TaskSpec::regression(0, 3)];
        let m = BranchedModel::build(Layout::all_shared(1, 2), 8, &[6], tasks, 3).unwrap();
        let full = data(4, 5);
        let batch = LabeledBatch { x: full.x.clone(), labels: vec![full.labels[1].clone()] };
        let g = m.batch_graph(&batch).unwrap();
        let direct = g.record.grad(&[batch.x.clone(), batch.labels[0].clone()], g.losses[0], &[g.x]).unwrap();
        assert_eq!(m.input_gradients(&batch).unwrap()[0], direct[0]);
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let m = BranchedModel::build(Layout::sharing_level(3, 3, 1), 8, &[6], standard_tasks(3), 5).unwrap();
        let batch = data(6, 3);
        let g = m.batch_graph(&batch).unwrap();
        let mut feeds = vec![batch.x.clone()];
        feeds.extend(batch.labels.iter().cloned());
        for &loss in &g.losses {
            let r = finite_difference_check(&g.record, &feeds, loss, &[g.x], 1e-5, 1e-6).unwrap();
            assert!(r.passed, "max relative error {}", r.max_relative_error);
        }
    }

    #[test]
    fn losses_are_floored() {
        let tasks = vec![TaskSpec::regression(0, 2)];
        let mut m = BranchedModel::build(Layout::all_shared(1, 1), 4, &[3], tasks, 0).unwrap();
        let h = &mut m.heads_mut()[0];
        h.weight = Tensor::zeros(&[3, 2]);
        h.bias = Tensor::vector(vec![0.25, 0.75]);
        let batch = LabeledBatch {
            x: Tensor::filled(&[2, 4], 0.5),
            labels: vec![Tensor::matrix(2, 2, vec![0.25, 0.75, 0.25, 0.75]).unwrap()],
        };
        assert_eq!(m.task_losses(&batch).unwrap(), vec![LOSS_FLOOR]);
    }

    #[test]
    fn shape_errors() {
        let m = BranchedModel::build(Layout::all_shared(3, 2), 8, &[6], standard_tasks(3), 1).unwrap();
        let mut batch = data(2, 4);
        batch.x = Tensor::zeros(&[4, 7]);
        assert!(matches!(m.task_losses(&batch), Err(MtlError::BatchShape(_))));
    }

    fn random_layout(rng: &mut ChaCha8Rng, tasks: usize, blocks: usize) -> Layout {
        let mut current: Vec<Vec<usize>> = vec![(0..tasks).collect()];
        let mut parts = Vec::new();
        for _ in 0..blocks {
            let mut next = Vec::new();
            for set in current {
                if set.len() > 1 && rng.random_bool(0.3) {
                    let cut = rng.random_range(1..set.len());
                    next.push(set[..cut].to_vec());
                    next.push(set[cut..].to_vec());
                } else {
                    next.push(set);
                }
            }
            parts.push(next.clone());
            current = next;
        }
        Layout::new(parts)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn one_extra_split_adds_one_block(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (tasks, blocks) = (3, 4);
            let layout = random_layout(&mut rng, tasks, blocks);
            let widths = [5, 4, 6, 3];
            let base = BranchedModel::build(layout.clone(), 7, &widths, standard_tasks(tasks), 0).unwrap();
            // Split the deepest splittable set at some depth, and every set below it that
            // descends from it, so the result is still a refinement.
            let parts = layout.partitions().to_vec();
            let Some((depth, idx)) = (0..blocks).rev().find_map(|d| {
                parts[d].iter().position(|s| s.len() > 1).map(|i| (d, i))
            }) else { return Ok(()) };
            if parts[depth..].iter().skip(1).any(|p| p.iter().any(|s| s.len() > 1)) {
                return Ok(());
            }
            let mut new_parts = parts.clone();
            let set = new_parts[depth].remove(idx);
            new_parts[depth].insert(idx, set[1..].to_vec());
            new_parts[depth].insert(idx, set[..1].to_vec());
            let split = Layout::new(new_parts);
            prop_assert_eq!(split.validate(), Ok(()));
            let bigger = BranchedModel::build(split, 7, &widths, standard_tasks(tasks), 0).unwrap();
            prop_assert_eq!(bigger.parameter_count() - base.parameter_count(), base.block_size(depth));
        }

        #[test]
        fn poking_a_block_moves_only_its_tasks(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let layout = random_layout(&mut rng, 3, 3);
            let m = BranchedModel::build(layout, 6, &[5], standard_tasks(3), seed).unwrap();
            let x = Tensor::matrix(4, 6, (0..24).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
            let before = m.predict(&x).unwrap();
            let k = rng.random_range(0..m.blocks().len());
            let mut poked = m.clone();
            poked.blocks_mut()[k].bias.data_mut().iter_mut().for_each(|v| *v += 0.5);
            let after = poked.predict(&x).unwrap();
            for t in 0..3 {
                let inside = m.blocks()[k].tasks.contains(&t);
                // a constant prediction means some later block is fully dead and the
                // poke may not get through
                let cols = before[t].cols();
                let live = before[t].data().chunks(cols).any(|r| r != &before[t].data()[..cols]);
                if inside {
                    if live {
                        prop_assert_ne!(&before[t], &after[t]);
                    }
                } else {
                    prop_assert_eq!(&before[t], &after[t]);
                }
            }
        }
    }
}
