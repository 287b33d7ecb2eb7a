//! Decomposition of the canonical sphere into shape compositions, structure
//! points, and serialization of a cloud into an ordered list of groups.

use std::rc::Rc;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::canonical::{trace_correspondence, CanonicalAe, Correspondence};
use crate::error::{Error, Result};
use crate::geometry::{fibonacci_sphere, nearest_index, CanonicalSphere};
use crate::nn::{
    Adam, AdamConfig, BatchNorm, BatchStats, Graph, Linear, Matrix, ParamSet, Var,
};
use crate::pcio::{PointCloud, ShapeDataset};
use crate::train::{epoch_batches, rng_stream, TrainError, AUX_STREAM, INIT_STREAM, SHUFFLE_STREAM};

/// What the grouping network sees for each sphere point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupingInput {
    /// The sphere point alone; groups are shared by every shape.
    Sphere,
    /// The traced input point concatenated with the sphere point; groups
    /// become instance dependent.
    PointAndSphere,
}

/// How groups are ordered into a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupOrder {
    /// Ascending by the smallest spiral index among the group's points.
    Spiral,
    /// Descending by the largest spiral index.
    InverseSpiral,
    /// A seeded random permutation.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupingConfig {
    pub groups: usize,
    pub hidden: usize,
    pub input: GroupingInput,
    pub order: GroupOrder,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        Self {
            groups: 128,
            hidden: 128,
            input: GroupingInput::Sphere,
            order: GroupOrder::Spiral,
            epochs: 200,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Raw scores and the two normalized views derived from them.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupProbabilities {
    pub raw: Matrix,
    /// Softmax over groups; rows sum to one.
    pub per_point: Matrix,
    /// `per_point` renormalized over points; columns sum to one.
    pub per_group: Matrix,
}

impl GroupProbabilities {
    pub fn from_raw(raw: Matrix) -> Self {
        let per_point = crate::nn::softmax_rows(&raw);
        let per_group = column_normalized(&per_point);
        Self {
            raw,
            per_point,
            per_group,
        }
    }

    pub fn groups(&self) -> usize {
        self.raw.cols
    }
}

fn column_normalized(p: &Matrix) -> Matrix {
    let mut sums = vec![0.0; p.cols];
    for r in 0..p.rows {
        for (s, v) in sums.iter_mut().zip(p.row(r)) {
            *s += v;
        }
    }
    let mut out = p.clone();
    for r in 0..out.rows {
        for (v, s) in out.row_mut(r).iter_mut().zip(&sums) {
            *v /= s;
        }
    }
    out
}

/// Per-point group labels plus the order in which groups are serialized.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupAssignment {
    pub labels: Vec<usize>,
    /// `group_order[t]` is the group at sequence position `t`.
    pub group_order: Vec<usize>,
    pub groups: usize,
}

impl GroupAssignment {
    /// Sequence position of every group (inverse of `group_order`).
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = vec![0; self.groups];
        for (t, &grp) in self.group_order.iter().enumerate() {
            pos[grp] = t;
        }
        pos
    }
}

/// Group order by the chosen rule. Labels are indexed by spiral index.
/// Groups without members go last, by id.
pub fn group_order(labels: &[usize], groups: usize, order: GroupOrder, seed: u64) -> Vec<usize> {
    match order {
        GroupOrder::Random => {
            let mut perm: Vec<usize> = (0..groups).collect();
            perm.shuffle(&mut rng_stream(seed, AUX_STREAM));
            perm
        }
        GroupOrder::Spiral | GroupOrder::InverseSpiral => {
            let m = labels.len();
            let mut key = vec![usize::MAX; groups];
            for (i, &l) in labels.iter().enumerate() {
                let rank = if order == GroupOrder::Spiral { i } else { m - 1 - i };
                key[l] = key[l].min(rank);
            }
            let mut ids: Vec<usize> = (0..groups).collect();
            ids.sort_by_key(|&grp| (key[grp], grp));
            ids
        }
    }
}

/// Argmax labels (ties to the lower group) in spiral group order.
pub fn assign_groups(p: &GroupProbabilities) -> GroupAssignment {
    assign_groups_with(p, GroupOrder::Spiral, 0)
}

pub fn assign_groups_with(p: &GroupProbabilities, order: GroupOrder, seed: u64) -> GroupAssignment {
    let labels = argmax_rows(&p.per_point);
    let groups = p.groups();
    GroupAssignment {
        group_order: group_order(&labels, groups, order, seed),
        labels,
        groups,
    }
}

fn argmax_rows(m: &Matrix) -> Vec<usize> {
    (0..m.rows)
        .map(|r| {
            let row = m.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Structure points: the per-group weighted averages of the mapped points
/// under the column-normalized view.
#[derive(Clone, Debug, PartialEq)]
pub struct StructurePoints {
    pub points: Vec<[f64; 3]>,
}

pub fn structure_points(p: &GroupProbabilities, mapped: &[[f64; 3]]) -> Result<StructurePoints> {
    if mapped.len() != p.per_group.rows {
        return Err(Error::domain(format!(
            "{} mapped points for {} sphere points",
            mapped.len(),
            p.per_group.rows
        )));
    }
    let k = p.per_group.matmul_tn(&Matrix::from_points(mapped));
    Ok(StructurePoints {
        points: k.to_points(),
    })
}

/// Uniform-grouping baseline: sphere points labeled by their nearest of `G`
/// randomly drawn centers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformGrouping {
    pub centers: Vec<[f64; 3]>,
}

impl UniformGrouping {
    pub fn new(sphere: &CanonicalSphere, groups: usize, seed: u64) -> Result<Self> {
        if groups == 0 || groups > sphere.len() {
            return Err(Error::domain(format!(
                "need 1 <= G <= M, got G = {groups}, M = {}",
                sphere.len()
            )));
        }
        let mut rng = rng_stream(seed, INIT_STREAM);
        let centers = index::sample(&mut rng, sphere.len(), groups)
            .into_iter()
            .map(|i| sphere.points()[i])
            .collect();
        Ok(Self { centers })
    }

    pub fn labels(&self, sphere: &CanonicalSphere) -> Vec<usize> {
        sphere.points().iter().map(|&p| nearest_index(&self.centers, p)).collect()
    }
}

pub fn uniform_grouping(sphere: &CanonicalSphere, groups: usize, seed: u64) -> Result<GroupAssignment> {
    let labels = UniformGrouping::new(sphere, groups, seed)?.labels(sphere);
    Ok(GroupAssignment {
        group_order: group_order(&labels, groups, GroupOrder::Spiral, seed),
        labels,
        groups,
    })
}

/// Point indices of `pc` split by the group of their traced sphere point,
/// listed in `group_order`. Subsets may be empty.
pub fn sequentialize(pc: &PointCloud, corr: &Correspondence, ga: &GroupAssignment) -> Result<Vec<Vec<usize>>> {
    if corr.forward.len() != pc.len() {
        return Err(Error::domain("correspondence does not cover the cloud"));
    }
    let mut by_group = vec![Vec::new(); ga.groups];
    for (i, &j) in corr.forward.iter().enumerate() {
        let label = *ga
            .labels
            .get(j)
            .ok_or_else(|| Error::domain(format!("sphere index {j} outside the assignment")))?;
        by_group[label].push(i);
    }
    Ok(ga.group_order.iter().map(|&grp| std::mem::take(&mut by_group[grp])).collect())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupingNet {
    pub config: GroupingConfig,
    pub params: ParamSet,
    l1: Linear,
    bn1: BatchNorm,
    l2: Linear,
    bn2: BatchNorm,
    out: Linear,
    /// Mean structure-point Chamfer loss per epoch.
    pub history: Vec<f64>,
    /// Group order fixed on the training sphere; reused at other
    /// resolutions so sequence positions keep their meaning.
    pub group_order: Vec<usize>,
}

impl GroupingNet {
    pub fn new(config: GroupingConfig) -> Self {
        let mut rng = rng_stream(config.seed, INIT_STREAM);
        let mut params = ParamSet::new();
        let din = match config.input {
            GroupingInput::Sphere => 3,
            GroupingInput::PointAndSphere => 6,
        };
        let h = config.hidden;
        let l1 = Linear::new(&mut params, "group.l1", din, h, &mut rng);
        let bn1 = BatchNorm::new(&mut params, "group.bn1", h);
        let l2 = Linear::new(&mut params, "group.l2", h, h, &mut rng);
        let bn2 = BatchNorm::new(&mut params, "group.bn2", h);
        let out = Linear::new(&mut params, "group.out", h, config.groups, &mut rng);
        Self {
            group_order: (0..config.groups).collect(),
            config,
            params,
            l1,
            bn1,
            l2,
            bn2,
            out,
            history: Vec::new(),
        }
    }

    fn scores(&self, g: &mut Graph, input: Var, stats: Option<&mut Vec<BatchStats>>) -> Var {
        let h = self.l1.forward(g, input);
        let (h, stats) = match stats {
            Some(s) => (self.bn1.forward_train(g, h, s), Some(s)),
            None => (self.bn1.forward_eval(g, h), None),
        };
        let h = g.relu(h);
        let h = self.l2.forward(g, h);
        let h = match stats {
            Some(s) => self.bn2.forward_train(g, h, s),
            None => self.bn2.forward_eval(g, h),
        };
        let h = g.relu(h);
        self.out.forward(g, h)
    }

    fn input_matrix(&self, sphere: &CanonicalSphere, mapped: Option<&[[f64; 3]]>) -> Result<Matrix> {
        match (self.config.input, mapped) {
            (GroupingInput::Sphere, _) => Ok(Matrix::from_points(sphere.points())),
            (GroupingInput::PointAndSphere, Some(x)) if x.len() == sphere.len() => {
                let rows: Vec<Vec<f64>> = x
                    .iter()
                    .zip(sphere.points())
                    .map(|(a, b)| vec![a[0], a[1], a[2], b[0], b[1], b[2]])
                    .collect();
                Ok(Matrix::from_rows(&rows))
            }
            (GroupingInput::PointAndSphere, _) => Err(Error::domain(
                "point-and-sphere grouping needs one mapped point per sphere point",
            )),
        }
    }

    /// Group probabilities of the sphere points (inference mode).
    pub fn forward(&self, sphere: &CanonicalSphere) -> Result<GroupProbabilities> {
        self.forward_instance(sphere, None)
    }

    /// Like [`GroupingNet::forward`]; `mapped` is required when the network
    /// consumes traced input points.
    pub fn forward_instance(
        &self,
        sphere: &CanonicalSphere,
        mapped: Option<&[[f64; 3]]>,
    ) -> Result<GroupProbabilities> {
        let mut g = Graph::new(&self.params);
        let x = g.constant(self.input_matrix(sphere, mapped)?);
        let s = self.scores(&mut g, x, None);
        Ok(GroupProbabilities::from_raw(g.value(s).clone()))
    }

    /// Shared labels for any sphere resolution, ordered by the training
    /// group order.
    pub fn assignment(&self, sphere: &CanonicalSphere) -> Result<GroupAssignment> {
        if self.config.input != GroupingInput::Sphere {
            return Err(Error::domain(
                "point-and-sphere grouping gives instance-dependent groups; shared assignments need sphere input",
            ));
        }
        let p = self.forward(sphere)?;
        Ok(GroupAssignment {
            labels: argmax_rows(&p.per_point),
            group_order: self.group_order.clone(),
            groups: self.config.groups,
        })
    }
}

pub fn grouping_forward(net: &GroupingNet, sphere: &CanonicalSphere) -> Result<GroupProbabilities> {
    net.forward(sphere)
}

/// Traced input point of every sphere point.
pub fn mapped_points(pc: &PointCloud, corr: &Correspondence) -> Vec<[f64; 3]> {
    corr.inverse.iter().map(|&i| pc.point(i)).collect()
}

pub fn train_grouping(
    dataset: &ShapeDataset,
    cae: &CanonicalAe,
    config: &GroupingConfig,
) -> std::result::Result<GroupingNet, TrainError<GroupingNet>> {
    if dataset.is_empty() {
        return Err(Error::domain("training set is empty").into());
    }
    if config.groups == 0 {
        return Err(Error::domain("G must be at least 1").into());
    }
    let sphere = fibonacci_sphere(cae.config.sphere_points)?;
    let m = sphere.len();
    let mut net = GroupingNet::new(config.clone());
    let targets: Vec<Vec<[f64; 3]>> = dataset.samples.iter().map(PointCloud::to_f64).collect();
    let mapped: Vec<Matrix> = dataset
        .samples
        .iter()
        .map(|pc| Ok(Matrix::from_points(&mapped_points(pc, &trace_correspondence(cae, pc, &sphere)?))))
        .collect::<Result<_>>()?;
    let sphere_m = Matrix::from_points(sphere.points());

    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..Default::default()
        },
        &net.params,
    );
    let mut shuffle = rng_stream(config.seed, SHUFFLE_STREAM);
    for epoch in 0..config.epochs {
        let batches = epoch_batches(targets.len(), config.batch_size, &mut shuffle);
        let mut sum = 0.0;
        for batch in &batches {
            let mut stats = Vec::new();
            let (loss, grads) = {
                let mut g = Graph::new(&net.params);
                let mut terms = Vec::with_capacity(batch.len());
                match config.input {
                    GroupingInput::Sphere => {
                        let x = g.constant(sphere_m.clone());
                        let s = net.scores(&mut g, x, Some(&mut stats));
                        let p = g.softmax_rows(s);
                        let p_col = g.col_normalize(p);
                        for &i in batch {
                            let mv = g.constant(mapped[i].clone());
                            let k = g.matmul_tn(p_col, mv);
                            terms.push(g.chamfer_loss(k, Rc::new(Matrix::from_points(&targets[i]))));
                        }
                    }
                    GroupingInput::PointAndSphere => {
                        let inputs: Vec<Var> = batch
                            .iter()
                            .map(|&i| {
                                let mv = g.constant(mapped[i].clone());
                                let sv = g.constant(sphere_m.clone());
                                g.concat_cols(&[mv, sv])
                            })
                            .collect();
                        let x = g.concat_rows(&inputs);
                        let s = net.scores(&mut g, x, Some(&mut stats));
                        for (b, &i) in batch.iter().enumerate() {
                            let sb = g.slice_rows(s, b * m, m);
                            let p = g.softmax_rows(sb);
                            let p_col = g.col_normalize(p);
                            let mv = g.constant(mapped[i].clone());
                            let k = g.matmul_tn(p_col, mv);
                            terms.push(g.chamfer_loss(k, Rc::new(Matrix::from_points(&targets[i]))));
                        }
                    }
                }
                let all = g.concat_rows(&terms);
                let loss = g.mean(all);
                (g.value(loss).item(), g.backward(loss))
            };
            if !loss.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    last_finite: Box::new(net),
                    message: format!("non-finite structure-point loss {loss}"),
                });
            }
            let before = net.params.clone();
            adam.step(&mut net.params, &grads.params);
            BatchNorm::commit(&mut net.params, &stats);
            if !net.params.all_finite() {
                net.params = before;
                return Err(TrainError::Diverged {
                    epoch,
                    last_finite: Box::new(net),
                    message: "non-finite parameters after update".into(),
                });
            }
            sum += loss;
        }
        net.history.push(sum / batches.len() as f64);
    }

    if config.input == GroupingInput::Sphere {
        let ga = assign_groups_with(&net.forward(&sphere)?, config.order, config.seed);
        net.group_order = ga.group_order;
    }
    Ok(net)
}

/// Mean structure-point Chamfer loss of a trained (or fresh) network.
pub fn structure_loss(net: &GroupingNet, cae: &CanonicalAe, clouds: &[PointCloud]) -> Result<f64> {
    let sphere = fibonacci_sphere(cae.config.sphere_points)?;
    let mut total = 0.0;
    for pc in clouds {
        let corr = trace_correspondence(cae, pc, &sphere)?;
        let mapped = mapped_points(pc, &corr);
        let p = net.forward_instance(&sphere, Some(&mapped))?;
        let k = structure_points(&p, &mapped)?;
        total += crate::geometry::chamfer_points(&k.points, &pc.to_f64())?;
    }
    Ok(total / clouds.len().max(1) as f64)
}
