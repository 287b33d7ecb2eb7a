//! Grouped vector-quantized auto-encoder: per-group pooled features, a
//! low-dimensional codebook per group maintained by moving averages, and
//! decoding of quantized features back onto the sphere.

use std::collections::HashSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::canonical::{reconstruction_loss, trace_correspondence, CanonicalAe, Correspondence, EdgeEncoder, ModulatedDecoder};
use crate::error::{Error, Result};
use crate::geometry::{fibonacci_sphere, CanonicalSphere, EmdMode};
use crate::grouping::GroupAssignment;
use crate::nn::{init_fan_in, Adam, AdamConfig, Graph, Matrix, ParamId, ParamSet, Var};
use crate::pcio::{PointCloud, ShapeDataset};
use crate::train::{epoch_batches, rng_stream, TrainError, AUX_STREAM, INIT_STREAM, SHUFFLE_STREAM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodebookLayout {
    /// One codebook per group.
    Grouped,
    /// A single codebook with `G * entries` entries shared by all groups.
    Shared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqConfig {
    pub entries: usize,
    pub code_dim: usize,
    pub feature_dim: usize,
    pub layout: CodebookLayout,
    /// One down/up projection pair per group instead of a shared pair.
    pub per_group_projections: bool,
    pub k: usize,
    pub edge_widths: Vec<usize>,
    pub decoder_width: usize,
    pub decay: f64,
    pub eps: f64,
    /// Entries whose moving cluster size stays below `dead_threshold` for
    /// `dead_patience` consecutive steps are reseeded from the batch.
    pub dead_threshold: f64,
    pub dead_patience: usize,
    pub use_emd: bool,
    pub emd_mode: EmdMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            entries: 50,
            code_dim: 4,
            feature_dim: 256,
            layout: CodebookLayout::Grouped,
            per_group_projections: false,
            k: 20,
            edge_widths: vec![64, 64, 128],
            decoder_width: 128,
            decay: 0.99,
            eps: 1e-5,
            dead_threshold: 1e-3,
            dead_patience: 100,
            use_emd: true,
            emd_mode: EmdMode::Auto,
            epochs: 300,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Codebook indices of one shape, listed in group order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence(pub Vec<usize>);

/// Pooled per-group features of one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupFeature {
    /// `G x feature_dim`, indexed by group id.
    pub z: Matrix,
    pub present: Vec<bool>,
}

/// Codebooks plus their moving-average statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub layout: CodebookLayout,
    pub groups: usize,
    /// Entries per group; a shared book holds `groups * entries`.
    pub entries: usize,
    pub dim: usize,
    pub books: Vec<Matrix>,
    pub cluster_size: Vec<Vec<f64>>,
    pub embed_sum: Vec<Matrix>,
    pub decay: f64,
    pub eps: f64,
    low_steps: Vec<Vec<usize>>,
    initialized: bool,
}

impl Codebook {
    pub fn new(layout: CodebookLayout, groups: usize, entries: usize, dim: usize, decay: f64, eps: f64) -> Self {
        let (count, size) = match layout {
            CodebookLayout::Grouped => (groups, entries),
            CodebookLayout::Shared => (1, groups * entries),
        };
        Self {
            layout,
            groups,
            entries,
            dim,
            books: vec![Matrix::zeros(size, dim); count],
            cluster_size: vec![vec![0.0; size]; count],
            embed_sum: vec![Matrix::zeros(size, dim); count],
            decay,
            eps,
            low_steps: vec![vec![0; size]; count],
            initialized: false,
        }
    }

    /// Number of distinct token values at one sequence position.
    pub fn vocab(&self) -> usize {
        self.books[0].rows
    }

    pub fn book_of(&self, group: usize) -> usize {
        match self.layout {
            CodebookLayout::Grouped => group,
            CodebookLayout::Shared => 0,
        }
    }

    pub fn entry(&self, group: usize, index: usize) -> &[f64] {
        self.books[self.book_of(group)].row(index)
    }

    /// Nearest entry of the group's book; ties go to the lower index.
    pub fn nearest(&self, group: usize, z: &[f64]) -> usize {
        let book = &self.books[self.book_of(group)];
        let mut best = (f64::INFINITY, 0);
        for e in 0..book.rows {
            let d: f64 = book.row(e).iter().zip(z).map(|(a, b)| (a - b).powi(2)).sum();
            if d < best.0 {
                best = (d, e);
            }
        }
        best.1
    }

    /// Quantizes rows where row `r` belongs to group `r % groups`.
    pub fn quantize_rows(&self, zhat: &Matrix) -> (Vec<usize>, Matrix) {
        let mut codes = Matrix::zeros(zhat.rows, zhat.cols);
        let idx = (0..zhat.rows)
            .map(|r| {
                let grp = r % self.groups;
                let e = self.nearest(grp, zhat.row(r));
                codes.row_mut(r).copy_from_slice(self.entry(grp, e));
                e
            })
            .collect();
        (idx, codes)
    }

    /// Gaussian entries scaled to the RMS of the first batch of projected
    /// features.
    fn init_from(&mut self, zhat: &Matrix, rng: &mut ChaCha8Rng) {
        let ms = zhat.data.iter().map(|v| v * v).sum::<f64>() / zhat.len().max(1) as f64;
        let dist = Normal::new(0.0, ms.sqrt().max(1e-3)).expect("finite std");
        for book in &mut self.books {
            book.data.iter_mut().for_each(|v| *v = dist.sample(rng));
        }
        self.initialized = true;
    }

    /// Moving-average update from `(group, zhat, chosen index)` triples.
    /// Entries without assignments in this batch keep their value.
    pub fn ema_update(&mut self, batch: &[(usize, &[f64], usize)]) {
        let size = self.vocab();
        let mut counts = vec![vec![0.0; size]; self.books.len()];
        let mut sums = vec![Matrix::zeros(size, self.dim); self.books.len()];
        for &(grp, z, e) in batch {
            let b = self.book_of(grp);
            counts[b][e] += 1.0;
            for (s, v) in sums[b].row_mut(e).iter_mut().zip(z) {
                *s += v;
            }
        }
        let (gamma, eps) = (self.decay, self.eps);
        for b in 0..self.books.len() {
            for e in 0..size {
                let cs = &mut self.cluster_size[b][e];
                *cs = gamma * *cs + (1.0 - gamma) * counts[b][e];
                for (s, v) in self.embed_sum[b].row_mut(e).iter_mut().zip(sums[b].row(e)) {
                    *s = gamma * *s + (1.0 - gamma) * v;
                }
            }
            let n: f64 = self.cluster_size[b].iter().sum();
            for e in 0..size {
                if counts[b][e] == 0.0 {
                    continue;
                }
                let smoothed = (self.cluster_size[b][e] + eps) / (n + size as f64 * eps) * n;
                let (sum_row, entry) = (self.embed_sum[b].row(e).to_vec(), self.books[b].row_mut(e));
                for (x, s) in entry.iter_mut().zip(sum_row) {
                    *x = s / smoothed;
                }
            }
        }
    }

    /// Reseeds entries that have stayed nearly unused from random batch
    /// features of the same book.
    fn revive_dead(&mut self, batch: &[(usize, &[f64], usize)], threshold: f64, patience: usize, rng: &mut ChaCha8Rng) -> usize {
        let mut revived = 0;
        for b in 0..self.books.len() {
            let pool: Vec<&[f64]> = batch.iter().filter(|t| self.book_of(t.0) == b).map(|t| t.1).collect();
            for e in 0..self.vocab() {
                if self.cluster_size[b][e] >= threshold {
                    self.low_steps[b][e] = 0;
                    continue;
                }
                self.low_steps[b][e] += 1;
                if self.low_steps[b][e] >= patience && !pool.is_empty() {
                    let src = pool[rng.random_range(0..pool.len())];
                    self.books[b].row_mut(e).copy_from_slice(src);
                    self.cluster_size[b][e] = 0.0;
                    self.embed_sum[b].row_mut(e).iter_mut().for_each(|v| *v = 0.0);
                    self.low_steps[b][e] = 0;
                    revived += 1;
                }
            }
        }
        revived
    }
}

/// Percentage of codebook entries used at least once by `sequences`.
/// Grouped books count `(position, index)` pairs; a shared book counts
/// indices.
pub fn codebook_usage(codebook: &Codebook, sequences: &[TokenSequence]) -> Result<f64> {
    if sequences.is_empty() {
        return Err(Error::domain("usage needs at least one token sequence"));
    }
    let mut used = HashSet::new();
    for s in sequences {
        for (t, &tok) in s.0.iter().enumerate() {
            let pos = match codebook.layout {
                CodebookLayout::Grouped => t,
                CodebookLayout::Shared => 0,
            };
            used.insert((pos, tok));
        }
    }
    Ok(used.len() as f64 / (codebook.groups * codebook.entries) as f64 * 100.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqEpoch {
    pub cd: f64,
    pub emd: f64,
    pub commit: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VqCodec {
    pub config: VqConfig,
    pub groups: usize,
    pub params: ParamSet,
    pub encoder: EdgeEncoder,
    down_w: ParamId,
    down_b: ParamId,
    up_w: ParamId,
    up_b: ParamId,
    pub decoder: ModulatedDecoder,
    pub codebook: Codebook,
    pub history: Vec<VqEpoch>,
}

/// Loss terms of one decoding pass.
pub struct DecodeLoss {
    pub reconstruction: Var,
    pub commitment: Var,
    pub total: Var,
    /// Quantized low-dimensional features (straight-through node).
    pub zq_low: Var,
    pub cd: f64,
    pub emd: f64,
}

impl VqCodec {
    pub fn new(config: VqConfig, groups: usize) -> Self {
        let mut rng = rng_stream(config.seed, INIT_STREAM);
        let mut params = ParamSet::new();
        let encoder = EdgeEncoder::new(&mut params, "vq.encoder", &config.edge_widths, config.feature_dim, config.k, &mut rng);
        let blocks = if config.per_group_projections { groups } else { 1 };
        let (f, c) = (config.feature_dim, config.code_dim);
        let down = Matrix::from_vec(
            blocks * f,
            c,
            (0..blocks).flat_map(|_| init_fan_in(f, c, &mut rng).data).collect(),
        );
        let up = Matrix::from_vec(
            blocks * c,
            f,
            (0..blocks).flat_map(|_| init_fan_in(c, f, &mut rng).data).collect(),
        );
        let down_w = params.add("vq.down.w", down);
        let down_b = params.add("vq.down.b", Matrix::zeros(1, c));
        let up_w = params.add("vq.up.w", up);
        let up_b = params.add("vq.up.b", Matrix::zeros(1, f));
        let decoder = ModulatedDecoder::new(&mut params, "vq.decoder", f, config.decoder_width, None, &mut rng);
        let codebook = Codebook::new(config.layout, groups, config.entries, c, config.decay, config.eps);
        Self {
            config,
            groups,
            params,
            encoder,
            down_w,
            down_b,
            up_w,
            up_b,
            decoder,
            codebook,
            history: Vec::new(),
        }
    }

    fn project(&self, g: &mut Graph, x: Var, w: ParamId, b: ParamId) -> Var {
        let wv = g.param(w);
        let h = if self.config.per_group_projections {
            g.grouped_linear(x, wv, self.groups)
        } else {
            g.matmul(x, wv)
        };
        let bv = g.param(b);
        g.add_row(h, bv)
    }

    /// `(batch * G) x feature_dim` pooled features; row `b * G + j` is
    /// group `j` of cloud `b`.
    fn pooled(&self, g: &mut Graph, clouds: &[&[[f64; 3]]], point_labels: &[Vec<usize>]) -> Result<Var> {
        let feats = self.encoder.forward(g, clouds)?;
        let segment: Vec<usize> = point_labels
            .iter()
            .enumerate()
            .flat_map(|(b, labels)| labels.iter().map(move |&l| b * self.groups + l))
            .collect();
        Ok(g.segment_max(feats, &segment, clouds.len() * self.groups))
    }

    /// Down-projection of pooled features.
    pub fn down(&self, g: &mut Graph, z: Var) -> Var {
        self.project(g, z, self.down_w, self.down_b)
    }

    /// Up-projection of low-dimensional codes.
    pub fn up(&self, g: &mut Graph, low: Var) -> Var {
        self.project(g, low, self.up_w, self.up_b)
    }

    /// Decodes `(batch * G) x feature_dim` features onto `batch` copies of
    /// the sphere.
    pub fn decode_rows(&self, g: &mut Graph, sphere: &CanonicalSphere, features: Var, labels: &[usize], batch: usize) -> Var {
        let m = sphere.len();
        let row_cond: Vec<usize> = (0..batch * m).map(|r| (r / m) * self.groups + labels[r % m]).collect();
        self.decoder.forward(g, sphere.points(), features, &row_cond)
    }

    /// Builds the training objective from low-dimensional features `zhat`
    /// and their chosen codes: reconstruction through the straight-through
    /// estimator plus the commitment term `||sg(code) - zhat||^2` averaged
    /// over groups.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_loss(
        &self,
        g: &mut Graph,
        zhat: Var,
        codes: &Matrix,
        sphere: &CanonicalSphere,
        labels: &[usize],
        targets: &[&[[f64; 3]]],
    ) -> Result<DecodeLoss> {
        let zq_low = g.straight_through(zhat, codes.clone());
        let zq = self.up(g, zq_low);
        let out = self.decode_rows(g, sphere, zq, labels, targets.len());
        let m = sphere.len();
        let mut terms = Vec::with_capacity(targets.len());
        let (mut cd, mut emd) = (0.0, 0.0);
        for (b, target) in targets.iter().enumerate() {
            let pred = g.slice_rows(out, b * m, m);
            let (l, c, e) = reconstruction_loss(g, pred, target, self.config.use_emd, self.config.emd_mode)?;
            terms.push(l);
            cd += c;
            emd += e;
        }
        let all = g.concat_rows(&terms);
        let reconstruction = g.mean(all);
        let code_v = g.constant(codes.clone());
        let diff = g.sub(zhat, code_v);
        let sq = g.mul(diff, diff);
        let sq = g.sum(sq);
        let commitment = g.scale(sq, 1.0 / codes.rows as f64);
        let total = g.add(reconstruction, commitment);
        let nb = targets.len() as f64;
        Ok(DecodeLoss {
            reconstruction,
            commitment,
            total,
            zq_low,
            cd: cd / nb,
            emd: emd / nb,
        })
    }

    /// Per-group pooled features of one cloud.
    pub fn encode_groups(&self, pc: &PointCloud, ga: &GroupAssignment, corr: &Correspondence) -> Result<GroupFeature> {
        let labels = point_labels(corr, ga)?;
        let pts = pc.to_f64();
        let mut g = Graph::new(&self.params);
        let z = self.pooled(&mut g, &[&pts], &[labels.clone()])?;
        let mut present = vec![false; self.groups];
        for &l in &labels {
            present[l] = true;
        }
        Ok(GroupFeature {
            z: g.value(z).clone(),
            present,
        })
    }

    /// Nearest-code quantization of every group.
    pub fn quantize(&self, z: &GroupFeature) -> Quantized {
        let mut g = Graph::new(&self.params);
        let zv = g.constant(z.z.clone());
        let zhat = self.down(&mut g, zv);
        let zhat_m = g.value(zhat).clone();
        let (indices, codes) = self.codebook.quantize_rows(&zhat_m);
        let cv = g.constant(codes.clone());
        let zq = self.up(&mut g, cv);
        Quantized {
            indices,
            zq: g.value(zq).clone(),
            zhat: zhat_m,
            code_low: codes,
        }
    }

    /// Up-projected features of `zhat` without quantization.
    pub fn unquantized(&self, z: &GroupFeature) -> Matrix {
        let mut g = Graph::new(&self.params);
        let zv = g.constant(z.z.clone());
        let zhat = self.down(&mut g, zv);
        let zq = self.up(&mut g, zhat);
        g.value(zq).clone()
    }

    /// Decodes one shape from `G x feature_dim` features, sphere point `j`
    /// using the feature of its group.
    pub fn decode_groups(&self, sphere: &CanonicalSphere, zq: &Matrix, labels: &[usize]) -> Result<PointCloud> {
        if zq.rows != self.groups || labels.len() != sphere.len() {
            return Err(Error::domain("feature rows must equal G and labels must cover the sphere"));
        }
        let mut g = Graph::new(&self.params);
        let f = g.constant(zq.clone());
        let out = self.decode_rows(&mut g, sphere, f, labels, 1);
        PointCloud::from_f64(&g.value(out).to_points())
    }

    /// Up-projected codebook entries for a token sequence in group order.
    pub fn token_features(&self, tokens: &TokenSequence, ga: &GroupAssignment) -> Result<Matrix> {
        if tokens.0.len() != self.groups {
            return Err(Error::domain(format!("expected {} tokens, got {}", self.groups, tokens.0.len())));
        }
        let mut low = Matrix::zeros(self.groups, self.codebook.dim);
        for (t, &tok) in tokens.0.iter().enumerate() {
            let grp = ga.group_order[t];
            if tok >= self.codebook.vocab() {
                return Err(Error::domain(format!("token {tok} outside the codebook")));
            }
            low.row_mut(grp).copy_from_slice(self.codebook.entry(grp, tok));
        }
        let mut g = Graph::new(&self.params);
        let lv = g.constant(low);
        let zq = self.up(&mut g, lv);
        Ok(g.value(zq).clone())
    }

    pub fn decode_tokens(&self, tokens: &TokenSequence, sphere: &CanonicalSphere, ga: &GroupAssignment) -> Result<PointCloud> {
        let zq = self.token_features(tokens, ga)?;
        self.decode_groups(sphere, &zq, &ga.labels)
    }
}

pub struct Quantized {
    /// Chosen entry per group id.
    pub indices: Vec<usize>,
    pub zq: Matrix,
    pub zhat: Matrix,
    pub code_low: Matrix,
}

impl Quantized {
    pub fn tokens(&self, ga: &GroupAssignment) -> TokenSequence {
        TokenSequence(ga.group_order.iter().map(|&grp| self.indices[grp]).collect())
    }
}

/// Group label of every input point through its traced sphere point.
pub fn point_labels(corr: &Correspondence, ga: &GroupAssignment) -> Result<Vec<usize>> {
    corr.forward
        .iter()
        .map(|&j| {
            ga.labels
                .get(j)
                .copied()
                .ok_or_else(|| Error::domain(format!("sphere index {j} outside the assignment")))
        })
        .collect()
}

/// Tokens of one cloud in group order.
pub fn encode_to_tokens(cae: &CanonicalAe, ga: &GroupAssignment, vq: &VqCodec, pc: &PointCloud) -> Result<TokenSequence> {
    let sphere = fibonacci_sphere(ga.labels.len())?;
    let corr = trace_correspondence(cae, pc, &sphere)?;
    let q = vq.quantize(&vq.encode_groups(pc, ga, &corr)?);
    Ok(q.tokens(ga))
}

/// Reconstructions of one cloud with and without quantization.
pub fn reconstruct_both(cae: &CanonicalAe, ga: &GroupAssignment, vq: &VqCodec, pc: &PointCloud) -> Result<(PointCloud, PointCloud)> {
    let sphere = fibonacci_sphere(ga.labels.len())?;
    let corr = trace_correspondence(cae, pc, &sphere)?;
    let z = vq.encode_groups(pc, ga, &corr)?;
    let q = vq.quantize(&z);
    let quantized = vq.decode_groups(&sphere, &q.zq, &ga.labels)?;
    let plain = vq.decode_groups(&sphere, &vq.unquantized(&z), &ga.labels)?;
    Ok((quantized, plain))
}

pub fn train_vqvae(
    dataset: &ShapeDataset,
    cae: &CanonicalAe,
    ga: &GroupAssignment,
    config: &VqConfig,
) -> std::result::Result<VqCodec, TrainError<VqCodec>> {
    if dataset.is_empty() {
        return Err(Error::domain("training set is empty").into());
    }
    if config.entries < 2 {
        return Err(Error::domain("a codebook needs at least 2 entries").into());
    }
    let sphere = fibonacci_sphere(ga.labels.len())?;
    let m = sphere.len();
    if config.use_emd && dataset.samples.iter().any(|s| s.len() != m) {
        return Err(Error::domain(format!("EMD needs clouds of sphere size {m}")).into());
    }
    let groups = ga.groups;
    let mut vq = VqCodec::new(config.clone(), groups);
    let clouds: Vec<Vec<[f64; 3]>> = dataset.samples.iter().map(PointCloud::to_f64).collect();
    let labels: Vec<Vec<usize>> = dataset
        .samples
        .iter()
        .map(|pc| point_labels(&trace_correspondence(cae, pc, &sphere)?, ga))
        .collect::<Result<_>>()?;

    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..Default::default()
        },
        &vq.params,
    );
    let mut shuffle = rng_stream(config.seed, SHUFFLE_STREAM);
    let mut aux = rng_stream(config.seed, AUX_STREAM);

    for epoch in 0..config.epochs {
        let batches = epoch_batches(clouds.len(), config.batch_size, &mut shuffle);
        let mut sums = [0.0; 4];
        for batch in &batches {
            let refs: Vec<&[[f64; 3]]> = batch.iter().map(|&i| clouds[i].as_slice()).collect();
            let batch_labels: Vec<Vec<usize>> = batch.iter().map(|&i| labels[i].clone()).collect();
            let (parts, zhat_m, indices, grads) = {
                let mut g = Graph::new(&vq.params);
                let z = vq.pooled(&mut g, &refs, &batch_labels)?;
                let zhat = vq.down(&mut g, z);
                let zhat_m = g.value(zhat).clone();
                if !vq.codebook.initialized {
                    vq.codebook.init_from(&zhat_m, &mut aux);
                }
                let (indices, codes) = vq.codebook.quantize_rows(&zhat_m);
                let l = vq.decode_loss(&mut g, zhat, &codes, &sphere, &ga.labels, &refs)?;
                let values = [l.cd, l.emd, g.value(l.commitment).item(), g.value(l.total).item()];
                let grads = g.backward(l.total);
                (values, zhat_m, indices, grads)
            };
            if !parts[3].is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    last_finite: Box::new(vq),
                    message: format!("non-finite quantized reconstruction loss {}", parts[3]),
                });
            }
            let before = vq.params.clone();
            adam.step(&mut vq.params, &grads.params);
            if !vq.params.all_finite() {
                vq.params = before;
                return Err(TrainError::Diverged {
                    epoch,
                    last_finite: Box::new(vq),
                    message: "non-finite parameters after update".into(),
                });
            }
            let triples: Vec<(usize, &[f64], usize)> =
                (0..zhat_m.rows).map(|r| (r % groups, zhat_m.row(r), indices[r])).collect();
            vq.codebook.ema_update(&triples);
            vq.codebook
                .revive_dead(&triples, config.dead_threshold, config.dead_patience, &mut aux);
            for (s, v) in sums.iter_mut().zip(parts) {
                *s += v;
            }
        }
        let nb = batches.len() as f64;
        vq.history.push(VqEpoch {
            cd: sums[0] / nb,
            emd: sums[1] / nb,
            commit: sums[2] / nb,
            total: sums[3] / nb,
        });
    }
    Ok(vq)
}

/// Squared distance between a low-dimensional feature and its chosen
/// entry.
pub fn quantization_residual(codebook: &Codebook, group: usize, zhat: &[f64]) -> f64 {
    let e = codebook.nearest(group, zhat);
    let entry = codebook.entry(group, e);
    zhat.iter().zip(entry).map(|(a, b)| (a - b).powi(2)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn book(groups: usize) -> Codebook {
        Codebook::new(CodebookLayout::Grouped, groups, 50, 4, 0.99, 1e-5)
    }

    fn filled_book(seed: u64) -> Codebook {
        let mut cb = book(2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for b in &mut cb.books {
            b.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        cb
    }

    #[test]
    fn exact_entry_and_ties() {
        let mut cb = filled_book(1);
        let e7 = cb.entry(1, 7).to_vec();
        assert_eq!(cb.nearest(1, &e7), 7);
        assert_eq!(quantization_residual(&cb, 1, &e7), 0.0);
        cb.books[0].row_mut(3).copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        cb.books[0].row_mut(9).copy_from_slice(&[-1.0, 0.0, 0.0, 0.0]);
        for e in (0..50).filter(|&e| e != 3 && e != 9) {
            cb.books[0].row_mut(e).copy_from_slice(&[10.0, 10.0, 10.0, 10.0]);
        }
        assert_eq!(cb.nearest(0, &[0.0; 4]), 3);
    }

    #[test]
    fn nearest_matches_linear_scan() {
        let cb = filled_book(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let z: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let d: Vec<f64> = (0..50).map(|e| cb.entry(0, e).iter().zip(&z).map(|(a, b)| (a - b).powi(2)).sum()).collect();
            let want = (0..50).min_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b))).unwrap();
            assert_eq!(cb.nearest(0, &z), want);
        }
    }

    #[test]
    fn ema_converges_to_constant_feature() {
        let mut cb = filled_book(4);
        let z = [0.3, -0.7, 1.2, 0.05];
        let (gamma, eps, k) = (0.99f64, 1e-5, 50.0);
        for t in 1..=500 {
            cb.ema_update(&[(0, &z, 5)]);
            // closed form with zero-initialized statistics
            let cs = 1.0 - gamma.powi(t);
            let factor = (cs + k * eps) / (cs + eps);
            for d in 0..4 {
                assert!((cb.entry(0, 5)[d] - z[d] * factor).abs() < 1e-9);
            }
        }
        for d in 0..4 {
            assert!((cb.entry(0, 5)[d] - z[d]).abs() < 1e-3);
        }
    }

    #[test]
    fn ema_leaves_unassigned_entries() {
        let mut cb = filled_book(5);
        let before = cb.books.clone();
        cb.ema_update(&[]);
        assert_eq!(cb.books, before);
        cb.ema_update(&[(0, &[1.0, 1.0, 1.0, 1.0], 2)]);
        assert_eq!(cb.books[1], before[1]);
        assert_eq!(cb.books[0].row(3), before[0].row(3));
        assert!(cb.cluster_size.iter().flatten().all(|&c| c >= 0.0));
    }

    #[test]
    fn usage_hand_counts() {
        let g = 128;
        let cb = book(g);
        let one = vec![TokenSequence(vec![0; g])];
        assert!((codebook_usage(&cb, &one).unwrap() - 2.0).abs() < 1e-12);
        let three: Vec<TokenSequence> = (0..3).map(|e| TokenSequence(vec![e; g])).collect();
        assert!((codebook_usage(&cb, &three).unwrap() - 6.0).abs() < 1e-12);
        let all: Vec<TokenSequence> = (0..50).map(|e| TokenSequence(vec![e; g])).collect();
        assert!((codebook_usage(&cb, &all).unwrap() - 100.0).abs() < 1e-12);
        assert!(codebook_usage(&cb, &[]).is_err());
    }

    fn micro() -> (VqCodec, CanonicalSphere, Vec<usize>, Vec<Vec<[f64; 3]>>) {
        let config = VqConfig {
            entries: 3,
            code_dim: 2,
            feature_dim: 6,
            edge_widths: vec![4],
            k: 2,
            decoder_width: 5,
            use_emd: true,
            emd_mode: EmdMode::Exact,
            ..Default::default()
        };
        let vq = VqCodec::new(config, 2);
        let sphere = fibonacci_sphere(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let target = vec![(0..4).map(|_| [rng.random(), rng.random(), rng.random()]).collect()];
        (vq, sphere, vec![0, 1, 1, 0], target)
    }

    #[test]
    fn straight_through_copies_reconstruction_gradient() {
        let (vq, sphere, labels, targets) = micro();
        let refs: Vec<&[[f64; 3]]> = targets.iter().map(Vec::as_slice).collect();
        let zhat0 = Matrix::from_vec(2, 2, vec![0.3, -0.2, 0.5, 0.1]);
        let codes = Matrix::from_vec(2, 2, vec![0.25, -0.1, 0.4, 0.2]);
        let mut g = Graph::new(&vq.params);
        let zhat = g.input(zhat0.clone());
        let l = vq.decode_loss(&mut g, zhat, &codes, &sphere, &labels, &refs).unwrap();
        let grads = g.backward_with(l.reconstruction, &[zhat, l.zq_low]);
        assert_eq!(grads.extra[0], grads.extra[1]);

        // surrogate: codes follow zhat by a frozen offset
        let analytic = g.backward_with(l.total, &[zhat]).extra[0].clone().unwrap();
        let surrogate = |z: &Matrix| {
            let mut shifted = codes.clone();
            for i in 0..4 {
                shifted.data[i] += z.data[i] - zhat0.data[i];
            }
            let mut g = Graph::new(&vq.params);
            let zv = g.constant(z.clone());
            let zq = g.constant(shifted);
            let up = vq.up(&mut g, zq);
            let out = vq.decode_rows(&mut g, &sphere, up, &labels, 1);
            let (rec, _, _) = reconstruction_loss(&mut g, out, refs[0], true, EmdMode::Exact).unwrap();
            let cv = g.constant(codes.clone());
            let d = g.sub(zv, cv);
            let sq = g.mul(d, d);
            let sq = g.sum(sq);
            let c = g.scale(sq, 0.5);
            let t = g.add(rec, c);
            g.value(t).item()
        };
        let h = 1e-6;
        for e in 0..4 {
            let mut p = zhat0.clone();
            p.data[e] += h;
            let mut m = zhat0.clone();
            m.data[e] -= h;
            let numeric = (surrogate(&p) - surrogate(&m)) / (2.0 * h);
            assert!((analytic.data[e] - numeric).abs() <= 1e-4 * numeric.abs().max(1e-3), "{e}: {} vs {numeric}", analytic.data[e]);
        }
    }

    #[test]
    fn commitment_vanishes_at_the_code() {
        let (vq, sphere, labels, targets) = micro();
        let refs: Vec<&[[f64; 3]]> = targets.iter().map(Vec::as_slice).collect();
        let codes = Matrix::from_vec(2, 2, vec![0.25, -0.1, 0.4, 0.2]);
        let mut g = Graph::new(&vq.params);
        let zhat = g.input(codes.clone());
        let l = vq.decode_loss(&mut g, zhat, &codes, &sphere, &labels, &refs).unwrap();
        assert_eq!(g.value(l.commitment).item(), 0.0);
    }

    #[test]
    fn swapping_group_features_moves_only_their_points() {
        let (vq, _, _, _) = micro();
        let sphere = fibonacci_sphere(6).unwrap();
        let labels = vec![0, 1, 1, 0, 0, 1];
        let vq3 = VqCodec::new(vq.config.clone(), 3);
        let labels3 = vec![0, 1, 2, 0, 2, 1];
        let mut zq = Matrix::zeros(3, 6);
        for (i, v) in zq.data.iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        let a = vq3.decode_groups(&sphere, &zq, &labels3).unwrap();
        let mut swapped = zq.clone();
        let (r1, r2) = (zq.row(1).to_vec(), zq.row(2).to_vec());
        swapped.row_mut(1).copy_from_slice(&r2);
        swapped.row_mut(2).copy_from_slice(&r1);
        let b = vq3.decode_groups(&sphere, &swapped, &labels3).unwrap();
        for j in 0..6 {
            let same = a.point(j) == b.point(j);
            assert_eq!(same, labels3[j] == 0, "point {j}");
        }
        assert_eq!(a, vq3.decode_groups(&sphere, &zq, &labels3).unwrap());
        assert_eq!(vq.decode_groups(&fibonacci_sphere(6).unwrap(), &Matrix::zeros(2, 6), &labels).unwrap().len(), 6);
    }
}
