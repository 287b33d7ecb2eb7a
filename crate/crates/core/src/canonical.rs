//! Canonical auto-encoder: an edge-convolution shape encoder, a decoder that
//! deforms the canonical sphere, and nearest-neighbor tracing of the
//! point-to-sphere correspondence.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    chamfer_points, emd_points, fibonacci_sphere, nearest_index, CanonicalSphere, EmdMode,
};
use crate::nn::{init_normal, Adam, AdamConfig, Graph, Linear, Matrix, ParamId, ParamSet, Var};
use crate::pcio::{PointCloud, ShapeDataset};
use crate::train::{epoch_batches, rng_stream, TrainError, INIT_STREAM, SHUFFLE_STREAM};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaeConfig {
    /// Neighborhood size of every edge-convolution graph.
    pub k: usize,
    pub edge_widths: Vec<usize>,
    pub latent_dim: usize,
    pub decoder_width: usize,
    /// Adds a graph-attention branch over sphere neighborhoods to the
    /// decoder.
    pub graph_attention: bool,
    pub attention_k: usize,
    pub sphere_points: usize,
    /// Adds the EMD term to the Chamfer loss.
    pub use_emd: bool,
    pub emd_mode: EmdMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CaeConfig {
    fn default() -> Self {
        Self {
            k: 20,
            edge_widths: vec![64, 64, 128],
            latent_dim: 256,
            decoder_width: 128,
            graph_attention: false,
            attention_k: 8,
            sphere_points: 2048,
            use_emd: true,
            emd_mode: EmdMode::Auto,
            epochs: 200,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Global shape code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeLatent(pub Vec<f64>);

/// Point-to-sphere correspondence of one cloud.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Correspondence {
    /// `forward[i]` is the sphere index traced from input point `i`.
    pub forward: Vec<usize>,
    /// `inverse[j]` is the input point traced from sphere point `j`.
    pub inverse: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EdgeLayer {
    w_self: ParamId,
    w_nbr: ParamId,
    b: ParamId,
}

/// Stacked edge convolutions over dynamic k-NN graphs followed by a linear
/// head on the concatenated layer outputs.
///
/// Each layer computes `max_j act([f_i, f_j - f_i] W + b)`. The activation
/// is monotone, so the max moves inside: with `W = [W_s; W_n]` the edge term
/// splits into `f_i (W_s - W_n)` plus `f_j W_n`, and only the second part
/// depends on the neighbor.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EdgeEncoder {
    layers: Vec<EdgeLayer>,
    head: Linear,
    pub k: usize,
    pub out_dim: usize,
}

impl EdgeEncoder {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        widths: &[usize],
        out_dim: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut din = 3;
        for (l, &w) in widths.iter().enumerate() {
            let std = (1.0 / (2 * din) as f64).sqrt();
            layers.push(EdgeLayer {
                w_self: params.add(format!("{name}.edge{l}.w_self"), init_normal(din, w, std, rng)),
                w_nbr: params.add(format!("{name}.edge{l}.w_nbr"), init_normal(din, w, std, rng)),
                b: params.add(format!("{name}.edge{l}.b"), Matrix::zeros(1, w)),
            });
            din = w;
        }
        let cat: usize = widths.iter().sum();
        let head = Linear::new(params, &format!("{name}.head"), cat, out_dim, rng);
        Self {
            layers,
            head,
            k,
            out_dim,
        }
    }

    /// Per-point features for clouds stacked in row order.
    pub fn forward(&self, g: &mut Graph, clouds: &[&[[f64; 3]]]) -> Result<Var> {
        let mut blocks = Vec::with_capacity(clouds.len());
        let mut rows = Vec::new();
        for c in clouds {
            if c.len() < self.k + 1 {
                return Err(Error::domain(format!(
                    "edge convolution with k = {} needs at least {} points, got {}",
                    self.k,
                    self.k + 1,
                    c.len()
                )));
            }
            blocks.push((rows.len(), c.len()));
            rows.extend_from_slice(c);
        }
        let mut f = g.constant(Matrix::from_points(&rows));
        let mut outputs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let nbr = knn_blocks(g.value(f), &blocks, self.k);
            let ws = g.param(layer.w_self);
            let wn = g.param(layer.w_nbr);
            let diff = g.sub(ws, wn);
            let own = g.matmul(f, diff);
            let other = g.matmul(f, wn);
            let pooled = g.neighbor_max(other, &nbr, self.k);
            let h = g.add(own, pooled);
            let b = g.param(layer.b);
            let h = g.add_row(h, b);
            f = g.leaky_relu(h, LEAKY_SLOPE);
            outputs.push(f);
        }
        let cat = g.concat_cols(&outputs);
        Ok(self.head.forward(g, cat))
    }
}

/// `k` nearest rows (self included) within each `(start, len)` block,
/// flattened with global row indices. Ties go to the lower index.
pub(crate) fn knn_blocks(x: &Matrix, blocks: &[(usize, usize)], k: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(x.rows * k);
    for &(start, len) in blocks {
        let data = x.data[start * x.cols..(start + len) * x.cols].to_vec();
        let block = Matrix::from_vec(len, x.cols, data);
        let gram = block.matmul_nt(&block);
        let sq: Vec<f64> = (0..len).map(|i| gram.at(i, i)).collect();
        let mut cand: Vec<(f64, usize)> = Vec::with_capacity(len);
        for i in 0..len {
            cand.clear();
            cand.extend((0..len).map(|j| (sq[i] + sq[j] - 2.0 * gram.at(i, j), j)));
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < len {
                cand.select_nth_unstable_by(k - 1, cmp);
            }
            let mut nearest: Vec<(f64, usize)> = cand[..k.min(len)].to_vec();
            nearest.sort_by(cmp);
            out.extend(nearest.iter().map(|&(_, j)| start + j));
        }
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct FilmBlock {
    lin: Linear,
    gamma: Linear,
    beta: Linear,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct AttentionBranch {
    q: ParamId,
    k: ParamId,
    v: ParamId,
    neighbors: usize,
}

/// Per-point network on `[sphere point, condition]` with two rounds of
/// condition-driven feature modulation `h * (1 + gamma) + beta`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModulatedDecoder {
    w_pos: ParamId,
    w_cond: ParamId,
    b_in: ParamId,
    film: Vec<FilmBlock>,
    attention: Option<AttentionBranch>,
    out: Linear,
    pub cond_dim: usize,
    pub width: usize,
}

impl ModulatedDecoder {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        cond_dim: usize,
        width: usize,
        attention_k: Option<usize>,
        rng: &mut impl Rng,
    ) -> Self {
        let std_in = (1.0 / (3 + cond_dim) as f64).sqrt();
        let w_pos = params.add(format!("{name}.w_pos"), init_normal(3, width, std_in * 4.0, rng));
        let w_cond = params.add(format!("{name}.w_cond"), init_normal(cond_dim, width, std_in, rng));
        let b_in = params.add(format!("{name}.b_in"), Matrix::zeros(1, width));
        let film = (0..2)
            .map(|r| {
                let gamma = small_linear(params, &format!("{name}.film{r}.gamma"), cond_dim, width, rng);
                let beta = small_linear(params, &format!("{name}.film{r}.beta"), cond_dim, width, rng);
                let lin = Linear::new(params, &format!("{name}.film{r}.lin"), width, width, rng);
                FilmBlock { lin, gamma, beta }
            })
            .collect();
        let attention = attention_k.map(|neighbors| {
            let std = (1.0 / width as f64).sqrt();
            AttentionBranch {
                q: params.add(format!("{name}.attn.q"), init_normal(width, width, std, rng)),
                k: params.add(format!("{name}.attn.k"), init_normal(width, width, std, rng)),
                v: params.add(format!("{name}.attn.v"), init_normal(width, width, 0.1 * std, rng)),
                neighbors,
            }
        });
        let out = Linear::new(params, &format!("{name}.out"), width, 3, rng);
        Self {
            w_pos,
            w_cond,
            b_in,
            film,
            attention,
            out,
            cond_dim,
            width,
        }
    }

    /// Decodes `row_cond.len() / M` copies of the sphere, where output row
    /// `r` uses sphere point `r % M` and condition row `row_cond[r]`.
    pub fn forward(&self, g: &mut Graph, sphere: &[[f64; 3]], cond: Var, row_cond: &[usize]) -> Var {
        let m = sphere.len();
        assert!(m > 0 && row_cond.len() % m == 0, "rows must be whole copies of the sphere");
        let copies = row_cond.len() / m;
        let row_cond = Rc::new(row_cond.to_vec());
        let row_sphere = Rc::new((0..row_cond.len()).map(|r| r % m).collect::<Vec<_>>());

        let pos = g.constant(Matrix::from_points(sphere));
        let wp = g.param(self.w_pos);
        let pos_h = g.matmul(pos, wp);
        let pos_h = g.gather_rows(pos_h, row_sphere);
        let wc = g.param(self.w_cond);
        let cond_h = g.matmul(cond, wc);
        let cond_h = g.gather_rows(cond_h, row_cond.clone());
        let h = g.add(pos_h, cond_h);
        let b = g.param(self.b_in);
        let h = g.add_row(h, b);
        let mut h = g.leaky_relu(h, LEAKY_SLOPE);

        if let Some(att) = &self.attention {
            h = attention_branch(g, att, h, sphere, copies);
        }

        for block in &self.film {
            let lin = block.lin.forward(g, h);
            let gamma = block.gamma.forward(g, cond);
            let gamma = g.add_scalar(gamma, 1.0);
            let gamma = g.gather_rows(gamma, row_cond.clone());
            let beta = block.beta.forward(g, cond);
            let beta = g.gather_rows(beta, row_cond.clone());
            let mod_h = g.mul(lin, gamma);
            let mod_h = g.add(mod_h, beta);
            h = g.leaky_relu(mod_h, LEAKY_SLOPE);
        }
        self.out.forward(g, h)
    }
}

fn small_linear(params: &mut ParamSet, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Linear {
    Linear {
        w: params.add(format!("{name}.w"), init_normal(din, dout, 0.1 / (din as f64).sqrt(), rng)),
        b: params.add(format!("{name}.b"), Matrix::zeros(1, dout)),
    }
}

/// Residual dot-product attention of every sphere point over its sphere
/// neighbors. Neighborhoods are computed once per sphere and shared by all
/// copies.
fn attention_branch(g: &mut Graph, att: &AttentionBranch, h: Var, sphere: &[[f64; 3]], copies: usize) -> Var {
    let m = sphere.len();
    let kn = att.neighbors.min(m);
    let base = knn_blocks(&Matrix::from_points(sphere), &[(0, m)], kn);
    let mut nbr = Vec::with_capacity(copies * m * kn);
    let mut owner = Vec::with_capacity(copies * m * kn);
    for c in 0..copies {
        for (e, &j) in base.iter().enumerate() {
            nbr.push(c * m + j);
            owner.push(c * m + e / kn);
        }
    }
    let (nbr, owner) = (Rc::new(nbr), Rc::new(owner));
    let width = g.shape(h).1;

    let wq = g.param(att.q);
    let wk = g.param(att.k);
    let wv = g.param(att.v);
    let q = g.matmul(h, wq);
    let k = g.matmul(h, wk);
    let v = g.matmul(h, wv);
    let q_e = g.gather_rows(q, owner.clone());
    let k_e = g.gather_rows(k, nbr.clone());
    let v_e = g.gather_rows(v, nbr);
    let s = g.mul(q_e, k_e);
    let s = g.row_sum(s);
    let s = g.scale(s, 1.0 / (width as f64).sqrt());
    let rows = copies * m;
    let s = g.reshape(s, rows, kn);
    let a = g.softmax_rows(s);
    let a = g.reshape(a, rows * kn, 1);
    let weighted = g.mul_col(v_e, a);
    let agg = g.segment_sum(weighted, owner, rows);
    g.add(h, agg)
}

/// Per-epoch means over the batches of that epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaeEpoch {
    pub cd: f64,
    pub emd: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CanonicalAe {
    pub config: CaeConfig,
    pub params: ParamSet,
    pub encoder: EdgeEncoder,
    pub decoder: ModulatedDecoder,
    pub history: Vec<CaeEpoch>,
}

impl CanonicalAe {
    pub fn new(config: CaeConfig) -> Self {
        let mut rng = rng_stream(config.seed, INIT_STREAM);
        let mut params = ParamSet::new();
        let encoder = EdgeEncoder::new(
            &mut params,
            "encoder",
            &config.edge_widths,
            config.latent_dim,
            config.k,
            &mut rng,
        );
        let attention = config.graph_attention.then_some(config.attention_k);
        let decoder = ModulatedDecoder::new(
            &mut params,
            "decoder",
            config.latent_dim,
            config.decoder_width,
            attention,
            &mut rng,
        );
        Self {
            config,
            params,
            encoder,
            decoder,
            history: Vec::new(),
        }
    }

    pub fn sphere(&self) -> Result<CanonicalSphere> {
        fibonacci_sphere(self.config.sphere_points)
    }

    fn latents(&self, g: &mut Graph, clouds: &[&[[f64; 3]]]) -> Result<Var> {
        let feats = self.encoder.forward(g, clouds)?;
        let segment: Vec<usize> = clouds
            .iter()
            .enumerate()
            .flat_map(|(c, pts)| std::iter::repeat_n(c, pts.len()))
            .collect();
        Ok(g.segment_max(feats, &segment, clouds.len()))
    }

    pub fn encode_shape(&self, pc: &PointCloud) -> Result<ShapeLatent> {
        let pts = pc.to_f64();
        let mut g = Graph::new(&self.params);
        let z = self.latents(&mut g, &[&pts])?;
        Ok(ShapeLatent(g.value(z).data.clone()))
    }

    pub fn decode_from_sphere(&self, sphere: &CanonicalSphere, z: &ShapeLatent) -> Result<PointCloud> {
        if z.0.len() != self.config.latent_dim {
            return Err(Error::domain(format!(
                "latent has {} entries, model expects {}",
                z.0.len(),
                self.config.latent_dim
            )));
        }
        let mut g = Graph::new(&self.params);
        let zv = g.constant(Matrix::from_vec(1, z.0.len(), z.0.clone()));
        let out = self.decoder.forward(&mut g, sphere.points(), zv, &vec![0; sphere.len()]);
        PointCloud::from_f64(&g.value(out).to_points())
    }

    pub fn reconstruct(&self, pc: &PointCloud, sphere: &CanonicalSphere) -> Result<PointCloud> {
        self.decode_from_sphere(sphere, &self.encode_shape(pc)?)
    }
}

/// Chamfer plus (optionally) EMD between a predicted `M x 3` block and a
/// target. Returns the loss variable and the two measured terms.
pub fn reconstruction_loss(
    g: &mut Graph,
    pred: Var,
    target: &[[f64; 3]],
    use_emd: bool,
    mode: EmdMode,
) -> Result<(Var, f64, f64)> {
    let target_m = Rc::new(Matrix::from_points(target));
    let cd = g.chamfer_loss(pred, target_m.clone());
    let cd_value = g.value(cd).item();
    if !use_emd {
        return Ok((cd, cd_value, 0.0));
    }
    let outcome = emd_points(&g.value(pred).to_points(), target, mode)?;
    let emd = g.emd_loss(pred, target_m, outcome.assignment);
    let emd_value = g.value(emd).item();
    Ok((g.add(cd, emd), cd_value, emd_value))
}

pub fn train_canonical_ae(
    dataset: &ShapeDataset,
    config: &CaeConfig,
) -> std::result::Result<CanonicalAe, TrainError<CanonicalAe>> {
    if dataset.is_empty() {
        return Err(Error::domain("training set is empty").into());
    }
    let n = dataset
        .common_size()
        .ok_or_else(|| Error::domain("all training clouds must have the same size"))?;
    if config.use_emd && n != config.sphere_points {
        return Err(Error::domain(format!(
            "EMD needs clouds of sphere size {}, got {n}",
            config.sphere_points
        ))
        .into());
    }
    let mut model = CanonicalAe::new(config.clone());
    let sphere = model.sphere()?;
    let m = sphere.len();
    let clouds: Vec<Vec<[f64; 3]>> = dataset.samples.iter().map(PointCloud::to_f64).collect();
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..Default::default()
        },
        &model.params,
    );
    let mut shuffle = rng_stream(config.seed, SHUFFLE_STREAM);

    for epoch in 0..config.epochs {
        let batches = epoch_batches(clouds.len(), config.batch_size, &mut shuffle);
        let mut sums = [0.0; 3];
        for batch in &batches {
            let refs: Vec<&[[f64; 3]]> = batch.iter().map(|&i| clouds[i].as_slice()).collect();
            let (loss, cd, emd, grads) = {
                let mut g = Graph::new(&model.params);
                let z = model.latents(&mut g, &refs)?;
                let row_cond: Vec<usize> = (0..refs.len() * m).map(|r| r / m).collect();
                let out = model.decoder.forward(&mut g, sphere.points(), z, &row_cond);
                let mut terms = Vec::with_capacity(refs.len());
                let (mut cd, mut emd) = (0.0, 0.0);
                for (b, target) in refs.iter().enumerate() {
                    let pred = g.slice_rows(out, b * m, m);
                    let (l, c, e) = reconstruction_loss(&mut g, pred, target, config.use_emd, config.emd_mode)?;
                    terms.push(l);
                    cd += c;
                    emd += e;
                }
                let total = g.concat_rows(&terms);
                let loss = g.mean(total);
                let value = g.value(loss).item();
                let grads = g.backward(loss);
                let nb = refs.len() as f64;
                (value, cd / nb, emd / nb, grads)
            };
            if !loss.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    last_finite: Box::new(model),
                    message: format!("non-finite reconstruction loss {loss}"),
                });
            }
            let before = model.params.clone();
            adam.step(&mut model.params, &grads.params);
            if !model.params.all_finite() {
                model.params = before;
                return Err(TrainError::Diverged {
                    epoch,
                    last_finite: Box::new(model),
                    message: "non-finite parameters after update".into(),
                });
            }
            sums[0] += cd;
            sums[1] += emd;
            sums[2] += loss;
        }
        let nb = batches.len() as f64;
        model.history.push(CaeEpoch {
            cd: sums[0] / nb,
            emd: sums[1] / nb,
            total: sums[2] / nb,
        });
    }
    Ok(model)
}

/// Mean Chamfer distance between each cloud and its reconstruction.
pub fn mean_reconstruction_cd(model: &CanonicalAe, clouds: &[PointCloud], sphere: &CanonicalSphere) -> Result<f64> {
    let mut total = 0.0;
    for pc in clouds {
        let rec = model.reconstruct(pc, sphere)?;
        total += chamfer_points(&pc.to_f64(), &rec.to_f64())?;
    }
    Ok(total / clouds.len().max(1) as f64)
}

/// Traces each input point to the sphere and back through the
/// reconstruction.
pub fn trace_correspondence(model: &CanonicalAe, pc: &PointCloud, sphere: &CanonicalSphere) -> Result<Correspondence> {
    let rec = model.reconstruct(pc, sphere)?.to_f64();
    Ok(correspondence_from_reconstruction(&pc.to_f64(), &rec))
}

/// Nearest-neighbor tracing between an input cloud and its sphere-ordered
/// reconstruction; ties go to the lower index.
pub fn correspondence_from_reconstruction(input: &[[f64; 3]], rec: &[[f64; 3]]) -> Correspondence {
    Correspondence {
        forward: input.iter().map(|&x| nearest_index(rec, x)).collect(),
        inverse: rec.iter().map(|&y| nearest_index(input, y)).collect(),
    }
}
