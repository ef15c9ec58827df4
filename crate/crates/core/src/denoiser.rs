//! A small deterministic denoiser with one self-attention block followed by
//! one cross-attention block, exposing its attention maps and the exact
//! gradient of the guidance objective with respect to the latent.
//!
//! Layout of one conditional pass over a latent `z` of shape `[P, C]` and
//! text embeddings `E` of shape `[K, d]`:
//!
//! ```text
//! S   = softmax_rows(z Wq_s (z Wk_s)^T / sqrt(d) + B)      [P, P]
//! h   = z + S (z Wv_s)                                     [P, C]
//! A   = softmax_cols((E Wq_c) (h Wk_c)^T / sqrt(d))         [K, P]
//! eps = h + A^T (E Wv_c)                                   [P, C]
//! ```
//!
//! `B` is a fixed locality bias `-locality * |p - q|^2` over patch positions.
//! Row `k` of `A` is the cross-attention map of token `k`; `S` is the
//! self-attention field.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::attention::{compute_attention, softmax_rows, AttentionRecord, PatchGrid, SoftmaxAxis};
use crate::error::{Error, Result};
use crate::guidance::{evaluate_record, GuidanceLosses, LossEvaluation, SubjectSet};
use crate::rng;
use crate::scalar::{argmax, Scalar};

/// Shape and initialization settings of the toy denoiser.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub grid: PatchGrid,
    pub channels: usize,
    /// Attention width `d`.
    pub width: usize,
    /// Standard deviation of the synthetic token embeddings.
    pub embedding_scale: f64,
    /// Strength of the self-attention locality bias.
    pub locality: f64,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            grid: PatchGrid { height: 8, width: 8 },
            channels: 8,
            width: 16,
            embedding_scale: 8.0,
            locality: 0.5,
            seed: 0,
        }
    }
}

/// Token used for every slot of the unconditional (null) prompt.
pub const NULL_TOKEN: &str = "<|endoftext|>";

/// Frozen weights of the toy denoiser.
#[derive(Clone, Debug)]
pub struct DenoiserParams<T> {
    config: DenoiserConfig,
    tokens: Vec<String>,
    token_embeddings: Array2<T>,
    null_embeddings: Array2<T>,
    w_q_self: Array2<T>,
    w_k_self: Array2<T>,
    w_v_self: Array2<T>,
    w_q_cross: Array2<T>,
    w_k_cross: Array2<T>,
    w_v_cross: Array2<T>,
    self_bias: Array2<T>,
}

fn matrix<T: Scalar>(rows: usize, cols: usize, values: Vec<T>) -> Array2<T> {
    Array2::from_shape_vec((rows, cols), values).expect("generated matrix has its shape")
}

impl<T: Scalar> DenoiserParams<T> {
    /// Generates all weights from `config.seed`.
    ///
    /// Projections are drawn from `U[-0.5, 0.5] / sqrt(d)` on one ChaCha8
    /// stream in a fixed order. Each token's embedding is
    /// `embedding_scale * N(0, I)` drawn from a stream keyed by the token
    /// text, so repeated words share an embedding.
    pub fn new(config: DenoiserConfig, tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::config("denoiser needs at least one token"));
        }
        if config.channels == 0 || config.width == 0 {
            return Err(Error::config("channels and width must be positive"));
        }
        let (c, d) = (config.channels, config.width);
        let half = 0.5 / (d as f64).sqrt();
        let mut proj = rng::stream(config.seed, rng::streams::PROJECTIONS);
        let mut draw = |rows: usize, cols: usize| matrix(rows, cols, rng::uniform(&mut proj, rows * cols, half));
        let w_q_self = draw(c, d);
        let w_k_self = draw(c, d);
        let w_v_self = draw(c, c);
        let w_q_cross = draw(d, d);
        let w_k_cross = draw(c, d);
        let w_v_cross = draw(d, c);

        let embed = |token: &str| -> Vec<T> {
            let mut r = rng::stream(config.seed, rng::token_stream(token));
            rng::gaussian::<T, _>(&mut r, d)
                .into_iter()
                .map(|v| v * T::of(config.embedding_scale))
                .collect()
        };
        let k = tokens.len();
        let token_embeddings = matrix(k, d, tokens.iter().flat_map(|t| embed(t)).collect());
        let null_row = embed(NULL_TOKEN);
        let null_embeddings = matrix(k, d, (0..k).flat_map(|_| null_row.clone()).collect());

        let grid = config.grid;
        let p = grid.patches();
        let self_bias = Array2::from_shape_fn((p, p), |(a, b)| {
            let (ya, xa) = (a / grid.width, a % grid.width);
            let (yb, xb) = (b / grid.width, b % grid.width);
            let dy = ya as f64 - yb as f64;
            let dx = xa as f64 - xb as f64;
            T::of(-config.locality * (dy * dy + dx * dx))
        });

        Ok(Self {
            config,
            tokens,
            token_embeddings,
            null_embeddings,
            w_q_self,
            w_k_self,
            w_v_self,
            w_q_cross,
            w_k_cross,
            w_v_cross,
            self_bias,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn grid(&self) -> PatchGrid {
        self.config.grid
    }

    pub fn channels(&self) -> usize {
        self.config.channels
    }

    pub fn token_embeddings(&self) -> &Array2<T> {
        &self.token_embeddings
    }

    fn scale(&self) -> T {
        T::of(self.config.width as f64).sqrt().recip()
    }
}

/// Noisy latent `z_t`, one row of channels per patch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentState<T> {
    pub grid: PatchGrid,
    pub channels: usize,
    pub values: Array2<T>,
    pub timestep: i32,
}

impl<T: Scalar> LatentState<T> {
    pub fn new(grid: PatchGrid, channels: usize, values: Array2<T>, timestep: i32) -> Result<Self> {
        if values.dim() != (grid.patches(), channels) {
            return Err(Error::shape(format!(
                "latent must be {}x{channels}, got {:?}",
                grid.patches(),
                values.dim()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("latent has non-finite values".into()));
        }
        Ok(Self {
            grid,
            channels,
            values,
            timestep,
        })
    }

    pub fn zeros(grid: PatchGrid, channels: usize, timestep: i32) -> Self {
        Self {
            grid,
            channels,
            values: Array2::zeros((grid.patches(), channels)),
            timestep,
        }
    }

    pub fn norm(&self) -> T {
        self.values.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    fn check(&self, params: &DenoiserParams<T>) -> Result<()> {
        if self.grid != params.grid() || self.channels != params.channels() {
            return Err(Error::shape(format!(
                "latent {}x{}x{} does not match denoiser {}x{}x{}",
                self.grid.height,
                self.grid.width,
                self.channels,
                params.grid().height,
                params.grid().width,
                params.channels()
            )));
        }
        Ok(())
    }
}

/// Output of one (possibly classifier-free guided) denoiser call.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    pub noise_prediction: Array2<T>,
    /// Attention of the conditional pass.
    pub record: AttentionRecord<T>,
}

/// Intermediates of one pass, kept for the backward sweep.
struct Pass<T> {
    qs: Array2<T>,
    ks: Array2<T>,
    vs: Array2<T>,
    s: Array2<T>,
    qc: Array2<T>,
    a: Array2<T>,
    eps: Array2<T>,
}

fn attend<T: Scalar>(params: &DenoiserParams<T>, z: ArrayView2<'_, T>, text: &Array2<T>) -> Result<Pass<T>> {
    let scale = params.scale();
    let qs = z.dot(&params.w_q_self);
    let ks = z.dot(&params.w_k_self);
    let vs = z.dot(&params.w_v_self);
    let mut s = qs.dot(&ks.t()) * scale + &params.self_bias;
    softmax_rows(&mut s);
    let h = &z + &s.dot(&vs);
    let qc = text.dot(&params.w_q_cross);
    let kc = h.dot(&params.w_k_cross);
    let a = compute_attention(qc.view(), kc.view(), SoftmaxAxis::PerKey)?;
    let vc = text.dot(&params.w_v_cross);
    let eps = &h + &a.t().dot(&vc);
    Ok(Pass {
        qs,
        ks,
        vs,
        s,
        qc,
        a,
        eps,
    })
}

fn record_of<T: Scalar>(
    pass: &Pass<T>,
    latent: &LatentState<T>,
    params: &DenoiserParams<T>,
) -> Result<AttentionRecord<T>> {
    AttentionRecord::from_matrices(
        latent.timestep,
        0,
        latent.grid,
        pass.a.view(),
        pass.s.clone(),
        params.tokens.clone(),
    )
}

/// Noise prediction `uncond + cfg_scale * (cond - uncond)`, or the
/// unconditional pass alone when `null_condition` is set. The attention
/// record always comes from the conditional pass.
pub fn forward<T: Scalar>(
    latent: &LatentState<T>,
    params: &DenoiserParams<T>,
    cfg_scale: T,
    null_condition: bool,
) -> Result<ForwardOutput<T>> {
    latent.check(params)?;
    let cond = attend(params, latent.values.view(), &params.token_embeddings)?;
    let uncond = attend(params, latent.values.view(), &params.null_embeddings)?;
    let noise_prediction = if null_condition {
        uncond.eps.clone()
    } else {
        &uncond.eps + &((&cond.eps - &uncond.eps) * cfg_scale)
    };
    Ok(ForwardOutput {
        noise_prediction,
        record: record_of(&cond, latent, params)?,
    })
}

/// Which side of every non-smooth operation the loss sits on. Two points
/// with equal signatures lie on the same smooth piece of the loss, provided
/// no comparison is tied.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchSignature {
    pub masks: Vec<Vec<bool>>,
    /// Per subject, the patch holding the map maximum.
    pub peaks: Vec<usize>,
    /// Position in the subject set of the subject with the weakest peak.
    pub weakest: usize,
    /// Sign of `a - b` for every `min(a, b)` in the self-cross overlaps.
    pub min_sides: Vec<i8>,
}

impl BranchSignature {
    pub fn has_ties(&self) -> bool {
        self.min_sides.contains(&0)
    }
}

/// Losses, gradient and attention of one guided evaluation.
#[derive(Clone, Debug)]
pub struct Evaluation<T> {
    pub losses: GuidanceLosses<T>,
    pub gradient: Array2<T>,
    pub record: AttentionRecord<T>,
    pub branches: BranchSignature,
}

/// Guidance losses of the conditional pass, without a gradient.
pub fn losses_at<T: Scalar>(
    latent: &LatentState<T>,
    params: &DenoiserParams<T>,
    subjects: &SubjectSet,
    lambda: T,
) -> Result<(GuidanceLosses<T>, AttentionRecord<T>)> {
    latent.check(params)?;
    let pass = attend(params, latent.values.view(), &params.token_embeddings)?;
    let record = record_of(&pass, latent, params)?;
    let eval = evaluate_record(&record, subjects, lambda)?;
    Ok((eval.losses, record))
}

/// `L_total` and its gradient with respect to the latent.
pub fn loss_grad_wrt_latent<T: Scalar>(
    latent: &LatentState<T>,
    params: &DenoiserParams<T>,
    subjects: &SubjectSet,
    lambda: T,
) -> Result<(GuidanceLosses<T>, Array2<T>)> {
    let e = evaluate(latent, params, subjects, lambda)?;
    Ok((e.losses, e.gradient))
}

/// Full guided evaluation: forward pass, losses and reverse-mode gradient.
///
/// Otsu masks are recomputed here but held constant in the backward sweep.
/// At `min(a, b)` ties each side receives half the gradient; the response
/// score routes its gradient to the first maximal patch of the first weakest
/// subject.
pub fn evaluate<T: Scalar>(
    latent: &LatentState<T>,
    params: &DenoiserParams<T>,
    subjects: &SubjectSet,
    lambda: T,
) -> Result<Evaluation<T>> {
    latent.check(params)?;
    let pass = attend(params, latent.values.view(), &params.token_embeddings)?;
    let record = record_of(&pass, latent, params)?;
    let eval = evaluate_record(&record, subjects, lambda)?;
    let (grad_a, grad_s, branches) = map_gradients(&eval, subjects, &pass, lambda);
    let gradient = backward(params, &pass, &grad_a, grad_s);
    Ok(Evaluation {
        losses: eval.losses,
        gradient,
        record,
        branches,
    })
}

/// Gradients of `L_total` with respect to the raw cross-attention matrix `A`
/// and the self-attention field `S`.
fn map_gradients<T: Scalar>(
    eval: &LossEvaluation<T>,
    subjects: &SubjectSet,
    pass: &Pass<T>,
    lambda: T,
) -> (Array2<T>, Array2<T>, BranchSignature) {
    let n = subjects.len();
    let p = pass.s.nrows();
    let norm: Vec<&[T]> = eval.subjects.iter().map(|m| m.cross.values()).collect();
    let agg: Vec<&[T]> = eval.subjects.iter().map(|m| m.aggregated.values()).collect();
    let mut d_norm = vec![vec![T::zero(); p]; n];
    let mut d_agg = vec![vec![T::zero(); p]; n];
    let mut min_sides = Vec::new();

    let pairs: Vec<_> = subjects.pairs().collect();
    if !pairs.is_empty() {
        let coef = T::one() / T::of(pairs.len() as f64);
        let half = coef * T::half();
        let mut min_grad = |x: &[T], y: &[T], dx: &mut [T], dy: &mut [T]| {
            for q in 0..p {
                let side = if x[q] < y[q] {
                    dx[q] = dx[q] + coef;
                    -1
                } else if x[q] > y[q] {
                    dy[q] = dy[q] + coef;
                    1
                } else {
                    dx[q] = dx[q] + half;
                    dy[q] = dy[q] + half;
                    0
                };
                min_sides.push(side);
            }
        };
        for &(i, j) in &pairs {
            // sum min(agg_i, cross_j)
            let (mut da, mut dc) = (d_agg[i].clone(), d_norm[j].clone());
            min_grad(agg[i], norm[j], &mut da, &mut dc);
            d_agg[i] = da;
            d_norm[j] = dc;
            // sum min(cross_i, agg_j)
            let (mut dc, mut da) = (d_norm[i].clone(), d_agg[j].clone());
            min_grad(norm[i], agg[j], &mut dc, &mut da);
            d_norm[i] = dc;
            d_agg[j] = da;
        }
    }

    let peaks: Vec<usize> = norm.iter().map(|v| argmax(v).unwrap_or(0)).collect();
    let peak_values: Vec<T> = norm.iter().zip(&peaks).map(|(v, &q)| v[q]).collect();
    let weakest = peak_values
        .iter()
        .enumerate()
        .fold(
            (0, T::infinity()),
            |best, (k, &v)| if v < best.1 { (k, v) } else { best },
        )
        .0;
    d_norm[weakest][peaks[weakest]] = d_norm[weakest][peaks[weakest]] - lambda;

    let mut grad_s = Array2::<T>::zeros((p, p));
    let mut grad_a = Array2::<T>::zeros(pass.a.dim());
    for (k, maps) in eval.subjects.iter().enumerate() {
        let mask: Vec<usize> = maps.mask.indices().collect();
        let weight: T = mask.iter().map(|&m| norm[k][m]).sum();
        for &m in &mask {
            let mut acc = T::zero();
            for q in 0..p {
                acc = acc + d_agg[k][q] * (pass.s[[m, q]] - agg[k][q]);
                grad_s[[m, q]] = grad_s[[m, q]] + d_agg[k][q] * norm[k][m] / weight;
            }
            d_norm[k][m] = d_norm[k][m] + acc / weight;
        }
        let token = maps.cross.token_index();
        let raw_sum: T = pass.a.row(token).sum();
        let dot: T = d_norm[k].iter().zip(norm[k]).map(|(&g, &v)| g * v).sum();
        for q in 0..p {
            grad_a[[token, q]] = grad_a[[token, q]] + (d_norm[k][q] - dot) / raw_sum;
        }
    }

    let branches = BranchSignature {
        masks: eval.subjects.iter().map(|m| m.mask.selected().to_vec()).collect(),
        peaks,
        weakest,
        min_sides,
    };
    (grad_a, grad_s, branches)
}

fn backward<T: Scalar>(
    params: &DenoiserParams<T>,
    pass: &Pass<T>,
    grad_a: &Array2<T>,
    mut grad_s: Array2<T>,
) -> Array2<T> {
    let scale = params.scale();

    // Column softmax over tokens.
    let mut grad_logits_c = Array2::<T>::zeros(pass.a.dim());
    for q in 0..pass.a.ncols() {
        let col = pass.a.column(q);
        let g = grad_a.column(q);
        let dot: T = col.iter().zip(g.iter()).map(|(&a, &b)| a * b).sum();
        for k in 0..pass.a.nrows() {
            grad_logits_c[[k, q]] = col[k] * (g[k] - dot);
        }
    }
    let grad_kc = grad_logits_c.t().dot(&pass.qc) * scale;
    let grad_h = grad_kc.dot(&params.w_k_cross.t());

    let mut grad_z = grad_h.clone();
    grad_s = grad_s + grad_h.dot(&pass.vs.t());
    let grad_vs = pass.s.t().dot(&grad_h);
    grad_z = grad_z + grad_vs.dot(&params.w_v_self.t());

    // Row softmax over key patches.
    let mut grad_logits_s = Array2::<T>::zeros(pass.s.dim());
    Zip::from(grad_logits_s.rows_mut())
        .and(pass.s.rows())
        .and(grad_s.rows())
        .for_each(|mut out, s, g| {
            let dot: T = s.iter().zip(g.iter()).map(|(&a, &b)| a * b).sum();
            for ((o, &sv), &gv) in out.iter_mut().zip(s.iter()).zip(g.iter()) {
                *o = sv * (gv - dot);
            }
        });
    let grad_qs = grad_logits_s.dot(&pass.ks) * scale;
    let grad_ks = grad_logits_s.t().dot(&pass.qs) * scale;
    grad_z + grad_qs.dot(&params.w_q_self.t()) + grad_ks.dot(&params.w_k_self.t())
}
