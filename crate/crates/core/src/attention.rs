//! Multi-head self-attention over the query set and deformable cross-attention
//! from queries into one or more feature maps.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::scaled_normal;
use crate::tape::{ParamId, ParamStore, Tape, Var};
use crate::tensor::Tensor;

/// Projections of multi-head self-attention. The per-head matrices
/// `W^Q_i, W^K_i, W^V_i` (each `d × d/H`) are stored side by side as the
/// column blocks of one `d × d` matrix; `wo` is `(H·d/H) × d`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiHeadAttnParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub width: usize,
}

impl MultiHeadAttnParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Invalid(format!(
                "{heads} heads do not divide width {width}"
            )));
        }
        Ok(MultiHeadAttnParams {
            wq: store.register(format!("{prefix}.w_q"), scaled_normal(width, width, rng)),
            wk: store.register(format!("{prefix}.w_k"), scaled_normal(width, width, rng)),
            wv: store.register(format!("{prefix}.w_v"), scaled_normal(width, width, rng)),
            wo: store.register(format!("{prefix}.w_o"), scaled_normal(width, width, rng)),
            heads,
            width,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// `Concat(head_1..head_H) · W^O` with
/// `head_i = softmax((Y W^Q_i)(Y W^K_i)^T / sqrt(d_k)) · Y W^V_i`.
pub fn multi_head_self_attention(
    tape: &mut Tape<'_>,
    y: Var,
    params: &MultiHeadAttnParams,
) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    if shape.len() != 2 || shape[1] != params.width || shape[0] == 0 {
        return Err(Error::shape(
            "multi_head_self_attention",
            &shape,
            &[params.width],
        ));
    }
    let dk = params.head_dim();
    let wq = tape.param(params.wq);
    let wk = tape.param(params.wk);
    let wv = tape.param(params.wv);
    let wo = tape.param(params.wo);
    let q = tape.matmul(y, wq)?;
    let k = tape.matmul(y, wk)?;
    let v = tape.matmul(y, wv)?;
    let mut heads = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let qh = tape.slice_cols(q, h * dk, dk)?;
        let kh = tape.slice_cols(k, h * dk, dk)?;
        let vh = tape.slice_cols(v, h * dk, dk)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
        let attn = tape.softmax_rows(scores);
        heads.push(tape.matmul(attn, vh)?);
    }
    let cat = tape.concat_cols(&heads)?;
    tape.matmul(cat, wo)
}

/// Normalised location in `[0, 1]²` around which a query samples features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferencePoint {
    x: f64,
    y: f64,
}

impl ReferencePoint {
    /// Clamps both coordinates into `[0, 1]`.
    pub fn new(x: f64, y: f64) -> Self {
        ReferencePoint {
            x: x.clamp(0.0, 1.0),
            y: y.clamp(0.0, 1.0),
        }
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    /// Pixel location on a map of the given size: `(x·(W−1), y·(H−1))`.
    pub fn to_pixels(&self, height: usize, width: usize) -> (f64, f64) {
        (
            self.x * (width as f64 - 1.0),
            self.y * (height as f64 - 1.0),
        )
    }
}

/// `N×2` tensor of normalised reference coordinates.
pub fn reference_tensor(points: &[ReferencePoint]) -> Result<Tensor> {
    Tensor::new(
        vec![points.len(), 2],
        points.iter().flat_map(|p| [p.x, p.y]).collect(),
    )
}

/// Dimensions of a deformable attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeformShape {
    /// Query / output width `D`.
    pub width: usize,
    /// Channel count `C` of the sampled feature maps.
    pub channels: usize,
    pub heads: usize,
    /// Sampling points per head per level.
    pub points: usize,
    pub levels: usize,
}

/// Parameters of deformable attention.
///
/// * `offset_w`, `offset_b`: `D → 2·H·L·S` sampling offsets in pixels, column
///   `((h·L + l)·S + s)·2 + axis`.
/// * `weight_w`, `weight_b`: `D → H·L·S` attention logits, column `(h·L + l)·S + s`.
/// * `value_w`: `C × D`; column block `h` is the per-head value map `W'_h`.
/// * `out_w`: `D × D`; row block `h` is the per-head output map `W_h`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeformAttnParams {
    pub offset_w: ParamId,
    pub offset_b: ParamId,
    pub weight_w: ParamId,
    pub weight_b: ParamId,
    pub value_w: ParamId,
    pub out_w: ParamId,
    pub shape: DeformShape,
    /// Replace the learned `A_hs` by a plain average over sampling points.
    pub average_samples: bool,
}

impl DeformShape {
    fn validate(&self) -> Result<()> {
        if self.points == 0 {
            return Err(Error::Invalid("deformable attention needs S ≥ 1".into()));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Invalid(format!(
                "{} heads do not divide width {}",
                self.heads, self.width
            )));
        }
        if self.levels == 0 || self.channels == 0 {
            return Err(Error::Invalid("deformable attention needs levels and channels".into()));
        }
        Ok(())
    }

    pub fn samples_per_head(&self) -> usize {
        self.levels * self.points
    }
}

/// Offset bias that places the `S` samples of each head on a ring of radius
/// one pixel, rotated per head. A single sample sits on the reference point.
fn ring_offsets(shape: &DeformShape) -> Tensor {
    let (h_n, l_n, s_n) = (shape.heads, shape.levels, shape.points);
    let mut bias = vec![0.0; 2 * h_n * l_n * s_n];
    if s_n > 1 {
        for h in 0..h_n {
            for l in 0..l_n {
                for s in 0..s_n {
                    let angle = 2.0 * PI * (s as f64 + h as f64 / h_n as f64) / s_n as f64;
                    let col = ((h * l_n + l) * s_n + s) * 2;
                    bias[col] = angle.cos();
                    bias[col + 1] = angle.sin();
                }
            }
        }
    }
    Tensor::vector(&bias)
}

impl DeformAttnParams {
    /// Zero offset and weight heads (ring-pattern offset bias, uniform `A_hs`),
    /// random value projection, zero output projection.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        shape: DeformShape,
        rng: &mut R,
    ) -> Result<Self> {
        shape.validate()?;
        let hls = shape.heads * shape.samples_per_head();
        Ok(DeformAttnParams {
            offset_w: store.register(
                format!("{prefix}.offset_w"),
                Tensor::zeros(&[shape.width, 2 * hls]),
            ),
            offset_b: store.register(format!("{prefix}.offset_b"), ring_offsets(&shape)),
            weight_w: store.register(format!("{prefix}.weight_w"), Tensor::zeros(&[shape.width, hls])),
            weight_b: store.register(format!("{prefix}.weight_b"), Tensor::zeros(&[hls])),
            value_w: store.register(
                format!("{prefix}.value_w"),
                scaled_normal(shape.channels, shape.width, rng),
            ),
            out_w: store.register(
                format!("{prefix}.out_w"),
                Tensor::zeros(&[shape.width, shape.width]),
            ),
            shape,
            average_samples: false,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.shape.width / self.shape.heads
    }
}

/// Deformable attention of `N` queries into `maps` (one per level, each `C×H_l×W_l`).
///
/// For query `q`, head `h`: sample `S` points per level at
/// `P_q` (in that level's pixels) plus the predicted offsets, weight them by
/// a softmax over all `L·S` logits of the head, project by `W'_h`, and map
/// back through `W_h`; heads are summed.
pub fn deform_attn_levels(
    tape: &mut Tape<'_>,
    queries: Var,
    references: Var,
    maps: &[Var],
    params: &DeformAttnParams,
) -> Result<Var> {
    let shape = params.shape;
    shape.validate()?;
    let qshape = tape.shape(queries).to_vec();
    if qshape.len() != 2 || qshape[1] != shape.width {
        return Err(Error::shape("deform_attn", &qshape, &[shape.width]));
    }
    let n = qshape[0];
    if tape.shape(references) != [n, 2] {
        return Err(Error::shape("deform_attn", &qshape, tape.shape(references)));
    }
    if maps.len() != shape.levels {
        return Err(Error::Invalid(format!(
            "deformable attention configured for {} levels, got {}",
            shape.levels,
            maps.len()
        )));
    }
    let mut extents = Vec::with_capacity(maps.len());
    for m in maps {
        let s = tape.shape(*m);
        if s.len() != 3 || s[0] != shape.channels {
            return Err(Error::shape("deform_attn", s, &[shape.channels]));
        }
        extents.push((s[1], s[2]));
    }
    let (heads, levels, points) = (shape.heads, shape.levels, shape.points);
    let per_head = levels * points;

    // reference points expanded to every (head, level, sample) slot, in pixels
    let cols = 2 * heads * per_head;
    let mut expand = Tensor::zeros(&[2, cols]);
    for h in 0..heads {
        for (l, &(hgt, wid)) in extents.iter().enumerate() {
            for s in 0..points {
                let col = ((h * levels + l) * points + s) * 2;
                expand.data_mut()[col] = wid as f64 - 1.0;
                expand.data_mut()[cols + col + 1] = hgt as f64 - 1.0;
            }
        }
    }
    let expand = tape.constant(expand);
    let anchors = tape.matmul(references, expand)?;

    let ow = tape.param(params.offset_w);
    let ob = tape.param(params.offset_b);
    let offsets = tape.matmul(queries, ow)?;
    let offsets = tape.add_row_bias(offsets, ob)?;
    let locations = tape.add(anchors, offsets)?;
    let locations = tape.reshape(locations, &[n * heads * per_head, 2])?;

    let sampled = tape.bilinear_gather(maps, locations, points)?;
    let vw = tape.param(params.value_w);
    let values = tape.matmul(sampled, vw)?;

    let weights = if params.average_samples {
        tape.constant(Tensor::full(&[n * heads, per_head], 1.0 / per_head as f64))
    } else {
        let ww = tape.param(params.weight_w);
        let wb = tape.param(params.weight_b);
        let logits = tape.matmul(queries, ww)?;
        let logits = tape.add_row_bias(logits, wb)?;
        let logits = tape.reshape(logits, &[n * heads, per_head])?;
        tape.softmax_rows(logits)
    };
    let mixed = tape.head_weighted_sum(values, weights, heads)?;
    let out_w = tape.param(params.out_w);
    tape.matmul(mixed, out_w)
}

/// Single-level deformable attention.
pub fn deform_attn(
    tape: &mut Tape<'_>,
    queries: Var,
    references: Var,
    map: Var,
    params: &DeformAttnParams,
) -> Result<Var> {
    if params.shape.levels != 1 {
        return Err(Error::Invalid(
            "single-level deformable attention needs a one-level parameter set".into(),
        ));
    }
    deform_attn_levels(tape, queries, references, &[map], params)
}

/// Three-level deformable attention: `S` samples per head on each level,
/// normalised jointly over the `3·S` samples of a head.
pub fn multiscale_deform_attn(
    tape: &mut Tape<'_>,
    queries: Var,
    references: Var,
    pyramid: &[Var],
    params: &DeformAttnParams,
) -> Result<Var> {
    if pyramid.len() != 3 || params.shape.levels != 3 {
        return Err(Error::Invalid(format!(
            "multi-scale deformable attention needs three levels, got {}",
            pyramid.len()
        )));
    }
    deform_attn_levels(tape, queries, references, pyramid, params)
}
