//! The re-ID transformer: stacked self-attention and deformable cross-attention
//! layers refining learnable re-ID queries into per-instance embeddings.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    deform_attn_levels, multi_head_self_attention, reference_tensor, DeformAttnParams, DeformShape,
    MultiHeadAttnParams, ReferencePoint,
};
use crate::error::{Error, Result};
use crate::layers::{residual_layernorm, Dropout, LayerNormParams};
use crate::tape::{ParamId, ParamStore, Tape, Var};
use crate::tensor::Tensor;

/// Number of pyramid levels every scheme consumes.
pub const PYRAMID_LEVELS: usize = 3;

/// How the transformer is applied across the three pyramid levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    /// One branch sampling all levels jointly, width `d`.
    #[serde(rename = "multi_scale_d")]
    MultiScaleD,
    /// One branch sampling all levels jointly, width `3d`.
    #[serde(rename = "multi_scale_3d")]
    MultiScale3d,
    /// An independent branch per level.
    #[serde(rename = "parallel")]
    Parallel,
    /// A single branch applied to each level in turn.
    #[serde(rename = "shared")]
    Shared,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [
        Scheme::MultiScaleD,
        Scheme::MultiScale3d,
        Scheme::Parallel,
        Scheme::Shared,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::MultiScaleD => "multi_scale_d",
            Scheme::MultiScale3d => "multi_scale_3d",
            Scheme::Parallel => "parallel",
            Scheme::Shared => "shared",
        }
    }

    /// Whether the scheme emits one embedding per level.
    pub fn per_scale(self) -> bool {
        matches!(self, Scheme::Parallel | Scheme::Shared)
    }

    /// Number of separately supervised embedding sets.
    pub fn num_outputs(self) -> usize {
        if self.per_scale() {
            PYRAMID_LEVELS
        } else {
            1
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|sc| sc.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown scheme '{s}'")))
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReIDConfig {
    /// Transformer layers `M`.
    pub layers: usize,
    /// Cross-attention layers per transformer layer `K`.
    pub cross_layers: usize,
    pub heads: usize,
    /// Sampling points per head per level `S`.
    pub points: usize,
    /// Embedding width `d`.
    pub width: usize,
    /// Query slots `N`.
    pub queries: usize,
    /// Channels of the feature pyramid.
    pub channels: usize,
    pub scheme: Scheme,
    pub skip_first_self_attention: bool,
    /// Disable self-attention in every layer.
    pub disable_self_attention: bool,
    /// Average sampled values instead of learning per-sample attention weights.
    pub average_samples: bool,
    pub dropout: f64,
    /// Let gradients reach the reference points.
    pub reference_grad: bool,
}

impl Default for ReIDConfig {
    fn default() -> Self {
        ReIDConfig {
            layers: 2,
            cross_layers: 2,
            heads: 4,
            points: 4,
            width: 32,
            queries: 4,
            channels: 32,
            scheme: Scheme::Shared,
            skip_first_self_attention: true,
            disable_self_attention: false,
            average_samples: false,
            dropout: 0.0,
            reference_grad: false,
        }
    }
}

impl ReIDConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("cross_layers", self.cross_layers),
            ("heads", self.heads),
            ("points", self.points),
            ("width", self.width),
            ("queries", self.queries),
            ("channels", self.channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be at least 1")));
            }
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "model.heads ({}) must divide model.width ({})",
                self.heads, self.width
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "model.dropout {} not in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Width of the queries and of each branch's output.
    pub fn branch_width(&self) -> usize {
        match self.scheme {
            Scheme::MultiScale3d => PYRAMID_LEVELS * self.width,
            _ => self.width,
        }
    }

    /// Width of the matching embedding used at inference.
    pub fn match_width(&self) -> usize {
        match self.scheme {
            Scheme::MultiScaleD => self.width,
            _ => PYRAMID_LEVELS * self.width,
        }
    }

    /// Width of each separately supervised embedding set.
    pub fn scale_width(&self) -> usize {
        self.branch_width()
    }

    fn has_self_attention(&self, layer: usize) -> bool {
        !self.disable_self_attention && !(layer == 0 && self.skip_first_self_attention)
    }
}

#[derive(Debug, Clone)]
pub struct SelfAttnLayer {
    pub attn: MultiHeadAttnParams,
    pub norm: LayerNormParams,
}

#[derive(Debug, Clone)]
pub struct CrossAttnLayer {
    pub attn: DeformAttnParams,
    pub norm: LayerNormParams,
}

/// One transformer layer: optional self-attention then `K` cross-attention layers.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub self_attn: Option<SelfAttnLayer>,
    pub cross: Vec<CrossAttnLayer>,
}

/// A stack of `M` transformer layers.
#[derive(Debug, Clone)]
pub struct Branch {
    pub layers: Vec<LayerParams>,
}

/// Re-ID queries plus one (shared, multi-scale) or three (parallel) branches.
#[derive(Debug, Clone)]
pub struct ReIDModel {
    config: ReIDConfig,
    store: ParamStore,
    queries: ParamId,
    branches: Vec<Branch>,
}

/// Standard deviation of the initial re-ID queries.
pub const QUERY_INIT_STD: f64 = 0.02;

impl ReIDModel {
    pub fn new(config: ReIDConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let width = config.branch_width();
        let queries = store.register(
            "queries",
            Tensor::randn(&[config.queries, width], QUERY_INIT_STD, &mut rng),
        );
        let levels = match config.scheme {
            Scheme::MultiScaleD | Scheme::MultiScale3d => PYRAMID_LEVELS,
            Scheme::Parallel | Scheme::Shared => 1,
        };
        let n_branches = if config.scheme == Scheme::Parallel {
            PYRAMID_LEVELS
        } else {
            1
        };
        let shape = DeformShape {
            width,
            channels: config.channels,
            heads: config.heads,
            points: config.points,
            levels,
        };
        let mut branches = Vec::with_capacity(n_branches);
        for b in 0..n_branches {
            let mut layers = Vec::with_capacity(config.layers);
            for m in 0..config.layers {
                let prefix = format!("branch{b}.layer{m}");
                let self_attn = if config.has_self_attention(m) {
                    Some(SelfAttnLayer {
                        attn: MultiHeadAttnParams::init(
                            &mut store,
                            &format!("{prefix}.self"),
                            width,
                            config.heads,
                            &mut rng,
                        )?,
                        norm: LayerNormParams::init(&mut store, &format!("{prefix}.self.norm"), width),
                    })
                } else {
                    None
                };
                let mut cross = Vec::with_capacity(config.cross_layers);
                for k in 0..config.cross_layers {
                    let p = format!("{prefix}.cross{k}");
                    let mut attn = DeformAttnParams::init(&mut store, &p, shape, &mut rng)?;
                    attn.average_samples = config.average_samples;
                    cross.push(CrossAttnLayer {
                        attn,
                        norm: LayerNormParams::init(&mut store, &format!("{p}.norm"), width),
                    });
                }
                layers.push(LayerParams { self_attn, cross });
            }
            branches.push(Branch { layers });
        }
        Ok(ReIDModel {
            config,
            store,
            queries,
            branches,
        })
    }

    pub fn config(&self) -> &ReIDConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn queries(&self) -> ParamId {
        self.queries
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    /// Learnable scalars excluding the re-ID queries.
    pub fn transformer_param_count(&self) -> usize {
        self.store.numel() - self.store.get(self.queries).numel()
    }

    /// Reference points as a tape leaf, differentiable only when configured.
    pub fn reference_var(&self, tape: &mut Tape<'_>, points: &[ReferencePoint]) -> Result<Var> {
        let t = reference_tensor(points)?;
        Ok(if self.config.reference_grad {
            tape.input(t)
        } else {
            tape.constant(t)
        })
    }

    /// Evaluation-mode matching embeddings `[N × D_match]` for one scene.
    pub fn embed(&self, pyramid: &[Tensor], points: &[ReferencePoint]) -> Result<Tensor> {
        let mut tape = Tape::new(&self.store);
        let maps: Vec<Var> = pyramid.iter().map(|m| tape.constant(m.clone())).collect();
        let refs = self.reference_var(&mut tape, points)?;
        let outs = reid_forward(&mut tape, self, &maps, refs, &mut Dropout::disabled())?;
        let e = concat_inference_embeddings(&mut tape, self.config.scheme, &outs)?;
        Ok(tape.value(e).clone())
    }
}

/// One transformer layer over query features `y` (`N × width`).
///
/// Self-attention runs unless this is the first layer and it is configured
/// to be skipped; each cross-attention layer is
/// `layernorm(y + dropout(deform_attn(y, refs, maps)))`.
pub fn reid_layer_forward(
    tape: &mut Tape<'_>,
    y: Var,
    refs: Var,
    maps: &[Var],
    layer: &LayerParams,
    dropout: &mut Dropout,
) -> Result<Var> {
    let mut y = y;
    if let Some(sa) = &layer.self_attn {
        let out = multi_head_self_attention(tape, y, &sa.attn)?;
        y = residual_layernorm(tape, y, out, &sa.norm, dropout)?;
    }
    for ca in &layer.cross {
        let out = deform_attn_levels(tape, y, refs, maps, &ca.attn)?;
        y = residual_layernorm(tape, y, out, &ca.norm, dropout)?;
    }
    Ok(y)
}

fn branch_forward(
    tape: &mut Tape<'_>,
    start: Var,
    refs: Var,
    maps: &[Var],
    branch: &Branch,
    dropout: &mut Dropout,
) -> Result<Var> {
    let mut y = start;
    for layer in &branch.layers {
        y = reid_layer_forward(tape, y, refs, maps, layer, dropout)?;
    }
    Ok(y)
}

/// Runs the model on one scene's three-level pyramid.
///
/// Returns one `N × d` output per level for the shared and parallel schemes
/// and a single output (`N × d` or `N × 3d`) for the multi-scale schemes.
pub fn reid_forward(
    tape: &mut Tape<'_>,
    model: &ReIDModel,
    pyramid: &[Var],
    refs: Var,
    dropout: &mut Dropout,
) -> Result<Vec<Var>> {
    let cfg = &model.config;
    if pyramid.len() != PYRAMID_LEVELS {
        return Err(Error::Invalid(format!(
            "the {} scheme needs {PYRAMID_LEVELS} pyramid levels, got {}",
            cfg.scheme,
            pyramid.len()
        )));
    }
    if tape.shape(refs) != [cfg.queries, 2] {
        return Err(Error::shape("reid_forward", tape.shape(refs), &[cfg.queries, 2]));
    }
    let q = tape.param(model.queries);
    match cfg.scheme {
        Scheme::MultiScaleD | Scheme::MultiScale3d => Ok(vec![branch_forward(
            tape,
            q,
            refs,
            pyramid,
            &model.branches[0],
            dropout,
        )?]),
        Scheme::Shared => pyramid
            .iter()
            .map(|&m| branch_forward(tape, q, refs, &[m], &model.branches[0], dropout))
            .collect(),
        Scheme::Parallel => pyramid
            .iter()
            .zip(&model.branches)
            .map(|(&m, br)| branch_forward(tape, q, refs, &[m], br, dropout))
            .collect(),
    }
}

/// Matching embeddings: per-scale outputs are concatenated along the feature
/// axis, then every row is l2-normalised.
pub fn concat_inference_embeddings(
    tape: &mut Tape<'_>,
    scheme: Scheme,
    outputs: &[Var],
) -> Result<Var> {
    if outputs.len() != scheme.num_outputs() {
        return Err(Error::Invalid(format!(
            "the {scheme} scheme yields {} embedding sets, got {}",
            scheme.num_outputs(),
            outputs.len()
        )));
    }
    let joined = if outputs.len() == 1 {
        outputs[0]
    } else {
        tape.concat_cols(outputs)?
    };
    tape.l2_normalize_rows(joined)
}
