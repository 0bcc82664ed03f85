//! Finite-difference verification of every differentiable block, from single
//! tape primitives up to the full re-ID model with its identity loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    deform_attn_levels, multi_head_self_attention, DeformAttnParams, DeformShape, MultiHeadAttnParams,
};
use crate::detector::{jitter_detect, BBox};
use crate::error::Result;
use crate::layers::Dropout;
use crate::losses::{IdLabel, OimState};
use crate::reid::{reid_forward, ReIDConfig, ReIDModel};
use crate::synth::{render_scene, Identity, IdentityBank, Person, SynthConfig};
use crate::tape::{gradcheck_params, CheckOptions, ParamStore, Tape, Var};
use crate::tensor::{l2_normalize, Tensor, LAYER_NORM_EPS};

/// Tolerance for single primitives.
pub const PRIMITIVE_TOL: f64 = 1e-6;
/// Tolerance for composed blocks.
pub const COMPOSITE_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct BlockReport {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coords_checked: usize,
}

impl BlockReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    /// Architecture of the end-to-end block.
    pub model: ReIDConfig,
    pub seed: u64,
    /// Coordinates probed per parameter tensor in the end-to-end block.
    pub max_coords: usize,
    /// Scale the first analytic gradient of every block (negative control).
    pub corrupt: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            model: ReIDConfig::default(),
            seed: 0,
            max_coords: 32,
            corrupt: false,
        }
    }
}

/// Step of the extrapolated check used on primitives.
const PRIMITIVE_STEP: f64 = 1e-3;

fn weighted_sum(tape: &mut Tape<'_>, out: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let w = tape.constant(Tensor::randn(tape.shape(out), 1.0, rng));
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| l2_normalize(Tensor::randn(&[d], 1.0, rng).data()))
        .collect();
    Tensor::from_rows(&rows).expect("rows share a width")
}

fn perturb(store: &mut ParamStore, std: f64, rng: &mut ChaCha8Rng) {
    for t in store.values_mut() {
        let noise = Tensor::randn(t.shape(), std, rng);
        t.axpy(1.0, &noise).expect("same shape");
    }
}

struct Runner {
    corrupt: bool,
    seed: u64,
    reports: Vec<BlockReport>,
}

impl Runner {
    fn check<F>(&mut self, name: &str, store: &ParamStore, opts: CheckOptions, tol: f64, f: F) -> Result<()>
    where
        F: Fn(&mut Tape<'_>, &mut ChaCha8Rng) -> Result<Var>,
    {
        let corrupt = self.corrupt;
        let tamper = move |g: &mut [Tensor]| {
            if corrupt {
                if let Some(t) = g.iter_mut().find(|t| t.data().iter().any(|&v| v != 0.0)) {
                    for v in t.data_mut() {
                        *v = *v * 1.5 + 1e-3;
                    }
                }
            }
        };
        let seed = self.seed;
        let mut pick = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let results = gradcheck_params(store, opts, &mut pick, tamper, |tape| {
            // same probe weights on every evaluation
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            f(tape, &mut rng)
        })?;
        self.reports.push(BlockReport {
            name: name.to_string(),
            max_rel_error: results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max),
            tolerance: tol,
            coords_checked: results.iter().map(|r| r.coords_checked).sum(),
        });
        Ok(())
    }
}

fn primitive_blocks(run: &mut Runner, rng: &mut ChaCha8Rng) -> Result<()> {
    let opts = CheckOptions {
        step: PRIMITIVE_STEP,
        max_coords: None,
        extrapolate: true,
    };
    let tol = PRIMITIVE_TOL;

    let mut s = ParamStore::new();
    let a = s.register("a", Tensor::randn(&[3, 4], 1.0, rng));
    let b = s.register("b", Tensor::randn(&[4, 2], 1.0, rng));
    run.check("matmul", &s, opts, tol, |t, r| {
        let (a, b) = (t.param(a), t.param(b));
        let y = t.matmul(a, b)?;
        let y = t.transpose(y)?;
        weighted_sum(t, y, r)
    })?;

    let mut s = ParamStore::new();
    let x = s.register("x", Tensor::randn(&[3, 4], 1.0, rng));
    let y = s.register("y", Tensor::randn(&[3, 4], 1.0, rng));
    let bias = s.register("bias", Tensor::randn(&[4], 1.0, rng));
    run.check("elementwise", &s, opts, tol, |t, r| {
        let (x, y, bias) = (t.param(x), t.param(y), t.param(bias));
        let p = t.mul(x, y)?;
        let q = t.add(p, x)?;
        let q = t.add_row_bias(q, bias)?;
        let q = t.scale(q, 0.7);
        let q = t.reshape(q, &[2, 6])?;
        weighted_sum(t, q, r)
    })?;

    let mut s = ParamStore::new();
    let x = s.register("x", Tensor::randn(&[3, 5], 1.0, rng));
    run.check("softmax_rows", &s, opts, tol, |t, r| {
        let x = t.param(x);
        let y = t.softmax_rows(x);
        weighted_sum(t, y, r)
    })?;

    let mut s = ParamStore::new();
    let x = s.register("x", Tensor::randn(&[3, 6], 1.0, rng));
    let g = s.register("gamma", Tensor::uniform(&[6], 0.5, 1.5, rng));
    let be = s.register("beta", Tensor::randn(&[6], 1.0, rng));
    run.check("layer_norm", &s, CheckOptions { step: 1e-4, ..opts }, tol, |t, r| {
        let (x, g, be) = (t.param(x), t.param(g), t.param(be));
        let y = t.layer_norm(x, g, be, LAYER_NORM_EPS)?;
        weighted_sum(t, y, r)
    })?;

    let mut s = ParamStore::new();
    let x = s.register("x", Tensor::randn(&[3, 4], 1.0, rng).map(|v| v + v.signum()));
    run.check("l2_normalize_rows", &s, opts, tol, |t, r| {
        let x = t.param(x);
        let y = t.l2_normalize_rows(x)?;
        weighted_sum(t, y, r)
    })?;

    let mut s = ParamStore::new();
    let x = s.register("x", Tensor::randn(&[3, 4], 1.0, rng));
    let y = s.register("y", Tensor::randn(&[2, 4], 1.0, rng));
    run.check("concat_slice_gather", &s, opts, tol, |t, r| {
        let (x, y) = (t.param(x), t.param(y));
        let rows = t.concat_rows(&[x, y])?;
        let picked = t.gather_rows(rows, &[4, 0, 0, 2])?;
        let part = t.slice_cols(picked, 1, 2)?;
        let out = t.concat_cols(&[part, picked])?;
        weighted_sum(t, out, r)
    })?;

    // sampling locations kept clear of grid lines, where bilinear
    // interpolation has kinks
    let mut s = ParamStore::new();
    let m0 = s.register("map0", Tensor::randn(&[3, 5, 6], 1.0, rng));
    let m1 = s.register("map1", Tensor::randn(&[3, 3, 3], 1.0, rng));
    let coords: Vec<f64> = (0..8)
        .flat_map(|_| {
            let cell = |rng: &mut ChaCha8Rng, hi: i32| rng.random_range(-1..hi) as f64 + rng.random_range(0.1..0.9);
            [cell(rng, 5), cell(rng, 3)]
        })
        .collect();
    let c = s.register("coords", Tensor::new(vec![8, 2], coords)?);
    run.check("bilinear_gather", &s, opts, tol, |t, r| {
        let maps = [t.param(m0), t.param(m1)];
        let c = t.param(c);
        let y = t.bilinear_gather(&maps, c, 2)?;
        weighted_sum(t, y, r)
    })?;

    let mut s = ParamStore::new();
    let v = s.register("values", Tensor::randn(&[2 * 2 * 3, 4], 1.0, rng));
    let w = s.register("weights", Tensor::randn(&[2 * 2, 3], 1.0, rng));
    run.check("head_weighted_sum", &s, opts, tol, |t, r| {
        let (v, w) = (t.param(v), t.param(w));
        let y = t.head_weighted_sum(v, w, 2)?;
        weighted_sum(t, y, r)
    })?;

    let mut s = ParamStore::new();
    let l = s.register("logits", Tensor::randn(&[4, 5], 0.5, rng));
    run.check("focal_cross_entropy", &s, opts, tol, |t, _| {
        let l = t.param(l);
        t.focal_cross_entropy(l, &[Some(1), None, Some(4), Some(0)], 2.0)
    })?;
    Ok(())
}

fn composite_blocks(run: &mut Runner, rng: &mut ChaCha8Rng) -> Result<()> {
    let opts = CheckOptions::default();
    let tol = COMPOSITE_TOL;

    let mut s = ParamStore::new();
    let sa = MultiHeadAttnParams::init(&mut s, "self", 6, 2, rng)?;
    let y = s.register("y", Tensor::randn(&[4, 6], 1.0, rng));
    run.check("self_attention", &s, opts, tol, |t, r| {
        let y = t.param(y);
        let out = multi_head_self_attention(t, y, &sa)?;
        weighted_sum(t, out, r)
    })?;

    for (name, levels) in [("deform_attention", 1usize), ("multiscale_deform_attention", 3)] {
        let mut s = ParamStore::new();
        let shape = DeformShape { width: 4, channels: 3, heads: 2, points: 2, levels };
        let p = DeformAttnParams::init(&mut s, "cross", shape, rng)?;
        perturb(&mut s, 0.2, rng);
        let z = s.register("z", Tensor::randn(&[3, 4], 1.0, rng));
        let refs = s.register("refs", Tensor::uniform(&[3, 2], 0.2, 0.8, rng));
        let maps: Vec<Tensor> = [(7, 8), (4, 4), (2, 3)][..levels]
            .iter()
            .map(|&(h, w)| Tensor::randn(&[3, h, w], 1.0, rng))
            .collect();
        run.check(name, &s, opts, tol, |t, r| {
            let (z, refs) = (t.param(z), t.param(refs));
            let mv: Vec<Var> = maps.iter().map(|m| t.constant(m.clone())).collect();
            let out = deform_attn_levels(t, z, refs, &mv, &p)?;
            weighted_sum(t, out, r)
        })?;
    }

    let mut s = ParamStore::new();
    let x = s.register("features", Tensor::randn(&[4, 6], 1.0, rng));
    let queue: Vec<Vec<f64>> = (0..3).map(|r| unit_rows(rng, 3, 6).row(r).to_vec()).collect();
    let state = OimState::from_parts(unit_rows(rng, 5, 6), queue, 4, 0.5, 1.0 / 30.0)?;
    let labels = [IdLabel::Labeled(2), IdLabel::Unlabeled, IdLabel::Labeled(0), IdLabel::Background];
    run.check("oim_loss", &s, opts, tol, |t, _| {
        let x = t.param(x);
        let u = t.l2_normalize_rows(x)?;
        state.loss_on_tape(t, u, &labels, 2.0)
    })?;
    Ok(())
}

fn model_block(run: &mut Runner, opts: &SuiteOptions, rng: &mut ChaCha8Rng) -> Result<()> {
    let cfg = opts.model.clone();
    let mut model = ReIDModel::new(cfg.clone(), opts.seed)?;
    perturb(model.store_mut(), 0.1, rng);

    let synth = SynthConfig {
        channels: cfg.channels,
        identities: 4,
        unlabeled_identities: 0,
        ..SynthConfig::default()
    };
    let bank = IdentityBank::generate(4, 0, cfg.channels, 0.9, opts.seed);
    let persons = [
        Person { bbox: BBox::new(0.13, 0.21, 0.31, 0.67)?, identity: Identity::Labeled(1) },
        Person { bbox: BBox::new(0.57, 0.18, 0.74, 0.61)?, identity: Identity::Labeled(3) },
    ];
    let scene = render_scene(&bank, &persons, &synth, 0, opts.seed)?;
    let boxes = [persons[0].bbox, persons[1].bbox];
    let dets = jitter_detect(&boxes, cfg.queries.max(2), 0.02, opts.seed)?;
    let refs = dets.references();
    let mut labels = vec![IdLabel::Background; dets.len()];
    labels[0] = IdLabel::Labeled(1);
    labels[1] = IdLabel::Labeled(3);

    let dim = cfg.scale_width();
    let states: Vec<OimState> = (0..cfg.scheme.num_outputs())
        .map(|_| {
            let queue = vec![unit_rows(rng, 1, dim).row(0).to_vec()];
            OimState::from_parts(unit_rows(rng, 4, dim), queue, 2, 0.5, 1.0 / 30.0)
        })
        .collect::<Result<_>>()?;
    let check = CheckOptions {
        max_coords: Some(opts.max_coords),
        ..CheckOptions::default()
    };
    let store = model.store().clone();
    run.check("reid_model_oim", &store, check, COMPOSITE_TOL, |t, _| {
        let maps: Vec<Var> = scene.pyramid.iter().map(|m| t.constant(m.clone())).collect();
        let r = model.reference_var(t, &refs)?;
        let outs = reid_forward(t, &model, &maps, r, &mut Dropout::disabled())?;
        let mut total: Option<Var> = None;
        for (o, st) in outs.iter().zip(&states) {
            let f = t.l2_normalize_rows(*o)?;
            let l = st.loss_on_tape(t, f, &labels, 2.0)?;
            total = Some(match total {
                Some(acc) => t.add(acc, l)?,
                None => l,
            });
        }
        let total = total.expect("at least one embedding set");
        Ok(t.scale(total, 1.0 / outs.len() as f64))
    })
}

/// Runs every block and returns one report per block, in order.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<BlockReport>> {
    opts.model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut run = Runner {
        corrupt: opts.corrupt,
        seed: opts.seed,
        reports: Vec::new(),
    };
    primitive_blocks(&mut run, &mut rng)?;
    composite_blocks(&mut run, &mut rng)?;
    model_block(&mut run, opts, &mut rng)?;
    Ok(run.reports)
}
