//! Synthetic person-search benchmark: feature pyramids with planted identity
//! signatures, ground-truth boxes, and train/gallery/query splits.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::BBox;
use crate::error::{Error, Result};
use crate::losses::IdLabel;
use crate::tensor::{l2_normalize, Tensor};

pub const MANIFEST_FORMAT: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const SCENE_DIR: &str = "scenes";

/// Generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Nominal square image side; level `l` (1..=3) has side `image_size / 2^(l+2)`.
    pub image_size: usize,
    pub channels: usize,
    /// Labeled identities `L`.
    pub identities: usize,
    /// Identities that only ever appear unlabeled.
    pub unlabeled_identities: usize,
    pub num_train: usize,
    pub num_gallery: usize,
    pub num_queries: usize,
    pub persons_per_scene: usize,
    /// Probability that a person slot holds an unlabeled identity.
    pub unlabeled_fraction: f64,
    /// Probability that a person is placed overlapping an earlier one.
    pub occlusion_rate: f64,
    /// Standard deviation of the background noise.
    pub noise_sigma: f64,
    /// Labeled identities `2i` and `2i+1` always appear together.
    pub co_travellers: bool,
    /// Probability that an unlabeled gallery slot shows a near-copy of a
    /// labeled identity instead.
    pub decoy_rate: f64,
    /// Cosine similarity between a labeled identity and its near-copy.
    pub decoy_similarity: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 256,
            channels: 32,
            identities: 16,
            unlabeled_identities: 16,
            num_train: 200,
            num_gallery: 60,
            num_queries: 40,
            persons_per_scene: 3,
            unlabeled_fraction: 0.2,
            occlusion_rate: 0.0,
            noise_sigma: 0.1,
            co_travellers: false,
            decoy_rate: 0.0,
            decoy_similarity: 0.95,
        }
    }
}

/// Boxes are drawn with width in this range (normalised units).
const BOX_WIDTH: (f64, f64) = (0.12, 0.22);
const BOX_HEIGHT: (f64, f64) = (0.3, 0.5);
/// Minimum overlap (intersection over the smaller area) of an occluding pair.
pub const OCCLUSION_OVERLAP: f64 = 0.3;
const PLACEMENT_ATTEMPTS: usize = 10_000;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size < 64 || self.image_size % 32 != 0 {
            return bad(format!("data.benchmark.image_size {} must be a multiple of 32, at least 64", self.image_size));
        }
        if self.channels == 0 || self.persons_per_scene == 0 {
            return bad("data.benchmark.channels and data.benchmark.persons_per_scene must be positive".into());
        }
        if self.persons_per_scene > 6 {
            return bad(format!("data.benchmark.persons_per_scene {} exceeds 6", self.persons_per_scene));
        }
        if self.num_queries > 0 && self.identities < 2 {
            return bad("queries need at least 2 labeled identities".into());
        }
        if self.num_gallery < 2 && self.num_queries > 0 {
            return bad("queries need at least 2 gallery scenes".into());
        }
        for (name, p) in [
            ("unlabeled_fraction", self.unlabeled_fraction),
            ("occlusion_rate", self.occlusion_rate),
            ("decoy_rate", self.decoy_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("data.benchmark.{name} {p} not in [0, 1]"));
            }
        }
        if self.unlabeled_fraction > 0.0 && self.unlabeled_identities == 0 {
            return bad("unlabeled persons need data.benchmark.unlabeled_identities > 0".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("data.benchmark.noise_sigma {} must be non-negative", self.noise_sigma));
        }
        if !(-1.0..=1.0).contains(&self.decoy_similarity) {
            return bad(format!("data.benchmark.decoy_similarity {} not in [-1, 1]", self.decoy_similarity));
        }
        if self.co_travellers && (self.identities % 2 != 0 || self.persons_per_scene < 2) {
            return bad("co-travellers need an even identity count and ≥ 2 persons per scene".into());
        }
        if self.identities + self.unlabeled_identities < self.persons_per_scene {
            return bad("not enough identities to fill a scene".into());
        }
        Ok(())
    }

    /// `(height, width)` of the three pyramid levels.
    pub fn level_sizes(&self) -> [(usize, usize); 3] {
        std::array::from_fn(|i| {
            let s = self.image_size >> (i + 3);
            (s, s)
        })
    }
}

/// Which bank vector a person wears.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Identity {
    Labeled(usize),
    Unlabeled(usize),
    /// Near-copy of the given labeled identity; carries no label.
    Decoy(usize),
}

impl Identity {
    pub fn label(&self) -> IdLabel {
        match *self {
            Identity::Labeled(i) => IdLabel::Labeled(i),
            _ => IdLabel::Unlabeled,
        }
    }

    pub fn labeled(&self) -> Option<usize> {
        match *self {
            Identity::Labeled(i) => Some(i),
            _ => None,
        }
    }
}

/// Unit-norm signature vectors for every identity.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityBank {
    labeled: Vec<Vec<f64>>,
    unlabeled: Vec<Vec<f64>>,
    decoys: Vec<Vec<f64>>,
}

impl IdentityBank {
    pub fn generate(labeled: usize, unlabeled: usize, channels: usize, decoy_similarity: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw = |rng: &mut ChaCha8Rng| {
            let v: Vec<f64> = (0..channels).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
            l2_normalize(&v)
        };
        let lab: Vec<Vec<f64>> = (0..labeled).map(|_| draw(&mut rng)).collect();
        let unl = (0..unlabeled).map(|_| draw(&mut rng)).collect();
        let sin = (1.0 - decoy_similarity * decoy_similarity).max(0.0).sqrt();
        let decoys = lab
            .iter()
            .map(|v| {
                // component of a fresh direction orthogonal to v
                let w = draw(&mut rng);
                let proj = crate::tensor::dot(&w, v);
                let orth = l2_normalize(&w.iter().zip(v).map(|(a, b)| a - proj * b).collect::<Vec<_>>());
                l2_normalize(&v.iter().zip(&orth).map(|(a, o)| decoy_similarity * a + sin * o).collect::<Vec<_>>())
            })
            .collect();
        IdentityBank {
            labeled: lab,
            unlabeled: unl,
            decoys,
        }
    }

    pub fn vector(&self, id: Identity) -> Result<&[f64]> {
        let (list, i) = match id {
            Identity::Labeled(i) => (&self.labeled, i),
            Identity::Unlabeled(i) => (&self.unlabeled, i),
            Identity::Decoy(i) => (&self.decoys, i),
        };
        list.get(i)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Invalid(format!("unknown identity {id:?}")))
    }

    pub fn num_labeled(&self) -> usize {
        self.labeled.len()
    }

    pub fn num_unlabeled(&self) -> usize {
        self.unlabeled.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Person {
    pub bbox: BBox,
    pub identity: Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: usize,
    /// Three maps `C × H_l × W_l`, finest first.
    pub pyramid: Vec<Tensor>,
    pub persons: Vec<Person>,
}

impl Scene {
    pub fn boxes(&self) -> Vec<BBox> {
        self.persons.iter().map(|p| p.bbox).collect()
    }
}

/// Adds Gaussian background noise and each person's signature, spread by an
/// isotropic bump centred on the box (peak 1, σ = a quarter of the larger box
/// side in that level's pixels, support = box grown by one pixel).
pub fn render_scene(
    bank: &IdentityBank,
    persons: &[Person],
    config: &SynthConfig,
    id: usize,
    seed: u64,
) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let noise = Normal::new(0.0, config.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let c = config.channels;
    let vectors: Vec<&[f64]> = persons
        .iter()
        .map(|p| bank.vector(p.identity))
        .collect::<Result<_>>()?;
    if vectors.iter().any(|v| v.len() != c) {
        return Err(Error::Invalid("identity width differs from channel count".into()));
    }
    let mut pyramid = Vec::with_capacity(3);
    for (h, w) in config.level_sizes() {
        let mut map = Tensor::zeros(&[c, h, w]);
        if config.noise_sigma > 0.0 {
            for v in map.data_mut() {
                *v = noise.sample(&mut rng);
            }
        }
        let (sx, sy) = ((w - 1) as f64, (h - 1) as f64);
        for (p, sig) in persons.iter().zip(&vectors) {
            let b = p.bbox;
            let (cx, cy) = ((b.x1 + b.x2) / 2.0 * sx, (b.y1 + b.y2) / 2.0 * sy);
            let sigma = (b.width() * sx).max(b.height() * sy).max(2.0) / 4.0;
            let xs = ((b.x1 * sx - 1.0).floor().max(0.0) as usize)..=((b.x2 * sx + 1.0).ceil().min(sx) as usize);
            let ys = ((b.y1 * sy - 1.0).floor().max(0.0) as usize)..=((b.y2 * sy + 1.0).ceil().min(sy) as usize);
            for yi in ys {
                for xi in xs.clone() {
                    let d2 = (xi as f64 - cx).powi(2) + (yi as f64 - cy).powi(2);
                    let wgt = (-d2 / (2.0 * sigma * sigma)).exp();
                    for (ch, s) in sig.iter().enumerate() {
                        map.data_mut()[(ch * h + yi) * w + xi] += wgt * s;
                    }
                }
            }
        }
        pyramid.push(map);
    }
    Ok(Scene {
        id,
        pyramid,
        persons: persons.to_vec(),
    })
}

fn overlap_fraction(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    w * h / a.area().min(b.area())
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let w = rng.random_range(BOX_WIDTH.0..BOX_WIDTH.1);
    let h = rng.random_range(BOX_HEIGHT.0..BOX_HEIGHT.1);
    let x1 = rng.random_range(0.0..1.0 - w);
    let y1 = rng.random_range(0.0..1.0 - h);
    BBox { x1, y1, x2: x1 + w, y2: y1 + h }
}

/// Places `count` boxes: disjoint, except that with probability
/// `occlusion_rate` a box is made to overlap one earlier box by at least
/// [`OCCLUSION_OVERLAP`] of the smaller area.
pub fn layout_boxes(count: usize, occlusion_rate: f64, rng: &mut ChaCha8Rng) -> Result<Vec<BBox>> {
    let mut boxes: Vec<BBox> = Vec::with_capacity(count);
    for i in 0..count {
        let occlude = i > 0 && rng.random::<f64>() < occlusion_rate;
        let target = if occlude { Some(rng.random_range(0..i)) } else { None };
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let cand = random_box(rng);
            let ok = boxes.iter().enumerate().all(|(j, b)| {
                let f = overlap_fraction(&cand, b);
                if Some(j) == target {
                    f >= OCCLUSION_OVERLAP && f < 0.9
                } else {
                    f == 0.0
                }
            });
            if ok {
                placed = Some(cand);
                break;
            }
        }
        let b = placed.ok_or_else(|| Error::Config(format!("could not place {count} persons in a scene")))?;
        boxes.push(b);
    }
    Ok(boxes)
}

/// A query: a labeled person in a gallery scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub scene: usize,
    /// Index into the scene's person list.
    pub person: usize,
    pub identity: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub config: SynthConfig,
    pub seed: u64,
    pub bank: IdentityBank,
    /// All scenes, indexed by id.
    pub scenes: Vec<Scene>,
    pub train: Vec<usize>,
    pub gallery: Vec<usize>,
    pub queries: Vec<QuerySpec>,
}

fn scene_seed(seed: u64, id: usize) -> u64 {
    seed ^ id as u64
}

fn compose_scene(
    cfg: &SynthConfig,
    gallery: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<Identity> {
    let mut ids: Vec<Identity> = Vec::with_capacity(cfg.persons_per_scene);
    let present = |ids: &Vec<Identity>, l: usize| ids.iter().any(|i| *i == Identity::Labeled(l) || *i == Identity::Decoy(l));
    while ids.len() < cfg.persons_per_scene {
        let room = cfg.persons_per_scene - ids.len();
        let want_labeled = rng.random::<f64>() >= cfg.unlabeled_fraction;
        let can_pair = !cfg.co_travellers || room >= 2;
        if want_labeled && can_pair {
            let free: Vec<usize> = (0..cfg.identities)
                .filter(|&l| !present(&ids, l) && !(cfg.co_travellers && present(&ids, l ^ 1)))
                .collect();
            if let Some(&l) = free.choose(rng) {
                ids.push(Identity::Labeled(l));
                if cfg.co_travellers {
                    ids.push(Identity::Labeled(l ^ 1));
                }
                continue;
            }
        }
        if gallery && cfg.decoy_rate > 0.0 && rng.random::<f64>() < cfg.decoy_rate {
            let free: Vec<usize> = (0..cfg.identities)
                .filter(|&l| !present(&ids, l) && !(cfg.co_travellers && present(&ids, l ^ 1)))
                .collect();
            if let Some(&l) = free.choose(rng) {
                ids.push(Identity::Decoy(l));
                continue;
            }
        }
        let free: Vec<usize> = (0..cfg.unlabeled_identities)
            .filter(|&u| !ids.contains(&Identity::Unlabeled(u)))
            .collect();
        if let Some(&u) = free.choose(rng) {
            ids.push(Identity::Unlabeled(u));
        } else if cfg.unlabeled_fraction >= 1.0 {
            break;
        }
    }
    ids
}

/// Builds the whole benchmark in memory. Scene compositions and queries are
/// drawn from one seeded stream; each scene's layout and rendering use the
/// scene's own derived seed.
pub fn make_benchmark(config: &SynthConfig, seed: u64) -> Result<Benchmark> {
    config.validate()?;
    let bank = IdentityBank::generate(
        config.identities,
        config.unlabeled_identities,
        config.channels,
        config.decoy_similarity,
        seed,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let total = config.num_train + config.num_gallery;
    let compositions: Vec<Vec<Identity>> = (0..total)
        .map(|i| compose_scene(config, i >= config.num_train, &mut rng))
        .collect();
    let train: Vec<usize> = (0..config.num_train).collect();
    let gallery: Vec<usize> = (config.num_train..total).collect();

    // queries: labeled persons whose identity occurs in another gallery scene
    let mut occurrences: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for &s in &gallery {
        for id in compositions[s].iter().filter_map(Identity::labeled) {
            occurrences.entry(id).or_default().insert(s);
        }
    }
    let mut candidates: Vec<QuerySpec> = Vec::new();
    for &s in &gallery {
        for (p, id) in compositions[s].iter().enumerate() {
            if let Some(l) = id.labeled() {
                if occurrences[&l].len() >= 2 {
                    candidates.push(QuerySpec { scene: s, person: p, identity: l });
                }
            }
        }
    }
    if candidates.len() < config.num_queries {
        return Err(Error::Config(format!(
            "{} queries requested but only {} gallery persons have a match in another scene",
            config.num_queries,
            candidates.len()
        )));
    }
    let mut queries: Vec<QuerySpec> = rand::seq::index::sample(&mut rng, candidates.len(), config.num_queries)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    queries.sort_by_key(|q| (q.scene, q.person));

    let scenes = compositions
        .par_iter()
        .enumerate()
        .map(|(id, ids)| {
            let s = scene_seed(seed, id);
            let mut layout_rng = ChaCha8Rng::seed_from_u64(s);
            let boxes = layout_boxes(ids.len(), config.occlusion_rate, &mut layout_rng)?;
            let persons: Vec<Person> = boxes
                .into_iter()
                .zip(ids)
                .map(|(bbox, &identity)| Person { bbox, identity })
                .collect();
            render_scene(&bank, &persons, config, id, s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Benchmark {
        config: config.clone(),
        seed,
        bank,
        scenes,
        train,
        gallery,
        queries,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRecord {
    id: usize,
    levels: Vec<String>,
    persons: Vec<Person>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Splits {
    train: Vec<usize>,
    gallery: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    seed: u64,
    config: SynthConfig,
    splits: Splits,
    queries: Vec<QuerySpec>,
    scenes: Vec<SceneRecord>,
}

impl Benchmark {
    pub fn scene(&self, id: usize) -> &Scene {
        &self.scenes[id]
    }

    /// Writes `manifest.json` and one tensor blob per scene level into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let scene_dir = dir.join(SCENE_DIR);
        std::fs::create_dir_all(&scene_dir).map_err(|e| Error::io(&scene_dir, e))?;
        let mut records = Vec::with_capacity(self.scenes.len());
        for s in &self.scenes {
            let mut levels = Vec::with_capacity(s.pyramid.len());
            for (l, map) in s.pyramid.iter().enumerate() {
                let name = format!("{SCENE_DIR}/scene_{:05}_l{}.bin", s.id, l);
                map.save(&dir.join(&name))?;
                levels.push(name);
            }
            records.push(SceneRecord {
                id: s.id,
                levels,
                persons: s.persons.clone(),
            });
        }
        let manifest = Manifest {
            format_version: MANIFEST_FORMAT,
            seed: self.seed,
            config: self.config.clone(),
            splits: Splits {
                train: self.train.clone(),
                gallery: self.gallery.clone(),
            },
            queries: self.queries.clone(),
            scenes: records,
        };
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Reads a dataset directory written by [`Benchmark::write`].
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if m.format_version != MANIFEST_FORMAT {
            return Err(Error::format(&path, format!("unsupported format version {}", m.format_version)));
        }
        m.config.validate()?;
        let sizes = m.config.level_sizes();
        let scenes = m
            .scenes
            .par_iter()
            .enumerate()
            .map(|(i, r)| {
                if r.id != i || r.levels.len() != 3 {
                    return Err(Error::format(&path, format!("scene record {i} is malformed")));
                }
                let pyramid = r
                    .levels
                    .iter()
                    .zip(sizes)
                    .map(|(f, (h, w))| {
                        let t = Tensor::load(&dir.join(f))?;
                        if t.shape() != [m.config.channels, h, w] {
                            return Err(Error::format(dir.join(f), format!("unexpected shape {:?}", t.shape())));
                        }
                        Ok(t)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Scene {
                    id: r.id,
                    pyramid,
                    persons: r.persons.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let n = scenes.len();
        let in_range = |v: &[usize]| v.iter().all(|&s| s < n);
        if !in_range(&m.splits.train) || !in_range(&m.splits.gallery) {
            return Err(Error::format(&path, "split refers to a missing scene"));
        }
        for q in &m.queries {
            let ok = q.scene < n
                && scenes[q.scene]
                    .persons
                    .get(q.person)
                    .is_some_and(|p| p.identity == Identity::Labeled(q.identity));
            if !ok {
                return Err(Error::format(&path, format!("query {q:?} does not match its scene")));
            }
        }
        let bank = IdentityBank::generate(
            m.config.identities,
            m.config.unlabeled_identities,
            m.config.channels,
            m.config.decoy_similarity,
            m.seed,
        );
        Ok(Benchmark {
            config: m.config,
            seed: m.seed,
            bank,
            scenes,
            train: m.splits.train,
            gallery: m.splits.gallery,
            queries: m.queries,
        })
    }
}
