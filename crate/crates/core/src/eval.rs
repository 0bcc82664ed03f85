//! Person-search retrieval protocol: ranking, mAP and CMC with IoU-gated
//! correctness, gallery-size sweeps and context bipartite re-ranking.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::detector::{hungarian_assign, iou, BBox};
use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
/// Detections scoring below this are not entered into the gallery.
pub const GALLERY_SCORE_THRESHOLD: f64 = 0.5;
pub const DEFAULT_K1: usize = 30;
pub const DEFAULT_K2: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryEntry {
    pub scene: usize,
    pub bbox: BBox,
    pub embedding: Vec<f64>,
    pub score: f64,
}

/// Gallery scenes and the detections extracted from them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gallery {
    pub scenes: Vec<usize>,
    pub entries: Vec<GalleryEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryEntry {
    pub query_id: usize,
    pub scene: usize,
    /// Annotated box of the queried person.
    pub bbox: BBox,
    pub identity: usize,
    pub embedding: Vec<f64>,
    /// Embeddings of the other confident detections in the query scene,
    /// most confident first.
    pub context: Vec<Vec<f64>>,
}

/// Annotated persons per scene: box and labeled identity, if any.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    scenes: BTreeMap<usize, Vec<(BBox, Option<usize>)>>,
}

impl GroundTruth {
    pub fn insert(&mut self, scene: usize, persons: Vec<(BBox, Option<usize>)>) {
        self.scenes.insert(scene, persons);
    }

    pub fn boxes_of(&self, scene: usize, identity: usize) -> Vec<BBox> {
        self.scenes
            .get(&scene)
            .map(|ps| {
                ps.iter()
                    .filter(|(_, id)| *id == Some(identity))
                    .map(|(b, _)| *b)
                    .collect()
            })
            .unwrap_or_default()
    }
}

/// Slot with maximal IoU against the annotated box; ties go to the lowest slot.
pub fn select_query_embedding(boxes: &[BBox], annotated: &BBox) -> Result<usize> {
    if boxes.is_empty() {
        return Err(Error::Invalid("query scene has no detections".into()));
    }
    let mut best = 0;
    let mut best_iou = iou(&boxes[0], annotated);
    for (i, b) in boxes.iter().enumerate().skip(1) {
        let v = iou(b, annotated);
        if v > best_iou {
            best = i;
            best_iou = v;
        }
    }
    Ok(best)
}

/// Sum of precision at each correct rank, divided by the number of relevant items.
pub fn ap_single_query(correct: &[bool], num_relevant: usize) -> Result<f64> {
    if num_relevant == 0 {
        return Err(Error::Invalid("average precision needs at least one relevant item".into()));
    }
    let mut hits = 0usize;
    let mut total = 0.0;
    for (r, &c) in correct.iter().enumerate() {
        if c {
            hits += 1;
            total += hits as f64 / (r + 1) as f64;
        }
    }
    Ok(total / num_relevant as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    pub scene: usize,
    /// Index into the gallery entry list.
    pub entry: usize,
    pub score: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryRanking {
    pub query_id: usize,
    pub candidates: Vec<Candidate>,
    pub num_relevant: usize,
    pub ap: f64,
}

impl QueryRanking {
    pub fn hit_within(&self, k: usize) -> bool {
        self.candidates.iter().take(k).any(|c| c.correct)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankingResult {
    pub queries: Vec<QueryRanking>,
    pub map: f64,
    pub top1: f64,
    pub top5: f64,
    pub top10: f64,
}

impl RankingResult {
    fn aggregate(queries: Vec<QueryRanking>) -> Self {
        let n = queries.len().max(1) as f64;
        let frac = |k| queries.iter().filter(|q| q.hit_within(k)).count() as f64 / n;
        RankingResult {
            map: queries.iter().map(|q| q.ap).sum::<f64>() / n,
            top1: frac(1),
            top5: frac(5),
            top10: frac(10),
            queries,
        }
    }

    /// `query_id,rank,scene_id,score,correct` rows, ranks starting at 1.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("query_id,rank,scene_id,score,correct\n");
        for q in &self.queries {
            for (r, c) in q.candidates.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    q.query_id,
                    r + 1,
                    c.scene,
                    c.score,
                    u8::from(c.correct)
                ));
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn check_dims(queries: &[QueryEntry], gallery: &Gallery) -> Result<()> {
    let dim = queries
        .first()
        .map(|q| q.embedding.len())
        .or_else(|| gallery.entries.first().map(|e| e.embedding.len()));
    let Some(dim) = dim else { return Ok(()) };
    let bad = queries
        .iter()
        .flat_map(|q| std::iter::once(&q.embedding).chain(&q.context))
        .chain(gallery.entries.iter().map(|e| &e.embedding))
        .find(|e| e.len() != dim);
    match bad {
        Some(e) => Err(Error::shape("evaluate", &[dim], &[e.len()])),
        None => Ok(()),
    }
}

/// Ranks `scored` (entry index, score) and scores the ranking for one query.
fn rank_query(
    query: &QueryEntry,
    gallery: &Gallery,
    allowed: &BTreeSet<usize>,
    mut scored: Vec<(usize, f64)>,
    truth: &GroundTruth,
    iou_threshold: f64,
) -> Result<QueryRanking> {
    let num_relevant: usize = allowed
        .iter()
        .map(|&s| truth.boxes_of(s, query.identity).len())
        .sum();
    if num_relevant == 0 {
        return Err(Error::Invalid(format!(
            "query {} has no gallery occurrence of identity {}",
            query.query_id, query.identity
        )));
    }
    // stable: equal scores keep gallery insertion order
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut claimed: BTreeMap<usize, Vec<bool>> = BTreeMap::new();
    let mut candidates = Vec::with_capacity(scored.len());
    for (idx, score) in scored {
        let entry = &gallery.entries[idx];
        let gts = truth.boxes_of(entry.scene, query.identity);
        let used = claimed.entry(entry.scene).or_insert_with(|| vec![false; gts.len()]);
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            let v = iou(&entry.bbox, gt);
            if !used[g] && v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            used[g] = true;
        }
        candidates.push(Candidate {
            scene: entry.scene,
            entry: idx,
            score,
            correct: best.is_some(),
        });
    }
    let flags: Vec<bool> = candidates.iter().map(|c| c.correct).collect();
    Ok(QueryRanking {
        query_id: query.query_id,
        ap: ap_single_query(&flags, num_relevant)?,
        num_relevant,
        candidates,
    })
}

fn base_scores(query: &QueryEntry, gallery: &Gallery, allowed: &BTreeSet<usize>) -> Vec<(usize, f64)> {
    gallery
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| allowed.contains(&e.scene))
        .map(|(i, e)| (i, dot(&query.embedding, &e.embedding)))
        .collect()
}

fn scenes_without(gallery: &Gallery, scene: usize) -> BTreeSet<usize> {
    gallery.scenes.iter().copied().filter(|&s| s != scene).collect()
}

/// Ranks every gallery entry outside the query's own scene by cosine
/// similarity and computes mAP and CMC top-1/5/10.
pub fn evaluate(
    queries: &[QueryEntry],
    gallery: &Gallery,
    truth: &GroundTruth,
    iou_threshold: f64,
) -> Result<RankingResult> {
    check_dims(queries, gallery)?;
    let per_query = queries
        .par_iter()
        .map(|q| {
            let allowed = scenes_without(gallery, q.scene);
            rank_query(q, gallery, &allowed, base_scores(q, gallery, &allowed), truth, iou_threshold)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RankingResult::aggregate(per_query))
}

/// Per-query gallery of `size` scenes: every scene holding the query identity
/// plus a seeded random selection of distractor scenes. The distractor order
/// is fixed per query, so larger sizes see supersets of smaller ones.
pub fn sweep_scenes(
    query: &QueryEntry,
    gallery: &Gallery,
    truth: &GroundTruth,
    size: usize,
    seed: u64,
) -> Result<BTreeSet<usize>> {
    let others = scenes_without(gallery, query.scene);
    let (required, mut distractors): (Vec<usize>, Vec<usize>) = others
        .iter()
        .partition(|&&s| !truth.boxes_of(s, query.identity).is_empty());
    if size < required.len() {
        return Err(Error::Invalid(format!(
            "gallery size {size} cannot hold the {} scenes matching query {}",
            required.len(),
            query.query_id
        )));
    }
    if size > others.len() {
        return Err(Error::Invalid(format!(
            "gallery size {size} exceeds the {} available scenes",
            others.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(query.query_id as u64);
    distractors.shuffle(&mut rng);
    let extra = size - required.len();
    Ok(required.into_iter().chain(distractors.into_iter().take(extra)).collect())
}

/// [`evaluate`] at each gallery size.
pub fn gallery_sweep(
    queries: &[QueryEntry],
    gallery: &Gallery,
    truth: &GroundTruth,
    sizes: &[usize],
    iou_threshold: f64,
    seed: u64,
) -> Result<Vec<(usize, RankingResult)>> {
    check_dims(queries, gallery)?;
    sizes
        .iter()
        .map(|&size| {
            let per_query = queries
                .par_iter()
                .map(|q| {
                    let allowed = sweep_scenes(q, gallery, truth, size, seed)?;
                    rank_query(q, gallery, &allowed, base_scores(q, gallery, &allowed), truth, iou_threshold)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((size, RankingResult::aggregate(per_query)))
        })
        .collect()
}

/// Sum of the positive similarities in a maximum-weight matching between the
/// query's context persons and a candidate scene's other detections.
pub fn context_bonus(context: &[Vec<f64>], others: &[&[f64]]) -> Result<f64> {
    if context.is_empty() || others.is_empty() {
        return Ok(0.0);
    }
    let mut cost = Tensor::zeros(&[context.len(), others.len()]);
    for (i, c) in context.iter().enumerate() {
        for (j, o) in others.iter().enumerate() {
            cost.data_mut()[i * others.len() + j] = -dot(c, o).max(0.0);
        }
    }
    let (pairs, _) = hungarian_assign(&cost)?;
    Ok(pairs.iter().map(|&(i, j)| dot(&context[i], others[j]).max(0.0)).sum())
}

/// Context bipartite graph re-ranking. For the `k1` best-scoring scenes of
/// each query, every candidate's score gains the matched positive
/// similarities between up to `k2` query-scene context persons and the
/// candidate scene's other detections. Other scenes keep their scores.
pub fn cbgm_rerank(
    queries: &[QueryEntry],
    gallery: &Gallery,
    truth: &GroundTruth,
    k1: usize,
    k2: usize,
    iou_threshold: f64,
) -> Result<RankingResult> {
    if k1 == 0 {
        return Err(Error::Invalid("k1 must be at least 1".into()));
    }
    check_dims(queries, gallery)?;
    let per_query = queries
        .par_iter()
        .map(|q| {
            let allowed = scenes_without(gallery, q.scene);
            let mut scored = base_scores(q, gallery, &allowed);
            let context = &q.context[..k2.min(q.context.len())];
            if !context.is_empty() {
                rescore(&mut scored, gallery, context, k1)?;
            }
            rank_query(q, gallery, &allowed, scored, truth, iou_threshold)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RankingResult::aggregate(per_query))
}

fn rescore(scored: &mut [(usize, f64)], gallery: &Gallery, context: &[Vec<f64>], k1: usize) -> Result<()> {
    // scenes ordered by their best candidate, first appearance breaking ties
    let mut best: Vec<(usize, f64)> = Vec::new();
    for &(i, s) in scored.iter() {
        let scene = gallery.entries[i].scene;
        match best.iter_mut().find(|(sc, _)| *sc == scene) {
            Some(b) => b.1 = b.1.max(s),
            None => best.push((scene, s)),
        }
    }
    best.sort_by(|a, b| b.1.total_cmp(&a.1));
    let top: BTreeSet<usize> = best.iter().take(k1).map(|(s, _)| *s).collect();
    let members: Vec<usize> = scored.iter().map(|(i, _)| *i).collect();
    for (i, s) in scored.iter_mut() {
        let scene = gallery.entries[*i].scene;
        if !top.contains(&scene) {
            continue;
        }
        let others: Vec<&[f64]> = members
            .iter()
            .filter(|&&j| j != *i && gallery.entries[j].scene == scene)
            .map(|&j| gallery.entries[j].embedding.as_slice())
            .collect();
        *s += context_bonus(context, &others)?;
    }
    Ok(())
}
