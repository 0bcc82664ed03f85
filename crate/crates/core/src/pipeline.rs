//! Glue between the benchmark, the detector stub and the retrieval protocol.

use rayon::prelude::*;

use crate::detector::{assign_targets, jitter_detect, DetectionSet};
use crate::error::{Error, Result};
use crate::eval::{select_query_embedding, Gallery, GalleryEntry, GroundTruth, QueryEntry, GALLERY_SCORE_THRESHOLD};
use crate::losses::IdLabel;
use crate::reid::ReIDModel;
use crate::synth::{Benchmark, Scene};
use crate::tensor::{bilinear_sample, l2_normalize, Tensor};

/// Seed of the detector run on `scene` under the stream `seed`.
pub fn detection_seed(seed: u64, scene: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (scene as u64).wrapping_add(1).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// Detector output for a scene with slots matched to its persons.
pub fn detect_scene(scene: &Scene, slots: usize, noise_sigma: f64, seed: u64) -> Result<DetectionSet> {
    let truth = scene.boxes();
    let mut dets = jitter_detect(&truth, slots, noise_sigma, detection_seed(seed, scene.id))?;
    assign_targets(&mut dets, &truth)?;
    Ok(dets)
}

/// Identity supervision per detection slot.
pub fn slot_labels(scene: &Scene, dets: &DetectionSet) -> Vec<IdLabel> {
    dets.assigned
        .iter()
        .map(|a| match a {
            Some(p) => scene.persons[*p].identity.label(),
            None => IdLabel::Background,
        })
        .collect()
}

/// Maps a scene and its detections to matching embeddings, one row per slot.
pub trait Embedder: Sync {
    fn embed(&self, scene: &Scene, dets: &DetectionSet) -> Result<Tensor>;
}

impl Embedder for ReIDModel {
    fn embed(&self, scene: &Scene, dets: &DetectionSet) -> Result<Tensor> {
        ReIDModel::embed(self, &scene.pyramid, &dets.references())
    }
}

/// Parameter-free embedder: the finest pyramid level sampled at each box
/// centre, l2-normalised.
#[derive(Debug, Clone, Copy, Default)]
pub struct CenterSampler;

impl Embedder for CenterSampler {
    fn embed(&self, scene: &Scene, dets: &DetectionSet) -> Result<Tensor> {
        let map = &scene.pyramid[0];
        let (h, w) = (map.shape()[1], map.shape()[2]);
        let mut rows = Vec::with_capacity(dets.len());
        for r in dets.references() {
            let (x, y) = r.to_pixels(h, w);
            rows.push(l2_normalize(&bilinear_sample(map, x, y)?));
        }
        Tensor::from_rows(&rows)
    }
}

/// Everything the retrieval protocol needs for one benchmark.
#[derive(Debug, Clone)]
pub struct Protocol {
    pub queries: Vec<QueryEntry>,
    pub gallery: Gallery,
    pub truth: GroundTruth,
}

/// Runs the detector and the embedder on every gallery scene and assembles
/// the gallery (confident detections only), the queries and the annotations.
pub fn build_protocol<E: Embedder>(
    embedder: &E,
    bench: &Benchmark,
    slots: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Protocol> {
    let per_scene = bench
        .gallery
        .par_iter()
        .map(|&s| {
            let scene = bench.scene(s);
            let dets = detect_scene(scene, slots, noise_sigma, seed)?;
            let emb = embedder.embed(scene, &dets)?;
            if emb.rows() != dets.len() {
                return Err(Error::shape("build_protocol", emb.shape(), &[dets.len()]));
            }
            Ok((s, dets, emb))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut gallery = Gallery::default();
    let mut truth = GroundTruth::default();
    for (s, dets, emb) in &per_scene {
        gallery.scenes.push(*s);
        for (slot, b) in dets.boxes.iter().enumerate() {
            if dets.scores[slot] >= GALLERY_SCORE_THRESHOLD {
                gallery.entries.push(GalleryEntry {
                    scene: *s,
                    bbox: *b,
                    embedding: emb.row(slot).to_vec(),
                    score: dets.scores[slot],
                });
            }
        }
        let persons = bench.scene(*s).persons.iter().map(|p| (p.bbox, p.identity.labeled())).collect();
        truth.insert(*s, persons);
    }

    let mut queries = Vec::with_capacity(bench.queries.len());
    for (qid, q) in bench.queries.iter().enumerate() {
        let (_, dets, emb) = per_scene
            .iter()
            .find(|(s, _, _)| *s == q.scene)
            .ok_or_else(|| Error::Invalid(format!("query scene {} is not in the gallery", q.scene)))?;
        let annotated = bench.scene(q.scene).persons[q.person].bbox;
        let slot = select_query_embedding(&dets.boxes, &annotated)?;
        let mut others: Vec<usize> = (0..dets.len())
            .filter(|&i| i != slot && dets.scores[i] >= GALLERY_SCORE_THRESHOLD)
            .collect();
        others.sort_by(|&a, &b| dets.scores[b].total_cmp(&dets.scores[a]));
        queries.push(QueryEntry {
            query_id: qid,
            scene: q.scene,
            bbox: annotated,
            identity: q.identity,
            embedding: emb.row(slot).to_vec(),
            context: others.iter().map(|&i| emb.row(i).to_vec()).collect(),
        });
    }
    Ok(Protocol {
        queries,
        gallery,
        truth,
    })
}
