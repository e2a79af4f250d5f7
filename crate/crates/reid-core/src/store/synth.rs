//! Synthetic test-bench generator.
//!
//! Emulates the structure of a multi-camera ReID export: every identity
//! gets a unit prototype vector, every camera a fixed offset direction,
//! and each image feature is
//! `normalize(prototype + offset(camera) * camera_offset_scale + gauss * noise_scale)`.
//! Output is a pure function of the parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::store::{FeatureSet, ImageMeta, View};

#[derive(Debug, Clone)]
pub struct SynthParams {
    pub num_ids: usize,
    pub cams: usize,
    pub tracklets_per_id: usize,
    pub frames_per_tracklet: usize,
    pub dim: usize,
    pub camera_offset_scale: f32,
    pub noise_scale: f32,
    pub seed: u64,
}

impl SynthParams {
    fn validate(&self) -> Result<()> {
        let counts = [
            ("num_ids", self.num_ids),
            ("cams", self.cams),
            ("tracklets_per_id", self.tracklets_per_id),
            ("frames_per_tracklet", self.frames_per_tracklet),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(Error::InvalidParam {
                    name,
                    reason: "must be positive".into(),
                });
            }
        }
        if self.dim < 2 {
            return Err(Error::InvalidParam {
                name: "dim",
                reason: "must be at least 2".into(),
            });
        }
        for (name, value) in [
            ("camera_offset_scale", self.camera_offset_scale),
            ("noise_scale", self.noise_scale),
        ] {
            if !value.is_finite() || value < 0.0 {
                return Err(Error::InvalidParam {
                    name,
                    reason: "must be finite and non-negative".into(),
                });
            }
        }
        Ok(())
    }
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Generate a labeled synthetic feature set.
///
/// Tracklet `t` of identity `i` is filmed by camera `(i + t) % cams`, so
/// consecutive tracklets of one identity land on different cameras
/// whenever more than one camera exists.
pub fn synth_generate(params: &SynthParams) -> Result<(FeatureSet, Vec<ImageMeta>)> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let dim = params.dim;

    let prototypes: Vec<Vec<f64>> = (0..params.num_ids)
        .map(|_| unit_gaussian(&mut rng, dim))
        .collect();
    let offsets: Vec<Vec<f64>> = (0..params.cams)
        .map(|_| unit_gaussian(&mut rng, dim))
        .collect();

    let count = params.num_ids * params.tracklets_per_id * params.frames_per_tracklet;
    let mut data = Vec::with_capacity(count * dim);
    let mut metas = Vec::with_capacity(count);
    let offset_scale = f64::from(params.camera_offset_scale);
    let noise_scale = f64::from(params.noise_scale);

    for (id, prototype) in prototypes.iter().enumerate() {
        for t in 0..params.tracklets_per_id {
            let tracklet = (id * params.tracklets_per_id + t) as u32;
            let camera = ((id + t) % params.cams) as u32;
            let offset = &offsets[camera as usize];
            for frame in 0..params.frames_per_tracklet {
                let mut v: Vec<f64> = (0..dim)
                    .map(|k| {
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        prototype[k] + offset[k] * offset_scale + noise * noise_scale
                    })
                    .collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm <= 1e-12 {
                    // Prototype, offset and noise cancelled exactly.
                    return Err(Error::ZeroRow { row: metas.len() });
                }
                for x in &mut v {
                    *x /= norm;
                }
                data.extend(v.iter().map(|&x| x as f32));
                metas.push(ImageMeta {
                    image_id: format!("id{id:04}_t{tracklet:05}_f{frame:03}"),
                    camera_id: camera,
                    tracklet_id: Some(tracklet),
                    identity: Some(id as u32),
                    view: View::Original,
                });
            }
        }
    }
    Ok((FeatureSet::from_parts_unchecked(data, dim, true), metas))
}

/// Image ids of each identity's lowest-numbered tracklet, in meta order.
/// The standard fixture split: those images are queries, the rest gallery.
pub fn default_query_split(metas: &[ImageMeta]) -> Vec<String> {
    use std::collections::HashMap;
    let mut first_tracklet: HashMap<u32, u32> = HashMap::new();
    for meta in metas {
        if let (Some(id), Some(t)) = (meta.identity, meta.tracklet_id) {
            first_tracklet
                .entry(id)
                .and_modify(|cur| *cur = (*cur).min(t))
                .or_insert(t);
        }
    }
    metas
        .iter()
        .filter(|m| match (m.identity, m.tracklet_id) {
            (Some(id), Some(t)) => first_tracklet.get(&id) == Some(&t),
            _ => false,
        })
        .map(|m| m.image_id.clone())
        .collect()
}
