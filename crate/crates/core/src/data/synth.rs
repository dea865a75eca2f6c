//! Synthetic two-domain person benchmark.
//!
//! Every identity is a smooth template built from random Gaussian blobs. A
//! sample is its template plus pixel noise plus a per-camera brightness
//! offset. Target identities are drawn the same way and then pushed through
//! a global affine colour transform whose strength is `shift`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::{AttributeSchema, EvalSet, GroundTruth, Manifest, ManifestHeader, Role, Sample, SourceSet, TargetSet};
use crate::error::{Error, Result};
use crate::kernel::Domain;
use crate::tensor::{write_tensor_file, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_ids: usize,
    pub per_id: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Domain-shift strength; 0 leaves the target untouched.
    pub shift: f64,
    /// Attribute `m` is the sign of the centred template mean over the
    /// `m`-th horizontal band.
    pub num_attributes: usize,
    pub blobs: usize,
    pub noise_std: f64,
    pub cameras: usize,
    /// Brightness offsets span `[-cam_offset, cam_offset]` across cameras.
    pub cam_offset: f64,
    /// Largest per-channel colour cast of the target transform at `shift = 1`.
    pub colour_cast: f64,
    /// Gain of the target channel rotation at `shift = 1`.
    pub contrast: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_ids: 20,
            per_id: 10,
            height: 32,
            width: 16,
            channels: 3,
            shift: 1.0,
            num_attributes: 4,
            blobs: 6,
            noise_std: 0.1,
            cameras: 2,
            cam_offset: 0.1,
            colour_cast: 0.4,
            contrast: 2.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.num_ids < 2 {
            return bad("synthetic benchmark needs at least 2 identities");
        }
        if self.per_id == 0 || self.height == 0 || self.width == 0 || self.channels == 0 {
            return bad("samples per identity and image dimensions must be positive");
        }
        if self.num_attributes == 0 || self.num_attributes > self.height {
            return bad("attribute count must be in 1..=height");
        }
        if self.cameras == 0 || self.blobs == 0 {
            return bad("cameras and blobs must be positive");
        }
        if !(self.shift.is_finite() && self.shift >= 0.0) {
            return bad("shift must be finite and nonnegative");
        }
        let finite = [self.cam_offset, self.colour_cast, self.contrast].iter().all(|v| v.is_finite());
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0 && finite) {
            return bad("noise, camera offset and colour cast must be finite");
        }
        Ok(())
    }
}

/// Generated manifests with their images held in memory.
#[derive(Clone, Debug)]
pub struct SynthData {
    pub config: SynthConfig,
    pub source: Manifest,
    pub source_images: Vec<Tensor<f64>>,
    pub target: Manifest,
    pub target_images: Vec<Tensor<f64>>,
    pub truth: GroundTruth,
}

const BACKGROUND: f64 = 0.5;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn template<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> Vec<f64> {
    let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
    let mut img = vec![BACKGROUND; c * h * w];
    let amp = Uniform::new(-0.5, 0.5).expect("valid range");
    for _ in 0..cfg.blobs {
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let sy = rng.random_range(0.1..0.25) * h as f64;
        let sx = rng.random_range(0.15..0.35) * w as f64;
        let colour: Vec<f64> = (0..c).map(|_| amp.sample(rng)).collect();
        for y in 0..h {
            let dy = (y as f64 - cy) / sy;
            for x in 0..w {
                let dx = (x as f64 - cx) / sx;
                let g = (-0.5 * (dy * dy + dx * dx)).exp();
                for (ch, a) in colour.iter().enumerate() {
                    img[(ch * h + y) * w + x] += a * g;
                }
            }
        }
    }
    img
}

fn attributes(cfg: &SynthConfig, tpl: &[f64]) -> Vec<u8> {
    let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
    let m = cfg.num_attributes;
    (0..m)
        .map(|b| {
            let (y0, y1) = (b * h / m, (b + 1) * h / m);
            let mut sum = 0.0;
            for ch in 0..c {
                for y in y0..y1 {
                    for x in 0..w {
                        sum += tpl[(ch * h + y) * w + x] - BACKGROUND;
                    }
                }
            }
            u8::from(sum > 0.0)
        })
        .collect()
}

fn camera_offset(cfg: &SynthConfig, cam: usize) -> f64 {
    if cfg.cameras == 1 {
        return 0.0;
    }
    cfg.cam_offset * (2.0 * cam as f64 / (cfg.cameras - 1) as f64 - 1.0)
}

/// `x ↦ A x + b` across channels, interpolated from identity by `shift`.
struct ColourShift {
    matrix: Vec<f64>,
    offset: Vec<f64>,
}

impl ColourShift {
    fn draw<R: Rng>(c: usize, s: f64, cast: f64, contrast: f64, rng: &mut R) -> Self {
        // A channel rotation scaled by `contrast`, plus a colour cast.
        let mut target = vec![0.0; c * c];
        for i in 0..c {
            target[i * c + (i + 1) % c] = contrast * rng.random_range(0.75..1.25);
            target[i * c + i] += rng.random_range(-0.2..0.2);
        }
        let mut matrix = vec![0.0; c * c];
        for i in 0..c {
            for j in 0..c {
                let eye = if i == j { 1.0 } else { 0.0 };
                matrix[i * c + j] = (1.0 - s) * eye + s * target[i * c + j];
            }
        }
        let offset = (0..c).map(|_| s * cast * rng.random_range(-1.0..1.0)).collect();
        ColourShift { matrix, offset }
    }

    fn apply(&self, img: &mut [f64], c: usize, hw: usize) {
        let src = img.to_vec();
        for i in 0..c {
            for p in 0..hw {
                let mut v = self.offset[i];
                for j in 0..c {
                    v += self.matrix[i * c + j] * src[j * hw + p];
                }
                img[i * hw + p] = v;
            }
        }
    }
}

fn schema(m: usize) -> AttributeSchema {
    AttributeSchema {
        names: (0..m).map(|i| format!("band{i}")).collect(),
    }
}

struct Drawn {
    images: Vec<Tensor<f64>>,
    ids: Vec<i64>,
    cams: Vec<i64>,
    attrs: Vec<Vec<u8>>,
}

fn draw_domain(cfg: &SynthConfig, id_base: i64, template_stream: u64, noise_stream: u64) -> Result<Drawn> {
    let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
    let mut trng = stream(cfg.seed, template_stream);
    let mut nrng = stream(cfg.seed, noise_stream);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Drawn {
        images: Vec::new(),
        ids: Vec::new(),
        cams: Vec::new(),
        attrs: Vec::new(),
    };
    for k in 0..cfg.num_ids {
        let tpl = template(cfg, &mut trng);
        let bits = attributes(cfg, &tpl);
        for j in 0..cfg.per_id {
            let cam = j % cfg.cameras;
            let off = camera_offset(cfg, cam);
            let data = tpl.iter().map(|&v| v + off + noise.sample(&mut nrng)).collect();
            out.images.push(Tensor::new(vec![c, h, w], data)?);
            out.ids.push(id_base + k as i64);
            out.cams.push(cam as i64);
            out.attrs.push(bits.clone());
        }
    }
    Ok(out)
}

const SOURCE_TEMPLATES: u64 = 1;
const SOURCE_NOISE: u64 = 2;
const TARGET_TEMPLATES: u64 = 3;
const TARGET_NOISE: u64 = 4;
const SHIFT: u64 = 5;

/// Generates both domains. Target identities stay out of the target
/// manifest and go into the returned [`GroundTruth`].
pub fn synth_generate(config: &SynthConfig) -> Result<SynthData> {
    config.validate()?;
    let schema = schema(config.num_attributes);
    let src = draw_domain(config, 0, SOURCE_TEMPLATES, SOURCE_NOISE)?;
    let mut tgt = draw_domain(config, config.num_ids as i64, TARGET_TEMPLATES, TARGET_NOISE)?;
    let shift = ColourShift::draw(config.channels, config.shift, config.colour_cast, config.contrast, &mut stream(config.seed, SHIFT));
    let hw = config.height * config.width;
    for img in &mut tgt.images {
        shift.apply(img.data_mut(), config.channels, hw);
    }

    let source_samples = (0..src.images.len())
        .map(|i| Sample {
            path: format!("tensors/source_{i:05}.mmfa"),
            id: Some(src.ids[i]),
            cam: src.cams[i],
            attrs: Some(src.attrs[i].clone()),
        })
        .collect();
    let mut truth = BTreeMap::new();
    let target_samples = (0..tgt.images.len())
        .map(|i| {
            let path = format!("tensors/target_{i:05}.mmfa");
            truth.insert(path.clone(), tgt.ids[i]);
            Sample {
                path,
                id: None,
                cam: tgt.cams[i],
                attrs: None,
            }
        })
        .collect();
    let header = |domain| ManifestHeader {
        schema: schema.clone(),
        domain,
        role: Role::Train,
    };
    Ok(SynthData {
        config: config.clone(),
        source: Manifest::new(header(Domain::Source), source_samples, PathBuf::from(SynthData::SOURCE_MANIFEST))?,
        source_images: src.images,
        target: Manifest::new(header(Domain::Target), target_samples, PathBuf::from(SynthData::TARGET_MANIFEST))?,
        target_images: tgt.images,
        truth: GroundTruth::new(truth),
    })
}

impl SynthData {
    pub const SOURCE_MANIFEST: &'static str = "source.jsonl";
    pub const TARGET_MANIFEST: &'static str = "target.jsonl";
    pub const TRUTH_FILE: &'static str = "target_truth.json";

    /// Writes manifests, headers, 32-bit tensor files and the truth sidecar.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let tensors = dir.join("tensors");
        fs::create_dir_all(&tensors).map_err(|e| Error::io(&tensors, e))?;
        for (m, images) in [(&self.source, &self.source_images), (&self.target, &self.target_images)] {
            for (s, img) in m.samples.iter().zip(images) {
                write_tensor_file(dir.join(&s.path), &img.cast::<f32>())?;
            }
        }
        self.source.write(dir.join(Self::SOURCE_MANIFEST))?;
        self.target.write(dir.join(Self::TARGET_MANIFEST))?;
        self.truth.write(dir.join(Self::TRUTH_FILE))
    }

    /// Images pass through `f32` first, matching what [`Self::write`] stores.
    fn stored<T: Real>(images: &[Tensor<f64>]) -> Vec<Tensor<T>> {
        images.iter().map(|t| t.cast::<f32>().cast::<T>()).collect()
    }

    pub fn source_set<T: Real>(&self) -> Result<SourceSet<T>> {
        let labels = self.source.contiguous_labels()?;
        let attrs = self.source.samples.iter().map(|s| s.attrs.clone().unwrap_or_default()).collect();
        let cams = self.source.samples.iter().map(|s| s.cam).collect();
        SourceSet::new(self.source.schema().clone(), Self::stored(&self.source_images), labels, attrs, cams)
    }

    pub fn target_set<T: Real>(&self) -> Result<TargetSet<T>> {
        TargetSet::new(Self::stored(&self.target_images))
    }

    /// Target images with their held-out identities.
    pub fn target_eval_set<T: Real>(&self) -> Result<EvalSet<T>> {
        let ids = self
            .target
            .samples
            .iter()
            .map(|s| self.truth.id_of(&s.path).ok_or_else(|| Error::Config(format!("no truth for {}", s.path))))
            .collect::<Result<Vec<_>>>()?;
        let cams = self.target.samples.iter().map(|s| s.cam).collect();
        EvalSet::new(Self::stored(&self.target_images), ids, cams)
    }

    pub fn source_eval_set<T: Real>(&self) -> Result<EvalSet<T>> {
        let ids = self.source.samples.iter().map(|s| s.id.unwrap_or_default()).collect();
        let cams = self.source.samples.iter().map(|s| s.cam).collect();
        EvalSet::new(Self::stored(&self.source_images), ids, cams)
    }
}
