//! Manifests, in-memory datasets, batch pairing, augmentation, and the
//! synthetic two-domain generator.

mod augment;
mod batch;
mod manifest;
mod synth;
mod truth;

pub use augment::{augment, crop, resize_nearest, AugmentConfig};
pub use batch::{sample_batch_pairs, source_epoch, BatchPair, SourceBatch, TargetBatch, TargetStream};
pub use manifest::{header_path, load_manifest, AttributeSchema, Manifest, ManifestHeader, Role, Sample};
pub use synth::{synth_generate, SynthConfig, SynthData};
pub use truth::GroundTruth;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernel::Domain;
use crate::tape::Mode;
use crate::tensor::{read_tensor_file, Real, Tensor};

fn load_images<T: Real>(manifest: &Manifest) -> Result<Vec<Tensor<T>>> {
    let mut images = Vec::with_capacity(manifest.len());
    for s in &manifest.samples {
        let t = read_tensor_file(manifest.resolve(s))?.into_real::<T>();
        if t.ndim() != 3 {
            return Err(Error::dim(format!("{}: expected C×H×W, got {:?}", s.path, t.shape())));
        }
        images.push(t);
    }
    check_same_shape(&images)?;
    Ok(images)
}

fn check_same_shape<T: Real>(images: &[Tensor<T>]) -> Result<()> {
    if let Some(first) = images.first() {
        if let Some(bad) = images.iter().find(|t| t.shape() != first.shape()) {
            return Err(Error::dim(format!(
                "mixed image shapes {:?} and {:?}",
                first.shape(),
                bad.shape()
            )));
        }
    }
    Ok(())
}

fn require_domain(manifest: &Manifest, domain: Domain) -> Result<()> {
    if manifest.domain() != domain {
        return Err(Error::Config(format!(
            "expected a {domain:?} manifest, got {:?}",
            manifest.domain()
        )));
    }
    Ok(())
}

fn stack_augmented<T: Real, R: Rng + ?Sized>(
    images: &[Tensor<T>],
    indices: &[usize],
    mode: Mode,
    rng: &mut R,
    aug: &AugmentConfig,
) -> Result<Tensor<T>> {
    let items = indices
        .iter()
        .map(|&i| augment(&images[i], mode, rng, aug))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&items)
}

/// Labelled source images with identity labels remapped to `0..K`.
#[derive(Clone, Debug)]
pub struct SourceSet<T> {
    schema: AttributeSchema,
    images: Vec<Tensor<T>>,
    labels: Vec<usize>,
    attrs: Vec<Vec<u8>>,
    cams: Vec<i64>,
    num_identities: usize,
}

/// A source batch ready for a forward pass.
pub struct SourceTensors<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    /// `n×M` binary attribute targets.
    pub attrs: Tensor<T>,
}

impl<T: Real> SourceSet<T> {
    pub fn from_manifest(manifest: &Manifest) -> Result<Self> {
        require_domain(manifest, Domain::Source)?;
        let images = load_images(manifest)?;
        let labels = manifest.contiguous_labels()?;
        let attrs = manifest
            .samples
            .iter()
            .map(|s| s.attrs.clone().ok_or_else(|| Error::Schema(format!("{} has no attributes", s.path))))
            .collect::<Result<Vec<_>>>()?;
        let cams = manifest.samples.iter().map(|s| s.cam).collect();
        Self::new(manifest.schema().clone(), images, labels, attrs, cams)
    }

    pub fn new(
        schema: AttributeSchema,
        images: Vec<Tensor<T>>,
        labels: Vec<usize>,
        attrs: Vec<Vec<u8>>,
        cams: Vec<i64>,
    ) -> Result<Self> {
        let n = images.len();
        if labels.len() != n || attrs.len() != n || cams.len() != n {
            return Err(Error::dim("source set columns differ in length"));
        }
        if n == 0 {
            return Err(Error::Batch("source set is empty".into()));
        }
        check_same_shape(&images)?;
        if let Some(a) = attrs.iter().find(|a| a.len() != schema.len()) {
            return Err(Error::Schema(format!("{} attributes, schema has {}", a.len(), schema.len())));
        }
        let num_identities = labels.iter().max().map_or(0, |&m| m + 1);
        Ok(SourceSet {
            schema,
            images,
            labels,
            attrs,
            cams,
            num_identities,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    pub fn num_identities(&self) -> usize {
        self.num_identities
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn cams(&self) -> &[i64] {
        &self.cams
    }

    pub fn images(&self) -> &[Tensor<T>] {
        &self.images
    }

    pub fn batch<R: Rng + ?Sized>(
        &self,
        batch: &SourceBatch,
        mode: Mode,
        rng: &mut R,
        aug: &AugmentConfig,
    ) -> Result<SourceTensors<T>> {
        let idx = &batch.0;
        let images = stack_augmented(&self.images, idx, mode, rng, aug)?;
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        let m = self.schema.len();
        let attrs = idx
            .iter()
            .flat_map(|&i| self.attrs[i].iter().map(|&b| T::from_f64_lossy(b as f64)))
            .collect();
        Ok(SourceTensors {
            images,
            labels,
            attrs: Tensor::new(vec![idx.len(), m], attrs)?,
        })
    }
}

/// Unlabelled target images. Identities are not part of this type.
#[derive(Clone, Debug)]
pub struct TargetSet<T> {
    images: Vec<Tensor<T>>,
}

impl<T: Real> TargetSet<T> {
    pub fn from_manifest(manifest: &Manifest) -> Result<Self> {
        require_domain(manifest, Domain::Target)?;
        if manifest.header.role != Role::Train {
            return Err(Error::Config("target training set must come from a train-role manifest".into()));
        }
        Self::new(load_images(manifest)?)
    }

    pub fn new(images: Vec<Tensor<T>>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Batch("target set is empty".into()));
        }
        check_same_shape(&images)?;
        Ok(TargetSet { images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Tensor<T>] {
        &self.images
    }

    pub fn batch<R: Rng + ?Sized>(
        &self,
        batch: &TargetBatch,
        mode: Mode,
        rng: &mut R,
        aug: &AugmentConfig,
    ) -> Result<Tensor<T>> {
        stack_augmented(&self.images, &batch.0, mode, rng, aug)
    }
}

/// Images with identities and cameras for evaluation.
#[derive(Clone, Debug)]
pub struct EvalSet<T> {
    pub images: Vec<Tensor<T>>,
    pub ids: Vec<i64>,
    pub cams: Vec<i64>,
}

impl<T: Real> EvalSet<T> {
    /// Identities come from the manifest, falling back to `truth`.
    pub fn from_manifest(manifest: &Manifest, truth: Option<&GroundTruth>) -> Result<Self> {
        let images = load_images(manifest)?;
        let ids = manifest
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let id = s.id.or_else(|| truth.and_then(|t| t.id_of(&s.path)));
                id.ok_or_else(|| Error::Manifest {
                    path: manifest.path.clone(),
                    line: i + 1,
                    msg: format!("no identity for {:?}; pass the ground-truth sidecar", s.path),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let cams = manifest.samples.iter().map(|s| s.cam).collect();
        Self::new(images, ids, cams)
    }

    pub fn new(images: Vec<Tensor<T>>, ids: Vec<i64>, cams: Vec<i64>) -> Result<Self> {
        if ids.len() != images.len() || cams.len() != images.len() {
            return Err(Error::dim("evaluation set columns differ in length"));
        }
        check_same_shape(&images)?;
        Ok(EvalSet { images, ids, cams })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}
