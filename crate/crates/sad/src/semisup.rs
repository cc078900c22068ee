//! Transfer-set construction: unlabeled filtering, positive/negative pool
//! mixing, and per-image loss routing for distillation runs.

use crate::error::{Error, Result};
use crate::teacher::TargetRecord;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

/// Loss routing switches for one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ImageFlags {
    /// Focal loss against real ground truth.
    pub use_gt_focal: bool,
    /// Box loss against real ground truth.
    pub use_gt_loc: bool,
    /// Distillation loss against the teacher's dense soft targets.
    pub use_soft_adl: bool,
    /// Focal loss against teacher hard targets used as labels.
    pub use_hard_focal: bool,
    /// Box loss against teacher hard targets.
    pub use_hard_loc: bool,
}

/// The four training compositions exercised by the ablation:
/// ground truth only, plus labeled soft targets, plus unlabeled hard
/// targets, and the full combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferMode {
    Supervised,
    Distill,
    SemisupHard,
    SemisupFull,
}

impl TransferMode {
    pub fn labeled_flags(self) -> ImageFlags {
        let soft = matches!(self, TransferMode::Distill | TransferMode::SemisupFull);
        ImageFlags {
            use_gt_focal: true,
            use_gt_loc: true,
            use_soft_adl: soft,
            ..ImageFlags::default()
        }
    }

    pub fn unlabeled_flags(self) -> Option<ImageFlags> {
        match self {
            TransferMode::Supervised | TransferMode::Distill => None,
            TransferMode::SemisupHard => Some(ImageFlags {
                use_hard_focal: true,
                use_hard_loc: true,
                ..ImageFlags::default()
            }),
            TransferMode::SemisupFull => Some(ImageFlags {
                use_hard_focal: true,
                use_hard_loc: true,
                use_soft_adl: true,
                ..ImageFlags::default()
            }),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub labeled_data: String,
    pub unlabeled_data: String,
    pub records: String,
}

/// Composition of the transfer set: which images train, with which losses,
/// and where their ground truth and teacher targets live.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSetManifest {
    pub kind: String,
    pub version: u32,
    pub mode: TransferMode,
    pub labeled_ids: Vec<String>,
    pub unlabeled_ids: Vec<String>,
    pub flags: BTreeMap<String, ImageFlags>,
    pub provenance: Provenance,
    pub config_hash: String,
}

impl TransferSetManifest {
    pub fn validate(&self) -> Result<()> {
        let labeled: BTreeSet<&String> = self.labeled_ids.iter().collect();
        let unlabeled: BTreeSet<&String> = self.unlabeled_ids.iter().collect();
        if labeled.len() != self.labeled_ids.len() || unlabeled.len() != self.unlabeled_ids.len() {
            return Err(Error::invalid("manifest contains duplicate scene ids"));
        }
        if let Some(id) = labeled.intersection(&unlabeled).next() {
            return Err(Error::invalid(format!(
                "scene {id} is both labeled and unlabeled"
            )));
        }
        for id in &self.labeled_ids {
            let f = self
                .flags
                .get(id)
                .ok_or_else(|| Error::invalid(format!("labeled scene {id} has no flags")))?;
            if !f.use_gt_focal || !f.use_gt_loc {
                return Err(Error::invalid(format!(
                    "labeled scene {id} must keep its ground-truth losses"
                )));
            }
        }
        for id in &self.unlabeled_ids {
            if !self.flags.contains_key(id) {
                return Err(Error::invalid(format!("unlabeled scene {id} has no flags")));
            }
        }
        Ok(())
    }
}

/// Split teacher-annotated scenes into those with at least one hard target
/// and the rest. Pools are sorted by scene id, so record order does not
/// matter; together they partition the input.
pub fn filter_unlabeled(records: &BTreeMap<String, TargetRecord>) -> (Vec<String>, Vec<String>) {
    let mut positive = Vec::new();
    let mut negative = Vec::new();
    for (id, rec) in records {
        if rec.hard_targets.is_empty() {
            negative.push(id.clone());
        } else {
            positive.push(id.clone());
        }
    }
    (positive, negative)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixConfig {
    pub rho: f64,
    pub total_count: usize,
    pub seed: u64,
}

impl Default for MixConfig {
    fn default() -> Self {
        MixConfig {
            rho: 1.0,
            total_count: 0,
            seed: 13,
        }
    }
}

/// Sample `round(rho * total)` scenes from the positive pool and the rest
/// from the negative pool, uniformly without replacement. The returned ids
/// are sorted.
pub fn mix_pools(
    positive_pool: &[String],
    negative_pool: &[String],
    mix: &MixConfig,
) -> Result<Vec<String>> {
    if !(0.0..=1.0).contains(&mix.rho) {
        return Err(Error::invalid(format!("rho {} outside [0, 1]", mix.rho)));
    }
    let want_pos = (mix.rho * mix.total_count as f64).round() as usize;
    let want_neg = mix.total_count - want_pos;
    if want_pos > positive_pool.len() {
        return Err(Error::invalid(format!(
            "positive pool holds {} scenes, need {want_pos}",
            positive_pool.len()
        )));
    }
    if want_neg > negative_pool.len() {
        return Err(Error::invalid(format!(
            "negative pool holds {} scenes, need {want_neg}",
            negative_pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix.seed);
    let sample = |pool: &[String], k: usize, rng: &mut ChaCha8Rng| -> Vec<String> {
        let mut sorted: Vec<String> = pool.to_vec();
        sorted.sort();
        let idx = rand::seq::index::sample(rng, sorted.len(), k);
        idx.into_iter().map(|i| sorted[i].clone()).collect()
    };
    let mut out = sample(positive_pool, want_pos, &mut rng);
    out.extend(sample(negative_pool, want_neg, &mut rng));
    out.sort();
    Ok(out)
}

/// Assemble the per-image routing for a training run. Every image that is
/// asked to mimic soft targets must have a teacher record.
pub fn assemble_manifest(
    labeled_ids: &[String],
    unlabeled_ids: &[String],
    mode: TransferMode,
    provenance: Provenance,
    records_with_soft: &BTreeSet<String>,
    labeled_soft_on_the_fly: bool,
    config_hash: &str,
) -> Result<TransferSetManifest> {
    if mode.unlabeled_flags().is_none() && !unlabeled_ids.is_empty() {
        return Err(Error::config(format!(
            "mode {mode:?} does not train on unlabeled scenes, but {} were provided",
            unlabeled_ids.len()
        )));
    }
    let mut flags = BTreeMap::new();
    let labeled_flags = mode.labeled_flags();
    for id in labeled_ids {
        if labeled_flags.use_soft_adl
            && !labeled_soft_on_the_fly
            && !records_with_soft.contains(id)
        {
            return Err(Error::config(format!(
                "labeled scene {id} needs a soft-target record"
            )));
        }
        flags.insert(id.clone(), labeled_flags);
    }
    if let Some(unlabeled_flags) = mode.unlabeled_flags() {
        for id in unlabeled_ids {
            if !records_with_soft.contains(id) {
                return Err(Error::config(format!(
                    "unlabeled scene {id} has no teacher record"
                )));
            }
            flags.insert(id.clone(), unlabeled_flags);
        }
    }
    let manifest = TransferSetManifest {
        kind: "transfer-manifest".into(),
        version: 1,
        mode,
        labeled_ids: labeled_ids.to_vec(),
        unlabeled_ids: unlabeled_ids.to_vec(),
        flags,
        provenance,
        config_hash: config_hash.into(),
    };
    manifest.validate()?;
    Ok(manifest)
}

pub fn write_manifest(path: &Path, manifest: &TransferSetManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::format(format!("manifest json: {e}")))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<TransferSetManifest> {
    let text = std::fs::read_to_string(path)?;
    let manifest: TransferSetManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(format!("manifest json: {e}")))?;
    if manifest.kind != "transfer-manifest" || manifest.version != 1 {
        return Err(Error::format(format!(
            "{} is not a v1 transfer manifest",
            path.display()
        )));
    }
    manifest.validate()?;
    Ok(manifest)
}

/// Output of the `filter` stage: the sampled unlabeled ids plus enough
/// provenance to assemble a full manifest later.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestFragment {
    pub kind: String,
    pub version: u32,
    pub rho: f64,
    pub total: usize,
    pub seed: u64,
    pub positive_pool: usize,
    pub negative_pool: usize,
    pub sampled_unlabeled_ids: Vec<String>,
    pub records: String,
    pub config_hash: String,
}

pub fn write_fragment(path: &Path, fragment: &ManifestFragment) -> Result<()> {
    let text = serde_json::to_string_pretty(fragment)
        .map_err(|e| Error::format(format!("fragment json: {e}")))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_fragment(path: &Path) -> Result<ManifestFragment> {
    let text = std::fs::read_to_string(path)?;
    let fragment: ManifestFragment =
        serde_json::from_str(&text).map_err(|e| Error::format(format!("fragment json: {e}")))?;
    if fragment.kind != "manifest-fragment" || fragment.version != 1 {
        return Err(Error::format(format!(
            "{} is not a v1 manifest fragment",
            path.display()
        )));
    }
    Ok(fragment)
}

/// Distinguish the two JSON artifacts `distill --manifest` accepts.
pub fn manifest_kind(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path)?;
    #[derive(Deserialize)]
    struct Probe {
        kind: String,
    }
    let probe: Probe = serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("cannot probe {}: {e}", path.display())))?;
    Ok(probe.kind)
}
