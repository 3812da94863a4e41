//! Synthetic reduced-resolution datasets and their on-disk layout:
//! `<root>/spec.json` plus `<root>/{train,val,test}/<id>_{lrms,pan,gt}.ten`.

use std::fs;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::observation::{synthesize_scene, wald_degrade, DegradationSpec, ImagePair};
use crate::tensor::{read_ten, write_ten};

pub const SPEC_FILE: &str = "spec.json";
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

const NORMALIZATION_NOTE: &str = "samples are stored unnormalized in [0, 1]; at training and \
inference time LRMS and ground truth are divided by the LRMS maximum and PAN by its own maximum";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    fn get(&self, split: &str) -> usize {
        match split {
            "train" => self.train,
            "val" => self.val,
            _ => self.test,
        }
    }
}

/// Contents of `spec.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub spec: DegradationSpec,
    pub seed: u64,
    pub counts: SplitCounts,
    /// Side of the ground-truth HRMS (and PAN) images.
    pub size: usize,
    pub bands: usize,
    pub normalization: String,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub train: Vec<ImagePair<f32>>,
    pub val: Vec<ImagePair<f32>>,
    pub test: Vec<ImagePair<f32>>,
}

/// Synthesizes scenes at `r·size`, observes them through `spec`, then
/// reduces each observation one more level so the `size × size` sensor-level
/// MS image becomes the ground truth. Sample seeds are drawn in order from
/// a generator seeded with `seed`.
pub fn synthesize_dataset(counts: SplitCounts, size: usize, spec: &DegradationSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let r = spec.ratio;
    if size == 0 || size % r != 0 {
        return arg_err(format!("image size {size} must be a positive multiple of the ratio {r}"));
    }
    let bands = spec.bands();
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |n: usize| -> Result<Vec<ImagePair<f32>>> {
        (0..n)
            .map(|_| {
                let scene = synthesize_scene::<f32>(seeds.next_u64(), size * r, size * r, bands, spec)?;
                wald_degrade(&scene.lrms, &scene.pan, spec)
            })
            .collect()
    };
    let (train, val, test) = (make(counts.train)?, make(counts.val)?, make(counts.test)?);
    Ok(Dataset {
        meta: DatasetMeta {
            spec: spec.clone(),
            seed,
            counts,
            size,
            bands,
            normalization: NORMALIZATION_NOTE.into(),
        },
        train,
        val,
        test,
    })
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[ImagePair<f32>]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            _ => arg_err(format!("unknown split {name:?}; expected train, val or test")),
        }
    }

    pub fn save(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        fs::create_dir_all(root)?;
        fs::write(root.join(SPEC_FILE), serde_json::to_string_pretty(&self.meta)?)?;
        for split in SPLITS {
            let dir = root.join(split);
            fs::create_dir_all(&dir)?;
            for (i, pair) in self.split(split)?.iter().enumerate() {
                write_ten(dir.join(format!("{i:04}_lrms.ten")), &pair.lrms)?;
                write_ten(dir.join(format!("{i:04}_pan.ten")), &pair.pan)?;
                if let Some(gt) = &pair.hrms_gt {
                    write_ten(dir.join(format!("{i:04}_gt.ten")), gt)?;
                }
            }
        }
        Ok(())
    }

    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let spec_path = root.join(SPEC_FILE);
        let text = fs::read_to_string(&spec_path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", spec_path.display()))))?;
        let meta: DatasetMeta = serde_json::from_str(&text)?;
        meta.spec.validate()?;
        let mut splits = Vec::new();
        for split in SPLITS {
            let dir = root.join(split);
            let mut pairs = Vec::new();
            for i in 0..meta.counts.get(split) {
                let gt = dir.join(format!("{i:04}_gt.ten"));
                let pair = ImagePair {
                    lrms: read_ten(dir.join(format!("{i:04}_lrms.ten")))?,
                    pan: read_ten(dir.join(format!("{i:04}_pan.ten")))?,
                    hrms_gt: if gt.exists() { Some(read_ten(gt)?) } else { None },
                };
                pair.ratio()?;
                pairs.push(pair);
            }
            splits.push(pairs);
        }
        let test = splits.pop().unwrap_or_default();
        let val = splits.pop().unwrap_or_default();
        let train = splits.pop().unwrap_or_default();
        Ok(Dataset { meta, train, val, test })
    }
}
