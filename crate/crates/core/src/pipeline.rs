//! A trained model and single-image prediction: heat maps, proposals,
//! matcher unaries and tree inference.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::dataio::{DepthImage, PoseConfig};
use crate::error::{Error, FormatError, Result};
use crate::fcn::{fcn_forward, read_kfcn, write_kfcn, FcnArch, FcnParams};
use crate::inference::{config_pose, dp_infer, Inference};
use crate::kinematics::{read_kstr, write_kstr, KinematicTree, ScoreInputs, StructParams};
use crate::matchnet::{
    extract_patch, read_kmat, read_ktpl, write_kmat, write_ktpl, MatchScorer, MatcherParams, TemplateSet, PATCH_LEN,
};
use crate::proposals::{default_box_size, extract_proposals, BoxConfig, ProposalSet};

pub const FCN_FILE: &str = "fcn.kfcn";
pub const TEMPLATES_FILE: &str = "templates.ktpl";
pub const MATCHER_FILE: &str = "matcher.kmat";
pub const STRUCT_FILE: &str = "structure.kstr";
pub const TREE_FILE: &str = "tree.json";
pub const META_FILE: &str = "model.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalConfig {
    /// Side of the square proposal window in heat-map cells; n = window².
    pub window: usize,
    #[serde(rename = "box")]
    pub box_cfg: BoxConfig,
    /// Depth normalisation of matcher patches, millimetres.
    pub depth_scale: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            window: 17,
            box_cfg: BoxConfig::default(),
            depth_scale: crate::matchnet::DEFAULT_DEPTH_SCALE,
        }
    }
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(Error::config(format!("window {} must be odd", self.window)));
        }
        if !(self.depth_scale > 0.0) {
            return Err(Error::config("depth scale must be > 0"));
        }
        Ok(())
    }

    /// Box size at test time, when the pose scale is unknown.
    pub fn box_size(&self) -> Result<(u32, u32)> {
        default_box_size(&self.box_cfg, self.box_cfg.reference_scale)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub fcn_arch: FcnArch,
    pub fcn: FcnParams<f32>,
    pub templates: TemplateSet,
    pub matcher: MatcherParams<f32>,
    pub structure: StructParams,
    pub tree: KinematicTree,
    pub proposals: ProposalConfig,
}

/// Proposals and matcher unaries for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Evidence {
    pub proposals: ProposalSet,
    pub unaries: Vec<Vec<f64>>,
    pub mm_per_pixel: f64,
}

impl Evidence {
    pub fn inputs(&self) -> ScoreInputs<'_> {
        ScoreInputs {
            proposals: &self.proposals,
            unaries: &self.unaries,
            mm_per_pixel: self.mm_per_pixel,
        }
    }
}

/// Predictions of the three model variants compared in the component
/// analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct Variants {
    /// Heat-map argmax per part.
    pub fcn: PoseConfig,
    /// Best unary per part among the proposals.
    pub matcher: PoseConfig,
    /// Tree inference.
    pub full: PoseConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelMeta {
    k: usize,
    fcn_arch: FcnArch,
    proposals: ProposalConfig,
    templates_per_part: usize,
    #[serde(default)]
    training: serde_json::Value,
}

fn first_max(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl Model {
    pub fn k(&self) -> usize {
        self.tree.k()
    }

    pub fn validate(&self) -> Result<()> {
        self.proposals.validate()?;
        self.fcn.validate()?;
        self.matcher.validate()?;
        self.structure.validate(&self.tree)?;
        let k = self.k();
        let fk = self.fcn.layers.last().map_or(0, |l| l.conv.out_c);
        if fk != k || self.templates.k != k || self.matcher.k() != k {
            return Err(Error::contract("model components disagree on K"));
        }
        Ok(())
    }

    pub fn extract(&self, img: &DepthImage) -> Result<ProposalSet> {
        let maps = fcn_forward(img, &self.fcn)?;
        extract_proposals(&maps, img, self.proposals.window, self.proposals.box_size()?)
    }

    pub fn unaries(&self, img: &DepthImage, set: &ProposalSet) -> Result<Vec<Vec<f64>>> {
        let tpl: Vec<Vec<f32>> = (0..self.k()).map(|k| self.templates.part(k).to_vec()).collect();
        let scorer = MatchScorer::new(&self.matcher, &tpl)?;
        set.parts
            .par_iter()
            .enumerate()
            .map(|(k, list)| {
                let mut patches = Vec::with_capacity(list.len() * PATCH_LEN);
                for p in list {
                    patches.extend(extract_patch::<f32>(img, p, self.proposals.depth_scale));
                }
                scorer.unaries(k, &patches)
            })
            .collect()
    }

    pub fn evidence(&self, img: &DepthImage) -> Result<Evidence> {
        let proposals = self.extract(img)?;
        let unaries = self.unaries(img, &proposals)?;
        Ok(Evidence {
            proposals,
            unaries,
            mm_per_pixel: img.mm_per_pixel(),
        })
    }

    pub fn infer(&self, ev: &Evidence) -> Result<Inference> {
        dp_infer(&ev.inputs(), &self.structure, &self.tree)
    }

    pub fn predict(&self, img: &DepthImage) -> Result<(Evidence, Inference)> {
        let ev = self.evidence(img)?;
        let inf = self.infer(&ev)?;
        Ok((ev, inf))
    }

    pub fn variants(&self, ev: &Evidence) -> Result<Variants> {
        let k = self.k();
        let matcher_cfg: Vec<usize> = ev.unaries.iter().map(|u| first_max(u)).collect();
        let full = self.infer(ev)?;
        Ok(Variants {
            fcn: config_pose(&vec![0; k], &ev.proposals),
            matcher: config_pose(&matcher_cfg, &ev.proposals),
            full: config_pose(&full.config, &ev.proposals),
        })
    }

    /// Writes the model files and `model.json` into `dir`, creating it.
    pub fn save(&self, dir: &Path, training: serde_json::Value) -> Result<()> {
        self.validate()?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_kfcn(&self.fcn, &dir.join(FCN_FILE))?;
        write_ktpl(&self.templates, &dir.join(TEMPLATES_FILE))?;
        write_kmat(&self.matcher, &dir.join(MATCHER_FILE))?;
        write_kstr(&self.structure, &dir.join(STRUCT_FILE))?;
        self.tree.write_json(&dir.join(TREE_FILE))?;
        let meta = ModelMeta {
            k: self.k(),
            fcn_arch: self.fcn_arch.clone(),
            proposals: self.proposals,
            templates_per_part: self.templates.t,
            training,
        };
        let json = serde_json::to_string_pretty(&meta).expect("model metadata serialises");
        binio::write_file(&dir.join(META_FILE), json.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Model> {
        let meta_path = dir.join(META_FILE);
        let meta: ModelMeta = binio::decode_file(&meta_path, |b| serde_json::from_slice(b).map_err(FormatError::from))?;
        let tree = KinematicTree::read_json(&dir.join(TREE_FILE))?;
        let model = Model {
            fcn: read_kfcn(&dir.join(FCN_FILE), &meta.fcn_arch)?,
            fcn_arch: meta.fcn_arch,
            templates: read_ktpl(&dir.join(TEMPLATES_FILE), meta.proposals.depth_scale)?,
            matcher: read_kmat(&dir.join(MATCHER_FILE))?,
            structure: read_kstr(&dir.join(STRUCT_FILE))?,
            tree,
            proposals: meta.proposals,
        };
        if meta.k != model.k() || model.templates.t != meta.templates_per_part {
            return Err(Error::parse(meta_path, FormatError::invalid("model.json", "disagrees with the model files")));
        }
        model.validate()?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synthesize_dataset, SynthConfig};
    use crate::matchnet::MatcherArch;

    pub(crate) fn toy_model(k_tree: KinematicTree, seed: u64) -> Model {
        let k = k_tree.k();
        let arch = FcnArch::from_widths(&[4], k);
        let t = 2;
        Model {
            fcn: FcnParams::init(&arch, seed).unwrap(),
            fcn_arch: arch,
            templates: TemplateSet::new(k, t, 500.0, vec![0.1; k * t * PATCH_LEN]).unwrap(),
            matcher: MatcherParams::init(&MatcherArch::default(), k, seed).unwrap(),
            structure: StructParams::unit(&k_tree),
            tree: k_tree,
            proposals: ProposalConfig { window: 3, ..Default::default() },
        }
    }

    #[test]
    fn save_load_round_trip() {
        let m = toy_model(KinematicTree::default19(), 3);
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path(), serde_json::json!({"seed": 3})).unwrap();
        assert_eq!(Model::load(dir.path()).unwrap(), m);
    }

    #[test]
    fn predict_yields_k_finite_joints() {
        let data = synthesize_dataset(&SynthConfig { count: 2, subjects: 2, test_subjects: 1, width: 64, height: 64, mm_per_pixel: 32.0, ..Default::default() }).unwrap();
        let m = toy_model(KinematicTree::default19(), 4);
        let img = &data.samples[0].image;
        let (ev, inf) = m.predict(img).unwrap();
        assert_eq!(ev.proposals.n(), 9);
        assert_eq!(inf.config.len(), 19);
        let v = m.variants(&ev).unwrap();
        assert!(v.full.joints.iter().all(|j| j.x.is_finite() && j.z.is_finite()));
        // Proposal 0 sits on the heat-map peak.
        assert_eq!(v.fcn, config_pose(&[0; 19], &ev.proposals));
    }

    #[test]
    fn zero_heads_make_matcher_variant_equal_fcn() {
        let data = synthesize_dataset(&SynthConfig { count: 2, subjects: 2, test_subjects: 1, width: 64, height: 64, mm_per_pixel: 32.0, ..Default::default() }).unwrap();
        let mut m = toy_model(KinematicTree::default19(), 5);
        m.matcher = MatcherParams::with_zero_heads(&MatcherArch::default(), 19, 5).unwrap();
        let ev = m.evidence(&data.samples[0].image).unwrap();
        let v = m.variants(&ev).unwrap();
        assert_eq!(v.matcher, v.fcn);
    }
}
