//! Toy region detector: MLP backbone, IFC block, classification and box heads.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distill::FeatureMap;
use crate::error::{Error, Result};
use crate::inductive::{IfcBlock, IfcGrads, IfcTrace, ParamSet, DEFAULT_INDUCTIVE_NOISE};
use crate::numcore::{mlp_backward, mlp_forward, Linear, LinearGrad, MlpGrads, MlpParams, MlpTrace, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    /// Backbone output viewed as a `[C, H, W]` feature map.
    pub feature_shape: [usize; 3],
    pub embed_width: usize,
    pub inductive_noise: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            feature_shape: [4, 2, 2],
            embed_width: 32,
            inductive_noise: DEFAULT_INDUCTIVE_NOISE,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.embed_width == 0 || self.feature_shape.contains(&0) {
            return Err(Error::Config("model widths must be >= 1".into()));
        }
        if !(self.inductive_noise.is_finite() && self.inductive_noise >= 0.0) {
            return Err(Error::Config("inductive_noise must be >= 0".into()));
        }
        Ok(())
    }

    pub fn feature_len(&self) -> usize {
        self.feature_shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detector {
    pub backbone: MlpParams,
    pub ifc: IfcBlock,
    pub cls: Linear,
    pub reg: Linear,
    pub feature_shape: [usize; 3],
}

/// Everything a forward pass produces for one region.
#[derive(Debug, Clone)]
pub struct Forward {
    pub feature: FeatureMap,
    pub embedding: Vec<f64>,
    pub logits: Vec<f64>,
    pub boxes: [f64; 4],
    backbone_trace: MlpTrace,
    ifc_trace: IfcTrace,
}

/// Upstream gradients for one region; `None` means zero.
#[derive(Debug, Clone, Default)]
pub struct Upstream<'a> {
    pub logits: Option<&'a [f64]>,
    pub boxes: Option<&'a [f64; 4]>,
    pub embedding: Option<&'a [f64]>,
    pub feature: Option<&'a [f64]>,
}

#[derive(Debug, Clone)]
pub struct DetectorGrads {
    backbone: MlpGrads,
    ifc: IfcGrads,
    cls: LinearGrad,
    reg: LinearGrad,
}

impl DetectorGrads {
    pub fn zeros_like(model: &Detector) -> Self {
        Self {
            backbone: MlpGrads::zeros_like(&model.backbone),
            ifc: IfcGrads::zeros_like(&model.ifc),
            cls: LinearGrad::zeros_like(&model.cls),
            reg: LinearGrad::zeros_like(&model.reg),
        }
    }

    /// Gradients aligned with [`Detector::tensors`].
    pub fn into_tensors(self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = self
            .backbone
            .layers
            .into_iter()
            .flat_map(|g| [g.weight, g.bias])
            .collect();
        out.extend(self.ifc.into_tensors());
        out.extend([self.cls.weight, self.cls.bias, self.reg.weight, self.reg.bias]);
        out
    }
}

impl Detector {
    /// With `ifc_on == false` the inductive layers are exact identities.
    pub fn new<R: Rng + ?Sized>(
        cfg: &ModelConfig,
        feature_dim: usize,
        num_classes: usize,
        ifc_on: bool,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if feature_dim == 0 || num_classes == 0 {
            return Err(Error::invalid("feature_dim and num_classes must be >= 1"));
        }
        let backbone = MlpParams::glorot(&[feature_dim, cfg.hidden, cfg.feature_len()], rng)?;
        let mut ifc = IfcBlock::new(cfg.feature_len(), cfg.embed_width, cfg.inductive_noise, rng);
        if !ifc_on {
            ifc = ifc.with_identity_inductive();
        }
        let cls = Linear::glorot(cfg.embed_width, num_classes, rng);
        let mut reg = Linear::glorot(cfg.embed_width, 4, rng);
        reg.weight.data_mut().iter_mut().for_each(|w| *w *= 0.1);
        Ok(Self {
            backbone,
            ifc,
            cls,
            reg,
            feature_shape: cfg.feature_shape,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.cls.out_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.input_dim()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = self.backbone.tensors();
        out.extend(self.ifc.tensors());
        out.extend(self.cls.tensors());
        out.extend(self.reg.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let Self {
            backbone, ifc, cls, reg, ..
        } = self;
        let mut out = backbone.tensors_mut();
        out.extend(ifc.tensors_mut());
        out.extend(cls.tensors_mut());
        out.extend(reg.tensors_mut());
        out
    }

    /// Stable names for [`Detector::tensors`], used by checkpoints.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.backbone.layers.len())
            .flat_map(|i| [format!("backbone.{i}.weight"), format!("backbone.{i}.bias")])
            .collect();
        for layer in ["fc1", "ind1", "fc2", "ind2", "cls", "reg"] {
            names.push(format!("{layer}.weight"));
            names.push(format!("{layer}.bias"));
        }
        names
    }

    pub fn param_sets(&self) -> Vec<ParamSet> {
        let mut out = vec![ParamSet::Task; 2 * self.backbone.layers.len()];
        out.extend(IfcBlock::param_sets());
        out.extend([ParamSet::Task; 4]);
        out
    }

    /// Hex sha256 over the bit patterns of every parameter.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in self.tensors() {
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        let (raw, backbone_trace) = mlp_forward(&self.backbone, x)?;
        let [c, hh, ww] = self.feature_shape;
        let (embedding, ifc_trace) = self.ifc.forward_one(&raw);
        let feature = FeatureMap::new(c, hh, ww, raw)?;
        let logits = self.cls.forward(&embedding);
        let b = self.reg.forward(&embedding);
        let out = Forward {
            feature,
            boxes: [b[0], b[1], b[2], b[3]],
            embedding,
            logits,
            backbone_trace,
            ifc_trace,
        };
        if out.logits.iter().chain(&out.boxes).any(|v| !v.is_finite()) {
            return Err(Error::NumericDomain("non-finite detector output".into()));
        }
        Ok(out)
    }

    /// Accumulates parameter gradients of one region into `grads`.
    pub fn backward(&self, fwd: &Forward, up: &Upstream<'_>, grads: &mut DetectorGrads) -> Result<()> {
        let width = self.ifc.width();
        let mut d_emb = vec![0.0; width];
        if let Some(g) = up.logits {
            let d = self.cls.backward(&fwd.embedding, g, &mut grads.cls);
            d_emb.iter_mut().zip(d).for_each(|(a, b)| *a += b);
        }
        if let Some(g) = up.boxes {
            let d = self.reg.backward(&fwd.embedding, g, &mut grads.reg);
            d_emb.iter_mut().zip(d).for_each(|(a, b)| *a += b);
        }
        if let Some(g) = up.embedding {
            d_emb.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        let mut d_feat = self.ifc.backward_one(&fwd.ifc_trace, &d_emb, &mut grads.ifc);
        if let Some(g) = up.feature {
            d_feat.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        mlp_backward(&self.backbone, &fwd.backbone_trace, &d_feat, &mut grads.backbone)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numcore::{finite_diff_grad, max_relative_error};

    fn small() -> (Detector, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = ModelConfig {
            hidden: 5,
            feature_shape: [2, 2, 1],
            embed_width: 3,
            inductive_noise: 0.05,
        };
        (Detector::new(&cfg, 3, 4, true, &mut rng).unwrap(), rng)
    }

    #[test]
    fn layout_is_consistent() {
        let (m, _) = small();
        assert_eq!(m.tensors().len(), m.param_sets().len());
        assert_eq!(m.tensors().len(), m.tensor_names().len());
        let g = DetectorGrads::zeros_like(&m).into_tensors();
        for (t, g) in m.tensors().iter().zip(&g) {
            assert_eq!(t.len(), g.len());
        }
    }

    #[test]
    fn ifc_off_starts_at_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Detector::new(&ModelConfig::default(), 6, 3, false, &mut rng).unwrap();
        assert_eq!(m.ifc.ind1, Linear::identity(32));
        assert_eq!(m.ifc.ind2, Linear::identity(32));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (m, _) = small();
        let x = [0.3, -0.8, 1.1];
        let gl = [0.2, -0.5, 0.1, 0.7];
        let gb = [0.3, 0.0, -0.4, 0.9];
        let ge = [0.1, -0.2, 0.05];
        let gf = [0.5, -0.3, 0.2, 0.1];
        let up = Upstream {
            logits: Some(&gl),
            boxes: Some(&gb),
            embedding: Some(&ge),
            feature: Some(&gf),
        };
        let fwd = m.forward(&x).unwrap();
        let mut grads = DetectorGrads::zeros_like(&m);
        m.backward(&fwd, &up, &mut grads).unwrap();
        let analytic = grads.into_tensors().concat();
        let flat: Vec<f64> = m.tensors().iter().flat_map(|t| t.data().to_vec()).collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let numeric = finite_diff_grad(
            |theta| {
                let mut mm = m.clone();
                let mut off = 0;
                for t in mm.tensors_mut() {
                    let n = t.len();
                    t.data_mut().copy_from_slice(&theta[off..off + n]);
                    off += n;
                }
                let f = mm.forward(&x).unwrap();
                dot(&f.logits, &gl) + dot(&f.boxes, &gb) + dot(&f.embedding, &ge) + dot(f.feature.data(), &gf)
            },
            &flat,
            1e-5,
        )
        .unwrap();
        assert!(max_relative_error(&analytic, &numeric) < 1e-4);
    }

    #[test]
    fn checksum_tracks_parameters() {
        let (m, _) = small();
        let mut other = m.clone();
        assert_eq!(m.checksum(), other.checksum());
        other.cls.bias.data_mut()[0] += 1e-12;
        assert_ne!(m.checksum(), other.checksum());
    }
}
