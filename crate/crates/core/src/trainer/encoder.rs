use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{ItemRecord, Modality, ModalitySet};
use crate::embedding::MrlDims;
use crate::error::{Error, Result};
use crate::losses::{GradientBundle, LateFusionGate, LossParams, ModalViews};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub vision_dim: usize,
    pub audio_dim: usize,
    pub text_dim: usize,
    /// Shared embedding dimension.
    pub dim: usize,
    pub mrl_dims: Vec<usize>,
    /// Rows in the instruction token table.
    pub instructions: usize,
    /// Gain applied to the `1/sqrt(fan_in)` initialisation scale.
    pub init_gain: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vision_dim: 32,
            audio_dim: 16,
            text_dim: 24,
            dim: 64,
            mrl_dims: vec![16, 32, 64],
            instructions: 8,
            init_gain: 1.0,
        }
    }
}

impl EncoderConfig {
    pub fn raw_dim(&self, m: Modality) -> usize {
        match m {
            Modality::Vision => self.vision_dim,
            Modality::Audio => self.audio_dim,
            Modality::Text => self.text_dim,
        }
    }

    pub fn modality_dims(&self) -> BTreeMap<Modality, usize> {
        Modality::ALL.iter().map(|&m| (m, self.raw_dim(m))).collect()
    }

    pub fn mrl(&self) -> Result<MrlDims> {
        MrlDims::for_dim(self.mrl_dims.clone(), self.dim)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.vision_dim, self.audio_dim, self.text_dim, self.dim, self.instructions].contains(&0) {
            return Err(Error::invalid("encoder dimensions and instruction count must be positive"));
        }
        if !(self.init_gain > 0.0) {
            return Err(Error::invalid("init_gain must be positive"));
        }
        self.mrl().map(|_| ())
    }
}

/// Stand-in for the fusion backbone: every token (instruction plus one
/// projected feature per modality) goes through one shared linear mixing
/// layer and `tanh`, then tokens are mean-pooled. There is no cross-token
/// interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder {
    pub config: EncoderConfig,
    /// Per modality, `dim × raw_dim`.
    pub projections: BTreeMap<Modality, Tensor>,
    /// `dim × dim`
    pub mixing: Tensor,
    /// `instructions × dim`
    pub instructions: Tensor,
    pub gate: LateFusionGate,
    pub loss: LossParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Token {
    Instruction(usize),
    Feature(Modality),
}

/// A forward pass with what backpropagation needs.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub views: ModalViews,
    kinds: Vec<Token>,
    inputs: Vec<Vec<f64>>,
    tokens: Vec<Vec<f64>>,
    activations: Vec<Vec<f64>>,
}

impl Encoded {
    pub fn n_m(&self) -> &[f64] {
        &self.views.n_m
    }
}

/// Upstream gradients for one [`Encoded`]. The raw visual output `v` is the
/// pooled vision token, so its gradient is folded into `n_v`.
#[derive(Debug, Clone, Default)]
pub struct ViewGrads {
    pub n_m: Vec<f64>,
    pub n_v: Option<Vec<f64>>,
    pub n_t: Option<Vec<f64>>,
}

impl ViewGrads {
    pub fn zeros(dim: usize) -> Self {
        Self {
            n_m: vec![0.0; dim],
            n_v: None,
            n_t: None,
        }
    }

    pub fn from_n_m(n_m: Vec<f64>) -> Self {
        Self { n_m, n_v: None, n_t: None }
    }

    pub fn add_n_v(&mut self, g: &[f64]) {
        add_into(self.n_v.get_or_insert_with(|| vec![0.0; g.len()]), g);
    }

    pub fn add_n_t(&mut self, g: &[f64]) {
        add_into(self.n_t.get_or_insert_with(|| vec![0.0; g.len()]), g);
    }
}

pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn add_scaled_into(dst: &mut [f64], scale: f64, src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += scale * s);
}

pub const PROJECTION_KEYS: [(&str, Modality); 3] = [
    ("proj.vision", Modality::Vision),
    ("proj.audio", Modality::Audio),
    ("proj.text", Modality::Text),
];

impl ToyEncoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let gain = config.init_gain;
        let projections = Modality::ALL
            .iter()
            .map(|&m| {
                let raw = config.raw_dim(m);
                (m, Tensor::gaussian(d, raw, gain / (raw as f64).sqrt(), &mut rng))
            })
            .collect();
        let mixing = Tensor::gaussian(d, d, gain / (d as f64).sqrt(), &mut rng);
        let instructions = Tensor::gaussian(config.instructions, d, 0.1 * gain, &mut rng);
        let gate = LateFusionGate::random(d, 0.1 / (d as f64).sqrt(), &mut rng);
        Ok(Self {
            config,
            projections,
            mixing,
            instructions,
            gate,
            loss: LossParams::default(),
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Encodes the modalities of `rec` that lie in `view`, prefixed by the
    /// instruction token when one is given.
    pub fn forward(&self, rec: &ItemRecord, instruction: Option<usize>, view: ModalitySet) -> Result<Encoded> {
        let mut kinds = Vec::new();
        let mut inputs = Vec::new();
        let mut tokens = Vec::new();
        if let Some(id) = instruction {
            if id >= self.config.instructions {
                return Err(Error::invalid(format!(
                    "instruction {id} outside table of {}",
                    self.config.instructions
                )));
            }
            kinds.push(Token::Instruction(id));
            inputs.push(Vec::new());
            tokens.push(self.instructions.row(id).to_vec());
        }
        for m in rec.modalities().intersect(view).iter() {
            let x = rec.feature(m).expect("listed modality");
            Error::check_dim(self.config.raw_dim(m), x.len())?;
            kinds.push(Token::Feature(m));
            tokens.push(self.projections[&m].matvec(x));
            inputs.push(x.to_vec());
        }
        if !kinds.iter().any(|k| matches!(k, Token::Feature(_))) {
            return Err(Error::invalid(format!("item `{}` has no modality in view {view}", rec.id)));
        }
        let activations: Vec<Vec<f64>> = tokens
            .iter()
            .map(|t| self.mixing.matvec(t).into_iter().map(f64::tanh).collect())
            .collect();
        let d = self.dim();
        let mut n_m = vec![0.0; d];
        for h in &activations {
            add_scaled_into(&mut n_m, 1.0 / activations.len() as f64, h);
        }
        let pick = |m: Modality| kinds.iter().position(|k| *k == Token::Feature(m)).map(|i| activations[i].clone());
        let n_v = pick(Modality::Vision);
        let views = ModalViews {
            v: n_v.clone(),
            n_v,
            n_t: pick(Modality::Text),
            n_m,
        };
        Ok(Encoded {
            views,
            kinds,
            inputs,
            tokens,
            activations,
        })
    }

    /// Accumulates parameter gradients for one forward pass into `grads`.
    pub fn backward(&self, enc: &Encoded, upstream: &ViewGrads, grads: &mut GradientBundle) {
        let d = self.dim();
        let k = enc.activations.len() as f64;
        for (i, kind) in enc.kinds.iter().enumerate() {
            let mut d_h: Vec<f64> = upstream.n_m.iter().map(|g| g / k).collect();
            match kind {
                Token::Feature(Modality::Vision) => {
                    if let Some(g) = &upstream.n_v {
                        add_into(&mut d_h, g);
                    }
                }
                Token::Feature(Modality::Text) => {
                    if let Some(g) = &upstream.n_t {
                        add_into(&mut d_h, g);
                    }
                }
                _ => {}
            }
            let h = &enc.activations[i];
            let d_a: Vec<f64> = d_h.iter().zip(h).map(|(g, h)| g * (1.0 - h * h)).collect();
            if d_a.iter().all(|g| *g == 0.0) {
                continue;
            }
            let mut d_mix = Tensor::zeros(d, d);
            d_mix.add_outer(1.0, &d_a, &enc.tokens[i]);
            grads.accumulate_prefix("mix", d * d, d_mix.as_slice());
            let d_t = self.mixing.matvec_t(&d_a);
            match kind {
                Token::Instruction(id) => {
                    let n = self.config.instructions * d;
                    let mut row = vec![0.0; n];
                    row[id * d..(id + 1) * d].copy_from_slice(&d_t);
                    grads.accumulate_prefix("instructions", n, &row);
                }
                Token::Feature(m) => {
                    let x = &enc.inputs[i];
                    let mut d_p = Tensor::zeros(d, x.len());
                    d_p.add_outer(1.0, &d_t, x);
                    grads.accumulate_prefix(projection_key(*m), d * x.len(), d_p.as_slice());
                }
            }
        }
    }

    /// Late-fusion output for an encoded item: gated when a visual
    /// embedding exists, otherwise `n_m` unchanged.
    pub fn fuse(&self, enc: &Encoded) -> Result<Option<crate::losses::FusionForward>> {
        match &enc.views.v {
            Some(v) => self.gate.forward(v, &enc.views.n_m).map(Some),
            None => Ok(None),
        }
    }

    /// Every parameter tensor by name, including one `log_tau.{key}` scalar
    /// per registered temperature.
    pub fn params(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = PROJECTION_KEYS
            .iter()
            .map(|(k, m)| (k.to_string(), self.projections[m].as_slice()))
            .collect();
        out.push(("mix".into(), self.mixing.as_slice()));
        out.push(("instructions".into(), self.instructions.as_slice()));
        out.push(("gate.weight".into(), self.gate.weight.as_slice()));
        out.push(("gate.bias".into(), &self.gate.bias));
        for (k, v) in &self.loss.log_tau {
            out.push((format!("log_tau.{k}"), std::slice::from_ref(v)));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        for (m, t) in self.projections.iter_mut() {
            out.push((projection_key(*m).to_string(), t.as_mut_slice()));
        }
        out.push(("mix".into(), self.mixing.as_mut_slice()));
        out.push(("instructions".into(), self.instructions.as_mut_slice()));
        out.push(("gate.weight".into(), self.gate.weight.as_mut_slice()));
        out.push(("gate.bias".into(), &mut self.gate.bias));
        for (k, v) in self.loss.log_tau.iter_mut() {
            out.push((format!("log_tau.{k}"), std::slice::from_mut(v)));
        }
        out
    }

    pub fn param_layout(&self) -> Vec<(String, usize)> {
        self.params().into_iter().map(|(k, v)| (k, v.len())).collect()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params().into_iter().flat_map(|(_, v)| v.to_vec()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.param_layout().iter().map(|p| p.1).sum();
        Error::check_dim(total, flat.len())?;
        let mut at = 0;
        for (_, p) in self.params_mut() {
            p.copy_from_slice(&flat[at..at + p.len()]);
            at += p.len();
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|(_, p)| p.iter().all(|v| v.is_finite()))
    }
}

pub(crate) fn projection_key(m: Modality) -> &'static str {
    match m {
        Modality::Vision => "proj.vision",
        Modality::Audio => "proj.audio",
        Modality::Text => "proj.text",
    }
}
