use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tubeseg_autodiff::{Tape, Tensor, Var};

use super::config::ModelConfig;
use crate::error::{io_error, Error, Result};

const MAGIC: &[u8; 4] = b"TPRM";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// He-normal for a 3×3 kernel with this many input channels.
    He(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn spec(name: impl Into<String>, shape: Vec<usize>, init: Init) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        shape,
        init,
    }
}

fn layer_norm_specs(out: &mut Vec<ParamSpec>, prefix: &str, c: usize) {
    out.push(spec(format!("{prefix}.gain"), vec![c], Init::Ones));
    out.push(spec(format!("{prefix}.bias"), vec![c], Init::Zeros));
}

/// Parameters of one single-head attention update. Self-attention shares the
/// query normalization with keys and values.
fn attention_specs(out: &mut Vec<ParamSpec>, prefix: &str, c: usize, cross: bool, std: f64) {
    layer_norm_specs(out, &format!("{prefix}.ln_q"), c);
    if cross {
        layer_norm_specs(out, &format!("{prefix}.ln_kv"), c);
    }
    for w in ["wq", "wk", "wv", "wo"] {
        out.push(spec(format!("{prefix}.{w}"), vec![c, c], Init::Normal(std)));
    }
    out.push(spec(format!("{prefix}.bo"), vec![c], Init::Zeros));
}

fn ffn_specs(out: &mut Vec<ParamSpec>, prefix: &str, c: usize, hidden: usize, std: f64) {
    layer_norm_specs(out, &format!("{prefix}.ln"), c);
    out.push(spec(
        format!("{prefix}.w1"),
        vec![c, hidden],
        Init::Normal(std),
    ));
    out.push(spec(format!("{prefix}.b1"), vec![hidden], Init::Zeros));
    out.push(spec(
        format!("{prefix}.w2"),
        vec![hidden, c],
        Init::Normal(std),
    ));
    out.push(spec(format!("{prefix}.b2"), vec![c], Init::Zeros));
}

/// Every parameter the configured network owns, in a fixed order.
pub fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let c = config.channels;
    let std = config.init_std;
    let mut out = Vec::new();
    let mut cin = 3;
    for k in 0..3 {
        out.push(spec(
            format!("backbone.conv{k}.weight"),
            vec![c, cin, 3, 3],
            Init::He(cin),
        ));
        out.push(spec(format!("backbone.conv{k}.bias"), vec![c], Init::Zeros));
        cin = c;
    }
    out.push(spec(
        "latent.init",
        vec![config.latent, c],
        Init::Normal(std),
    ));
    out.push(spec(
        "memory.init",
        vec![config.memory, c],
        Init::Normal(std),
    ));
    for b in 0..config.num_blocks {
        attention_specs(&mut out, &format!("block{b}.axial.height"), c, false, std);
        attention_specs(&mut out, &format!("block{b}.axial.width"), c, false, std);
        attention_specs(&mut out, &format!("block{b}.latent.l2f"), c, true, std);
        attention_specs(&mut out, &format!("block{b}.latent.l2l"), c, false, std);
        attention_specs(&mut out, &format!("block{b}.latent.f2l"), c, true, std);
        attention_specs(&mut out, &format!("block{b}.global.m2v"), c, true, std);
        ffn_specs(
            &mut out,
            &format!("block{b}.global.ffn_m"),
            c,
            config.ffn_hidden(),
            std,
        );
        attention_specs(&mut out, &format!("block{b}.global.v2m"), c, true, std);
        ffn_specs(
            &mut out,
            &format!("block{b}.global.ffn_v"),
            c,
            config.ffn_hidden(),
            std,
        );
    }
    layer_norm_specs(&mut out, "head.ln", c);
    out.push(spec("seg.w1", vec![c, c], Init::Normal(std)));
    out.push(spec("seg.b1", vec![c], Init::Zeros));
    out.push(spec("seg.w2", vec![c, c], Init::Normal(std)));
    out.push(spec("class.w1", vec![c, c], Init::Normal(std)));
    out.push(spec("class.b1", vec![c], Init::Zeros));
    out.push(spec(
        "class.w2",
        vec![c, config.classes + 1],
        Init::Normal(std),
    ));
    out.push(spec("class.b2", vec![config.classes + 1], Init::Zeros));
    layer_norm_specs(&mut out, "decode.ln", c);
    out.push(spec(
        "semantic.w",
        vec![c, config.classes],
        Init::Normal(std),
    ));
    out.push(spec("semantic.b", vec![config.classes], Init::Zeros));
    if config.depth_enabled {
        out.push(spec("depth.conv1.weight", vec![c, c, 3, 3], Init::He(c)));
        out.push(spec("depth.conv1.bias", vec![c], Init::Zeros));
        out.push(spec("depth.conv2.weight", vec![1, c, 3, 3], Init::He(c)));
        out.push(spec("depth.conv2.bias", vec![1], Init::Zeros));
    }
    out
}

/// Named parameter tensors, ordered by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Parameters {
    tensors: BTreeMap<String, Tensor>,
}

impl Parameters {
    pub fn from_specs(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for s in specs {
            let len: usize = s.shape.iter().product();
            let data: Vec<f64> = match s.init {
                Init::Zeros => vec![0.0; len],
                Init::Ones => vec![1.0; len],
                Init::Normal(std) => sample(&mut rng, std, len)?,
                Init::He(fan_in) => sample(&mut rng, (2.0 / (9 * fan_in) as f64).sqrt(), len)?,
            };
            if tensors
                .insert(s.name.clone(), Tensor::new(s.shape.clone(), data)?)
                .is_some()
            {
                return Err(Error::Config(format!("duplicate parameter {}", s.name)));
            }
        }
        Ok(Self { tensors })
    }

    /// Seeded initialization for `config`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Self::from_specs(&param_specs(config), config.seed)
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    /// Parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.tensors.values().cloned().collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Puts every tensor on `tape`, as trainable leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
            .collect();
        Bound { vars }
    }

    /// Pairs already-placed variables with names, in name order.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<Bound> {
        if vars.len() != self.tensors.len() {
            return Err(Error::Contract(format!(
                "{} variables for {} parameters",
                vars.len(),
                self.tensors.len()
            )));
        }
        Ok(Bound {
            vars: self
                .tensors
                .keys()
                .cloned()
                .zip(vars.iter().copied())
                .collect(),
        })
    }

    /// Checks names and shapes against `config`.
    pub fn check_config(&self, config: &ModelConfig) -> Result<()> {
        let specs = param_specs(config);
        for s in &specs {
            match self.tensors.get(&s.name) {
                None => {
                    return Err(Error::Checkpoint(format!("missing parameter {}", s.name)));
                }
                Some(t) if t.shape() != s.shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {} has shape {:?}, config expects {:?}",
                        s.name,
                        t.shape(),
                        s.shape
                    )));
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = self
            .tensors
            .keys()
            .find(|k| !specs.iter().any(|s| &s.name == *k))
        {
            return Err(Error::Checkpoint(format!(
                "parameter {extra} is not part of this configuration"
            )));
        }
        Ok(())
    }

    /// θ ← θ − lr·g for every parameter with a gradient.
    pub fn sgd_step(&mut self, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let t = self
                .tensors
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {name}")))?;
            if t.shape() != g.shape() {
                return Err(Error::Contract(format!(
                    "gradient shape mismatch for {name}"
                )));
            }
            for (v, d) in t.data_mut().iter_mut().zip(g.data()) {
                *v -= lr * d;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos
                .checked_add(n)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| Error::Format(format!("checkpoint truncated at offset {pos}")))?;
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        if take(4)? != MAGIC {
            return Err(Error::Format("bad checkpoint magic, expected TPRM".into()));
        }
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
        let version = u32_at(take(4)?);
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = u32_at(take(4)?) as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(take(len)?.to_vec())
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let rank = take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32_at(take(4)?) as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::Format(format!("implausible shape for {name}")))?;
            let data = take(n)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::Format(format!("parameter {name}: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate parameter {name}")));
            }
        }
        if pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes in checkpoint",
                bytes.len() - pos
            )));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(io_error(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_error(path))?;
        Self::from_bytes(&bytes)
    }

    /// Loads a checkpoint and checks it against `config`.
    pub fn load_for(path: &Path, config: &ModelConfig) -> Result<Self> {
        let params = Self::load(path)?;
        params.check_config(config)?;
        Ok(params)
    }
}

fn sample(rng: &mut ChaCha8Rng, std: f64, len: usize) -> Result<Vec<f64>> {
    let normal =
        Normal::new(0.0, std).map_err(|e| Error::Config(format!("bad init std {std}: {e}")))?;
    Ok((0..len).map(|_| normal.sample(rng)).collect())
}

/// Parameter variables placed on one tape, looked up by name.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {name} is not bound")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Gradient of every bound parameter; parameters the loss does not touch
    /// get zeros.
    pub fn gradients(
        &self,
        tape: &Tape,
        grads: &tubeseg_autodiff::Gradients,
    ) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let g = match grads.get(v) {
                    Some(g) => g.clone(),
                    None => Tensor::zeros(tape.shape(v).to_vec())?,
                };
                Ok((k.clone(), g))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::default();
        assert_eq!(
            Parameters::init(&cfg).unwrap(),
            Parameters::init(&cfg).unwrap()
        );
        let other = ModelConfig {
            seed: 1,
            ..cfg.clone()
        };
        assert_ne!(
            Parameters::init(&cfg).unwrap(),
            Parameters::init(&other).unwrap()
        );
    }

    #[test]
    fn bytes_round_trip() {
        let p = Parameters::init(&ModelConfig::default()).unwrap();
        assert_eq!(Parameters::from_bytes(&p.to_bytes()).unwrap(), p);
    }

    #[test]
    fn depth_head_follows_config() {
        let cfg = ModelConfig {
            depth_enabled: false,
            ..ModelConfig::default()
        };
        assert!(param_specs(&cfg)
            .iter()
            .all(|s| !s.name.starts_with("depth.")));
    }
}
