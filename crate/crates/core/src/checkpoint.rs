//! Binary checkpoints: a versioned header, a `key = value` config block, then
//! named tensors with their shape and a little-endian f32 payload.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{model_from_kv, model_to_text, parse_kv};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, OptimizerState};
use crate::params::{ModelConfig, Parameters, VocabLayout};
use crate::tensor::Matrix;
use crate::vocab::VocabularyRegistry;

pub const CHECKPOINT_MAGIC: &[u8] = b"USERBERT-CKPT v1\n";
const FIRST_MOMENT_PREFIX: &str = "adam.m.";
const SECOND_MOMENT_PREFIX: &str = "adam.v.";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub registry_digest: String,
    pub params: Parameters<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
    pub step: u64,
    pub seed: u64,
    /// Free-form extra keys (task name and the like); keys must not contain `=`.
    pub meta: BTreeMap<String, String>,
}

fn join_sizes(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn split_sizes(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::parse(key, format!("bad size list `{v}`")))
        })
        .collect()
}

impl Checkpoint {
    pub fn new(
        model: ModelConfig,
        registry: &VocabularyRegistry,
        params: Parameters<f32>,
        optimizer: Option<OptimizerState<f32>>,
        step: u64,
        seed: u64,
    ) -> Self {
        Checkpoint {
            model,
            registry_digest: registry.digest(),
            params,
            optimizer,
            step,
            seed,
            meta: BTreeMap::new(),
        }
    }

    fn header_text(&self) -> String {
        let mut s = model_to_text(&self.model);
        let layout = self.params.vocab_layout();
        let _ = writeln!(s, "vocab.long_term = {}", join_sizes(&layout.long_term));
        let _ = writeln!(s, "vocab.short_term = {}", join_sizes(&layout.short_term));
        let _ = writeln!(s, "vocab.profile = {}", join_sizes(&layout.profile));
        let classes = self
            .params
            .num_classes()
            .map_or("none".into(), |c| c.to_string());
        let _ = writeln!(s, "num_classes = {classes}");
        let _ = writeln!(s, "registry_digest = {}", self.registry_digest);
        let _ = writeln!(s, "step = {}", self.step);
        let _ = writeln!(s, "seed = {}", self.seed);
        match &self.optimizer {
            None => s.push_str("optimizer = none\n"),
            Some(o) => {
                s.push_str("optimizer = adam\n");
                let _ = writeln!(s, "adam.lr = {:e}", o.config.lr);
                let _ = writeln!(s, "adam.beta1 = {:e}", o.config.beta1);
                let _ = writeln!(s, "adam.beta2 = {:e}", o.config.beta2);
                let _ = writeln!(s, "adam.eps = {:e}", o.config.eps);
                let _ = writeln!(s, "adam.step = {}", o.step);
            }
        }
        for (k, v) in &self.meta {
            let _ = writeln!(s, "meta.{k} = {v}");
        }
        s
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        let header = self.header_text();
        out.write_u32::<LittleEndian>(header.len() as u32)?;
        out.write_all(header.as_bytes())?;
        let mut tensors: Vec<(String, &Matrix<f32>)> = Vec::new();
        self.params
            .for_each(|name, _, m| tensors.push((name.to_string(), m)));
        if let Some(o) = &self.optimizer {
            o.first_moment
                .for_each(|name, _, m| tensors.push((format!("{FIRST_MOMENT_PREFIX}{name}"), m)));
            o.second_moment
                .for_each(|name, _, m| tensors.push((format!("{SECOND_MOMENT_PREFIX}{name}"), m)));
        }
        out.write_u32::<LittleEndian>(tensors.len() as u32)?;
        for (name, m) in tensors {
            out.write_u32::<LittleEndian>(name.len() as u32)?;
            out.write_all(name.as_bytes())?;
            out.write_u32::<LittleEndian>(2)?;
            out.write_u32::<LittleEndian>(m.rows() as u32)?;
            out.write_u32::<LittleEndian>(m.cols() as u32)?;
            for &x in m.as_slice() {
                out.write_f32::<LittleEndian>(x)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    /// Loads and refuses a checkpoint built against a different vocabulary.
    pub fn load_for(path: &Path, registry: &VocabularyRegistry) -> Result<Self> {
        let ckpt = Self::load(path)?;
        let expected = registry.digest();
        if ckpt.registry_digest != expected {
            return Err(Error::Digest {
                expected,
                found: ckpt.registry_digest,
            });
        }
        Ok(ckpt)
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        if !bytes.starts_with(CHECKPOINT_MAGIC) {
            let found = bytes
                .split(|&b| b == b'\n')
                .next()
                .map(|l| String::from_utf8_lossy(&l[..l.len().min(40)]).into_owned())
                .unwrap_or_default();
            return Err(Error::Version {
                path: origin.into(),
                expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).trim().into(),
                found,
            });
        }
        let truncated = |_| Error::parse(origin, "truncated checkpoint");
        let mut r = &bytes[CHECKPOINT_MAGIC.len()..];
        let header_len = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        if r.len() < header_len {
            return Err(Error::parse(origin, "truncated config block"));
        }
        let header = std::str::from_utf8(&r[..header_len])
            .map_err(|_| Error::parse(origin, "config block is not UTF-8"))?;
        r = &r[header_len..];
        let kv = parse_kv(header, origin)?;
        let get = |k: &str| {
            kv.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::parse(origin, format!("missing `{k}` in config block")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::parse(origin, format!("bad `{k}`")))
        };
        let float = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::parse(origin, format!("bad `{k}`")))
        };

        let model = model_from_kv(&kv)?;
        let layout = VocabLayout {
            long_term: split_sizes("vocab.long_term", get("vocab.long_term")?)?,
            short_term: split_sizes("vocab.short_term", get("vocab.short_term")?)?,
            profile: split_sizes("vocab.profile", get("vocab.profile")?)?,
        };
        let num_classes = match get("num_classes")? {
            "none" => None,
            _ => Some(num("num_classes")? as usize),
        };

        let count = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let mut blobs: HashMap<String, Matrix<f32>> = HashMap::with_capacity(count);
        for _ in 0..count {
            let name_len = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
            if r.len() < name_len {
                return Err(Error::parse(origin, "truncated tensor name"));
            }
            let name = String::from_utf8(r[..name_len].to_vec())
                .map_err(|_| Error::parse(origin, "tensor name is not UTF-8"))?;
            r = &r[name_len..];
            let ndims = r.read_u32::<LittleEndian>().map_err(truncated)?;
            if ndims != 2 {
                return Err(Error::Shape(format!(
                    "tensor `{name}` has {ndims} dims, expected 2"
                )));
            }
            let rows = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
            let cols = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
            let mut data = vec![0f32; rows * cols];
            r.read_f32_into::<LittleEndian>(&mut data)
                .map_err(truncated)?;
            blobs.insert(name, Matrix::from_vec(rows, cols, data)?);
        }
        let mut rest = Vec::new();
        let _ = r.read_to_end(&mut rest);
        if !rest.is_empty() {
            return Err(Error::parse(origin, "trailing bytes after tensors"));
        }

        let template = Parameters::<f32>::init(
            &model,
            &layout,
            num_classes,
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        let params = fill_named(template.clone(), &mut blobs, "")?;
        let optimizer = match get("optimizer")? {
            "none" => None,
            "adam" => {
                let config = AdamConfig {
                    lr: float("adam.lr")?,
                    beta1: float("adam.beta1")?,
                    beta2: float("adam.beta2")?,
                    eps: float("adam.eps")?,
                };
                Some(OptimizerState {
                    first_moment: fill_named(template.clone(), &mut blobs, FIRST_MOMENT_PREFIX)?,
                    second_moment: fill_named(template, &mut blobs, SECOND_MOMENT_PREFIX)?,
                    step: num("adam.step")?,
                    config,
                })
            }
            other => return Err(Error::parse(origin, format!("unknown optimizer `{other}`"))),
        };
        if let Some(name) = blobs.keys().min() {
            return Err(Error::Shape(format!(
                "unexpected tensor `{name}` in checkpoint"
            )));
        }
        let meta = kv
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("meta.").map(|k| (k.to_string(), v.clone())))
            .collect();
        Ok(Checkpoint {
            model,
            registry_digest: get("registry_digest")?.to_string(),
            params,
            optimizer,
            step: num("step")?,
            seed: num("seed")?,
            meta,
        })
    }
}

fn fill_named(
    mut params: Parameters<f32>,
    blobs: &mut HashMap<String, Matrix<f32>>,
    prefix: &str,
) -> Result<Parameters<f32>> {
    let mut failure = None;
    params.for_each_mut(|name, _, m| {
        if failure.is_some() {
            return;
        }
        let key = format!("{prefix}{name}");
        match blobs.remove(&key) {
            None => failure = Some(Error::Shape(format!("checkpoint lacks tensor `{key}`"))),
            Some(t) if t.shape() != m.shape() => {
                failure = Some(Error::Shape(format!(
                    "tensor `{key}` is {:?}, config implies {:?}",
                    t.shape(),
                    m.shape()
                )))
            }
            Some(t) => *m = t,
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(params),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::adam_step;
    use crate::vocab::{AttributeSchema, SchemaSet, SegmentKind};

    fn registry() -> VocabularyRegistry {
        let schema = |kind, attrs: &[(&str, usize)]| {
            AttributeSchema::new(
                kind,
                attrs.iter().map(|(n, c)| (n.to_string(), *c)).collect(),
            )
            .unwrap()
        };
        let mut reg = VocabularyRegistry::new(SchemaSet {
            long_term: schema(SegmentKind::LongTerm, &[("genre", 4), ("shop", 4)]),
            short_term: schema(SegmentKind::ShortTerm, &[("genre", 4)]),
            profile: schema(SegmentKind::UserProfile, &[("gender", 2)]),
        });
        for v in ["a", "b", "c"] {
            reg.intern_at(SegmentKind::LongTerm, 0, v);
            reg.intern_at(SegmentKind::ShortTerm, 0, v);
        }
        reg.intern_at(SegmentKind::LongTerm, 1, "s");
        reg.intern_at(SegmentKind::UserProfile, 0, "f");
        reg
    }

    fn sample() -> (Checkpoint, VocabularyRegistry) {
        let reg = registry();
        let model = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layout = VocabLayout::from_registry(&reg);
        let mut params = Parameters::<f32>::init(&model, &layout, Some(2), &mut rng).unwrap();
        let mut grads = params.zeros_like();
        grads.for_each_mut(|_, _, m| {
            for (i, x) in m.as_mut_slice().iter_mut().enumerate() {
                *x = ((i % 7) as f32 - 3.0) * 0.01;
            }
        });
        let mut opt = OptimizerState::new(&params, AdamConfig::default());
        adam_step(&mut params, &grads, &mut opt).unwrap();
        let mut ckpt = Checkpoint::new(model, &reg, params, Some(opt), 1, 3);
        ckpt.meta.insert("task".into(), "targeting".into());
        (ckpt, reg)
    }

    #[test]
    fn roundtrip_is_exact() {
        let (ckpt, reg) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load_for(&path, &reg).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn digest_mismatch_is_refused() {
        let (ckpt, mut reg) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();
        reg.intern_at(SegmentKind::LongTerm, 0, "new");
        assert!(matches!(
            Checkpoint::load_for(&path, &reg),
            Err(Error::Digest { .. })
        ));
    }

    #[test]
    fn wrong_magic_and_truncation_are_errors() {
        let (ckpt, _) = sample();
        let mut bytes = Vec::new();
        ckpt.write_to(&mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[15] = b'9';
        assert!(matches!(
            Checkpoint::from_bytes(&bad, "x"),
            Err(Error::Version { .. })
        ));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], "x").is_err());
    }
}
