//! Bit-exact checkpoints, dataset loading, and run configuration.
//!
//! Checkpoint layout (all integers little-endian):
//!   "LFCK" | format_version u32 | meta_len u32 | meta JSON (UTF-8)
//!   | per entry, lexicographic by name:
//!     name_len u32 | name bytes | rank u32 | dims u64 x rank | f64 x numel
//!
//! Floats are stored as raw 64-bit words, so load(save(x)) is bit-identical.

use crate::encoder::Stream;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::AdamConfig;
use crate::params::ParamStore;
use crate::sample::GroundingSample;
use crate::synthgen::{DatasetHeader, DatasetRecord, GRAMMAR_VERSION, MAX_COMMAND_TOKENS};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"LFCK";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub seed: u64,
    pub step: u64,
}

/// Atomically writes the store (temp file + rename).
pub fn save_checkpoint(params: &ParamStore, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
    let meta_json = serde_json::to_vec(meta)?;
    buf.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta_json);
    for (name, tensor) in params.iter() {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "truncated while reading {what} at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, CheckpointMeta)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };

    let magic = cur.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { found: magic.try_into().unwrap() });
    }
    let version = cur.u32("format version")?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint format_version {version}, loader supports {CHECKPOINT_FORMAT_VERSION}"
        )));
    }
    let meta_len = cur.u32("metadata length")? as usize;
    let meta_bytes = cur.take(meta_len, "metadata")?;
    let meta: CheckpointMeta = serde_json::from_slice(meta_bytes)
        .map_err(|e| Error::CorruptCheckpoint(format!("metadata not valid JSON: {e}")))?;

    let mut store = ParamStore::empty(meta.seed);
    let mut prev_name: Option<String> = None;
    while cur.pos < bytes.len() {
        let name_len = cur.u32("entry name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "entry name")?)
            .map_err(|_| Error::CorruptCheckpoint("entry name not UTF-8".into()))?
            .to_string();
        if let Some(prev) = &prev_name {
            if *prev >= name {
                return Err(Error::CorruptCheckpoint(format!(
                    "entries out of lexicographic order: {prev:?} before {name:?}"
                )));
            }
        }
        let rank = cur.u32("entry rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64("entry dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 8, &format!("data of {name}"))?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::CorruptCheckpoint(format!("entry {name}: {e}")))?;
        store.insert(&name, tensor)?;
        prev_name = Some(name);
    }
    Ok((store, meta))
}

/// Reads and validates a synthgen dataset file.
pub fn load_dataset(path: &Path) -> Result<(DatasetHeader, Vec<GroundingSample>)> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let (_, first) = lines.next().ok_or(Error::Dataset {
        line: 1,
        msg: "empty file: missing header".into(),
    })?;
    let header: DatasetHeader = serde_json::from_str(&first?).map_err(|e| Error::Dataset {
        line: 1,
        msg: format!("bad header: {e}"),
    })?;
    if header.grammar_version != GRAMMAR_VERSION {
        return Err(Error::GrammarVersion {
            found: header.grammar_version,
            supported: GRAMMAR_VERSION,
        });
    }
    header.spec.validate().map_err(|e| Error::Dataset {
        line: 1,
        msg: format!("bad scene spec: {e}"),
    })?;

    let vocab_size = header.vocab.len();
    let feature_dim = header.spec.feature_dim();
    let mut samples = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(&text).map_err(|e| Error::Dataset {
            line: line_no,
            msg: format!("bad record: {e}"),
        })?;
        if record.grammar_version != GRAMMAR_VERSION {
            return Err(Error::GrammarVersion {
                found: record.grammar_version,
                supported: GRAMMAR_VERSION,
            });
        }
        let sample = record.into_sample();
        sample
            .validate(vocab_size, MAX_COMMAND_TOKENS, feature_dim)
            .map_err(|e| Error::Dataset { line: line_no, msg: e.to_string() })?;
        samples.push(sample);
    }
    Ok((header, samples))
}

/// Everything a training run needs, expressible as flat key=value text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train_data: PathBuf,
    pub val_data: PathBuf,
    #[serde(default)]
    pub test_data: Option<PathBuf>,
    pub model: ModelConfig,
    pub optim: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Std-dev of fresh Gaussian noise added to region features each epoch
    /// (train-time augmentation; 0 disables).
    #[serde(default)]
    pub feature_noise: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let encoder = crate::encoder::EncoderConfig {
            d: 64,
            layers: 4,
            heads: 4,
            ffn_mult: 2,
            vocab_size: crate::synthgen::vocab().len(),
            max_tokens: MAX_COMMAND_TOKENS,
            region_feature_dim: crate::synthgen::SceneSpec::default().feature_dim(),
            stream: Stream::Single,
            dual_split: crate::encoder::default_dual_split(4),
        };
        RunConfig {
            train_data: PathBuf::from("train.jsonl"),
            val_data: PathBuf::from("val.jsonl"),
            test_data: None,
            model: ModelConfig::new(encoder, crate::fusion::FusionKind::Rsd),
            optim: AdamConfig::default(),
            epochs: 20,
            batch_size: 16,
            feature_noise: 0.0,
            seed: 0,
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.optim.lr.is_finite() && self.optim.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("lr {} invalid", self.optim.lr)));
        }
        if !(self.feature_noise.is_finite() && self.feature_noise >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "feature_noise {} invalid",
                self.feature_noise
            )));
        }
        Ok(())
    }

    /// Applies one `section.key=value` assignment.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::InvalidConfig(format!("bad value {value:?} for {what}"));
        let enc = &mut self.model.encoder;
        match key {
            "data.train" => self.train_data = PathBuf::from(value),
            "data.val" => self.val_data = PathBuf::from(value),
            "data.test" => {
                self.test_data = (!value.is_empty()).then(|| PathBuf::from(value))
            }
            "encoder.d" => enc.d = value.parse().map_err(|_| bad(key))?,
            "encoder.layers" => {
                enc.layers = value.parse().map_err(|_| bad(key))?;
                enc.dual_split = crate::encoder::default_dual_split(enc.layers);
            }
            "encoder.heads" => enc.heads = value.parse().map_err(|_| bad(key))?,
            "encoder.ffn_mult" => enc.ffn_mult = value.parse().map_err(|_| bad(key))?,
            "encoder.vocab_size" => enc.vocab_size = value.parse().map_err(|_| bad(key))?,
            "encoder.max_tokens" => enc.max_tokens = value.parse().map_err(|_| bad(key))?,
            "encoder.region_feature_dim" => {
                enc.region_feature_dim = value.parse().map_err(|_| bad(key))?
            }
            "encoder.stream" => {
                enc.stream = match value {
                    "single" => Stream::Single,
                    "dual" => Stream::Dual,
                    _ => return Err(bad(key)),
                }
            }
            "encoder.dual_split" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| p.trim().parse().map_err(|_| bad(key)))
                    .collect::<Result<_>>()?;
                if parts.len() != 3 {
                    return Err(bad(key));
                }
                enc.dual_split = (parts[0], parts[1], parts[2]);
            }
            "fusion.kind" => self.model.fusion = value.parse()?,
            "fusion.routing_iters" => {
                self.model.routing_iters = value.parse().map_err(|_| bad(key))?
            }
            "optim.lr" => self.optim.lr = value.parse().map_err(|_| bad(key))?,
            "optim.beta1" => self.optim.beta1 = value.parse().map_err(|_| bad(key))?,
            "optim.beta2" => self.optim.beta2 = value.parse().map_err(|_| bad(key))?,
            "optim.eps" => self.optim.eps_hat = value.parse().map_err(|_| bad(key))?,
            "optim.weight_decay" => {
                self.optim.weight_decay = value.parse().map_err(|_| bad(key))?
            }
            "train.epochs" => self.epochs = value.parse().map_err(|_| bad(key))?,
            "train.batch_size" => self.batch_size = value.parse().map_err(|_| bad(key))?,
            "train.feature_noise" => {
                self.feature_noise = value.parse().map_err(|_| bad(key))?
            }
            "train.seed" => self.seed = value.parse().map_err(|_| bad(key))?,
            "out.dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(Error::InvalidConfig(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses flat key=value text ('#' comments, blank lines allowed).
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected key=value, got {raw:?}", i + 1))
            })?;
            self.apply_kv(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical key=value rendering (inverse of `apply_text`).
    pub fn to_text(&self) -> String {
        let enc = &self.model.encoder;
        let test_line = match &self.test_data {
            Some(p) => format!("data.test={}\n", p.display()),
            None => String::new(),
        };
        let stream = match enc.stream {
            Stream::Single => "single",
            Stream::Dual => "dual",
        };
        format!(
            "data.train={}\ndata.val={}\n{}\
             encoder.d={}\nencoder.layers={}\nencoder.heads={}\nencoder.ffn_mult={}\n\
             encoder.vocab_size={}\nencoder.max_tokens={}\nencoder.region_feature_dim={}\n\
             encoder.stream={}\nencoder.dual_split={},{},{}\n\
             fusion.kind={}\nfusion.routing_iters={}\n\
             optim.lr={}\noptim.beta1={}\noptim.beta2={}\noptim.eps={}\n\
             optim.weight_decay={}\n\
             train.epochs={}\ntrain.batch_size={}\ntrain.feature_noise={}\n\
             train.seed={}\nout.dir={}\n",
            self.train_data.display(),
            self.val_data.display(),
            test_line,
            enc.d,
            enc.layers,
            enc.heads,
            enc.ffn_mult,
            enc.vocab_size,
            enc.max_tokens,
            enc.region_feature_dim,
            stream,
            enc.dual_split.0,
            enc.dual_split.1,
            enc.dual_split.2,
            self.model.fusion,
            self.model.routing_iters,
            self.optim.lr,
            self.optim.beta1,
            self.optim.beta2,
            self.optim.eps_hat,
            self.optim.weight_decay,
            self.epochs,
            self.batch_size,
            self.feature_noise,
            self.seed,
            self.out_dir.display(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionKind;
    use crate::params::{init_params, InitScheme, ParamSpec};
    use crate::synthgen::{generate_dataset, SceneSpec};

    fn tmp_dir(tag: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("persist-{tag}-{}", std::process::id()));
        std::fs::create_dir_all(&d).unwrap();
        d
    }

    fn sample_store(seed: u64) -> ParamStore {
        init_params(
            &[
                ParamSpec::new("b.mat", &[3, 4], InitScheme::GlorotUniform),
                ParamSpec::new("a.vec", &[5], InitScheme::GlorotUniform),
                ParamSpec::new("c.bias", &[1, 4], InitScheme::Zeros),
            ],
            seed,
        )
        .unwrap()
    }

    fn meta() -> CheckpointMeta {
        let cfg = RunConfig::default();
        CheckpointMeta { model: cfg.model, seed: 17, step: 42 }
    }

    #[test]
    fn checkpoint_round_trip_bitwise() {
        let dir = tmp_dir("roundtrip");
        let path = dir.join("model.lfck");
        let store = sample_store(17);
        save_checkpoint(&store, &meta(), &path).unwrap();
        let (loaded, m) = load_checkpoint(&path).unwrap();
        assert_eq!(m, meta());
        assert_eq!(loaded.names(), store.names());
        for (name, t) in store.iter() {
            let l = loaded.get(name).unwrap();
            assert_eq!(l.shape(), t.shape());
            let a: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = l.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "{name} not bit-identical");
        }
        // Saving twice produces identical bytes.
        let path2 = dir.join("model2.lfck");
        save_checkpoint(&store, &meta(), &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn wrong_magic_names_found_bytes() {
        let dir = tmp_dir("magic");
        let path = dir.join("bad.lfck");
        std::fs::write(&path, b"NOPE rest of file").unwrap();
        match load_checkpoint(&path) {
            Err(Error::BadMagic { found }) => assert_eq!(&found, b"NOPE"),
            other => panic!("expected BadMagic, got {other:?}"),
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn truncation_reported_not_panicked() {
        let dir = tmp_dir("trunc");
        let path = dir.join("model.lfck");
        let store = sample_store(3);
        save_checkpoint(&store, &meta(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [3, 6, 10, bytes.len() / 2, bytes.len() - 5] {
            let short = dir.join(format!("cut{cut}.lfck"));
            std::fs::write(&short, &bytes[..cut]).unwrap();
            match load_checkpoint(&short) {
                Err(Error::CorruptCheckpoint(_)) | Err(Error::BadMagic { .. }) => {}
                other => panic!("cut at {cut}: expected corruption error, got {other:?}"),
            }
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn version_and_order_enforced() {
        let dir = tmp_dir("version");
        let path = dir.join("model.lfck");
        save_checkpoint(&sample_store(5), &meta(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99; // format_version
        let bad = dir.join("v99.lfck");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&bad), Err(Error::Incompatible(_))));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn generated_dataset_loads_clean() {
        let dir = tmp_dir("dataset");
        let path = dir.join("data.jsonl");
        let spec = SceneSpec { n_regions_min: 4, n_regions_max: 7, ..SceneSpec::default() };
        generate_dataset(&spec, 10, 21, &path).unwrap();
        let (header, samples) = load_dataset(&path).unwrap();
        assert_eq!(header.spec, spec);
        assert_eq!(samples.len(), 10);
        for (i, s) in samples.iter().enumerate() {
            assert_eq!(s.id, i as u64, "order preserved");
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn bad_box_cites_line_number() {
        let dir = tmp_dir("badbox");
        let path = dir.join("data.jsonl");
        let spec = SceneSpec { n_regions_min: 4, n_regions_max: 4, ..SceneSpec::default() };
        generate_dataset(&spec, 3, 8, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        // Corrupt the box of the second record (file line 3): x1 >= x2.
        lines[2] = lines[2].replacen("\"box\":[", "\"box\":[0.9,", 1);
        let broken: String = lines[2]
            .chars()
            .collect::<String>();
        // Drop one original coordinate to keep arity 4.
        let broken = {
            let idx = broken.find("\"box\":[0.9,").unwrap() + "\"box\":[0.9,".len();
            let rest = &broken[idx..];
            let comma = rest.match_indices(',').nth(2).unwrap().0;
            let close = rest.find(']').unwrap();
            format!("{}{}{}", &broken[..idx], &rest[..comma], &rest[close..])
        };
        lines[2] = broken;
        std::fs::write(&path, lines.join("\n") + "\n").unwrap();
        match load_dataset(&path) {
            Err(Error::Dataset { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected Dataset error, got {other:?}"),
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn grammar_version_mismatch_rejected() {
        let dir = tmp_dir("grammar");
        let path = dir.join("data.jsonl");
        let spec = SceneSpec { n_regions_min: 4, n_regions_max: 4, ..SceneSpec::default() };
        generate_dataset(&spec, 2, 8, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let text = text.replacen("\"grammar_version\":1", "\"grammar_version\":9", 1);
        std::fs::write(&path, text).unwrap();
        match load_dataset(&path) {
            Err(Error::GrammarVersion { found, supported }) => {
                assert_eq!(found, 9);
                assert_eq!(supported, GRAMMAR_VERSION);
            }
            other => panic!("expected GrammarVersion, got {other:?}"),
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn run_config_text_round_trip_and_overrides() {
        let mut cfg = RunConfig::default();
        cfg.apply_text(
            "# comment\n\
             encoder.d=32\n\
             encoder.layers = 3\n\
             fusion.kind=DynamicRouting\n\
             fusion.routing_iters=5\n\
             optim.lr=0.01\n\
             train.epochs=2\n\
             train.seed=77\n",
        )
        .unwrap();
        assert_eq!(cfg.model.encoder.d, 32);
        assert_eq!(cfg.model.encoder.layers, 3);
        assert_eq!(cfg.model.fusion, FusionKind::DynamicRouting);
        assert_eq!(cfg.model.routing_iters, 5);
        assert_eq!(cfg.optim.lr, 0.01);
        assert_eq!(cfg.epochs, 2);
        assert_eq!(cfg.seed, 77);
        cfg.validate().unwrap();

        // to_text -> apply_text is the identity.
        let mut again = RunConfig::default();
        again.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(cfg, again);

        // Later assignments win (flag-override semantics).
        again.apply_kv("encoder.d", "16").unwrap();
        assert_eq!(again.model.encoder.d, 16);
    }

    #[test]
    fn unknown_config_key_rejected() {
        let mut cfg = RunConfig::default();
        assert!(matches!(
            cfg.apply_kv("encoder.window", "5"),
            Err(Error::InvalidConfig(_))
        ));
        assert!(cfg.apply_text("notakv\n").is_err());
        assert!(cfg.apply_kv("encoder.stream", "triple").is_err());
    }

    #[test]
    fn default_config_is_valid_and_matches_generator() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.model.encoder.vocab_size, crate::synthgen::vocab().len());
        assert_eq!(
            cfg.model.encoder.region_feature_dim,
            SceneSpec::default().feature_dim()
        );
        assert!(cfg.model.encoder.max_tokens >= MAX_COMMAND_TOKENS);
    }
}
