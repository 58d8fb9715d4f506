//! Binary checkpoint container.
//!
//! Layout, little-endian throughout:
//!   magic "SMCK", u32 version,
//!   u32 config length + canonical config text,
//!   f64 time scale, 32-byte RNG seed, u128 RNG word position, u32 epoch,
//!   u32 feature width, u32 tensor count,
//!   then per tensor: u32 name length, name bytes, u32 rank, u32 dims[rank],
//!   f64 payload.
//!
//! Reload rebuilds the model from the embedded config and overwrites every
//! parameter, so forward outputs reproduce bit-identically.

use super::{Model, Trained};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"SMCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: PipelineConfig,
    pub time_scale: f64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub epoch: u32,
    pub feature_dim: u32,
}

pub fn save_checkpoint(path: &Path, trained: &Trained) -> Result<()> {
    let model = &trained.model;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    let cfg_text = model.config.to_canonical_text();
    bytes.extend_from_slice(&(cfg_text.len() as u32).to_le_bytes());
    bytes.extend_from_slice(cfg_text.as_bytes());
    bytes.extend_from_slice(&model.head.time_scale.to_le_bytes());
    bytes.extend_from_slice(&trained.train_rng.get_seed());
    bytes.extend_from_slice(&trained.train_rng.get_word_pos().to_le_bytes());
    bytes.extend_from_slice(&(trained.epoch_logs.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&(model.feature_dim as u32).to_le_bytes());
    bytes.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (_, name, tensor) in model.params.iter() {
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.extend_from_slice(&(tensor.shape.len() as u32).to_le_bytes());
        for &dim in &tensor.shape {
            bytes.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in &tensor.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{}: truncated at byte {}",
                self.path, self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Loads a checkpoint, returning the reconstructed model and the restored
/// training RNG (positioned exactly where training left it).
pub fn load_checkpoint(path: &Path) -> Result<(Model, Checkpoint, ChaCha12Rng)> {
    let mut file =
        std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let display = path.display().to_string();
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path: &display,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint(format!("{display}: bad magic")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{display}: unsupported version {version}"
        )));
    }
    let cfg_len = r.u32()? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| Error::Checkpoint(format!("{display}: config is not UTF-8")))?;
    let mut config = PipelineConfig::default();
    config.apply_text(cfg_text)?;
    let time_scale = r.f64()?;
    let mut rng_seed = [0u8; 32];
    rng_seed.copy_from_slice(r.take(32)?);
    let rng_word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
    let epoch = r.u32()?;
    let feature_dim = r.u32()?;

    let mut model = Model::new(&config, feature_dim as usize)?;
    model.head.set_time_scale(time_scale)?;

    let count = r.u32()? as usize;
    if count != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "{display}: tensor count {count} does not match model layout {}",
            model.params.len()
        )));
    }
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint(format!("{display}: tensor name is not UTF-8")))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let numel: usize = dims.iter().product();
        let id = model.params.id(&name).ok_or_else(|| {
            Error::Checkpoint(format!("{display}: unknown tensor {name:?}"))
        })?;
        let tensor = model.params.get_mut(id);
        if tensor.shape != dims {
            return Err(Error::Checkpoint(format!(
                "{display}: tensor {name:?} has shape {dims:?}, model expects {:?}",
                tensor.shape
            )));
        }
        for i in 0..numel {
            tensor.data[i] = r.f64()?;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{display}: {} trailing bytes",
            bytes.len() - r.pos
        )));
    }

    let mut rng = ChaCha12Rng::from_seed(rng_seed);
    rng.set_word_pos(rng_word_pos);
    let ck = Checkpoint {
        config,
        time_scale,
        rng_seed,
        rng_word_pos,
        epoch,
        feature_dim,
    };
    Ok((model, ck, rng))
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny_config;
    use super::super::{evaluate, forward_slide, train};
    use super::*;
    use crate::dataio::{generate_synthetic_cohort, load_bag, SyntheticSpec};

    #[test]
    fn save_load_round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.set("epochs", "2").unwrap();
        let spec = SyntheticSpec {
            n_slides: 8,
            patches_min: 6,
            patches_max: 10,
            d: cfg.synth_dim,
            phenotypes: 2,
            alphas: vec![5.0, 50.0],
            betas: vec![4.0, 4.0],
            censoring: 0.2,
            seed: 9,
        };
        let manifest = generate_synthetic_cohort(&spec, dir.path()).unwrap();
        let trained = train(&cfg, &manifest, None).unwrap();
        let ck_path = dir.path().join("model.smck");
        save_checkpoint(&ck_path, &trained).unwrap();

        let (loaded, ck, rng) = load_checkpoint(&ck_path).unwrap();
        assert_eq!(ck.epoch, 2);
        assert_eq!(ck.config, trained.model.config);
        assert_eq!(loaded.head.time_scale, trained.model.head.time_scale);
        assert_eq!(rng.get_word_pos(), trained.train_rng.get_word_pos());

        // bit-identical parameters and forward outputs
        for (id, name, t) in trained.model.params.iter() {
            let lt = loaded.params.get(loaded.params.id(name).unwrap_or(id));
            assert_eq!(t.data, lt.data, "{name}");
        }
        let bag = load_bag(&manifest.entries[0]).unwrap();
        let a = forward_slide(&trained.model, &bag, None).unwrap();
        let b = forward_slide(&loaded, &bag, None).unwrap();
        assert_eq!(a.tape.value(a.z), b.tape.value(b.z));

        // identical evaluation metrics
        let ma = evaluate(&trained.model, &manifest).unwrap();
        let mb = evaluate(&loaded, &manifest).unwrap();
        assert_eq!(ma.report(), mb.report());

        // identical bytes when saved again
        let ck2 = dir.path().join("model2.smck");
        let retrained = super::super::Trained {
            model: loaded,
            epoch_logs: trained.epoch_logs.clone(),
            train_rng: rng,
        };
        save_checkpoint(&ck2, &retrained).unwrap();
        assert_eq!(
            std::fs::read(&ck_path).unwrap(),
            std::fs::read(&ck2).unwrap()
        );
    }

    #[test]
    fn rejects_corrupted_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.smck");
        std::fs::write(&p, b"not a checkpoint").unwrap();
        assert!(load_checkpoint(&p).is_err());
    }
}
