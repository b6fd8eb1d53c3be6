//! Binary checkpoints: model, optimizer, RNG position, and schedule step.
//!
//! Layout (all integers little-endian): magic `XHVD`, format version, step
//! counter, the ChaCha seed/stream/word-position triple, the model and train
//! configs as length-prefixed JSON, then three entry tables (parameters,
//! first moments, second moments). Every entry is (name, dtype code, rank,
//! dims, raw little-endian values), so a load→save round trip is
//! byte-identical and resumed training continues bit-exactly.

use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::Adam;
use super::{TrainConfig, Trainer};
use crate::dtype::{Dtype, Real};
use crate::error::DataError;
use crate::model::{ModelConfig, XhvedModel};

const MAGIC: &[u8; 4] = b"XHVD";
const FORMAT_VERSION: u32 = 1;

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

fn put_entry<T: Real>(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[T]) {
    put_str(out, name);
    out.push(T::DTYPE.code());
    out.push(dims.len() as u8);
    for d in dims {
        put_u64(out, *d as u64);
    }
    for v in data {
        v.write_le(out);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail<V>(&self, reason: impl Into<String>) -> Result<V, DataError> {
        Err(DataError::BadCheckpoint {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DataError> {
        if self.pos + n > self.buf.len() {
            return self.fail(format!(
                "truncated while reading {what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, DataError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn u128(&mut self, what: &str) -> Result<u128, DataError> {
        Ok(u128::from_le_bytes(self.take(16, what)?.try_into().expect("16 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64, DataError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self, what: &str) -> Result<String, DataError> {
        let n = self.u64(what)? as usize;
        if n > self.buf.len() {
            return self.fail(format!("implausible {what} length {n}"));
        }
        let bytes = self.take(n, what)?;
        match std::str::from_utf8(bytes) {
            Ok(s) => Ok(s.to_string()),
            Err(_) => self.fail(format!("{what} is not valid UTF-8")),
        }
    }

    /// Read one entry, checking the dtype code against `E`.
    fn entry<E: Real>(&mut self, what: &str) -> Result<(String, Vec<usize>, Vec<E>), DataError> {
        let name = self.str(&format!("{what} name"))?;
        let code = self.u8("dtype code")?;
        match Dtype::from_code(code) {
            None => return self.fail(format!("unknown dtype code {code} for entry {name}")),
            Some(d) if d != E::DTYPE => {
                return self.fail(format!(
                    "entry {name} stores {d:?} but {:?} was requested",
                    E::DTYPE
                ))
            }
            Some(_) => {}
        }
        let rank = self.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u64("dimension")? as usize);
        }
        let numel: usize = dims.iter().product();
        let bytes = self.take(numel * E::WIDTH, &format!("data of {name}"))?;
        let data = bytes.chunks_exact(E::WIDTH).map(E::read_le).collect();
        Ok((name, dims, data))
    }
}

/// Serialize the full trainer state (the log is an external CSV artifact and
/// is not part of the checkpoint).
pub fn save_checkpoint<T: Real>(trainer: &Trainer<T>, path: &Path) -> Result<(), DataError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u64(&mut out, trainer.step as u64);

    out.extend_from_slice(&trainer.rng.get_seed());
    out.extend_from_slice(&trainer.rng.get_word_pos().to_le_bytes());
    put_u64(&mut out, trainer.rng.get_stream());

    let model_json = serde_json::to_string(&trainer.model.config).expect("config serializes");
    put_str(&mut out, &model_json);
    let train_json = serde_json::to_string(&trainer.train_config).expect("config serializes");
    put_str(&mut out, &train_json);

    put_u64(&mut out, trainer.model.params.len() as u64);
    for (name, p) in trainer.model.params.iter() {
        put_entry(&mut out, name, &p.shape, &p.data);
    }

    let opt = &trainer.opt;
    for v in [opt.learning_rate, opt.beta1, opt.beta2, opt.eps, opt.clip_norm] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    put_u64(&mut out, opt.t);
    for moments in [&opt.m, &opt.v] {
        put_u64(&mut out, moments.len() as u64);
        for (name, data) in moments {
            put_entry(&mut out, name, &[data.len()], data);
        }
    }

    std::fs::write(path, &out).map_err(|e| DataError::io(path, e))
}

/// Restore a trainer. The element type must match what was saved.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Trainer<T>, DataError> {
    let buf = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0, path };

    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return r.fail(format!("bad magic {magic:?}, expected {MAGIC:?}"));
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return r.fail(format!(
            "unsupported format version {version}, this build reads {FORMAT_VERSION}"
        ));
    }
    let step = r.u64("step")? as usize;

    let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().expect("32 bytes");
    let word_pos = r.u128("rng word position")?;
    let stream = r.u64("rng stream")?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let model_json = r.str("model config")?;
    let model_config: ModelConfig = match serde_json::from_str(&model_json) {
        Ok(c) => c,
        Err(e) => return r.fail(format!("model config: {e}")),
    };
    let train_json = r.str("train config")?;
    let train_config: TrainConfig = match serde_json::from_str(&train_json) {
        Ok(c) => c,
        Err(e) => return r.fail(format!("train config: {e}")),
    };

    let mut model: XhvedModel<T> = XhvedModel::new(model_config);
    let n_params = r.u64("parameter count")? as usize;
    if n_params != model.params.len() {
        return r.fail(format!(
            "checkpoint has {n_params} parameters, the configured model has {}",
            model.params.len()
        ));
    }
    for _ in 0..n_params {
        let (name, dims, data) = r.entry::<T>("parameter")?;
        if !model.params.contains(&name) {
            return r.fail(format!("checkpoint parameter {name} is not part of the model"));
        }
        let p = model.params.get_mut(&name);
        if p.shape != dims {
            return r.fail(format!(
                "parameter {name} has shape {dims:?} in the checkpoint but {:?} in the model",
                p.shape
            ));
        }
        p.data = data;
    }

    let mut opt = Adam::new(r.f64("learning rate")?);
    opt.beta1 = r.f64("beta1")?;
    opt.beta2 = r.f64("beta2")?;
    opt.eps = r.f64("epsilon")?;
    opt.clip_norm = r.f64("clip norm")?;
    opt.t = r.u64("optimizer step count")?;
    for which in 0..2 {
        let n = r.u64("moment count")? as usize;
        for _ in 0..n {
            let (name, dims, data) = r.entry::<f64>("moment")?;
            if !model.params.contains(&name) {
                return r.fail(format!("moment entry {name} is not a model parameter"));
            }
            if dims != [model.params.get(&name).data.len()] {
                return r.fail(format!("moment entry {name} has the wrong length"));
            }
            let slot = if which == 0 { &mut opt.m } else { &mut opt.v };
            slot.insert(name, data);
        }
    }
    if r.pos != buf.len() {
        return r.fail(format!("{} trailing bytes after the final entry", buf.len() - r.pos));
    }

    Ok(Trainer {
        model,
        train_config,
        opt,
        rng,
        step,
        log: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom, PhantomSpec, Volume};

    fn tiny_trainer(seed: u64) -> (Trainer<f32>, Vec<Volume<f32>>) {
        let mc = ModelConfig::tiny([8, 8, 8], seed);
        let tc = TrainConfig {
            pretrain_steps: 1,
            train_steps: 64,
            seed,
            ..TrainConfig::default()
        };
        let dataset = vec![
            generate_phantom(&PhantomSpec::sized(8, seed ^ 0xA)),
            generate_phantom(&PhantomSpec::sized(8, seed ^ 0xB)),
        ];
        (Trainer::new(mc, tc), dataset)
    }

    #[test]
    fn a_round_trip_restores_every_piece_of_state_bit_exactly() {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("state.xhvd");
        let (mut tr, dataset) = tiny_trainer(31);
        for _ in 0..3 {
            tr.step_once(&dataset).expect("step");
        }
        save_checkpoint(&tr, &path).expect("save");
        let back: Trainer<f32> = load_checkpoint(&path).expect("load");
        assert_eq!(back.step, tr.step);
        assert_eq!(back.opt.t, tr.opt.t);
        assert_eq!(back.rng.get_word_pos(), tr.rng.get_word_pos(), "rng resumes in place");
        for name in tr.model.params.names() {
            assert_eq!(
                tr.model.params.fingerprint(name),
                back.model.params.fingerprint(name),
                "parameter {name} changed across the round trip"
            );
        }
        for (a, b) in tr.opt.m.iter().zip(back.opt.m.iter()) {
            assert_eq!(a.0, b.0, "moment order preserved");
            assert!(a.1.iter().zip(b.1).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn save_load_save_produces_byte_identical_files() {
        let dir = tempfile::tempdir().expect("tempdir");
        let p1 = dir.path().join("a.xhvd");
        let p2 = dir.path().join("b.xhvd");
        let (mut tr, dataset) = tiny_trainer(32);
        for _ in 0..2 {
            tr.step_once(&dataset).expect("step");
        }
        save_checkpoint(&tr, &p1).expect("save");
        let back: Trainer<f32> = load_checkpoint(&p1).expect("load");
        save_checkpoint(&back, &p2).expect("save again");
        let (b1, b2) = (std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(b1, b2, "round-tripped checkpoint must serialize identically");
    }

    #[test]
    fn corrupted_magic_and_version_and_truncation_are_rejected_distinctly() {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("c.xhvd");
        let (tr, _) = tiny_trainer(33);
        save_checkpoint(&tr, &path).expect("save");
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'Y';
        std::fs::write(&path, &bad).unwrap();
        let Err(err) = load_checkpoint::<f32>(&path) else {
            panic!("a corrupted magic must not load")
        };
        assert!(err.to_string().contains("magic"), "got: {err}");

        let mut bad = good.clone();
        bad[4] = 9;
        std::fs::write(&path, &bad).unwrap();
        let Err(err) = load_checkpoint::<f32>(&path) else {
            panic!("an unknown format version must not load")
        };
        assert!(err.to_string().contains("version"), "got: {err}");

        std::fs::write(&path, &good[..good.len() / 2]).unwrap();
        let Err(err) = load_checkpoint::<f32>(&path) else {
            panic!("a truncated file must not load")
        };
        assert!(err.to_string().contains("truncated"), "got: {err}");
    }

    #[test]
    fn element_type_mismatches_are_rejected() {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("d.xhvd");
        let (tr, _) = tiny_trainer(34);
        save_checkpoint(&tr, &path).expect("save");
        let Err(err) = load_checkpoint::<f64>(&path) else {
            panic!("a dtype mismatch must not load")
        };
        assert!(
            err.to_string().contains("F32"),
            "loading an f32 checkpoint as f64 must name the stored dtype: {err}"
        );
    }
}
