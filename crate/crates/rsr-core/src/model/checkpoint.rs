//! Bit-exact binary checkpoint format.
//!
//! Layout: magic `RSR1` | format version u32 LE | config as 6 x u32 LE
//! (d_model, n_layers, n_heads, d_ff, max_seq_len, vocab_size) | vocab
//! block (u32 entry count, then per entry: u32 byte length, UTF-8 word
//! bytes, u64 frequency) | tensors in the order documented on
//! [`Weights::tensors`], each as u32 rows, u32 cols, then row-major
//! f64 LE values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Checkpoint, ModelConfig, Vocab, Weights};
use crate::numerics::Matrix;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RSR1";
pub const FORMAT_VERSION: u32 = 1;

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for v in [
        ckpt.config.d_model,
        ckpt.config.n_layers,
        ckpt.config.n_heads,
        ckpt.config.d_ff,
        ckpt.config.max_seq_len,
        ckpt.config.vocab_size,
    ] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    w.write_all(&(ckpt.vocab.len() as u32).to_le_bytes())?;
    for (word, &freq) in ckpt.vocab.words().iter().zip(ckpt.vocab.freqs()) {
        w.write_all(&(word.len() as u32).to_le_bytes())?;
        w.write_all(word.as_bytes())?;
        w.write_all(&freq.to_le_bytes())?;
    }
    for t in ckpt.weights.tensors() {
        w.write_all(&(t.rows() as u32).to_le_bytes())?;
        w.write_all(&(t.cols() as u32).to_le_bytes())?;
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint("truncated checkpoint file".into()))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.bytes(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.bytes(8)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    fn matrix(&mut self, max_elems: usize) -> Result<Matrix> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        if rows.saturating_mul(cols) > max_elems {
            return Err(Error::Checkpoint(format!(
                "declared tensor size {}x{} exceeds plausible bounds",
                rows, cols
            )));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(self.f64()?);
        }
        Matrix::from_vec(rows, cols, data)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = Reader {
        inner: BufReader::new(File::open(path)?),
    };
    let magic = r.bytes(4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (expected {})",
            version, FORMAT_VERSION
        )));
    }
    let d_model = r.u32()? as usize;
    let n_layers = r.u32()? as usize;
    let n_heads = r.u32()? as usize;
    let d_ff = r.u32()? as usize;
    let max_seq_len = r.u32()? as usize;
    let vocab_size = r.u32()? as usize;
    let config = ModelConfig {
        d_model,
        n_layers,
        n_heads,
        d_ff,
        max_seq_len,
        vocab_size,
    };
    config.validate()?;

    let count = r.u32()? as usize;
    if count != vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocab block has {} entries, config says {}",
            count, vocab_size
        )));
    }
    let mut words = Vec::with_capacity(count);
    let mut freqs = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        if len > 1 << 20 {
            return Err(Error::Checkpoint("implausible word length".into()));
        }
        let bytes = r.bytes(len)?;
        let word = String::from_utf8(bytes)
            .map_err(|_| Error::Checkpoint("vocab word is not valid UTF-8".into()))?;
        words.push(word);
        freqs.push(r.u64()?);
    }
    let vocab = Vocab::from_parts(words, freqs);

    // Same fixed order as Weights::tensors.
    let max_elems = vocab_size.max(d_ff).max(d_model).max(max_seq_len).pow(2);
    let mut weights = Weights::zeros(&config);
    for t in weights.tensors_mut() {
        *t = r.matrix(max_elems)?;
    }

    let ckpt = Checkpoint {
        config,
        vocab,
        weights,
    };
    ckpt.validate()?;
    Ok(ckpt)
}
