//! Versioned binary checkpoints: a header of little-endian `u64` fields,
//! student and teacher parameter blocks, then prototype records.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{PrclError, Result};
use crate::network::{ModelParams, NetShape};
use crate::prototypes::{PrototypeBank, PrototypeStrategy};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PRCLCKPT";
pub const CHECKPOINT_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub embed_dim: usize,
    pub num_classes: usize,
    pub features: usize,
    pub hidden: usize,
    pub grid: usize,
    pub iteration: usize,
}

impl CheckpointHeader {
    pub fn shape(&self) -> NetShape {
        NetShape {
            features: self.features,
            hidden: self.hidden,
            classes: self.num_classes,
            embed: self.embed_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub bank: PrototypeBank,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let h = &self.header;
        if self.student.shape() != h.shape() || self.teacher.shape() != h.shape() {
            return Err(PrclError::contract("parameter shapes disagree with checkpoint header"));
        }
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [
            CHECKPOINT_VERSION,
            h.embed_dim as u64,
            h.num_classes as u64,
            h.features as u64,
            h.hidden as u64,
            h.grid as u64,
            h.iteration as u64,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.student.write_le(&mut buf)?;
        self.teacher.write_le(&mut buf)?;
        self.bank.write_records(&mut buf)?;
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, bytes.len())?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(PrclError::Parse { offset: 0, msg: "not a checkpoint file".into() });
        }
        let mut field = || -> Result<u64> {
            let mut b = [0u8; 8];
            read_exact(&mut r, &mut b, bytes.len())?;
            Ok(u64::from_le_bytes(b))
        };
        let version = field()?;
        if version != CHECKPOINT_VERSION {
            return Err(PrclError::Incompatible(format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let header = CheckpointHeader {
            embed_dim: field()? as usize,
            num_classes: field()? as usize,
            features: field()? as usize,
            hidden: field()? as usize,
            grid: field()? as usize,
            iteration: field()? as usize,
        };
        let mut r = &bytes[8 + 7 * 8..];
        let parse = |e: PrclError, r: &[u8]| match e {
            PrclError::Io(_) => PrclError::Parse {
                offset: (bytes.len() - r.len()) as u64,
                msg: "truncated checkpoint".into(),
            },
            other => other,
        };
        let student = ModelParams::read_le(&mut r, header.shape()).map_err(|e| parse(e, r))?;
        let teacher = ModelParams::read_le(&mut r, header.shape()).map_err(|e| parse(e, r))?;
        let bank = PrototypeBank::read_records(&mut r, PrototypeStrategy::Gdp, header.num_classes, header.embed_dim)
            .map_err(|e| parse(e, r))?;
        if !r.is_empty() {
            return Err(PrclError::Parse {
                offset: (bytes.len() - r.len()) as u64,
                msg: "trailing bytes in checkpoint".into(),
            });
        }
        Ok(Checkpoint { header, student, teacher, bank })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8], total: usize) -> Result<()> {
    if r.len() < buf.len() {
        return Err(PrclError::Parse {
            offset: (total - r.len()) as u64,
            msg: "truncated checkpoint header".into(),
        });
    }
    buf.copy_from_slice(&r[..buf.len()]);
    *r = &r[buf.len()..];
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob_embed::ProbRepr;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let header = CheckpointHeader { embed_dim: 3, num_classes: 4, features: 2, hidden: 5, grid: 8, iteration: 77 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut bank = PrototypeBank::new(PrototypeStrategy::Gdp, 4, 3);
        bank.absorb(1, &ProbRepr::new(vec![1.0, 2.0, 3.0], vec![0.1, 0.2, 0.3]).unwrap(), 0.0).unwrap();
        Checkpoint {
            header,
            student: ModelParams::init(header.shape(), &mut rng),
            teacher: ModelParams::init(header.shape(), &mut rng),
            bank,
        }
    }

    #[test]
    fn round_trip() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
    }

    #[test]
    fn version_and_truncation_are_refused() {
        let mut bytes = sample().to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(PrclError::Parse { .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..30]), Err(PrclError::Parse { .. })));
        bytes[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(PrclError::Incompatible(_))));
    }
}
