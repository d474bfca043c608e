//! Binary checkpoints: `"SSMCKPT1"`, a `u32` tensor count, then per tensor a
//! `u32` name length, the UTF-8 name, `u32` rows, `u32` cols and the
//! row-major little-endian `f64` payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nullspace::{CovarianceBank, ProjectorFlags, ProjectorSet};
use crate::ssm::{Backbone, MambaBlockParams, SsmParams};
use crate::trainer::TrainState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SSMCKPT1";

/// Ordered list of named matrices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Matrix)>,
}

fn row(v: &[f64]) -> Matrix {
    Matrix::from_vec(1, v.len(), v.to_vec()).expect("length matches")
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    fn need(&self, name: &str) -> Result<&Matrix> {
        self.get(name)
            .ok_or_else(|| Error::format(0, format!("checkpoint has no tensor `{name}`")))
    }

    fn push(&mut self, name: String, m: Matrix) {
        self.tensors.push((name, m));
    }

    /// Model, heads, covariance banks and projectors of a run.
    pub fn from_state(state: &TrainState) -> Self {
        let mut c = Self::default();
        for (k, b) in state.backbone.blocks.iter().enumerate() {
            c.push(format!("block{k}.embed"), b.embed.clone());
            c.push(format!("block{k}.A"), b.ssm.a.clone());
            c.push(format!("block{k}.W_B"), b.ssm.w_b.clone());
            c.push(format!("block{k}.W_C"), b.ssm.w_c.clone());
            c.push(format!("block{k}.W_delta"), b.ssm.w_delta.clone());
            c.push(format!("block{k}.delta_bias"), row(&b.ssm.delta_bias));
            c.push(format!("block{k}.W_out"), b.w_out.clone());
            if let Some(g) = &b.gate {
                c.push(format!("block{k}.gate"), g.clone());
            }
        }
        for (t, (h, cls)) in state.heads.iter().zip(&state.classes).enumerate() {
            c.push(format!("head{t}"), h.clone());
            let ids: Vec<f64> = cls.iter().map(|&v| v as f64).collect();
            c.push(format!("head{t}.classes"), row(&ids));
        }
        for (k, bank) in state.banks.iter().enumerate() {
            c.push(format!("bank{k}.q1"), bank.q1.clone());
            c.push(format!("bank{k}.q2"), bank.q2.clone());
            c.push(format!("bank{k}.q3"), bank.q3.clone());
            c.push(format!("bank{k}.q_out"), bank.q_out.clone());
            let rows: Vec<f64> = bank.rows_seen.iter().map(|&v| v as f64).collect();
            c.push(format!("bank{k}.rows_seen"), row(&rows));
        }
        for (k, p) in state.projectors.iter().flatten().enumerate() {
            c.push(format!("proj{k}.h1"), p.h1.clone());
            c.push(format!("proj{k}.h2"), p.h2.clone());
            c.push(format!("proj{k}.h3"), p.h3.clone());
            c.push(format!("proj{k}.h_out"), p.h_out.clone());
            let mut meta = vec![p.eta];
            meta.extend(p.flags.as_array().iter().map(|&b| if b { 1.0 } else { 0.0 }));
            meta.extend(p.null_ranks.iter().map(|&r| r as f64));
            c.push(format!("proj{k}.meta"), row(&meta));
        }
        c
    }

    /// Rebuilds the run state written by [`Checkpoint::from_state`].
    pub fn to_state(&self) -> Result<TrainState> {
        let count = |prefix: &str, suffix: &str| {
            (0..)
                .take_while(|k| self.get(&format!("{prefix}{k}{suffix}")).is_some())
                .count()
        };
        let as_usize = |m: &Matrix| m.as_slice().iter().map(|&v| v as usize).collect::<Vec<_>>();

        let mut blocks = Vec::new();
        for k in 0..count("block", ".embed") {
            let p = |s: &str| self.need(&format!("block{k}.{s}")).cloned();
            blocks.push(MambaBlockParams {
                embed: p("embed")?,
                ssm: SsmParams {
                    a: p("A")?,
                    w_b: p("W_B")?,
                    w_c: p("W_C")?,
                    w_delta: p("W_delta")?,
                    delta_bias: p("delta_bias")?.into_vec(),
                },
                w_out: p("W_out")?,
                gate: self.get(&format!("block{k}.gate")).cloned(),
            });
        }
        let backbone = Backbone { blocks };
        backbone.validate()?;

        let n_heads = count("head", "");
        let mut heads = Vec::with_capacity(n_heads);
        let mut classes = Vec::with_capacity(n_heads);
        for t in 0..n_heads {
            heads.push(self.need(&format!("head{t}"))?.clone());
            classes.push(as_usize(self.need(&format!("head{t}.classes"))?));
        }

        let mut banks = Vec::new();
        for k in 0..count("bank", ".q1") {
            let q = |s: &str| self.need(&format!("bank{k}.{s}")).cloned();
            let rows = as_usize(&q("rows_seen")?);
            if rows.len() != 4 {
                return Err(Error::format(0, format!("bank{k}.rows_seen must have 4 entries")));
            }
            banks.push(CovarianceBank {
                q1: q("q1")?,
                q2: q("q2")?,
                q3: q("q3")?,
                q_out: q("q_out")?,
                rows_seen: [rows[0] as u64, rows[1] as u64, rows[2] as u64, rows[3] as u64],
            });
        }

        let n_proj = count("proj", ".h1");
        let projectors = if n_proj == 0 {
            None
        } else {
            let mut v = Vec::with_capacity(n_proj);
            for k in 0..n_proj {
                let h = |s: &str| self.need(&format!("proj{k}.{s}")).cloned();
                let meta = h("meta")?.into_vec();
                if meta.len() != 10 {
                    return Err(Error::format(0, format!("proj{k}.meta must have 10 entries")));
                }
                let f = |i: usize| meta[i] != 0.0;
                v.push(ProjectorSet {
                    h1: h("h1")?,
                    h2: h("h2")?,
                    h3: h("h3")?,
                    h_out: h("h_out")?,
                    eta: meta[0],
                    flags: ProjectorFlags::from_array([f(1), f(2), f(3), f(4), f(5)]),
                    null_ranks: [meta[6] as usize, meta[7] as usize, meta[8] as usize, meta[9] as usize],
                });
            }
            Some(v)
        };

        Ok(TrainState {
            backbone,
            heads,
            classes,
            banks,
            projectors,
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let u32_of = |v: usize, what: &str| {
            u32::try_from(v).map_err(|_| Error::config(format!("{what} {v} does not fit in u32")))
        };
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&u32_of(self.tensors.len(), "tensor count")?.to_le_bytes());
        for (name, m) in &self.tensors {
            out.extend_from_slice(&u32_of(name.len(), "name length")?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&u32_of(m.rows(), "rows")?.to_le_bytes());
            out.extend_from_slice(&u32_of(m.cols(), "cols")?.to_le_bytes());
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            if bytes.len() - pos < n {
                return Err(Error::format(pos as u64, format!("truncated while reading {what}")));
            }
            let s = &bytes[pos..pos + n];
            pos += n;
            Ok(s)
        };
        if take(8, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "bad magic, not a checkpoint"));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
        let n = u32_at(take(4, "tensor count")?);
        let mut tensors = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = u32_at(take(4, "name length")?);
            let name = std::str::from_utf8(take(len, "name")?)
                .map_err(|_| Error::format(0, "tensor name is not UTF-8"))?
                .to_string();
            let rows = u32_at(take(4, "rows")?);
            let cols = u32_at(take(4, "cols")?);
            let count = rows
                .checked_mul(cols)
                .and_then(|c| c.checked_mul(8))
                .ok_or_else(|| Error::format(0, format!("tensor `{name}` size overflows")))?;
            let payload = take(count, "payload")?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Matrix::from_vec(rows, cols, data)?));
        }
        if pos != bytes.len() {
            return Err(Error::format(pos as u64, format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Self { tensors })
    }
}

/// Writes through a temporary sibling and renames, so a crash never leaves
/// a half-written checkpoint in place.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.encode()?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchgen::{generate, BenchSpec};
    use crate::ssm::ModelDims;
    use crate::trainer::{run_task_sequence, TrainConfig};

    fn trained_state(gated: bool) -> TrainState {
        let dims = ModelDims {
            d_raw: 4,
            d_model: 4,
            d_state: 2,
            d_delta: 4,
            d_out: 3,
            n_blocks: 2,
            gated,
        };
        let tasks = generate(&BenchSpec {
            tasks: 2,
            classes_per_task: 2,
            train_per_class: 3,
            test_per_class: 2,
            seq_len: 3,
            d_raw: 4,
            ..BenchSpec::default()
        })
        .unwrap();
        let cfg = TrainConfig { epochs: 1, dims, ..TrainConfig::default() };
        run_task_sequence(&cfg, &tasks).unwrap().state
    }

    #[test]
    fn state_round_trip() {
        for gated in [false, true] {
            let state = trained_state(gated);
            let ck = Checkpoint::from_state(&state);
            let back = Checkpoint::decode(&ck.encode().unwrap()).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_state().unwrap(), state);
        }
    }

    #[test]
    fn header_layout() {
        let ck = Checkpoint {
            tensors: vec![("w".into(), Matrix::from_rows(&[[1.5, -2.0]]))],
        };
        let b = ck.encode().unwrap();
        assert_eq!(&b[..8], CHECKPOINT_MAGIC);
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(b[16], b'w');
        assert_eq!(&b[17..21], &1u32.to_le_bytes());
        assert_eq!(&b[21..25], &2u32.to_le_bytes());
        assert_eq!(&b[25..33], &1.5f64.to_le_bytes());
        assert_eq!(b.len(), 41);
    }

    #[test]
    fn corrupt_input_rejected() {
        let b = Checkpoint::from_state(&trained_state(false)).encode().unwrap();
        for cut in [0, 5, 10, 30, b.len() - 3] {
            assert!(matches!(Checkpoint::decode(&b[..cut]), Err(Error::Format { .. })));
        }
        let mut bad = b.clone();
        bad[3] = b'x';
        assert!(Checkpoint::decode(&bad).is_err());
        let mut extra = b;
        extra.extend_from_slice(&[0, 0]);
        assert!(Checkpoint::decode(&extra).is_err());
    }

    #[test]
    fn atomic_save() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let ck = Checkpoint::from_state(&trained_state(false));
        save_checkpoint(&path, &ck).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ck);
        assert!(!path.with_extension("tmp").exists());
    }
}
