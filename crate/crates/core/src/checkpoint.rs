//! Little-endian binary dumps of models and memories.
//!
//! Model checkpoint (`CLM1`):
//!
//! ```text
//! magic        4 bytes  "CLM1"
//! mode         u8       0 incremental, 1 cascaded_gates, 2 single_gate
//! tasks        u32      T
//! class counts u32 x T
//! layers       u32      L (number of backbone sizes, input through embedding)
//! sizes        u32 x L
//! gamma, beta  f64 x 2
//! scalers      u32      S
//! pairs        (u32 owner, u32 target) x S
//! parameters   f64 ...  weight then bias of every backbone layer, task head
//!                       and scaler, in that order
//! ```
//!
//! Memory dump (`CLMB`): magic, capacity u32, feature dimension u32, class
//! count u32, then per class its label u32, sample count u32 and the samples
//! as raw f64.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::memory::RehearsalMemory;
use crate::models::{ContinualModel, GateConfig, HeadMode};

pub const MODEL_MAGIC: &[u8; 4] = b"CLM1";
pub const MEMORY_MAGIC: &[u8; 4] = b"CLMB";

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f64s(w: &mut impl Write, vs: &[f64]) -> Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.at)))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64s(&mut self, out: &mut [f64]) -> Result<()> {
        for v in out {
            *v = self.f64()?;
        }
        Ok(())
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let m = self.take(4)?;
        if m != expected {
            return Err(Error::Format(format!(
                "bad magic {m:?}, expected {:?}",
                std::str::from_utf8(expected).unwrap()
            )));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.at != self.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.buf.len() - self.at
            )));
        }
        Ok(())
    }
}

pub fn write_model(model: &ContinualModel, w: &mut impl Write) -> Result<()> {
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&[model.mode().to_byte()])?;
    put_u32(w, model.task_count())?;
    for c in model.class_counts() {
        put_u32(w, c)?;
    }
    let sizes = model.backbone().sizes();
    put_u32(w, sizes.len())?;
    for &s in sizes {
        put_u32(w, s)?;
    }
    let gate = model.gate_config();
    put_f64s(w, &[gate.gamma, gate.beta])?;
    put_u32(w, model.scalers().len())?;
    for s in model.scalers() {
        put_u32(w, s.owner)?;
        put_u32(w, s.target)?;
    }
    for p in model.parameters() {
        put_f64s(w, p.values())?;
    }
    Ok(())
}

pub fn read_model(r: &mut impl Read) -> Result<ContinualModel> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut rd = Reader { buf: &buf, at: 0 };
    rd.magic(MODEL_MAGIC)?;
    let mode_byte = rd.u8()?;
    let mode = HeadMode::from_byte(mode_byte)
        .ok_or_else(|| Error::Format(format!("unknown head mode {mode_byte}")))?;
    let tasks = rd.u32()?;
    let class_counts = (0..tasks).map(|_| rd.u32()).collect::<Result<Vec<_>>>()?;
    let layers = rd.u32()?;
    let sizes = (0..layers).map(|_| rd.u32()).collect::<Result<Vec<_>>>()?;
    let gate = GateConfig {
        gamma: rd.f64()?,
        beta: rd.f64()?,
    };
    let scalers = rd.u32()?;
    let pairs = (0..scalers)
        .map(|_| Ok((rd.u32()?, rd.u32()?)))
        .collect::<Result<Vec<_>>>()?;
    let mut model = ContinualModel::from_parts(&sizes, mode, gate, &class_counts, &pairs)
        .map_err(|e| Error::Format(e.to_string()))?;
    for p in model.parameters_mut() {
        rd.f64s(p.values_mut())?;
    }
    rd.finish()?;
    Ok(model)
}

pub fn write_memory(memory: &RehearsalMemory, w: &mut impl Write) -> Result<()> {
    w.write_all(MEMORY_MAGIC)?;
    put_u32(w, memory.capacity())?;
    put_u32(w, memory.feature_dim())?;
    put_u32(w, memory.entries().len())?;
    for (&c, samples) in memory.entries() {
        put_u32(w, c)?;
        put_u32(w, samples.len())?;
        for s in samples {
            put_f64s(w, s)?;
        }
    }
    Ok(())
}

pub fn read_memory(r: &mut impl Read) -> Result<RehearsalMemory> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut rd = Reader { buf: &buf, at: 0 };
    rd.magic(MEMORY_MAGIC)?;
    let capacity = rd.u32()?;
    let dim = rd.u32()?;
    let classes = rd.u32()?;
    let mut entries = BTreeMap::new();
    for _ in 0..classes {
        let label = rd.u32()?;
        let n = rd.u32()?;
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let mut s = vec![0.0; dim];
            rd.f64s(&mut s)?;
            samples.push(s);
        }
        entries.insert(label, samples);
    }
    rd.finish()?;
    Ok(RehearsalMemory::from_entries(capacity, dim, entries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Stream};
    use crate::scenario::Batch;

    #[test]
    fn model_header_layout() {
        let mut m = ContinualModel::new(&[3, 4], HeadMode::CascadedGates, GateConfig::default(), 1)
            .unwrap();
        m.add_task(2).unwrap();
        m.add_task(3).unwrap();
        let mut bytes = Vec::new();
        write_model(&m, &mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"CLM1");
        assert_eq!(bytes[4], 1);
        assert_eq!(&bytes[5..9], &2u32.to_le_bytes());
        assert_eq!(&bytes[9..13], &2u32.to_le_bytes());
        assert_eq!(&bytes[13..17], &3u32.to_le_bytes());
        let floats: usize = m.count_parameters().total();
        let header = 4 + 1 + 4 + 8 + 4 + 8 + 16 + 4 + 8;
        assert_eq!(bytes.len(), header + 8 * floats);
    }

    #[test]
    fn model_round_trip_preserves_outputs() {
        let mut m = ContinualModel::new(
            &[3, 5, 4],
            HeadMode::SingleGate,
            GateConfig {
                gamma: 0.5,
                beta: 4.0,
            },
            2,
        )
        .unwrap();
        for _ in 0..3 {
            m.add_task(2).unwrap();
        }
        m.randomize_all(&mut rng::stream(5, Stream::Synthetic), 0.7);
        let mut bytes = Vec::new();
        write_model(&m, &mut bytes).unwrap();
        let back = read_model(&mut bytes.as_slice()).unwrap();
        let x = [0.1, -0.4, 0.9, 1.2, 0.0, -0.3];
        assert_eq!(back.logits(&x).unwrap(), m.logits(&x).unwrap());
        assert_eq!(back.mode(), HeadMode::SingleGate);
    }

    #[test]
    fn corrupt_model_is_rejected() {
        let mut m =
            ContinualModel::new(&[3, 4], HeadMode::Incremental, GateConfig::default(), 1).unwrap();
        m.add_task(2).unwrap();
        let mut bytes = Vec::new();
        write_model(&m, &mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_model(&mut bad.as_slice()),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            read_model(&mut &bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn memory_round_trip() {
        let mut mem = RehearsalMemory::new(6, 2, 0);
        let batch = Batch {
            features: (0..16).map(f64::from).collect(),
            labels: vec![0, 0, 0, 0, 1, 1, 1, 1],
        };
        mem.update_after_task(&batch, 2).unwrap();
        let mut bytes = Vec::new();
        write_memory(&mem, &mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"CLMB");
        let back = read_memory(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.entries(), mem.entries());
        assert_eq!(back.capacity(), 6);
    }
}
