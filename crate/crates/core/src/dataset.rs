//! Sample collections, batching and the WFDS dataset file.
//!
//! WFDS layout (little-endian): magic `WFDS`, version u8 = 1, sample count
//! u64, then per sample a header `kind u8, task u8, split u8, date i64,
//! origin 2 x u32, time-steps u8, channels u16, tile u16`, the float32
//! feature payload (`time-steps * channels * tile * tile` values) and the
//! int8 label payload (`tile * tile` values). Single tiles store one time
//! step; sequence samples are those whose task is `sequence`.

use std::path::Path;

use crate::codec::{self, Reader};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::nn::Tensor;
use crate::raster::{Day, Grid};
use crate::sampler::{Sample, SequenceSample, Split, Task, TileKind, TileSample};

const MAGIC: &[u8; 4] = b"WFDS";
const VERSION: u8 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Dataset { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Task of the first sample.
    pub fn task(&self) -> Option<Task> {
        self.samples.first().map(Sample::task)
    }

    pub fn split(&self, split: Split) -> Dataset {
        Dataset::new(self.samples.iter().filter(|s| s.split() == split).cloned().collect())
    }

    /// Sequence samples reduced to their last frame.
    pub fn last_frame(&self) -> Dataset {
        Dataset::new(self.samples.iter().map(Sample::last_frame).collect())
    }

    pub fn positives(&self) -> usize {
        self.samples.iter().filter(|s| s.kind() == TileKind::Positive).count()
    }

    /// Checks that every sample fits the model's input contract.
    pub fn check_model(&self, model: &Model) -> Result<()> {
        let cfg = model.config();
        for s in &self.samples {
            let is_seq = matches!(s, Sample::Sequence(_));
            if is_seq != cfg.arch.is_sequence() {
                return Err(Error::TaskMismatch(format!(
                    "{} model cannot consume {} samples",
                    cfg.arch,
                    s.task()
                )));
            }
            if s.channels() != cfg.in_channels || s.tile() != cfg.tile {
                return Err(Error::Shape(format!(
                    "sample has {} channels at tile {}, model expects {} at {}",
                    s.channels(),
                    s.tile(),
                    cfg.in_channels,
                    cfg.tile
                )));
            }
        }
        Ok(())
    }

    /// Stacks the selected samples into a model input plus flat labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<i8>)> {
        let first = self
            .samples
            .get(
                *indices
                    .first()
                    .ok_or_else(|| Error::EmptyDataset("empty batch".into()))?,
            )
            .ok_or_else(|| Error::Shape("batch index out of range".into()))?;
        let (c, tile, steps) = (first.channels(), first.tile(), first.steps());
        let mut features = Vec::with_capacity(indices.len() * first.features().len());
        let mut labels = Vec::with_capacity(indices.len() * tile * tile);
        for &i in indices {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::Shape(format!("batch index {i} out of range")))?;
            if (s.channels(), s.tile(), s.steps()) != (c, tile, steps) {
                return Err(Error::Shape("mixed sample shapes in one batch".into()));
            }
            features.extend(s.features().iter().map(|&v| v as f64));
            labels.extend_from_slice(s.label().data());
        }
        let shape = if steps == 0 {
            vec![indices.len(), c, tile, tile]
        } else {
            vec![indices.len(), steps, c, tile, tile]
        };
        Ok((Tensor::new(shape, features)?, labels))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.samples.len() as u64).to_le_bytes());
        for s in &self.samples {
            let overflow = || Error::DimensionOverflow("sample header field".into());
            let kind: u8 = match s.kind() {
                TileKind::Positive => 0,
                TileKind::Negative => 1,
            };
            out.push(kind);
            out.push(s.task().code());
            out.push(s.split().code());
            out.extend_from_slice(&s.date().0.to_le_bytes());
            for o in [s.origin().0, s.origin().1] {
                out.extend_from_slice(&u32::try_from(o).map_err(|_| overflow())?.to_le_bytes());
            }
            out.push(u8::try_from(s.steps().max(1)).map_err(|_| overflow())?);
            out.extend_from_slice(&u16::try_from(s.channels()).map_err(|_| overflow())?.to_le_bytes());
            out.extend_from_slice(&u16::try_from(s.tile()).map_err(|_| overflow())?.to_le_bytes());
            codec::put_f32_slice(&mut out, s.features());
            out.extend(s.label().data().iter().map(|&v| v as u8));
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Dataset> {
        let mut r = Reader::new(bytes, "WFDS");
        r.expect_header(MAGIC, VERSION)?;
        let count = r.u64()?;
        let mut samples = Vec::with_capacity((count as usize).min(1 << 16));
        for _ in 0..count {
            let kind = match r.u8()? {
                0 => TileKind::Positive,
                1 => TileKind::Negative,
                k => return Err(r.malformed(format!("sample kind {k}"))),
            };
            let task_code = r.u8()?;
            let task = Task::from_code(task_code).ok_or_else(|| r.malformed(format!("task {task_code}")))?;
            let split_code = r.u8()?;
            let split = Split::from_code(split_code).ok_or_else(|| r.malformed(format!("split {split_code}")))?;
            let date = Day(r.i64()?);
            let origin = (r.u32()? as usize, r.u32()? as usize);
            let steps = r.u8()? as usize;
            let channels = r.u16()? as usize;
            let tile = r.u16()? as usize;
            if steps == 0 {
                return Err(r.malformed("zero time steps"));
            }
            if task != Task::Sequence && steps != 1 {
                return Err(r.malformed(format!("{task} sample with {steps} time steps")));
            }
            let n = steps * channels * tile * tile;
            let features = r.f32_vec(n)?;
            let raw = r.i8_vec(tile * tile)?;
            if raw.iter().any(|v| !(-1..=1).contains(v)) {
                return Err(r.malformed("label value outside {-1, 0, 1}"));
            }
            let label = Grid::new(tile, tile, raw)?;
            samples.push(match task {
                Task::Sequence => Sample::Sequence(SequenceSample {
                    features,
                    channels,
                    steps,
                    feature_dates: (1..=steps as i64).rev().map(|k| date.offset(-k)).collect(),
                    label,
                    date,
                    origin,
                    split,
                    kind,
                }),
                _ => Sample::Tile(TileSample {
                    features,
                    channels,
                    task,
                    label,
                    date,
                    origin,
                    split,
                    kind,
                }),
            });
        }
        if r.remaining() != 0 {
            return Err(r.malformed(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Dataset { samples })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        codec::write_file(path.as_ref(), &self.encode()?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Dataset> {
        Dataset::decode(&codec::read_file(path.as_ref())?)
    }
}
