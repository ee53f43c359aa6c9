//! Independent oracles shared by the integration tests. Nothing here reuses
//! the crate's codecs, clustering or metric code.

#![allow(dead_code)]

use std::collections::{BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wildfire::nn::{Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Fraction of (positive, negative) pairs ordered correctly, ties counting ½.
pub fn pair_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut good, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                good += 1.0;
            } else if si == sj {
                good += 0.5;
            }
        }
    }
    good / pairs
}

/// Plain per-pixel binary cross-entropy, averaged.
pub fn scalar_bce(logits: &[f64], labels: &[u8]) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            let p = 1.0 / (1.0 + (-z).exp());
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / logits.len() as f64
}

/// Single-linkage clusters of `fire` pixels by breadth-first search over all
/// pairs within `reach` pixels.
pub fn bfs_clusters(fire: &[(usize, usize)], reach: f64) -> BTreeSet<BTreeSet<(usize, usize)>> {
    let near = |a: (usize, usize), b: (usize, usize)| {
        let dr = a.0 as f64 - b.0 as f64;
        let dc = a.1 as f64 - b.1 as f64;
        (dr * dr + dc * dc).sqrt() <= reach + 1e-9
    };
    let mut seen = vec![false; fire.len()];
    let mut out = BTreeSet::new();
    for start in 0..fire.len() {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut cluster = BTreeSet::new();
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            cluster.insert(fire[i]);
            for j in 0..fire.len() {
                if !seen[j] && near(fire[i], fire[j]) {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        out.insert(cluster);
    }
    out
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    /// Entries whose ±ε evaluations straddle a ReLU or pooling switch.
    pub skipped: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

impl FdReport {
    pub fn merge(&mut self, other: FdReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.worst = self.worst.max(other.worst);
        self.failures.extend(other.failures);
    }
}

pub const FD_EPS: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Differences below this are float64 noise in the central difference itself.
pub const FD_ABS_FLOOR: f64 = 1e-9;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff < FD_ABS_FLOOR {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

/// Central differences of the scalar built by `f` with respect to every
/// input tensor. With `per_tensor = Some(k)` only `k` random entries of each
/// input are probed.
pub fn fd_check(
    inputs: &[Tensor],
    per_tensor: Option<usize>,
    seed: u64,
    f: impl Fn(&mut Tape, &[Var]) -> Var,
) -> FdReport {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let loss = f(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let base_sig = tape.region_signature();

    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let loss = f(&mut tape, &vars);
        (tape.value(loss).item().unwrap(), tape.region_signature())
    };

    let mut pick = rng(seed ^ 0x5eed);
    let mut report = FdReport::default();
    let mut xs = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let grad = tape
            .grad(*v)
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape().to_vec()));
        let n = inputs[k].numel();
        let entries: Vec<usize> = match per_tensor {
            Some(m) if m < n => (0..m).map(|_| pick.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for i in entries {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + FD_EPS;
            let (up, sig_up) = eval(&xs);
            xs[k].data_mut()[i] = orig - FD_EPS;
            let (down, sig_down) = eval(&xs);
            xs[k].data_mut()[i] = orig;
            if sig_up != base_sig || sig_down != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * FD_EPS);
            let err = rel_err(grad.data()[i], numeric);
            report.checked += 1;
            report.worst = report.worst.max(err);
            if err >= FD_REL_TOL {
                report.failures.push(format!(
                    "input {k} entry {i}: analytic {} numeric {numeric} rel {err:e}",
                    grad.data()[i]
                ));
            }
        }
    }
    report
}

pub fn uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng)
}

// ---- independent byte layouts -------------------------------------------

pub struct Cursor<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    pub fn bytes(&mut self, n: usize) -> &'a [u8] {
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        out
    }

    pub fn u8(&mut self) -> u8 {
        self.bytes(1)[0]
    }

    pub fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.bytes(2).try_into().unwrap())
    }

    pub fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.bytes(4).try_into().unwrap())
    }

    pub fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.bytes(8).try_into().unwrap())
    }

    pub fn i64(&mut self) -> i64 {
        i64::from_le_bytes(self.bytes(8).try_into().unwrap())
    }

    pub fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.bytes(4).try_into().unwrap())
    }

    pub fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.bytes(8).try_into().unwrap())
    }

    pub fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

#[derive(Debug, PartialEq)]
pub struct RawStack {
    pub height: usize,
    pub width: usize,
    pub names: Vec<String>,
    pub planes: Vec<Vec<f32>>,
    pub mask: Vec<i8>,
    pub date: i64,
    pub geo: [f64; 3],
}

pub fn write_raw_stack(s: &RawStack) -> Vec<u8> {
    let mut out = b"WFRS".to_vec();
    out.push(1);
    out.extend((s.height as u32).to_le_bytes());
    out.extend((s.width as u32).to_le_bytes());
    out.extend((s.names.len() as u16).to_le_bytes());
    for n in &s.names {
        out.push(n.len() as u8);
        out.extend(n.as_bytes());
    }
    for p in &s.planes {
        for v in p {
            out.extend(v.to_le_bytes());
        }
    }
    out.extend(s.mask.iter().map(|&v| v as u8));
    out.extend(s.date.to_le_bytes());
    for g in s.geo {
        out.extend(g.to_le_bytes());
    }
    out
}

pub fn parse_raw_stack(bytes: &[u8]) -> RawStack {
    let mut c = Cursor::new(bytes);
    assert_eq!(c.bytes(4), b"WFRS");
    assert_eq!(c.u8(), 1);
    let height = c.u32() as usize;
    let width = c.u32() as usize;
    let count = c.u16() as usize;
    let names: Vec<String> = (0..count)
        .map(|_| {
            let n = c.u8() as usize;
            String::from_utf8(c.bytes(n).to_vec()).unwrap()
        })
        .collect();
    let planes = (0..count)
        .map(|_| (0..height * width).map(|_| c.f32()).collect())
        .collect();
    let mask = c.bytes(height * width).iter().map(|&b| b as i8).collect();
    let date = c.i64();
    let geo = [c.f64(), c.f64(), c.f64()];
    assert!(c.done(), "trailing bytes");
    RawStack {
        height,
        width,
        names,
        planes,
        mask,
        date,
        geo,
    }
}

#[derive(Debug, PartialEq)]
pub struct RawSample {
    pub kind: u8,
    pub task: u8,
    pub split: u8,
    pub date: i64,
    pub origin: (u32, u32),
    pub steps: u8,
    pub channels: u16,
    pub tile: u16,
    pub features: Vec<f32>,
    pub labels: Vec<i8>,
}

pub fn parse_raw_dataset(bytes: &[u8]) -> Vec<RawSample> {
    let mut c = Cursor::new(bytes);
    assert_eq!(c.bytes(4), b"WFDS");
    assert_eq!(c.u8(), 1);
    let count = c.u64() as usize;
    let samples = (0..count)
        .map(|_| {
            let (kind, task, split) = (c.u8(), c.u8(), c.u8());
            let date = c.i64();
            let origin = (c.u32(), c.u32());
            let steps = c.u8();
            let channels = c.u16();
            let tile = c.u16();
            let n = steps as usize * channels as usize * tile as usize * tile as usize;
            let features = (0..n).map(|_| c.f32()).collect();
            let labels = c
                .bytes(tile as usize * tile as usize)
                .iter()
                .map(|&b| b as i8)
                .collect();
            RawSample {
                kind,
                task,
                split,
                date,
                origin,
                steps,
                channels,
                tile,
                features,
                labels,
            }
        })
        .collect();
    assert!(c.done(), "trailing bytes");
    samples
}

pub type RawParam = (String, Vec<u32>, Vec<f64>);

pub fn write_raw_checkpoint(params: &[RawParam]) -> Vec<u8> {
    let mut out = b"WFCK".to_vec();
    out.push(1);
    out.extend((params.len() as u32).to_le_bytes());
    for (name, dims, data) in params {
        out.extend((name.len() as u16).to_le_bytes());
        out.extend(name.as_bytes());
        out.push(dims.len() as u8);
        for d in dims {
            out.extend(d.to_le_bytes());
        }
        for v in data {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

pub fn parse_raw_checkpoint(bytes: &[u8]) -> Vec<RawParam> {
    let mut c = Cursor::new(bytes);
    assert_eq!(c.bytes(4), b"WFCK");
    assert_eq!(c.u8(), 1);
    let count = c.u32() as usize;
    let params = (0..count)
        .map(|_| {
            let n = c.u16() as usize;
            let name = String::from_utf8(c.bytes(n).to_vec()).unwrap();
            let rank = c.u8() as usize;
            let dims: Vec<u32> = (0..rank).map(|_| c.u32()).collect();
            let numel: usize = dims.iter().map(|&d| d as usize).product();
            let data = (0..numel).map(|_| c.f64()).collect();
            (name, dims, data)
        })
        .collect();
    assert!(c.done(), "trailing bytes");
    params
}
