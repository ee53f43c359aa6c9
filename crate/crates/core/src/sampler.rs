//! Fire clustering, tile extraction, weekly splits and the three task
//! datasets (daily, weekly-aggregated, and week-long sequences).

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Day, FireMask, GeoTransform, Grid, RasterStack, FIRE, NO_FIRE, UNCERTAIN};

/// Length of a split block in days.
pub const BLOCK_DAYS: i64 = 7;

/// Number of daily frames in a sequence sample.
pub const SEQUENCE_LEN: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub tile_size: usize,
    /// Fire pixels closer than this (km, center to center) join one cluster.
    pub cluster_merge_distance: f64,
    /// Negative tiles drawn per positive tile.
    pub negative_ratio: f64,
    /// Relative weights of train, validation and test blocks.
    pub split_ratio: [f64; 3],
    pub buffer_days: i64,
    pub aggregation_window: usize,
    pub rng_seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            tile_size: 128,
            cluster_merge_distance: 10.0,
            negative_ratio: 2.0,
            split_ratio: [6.0, 1.0, 1.0],
            buffer_days: 1,
            aggregation_window: 7,
            rng_seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.tile_size == 0 {
            return bad("tile_size must be positive".into());
        }
        if !(self.cluster_merge_distance > 0.0) {
            return bad("cluster_merge_distance must be positive".into());
        }
        if !(self.negative_ratio >= 0.0) {
            return bad("negative_ratio must be non-negative".into());
        }
        if self.split_ratio.iter().any(|r| !(*r > 0.0)) {
            return bad(format!("split_ratio {:?} must be positive", self.split_ratio));
        }
        if !(0..BLOCK_DAYS).contains(&self.buffer_days) {
            return bad(format!("buffer_days must lie in 0..{BLOCK_DAYS}"));
        }
        if self.aggregation_window == 0 {
            return bad("aggregation_window must be positive".into());
        }
        Ok(())
    }

    /// Negative tiles to draw for `n_positive` positives.
    pub fn negative_target(&self, n_positive: usize) -> usize {
        (self.negative_ratio * n_positive as f64).round() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Split> {
        Split::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Split assignment of one calendar day.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DaySplit {
    Split(Split),
    Excluded,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Daily,
    Aggregated,
    Sequence,
}

impl Task {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Task> {
        [Task::Daily, Task::Aggregated, Task::Sequence]
            .get(code as usize)
            .copied()
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Daily => "daily",
            Task::Aggregated => "aggregated",
            Task::Sequence => "sequence",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "daily" => Ok(Task::Daily),
            "aggregated" => Ok(Task::Aggregated),
            "sequence" => Ok(Task::Sequence),
            other => Err(Error::InvalidConfig(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TileKind {
    Positive,
    Negative,
}

/// Connected set of fire pixels under the merge-distance chain rule.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FireCluster {
    /// Member pixels in row-major order.
    pub pixels: Vec<(usize, usize)>,
    pub date: Day,
}

impl FireCluster {
    /// Pixel centroid, rounded to the nearest pixel.
    pub fn centroid(&self) -> (usize, usize) {
        let n = self.pixels.len() as f64;
        let (sr, sc) = self
            .pixels
            .iter()
            .fold((0.0, 0.0), |(a, b), &(r, c)| (a + r as f64, b + c as f64));
        ((sr / n).round() as usize, (sc / n).round() as usize)
    }
}

/// One feature tile with its label window.
#[derive(Clone, Debug, PartialEq)]
pub struct TileSample {
    /// `[channels, tile, tile]`, row-major.
    pub features: Vec<f32>,
    pub channels: usize,
    pub task: Task,
    pub label: FireMask,
    /// Date of the first label day.
    pub date: Day,
    pub origin: (usize, usize),
    pub split: Split,
    pub kind: TileKind,
}

/// Week-long feature sequence sharing one aggregated label.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    /// `[time, channels, tile, tile]`, row-major, in increasing date order.
    pub features: Vec<f32>,
    pub channels: usize,
    pub steps: usize,
    pub feature_dates: Vec<Day>,
    pub label: FireMask,
    pub date: Day,
    pub origin: (usize, usize),
    pub split: Split,
    pub kind: TileKind,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Sample {
    Tile(TileSample),
    Sequence(SequenceSample),
}

impl Sample {
    pub fn label(&self) -> &FireMask {
        match self {
            Sample::Tile(t) => &t.label,
            Sample::Sequence(s) => &s.label,
        }
    }

    pub fn features(&self) -> &[f32] {
        match self {
            Sample::Tile(t) => &t.features,
            Sample::Sequence(s) => &s.features,
        }
    }

    pub fn split(&self) -> Split {
        match self {
            Sample::Tile(t) => t.split,
            Sample::Sequence(s) => s.split,
        }
    }

    pub fn date(&self) -> Day {
        match self {
            Sample::Tile(t) => t.date,
            Sample::Sequence(s) => s.date,
        }
    }

    pub fn kind(&self) -> TileKind {
        match self {
            Sample::Tile(t) => t.kind,
            Sample::Sequence(s) => s.kind,
        }
    }

    pub fn origin(&self) -> (usize, usize) {
        match self {
            Sample::Tile(t) => t.origin,
            Sample::Sequence(s) => s.origin,
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            Sample::Tile(t) => t.channels,
            Sample::Sequence(s) => s.channels,
        }
    }

    /// Frames per sample; 0 for single tiles.
    pub fn steps(&self) -> usize {
        match self {
            Sample::Tile(_) => 0,
            Sample::Sequence(s) => s.steps,
        }
    }

    pub fn tile(&self) -> usize {
        self.label().height()
    }

    pub fn task(&self) -> Task {
        match self {
            Sample::Tile(t) => t.task,
            Sample::Sequence(_) => Task::Sequence,
        }
    }

    /// Keeps only the final frame of a sequence, giving an aggregated-task
    /// tile; tiles pass through.
    pub fn last_frame(&self) -> Sample {
        match self {
            Sample::Tile(_) => self.clone(),
            Sample::Sequence(s) => {
                let frame = s.features.len() / s.steps;
                Sample::Tile(TileSample {
                    features: s.features[(s.steps - 1) * frame..].to_vec(),
                    channels: s.channels,
                    task: Task::Aggregated,
                    label: s.label.clone(),
                    date: s.date,
                    origin: s.origin,
                    split: s.split,
                    kind: s.kind,
                })
            }
        }
    }
}

/// Single-linkage clustering of fire pixels: two fire pixels share a cluster
/// iff a chain of fire pixels joins them with every hop at most `merge_km`
/// (pixel-center Euclidean distance). Clusters are ordered by their first
/// pixel in row-major order.
pub fn find_fire_clusters(mask: &FireMask, geo: &GeoTransform, merge_km: f64, date: Day) -> Vec<FireCluster> {
    let (h, w) = mask.shape();
    let reach = merge_km * 1000.0 / geo.pixel_size;
    let radius = reach.floor() as isize;
    let offsets: Vec<(isize, isize)> = (-radius..=radius)
        .flat_map(|dr| (-radius..=radius).map(move |dc| (dr, dc)))
        .filter(|&(dr, dc)| ((dr * dr + dc * dc) as f64).sqrt() <= reach + 1e-9 && (dr, dc) != (0, 0))
        .collect();

    let mut label = vec![usize::MAX; h * w];
    let mut clusters = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if mask.data()[start] != FIRE || label[start] != usize::MAX {
            continue;
        }
        let id = clusters.len();
        label[start] = id;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(p) = queue.pop_front() {
            let (r, c) = ((p / w) as isize, (p % w) as isize);
            pixels.push((r as usize, c as usize));
            for &(dr, dc) in &offsets {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let q = nr as usize * w + nc as usize;
                if mask.data()[q] == FIRE && label[q] == usize::MAX {
                    label[q] = id;
                    queue.push_back(q);
                }
            }
        }
        pixels.sort_unstable();
        clusters.push(FireCluster { pixels, date });
    }
    clusters
}

/// Top-left corner of the `tile`-sized window centered on `center` and
/// clamped into an `h`x`w` grid.
pub fn centered_origin(center: (usize, usize), tile: usize, h: usize, w: usize) -> (usize, usize) {
    let place =
        |c: usize, extent: usize| (c as isize - (tile / 2) as isize).clamp(0, (extent - tile) as isize) as usize;
    (place(center.0, h), place(center.1, w))
}

fn check_grid(h: usize, w: usize, tile: usize) -> Result<()> {
    if h < tile || w < tile {
        return Err(Error::GridTooSmall {
            height: h,
            width: w,
            tile,
        });
    }
    Ok(())
}

/// Copies the `[channels, tile, tile]` feature window at `origin`.
pub fn feature_window(stack: &RasterStack, origin: (usize, usize), tile: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(stack.channels().len() * tile * tile);
    for ch in stack.channels() {
        for r in origin.0..origin.0 + tile {
            let row = &ch.plane.data()[r * stack.width() + origin.1..][..tile];
            out.extend_from_slice(row);
        }
    }
    out
}

/// One positive tile per cluster, centered on its centroid and clamped into
/// the grid. The label is the stack's own fire mask over the window.
pub fn extract_positive_tiles(
    stack: &RasterStack,
    clusters: &[FireCluster],
    cfg: &SamplerConfig,
) -> Result<Vec<TileSample>> {
    let tile = cfg.tile_size;
    check_grid(stack.height(), stack.width(), tile)?;
    Ok(clusters
        .iter()
        .map(|cl| {
            let origin = centered_origin(cl.centroid(), tile, stack.height(), stack.width());
            TileSample {
                features: feature_window(stack, origin, tile),
                channels: stack.channels().len(),
                task: Task::Daily,
                label: stack.fire_mask().window(origin.0, origin.1, tile),
                date: stack.date(),
                origin,
                split: Split::Train,
                kind: TileKind::Positive,
            }
        })
        .collect())
}

/// Whether the `tile` window at `origin` holds no fire pixel.
pub fn window_is_fire_free(mask: &FireMask, origin: (usize, usize), tile: usize) -> bool {
    (origin.0..origin.0 + tile).all(|r| {
        mask.data()[r * mask.width() + origin.1..][..tile]
            .iter()
            .all(|&v| v != FIRE)
    })
}

/// Uniformly placed fire-free tiles, `negative_ratio * n_positive` of them.
/// Rejection sampling gives up after `1000 * target` attempts.
pub fn sample_negative_tiles(
    stack: &RasterStack,
    n_positive: usize,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Vec<TileSample>> {
    let tile = cfg.tile_size;
    check_grid(stack.height(), stack.width(), tile)?;
    let target = cfg.negative_target(n_positive);
    let max_attempts = target.saturating_mul(1000);
    let mut out = Vec::with_capacity(target);
    let mut attempts = 0;
    while out.len() < target {
        if attempts == max_attempts {
            return Err(Error::SamplingExhausted {
                achieved: out.len(),
                target,
                attempts,
            });
        }
        attempts += 1;
        let origin = (
            rng.random_range(0..=stack.height() - tile),
            rng.random_range(0..=stack.width() - tile),
        );
        if window_is_fire_free(stack.fire_mask(), origin, tile) {
            out.push(TileSample {
                features: feature_window(stack, origin, tile),
                channels: stack.channels().len(),
                task: Task::Daily,
                label: stack.fire_mask().window(origin.0, origin.1, tile),
                date: stack.date(),
                origin,
                split: Split::Train,
                kind: TileKind::Negative,
            });
        }
    }
    Ok(out)
}

/// Groups dates into consecutive 7-day blocks anchored at the earliest date,
/// draws each block's split with probabilities proportional to
/// `split_ratio`, and excludes the last `buffer_days` days of every block.
pub fn assign_splits(dates: &[Day], cfg: &SamplerConfig, rng: &mut impl Rng) -> BTreeMap<Day, DaySplit> {
    let Some(&first) = dates.iter().min() else {
        return BTreeMap::new();
    };
    let last = *dates.iter().max().expect("nonempty");
    let n_blocks = (last.0 - first.0) / BLOCK_DAYS + 1;
    let total: f64 = cfg.split_ratio.iter().sum();
    let blocks: Vec<Split> = (0..n_blocks)
        .map(|_| {
            let u: f64 = rng.random::<f64>() * total;
            if u < cfg.split_ratio[0] {
                Split::Train
            } else if u < cfg.split_ratio[0] + cfg.split_ratio[1] {
                Split::Val
            } else {
                Split::Test
            }
        })
        .collect();
    dates
        .iter()
        .map(|&d| {
            let offset = d.0 - first.0;
            let assignment = if offset % BLOCK_DAYS >= BLOCK_DAYS - cfg.buffer_days {
                DaySplit::Excluded
            } else {
                DaySplit::Split(blocks[(offset / BLOCK_DAYS) as usize])
            };
            (d, assignment)
        })
        .collect()
}

/// Per-pixel union of daily masks with precedence fire > uncertain > no fire.
pub fn aggregate_masks(masks: &[&FireMask]) -> Result<FireMask> {
    let first = masks.first().ok_or_else(|| Error::shape("aggregate of zero masks"))?;
    let shape = first.shape();
    if let Some(m) = masks.iter().find(|m| m.shape() != shape) {
        return Err(Error::shape(format!(
            "aggregate of {:?} and {:?} masks",
            shape,
            m.shape()
        )));
    }
    let mut out = Grid::filled(shape.0, shape.1, NO_FIRE);
    for m in masks {
        for (o, &v) in out.data_mut().iter_mut().zip(m.data()) {
            *o = match (*o, v) {
                (FIRE, _) | (_, FIRE) => FIRE,
                (UNCERTAIN, _) | (_, UNCERTAIN) => UNCERTAIN,
                _ => NO_FIRE,
            };
        }
    }
    Ok(out)
}

/// Independent random stream for one label date.
pub fn date_rng(seed: u64, date: Day) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(date.0 as u64);
    rng
}

/// Stream used for split assignment; distinct from every per-date stream.
fn split_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    rng
}

/// Split of every date covered by `stacks`, as used by [`build_dataset`].
pub fn split_table(stacks: &[RasterStack], cfg: &SamplerConfig) -> BTreeMap<Day, DaySplit> {
    let dates: Vec<Day> = stacks.iter().map(|s| s.date()).collect();
    assign_splits(&dates, cfg, &mut split_rng(cfg.rng_seed))
}

/// Builds one task's samples from time-ordered, consecutive daily stacks.
///
/// For feature day `t`:
/// * daily: features of `t`, label = fire mask of `t + 1`;
/// * aggregated: features of `t`, label = aggregate of days `t+1 ..= t+W`;
/// * sequence: features of `t-6 ..= t`, label as for aggregated.
///
/// `W` is `aggregation_window`. Each sample takes the split of its first label
/// day; label days in a buffer are skipped, as are `t` whose windows fall off
/// either end of the range. Positive tiles come from clusters in the label
/// mask; negatives are drawn from the same label date.
pub fn build_dataset(stacks: &[RasterStack], cfg: &SamplerConfig, task: Task) -> Result<Vec<Sample>> {
    cfg.validate()?;
    if stacks.is_empty() {
        return Ok(Vec::new());
    }
    for pair in stacks.windows(2) {
        if pair[1].date().0 != pair[0].date().0 + 1 {
            return Err(Error::InvalidConfig(format!(
                "stacks must cover consecutive dates; {} follows {}",
                pair[1].date(),
                pair[0].date()
            )));
        }
    }
    let splits = split_table(stacks, cfg);
    let horizon = match task {
        Task::Daily => 1,
        Task::Aggregated | Task::Sequence => cfg.aggregation_window,
    };
    let history = match task {
        Task::Sequence => SEQUENCE_LEN - 1,
        _ => 0,
    };
    let candidates: Vec<usize> = (history..stacks.len().saturating_sub(horizon)).collect();

    let per_day: Vec<Vec<Sample>> = candidates
        .par_iter()
        .map(|&t| -> Result<Vec<Sample>> {
            let label_day = stacks[t + 1].date();
            let split = match splits[&label_day] {
                DaySplit::Excluded => return Ok(Vec::new()),
                DaySplit::Split(s) => s,
            };
            let label_mask = match task {
                Task::Daily => stacks[t + 1].fire_mask().clone(),
                _ => {
                    let window: Vec<&FireMask> = stacks[t + 1..=t + horizon].iter().map(|s| s.fire_mask()).collect();
                    aggregate_masks(&window)?
                }
            };
            let label_stack = stacks[t].with_fire_mask(label_mask)?;
            let clusters = find_fire_clusters(
                label_stack.fire_mask(),
                &label_stack.geo(),
                cfg.cluster_merge_distance,
                label_day,
            );
            let mut tiles = extract_positive_tiles(&label_stack, &clusters, cfg)?;
            let mut rng = date_rng(cfg.rng_seed, label_day);
            tiles.extend(sample_negative_tiles(&label_stack, tiles.len(), cfg, &mut rng)?);

            Ok(tiles
                .into_iter()
                .map(|mut tile| {
                    tile.split = split;
                    tile.date = label_day;
                    tile.task = task;
                    match task {
                        Task::Sequence => {
                            let frames = &stacks[t - history..=t];
                            let mut features = Vec::with_capacity(tile.features.len() * frames.len());
                            for s in frames {
                                features.extend(feature_window(s, tile.origin, cfg.tile_size));
                            }
                            Sample::Sequence(SequenceSample {
                                features,
                                channels: tile.channels,
                                steps: frames.len(),
                                feature_dates: frames.iter().map(|s| s.date()).collect(),
                                label: tile.label,
                                date: label_day,
                                origin: tile.origin,
                                split,
                                kind: tile.kind,
                            })
                        }
                        _ => Sample::Tile(tile),
                    }
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_day.into_iter().flatten().collect())
}
